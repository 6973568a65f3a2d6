pub mod diagnostics;
pub mod features;
pub mod glm;
pub mod ingest;
pub mod scenarios;
pub mod sim;
pub mod twins;
