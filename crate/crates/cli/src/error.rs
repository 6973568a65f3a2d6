use abuse_glm::diagnostics::DiagnosticsError;
use abuse_glm::features::FeatureError;
use abuse_glm::glm::GlmError;
use abuse_glm::ingest::IngestError;
use abuse_glm::scenarios::ScenarioError;
use abuse_glm::sim::SimError;
use abuse_glm::twins::TwinsError;

/// Bad flags or unusable input files.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct InputError(pub String);

/// Error raised inside a named pipeline stage.
#[derive(Debug, thiserror::Error)]
#[error("stage `{stage}` failed")]
pub struct StageError {
    pub stage: &'static str,
}

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;

fn glm_is_input(e: &GlmError) -> bool {
    matches!(
        e,
        GlmError::Data(_)
            | GlmError::InvalidSpec(_)
            | GlmError::InvalidResponse { .. }
            | GlmError::EmptyDesign { .. }
            | GlmError::NoColumns
            | GlmError::SingleLevelFactor { .. }
            | GlmError::MissingCovariate(_)
            | GlmError::UnknownLevel { .. }
    )
}

// Transparent wrappers forward `source()` past themselves, so each wrapper
// is inspected explicitly.
fn is_input(e: &(dyn std::error::Error + 'static)) -> bool {
    if e.is::<InputError>()
        || e.is::<IngestError>()
        || e.is::<FeatureError>()
        || e.is::<std::io::Error>()
    {
        return true;
    }
    if let Some(g) = e.downcast_ref::<GlmError>() {
        return glm_is_input(g);
    }
    if let Some(d) = e.downcast_ref::<DiagnosticsError>() {
        return match d {
            DiagnosticsError::Glm(g) => glm_is_input(g),
            DiagnosticsError::Ingest(_) => true,
            _ => false,
        };
    }
    if let Some(t) = e.downcast_ref::<TwinsError>() {
        return !matches!(t, TwinsError::Csv(_) | TwinsError::NoEligibleMatch(_));
    }
    if let Some(s) = e.downcast_ref::<SimError>() {
        return matches!(s, SimError::Config(_));
    }
    if let Some(s) = e.downcast_ref::<ScenarioError>() {
        return match s {
            ScenarioError::Glm(g) => glm_is_input(g),
            ScenarioError::Csv(_) => false,
            _ => true,
        };
    }
    false
}

/// 2 for input problems anywhere in the chain, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.chain().any(is_input) {
        EXIT_INPUT
    } else {
        EXIT_FAILURE
    }
}
