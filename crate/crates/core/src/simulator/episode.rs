//! Episode and scenario-configuration types, plus the simulator error set.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsdag::{Action, SafeState, ScmError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scm(#[from] ScmError),
    #[error("invalid scenario config: {reason}")]
    BadConfig { reason: String },
    #[error("no compatible (vehicle, environment) pair found after {attempts} draws")]
    NoCompatiblePair { attempts: usize },
    #[error("scm declares {scm} factors but the config expects {config}")]
    FactorCountMismatch { scm: usize, config: usize },
    #[error("{factors} factors plus the ego block need more than the {cells} available 32x32 cells")]
    TooManyFactors { factors: usize, cells: usize },
    #[error("factor {factor:?} is a recorded cause and cannot be planted as spurious")]
    SpuriousIsCause { factor: String },
    #[error("episode has an empty state trace")]
    EmptyTrace,
    #[error("episode frame dims {episode:?} do not match config {config:?}")]
    DimsMismatch { episode: [usize; 3], config: [usize; 3] },
    #[error("episode {id:?} carries no rendered clip")]
    MissingClip { id: String },
    #[error("frame sidecar magic mismatch (expected \"CDRV\")")]
    BadMagic,
    #[error("frame sidecar version {got} unsupported (expected {expected})")]
    BadVersion { got: u32, expected: u32 },
    #[error("frame sidecar truncated: expected {expected} bytes of frame data, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("frame sidecar holds {sidecar} clips but the index lists {index} episodes")]
    CountMismatch { sidecar: usize, index: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("episode index parse error at line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
}

/// Per-frame control signals, synthesized from the speed/heading bins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    pub speed_mps: f64,
    pub course_deg: f64,
}

/// One labeled driving episode.
///
/// `render_start` / `render_end` are the factor-value indices the clip was
/// painted from. They start out equal to the endpoint environments of the
/// state trace; planting a spurious factor overrides a single rendered
/// column without touching the trace, so the causal record stays intact.
///
/// The clip is kept out of the JSON index (it lives in the binary sidecar)
/// and reattached on read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    pub state_trace: Vec<(SafeState, Action, SafeState)>,
    pub signals: Vec<Signal>,
    pub narration: String,
    pub reasoning: String,
    /// Names of the factors whose value change made the default action
    /// inadmissible; empty for uneventful episodes.
    pub causal_label: Vec<String>,
    /// Names of factors whose rendered pattern was planted after the fact.
    pub spurious_labels: Vec<String>,
    /// (F, H, W) of the rendered clip.
    pub frame_dims: [usize; 3],
    pub render_start: Vec<usize>,
    pub render_end: Vec<usize>,
    #[serde(skip)]
    pub clip: Vec<f32>,
    pub seed: u64,
}

impl Episode {
    pub fn action(&self) -> Result<Action, SimError> {
        self.state_trace.first().map(|(_, a, _)| *a).ok_or(SimError::EmptyTrace)
    }
}

/// How to plant a spurious correlate: the pattern of `factor` is activated
/// whenever `confounder_factor` takes `confounder_value` at the end of the
/// episode (with probability rho) and deactivated otherwise (activated with
/// probability 1 - rho). Conditioning on the confounder only — never on the
/// action itself — keeps the spurious pattern conditionally independent of
/// the action given the true cause.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpuriousPlan {
    pub factor: String,
    pub confounder_factor: String,
    pub confounder_value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub num_factors: usize,
    pub spurious_rho: f64,
    /// (F, H, W); frames carry 3 channels.
    pub frame_dims: [usize; 3],
    pub noise_sigma: f64,
    pub episodes: usize,
    pub seed: u64,
    #[serde(default)]
    pub spurious: Option<SpuriousPlan>,
    /// Skip clip rendering (label-statistics workflows only).
    #[serde(default = "default_render")]
    pub render: bool,
}

fn default_render() -> bool {
    true
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |reason: String| Err(SimError::BadConfig { reason });
        let [f, h, w] = self.frame_dims;
        if f == 0 || f % 2 != 0 {
            return bad(format!("frame count {f} must be even and positive"));
        }
        if h == 0 || h % 32 != 0 || w == 0 || w % 32 != 0 {
            return bad(format!("frame size {h}x{w} must be a positive multiple of 32"));
        }
        if !(0.0..1.0).contains(&self.spurious_rho) {
            return bad(format!(
                "spurious_rho {} must lie in [0, 1); perfect correlation would make the label unidentifiable",
                self.spurious_rho
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma {} must be >= 0", self.noise_sigma));
        }
        if self.num_factors < 1 {
            return bad("num_factors must be >= 1".into());
        }
        if self.episodes < 1 {
            return bad("episode count must be >= 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ScenarioConfig {
        ScenarioConfig {
            num_factors: 4,
            spurious_rho: 0.9,
            frame_dims: [4, 64, 96],
            noise_sigma: 0.0,
            episodes: 1,
            seed: 0,
            spurious: None,
            render: true,
        }
    }

    #[test]
    fn valid_config_accepted() {
        assert!(base().validate().is_ok());
    }

    #[test]
    fn perfect_correlation_rejected() {
        let cfg = ScenarioConfig { spurious_rho: 1.0, ..base() };
        assert!(matches!(cfg.validate(), Err(SimError::BadConfig { .. })));
    }

    #[test]
    fn indivisible_dims_rejected() {
        for dims in [[3, 64, 96], [4, 48, 96], [4, 64, 100]] {
            let cfg = ScenarioConfig { frame_dims: dims, ..base() };
            assert!(cfg.validate().is_err(), "{dims:?}");
        }
    }
}
