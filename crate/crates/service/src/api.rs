//! Wire types and the translation from a create request to a live session.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use icount::counter::{synthesize_counter_for_density, CounterOptions, Miscalibration};
use icount::density::{render_density, DotScene};
use icount::formats::{dgrid_from_bytes, dgrid_to_bytes};
use icount::session::{InteractiveSession, SessionConfig, SessionState};
use icount::DensityGrid;
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

/// Body of `POST /sessions`. Exactly one of `scene` and `dgrid` is required.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<DotScene>,
    /// Base64 of a DGRID file holding the ground-truth density.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dgrid: Option<String>,
    #[serde(default)]
    pub miscalibration: Miscalibration,
    #[serde(default)]
    pub counter: CounterOptions,
    /// Overrides the server's default session settings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<SessionConfig>,
    /// Seeds the synthesized counter.
    #[serde(default)]
    pub seed: u64,
    /// Keep no ground truth, as in a real deployment.
    #[serde(default)]
    pub blind: bool,
}

impl CreateRequest {
    pub fn from_scene(scene: DotScene) -> Self {
        Self {
            scene: Some(scene),
            dgrid: None,
            miscalibration: Miscalibration::None,
            counter: CounterOptions::default(),
            session: None,
            seed: 0,
            blind: false,
        }
    }

    pub fn from_grid(grid: &DensityGrid) -> Self {
        Self {
            scene: None,
            dgrid: Some(STANDARD.encode(dgrid_to_bytes(grid))),
            ..Self::from_scene(DotScene {
                height: 1,
                width: 1,
                sigma: 1.0,
                dots: Vec::new(),
            })
        }
    }

    /// The ground-truth density the counter is synthesized from.
    pub fn ground_truth(&self, max_side: usize) -> Result<DensityGrid, ApiError> {
        let grid = match (&self.scene, &self.dgrid) {
            (Some(scene), None) => {
                check_side(scene.height, scene.width, max_side)?;
                render_density(scene)?
            }
            (None, Some(encoded)) => {
                let bytes = STANDARD
                    .decode(encoded)
                    .map_err(|e| ApiError::bad_request("invalid_request", format!("dgrid is not base64: {e}")))?;
                dgrid_from_bytes(&bytes)?
            }
            _ => {
                return Err(ApiError::bad_request(
                    "invalid_request",
                    "provide exactly one of `scene` and `dgrid`",
                ))
            }
        };
        check_side(grid.height(), grid.width(), max_side)?;
        Ok(grid)
    }

    pub fn build(&self, defaults: &SessionConfig, max_side: usize) -> Result<InteractiveSession, ApiError> {
        let gt = self.ground_truth(max_side)?;
        self.miscalibration.validate(self.counter.channels)?;
        let synth = synthesize_counter_for_density(&gt, &self.miscalibration, self.seed, &self.counter)?;
        let config = self.session.clone().unwrap_or_else(|| defaults.clone());
        let gt = (!self.blind).then_some(synth.ground_truth);
        Ok(InteractiveSession::new(synth.counter, gt, config)?)
    }
}

fn check_side(h: usize, w: usize, max_side: usize) -> Result<(), ApiError> {
    if h > max_side || w > max_side {
        return Err(ApiError::bad_request(
            "invalid_request",
            format!("{h}x{w} exceeds the {max_side}px limit"),
        ));
    }
    Ok(())
}

/// Body of `POST /sessions/{id}/feedback`: the two clicks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackRequest {
    pub region_id: u32,
    pub range_index: usize,
    /// Segmentation generation the region was picked from; stale ones are refused.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation: Option<u64>,
}

/// Everything a client needs to draw and drive one session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionPayload {
    pub session_id: String,
    pub blind: bool,
    #[serde(flatten)]
    pub state: SessionState,
    /// Base64 DGRID of the current predicted density, for the heat layer.
    pub density: String,
}

impl SessionPayload {
    pub fn build(id: &str, blind: bool, session: &InteractiveSession) -> Self {
        Self {
            session_id: id.to_string(),
            blind,
            state: session.state(),
            density: STANDARD.encode(dgrid_to_bytes(session.prediction())),
        }
    }

    pub fn decode_density(&self) -> icount::Result<DensityGrid> {
        let bytes = STANDARD.decode(&self.density).map_err(|e| icount::Error::Format {
            format: "base64",
            reason: e.to_string(),
        })?;
        dgrid_from_bytes(&bytes)
    }
}
