use std::path::PathBuf;

use preimage::energy::Components;
use preimage::optim::TraceEntry;
use serde::Serialize;

use crate::args::CommandKind;
use crate::config::Config;

pub const SCHEMA_VERSION: u32 = 1;

/// The record written next to every output image.
#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub command: CommandKind,
    pub seed: u64,
    pub config: Config,
    /// Command-line arguments that reproduce this run.
    pub replay: Vec<String>,
    pub trace: Vec<TraceRow>,
    pub final_components: ComponentRow,
    pub metrics: Metrics,
    pub duration_seconds: f64,
    pub output: PathBuf,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ComponentRow {
    pub range: f64,
    pub tv: f64,
    /// Unweighted loss.
    pub loss: f64,
    /// Weighted data term.
    pub data: f64,
    pub texture: f64,
    pub feasible: bool,
}

impl From<Components> for ComponentRow {
    fn from(c: Components) -> Self {
        Self {
            range: c.range,
            tv: c.tv,
            loss: c.loss,
            data: c.data,
            texture: c.texture,
            feasible: c.feasible,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub energy: f64,
    #[serde(flatten)]
    pub components: ComponentRow,
    pub tau: [usize; 2],
}

impl From<&TraceEntry> for TraceRow {
    fn from(e: &TraceEntry) -> Self {
        Self {
            iteration: e.iteration,
            energy: e.energy,
            components: e.components.into(),
            tau: [e.tau.0, e.tau.1],
        }
    }
}

/// Metrics that do not apply to a command are left out of the file.
#[derive(Clone, Debug, Default, Serialize)]
pub struct Metrics {
    pub initial_energy: Option<f64>,
    pub final_energy: f64,
    /// Every pixel norm is within `Bplus`.
    pub feasible: bool,
    /// Feature-space error in percent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reconstruction_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_hist_intersection: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classification_consistency: Option<f64>,
    /// `Z` of the inner-product loss.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalizer: Option<f64>,
    /// `⟨Φ(x*), Φ0⟩`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    /// `⟨Φ(x0), Φ0⟩`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unit_activation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unit_is_argmax: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub texture_energy: Option<f64>,
}
