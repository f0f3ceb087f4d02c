use serde::{Deserialize, Serialize};

use super::rng::Rng;
use crate::error::{DsuError, Result};

/// Random quantities consumed by one augmentor invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Draw {
    /// The gate stayed closed.
    Skipped,
    /// Standard-normal draws, `[B,C]` row-major.
    Gaussian { eps_mu: Vec<f64>, eps_sigma: Vec<f64> },
    /// Draws on `[-1, 1)`, `[B,C]` row-major.
    Uniform { u_mu: Vec<f64>, u_sigma: Vec<f64> },
    Mix { perm: Vec<usize>, lambda: f64 },
    Swap { perm: Vec<usize> },
}

/// Uncertainty scopes as used by the draw, each of length `C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scope {
    pub sigma_mu: Vec<f64>,
    pub sigma_sigma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotDraw {
    pub draw: Draw,
    /// When set on replay, overrides the scope estimated from the batch.
    pub scope: Option<Scope>,
}

impl SlotDraw {
    pub fn skipped() -> Self {
        Self {
            draw: Draw::Skipped,
            scope: None,
        }
    }

    pub fn fired(&self) -> bool {
        !matches!(self.draw, Draw::Skipped)
    }
}

/// Counters describing what the augmentors did over a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DrawSummary {
    pub invocations: u64,
    pub fired: u64,
    pub gamma_elements: u64,
    pub negative_gamma: u64,
    pub scope_mu_mean: f64,
    pub scope_sigma_mean: f64,
    #[serde(skip)]
    scope_count: u64,
}

impl DrawSummary {
    pub fn fired_fraction(&self) -> f64 {
        if self.invocations == 0 {
            0.0
        } else {
            self.fired as f64 / self.invocations as f64
        }
    }

    pub(crate) fn add_scope(&mut self, scope: &Scope) {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        let n = self.scope_count as f64;
        self.scope_mu_mean = (self.scope_mu_mean * n + mean(&scope.sigma_mu)) / (n + 1.0);
        self.scope_sigma_mean = (self.scope_sigma_mean * n + mean(&scope.sigma_sigma)) / (n + 1.0);
        self.scope_count += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Live,
    Record,
    Replay,
}

/// Source of augmentor randomness: a live generator, a generator whose draws
/// are also written to a tape, or a fixed tape replayed in order.
#[derive(Debug, Clone)]
pub struct Noise {
    mode: Mode,
    rng: Rng,
    tape: Vec<SlotDraw>,
    cursor: usize,
    summary: DrawSummary,
}

impl Noise {
    pub fn live(rng: Rng) -> Self {
        Self::with_mode(Mode::Live, rng, Vec::new())
    }

    pub fn recording(rng: Rng) -> Self {
        Self::with_mode(Mode::Record, rng, Vec::new())
    }

    pub fn replay(tape: Vec<SlotDraw>) -> Self {
        Self::with_mode(Mode::Replay, Rng::new(0), tape)
    }

    fn with_mode(mode: Mode, rng: Rng, tape: Vec<SlotDraw>) -> Self {
        Self {
            mode,
            rng,
            tape,
            cursor: 0,
            summary: DrawSummary::default(),
        }
    }

    pub fn tape(&self) -> &[SlotDraw] {
        &self.tape
    }

    pub fn into_tape(self) -> Vec<SlotDraw> {
        self.tape
    }

    pub fn summary(&self) -> &DrawSummary {
        &self.summary
    }

    pub fn is_replay(&self) -> bool {
        self.mode == Mode::Replay
    }

    pub(crate) fn rng(&mut self) -> &mut Rng {
        &mut self.rng
    }

    pub(crate) fn summary_mut(&mut self) -> &mut DrawSummary {
        &mut self.summary
    }

    /// The next taped draw when replaying, `None` otherwise.
    pub(crate) fn planned(&mut self) -> Result<Option<SlotDraw>> {
        if self.mode != Mode::Replay {
            return Ok(None);
        }
        let d = self.tape.get(self.cursor).cloned().ok_or_else(|| {
            DsuError::Input(format!("noise tape exhausted after {} draws", self.cursor))
        })?;
        self.cursor += 1;
        Ok(Some(d))
    }

    pub(crate) fn record(&mut self, d: SlotDraw) {
        self.summary.invocations += 1;
        if d.fired() {
            self.summary.fired += 1;
        }
        if let Some(s) = &d.scope {
            self.summary.add_scope(s);
        }
        if self.mode == Mode::Record {
            self.tape.push(d);
        }
    }
}
