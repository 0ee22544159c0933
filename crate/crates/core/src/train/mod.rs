//! Training stages (teacher pretraining, verbalization, interaction,
//! reinforcement), optimizer and schedule, evaluation, and checkpoints.

mod checkpoint;
mod eval;
mod optim;
mod pipeline;
mod stages;
mod stats;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_model, load_verbalizers, pack_verbalizers,
    save_checkpoint, save_model, save_verbalizers, ArtifactKind, CheckpointMeta, RngState,
};
pub use eval::{evaluate, greedy_decode, trace_example, verbalized_ce, EvalReport, TraceRow, VerbalizedCe};
pub use stats::{match_drift, MatchDrift, MatchHistogram};
pub use optim::{clip_global_norm, cosine_lr, AdamW, AdamWConfig};
pub use pipeline::{PipelineConfig, PipelineOutcome, Pipeline, StudentRoute};
pub use stages::{
    interaction_step, pretrain_teacher, reinforcement_step, supervised_train, verbalization_step, BatchSampler,
    InteractionReport, LogRecord, StageReport,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Teacher,
    Verbalize,
    Interact,
    Reinforce,
    All,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Teacher, Stage::Verbalize, Stage::Interact, Stage::Reinforce, Stage::All];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Teacher => "teacher",
            Stage::Verbalize => "verbalize",
            Stage::Interact => "interact",
            Stage::Reinforce => "reinforce",
            Stage::All => "all",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| {
            Error::Config(format!("unknown stage {s:?}; valid: teacher, verbalize, interact, reinforce, all"))
        })
    }
}

/// Optimisation settings of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    /// Micro-batches averaged into one optimizer step.
    pub grad_accum: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub seed: u64,
    /// Fraction of the reinforcement schedule actually run.
    pub rs_fraction: f64,
    pub weight_decay: f64,
    /// Optional global gradient-norm cap.
    pub clip_norm: Option<f64>,
    /// Dev-set check interval for early stopping (teacher stage).
    pub eval_every: usize,
    /// Dev exact-match at which teacher pretraining stops.
    pub accuracy_threshold: f64,
}

impl RunConfig {
    pub fn new(stage: Stage, steps: usize, seed: u64) -> Self {
        RunConfig {
            stage,
            steps,
            batch_size: 16,
            grad_accum: 16,
            lr_max: 1e-4,
            lr_min: 1e-6,
            seed,
            rs_fraction: 1.0,
            weight_decay: 0.01,
            clip_norm: None,
            eval_every: 100,
            accuracy_threshold: 0.95,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.eval_every == 0 {
            return bad("batch_size, grad_accum and eval_every must be positive".into());
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return bad(format!("need 0 <= lr_min <= lr_max, got {} and {}", self.lr_min, self.lr_max));
        }
        if !(0.0..=1.0).contains(&self.rs_fraction) {
            return bad(format!("rs_fraction must lie in [0, 1], got {}", self.rs_fraction));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be nonnegative".into());
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return bad("clip_norm must be positive".into());
        }
        Ok(())
    }

    /// Examples contributing to one optimizer step.
    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }
}

/// Independent random stream for one purpose (`"teacher.init"`,
/// `"interact.match"`, ...) derived from a run seed.
pub fn domain_rng(seed: u64, domain: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(domain.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Integer seed for a domain, for APIs that take `u64` seeds.
pub fn domain_seed(seed: u64, domain: &str) -> u64 {
    use rand::RngCore;
    domain_rng(seed, domain).next_u64()
}
