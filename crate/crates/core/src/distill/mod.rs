//! Interaction-step loss machinery: layer matching between a shallow
//! student and a deep teacher, the per-layer operation matrix, and exact
//! oracles for the sampling law.

mod matching;
mod ops;
mod oracle;


use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::KldDirection;

pub use matching::{
    adaptive_temperature, interaction_loss_algorithm1, interaction_loss_bottom_k, interaction_loss_random,
    parse_trace_jsonl, sampling_distribution, search_range, select_matching, MatchStep, MatchTrace, Matching, Pick,
};
pub use ops::{
    interaction_objective, intermediate_op_loss, last_layer_loss, InteractionOutput, LayerVars, SideOutputs,
};
pub use oracle::{brute_force_matching_oracle, replay_algorithm1, MatchingLaw, ORACLE_MAX_TAPS};

/// Distillation operation at intermediate layers or at the last layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerOp {
    Kld,
    Ce,
    L2,
    None,
}

impl LayerOp {
    pub const ALL: [LayerOp; 4] = [LayerOp::Kld, LayerOp::Ce, LayerOp::L2, LayerOp::None];

    pub fn name(self) -> &'static str {
        match self {
            LayerOp::Kld => "kld",
            LayerOp::Ce => "ce",
            LayerOp::L2 => "l2",
            LayerOp::None => "none",
        }
    }

    /// Whether this op compares a student layer against a teacher layer,
    /// which is what needs a matching.
    pub fn needs_teacher(self) -> bool {
        matches!(self, LayerOp::Kld | LayerOp::L2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchStrategy {
    Algorithm1,
    RandomIndex,
    BottomK,
}

impl MatchStrategy {
    pub fn name(self) -> &'static str {
        match self {
            MatchStrategy::Algorithm1 => "algorithm1",
            MatchStrategy::RandomIndex => "random_index",
            MatchStrategy::BottomK => "bottom_k",
        }
    }
}

/// Which side of the KL divergence is the reference distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KldReference {
    /// `KL(teacher ‖ student)`.
    TeacherRef,
    /// `KL(student ‖ teacher)`.
    StudentRef,
}

impl KldReference {
    pub fn name(self) -> &'static str {
        match self {
            KldReference::TeacherRef => "teacher_ref",
            KldReference::StudentRef => "student_ref",
        }
    }

    /// Direction to use with `masked_kld(teacher, student, ..)`.
    pub fn direction(self) -> KldDirection {
        match self {
            KldReference::TeacherRef => KldDirection::ReferenceFirst,
            KldReference::StudentRef => KldDirection::ReferenceSecond,
        }
    }
}

macro_rules! named_enum {
    ($t:ty, $what:literal, [$($v:expr),* $(,)?]) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $t {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                let all = [$($v),*];
                all.iter().copied().find(|v| v.name() == s).ok_or_else(|| {
                    let names: Vec<_> = all.iter().map(|v| v.name()).collect();
                    Error::Config(format!(concat!("unknown ", $what, " {:?}; valid: {}"), s, names.join(", ")))
                })
            }
        }
    };
}

named_enum!(LayerOp, "layer op", [LayerOp::Kld, LayerOp::Ce, LayerOp::L2, LayerOp::None]);
named_enum!(
    MatchStrategy,
    "matching strategy",
    [MatchStrategy::Algorithm1, MatchStrategy::RandomIndex, MatchStrategy::BottomK]
);
named_enum!(KldReference, "kld direction", [KldReference::TeacherRef, KldReference::StudentRef]);

/// Parameters of the interaction step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionConfig {
    /// Number of student target layers.
    pub t_s: usize,
    /// Number of teacher target layers.
    pub t_l: usize,
    pub epsilon: f64,
    pub scale: f64,
    pub il_op: LayerOp,
    pub ll_op: LayerOp,
    pub ll_weight: f64,
    pub strategy: MatchStrategy,
    /// Number of averaged candidates for [`MatchStrategy::BottomK`].
    pub k: usize,
    pub use_search_range: bool,
    pub use_order_preservation: bool,
    pub use_adaptive_temperature: bool,
    /// Temperature used when the adaptive one is switched off.
    pub fixed_temperature: f64,
    pub kld_direction: KldReference,
}

impl InteractionConfig {
    /// Full `algorithm1` setup with KLD at both intermediate and last layers.
    pub fn new(t_s: usize, t_l: usize) -> Self {
        InteractionConfig {
            t_s,
            t_l,
            epsilon: 1e-6,
            scale: 2.0,
            il_op: LayerOp::Kld,
            ll_op: LayerOp::Kld,
            ll_weight: 1.0,
            strategy: MatchStrategy::Algorithm1,
            k: 1,
            use_search_range: true,
            use_order_preservation: true,
            use_adaptive_temperature: true,
            fixed_temperature: 1.0,
            kld_direction: KldReference::TeacherRef,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_s == 0 {
            return Err(Error::Config("t_s must be at least 1".into()));
        }
        if self.t_s > self.t_l {
            return Err(Error::Config(format!(
                "student target layers ({}) exceed teacher target layers ({})",
                self.t_s, self.t_l
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("scale must be positive, got {}", self.scale)));
        }
        if !(self.fixed_temperature > 0.0 && self.fixed_temperature.is_finite()) {
            return Err(Error::Config(format!(
                "fixed_temperature must be positive, got {}",
                self.fixed_temperature
            )));
        }
        if !(self.ll_weight >= 0.0 && self.ll_weight.is_finite()) {
            return Err(Error::Config(format!("ll_weight must be nonnegative, got {}", self.ll_weight)));
        }
        if self.strategy == MatchStrategy::BottomK && (self.k == 0 || self.k > self.t_l) {
            return Err(Error::Config(format!("bottom_k needs 1 <= k <= t_l ({}), got k = {}", self.t_l, self.k)));
        }
        if self.strategy == MatchStrategy::Algorithm1 && self.use_order_preservation && !self.use_search_range {
            // Without the upper bound an early deep match can leave later
            // student layers with an empty range.
            return Err(Error::Config("order preservation requires the search range".into()));
        }
        Ok(())
    }
}
