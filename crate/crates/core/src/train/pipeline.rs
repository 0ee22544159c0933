use serde::{Deserialize, Serialize};

use super::eval::{evaluate, EvalReport};
use super::stages::{
    interaction_step, pretrain_teacher, reinforcement_step, verbalization_step, InteractionReport, StageReport,
};
use super::{domain_seed, RunConfig, Stage};
use crate::data::{generate_dataset, Splits, TaskFamily, TaskSpec, VOCAB_SIZE};
use crate::distill::{InteractionConfig, KldReference, LayerOp, MatchStrategy};
use crate::error::{Error, Result};
use crate::model::{LayerTapSet, ModelConfig, Transformer};
use crate::verbalizer::{build_verbalizers, Verbalizer, VerbalizerArch};

/// Every setting of a run as one flat key/value document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,

    pub task_family: TaskFamily,
    pub alphabet_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub answer_len: usize,
    pub max_seq_len: usize,
    pub n_examples: usize,

    pub teacher_layers: usize,
    pub teacher_d_model: usize,
    pub teacher_heads: usize,
    pub student_layers: usize,
    pub student_d_model: usize,
    pub student_heads: usize,
    pub ffn_mult: usize,
    pub tie_lm_head: bool,
    /// Tapped teacher layers; empty means every intermediate layer.
    pub teacher_taps: Vec<usize>,
    /// Tapped student layers; empty means every intermediate layer.
    pub student_taps: Vec<usize>,
    pub verbalizer_arch: VerbalizerArch,

    pub epsilon: f64,
    pub scale: f64,
    pub il_op: LayerOp,
    pub ll_op: LayerOp,
    pub ll_weight: f64,
    pub strategy: MatchStrategy,
    pub k: usize,
    pub use_search_range: bool,
    pub use_order_preservation: bool,
    pub use_adaptive_temperature: bool,
    pub fixed_temperature: f64,
    pub kld_direction: KldReference,
    pub train_student_verbalizers: bool,

    pub batch_size: usize,
    pub grad_accum: usize,
    pub weight_decay: f64,
    /// Global gradient-norm cap; zero disables clipping.
    pub clip_norm: f64,
    pub eval_every: usize,
    pub eval_batch: usize,
    pub accuracy_threshold: f64,
    pub rs_fraction: f64,

    pub teacher_steps: usize,
    pub teacher_lr_max: f64,
    pub teacher_lr_min: f64,
    pub verbalize_steps: usize,
    pub verbalize_lr_max: f64,
    pub verbalize_lr_min: f64,
    pub interact_steps: usize,
    pub interact_lr_max: f64,
    pub interact_lr_min: f64,
    pub reinforce_steps: usize,
    pub reinforce_lr_max: f64,
    pub reinforce_lr_min: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let teacher = ModelConfig::teacher_default();
        let student = ModelConfig::student_default();
        let spec = TaskSpec::default();
        let icfg = InteractionConfig::new(1, 1);
        let run = RunConfig::new(Stage::All, 1, 0);
        PipelineConfig {
            seed: 0,
            task_family: spec.family,
            alphabet_size: spec.alphabet_size,
            min_len: spec.min_len,
            max_len: spec.max_len,
            answer_len: spec.answer_len,
            max_seq_len: spec.max_seq_len,
            n_examples: 2000,
            teacher_layers: teacher.n_layers,
            teacher_d_model: teacher.d_model,
            teacher_heads: teacher.n_heads,
            student_layers: student.n_layers,
            student_d_model: student.d_model,
            student_heads: student.n_heads,
            ffn_mult: teacher.ffn_mult,
            tie_lm_head: teacher.tie_lm_head,
            teacher_taps: Vec::new(),
            student_taps: Vec::new(),
            verbalizer_arch: VerbalizerArch::VerbFfn,
            epsilon: icfg.epsilon,
            scale: icfg.scale,
            il_op: icfg.il_op,
            ll_op: icfg.ll_op,
            ll_weight: icfg.ll_weight,
            strategy: icfg.strategy,
            k: icfg.k,
            use_search_range: icfg.use_search_range,
            use_order_preservation: icfg.use_order_preservation,
            use_adaptive_temperature: icfg.use_adaptive_temperature,
            fixed_temperature: icfg.fixed_temperature,
            kld_direction: icfg.kld_direction,
            train_student_verbalizers: false,
            batch_size: run.batch_size,
            grad_accum: run.grad_accum,
            weight_decay: run.weight_decay,
            clip_norm: 0.0,
            eval_every: run.eval_every,
            eval_batch: 64,
            accuracy_threshold: run.accuracy_threshold,
            rs_fraction: run.rs_fraction,
            teacher_steps: 5000,
            teacher_lr_max: run.lr_max,
            teacher_lr_min: run.lr_min,
            verbalize_steps: 2000,
            verbalize_lr_max: run.lr_max,
            verbalize_lr_min: run.lr_min,
            interact_steps: 3000,
            interact_lr_max: run.lr_max,
            interact_lr_min: run.lr_min,
            reinforce_steps: 3000,
            reinforce_lr_max: run.lr_max,
            reinforce_lr_min: run.lr_min,
        }
    }
}

impl PipelineConfig {
    /// Default task and depths with narrow models and short, higher-rate
    /// schedules; one seed of every stage takes about a minute on one core.
    pub fn toy() -> Self {
        PipelineConfig {
            n_examples: 1200,
            teacher_layers: 12,
            teacher_d_model: 48,
            teacher_heads: 4,
            student_layers: 4,
            student_d_model: 48,
            student_heads: 4,
            ffn_mult: 2,
            batch_size: 16,
            grad_accum: 1,
            clip_norm: 1.0,
            eval_every: 50,
            teacher_steps: 3000,
            teacher_lr_max: 3e-3,
            teacher_lr_min: 1e-4,
            verbalize_steps: 300,
            verbalize_lr_max: 3e-3,
            verbalize_lr_min: 1e-4,
            interact_steps: 600,
            interact_lr_max: 1e-3,
            interact_lr_min: 1e-5,
            reinforce_steps: 600,
            reinforce_lr_max: 1e-3,
            reinforce_lr_min: 1e-5,
            ..PipelineConfig::default()
        }
    }

    /// Named presets accepted by the command line.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "toy" => Ok(Self::toy()),
            _ => Err(Error::Config(format!("unknown preset {name:?}; valid: default, toy"))),
        }
    }

    /// Every key accepted in a config document.
    pub fn keys() -> Vec<String> {
        match toml::Value::try_from(PipelineConfig::default()) {
            Ok(toml::Value::Table(t)) => t.keys().cloned().collect(),
            _ => Vec::new(),
        }
    }

    /// Parses a flat TOML document on top of `self`.
    pub fn merge_toml(&self, text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let mut out = self.clone();
        for (k, v) in table {
            out = out.with_value(&k, v)?;
        }
        Ok(out)
    }

    /// Sets one key from its textual form (`"0.5"`, `"kld"`, `"[1, 3]"`).
    pub fn set(&self, key: &str, raw: &str) -> Result<Self> {
        let value = match format!("v = {raw}").parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        self.with_value(key, value)
    }

    fn with_value(&self, key: &str, value: toml::Value) -> Result<Self> {
        let toml::Value::Table(mut table) = toml::Value::try_from(self).map_err(|e| Error::Internal(e.to_string()))?
        else {
            return Err(Error::Internal("config did not serialise to a table".into()));
        };
        if !table.contains_key(key) {
            return Err(Error::Config(format!("unknown key {key:?}; valid keys: {}", Self::keys().join(", "))));
        }
        table.insert(key.to_string(), value);
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("key {key:?}: {}", e.message())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            family: self.task_family,
            alphabet_size: self.alphabet_size,
            min_len: self.min_len,
            max_len: self.max_len,
            answer_len: self.answer_len,
            max_seq_len: self.max_seq_len,
        }
    }

    fn model(&self, layers: usize, d: usize, heads: usize) -> ModelConfig {
        ModelConfig {
            n_layers: layers,
            d_model: d,
            n_heads: heads,
            vocab_size: VOCAB_SIZE,
            max_seq_len: self.max_seq_len,
            tie_lm_head: self.tie_lm_head,
            ffn_mult: self.ffn_mult,
            rope_base: 10000.0,
        }
    }

    pub fn teacher_model(&self) -> ModelConfig {
        self.model(self.teacher_layers, self.teacher_d_model, self.teacher_heads)
    }

    pub fn student_model(&self) -> ModelConfig {
        self.model(self.student_layers, self.student_d_model, self.student_heads)
    }

    fn taps(explicit: &[usize], n_layers: usize) -> Result<LayerTapSet> {
        if explicit.is_empty() {
            Ok(LayerTapSet::all_intermediate(n_layers))
        } else {
            LayerTapSet::new(explicit.to_vec(), n_layers)
        }
    }

    pub fn teacher_tap_set(&self) -> Result<LayerTapSet> {
        Self::taps(&self.teacher_taps, self.teacher_layers)
    }

    pub fn student_tap_set(&self) -> Result<LayerTapSet> {
        Self::taps(&self.student_taps, self.student_layers)
    }

    pub fn interaction(&self) -> Result<InteractionConfig> {
        let cfg = InteractionConfig {
            t_s: self.student_tap_set()?.len(),
            t_l: self.teacher_tap_set()?.len(),
            epsilon: self.epsilon,
            scale: self.scale,
            il_op: self.il_op,
            ll_op: self.ll_op,
            ll_weight: self.ll_weight,
            strategy: self.strategy,
            k: self.k,
            use_search_range: self.use_search_range,
            use_order_preservation: self.use_order_preservation,
            use_adaptive_temperature: self.use_adaptive_temperature,
            fixed_temperature: self.fixed_temperature,
            kld_direction: self.kld_direction,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn run(&self, stage: Stage) -> RunConfig {
        let (steps, lr_max, lr_min) = match stage {
            Stage::Teacher => (self.teacher_steps, self.teacher_lr_max, self.teacher_lr_min),
            Stage::Verbalize => (self.verbalize_steps, self.verbalize_lr_max, self.verbalize_lr_min),
            Stage::Interact => (self.interact_steps, self.interact_lr_max, self.interact_lr_min),
            Stage::Reinforce | Stage::All => (self.reinforce_steps, self.reinforce_lr_max, self.reinforce_lr_min),
        };
        RunConfig {
            stage,
            steps,
            batch_size: self.batch_size,
            grad_accum: self.grad_accum,
            lr_max,
            lr_min,
            seed: self.seed,
            rs_fraction: self.rs_fraction,
            weight_decay: self.weight_decay,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            eval_every: self.eval_every,
            accuracy_threshold: self.accuracy_threshold,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task_spec().validate()?;
        self.teacher_model().validate()?;
        self.student_model().validate()?;
        self.interaction()?;
        if self.eval_batch == 0 {
            return Err(Error::Config("eval_batch must be positive".into()));
        }
        for st in [Stage::Teacher, Stage::Verbalize, Stage::Interact, Stage::Reinforce] {
            self.run(st).validate().map_err(|e| Error::Config(format!("{st} stage: {e}")))?;
        }
        Ok(())
    }
}

/// Which stages a student goes through after initialisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentRoute {
    /// verbalize → interact → reinforce.
    Full,
    /// verbalize → interact.
    InteractOnly,
    /// reinforce only.
    ReinforceOnly,
}

impl StudentRoute {
    pub const ALL: [StudentRoute; 3] = [StudentRoute::Full, StudentRoute::InteractOnly, StudentRoute::ReinforceOnly];

    pub fn name(self) -> &'static str {
        match self {
            StudentRoute::Full => "full",
            StudentRoute::InteractOnly => "interact_only",
            StudentRoute::ReinforceOnly => "reinforce_only",
        }
    }
}

impl std::fmt::Display for StudentRoute {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for StudentRoute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown route {s:?}; valid: full, interact_only, reinforce_only")))
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub student: Transformer<f32>,
    pub student_verbs: Vec<Verbalizer<f32>>,
    pub verbalize: Option<StageReport>,
    pub interact: Option<InteractionReport>,
    pub reinforce: Option<StageReport>,
    pub test: EvalReport,
}

/// In-memory driver for the stages, with data and initialisation derived
/// deterministically from the config seed.
pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub splits: Splits,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let splits = generate_dataset(&cfg.task_spec(), cfg.n_examples, domain_seed(cfg.seed, "data"))?;
        Ok(Pipeline { cfg, splits })
    }

    pub fn with_splits(cfg: PipelineConfig, splits: Splits) -> Result<Self> {
        cfg.validate()?;
        Ok(Pipeline { cfg, splits })
    }

    pub fn init_teacher(&self) -> Result<Transformer<f32>> {
        Transformer::new(self.cfg.teacher_model(), domain_seed(self.cfg.seed, "teacher.init"))
    }

    pub fn init_student(&self) -> Result<Transformer<f32>> {
        Transformer::new(self.cfg.student_model(), domain_seed(self.cfg.seed, "student.init"))
    }

    pub fn train_teacher(&self) -> Result<(Transformer<f32>, StageReport)> {
        let mut teacher = self.init_teacher()?;
        let report = pretrain_teacher(&mut teacher, &self.splits.train, &self.splits.dev, &self.cfg.run(Stage::Teacher))?;
        Ok((teacher, report))
    }

    /// Builds and trains verbalizers on `backbone`; `role` separates the
    /// initialisation streams of teacher and student verbalizers.
    pub fn verbalize(&self, backbone: &Transformer<f32>, taps: &LayerTapSet, role: &str) -> Result<(Vec<Verbalizer<f32>>, StageReport)> {
        let seed = domain_seed(self.cfg.seed, &format!("verbalize.init.{role}"));
        let mut verbs = build_verbalizers(backbone, taps, self.cfg.verbalizer_arch, seed)?;
        let run = RunConfig { seed: domain_seed(self.cfg.seed, &format!("verbalize.{role}")), ..self.cfg.run(Stage::Verbalize) };
        let report = verbalization_step(backbone, &mut verbs, &self.splits.train, &run)?;
        Ok((verbs, report))
    }

    pub fn interact(
        &self,
        teacher: &Transformer<f32>,
        teacher_verbs: &[Verbalizer<f32>],
        student: &mut Transformer<f32>,
        student_verbs: &mut [Verbalizer<f32>],
    ) -> Result<InteractionReport> {
        interaction_step(
            teacher,
            teacher_verbs,
            student,
            student_verbs,
            &self.cfg.interaction()?,
            &self.cfg.run(Stage::Interact),
            &self.splits.train,
            self.cfg.train_student_verbalizers,
        )
    }

    pub fn reinforce(&self, student: &mut Transformer<f32>) -> Result<StageReport> {
        reinforcement_step(student, &self.splits.train, &self.splits.dev, &self.cfg.run(Stage::Reinforce))
    }

    pub fn evaluate(&self, model: &Transformer<f32>, verbs: &[Verbalizer<f32>]) -> Result<EvalReport> {
        evaluate(model, verbs, &self.splits.test, self.cfg.eval_batch)
    }

    /// Runs one student route against an already trained teacher.
    pub fn run_student(
        &self,
        teacher: &Transformer<f32>,
        teacher_verbs: &[Verbalizer<f32>],
        route: StudentRoute,
    ) -> Result<PipelineOutcome> {
        let mut student = self.init_student()?;
        let mut student_verbs = Vec::new();
        let (mut verbalize, mut interact, mut reinforce) = (None, None, None);
        if route != StudentRoute::ReinforceOnly {
            let (v, rep) = self.verbalize(&student, &self.cfg.student_tap_set()?, "student")?;
            student_verbs = v;
            verbalize = Some(rep);
            interact = Some(self.interact(teacher, teacher_verbs, &mut student, &mut student_verbs)?);
        }
        if route != StudentRoute::InteractOnly {
            reinforce = Some(self.reinforce(&mut student)?);
        }
        let test = self.evaluate(&student, &[])?;
        Ok(PipelineOutcome { student, student_verbs, verbalize, interact, reinforce, test })
    }
}
