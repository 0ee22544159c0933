use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::evaluate;
use super::optim::{clip_global_norm, cosine_lr, AdamW};
use super::{domain_rng, RunConfig, Stage};
use crate::data::{Batch, Example};
use crate::distill::{interaction_objective, InteractionConfig, LayerVars, MatchTrace, SideOutputs};
use crate::error::{Error, Result};
use crate::model::{BoundModel, LayerTapSet, SeqShape, Transformer};
use crate::numcore::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::verbalizer::Verbalizer;

/// Cycles through shuffled epochs of `0..n`.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, mut rng: ChaCha8Rng) -> Result<Self> {
        if n == 0 {
            return Err(Error::Invalid("training set is empty".into()));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Ok(BatchSampler { order, pos: 0, rng })
    }

    pub fn next_batch(&mut self, k: usize) -> Vec<usize> {
        (0..k)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// One line of a run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched_indices: Option<Vec<usize>>,
    /// Per-verbalizer losses (verbalization stage).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tap_losses: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub steps_run: usize,
    /// Examples per optimizer step (`batch_size * grad_accum`).
    pub effective_batch: usize,
    pub log: Vec<LogRecord>,
    /// Dev exact-match after the stage, when measured.
    pub dev_exact_match: Option<f64>,
    /// Trainable tensors that never received a nonzero gradient.
    pub untouched: Vec<String>,
}

impl StageReport {
    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|r| r.loss).collect()
    }

    fn empty(stage: Stage, run: &RunConfig) -> Self {
        StageReport {
            stage,
            steps_run: 0,
            effective_batch: run.effective_batch(),
            log: Vec::new(),
            dev_exact_match: None,
            untouched: Vec::new(),
        }
    }
}

/// Sums gradients for several parameter groups over micro-batches.
struct Accumulator<T> {
    sums: Vec<Vec<Tensor<T>>>,
    loss: f64,
    micro: usize,
}

impl<T: Scalar> Accumulator<T> {
    fn new() -> Self {
        Accumulator { sums: Vec::new(), loss: 0.0, micro: 0 }
    }

    fn add(&mut self, loss: f64, grads: Vec<Vec<Tensor<T>>>) {
        if self.sums.is_empty() {
            self.sums = grads;
        } else {
            for (acc, g) in self.sums.iter_mut().zip(grads) {
                for (a, b) in acc.iter_mut().zip(&g) {
                    a.add_assign(b);
                }
            }
        }
        self.loss += loss;
        self.micro += 1;
    }

    /// Mean loss and mean gradients, clipped jointly when configured.
    fn finish(mut self, clip: Option<f64>) -> (f64, Vec<Vec<Tensor<T>>>) {
        let inv = T::lit(1.0 / self.micro as f64);
        for g in self.sums.iter_mut().flatten() {
            for x in g.data_mut() {
                *x *= inv;
            }
        }
        if let Some(c) = clip {
            let mut flat: Vec<Tensor<T>> = self.sums.iter().flatten().cloned().collect();
            let norm = clip_global_norm(&mut flat, c);
            if norm > c {
                let mut it = flat.into_iter();
                for g in self.sums.iter_mut().flatten() {
                    *g = it.next().expect("same count");
                }
            }
        }
        (self.loss / self.micro as f64, self.sums)
    }
}

fn mark_touched<T: Scalar>(touched: &mut [bool], grads: &[Tensor<T>]) {
    for (t, g) in touched.iter_mut().zip(grads) {
        *t |= g.data().iter().any(|x| !x.is_zero());
    }
}

fn untouched_names<T: Scalar>(store: &ParamStore<T>, touched: &[bool]) -> Vec<String> {
    store.names().iter().zip(touched).filter(|(_, &t)| !t).map(|(n, _)| n.clone()).collect()
}

fn batch_of(examples: &[Example], idx: &[usize]) -> Result<Batch> {
    let refs: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
    Batch::from_examples(&refs)
}

/// Masked next-token loss on response tokens and its gradient.
fn lm_loss_and_grads<T: Scalar>(model: &Transformer<T>, batch: &Batch) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let shape = SeqShape { batch: batch.batch, seq: batch.seq };
    let out = model.forward_graph(&mut g, &bound, &batch.inputs, shape, &LayerTapSet::default())?;
    let loss = g.masked_cross_entropy(out.logits, &batch.targets, &batch.mask)?;
    g.backward(loss)?;
    Ok((g.scalar_value(loss).as_f64(), model.params.collect_grads(&g, &bound.vars)))
}

/// Trains every parameter of `model` with the masked autoregressive loss.
///
/// The cosine schedule spans `run.steps`; at most `steps_to_run` optimizer
/// steps are taken. With `stop_at`, the dev set is checked every
/// `run.eval_every` steps and training stops once exact-match reaches it.
pub fn supervised_train<T: Scalar>(
    model: &mut Transformer<T>,
    train: &[Example],
    dev: &[Example],
    run: &RunConfig,
    steps_to_run: usize,
    stop_at: Option<f64>,
) -> Result<StageReport> {
    run.validate()?;
    let mut report = StageReport::empty(run.stage, run);
    let mut sampler = BatchSampler::new(train.len(), domain_rng(run.seed, &format!("{}.data", run.stage)))?;
    let mut opt = AdamW::new(run.adamw(), &model.params);
    let mut touched = vec![false; model.params.len()];
    for step in 0..steps_to_run.min(run.steps) {
        let mut acc = Accumulator::new();
        for _ in 0..run.grad_accum {
            let batch = batch_of(train, &sampler.next_batch(run.batch_size))?;
            let (loss, grads) = lm_loss_and_grads(model, &batch)?;
            mark_touched(&mut touched, &grads);
            acc.add(loss, vec![grads]);
        }
        let (loss, mut grads) = acc.finish(run.clip_norm);
        if !loss.is_finite() {
            return Err(Error::Invalid(format!("{} loss became non-finite at step {step}", run.stage)));
        }
        let lr = cosine_lr(step, run.steps, run.lr_max, run.lr_min)?;
        opt.step(&mut model.params, &grads.remove(0), lr)?;
        report.log.push(LogRecord { step, stage: run.stage, loss, lr, matched_indices: None, tap_losses: None });
        report.steps_run = step + 1;
        if let Some(target) = stop_at {
            if (step + 1) % run.eval_every == 0 && !dev.is_empty() {
                let acc = evaluate(model, &[], dev, 64)?.exact_match;
                report.dev_exact_match = Some(acc);
                if acc >= target {
                    break;
                }
            }
        }
    }
    if !dev.is_empty() && report.steps_run > 0 {
        report.dev_exact_match = Some(evaluate(model, &[], dev, 64)?.exact_match);
    }
    report.untouched = untouched_names(&model.params, &touched);
    Ok(report)
}

/// Trains the teacher until dev exact-match reaches
/// `run.accuracy_threshold` or the step budget runs out.
pub fn pretrain_teacher<T: Scalar>(
    model: &mut Transformer<T>,
    train: &[Example],
    dev: &[Example],
    run: &RunConfig,
) -> Result<StageReport> {
    if train.is_empty() {
        return Err(Error::Invalid("teacher pretraining needs training data".into()));
    }
    let run = RunConfig { stage: Stage::Teacher, ..run.clone() };
    supervised_train(model, train, dev, &run, run.steps, Some(run.accuracy_threshold))
}

/// Full fine-tuning of the student with the autoregressive loss, stopping
/// after `rs_fraction` of the schedule.
pub fn reinforcement_step<T: Scalar>(
    student: &mut Transformer<T>,
    train: &[Example],
    dev: &[Example],
    run: &RunConfig,
) -> Result<StageReport> {
    run.validate()?;
    let run = RunConfig { stage: Stage::Reinforce, ..run.clone() };
    let steps = (run.rs_fraction * run.steps as f64).round() as usize;
    if steps == 0 {
        return Ok(StageReport::empty(Stage::Reinforce, &run));
    }
    supervised_train(student, train, dev, &run, steps, None)
}

fn tap_set<T: Scalar>(model: &Transformer<T>, verbs: &[Verbalizer<T>]) -> Result<LayerTapSet> {
    if verbs.is_empty() {
        return Err(Error::Config("no verbalizers given".into()));
    }
    if let Some(v) = verbs.iter().find(|v| v.d_model != model.cfg.d_model) {
        return Err(Error::Config(format!(
            "verbalizer for layer {} expects width {}, backbone has {}",
            v.layer, v.d_model, model.cfg.d_model
        )));
    }
    LayerTapSet::new(verbs.iter().map(|v| v.layer).collect(), model.cfg.n_layers)
        .map_err(|e| Error::Config(format!("taps/verbalizers mismatch: {e}")))
}

/// Trains each verbalizer with the masked autoregressive loss on its own
/// tap while the backbone stays frozen.
pub fn verbalization_step<T: Scalar>(
    backbone: &Transformer<T>,
    verbs: &mut [Verbalizer<T>],
    train: &[Example],
    run: &RunConfig,
) -> Result<StageReport> {
    run.validate()?;
    let run = RunConfig { stage: Stage::Verbalize, ..run.clone() };
    let taps = tap_set(backbone, verbs)?;
    let mut report = StageReport::empty(Stage::Verbalize, &run);
    let mut sampler = BatchSampler::new(train.len(), domain_rng(run.seed, "verbalize.data"))?;
    let mut opts: Vec<AdamW<T>> = verbs.iter().map(|v| AdamW::new(run.adamw(), &v.params)).collect();
    for step in 0..run.steps {
        let mut acc = Accumulator::new();
        let mut tap_sum = vec![0.0; verbs.len()];
        for _ in 0..run.grad_accum {
            let batch = batch_of(train, &sampler.next_batch(run.batch_size))?;
            let shape = SeqShape { batch: batch.batch, seq: batch.seq };
            let mut g = Graph::new();
            let bound = backbone.bind(&mut g, false);
            let out = backbone.forward_graph(&mut g, &bound, &batch.inputs, shape, &taps)?;
            let mut terms = Vec::with_capacity(verbs.len());
            let mut bound_verbs = Vec::with_capacity(verbs.len());
            for (k, v) in verbs.iter().enumerate() {
                let vars = v.bind(&mut g, true);
                let vo = v.verbalize(&mut g, &vars, bound.head, out.taps[k], shape)?;
                let ce = g.masked_cross_entropy(vo.logits, &batch.targets, &batch.mask)?;
                tap_sum[k] += g.scalar_value(ce).as_f64();
                terms.push(ce);
                bound_verbs.push(vars);
            }
            let total = g.sum(&terms)?;
            g.backward(total)?;
            let grads = verbs.iter().zip(&bound_verbs).map(|(v, vars)| v.params.collect_grads(&g, vars)).collect();
            let mean = g.scalar_value(total).as_f64() / verbs.len() as f64;
            acc.add(mean, grads);
        }
        let (loss, grads) = acc.finish(run.clip_norm);
        if !loss.is_finite() {
            return Err(Error::Invalid(format!("verbalization loss became non-finite at step {step}")));
        }
        let lr = cosine_lr(step, run.steps, run.lr_max, run.lr_min)?;
        for ((v, opt), g) in verbs.iter_mut().zip(opts.iter_mut()).zip(&grads) {
            opt.step(&mut v.params, g, lr)?;
        }
        let tap_losses = tap_sum.iter().map(|s| s / run.grad_accum as f64).collect();
        report.log.push(LogRecord {
            step,
            stage: Stage::Verbalize,
            loss,
            lr,
            matched_indices: None,
            tap_losses: Some(tap_losses),
        });
        report.steps_run = step + 1;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InteractionReport {
    pub report: StageReport,
    /// Matching trace of every micro-batch, keyed by optimizer step.
    pub traces: Vec<(usize, MatchTrace)>,
}

fn side_outputs<T: Scalar>(
    g: &mut Graph<T>,
    model: &Transformer<T>,
    bound: &BoundModel,
    verbs: &[Verbalizer<T>],
    verb_vars: &[Vec<Var>],
    batch: &Batch,
    taps: &LayerTapSet,
) -> Result<SideOutputs> {
    let shape = SeqShape { batch: batch.batch, seq: batch.seq };
    let out = model.forward_graph(g, bound, &batch.inputs, shape, taps)?;
    let mut tap_vars = Vec::with_capacity(verbs.len());
    for (k, v) in verbs.iter().enumerate() {
        let vo = v.verbalize(g, &verb_vars[k], bound.head, out.taps[k], shape)?;
        tap_vars.push(LayerVars { features: vo.features, logits: vo.logits });
    }
    Ok(SideOutputs { taps: tap_vars, last: LayerVars { features: out.final_hidden, logits: out.logits } })
}

/// Distils the frozen teacher into the student through matched verbalized
/// layers. Student verbalizers stay fixed unless `train_student_verbalizers`.
#[allow(clippy::too_many_arguments)]
pub fn interaction_step<T: Scalar>(
    teacher: &Transformer<T>,
    teacher_verbs: &[Verbalizer<T>],
    student: &mut Transformer<T>,
    student_verbs: &mut [Verbalizer<T>],
    icfg: &InteractionConfig,
    run: &RunConfig,
    train: &[Example],
    train_student_verbalizers: bool,
) -> Result<InteractionReport> {
    run.validate()?;
    icfg.validate()?;
    let run = RunConfig { stage: Stage::Interact, ..run.clone() };
    if teacher.cfg.vocab_size != student.cfg.vocab_size {
        return Err(Error::Config(format!(
            "tokenizer mismatch: teacher vocabulary {} vs student {}",
            teacher.cfg.vocab_size, student.cfg.vocab_size
        )));
    }
    let t_taps = tap_set(teacher, teacher_verbs)?;
    let s_taps = tap_set(student, student_verbs)?;
    let mut report = StageReport::empty(Stage::Interact, &run);
    let mut traces = Vec::new();
    let mut sampler = BatchSampler::new(train.len(), domain_rng(run.seed, "interact.data"))?;
    let mut match_rng = domain_rng(run.seed, "interact.match");
    let mut opt = AdamW::new(run.adamw(), &student.params);
    let mut verb_opts: Vec<AdamW<T>> = student_verbs.iter().map(|v| AdamW::new(run.adamw(), &v.params)).collect();
    for step in 0..run.steps {
        let mut acc = Accumulator::new();
        let mut matched = None;
        for _ in 0..run.grad_accum {
            let batch = batch_of(train, &sampler.next_batch(run.batch_size))?;
            let mut g = Graph::new();
            let t_bound = teacher.bind(&mut g, false);
            let t_vv: Vec<Vec<Var>> = teacher_verbs.iter().map(|v| v.bind(&mut g, false)).collect();
            let t_side = side_outputs(&mut g, teacher, &t_bound, teacher_verbs, &t_vv, &batch, &t_taps)?;
            let s_bound = student.bind(&mut g, true);
            let s_vv: Vec<Vec<Var>> = student_verbs.iter().map(|v| v.bind(&mut g, train_student_verbalizers)).collect();
            let s_side = side_outputs(&mut g, student, &s_bound, student_verbs, &s_vv, &batch, &s_taps)?;
            let out = interaction_objective(&mut g, &s_side, &t_side, &batch.targets, &batch.mask, icfg, &mut match_rng)?;
            g.backward(out.loss)?;
            let mut grads = vec![student.params.collect_grads(&g, &s_bound.vars)];
            if train_student_verbalizers {
                grads.extend(student_verbs.iter().zip(&s_vv).map(|(v, vars)| v.params.collect_grads(&g, vars)));
            }
            if let Some(tr) = out.trace {
                if matched.is_none() {
                    matched = Some(tr.matched_indices());
                }
                traces.push((step, tr));
            }
            acc.add(g.scalar_value(out.loss).as_f64(), grads);
        }
        let (loss, grads) = acc.finish(run.clip_norm);
        if !loss.is_finite() {
            return Err(Error::Invalid(format!("interaction loss became non-finite at step {step}")));
        }
        let lr = cosine_lr(step, run.steps, run.lr_max, run.lr_min)?;
        let mut it = grads.iter();
        opt.step(&mut student.params, it.next().expect("student grads"), lr)?;
        if train_student_verbalizers {
            for ((v, o), g) in student_verbs.iter_mut().zip(verb_opts.iter_mut()).zip(it) {
                o.step(&mut v.params, g, lr)?;
            }
        }
        report.log.push(LogRecord { step, stage: Stage::Interact, loss, lr, matched_indices: matched, tap_losses: None });
        report.steps_run = step + 1;
    }
    Ok(InteractionReport { report, traces })
}
