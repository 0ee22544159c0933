use std::collections::HashMap;

use rand::Rng;

use super::{InteractionConfig, LayerOp, MatchTrace};
use crate::error::{Error, Result};
use crate::numcore::{Graph, Scalar, Tensor, Var};

/// Graph handles of one verbalized layer: body features (pre-head) and
/// vocabulary logits.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub features: Var,
    pub logits: Var,
}

/// Everything the interaction objective needs from one model's forward pass.
#[derive(Clone, Debug)]
pub struct SideOutputs {
    /// One entry per target layer, shallow to deep.
    pub taps: Vec<LayerVars>,
    /// Final normalised hidden state and final logits.
    pub last: LayerVars,
}

#[derive(Clone, Debug)]
pub struct InteractionOutput {
    /// Scalar objective (a constant zero when every term is switched off).
    pub loss: Var,
    /// `(1/t_s) * Σ` intermediate terms, if any.
    pub intermediate: Option<Var>,
    /// `ll_weight * last-layer term`, if any.
    pub last: Option<Var>,
    /// Present when the intermediate op required a matching.
    pub trace: Option<MatchTrace>,
}

/// Intermediate-layer term for one (student, teacher) pair; `None` means the
/// op contributes nothing.
pub fn intermediate_op_loss<T: Scalar>(
    g: &mut Graph<T>,
    op: LayerOp,
    student: LayerVars,
    teacher: Option<LayerVars>,
    targets: &[usize],
    mask: &[bool],
    cfg: &InteractionConfig,
) -> Result<Option<Var>> {
    let need = |t: Option<LayerVars>| t.ok_or_else(|| Error::Invalid(format!("{op} op needs a teacher layer")));
    Ok(match op {
        LayerOp::None => None,
        LayerOp::Ce => Some(g.masked_cross_entropy(student.logits, targets, mask)?),
        LayerOp::Kld => {
            let t = need(teacher)?;
            Some(g.masked_kld(t.logits, student.logits, mask, cfg.kld_direction.direction())?)
        }
        LayerOp::L2 => {
            let t = need(teacher)?;
            Some(g.l2_feature_distance(student.features, t.features, mask)?)
        }
    })
}

/// Last-layer term, already multiplied by `ll_weight`. A zero weight yields
/// `None`, exactly like the `none` op.
pub fn last_layer_loss<T: Scalar>(
    g: &mut Graph<T>,
    op: LayerOp,
    student: LayerVars,
    teacher: LayerVars,
    targets: &[usize],
    mask: &[bool],
    cfg: &InteractionConfig,
) -> Result<Option<Var>> {
    if cfg.ll_weight == 0.0 {
        return Ok(None);
    }
    let term = intermediate_op_loss(g, op, student, Some(teacher), targets, mask, cfg)?;
    Ok(term.map(|v| if cfg.ll_weight == 1.0 { v } else { g.scale(v, T::lit(cfg.ll_weight)) }))
}

/// Full interaction objective:
/// `(1/t_s) * Σ intermediate terms + ll_weight * last-layer term`.
///
/// `kld` and `l2` intermediate ops go through the configured matching; `ce`
/// applies to every student tap on its own. One matching is drawn per call
/// and shared by the whole batch.
pub fn interaction_objective<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    student: &SideOutputs,
    teacher: &SideOutputs,
    targets: &[usize],
    mask: &[bool],
    cfg: &InteractionConfig,
    rng: &mut R,
) -> Result<InteractionOutput> {
    cfg.validate()?;
    if student.taps.len() != cfg.t_s || teacher.taps.len() != cfg.t_l {
        return Err(Error::Config(format!(
            "configured t_s = {}, t_l = {} but models expose {} and {} taps",
            cfg.t_s,
            cfg.t_l,
            student.taps.len(),
            teacher.taps.len()
        )));
    }
    let mut trace = None;
    let mut terms = Vec::new();
    match cfg.il_op {
        LayerOp::None => {}
        LayerOp::Ce => {
            for &s in &student.taps {
                terms.extend(intermediate_op_loss(g, LayerOp::Ce, s, None, targets, mask, cfg)?);
            }
        }
        op @ (LayerOp::Kld | LayerOp::L2) => {
            let mut cache: HashMap<(usize, usize), Var> = HashMap::new();
            let matching = {
                let cost = |i: usize, j: usize| -> Result<f64> {
                    let v = intermediate_op_loss(g, op, student.taps[i], Some(teacher.taps[j]), targets, mask, cfg)?
                        .expect("distance op yields a term");
                    cache.insert((i, j), v);
                    Ok(g.scalar_value(v).as_f64())
                };
                super::select_matching(cfg, cost, rng)?
            };
            for p in &matching.picks {
                let v = cache[&(p.student, p.teacher)];
                terms.push(if p.weight == 1.0 { v } else { g.scale(v, T::lit(p.weight)) });
            }
            trace = Some(matching.trace);
        }
    }
    let intermediate = if terms.is_empty() {
        None
    } else {
        let s = g.sum(&terms)?;
        Some(g.scale(s, T::lit(1.0 / cfg.t_s as f64)))
    };
    let last = last_layer_loss(g, cfg.ll_op, student.last, teacher.last, targets, mask, cfg)?;
    let parts: Vec<Var> = intermediate.iter().chain(last.iter()).copied().collect();
    let loss = match parts.len() {
        0 => g.input(Tensor::scalar(T::zero())),
        1 => parts[0],
        _ => g.sum(&parts)?,
    };
    Ok(InteractionOutput { loss, intermediate, last, trace })
}
