//! Reference implementations used to verify the matching code.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use super::{InteractionConfig, MatchStrategy};
use crate::error::{Error, Result};

/// Largest `t_s` / `t_l` accepted by [`brute_force_matching_oracle`].
pub const ORACLE_MAX_TAPS: usize = 8;

/// Exact law of the `algorithm1` matching for one distance matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchingLaw {
    /// Every feasible strictly increasing matching with its probability.
    pub sequences: Vec<(Vec<usize>, f64)>,
    /// `marginals[i][j]`: probability that student step `i` matches teacher
    /// index `j`.
    pub marginals: Vec<Vec<f64>>,
}

fn law_at(row: &[f64], lo: usize, hi: usize, cfg: &InteractionConfig) -> Vec<f64> {
    let cand = &row[lo..=hi];
    let max = cand.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = cand.iter().copied().fold(f64::INFINITY, f64::min);
    let t = if cfg.use_adaptive_temperature {
        cfg.scale / (max - min + cfg.epsilon)
    } else {
        cfg.fixed_temperature
    };
    // exp(-(v - min)/t) is the softmax of -v/t shifted by its maximum.
    let w: Vec<f64> = cand.iter().map(|&v| (-(v - min) / t).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// Enumerates every order-preserving feasible matching and the exact
/// probability the `algorithm1` sampler assigns to it.
pub fn brute_force_matching_oracle(kld: &[Vec<f64>], cfg: &InteractionConfig) -> Result<MatchingLaw> {
    cfg.validate()?;
    if cfg.t_s > ORACLE_MAX_TAPS || cfg.t_l > ORACLE_MAX_TAPS {
        return Err(Error::Config(format!(
            "matching oracle is limited to {ORACLE_MAX_TAPS} taps per side, got t_s = {}, t_l = {}",
            cfg.t_s, cfg.t_l
        )));
    }
    if cfg.strategy != MatchStrategy::Algorithm1 || !cfg.use_search_range || !cfg.use_order_preservation {
        return Err(Error::Config(
            "matching oracle covers the algorithm1 strategy with search range and order preservation".into(),
        ));
    }
    if kld.len() != cfg.t_s || kld.iter().any(|r| r.len() != cfg.t_l) {
        return Err(Error::Config("distance matrix must be t_s x t_l".into()));
    }
    let mut sequences = Vec::new();
    let mut prefix = Vec::with_capacity(cfg.t_s);
    enumerate(kld, cfg, 0, 0, 1.0, &mut prefix, &mut sequences);
    let mut marginals = vec![vec![0.0; cfg.t_l]; cfg.t_s];
    for (seq, p) in &sequences {
        for (i, &j) in seq.iter().enumerate() {
            marginals[i][j] += p;
        }
    }
    Ok(MatchingLaw { sequences, marginals })
}

fn enumerate(
    kld: &[Vec<f64>],
    cfg: &InteractionConfig,
    i: usize,
    start: usize,
    p: f64,
    prefix: &mut Vec<usize>,
    out: &mut Vec<(Vec<usize>, f64)>,
) {
    if i == cfg.t_s {
        out.push((prefix.clone(), p));
        return;
    }
    let hi = cfg.t_l - cfg.t_s + i;
    let law = law_at(&kld[i], start, hi, cfg);
    for (m, q) in law.into_iter().enumerate() {
        prefix.push(start + m);
        enumerate(kld, cfg, i + 1, start + m + 1, p * q, prefix, out);
        prefix.pop();
    }
}

/// Step-by-step replay of the `algorithm1` sampler, written as a plain loop
/// independent of [`select_matching`](super::select_matching) (with the sampled index used as a local offset). Returns the loss and the
/// matched global indices.
pub fn replay_algorithm1<R: Rng + ?Sized>(kld: &[Vec<f64>], cfg: &InteractionConfig, rng: &mut R) -> Result<(f64, Vec<usize>)> {
    let (t_s, t_l) = (cfg.t_s, cfg.t_l);
    let mut loss = 0.0f64;
    let mut start = 0usize;
    let mut matched = Vec::new();
    for i_s in 0..t_s {
        let mut list = Vec::new();
        let mut i_l = start;
        while i_l <= t_l - t_s + i_s {
            list.push(kld[i_s][i_l]);
            i_l += 1;
        }
        let mut hi = list[0];
        let mut lo = list[0];
        for &v in &list {
            if v > hi {
                hi = v;
            }
            if v < lo {
                lo = v;
            }
        }
        let t = if cfg.use_adaptive_temperature {
            cfg.scale / (hi - lo + cfg.epsilon)
        } else {
            cfg.fixed_temperature
        };
        let mut logits = Vec::new();
        for &v in &list {
            logits.push(-v / t);
        }
        let mut top = logits[0];
        for &z in &logits {
            if z > top {
                top = z;
            }
        }
        let mut p = Vec::new();
        let mut z = 0.0;
        for &x in &logits {
            let e = (x - top).exp();
            p.push(e);
            z += e;
        }
        for x in p.iter_mut() {
            *x /= z;
        }
        let m = WeightedIndex::new(&p).map_err(|e| Error::Internal(e.to_string()))?.sample(rng);
        loss += list[m];
        matched.push(start + m);
        start = start + m + 1;
    }
    Ok((loss, matched))
}
