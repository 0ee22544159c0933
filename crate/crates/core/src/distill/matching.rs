use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{InteractionConfig, MatchStrategy};
use crate::error::{Error, Result};

/// Candidate teacher range `[lo, hi]` (inclusive, global tap indices) for
/// student step `i_s` when the earliest admissible index is `next_start`.
pub fn search_range(i_s: usize, next_start: usize, cfg: &InteractionConfig) -> Result<(usize, usize)> {
    if i_s >= cfg.t_s {
        return Err(Error::Invalid(format!("student step {i_s} out of range for t_s = {}", cfg.t_s)));
    }
    if !cfg.use_search_range {
        return Ok((0, cfg.t_l - 1));
    }
    let hi = cfg.t_l - cfg.t_s + i_s;
    if next_start > hi {
        return Err(Error::Internal(format!("empty search range [{next_start}, {hi}] at student step {i_s}")));
    }
    Ok((next_start, hi))
}

/// `scale / (max - min + epsilon)`, or the fixed temperature when the
/// adaptive one is off.
pub fn adaptive_temperature(values: &[f64], cfg: &InteractionConfig) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Invalid("temperature of an empty candidate list".into()));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Invalid(format!("non-finite candidate distance {bad}")));
    }
    if !cfg.use_adaptive_temperature {
        return Ok(cfg.fixed_temperature);
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(cfg.scale / (max - min + cfg.epsilon))
}

/// `softmax(-values / t)`.
pub fn sampling_distribution(values: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t > 0.0) {
        return Err(Error::Invalid(format!("temperature must be positive, got {t}")));
    }
    if values.is_empty() {
        return Err(Error::Invalid("sampling over an empty candidate list".into()));
    }
    let z: Vec<f64> = values.iter().map(|&v| -v / t).collect();
    let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&x| (x - zmax).exp()).collect();
    let total: f64 = e.iter().sum();
    Ok(e.iter().map(|&x| x / total).collect())
}

/// Record of one student step of a matching.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchStep {
    pub student_step: usize,
    pub search_lo: usize,
    pub search_hi: usize,
    /// Distances to every candidate in `[search_lo, search_hi]`.
    pub kld_values: Vec<f64>,
    pub probs: Vec<f64>,
    /// `None` for the deterministic bottom-k strategy.
    pub temperature: Option<f64>,
    /// Global index of the representative match (for bottom-k, the closest
    /// candidate).
    pub matched: usize,
    /// Every global index contributing to the loss at this step.
    pub selected: Vec<usize>,
    pub previous: Option<usize>,
}

/// Per-step record of one matching episode.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchTrace {
    pub steps: Vec<MatchStep>,
}

#[derive(Serialize)]
struct TraceLine<'a> {
    train_step: usize,
    #[serde(flatten)]
    step: &'a MatchStep,
}

#[derive(Deserialize)]
struct OwnedTraceLine {
    train_step: usize,
    #[serde(flatten)]
    step: MatchStep,
}

/// Parses lines written by [`MatchTrace::to_jsonl`] back into
/// `(train_step, trace)` pairs. A trace starts at every `student_step == 0`.
pub fn parse_trace_jsonl(text: &str) -> Result<Vec<(usize, MatchTrace)>> {
    let mut out: Vec<(usize, MatchTrace)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: OwnedTraceLine =
            serde_json::from_str(line).map_err(|e| Error::Parse { line: n + 1, msg: e.to_string() })?;
        match out.last_mut() {
            Some((step, tr)) if rec.step.student_step > 0 => {
                if *step != rec.train_step || rec.step.student_step != tr.steps.len() {
                    return Err(Error::Parse { line: n + 1, msg: "trace line out of sequence".into() });
                }
                tr.steps.push(rec.step);
            }
            _ if rec.step.student_step == 0 => out.push((rec.train_step, MatchTrace { steps: vec![rec.step] })),
            _ => return Err(Error::Parse { line: n + 1, msg: "trace does not start at student step 0".into() }),
        }
    }
    Ok(out)
}

impl MatchTrace {
    pub fn matched_indices(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.matched).collect()
    }

    /// One JSON object per student step, each tagged with `train_step`.
    pub fn to_jsonl(&self, train_step: usize) -> String {
        let mut out = String::new();
        for step in &self.steps {
            let line = serde_json::to_string(&TraceLine { train_step, step }).expect("trace serializes");
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    /// Checks the structural invariants of a trace produced under `cfg`.
    pub fn check(&self, cfg: &InteractionConfig) -> Result<()> {
        let fail = |msg: String| Err(Error::Internal(msg));
        if self.steps.len() != cfg.t_s {
            return fail(format!("trace has {} steps, expected {}", self.steps.len(), cfg.t_s));
        }
        for (i, s) in self.steps.iter().enumerate() {
            let width = s.search_hi + 1 - s.search_lo;
            if s.kld_values.len() != width || s.probs.len() != width {
                return fail(format!("step {i}: candidate lists do not span [{}, {}]", s.search_lo, s.search_hi));
            }
            let total: f64 = s.probs.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return fail(format!("step {i}: probabilities sum to {total}"));
            }
            if s.matched < s.search_lo || s.matched > s.search_hi {
                return fail(format!("step {i}: match {} outside range", s.matched));
            }
            if cfg.strategy == MatchStrategy::Algorithm1 {
                if cfg.use_search_range && s.search_hi != cfg.t_l - cfg.t_s + i {
                    return fail(format!("step {i}: search_hi {} violates the feasibility bound", s.search_hi));
                }
                if cfg.use_order_preservation {
                    if let Some(prev) = s.previous {
                        if s.matched <= prev {
                            return fail(format!("step {i}: match {} not after {prev}", s.matched));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// One weighted (student step, teacher index) term of the loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pick {
    pub student: usize,
    pub teacher: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    pub picks: Vec<Pick>,
    /// Sum over steps of the selected distances, accumulated in step order.
    pub loss: f64,
    pub trace: MatchTrace,
}

/// Runs the configured matching strategy against a pairwise distance
/// `cost(student_step, teacher_index)`. Only pairs inside a searched range
/// are queried.
pub fn select_matching<R, F>(cfg: &InteractionConfig, mut cost: F, rng: &mut R) -> Result<Matching>
where
    R: Rng + ?Sized,
    F: FnMut(usize, usize) -> Result<f64>,
{
    cfg.validate()?;
    let mut picks = Vec::with_capacity(cfg.t_s);
    let mut steps = Vec::with_capacity(cfg.t_s);
    let mut loss = 0.0;
    let mut next_start = 0;
    let mut previous = None;
    for i_s in 0..cfg.t_s {
        let (lo, hi) = match cfg.strategy {
            MatchStrategy::Algorithm1 => search_range(i_s, next_start, cfg)?,
            _ => (0, cfg.t_l - 1),
        };
        let values = (lo..=hi).map(|j| cost(i_s, j)).collect::<Result<Vec<f64>>>()?;
        let step = match cfg.strategy {
            MatchStrategy::Algorithm1 => {
                let t = adaptive_temperature(&values, cfg)?;
                let probs = sampling_distribution(&values, t)?;
                let m = draw(&probs, rng)?;
                loss += values[m];
                picks.push(Pick { student: i_s, teacher: lo + m, weight: 1.0 });
                if cfg.use_order_preservation {
                    next_start = lo + m + 1;
                }
                (probs, Some(t), lo + m, vec![lo + m])
            }
            MatchStrategy::RandomIndex => {
                if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
                    return Err(Error::Invalid(format!("non-finite candidate distance {bad}")));
                }
                let m = rng.gen_range(0..values.len());
                loss += values[m];
                picks.push(Pick { student: i_s, teacher: m, weight: 1.0 });
                let probs = vec![1.0 / values.len() as f64; values.len()];
                (probs, None, m, vec![m])
            }
            MatchStrategy::BottomK => {
                let chosen = bottom_k(&values, cfg.k)?;
                let sum: f64 = chosen.iter().map(|&j| values[j]).sum();
                loss += sum / cfg.k as f64;
                let w = 1.0 / cfg.k as f64;
                let mut probs = vec![0.0; values.len()];
                for &j in &chosen {
                    probs[j] = w;
                    picks.push(Pick { student: i_s, teacher: j, weight: w });
                }
                (probs, None, chosen[0], chosen)
            }
        };
        let (probs, temperature, matched, selected) = step;
        steps.push(MatchStep {
            student_step: i_s,
            search_lo: lo,
            search_hi: hi,
            kld_values: values,
            probs,
            temperature,
            matched,
            selected,
            previous,
        });
        previous = Some(matched);
    }
    Ok(Matching { picks, loss, trace: MatchTrace { steps } })
}

fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> Result<usize> {
    let dist = WeightedIndex::new(probs).map_err(|e| Error::Internal(format!("sampling distribution: {e}")))?;
    Ok(dist.sample(rng))
}

/// Indices of the `k` smallest values, closest first; ties go to the lower
/// index.
fn bottom_k(values: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > values.len() {
        return Err(Error::Config(format!("bottom_k needs 1 <= k <= {}, got {k}", values.len())));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Invalid(format!("non-finite candidate distance {bad}")));
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

fn matrix_cost<'a>(kld: &'a [Vec<f64>], cfg: &InteractionConfig) -> Result<impl Fn(usize, usize) -> Result<f64> + 'a> {
    if kld.len() != cfg.t_s || kld.iter().any(|r| r.len() != cfg.t_l) {
        return Err(Error::Shape {
            op: "kld_matrix",
            left: vec![kld.len(), kld.first().map_or(0, |r| r.len())],
            right: vec![cfg.t_s, cfg.t_l],
        });
    }
    Ok(move |i: usize, j: usize| Ok(kld[i][j]))
}

/// Loss of the `algorithm1` strategy over a precomputed `t_s × t_l` distance matrix.
pub fn interaction_loss_algorithm1<R: Rng + ?Sized>(
    kld: &[Vec<f64>],
    cfg: &InteractionConfig,
    rng: &mut R,
) -> Result<(f64, MatchTrace)> {
    let cfg = InteractionConfig { strategy: MatchStrategy::Algorithm1, ..cfg.clone() };
    let m = select_matching(&cfg, matrix_cost(kld, &cfg)?, rng)?;
    Ok((m.loss, m.trace))
}

/// Uniformly random teacher index per student step, over the full range.
pub fn interaction_loss_random<R: Rng + ?Sized>(kld: &[Vec<f64>], cfg: &InteractionConfig, rng: &mut R) -> Result<f64> {
    let cfg = InteractionConfig { strategy: MatchStrategy::RandomIndex, ..cfg.clone() };
    Ok(select_matching(&cfg, matrix_cost(kld, &cfg)?, rng)?.loss)
}

/// Mean of the `k` smallest distances per student step, over the full range.
pub fn interaction_loss_bottom_k(kld: &[Vec<f64>], cfg: &InteractionConfig) -> Result<f64> {
    let cfg = InteractionConfig { strategy: MatchStrategy::BottomK, ..cfg.clone() };
    let mut unused = rand::rngs::mock::StepRng::new(0, 0);
    Ok(select_matching(&cfg, matrix_cost(kld, &cfg)?, &mut unused)?.loss)
}
