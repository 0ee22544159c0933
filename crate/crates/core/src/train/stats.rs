use serde::{Deserialize, Serialize};

use crate::distill::MatchTrace;
use crate::error::{Error, Result};

/// Histogram of matched teacher taps per student tap over one window of
/// interaction steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchHistogram {
    /// First optimizer step in the window (inclusive).
    pub from_step: usize,
    /// End of the window (exclusive).
    pub to_step: usize,
    /// `counts[i_s][i_l]`: how often student tap `i_s` matched teacher tap `i_l`.
    pub counts: Vec<Vec<u64>>,
}

impl MatchHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Mean matched teacher tap over all student taps and draws.
    pub fn mean_depth(&self) -> Option<f64> {
        let n = self.total();
        if n == 0 {
            return None;
        }
        let s: u64 = self.counts.iter().flat_map(|row| row.iter().enumerate().map(|(j, &c)| j as u64 * c)).sum();
        Some(s as f64 / n as f64)
    }

    /// Mean matched teacher tap of one student tap.
    pub fn mean_depth_of(&self, student_tap: usize) -> Option<f64> {
        let row = self.counts.get(student_tap)?;
        let n: u64 = row.iter().sum();
        (n > 0).then(|| row.iter().enumerate().map(|(j, &c)| j as f64 * c as f64).sum::<f64>() / n as f64)
    }
}

/// First- and last-decile matching histograms of an interaction run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchDrift {
    pub first: MatchHistogram,
    pub last: MatchHistogram,
}

fn histogram(traces: &[(usize, MatchTrace)], from: usize, to: usize, t_s: usize, t_l: usize) -> Result<MatchHistogram> {
    let mut counts = vec![vec![0u64; t_l]; t_s];
    for (step, tr) in traces.iter().filter(|(s, _)| (from..to).contains(s)) {
        let matched = tr.matched_indices();
        if matched.len() != t_s {
            return Err(Error::Invalid(format!("trace at step {step} has {} matches, expected {t_s}", matched.len())));
        }
        for (i, &j) in matched.iter().enumerate() {
            if j >= t_l {
                return Err(Error::Invalid(format!("matched tap {j} at step {step} exceeds {t_l} teacher taps")));
            }
            counts[i][j] += 1;
        }
    }
    Ok(MatchHistogram { from_step: from, to_step: to, counts })
}

/// Splits `total_steps` into deciles (rounded up, at least one step) and
/// histograms the first and the last.
pub fn match_drift(traces: &[(usize, MatchTrace)], total_steps: usize, t_s: usize, t_l: usize) -> Result<MatchDrift> {
    if total_steps == 0 {
        return Err(Error::Invalid("no interaction steps to summarise".into()));
    }
    let w = total_steps.div_ceil(10);
    Ok(MatchDrift {
        first: histogram(traces, 0, w, t_s, t_l)?,
        last: histogram(traces, total_steps - w, total_steps, t_s, t_l)?,
    })
}
