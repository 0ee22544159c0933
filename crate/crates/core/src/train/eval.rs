use serde::{Deserialize, Serialize};

use crate::data::{Batch, Example, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{LayerTapSet, SeqShape, Transformer};
use crate::numcore::{Graph, Scalar, Tensor};
use crate::verbalizer::Verbalizer;

/// Logits over a right-padded grid, read from the final layer or through a
/// verbalizer at its tap.
fn grid_logits<T: Scalar>(
    model: &Transformer<T>,
    verb: Option<&Verbalizer<T>>,
    tokens: &[usize],
    shape: SeqShape,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    match verb {
        None => {
            let out = model.forward_graph(&mut g, &bound, tokens, shape, &LayerTapSet::default())?;
            Ok(g.value(out.logits).clone())
        }
        Some(v) => {
            let taps = LayerTapSet::new(vec![v.layer], model.cfg.n_layers)?;
            let out = model.forward_graph(&mut g, &bound, tokens, shape, &taps)?;
            let vars = v.bind(&mut g, false);
            let vo = v.verbalize(&mut g, &vars, bound.head, out.taps[0], shape)?;
            Ok(g.value(vo.logits).clone())
        }
    }
}

/// Greedy continuation of each prompt for at most `max_new[i]` tokens,
/// stopping early at EOS. Rows are decoded together on a right-padded grid;
/// causal attention keeps each row independent of the padding.
pub fn greedy_decode<T: Scalar>(
    model: &Transformer<T>,
    verb: Option<&Verbalizer<T>>,
    prompts: &[&[usize]],
    max_new: &[usize],
) -> Result<Vec<Vec<usize>>> {
    if prompts.len() != max_new.len() {
        return Err(Error::Invalid("one length budget per prompt required".into()));
    }
    let mut seqs: Vec<Vec<usize>> = prompts.iter().map(|p| p.to_vec()).collect();
    let mut out = vec![Vec::new(); prompts.len()];
    let limit = model.cfg.max_seq_len;
    let mut active: Vec<usize> = (0..prompts.len())
        .filter(|&i| max_new[i] > 0 && !seqs[i].is_empty() && seqs[i].len() <= limit)
        .collect();
    if prompts.iter().any(|p| p.is_empty()) {
        return Err(Error::Invalid("cannot decode from an empty prompt".into()));
    }
    while !active.is_empty() {
        let seq = active.iter().map(|&i| seqs[i].len()).max().unwrap_or(1);
        let shape = SeqShape { batch: active.len(), seq };
        let mut grid = vec![PAD; shape.rows()];
        for (b, &i) in active.iter().enumerate() {
            grid[b * seq..b * seq + seqs[i].len()].copy_from_slice(&seqs[i]);
        }
        let logits = grid_logits(model, verb, &grid, shape)?;
        let mut still = Vec::with_capacity(active.len());
        for (b, &i) in active.iter().enumerate() {
            let tok = logits.argmax_row(b * seq + seqs[i].len() - 1);
            out[i].push(tok);
            seqs[i].push(tok);
            if tok != EOS && out[i].len() < max_new[i] && seqs[i].len() < limit {
                still.push(i);
            }
        }
        active = still;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    /// Fraction of examples whose greedy response equals the gold response.
    pub exact_match: f64,
    /// Same metric decoding through each verbalizer, shallow to deep.
    pub per_tap_exact_match: Vec<f64>,
}

fn exact_match<T: Scalar>(
    model: &Transformer<T>,
    verb: Option<&Verbalizer<T>>,
    examples: &[Example],
    batch: usize,
) -> Result<f64> {
    let mut hits = 0;
    for chunk in examples.chunks(batch.max(1)) {
        let prompts: Vec<&[usize]> = chunk.iter().map(|e| e.prompt_tokens.as_slice()).collect();
        let budget: Vec<usize> = chunk.iter().map(|e| e.response_tokens.len()).collect();
        let got = greedy_decode(model, verb, &prompts, &budget)?;
        hits += chunk.iter().zip(&got).filter(|(e, g)| &e.response_tokens == *g).count();
    }
    Ok(hits as f64 / examples.len() as f64)
}

/// Greedy exact-match of `model` (and of each verbalizer) on `examples`.
pub fn evaluate<T: Scalar>(
    model: &Transformer<T>,
    verbs: &[Verbalizer<T>],
    examples: &[Example],
    batch: usize,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::Invalid("evaluation set is empty".into()));
    }
    let exact = exact_match(model, None, examples, batch)?;
    let per_tap = verbs.iter().map(|v| exact_match(model, Some(v), examples, batch)).collect::<Result<_>>()?;
    Ok(EvalReport { n: examples.len(), exact_match: exact, per_tap_exact_match: per_tap })
}

/// Teacher-forced response cross-entropy per verbalized tap and at the
/// final layer, averaged over all response tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerbalizedCe {
    pub taps: Vec<f64>,
    pub final_layer: f64,
}

pub fn verbalized_ce<T: Scalar>(
    model: &Transformer<T>,
    verbs: &[Verbalizer<T>],
    examples: &[Example],
    batch: usize,
) -> Result<VerbalizedCe> {
    if examples.is_empty() {
        return Err(Error::Invalid("evaluation set is empty".into()));
    }
    let taps = LayerTapSet::new(verbs.iter().map(|v| v.layer).collect(), model.cfg.n_layers)?;
    let mut sums = vec![0.0; verbs.len()];
    let mut final_sum = 0.0;
    let mut count = 0usize;
    for chunk in examples.chunks(batch.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let b = Batch::from_examples(&refs)?;
        let shape = SeqShape { batch: b.batch, seq: b.seq };
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let out = model.forward_graph(&mut g, &bound, &b.inputs, shape, &taps)?;
        let n = b.mask.iter().filter(|&&m| m).count();
        let ce = g.masked_cross_entropy(out.logits, &b.targets, &b.mask)?;
        final_sum += g.scalar_value(ce).as_f64() * n as f64;
        for (k, v) in verbs.iter().enumerate() {
            let vars = v.bind(&mut g, false);
            let vo = v.verbalize(&mut g, &vars, bound.head, out.taps[k], shape)?;
            let ce = g.masked_cross_entropy(vo.logits, &b.targets, &b.mask)?;
            sums[k] += g.scalar_value(ce).as_f64() * n as f64;
        }
        count += n;
    }
    Ok(VerbalizedCe {
        taps: sums.into_iter().map(|s| s / count as f64).collect(),
        final_layer: final_sum / count as f64,
    })
}

/// One row of a per-layer verbalization trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    /// Tapped layer index, or `None` for the final layer.
    pub layer: Option<usize>,
    /// Greedy response decoded from this layer.
    pub decoded: Vec<usize>,
    /// Teacher-forced cross-entropy of each gold response token.
    pub token_ce: Vec<f64>,
}

/// Decodes `ex` through every verbalizer and through the final layer.
pub fn trace_example<T: Scalar>(model: &Transformer<T>, verbs: &[Verbalizer<T>], ex: &Example) -> Result<Vec<TraceRow>> {
    let b = Batch::from_examples(&[ex])?;
    let shape = SeqShape { batch: 1, seq: b.seq };
    let prompt = [ex.prompt_tokens.as_slice()];
    let budget = [ex.response_tokens.len()];
    let mut rows = Vec::with_capacity(verbs.len() + 1);
    let sources: Vec<Option<&Verbalizer<T>>> = verbs.iter().map(Some).chain(std::iter::once(None)).collect();
    for src in sources {
        let logits = grid_logits(model, src, &b.inputs, shape)?;
        let mut token_ce = Vec::new();
        for (r, &m) in b.mask.iter().enumerate() {
            if m {
                let row = logits.row(r);
                let max = row.iter().fold(f64::NEG_INFINITY, |a, x| a.max(x.as_f64()));
                let lse = max + row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
                token_ce.push(lse - row[b.targets[r]].as_f64());
            }
        }
        let decoded = greedy_decode(model, src, &prompt, &budget)?.remove(0);
        rows.push(TraceRow { layer: src.map(|v| v.layer), decoded, token_ce });
    }
    Ok(rows)
}
