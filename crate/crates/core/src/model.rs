//! Decoder-only transformer with rotary positions, RMS pre-normalization,
//! a SiLU-gated feed-forward block, and hidden-state taps at chosen layers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Graph, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of decoder blocks. Zero gives an embedding-only model.
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub tie_lm_head: bool,
    /// Feed-forward hidden width as a multiple of `d_model`.
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
}

fn default_ffn_mult() -> usize {
    4
}

fn default_rope_base() -> f64 {
    10000.0
}

impl ModelConfig {
    pub fn teacher_default() -> Self {
        ModelConfig {
            n_layers: 12,
            d_model: 128,
            n_heads: 4,
            vocab_size: crate::data::VOCAB_SIZE,
            max_seq_len: 32,
            tie_lm_head: false,
            ffn_mult: 4,
            rope_base: 10000.0,
        }
    }

    pub fn student_default() -> Self {
        ModelConfig {
            n_layers: 4,
            ..Self::teacher_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_model == 0 || self.vocab_size == 0 || self.max_seq_len == 0 || self.ffn_mult == 0 {
            return bad("d_model, vocab_size, max_seq_len and ffn_mult must be positive");
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return bad("head dimension must be even for rotary encoding");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_mult * self.d_model
    }

    /// Parameters in one decoder block.
    pub fn block_parameters(&self) -> usize {
        let d = self.d_model;
        2 * d + 4 * d * d + 3 * d * self.ffn_hidden()
    }

    /// Exact trainable-parameter count.
    pub fn parameter_count(&self) -> usize {
        let (v, d) = (self.vocab_size, self.d_model);
        let head = if self.tie_lm_head { 0 } else { v * d };
        let final_norm = if self.n_layers > 0 { d } else { 0 };
        v * d + head + final_norm + self.n_layers * self.block_parameters()
    }
}

/// Ordered set of intermediate layers exposed for verbalization.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTapSet {
    indices: Vec<usize>,
}

impl LayerTapSet {
    /// Indices must be strictly increasing and lie below the final layer.
    pub fn new(indices: Vec<usize>, n_layers: usize) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("tap indices must be strictly increasing: {indices:?}")));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i + 1 >= n_layers) {
            return Err(Error::Config(format!(
                "tap index {bad} is not an intermediate layer of a {n_layers}-layer model"
            )));
        }
        Ok(LayerTapSet { indices })
    }

    /// `start, start + stride, …` below the final layer.
    pub fn strided(n_layers: usize, start: usize, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("tap stride must be positive".into()));
        }
        let idx = (start..n_layers.saturating_sub(1)).step_by(stride).collect();
        Self::new(idx, n_layers)
    }

    /// Every layer except the last.
    pub fn all_intermediate(n_layers: usize) -> Self {
        LayerTapSet {
            indices: (0..n_layers.saturating_sub(1)).collect(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Parameter handles of one decoder block inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn_norm: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

pub(crate) const BLOCK_TENSORS: usize = 9;

impl BlockVars {
    pub(crate) fn from_slice(v: &[Var]) -> Self {
        BlockVars {
            attn_norm: v[0],
            wq: v[1],
            wk: v[2],
            wv: v[3],
            wo: v[4],
            ffn_norm: v[5],
            w_gate: v[6],
            w_up: v[7],
            w_down: v[8],
        }
    }
}

/// Appends the tensors of one freshly initialised block to `store`.
pub(crate) fn init_block<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    d: usize,
    ffn: usize,
    depth_scale: f64,
    rng: &mut ChaCha8Rng,
) {
    let s_in = 1.0 / (d as f64).sqrt();
    let s_ffn = 1.0 / (ffn as f64).sqrt();
    store.push(format!("{prefix}.attn_norm"), Tensor::full(&[d], T::one()));
    store.push_normal(format!("{prefix}.wq"), &[d, d], s_in, rng);
    store.push_normal(format!("{prefix}.wk"), &[d, d], s_in, rng);
    store.push_normal(format!("{prefix}.wv"), &[d, d], s_in, rng);
    store.push_normal(format!("{prefix}.wo"), &[d, d], s_in * depth_scale, rng);
    store.push(format!("{prefix}.ffn_norm"), Tensor::full(&[d], T::one()));
    store.push_normal(format!("{prefix}.w_gate"), &[d, ffn], s_in, rng);
    store.push_normal(format!("{prefix}.w_up"), &[d, ffn], s_in, rng);
    store.push_normal(format!("{prefix}.w_down"), &[ffn, d], s_ffn * depth_scale, rng);
}

/// Shape of the token grid flowing through a block: `batch` sequences of
/// `seq` positions, flattened to `batch·seq` rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqShape {
    pub batch: usize,
    pub seq: usize,
}

impl SeqShape {
    pub fn rows(self) -> usize {
        self.batch * self.seq
    }
}

pub(crate) struct BlockOut {
    pub hidden: Var,
    pub attention: Var,
}

/// One pre-norm decoder block: causal self-attention then gated FFN, each
/// with a residual connection.
pub(crate) fn block_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &BlockVars,
    x: Var,
    shape: SeqShape,
    heads: usize,
    rope_base: f64,
) -> Result<BlockOut> {
    let d = g.value(x).cols();
    let dh = d / heads;
    let h = g.rms_norm(x, p.attn_norm)?;
    let q = g.matmul(h, p.wq, false)?;
    let k = g.matmul(h, p.wk, false)?;
    let v = g.matmul(h, p.wv, false)?;
    let q = g.split_heads(q, shape.batch, shape.seq, heads)?;
    let k = g.split_heads(k, shape.batch, shape.seq, heads)?;
    let v = g.split_heads(v, shape.batch, shape.seq, heads)?;
    let q = g.rope(q, rope_base)?;
    let k = g.rope(k, rope_base)?;
    let scores = g.matmul(q, k, true)?;
    let scores = g.scale(scores, T::lit(1.0 / (dh as f64).sqrt()));
    let scores = g.causal_mask(scores)?;
    let attention = g.softmax(scores);
    let ctx = g.matmul(attention, v, false)?;
    let ctx = g.merge_heads(ctx, shape.batch, shape.seq, heads)?;
    let attn_out = g.matmul(ctx, p.wo, false)?;
    let x = g.add(x, attn_out)?;

    let h = g.rms_norm(x, p.ffn_norm)?;
    let gate = g.matmul(h, p.w_gate, false)?;
    let gate = g.silu(gate);
    let up = g.matmul(h, p.w_up, false)?;
    let inner = g.mul(gate, up)?;
    let ffn_out = g.matmul(inner, p.w_down, false)?;
    let hidden = g.add(x, ffn_out)?;
    Ok(BlockOut { hidden, attention })
}

/// The language head: `[d, V]` matrix, or the transposed embedding table
/// when tied.
#[derive(Clone, Copy, Debug)]
pub struct HeadVar {
    pub weight: Var,
    pub transposed: bool,
}

impl HeadVar {
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.matmul(x, self.weight, self.transposed)
    }
}

/// Parameter handles of a whole model inside one graph.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub vars: Vec<Var>,
    pub embed: Var,
    pub blocks: Vec<BlockVars>,
    pub final_norm: Option<Var>,
    pub head: HeadVar,
}

/// Graph handles produced by a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub logits: Var,
    /// Normalised final hidden state that feeds the language head.
    pub final_hidden: Var,
    pub taps: Vec<Var>,
    /// Per-layer attention probabilities `[batch·heads, T, T]`.
    pub attention: Vec<Var>,
}

/// Concrete outputs of [`Transformer::forward_with_taps`].
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<T> {
    pub final_logits: Tensor<T>,
    pub tapped_hidden: Vec<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transformer<T = f32> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Transformer<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, d) = (cfg.vocab_size, cfg.d_model);
        let s = 1.0 / (d as f64).sqrt();
        let depth_scale = 1.0 / (2.0 * cfg.n_layers.max(1) as f64).sqrt();
        let mut params = ParamStore::new();
        params.push_normal("embed", &[v, d], 1.0, &mut rng);
        for l in 0..cfg.n_layers {
            init_block(&mut params, &format!("layers.{l}"), d, cfg.ffn_hidden(), depth_scale, &mut rng);
        }
        if cfg.n_layers > 0 {
            params.push("final_norm", Tensor::full(&[d], T::one()));
        }
        if !cfg.tie_lm_head {
            params.push_normal("lm_head", &[d, v], s, &mut rng);
        }
        Ok(Transformer { cfg, params })
    }

    /// Rebuilds a model around an existing parameter store, checking names
    /// and shapes against a fresh initialisation.
    pub fn from_params(cfg: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let reference = Transformer::<T>::new(cfg.clone(), 0)?;
        if reference.params.names() != params.names() {
            return Err(Error::Checkpoint("parameter names do not match the model config".into()));
        }
        for ((n, a), b) in reference.params.iter().zip(params.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::Checkpoint(format!("parameter {n} has shape {:?}, expected {:?}", b.shape(), a.shape())));
            }
        }
        Ok(Transformer { cfg, params })
    }

    pub fn count_parameters(&self) -> usize {
        self.params.numel()
    }

    /// Places all parameters in `g`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundModel {
        let vars = self.params.bind(g, trainable);
        let embed = vars[0];
        let blocks = (0..self.cfg.n_layers)
            .map(|l| BlockVars::from_slice(&vars[1 + l * BLOCK_TENSORS..1 + (l + 1) * BLOCK_TENSORS]))
            .collect();
        let mut next = 1 + self.cfg.n_layers * BLOCK_TENSORS;
        let final_norm = (self.cfg.n_layers > 0).then(|| {
            next += 1;
            vars[next - 1]
        });
        let head = if self.cfg.tie_lm_head {
            HeadVar {
                weight: embed,
                transposed: true,
            }
        } else {
            HeadVar {
                weight: vars[next],
                transposed: false,
            }
        };
        BoundModel {
            vars,
            embed,
            blocks,
            final_norm,
            head,
        }
    }

    fn check_tokens(&self, tokens: &[usize], shape: SeqShape) -> Result<()> {
        if tokens.len() != shape.rows() || tokens.is_empty() {
            return Err(Error::Invalid(format!(
                "token grid has {} ids, expected {}x{}",
                tokens.len(),
                shape.batch,
                shape.seq
            )));
        }
        if shape.seq > self.cfg.max_seq_len {
            return Err(Error::Invalid(format!(
                "sequence length {} exceeds max_seq_len {}",
                shape.seq, self.cfg.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::Invalid(format!("token id {bad} out of range")));
        }
        Ok(())
    }

    /// Forward pass over a right-padded `[batch, seq]` token grid recording
    /// the residual-stream output of each tapped layer.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        bound: &BoundModel,
        tokens: &[usize],
        shape: SeqShape,
        taps: &LayerTapSet,
    ) -> Result<ForwardVars> {
        self.check_tokens(tokens, shape)?;
        if let Some(&bad) = taps.indices().iter().find(|&&i| i + 1 >= self.cfg.n_layers) {
            return Err(Error::Config(format!("tap index {bad} invalid for {} layers", self.cfg.n_layers)));
        }
        let mut x = g.embedding(bound.embed, tokens)?;
        let mut tapped = Vec::with_capacity(taps.len());
        let mut attention = Vec::with_capacity(self.cfg.n_layers);
        let mut next_tap = taps.indices().iter().peekable();
        for (l, blk) in bound.blocks.iter().enumerate() {
            let out = block_forward(g, blk, x, shape, self.cfg.n_heads, self.cfg.rope_base)?;
            x = out.hidden;
            attention.push(out.attention);
            if next_tap.peek() == Some(&&l) {
                tapped.push(x);
                next_tap.next();
            }
        }
        let final_hidden = match bound.final_norm {
            Some(n) => g.rms_norm(x, n)?,
            None => x,
        };
        let logits = bound.head.apply(g, final_hidden)?;
        Ok(ForwardVars {
            logits,
            final_hidden,
            taps: tapped,
            attention,
        })
    }

    /// Single-sequence forward pass returning concrete tensors.
    pub fn forward_with_taps(&self, tokens: &[usize], taps: &LayerTapSet) -> Result<ForwardOutput<T>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let shape = SeqShape {
            batch: 1,
            seq: tokens.len(),
        };
        let out = self.forward_graph(&mut g, &bound, tokens, shape, taps)?;
        Ok(ForwardOutput {
            final_logits: g.value(out.logits).clone(),
            tapped_hidden: out.taps.iter().map(|&v| g.value(v).clone()).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{grad_check, DEFAULT_STEP};

    fn tiny(n_layers: usize) -> ModelConfig {
        ModelConfig {
            n_layers,
            d_model: 8,
            n_heads: 2,
            vocab_size: 11,
            max_seq_len: 16,
            tie_lm_head: false,
            ffn_mult: 2,
            rope_base: 10000.0,
        }
    }

    #[test]
    fn embedding_only_parameter_count() {
        let cfg = ModelConfig {
            n_layers: 0,
            d_model: 4,
            n_heads: 1,
            vocab_size: 10,
            max_seq_len: 8,
            tie_lm_head: false,
            ffn_mult: 4,
            rope_base: 10000.0,
        };
        let m = Transformer::<f32>::new(cfg.clone(), 0).unwrap();
        assert_eq!(m.count_parameters(), 80);
        assert_eq!(cfg.parameter_count(), 80);
        let tied = Transformer::<f32>::new(ModelConfig { tie_lm_head: true, ..cfg }, 0).unwrap();
        assert_eq!(tied.count_parameters(), 80 - 40);
    }

    #[test]
    fn parameter_count_structure() {
        let a = Transformer::<f32>::new(tiny(2), 0).unwrap();
        let b = Transformer::<f32>::new(tiny(4), 0).unwrap();
        assert_eq!(a.count_parameters(), a.cfg.parameter_count());
        assert_eq!(b.count_parameters(), b.cfg.parameter_count());
        let fixed = 2 * 11 * 8 + 8;
        assert_eq!(b.count_parameters() - fixed, 2 * (a.count_parameters() - fixed));
        assert_eq!(a.params.get("embed").unwrap().len(), b.params.get("embed").unwrap().len());
        let tied = Transformer::<f32>::new(ModelConfig { tie_lm_head: true, ..tiny(2) }, 0).unwrap();
        assert_eq!(a.count_parameters() - tied.count_parameters(), 11 * 8);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { n_heads: 3, ..tiny(2) }.validate().is_err());
        assert!(ModelConfig { d_model: 6, n_heads: 2, ..tiny(2) }.validate().is_err());
        assert!(LayerTapSet::new(vec![1, 1], 4).is_err());
        assert!(LayerTapSet::new(vec![3], 4).is_err());
        assert!(LayerTapSet::new(vec![0, 2], 4).is_ok());
    }

    #[test]
    fn strided_tap_set_of_a_deep_model_has_seven_layers() {
        // Every fourth layer starting from the second, in a 28-layer stack.
        let taps = LayerTapSet::strided(28, 1, 4).unwrap();
        assert_eq!(taps.indices(), &[1, 5, 9, 13, 17, 21, 25]);
        let cfg = ModelConfig {
            n_layers: 28,
            d_model: 4,
            n_heads: 2,
            vocab_size: 11,
            max_seq_len: 8,
            tie_lm_head: true,
            ffn_mult: 1,
            rope_base: 10000.0,
        };
        let m = Transformer::<f32>::new(cfg, 1).unwrap();
        let out = m.forward_with_taps(&[1, 2, 3], &taps).unwrap();
        assert_eq!(out.tapped_hidden.len(), 7);
        assert!(out.tapped_hidden.iter().all(|t| t.shape() == [3, 4]));
        assert_eq!(out.final_logits.shape(), &[3, 11]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let m = Transformer::<f32>::new(tiny(3), 4).unwrap();
        let mut g = Graph::new();
        let b = m.bind(&mut g, false);
        let shape = SeqShape { batch: 2, seq: 5 };
        let toks = [1, 4, 5, 6, 3, 1, 7, 7, 2, 0];
        let out = m.forward_graph(&mut g, &b, &toks, shape, &LayerTapSet::all_intermediate(3)).unwrap();
        for &a in &out.attention {
            let t = g.value(a);
            for r in 0..t.rows() {
                let s: f32 = t.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn causality_under_mutation() {
        let m = Transformer::<f32>::new(tiny(3), 5).unwrap();
        let taps = LayerTapSet::all_intermediate(3);
        let toks = vec![1, 6, 7, 8, 9, 3, 10];
        let base = m.forward_with_taps(&toks, &taps).unwrap();
        for t in 0..toks.len() - 1 {
            let mut mutated = toks.clone();
            for (j, v) in mutated.iter_mut().enumerate().skip(t + 1) {
                *v = (*v + j + 1) % 11;
            }
            let out = m.forward_with_taps(&mutated, &taps).unwrap();
            for r in 0..=t {
                assert_eq!(base.final_logits.row(r), out.final_logits.row(r), "position {r} changed");
            }
        }
    }

    #[test]
    fn taps_do_not_change_logits_and_forward_is_deterministic() {
        let m = Transformer::<f32>::new(tiny(4), 6).unwrap();
        let toks = [1, 2, 3, 4, 5];
        let none = LayerTapSet::new(vec![], 4).unwrap();
        let some = LayerTapSet::new(vec![0, 2], 4).unwrap();
        let a = m.forward_with_taps(&toks, &none).unwrap();
        let b = m.forward_with_taps(&toks, &some).unwrap();
        let c = m.forward_with_taps(&toks, &some).unwrap();
        assert_eq!(a.final_logits, b.final_logits);
        assert_eq!(b, c);
        assert_eq!(b.tapped_hidden.len(), 2);
    }

    #[test]
    fn input_validation() {
        let m = Transformer::<f32>::new(tiny(2), 0).unwrap();
        let taps = LayerTapSet::all_intermediate(2);
        assert!(m.forward_with_taps(&[1; 17], &taps).is_err());
        assert!(m.forward_with_taps(&[1, 11], &taps).is_err());
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let cfg = tiny(1);
        let m = Transformer::<f64>::new(cfg, 9).unwrap();
        let point: Vec<Tensor<f64>> = m.params.tensors().to_vec();
        let toks = [1, 4, 2, 7, 3, 1];
        let targets = [4, 2, 7, 3, 1, 5];
        let err = grad_check(
            |g, vars| {
                let bound = BoundModel {
                    vars: vars.to_vec(),
                    embed: vars[0],
                    blocks: vec![BlockVars::from_slice(&vars[1..10])],
                    final_norm: Some(vars[10]),
                    head: HeadVar { weight: vars[11], transposed: false },
                };
                let shape = SeqShape { batch: 2, seq: 3 };
                let out = m.forward_graph(g, &bound, &toks, shape, &LayerTapSet::all_intermediate(1))?;
                g.masked_cross_entropy(out.logits, &targets, &[true, false, true, true, true, false])
            },
            &point,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
