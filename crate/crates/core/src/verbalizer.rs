//! Per-layer verbalizers: a small trainable map followed by the backbone's
//! own language head, turning an intermediate hidden state into vocabulary
//! logits.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{block_forward, init_block, BlockVars, HeadVar, LayerTapSet, ModelConfig, SeqShape, Transformer, BLOCK_TENSORS};
use crate::numcore::{Graph, ParamStore, Scalar, Tensor, Var};

/// Verbalizer body placed between a tapped layer and the language head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerbalizerArch {
    /// Gated FFN whose three maps all stay at width `d`.
    VerbFfn,
    VerbFfnX2,
    /// Conventional gated FFN expanding to `4d` and back.
    Ffn,
    FfnX2,
    /// A single `d → d` linear map.
    Mlp,
    MlpX2,
    /// One full decoder block.
    Decoder,
    DecoderX2,
}

pub const FFN_EXPANSION: usize = 4;

impl VerbalizerArch {
    pub const ALL: [VerbalizerArch; 8] = [
        VerbalizerArch::VerbFfn,
        VerbalizerArch::VerbFfnX2,
        VerbalizerArch::Ffn,
        VerbalizerArch::FfnX2,
        VerbalizerArch::Mlp,
        VerbalizerArch::MlpX2,
        VerbalizerArch::Decoder,
        VerbalizerArch::DecoderX2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VerbalizerArch::VerbFfn => "verb_ffn",
            VerbalizerArch::VerbFfnX2 => "verb_ffn_x2",
            VerbalizerArch::Ffn => "ffn",
            VerbalizerArch::FfnX2 => "ffn_x2",
            VerbalizerArch::Mlp => "mlp",
            VerbalizerArch::MlpX2 => "mlp_x2",
            VerbalizerArch::Decoder => "decoder",
            VerbalizerArch::DecoderX2 => "decoder_x2",
        }
    }

    fn base(self) -> (Unit, usize) {
        match self {
            VerbalizerArch::VerbFfn => (Unit::GatedFfn(1), 1),
            VerbalizerArch::VerbFfnX2 => (Unit::GatedFfn(1), 2),
            VerbalizerArch::Ffn => (Unit::GatedFfn(FFN_EXPANSION), 1),
            VerbalizerArch::FfnX2 => (Unit::GatedFfn(FFN_EXPANSION), 2),
            VerbalizerArch::Mlp => (Unit::Linear, 1),
            VerbalizerArch::MlpX2 => (Unit::Linear, 2),
            VerbalizerArch::Decoder => (Unit::Block, 1),
            VerbalizerArch::DecoderX2 => (Unit::Block, 2),
        }
    }

    /// Trainable parameters of one verbalizer at hidden width `d`.
    pub fn parameter_count(self, d: usize) -> usize {
        let (unit, copies) = self.base();
        let per = match unit {
            Unit::Linear => d * d,
            Unit::GatedFfn(mult) => 3 * d * d * mult,
            Unit::Block => 2 * d + 4 * d * d + 3 * d * d * FFN_EXPANSION,
        };
        copies * per
    }
}

impl fmt::Display for VerbalizerArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VerbalizerArch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VerbalizerArch::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = VerbalizerArch::ALL.iter().map(|a| a.name()).collect();
                Error::Config(format!("unknown verbalizer architecture {s:?}; valid: {}", valid.join(", ")))
            })
    }
}

#[derive(Clone, Copy)]
enum Unit {
    Linear,
    GatedFfn(usize),
    Block,
}

/// Trainable part of one verbalizer. The language head is never stored
/// here; it is borrowed from the backbone at every forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Verbalizer<T = f32> {
    pub arch: VerbalizerArch,
    pub layer: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub rope_base: f64,
    pub params: ParamStore<T>,
}

/// Graph handles of a verbalizer's output.
#[derive(Clone, Copy, Debug)]
pub struct VerbalizedVars {
    /// Body output before the language head.
    pub features: Var,
    pub logits: Var,
}

impl<T: Scalar> Verbalizer<T> {
    pub fn new(arch: VerbalizerArch, layer: usize, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let d = cfg.d_model;
        let (unit, copies) = arch.base();
        if matches!(unit, Unit::Block) && (cfg.n_heads == 0 || d % cfg.n_heads != 0 || (d / cfg.n_heads) % 2 != 0) {
            return Err(Error::Config(format!(
                "decoder verbalizer needs n_heads dividing d_model into even head widths (d_model {d}, n_heads {})",
                cfg.n_heads
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let s = 1.0 / (d as f64).sqrt();
        for c in 0..copies {
            match unit {
                Unit::Linear => {
                    params.push_normal(format!("{c}.proj"), &[d, d], s, &mut rng);
                }
                Unit::GatedFfn(mult) => {
                    let h = d * mult;
                    params.push_normal(format!("{c}.gate"), &[d, h], s, &mut rng);
                    params.push_normal(format!("{c}.up"), &[d, h], s, &mut rng);
                    params.push_normal(format!("{c}.down"), &[h, d], 1.0 / (h as f64).sqrt(), &mut rng);
                }
                Unit::Block => {
                    init_block(&mut params, &format!("{c}"), d, d * FFN_EXPANSION, 1.0, &mut rng);
                }
            }
        }
        Ok(Verbalizer {
            arch,
            layer,
            d_model: d,
            n_heads: cfg.n_heads,
            rope_base: cfg.rope_base,
            params,
        })
    }

    pub fn count_parameters(&self) -> usize {
        self.params.numel()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params.bind(g, trainable)
    }

    /// `head(body(hidden))` on `[rows, d]` hidden states.
    pub fn verbalize(&self, g: &mut Graph<T>, vars: &[Var], head: HeadVar, hidden: Var, shape: SeqShape) -> Result<VerbalizedVars> {
        let w = g.value(hidden).cols();
        if w != self.d_model {
            return Err(Error::Shape {
                op: "verbalize",
                left: g.shape(hidden).to_vec(),
                right: vec![self.d_model],
            });
        }
        let (unit, copies) = self.arch.base();
        let mut x = hidden;
        let mut i = 0;
        for _ in 0..copies {
            x = match unit {
                Unit::Linear => {
                    i += 1;
                    g.matmul(x, vars[i - 1], false)?
                }
                Unit::GatedFfn(_) => {
                    let (gate, up, down) = (vars[i], vars[i + 1], vars[i + 2]);
                    i += 3;
                    let a = g.matmul(x, gate, false)?;
                    let a = g.silu(a);
                    let b = g.matmul(x, up, false)?;
                    let h = g.mul(a, b)?;
                    g.matmul(h, down, false)?
                }
                Unit::Block => {
                    let blk = BlockVars::from_slice(&vars[i..i + BLOCK_TENSORS]);
                    i += BLOCK_TENSORS;
                    block_forward(g, &blk, x, shape, self.n_heads, self.rope_base)?.hidden
                }
            };
        }
        let logits = head.apply(g, x)?;
        Ok(VerbalizedVars { features: x, logits })
    }

    /// Verbalizes a concrete `[T, d]` hidden state of one sequence through
    /// `backbone`'s language head.
    pub fn verbalize_tensor(&self, backbone: &Transformer<T>, hidden: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = backbone.bind(&mut g, false);
        let vars = self.bind(&mut g, false);
        let h = g.input(hidden.clone());
        let shape = SeqShape { batch: 1, seq: hidden.rows() };
        let out = self.verbalize(&mut g, &vars, bound.head, h, shape)?;
        Ok(g.value(out.logits).clone())
    }
}

/// One independently initialised verbalizer per tap.
pub fn build_verbalizers<T: Scalar>(
    backbone: &Transformer<T>,
    taps: &LayerTapSet,
    arch: VerbalizerArch,
    seed: u64,
) -> Result<Vec<Verbalizer<T>>> {
    if let Some(&bad) = taps.indices().iter().find(|&&i| i + 1 >= backbone.cfg.n_layers) {
        return Err(Error::Config(format!("tap {bad} invalid for a {}-layer backbone", backbone.cfg.n_layers)));
    }
    taps.indices()
        .iter()
        .enumerate()
        .map(|(k, &layer)| {
            let s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64 + 1);
            Verbalizer::new(arch, layer, &backbone.cfg, s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n_layers: usize, d: usize) -> ModelConfig {
        ModelConfig {
            n_layers,
            d_model: d,
            n_heads: 4,
            vocab_size: 16,
            max_seq_len: 16,
            tie_lm_head: false,
            ffn_mult: 2,
            rope_base: 10000.0,
        }
    }

    #[test]
    fn seven_taps_give_seven_disjoint_verbalizers() {
        let m = Transformer::<f32>::new(cfg(28, 8), 0).unwrap();
        let taps = LayerTapSet::strided(28, 1, 4).unwrap();
        let vs = build_verbalizers(&m, &taps, VerbalizerArch::VerbFfn, 3).unwrap();
        assert_eq!(vs.len(), 7);
        for i in 0..7 {
            for j in i + 1..7 {
                assert_ne!(vs[i].params, vs[j].params);
            }
        }
    }

    #[test]
    fn verb_ffn_keeps_width() {
        let m = Transformer::<f32>::new(cfg(3, 128), 0).unwrap();
        let v = &build_verbalizers(&m, &LayerTapSet::new(vec![1], 3).unwrap(), VerbalizerArch::VerbFfn, 0).unwrap()[0];
        for (_, t) in v.params.iter() {
            assert_eq!(t.shape(), &[128, 128]);
        }
    }

    #[test]
    fn parameter_ordering_matches_architecture_sizes() {
        let d = 64;
        let c = cfg(3, d);
        let count = |a| Verbalizer::<f32>::new(a, 0, &c, 0).unwrap().count_parameters();
        for a in VerbalizerArch::ALL {
            assert_eq!(count(a), a.parameter_count(d), "{a}");
        }
        use VerbalizerArch::*;
        assert!(count(Mlp) < count(VerbFfn));
        assert!(count(VerbFfn) < count(Ffn));
        assert!(count(Ffn) < count(Decoder));
        assert!(count(MlpX2) < count(VerbFfnX2));
        assert!(count(VerbFfnX2) < count(FfnX2));
        assert!(count(FfnX2) < count(DecoderX2));
    }

    #[test]
    fn shape_contract_for_every_variant() {
        let m = Transformer::<f32>::new(cfg(3, 8), 1).unwrap();
        let hidden = Tensor::new(vec![5, 8], (0..40).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        for a in VerbalizerArch::ALL {
            let v = Verbalizer::new(a, 0, &m.cfg, 2).unwrap();
            let logits = v.verbalize_tensor(&m, &hidden).unwrap();
            assert_eq!(logits.shape(), &[5, 16], "{a}");
            assert!(logits.all_finite());
        }
        let narrow = Tensor::<f32>::zeros(&[5, 4]);
        assert!(Verbalizer::new(VerbalizerArch::Mlp, 0, &m.cfg, 2).unwrap().verbalize_tensor(&m, &narrow).is_err());
    }

    #[test]
    fn zero_output_projection_gives_uniform_distribution() {
        let m = Transformer::<f64>::new(cfg(3, 8), 1).unwrap();
        let mut v = Verbalizer::<f64>::new(VerbalizerArch::VerbFfn, 0, &m.cfg, 2).unwrap();
        let down = v.params.tensors()[2].shape().to_vec();
        v.params.tensors_mut()[2] = Tensor::zeros(&down);
        let hidden = Tensor::new(vec![2, 8], (0..16).map(|i| i as f64 - 3.0).collect()).unwrap();
        let logits = v.verbalize_tensor(&m, &hidden).unwrap();
        assert!(logits.data().iter().all(|&x| x == 0.0));
        let mut g = Graph::new();
        let l = g.input(logits);
        let p = g.softmax(l);
        assert!(g.value(p).data().iter().all(|&x| (x - 1.0 / 16.0).abs() < 1e-15));
    }

    #[test]
    fn different_seeds_give_different_logits() {
        let m = Transformer::<f32>::new(cfg(3, 8), 1).unwrap();
        let hidden = Tensor::new(vec![2, 8], (0..16).map(|i| (i as f32).cos()).collect()).unwrap();
        let a = Verbalizer::<f32>::new(VerbalizerArch::VerbFfn, 0, &m.cfg, 1).unwrap();
        let b = Verbalizer::<f32>::new(VerbalizerArch::VerbFfn, 0, &m.cfg, 2).unwrap();
        assert_ne!(a.verbalize_tensor(&m, &hidden).unwrap(), b.verbalize_tensor(&m, &hidden).unwrap());
    }

    #[test]
    fn decoder_variant_rejects_bad_head_config() {
        let bad = ModelConfig { n_heads: 3, ..cfg(3, 8) };
        assert!(Verbalizer::<f32>::new(VerbalizerArch::Decoder, 0, &bad, 0).is_err());
        assert!(Verbalizer::<f32>::new(VerbalizerArch::Mlp, 0, &bad, 0).is_ok());
    }

    #[test]
    fn arch_names_round_trip() {
        for a in VerbalizerArch::ALL {
            assert_eq!(a.name().parse::<VerbalizerArch>().unwrap(), a);
        }
        assert!("conv".parse::<VerbalizerArch>().is_err());
    }
}
