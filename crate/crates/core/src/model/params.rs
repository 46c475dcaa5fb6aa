//! Named dense parameter tensors and the index layout of the network.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};

use super::{ModelConfig, Positional};
use crate::rng::Rng;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// An ordered list of named tensors. Gradients and optimizer moments use
/// the same type with identical specs.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    specs: Vec<TensorSpec>,
    data: Vec<Vec<f64>>,
}

impl ParamSet {
    pub fn new(specs: Vec<TensorSpec>, data: Vec<Vec<f64>>) -> Option<Self> {
        (specs.len() == data.len() && specs.iter().zip(&data).all(|(s, d)| s.numel() == d.len()))
            .then_some(ParamSet { specs, data })
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet { specs: self.specs.clone(), data: self.data.iter().map(|d| vec![0.0; d.len()]).collect() }
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn tensors(&self) -> &[Vec<f64>] {
        &self.data
    }

    pub fn tensors_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.data.iter().map(Vec::len).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.index_of(name).map(|i| self.data[i].as_slice())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        self.index_of(name).map(|i| self.data[i].as_mut_slice())
    }

    pub(crate) fn t(&self, i: usize) -> &[f64] {
        &self.data[i]
    }

    pub(crate) fn t_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i]
    }

    pub(crate) fn pair_mut(&mut self, a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
        let [x, y] = self.data.get_disjoint_mut([a, b]).expect("distinct tensors");
        (x, y)
    }

    pub(crate) fn many_mut<const N: usize>(&mut self, idx: [usize; N]) -> [&mut [f64]; N] {
        self.data.get_disjoint_mut(idx).expect("distinct tensors").map(Vec::as_mut_slice)
    }

    pub(crate) fn push(&mut self, spec: TensorSpec, data: Vec<f64>) -> usize {
        debug_assert_eq!(spec.numel(), data.len());
        self.specs.push(spec);
        self.data.push(data);
        self.specs.len() - 1
    }

    /// Drops tensors from index `len` on.
    pub(crate) fn truncate(&mut self, len: usize) {
        self.specs.truncate(len);
        self.data.truncate(len);
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.specs == other.specs
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for x in self.data.iter_mut().flatten() {
            *x *= alpha;
        }
    }

    pub fn fill(&mut self, v: f64) {
        for x in self.data.iter_mut().flatten() {
            *x = v;
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().flatten().map(|x| x * x).sum()
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.specs
            .iter()
            .zip(&self.data)
            .find(|(_, d)| d.iter().any(|x| !x.is_finite()))
            .map(|(s, _)| s.name.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LnIdx {
    pub g: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct AttnIdx {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct FfnIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct EncLayerIdx {
    pub ln1: LnIdx,
    pub attn: AttnIdx,
    pub ln2: LnIdx,
    pub ffn: FfnIdx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct DecLayerIdx {
    pub ln1: LnIdx,
    pub self_attn: AttnIdx,
    pub ln2: LnIdx,
    pub cross: AttnIdx,
    pub ln3: LnIdx,
    pub ffn: FfnIdx,
}

/// Tensor indices of every parameter group. With shared embeddings the
/// three token-embedding roles point at the same tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    pub enc_tok: usize,
    pub dec_tok: usize,
    pub out_proj: usize,
    pub enc_pos: Option<usize>,
    pub dec_pos: Option<usize>,
    pub enc_ln_emb: Option<LnIdx>,
    pub dec_ln_emb: Option<LnIdx>,
    pub enc: Vec<EncLayerIdx>,
    pub dec: Vec<DecLayerIdx>,
    pub enc_final: LnIdx,
    pub dec_final: LnIdx,
    /// Number of tensors in the base model (a head is appended after).
    pub base_len: usize,
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

struct Builder<'r> {
    params: ParamSet,
    rng: Option<&'r mut Rng>,
    normal: Normal<f64>,
}

impl Builder<'_> {
    fn add(&mut self, name: impl ToString, shape: &[usize], init: Init) -> usize {
        let spec = TensorSpec { name: name.to_string(), shape: shape.to_vec() };
        let n = spec.numel();
        let data = match (init, self.rng.as_deref_mut()) {
            (Init::Normal, Some(rng)) => (0..n).map(|_| self.normal.sample(rng)).collect(),
            (Init::Ones, _) => vec![1.0; n],
            _ => vec![0.0; n],
        };
        self.params.push(spec, data)
    }

    fn ln(&mut self, name: &str, d: usize) -> LnIdx {
        LnIdx { g: self.add(alloc::format!("{name}.weight"), &[d], Init::Ones), b: self.add(alloc::format!("{name}.bias"), &[d], Init::Zeros) }
    }

    fn linear(&mut self, name: &str, i: usize, o: usize) -> (usize, usize) {
        (
            self.add(alloc::format!("{name}.weight"), &[i, o], Init::Normal),
            self.add(alloc::format!("{name}.bias"), &[o], Init::Zeros),
        )
    }

    fn attn(&mut self, name: &str, d: usize) -> AttnIdx {
        let (wq, bq) = self.linear(&alloc::format!("{name}.q_proj"), d, d);
        let (wk, bk) = self.linear(&alloc::format!("{name}.k_proj"), d, d);
        let (wv, bv) = self.linear(&alloc::format!("{name}.v_proj"), d, d);
        let (wo, bo) = self.linear(&alloc::format!("{name}.out_proj"), d, d);
        AttnIdx { wq, bq, wk, bk, wv, bv, wo, bo }
    }

    fn ffn(&mut self, name: &str, d: usize, f: usize) -> FfnIdx {
        let (w1, b1) = self.linear(&alloc::format!("{name}.fc1"), d, f);
        let (w2, b2) = self.linear(&alloc::format!("{name}.fc2"), f, d);
        FfnIdx { w1, b1, w2, b2 }
    }
}

/// Builds the tensor list in a fixed order. Without an rng every tensor is
/// zero except layer-norm gains.
pub(crate) fn build(cfg: &ModelConfig, rng: Option<&mut Rng>) -> (ParamSet, Layout) {
    let (d, f, v, p) = (cfg.d_model, cfg.d_ffn, cfg.vocab_size, cfg.max_positions);
    let mut b = Builder {
        params: ParamSet { specs: Vec::new(), data: Vec::new() },
        rng,
        normal: Normal::new(0.0, INIT_STD).expect("valid std"),
    };
    let (enc_tok, dec_tok, out_proj) = if cfg.share_all_embeddings {
        let e = b.add("embed_tokens", &[v, d], Init::Normal);
        (e, e, e)
    } else {
        (
            b.add("encoder.embed_tokens", &[v, d], Init::Normal),
            b.add("decoder.embed_tokens", &[v, d], Init::Normal),
            b.add("decoder.output_projection", &[v, d], Init::Normal),
        )
    };
    let learned = cfg.positional == Positional::Learned;
    let enc_pos = learned.then(|| b.add("encoder.embed_positions", &[p, d], Init::Normal));
    let dec_pos = learned.then(|| b.add("decoder.embed_positions", &[p, d], Init::Normal));
    let enc_ln_emb = cfg.layernorm_embedding.then(|| b.ln("encoder.layernorm_embedding", d));
    let dec_ln_emb = cfg.layernorm_embedding.then(|| b.ln("decoder.layernorm_embedding", d));
    let enc = (0..cfg.layers_enc)
        .map(|l| {
            let n = alloc::format!("encoder.layers.{l}");
            EncLayerIdx {
                ln1: b.ln(&alloc::format!("{n}.self_attn_layer_norm"), d),
                attn: b.attn(&alloc::format!("{n}.self_attn"), d),
                ln2: b.ln(&alloc::format!("{n}.final_layer_norm"), d),
                ffn: b.ffn(&n, d, f),
            }
        })
        .collect();
    let dec = (0..cfg.layers_dec)
        .map(|l| {
            let n = alloc::format!("decoder.layers.{l}");
            DecLayerIdx {
                ln1: b.ln(&alloc::format!("{n}.self_attn_layer_norm"), d),
                self_attn: b.attn(&alloc::format!("{n}.self_attn"), d),
                ln2: b.ln(&alloc::format!("{n}.encoder_attn_layer_norm"), d),
                cross: b.attn(&alloc::format!("{n}.encoder_attn"), d),
                ln3: b.ln(&alloc::format!("{n}.final_layer_norm"), d),
                ffn: b.ffn(&n, d, f),
            }
        })
        .collect();
    let enc_final = b.ln("encoder.layer_norm", d);
    let dec_final = b.ln("decoder.layer_norm", d);
    let base_len = b.params.len();
    let layout = Layout { enc_tok, dec_tok, out_proj, enc_pos, dec_pos, enc_ln_emb, dec_ln_emb, enc, dec, enc_final, dec_final, base_len };
    (b.params, layout)
}

/// Fixed sinusoidal position table `[max_positions, d]`.
pub(crate) fn sinusoidal(max_positions: usize, d: usize) -> Vec<f64> {
    let mut t = vec![0.0; max_positions * d];
    let half = d / 2;
    for p in 0..max_positions {
        for i in 0..half {
            let freq = crate::math::exp(-crate::math::ln(10000.0) * i as f64 / half.max(1) as f64);
            t[p * d + i] = crate::math::sin(p as f64 * freq);
            t[p * d + half + i] = crate::math::cos(p as f64 * freq);
        }
    }
    t
}
