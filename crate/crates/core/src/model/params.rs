//! Model configuration, the named-tensor layout, and flat parameter storage.

use rand::distributions::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers_enc: usize,
    pub layers_dec: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub heads: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub max_positions: usize,
    /// Always true; kept in the config so checkpoints state it.
    pub tie_embeddings: bool,
    pub label_smoothing: f64,
}

impl ModelConfig {
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            layers_enc: 2,
            layers_dec: 2,
            d_model: 64,
            d_ffn: 256,
            heads: 4,
            dropout: 0.1,
            vocab_size,
            max_positions: 256,
            tie_embeddings: true,
            label_smoothing: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if self.vocab_size < 2 || self.max_positions == 0 || self.d_ffn == 0 {
            return bad("vocab_size, max_positions and d_ffn must be positive".into());
        }
        if self.layers_enc == 0 || self.layers_dec == 0 {
            return bad("at least one encoder and one decoder layer required".into());
        }
        if !self.tie_embeddings {
            return bad("untied embeddings are not supported".into());
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let (v, d, f, p) = (self.vocab_size, self.d_model, self.d_ffn, self.max_positions);
        let ln = 2 * d;
        let attn = 4 * d * d + 4 * d;
        let ffn = 2 * d * f + f + d;
        v * d + 2 * p * d + self.layers_enc * (2 * ln + attn + ffn) + ln + self.layers_dec * (3 * ln + 2 * attn + ffn) + ln + v
    }
}

/// Disjoint parameter groups used for selective initialisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Embeddings,
    Encoder,
    CrossAttention,
    Decoder,
    OutputBias,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::Embeddings, Group::Encoder, Group::CrossAttention, Group::Decoder, Group::OutputBias];

    pub fn name(self) -> &'static str {
        match self {
            Group::Embeddings => "embeddings",
            Group::Encoder => "encoder",
            Group::CrossAttention => "cross_attention",
            Group::Decoder => "decoder",
            Group::OutputBias => "output_bias",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown component {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Xavier,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LnIdx {
    pub g: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnIdx {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct FfnIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct EncLayerIdx {
    pub ln1: LnIdx,
    pub attn: AttnIdx,
    pub ln2: LnIdx,
    pub ffn: FfnIdx,
}

#[derive(Debug, Clone, Copy)]
pub struct DecLayerIdx {
    pub ln1: LnIdx,
    pub attn: AttnIdx,
    pub ln_cross: LnIdx,
    pub cross: AttnIdx,
    pub ln2: LnIdx,
    pub ffn: FfnIdx,
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Index {
    pub embed: usize,
    pub enc_pos: usize,
    pub dec_pos: usize,
    pub enc: Vec<EncLayerIdx>,
    pub enc_ln: LnIdx,
    pub dec: Vec<DecLayerIdx>,
    pub dec_ln: LnIdx,
    pub out_bias: usize,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub tensors: Vec<TensorSpec>,
    inits: Vec<Init>,
    pub index: Index,
    pub total: usize,
}

struct Builder {
    tensors: Vec<TensorSpec>,
    inits: Vec<Init>,
    total: usize,
}

impl Builder {
    fn add(&mut self, name: String, group: Group, shape: &[usize], init: Init) -> usize {
        let offset = self.total;
        self.total += shape.iter().product::<usize>();
        self.tensors.push(TensorSpec { name, group, shape: shape.to_vec(), offset });
        self.inits.push(init);
        offset
    }

    fn ln(&mut self, prefix: &str, group: Group, d: usize) -> LnIdx {
        LnIdx {
            g: self.add(format!("{prefix}.gain"), group, &[d], Init::Ones),
            b: self.add(format!("{prefix}.bias"), group, &[d], Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, group: Group, d: usize) -> AttnIdx {
        let mut pair = |n: &str| {
            (
                self.add(format!("{prefix}.w{n}"), group, &[d, d], Init::Xavier),
                self.add(format!("{prefix}.b{n}"), group, &[d], Init::Zeros),
            )
        };
        let (wq, bq) = pair("q");
        let (wk, bk) = pair("k");
        let (wv, bv) = pair("v");
        let (wo, bo) = pair("o");
        AttnIdx { wq, bq, wk, bk, wv, bv, wo, bo }
    }

    fn ffn(&mut self, prefix: &str, group: Group, d: usize, f: usize) -> FfnIdx {
        FfnIdx {
            w1: self.add(format!("{prefix}.w1"), group, &[d, f], Init::Xavier),
            b1: self.add(format!("{prefix}.b1"), group, &[f], Init::Zeros),
            w2: self.add(format!("{prefix}.w2"), group, &[f, d], Init::Xavier),
            b2: self.add(format!("{prefix}.b2"), group, &[d], Init::Zeros),
        }
    }
}

impl PartialEq for Layout {
    fn eq(&self, other: &Self) -> bool {
        self.tensors == other.tensors
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (d, f) = (cfg.d_model, cfg.d_ffn);
        let mut b = Builder { tensors: Vec::new(), inits: Vec::new(), total: 0 };
        let embed = b.add("embed.tokens".into(), Group::Embeddings, &[cfg.vocab_size, d], Init::Xavier);
        let enc_pos = b.add("encoder.positions".into(), Group::Encoder, &[cfg.max_positions, d], Init::Xavier);
        let enc = (0..cfg.layers_enc)
            .map(|l| {
                let p = format!("encoder.{l}");
                EncLayerIdx {
                    ln1: b.ln(&format!("{p}.ln_attn"), Group::Encoder, d),
                    attn: b.attn(&format!("{p}.attn"), Group::Encoder, d),
                    ln2: b.ln(&format!("{p}.ln_ffn"), Group::Encoder, d),
                    ffn: b.ffn(&format!("{p}.ffn"), Group::Encoder, d, f),
                }
            })
            .collect();
        let enc_ln = b.ln("encoder.ln_final", Group::Encoder, d);
        let dec_pos = b.add("decoder.positions".into(), Group::Decoder, &[cfg.max_positions, d], Init::Xavier);
        let dec = (0..cfg.layers_dec)
            .map(|l| {
                let p = format!("decoder.{l}");
                DecLayerIdx {
                    ln1: b.ln(&format!("{p}.ln_attn"), Group::Decoder, d),
                    attn: b.attn(&format!("{p}.attn"), Group::Decoder, d),
                    ln_cross: b.ln(&format!("{p}.cross.ln"), Group::CrossAttention, d),
                    cross: b.attn(&format!("{p}.cross.attn"), Group::CrossAttention, d),
                    ln2: b.ln(&format!("{p}.ln_ffn"), Group::Decoder, d),
                    ffn: b.ffn(&format!("{p}.ffn"), Group::Decoder, d, f),
                }
            })
            .collect();
        let dec_ln = b.ln("decoder.ln_final", Group::Decoder, d);
        let out_bias = b.add("output.bias".into(), Group::OutputBias, &[cfg.vocab_size], Init::Zeros);
        Self {
            tensors: b.tensors,
            inits: b.inits,
            index: Index { embed, enc_pos, dec_pos, enc, enc_ln, dec, dec_ln, out_bias },
            total: b.total,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Flat parameter (or gradient) vector bound to a layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub data: Vec<T>,
}

impl<T: Scalar> Params<T> {
    pub fn zeros(layout: &Layout) -> Self {
        Self { data: vec![T::ZERO; layout.total] }
    }

    /// Xavier-uniform matrices (`±sqrt(6 / (fan_in + fan_out))`), zero biases,
    /// unit LayerNorm gains. Each tensor draws from its own seeded stream.
    pub fn init(layout: &Layout, seed: u64) -> Self {
        let mut data = vec![T::ZERO; layout.total];
        for (i, (spec, init)) in layout.tensors.iter().zip(&layout.inits).enumerate() {
            let out = &mut data[spec.range()];
            match init {
                Init::Zeros => {}
                Init::Ones => out.fill(T::ONE),
                Init::Xavier => {
                    let bound = (6.0 / (spec.shape[0] + spec.shape[1]) as f64).sqrt();
                    let dist = Uniform::new_inclusive(-bound, bound);
                    let mut r = rng::rng_from(rng::derive(seed, i as u64));
                    for v in out.iter_mut() {
                        *v = T::from_f64(dist.sample(&mut r));
                    }
                }
            }
        }
        Self { data }
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params { data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect() }
    }

    pub fn tensor<'a>(&'a self, layout: &Layout, name: &str) -> Option<&'a [T]> {
        layout.tensor(name).map(|s| &self.data[s.range()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_matches_layout_and_hand_formula() {
        let cfg = ModelConfig {
            layers_enc: 1,
            layers_dec: 1,
            d_model: 4,
            d_ffn: 6,
            heads: 2,
            dropout: 0.0,
            vocab_size: 10,
            max_positions: 8,
            tie_embeddings: true,
            label_smoothing: 0.0,
        };
        // embed 40, positions 2*32, encoder layer: 2 LN (16) + attn (64+16) + ffn (24+6+24+4) = 154,
        // enc final LN 8, decoder layer: 3 LN (24) + 2 attn (160) + ffn 58 = 242, final LN 8, bias 10
        let hand = 40 + 64 + 154 + 8 + 242 + 8 + 10;
        assert_eq!(cfg.parameter_count(), hand);
        assert_eq!(Layout::new(&cfg).total, hand);
        let desk = ModelConfig::desk(119);
        assert_eq!(Layout::new(&desk).total, desk.parameter_count());
    }

    #[test]
    fn groups_are_exhaustive_and_disjoint() {
        let layout = Layout::new(&ModelConfig::desk(50));
        let mut covered = vec![0u8; layout.total];
        for t in &layout.tensors {
            for i in t.range() {
                covered[i] += 1;
            }
        }
        assert!(covered.iter().all(|&c| c == 1));
        assert_eq!(layout.tensors.iter().filter(|t| t.group == Group::Embeddings).count(), 1);
        for g in Group::ALL {
            assert!(layout.tensors.iter().any(|t| t.group == g));
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let layout = Layout::new(&ModelConfig::desk(30));
        let a = Params::<f32>::init(&layout, 5);
        assert_eq!(a, Params::<f32>::init(&layout, 5));
        assert_ne!(a, Params::<f32>::init(&layout, 6));
        let w = a.tensor(&layout, "encoder.0.attn.wq").unwrap();
        let bound = (6.0f32 / 128.0).sqrt();
        assert!(w.iter().all(|v| v.abs() <= bound));
        assert!(a.tensor(&layout, "encoder.0.attn.bq").unwrap().iter().all(|&v| v == 0.0));
        assert!(a.tensor(&layout, "decoder.ln_final.gain").unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::desk(10);
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk(10);
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        assert!(ModelConfig::desk(10).validate().is_ok());
    }
}
