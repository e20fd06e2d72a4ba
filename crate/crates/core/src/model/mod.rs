//! Pre-norm encoder-decoder Transformer producing the decoder states that
//! every output head consumes.

mod forward;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use forward::{decode_states, encode, forward_loss, loss_value, multi_head_attention, Bound, Dropout};

use crate::corpus::vocab::RESERVED_COUNT;
use crate::error::{bail, Result};
use crate::heads::{self, HeadKind, HeadParams, HeadVars};
use crate::tensor::{Float, Tape, Tensor};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub vocab_size: usize,
    pub head_kind: HeadKind,
    /// Number of corpus groups `D`.
    pub n_groups: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            n_enc_layers: 2,
            n_dec_layers: 2,
            dropout: 0.1,
            max_len: 64,
            vocab_size: 1000,
            head_kind: HeadKind::Vanilla,
            n_groups: 1,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.max_len == 0 {
            bail!(Config, "d_model, n_heads, d_ff and max_len must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            bail!(
                Config,
                "d_model {} is not divisible by n_heads {}",
                self.d_model,
                self.n_heads
            );
        }
        if self.n_groups == 0 {
            bail!(Config, "n_groups must be at least 1");
        }
        if self.head_kind.specializes() {
            heads::slot_width(self.d_model, self.n_groups)?;
        }
        if self.vocab_size < RESERVED_COUNT {
            bail!(
                Config,
                "vocab_size {} is smaller than the {RESERVED_COUNT} reserved tokens",
                self.vocab_size
            );
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bail!(Config, "dropout {} outside [0, 1)", self.dropout);
        }
        Ok(())
    }

    /// Every field as a `(name, value)` pair, in declaration order.
    pub fn fields(&self) -> Vec<(&'static str, String)> {
        vec![
            ("d_model", self.d_model.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("n_enc_layers", self.n_enc_layers.to_string()),
            ("n_dec_layers", self.n_dec_layers.to_string()),
            ("dropout", self.dropout.to_string()),
            ("max_len", self.max_len.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("head_kind", self.head_kind.to_string()),
            ("n_groups", self.n_groups.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Inverse of [`ModelConfig::fields`]; every field must be present.
    pub fn from_fields(get: impl Fn(&str) -> Option<String>) -> Result<Self> {
        fn parse<V: std::str::FromStr>(get: &impl Fn(&str) -> Option<String>, key: &str) -> Result<V> {
            let raw = get(key).ok_or_else(|| crate::Error::Config(format!("model field `{key}` is missing")))?;
            raw.parse()
                .map_err(|_| crate::Error::Config(format!("model field `{key}` has invalid value `{raw}`")))
        }
        Ok(Self {
            d_model: parse(&get, "d_model")?,
            n_heads: parse(&get, "n_heads")?,
            d_ff: parse(&get, "d_ff")?,
            n_enc_layers: parse(&get, "n_enc_layers")?,
            n_dec_layers: parse(&get, "n_dec_layers")?,
            dropout: parse(&get, "dropout")?,
            max_len: parse(&get, "max_len")?,
            vocab_size: parse(&get, "vocab_size")?,
            head_kind: parse(&get, "head_kind")?,
            n_groups: parse(&get, "n_groups")?,
            seed: parse(&get, "seed")?,
        })
    }

    /// `name: ours vs theirs` for every field that differs.
    pub fn diff(&self, other: &Self) -> Vec<String> {
        self.fields()
            .into_iter()
            .zip(other.fields())
            .filter(|((_, a), (_, b))| a != b)
            .map(|((k, a), (_, b))| format!("{k}: {a} vs {b}"))
            .collect()
    }

    /// Closed-form size of the vanilla-head model.
    pub fn vanilla_param_count(&self) -> usize {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab_size);
        let ffn = d * f + f + f * d + d;
        let enc_layer = 4 * d * d + ffn + 4 * d;
        let dec_layer = 8 * d * d + ffn + 6 * d;
        v * d + self.n_enc_layers * enc_layer + 2 * d + self.n_dec_layers * dec_layer + 2 * d + d * v
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Xavier,
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnIdx {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct NormIdx {
    pub gain: usize,
    pub offset: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct FfnIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct EncLayerIdx {
    pub norm1: NormIdx,
    pub attn: AttnIdx,
    pub norm2: NormIdx,
    pub ffn: FfnIdx,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DecLayerIdx {
    pub norm1: NormIdx,
    pub self_attn: AttnIdx,
    pub norm2: NormIdx,
    pub cross_attn: AttnIdx,
    pub norm3: NormIdx,
    pub ffn: FfnIdx,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct HeadIdx {
    pub w_t: usize,
    pub w_d: Option<usize>,
    pub bias: Option<usize>,
}

/// Position of every tensor in the flat parameter list. The order is the
/// checkpoint order.
#[derive(Clone, Debug)]
pub struct Layout {
    pub specs: Vec<ParamSpec>,
    pub(crate) embed: usize,
    pub(crate) enc: Vec<EncLayerIdx>,
    pub(crate) enc_norm: NormIdx,
    pub(crate) dec: Vec<DecLayerIdx>,
    pub(crate) dec_norm: NormIdx,
    pub(crate) head: HeadIdx,
}

struct LayoutBuilder {
    specs: Vec<ParamSpec>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
        });
        self.specs.len() - 1
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIdx {
        NormIdx {
            gain: self.add(format!("{prefix}.gain"), &[d], Init::Ones),
            offset: self.add(format!("{prefix}.offset"), &[d], Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIdx {
        AttnIdx {
            wq: self.add(format!("{prefix}.wq"), &[d, d], Init::Xavier),
            wk: self.add(format!("{prefix}.wk"), &[d, d], Init::Xavier),
            wv: self.add(format!("{prefix}.wv"), &[d, d], Init::Xavier),
            wo: self.add(format!("{prefix}.wo"), &[d, d], Init::Xavier),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize) -> FfnIdx {
        FfnIdx {
            w1: self.add(format!("{prefix}.w1"), &[d, f], Init::Xavier),
            b1: self.add(format!("{prefix}.b1"), &[f], Init::Zeros),
            w2: self.add(format!("{prefix}.w2"), &[f, d], Init::Xavier),
            b2: self.add(format!("{prefix}.b2"), &[d], Init::Zeros),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let mut b = LayoutBuilder { specs: Vec::new() };
        let embed = b.add("embed".into(), &[v, d], Init::Xavier);
        let enc = (0..cfg.n_enc_layers)
            .map(|l| EncLayerIdx {
                norm1: b.norm(&format!("enc.{l}.norm1"), d),
                attn: b.attn(&format!("enc.{l}.self_attn"), d),
                norm2: b.norm(&format!("enc.{l}.norm2"), d),
                ffn: b.ffn(&format!("enc.{l}.ffn"), d, f),
            })
            .collect();
        let enc_norm = b.norm("enc.norm", d);
        let dec = (0..cfg.n_dec_layers)
            .map(|l| DecLayerIdx {
                norm1: b.norm(&format!("dec.{l}.norm1"), d),
                self_attn: b.attn(&format!("dec.{l}.self_attn"), d),
                norm2: b.norm(&format!("dec.{l}.norm2"), d),
                cross_attn: b.attn(&format!("dec.{l}.cross_attn"), d),
                norm3: b.norm(&format!("dec.{l}.norm3"), d),
                ffn: b.ffn(&format!("dec.{l}.ffn"), d, f),
            })
            .collect();
        let dec_norm = b.norm("dec.norm", d);
        let kind = cfg.head_kind;
        let width = heads::state_width(kind, d, cfg.n_groups)?;
        let w_t = b.add("head.w_t".into(), &[width, v], Init::Xavier);
        let w_d = kind.specializes().then(|| {
            let dp = d / (cfg.n_groups + 1);
            b.add("head.w_d".into(), &[d, dp], Init::Xavier)
        });
        let bias = kind
            .extremizes()
            .then(|| b.add("head.bias".into(), &[cfg.n_groups, v], Init::Zeros));
        Ok(Self {
            specs: b.specs,
            embed,
            enc,
            enc_norm,
            dec,
            dec_norm,
            head: HeadIdx { w_t, w_d, bias },
        })
    }
}

/// All learned weights of one model, in [`Layout`] order.
#[derive(Clone, Debug)]
pub struct ModelParams<T: Float = f32> {
    pub config: ModelConfig,
    layout: Layout,
    tensors: Vec<Tensor<T>>,
}

impl<T: Float> PartialEq for ModelParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.tensors == other.tensors
    }
}

impl<T: Float> ModelParams<T> {
    /// Seeded initialization: Xavier-uniform matrices, zero biases and
    /// offsets, unit gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let layout = Layout::new(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout
            .specs
            .iter()
            .map(|spec| {
                let t = match spec.init {
                    Init::Zeros => Tensor::zeros(&spec.shape),
                    Init::Ones => Tensor::ones(&spec.shape),
                    Init::Xavier => {
                        let limit = (6.0 / (spec.shape[0] + spec.shape[1]) as f64).sqrt();
                        Tensor::from_fn(&spec.shape, |_| T::lit(rng.gen_range(-limit..limit)))
                    }
                };
                t.with_grad()
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            layout,
            tensors,
        })
    }

    /// Rebuilds parameters from tensors in layout order, checking shapes.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let layout = Layout::new(config)?;
        if tensors.len() != layout.specs.len() {
            bail!(
                Checkpoint,
                "expected {} tensors, got {}",
                layout.specs.len(),
                tensors.len()
            );
        }
        let tensors = tensors
            .into_iter()
            .zip(&layout.specs)
            .map(|(mut t, spec)| {
                if t.shape() != spec.shape.as_slice() {
                    bail!(
                        Checkpoint,
                        "tensor {} has shape {:?}, expected {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    );
                }
                t.set_requires_grad(true);
                Ok(t)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            layout,
            tensors,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.layout.specs.iter().map(|s| s.name.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.layout
            .specs
            .iter()
            .position(|s| s.name == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = self.layout.specs.iter().position(|s| s.name == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Copy of the output-head weights.
    pub fn head(&self) -> HeadParams<T> {
        let h = self.layout.head;
        HeadParams {
            kind: self.config.head_kind,
            n_groups: self.config.n_groups,
            w_t: self.tensors[h.w_t].clone(),
            w_d: h.w_d.map(|i| self.tensors[i].clone()),
            bias: h.bias.map(|i| self.tensors[i].clone()),
        }
    }

    /// Records every tensor on the tape.
    pub fn bind<'p>(&'p self, tape: &mut Tape<T>) -> Bound<'p, T> {
        let vars = self.tensors.iter().map(|t| tape.leaf(t)).collect();
        Bound { params: self, vars }
    }

    /// Same as [`ModelParams::bind`] but nothing is differentiated.
    pub fn bind_frozen<'p>(&'p self, tape: &mut Tape<T>) -> Bound<'p, T> {
        let vars = self.tensors.iter().map(|t| tape.constant(t)).collect();
        Bound { params: self, vars }
    }

    pub fn cast<U: Float>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bitwise_eq(b))
    }
}

impl<T: Float> Bound<'_, T> {
    pub fn head_vars(&self) -> HeadVars {
        let h = self.params.layout.head;
        HeadVars {
            kind: self.params.config.head_kind,
            n_groups: self.params.config.n_groups,
            w_t: self.vars[h.w_t],
            w_d: h.w_d.map(|i| self.vars[i]),
            bias: h.bias.map(|i| self.vars[i]),
        }
    }
}

/// A padded matrix of token ids, `rows × cols`, with a validity mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdMatrix {
    pub rows: usize,
    pub cols: usize,
    pub ids: Vec<u32>,
    pub valid: Vec<bool>,
}

impl IdMatrix {
    /// Pads each sequence on the right with `pad` to the longest length.
    pub fn from_rows(seqs: &[Vec<u32>], pad: u32) -> Self {
        let cols = seqs.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let mut ids = Vec::with_capacity(seqs.len() * cols);
        let mut valid = Vec::with_capacity(seqs.len() * cols);
        for s in seqs {
            ids.extend_from_slice(s);
            valid.extend(std::iter::repeat_n(true, s.len()));
            ids.extend(std::iter::repeat_n(pad, cols - s.len()));
            valid.extend(std::iter::repeat_n(false, cols - s.len()));
        }
        Self {
            rows: seqs.len(),
            cols,
            ids,
            valid,
        }
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.ids[r * self.cols..(r + 1) * self.cols]
    }

    /// Unpadded contents of row `r`.
    pub fn tokens(&self, r: usize) -> Vec<u32> {
        self.row(r)
            .iter()
            .zip(&self.valid[r * self.cols..(r + 1) * self.cols])
            .filter(|(_, &v)| v)
            .map(|(&t, _)| t)
            .collect()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Sinusoidal position encodings `[len × d]`.
pub fn position_encoding<T: Float>(len: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); len * d];
    for pos in 0..len {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            out[pos * d + i] = T::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    out
}
