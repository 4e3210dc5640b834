//! Transformer encoder-decoder with category, role and frame heads.

use crate::nn::{
    causal_mask, multi_head_attention, positional_encoding, AttentionWeights, Graph, NnError,
    Parameter, Tensor, Var, LAYER_NORM_EPS,
};
use crate::repr::{decoder_inputs, decoder_width, encoder_width, TargetToken, TARGET_CATEGORIES};
use crate::sim::N_SLOTS;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub heads: usize,
    pub d_model: usize,
    /// Window length `L` in frames.
    pub context: usize,
    pub dropout: f32,
    /// Feed-forward width as a multiple of `d_model`.
    pub ff_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn paper() -> Self {
        Self {
            n_encoder_layers: 6,
            n_decoder_layers: 6,
            heads: 8,
            d_model: 512,
            context: 750,
            dropout: 0.1,
            ff_mult: 4,
        }
    }

    pub fn desk() -> Self {
        Self {
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            heads: 4,
            d_model: 64,
            context: 250,
            dropout: 0.1,
            ff_mult: 4,
        }
    }

    pub fn with_context(self, context: usize) -> Self {
        Self { context, ..self }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: String| Err(NnError::Config(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.d_model % 2 != 0 {
            return bad("d_model must be even for sinusoidal encodings".into());
        }
        if self.context == 0
            || self.n_encoder_layers == 0
            || self.n_decoder_layers == 0
            || self.ff_mult == 0
        {
            return bad("context, layer counts and ff_mult must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn ff_width(&self) -> usize {
        self.ff_mult * self.d_model
    }

    pub fn frame_classes(&self) -> usize {
        self.context + 2
    }
}

#[derive(Clone, Copy, Debug)]
struct AttnIdx([usize; 8]);
#[derive(Clone, Copy, Debug)]
struct LnIdx(usize, usize);
#[derive(Clone, Copy, Debug)]
struct FfIdx([usize; 4]);
#[derive(Clone, Copy, Debug)]
struct AffineIdx(usize, usize);

#[derive(Clone, Debug)]
struct EncLayer {
    attn: AttnIdx,
    ln1: LnIdx,
    ff: FfIdx,
    ln2: LnIdx,
}

#[derive(Clone, Debug)]
struct DecLayer {
    self_attn: AttnIdx,
    ln1: LnIdx,
    cross: AttnIdx,
    ln2: LnIdx,
    ff: FfIdx,
    ln3: LnIdx,
}

#[derive(Clone, Debug)]
struct Layout {
    enc_in: AffineIdx,
    dec_in: AffineIdx,
    encoder: Vec<EncLayer>,
    decoder: Vec<DecLayer>,
    head_category: AffineIdx,
    head_role: AffineIdx,
    head_frame: AffineIdx,
}

/// Parameter specification: name, shape and whether it is a bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub is_bias: bool,
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, is_bias: bool) -> usize {
        self.specs.push(ParamSpec {
            name,
            shape,
            is_bias,
        });
        self.specs.len() - 1
    }

    fn affine(&mut self, name: &str, d_in: usize, d_out: usize) -> AffineIdx {
        AffineIdx(
            self.push(format!("{name}.w"), vec![d_in, d_out], false),
            self.push(format!("{name}.b"), vec![d_out], true),
        )
    }

    fn ln(&mut self, name: &str, d: usize) -> LnIdx {
        LnIdx(
            self.push(format!("{name}.gain"), vec![d], false),
            self.push(format!("{name}.offset"), vec![d], true),
        )
    }

    fn attn(&mut self, name: &str, d: usize) -> AttnIdx {
        let mut idx = [0; 8];
        for (k, p) in ["q", "k", "v", "o"].iter().enumerate() {
            let a = self.affine(&format!("{name}.{p}"), d, d);
            idx[2 * k] = a.0;
            idx[2 * k + 1] = a.1;
        }
        AttnIdx(idx)
    }

    fn ff(&mut self, name: &str, d: usize, hidden: usize) -> FfIdx {
        let a = self.affine(&format!("{name}.1"), d, hidden);
        let b = self.affine(&format!("{name}.2"), hidden, d);
        FfIdx([a.0, a.1, b.0, b.1])
    }
}

fn layout(config: &ModelConfig) -> (Layout, Vec<ParamSpec>) {
    let d = config.d_model;
    let h = config.ff_width();
    let mut b = Builder { specs: Vec::new() };
    let enc_in = b.affine("enc_in", encoder_width(config.context), d);
    let dec_in = b.affine("dec_in", decoder_width(config.context), d);
    let encoder = (0..config.n_encoder_layers)
        .map(|i| EncLayer {
            attn: b.attn(&format!("enc.{i}.attn"), d),
            ln1: b.ln(&format!("enc.{i}.ln1"), d),
            ff: b.ff(&format!("enc.{i}.ff"), d, h),
            ln2: b.ln(&format!("enc.{i}.ln2"), d),
        })
        .collect();
    let decoder = (0..config.n_decoder_layers)
        .map(|i| DecLayer {
            self_attn: b.attn(&format!("dec.{i}.self"), d),
            ln1: b.ln(&format!("dec.{i}.ln1"), d),
            cross: b.attn(&format!("dec.{i}.cross"), d),
            ln2: b.ln(&format!("dec.{i}.ln2"), d),
            ff: b.ff(&format!("dec.{i}.ff"), d, h),
            ln3: b.ln(&format!("dec.{i}.ln3"), d),
        })
        .collect();
    let head_category = b.affine("head.category", d, TARGET_CATEGORIES);
    let head_role = b.affine("head.role", d, N_SLOTS);
    let head_frame = b.affine("head.frame", d, config.frame_classes());
    (
        Layout {
            enc_in,
            dec_in,
            encoder,
            decoder,
            head_category,
            head_role,
            head_frame,
        },
        b.specs,
    )
}

/// Parameter names and shapes for a configuration, in storage order.
pub fn parameter_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    layout(config).1
}

/// Closed-form parameter count.
pub fn parameter_count_formula(config: &ModelConfig) -> usize {
    let d = config.d_model;
    let h = config.ff_width();
    let attn = 4 * (d * d + d);
    let ln = 2 * d;
    let ff = d * h + h + h * d + d;
    let enc_layer = attn + ff + 2 * ln;
    let dec_layer = 2 * attn + ff + 3 * ln;
    (encoder_width(config.context) + 1) * d
        + (decoder_width(config.context) + 1) * d
        + config.n_encoder_layers * enc_layer
        + config.n_decoder_layers * dec_layer
        + (d + 1) * (TARGET_CATEGORIES + N_SLOTS + config.frame_classes())
}

#[derive(Clone, Debug)]
pub struct DstModel {
    pub config: ModelConfig,
    pub params: Vec<Parameter>,
    /// Fixed standardization of encoder features, fitted on training
    /// windows before the first update. `None` is the identity.
    pub input_norm: Option<InputNorm>,
    layout: Layout,
}

/// Per-feature `(x - shift) * scale` on encoder tokens. Raw detector
/// logits and the padding value sit one to two orders of magnitude above
/// the frame one-hot; without this the first attention layer starts out
/// saturated.
#[derive(Clone, Debug, PartialEq)]
pub struct InputNorm {
    pub shift: Vec<f32>,
    pub scale: Vec<f32>,
}

impl InputNorm {
    /// Mean and inverse standard deviation of the first `measured` columns
    /// over all rows of `windows`; constant columns are centred and left
    /// unscaled. Columns past `measured` (the frame one-hot) pass through.
    pub fn fit<'a>(
        width: usize,
        measured: usize,
        windows: impl IntoIterator<Item = &'a Tensor>,
    ) -> Result<Self, NnError> {
        let mut sum = vec![0.0f64; width];
        let mut sq = vec![0.0f64; width];
        let mut n = 0usize;
        for w in windows {
            if w.cols() != width {
                return Err(NnError::ShapeMismatch {
                    op: "input_norm",
                    detail: format!("{:?} vs width {width}", w.shape()),
                });
            }
            for r in 0..w.rows() {
                for ((s, q), &v) in sum.iter_mut().zip(sq.iter_mut()).zip(w.row(r)) {
                    *s += v as f64;
                    *q += (v as f64) * (v as f64);
                }
            }
            n += w.rows();
        }
        if n == 0 {
            return Err(NnError::Config("no rows to fit input statistics".into()));
        }
        let mut shift = Vec::with_capacity(width);
        let mut scale = Vec::with_capacity(width);
        for (s, q) in sum.iter().zip(&sq).take(measured) {
            let mean = s / n as f64;
            let var = (q / n as f64 - mean * mean).max(0.0);
            shift.push(mean as f32);
            scale.push(if var > 1e-12 {
                (1.0 / var.sqrt()) as f32
            } else {
                1.0
            });
        }
        shift.resize(width, 0.0);
        scale.resize(width, 1.0);
        Ok(Self { shift, scale })
    }

    pub fn apply(&self, mut t: Tensor) -> Tensor {
        let w = self.shift.len();
        for row in t.data_mut().chunks_mut(w) {
            for ((v, s), k) in row.iter_mut().zip(&self.shift).zip(&self.scale) {
                *v = (*v - s) * k;
            }
        }
        t
    }
}

/// Logits of the three heads for every decoder position.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub category: Var,
    pub role: Var,
    pub frame: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub category: f64,
    pub role: f64,
    pub frame: f64,
    pub total: f64,
}

/// Cross-attention keys and values of the encoder memory, per decoder layer.
#[derive(Clone, Debug)]
pub struct MemoryCache {
    kv: Vec<(Var, Var)>,
}

impl DstModel {
    /// Xavier-uniform weights, zero offsets, unit layer-norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, NnError> {
        config.validate()?;
        let (layout, specs) = layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = specs
            .into_iter()
            .map(|s| {
                if s.is_bias {
                    Parameter::zeros(s.name, s.shape[0])
                } else if s.shape.len() == 1 {
                    Parameter::ones(s.name, s.shape[0])
                } else {
                    Parameter::xavier(s.name, s.shape[0], s.shape[1], &mut rng)
                }
            })
            .collect();
        Ok(Self {
            config,
            params,
            input_norm: None,
            layout,
        })
    }

    /// Rebuild from stored parameters, which must match the configuration's
    /// names and shapes in order.
    pub fn from_parameters(config: ModelConfig, params: Vec<Parameter>) -> Result<Self, NnError> {
        config.validate()?;
        let (layout, specs) = layout(&config);
        if specs.len() != params.len() {
            return Err(NnError::Config(format!(
                "expected {} parameters, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (s, p) in specs.iter().zip(&params) {
            if s.name != p.name || s.shape != p.tensor.shape() || s.is_bias != p.is_bias {
                return Err(NnError::Config(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    p.name,
                    p.tensor.shape(),
                    s.name,
                    s.shape
                )));
            }
        }
        Ok(Self {
            config,
            params,
            input_norm: None,
            layout,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    fn attn_vars(g: &mut Graph<'_>, a: AttnIdx) -> AttentionWeights {
        let v = a.0.map(|i| g.param(i));
        AttentionWeights {
            wq: v[0],
            bq: v[1],
            wk: v[2],
            bk: v[3],
            wv: v[4],
            bv: v[5],
            wo: v[6],
            bo: v[7],
        }
    }

    fn affine(g: &mut Graph<'_>, x: Var, a: AffineIdx) -> Result<Var, NnError> {
        let (w, b) = (g.param(a.0), g.param(a.1));
        g.affine(x, w, b)
    }

    fn add_norm(g: &mut Graph<'_>, x: Var, sub: Var, ln: LnIdx) -> Result<Var, NnError> {
        let s = g.add(x, sub)?;
        let (gain, offset) = (g.param(ln.0), g.param(ln.1));
        g.layer_norm(s, gain, offset, LAYER_NORM_EPS)
    }

    fn drop(&self, g: &mut Graph<'_>, x: Var, rng: &mut Option<&mut ChaCha8Rng>) -> Var {
        match rng {
            Some(r) if self.config.dropout > 0.0 => g.dropout(x, self.config.dropout, &mut **r),
            _ => x,
        }
    }

    fn feed_forward(g: &mut Graph<'_>, x: Var, ff: FfIdx) -> Result<Var, NnError> {
        let h = Self::affine(g, x, AffineIdx(ff.0[0], ff.0[1]))?;
        let h = g.relu(h);
        Self::affine(g, h, AffineIdx(ff.0[2], ff.0[3]))
    }

    fn embed(&self, g: &mut Graph<'_>, tokens: Tensor, proj: AffineIdx) -> Result<Var, NnError> {
        let len = tokens.rows();
        let x = g.constant(tokens);
        let x = Self::affine(g, x, proj)?;
        let pe = g.constant(positional_encoding(len, self.config.d_model)?);
        g.add(x, pe)
    }

    /// Bidirectional encoder over `[L, encoder_width(L)]`; `rng` enables dropout.
    pub fn encode(
        &self,
        g: &mut Graph<'_>,
        tokens: Tensor,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, NnError> {
        let expected = [self.config.context, encoder_width(self.config.context)];
        if tokens.shape() != expected {
            return Err(NnError::ShapeMismatch {
                op: "encode",
                detail: format!(
                    "encoder input {:?}, model expects {expected:?}",
                    tokens.shape()
                ),
            });
        }
        let tokens = match &self.input_norm {
            Some(norm) => norm.apply(tokens),
            None => tokens,
        };
        let x = self.embed(g, tokens, self.layout.enc_in)?;
        let mut x = self.drop(g, x, &mut rng);
        for layer in &self.layout.encoder {
            let w = Self::attn_vars(g, layer.attn);
            let a = multi_head_attention(g, x, x, &w, self.config.heads, None)?;
            let a = self.drop(g, a, &mut rng);
            x = Self::add_norm(g, x, a, layer.ln1)?;
            let f = Self::feed_forward(g, x, layer.ff)?;
            let f = self.drop(g, f, &mut rng);
            x = Self::add_norm(g, x, f, layer.ln2)?;
        }
        Ok(x)
    }

    /// Project the memory once for every decoder layer's cross-attention.
    pub fn memory_cache(&self, g: &mut Graph<'_>, memory: Var) -> Result<MemoryCache, NnError> {
        let kv = self
            .layout
            .decoder
            .iter()
            .map(|layer| {
                let w = Self::attn_vars(g, layer.cross);
                Ok((g.affine(memory, w.wk, w.bk)?, g.affine(memory, w.wv, w.bv)?))
            })
            .collect::<Result<_, NnError>>()?;
        Ok(MemoryCache { kv })
    }

    /// Causal decoder over one-hot rows `[n, decoder_width(L)]`.
    pub fn decode(
        &self,
        g: &mut Graph<'_>,
        cache: &MemoryCache,
        tokens: Tensor,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<HeadVars, NnError> {
        let width = decoder_width(self.config.context);
        if tokens.cols() != width || tokens.rows() == 0 {
            return Err(NnError::ShapeMismatch {
                op: "decode",
                detail: format!(
                    "decoder input {:?}, expected [n >= 1, {width}]",
                    tokens.shape()
                ),
            });
        }
        let n = tokens.rows();
        let mask = causal_mask(n);
        // One-hot rows act as an embedding lookup; the usual sqrt(d) factor
        // keeps them on the scale of the positional encoding.
        let tokens = tokens.scaled((self.config.d_model as f32).sqrt());
        let y = self.embed(g, tokens, self.layout.dec_in)?;
        let mut y = self.drop(g, y, &mut rng);
        for (layer, &(k, v)) in self.layout.decoder.iter().zip(&cache.kv) {
            let w = Self::attn_vars(g, layer.self_attn);
            let a = multi_head_attention(g, y, y, &w, self.config.heads, Some(&mask))?;
            let a = self.drop(g, a, &mut rng);
            y = Self::add_norm(g, y, a, layer.ln1)?;

            let w = Self::attn_vars(g, layer.cross);
            let q = g.affine(y, w.wq, w.bq)?;
            let c = g.attention(q, k, v, self.config.heads, None)?;
            let c = g.affine(c, w.wo, w.bo)?;
            let c = self.drop(g, c, &mut rng);
            y = Self::add_norm(g, y, c, layer.ln2)?;

            let f = Self::feed_forward(g, y, layer.ff)?;
            let f = self.drop(g, f, &mut rng);
            y = Self::add_norm(g, y, f, layer.ln3)?;
        }
        Ok(HeadVars {
            category: Self::affine(g, y, self.layout.head_category)?,
            role: Self::affine(g, y, self.layout.head_role)?,
            frame: Self::affine(g, y, self.layout.head_frame)?,
        })
    }

    /// Teacher forcing: position `i` sees tokens `0..=i` and predicts `i + 1`.
    pub fn decode_teacher_forced(
        &self,
        g: &mut Graph<'_>,
        memory: Var,
        targets: &[TargetToken],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<HeadVars, NnError> {
        if targets.len() < 2 || !matches!(targets.first(), Some(t) if *t == TargetToken::sos()) {
            return Err(NnError::Config(
                "target sequence must start with SOS and hold at least two tokens".into(),
            ));
        }
        let cache = self.memory_cache(g, memory)?;
        let inputs = decoder_inputs(targets, self.config.context);
        self.decode(g, &cache, inputs, rng.as_deref_mut())
    }

    /// Unweighted sum of the three head cross-entropies against
    /// `targets[1..]`; the role term ignores SOS/EOS positions.
    pub fn compute_loss(
        g: &mut Graph<'_>,
        heads: &HeadVars,
        targets: &[TargetToken],
    ) -> Result<(Var, LossBreakdown), NnError> {
        let next = &targets[1..];
        let cat: Vec<Option<usize>> = next.iter().map(|t| Some(t.category)).collect();
        let role: Vec<Option<usize>> = next.iter().map(|t| t.slot).collect();
        let frame: Vec<Option<usize>> = next.iter().map(|t| Some(t.frame)).collect();
        let lc = g.cross_entropy(heads.category, &cat)?;
        let lr = g.cross_entropy(heads.role, &role)?;
        let lf = g.cross_entropy(heads.frame, &frame)?;
        let total = g.sum(&[lc, lr, lf])?;
        let breakdown = LossBreakdown {
            category: g.scalar(lc),
            role: g.scalar(lr),
            frame: g.scalar(lf),
            total: g.scalar(total),
        };
        Ok((total, breakdown))
    }

    /// Evaluation-mode total loss of one window as a graph node.
    pub fn loss_var(
        &self,
        g: &mut Graph<'_>,
        encoder: &Tensor,
        targets: &[TargetToken],
    ) -> Result<Var, NnError> {
        let memory = self.encode(g, encoder.clone(), None)?;
        let heads = self.decode_teacher_forced(g, memory, targets, None)?;
        Ok(Self::compute_loss(g, &heads, targets)?.0)
    }

    /// Loss of one window and, when `rng` is given (training mode with
    /// dropout) or `with_grads` is set, the gradient of every parameter.
    pub fn window_loss(
        &self,
        encoder: &Tensor,
        targets: &[TargetToken],
        mut rng: Option<&mut ChaCha8Rng>,
        with_grads: bool,
    ) -> Result<(LossBreakdown, Option<Vec<Vec<f32>>>), NnError> {
        let mut g = Graph::new(&self.params);
        let memory = self.encode(&mut g, encoder.clone(), rng.as_deref_mut())?;
        let heads = self.decode_teacher_forced(&mut g, memory, targets, rng.as_deref_mut())?;
        let (loss, breakdown) = Self::compute_loss(&mut g, &heads, targets)?;
        if !with_grads {
            return Ok((breakdown, None));
        }
        let grads = g.backward(loss, None)?;
        let per_param = g
            .param_grads(&grads)
            .into_iter()
            .zip(&self.params)
            .map(|(gr, p)| {
                gr.map(<[f32]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; p.tensor.numel()])
            })
            .collect();
        Ok((breakdown, Some(per_param)))
    }
}

/// Small configuration used for end-to-end finite-difference checks.
pub fn tiny_gradcheck_config() -> ModelConfig {
    ModelConfig {
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        heads: 2,
        d_model: 8,
        context: 6,
        dropout: 0.0,
        ff_mult: 2,
    }
}

/// Random encoder input in `[-1, 1)` and a target sequence with two events.
pub fn random_window<R: rand::Rng + ?Sized>(
    config: &ModelConfig,
    rng: &mut R,
) -> (Tensor, Vec<TargetToken>) {
    let l = config.context;
    let enc = Tensor::from_fn(vec![l, encoder_width(l)], |_| rng.random_range(-1.0..1.0));
    let mut frames = [rng.random_range(1..=l), rng.random_range(1..=l)];
    frames.sort_unstable();
    let mut targets = vec![TargetToken::sos()];
    for f in frames {
        targets.push(TargetToken {
            category: rng.random_range(0..8),
            slot: Some(rng.random_range(0..N_SLOTS)),
            frame: f,
        });
    }
    targets.push(TargetToken::eos(l));
    (enc, targets)
}

/// Finite-difference check of the total loss against a sample of
/// parameter entries, over `instances` random models and windows. Returns
/// the worst instance.
pub fn loss_gradcheck(
    instances: usize,
    tolerance: f64,
    seed: u64,
) -> Result<crate::nn::gradcheck::GradCheckReport, NnError> {
    use crate::nn::gradcheck::{GradCheck, PRECISE_LOSS_RMS_FLOOR};
    let config = tiny_gradcheck_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: Option<crate::nn::gradcheck::GradCheckReport> = None;
    for i in 0..instances {
        let mut model = DstModel::init(config.clone(), seed.wrapping_add(i as u64))?;
        // Move away from the symmetric initial point so every path carries gradient.
        for p in &mut model.params {
            for v in p.tensor.data_mut() {
                *v += rand::Rng::random_range(&mut rng, -0.1f32..0.1);
            }
        }
        let (enc, targets) = random_window(&config, &mut rng);
        let shell = model.clone();
        let mut check = GradCheck::new(tolerance, seed ^ i as u64);
        check.rms_floor = PRECISE_LOSS_RMS_FLOOR;
        let report = check.check_params("dst_loss", &mut model.params, 0.05, |g| {
            shell.loss_var(g, &enc, &targets)
        })?;
        if worst
            .as_ref()
            .is_none_or(|w| report.max_rel_error > w.max_rel_error || !report.passed)
        {
            worst = Some(report);
        }
    }
    worst.ok_or_else(|| NnError::Config("no instances".into()))
}
