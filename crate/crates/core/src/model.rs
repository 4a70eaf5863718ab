//! Ego-lane network: conv backbone → feature map `T`; spatial mean + MLP →
//! context vector `d`; `d` → VP/VL regression; single-query multi-head
//! attention over the tokens of `T` → evidence for the left and right heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::OutputGrad;
use crate::nn::{gelu, gelu_grad, Conv2d, Dims, Linear, MatMut, MatRef, ParamLayout, Real};

const DEGENERATE_LINE_NORM: f64 = 1e-8;
const EVIDENCE_BIAS_INIT: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_width: usize,
    pub input_height: usize,
    /// Output channels of each 3×3 conv block.
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub heads: usize,
    pub head_dim: usize,
    /// Classes per head (`M`).
    pub classes: usize,
    /// Width of the `L₁` layer before the evidence projection.
    pub ffn_hidden: usize,
    /// `false` replaces attention with an evidence MLP on the context vector.
    pub use_attention: bool,
    /// `false` disables the geometric loss (the VP/VL head is still present).
    pub use_vpl: bool,
}

impl ModelConfig {
    /// Small CPU-trainable configuration: 96×64 input, downsample 8, C = 128.
    pub fn desk() -> Self {
        Self {
            input_width: 96,
            input_height: 64,
            channels: vec![16, 32, 64, 128],
            strides: vec![2, 2, 2, 1],
            heads: 8,
            head_dim: 16,
            classes: 3,
            ffn_hidden: 256,
            use_attention: true,
            use_vpl: true,
        }
    }

    /// 384×256 input, downsample 16, C = 512, 8 heads of width 64.
    pub fn full_scale() -> Self {
        Self {
            input_width: 384,
            input_height: 256,
            channels: vec![64, 128, 256, 512],
            strides: vec![2, 2, 2, 2],
            heads: 8,
            head_dim: 64,
            classes: 3,
            ffn_hidden: 2 * 8 * 64,
            use_attention: true,
            use_vpl: true,
        }
    }

    pub fn downsample(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn feature_channels(&self) -> usize {
        *self.channels.last().expect("at least one conv block")
    }

    pub fn attention_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    /// `(Hf, Wf)` of the feature map.
    pub fn feature_grid(&self) -> (usize, usize) {
        let mut d = (self.input_height, self.input_width);
        for &s in &self.strides {
            d = ((d.0 - 1) / s + 1, (d.1 - 1) / s + 1);
        }
        d
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.input_height > 0
            && self.input_width > 0
            && !self.channels.is_empty()
            && self.channels.len() == self.strides.len()
            && self.strides.iter().all(|&s| s == 1 || s == 2)
            && self.channels.iter().all(|&c| c > 0)
            && self.heads > 0
            && self.head_dim > 0
            && self.classes > 0
            && self.ffn_hidden > 0
            && self.input_height % self.downsample() == 0
            && self.input_width % self.downsample() == 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid model config {self:?}")))
        }
    }
}

/// Preprocessed network input, `3 × height × width`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

/// Backbone output `T`, stored row-major as `(Hf, Wf, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<F> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<F>,
}

impl<F: Real> FeatureMap<F> {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    /// Channel-major `[C][tokens]` copy used by the batched internals.
    fn channel_major(&self) -> Vec<F> {
        let nt = self.tokens();
        let mut out = vec![F::zero(); self.data.len()];
        for t in 0..nt {
            for c in 0..self.channels {
                out[c * nt + t] = self.data[t * self.channels + c];
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOutput {
    pub e_left: Vec<f64>,
    pub e_right: Vec<f64>,
    pub vp_hat: [f64; 2],
    pub vl_raw: [f64; 2],
    /// Unit-norm line normal; `(0, 1)` when `vl_degenerate`.
    pub vl_hat: [f64; 2],
    pub vl_degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub output: ModelOutput,
    /// Attention weights, `heads × (Hf·Wf)` row-major; empty without attention.
    pub attention: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VplEstimate {
    pub vp_hat: [f64; 2],
    pub vl_raw: [f64; 2],
    pub vl_hat: [f64; 2],
    pub degenerate: bool,
}

impl VplEstimate {
    fn from_raw(v: [f64; 4]) -> Self {
        let raw = [v[2], v[3]];
        let n = raw[0].hypot(raw[1]);
        let degenerate = !(n >= DEGENERATE_LINE_NORM);
        let vl_hat = if degenerate {
            [0.0, 1.0]
        } else {
            [raw[0] / n, raw[1] / n]
        };
        Self {
            vp_hat: [v[0], v[1]],
            vl_raw: raw,
            vl_hat,
            degenerate,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub e_left: Vec<f64>,
    pub e_right: Vec<f64>,
    pub attention: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Layers {
    convs: Vec<Conv2d>,
    mlp1: Linear,
    mlp2: Linear,
    vpl: Linear,
    query: Option<Linear>,
    key: Option<Linear>,
    value: Option<Linear>,
    ffn1: Linear,
    ffn2: Linear,
}

/// Network weights plus the fixed layer structure.
#[derive(Debug, Clone)]
pub struct Model<F> {
    config: ModelConfig,
    layout: ParamLayout,
    layers: Layers,
    params: Vec<F>,
}

/// Activations kept from a batched forward pass for the backward pass.
pub struct Trace<F> {
    batch: usize,
    tokens_per_sample: usize,
    conv_dims: Vec<Dims>,
    acts: Vec<Vec<F>>,
    cols: Vec<Vec<F>>,
    pooled: Vec<F>,
    mlp_pre: Vec<F>,
    mlp_act: Vec<F>,
    context: Vec<F>,
    query: Vec<F>,
    key: Vec<F>,
    value: Vec<F>,
    attention: Vec<F>,
    attended: Vec<F>,
    ffn_pre: Vec<F>,
    ffn_act: Vec<F>,
    logits: Vec<F>,
}

fn build_layers(cfg: &ModelConfig, layout: &mut ParamLayout) -> Layers {
    let mut convs = Vec::with_capacity(cfg.channels.len());
    let mut cin = 3;
    for (i, (&c, &s)) in cfg.channels.iter().zip(&cfg.strides).enumerate() {
        convs.push(Conv2d::register(layout, &format!("backbone.conv{i}"), cin, c, s));
        cin = c;
    }
    let c = cfg.feature_channels();
    let d_attn = cfg.attention_dim();
    let mlp1 = Linear::register(layout, "context.fc1", c, c);
    let mlp2 = Linear::register(layout, "context.fc2", c, c);
    let vpl = Linear::register(layout, "vpl_head", c, 4);
    let (query, key, value, ffn_in) = if cfg.use_attention {
        (
            Some(Linear::register(layout, "attention.query", c, d_attn)),
            Some(Linear::register(layout, "attention.key", c, d_attn)),
            Some(Linear::register(layout, "attention.value", c, d_attn)),
            d_attn,
        )
    } else {
        (None, None, None, c)
    };
    let ffn1 = Linear::register(layout, "evidence.fc1", ffn_in, cfg.ffn_hidden);
    let ffn2 = Linear::register(layout, "evidence.fc2", cfg.ffn_hidden, 2 * cfg.classes);
    Layers {
        convs,
        mlp1,
        mlp2,
        vpl,
        query,
        key,
        value,
        ffn1,
        ffn2,
    }
}

impl<F: Real> Model<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut layout = ParamLayout::default();
        let layers = build_layers(&config, &mut layout);
        let mut params = vec![F::zero(); layout.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for conv in &layers.convs {
            conv.init(&layout, &mut params, &mut rng);
        }
        for lin in [&layers.mlp1, &layers.mlp2, &layers.vpl] {
            lin.init(&layout, &mut params, 1.0, &mut rng);
        }
        for lin in [&layers.query, &layers.key, &layers.value].into_iter().flatten() {
            lin.init(&layout, &mut params, 1.0, &mut rng);
        }
        layers.ffn1.init(&layout, &mut params, 1.0, &mut rng);
        layers.ffn2.init(&layout, &mut params, 1.0, &mut rng);
        // Start every evidence unit in the active region of the final ReLU.
        for b in layout.get_mut(&mut params, layers.ffn2.b) {
            *b = F::of(EVIDENCE_BIAS_INIT);
        }
        Ok(Self {
            config,
            layout,
            layers,
            params,
        })
    }

    /// Rebuilds a model from a flat parameter vector in layout order.
    pub fn from_params(config: ModelConfig, params: Vec<F>) -> Result<Self> {
        config.validate()?;
        let mut layout = ParamLayout::default();
        let layers = build_layers(&config, &mut layout);
        if params.len() != layout.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                layout.len(),
                params.len()
            )));
        }
        Ok(Self {
            config,
            layout,
            layers,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    fn check_input(&self, x: &ModelInput) -> Result<()> {
        let cfg = &self.config;
        if x.height != cfg.input_height || x.width != cfg.input_width || x.data.len() != 3 * x.height * x.width {
            return Err(Error::ShapeMismatch(format!(
                "input {}x{} ({} values), model expects 3x{}x{}",
                x.height,
                x.width,
                x.data.len(),
                cfg.input_height,
                cfg.input_width
            )));
        }
        Ok(())
    }

    fn stack_inputs(&self, inputs: &[&ModelInput]) -> Vec<F> {
        let b = inputs.len();
        let plane = self.config.input_height * self.config.input_width;
        let mut x = vec![F::zero(); 3 * b * plane];
        for (i, input) in inputs.iter().enumerate() {
            for c in 0..3 {
                let dst = &mut x[(c * b + i) * plane..][..plane];
                for (d, s) in dst.iter_mut().zip(&input.data[c * plane..][..plane]) {
                    *d = F::of(*s as f64);
                }
            }
        }
        x
    }

    fn run_backbone(&self, x: Vec<F>, batch: usize) -> (Vec<Vec<F>>, Vec<Vec<F>>, Vec<Dims>) {
        let mut dims = vec![Dims {
            batch,
            height: self.config.input_height,
            width: self.config.input_width,
        }];
        let mut acts = vec![x];
        let mut cols = Vec::with_capacity(self.layers.convs.len());
        for conv in &self.layers.convs {
            let d = *dims.last().unwrap();
            let (mut y, c, o) = conv.forward(&self.layout, &self.params, acts.last().unwrap(), d);
            y.iter_mut().for_each(|v| *v = v.max(F::zero()));
            acts.push(y);
            cols.push(c);
            dims.push(o);
        }
        (acts, cols, dims)
    }

    /// Spatial mean of channel-major tokens `[C][B·nt]` → `B × C`.
    fn pool(&self, tokens: &[F], batch: usize, nt: usize) -> Vec<F> {
        let c = self.config.feature_channels();
        let inv = F::of(1.0 / nt as f64);
        let mut pooled = vec![F::zero(); batch * c];
        for ch in 0..c {
            for b in 0..batch {
                let s: F = tokens[(ch * batch + b) * nt..][..nt].iter().copied().sum();
                pooled[b * c + ch] = s * inv;
            }
        }
        pooled
    }

    fn run_context(&self, pooled: &[F], batch: usize) -> (Vec<F>, Vec<F>, Vec<F>) {
        let c = self.config.feature_channels();
        let pre = self
            .layers
            .mlp1
            .forward(&self.layout, &self.params, MatRef::rows(pooled, batch, c), batch);
        let act: Vec<F> = pre.iter().map(|&v| gelu(v)).collect();
        let d = self
            .layers
            .mlp2
            .forward(&self.layout, &self.params, MatRef::rows(&act, batch, c), batch);
        (pre, act, d)
    }

    fn run_vpl(&self, d: &[F], batch: usize) -> Vec<F> {
        let c = self.config.feature_channels();
        self.layers
            .vpl
            .forward(&self.layout, &self.params, MatRef::rows(d, batch, c), batch)
    }

    /// Returns `(Q, K, V, A, AV)`.
    #[allow(clippy::type_complexity)]
    fn run_attention(
        &self,
        d: &[F],
        tokens: &[F],
        batch: usize,
        nt: usize,
    ) -> (Vec<F>, Vec<F>, Vec<F>, Vec<F>, Vec<F>) {
        let (Some(lq), Some(lk), Some(lv)) = (&self.layers.query, &self.layers.key, &self.layers.value) else {
            unreachable!("attention layers exist when use_attention is set");
        };
        let c = self.config.feature_channels();
        let (nh, dh) = (self.config.heads, self.config.head_dim);
        let dim = nh * dh;
        let bnt = batch * nt;
        let q = lq.forward(&self.layout, &self.params, MatRef::rows(d, batch, c), batch);
        let x = MatRef::new(tokens, bnt, c, 1, bnt);
        let k = lk.forward(&self.layout, &self.params, x, bnt);
        let v = lv.forward(&self.layout, &self.params, x, bnt);
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let mut attn = vec![F::zero(); batch * nh * nt];
        let mut out = vec![F::zero(); batch * dim];
        for b in 0..batch {
            for h in 0..nh {
                let qh = &q[b * dim + h * dh..][..dh];
                let row = &mut attn[(b * nh + h) * nt..][..nt];
                for (t, s) in row.iter_mut().enumerate() {
                    let kh = &k[(b * nt + t) * dim + h * dh..][..dh];
                    *s = qh.iter().zip(kh).map(|(a, b)| *a * *b).sum::<F>() * scale;
                }
                let max = row.iter().copied().fold(F::neg_infinity(), F::max);
                let mut z = F::zero();
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let oh = &mut out[b * dim + h * dh..][..dh];
                for (t, s) in row.iter_mut().enumerate() {
                    *s /= z;
                    let vh = &v[(b * nt + t) * dim + h * dh..][..dh];
                    for (o, vv) in oh.iter_mut().zip(vh) {
                        *o += *s * *vv;
                    }
                }
            }
        }
        (q, k, v, attn, out)
    }

    fn run_evidence(&self, feat: &[F], batch: usize) -> (Vec<F>, Vec<F>, Vec<F>) {
        let l1 = &self.layers.ffn1;
        let pre = l1.forward(&self.layout, &self.params, MatRef::rows(feat, batch, l1.inputs), batch);
        let act: Vec<F> = pre.iter().map(|&v| gelu(v)).collect();
        let logits = self.layers.ffn2.forward(
            &self.layout,
            &self.params,
            MatRef::rows(&act, batch, self.config.ffn_hidden),
            batch,
        );
        (pre, act, logits)
    }

    /// Batched forward pass that keeps everything needed for `backward`.
    pub fn forward_train(&self, inputs: &[&ModelInput]) -> Result<(Vec<ModelOutput>, Trace<F>)> {
        for x in inputs {
            self.check_input(x)?;
        }
        let batch = inputs.len();
        let x = self.stack_inputs(inputs);
        let (acts, cols, conv_dims) = self.run_backbone(x, batch);
        let nt = conv_dims.last().unwrap().plane();
        let tokens = acts.last().unwrap();
        let pooled = self.pool(tokens, batch, nt);
        let (mlp_pre, mlp_act, context) = self.run_context(&pooled, batch);
        let vpl = self.run_vpl(&context, batch);
        let (query, key, value, attention, attended) = if self.config.use_attention {
            self.run_attention(&context, tokens, batch, nt)
        } else {
            Default::default()
        };
        let feat = if self.config.use_attention { &attended } else { &context };
        let (ffn_pre, ffn_act, logits) = self.run_evidence(feat, batch);

        let m = self.config.classes;
        let outputs = (0..batch)
            .map(|b| {
                let e: Vec<f64> = logits[b * 2 * m..][..2 * m]
                    .iter()
                    .map(|v| v.as_f64().max(0.0))
                    .collect();
                let v = &vpl[b * 4..][..4];
                let est = VplEstimate::from_raw([v[0].as_f64(), v[1].as_f64(), v[2].as_f64(), v[3].as_f64()]);
                ModelOutput {
                    e_left: e[..m].to_vec(),
                    e_right: e[m..].to_vec(),
                    vp_hat: est.vp_hat,
                    vl_raw: est.vl_raw,
                    vl_hat: est.vl_hat,
                    vl_degenerate: est.degenerate,
                }
            })
            .collect();
        let trace = Trace {
            batch,
            tokens_per_sample: nt,
            conv_dims,
            acts,
            cols,
            pooled,
            mlp_pre,
            mlp_act,
            context,
            query,
            key,
            value,
            attention,
            attended,
            ffn_pre,
            ffn_act,
            logits,
        };
        Ok((outputs, trace))
    }

    /// Inference on a batch; returns outputs with attention weights.
    pub fn forward(&self, inputs: &[&ModelInput]) -> Result<Vec<Inference>> {
        let (outputs, trace) = self.forward_train(inputs)?;
        let per = self.config.heads * trace.tokens_per_sample;
        Ok(outputs
            .into_iter()
            .enumerate()
            .map(|(b, output)| Inference {
                output,
                attention: if self.config.use_attention {
                    trace.attention[b * per..][..per].iter().map(|v| v.as_f64()).collect()
                } else {
                    Vec::new()
                },
            })
            .collect())
    }

    pub fn forward_one(&self, input: &ModelInput) -> Result<Inference> {
        Ok(self.forward(&[input])?.remove(0))
    }

    /// Parameter gradient of `Σ_b loss_b` given `∂loss_b/∂outputs_b`.
    pub fn backward(&self, trace: &Trace<F>, grads_out: &[OutputGrad]) -> Vec<F> {
        assert_eq!(grads_out.len(), trace.batch, "one output gradient per sample");
        let batch = trace.batch;
        let nt = trace.tokens_per_sample;
        let c = self.config.feature_channels();
        let m = self.config.classes;
        let (nh, dh) = (self.config.heads, self.config.head_dim);
        let dim = nh * dh;
        let (layout, params) = (&self.layout, &self.params[..]);
        let mut grads = vec![F::zero(); layout.len()];

        // Evidence head.
        let mut d_logits = vec![F::zero(); batch * 2 * m];
        for (b, g) in grads_out.iter().enumerate() {
            for (k, dv) in g.e_left.iter().chain(&g.e_right).enumerate() {
                let idx = b * 2 * m + k;
                if trace.logits[idx] > F::zero() {
                    d_logits[idx] = F::of(*dv);
                }
            }
        }
        let hidden = self.config.ffn_hidden;
        let mut d_ffn_act = vec![F::zero(); batch * hidden];
        self.layers.ffn2.backward(
            layout,
            params,
            &mut grads,
            MatRef::rows(&trace.ffn_act, batch, hidden),
            &d_logits,
            batch,
            Some(MatMut::rows(&mut d_ffn_act, batch, hidden)),
        );
        let d_ffn_pre: Vec<F> = d_ffn_act
            .iter()
            .zip(&trace.ffn_pre)
            .map(|(g, x)| *g * gelu_grad(*x))
            .collect();

        let tokens = trace.acts.last().unwrap();
        let bnt = batch * nt;
        let mut d_tokens = vec![F::zero(); tokens.len()];
        let mut d_context = vec![F::zero(); batch * c];

        if self.config.use_attention {
            let mut d_attended = vec![F::zero(); batch * dim];
            self.layers.ffn1.backward(
                layout,
                params,
                &mut grads,
                MatRef::rows(&trace.attended, batch, dim),
                &d_ffn_pre,
                batch,
                Some(MatMut::rows(&mut d_attended, batch, dim)),
            );
            let scale = F::of(1.0 / (dh as f64).sqrt());
            let mut dq = vec![F::zero(); batch * dim];
            let mut dk = vec![F::zero(); bnt * dim];
            let mut dv = vec![F::zero(); bnt * dim];
            let mut ds = vec![F::zero(); nt];
            for b in 0..batch {
                for h in 0..nh {
                    let a = &trace.attention[(b * nh + h) * nt..][..nt];
                    let doh = &d_attended[b * dim + h * dh..][..dh];
                    let mut weighted = F::zero();
                    for t in 0..nt {
                        let row = (b * nt + t) * dim + h * dh;
                        let vh = &trace.value[row..][..dh];
                        let da: F = doh.iter().zip(vh).map(|(x, y)| *x * *y).sum();
                        ds[t] = da;
                        weighted += a[t] * da;
                        for (g, o) in dv[row..][..dh].iter_mut().zip(doh) {
                            *g += a[t] * *o;
                        }
                    }
                    let qh = &trace.query[b * dim + h * dh..][..dh];
                    for t in 0..nt {
                        let s = a[t] * (ds[t] - weighted) * scale;
                        let row = (b * nt + t) * dim + h * dh;
                        let kh = &trace.key[row..][..dh];
                        for (g, kk) in dq[b * dim + h * dh..][..dh].iter_mut().zip(kh) {
                            *g += s * *kk;
                        }
                        for (g, qq) in dk[row..][..dh].iter_mut().zip(qh) {
                            *g += s * *qq;
                        }
                    }
                }
            }
            let (lq, lk, lv) = (
                self.layers.query.as_ref().unwrap(),
                self.layers.key.as_ref().unwrap(),
                self.layers.value.as_ref().unwrap(),
            );
            lq.backward(
                layout,
                params,
                &mut grads,
                MatRef::rows(&trace.context, batch, c),
                &dq,
                batch,
                Some(MatMut::rows(&mut d_context, batch, c)),
            );
            let x = MatRef::new(tokens, bnt, c, 1, bnt);
            lk.backward(
                layout,
                params,
                &mut grads,
                x,
                &dk,
                bnt,
                Some(MatMut::new(&mut d_tokens, bnt, c, 1, bnt)),
            );
            lv.backward(
                layout,
                params,
                &mut grads,
                x,
                &dv,
                bnt,
                Some(MatMut::new(&mut d_tokens, bnt, c, 1, bnt)),
            );
        } else {
            self.layers.ffn1.backward(
                layout,
                params,
                &mut grads,
                MatRef::rows(&trace.context, batch, c),
                &d_ffn_pre,
                batch,
                Some(MatMut::rows(&mut d_context, batch, c)),
            );
        }

        // VP/VL head.
        let mut d_vpl = vec![F::zero(); batch * 4];
        for (b, g) in grads_out.iter().enumerate() {
            let row = &mut d_vpl[b * 4..][..4];
            row[0] = F::of(g.vp[0]);
            row[1] = F::of(g.vp[1]);
            row[2] = F::of(g.vl_raw[0]);
            row[3] = F::of(g.vl_raw[1]);
        }
        self.layers.vpl.backward(
            layout,
            params,
            &mut grads,
            MatRef::rows(&trace.context, batch, c),
            &d_vpl,
            batch,
            Some(MatMut::rows(&mut d_context, batch, c)),
        );

        // Context MLP.
        let mut d_mlp_act = vec![F::zero(); batch * c];
        self.layers.mlp2.backward(
            layout,
            params,
            &mut grads,
            MatRef::rows(&trace.mlp_act, batch, c),
            &d_context,
            batch,
            Some(MatMut::rows(&mut d_mlp_act, batch, c)),
        );
        let d_mlp_pre: Vec<F> = d_mlp_act
            .iter()
            .zip(&trace.mlp_pre)
            .map(|(g, x)| *g * gelu_grad(*x))
            .collect();
        let mut d_pooled = vec![F::zero(); batch * c];
        self.layers.mlp1.backward(
            layout,
            params,
            &mut grads,
            MatRef::rows(&trace.pooled, batch, c),
            &d_mlp_pre,
            batch,
            Some(MatMut::rows(&mut d_pooled, batch, c)),
        );
        let inv = F::of(1.0 / nt as f64);
        for ch in 0..c {
            for b in 0..batch {
                let g = d_pooled[b * c + ch] * inv;
                for v in d_tokens[(ch * batch + b) * nt..][..nt].iter_mut() {
                    *v += g;
                }
            }
        }

        // Backbone.
        let mut d_act = d_tokens;
        for (i, conv) in self.layers.convs.iter().enumerate().rev() {
            let act = &trace.acts[i + 1];
            for (g, a) in d_act.iter_mut().zip(act) {
                if *a <= F::zero() {
                    *g = F::zero();
                }
            }
            let d_in = conv.backward(
                layout,
                params,
                &mut grads,
                &trace.cols[i],
                &d_act,
                trace.conv_dims[i],
                trace.conv_dims[i + 1],
                i > 0,
            );
            match d_in {
                Some(d) => d_act = d,
                None => break,
            }
        }
        grads
    }

    pub fn backbone_forward(&self, x: &ModelInput) -> Result<FeatureMap<F>> {
        self.check_input(x)?;
        let (acts, _, dims) = self.run_backbone(self.stack_inputs(&[x]), 1);
        let d = *dims.last().unwrap();
        let c = self.config.feature_channels();
        let nt = d.plane();
        let tokens = acts.last().unwrap();
        let mut data = vec![F::zero(); nt * c];
        for ch in 0..c {
            for t in 0..nt {
                data[t * c + ch] = tokens[ch * nt + t];
            }
        }
        Ok(FeatureMap {
            height: d.height,
            width: d.width,
            channels: c,
            data,
        })
    }

    /// Per-channel mean over the `Hf × Wf` grid.
    pub fn spatial_mean(&self, t: &FeatureMap<F>) -> Vec<F> {
        self.pool(&t.channel_major(), 1, t.tokens())
    }

    pub fn context_vector(&self, t: &FeatureMap<F>) -> Result<Vec<F>> {
        self.check_feature_map(t)?;
        let pooled = self.spatial_mean(t);
        Ok(self.run_context(&pooled, 1).2)
    }

    pub fn vpl_head(&self, d: &[F]) -> VplEstimate {
        let v = self.run_vpl(d, 1);
        VplEstimate::from_raw([v[0].as_f64(), v[1].as_f64(), v[2].as_f64(), v[3].as_f64()])
    }

    pub fn attention_forward(&self, d: &[F], t: &FeatureMap<F>) -> Result<AttentionOutput> {
        self.check_feature_map(t)?;
        if d.len() != self.config.feature_channels() {
            return Err(Error::ShapeMismatch(format!("context vector has {} entries", d.len())));
        }
        let m = self.config.classes;
        let (attention, feat) = if self.config.use_attention {
            let (_, _, _, a, o) = self.run_attention(d, &t.channel_major(), 1, t.tokens());
            (a.iter().map(|v| v.as_f64()).collect(), o)
        } else {
            (Vec::new(), d.to_vec())
        };
        let (_, _, logits) = self.run_evidence(&feat, 1);
        let e: Vec<f64> = logits.iter().map(|v| v.as_f64().max(0.0)).collect();
        Ok(AttentionOutput {
            e_left: e[..m].to_vec(),
            e_right: e[m..].to_vec(),
            attention,
        })
    }

    fn check_feature_map(&self, t: &FeatureMap<F>) -> Result<()> {
        let (hf, wf) = self.config.feature_grid();
        let c = self.config.feature_channels();
        if t.shape() != (hf, wf, c) || t.data.len() != hf * wf * c {
            return Err(Error::ShapeMismatch(format!(
                "feature map {:?}, expected ({hf}, {wf}, {c})",
                t.shape()
            )));
        }
        Ok(())
    }

    /// Converts weights to another scalar type (used for 64-bit checks).
    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            layers: self.layers.clone(),
            params: self.params.iter().map(|v| G::of(v.as_f64())).collect(),
        }
    }
}
