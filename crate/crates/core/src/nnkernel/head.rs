//! Transformer classifier head over a single frozen-encoder embedding.
//!
//! The embedding is projected to `d_model` and passed through `n_layers`
//! post-norm encoder layers as a one-token sequence, then a linear
//! classifier maps the encoded vector to class logits.
//!
//! With a single token the attention softmax is identically 1, so each
//! attention block reduces to the value projection followed by the output
//! projection. The query/key tensors are still carried (and counted) so the
//! parameter layout matches a standard encoder layer; their gradients are
//! exactly zero.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{add_row_bias, col_sums_into, gemm_nn, gemm_nt, gemm_tn, Tensor2};
use super::KernelError;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Shape of the classifier head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadDims {
    pub d_in: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub n_classes: usize,
}

impl Default for HeadDims {
    fn default() -> Self {
        Self {
            d_in: 512,
            d_model: 256,
            d_ff: 1024,
            n_layers: 2,
            n_classes: 30,
        }
    }
}

impl HeadDims {
    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let attention = 4 * (d * d + d);
        let ffn = d * self.d_ff + self.d_ff + self.d_ff * d + d;
        let norms = 4 * d;
        (self.d_in * d + d) + self.n_layers * (attention + ffn + norms) + self.n_classes * (d + 1)
    }

    fn validate(&self) -> Result<(), KernelError> {
        if self.d_in == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(KernelError::Config(format!(
                "head dimensions must be positive, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayerParams {
    pub wq: Tensor2,
    pub bq: Vec<f64>,
    pub wk: Tensor2,
    pub bk: Vec<f64>,
    pub wv: Tensor2,
    pub bv: Vec<f64>,
    pub wo: Tensor2,
    pub bo: Vec<f64>,
    pub ff_up_w: Tensor2,
    pub ff_up_b: Vec<f64>,
    pub ff_down_w: Tensor2,
    pub ff_down_b: Vec<f64>,
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
}

impl EncoderLayerParams {
    fn zeros(d_model: usize, d_ff: usize) -> Self {
        let sq = || Tensor2::zeros(d_model, d_model);
        let v = |n| vec![0.0; n];
        Self {
            wq: sq(),
            bq: v(d_model),
            wk: sq(),
            bk: v(d_model),
            wv: sq(),
            bv: v(d_model),
            wo: sq(),
            bo: v(d_model),
            ff_up_w: Tensor2::zeros(d_model, d_ff),
            ff_up_b: v(d_ff),
            ff_down_w: Tensor2::zeros(d_ff, d_model),
            ff_down_b: v(d_model),
            ln1_gamma: v(d_model),
            ln1_beta: v(d_model),
            ln2_gamma: v(d_model),
            ln2_beta: v(d_model),
        }
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        let mut push = |name: &str, s: &'a [f64]| out.push((format!("{prefix}.{name}"), s));
        push("wq", self.wq.data());
        push("bq", &self.bq);
        push("wk", self.wk.data());
        push("bk", &self.bk);
        push("wv", self.wv.data());
        push("bv", &self.bv);
        push("wo", self.wo.data());
        push("bo", &self.bo);
        push("ff_up_w", self.ff_up_w.data());
        push("ff_up_b", &self.ff_up_b);
        push("ff_down_w", self.ff_down_w.data());
        push("ff_down_b", &self.ff_down_b);
        push("ln1_gamma", &self.ln1_gamma);
        push("ln1_beta", &self.ln1_beta);
        push("ln2_gamma", &self.ln2_gamma);
        push("ln2_beta", &self.ln2_beta);
    }

    fn slices_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        let Self {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ff_up_w,
            ff_up_b,
            ff_down_w,
            ff_down_b,
            ln1_gamma,
            ln1_beta,
            ln2_gamma,
            ln2_beta,
        } = self;
        out.extend([
            wq.data_mut(),
            bq.as_mut_slice(),
            wk.data_mut(),
            bk.as_mut_slice(),
            wv.data_mut(),
            bv.as_mut_slice(),
            wo.data_mut(),
            bo.as_mut_slice(),
            ff_up_w.data_mut(),
            ff_up_b.as_mut_slice(),
            ff_down_w.data_mut(),
            ff_down_b.as_mut_slice(),
            ln1_gamma.as_mut_slice(),
            ln1_beta.as_mut_slice(),
            ln2_gamma.as_mut_slice(),
            ln2_beta.as_mut_slice(),
        ]);
    }
}

/// Every trainable tensor of the head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub proj_w: Tensor2,
    pub proj_b: Vec<f64>,
    pub layers: Vec<EncoderLayerParams>,
    /// One row per class, `n_classes × d_model`.
    pub cls_w: Tensor2,
    pub cls_b: Vec<f64>,
}

/// Gradient of a scalar loss with respect to every [`HeadParams`] tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet(pub HeadParams);

impl HeadParams {
    /// All-zero parameters with the given shape (layer-norm scales included).
    pub fn zeros(dims: HeadDims) -> Self {
        Self {
            proj_w: Tensor2::zeros(dims.d_in, dims.d_model),
            proj_b: vec![0.0; dims.d_model],
            layers: (0..dims.n_layers)
                .map(|_| EncoderLayerParams::zeros(dims.d_model, dims.d_ff))
                .collect(),
            cls_w: Tensor2::zeros(dims.n_classes, dims.d_model),
            cls_b: vec![0.0; dims.n_classes],
        }
    }

    /// Xavier-uniform weights, zero biases, unit layer-norm scales.
    pub fn init(dims: HeadDims, seed: u64) -> Result<Self, KernelError> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(dims);
        let mut xavier = |t: &mut Tensor2, fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite xavier bound");
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = dist.sample(&mut rng));
        };
        let (d, f) = (dims.d_model, dims.d_ff);
        xavier(&mut p.proj_w, dims.d_in, d);
        for layer in &mut p.layers {
            xavier(&mut layer.wq, d, d);
            xavier(&mut layer.wk, d, d);
            xavier(&mut layer.wv, d, d);
            xavier(&mut layer.wo, d, d);
            xavier(&mut layer.ff_up_w, d, f);
            xavier(&mut layer.ff_down_w, f, d);
            layer.ln1_gamma.fill(1.0);
            layer.ln2_gamma.fill(1.0);
        }
        xavier(&mut p.cls_w, d, dims.n_classes);
        Ok(p)
    }

    pub fn dims(&self) -> HeadDims {
        HeadDims {
            d_in: self.proj_w.rows(),
            d_model: self.proj_w.cols(),
            d_ff: self.layers.first().map(|l| l.ff_up_w.cols()).unwrap_or(0),
            n_layers: self.layers.len(),
            n_classes: self.cls_w.rows(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.cls_w.rows()
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, s)| s.len()).sum()
    }

    /// Every tensor as a flat slice, in a fixed canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::with_capacity(4 + 16 * self.layers.len());
        out.push(("proj_w".to_string(), self.proj_w.data()));
        out.push(("proj_b".to_string(), self.proj_b.as_slice()));
        for (i, layer) in self.layers.iter().enumerate() {
            layer.named(&format!("layers.{i}"), &mut out);
        }
        out.push(("cls_w".to_string(), self.cls_w.data()));
        out.push(("cls_b".to_string(), self.cls_b.as_slice()));
        out
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.named_tensors().into_iter().map(|(_, s)| s).collect()
    }

    /// Mutable counterpart of [`HeadParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(4 + 16 * self.layers.len());
        let Self {
            proj_w,
            proj_b,
            layers,
            cls_w,
            cls_b,
        } = self;
        out.push(proj_w.data_mut());
        out.push(proj_b.as_mut_slice());
        for layer in layers.iter_mut() {
            layer.slices_mut(&mut out);
        }
        out.push(cls_w.data_mut());
        out.push(cls_b.as_mut_slice());
        out
    }

    /// Encoder and projection tensors only (everything except the classifier).
    pub fn encoder_tensors(&self) -> Vec<(String, &[f64])> {
        let mut all = self.named_tensors();
        all.truncate(all.len() - 2);
        all
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Errors unless `other` has exactly the same tensor shapes.
    pub fn check_congruent(&self, other: &HeadParams, what: &str) -> Result<(), KernelError> {
        if self.dims() != other.dims() {
            return Err(KernelError::Dimension(format!(
                "{what}: parameter shapes differ ({:?} vs {:?})",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }
}

impl GradientSet {
    pub fn zeros_like(params: &HeadParams) -> Self {
        GradientSet(HeadParams::zeros(params.dims()))
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.0.tensors()
    }

    pub fn is_finite(&self) -> bool {
        self.0.is_finite()
    }
}

/// Intermediate values of one layer kept for the backward pass.
#[derive(Clone, Debug)]
struct LayerTrace {
    input: Tensor2,
    value: Tensor2,
    ln1: NormTrace,
    hidden: Tensor2,
    ff_pre: Tensor2,
    ff_act: Tensor2,
    ln2: NormTrace,
}

#[derive(Clone, Debug)]
struct NormTrace {
    xhat: Tensor2,
    inv_std: Vec<f64>,
}

/// Forward activations retained for [`head_backward`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    batch: Tensor2,
    layers: Vec<LayerTrace>,
    encoded: Tensor2,
    logits: Tensor2,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Tensor2 {
        &self.logits
    }

    pub fn encoded(&self) -> &Tensor2 {
        &self.encoded
    }
}

#[derive(Clone, Debug)]
pub struct HeadOutput {
    pub logits: Tensor2,
    pub encoded: Tensor2,
}

// tanh approximation of GELU
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

#[inline]
fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

fn layer_norm(x: &Tensor2, gamma: &[f64], beta: &[f64]) -> (Tensor2, NormTrace) {
    let n = x.cols() as f64;
    let mut xhat = Tensor2::zeros(x.rows(), x.cols());
    let mut y = Tensor2::zeros(x.rows(), x.cols());
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(istd);
        let xh = xhat.row_mut(i);
        for (o, v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * istd;
        }
        let xh = xhat.row(i).to_vec();
        for (j, o) in y.row_mut(i).iter_mut().enumerate() {
            *o = gamma[j] * xh[j] + beta[j];
        }
    }
    (y, NormTrace { xhat, inv_std })
}

/// Returns dx and accumulates dγ, dβ.
fn layer_norm_backward(
    dy: &Tensor2,
    trace: &NormTrace,
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Tensor2 {
    let n = dy.cols() as f64;
    let mut dx = Tensor2::zeros(dy.rows(), dy.cols());
    let mut dxhat = vec![0.0; dy.cols()];
    for i in 0..dy.rows() {
        let g = dy.row(i);
        let xh = trace.xhat.row(i);
        let mut sum = 0.0;
        let mut sum_x = 0.0;
        for j in 0..g.len() {
            dgamma[j] += g[j] * xh[j];
            dbeta[j] += g[j];
            dxhat[j] = g[j] * gamma[j];
            sum += dxhat[j];
            sum_x += dxhat[j] * xh[j];
        }
        let scale = trace.inv_std[i] / n;
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = scale * (n * dxhat[j] - sum - xh[j] * sum_x);
        }
    }
    dx
}

fn linear(x: &Tensor2, w: &Tensor2, b: &[f64]) -> Tensor2 {
    let mut y = Tensor2::zeros(x.rows(), w.cols());
    gemm_nn(x, w, &mut y, false);
    add_row_bias(&mut y, b);
    y
}

fn layer_forward(layer: &EncoderLayerParams, x: Tensor2) -> (Tensor2, LayerTrace) {
    let value = linear(&x, &layer.wv, &layer.bv);
    let mut resid = linear(&value, &layer.wo, &layer.bo);
    for (r, v) in resid.data_mut().iter_mut().zip(x.data()) {
        *r += v;
    }
    let (hidden, ln1) = layer_norm(&resid, &layer.ln1_gamma, &layer.ln1_beta);
    let ff_pre = linear(&hidden, &layer.ff_up_w, &layer.ff_up_b);
    let mut ff_act = ff_pre.clone();
    ff_act.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
    let mut resid2 = linear(&ff_act, &layer.ff_down_w, &layer.ff_down_b);
    for (r, h) in resid2.data_mut().iter_mut().zip(hidden.data()) {
        *r += h;
    }
    let (out, ln2) = layer_norm(&resid2, &layer.ln2_gamma, &layer.ln2_beta);
    (
        out,
        LayerTrace {
            input: x,
            value,
            ln1,
            hidden,
            ff_pre,
            ff_act,
            ln2,
        },
    )
}

fn check_batch(params: &HeadParams, batch: &Tensor2) -> Result<(), KernelError> {
    if batch.cols() != params.proj_w.rows() {
        return Err(KernelError::Dimension(format!(
            "batch is {}x{} but the head expects inputs of width d_in={}",
            batch.rows(),
            batch.cols(),
            params.proj_w.rows()
        )));
    }
    Ok(())
}

fn encode_traced(
    params: &HeadParams,
    batch: &Tensor2,
) -> Result<(Tensor2, Vec<LayerTrace>), KernelError> {
    check_batch(params, batch)?;
    let mut h = linear(batch, &params.proj_w, &params.proj_b);
    let mut traces = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (out, trace) = layer_forward(layer, h);
        traces.push(trace);
        h = out;
    }
    if !h.is_finite() {
        return Err(KernelError::NonFinite("encoder output".into()));
    }
    Ok((h, traces))
}

/// Encoder output (pre-classifier) for every row of `batch`.
pub fn encode(params: &HeadParams, batch: &Tensor2) -> Result<Tensor2, KernelError> {
    encode_traced(params, batch).map(|(h, _)| h)
}

/// `encoded · cls_wᵀ + cls_b`.
pub fn classifier_logits(cls_w: &Tensor2, cls_b: &[f64], encoded: &Tensor2) -> Tensor2 {
    let mut logits = Tensor2::zeros(encoded.rows(), cls_w.rows());
    gemm_nt(encoded, cls_w, &mut logits, false);
    add_row_bias(&mut logits, cls_b);
    logits
}

/// Gradients of the linear classifier given its input and upstream logits gradient.
pub fn classifier_backward(encoded: &Tensor2, dlogits: &Tensor2) -> (Tensor2, Vec<f64>) {
    let mut dw = Tensor2::zeros(dlogits.cols(), encoded.cols());
    gemm_tn(dlogits, encoded, &mut dw, false);
    let mut db = vec![0.0; dlogits.cols()];
    col_sums_into(dlogits, &mut db);
    (dw, db)
}

pub fn head_forward(params: &HeadParams, batch: &Tensor2) -> Result<HeadOutput, KernelError> {
    let (encoded, _) = encode_traced(params, batch)?;
    let logits = classifier_logits(&params.cls_w, &params.cls_b, &encoded);
    if !logits.is_finite() {
        return Err(KernelError::NonFinite("logits".into()));
    }
    Ok(HeadOutput { logits, encoded })
}

/// Forward pass that keeps every activation needed by [`head_backward`].
pub fn head_forward_traced(
    params: &HeadParams,
    batch: &Tensor2,
) -> Result<ForwardTrace, KernelError> {
    let (encoded, layers) = encode_traced(params, batch)?;
    let logits = classifier_logits(&params.cls_w, &params.cls_b, &encoded);
    if !logits.is_finite() {
        return Err(KernelError::NonFinite("logits".into()));
    }
    Ok(ForwardTrace {
        batch: batch.clone(),
        layers,
        encoded,
        logits,
    })
}

/// Back-propagates `dlogits` through the whole head.
pub fn head_backward(
    params: &HeadParams,
    trace: &ForwardTrace,
    dlogits: &Tensor2,
) -> Result<GradientSet, KernelError> {
    dlogits.check_shape(
        trace.logits.rows(),
        trace.logits.cols(),
        "upstream logits gradient",
    )?;
    if trace.layers.len() != params.layers.len() || trace.encoded.cols() != params.cls_w.cols() {
        return Err(KernelError::Dimension(
            "forward trace was produced by a differently shaped head".into(),
        ));
    }
    let mut grads = GradientSet::zeros_like(params);
    let g = &mut grads.0;

    let (dw, db) = classifier_backward(&trace.encoded, dlogits);
    g.cls_w = dw;
    g.cls_b = db;
    let mut dh = Tensor2::zeros(dlogits.rows(), params.cls_w.cols());
    gemm_nn(dlogits, &params.cls_w, &mut dh, false);

    for ((layer, lt), lg) in params
        .layers
        .iter()
        .zip(&trace.layers)
        .zip(g.layers.iter_mut())
        .rev()
    {
        dh = layer_backward(layer, lt, lg, &dh);
    }

    gemm_tn(&trace.batch, &dh, &mut g.proj_w, false);
    col_sums_into(&dh, &mut g.proj_b);

    if !grads.is_finite() {
        return Err(KernelError::NonFinite("gradients".into()));
    }
    Ok(grads)
}

fn layer_backward(
    layer: &EncoderLayerParams,
    trace: &LayerTrace,
    g: &mut EncoderLayerParams,
    dout: &Tensor2,
) -> Tensor2 {
    let rows = dout.rows();
    let d = layer.wv.rows();
    let f = layer.ff_up_w.cols();

    let dresid2 = layer_norm_backward(
        dout,
        &trace.ln2,
        &layer.ln2_gamma,
        &mut g.ln2_gamma,
        &mut g.ln2_beta,
    );

    gemm_tn(&trace.ff_act, &dresid2, &mut g.ff_down_w, false);
    col_sums_into(&dresid2, &mut g.ff_down_b);
    let mut dpre = Tensor2::zeros(rows, f);
    gemm_nt(&dresid2, &layer.ff_down_w, &mut dpre, false);
    for (dv, u) in dpre.data_mut().iter_mut().zip(trace.ff_pre.data()) {
        *dv *= gelu_grad(*u);
    }

    gemm_tn(&trace.hidden, &dpre, &mut g.ff_up_w, false);
    col_sums_into(&dpre, &mut g.ff_up_b);
    let mut dhidden = dresid2;
    gemm_nt(&dpre, &layer.ff_up_w, &mut dhidden, true);

    let dresid1 = layer_norm_backward(
        &dhidden,
        &trace.ln1,
        &layer.ln1_gamma,
        &mut g.ln1_gamma,
        &mut g.ln1_beta,
    );

    gemm_tn(&trace.value, &dresid1, &mut g.wo, false);
    col_sums_into(&dresid1, &mut g.bo);
    let mut dvalue = Tensor2::zeros(rows, d);
    gemm_nt(&dresid1, &layer.wo, &mut dvalue, false);

    gemm_tn(&trace.input, &dvalue, &mut g.wv, false);
    col_sums_into(&dvalue, &mut g.bv);
    let mut dx = dresid1;
    gemm_nt(&dvalue, &layer.wv, &mut dx, true);
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dims() -> HeadDims {
        HeadDims {
            d_in: 6,
            d_model: 4,
            d_ff: 8,
            n_layers: 2,
            n_classes: 3,
        }
    }

    #[test]
    fn zero_parameters_give_zero_logits() {
        let p = HeadParams::zeros(small_dims());
        let batch = Tensor2::from_vec(2, 6, (0..12).map(|v| v as f64 * 0.3 - 1.0).collect()).unwrap();
        let out = head_forward(&p, &batch).unwrap();
        assert!(out.logits.data().iter().all(|&v| v == 0.0));
    }

    // Scalar layer norm used only as an independent oracle.
    fn ln_oracle(x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        x.iter()
            .map(|v| (v - mean) / (var + LAYER_NORM_EPS).sqrt())
            .collect()
    }

    #[test]
    fn identity_like_head_returns_layer_normed_projection() {
        let dims = HeadDims {
            d_in: 4,
            d_model: 4,
            d_ff: 8,
            n_layers: 2,
            n_classes: 2,
        };
        let mut p = HeadParams::zeros(dims);
        for i in 0..4 {
            p.proj_w.set(i, i, 1.0);
        }
        for layer in &mut p.layers {
            layer.ln1_gamma.fill(1.0);
            layer.ln2_gamma.fill(1.0);
        }
        let x = [1.0, 0.0, 0.0, 0.0];
        let out = head_forward(&p, &Tensor2::from_rows(&[x]).unwrap()).unwrap();

        // Hand calculation: mean 1/4, centred [3/4, -1/4, -1/4, -1/4], var 3/16,
        // so LN(x) = [3, -1, -1, -1] / sqrt(3) up to the epsilon term.
        let hand = [3.0, -1.0, -1.0, -1.0].map(|v: f64| v / 3f64.sqrt());
        for (a, h) in out.encoded.row(0).iter().zip(hand) {
            assert!((a - h).abs() < 1e-4, "{a} vs {h}");
        }
        // Exact composition: every layer applies LN twice to an unchanged residual.
        let mut e = x.to_vec();
        for _ in 0..4 {
            e = ln_oracle(&e);
        }
        for (a, o) in out.encoded.row(0).iter().zip(&e) {
            assert!((a - o).abs() < 1e-12);
        }
    }

    #[test]
    fn default_head_has_about_1_7m_parameters() {
        let dims = HeadDims::default();
        let n = dims.param_count();
        assert_eq!(n, 1_718_558);
        assert!((1_600_000..=2_000_000).contains(&n));
        let p = HeadParams::init(dims, 0).unwrap();
        assert_eq!(p.param_count(), n);
    }

    #[test]
    fn wrong_batch_width_names_both_shapes() {
        let p = HeadParams::zeros(small_dims());
        let err = head_forward(&p, &Tensor2::zeros(3, 5)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("3x5") && msg.contains("d_in=6"), "{msg}");
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let p = HeadParams::init(small_dims(), 9).unwrap();
        let batch = Tensor2::from_vec(3, 6, (0..18).map(|v| (v as f64).sin()).collect()).unwrap();
        let a = head_forward(&p, &batch).unwrap();
        let b = head_forward(&p, &batch).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.encoded, b.encoded);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let p = HeadParams::init(small_dims(), 3).unwrap();
        let batch = Tensor2::from_vec(2, 6, (0..12).map(|v| (v as f64).cos()).collect()).unwrap();
        let trace = head_forward_traced(&p, &batch).unwrap();
        let g = head_backward(&p, &trace, &Tensor2::zeros(2, 3)).unwrap();
        assert!(g.tensors().iter().all(|s| s.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn init_is_seeded() {
        let a = HeadParams::init(small_dims(), 5).unwrap();
        let b = HeadParams::init(small_dims(), 5).unwrap();
        let c = HeadParams::init(small_dims(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.cls_b.iter().all(|&v| v == 0.0));
        assert!(a.layers[0].ln1_gamma.iter().all(|&v| v == 1.0));
    }
}
