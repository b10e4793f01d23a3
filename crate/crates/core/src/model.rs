//! Two-modality model: per-modality MLP encoders, concatenation or
//! summation fusion, a linear head and the joint cross-entropy objective,
//! with an analytic backward pass and a central-difference oracle.
//!
//! Encoder parameters flatten layer-major; within a layer the weight
//! (`out × in`, row-major) comes first and its bias is appended. Gradients,
//! momentum buffers and anchors all share this layout so they line up
//! coordinate for coordinate.

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{invalid, shape, Error, Result};
use crate::numerics::{log_softmax_rows, matmul, matmul_at, matmul_bt, norm, softmax_rows, Matrix, RngState};
use crate::{Modality, NUM_MODALITIES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Concat,
    Sum,
}

/// One affine layer, `y = x · Wᵀ + b` with `W` stored `out × in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    fn glorot(input: usize, output: usize, rng: &mut RngState) -> Dense {
        let a = (6.0 / (input + output) as f64).sqrt();
        let data = (0..input * output).map(|_| rng.uniform(-a, a)).collect();
        Dense {
            weight: Matrix::from_parts(output, input, data),
            bias: vec![0.0; output],
        }
    }

    fn apply(&self, x: &Matrix) -> Result<Matrix> {
        matmul_bt(x, &self.weight)?.add_row_vector(&self.bias)
    }
}

/// Encoder `φ_m`: ReLU on every layer but the last, identity on the last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Dense>", into = "Vec<Dense>")]
pub struct EncoderParams {
    layers: Vec<Dense>,
}

impl TryFrom<Vec<Dense>> for EncoderParams {
    type Error = Error;

    fn try_from(layers: Vec<Dense>) -> Result<Self> {
        EncoderParams::new(layers)
    }
}

impl From<EncoderParams> for Vec<Dense> {
    fn from(p: EncoderParams) -> Self {
        p.layers
    }
}

impl EncoderParams {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid("encoder needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.rows() {
                return Err(shape(format!(
                    "layer {i}: bias length {} does not match {} outputs",
                    l.bias.len(),
                    l.weight.rows()
                )));
            }
            if l.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::NonFinite("EncoderParams::new"));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].weight.rows() != pair[1].weight.cols() {
                return Err(shape(format!(
                    "layer {i} emits {} features but layer {} expects {}",
                    pair[0].weight.rows(),
                    i + 1,
                    pair[1].weight.cols()
                )));
            }
        }
        Ok(EncoderParams { layers })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(input_dim: usize, hidden: &[usize], output_dim: usize, rng: &mut RngState) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(output_dim);
        let layers = dims.windows(2).map(|w| Dense::glorot(w[0], w[1], rng)).collect();
        EncoderParams { layers }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.rows()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.as_slice().len() + l.bias.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(shape(format!(
                "flat vector of length {} for encoder with {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("EncoderParams::assign_flat"));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let w = l.weight.as_mut_slice();
            w.copy_from_slice(&flat[off..off + w.len()]);
            off += w.len();
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> EncoderParams {
        let layers = self
            .layers
            .iter()
            .map(|l| Dense {
                weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                bias: vec![0.0; l.bias.len()],
            })
            .collect();
        EncoderParams { layers }
    }

    /// Left-multiplies the output layer by `q` (`out × out`), so the encoder
    /// computes `q · φ(x)`.
    pub fn compose_output(&self, q: &Matrix) -> Result<EncoderParams> {
        let mut out = self.clone();
        let last = out.layers.last_mut().unwrap();
        last.weight = matmul(q, &last.weight)?;
        let b = Matrix::from_vec(last.bias.len(), 1, last.bias.clone())?;
        last.bias = matmul(q, &b)?.into_vec();
        Ok(out)
    }
}

/// Per-layer inputs and pre-activations kept for backpropagation.
struct EncoderTrace {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    output: Matrix,
}

fn relu(m: &Matrix) -> Matrix {
    let data = m.as_slice().iter().map(|v| v.max(0.0)).collect();
    Matrix::from_parts(m.rows(), m.cols(), data)
}

fn encode_trace(params: &EncoderParams, x: &Matrix) -> Result<EncoderTrace> {
    if x.cols() != params.input_dim() {
        return Err(shape(format!(
            "encoder expects {} input features, got {}",
            params.input_dim(),
            x.cols()
        )));
    }
    let n = params.layers.len();
    let mut inputs = Vec::with_capacity(n);
    let mut pre = Vec::with_capacity(n);
    let mut h = x.clone();
    for (i, layer) in params.layers.iter().enumerate() {
        let a = layer.apply(&h)?;
        inputs.push(h);
        h = if i + 1 < n { relu(&a) } else { a.clone() };
        pre.push(a);
    }
    Ok(EncoderTrace { inputs, pre, output: h })
}

/// `z = φ(x)` for every row of `x`.
pub fn encode(params: &EncoderParams, x: &Matrix) -> Result<Matrix> {
    encode_trace(params, x).map(|t| t.output)
}

/// Backpropagates `d_out` (gradient w.r.t. the encoder output) into a
/// flattened parameter gradient.
fn encoder_backward(params: &EncoderParams, trace: &EncoderTrace, d_out: &Matrix) -> Result<Vec<f64>> {
    let n = params.layers.len();
    let mut per_layer: Vec<(Matrix, Vec<f64>)> = Vec::with_capacity(n);
    let mut grad = d_out.clone();
    for i in (0..n).rev() {
        if i + 1 < n {
            let mask = trace.pre[i].as_slice();
            let data = grad
                .as_slice()
                .iter()
                .zip(mask)
                .map(|(g, p)| if *p > 0.0 { *g } else { 0.0 })
                .collect();
            grad = Matrix::from_parts(grad.rows(), grad.cols(), data);
        }
        let dw = matmul_at(&grad, &trace.inputs[i])?;
        let db = grad.column_sums();
        if i > 0 {
            let next = matmul(&grad, &params.layers[i].weight)?;
            per_layer.push((dw, db));
            grad = next;
        } else {
            per_layer.push((dw, db));
        }
    }
    per_layer.reverse();
    let mut flat = Vec::with_capacity(params.num_params());
    for (dw, db) in per_layer {
        flat.extend_from_slice(dw.as_slice());
        flat.extend_from_slice(&db);
    }
    Ok(flat)
}

/// Classification head `f = W z + b`. Column block `m` of `W` is `W_m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub fusion: Fusion,
    pub block_dims: [usize; NUM_MODALITIES],
}

impl HeadParams {
    pub fn new(weight: Matrix, bias: Vec<f64>, fusion: Fusion, block_dims: [usize; 2]) -> Result<Self> {
        let d = match fusion {
            Fusion::Concat => block_dims[0] + block_dims[1],
            Fusion::Sum => {
                if block_dims[0] != block_dims[1] {
                    return Err(shape(format!(
                        "sum fusion needs equal representation dims, got {} and {}",
                        block_dims[0], block_dims[1]
                    )));
                }
                block_dims[0]
            }
        };
        if weight.cols() != d || bias.len() != weight.rows() {
            return Err(shape(format!(
                "head weight {}x{} with bias {} does not fit fused dim {d}",
                weight.rows(),
                weight.cols(),
                bias.len()
            )));
        }
        Ok(HeadParams { weight, bias, fusion, block_dims })
    }

    pub fn num_classes(&self) -> usize {
        self.weight.rows()
    }

    fn block_range(&self, m: Modality) -> (usize, usize) {
        match (self.fusion, m) {
            (Fusion::Sum, _) => (0, self.block_dims[0]),
            (Fusion::Concat, Modality::A) => (0, self.block_dims[0]),
            (Fusion::Concat, Modality::V) => (self.block_dims[0], self.block_dims[0] + self.block_dims[1]),
        }
    }

    /// `W_m`; the shared `W` under summation fusion.
    pub fn block(&self, m: Modality) -> Matrix {
        let (s, e) = self.block_range(m);
        self.weight.slice_cols(s, e).expect("block range within head")
    }

    pub fn zeros_like(&self) -> HeadParams {
        HeadParams {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
            fusion: self.fusion,
            block_dims: self.block_dims,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub out_dim_a: usize,
    pub out_dim_v: usize,
    pub fusion: Fusion,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            hidden: vec![32],
            out_dim_a: 16,
            out_dim_v: 16,
            fusion: Fusion::Concat,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.out_dim_a == 0 || self.out_dim_v == 0 || self.hidden.contains(&0) {
            return Err(invalid("layer widths must be positive"));
        }
        if self.fusion == Fusion::Sum && self.out_dim_a != self.out_dim_v {
            return Err(invalid(format!(
                "sum fusion needs out_dim_a == out_dim_v, got {} and {}",
                self.out_dim_a, self.out_dim_v
            )));
        }
        Ok(())
    }

    pub fn out_dim(&self, m: Modality) -> usize {
        match m {
            Modality::A => self.out_dim_a,
            Modality::V => self.out_dim_v,
        }
    }
}

/// Parameters plus optimizer and anchor state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub encoders: [EncoderParams; NUM_MODALITIES],
    pub head: HeadParams,
    pub encoder_velocity: [EncoderParams; NUM_MODALITIES],
    pub head_velocity: HeadParams,
    pub anchors: [EncoderParams; NUM_MODALITIES],
}

impl ModelState {
    pub fn init(arch: &Architecture, input_dims: [usize; 2], num_classes: usize, rng: &mut RngState) -> Result<Self> {
        arch.validate()?;
        if num_classes == 0 || input_dims.contains(&0) {
            return Err(invalid("input dims and class count must be positive"));
        }
        let enc_a = EncoderParams::init(input_dims[0], &arch.hidden, arch.out_dim_a, rng);
        let enc_v = EncoderParams::init(input_dims[1], &arch.hidden, arch.out_dim_v, rng);
        let dims = [arch.out_dim_a, arch.out_dim_v];
        let d = match arch.fusion {
            Fusion::Concat => dims[0] + dims[1],
            Fusion::Sum => dims[0],
        };
        let head_layer = Dense::glorot(d, num_classes, rng);
        let head = HeadParams::new(head_layer.weight, head_layer.bias, arch.fusion, dims)?;
        Ok(ModelState::from_params([enc_a, enc_v], head))
    }

    /// Wraps parameters with zero momentum and anchors at the current weights.
    pub fn from_params(encoders: [EncoderParams; 2], head: HeadParams) -> Self {
        ModelState {
            encoder_velocity: [encoders[0].zeros_like(), encoders[1].zeros_like()],
            head_velocity: head.zeros_like(),
            anchors: encoders.clone(),
            encoders,
            head,
        }
    }

    pub fn encoder(&self, m: Modality) -> &EncoderParams {
        &self.encoders[m.index()]
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }
}

/// Fuses per-modality representations.
pub fn fuse(z_a: &Matrix, z_v: &Matrix, kind: Fusion) -> Result<Matrix> {
    if z_a.rows() != z_v.rows() {
        return Err(shape(format!("fuse: {} rows vs {} rows", z_a.rows(), z_v.rows())));
    }
    match kind {
        Fusion::Concat => {
            let mut data = Vec::with_capacity(z_a.rows() * (z_a.cols() + z_v.cols()));
            for (ra, rv) in z_a.row_iter().zip(z_v.row_iter()) {
                data.extend_from_slice(ra);
                data.extend_from_slice(rv);
            }
            Ok(Matrix::from_parts(z_a.rows(), z_a.cols() + z_v.cols(), data))
        }
        Fusion::Sum => z_a.add(z_v),
    }
}

/// Branch classifier `f_m = W_m z_m + b / M`.
pub fn branch_logits(model: &ModelState, z_m: &Matrix, m: Modality) -> Result<Matrix> {
    let block = model.head.block(m);
    if z_m.cols() != block.cols() {
        return Err(shape(format!(
            "branch {m}: representation has {} columns, head block expects {}",
            z_m.cols(),
            block.cols()
        )));
    }
    let half: Vec<f64> = model.head.bias.iter().map(|b| b / NUM_MODALITIES as f64).collect();
    matmul_bt(z_m, &block)?.add_row_vector(&half)
}

/// Same as [`branch_logits`] with a modality index, rejecting unknown ids.
pub fn branch_logits_by_index(model: &ModelState, z_m: &Matrix, m: usize) -> Result<Matrix> {
    let m = Modality::from_index(m).ok_or_else(|| invalid(format!("unknown modality id {m}")))?;
    branch_logits(model, z_m, m)
}

/// Every intermediate of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub z: [Matrix; NUM_MODALITIES],
    pub fused: Matrix,
    pub logits: Matrix,
    pub probs: Matrix,
    /// Mean joint cross-entropy.
    pub loss: f64,
    pub branch_logits: [Matrix; NUM_MODALITIES],
    pub branch_probs: [Matrix; NUM_MODALITIES],
    /// Mean cross-entropy of each branch classifier.
    pub branch_loss: [f64; NUM_MODALITIES],
}

impl ForwardPass {
    /// Joint loss plus `unimodal_weight` times the summed branch losses.
    pub fn objective(&self, unimodal_weight: f64) -> f64 {
        if unimodal_weight == 0.0 {
            self.loss
        } else {
            self.loss + unimodal_weight * self.branch_loss.iter().sum::<f64>()
        }
    }
}

fn check_labels(labels: &[usize], k: usize, rows: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(shape(format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(y) = labels.iter().find(|&&y| y >= k) {
        return Err(invalid(format!("label {y} out of range for K={k}")));
    }
    Ok(())
}

fn mean_nll(logits: &Matrix, labels: &[usize]) -> f64 {
    let logp = log_softmax_rows(logits);
    let total: f64 = labels.iter().enumerate().map(|(i, &y)| -logp.get(i, y)).sum();
    total / labels.len() as f64
}

struct Traced {
    pass: ForwardPass,
    traces: [EncoderTrace; NUM_MODALITIES],
}

fn forward_traced(model: &ModelState, batch: &Batch) -> Result<Traced> {
    check_labels(&batch.labels, model.num_classes(), batch.xa.rows())?;
    let ta = encode_trace(&model.encoders[0], &batch.xa)?;
    let tv = encode_trace(&model.encoders[1], &batch.xv)?;
    let fused = fuse(&ta.output, &tv.output, model.head.fusion)?;
    let logits = matmul_bt(&fused, &model.head.weight)?.add_row_vector(&model.head.bias)?;
    let probs = softmax_rows(&logits);
    let loss = mean_nll(&logits, &batch.labels);
    let fa = branch_logits(model, &ta.output, Modality::A)?;
    let fv = branch_logits(model, &tv.output, Modality::V)?;
    let branch_loss = [mean_nll(&fa, &batch.labels), mean_nll(&fv, &batch.labels)];
    let branch_probs = [softmax_rows(&fa), softmax_rows(&fv)];
    let pass = ForwardPass {
        z: [ta.output.clone(), tv.output.clone()],
        fused,
        logits,
        probs,
        loss,
        branch_logits: [fa, fv],
        branch_probs,
        branch_loss,
    };
    Ok(Traced { pass, traces: [ta, tv] })
}

/// Forward pass returning every intermediate, with the joint loss.
pub fn forward(model: &ModelState, batch: &Batch) -> Result<ForwardPass> {
    forward_traced(model, batch).map(|t| t.pass)
}

/// Gradients of the training objective for one batch, mean-reduced.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    /// Flattened `∇_{w_m}` per encoder.
    pub encoders: [Vec<f64>; NUM_MODALITIES],
    pub head_weight: Matrix,
    pub head_bias: Vec<f64>,
    pub loss: f64,
    pub norms: [f64; NUM_MODALITIES],
}

impl GradientBundle {
    fn new(encoders: [Vec<f64>; 2], head_weight: Matrix, head_bias: Vec<f64>, loss: f64) -> Self {
        let norms = [norm(&encoders[0]), norm(&encoders[1])];
        GradientBundle { encoders, head_weight, head_bias, loss, norms }
    }

    /// All coordinates in a fixed order: encoder a, encoder v, head W, head b.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = self.encoders[0].clone();
        out.extend_from_slice(&self.encoders[1]);
        out.extend_from_slice(self.head_weight.as_slice());
        out.extend_from_slice(&self.head_bias);
        out
    }
}

/// `(softmax − onehot) · scale`, the cross-entropy logit residual.
fn residual(probs: &Matrix, labels: &[usize], scale: f64) -> Matrix {
    let k = probs.cols();
    let mut data = probs.as_slice().to_vec();
    for (i, &y) in labels.iter().enumerate() {
        data[i * k + y] -= 1.0;
    }
    for v in &mut data {
        *v *= scale;
    }
    Matrix::from_parts(probs.rows(), k, data)
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

/// Forward pass plus analytic gradients of `joint + unimodal_weight · Σ branch`.
pub fn forward_backward(model: &ModelState, batch: &Batch, unimodal_weight: f64) -> Result<(ForwardPass, GradientBundle)> {
    let Traced { pass, traces } = forward_traced(model, batch)?;
    let n = batch.labels.len() as f64;
    let head = &model.head;

    let e = residual(&pass.probs, &batch.labels, 1.0 / n);
    let mut dw = matmul_at(&e, &pass.fused)?;
    let mut db = e.column_sums();
    let dfused = matmul(&e, &head.weight)?;
    let mut dz = match head.fusion {
        Fusion::Concat => {
            let da = head.block_dims[0];
            [dfused.slice_cols(0, da)?, dfused.slice_cols(da, dfused.cols())?]
        }
        Fusion::Sum => [dfused.clone(), dfused],
    };

    if unimodal_weight != 0.0 {
        for m in Modality::ALL {
            let i = m.index();
            let em = residual(&pass.branch_probs[i], &batch.labels, unimodal_weight / n);
            let dwm = matmul_at(&em, &pass.z[i])?;
            let (s, _) = head.block_range(m);
            let cols = head.weight.cols();
            let width = dwm.cols();
            let dst = dw.as_mut_slice();
            for r in 0..dwm.rows() {
                add_into(&mut dst[r * cols + s..r * cols + s + width], dwm.row(r), 1.0);
            }
            add_into(&mut db, &em.column_sums(), 1.0 / NUM_MODALITIES as f64);
            dz[i] = dz[i].add(&matmul(&em, &head.block(m))?)?;
        }
    }

    let ga = encoder_backward(&model.encoders[0], &traces[0], &dz[0])?;
    let gv = encoder_backward(&model.encoders[1], &traces[1], &dz[1])?;
    let loss = pass.objective(unimodal_weight);
    Ok((pass, GradientBundle::new([ga, gv], dw, db, loss)))
}

/// Analytic gradients of the training objective.
pub fn backward(model: &ModelState, batch: &Batch, unimodal_weight: f64) -> Result<GradientBundle> {
    forward_backward(model, batch, unimodal_weight).map(|(_, g)| g)
}

/// Central-difference estimate of every gradient coordinate.
pub fn fd_gradient(model: &ModelState, batch: &Batch, unimodal_weight: f64, h: f64) -> Result<GradientBundle> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let objective = |m: &ModelState| forward(m, batch).map(|p| p.objective(unimodal_weight));
    let central = |plus: &ModelState, minus: &ModelState| -> Result<f64> {
        Ok((objective(plus)? - objective(minus)?) / (2.0 * h))
    };

    let mut enc_grads: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for (m, slot) in enc_grads.iter_mut().enumerate() {
        let base = model.encoders[m].flatten();
        let mut g = Vec::with_capacity(base.len());
        let mut plus = model.clone();
        let mut minus = model.clone();
        for i in 0..base.len() {
            let mut w = base.clone();
            w[i] = base[i] + h;
            plus.encoders[m].assign_flat(&w)?;
            w[i] = base[i] - h;
            minus.encoders[m].assign_flat(&w)?;
            g.push(central(&plus, &minus)?);
        }
        *slot = g;
    }

    let (k, d) = model.head.weight.shape();
    let mut gw = Vec::with_capacity(k * d);
    for i in 0..k * d {
        let mut plus = model.clone();
        let mut minus = model.clone();
        plus.head.weight.as_mut_slice()[i] += h;
        minus.head.weight.as_mut_slice()[i] -= h;
        gw.push(central(&plus, &minus)?);
    }
    let mut gb = Vec::with_capacity(k);
    for i in 0..k {
        let mut plus = model.clone();
        let mut minus = model.clone();
        plus.head.bias[i] += h;
        minus.head.bias[i] -= h;
        gb.push(central(&plus, &minus)?);
    }
    let loss = objective(model)?;
    Ok(GradientBundle::new(enc_grads, Matrix::from_parts(k, d, gw), gb, loss))
}
