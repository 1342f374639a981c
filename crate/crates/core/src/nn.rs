//! Feed-forward networks with hand-written backprop.
//!
//! Parameters live in one flat [`ParamVector`]; every network routine takes
//! the parameter slice explicitly (`*_at` methods) so callers can evaluate
//! copies without touching the model. Batches are processed in fixed chunks
//! of [`CHUNK`] samples, grouped into at most [`GROUPS`] accumulators whose
//! partial sums are added in index order: results are identical for any
//! thread count.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const CHUNK: usize = 128;
pub const GROUPS: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    /// 3×3 kernel, stride 1, zero padding 1; spatial size is preserved.
    Conv2d { in_channels: usize, out_channels: usize, height: usize, width: usize },
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Weight,
    Bias,
}

impl Role {
    pub fn code(self) -> u8 {
        match self {
            Role::Weight => 0,
            Role::Bias => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Role> {
        match code {
            0 => Some(Role::Weight),
            1 => Some(Role::Bias),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub layer: u32,
    pub role: Role,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter vector with its layer map.
///
/// `groups` holds one index range per convolution filter and per dense output
/// neuron (weights only). Every write through [`ParamVector::values_mut`]
/// bumps `version`, which perturbation records use to detect stale restores.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Tensor,
    segments: Vec<Segment>,
    groups: Vec<Range<usize>>,
    version: u64,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, segments: Vec<Segment>, groups: Vec<Range<usize>>) -> Result<Self> {
        let mut cursor = 0;
        for s in &segments {
            if s.offset != cursor {
                return Err(Error::ShapeMismatch(format!(
                    "segment of layer {} starts at {} but previous ended at {cursor}",
                    s.layer, s.offset
                )));
            }
            cursor += s.len();
        }
        if cursor != values.len() {
            return Err(Error::LengthMismatch { expected: cursor, got: values.len() });
        }
        for g in &groups {
            let inside = segments
                .iter()
                .filter(|s| s.role == Role::Weight)
                .any(|s| g.start >= s.offset && g.end <= s.offset + s.len());
            if !inside || g.start >= g.end {
                return Err(Error::ShapeMismatch(format!("group {g:?} is not inside one weight segment")));
            }
        }
        Ok(ParamVector { values: Tensor::from_vec(values), segments, groups, version: 0 })
    }

    /// A bare vector treated as a single weight segment and a single group.
    pub fn flat(values: Vec<f64>) -> Self {
        let m = values.len();
        let groups = if m > 0 { vec![0..m] } else { vec![] };
        ParamVector {
            values: Tensor::from_vec(values),
            segments: vec![Segment { layer: 0, role: Role::Weight, shape: vec![m], offset: 0 }],
            groups,
            version: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        self.values.data()
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        self.values.data_mut()
    }

    pub fn set_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::LengthMismatch { expected: self.len(), got: values.len() });
        }
        self.values_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn filter_groups(&self) -> &[Range<usize>] {
        &self.groups
    }

    pub fn bias_segments(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(|s| s.role == Role::Bias)
    }

    /// Same layout, different values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.len() {
            return Err(Error::LengthMismatch { expected: self.len(), got: values.len() });
        }
        Ok(ParamVector {
            values: Tensor::from_vec(values),
            segments: self.segments.clone(),
            groups: self.groups.clone(),
            version: 0,
        })
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.segments == other.segments && self.groups == other.groups
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// MLP 784–1024–512–10 for 28×28 digits.
    pub fn mnist_mlp() -> Self {
        Self::mlp(&[784, 1024, 512, 10])
    }

    /// MLP 784–256–128–10, small enough for multi-seed sweeps on one core.
    pub fn mnist_mlp_desk() -> Self {
        Self::mlp(&[784, 256, 128, 10])
    }

    pub fn mlp(widths: &[usize]) -> Self {
        assert!(widths.len() >= 2, "mlp needs input and output widths");
        let mut layers = Vec::new();
        for (i, w) in widths.windows(2).enumerate() {
            if i > 0 {
                layers.push(LayerSpec::Relu);
            }
            layers.push(LayerSpec::Dense { inputs: w[0], outputs: w[1] });
        }
        Architecture { input_shape: vec![widths[0]], layers }
    }

    /// Two 3×3 conv layers and a dense head on `channels × side × side` images.
    pub fn conv_small(channels: usize, side: usize, classes: usize) -> Self {
        let (c1, c2) = (4, 8);
        Architecture {
            input_shape: vec![channels, side, side],
            layers: vec![
                LayerSpec::Conv2d { in_channels: channels, out_channels: c1, height: side, width: side },
                LayerSpec::Relu,
                LayerSpec::Conv2d { in_channels: c1, out_channels: c2, height: side, width: side },
                LayerSpec::Relu,
                LayerSpec::Dense { inputs: c2 * side * side, outputs: classes },
            ],
        }
    }

    pub fn preset(name: &str, input_dim: usize, classes: usize) -> Result<Self> {
        match name {
            "mnist-mlp" => Ok(Self::mnist_mlp()),
            "mnist-mlp-desk" => Ok(Self::mnist_mlp_desk()),
            "blobs-mlp" => Ok(Self::mlp(&[input_dim, 32, classes])),
            "conv-small" => {
                let side = (input_dim as f64).sqrt().round() as usize;
                if side * side != input_dim {
                    return Err(Error::InvalidConfig(format!(
                        "conv-small needs square single-channel inputs, got dim {input_dim}"
                    )));
                }
                Ok(Self::conv_small(1, side, classes))
            }
            other => Err(Error::InvalidConfig(format!("unknown model preset `{other}`"))),
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Output shape of every layer; fails if consecutive shapes do not compose.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!("bad input shape {:?}", self.input_shape)));
        }
        let mut cur = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match *layer {
                LayerSpec::Dense { inputs, outputs } => {
                    let n: usize = cur.iter().product();
                    if n != inputs || outputs == 0 {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {i}: dense expects {inputs} inputs, got {n}"
                        )));
                    }
                    vec![outputs]
                }
                LayerSpec::Conv2d { in_channels, out_channels, height, width } => {
                    if cur != [in_channels, height, width] || out_channels == 0 {
                        return Err(Error::ShapeMismatch(format!(
                            "layer {i}: conv expects {:?}, got {cur:?}",
                            [in_channels, height, width]
                        )));
                    }
                    vec![out_channels, height, width]
                }
                LayerSpec::Relu => cur,
            };
            out.push(cur.clone());
        }
        match self.layers.last() {
            Some(LayerSpec::Dense { .. }) => Ok(out),
            _ => Err(Error::ShapeMismatch("the softmax head must follow a dense layer".into())),
        }
    }

    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Dense { outputs, .. }) => *outputs,
            _ => 0,
        }
    }

    /// Segments and filter groups implied by the layer list.
    pub fn layout(&self) -> (Vec<Segment>, Vec<Range<usize>>) {
        let mut segments = Vec::new();
        let mut groups = Vec::new();
        let mut offset = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            let (wshape, nbias, fan) = match *layer {
                LayerSpec::Dense { inputs, outputs } => (vec![outputs, inputs], outputs, inputs),
                LayerSpec::Conv2d { in_channels, out_channels, .. } => {
                    (vec![out_channels, in_channels, 3, 3], out_channels, in_channels * 9)
                }
                LayerSpec::Relu => continue,
            };
            let w = Segment { layer: i as u32, role: Role::Weight, shape: wshape, offset };
            for g in 0..nbias {
                groups.push(offset + g * fan..offset + (g + 1) * fan);
            }
            offset += w.len();
            segments.push(w);
            segments.push(Segment { layer: i as u32, role: Role::Bias, shape: vec![nbias], offset });
            offset += nbias;
        }
        (segments, groups)
    }

    pub fn param_count(&self) -> usize {
        let (segments, _) = self.layout();
        segments.iter().map(Segment::len).sum()
    }
}

/// Inputs `[n, features...]` with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        let n = inputs.shape().first().copied().unwrap_or(0);
        if n == 0 || n != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "batch has {n} inputs and {} labels",
                labels.len()
            )));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Architecture plus parameter layout: everything needed to evaluate the
/// network at an arbitrary parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    arch: Architecture,
    shapes: Vec<Vec<usize>>,
    segments: Vec<Segment>,
    param_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub net: Network,
    pub params: ParamVector,
}

/// Summed (not averaged) statistics over a set of samples.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalSums {
    pub loss_sum: f64,
    pub correct: usize,
    pub count: usize,
}

impl EvalSums {
    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.count as f64
    }

    pub fn accuracy(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.correct as f64 / self.count as f64
        }
    }
}

impl Model {
    /// Fan-in-scaled uniform weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases.
    pub fn new(arch: Architecture, rng: &mut Rng) -> Result<Self> {
        let mut model = Model::zeros(arch)?;
        let segments = model.params.segments().to_vec();
        let values = model.params.values_mut();
        for s in segments.iter().filter(|s| s.role == Role::Weight) {
            let fan_in: usize = s.shape[1..].iter().product();
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut values[s.range()] {
                *v = rng.uniform(-bound, bound);
            }
        }
        Ok(model)
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        let net = Network::new(arch)?;
        let (segments, groups) = net.arch.layout();
        let params = ParamVector::new(vec![0.0; net.param_count], segments, groups)?;
        Ok(Model { net, params })
    }

    pub fn with_params(arch: Architecture, params: ParamVector) -> Result<Self> {
        let net = Network::new(arch)?;
        let (segments, groups) = net.arch.layout();
        if params.segments() != segments.as_slice() || params.filter_groups() != groups.as_slice() {
            return Err(Error::ShapeMismatch("parameter layout does not match architecture".into()));
        }
        Ok(Model { net, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.net.arch
    }

    pub fn classes(&self) -> usize {
        self.net.classes()
    }

    pub fn input_len(&self) -> usize {
        self.net.input_len()
    }

    pub fn loss_at(&self, w: &[f64], inputs: &[f64], labels: &[usize]) -> Result<f64> {
        self.net.loss_at(w, inputs, labels)
    }

    pub fn eval_at(&self, w: &[f64], inputs: &[f64], labels: &[usize]) -> Result<EvalSums> {
        self.net.eval_at(w, inputs, labels)
    }

    pub fn loss_grad_at(&self, w: &[f64], inputs: &[f64], labels: &[usize], grad: &mut [f64]) -> Result<f64> {
        self.net.loss_grad_at(w, inputs, labels, grad)
    }

    pub fn evaluate(&self, inputs: &[f64], labels: &[usize]) -> Result<EvalSums> {
        self.net.eval_at(self.params.values(), inputs, labels)
    }
}

impl Network {
    pub fn new(arch: Architecture) -> Result<Self> {
        let shapes = arch.shapes()?;
        let (segments, _) = arch.layout();
        let param_count = segments.iter().map(Segment::len).sum();
        Ok(Network { arch, shapes, segments, param_count })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn classes(&self) -> usize {
        self.arch.classes()
    }

    pub fn input_len(&self) -> usize {
        self.arch.input_len()
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    fn check_inputs(&self, inputs: &[f64], labels: &[usize]) -> Result<()> {
        let d = self.input_len();
        if labels.is_empty() || inputs.len() != labels.len() * d {
            return Err(Error::ShapeMismatch(format!(
                "{} input values for {} samples of dimension {d}",
                inputs.len(),
                labels.len()
            )));
        }
        let k = self.classes();
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::ShapeMismatch(format!("label {bad} out of range for {k} classes")));
        }
        Ok(())
    }

    fn check_params(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.param_count {
            return Err(Error::LengthMismatch { expected: self.param_count, got: w.len() });
        }
        Ok(())
    }

    /// Mean cross-entropy at parameters `w`.
    pub fn loss_at(&self, w: &[f64], inputs: &[f64], labels: &[usize]) -> Result<f64> {
        Ok(self.eval_at(w, inputs, labels)?.mean_loss())
    }

    /// Loss and accuracy sums at parameters `w`.
    pub fn eval_at(&self, w: &[f64], inputs: &[f64], labels: &[usize]) -> Result<EvalSums> {
        self.check_params(w)?;
        self.check_inputs(inputs, labels)?;
        let d = self.input_len();
        let n = labels.len();
        let chunks = n.div_ceil(CHUNK);
        let parts = par::map_indexed(chunks, |c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let acts = self.forward_chunk(w, &inputs[lo * d..hi * d], hi - lo);
            let logits = acts.last().expect("at least one layer");
            head_sums(logits, &labels[lo..hi], self.classes())
        });
        let mut total = EvalSums::default();
        for p in parts {
            total.loss_sum += p.loss_sum;
            total.correct += p.correct;
            total.count += p.count;
        }
        Ok(total)
    }

    /// Mean loss and its gradient at `w`; the gradient is written to `grad`.
    pub fn loss_grad_at(&self, w: &[f64], inputs: &[f64], labels: &[usize], grad: &mut [f64]) -> Result<f64> {
        self.check_params(w)?;
        self.check_inputs(inputs, labels)?;
        if grad.len() != w.len() {
            return Err(Error::LengthMismatch { expected: w.len(), got: grad.len() });
        }
        let d = self.input_len();
        let n = labels.len();
        let chunks = n.div_ceil(CHUNK);
        let groups = chunks.min(GROUPS);
        let per_group = chunks.div_ceil(groups);
        let m = w.len();
        let parts = par::map_indexed(groups, |g| {
            let mut acc = vec![0.0; m];
            let mut loss = 0.0;
            for c in g * per_group..((g + 1) * per_group).min(chunks) {
                let lo = c * CHUNK;
                let hi = (lo + CHUNK).min(n);
                loss += self.backward_chunk(w, &inputs[lo * d..hi * d], &labels[lo..hi], &mut acc);
            }
            (loss, acc)
        });
        let mut loss_sum = 0.0;
        grad.fill(0.0);
        for (l, acc) in parts {
            loss_sum += l;
            for (g, a) in grad.iter_mut().zip(&acc) {
                *g += a;
            }
        }
        let scale = n as f64;
        for g in grad.iter_mut() {
            *g /= scale;
        }
        Ok(loss_sum / scale)
    }

    /// Activations after every layer for a chunk of `b` samples.
    fn forward_chunk(&self, w: &[f64], x: &[f64], b: usize) -> Vec<Vec<f64>> {
        let segments = &self.segments;
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.arch.layers.len());
        let mut seg = 0;
        for (i, layer) in self.arch.layers.iter().enumerate() {
            let input: &[f64] = if i == 0 { x } else { &acts[i - 1] };
            let out = match *layer {
                LayerSpec::Dense { inputs, outputs } => {
                    let (wr, br) = (segments[seg].range(), segments[seg + 1].range());
                    seg += 2;
                    dense_forward(input, &w[wr], &w[br], b, inputs, outputs)
                }
                LayerSpec::Conv2d { in_channels, out_channels, height, width } => {
                    let (wr, br) = (segments[seg].range(), segments[seg + 1].range());
                    seg += 2;
                    conv_forward(input, &w[wr], &w[br], b, in_channels, out_channels, height, width)
                }
                LayerSpec::Relu => input.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            };
            acts.push(out);
        }
        acts
    }

    /// Adds the gradient of the summed chunk loss into `acc`; returns the summed loss.
    fn backward_chunk(&self, w: &[f64], x: &[f64], labels: &[usize], acc: &mut [f64]) -> f64 {
        let b = labels.len();
        let acts = self.forward_chunk(w, x, b);
        let k = self.classes();
        let logits = acts.last().expect("at least one layer");
        let mut delta = vec![0.0; b * k];
        let mut loss = 0.0;
        for s in 0..b {
            let z = &logits[s * k..(s + 1) * k];
            let (l, _) = xent(z, labels[s]);
            loss += l;
            softmax_minus_onehot(z, labels[s], &mut delta[s * k..(s + 1) * k]);
        }
        let segments = &self.segments;
        let mut seg = segments.len();
        for i in (0..self.arch.layers.len()).rev() {
            let input: &[f64] = if i == 0 { x } else { &acts[i - 1] };
            delta = match self.arch.layers[i] {
                LayerSpec::Dense { inputs, outputs } => {
                    seg -= 2;
                    let (wr, br) = (segments[seg].range(), segments[seg + 1].range());
                    let (gw, gb) = split_pair(acc, wr.clone(), br);
                    dense_backward(input, &w[wr], &delta, b, inputs, outputs, gw, gb, i > 0)
                }
                LayerSpec::Conv2d { in_channels, out_channels, height, width } => {
                    seg -= 2;
                    let (wr, br) = (segments[seg].range(), segments[seg + 1].range());
                    let (gw, gb) = split_pair(acc, wr.clone(), br);
                    conv_backward(input, &w[wr], &delta, b, in_channels, out_channels, height, width, gw, gb, i > 0)
                }
                LayerSpec::Relu => {
                    let out = &acts[i];
                    delta.iter().zip(out).map(|(&d, &o)| if o > 0.0 { d } else { 0.0 }).collect()
                }
            };
        }
        loss
    }
}

fn split_pair(acc: &mut [f64], w: Range<usize>, b: Range<usize>) -> (&mut [f64], &mut [f64]) {
    debug_assert_eq!(w.end, b.start);
    let (head, tail) = acc.split_at_mut(b.start);
    (&mut head[w], &mut tail[..b.end - b.start])
}

/// Cross-entropy of logits `z` for class `y` with max subtraction; also the argmax.
fn xent(z: &[f64], y: usize) -> (f64, usize) {
    let mut best = 0;
    for j in 1..z.len() {
        if z[j] > z[best] {
            best = j;
        }
    }
    let max = z[best];
    let sum: f64 = z.iter().map(|&v| (v - max).exp()).sum();
    (max + sum.ln() - z[y], best)
}

fn softmax_minus_onehot(z: &[f64], y: usize, out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    out[y] -= 1.0;
}

fn head_sums(logits: &[f64], labels: &[usize], k: usize) -> EvalSums {
    let mut sums = EvalSums { count: labels.len(), ..Default::default() };
    for (s, &y) in labels.iter().enumerate() {
        let (l, pred) = xent(&logits[s * k..(s + 1) * k], y);
        sums.loss_sum += l;
        sums.correct += usize::from(pred == y);
    }
    sums
}

/// `c = alpha * a·b + beta * c` on strided row-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + n - 1 < c.len());
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

fn dense_forward(x: &[f64], w: &[f64], bias: &[f64], b: usize, inputs: usize, outputs: usize) -> Vec<f64> {
    let mut y = vec![0.0; b * outputs];
    for row in y.chunks_exact_mut(outputs) {
        row.copy_from_slice(bias);
    }
    // y[b, out] += x[b, in] · wᵀ  (w is [out, in])
    gemm(b, inputs, outputs, x, (inputs, 1), w, (1, inputs), 1.0, &mut y, outputs);
    y
}

#[allow(clippy::too_many_arguments)]
fn dense_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    b: usize,
    inputs: usize,
    outputs: usize,
    gw: &mut [f64],
    gb: &mut [f64],
    need_dx: bool,
) -> Vec<f64> {
    // gw[out, in] += dyᵀ · x
    gemm(outputs, b, inputs, dy, (1, outputs), x, (inputs, 1), 1.0, gw, inputs);
    for row in dy.chunks_exact(outputs) {
        for (g, d) in gb.iter_mut().zip(row) {
            *g += d;
        }
    }
    if !need_dx {
        return Vec::new();
    }
    let mut dx = vec![0.0; b * inputs];
    gemm(b, outputs, inputs, dy, (outputs, 1), w, (inputs, 1), 0.0, &mut dx, inputs);
    dx
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, col: &mut [f64]) {
    let hw = h * w;
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(ch * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        row[y * w + xx] = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            x[ch * hw + sy as usize * w + sx as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(col: &[f64], c: usize, h: usize, w: usize, dx: &mut [f64]) {
    let hw = h * w;
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(ch * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            dx[ch * hw + sy as usize * w + sx as usize] += row[y * w + xx];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    b: usize,
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
) -> Vec<f64> {
    let hw = h * wd;
    let kk = cin * 9;
    let mut out = vec![0.0; b * cout * hw];
    let mut col = vec![0.0; kk * hw];
    for s in 0..b {
        im2col(&x[s * cin * hw..(s + 1) * cin * hw], cin, h, wd, &mut col);
        let o = &mut out[s * cout * hw..(s + 1) * cout * hw];
        for (f, row) in o.chunks_exact_mut(hw).enumerate() {
            row.fill(bias[f]);
        }
        gemm(cout, kk, hw, w, (kk, 1), &col, (hw, 1), 1.0, o, hw);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    b: usize,
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
    gw: &mut [f64],
    gb: &mut [f64],
    need_dx: bool,
) -> Vec<f64> {
    let hw = h * wd;
    let kk = cin * 9;
    let mut col = vec![0.0; kk * hw];
    let mut dcol = vec![0.0; kk * hw];
    let mut dx = if need_dx { vec![0.0; b * cin * hw] } else { Vec::new() };
    for s in 0..b {
        let d = &dy[s * cout * hw..(s + 1) * cout * hw];
        im2col(&x[s * cin * hw..(s + 1) * cin * hw], cin, h, wd, &mut col);
        // gw[cout, kk] += d[cout, hw] · colᵀ
        gemm(cout, hw, kk, d, (hw, 1), &col, (1, hw), 1.0, gw, kk);
        for (f, row) in d.chunks_exact(hw).enumerate() {
            gb[f] += row.iter().sum::<f64>();
        }
        if need_dx {
            // dcol[kk, hw] = wᵀ · d
            gemm(kk, cout, hw, w, (1, kk), d, (hw, 1), 0.0, &mut dcol, hw);
            col2im_add(&dcol, cin, h, wd, &mut dx[s * cin * hw..(s + 1) * cin * hw]);
        }
    }
    dx
}

/// Mean softmax cross-entropy of `model` on `batch`.
pub fn forward_loss(model: &Model, batch: &Batch) -> Result<f64> {
    model.loss_at(model.params.values(), batch.inputs.data(), &batch.labels)
}

/// Loss and gradient of [`forward_loss`] at the model's parameters.
pub fn backward(model: &Model, batch: &Batch) -> Result<(f64, Tensor)> {
    let mut grad = vec![0.0; model.params.len()];
    let loss = model.loss_grad_at(model.params.values(), batch.inputs.data(), &batch.labels, &mut grad)?;
    Ok((loss, Tensor::from_vec(grad)))
}

/// Fraction of argmax predictions equal to the label (ties go to the lowest class).
pub fn accuracy(model: &Model, inputs: &[f64], labels: &[usize]) -> Result<f64> {
    Ok(model.evaluate(inputs, labels)?.accuracy())
}
