use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::loss::{softmax, sparse_softmax_cross_entropy};
use super::{Activation, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Zero padding that keeps the spatial size; for even kernels the extra
    /// row/column goes after the input.
    Same,
    Valid,
}

/// One layer of a [`NetworkSpec`]. All windows move with stride 1x1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        filters: usize,
        kernel: (usize, usize),
        padding: Padding,
        activation: Activation,
    },
    MaxPool {
        kernel: (usize, usize),
    },
    /// Convolution with unshared weights per output position (valid padding).
    LocallyConnected {
        filters: usize,
        kernel: (usize, usize),
        activation: Activation,
    },
    Dense {
        units: usize,
        activation: Activation,
    },
    Dropout {
        rate: f64,
    },
    /// Linear logits; softmax is applied by the loss and by prediction.
    Output {
        classes: usize,
    },
}

impl LayerSpec {
    fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::MaxPool { .. } => "max_pool",
            LayerSpec::LocallyConnected { .. } => "locally_connected",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Output { .. } => "output",
        }
    }
}

/// Activation shape between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Spatial {
        channels: usize,
        height: usize,
        width: usize,
    },
    Flat(usize),
}

impl Shape {
    pub fn size(&self) -> usize {
        match *self {
            Shape::Spatial {
                channels,
                height,
                width,
            } => channels * height * width,
            Shape::Flat(n) => n,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Spatial {
                channels,
                height,
                width,
            } => write!(f, "{channels}x{height}x{width}"),
            Shape::Flat(n) => write!(f, "{n}"),
        }
    }
}

/// Single-channel `input` image followed by an ordered layer stack ending in
/// exactly one [`LayerSpec::Output`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: (usize, usize),
    pub layers: Vec<LayerSpec>,
}

fn layer_error(index: usize, layer: &LayerSpec, message: impl fmt::Display) -> Error {
    Error::Shape(format!("layer {index} ({}): {message}", layer.kind()))
}

fn spatial(shape: Shape, index: usize, layer: &LayerSpec) -> Result<(usize, usize, usize)> {
    match shape {
        Shape::Spatial {
            channels,
            height,
            width,
        } => Ok((channels, height, width)),
        Shape::Flat(_) => Err(layer_error(index, layer, "needs a spatial input")),
    }
}

impl NetworkSpec {
    /// Output shape of every layer, checking compatibility along the way.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let (h, w) = self.input;
        if h == 0 || w == 0 {
            return Err(Error::Shape(format!("input {h}x{w} is empty")));
        }
        let mut shape = Shape::Spatial {
            channels: 1,
            height: h,
            width: w,
        };
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            if i + 1 < self.layers.len() && matches!(layer, LayerSpec::Output { .. }) {
                return Err(layer_error(i, layer, "output must be the last layer"));
            }
            shape = match *layer {
                LayerSpec::Conv {
                    filters,
                    kernel: (kh, kw),
                    padding,
                    ..
                } => {
                    let (_, h, w) = spatial(shape, i, layer)?;
                    if filters == 0 || kh == 0 || kw == 0 {
                        return Err(layer_error(i, layer, "filters and kernel must be positive"));
                    }
                    let (height, width) = match padding {
                        Padding::Same => (h, w),
                        Padding::Valid if kh <= h && kw <= w => (h - kh + 1, w - kw + 1),
                        Padding::Valid => {
                            return Err(layer_error(
                                i,
                                layer,
                                format!("kernel {kh}x{kw} exceeds input {h}x{w}"),
                            ))
                        }
                    };
                    Shape::Spatial {
                        channels: filters,
                        height,
                        width,
                    }
                }
                LayerSpec::MaxPool { kernel: (kh, kw) }
                | LayerSpec::LocallyConnected {
                    kernel: (kh, kw), ..
                } => {
                    let (c, h, w) = spatial(shape, i, layer)?;
                    if kh == 0 || kw == 0 || kh > h || kw > w {
                        return Err(layer_error(
                            i,
                            layer,
                            format!("kernel {kh}x{kw} does not fit input {h}x{w}"),
                        ));
                    }
                    let channels = match *layer {
                        LayerSpec::LocallyConnected { filters: 0, .. } => {
                            return Err(layer_error(i, layer, "filters must be positive"))
                        }
                        LayerSpec::LocallyConnected { filters, .. } => filters,
                        _ => c,
                    };
                    Shape::Spatial {
                        channels,
                        height: h - kh + 1,
                        width: w - kw + 1,
                    }
                }
                LayerSpec::Dense { units, .. } => {
                    if units == 0 {
                        return Err(layer_error(i, layer, "units must be positive"));
                    }
                    Shape::Flat(units)
                }
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(layer_error(i, layer, format!("rate {rate} not in [0, 1)")));
                    }
                    shape
                }
                LayerSpec::Output { classes } => {
                    if classes < 2 {
                        return Err(layer_error(i, layer, "at least two classes are required"));
                    }
                    Shape::Flat(classes)
                }
            };
            shapes.push(shape);
        }
        match self.layers.last() {
            Some(LayerSpec::Output { .. }) => Ok(shapes),
            _ => Err(Error::Shape("network must end with an output layer".into())),
        }
    }

    pub fn class_count(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Output { classes }) => *classes,
            _ => 0,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input.0 * self.input.1
    }

    /// Shapes of every layer's parameter tensors.
    pub fn parameter_shapes(&self) -> Result<Vec<Vec<Vec<usize>>>> {
        let shapes = self.shapes()?;
        let (h, w) = self.input;
        let mut previous = Shape::Spatial {
            channels: 1,
            height: h,
            width: w,
        };
        let mut out = Vec::with_capacity(self.layers.len());
        for (layer, &shape) in self.layers.iter().zip(&shapes) {
            let tensors = match *layer {
                LayerSpec::Conv {
                    filters,
                    kernel: (kh, kw),
                    ..
                } => {
                    let Shape::Spatial { channels, .. } = previous else {
                        unreachable!("validated")
                    };
                    vec![vec![filters, channels, kh, kw], vec![filters]]
                }
                LayerSpec::LocallyConnected {
                    filters,
                    kernel: (kh, kw),
                    ..
                } => {
                    let Shape::Spatial { channels, .. } = previous else {
                        unreachable!("validated")
                    };
                    let Shape::Spatial { height, width, .. } = shape else {
                        unreachable!("validated")
                    };
                    vec![
                        vec![height, width, filters, channels, kh, kw],
                        vec![height, width, filters],
                    ]
                }
                LayerSpec::Dense { units, .. } => vec![vec![units, previous.size()], vec![units]],
                LayerSpec::Output { classes } => {
                    vec![vec![classes, previous.size()], vec![classes]]
                }
                LayerSpec::MaxPool { .. } | LayerSpec::Dropout { .. } => Vec::new(),
            };
            out.push(tensors);
            previous = shape;
        }
        Ok(out)
    }
}

/// Parameter tensors, grouped by layer (weights then bias).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Params<T> {
    pub layers: Vec<Vec<Tensor<T>>>,
}

impl<T: Real> Params<T> {
    pub fn zeros(spec: &NetworkSpec) -> Result<Self> {
        Ok(Params {
            layers: spec
                .parameter_shapes()?
                .iter()
                .map(|layer| layer.iter().map(|s| Tensor::zeros(s)).collect())
                .collect(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Params {
            layers: self
                .layers
                .iter()
                .map(|l| l.iter().map(Tensor::zeros_like).collect())
                .collect(),
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers.iter().flatten()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.layers.iter_mut().flatten()
    }

    pub fn count(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().all(Tensor::all_finite)
    }

    /// Fails unless the tensors have exactly the shapes `spec` requires.
    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        let expected = spec.parameter_shapes()?;
        if expected.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "parameters cover {} layers, network has {}",
                self.layers.len(),
                expected.len()
            )));
        }
        for (i, (want, have)) in expected.iter().zip(&self.layers).enumerate() {
            let have: Vec<&[usize]> = have.iter().map(Tensor::shape).collect();
            if have.len() != want.len() || have.iter().zip(want).any(|(h, w)| *h != w.as_slice()) {
                return Err(layer_error(
                    i,
                    &spec.layers[i],
                    format!("parameter shapes {have:?}, expected {want:?}"),
                ));
            }
        }
        Ok(())
    }

    fn scale(&mut self, factor: T) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v * factor);
        }
    }
}

/// Truncated-normal weights (resampled beyond two standard deviations) and
/// constant biases.
pub fn initialize<T: Real>(spec: &NetworkSpec, weight_std: f64, bias: f64, seed: u64) -> Result<Params<T>> {
    let mut params = Params::zeros(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in params.layers.iter_mut() {
        for (k, tensor) in layer.iter_mut().enumerate() {
            for v in tensor.data_mut() {
                *v = if k == 0 {
                    let z = loop {
                        let z: f64 = rng.sample(StandardNormal);
                        if z.abs() <= 2.0 {
                            break z;
                        }
                    };
                    T::of(z * weight_std)
                } else {
                    T::of(bias)
                };
            }
        }
    }
    Ok(params)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

enum Cache<T> {
    Conv { rows: Vec<T>, input_len: usize, pre: Vec<T> },
    Pool { argmax: Vec<usize>, input_len: usize },
    Local { rows: Vec<T>, input_len: usize, pre: Vec<T> },
    Dense { input: Vec<T>, pre: Vec<T> },
    Dropout { mask: Option<Vec<T>> },
    Output { input: Vec<T> },
}

/// `sum a_i b_i` with eight interleaved accumulators so the loop vectorizes;
/// the reduction order is fixed, so results stay deterministic.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] = acc[i] + x[i] * y[i];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`.
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (d, &s) in y.iter_mut().zip(x) {
        *d = *d + alpha * s;
    }
}

/// Receptive-field layout shared by convolution and locally connected layers:
/// one row per output position, each row ordered `(channel, ky, kx)` with zeros
/// where the window leaves the input.
struct Patches {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
    pad_top: usize,
    pad_left: usize,
}

impl Patches {
    fn row_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Calls `visit(row_offset, input_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut visit: impl FnMut(usize, usize)) {
        let (h, w) = (self.height, self.width);
        let row_len = self.row_len();
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = (oy * self.out_w + ox) * row_len;
                for c in 0..self.channels {
                    for ky in 0..self.kh {
                        let Some(y) = (oy + ky).checked_sub(self.pad_top).filter(|&y| y < h) else {
                            continue;
                        };
                        let base = row + (c * self.kh + ky) * self.kw;
                        for kx in 0..self.kw {
                            if let Some(x) = (ox + kx).checked_sub(self.pad_left).filter(|&x| x < w) {
                                visit(base + kx, (c * h + y) * w + x);
                            }
                        }
                    }
                }
            }
        }
    }

    fn gather<T: Real>(&self, input: &[T]) -> Vec<T> {
        let mut rows = vec![T::zero(); self.positions() * self.row_len()];
        self.for_each_tap(|r, i| rows[r] = input[i]);
        rows
    }

    fn scatter<T: Real>(&self, d_rows: &[T], input_len: usize) -> Vec<T> {
        let mut d_input = vec![T::zero(); input_len];
        self.for_each_tap(|r, i| d_input[i] = d_input[i] + d_rows[r]);
        d_input
    }
}

struct ConvGeometry {
    patches: Patches,
    filters: usize,
}

impl ConvGeometry {
    fn new(input: Shape, output: Shape, kernel: (usize, usize), padding: Padding) -> Self {
        let (Shape::Spatial {
            channels,
            height,
            width,
        }, Shape::Spatial {
            channels: filters,
            height: out_h,
            width: out_w,
        }) = (input, output)
        else {
            unreachable!("validated")
        };
        let (kh, kw) = kernel;
        let (pad_top, pad_left) = match padding {
            Padding::Same => ((kh - 1) / 2, (kw - 1) / 2),
            Padding::Valid => (0, 0),
        };
        ConvGeometry {
            patches: Patches {
                channels,
                height,
                width,
                kh,
                kw,
                out_h,
                out_w,
                pad_top,
                pad_left,
            },
            filters,
        }
    }

    /// Pre-activations and the gathered patches backward needs.
    fn forward<T: Real>(&self, input: &[T], weights: &[T], bias: &[T]) -> (Vec<T>, Vec<T>) {
        let rows = self.patches.gather(input);
        let (len, positions) = (self.patches.row_len(), self.patches.positions());
        let mut out = vec![T::zero(); self.filters * positions];
        for (f, block) in out.chunks_exact_mut(positions).enumerate() {
            let kernel = &weights[f * len..(f + 1) * len];
            for (v, row) in block.iter_mut().zip(rows.chunks_exact(len)) {
                *v = bias[f] + dot(kernel, row);
            }
        }
        (out, rows)
    }

    /// Accumulates weight/bias gradients; returns the input gradient when asked.
    fn backward<T: Real>(
        &self,
        rows: &[T],
        input_len: usize,
        weights: &[T],
        d_pre: &[T],
        d_weights: &mut [T],
        d_bias: &mut [T],
        want_input: bool,
    ) -> Option<Vec<T>> {
        let (len, positions) = (self.patches.row_len(), self.patches.positions());
        let mut d_rows = want_input.then(|| vec![T::zero(); rows.len()]);
        for (f, block) in d_pre.chunks_exact(positions).enumerate() {
            d_bias[f] = d_bias[f] + block.iter().copied().sum();
            let kernel = &weights[f * len..(f + 1) * len];
            let d_kernel = &mut d_weights[f * len..(f + 1) * len];
            for (pos, &g) in block.iter().enumerate() {
                axpy(g, &rows[pos * len..(pos + 1) * len], d_kernel);
                if let Some(d) = d_rows.as_mut() {
                    axpy(g, kernel, &mut d[pos * len..(pos + 1) * len]);
                }
            }
        }
        d_rows.map(|d| self.patches.scatter(&d, input_len))
    }
}

struct LocalGeometry {
    patches: Patches,
    filters: usize,
}

impl LocalGeometry {
    fn new(input: Shape, output: Shape, kernel: (usize, usize)) -> Self {
        let (Shape::Spatial {
            channels,
            height,
            width,
        }, Shape::Spatial {
            channels: filters,
            height: out_h,
            width: out_w,
        }) = (input, output)
        else {
            unreachable!("validated")
        };
        LocalGeometry {
            patches: Patches {
                channels,
                height,
                width,
                kh: kernel.0,
                kw: kernel.1,
                out_h,
                out_w,
                pad_top: 0,
                pad_left: 0,
            },
            filters,
        }
    }

    // weights are laid out [position][filter][patch row]
    fn forward<T: Real>(&self, input: &[T], weights: &[T], bias: &[T]) -> (Vec<T>, Vec<T>) {
        let rows = self.patches.gather(input);
        let (len, positions) = (self.patches.row_len(), self.patches.positions());
        let mut out = vec![T::zero(); self.filters * positions];
        for (pos, row) in rows.chunks_exact(len).enumerate() {
            for f in 0..self.filters {
                let unit = pos * self.filters + f;
                out[f * positions + pos] = bias[unit] + dot(&weights[unit * len..(unit + 1) * len], row);
            }
        }
        (out, rows)
    }

    fn backward<T: Real>(
        &self,
        rows: &[T],
        input_len: usize,
        weights: &[T],
        d_pre: &[T],
        d_weights: &mut [T],
        d_bias: &mut [T],
        want_input: bool,
    ) -> Option<Vec<T>> {
        let (len, positions) = (self.patches.row_len(), self.patches.positions());
        let mut d_rows = want_input.then(|| vec![T::zero(); rows.len()]);
        for (pos, row) in rows.chunks_exact(len).enumerate() {
            for f in 0..self.filters {
                let g = d_pre[f * positions + pos];
                let unit = pos * self.filters + f;
                d_bias[unit] = d_bias[unit] + g;
                axpy(g, row, &mut d_weights[unit * len..(unit + 1) * len]);
                if let Some(d) = d_rows.as_mut() {
                    axpy(g, &weights[unit * len..(unit + 1) * len], &mut d[pos * len..(pos + 1) * len]);
                }
            }
        }
        d_rows.map(|d| self.patches.scatter(&d, input_len))
    }
}

fn max_pool<T: Real>(input: &[T], shape: Shape, kernel: (usize, usize)) -> (Vec<T>, Vec<usize>) {
    let Shape::Spatial {
        channels,
        height,
        width,
    } = shape
    else {
        unreachable!("validated")
    };
    let (kh, kw) = kernel;
    let (oh, ow) = (height - kh + 1, width - kw + 1);
    let mut out = Vec::with_capacity(channels * oh * ow);
    let mut argmax = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        for y in 0..oh {
            for x in 0..ow {
                let mut best = c * height * width + y * width + x;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let i = c * height * width + (y + ky) * width + x + kx;
                        if input[i] > input[best] {
                            best = i;
                        }
                    }
                }
                out.push(input[best]);
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}

fn affine<T: Real>(input: &[T], weights: &[T], bias: &[T]) -> Vec<T> {
    let n = input.len();
    bias.iter()
        .enumerate()
        .map(|(u, &b)| b + dot(&weights[u * n..(u + 1) * n], input))
        .collect()
}

fn affine_backward<T: Real>(
    input: &[T],
    weights: &[T],
    d_out: &[T],
    d_weights: &mut [T],
    d_bias: &mut [T],
    want_input: bool,
) -> Option<Vec<T>> {
    let n = input.len();
    let mut d_input = want_input.then(|| vec![T::zero(); n]);
    for (u, &g) in d_out.iter().enumerate() {
        d_bias[u] = d_bias[u] + g;
        axpy(g, input, &mut d_weights[u * n..(u + 1) * n]);
        if let Some(d_in) = d_input.as_mut() {
            axpy(g, &weights[u * n..(u + 1) * n], d_in);
        }
    }
    d_input
}

fn activate<T: Real>(pre: &[T], activation: Activation) -> Vec<T> {
    if activation == Activation::Linear {
        return pre.to_vec();
    }
    pre.iter().map(|&z| activation.apply(z)).collect()
}

fn through_activation<T: Real>(d_out: Vec<T>, pre: &[T], activation: Activation) -> Vec<T> {
    if activation == Activation::Linear {
        return d_out;
    }
    d_out
        .into_iter()
        .zip(pre)
        .map(|(g, &z)| g * activation.derivative(z))
        .collect()
}

struct Evaluation<T> {
    logits: Vec<T>,
    caches: Vec<Cache<T>>,
}

/// Runs one example through the network, keeping the caches backward needs
/// when `record` is set.
fn run_example<T: Real, R: Rng + ?Sized>(
    spec: &NetworkSpec,
    shapes: &[Shape],
    params: &Params<T>,
    input: &[T],
    mode: Mode,
    rng: &mut R,
    record: bool,
) -> Evaluation<T> {
    let (h, w) = spec.input;
    let mut shape = Shape::Spatial {
        channels: 1,
        height: h,
        width: w,
    };
    let mut x = input.to_vec();
    let mut caches = Vec::with_capacity(if record { spec.layers.len() } else { 0 });
    for ((layer, &out_shape), p) in spec.layers.iter().zip(shapes).zip(&params.layers) {
        let (next, cache) = match *layer {
            LayerSpec::Conv {
                kernel,
                padding,
                activation,
                ..
            } => {
                let geometry = ConvGeometry::new(shape, out_shape, kernel, padding);
                let (pre, rows) = geometry.forward(&x, p[0].data(), p[1].data());
                let out = activate(&pre, activation);
                let input_len = x.len();
                (out, record.then_some(Cache::Conv { rows, input_len, pre }))
            }
            LayerSpec::MaxPool { kernel } => {
                let (out, argmax) = max_pool(&x, shape, kernel);
                let input_len = x.len();
                (out, record.then_some(Cache::Pool { argmax, input_len }))
            }
            LayerSpec::LocallyConnected {
                kernel, activation, ..
            } => {
                let geometry = LocalGeometry::new(shape, out_shape, kernel);
                let (pre, rows) = geometry.forward(&x, p[0].data(), p[1].data());
                let out = activate(&pre, activation);
                let input_len = x.len();
                (out, record.then_some(Cache::Local { rows, input_len, pre }))
            }
            LayerSpec::Dense { activation, .. } => {
                let pre = affine(&x, p[0].data(), p[1].data());
                let out = activate(&pre, activation);
                (out, record.then_some(Cache::Dense { input: x, pre }))
            }
            LayerSpec::Dropout { rate } => {
                if mode == Mode::Train && rate > 0.0 {
                    // inverted dropout: survivors are scaled so inference is the identity
                    let keep = T::of(1.0 / (1.0 - rate));
                    let mask: Vec<T> = (0..x.len())
                        .map(|_| {
                            if rng.random::<f64>() < rate {
                                T::zero()
                            } else {
                                keep
                            }
                        })
                        .collect();
                    let out = x.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
                    (out, record.then_some(Cache::Dropout { mask: Some(mask) }))
                } else {
                    (x, record.then_some(Cache::Dropout { mask: None }))
                }
            }
            LayerSpec::Output { .. } => {
                let out = affine(&x, p[0].data(), p[1].data());
                (out, record.then_some(Cache::Output { input: x }))
            }
        };
        if let Some(cache) = cache {
            caches.push(cache);
        }
        x = next;
        shape = out_shape;
    }
    Evaluation { logits: x, caches }
}

fn check_inputs<T: Real>(spec: &NetworkSpec, params: &Params<T>, inputs: &[Vec<T>]) -> Result<Vec<Shape>> {
    let shapes = spec.shapes()?;
    params.check(spec)?;
    let expected = spec.input_len();
    if let Some((i, bad)) = inputs.iter().enumerate().find(|(_, x)| x.len() != expected) {
        return Err(Error::Shape(format!(
            "input {i} has {} values, the input layer expects {}x{} = {expected}",
            bad.len(),
            spec.input.0,
            spec.input.1
        )));
    }
    Ok(shapes)
}

/// Logits for each input. `rng` drives dropout in train mode only.
pub fn forward_logits<T: Real, R: Rng + ?Sized>(
    spec: &NetworkSpec,
    params: &Params<T>,
    inputs: &[Vec<T>],
    mode: Mode,
    rng: &mut R,
) -> Result<Vec<Vec<T>>> {
    let shapes = check_inputs(spec, params, inputs)?;
    Ok(inputs
        .iter()
        .map(|x| run_example(spec, &shapes, params, x, mode, rng, false).logits)
        .collect())
}

/// Class-probability vectors for each input.
pub fn forward<T: Real, R: Rng + ?Sized>(
    spec: &NetworkSpec,
    params: &Params<T>,
    inputs: &[Vec<T>],
    mode: Mode,
    rng: &mut R,
) -> Result<Vec<Vec<T>>> {
    Ok(forward_logits(spec, params, inputs, mode, rng)?
        .iter()
        .map(|z| softmax(z))
        .collect())
}

/// Mean cross-entropy loss over the batch and its gradient with respect to
/// every parameter. Each example's dropout mask is drawn once and reused by
/// its backward pass.
pub fn backward<T: Real, R: Rng + ?Sized>(
    spec: &NetworkSpec,
    params: &Params<T>,
    inputs: &[Vec<T>],
    labels: &[usize],
    rng: &mut R,
) -> Result<(T, Params<T>)> {
    if inputs.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} inputs but {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    if inputs.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let shapes = check_inputs(spec, params, inputs)?;
    let mut grads = params.zeros_like();
    let mut total_loss = T::zero();
    for (input, &label) in inputs.iter().zip(labels) {
        let Evaluation { logits, caches } =
            run_example(spec, &shapes, params, input, Mode::Train, rng, true);
        let (loss, d_logits) = sparse_softmax_cross_entropy(&logits, label)?;
        total_loss = total_loss + loss;
        backpropagate(spec, params, caches, d_logits, &mut grads);
    }
    let scale = T::one() / T::of(inputs.len() as f64);
    grads.scale(scale);
    Ok((total_loss * scale, grads))
}

fn backpropagate<T: Real>(
    spec: &NetworkSpec,
    params: &Params<T>,
    caches: Vec<Cache<T>>,
    d_logits: Vec<T>,
    grads: &mut Params<T>,
) {
    let shapes = spec.shapes().expect("validated");
    let (h, w) = spec.input;
    let input_shape = Shape::Spatial {
        channels: 1,
        height: h,
        width: w,
    };
    let mut d = d_logits;
    for (i, cache) in caches.into_iter().enumerate().rev() {
        let layer = &spec.layers[i];
        let in_shape = if i == 0 { input_shape } else { shapes[i - 1] };
        let want_input = i > 0;
        let p = &params.layers[i];
        let g = &mut grads.layers[i];
        let (gw, gb) = match g.as_mut_slice() {
            [gw, gb] => (Some(gw), Some(gb)),
            _ => (None, None),
        };
        d = match (layer, cache) {
            (
                LayerSpec::Conv {
                    kernel,
                    padding,
                    activation,
                    ..
                },
                Cache::Conv { rows, input_len, pre },
            ) => {
                let d_pre = through_activation(d, &pre, *activation);
                let geometry = ConvGeometry::new(in_shape, shapes[i], *kernel, *padding);
                geometry
                    .backward(
                        &rows,
                        input_len,
                        p[0].data(),
                        &d_pre,
                        gw.expect("conv weights").data_mut(),
                        gb.expect("conv bias").data_mut(),
                        want_input,
                    )
                    .unwrap_or_default()
            }
            (LayerSpec::MaxPool { .. }, Cache::Pool { argmax, input_len }) => {
                let mut d_in = vec![T::zero(); input_len];
                for (&src, &gv) in argmax.iter().zip(&d) {
                    d_in[src] = d_in[src] + gv;
                }
                d_in
            }
            (
                LayerSpec::LocallyConnected {
                    kernel, activation, ..
                },
                Cache::Local { rows, input_len, pre },
            ) => {
                let d_pre = through_activation(d, &pre, *activation);
                let geometry = LocalGeometry::new(in_shape, shapes[i], *kernel);
                geometry
                    .backward(
                        &rows,
                        input_len,
                        p[0].data(),
                        &d_pre,
                        gw.expect("local weights").data_mut(),
                        gb.expect("local bias").data_mut(),
                        want_input,
                    )
                    .unwrap_or_default()
            }
            (LayerSpec::Dense { activation, .. }, Cache::Dense { input, pre }) => {
                let d_pre = through_activation(d, &pre, *activation);
                affine_backward(
                    &input,
                    p[0].data(),
                    &d_pre,
                    gw.expect("dense weights").data_mut(),
                    gb.expect("dense bias").data_mut(),
                    want_input,
                )
                .unwrap_or_default()
            }
            (LayerSpec::Dropout { .. }, Cache::Dropout { mask }) => match mask {
                Some(mask) => d.iter().zip(&mask).map(|(&g, &m)| g * m).collect(),
                None => d,
            },
            (LayerSpec::Output { .. }, Cache::Output { input }) => affine_backward(
                &input,
                p[0].data(),
                &d,
                gw.expect("output weights").data_mut(),
                gb.expect("output bias").data_mut(),
                want_input,
            )
            .unwrap_or_default(),
            _ => unreachable!("cache kinds follow the layer kinds"),
        };
    }
}
