//! Small dense networks with hand-written backpropagation.
//!
//! A [`DenseNet`] is a stack of affine layers with rectifier activations on
//! every hidden layer and an identity output. Weights are stored row-major as
//! `(fan_in, fan_out)` so a batch forward pass is a single GEMM per layer:
//! `Z = X W + b`.
//!
//! Parameters are `f32`; losses and other reductions accumulate in `f64`.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::hoff::{Archive, Tensor};
use crate::{Error, Result};

/// One affine layer. `weights` has shape `(fan_in, fan_out)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Vec<f32>,
    pub biases: Vec<f32>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Layer {
            fan_in,
            fan_out,
            weights: vec![0.0; fan_in * fan_out],
            biases: vec![0.0; fan_out],
        }
    }
}

/// Multilayer perceptron: rectifier on hidden layers, identity on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    widths: Vec<usize>,
    layers: Vec<Layer>,
}

/// Parameter-shaped gradients, one [`Layer`] per network layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

/// Training targets for a batch.
///
/// `Values.weights`, when present, has the same shape as `values` and scales
/// each element's squared error; the loss is normalized by the weight sum.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    Classes(&'a [u32]),
    Values {
        values: &'a [f32],
        weights: Option<&'a [f32]>,
    },
}

impl Targets<'_> {
    pub fn kind(&self) -> LossKind {
        match self {
            Targets::Classes(_) => LossKind::CrossEntropy,
            Targets::Values { .. } => LossKind::Mse,
        }
    }
}

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 {
        return Err(Error::Input(format!(
            "a network needs at least input and output widths, got {widths:?}"
        )));
    }
    if widths.contains(&0) {
        return Err(Error::Input(format!(
            "layer widths must be positive, got {widths:?}"
        )));
    }
    Ok(())
}

impl DenseNet {
    /// All-zero network.
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        check_widths(widths)?;
        let layers = widths
            .windows(2)
            .map(|w| Layer::zeros(w[0], w[1]))
            .collect();
        Ok(DenseNet {
            widths: widths.to_vec(),
            layers,
        })
    }

    /// Glorot-uniform weights in ±sqrt(6 / (fan_in + fan_out)), zero biases.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(widths)?;
        for layer in &mut net.layers {
            let limit = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt() as f32;
            for w in &mut layer.weights {
                *w = rng.random_range(-limit..=limit);
            }
        }
        Ok(net)
    }

    /// Build from explicit layers; shapes must chain.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Input("network has no layers".into()));
        }
        let mut widths = vec![layers[0].fan_in];
        for (i, l) in layers.iter().enumerate() {
            if l.fan_in != *widths.last().unwrap() {
                return Err(Error::shape(
                    "layer chain",
                    widths.last().unwrap(),
                    l.fan_in,
                ));
            }
            if l.weights.len() != l.fan_in * l.fan_out || l.biases.len() != l.fan_out {
                return Err(Error::shape(
                    "layer parameters",
                    format!(
                        "layer{i}: {}x{} weights, {} biases",
                        l.fan_in, l.fan_out, l.fan_out
                    ),
                    format!("{} weights, {} biases", l.weights.len(), l.biases.len()),
                ));
            }
            widths.push(l.fan_out);
        }
        check_widths(&widths)?;
        Ok(DenseNet { widths, layers })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    fn check_input(&self, inputs: &[f32], batch: usize) -> Result<()> {
        let d_in = self.input_width();
        if inputs.len() != batch * d_in {
            let actual = if batch == 0 {
                inputs.len()
            } else {
                inputs.len() / batch.max(1)
            };
            return Err(Error::shape("network input width", d_in, actual));
        }
        Ok(())
    }

    /// Forward pass on `batch` rows of `inputs` (row-major `batch × d_in`).
    pub fn forward(&self, inputs: &[f32], batch: usize) -> Result<Vec<f32>> {
        self.check_input(inputs, batch)?;
        let mut act = inputs.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = affine(layer, &act, batch);
            if i + 1 < self.layers.len() {
                relu_in_place(&mut z);
            }
            act = z;
        }
        Ok(act)
    }

    /// Loss only, without gradients.
    pub fn loss(&self, inputs: &[f32], batch: usize, targets: Targets<'_>) -> Result<f64> {
        let out = self.forward(inputs, batch)?;
        let (loss, _) = output_loss(&out, batch, self.output_width(), targets, false)?;
        Ok(loss)
    }

    /// Loss and gradients of every parameter.
    pub fn backward(
        &self,
        inputs: &[f32],
        batch: usize,
        targets: Targets<'_>,
    ) -> Result<(f64, Gradients)> {
        self.check_input(inputs, batch)?;
        let n_layers = self.layers.len();
        // activations[i] is the input of layer i
        let mut activations: Vec<Vec<f32>> = Vec::with_capacity(n_layers);
        activations.push(inputs.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = affine(layer, &activations[i], batch);
            if i + 1 < n_layers {
                relu_in_place(&mut z);
            }
            activations.push(z);
        }
        let output = activations.pop().unwrap();
        let (loss, delta) = output_loss(&output, batch, self.output_width(), targets, true)?;
        let mut delta = delta.unwrap();

        let mut grads: Vec<Layer> = Vec::with_capacity(n_layers);
        for i in (0..n_layers).rev() {
            let layer = &self.layers[i];
            let input = &activations[i];
            let mut g = Layer::zeros(layer.fan_in, layer.fan_out);
            // dW = input^T delta
            gemm(
                layer.fan_in,
                batch,
                layer.fan_out,
                MatRef::transposed(input, layer.fan_in),
                MatRef::rows(&delta, layer.fan_out),
                &mut g.weights,
                0.0,
            );
            for row in delta.chunks_exact(layer.fan_out) {
                for (b, d) in g.biases.iter_mut().zip(row) {
                    *b += d;
                }
            }
            if i > 0 {
                // delta_prev = delta W^T, masked by the rectifier
                let mut prev = vec![0.0f32; batch * layer.fan_in];
                gemm(
                    batch,
                    layer.fan_out,
                    layer.fan_in,
                    MatRef::rows(&delta, layer.fan_out),
                    MatRef::transposed(&layer.weights, layer.fan_out),
                    &mut prev,
                    0.0,
                );
                for (p, a) in prev.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
            grads.push(g);
        }
        grads.reverse();
        Ok((loss, Gradients { layers: grads }))
    }

    /// Parameters as named tensors `layer{i}.w` (shape `[fan_in, fan_out]`) and
    /// `layer{i}.b`, with an optional name prefix.
    pub fn write_to(&self, archive: &mut Archive, prefix: &str) {
        for (i, l) in self.layers.iter().enumerate() {
            archive.insert(
                format!("{prefix}layer{i}.w"),
                Tensor::f32(vec![l.fan_in, l.fan_out], l.weights.clone()),
            );
            archive.insert(
                format!("{prefix}layer{i}.b"),
                Tensor::f32(vec![l.fan_out], l.biases.clone()),
            );
        }
    }

    /// Inverse of [`DenseNet::write_to`].
    pub fn read_from(archive: &Archive, prefix: &str) -> Result<Self> {
        let mut layers = Vec::new();
        for i in 0.. {
            let Some(w) = archive.get(&format!("{prefix}layer{i}.w")) else {
                break;
            };
            let b = archive.get(&format!("{prefix}layer{i}.b")).ok_or_else(|| {
                Error::format("network checkpoint", format!("missing {prefix}layer{i}.b"))
            })?;
            let dims = w.dims();
            if dims.len() != 2 {
                return Err(Error::format(
                    "network checkpoint",
                    format!("{prefix}layer{i}.w is not 2-d"),
                ));
            }
            layers.push(Layer {
                fan_in: dims[0],
                fan_out: dims[1],
                weights: w.as_f32()?.to_vec(),
                biases: b.as_f32()?.to_vec(),
            });
        }
        Self::from_layers(layers)
    }
}

/// Row-major matrix view, optionally transposed.
#[derive(Clone, Copy)]
struct MatRef<'a> {
    data: &'a [f32],
    row_stride: isize,
    col_stride: isize,
}

impl<'a> MatRef<'a> {
    /// Plain row-major matrix with `cols` columns.
    fn rows(data: &'a [f32], cols: usize) -> Self {
        MatRef {
            data,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// Transpose of a row-major matrix that has `stored_cols` columns.
    fn transposed(data: &'a [f32], stored_cols: usize) -> Self {
        MatRef {
            data,
            row_stride: 1,
            col_stride: stored_cols as isize,
        }
    }
}

/// `C = A B + beta C` with `A: m×k`, `B: k×n`, `C: m×n` row-major.
fn gemm(m: usize, k: usize, n: usize, a: MatRef<'_>, b: MatRef<'_>, c: &mut [f32], beta: f32) {
    assert!(a.data.len() >= m * k && b.data.len() >= k * n && c.len() == m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index the kernel touches given the
    // strides built by MatRef (all views are dense row-major or their transposes).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn affine(layer: &Layer, input: &[f32], batch: usize) -> Vec<f32> {
    let mut z = Vec::with_capacity(batch * layer.fan_out);
    for _ in 0..batch {
        z.extend_from_slice(&layer.biases);
    }
    gemm(
        batch,
        layer.fan_in,
        layer.fan_out,
        MatRef::rows(input, layer.fan_in),
        MatRef::rows(&layer.weights, layer.fan_out),
        &mut z,
        1.0,
    );
    z
}

fn relu_in_place(z: &mut [f32]) {
    for v in z {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Numerically stable softmax of one row, in `f64`.
pub fn softmax(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Loss of `output` (`batch × width`) and, if requested, its gradient.
fn output_loss(
    output: &[f32],
    batch: usize,
    width: usize,
    targets: Targets<'_>,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f32>>)> {
    match targets {
        Targets::Classes(classes) => {
            if classes.len() != batch {
                return Err(Error::shape("class targets", batch, classes.len()));
            }
            let mut loss = 0.0f64;
            let mut grad = want_grad.then(|| vec![0.0f32; batch * width]);
            let inv_b = 1.0 / batch.max(1) as f64;
            for (i, (row, &t)) in output.chunks_exact(width).zip(classes).enumerate() {
                let t = t as usize;
                if t >= width {
                    return Err(Error::Input(format!(
                        "class index {t} at row {i} is out of range for {width} outputs"
                    )));
                }
                let p = softmax(row);
                loss -= p[t].max(f64::MIN_POSITIVE).ln();
                if let Some(g) = grad.as_mut() {
                    let g = &mut g[i * width..(i + 1) * width];
                    for (j, gj) in g.iter_mut().enumerate() {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        *gj = ((p[j] - onehot) * inv_b) as f32;
                    }
                }
            }
            Ok((loss * inv_b, grad))
        }
        Targets::Values { values, weights } => {
            if values.len() != batch * width {
                return Err(Error::shape(
                    "regression targets",
                    batch * width,
                    values.len(),
                ));
            }
            if let Some(w) = weights {
                if w.len() != values.len() {
                    return Err(Error::shape("target weights", values.len(), w.len()));
                }
            }
            let norm = match weights {
                Some(w) => w.iter().map(|&v| v as f64).sum::<f64>(),
                None => (batch * width) as f64,
            };
            if norm <= 0.0 {
                let grad = want_grad.then(|| vec![0.0f32; batch * width]);
                return Ok((0.0, grad));
            }
            let mut loss = 0.0f64;
            let mut grad = want_grad.then(|| vec![0.0f32; batch * width]);
            for k in 0..values.len() {
                let w = weights.map_or(1.0, |w| w[k] as f64);
                let d = output[k] as f64 - values[k] as f64;
                loss += w * d * d;
                if let Some(g) = grad.as_mut() {
                    g[k] = (2.0 * w * d / norm) as f32;
                }
            }
            Ok((loss / norm, grad))
        }
    }
}

/// First-order update rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state; moment buffers mirror the network's parameter shapes.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub lr: f32,
    pub step_count: u64,
    optimizer: Optimizer,
    first: Vec<Layer>,
    second: Vec<Layer>,
}

impl OptimState {
    pub fn new(optimizer: Optimizer, lr: f32, net: &DenseNet) -> Self {
        let zeros = || {
            net.layers
                .iter()
                .map(|l| Layer::zeros(l.fan_in, l.fan_out))
                .collect::<Vec<_>>()
        };
        let (first, second) = match optimizer {
            Optimizer::Sgd => (Vec::new(), Vec::new()),
            Optimizer::Adam { .. } => (zeros(), zeros()),
        };
        OptimState {
            lr,
            step_count: 0,
            optimizer,
            first,
            second,
        }
    }

    pub fn optimizer(&self) -> Optimizer {
        self.optimizer
    }
}

/// Apply one optimizer update in place.
pub fn step(net: &mut DenseNet, grads: &Gradients, state: &mut OptimState) -> Result<()> {
    if grads.layers.len() != net.layers.len() {
        return Err(Error::shape(
            "gradient layers",
            net.layers.len(),
            grads.layers.len(),
        ));
    }
    for (i, (l, g)) in net.layers.iter().zip(&grads.layers).enumerate() {
        if g.weights.len() != l.weights.len() || g.biases.len() != l.biases.len() {
            return Err(Error::shape(
                "gradient shape",
                format!("layer{i}: {}+{}", l.weights.len(), l.biases.len()),
                format!("{}+{}", g.weights.len(), g.biases.len()),
            ));
        }
        if let Some(k) = g.weights.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient of layer{i}.w"),
                index: k,
            });
        }
        if let Some(k) = g.biases.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient of layer{i}.b"),
                index: k,
            });
        }
    }
    state.step_count += 1;
    let lr = state.lr;
    match state.optimizer {
        Optimizer::Sgd => {
            for (l, g) in net.layers.iter_mut().zip(&grads.layers) {
                for (p, d) in l.weights.iter_mut().zip(&g.weights) {
                    *p -= lr * d;
                }
                for (p, d) in l.biases.iter_mut().zip(&g.biases) {
                    *p -= lr * d;
                }
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            let t = state.step_count as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            let update = |p: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32]| {
                for k in 0..p.len() {
                    m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                    v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                    let mh = m[k] / c1;
                    let vh = v[k] / c2;
                    p[k] -= lr * mh / (vh.sqrt() + eps);
                }
            };
            for (i, (l, g)) in net.layers.iter_mut().zip(&grads.layers).enumerate() {
                let (m, v) = (&mut state.first[i], &mut state.second[i]);
                update(&mut l.weights, &g.weights, &mut m.weights, &mut v.weights);
                update(&mut l.biases, &g.biases, &mut m.biases, &mut v.biases);
            }
        }
    }
    Ok(())
}

/// Minibatch training configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub optimizer: Optimizer,
}

impl Default for FitParams {
    fn default() -> Self {
        FitParams {
            epochs: 10,
            batch_size: 64,
            lr: 1e-2,
            optimizer: Optimizer::Sgd,
        }
    }
}

/// Owned training targets, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetSet {
    Classes(Vec<u32>),
    Values {
        width: usize,
        values: Vec<f32>,
        weights: Option<Vec<f32>>,
    },
}

impl TargetSet {
    pub fn len(&self) -> usize {
        match self {
            TargetSet::Classes(c) => c.len(),
            TargetSet::Values { width, values, .. } => values.len() / (*width).max(1),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_targets(&self) -> Targets<'_> {
        match self {
            TargetSet::Classes(c) => Targets::Classes(c),
            TargetSet::Values {
                values, weights, ..
            } => Targets::Values {
                values,
                weights: weights.as_deref(),
            },
        }
    }
}

/// Shuffled minibatch training. Returns the mean loss of each epoch.
pub fn fit<R: Rng + ?Sized>(
    net: &mut DenseNet,
    state: &mut OptimState,
    inputs: &[f32],
    targets: &TargetSet,
    params: &FitParams,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let n = targets.len();
    let d_in = net.input_width();
    if inputs.len() != n * d_in {
        return Err(Error::shape("training inputs", n * d_in, inputs.len()));
    }
    if n == 0 {
        return Err(Error::Input("empty training set".into()));
    }
    let bs = params.batch_size.max(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(params.epochs);
    let mut x = Vec::with_capacity(bs * d_in);
    for _ in 0..params.epochs {
        order.shuffle(rng);
        let mut total = 0.0f64;
        for chunk in order.chunks(bs) {
            x.clear();
            for &i in chunk {
                x.extend_from_slice(&inputs[i * d_in..(i + 1) * d_in]);
            }
            let batch_targets = gather_targets(targets, chunk);
            let (loss, grads) = net.backward(&x, chunk.len(), batch_targets.as_targets())?;
            step(net, &grads, state)?;
            total += loss * chunk.len() as f64;
        }
        history.push(total / n as f64);
    }
    Ok(history)
}

fn gather_targets(targets: &TargetSet, rows: &[usize]) -> TargetSet {
    match targets {
        TargetSet::Classes(c) => TargetSet::Classes(rows.iter().map(|&i| c[i]).collect()),
        TargetSet::Values {
            width,
            values,
            weights,
        } => {
            let w = *width;
            let pick = |src: &[f32]| {
                let mut out = Vec::with_capacity(rows.len() * w);
                for &i in rows {
                    out.extend_from_slice(&src[i * w..(i + 1) * w]);
                }
                out
            };
            TargetSet::Values {
                width: w,
                values: pick(values),
                weights: weights.as_deref().map(pick),
            }
        }
    }
}
