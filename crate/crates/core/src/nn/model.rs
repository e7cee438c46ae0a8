use super::arch::KERNEL;
use super::{Architecture, NnError, ParamSet, Tensor};

/// Number of inspection classes: OKAY, NOT_OKAY, HIDDEN, EMPTY.
pub const NUM_CLASSES: usize = 4;

/// Mini-batch of single-channel images with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    images: Tensor,
    labels: Vec<usize>,
}

impl Batch {
    /// `images` has dims `[b, side, side]`.
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self, NnError> {
        let dims = images.dims();
        if dims.len() != 3 || dims[1] != dims[2] {
            return Err(NnError::Precondition(format!("batch dims {dims:?} are not [b, side, side]")));
        }
        if dims[0] != labels.len() {
            return Err(NnError::Precondition(format!(
                "{} images but {} labels",
                dims[0],
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(NnError::EmptyInput("batch"));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
            return Err(NnError::Precondition(format!("label {bad} out of range")));
        }
        Ok(Self { images, labels })
    }

    /// Stacks `(pixels, label)` pairs, each image a row-major `side x side` slice.
    pub fn from_samples<'a, I>(side: usize, samples: I) -> Result<Self, NnError>
    where
        I: IntoIterator<Item = (&'a [f64], usize)>,
    {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (pixels, label) in samples {
            if pixels.len() != side * side {
                return Err(NnError::Precondition(format!(
                    "image has {} pixels, expected {}",
                    pixels.len(),
                    side * side
                )));
            }
            data.extend_from_slice(pixels);
            labels.push(label);
        }
        if labels.is_empty() {
            return Err(NnError::EmptyInput("batch"));
        }
        let images = Tensor::new(vec![labels.len(), side, side], data)?;
        Self::new(images, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    fn image(&self, i: usize) -> &[f64] {
        let n = self.images.dims()[1] * self.images.dims()[2];
        &self.images.data()[i * n..(i + 1) * n]
    }
}

struct ConvCache {
    input: Vec<f64>,
    pre: Vec<f64>,
    /// For each pooled cell, the flat index into `pre` that won the max.
    argmax: Vec<usize>,
}

struct DenseCache {
    input: Vec<f64>,
    pre: Vec<f64>,
}

struct Trace {
    convs: Vec<ConvCache>,
    dense: Vec<DenseCache>,
    logits: Vec<f64>,
}

fn conv_forward(input: &[f64], in_ch: usize, side: usize, w: &[f64], b: &[f64], out_ch: usize) -> Vec<f64> {
    let mut out = vec![0.0; out_ch * side * side];
    for o in 0..out_ch {
        for y in 0..side {
            for x in 0..side {
                let mut acc = b[o];
                for i in 0..in_ch {
                    let wbase = (o * in_ch + i) * KERNEL * KERNEL;
                    let ibase = i * side * side;
                    for ky in 0..KERNEL {
                        let iy = y + ky;
                        if iy == 0 || iy > side {
                            continue;
                        }
                        let row = ibase + (iy - 1) * side;
                        for kx in 0..KERNEL {
                            let ix = x + kx;
                            if ix == 0 || ix > side {
                                continue;
                            }
                            acc += w[wbase + ky * KERNEL + kx] * input[row + ix - 1];
                        }
                    }
                }
                out[(o * side + y) * side + x] = acc;
            }
        }
    }
    out
}

/// ReLU followed by 2x2 max-pool. Ties go to the first cell in row-major order.
fn relu_pool(pre: &[f64], ch: usize, side: usize) -> (Vec<f64>, Vec<usize>) {
    let half = side / 2;
    let mut out = vec![0.0; ch * half * half];
    let mut argmax = vec![0; ch * half * half];
    for c in 0..ch {
        for py in 0..half {
            for px in 0..half {
                let mut best_idx = (c * side + 2 * py) * side + 2 * px;
                let mut best = pre[best_idx].max(0.0);
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (c * side + 2 * py + dy) * side + 2 * px + dx;
                    let v = pre[idx].max(0.0);
                    if v > best {
                        best = v;
                        best_idx = idx;
                    }
                }
                let o = (c * half + py) * half + px;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    (out, argmax)
}

fn dense_forward(input: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let n_in = input.len();
    b.iter()
        .enumerate()
        .map(|(j, &bias)| {
            let row = &w[j * n_in..(j + 1) * n_in];
            bias + row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>()
        })
        .collect()
}

fn run_forward(arch: &Architecture, params: &ParamSet, image: &[f64]) -> Trace {
    let mut x = image.to_vec();
    let mut in_ch = arch.in_channels;
    let mut side = arch.side;
    let mut convs = Vec::with_capacity(arch.convs.len());
    for (l, conv) in arch.convs.iter().enumerate() {
        let w = params.tensor(2 * l).data();
        let b = params.tensor(2 * l + 1).data();
        let pre = conv_forward(&x, in_ch, side, w, b, conv.out_channels);
        let (pooled, argmax) = relu_pool(&pre, conv.out_channels, side);
        convs.push(ConvCache { input: x, pre, argmax });
        x = pooled;
        in_ch = conv.out_channels;
        side /= 2;
    }
    let offset = 2 * arch.convs.len();
    let last = arch.dense.len() - 1;
    let mut dense = Vec::with_capacity(arch.dense.len());
    for l in 0..arch.dense.len() {
        let w = params.tensor(offset + 2 * l).data();
        let b = params.tensor(offset + 2 * l + 1).data();
        let pre = dense_forward(&x, w, b);
        let next = if l == last {
            pre.clone()
        } else {
            pre.iter().map(|&v| v.max(0.0)).collect()
        };
        dense.push(DenseCache { input: x, pre });
        x = next;
    }
    Trace {
        convs,
        dense,
        logits: x,
    }
}

/// Accumulates `scale * dLoss/dparams` for one sample into `grads`.
fn run_backward(
    arch: &Architecture,
    params: &ParamSet,
    trace: &Trace,
    dlogits: &[f64],
    grads: &mut ParamSet,
    through_features: bool,
) {
    let offset = 2 * arch.convs.len();
    let mut delta = dlogits.to_vec();
    for l in (0..arch.dense.len()).rev() {
        let cache = &trace.dense[l];
        if l != arch.dense.len() - 1 {
            for (d, &p) in delta.iter_mut().zip(&cache.pre) {
                if p <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        let n_in = cache.input.len();
        {
            let gw = grads.tensor_mut(offset + 2 * l).data_mut();
            for (j, &dj) in delta.iter().enumerate() {
                if dj == 0.0 {
                    continue;
                }
                let row = &mut gw[j * n_in..(j + 1) * n_in];
                for (g, &x) in row.iter_mut().zip(&cache.input) {
                    *g += dj * x;
                }
            }
        }
        {
            let gb = grads.tensor_mut(offset + 2 * l + 1).data_mut();
            for (g, &dj) in gb.iter_mut().zip(&delta) {
                *g += dj;
            }
        }
        let w = params.tensor(offset + 2 * l).data();
        let mut dinput = vec![0.0; n_in];
        for (j, &dj) in delta.iter().enumerate() {
            if dj == 0.0 {
                continue;
            }
            let row = &w[j * n_in..(j + 1) * n_in];
            for (d, &wv) in dinput.iter_mut().zip(row) {
                *d += dj * wv;
            }
        }
        delta = dinput;
    }
    if !through_features {
        return;
    }

    // `delta` is now the gradient w.r.t. the flattened pooled features.
    let mut side = arch.feature_side();
    for l in (0..arch.convs.len()).rev() {
        let cache = &trace.convs[l];
        let out_ch = arch.convs[l].out_channels;
        let in_ch = if l == 0 { arch.in_channels } else { arch.convs[l - 1].out_channels };
        let full = side * 2;
        let mut dpre = vec![0.0; out_ch * full * full];
        for (cell, &src) in cache.argmax.iter().enumerate() {
            if cache.pre[src] > 0.0 {
                dpre[src] += delta[cell];
            }
        }
        let w = params.tensor(2 * l).data();
        let mut dinput = if l > 0 { vec![0.0; in_ch * full * full] } else { Vec::new() };
        {
            let gw = grads.tensor_mut(2 * l).data_mut();
            for o in 0..out_ch {
                for y in 0..full {
                    for x in 0..full {
                        let d = dpre[(o * full + y) * full + x];
                        if d == 0.0 {
                            continue;
                        }
                        for i in 0..in_ch {
                            let wbase = (o * in_ch + i) * KERNEL * KERNEL;
                            let ibase = i * full * full;
                            for ky in 0..KERNEL {
                                let iy = y + ky;
                                if iy == 0 || iy > full {
                                    continue;
                                }
                                for kx in 0..KERNEL {
                                    let ix = x + kx;
                                    if ix == 0 || ix > full {
                                        continue;
                                    }
                                    let at = ibase + (iy - 1) * full + ix - 1;
                                    gw[wbase + ky * KERNEL + kx] += d * cache.input[at];
                                    if l > 0 {
                                        dinput[at] += d * w[wbase + ky * KERNEL + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        {
            let gb = grads.tensor_mut(2 * l + 1).data_mut();
            for o in 0..out_ch {
                gb[o] += dpre[o * full * full..(o + 1) * full * full].iter().sum::<f64>();
            }
        }
        delta = dinput;
        side = full;
    }
}

fn check_inputs(arch: &Architecture, params: &ParamSet, batch: &Batch) -> Result<(), NnError> {
    arch.check(params)?;
    if arch.in_channels != 1 || batch.images().dims()[1] != arch.side {
        return Err(NnError::ArchitectureMismatch(format!(
            "batch images are {:?}, architecture expects side {} with 1 channel",
            &batch.images().dims()[1..],
            arch.side
        )));
    }
    Ok(())
}

/// Cross-entropy of one logit row against `label`, via a stable log-sum-exp.
fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = m + sum.ln() - logits[label];
    let probs = exps.into_iter().map(|e| e / sum).collect();
    (loss.max(0.0), probs)
}

/// Logits of dims `[b, classes]`.
pub fn forward(arch: &Architecture, params: &ParamSet, batch: &Batch) -> Result<Tensor, NnError> {
    check_inputs(arch, params, batch)?;
    let mut data = Vec::with_capacity(batch.len() * arch.num_classes());
    for i in 0..batch.len() {
        data.extend(run_forward(arch, params, batch.image(i)).logits);
    }
    Tensor::new(vec![batch.len(), arch.num_classes()], data)
}

/// Mean softmax cross-entropy over the batch and its gradient.
pub fn loss_and_grad(arch: &Architecture, params: &ParamSet, batch: &Batch) -> Result<(f64, ParamSet), NnError> {
    loss_and_grad_impl(arch, params, batch, true)
}

/// As [`loss_and_grad`], but feature-group gradients are left at zero.
pub(crate) fn loss_and_grad_head(
    arch: &Architecture,
    params: &ParamSet,
    batch: &Batch,
) -> Result<(f64, ParamSet), NnError> {
    loss_and_grad_impl(arch, params, batch, false)
}

fn loss_and_grad_impl(
    arch: &Architecture,
    params: &ParamSet,
    batch: &Batch,
    through_features: bool,
) -> Result<(f64, ParamSet), NnError> {
    check_inputs(arch, params, batch)?;
    if arch.num_classes() != NUM_CLASSES {
        return Err(NnError::ArchitectureMismatch(format!(
            "architecture has {} outputs, labels need {NUM_CLASSES}",
            arch.num_classes()
        )));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = arch.zeros();
    let mut total = 0.0;
    for (i, &label) in batch.labels().iter().enumerate() {
        let trace = run_forward(arch, params, batch.image(i));
        let (loss, mut probs) = softmax_xent(&trace.logits, label);
        total += loss;
        probs[label] -= 1.0;
        for p in probs.iter_mut() {
            *p *= scale;
        }
        run_backward(arch, params, &trace, &probs, &mut grads, through_features);
    }
    Ok((total * scale, grads))
}

/// `params - lr * grads`, elementwise.
pub fn sgd_apply(params: &ParamSet, grads: &ParamSet, lr: f64) -> Result<ParamSet, NnError> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(NnError::Precondition(format!("learning rate must be positive, got {lr}")));
    }
    params.check_layout(grads)?;
    let mut out = params.clone();
    for i in 0..out.len() {
        let g = grads.tensor(i).data();
        for (w, &gv) in out.tensor_mut(i).data_mut().iter_mut().zip(g) {
            *w -= lr * gv;
        }
    }
    Ok(out)
}

/// Classification summary over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: [[u64; NUM_CLASSES]; NUM_CLASSES],
    pub mean_loss: f64,
}

impl Metrics {
    pub fn from_confusion(confusion: [[u64; NUM_CLASSES]; NUM_CLASSES], mean_loss: f64) -> Self {
        let total: u64 = confusion.iter().flatten().sum();
        let correct: u64 = (0..NUM_CLASSES).map(|c| confusion[c][c]).sum();
        let accuracy = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
        Self {
            accuracy,
            confusion,
            mean_loss,
        }
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    pub fn class_count(&self, class: usize) -> u64 {
        self.confusion[class].iter().sum()
    }
}

fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Accuracy, confusion matrix and mean loss of `params` over `samples`.
///
/// Per-sample losses are summed in sorted order so the result does not depend
/// on dataset order.
pub fn evaluate<'a, I>(arch: &Architecture, params: &ParamSet, samples: I) -> Result<Metrics, NnError>
where
    I: IntoIterator<Item = (&'a [f64], usize)>,
{
    arch.check(params)?;
    if arch.num_classes() != NUM_CLASSES {
        return Err(NnError::ArchitectureMismatch(format!(
            "architecture has {} outputs, metrics need {NUM_CLASSES}",
            arch.num_classes()
        )));
    }
    let mut confusion = [[0u64; NUM_CLASSES]; NUM_CLASSES];
    let mut losses = Vec::new();
    for (pixels, label) in samples {
        if pixels.len() != arch.input_len() {
            return Err(NnError::ArchitectureMismatch(format!(
                "image has {} pixels, architecture expects {}",
                pixels.len(),
                arch.input_len()
            )));
        }
        if label >= NUM_CLASSES {
            return Err(NnError::Precondition(format!("label {label} out of range")));
        }
        let trace = run_forward(arch, params, pixels);
        let (loss, _) = softmax_xent(&trace.logits, label);
        confusion[label][argmax_lowest(&trace.logits)] += 1;
        losses.push(loss);
    }
    if losses.is_empty() {
        return Err(NnError::EmptyInput("dataset"));
    }
    losses.sort_by(f64::total_cmp);
    let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
    Ok(Metrics::from_confusion(confusion, mean_loss))
}
