//! Test oracles shared by the integration test targets.
#![allow(dead_code)]

use fedinspect::nn::{loss_and_grad, Architecture, Batch, ParamSet, Tensor};
use fedinspect::rng::CounterRng;

const EPS: f64 = 1e-5;

/// Relative error with a floor on the denominator so that coordinates whose
/// true gradient is (numerically) zero are judged on absolute error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

pub fn perturbed(params: &ParamSet, entry: usize, index: usize, delta: f64) -> ParamSet {
    let entries = params
        .iter()
        .enumerate()
        .map(|(i, (name, t))| {
            let mut data = t.data().to_vec();
            if i == entry {
                data[index] += delta;
            }
            (name.to_string(), Tensor::new(t.dims().to_vec(), data).unwrap())
        })
        .collect();
    ParamSet::new(entries).unwrap()
}

pub fn loss_only(arch: &Architecture, p: &ParamSet, batch: &Batch) -> f64 {
    loss_and_grad(arch, p, batch).unwrap().0
}

/// Random Glorot params with small random biases, and a random 3-sample batch.
pub fn draw(seed: u64) -> (ParamSet, Batch) {
    let arch = Architecture::inspection_cnn();
    let base = arch.init_params(seed);
    let mut rng = CounterRng::stream(seed, 99);
    let entries = base
        .iter()
        .map(|(name, t)| {
            let data = if name.ends_with("bias") {
                t.data().iter().map(|_| rng.uniform(-0.1, 0.1)).collect()
            } else {
                t.data().to_vec()
            };
            (name.to_string(), Tensor::new(t.dims().to_vec(), data).unwrap())
        })
        .collect();
    let params = ParamSet::new(entries).unwrap();
    let pixels: Vec<f64> = (0..3 * 256).map(|_| rng.next_f64()).collect();
    let labels = (0..3).map(|_| rng.below(4) as usize).collect();
    let batch = Batch::new(Tensor::new(vec![3, 16, 16], pixels).unwrap(), labels).unwrap();
    (params, batch)
}

/// Activation pattern of the fixed CNN on every sample: the sign of each
/// ReLU input and the winning cell of each 2x2 pool. Computed here with plain
/// loops, independently of the library's forward pass.
///
/// Loss is smooth in a neighbourhood where this pattern does not change.
pub fn activation_pattern(params: &ParamSet, batch: &Batch) -> Vec<u8> {
    let get = |name: &str| params.get(name).unwrap().data().to_vec();
    let mut pattern = Vec::new();
    for s in 0..batch.len() {
        let mut x = batch.images().data()[s * 256..(s + 1) * 256].to_vec();
        let (mut channels, mut side) = (1usize, 16usize);
        for (layer, out_ch) in [("conv1", 4usize), ("conv2", 8)] {
            let w = get(&format!("{layer}.weight"));
            let b = get(&format!("{layer}.bias"));
            let mut pre = vec![0.0; out_ch * side * side];
            for o in 0..out_ch {
                for y in 0..side as i64 {
                    for xx in 0..side as i64 {
                        let mut acc = b[o];
                        for c in 0..channels {
                            for ky in -1..=1i64 {
                                for kx in -1..=1i64 {
                                    let (iy, ix) = (y + ky, xx + kx);
                                    if iy < 0 || ix < 0 || iy >= side as i64 || ix >= side as i64 {
                                        continue;
                                    }
                                    let wi = ((o * channels + c) * 3 + (ky + 1) as usize) * 3 + (kx + 1) as usize;
                                    acc += w[wi] * x[(c * side + iy as usize) * side + ix as usize];
                                }
                            }
                        }
                        pre[(o * side + y as usize) * side + xx as usize] = acc;
                    }
                }
            }
            pattern.extend(pre.iter().map(|&v| (v > 0.0) as u8));
            let half = side / 2;
            let mut pooled = vec![0.0; out_ch * half * half];
            for o in 0..out_ch {
                for py in 0..half {
                    for px in 0..half {
                        let cells = [(0, 0), (0, 1), (1, 0), (1, 1)]
                            .map(|(dy, dx)| pre[(o * side + 2 * py + dy) * side + 2 * px + dx].max(0.0));
                        let mut win = 0;
                        for k in 1..4 {
                            if cells[k] > cells[win] {
                                win = k;
                            }
                        }
                        pattern.push(win as u8);
                        pooled[(o * half + py) * half + px] = cells[win];
                    }
                }
            }
            x = pooled;
            channels = out_ch;
            side = half;
        }
        let w = get("fc1.weight");
        let b = get("fc1.bias");
        for j in 0..b.len() {
            let v = b[j] + (0..x.len()).map(|i| w[j * x.len() + i] * x[i]).sum::<f64>();
            pattern.push((v > 0.0) as u8);
        }
    }
    pattern
}

pub struct GradCheck {
    pub max_relative_error: f64,
    pub coordinates: usize,
    /// Coordinates where the step had to shrink below `EPS` to stay clear of a kink.
    pub narrowed: usize,
}

/// Checks up to `per_entry` randomly chosen coordinates of every tensor
/// (all coordinates of tensors smaller than that).
///
/// Each coordinate uses a central difference with step `EPS`. When `x +- EPS`
/// straddles a ReLU or pooling kink, the difference quotient is not a
/// derivative estimate, so the step is halved until both points share the
/// activation pattern of `x`.
pub fn gradient_check(seed: u64, per_entry: usize) -> GradCheck {
    let arch = Architecture::inspection_cnn();
    let (params, batch) = draw(seed);
    let (_, grads) = loss_and_grad(&arch, &params, &batch).unwrap();
    let base = activation_pattern(&params, &batch);
    let mut pick = CounterRng::stream(seed, 7);
    let mut out = GradCheck {
        max_relative_error: 0.0,
        coordinates: 0,
        narrowed: 0,
    };
    for (entry, (_, t)) in params.iter().enumerate() {
        let coords: Vec<usize> = if t.len() <= per_entry {
            (0..t.len()).collect()
        } else {
            (0..per_entry).map(|_| pick.below(t.len() as u64) as usize).collect()
        };
        for idx in coords {
            let mut eps = EPS;
            let (plus, minus) = loop {
                let plus = perturbed(&params, entry, idx, eps);
                let minus = perturbed(&params, entry, idx, -eps);
                let smooth = activation_pattern(&plus, &batch) == base && activation_pattern(&minus, &batch) == base;
                if smooth || eps < 1e-9 {
                    break (plus, minus);
                }
                eps /= 2.0;
            };
            if eps < EPS {
                out.narrowed += 1;
            }
            let numeric = (loss_only(&arch, &plus, &batch) - loss_only(&arch, &minus, &batch)) / (2.0 * eps);
            let analytic = grads.entries()[entry].1.data()[idx];
            out.max_relative_error = out.max_relative_error.max(relative_error(analytic, numeric));
            out.coordinates += 1;
        }
    }
    out
}

pub fn max_gradient_error(seed: u64, per_entry: usize) -> f64 {
    gradient_check(seed, per_entry).max_relative_error
}

/// One full-batch gradient step on the pooled samples, applied elementwise here
/// rather than through the library's optimizer.
pub fn centralized_gd_step(
    arch: &Architecture,
    w0: &ParamSet,
    pooled: &[fedinspect::data::LabeledImage],
    lr: f64,
) -> ParamSet {
    let batch = Batch::from_samples(16, pooled.iter().map(|s| s.sample())).unwrap();
    let (_, grads) = loss_and_grad(arch, w0, &batch).unwrap();
    let entries = w0
        .iter()
        .zip(grads.iter())
        .map(|((name, w), (_, g))| {
            let data = w.data().iter().zip(g.data()).map(|(w, g)| w - lr * g).collect();
            (name.to_string(), Tensor::new(w.dims().to_vec(), data).unwrap())
        })
        .collect();
    ParamSet::new(entries).unwrap()
}

/// Every file under `root`, keyed by relative path.
pub fn snapshot(root: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    fn walk(root: &std::path::Path, dir: &std::path::Path, out: &mut std::collections::BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = std::collections::BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// First differing file between two trees, if any.
pub fn tree_difference(
    a: &std::collections::BTreeMap<String, Vec<u8>>,
    b: &std::collections::BTreeMap<String, Vec<u8>>,
) -> Option<String> {
    let names_a: Vec<_> = a.keys().collect();
    let names_b: Vec<_> = b.keys().collect();
    if names_a != names_b {
        return Some(format!("file lists differ: {names_a:?} vs {names_b:?}"));
    }
    a.iter().find(|(k, v)| b[*k] != **v).map(|(k, _)| format!("{k} differs"))
}

/// A loopback port that was free a moment ago.
pub fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}
