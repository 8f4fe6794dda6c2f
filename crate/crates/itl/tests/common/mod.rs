//! Shared helpers for the integration suites: independent reference
//! implementations of the losses, central-difference oracles over graph
//! parameters, and small builders for models, datasets, and buffers.
//!
//! Everything here is written against f64 first; the oracles deliberately
//! avoid the graph's own backward and dual sweeps so they can stand as
//! independent evidence.
#![allow(dead_code)]

use itl::autodiff::{ComputeGraph, NodeId, ParamSet, Tensor};
use itl::buffer::{BufferEntry, MemoryBuffer};
use itl::data::{BlobSpec, Dataset};
use itl::models::Model;
use itl::scalar::Scalar;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Uniform tensor in [-1, 1) with the given shape.
pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Uniform perturbation set matching `like`'s names and shapes.
pub fn rand_direction(like: &ParamSet<f64>, rng: &mut ChaCha8Rng) -> ParamSet<f64> {
    let mut d = ParamSet::new();
    for (name, t) in like.iter() {
        d.set(name, rand_tensor(t.shape(), rng));
    }
    d
}

/// Central finite difference of a scalar node with respect to a single
/// parameter element: (f(p + eps e) - f(p - eps e)) / (2 eps).
pub fn fd_scalar_wrt_param(
    g: &ComputeGraph,
    loss: NodeId,
    params: &ParamSet<f64>,
    inputs: &[(&str, &Tensor<f64>)],
    name: &str,
    idx: usize,
    eps: f64,
) -> f64 {
    let mut plus = params.clone();
    plus.get_mut(name).unwrap().data_mut()[idx] += eps;
    let mut minus = params.clone();
    minus.get_mut(name).unwrap().data_mut()[idx] -= eps;
    let fp = g.forward(&plus, inputs).unwrap().value(loss).item();
    let fm = g.forward(&minus, inputs).unwrap().value(loss).item();
    (fp - fm) / (2.0 * eps)
}

/// Full central-difference gradient of a scalar node over every element of
/// every parameter. Quadratic cost; keep the graphs small.
pub fn fd_grad(
    g: &ComputeGraph,
    loss: NodeId,
    params: &ParamSet<f64>,
    inputs: &[(&str, &Tensor<f64>)],
    eps: f64,
) -> ParamSet<f64> {
    let mut out = ParamSet::new();
    for (name, t) in params.iter() {
        let mut grad = Tensor::zeros(t.shape());
        for idx in 0..t.len() {
            grad.data_mut()[idx] = fd_scalar_wrt_param(g, loss, params, inputs, name, idx, eps);
        }
        out.set(name, grad);
    }
    out
}

/// Central finite difference of a vector-valued node along a parameter
/// direction: (f(p + eps d) - f(p - eps d)) / (2 eps), elementwise.
pub fn fd_directional(
    g: &ComputeGraph,
    node: NodeId,
    params: &ParamSet<f64>,
    inputs: &[(&str, &Tensor<f64>)],
    dir: &ParamSet<f64>,
    eps: f64,
) -> Tensor<f64> {
    let shift = |sign: f64| {
        let mut p = params.clone();
        for (name, t) in p.iter_mut() {
            if let Some(d) = dir.get(name) {
                t.add_scaled_assign(d, sign * eps);
            }
        }
        p
    };
    let fp = g.forward(&shift(1.0), inputs).unwrap().value(node).clone();
    let fm = g.forward(&shift(-1.0), inputs).unwrap().value(node).clone();
    fp.zip_map(&fm, |a, b| (a - b) / (2.0 * eps))
}

/// Largest relative elementwise difference between two tensors, with the
/// denominator floored to dodge division by values near zero.
pub fn max_rel_err(a: &Tensor<f64>, b: &Tensor<f64>, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch in comparison");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Largest relative difference across all shared parameters of two sets.
pub fn max_rel_err_params(a: &ParamSet<f64>, b: &ParamSet<f64>, floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, t) in a.iter() {
        let other = b.get(name).unwrap_or_else(|| panic!("missing param {}", name));
        worst = worst.max(max_rel_err(t, other, floor));
    }
    worst
}

/// Reference softmax of one row, computed with the usual max-shift.
pub fn softmax_row_ref(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

/// Reference mean cross-entropy of logit rows against class indices.
pub fn ce_ref(logits: &Tensor<f64>, labels: &[usize]) -> f64 {
    assert_eq!(logits.rows(), labels.len());
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let p = softmax_row_ref(logits.row(r));
        total -= p[y].max(1e-300).ln();
    }
    total / labels.len() as f64
}

/// Reference mean squared difference over all elements.
pub fn mse_ref(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let n = a.data().len() as f64;
    a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum::<f64>() / n
}

/// Index-valued label tensor in the shape the graph's cross-entropy expects.
pub fn label_tensor<F: Scalar>(labels: &[usize]) -> Tensor<F> {
    let data: Vec<F> = labels.iter().map(|&y| F::from_f64(y as f64)).collect();
    Tensor::new(vec![labels.len()], data).unwrap()
}

/// Fresh MLP model over f64 with the given layer plan.
pub fn mlp_f64(input: usize, hidden: &[usize], classes: usize, seed: u64) -> Model<f64> {
    Model::init(itl::models::ArchSpec::mlp(input, hidden, classes), seed).unwrap()
}

/// Well-separated two-dimensional blob data for quick end-to-end checks.
pub fn blob_spec(classes: usize, per_class: usize, sigma: f64, seed: u64) -> BlobSpec {
    BlobSpec {
        num_classes: classes,
        dim: 2,
        train_per_class: per_class,
        test_per_class: per_class.div_ceil(2),
        radius: 5.0,
        sigma,
        seed,
    }
}

/// Buffer filled with `per_class` random-feature entries for each class,
/// each carrying finite stored logits, round-robin over `classes`.
pub fn synthetic_buffer(
    classes: usize,
    per_class: usize,
    dim: usize,
    seed: u64,
) -> MemoryBuffer<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = MemoryBuffer::new(classes * per_class, seed).unwrap();
    let mut entries = Vec::new();
    for c in 0..classes {
        for _ in 0..per_class {
            let x = rand_tensor(&[dim], &mut rng);
            let logits = rand_tensor(&[classes], &mut rng);
            entries.push(BufferEntry { x, y: c, logits: Some(logits), task_id: c / 2 });
        }
    }
    buf.merge_stratified_entries(entries, seed ^ 1).unwrap();
    buf
}

/// Train/test blob datasets restricted to nothing, as one call.
pub fn blob_data(
    classes: usize,
    per_class: usize,
    sigma: f64,
    seed: u64,
) -> (Dataset<f64>, Dataset<f64>) {
    itl::data::generate_blobs(&blob_spec(classes, per_class, sigma, seed)).unwrap()
}
