//! Datasets: in-memory batches, the synthetic "Seq-Blobs" generator, and a
//! fixed-width binary on-disk format loadable without any ecosystem
//! dependency.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};

/// Labeled classification data. `x` is `(n, sample_shape...)`, labels are
/// global class ids valid for the whole continual run.
#[derive(Clone, Debug)]
pub struct Dataset<F> {
    x: Tensor<F>,
    y: Vec<usize>,
    num_classes: usize,
}

impl<F: Scalar> Dataset<F> {
    pub fn new(x: Tensor<F>, y: Vec<usize>, num_classes: usize) -> Result<Self> {
        if x.rank() < 2 {
            return Err(Error::Data(format!(
                "dataset tensor must be (n, ...), got {:?}",
                x.shape()
            )));
        }
        if x.shape()[0] != y.len() {
            return Err(Error::Data(format!(
                "{} samples but {} labels",
                x.shape()[0],
                y.len()
            )));
        }
        if num_classes == 0 {
            return Err(Error::Data("num_classes must be positive".into()));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= num_classes) {
            return Err(Error::Data(format!(
                "label {} out of range for {} classes",
                bad, num_classes
            )));
        }
        Ok(Dataset { x, y, num_classes })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.y
    }

    pub fn x(&self) -> &Tensor<F> {
        &self.x
    }

    /// Per-sample shape, without the leading count dimension.
    pub fn sample_shape(&self) -> &[usize] {
        &self.x.shape()[1..]
    }

    pub fn sample_elems(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// One sample as its own tensor.
    pub fn sample(&self, i: usize) -> Tensor<F> {
        let k = self.sample_elems();
        let data = self.x.data()[i * k..(i + 1) * k].to_vec();
        Tensor::new(self.sample_shape().to_vec(), data).expect("sample shape")
    }

    /// Stacks the indexed samples into `(batch, sample_shape...)` plus a
    /// float label vector for loss graphs.
    pub fn gather(&self, idx: &[usize]) -> (Tensor<F>, Tensor<F>) {
        let k = self.sample_elems();
        let mut data = Vec::with_capacity(idx.len() * k);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&self.x.data()[i * k..(i + 1) * k]);
            labels.push(F::from_f64(self.y[i] as f64));
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(self.sample_shape());
        (
            Tensor::new(shape, data).expect("gather shape"),
            Tensor::new(vec![idx.len()], labels).expect("labels shape"),
        )
    }

    /// Subset containing only the given classes, preserving sample order and
    /// global label ids.
    pub fn filter_classes(&self, classes: &[usize]) -> Self {
        let idx: Vec<usize> =
            (0..self.len()).filter(|&i| classes.contains(&self.y[i])).collect();
        let (x, _) = self.gather(&idx);
        let y: Vec<usize> = idx.iter().map(|&i| self.y[i]).collect();
        Dataset { x, y, num_classes: self.num_classes }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &c in &self.y {
            counts[c] += 1;
        }
        counts
    }

    pub fn cast<G: Scalar>(&self) -> Dataset<G> {
        Dataset { x: self.x.cast(), y: self.y.clone(), num_classes: self.num_classes }
    }
}

/// Parameters of the synthetic blob stream: one isotropic Gaussian per
/// class, means evenly spaced on a circle.
#[derive(Clone, Debug, PartialEq)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub radius: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            num_classes: 10,
            dim: 2,
            train_per_class: 500,
            test_per_class: 200,
            radius: 5.0,
            sigma: 1.0,
            seed: 0,
        }
    }
}

impl BlobSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("blobs need at least 2 classes".into()));
        }
        if self.dim < 2 {
            return Err(Error::Config("blobs need dim >= 2 (means live on a circle)".into()));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("per-class sample counts must be positive".into()));
        }
        if !(self.radius.is_finite() && self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Config(format!(
                "bad radius {} / sigma {}",
                self.radius, self.sigma
            )));
        }
        Ok(())
    }

    /// Mean of class `c`: radius * (cos a, sin a, 0, ...) with angles evenly
    /// spaced over the circle.
    pub fn center(&self, c: usize) -> Vec<f64> {
        let a = std::f64::consts::TAU * c as f64 / self.num_classes as f64;
        let mut v = vec![0.0; self.dim];
        v[0] = self.radius * a.cos();
        v[1] = self.radius * a.sin();
        v
    }
}

/// Deterministic (train, test) split for a [`BlobSpec`]. All randomness is
/// drawn in f64 from one seeded stream, class by class, train before test,
/// so any element width sees identical data.
pub fn generate_blobs<F: Scalar>(spec: &BlobSpec) -> Result<(Dataset<F>, Dataset<F>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train_x = Vec::with_capacity(spec.num_classes * spec.train_per_class * spec.dim);
    let mut train_y = Vec::with_capacity(spec.num_classes * spec.train_per_class);
    let mut test_x = Vec::with_capacity(spec.num_classes * spec.test_per_class * spec.dim);
    let mut test_y = Vec::with_capacity(spec.num_classes * spec.test_per_class);

    for c in 0..spec.num_classes {
        let center = spec.center(c);
        for _ in 0..spec.train_per_class {
            for d in 0..spec.dim {
                let z: f64 = StandardNormal.sample(&mut rng);
                train_x.push(F::from_f64(center[d] + spec.sigma * z));
            }
            train_y.push(c);
        }
        for _ in 0..spec.test_per_class {
            for d in 0..spec.dim {
                let z: f64 = StandardNormal.sample(&mut rng);
                test_x.push(F::from_f64(center[d] + spec.sigma * z));
            }
            test_y.push(c);
        }
    }

    let train = Dataset::new(
        Tensor::new(vec![train_y.len(), spec.dim], train_x)?,
        train_y,
        spec.num_classes,
    )?;
    let test = Dataset::new(
        Tensor::new(vec![test_y.len(), spec.dim], test_x)?,
        test_y,
        spec.num_classes,
    )?;
    Ok((train, test))
}

/// Splits `0..num_classes` into `tasks` contiguous groups of equal size.
pub fn split_classes(num_classes: usize, tasks: usize) -> Result<Vec<Vec<usize>>> {
    if tasks == 0 || num_classes % tasks != 0 {
        return Err(Error::Config(format!(
            "{} classes do not split into {} equal tasks",
            num_classes, tasks
        )));
    }
    let per = num_classes / tasks;
    Ok((0..tasks).map(|t| (t * per..(t + 1) * per).collect()).collect())
}

const DATASET_MAGIC: &[u8] = b"ITLDSET1";

/// Writes the fixed-width binary dataset format:
///
/// ```text
/// magic "ITLDSET1" | dtype u8 | ndim u8 | reserved u16 | count u32 |
/// num_classes u32 | dims u32 x ndim | records: (label u32, values...)
/// ```
///
/// All integers and values little-endian. Deterministic: same dataset, same
/// bytes.
pub fn write_dataset<F: Scalar>(path: &Path, ds: &Dataset<F>) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.push(F::DTYPE.code());
    let dims = ds.sample_shape();
    out.push(dims.len() as u8);
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(ds.len() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.num_classes() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let k = ds.sample_elems();
    for i in 0..ds.len() {
        out.extend_from_slice(&(ds.labels()[i] as u32).to_le_bytes());
        for &v in &ds.x().data()[i * k..(i + 1) * k] {
            v.write_le(&mut out);
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`]. The stored element width
/// may differ from `F`; values are converted on load.
pub fn read_dataset<F: Scalar>(path: &Path) -> Result<Dataset<F>> {
    let bytes = std::fs::read(path)?;
    let fail = |msg: &str| Error::Data(format!("{}: {}", path.display(), msg));
    if bytes.len() < 20 || &bytes[..8] != DATASET_MAGIC {
        return Err(fail("not a dataset file"));
    }
    let dtype = Dtype::from_code(bytes[8]).ok_or_else(|| fail("unknown element type"))?;
    let ndim = bytes[9] as usize;
    if ndim == 0 {
        return Err(fail("zero-dimensional samples"));
    }
    let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let num_classes = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    if num_classes == 0 {
        return Err(fail("zero classes"));
    }
    let mut off = 20;
    if bytes.len() < off + 4 * ndim {
        return Err(fail("truncated header"));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        if d == 0 {
            return Err(fail("zero sample dimension"));
        }
        dims.push(d);
        off += 4;
    }
    let k: usize = dims.iter().product();
    let esize = dtype.size();
    let record = 4 + k * esize;
    if bytes.len() != off + count * record {
        return Err(fail("record section length mismatch"));
    }

    let mut data = Vec::with_capacity(count * k);
    let mut labels = Vec::with_capacity(count);
    for r in 0..count {
        let base = off + r * record;
        let label = u32::from_le_bytes(bytes[base..base + 4].try_into().unwrap()) as usize;
        if label >= num_classes {
            return Err(fail(&format!("label {} out of range", label)));
        }
        labels.push(label);
        let vals = &bytes[base + 4..base + record];
        match dtype {
            Dtype::F32 => {
                for c in vals.chunks_exact(4) {
                    data.push(F::from_f64(f32::read_le(c) as f64));
                }
            }
            Dtype::F64 => {
                for c in vals.chunks_exact(8) {
                    data.push(F::from_f64(f64::read_le(c)));
                }
            }
        }
    }

    let mut shape = vec![count];
    shape.extend_from_slice(&dims);
    Dataset::new(Tensor::new(shape, data)?, labels, num_classes)
}
