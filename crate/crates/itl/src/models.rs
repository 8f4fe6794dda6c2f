//! Small classifiers: an MLP for 2-D point streams and an optional small CNN
//! for image streams. A model owns a named parameter set, knows which layer
//! is its final fully-connected head, and can rebuild its logits expression
//! inside any compute graph so trainers can attach loss heads to it.
//!
//! The output head is sized for the full class set from the start; parameter
//! count never changes over a continual run.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::autodiff::{ComputeGraph, NodeId, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Fully-connected layer on a flat feature vector.
    Dense {
        out: usize,
        #[serde(default)]
        relu: bool,
    },
    /// Stride-1 square convolution with zero padding.
    Conv {
        out_channels: usize,
        kernel: usize,
        pad: usize,
        #[serde(default)]
        relu: bool,
    },
    AvgPool {
        k: usize,
    },
    Flatten,
}

/// Validated architecture description. The final layer is always a
/// non-activated dense layer whose width equals the class count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    /// Per-sample input shape: `[features]` for MLPs, `[c, h, w]` for CNNs.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
}

impl ArchSpec {
    /// ReLU MLP: `input_dim -> hidden... -> num_classes`.
    pub fn mlp(input_dim: usize, hidden: &[usize], num_classes: usize) -> Self {
        let mut layers: Vec<LayerSpec> =
            hidden.iter().map(|&h| LayerSpec::Dense { out: h, relu: true }).collect();
        layers.push(LayerSpec::Dense { out: num_classes, relu: false });
        ArchSpec { input_shape: vec![input_dim], layers, num_classes }
    }

    /// Two 3x3 conv blocks with 2x2 mean pooling, then a dense head.
    pub fn small_cnn(input_shape: [usize; 3], channels: [usize; 2], num_classes: usize) -> Self {
        ArchSpec {
            input_shape: input_shape.to_vec(),
            layers: vec![
                LayerSpec::Conv { out_channels: channels[0], kernel: 3, pad: 1, relu: true },
                LayerSpec::AvgPool { k: 2 },
                LayerSpec::Conv { out_channels: channels[1], kernel: 3, pad: 1, relu: true },
                LayerSpec::AvgPool { k: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { out: num_classes, relu: false },
            ],
            num_classes,
        }
    }

    /// Checks the layer chain end to end and returns per-parameter
    /// (name, shape, fan_in) triples in declaration order.
    pub fn validate(&self) -> Result<Vec<ParamShape>> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.input_shape.is_empty() || self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("bad input shape {:?}", self.input_shape)));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("architecture has no layers".into()));
        }

        let mut shapes = Vec::new();
        let mut cur = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Dense { out, .. } => {
                    if *out == 0 {
                        return Err(Error::Config(format!("layer {}: zero width", i)));
                    }
                    if cur.len() != 1 {
                        return Err(Error::Config(format!(
                            "layer {}: dense needs a flat input, have {:?}",
                            i, cur
                        )));
                    }
                    let fan_in = cur[0];
                    shapes.push(ParamShape {
                        layer: i,
                        name: format!("layer{}.w", i),
                        shape: vec![fan_in, *out],
                        fan_in,
                    });
                    shapes.push(ParamShape {
                        layer: i,
                        name: format!("layer{}.b", i),
                        shape: vec![*out],
                        fan_in,
                    });
                    cur = vec![*out];
                }
                LayerSpec::Conv { out_channels, kernel, pad, .. } => {
                    if *out_channels == 0 || *kernel == 0 {
                        return Err(Error::Config(format!("layer {}: zero conv dims", i)));
                    }
                    if cur.len() != 3 {
                        return Err(Error::Config(format!(
                            "layer {}: conv needs (c,h,w) input, have {:?}",
                            i, cur
                        )));
                    }
                    let (c, h, w) = (cur[0], cur[1], cur[2]);
                    if h + 2 * pad < *kernel || w + 2 * pad < *kernel {
                        return Err(Error::Config(format!(
                            "layer {}: kernel {} too large for {:?} with pad {}",
                            i, kernel, cur, pad
                        )));
                    }
                    let fan_in = c * kernel * kernel;
                    shapes.push(ParamShape {
                        layer: i,
                        name: format!("layer{}.w", i),
                        shape: vec![*out_channels, c, *kernel, *kernel],
                        fan_in,
                    });
                    shapes.push(ParamShape {
                        layer: i,
                        name: format!("layer{}.b", i),
                        shape: vec![*out_channels],
                        fan_in,
                    });
                    cur = vec![*out_channels, h + 2 * pad - kernel + 1, w + 2 * pad - kernel + 1];
                }
                LayerSpec::AvgPool { k } => {
                    if cur.len() != 3 || *k == 0 || cur[1] % k != 0 || cur[2] % k != 0 {
                        return Err(Error::Config(format!(
                            "layer {}: cannot pool {:?} by {}",
                            i, cur, k
                        )));
                    }
                    cur = vec![cur[0], cur[1] / k, cur[2] / k];
                }
                LayerSpec::Flatten => {
                    cur = vec![cur.iter().product()];
                }
            }
        }

        match self.layers.last() {
            Some(LayerSpec::Dense { out, relu: false }) if *out == self.num_classes => {}
            _ => {
                return Err(Error::Config(format!(
                    "final layer must be a plain dense layer of width {}",
                    self.num_classes
                )))
            }
        }
        Ok(shapes)
    }

    /// Index of the final dense layer in `layers`.
    pub fn final_layer(&self) -> usize {
        self.layers.len() - 1
    }

    /// Indices of parameterized layers, in order.
    pub fn param_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Dense { .. } | LayerSpec::Conv { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    /// Builds the logits expression for this architecture inside `g`,
    /// consuming `x` as the batch input node. Parameter names are shared, so
    /// calling this twice in one graph creates two heads over one parameter
    /// set.
    pub fn logits_into(&self, g: &mut ComputeGraph, x: NodeId) -> NodeId {
        let mut cur = x;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Dense { relu, .. } => {
                    let w = g.param(&format!("layer{}.w", i));
                    let b = g.param(&format!("layer{}.b", i));
                    let mm = g.matmul(cur, w);
                    cur = g.add_bias(mm, b);
                    if *relu {
                        cur = g.relu(cur);
                    }
                }
                LayerSpec::Conv { pad, relu, .. } => {
                    let w = g.param(&format!("layer{}.w", i));
                    let b = g.param(&format!("layer{}.b", i));
                    let c = g.conv2d(cur, w, *pad);
                    cur = g.add_chan_bias(c, b);
                    if *relu {
                        cur = g.relu(cur);
                    }
                }
                LayerSpec::AvgPool { k } => {
                    cur = g.avg_pool2d(cur, *k);
                }
                LayerSpec::Flatten => {
                    cur = g.flatten(cur);
                }
            }
        }
        cur
    }
}

/// Name, shape, and fan-in of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamShape {
    pub layer: usize,
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

/// A classifier: architecture + parameters + a prebuilt logits graph.
#[derive(Clone, Debug)]
pub struct Model<F> {
    arch: ArchSpec,
    params: ParamSet<F>,
    seed: u64,
    graph: ComputeGraph,
    logits_node: NodeId,
}

/// Anything that maps an input batch to a logits matrix. Implemented by
/// plain models and by tangent models, so evaluation code is shared.
pub trait LogitFn<F: Scalar> {
    fn logits(&self, x: &Tensor<F>) -> Result<Tensor<F>>;
    fn num_classes(&self) -> usize;
}

impl<F: Scalar> Model<F> {
    /// Deterministic init: weights are zero-mean normal with variance
    /// 2/fan_in, biases uniform on +-1/sqrt(fan_in). All draws happen in f64
    /// and are cast, so f32 and f64 models see the same sequence.
    pub fn init(arch: ArchSpec, seed: u64) -> Result<Self> {
        let shapes = arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for ps in &shapes {
            params.set(ps.name.clone(), draw_param(&ps.shape, ps.fan_in, ps.is_weight(), &mut rng));
        }
        let mut graph = ComputeGraph::new();
        let x = graph.input("x");
        let logits_node = arch.logits_into(&mut graph, x);
        Ok(Model { arch, params, seed, graph, logits_node })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Prebuilt single-head logits graph and its input/output nodes. The
    /// input is bound under the name `"x"`.
    pub fn graph(&self) -> (&ComputeGraph, NodeId) {
        (&self.graph, self.logits_node)
    }

    /// Parameter names of one layer, `[w, b]`.
    pub fn layer_param_names(&self, layer: usize) -> Vec<String> {
        vec![format!("layer{}.w", layer), format!("layer{}.b", layer)]
    }

    /// Parameter names of the final dense head.
    pub fn final_layer_param_names(&self) -> Vec<String> {
        self.layer_param_names(self.arch.final_layer())
    }

    /// All parameter names in declaration order.
    pub fn all_param_names(&self) -> Vec<String> {
        self.params.names().map(String::from).collect()
    }

    /// Names for the last `k` parameterized layers (fewer if the network is
    /// shallower).
    pub fn last_layers_param_names(&self, k: usize) -> Vec<String> {
        let layers = self.arch.param_layers();
        let start = layers.len().saturating_sub(k);
        layers[start..].iter().flat_map(|&l| self.layer_param_names(l)).collect()
    }

    /// Re-draws the final dense layer (weights and bias) from the init
    /// distribution, leaving every other tensor bitwise untouched.
    pub fn reset_final_layer(&mut self, seed: u64) {
        let layer = self.arch.final_layer();
        let shapes = self.arch.validate().expect("model arch was validated at init");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for ps in shapes.iter().filter(|ps| ps.layer == layer) {
            self.params
                .set(ps.name.clone(), draw_param(&ps.shape, ps.fan_in, ps.is_weight(), &mut rng));
        }
    }

    /// Writes the checkpoint: magic, JSON header (arch, seed, dtype,
    /// parameter table, provenance), then raw little-endian values. The
    /// round trip is bitwise.
    pub fn save(&self, path: &Path, provenance: Option<&str>) -> Result<()> {
        let header = CheckpointHeader {
            arch: self.arch.clone(),
            seed: self.seed,
            dtype: F::DTYPE,
            params: self
                .params
                .iter()
                .map(|(n, t)| ParamRecord { name: n.to_string(), shape: t.shape().to_vec() })
                .collect(),
            config_hash: provenance.map(String::from),
        };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| Error::Data(format!("checkpoint header encode: {}", e)))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for (_, t) in self.params.iter() {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Reads a checkpoint written by [`Model::save`]. The stored dtype must
    /// match `F`; shapes must match the architecture in the header.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.len() < CHECKPOINT_MAGIC.len() + 4
            || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC
        {
            return Err(Error::Data(format!("{}: not a model checkpoint", path.display())));
        }
        let mut off = CHECKPOINT_MAGIC.len();
        let hlen = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        off += 4;
        if bytes.len() < off + hlen {
            return Err(Error::Data(format!("{}: truncated header", path.display())));
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[off..off + hlen])
            .map_err(|e| Error::Data(format!("{}: bad header: {}", path.display(), e)))?;
        off += hlen;
        if header.dtype != F::DTYPE {
            return Err(Error::Data(format!(
                "{}: checkpoint stores {}, requested {}",
                path.display(),
                header.dtype,
                F::DTYPE
            )));
        }
        let shapes = header.arch.validate().map_err(|e| match e {
            Error::Config(m) => Error::Data(format!("{}: {}", path.display(), m)),
            other => other,
        })?;
        if shapes.len() != header.params.len()
            || shapes
                .iter()
                .zip(&header.params)
                .any(|(s, r)| s.name != r.name || s.shape != r.shape)
        {
            return Err(Error::Data(format!(
                "{}: parameter table does not match architecture",
                path.display()
            )));
        }

        let mut params = ParamSet::new();
        let esize = F::DTYPE.size();
        for rec in &header.params {
            let n: usize = rec.shape.iter().product();
            let need = n * esize;
            if bytes.len() < off + need {
                return Err(Error::Data(format!("{}: truncated values", path.display())));
            }
            let data: Vec<F> =
                bytes[off..off + need].chunks_exact(esize).map(F::read_le).collect();
            off += need;
            params.set(rec.name.clone(), Tensor::new(rec.shape.clone(), data)?);
        }
        if off != bytes.len() {
            return Err(Error::Data(format!("{}: trailing bytes", path.display())));
        }

        let mut graph = ComputeGraph::new();
        let x = graph.input("x");
        let logits_node = header.arch.logits_into(&mut graph, x);
        Ok(Model { arch: header.arch, params, seed: header.seed, graph, logits_node })
    }
}

impl<F: Scalar> LogitFn<F> for Model<F> {
    fn logits(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let eval = self.graph.forward(&self.params, &[("x", x)])?;
        Ok(eval.value(self.logits_node).clone())
    }

    fn num_classes(&self) -> usize {
        self.arch.num_classes
    }
}

impl ParamShape {
    fn is_weight(&self) -> bool {
        self.name.ends_with(".w")
    }
}

fn draw_param<F: Scalar>(
    shape: &[usize],
    fan_in: usize,
    is_weight: bool,
    rng: &mut ChaCha8Rng,
) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    if is_weight {
        let std = (2.0 / fan_in as f64).sqrt();
        for _ in 0..n {
            let z: f64 = StandardNormal.sample(rng);
            data.push(F::from_f64(z * std));
        }
    } else {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for _ in 0..n {
            data.push(F::from_f64(rng.random_range(-bound..bound)));
        }
    }
    Tensor::new(shape.to_vec(), data).expect("draw_param shape")
}

const CHECKPOINT_MAGIC: &[u8] = b"ITLCKPT1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    arch: ArchSpec,
    seed: u64,
    dtype: Dtype,
    params: Vec<ParamRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
}

/// Row-wise argmax with first-maximum tie-breaking.
pub fn argmax_rows<F: Scalar>(logits: &Tensor<F>) -> Vec<usize> {
    let (r, c) = (logits.rows(), logits.cols());
    let mut out = Vec::with_capacity(r);
    for i in 0..r {
        let row = logits.row(i);
        let mut best = 0;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        out.push(best);
    }
    out
}

/// Row-wise argmax restricted to `allowed` class columns, first-maximum
/// tie-breaking in `allowed` order. This is the task-aware prediction rule.
pub fn argmax_rows_restricted<F: Scalar>(logits: &Tensor<F>, allowed: &[usize]) -> Vec<usize> {
    assert!(!allowed.is_empty(), "restricted argmax needs at least one class");
    let r = logits.rows();
    let mut out = Vec::with_capacity(r);
    for i in 0..r {
        let row = logits.row(i);
        let mut best = allowed[0];
        for &j in &allowed[1..] {
            if row[j] > row[best] {
                best = j;
            }
        }
        out.push(best);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_arch() -> ArchSpec {
        ArchSpec::mlp(2, &[8, 8], 4)
    }

    #[test]
    fn same_seed_is_bitwise_identical_and_seeds_differ() {
        let a = Model::<f32>::init(toy_arch(), 7).unwrap();
        let b = Model::<f32>::init(toy_arch(), 7).unwrap();
        let c = Model::<f32>::init(toy_arch(), 8).unwrap();
        assert!(a.params().bitwise_eq(b.params()));
        assert!(!a.params().bitwise_eq(c.params()));
    }

    #[test]
    fn f32_and_f64_models_draw_the_same_sequence() {
        let a = Model::<f32>::init(toy_arch(), 3).unwrap();
        let b = Model::<f64>::init(toy_arch(), 3).unwrap();
        for ((_, ta), (_, tb)) in a.params().iter().zip(b.params().iter()) {
            for (&x, &y) in ta.data().iter().zip(tb.data()) {
                assert_eq!(x, y as f32);
            }
        }
    }

    #[test]
    fn logits_shape_is_batch_by_classes() {
        let m = Model::<f64>::init(toy_arch(), 0).unwrap();
        let x = Tensor::new(vec![3, 2], vec![0.5; 6]).unwrap();
        let out = m.logits(&x).unwrap();
        assert_eq!(out.shape(), &[3, 4]);
    }

    #[test]
    fn zeroed_final_layer_gives_zero_logits() {
        let mut m = Model::<f64>::init(toy_arch(), 0).unwrap();
        for name in m.final_layer_param_names() {
            let shape = m.params().get(&name).unwrap().shape().to_vec();
            m.params_mut().set(name, Tensor::zeros(&shape));
        }
        let x = Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.3, 0.7]).unwrap();
        let out = m.logits(&x).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reset_touches_exactly_the_final_layer() {
        let mut m = Model::<f32>::init(toy_arch(), 1).unwrap();
        let before = m.params().clone();
        m.reset_final_layer(99);
        let final_names = m.final_layer_param_names();
        for (name, t) in m.params().iter() {
            let b = before.get(name).unwrap();
            if final_names.iter().any(|n| n == name) {
                assert!(!t.bitwise_eq(b), "{} should be redrawn", name);
            } else {
                assert!(t.bitwise_eq(b), "{} must be untouched", name);
            }
        }
    }

    #[test]
    fn invalid_archs_are_rejected() {
        let no_head = ArchSpec {
            input_shape: vec![2],
            layers: vec![LayerSpec::Dense { out: 3, relu: true }],
            num_classes: 4,
        };
        assert!(no_head.validate().is_err());

        let zero_width = ArchSpec {
            input_shape: vec![2],
            layers: vec![
                LayerSpec::Dense { out: 0, relu: true },
                LayerSpec::Dense { out: 4, relu: false },
            ],
            num_classes: 4,
        };
        assert!(zero_width.validate().is_err());

        let one_class = ArchSpec::mlp(2, &[4], 1);
        assert!(one_class.validate().is_err());
    }

    #[test]
    fn cnn_arch_validates_and_runs() {
        let arch = ArchSpec::small_cnn([1, 8, 8], [4, 8], 10);
        let m = Model::<f32>::init(arch, 0).unwrap();
        let x = Tensor::new(vec![2, 1, 8, 8], vec![0.1; 128]).unwrap();
        let out = m.logits(&x).unwrap();
        assert_eq!(out.shape(), &[2, 10]);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = Model::<f32>::init(toy_arch(), 42).unwrap();
        m.save(&path, Some("deadbeef")).unwrap();
        let loaded = Model::<f32>::load(&path).unwrap();
        assert!(m.params().bitwise_eq(loaded.params()));
        assert_eq!(m.seed(), loaded.seed());
        assert_eq!(m.arch(), loaded.arch());
    }

    #[test]
    fn checkpoint_rejects_wrong_magic_and_dtype() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        std::fs::write(&path, b"NOTACKPT").unwrap();
        assert!(matches!(Model::<f32>::load(&path), Err(Error::Data(_))));

        let m = Model::<f32>::init(toy_arch(), 0).unwrap();
        m.save(&path, None).unwrap();
        assert!(matches!(Model::<f64>::load(&path), Err(Error::Data(_))));
    }

    #[test]
    fn argmax_breaks_ties_toward_first_class() {
        let l = Tensor::new(vec![2, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&l), vec![0, 1]);
        assert_eq!(argmax_rows_restricted(&l, &[1, 2]), vec![1, 1]);
    }
}
