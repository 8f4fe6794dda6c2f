//! Fixed-capacity replay memory.
//!
//! Three update strategies cover all pipeline variants:
//!
//! * [`MemoryBuffer::stratified_merge`]: end-of-task merge that re-balances
//!   the buffer across all classes seen so far (equal quotas, remainder to
//!   ascending class ids, uniform selection within a class).
//! * [`MemoryBuffer::reservoir_update`]: classic streaming reservoir, one
//!   call per sample during training; item n is kept with probability
//!   min(1, capacity/n). Used with frozen logits attached.
//! * [`WeightedReservoir`]: per-task candidate pool under entropy-weighted
//!   reservoir sampling (priority u^(1/weight)); merged into the main
//!   buffer only at task end.
//!
//! Stored logits are frozen at insertion and never recomputed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};

#[derive(Clone, Debug)]
pub struct BufferEntry<F> {
    pub x: Tensor<F>,
    pub y: usize,
    /// Model outputs frozen at the step the sample was stored. Present in
    /// logit-replay mode, absent otherwise.
    pub logits: Option<Tensor<F>>,
    /// Which task the sample arrived with. Diagnostics only; learners never
    /// read it in class-incremental mode.
    pub task_id: usize,
}

#[derive(Clone, Debug)]
pub struct MemoryBuffer<F> {
    capacity: usize,
    entries: Vec<BufferEntry<F>>,
    seen: u64,
    rng: ChaCha8Rng,
}

impl<F: Scalar> MemoryBuffer<F> {
    pub fn new(capacity: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("buffer capacity must be positive".into()));
        }
        Ok(MemoryBuffer {
            capacity,
            entries: Vec::with_capacity(capacity),
            seen: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of samples ever offered to the buffer.
    pub fn seen_count(&self) -> u64 {
        self.seen
    }

    pub fn entries(&self) -> &[BufferEntry<F>] {
        &self.entries
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            *m.entry(e.y).or_insert(0) += 1;
        }
        m
    }

    /// End-of-task merge: pools the current entries with the task's samples
    /// and keeps a per-class quota of capacity / #seen-classes, remainder
    /// going to the lowest class ids. Selection within a class is uniform
    /// under `seed`; kept entries are carried over unmodified.
    pub fn stratified_merge(
        &mut self,
        task_data: &Dataset<F>,
        task_id: usize,
        seed: u64,
    ) -> Result<()> {
        if task_data.is_empty() {
            return Err(Error::Data("stratified merge with an empty task".into()));
        }
        let incoming: Vec<BufferEntry<F>> = (0..task_data.len())
            .map(|i| BufferEntry {
                x: task_data.sample(i),
                y: task_data.labels()[i],
                logits: None,
                task_id,
            })
            .collect();
        self.merge_stratified_entries(incoming, seed)
    }

    /// Stratified merge from an explicit candidate pool (used by the
    /// entropy-weighted strategy, whose candidates carry logits).
    pub fn merge_stratified_entries(
        &mut self,
        incoming: Vec<BufferEntry<F>>,
        seed: u64,
    ) -> Result<()> {
        if incoming.is_empty() {
            return Err(Error::Data("stratified merge with no incoming entries".into()));
        }
        let offered = incoming.len() as u64;
        let mut pool: Vec<BufferEntry<F>> = std::mem::take(&mut self.entries);
        pool.extend(incoming);

        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, e) in pool.iter().enumerate() {
            by_class.entry(e.y).or_default().push(i);
        }
        let n_classes = by_class.len();
        let base = self.capacity / n_classes;
        let remainder = self.capacity % n_classes;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep: Vec<usize> = Vec::with_capacity(self.capacity);
        for (rank, (_, members)) in by_class.iter().enumerate() {
            let quota = base + usize::from(rank < remainder);
            if members.len() <= quota {
                keep.extend_from_slice(members);
            } else {
                let mut picked: Vec<usize> =
                    rand::seq::index::sample(&mut rng, members.len(), quota)
                        .into_iter()
                        .collect();
                picked.sort_unstable();
                keep.extend(picked.into_iter().map(|k| members[k]));
            }
        }

        let mut keep_flags = vec![false; pool.len()];
        for &i in &keep {
            keep_flags[i] = true;
        }
        let mut kept: Vec<BufferEntry<F>> = Vec::with_capacity(keep.len());
        for (i, e) in pool.into_iter().enumerate() {
            if keep_flags[i] {
                kept.push(e);
            }
        }
        kept.sort_by_key(|e| e.y);
        self.entries = kept;
        self.seen += offered;
        debug_assert!(self.entries.len() <= self.capacity);
        Ok(())
    }

    /// Classic reservoir step: stores item n with probability
    /// min(1, capacity/n), evicting a uniform victim. Used once per training
    /// sample in logit-replay mode, so `entry.logits` is expected.
    pub fn reservoir_update(&mut self, entry: BufferEntry<F>) {
        self.seen += 1;
        if self.entries.len() < self.capacity {
            self.entries.push(entry);
        } else {
            let j = self.rng.random_range(0..self.seen);
            if (j as usize) < self.capacity {
                self.entries[j as usize] = entry;
            }
        }
    }

    /// Seeded batch of entry references: uniform without replacement when
    /// `batch_size <= len`, with replacement otherwise. Empty buffer gives
    /// an empty batch (the caller skips its replay term).
    pub fn sample_batch(&self, batch_size: usize, seed: u64) -> Vec<&BufferEntry<F>> {
        if self.entries.is_empty() || batch_size == 0 {
            return Vec::new();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if batch_size <= self.entries.len() {
            rand::seq::index::sample(&mut rng, self.entries.len(), batch_size)
                .into_iter()
                .map(|i| &self.entries[i])
                .collect()
        } else {
            (0..batch_size)
                .map(|_| &self.entries[rng.random_range(0..self.entries.len())])
                .collect()
        }
    }

    /// FNV digest over the stored logits' bits; stable iff no frozen logit
    /// has been touched.
    pub fn logits_digest(&self) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = OFFSET;
        for e in &self.entries {
            if let Some(l) = &e.logits {
                for v in l.data() {
                    for b in v.bits64().to_le_bytes() {
                        h ^= b as u64;
                        h = h.wrapping_mul(PRIME);
                    }
                }
            }
        }
        h
    }

    /// Writes the audit dump: magic, JSON header, then per-entry records
    /// (task id, label, input shape+values, optional logits). The generator
    /// state is not persisted; a reloaded buffer starts a fresh stream from
    /// the seed its loader passes.
    pub fn save(&self, path: &Path, provenance: Option<&str>) -> Result<()> {
        let header = DumpHeader {
            dtype: F::DTYPE,
            capacity: self.capacity,
            count: self.entries.len(),
            seen: self.seen,
            config_hash: provenance.map(String::from),
        };
        let hbytes = serde_json::to_vec(&header)
            .map_err(|e| Error::Data(format!("buffer header encode: {}", e)))?;
        let mut out = Vec::new();
        out.extend_from_slice(DUMP_MAGIC);
        out.extend_from_slice(&(hbytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&hbytes);
        for e in &self.entries {
            out.extend_from_slice(&(e.task_id as u32).to_le_bytes());
            out.extend_from_slice(&(e.y as u32).to_le_bytes());
            out.push(e.x.rank() as u8);
            for &d in e.x.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in e.x.data() {
                v.write_le(&mut out);
            }
            match &e.logits {
                Some(l) => {
                    out.extend_from_slice(&(l.len() as u32).to_le_bytes());
                    for &v in l.data() {
                        v.write_le(&mut out);
                    }
                }
                None => out.extend_from_slice(&0u32.to_le_bytes()),
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path, seed: u64) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let fail = |msg: String| Error::Data(format!("{}: {}", path.display(), msg));
        if bytes.len() < DUMP_MAGIC.len() + 4 || &bytes[..DUMP_MAGIC.len()] != DUMP_MAGIC {
            return Err(fail("not a buffer dump".into()));
        }
        let mut off = DUMP_MAGIC.len();
        let hlen = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        off += 4;
        if bytes.len() < off + hlen {
            return Err(fail("truncated header".into()));
        }
        let header: DumpHeader = serde_json::from_slice(&bytes[off..off + hlen])
            .map_err(|e| fail(format!("bad header: {}", e)))?;
        off += hlen;
        if header.dtype != F::DTYPE {
            return Err(fail(format!(
                "dump stores {}, requested {}",
                header.dtype,
                F::DTYPE
            )));
        }

        let esize = F::DTYPE.size();
        let mut buf = MemoryBuffer::new(header.capacity, seed)?;
        for _ in 0..header.count {
            if bytes.len() < off + 9 {
                return Err(fail("truncated record".into()));
            }
            let task_id = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
            let y = u32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap()) as usize;
            let ndim = bytes[off + 8] as usize;
            off += 9;
            if bytes.len() < off + 4 * ndim {
                return Err(fail("truncated shape".into()));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
                off += 4;
            }
            let n: usize = shape.iter().product();
            if bytes.len() < off + n * esize + 4 {
                return Err(fail("truncated values".into()));
            }
            let data: Vec<F> =
                bytes[off..off + n * esize].chunks_exact(esize).map(F::read_le).collect();
            off += n * esize;
            let x = Tensor::new(shape, data)?;
            let llen = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
            off += 4;
            let logits = if llen > 0 {
                if bytes.len() < off + llen * esize {
                    return Err(fail("truncated logits".into()));
                }
                let ld: Vec<F> =
                    bytes[off..off + llen * esize].chunks_exact(esize).map(F::read_le).collect();
                off += llen * esize;
                Some(Tensor::new(vec![llen], ld)?)
            } else {
                None
            };
            buf.entries.push(BufferEntry { x, y, logits, task_id });
        }
        if off != bytes.len() {
            return Err(fail("trailing bytes".into()));
        }
        if buf.entries.len() > header.capacity {
            return Err(fail("more entries than capacity".into()));
        }
        buf.seen = header.seen;
        Ok(buf)
    }
}

const DUMP_MAGIC: &[u8] = b"ITLBUF01";

#[derive(Serialize, Deserialize)]
struct DumpHeader {
    dtype: Dtype,
    capacity: usize,
    count: usize,
    seen: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

/// Per-batch entropy weights for weighted sampling: softmax entropies at
/// the given temperature, normalized to sum 1 over the batch. A batch with
/// no uncertainty anywhere falls back to uniform weights.
pub fn entropy_weights<F: Scalar>(logits: &Tensor<F>, temperature: f64) -> Result<Vec<f64>> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {}", temperature)));
    }
    let (r, c) = (logits.rows(), logits.cols());
    let mut ent = Vec::with_capacity(r);
    for i in 0..r {
        let row = logits.row(i);
        let m = row
            .iter()
            .map(|&v| v.to_f64() / temperature)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        let mut scaled = Vec::with_capacity(c);
        for &v in row {
            let e = (v.to_f64() / temperature - m).exp();
            scaled.push(e);
            denom += e;
        }
        let mut h = 0.0;
        for e in scaled {
            let p = e / denom;
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        ent.push(h);
    }
    let total: f64 = ent.iter().sum();
    if total <= 1e-12 {
        return Ok(vec![1.0 / r as f64; r]);
    }
    Ok(ent.into_iter().map(|h| h / total).collect())
}

/// Per-task candidate pool under key-based weighted reservoir sampling:
/// each offered entry gets priority u^(1/weight) with u uniform on [0,1),
/// and the pool keeps the highest-priority entries seen so far. Weight 0
/// gets priority 0 and can only occupy otherwise-empty slots.
#[derive(Clone, Debug)]
pub struct WeightedReservoir<F> {
    capacity: usize,
    slots: Vec<(f64, BufferEntry<F>)>,
    rng: ChaCha8Rng,
}

impl<F: Scalar> WeightedReservoir<F> {
    pub fn new(capacity: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("candidate pool capacity must be positive".into()));
        }
        Ok(WeightedReservoir {
            capacity,
            slots: Vec::with_capacity(capacity),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Offers one batch: weights come from the batch-normalized softmax
    /// entropies of `logits` (one row per entry).
    pub fn offer_batch(
        &mut self,
        entries: Vec<BufferEntry<F>>,
        logits: &Tensor<F>,
        temperature: f64,
    ) -> Result<()> {
        if logits.rank() != 2 || logits.rows() != entries.len() {
            return Err(Error::shape(
                "weighted reservoir",
                format!("{} entries vs logits {:?}", entries.len(), logits.shape()),
            ));
        }
        let weights = entropy_weights(logits, temperature)?;
        for (entry, w) in entries.into_iter().zip(weights) {
            let u: f64 = self.rng.random();
            let key = if w <= 0.0 || u <= 0.0 { 0.0 } else { u.powf(1.0 / w) };
            if self.slots.len() < self.capacity {
                self.slots.push((key, entry));
            } else {
                let (min_idx, min_key) = self
                    .slots
                    .iter()
                    .enumerate()
                    .map(|(i, (k, _))| (i, *k))
                    .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
                if key > min_key {
                    self.slots[min_idx] = (key, entry);
                }
            }
        }
        Ok(())
    }

    /// Takes the surviving candidates, dropping their priorities.
    pub fn drain(self) -> Vec<BufferEntry<F>> {
        self.slots.into_iter().map(|(_, e)| e).collect()
    }
}

/// Stacks sampled entries into training tensors: inputs, float labels, and
/// the frozen logits if every entry carries them. Mixed presence is a
/// corrupted buffer.
pub fn gather_entries<F: Scalar>(
    entries: &[&BufferEntry<F>],
) -> Result<(Tensor<F>, Tensor<F>, Option<Tensor<F>>)> {
    if entries.is_empty() {
        return Err(Error::Data("gather on an empty entry batch".into()));
    }
    let shape = entries[0].x.shape();
    let k = entries[0].x.len();
    let mut xs = Vec::with_capacity(entries.len() * k);
    let mut ys = Vec::with_capacity(entries.len());
    for e in entries {
        if e.x.shape() != shape {
            return Err(Error::Data(format!(
                "buffer entry shape {:?} differs from {:?}",
                e.x.shape(),
                shape
            )));
        }
        xs.extend_from_slice(e.x.data());
        ys.push(F::from_f64(e.y as f64));
    }
    let mut full_shape = vec![entries.len()];
    full_shape.extend_from_slice(shape);
    let x = Tensor::new(full_shape, xs)?;
    let y = Tensor::new(vec![entries.len()], ys)?;

    let with_logits = entries.iter().filter(|e| e.logits.is_some()).count();
    let logits = if with_logits == entries.len() {
        let c = entries[0].logits.as_ref().unwrap().len();
        let mut ls = Vec::with_capacity(entries.len() * c);
        for e in entries {
            let l = e.logits.as_ref().unwrap();
            if l.len() != c {
                return Err(Error::Data("inconsistent logit lengths in buffer".into()));
            }
            ls.extend_from_slice(l.data());
        }
        Some(Tensor::new(vec![entries.len(), c], ls)?)
    } else if with_logits == 0 {
        None
    } else {
        return Err(Error::Data("buffer mixes entries with and without logits".into()));
    };
    Ok((x, y, logits))
}
