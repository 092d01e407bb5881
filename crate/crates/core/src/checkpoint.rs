//! Binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic      8 bytes  "DRNCKPT1"
//! version    u32
//! doc_len    u64
//! doc        doc_len bytes of UTF-8 JSON (architectures, candidates,
//!            normalization, counters, RNG state, metric history)
//! records    repeated until end of file:
//!              name_len u32, name bytes, dtype u8 (0 = f32), rank u32,
//!              dims u64 × rank, payload
//! ```
//!
//! Record names are `classifier.<param>` / `predictor.<param>` for weights,
//! `<param>.momentum` for optimizer buffers and
//! `<net>.<site>.bank<j>.running_mean|running_var` for BN statistics.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, Read};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::ArchSpec;
use crate::error::{Error, Result};
use crate::gumbel::GumbelConfig;
use crate::model::{DRModel, ModelSpec};
use crate::nn::Network;
use crate::train::{EpochRecord, Stage, TrainState};

pub const MAGIC: &[u8; 8] = b"DRNCKPT1";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngDoc {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Document {
    stage: Stage,
    epoch: usize,
    global_step: u64,
    model_steps: u64,
    classifier: String,
    predictor: String,
    resolutions: Vec<usize>,
    costs: Vec<f64>,
    predictor_input: usize,
    predictor_cost: f64,
    gumbel: GumbelConfig,
    means: Vec<f64>,
    stds: Vec<f64>,
    shared_bn: bool,
    rng: RngDoc,
    history: Vec<EpochRecord>,
}

fn rng_doc(rng: &ChaCha8Rng) -> RngDoc {
    RngDoc {
        seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos().to_string(),
    }
}

fn rng_from_doc(d: &RngDoc) -> Result<ChaCha8Rng> {
    let bad = || Error::Load("malformed RNG state in checkpoint document".into());
    if d.seed.len() != 64 {
        return Err(bad());
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&d.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(d.stream);
    rng.set_word_pos(d.word_pos.parse().map_err(|_| bad())?);
    Ok(rng)
}

struct Slot {
    name: String,
    dims: Vec<usize>,
    data: Vec<f64>,
}

fn network_slots(prefix: &str, net: &Network) -> Vec<Slot> {
    let mut out = Vec::new();
    for p in net.params() {
        out.push(Slot {
            name: format!("{prefix}.{}", p.name),
            dims: p.tensor.shape().to_vec(),
            data: p.tensor.data().to_vec(),
        });
        if let Some(m) = &p.momentum_buffer {
            out.push(Slot {
                name: format!("{prefix}.{}.momentum", p.name),
                dims: p.tensor.shape().to_vec(),
                data: m.clone(),
            });
        }
    }
    for site in net.bn_sites() {
        for (j, bank) in site.banks.iter().enumerate() {
            for (stat, v) in [("running_mean", &bank.running_mean), ("running_var", &bank.running_var)] {
                out.push(Slot {
                    name: format!("{prefix}.{}.bank{j}.{stat}", site.name),
                    dims: vec![v.len()],
                    data: v.clone(),
                });
            }
        }
    }
    out
}

fn document(state: &TrainState) -> Document {
    let m = &state.model;
    Document {
        stage: state.stage,
        epoch: state.epoch,
        global_step: state.global_step,
        model_steps: m.steps,
        classifier: m.classifier.spec().to_string(),
        predictor: m.predictor.spec().to_string(),
        resolutions: m.resolutions.resolutions.clone(),
        costs: m.resolutions.costs.clone(),
        predictor_input: m.resolutions.predictor_input,
        predictor_cost: m.predictor_cost,
        gumbel: m.gumbel,
        means: m.means.clone(),
        stds: m.stds.clone(),
        shared_bn: m.classifier.shared_bn(),
        rng: rng_doc(&state.rng),
        history: state.history.clone(),
    }
}

/// Serializes `state`. Runtime values are first rounded to `f32` in place so
/// the live state equals what a later load restores; gradient buffers are
/// dropped.
pub fn encode_checkpoint(state: &mut TrainState) -> Result<Vec<u8>> {
    for net in [&mut state.model.classifier, &mut state.model.predictor] {
        net.quantize_to_f32();
        net.zero_grads();
    }
    let doc = serde_json::to_string_pretty(&document(state))
        .map_err(|e| Error::State(format!("cannot encode checkpoint document: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(doc.len() as u64).to_le_bytes());
    out.extend_from_slice(doc.as_bytes());
    let slots = network_slots("classifier", &state.model.classifier)
        .into_iter()
        .chain(network_slots("predictor", &state.model.predictor));
    for s in slots {
        out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
        out.extend_from_slice(s.name.as_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&(s.dims.len() as u32).to_le_bytes());
        for d in &s.dims {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &s.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes `state` to `path` atomically (temporary file plus rename).
pub fn save_checkpoint(path: &Path, state: &mut TrainState) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<R> {
    inner: R,
    offset: u64,
    len: u64,
}

impl<R: Read> Reader<R> {
    fn take(&mut self, n: u64, what: &str) -> Result<Vec<u8>> {
        if n > self.len - self.offset {
            return Err(Error::Load(format!(
                "truncated at byte {}: {what} needs {n} bytes, {} remain",
                self.offset,
                self.len - self.offset
            )));
        }
        let mut buf = vec![0u8; n as usize];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Load(format!("read failed at byte {}: {e}", self.offset)))?;
        self.offset += n;
        Ok(buf)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

struct Record {
    offset: u64,
    dims: Vec<usize>,
    data: Vec<f64>,
}

/// Parsed checkpoint contents before they are applied to a model.
pub struct CheckpointFile {
    doc: Document,
    records: Vec<(String, Record)>,
}

/// Reads and structurally validates a checkpoint file.
pub fn read_checkpoint(path: &Path) -> Result<CheckpointFile> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut r = Reader {
        inner: BufReader::new(file),
        offset: 0,
        len,
    };
    let ctx = |e: Error| Error::Load(format!("{}: {e}", path.display()));
    let magic = r.take(8, "magic").map_err(ctx)?;
    if magic != MAGIC {
        return Err(Error::Load(format!("{}: not a checkpoint (bad magic)", path.display())));
    }
    let version = r.u32("version").map_err(ctx)?;
    if version != VERSION {
        return Err(Error::Load(format!(
            "{}: format version {version}, expected {VERSION}",
            path.display()
        )));
    }
    let doc_len = r.u64("document length").map_err(ctx)?;
    let doc_bytes = r.take(doc_len, "document").map_err(ctx)?;
    let doc: Document = serde_json::from_slice(&doc_bytes)
        .map_err(|e| Error::Load(format!("{}: bad document: {e}", path.display())))?;
    let mut records = Vec::new();
    while r.offset < r.len {
        let offset = r.offset;
        let name_len = r.u32("record name length").map_err(ctx)?;
        let name = String::from_utf8(r.take(name_len as u64, "record name").map_err(ctx)?)
            .map_err(|_| Error::Load(format!("{}: record name at byte {offset} is not UTF-8", path.display())))?;
        let dtype = r.u8("dtype").map_err(ctx)?;
        if dtype != DTYPE_F32 {
            return Err(Error::Load(format!("{}: record {name} has unknown dtype {dtype}", path.display())));
        }
        let rank = r.u32("rank").map_err(ctx)?;
        let mut dims = Vec::with_capacity(rank.min(8) as usize);
        for _ in 0..rank {
            dims.push(r.u64("dimension").map_err(ctx)? as usize);
        }
        let count = dims.iter().try_fold(1u64, |a, &d| a.checked_mul(d as u64));
        let bytes = count.and_then(|c| c.checked_mul(4)).ok_or_else(|| {
            Error::Load(format!("{}: record {name} declares an impossible shape", path.display()))
        })?;
        let payload = r.take(bytes, &format!("payload of {name}")).map_err(ctx)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        records.push((name, Record { offset, dims, data }));
    }
    Ok(CheckpointFile { doc, records })
}

impl CheckpointFile {
    pub fn model_spec(&self) -> Result<ModelSpec> {
        let parse = |text: &str| -> Result<ArchSpec> { text.parse().map_err(|e| Error::Load(format!("{e}"))) };
        Ok(ModelSpec {
            classifier: parse(&self.doc.classifier)?,
            predictor: parse(&self.doc.predictor)?,
            resolutions: self.doc.resolutions.clone(),
            predictor_input: self.doc.predictor_input,
            gumbel: self.doc.gumbel,
            means: self.doc.means.clone(),
            stds: self.doc.stds.clone(),
        })
    }

    fn record_map(&self) -> Result<HashMap<&str, &Record>> {
        let mut map = HashMap::with_capacity(self.records.len());
        for (name, rec) in &self.records {
            if map.insert(name.as_str(), rec).is_some() {
                return Err(Error::Load(format!("record {name} appears twice (byte {})", rec.offset)));
            }
        }
        Ok(map)
    }

    /// Rebuilds the full training state.
    pub fn into_state(self) -> Result<TrainState> {
        let spec = self.model_spec()?;
        let mut model = DRModel::new(&spec, 0).map_err(|e| Error::Load(format!("cannot rebuild model: {e}")))?;
        let mut map = self.record_map()?;
        restore_network(&mut model.classifier, "classifier", &mut map, true)?;
        restore_network(&mut model.predictor, "predictor", &mut map, true)?;
        if let Some((name, rec)) = map.iter().min_by_key(|(_, r)| r.offset) {
            return Err(Error::Load(format!("unknown parameter name {name} at byte {}", rec.offset)));
        }
        model.classifier.set_shared_bn(self.doc.shared_bn);
        model.steps = self.doc.model_steps;
        Ok(TrainState {
            stage: self.doc.stage,
            epoch: self.doc.epoch,
            global_step: self.doc.global_step,
            model,
            history: self.doc.history.clone(),
            rng: rng_from_doc(&self.doc.rng)?,
        })
    }

    /// Copies the classifier weights and BN statistics into `target`, which
    /// must have the same classifier architecture. Momentum buffers are not
    /// carried over.
    pub fn load_classifier_into(&self, target: &mut DRModel) -> Result<()> {
        let mut map = self.record_map()?;
        map.retain(|k, _| k.starts_with("classifier.") && !k.ends_with(".momentum"));
        restore_network(&mut target.classifier, "classifier", &mut map, false)?;
        if let Some((name, _)) = map.iter().min_by_key(|(_, r)| r.offset) {
            return Err(Error::Load(format!(
                "checkpoint parameter {name} has no counterpart in the target classifier"
            )));
        }
        target.classifier.set_shared_bn(self.doc.shared_bn);
        Ok(())
    }
}

fn restore_network(net: &mut Network, prefix: &str, map: &mut HashMap<&str, &Record>, with_momentum: bool) -> Result<()> {
    let mut take = |name: String, dims: &[usize], required: bool| -> Result<Option<Vec<f64>>> {
        match map.remove(name.as_str()) {
            Some(rec) if rec.dims == dims => Ok(Some(rec.data.clone())),
            Some(rec) => Err(Error::Load(format!(
                "parameter {name} has shape {:?} in the checkpoint, model expects {dims:?}",
                rec.dims
            ))),
            None if required => Err(Error::Load(format!("parameter {name} missing from checkpoint"))),
            None => Ok(None),
        }
    };
    for p in net.params_mut() {
        let dims = p.tensor.shape().to_vec();
        let data = take(format!("{prefix}.{}", p.name), &dims, true)?.expect("required");
        p.tensor.data_mut().copy_from_slice(&data);
        p.tensor.grad = None;
        p.momentum_buffer = if with_momentum {
            take(format!("{prefix}.{}.momentum", p.name), &dims, false)?
        } else {
            None
        };
    }
    for site in net.bn_sites_mut() {
        let name = site.name.clone();
        for (j, bank) in site.banks.iter_mut().enumerate() {
            let c = bank.running_mean.len();
            bank.running_mean = take(format!("{prefix}.{name}.bank{j}.running_mean"), &[c], true)?.expect("required");
            bank.running_var = take(format!("{prefix}.{name}.bank{j}.running_var"), &[c], true)?.expect("required");
        }
    }
    Ok(())
}

/// Reads a checkpoint and rebuilds its training state.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    read_checkpoint(path)?.into_state()
}
