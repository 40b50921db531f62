//! Binary dataset and checkpoint files.
//!
//! Dataset file (`FMCD`), all integers and floats little-endian:
//!
//! ```text
//! magic "FMCD" | version u32 | M u32 | block count u32 | delta_f f64
//! | snr_db f64 | pilot_len u32 | noise mode u8 | flags u8
//! per block:  env_id u64 | role u8 | pair count u32
//!   per pair: user u32 | f_up f64 | f_down f64 | x [2M f64] | y [2M f64]
//!             | clean y [2M f64] (only when flags bit 0 is set)
//! ```
//!
//! Checkpoint file (`FMCK`):
//!
//! ```text
//! magic "FMCK" | version u32 | layer count u32 | sizes [u32] | activations [u8]
//! | provenance u8 | derivative order u32 | config digest [32 bytes, SHA-256]
//! | config length u32 | config JSON | param count u64
//! | per layer: W row-major [f64] then b [f64]
//! | history length u64 | loss history [f64]
//! ```
//!
//! Every file gets a `<name>.meta.json` sidecar mirroring the header; the
//! binary header is authoritative.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::channel::{NoiseMode, NoiseSpec, Role, SamplePair, TaskDataset};
use crate::error::{invalid, shape, Error, Result};
use crate::net::{Activation, LayerSpec, NetParams};
use crate::transfer::{Provenance, TrainConfig, TrainedModel};

pub const DATASET_MAGIC: &[u8; 4] = b"FMCD";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FMCK";
pub const FORMAT_VERSION: u32 = 1;

const FLAG_CLEAN_LABELS: u8 = 1;

/// File-level metadata of a dataset file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DatasetHeader {
    pub antennas: usize,
    pub delta_f: f64,
    pub noise: NoiseSpec,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        vs.iter().for_each(|v| self.f64(*v));
    }
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| invalid(format!("{what} {v} does not fit the file format")))
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    fn error(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        match end {
            Some(end) => {
                let s = &self.data[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error(
                self.pos,
                format!(
                    "truncated file: {what} needs {n} bytes, only {} remain (file length {})",
                    self.data.len() - self.pos,
                    self.data.len()
                ),
            )),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.error(self.pos, "length overflow"))?, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let found = self.take(4, "magic")?;
        if found != magic {
            return Err(self.error(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(found),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        let version = self.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(self.error(
                self.pos,
                format!("{} trailing bytes after the declared payload", self.data.len() - self.pos),
            ));
        }
        Ok(())
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    path.with_file_name(name)
}

fn write_sidecar(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(&sidecar_path(path), text.as_bytes())
}

#[derive(Serialize)]
struct DatasetSidecar<'a> {
    format: &'static str,
    version: u32,
    antennas: usize,
    delta_f: f64,
    noise: &'a NoiseSpec,
    clean_labels: bool,
    blocks: Vec<BlockSidecar>,
}

#[derive(Serialize)]
struct BlockSidecar {
    env_id: u64,
    role: Role,
    pairs: usize,
}

pub fn encode_dataset(header: &DatasetHeader, datasets: &[TaskDataset]) -> Result<Vec<u8>> {
    let dim = 2 * header.antennas;
    let all_pairs = || datasets.iter().flat_map(|d| d.pairs.iter());
    let clean = all_pairs().next().is_some_and(|p| p.y_clean.is_some());
    for p in all_pairs() {
        if p.y_clean.is_some() != clean {
            return Err(invalid("either every pair or no pair may carry a clean label"));
        }
        let clean_len = p.y_clean.as_ref().map_or(dim, Vec::len);
        if p.x.len() != dim || p.y.len() != dim || clean_len != dim {
            return Err(shape(format!(
                "pair vectors have lengths {}/{}/{}, header declares M = {} (length {dim})",
                p.x.len(),
                p.y.len(),
                clean_len,
                header.antennas
            )));
        }
    }
    let mut w = Writer::new();
    w.bytes(DATASET_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u32(to_u32(header.antennas, "antenna count")?);
    w.u32(to_u32(datasets.len(), "dataset count")?);
    w.f64(header.delta_f);
    w.f64(header.noise.snr_db);
    w.u32(header.noise.pilot_len);
    w.u8(header.noise.mode.tag());
    w.u8(if clean { FLAG_CLEAN_LABELS } else { 0 });
    for d in datasets {
        w.u64(d.env_id);
        w.u8(d.role.tag());
        w.u32(to_u32(d.len(), "pair count")?);
        for p in &d.pairs {
            w.u32(p.user);
            w.f64(p.f_up);
            w.f64(p.f_down);
            w.f64s(&p.x);
            w.f64s(&p.y);
            if let Some(c) = &p.y_clean {
                w.f64s(c);
            }
        }
    }
    Ok(w.buf)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<(DatasetHeader, Vec<TaskDataset>)> {
    let mut r = Reader::new(bytes);
    r.header(DATASET_MAGIC)?;
    let antennas = r.u32("antenna count")? as usize;
    let blocks = r.u32("dataset count")? as usize;
    let delta_f = r.f64("delta_f")?;
    let snr_db = r.f64("snr_db")?;
    let pilot_len = r.u32("pilot length")?;
    let mode_at = r.pos;
    let mode = NoiseMode::from_tag(r.u8("noise mode")?)
        .ok_or_else(|| r.error(mode_at, "unknown noise mode tag"))?;
    let flags_at = r.pos;
    let flags = r.u8("flags")?;
    if flags & !FLAG_CLEAN_LABELS != 0 {
        return Err(r.error(flags_at, format!("unknown flag bits {flags:#04x}")));
    }
    let clean = flags & FLAG_CLEAN_LABELS != 0;
    let dim = 2 * antennas;
    let mut datasets = Vec::with_capacity(blocks.min(1 << 16));
    for _ in 0..blocks {
        let env_id = r.u64("environment id")?;
        let role_at = r.pos;
        let role = Role::from_tag(r.u8("role")?).ok_or_else(|| r.error(role_at, "unknown role tag"))?;
        let n = r.u32("pair count")? as usize;
        let mut pairs = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let user = r.u32("user index")?;
            let f_up = r.f64("f_up")?;
            let f_down = r.f64("f_down")?;
            let x = r.f64s(dim, "uplink vector")?;
            let y = r.f64s(dim, "downlink vector")?;
            let y_clean = if clean { Some(r.f64s(dim, "clean downlink vector")?) } else { None };
            pairs.push(SamplePair {
                user,
                f_up,
                f_down,
                x,
                y,
                y_clean,
            });
        }
        datasets.push(TaskDataset { env_id, role, pairs });
    }
    r.finish()?;
    let header = DatasetHeader {
        antennas,
        delta_f,
        noise: NoiseSpec {
            snr_db,
            pilot_len,
            mode,
        },
    };
    Ok((header, datasets))
}

pub fn write_dataset(path: &Path, header: &DatasetHeader, datasets: &[TaskDataset]) -> Result<()> {
    let bytes = encode_dataset(header, datasets)?;
    write_atomic(path, &bytes)?;
    write_sidecar(
        path,
        &DatasetSidecar {
            format: "FMCD",
            version: FORMAT_VERSION,
            antennas: header.antennas,
            delta_f: header.delta_f,
            noise: &header.noise,
            clean_labels: datasets.iter().flat_map(|d| &d.pairs).any(|p| p.y_clean.is_some()),
            blocks: datasets
                .iter()
                .map(|d| BlockSidecar {
                    env_id: d.env_id,
                    role: d.role,
                    pairs: d.len(),
                })
                .collect(),
        },
    )
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<TaskDataset>)> {
    decode_dataset(&fs::read(path)?)
}

/// SHA-256 of the config's canonical JSON text, hex encoded.
pub fn config_digest(cfg: &TrainConfig) -> String {
    hex(&Sha256::digest(cfg.to_json().as_bytes()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize)]
struct CheckpointSidecar<'a> {
    format: &'static str,
    version: u32,
    sizes: &'a [usize],
    activations: &'a [Activation],
    provenance: Provenance,
    derivative_order: u32,
    config_digest: String,
    param_count: usize,
    history_len: usize,
}

pub fn encode_checkpoint(model: &TrainedModel) -> Result<Vec<u8>> {
    let spec = model.params.spec();
    let config = model.config.to_json();
    let mut w = Writer::new();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u32(to_u32(spec.sizes().len(), "layer count")?);
    for &s in spec.sizes() {
        w.u32(to_u32(s, "layer width")?);
    }
    for a in spec.activations() {
        w.u8(a.tag());
    }
    w.u8(model.provenance.tag());
    w.u32(model.derivative_order);
    w.bytes(&Sha256::digest(config.as_bytes()));
    w.u32(to_u32(config.len(), "config length")?);
    w.bytes(config.as_bytes());
    w.u64(model.params.len() as u64);
    w.f64s(model.params.as_slice());
    w.u64(model.loss_history.len() as u64);
    w.f64s(&model.loss_history);
    Ok(w.buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainedModel> {
    let mut r = Reader::new(bytes);
    r.header(CHECKPOINT_MAGIC)?;
    let count_at = r.pos;
    let layers = r.u32("layer count")? as usize;
    if layers < 2 || layers > 1 << 16 {
        return Err(r.error(count_at, format!("implausible layer count {layers}")));
    }
    let sizes = (0..layers)
        .map(|_| r.u32("layer width").map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let mut activations = Vec::with_capacity(layers - 1);
    for _ in 1..layers {
        let at = r.pos;
        let tag = r.u8("activation")?;
        activations.push(Activation::from_tag(tag).ok_or_else(|| r.error(at, format!("unknown activation tag {tag}")))?);
    }
    let spec = LayerSpec::new(sizes, activations)?;
    let prov_at = r.pos;
    let provenance = Provenance::from_tag(r.u8("provenance")?)
        .ok_or_else(|| r.error(prov_at, "unknown provenance tag"))?;
    let derivative_order = r.u32("derivative order")?;
    let digest_at = r.pos;
    let digest = r.take(32, "config digest")?.to_vec();
    let len = r.u32("config length")? as usize;
    let json_at = r.pos;
    let json = r.take(len, "config text")?;
    if Sha256::digest(json).as_slice() != digest.as_slice() {
        return Err(r.error(digest_at, "config digest does not match the stored config"));
    }
    let config: TrainConfig =
        serde_json::from_slice(json).map_err(|e| r.error(json_at, format!("config is not valid JSON: {e}")))?;
    let count_at = r.pos;
    let count = r.u64("parameter count")? as usize;
    if count != spec.param_count() {
        return Err(shape(format!(
            "layer sizes {:?} need {} parameters, payload declares {count} (byte {count_at})",
            spec.sizes(),
            spec.param_count()
        )));
    }
    let params = NetParams::from_flat(&spec, r.f64s(count, "parameters")?)?;
    let hist = r.u64("history length")? as usize;
    let loss_history = r.f64s(hist, "loss history")?;
    r.finish()?;
    Ok(TrainedModel {
        params,
        provenance,
        config,
        loss_history,
        derivative_order,
    })
}

pub fn write_checkpoint(path: &Path, model: &TrainedModel) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    write_atomic(path, &bytes)?;
    let spec = model.params.spec();
    write_sidecar(
        path,
        &CheckpointSidecar {
            format: "FMCK",
            version: FORMAT_VERSION,
            sizes: spec.sizes(),
            activations: spec.activations(),
            provenance: model.provenance,
            derivative_order: model.derivative_order,
            config_digest: config_digest(&model.config),
            param_count: model.params.len(),
            history_len: model.loss_history.len(),
        },
    )
}

pub fn read_checkpoint(path: &Path) -> Result<TrainedModel> {
    decode_checkpoint(&fs::read(path)?)
}
