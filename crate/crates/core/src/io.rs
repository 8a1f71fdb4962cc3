//! File formats.
//!
//! * Ensembles: magic `LFLOW01`, little-endian `u32 Lx, u32 Ly, u32 n_configs,
//!   f64 beta`, then `n_configs` frames of `2 Lx Ly` f64 link angles in
//!   `[mu][x][y]` order.
//! * Observable CSV: `traj,action,avg_plaq,charge,dH,accept`.
//! * Train log CSV: `epoch,loss,ess,mean_logq,mean_action,seconds`.
//! * Tensor archives (checkpoints): magic `LFCK01`, `u32 version,
//!   u32 n_tensors`, then per tensor `u32 name_len`, UTF-8 name,
//!   `u32 rank`, `rank x u32` dims and the f64 data; little-endian.
//!
//! Floats in CSV files are written with 17 significant digits, so every
//! writer/reader pair round-trips bit-exactly.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::hmc::ChainRecord;
use crate::lattice::{GaugeConfig, Geometry};
use crate::training::TrainLogRow;

pub const ENSEMBLE_MAGIC: &[u8; 7] = b"LFLOW01";
pub const TENSOR_MAGIC: &[u8; 6] = b"LFCK01";
pub const TENSOR_VERSION: u32 = 1;
pub const OBSERVABLE_HEADER: &str = "traj,action,avg_plaq,charge,dH,accept";
pub const TRAIN_LOG_HEADER: &str = "epoch,loss,ess,mean_logq,mean_action,seconds";

/// Offset of the `n_configs` field in an ensemble header.
const COUNT_OFFSET: u64 = 7 + 4 + 4;

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(f64::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::format("unexpected end of file")
    } else {
        Error::Io(e)
    }
}

fn to_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::format(format!("{what} {n} does not fit in u32")))
}

/// Streaming ensemble writer; the configuration count is patched on [`EnsembleWriter::finish`].
pub struct EnsembleWriter<W: Write + Seek> {
    inner: W,
    geom: Geometry,
    count: u32,
}

impl<W: Write + Seek> EnsembleWriter<W> {
    pub fn new(mut inner: W, geom: Geometry, beta: f64) -> Result<Self> {
        inner.write_all(ENSEMBLE_MAGIC)?;
        inner.write_all(&to_u32(geom.lx(), "Lx")?.to_le_bytes())?;
        inner.write_all(&to_u32(geom.ly(), "Ly")?.to_le_bytes())?;
        inner.write_all(&0u32.to_le_bytes())?;
        inner.write_all(&beta.to_le_bytes())?;
        Ok(Self { inner, geom, count: 0 })
    }

    pub fn write(&mut self, cfg: &GaugeConfig) -> Result<()> {
        if cfg.geometry() != self.geom {
            return Err(Error::domain(format!(
                "configuration on {} written to a {} ensemble",
                cfg.geometry(),
                self.geom
            )));
        }
        let mut buf = Vec::with_capacity(8 * cfg.angles().len());
        for a in cfg.angles() {
            buf.extend_from_slice(&a.to_le_bytes());
        }
        self.inner.write_all(&buf)?;
        self.count = self
            .count
            .checked_add(1)
            .ok_or_else(|| Error::format("more than u32::MAX configurations"))?;
        Ok(())
    }

    pub fn count(&self) -> u32 {
        self.count
    }

    /// Patch the count and flush; returns the inner writer.
    pub fn finish(mut self) -> Result<W> {
        let end = self.inner.stream_position()?;
        self.inner.seek(SeekFrom::Start(COUNT_OFFSET))?;
        self.inner.write_all(&self.count.to_le_bytes())?;
        self.inner.seek(SeekFrom::Start(end))?;
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// Ensemble header.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnsembleHeader {
    pub geom: Geometry,
    pub n_configs: usize,
    pub beta: f64,
}

/// Streaming ensemble reader.
pub struct EnsembleReader<R: Read> {
    inner: R,
    header: EnsembleHeader,
    read: usize,
}

impl<R: Read> EnsembleReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut magic = [0u8; 7];
        inner.read_exact(&mut magic).map_err(truncated)?;
        if &magic != ENSEMBLE_MAGIC {
            return Err(Error::format("not an ensemble file (bad magic)"));
        }
        let lx = read_u32(&mut inner)? as usize;
        let ly = read_u32(&mut inner)? as usize;
        let n_configs = read_u32(&mut inner)? as usize;
        let beta = read_f64(&mut inner)?;
        let geom = Geometry::new(lx, ly).map_err(|e| Error::format(format!("bad ensemble geometry: {e}")))?;
        Ok(Self {
            inner,
            header: EnsembleHeader { geom, n_configs, beta },
            read: 0,
        })
    }

    pub fn header(&self) -> EnsembleHeader {
        self.header
    }
}

impl<R: Read> Iterator for EnsembleReader<R> {
    type Item = Result<GaugeConfig>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.read == self.header.n_configs {
            return None;
        }
        self.read += 1;
        let n = self.header.geom.n_links();
        let mut buf = vec![0u8; 8 * n];
        if let Err(e) = self.inner.read_exact(&mut buf) {
            self.read = self.header.n_configs;
            return Some(Err(truncated(e)));
        }
        let angles = buf
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        Some(
            GaugeConfig::from_angles(self.header.geom, angles)
                .map_err(|e| Error::format(format!("frame {}: {e}", self.read - 1))),
        )
    }
}

pub fn write_ensemble(path: &Path, beta: f64, configs: &[GaugeConfig]) -> Result<()> {
    let geom = configs
        .first()
        .map(GaugeConfig::geometry)
        .ok_or_else(|| Error::domain("cannot infer geometry of an empty ensemble"))?;
    let mut w = EnsembleWriter::new(BufWriter::new(File::create(path)?), geom, beta)?;
    for c in configs {
        w.write(c)?;
    }
    w.finish()?;
    Ok(())
}

pub fn read_ensemble(path: &Path) -> Result<(EnsembleHeader, Vec<GaugeConfig>)> {
    let reader = EnsembleReader::new(BufReader::new(File::open(path)?))?;
    let header = reader.header();
    let configs = reader.collect::<Result<Vec<_>>>()?;
    Ok((header, configs))
}

/// `{:.16e}` prints 17 significant digits, enough to round-trip any f64.
fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_field<T: std::str::FromStr>(field: Option<&str>, name: &str, line: usize) -> Result<T> {
    let raw = field.ok_or_else(|| Error::format(format!("line {line}: missing column `{name}`")))?;
    raw.trim()
        .parse()
        .map_err(|_| Error::format(format!("line {line}: cannot parse `{name}` from {raw:?}")))
}

fn check_header<R: BufRead>(lines: &mut std::io::Lines<R>, expected: &str) -> Result<()> {
    match lines.next() {
        Some(line) => {
            if line?.trim_end() == expected {
                Ok(())
            } else {
                Err(Error::format(format!("expected CSV header `{expected}`")))
            }
        }
        None => Err(Error::format("empty CSV file")),
    }
}

/// Writes the observable CSV.
pub struct ObservableWriter<W: Write> {
    inner: W,
}

impl<W: Write> ObservableWriter<W> {
    pub fn new(mut inner: W) -> Result<Self> {
        writeln!(inner, "{OBSERVABLE_HEADER}")?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, r: &ChainRecord) -> Result<()> {
        writeln!(
            self.inner,
            "{},{},{},{},{},{}",
            r.traj,
            fmt_f64(r.action),
            fmt_f64(r.avg_plaq),
            r.charge,
            fmt_f64(r.delta_h),
            u8::from(r.accepted)
        )?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// Parse an observable CSV; records are tagged with `chain`.
pub fn read_observables<R: Read>(reader: R, chain: u64) -> Result<Vec<ChainRecord>> {
    let mut lines = BufReader::new(reader).lines();
    check_header(&mut lines, OBSERVABLE_HEADER)?;
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let n = i + 2;
        let mut f = line.split(',');
        let traj = parse_field(f.next(), "traj", n)?;
        let action = parse_field(f.next(), "action", n)?;
        let avg_plaq = parse_field(f.next(), "avg_plaq", n)?;
        let charge = parse_field(f.next(), "charge", n)?;
        let delta_h = parse_field(f.next(), "dH", n)?;
        let accepted = match parse_field::<u8>(f.next(), "accept", n)? {
            0 => false,
            1 => true,
            v => return Err(Error::format(format!("line {n}: accept must be 0 or 1, got {v}"))),
        };
        if f.next().is_some() {
            return Err(Error::format(format!("line {n}: too many columns")));
        }
        out.push(ChainRecord {
            chain,
            traj,
            action,
            avg_plaq,
            charge,
            delta_h,
            accepted,
        });
    }
    Ok(out)
}

pub fn read_observables_file(path: &Path, chain: u64) -> Result<Vec<ChainRecord>> {
    read_observables(File::open(path)?, chain)
}

/// Writes the train log CSV.
pub struct TrainLogWriter<W: Write> {
    inner: W,
}

impl<W: Write> TrainLogWriter<W> {
    pub fn new(mut inner: W) -> Result<Self> {
        writeln!(inner, "{TRAIN_LOG_HEADER}")?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, r: &TrainLogRow) -> Result<()> {
        writeln!(
            self.inner,
            "{},{},{},{},{},{}",
            r.epoch,
            fmt_f64(r.loss),
            fmt_f64(r.ess),
            fmt_f64(r.mean_logq),
            fmt_f64(r.mean_action),
            fmt_f64(r.seconds)
        )?;
        self.inner.flush()?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub fn read_train_log<R: Read>(reader: R) -> Result<Vec<TrainLogRow>> {
    let mut lines = BufReader::new(reader).lines();
    check_header(&mut lines, TRAIN_LOG_HEADER)?;
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let n = i + 2;
        let mut f = line.split(',');
        out.push(TrainLogRow {
            epoch: parse_field(f.next(), "epoch", n)?,
            loss: parse_field(f.next(), "loss", n)?,
            ess: parse_field(f.next(), "ess", n)?,
            mean_logq: parse_field(f.next(), "mean_logq", n)?,
            mean_action: parse_field(f.next(), "mean_action", n)?,
            seconds: parse_field(f.next(), "seconds", n)?,
            clipped: false,
        });
    }
    Ok(out)
}

/// Write named tensors in the checkpoint container format.
pub fn write_tensors<W: Write>(w: &mut W, tensors: &[(String, Tensor)]) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&to_u32(tensors.len(), "tensor count")?.to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&to_u32(bytes.len(), "name length")?.to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&to_u32(t.rank(), "rank")?.to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&to_u32(d, "dimension")?.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(8 * t.len());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Upper bound on a single tensor, to reject corrupt headers before allocating.
const MAX_TENSOR_LEN: usize = 1 << 28;

pub fn read_tensors<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::format("not a checkpoint file (bad magic)"));
    }
    let version = read_u32(r)?;
    if version != TENSOR_VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let n = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let len = read_u32(r)? as usize;
        if len > 4096 {
            return Err(Error::format(format!("tensor name length {len} is implausible")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| Error::format("tensor name is not UTF-8"))?;
        let rank = read_u32(r)? as usize;
        if rank > 8 {
            return Err(Error::format(format!("tensor {name}: rank {rank} is implausible")));
        }
        let shape = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let size = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&s| s <= MAX_TENSOR_LEN)
            .ok_or_else(|| Error::format(format!("tensor {name}: shape {shape:?} is too large")))?;
        let mut buf = vec![0u8; 8 * size];
        r.read_exact(&mut buf).map_err(truncated)?;
        let data = buf
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::format("trailing bytes after last tensor"));
    }
    Ok(out)
}

/// Write `bytes` to `path` through a temporary file and a rename, so readers
/// never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_path(path);
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}
