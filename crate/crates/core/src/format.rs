//! On-disk formats.
//!
//! # Array files (`.tno`)
//!
//! A fixed 64-byte little-endian header followed by the payload:
//!
//! | bytes  | content                                          |
//! |--------|--------------------------------------------------|
//! | 0..8   | magic `TNOARRAY`                                 |
//! | 8..10  | format version, u16 (= 1)                        |
//! | 10     | dtype code, u8: 1 = float32, 2 = float64         |
//! | 11     | rank, u8 (1..=4)                                 |
//! | 12..16 | reserved, zero                                   |
//! | 16..48 | four u64 dims; entries past `rank` are zero      |
//! | 48..56 | payload length in bytes, u64                     |
//! | 56..64 | FNV-1a 64 hash of the payload, u64               |
//!
//! The payload is the IEEE-754 values in C order, little-endian. Fields are
//! stored as `[channels, nx, ny, nz]`, phase maps as `[nx, ny, nz]`.
//!
//! # Dataset directories
//!
//! `manifest.toml` plus `samples/<id>.phase.tno` (float32 0/1) and, once
//! labeled, `samples/<id>.strain.f32.tno` and `samples/<id>.strain.f64.tno`
//! (oracle strain in physical units). The manifest lists every sample once
//! under `splits`. Every file is written to a temporary name and renamed,
//! the manifest last.
//!
//! # Checkpoints
//!
//! `checkpoint.toml` (model configuration, parameter layout, training
//! settings and history) next to `params.tno` (float64, rank 1).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetSpec, Sample, SampleMeta, Split};
use crate::error::{ensure, Error, Result};
use crate::field::{Field, Grid};
use crate::mandel::PhaseParams;
use crate::microgen::{GenParams, Microstructure};
use crate::nn::ParamSlot;
use crate::operators::{Model, ModelConfig};
use crate::oracle::SolveReport;
use crate::train::{TrainConfig, TrainHistory};

pub const MAGIC: &[u8; 8] = b"TNOARRAY";
pub const ARRAY_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 64;
pub const MANIFEST_SCHEMA: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayData {
    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn code(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 1,
            ArrayData::F64(_) => 2,
        }
    }

    /// Values widened to f64.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            ArrayData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            ArrayData::F64(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn encode_array(a: &Array) -> Result<Vec<u8>> {
    ensure!((1..=4).contains(&a.dims.len()), InvalidArgument, "array rank must be 1..=4, got {}", a.dims.len());
    ensure!(
        a.dims.iter().product::<usize>() == a.data.len(),
        Shape,
        "dims {:?} do not match {} values",
        a.dims,
        a.data.len()
    );
    let payload: Vec<u8> = match &a.data {
        ArrayData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        ArrayData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&ARRAY_VERSION.to_le_bytes());
    out.push(a.data.code());
    out.push(a.dims.len() as u8);
    out.extend_from_slice(&[0; 4]);
    for i in 0..4 {
        out.extend_from_slice(&(a.dims.get(i).copied().unwrap_or(0) as u64).to_le_bytes());
    }
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&fnv1a64(&payload).to_le_bytes());
    debug_assert_eq!(out.len(), HEADER_LEN);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().expect("eight bytes"))
}

pub fn decode_array(bytes: &[u8]) -> Result<Array> {
    ensure!(bytes.len() >= HEADER_LEN, Data, "file shorter than the {HEADER_LEN}-byte header");
    ensure!(&bytes[..8] == MAGIC, Data, "bad magic bytes");
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    ensure!(version == ARRAY_VERSION, Data, "unsupported array version {version}");
    let (code, rank) = (bytes[10], bytes[11] as usize);
    ensure!((1..=4).contains(&rank), Data, "invalid rank {rank}");
    let dims: Vec<usize> = (0..rank).map(|i| u64_at(bytes, 16 + 8 * i) as usize).collect();
    ensure!((rank..4).all(|i| u64_at(bytes, 16 + 8 * i) == 0), Data, "nonzero unused dims");
    let len = u64_at(bytes, 48) as usize;
    let payload = &bytes[HEADER_LEN..];
    ensure!(payload.len() == len, Data, "payload is {} bytes, header declares {len}", payload.len());
    ensure!(fnv1a64(payload) == u64_at(bytes, 56), Data, "checksum mismatch");
    let count: usize = dims.iter().product();
    let data = match code {
        1 => {
            ensure!(len == 4 * count, Data, "payload length does not match dims {dims:?}");
            ArrayData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
        }
        2 => {
            ensure!(len == 8 * count, Data, "payload length does not match dims {dims:?}");
            ArrayData::F64(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        }
        c => return Err(Error::Data(format!("unknown dtype code {c}"))),
    };
    Ok(Array { dims, data })
}

/// Write through a temporary file and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_array(path: &Path, a: &Array) -> Result<()> {
    write_atomic(path, &encode_array(a)?)
}

pub fn read_array(path: &Path) -> Result<Array> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_array(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn field_array_f64(f: &Field) -> Array {
    let g = f.grid();
    Array {
        dims: vec![f.channels(), g.nx, g.ny, g.nz],
        data: ArrayData::F64(f.data().to_vec()),
    }
}

pub fn field_array_f32(f: &Field) -> Array {
    let g = f.grid();
    Array {
        dims: vec![f.channels(), g.nx, g.ny, g.nz],
        data: ArrayData::F32(f.data().iter().map(|&x| x as f32).collect()),
    }
}

pub fn array_to_field(a: &Array) -> Result<Field> {
    ensure!(a.dims.len() == 4, Data, "field arrays have rank 4, found {}", a.dims.len());
    Field::from_vec(a.dims[0], Grid::new(a.dims[1], a.dims[2], a.dims[3]), a.data.to_f64())
}

pub fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Data(format!("cannot serialize: {e}")))
}

pub fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: u64,
    pub kappa: f64,
    pub eps_bar: [f64; 6],
    pub feature_sizes: [f64; 3],
    pub volume_fraction: f64,
    pub seed: u64,
    pub phase: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strain_f32: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strain_f64: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitLists {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub grid: [usize; 3],
    pub sample_count: usize,
    pub spec: DatasetSpec,
    pub splits: SplitLists,
    pub samples: Vec<SampleRecord>,
}

impl Manifest {
    /// Split of every listed id; rejects duplicates, overlaps and gaps.
    pub fn validate(&self) -> Result<std::collections::HashMap<u64, Split>> {
        ensure!(self.schema_version == MANIFEST_SCHEMA, Data, "unsupported manifest schema {}", self.schema_version);
        ensure!(self.sample_count == self.samples.len(), Data, "manifest declares {} samples but lists {}", self.sample_count, self.samples.len());
        let mut ids = std::collections::HashSet::new();
        for s in &self.samples {
            ensure!(ids.insert(s.id), Data, "duplicate sample id {}", s.id);
        }
        let mut split_of = std::collections::HashMap::new();
        for (split, list) in [(Split::Train, &self.splits.train), (Split::Val, &self.splits.val), (Split::Test, &self.splits.test)] {
            for id in list {
                ensure!(ids.contains(id), Data, "split {} names unknown sample {id}", split.name());
                if let Some(prev) = split_of.insert(*id, split) {
                    return Err(Error::Data(format!("sample {id} is in both the {} and {} splits", prev.name(), split.name())));
                }
            }
        }
        ensure!(split_of.len() == ids.len(), Data, "{} samples are not assigned to any split", ids.len() - split_of.len());
        Ok(split_of)
    }
}

fn sample_file(id: u64, what: &str) -> String {
    format!("samples/{id:06}.{what}.tno")
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.toml")
}

pub fn save_dataset(dir: &Path, d: &Dataset) -> Result<Manifest> {
    d.validate()?;
    let g = d.grid();
    let mut splits = SplitLists::default();
    let mut records = Vec::with_capacity(d.samples.len());
    for s in &d.samples {
        let id = s.meta.id;
        match s.meta.split {
            Split::Train => splits.train.push(id),
            Split::Val => splits.val.push(id),
            Split::Test => splits.test.push(id),
        }
        let phase = sample_file(id, "phase");
        write_array(
            &dir.join(&phase),
            &Array {
                dims: vec![g.nx, g.ny, g.nz],
                data: ArrayData::F32(s.microstructure.phase.iter().map(|&p| p as f32).collect()),
            },
        )?;
        let (mut f32_name, mut f64_name) = (None, None);
        if let Some(e) = &s.strain {
            let a = sample_file(id, "strain.f32");
            let b = sample_file(id, "strain.f64");
            write_array(&dir.join(&a), &field_array_f32(e))?;
            write_array(&dir.join(&b), &field_array_f64(e))?;
            f32_name = Some(a);
            f64_name = Some(b);
        }
        records.push(SampleRecord {
            id,
            kappa: s.meta.kappa,
            eps_bar: s.meta.eps_bar,
            feature_sizes: s.meta.feature_sizes,
            volume_fraction: s.meta.volume_fraction,
            seed: s.meta.seed,
            phase,
            strain_f32: f32_name,
            strain_f64: f64_name,
            oracle: s.report.as_ref().map(|r| OracleRecord {
                iterations: r.iterations,
                residual: r.residuals.last().copied().unwrap_or(f64::NAN),
                converged: r.converged,
            }),
        });
    }
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA,
        grid: g.dims(),
        sample_count: records.len(),
        spec: d.spec.clone(),
        splits,
        samples: records,
    };
    manifest.validate()?;
    write_atomic(&manifest_path(dir), to_toml(&manifest)?.as_bytes())?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let m: Manifest = read_toml(&manifest_path(dir))?;
    m.validate()?;
    Ok(m)
}

fn load_sample(dir: &Path, rec: &SampleRecord, split: Split, spec: &DatasetSpec, grid: Grid) -> Result<Sample> {
    let ctx = |e: Error| Error::Data(format!("sample {}: {e}", rec.id));
    let phase = read_array(&dir.join(&rec.phase)).map_err(ctx)?;
    ensure!(phase.dims == grid.dims(), Data, "sample {}: phase map has dims {:?}, expected {:?}", rec.id, phase.dims, grid.dims());
    let phase: Vec<u8> = phase
        .data
        .to_f64()
        .into_iter()
        .map(|p| if p == 0.0 { Ok(0) } else if p == 1.0 { Ok(1) } else { Err(Error::Data(format!("sample {}: phase value {p}", rec.id))) })
        .collect::<Result<_>>()?;
    let strain = match &rec.strain_f64 {
        Some(name) => {
            let f = array_to_field(&read_array(&dir.join(name)).map_err(ctx)?).map_err(ctx)?;
            ensure!(f.channels() == 6 && f.grid() == grid, Data, "sample {}: strain label has the wrong shape", rec.id);
            Some(f)
        }
        None => None,
    };
    let params = PhaseParams::new(spec.e1, spec.nu1, spec.nu2, rec.kappa).map_err(ctx)?;
    let gen = GenParams {
        feature_sizes: rec.feature_sizes,
        volume_fraction: rec.volume_fraction,
    };
    Ok(Sample {
        meta: SampleMeta {
            id: rec.id,
            split,
            kappa: rec.kappa,
            eps_bar: rec.eps_bar,
            feature_sizes: rec.feature_sizes,
            volume_fraction: rec.volume_fraction,
            seed: rec.seed,
        },
        microstructure: Microstructure {
            grid,
            phase,
            params,
            gen,
            seed: rec.seed,
        },
        strain,
        report: rec.oracle.as_ref().map(|o| SolveReport {
            iterations: o.iterations,
            residuals: vec![o.residual],
            converged: o.converged,
            c_eff: None,
        }),
    })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let m = load_manifest(dir)?;
    let split_of = m.validate()?;
    let grid = Grid::new(m.grid[0], m.grid[1], m.grid[2]);
    ensure!(grid == m.spec.grid(), Data, "manifest grid {:?} disagrees with its spec", m.grid);
    let samples = m
        .samples
        .iter()
        .map(|r| load_sample(dir, r, split_of[&r.id], &m.spec, grid))
        .collect::<Result<Vec<_>>>()?;
    let d = Dataset { spec: m.spec, samples };
    d.validate()?;
    Ok(d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub model: ModelConfig,
    pub param_count: usize,
    pub params_file: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub history: Option<TrainHistory>,
    pub slots: Vec<ParamSlot>,
}

pub fn save_checkpoint(dir: &Path, model: &Model, train: Option<&TrainConfig>, history: Option<&TrainHistory>) -> Result<()> {
    let params = Array {
        dims: vec![model.params().len()],
        data: ArrayData::F64(model.params().data().to_vec()),
    };
    write_array(&dir.join("params.tno"), &params)?;
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        model: model.config,
        param_count: model.params().len(),
        params_file: "params.tno".into(),
        train: train.cloned(),
        history: history.cloned(),
        slots: model.params().slots().to_vec(),
    };
    write_atomic(&dir.join("checkpoint.toml"), to_toml(&header)?.as_bytes())
}

pub fn load_checkpoint(dir: &Path) -> Result<(Model, CheckpointHeader)> {
    let header: CheckpointHeader = read_toml(&dir.join("checkpoint.toml"))?;
    ensure!(header.version == CHECKPOINT_VERSION, Data, "unsupported checkpoint version {}", header.version);
    let a = read_array(&dir.join(&header.params_file))?;
    ensure!(a.dims == [header.param_count], Data, "parameter file holds {:?} values, header declares {}", a.dims, header.param_count);
    let data = match a.data {
        ArrayData::F64(v) => v,
        ArrayData::F32(_) => return Err(Error::Data("checkpoint parameters must be float64".into())),
    };
    let model = Model::from_parts(header.model, &header.slots, data)?;
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn array_roundtrip_and_corruption() {
        let a = Array {
            dims: vec![2, 3],
            data: ArrayData::F32(vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, 0.0, 7.0]),
        };
        let bytes = encode_array(&a).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(decode_array(&bytes).unwrap(), a);
        assert!(decode_array(&bytes[..bytes.len() - 1]).is_err());
        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 1;
        assert!(decode_array(&flipped).unwrap_err().to_string().contains("checksum"));
        assert!(encode_array(&Array { dims: vec![4], data: ArrayData::F64(vec![0.0; 3]) }).is_err());
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let spec = DatasetSpec::desk(2, 0);
        let rec = |id| SampleRecord {
            id,
            kappa: 10.0,
            eps_bar: [1e-3, 0.0, 0.0, 0.0, 0.0, 0.0],
            feature_sizes: [2.0; 3],
            volume_fraction: 0.5,
            seed: 1,
            phase: sample_file(id, "phase"),
            strain_f32: None,
            strain_f64: None,
            oracle: None,
        };
        let mut m = Manifest {
            schema_version: MANIFEST_SCHEMA,
            grid: [16; 3],
            sample_count: 2,
            spec,
            splits: SplitLists {
                train: vec![0],
                val: vec![],
                test: vec![1],
            },
            samples: vec![rec(0), rec(1)],
        };
        assert!(m.validate().is_ok());
        m.splits.val = vec![1];
        assert!(m.validate().unwrap_err().to_string().contains("both"));
        m.splits.val.clear();
        m.splits.test.clear();
        assert!(m.validate().is_err());
    }
}
