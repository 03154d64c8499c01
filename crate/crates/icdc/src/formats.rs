//! JSON-lines instance files and JSON solution files.
//!
//! Floats are written in scientific notation with 17 significant digits so
//! that every `f64` survives a round trip bit for bit.

use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use icdc_core::problems::{AtspInstance, NavInstance, PmspInstance};
use icdc_core::{Instance, Matrix, SolutionMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

/// `serde_json` formatter that prints floats with 17 significant digits.
#[derive(Clone, Copy, Debug, Default)]
pub struct ExactFloats;

impl serde_json::ser::Formatter for ExactFloats {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }
}

/// Serializes `value` as compact JSON with exact floats.
pub fn to_json_exact<T: Serialize>(value: &T) -> Result<String> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, ExactFloats);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(out).expect("serde_json emits UTF-8"))
}

/// One line of an instance file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum InstanceRecord {
    Atsp {
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default)]
        tmat: bool,
        dist: Vec<Vec<f64>>,
    },
    Pmsp {
        #[serde(default)]
        seed: Option<u64>,
        proc: Vec<Vec<f64>>,
    },
    Nav {
        #[serde(default)]
        seed: Option<u64>,
        coords: Vec<Vec<f64>>,
        speed_recip: Vec<Vec<f64>>,
        traffic: Vec<Vec<f64>>,
    },
}

fn nested(m: &Matrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

fn matrix(rows: &[Vec<f64>], what: &str) -> std::result::Result<Matrix, String> {
    Matrix::from_rows(rows).map_err(|e| format!("{what}: {e}"))
}

impl InstanceRecord {
    pub fn new(instance: &Instance, seed: Option<u64>) -> Self {
        match instance {
            Instance::Atsp(a) => InstanceRecord::Atsp { seed, tmat: a.tmat, dist: nested(&a.dist) },
            Instance::Pmsp(p) => InstanceRecord::Pmsp { seed, proc: nested(&p.proc) },
            Instance::Nav(v) => InstanceRecord::Nav {
                seed,
                coords: nested(&v.coords),
                speed_recip: nested(&v.speed_recip),
                traffic: nested(&v.traffic),
            },
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            InstanceRecord::Atsp { seed, .. } | InstanceRecord::Pmsp { seed, .. } | InstanceRecord::Nav { seed, .. } => *seed,
        }
    }

    pub fn to_instance(&self) -> std::result::Result<Instance, String> {
        let core = |e: icdc_core::Error| e.to_string();
        Ok(match self {
            InstanceRecord::Atsp { tmat, dist, .. } => Instance::Atsp(AtspInstance::new(matrix(dist, "dist")?, *tmat).map_err(core)?),
            InstanceRecord::Pmsp { proc, .. } => Instance::Pmsp(PmspInstance::new(matrix(proc, "proc")?).map_err(core)?),
            InstanceRecord::Nav { coords, speed_recip, traffic, .. } => Instance::Nav(
                NavInstance::new(matrix(coords, "coords")?, matrix(speed_recip, "speed_recip")?, matrix(traffic, "traffic")?)
                    .map_err(core)?,
            ),
        })
    }
}

/// A loaded instance together with the seed it was generated from.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub instances: Vec<Instance>,
    pub seeds: Vec<Option<u64>>,
}

pub fn write_instances(path: &Path, instances: &[Instance], seeds: &[Option<u64>]) -> Result<()> {
    let mut out = String::new();
    for (inst, seed) in instances.iter().zip(seeds) {
        out.push_str(&to_json_exact(&InstanceRecord::new(inst, *seed))?);
        out.push('\n');
    }
    fs::write(path, out).at(path)
}

pub fn read_instances(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path).at(path)?;
    let mut ds = Dataset { instances: Vec::new(), seeds: Vec::new() };
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.at(path)?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { path: path.to_path_buf(), line: i + 1, message };
        let rec: InstanceRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        ds.instances.push(rec.to_instance().map_err(parse_err)?);
        ds.seeds.push(rec.seed());
    }
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolutionRecord {
    pub rows: usize,
    pub cols: usize,
    pub bits: Vec<u8>,
}

impl From<&SolutionMatrix> for SolutionRecord {
    fn from(x: &SolutionMatrix) -> Self {
        Self { rows: x.rows(), cols: x.cols(), bits: x.bits().iter().map(|&b| b as u8).collect() }
    }
}

impl TryFrom<SolutionRecord> for SolutionMatrix {
    type Error = String;

    fn try_from(r: SolutionRecord) -> std::result::Result<Self, String> {
        if r.bits.iter().any(|&b| b > 1) {
            return Err("solution bits must be 0 or 1".into());
        }
        SolutionMatrix::from_bits(r.rows, r.cols, r.bits.into_iter().map(|b| b == 1).collect()).map_err(|e| e.to_string())
    }
}

pub fn write_solution(path: &Path, x: &SolutionMatrix) -> Result<()> {
    fs::write(path, serde_json::to_string(&SolutionRecord::from(x))?).at(path)
}

pub fn read_solution(path: &Path) -> Result<SolutionMatrix> {
    let text = fs::read_to_string(path).at(path)?;
    let parse_err = |message: String| Error::Parse { path: path.to_path_buf(), line: 1, message };
    let rec: SolutionRecord = serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
    SolutionMatrix::try_from(rec).map_err(parse_err)
}
