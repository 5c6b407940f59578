//! Dataset files: the `TICL` binary layout, a JSON manifest and 2-D scatter CSVs.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{PriorConfig, PriorKind, SyntheticDataset};
use crate::column::csv_io;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TICL";
pub const VERSION: u16 = 1;

/// A table with labels as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledTable {
    pub x: Tensor<f32>,
    pub y: Vec<usize>,
    pub classes: usize,
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Input(format!("{what}={v} does not fit in u32")))
}

/// `TICL`, u16 version, u32 n, u32 m, u32 C, `n*m` f32 row-major, `n` u32 labels;
/// all little-endian.
pub fn write_ticl<W: Write>(mut w: W, x: &Tensor<f32>, y: &[usize], classes: usize) -> Result<()> {
    if x.shape().len() != 2 || x.shape()[0] != y.len() {
        return Err(Error::Input(format!("{:?} table with {} labels", x.shape(), y.len())));
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (v, what) in [(x.shape()[0], "n"), (x.shape()[1], "m"), (classes, "classes")] {
        w.write_all(&u32_of(v, what)?.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(4 * (x.numel() + y.len()));
    for v in x.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &label in y {
        buf.extend_from_slice(&u32_of(label, "label")?.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_ticl<R: Read>(mut r: R) -> Result<LabeledTable> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Input("not a TICL dataset file".into()));
    }
    let mut v2 = [0u8; 2];
    r.read_exact(&mut v2)?;
    let version = u16::from_le_bytes(v2);
    if version != VERSION {
        return Err(Error::Input(format!("unsupported TICL version {version}")));
    }
    let mut header = [0u8; 12];
    r.read_exact(&mut header)?;
    let field = |i: usize| u32::from_le_bytes(header[4 * i..4 * i + 4].try_into().expect("4 bytes")) as usize;
    let (n, m, classes) = (field(0), field(1), field(2));
    let mut body = vec![0u8; 4 * (n * m + n)];
    r.read_exact(&mut body)?;
    let words: Vec<[u8; 4]> = body.chunks_exact(4).map(|c| c.try_into().expect("4 bytes")).collect();
    let x = words[..n * m].iter().map(|b| f32::from_le_bytes(*b)).collect();
    let y: Vec<usize> = words[n * m..].iter().map(|b| u32::from_le_bytes(*b) as usize).collect();
    if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label: bad, classes });
    }
    Ok(LabeledTable {
        x: Tensor::new(vec![n, m], x)?,
        y,
        classes,
    })
}

pub fn write_dataset<W: Write>(w: W, ds: &SyntheticDataset) -> Result<()> {
    write_ticl(w, &ds.x, &ds.y, ds.classes)
}

/// `x0,x1,label` using the first two features (a single feature is paired
/// with zeros).
pub fn write_scatter_csv<W: Write>(w: W, ds: &SyntheticDataset) -> Result<()> {
    let m = ds.m();
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["x0", "x1", "label"]).map_err(csv_io)?;
    for (i, row) in ds.x.rows().enumerate() {
        let x1 = if m > 1 { row[1] } else { 0.0 };
        out.write_record([row[0].to_string(), x1.to_string(), ds.y[i].to_string()])
            .map_err(csv_io)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: u64,
    pub file: String,
    pub seed: u64,
    pub kind: PriorKind,
    pub n: usize,
    pub m: usize,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub prior: PriorConfig,
    pub count: usize,
    pub scm_fraction: f64,
    pub tree_fraction: f64,
    pub datasets: Vec<ManifestEntry>,
    /// Run configuration of the producing command.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<serde_json::Value>,
}

impl Manifest {
    pub fn new(prior: PriorConfig, datasets: Vec<ManifestEntry>, run: Option<serde_json::Value>) -> Self {
        let count = datasets.len();
        let trees = datasets.iter().filter(|d| d.kind == PriorKind::TreeScm).count();
        let tree_fraction = if count == 0 { 0.0 } else { trees as f64 / count as f64 };
        Manifest {
            prior,
            count,
            scm_fraction: if count == 0 { 0.0 } else { 1.0 - tree_fraction },
            tree_fraction,
            datasets,
            run,
        }
    }
}
