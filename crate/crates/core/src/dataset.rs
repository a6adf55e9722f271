//! Labeled source / unlabeled target feature sets and their file formats.
//!
//! Binary layout (little endian): magic `OSDF`, `u32` version, `u64` rows,
//! `u64` dim, `u64` class inventory, `u8` label flag, row-major `f32`
//! features, then one `i32` label per row when the flag is set. Features
//! are narrowed to `f32` on write.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::tensor::Matrix;

const MAGIC: &[u8; 4] = b"OSDF";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    features: Matrix,
    labels: Option<Vec<usize>>,
    num_classes: usize,
    domain: Domain,
}

impl DomainDataset {
    pub fn new(features: Matrix, labels: Option<Vec<usize>>, num_classes: usize, domain: Domain) -> Result<Self> {
        if num_classes == 0 {
            return Err(usage("class inventory must be nonempty"));
        }
        if let Some(labels) = &labels {
            if labels.len() != features.rows() {
                return Err(Error::Format(format!(
                    "{} labels for {} samples",
                    labels.len(),
                    features.rows()
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
                return Err(Error::Format(format!(
                    "label {bad} outside inventory of {num_classes}"
                )));
            }
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            domain,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Labels, or a usage error naming `what` when the set is unlabeled.
    pub fn require_labels(&self, what: &str) -> Result<&[usize]> {
        self.labels()
            .ok_or_else(|| usage(format!("{what} needs a labeled dataset")))
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Same samples with labels dropped, as seen at training time.
    pub fn without_labels(&self) -> Self {
        Self {
            labels: None,
            ..self.clone()
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let labels = self
            .labels
            .as_ref()
            .map(|l| idx.iter().map(|&i| l[i]).collect());
        Self::new(self.features.select_rows(idx)?, labels, self.num_classes, self.domain)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for v in [self.len(), self.dim(), self.num_classes] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        w.write_all(&[u8::from(self.labels.is_some())])?;
        for &v in self.features.as_slice() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        if let Some(labels) = &self.labels {
            for &y in labels {
                let y = i32::try_from(y).map_err(|_| Error::Format(format!("label {y} too large")))?;
                w.write_all(&y.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R, domain: Domain) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a feature dataset file".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let mut header = [0usize; 3];
        let mut b8 = [0u8; 8];
        for h in &mut header {
            r.read_exact(&mut b8)?;
            *h = u64::from_le_bytes(b8) as usize;
        }
        let [n, d, classes] = header;
        if n == 0 || d == 0 {
            return Err(Error::Format(format!("empty dataset shape {n}x{d}")));
        }
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            r.read_exact(&mut b4)?;
            data.push(f64::from(f32::from_le_bytes(b4)));
        }
        let labels = match flag[0] {
            0 => None,
            1 => {
                let mut labels = Vec::with_capacity(n);
                for _ in 0..n {
                    r.read_exact(&mut b4)?;
                    let y = i32::from_le_bytes(b4);
                    labels.push(usize::try_from(y).map_err(|_| Error::Format(format!("negative label {y}")))?);
                }
                Some(labels)
            }
            other => return Err(Error::Format(format!("bad label flag {other}"))),
        };
        Self::new(Matrix::from_vec(n, d, data)?, labels, classes, domain)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, domain: Domain) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?), domain)
    }

    /// CSV with header `label,f0,..` (labeled) or `f0,..` (unlabeled).
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header: Vec<String> = (0..self.dim()).map(|k| format!("f{k}")).collect();
        if self.labels.is_some() {
            header.insert(0, "label".into());
        }
        w.write_record(&header).map_err(csv_err)?;
        for (i, row) in self.features.row_iter().enumerate() {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            if let Some(labels) = &self.labels {
                rec.insert(0, labels[i].to_string());
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_csv(path: &Path, num_classes: usize, domain: Domain) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let labeled = r.headers().map_err(csv_err)?.get(0) == Some("label");
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut dim = None;
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let line = i + 2;
            let parse_err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line,
                msg,
            };
            let mut fields = rec.iter();
            if labeled {
                let y = fields.next().unwrap_or("");
                labels.push(y.trim().parse::<usize>().map_err(|e| parse_err(format!("label `{y}`: {e}")))?);
            }
            let before = data.len();
            for f in fields {
                data.push(f.trim().parse::<f64>().map_err(|e| parse_err(format!("value `{f}`: {e}")))?);
            }
            let width = data.len() - before;
            match dim {
                None => dim = Some(width),
                Some(d) if d != width => return Err(parse_err(format!("expected {d} features, got {width}"))),
                _ => {}
            }
        }
        let d = dim.ok_or_else(|| Error::Format(format!("{} has no rows", path.display())))?;
        let n = data.len() / d.max(1);
        Self::new(Matrix::from_vec(n, d, data)?, labeled.then_some(labels), num_classes, domain)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}
