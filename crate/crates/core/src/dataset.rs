//! Snapshot time series grouped by trajectory, with binary and CSV storage.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

const MAGIC: &[u8; 8] = b"EDMDDLDS";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("dataset is empty")]
    Empty,
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset header: {0}")]
    Header(#[from] serde_json::Error),
}

/// Which system produced the data, with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum SystemDescriptor {
    Duffing {
        alpha: f64,
        beta: f64,
        gamma: f64,
        dt: f64,
    },
    Ks {
        length: f64,
        nx: usize,
        dt: f64,
        substeps: usize,
        conservative: bool,
    },
    Custom {
        label: String,
    },
}

/// Snapshots stored snapshot-major (`d` values per snapshot) and grouped into
/// trajectories. Transition pairs never cross a trajectory boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesDataset {
    pub d: usize,
    pub snapshots: Vec<f64>,
    pub trajectory_lengths: Vec<usize>,
    pub system: SystemDescriptor,
    pub seed: u64,
    /// Trajectories discarded and resampled during generation.
    pub rejections: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    d: usize,
    n_pairs: usize,
    trajectory_lengths: Vec<usize>,
    system: SystemDescriptor,
    seed: u64,
    rejections: u64,
}

impl TimeSeriesDataset {
    /// Builds a dataset from trajectories, each a flat list of `d`-vectors.
    pub fn from_trajectories(
        d: usize,
        trajectories: Vec<Vec<f64>>,
        system: SystemDescriptor,
        seed: u64,
    ) -> Result<Self, DatasetError> {
        let mut snapshots = Vec::new();
        let mut lengths = Vec::with_capacity(trajectories.len());
        for t in trajectories {
            if d == 0 || t.len() % d != 0 {
                return Err(DatasetError::Invalid(format!(
                    "trajectory of {} values is not a multiple of d = {d}",
                    t.len()
                )));
            }
            lengths.push(t.len() / d);
            snapshots.extend(t);
        }
        let ds = Self {
            d,
            snapshots,
            trajectory_lengths: lengths,
            system,
            seed,
            rejections: 0,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Dataset of independent pairs `(x[i], y[i])`, each its own trajectory.
    pub fn from_pairs(d: usize, x: &[f64], y: &[f64]) -> Result<Self, DatasetError> {
        if d == 0 || x.len() != y.len() || x.len() % d != 0 {
            return Err(DatasetError::Invalid("pair arrays disagree in shape".into()));
        }
        let trajs = x
            .chunks(d)
            .zip(y.chunks(d))
            .map(|(a, b)| [a, b].concat())
            .collect();
        Self::from_trajectories(
            d,
            trajs,
            SystemDescriptor::Custom {
                label: "pairs".into(),
            },
            0,
        )
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.d == 0 {
            return Err(DatasetError::Invalid("state dimension is zero".into()));
        }
        let total: usize = self.trajectory_lengths.iter().sum();
        if total * self.d != self.snapshots.len() {
            return Err(DatasetError::Invalid(format!(
                "trajectory lengths cover {total} snapshots but {} values are stored",
                self.snapshots.len()
            )));
        }
        if self.snapshots.iter().any(|v| !v.is_finite()) {
            return Err(DatasetError::Invalid("non-finite snapshot value".into()));
        }
        if self.n_pairs() == 0 {
            return Err(DatasetError::Empty);
        }
        Ok(())
    }

    pub fn n_snapshots(&self) -> usize {
        self.snapshots.len() / self.d
    }

    pub fn n_pairs(&self) -> usize {
        self.trajectory_lengths
            .iter()
            .map(|&l| l.saturating_sub(1))
            .sum()
    }

    pub fn snapshot(&self, i: usize) -> &[f64] {
        &self.snapshots[i * self.d..(i + 1) * self.d]
    }

    /// `(from, to)` snapshot indices of every transition pair in canonical order.
    pub fn pair_indices(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.n_pairs());
        let mut start = 0;
        for &len in &self.trajectory_lengths {
            for k in 0..len.saturating_sub(1) {
                out.push((start + k, start + k + 1));
            }
            start += len;
        }
        out
    }

    /// Snapshots of trajectory `i` as one flat slice.
    pub fn trajectory(&self, i: usize) -> &[f64] {
        let start: usize = self.trajectory_lengths[..i].iter().sum();
        let len = self.trajectory_lengths[i];
        &self.snapshots[start * self.d..(start + len) * self.d]
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<(), DatasetError> {
        let header = serde_json::to_vec(&Header {
            d: self.d,
            n_pairs: self.n_pairs(),
            trajectory_lengths: self.trajectory_lengths.clone(),
            system: self.system.clone(),
            seed: self.seed,
            rejections: self.rejections,
        })?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        let mut buf = Vec::with_capacity(self.snapshots.len() * 8);
        for v in &self.snapshots {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self, DatasetError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(DatasetError::Invalid("not a dataset file (bad magic)".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(DatasetError::Invalid(format!(
                "unsupported dataset version {version}"
            )));
        }
        r.read_exact(&mut word)?;
        let mut header = vec![0u8; u32::from_le_bytes(word) as usize];
        r.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header)?;
        let total: usize = header.trajectory_lengths.iter().sum();
        let mut raw = Vec::new();
        r.read_to_end(&mut raw)?;
        if raw.len() != total * header.d * 8 {
            return Err(DatasetError::Invalid(format!(
                "expected {} data bytes, found {}",
                total * header.d * 8,
                raw.len()
            )));
        }
        let snapshots = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let ds = Self {
            d: header.d,
            snapshots,
            trajectory_lengths: header.trajectory_lengths,
            system: header.system,
            seed: header.seed,
            rejections: header.rejections,
        };
        ds.validate()?;
        if ds.n_pairs() != header.n_pairs {
            return Err(DatasetError::Invalid("pair count disagrees with header".into()));
        }
        Ok(ds)
    }

    /// CSV with columns `trajectory,step,x1..xd`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), DatasetError> {
        let cols: Vec<String> = (1..=self.d).map(|i| format!("x{i}")).collect();
        writeln!(w, "trajectory,step,{}", cols.join(","))?;
        let mut idx = 0;
        for (t, &len) in self.trajectory_lengths.iter().enumerate() {
            for step in 0..len {
                write!(w, "{t},{step}")?;
                for v in self.snapshot(idx) {
                    write!(w, ",{v:.16e}")?;
                }
                writeln!(w)?;
                idx += 1;
            }
        }
        Ok(())
    }
}
