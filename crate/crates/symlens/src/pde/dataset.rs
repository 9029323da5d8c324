//! Dataset generation and persistence.
//!
//! Trajectory file layout (little-endian):
//!   magic "PDEI" | u32 version=1 | u32 N | u32 C | u32 T |
//!   f64 dt | f64 ν | f64 κ | T·C·N·N f64 values in (t, c, i, j) order
//!
//! The manifest is JSON and records everything needed to reproduce the files
//! byte for byte, plus the per-channel RMS σ_c over training-split targets
//! that defines the SMSE normalization.

use super::{cfl_limit, default_dt, sample_ic, step, IcMode};
use crate::error::Error;
use crate::field::{Field, CHANNELS};
use crate::loss::SmseWeights;
use crate::rng;
use crate::{Real, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 4] = b"PDEI";
const VERSION: u32 = 1;

/// One simulated trajectory: `states.len()` ≥ 2 consecutive solver states.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Field<Real>>,
    pub dt: Real,
    pub nu: Real,
    pub kappa: Real,
}

impl Trajectory {
    /// One-step transitions (input, target).
    pub fn transitions(&self) -> impl Iterator<Item = (&Field<Real>, &Field<Real>)> {
        self.states.windows(2).map(|w| (&w[0], &w[1]))
    }
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    let n = traj.states[0].n();
    let t = traj.states.len();
    let mut buf: Vec<u8> =
        Vec::with_capacity(4 + 4 * 4 + 3 * 8 + t * CHANNELS * n * n * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(CHANNELS as u32).to_le_bytes());
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&traj.dt.to_le_bytes());
    buf.extend_from_slice(&traj.nu.to_le_bytes());
    buf.extend_from_slice(&traj.kappa.to_le_bytes());
    for state in &traj.states {
        for v in state.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let bad = |detail: &str| Error::FileFormat {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 36 || &bytes[..4] != MAGIC {
        return Err(bad("missing PDEI magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    if u32_at(4) != VERSION {
        return Err(bad("unsupported version"));
    }
    let n = u32_at(8) as usize;
    let c = u32_at(12) as usize;
    let t = u32_at(16) as usize;
    if c != CHANNELS || t < 2 {
        return Err(bad("bad channel count or state count"));
    }
    // header: 20 bytes of magic/dims, then dt, ν, κ
    let dt = f64_at(20);
    let nu = f64_at(28);
    let kappa = f64_at(36);
    let header = 44;
    let want = header + t * c * n * n * 8;
    if bytes.len() != want {
        return Err(bad(&format!(
            "expected {want} bytes for {t} states on {n}×{n}, found {}",
            bytes.len()
        )));
    }
    let mut states = Vec::with_capacity(t);
    let mut off = header;
    for _ in 0..t {
        let mut data = Vec::with_capacity(c * n * n);
        for _ in 0..c * n * n {
            data.push(f64_at(off));
            off += 8;
        }
        states.push(Field::from_vec(n, data)?);
    }
    Ok(Trajectory {
        states,
        dt,
        nu,
        kappa,
    })
}

/// Request for [`generate_dataset`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetRequest {
    pub grid: usize,
    pub trajectories: usize,
    /// States per trajectory (transitions per trajectory is one less).
    pub states: usize,
    pub ic: IcMode,
    pub nu: f64,
    pub kappa: f64,
    /// Time step; `None` picks [`default_dt`].
    pub dt: Option<f64>,
    pub seed: u64,
    /// Leading fraction of trajectories assigned to the training split.
    pub train_fraction: f64,
}

impl DatasetRequest {
    pub fn validate(&self) -> Result<()> {
        if self.grid < 4 {
            return Err(Error::config("grid must be at least 4"));
        }
        if self.trajectories == 0 || self.states < 2 {
            return Err(Error::config(
                "need at least one trajectory with two states",
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("train_fraction must lie in (0, 1)"));
        }
        if let IcMode::Anisotropic { aspect, .. } = self.ic {
            if aspect < 1.0 {
                return Err(Error::config("anisotropic aspect ratio must be ≥ 1"));
            }
        }
        Ok(())
    }
}

/// On-disk description of a generated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub grid: usize,
    pub states: usize,
    pub trajectories: usize,
    pub ic: IcMode,
    pub dt: f64,
    pub nu: f64,
    pub kappa: f64,
    pub seed: u64,
    /// Per-channel RMS over training-split targets (ρ, v_x, v_y).
    pub sigma: [f64; CHANNELS],
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub files: Vec<String>,
}

impl DatasetManifest {
    pub fn smse_weights(&self) -> Result<SmseWeights<Real>> {
        SmseWeights::new(self.sigma.to_vec())
    }
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Per-channel RMS over the target states (indices 1..) of the given
/// trajectories; the σ_c of the SMSE.
pub fn target_rms(trajectories: &[&Trajectory]) -> [f64; CHANNELS] {
    let mut sums = [0.0f64; CHANNELS];
    let mut count = 0usize;
    for traj in trajectories {
        for state in &traj.states[1..] {
            for c in 0..CHANNELS {
                let mut acc = 0.0;
                for v in state.plane(c) {
                    acc += v * v;
                }
                sums[c] += acc;
            }
            count += state.n() * state.n();
        }
    }
    let mut out = [0.0f64; CHANNELS];
    for c in 0..CHANNELS {
        out[c] = (sums[c] / count as f64).sqrt();
    }
    out
}

/// Generate trajectories, write them plus a manifest under `dir`, and return
/// the manifest. Fully deterministic in the request.
pub fn generate_dataset(req: &DatasetRequest, dir: &Path) -> Result<DatasetManifest> {
    req.validate()?;
    fs::create_dir_all(dir)?;
    let dt = req.dt.unwrap_or_else(|| default_dt(req.grid, req.nu, req.kappa));

    let mut trajectories = Vec::with_capacity(req.trajectories);
    let mut files = Vec::with_capacity(req.trajectories);
    for idx in 0..req.trajectories {
        let traj_seed = rng::derive(req.seed, 0x7261 + idx as u64);
        let mut states = Vec::with_capacity(req.states);
        let ic: Field<Real> = sample_ic(req.grid, req.ic, traj_seed);
        // the request is rejected up front if the first state already
        // violates the CFL bound
        if dt > cfl_limit(&ic, req.nu, req.kappa) {
            return Err(Error::Stability {
                dt,
                limit: cfl_limit(&ic, req.nu, req.kappa),
                detail: format!("trajectory {idx} initial condition"),
            });
        }
        states.push(ic);
        for _ in 1..req.states {
            let next = step(states.last().unwrap(), dt, req.nu, req.kappa)?;
            states.push(next);
        }
        let traj = Trajectory {
            states,
            dt,
            nu: req.nu,
            kappa: req.kappa,
        };
        let name = format!("traj_{idx:04}.pdei");
        write_trajectory(&dir.join(&name), &traj)?;
        files.push(name);
        trajectories.push(traj);
    }

    let n_train = ((req.trajectories as f64) * req.train_fraction).ceil() as usize;
    let n_train = n_train.clamp(1, req.trajectories - 1);
    let train_indices: Vec<usize> = (0..n_train).collect();
    let test_indices: Vec<usize> = (n_train..req.trajectories).collect();

    let train_refs: Vec<&Trajectory> = train_indices.iter().map(|&i| &trajectories[i]).collect();
    let sigma = target_rms(&train_refs);
    for (c, s) in sigma.iter().enumerate() {
        if !(*s > 0.0) {
            return Err(Error::degenerate(format!(
                "channel {c} has zero RMS over training targets; \
                 initial conditions are degenerate"
            )));
        }
    }

    let manifest = DatasetManifest {
        version: 1,
        grid: req.grid,
        states: req.states,
        trajectories: req.trajectories,
        ic: req.ic,
        dt,
        nu: req.nu,
        kappa: req.kappa,
        seed: req.seed,
        sigma,
        train_indices,
        test_indices,
        files,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join(MANIFEST_NAME), json.as_bytes())?;
    Ok(manifest)
}

/// A dataset loaded back from disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub trajectories: Vec<Trajectory>,
    pub dir: PathBuf,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest_path = dir.join(MANIFEST_NAME);
        let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
        let mut trajectories = Vec::with_capacity(manifest.files.len());
        for name in &manifest.files {
            trajectories.push(read_trajectory(&dir.join(name))?);
        }
        Ok(Dataset {
            manifest,
            trajectories,
            dir: dir.to_path_buf(),
        })
    }

    /// All one-step transitions of a split, cloned into owned pairs, in
    /// (trajectory, time) order.
    pub fn transitions(&self, split: Split) -> Vec<(Field<Real>, Field<Real>)> {
        self.split_indices(split)
            .iter()
            .flat_map(|&i| {
                self.trajectories[i]
                    .transitions()
                    .map(|(a, b)| (a.clone(), b.clone()))
            })
            .collect()
    }

    pub fn split_indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.manifest.train_indices,
            Split::Test => &self.manifest.test_indices,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}
