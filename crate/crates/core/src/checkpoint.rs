//! Binary checkpoint container.
//!
//! Layout (little-endian unless noted):
//!
//! ```text
//! "MPSL"  u32 version  u64 config_hash  u64 epoch
//! u64 rng_seed  u64 rng_stream  u128 rng_word_pos
//! u32 array_count
//! array_count × { u32 name_len, name (UTF-8), u64 len, len × f64 }
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::Network;
use crate::neuron::LifConfig;
use crate::numerics::{DenseMatrix, RngState, SeededRng};
use crate::optim::Adam;
use crate::plasticity::{DeltaMode, MultiPathLayer, SbpParams};
use crate::trainer::{TrainConfig, Trainer};

pub const MAGIC: &[u8; 4] = b"MPSL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: Network,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: u64,
    pub rng: RngState,
    pub config_hash: u64,
}

impl Checkpoint {
    pub fn from_trainer(tr: &Trainer, config_hash: u64) -> Self {
        Self {
            net: tr.net.clone(),
            adam: tr.adam.clone(),
            epoch: tr.epoch as u64,
            rng: tr.shuffle_rng.state(),
            config_hash,
        }
    }

    /// Resumes training with `cfg`, which must describe the same layer sizes.
    pub fn into_trainer(self, cfg: TrainConfig) -> Result<Trainer> {
        Trainer::from_parts(cfg, self.net, Some(self.adam), self.epoch as usize, SeededRng::from_state(self.rng))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut arrays: Vec<(String, Vec<f64>)> = Vec::new();
        let net = &self.net;
        arrays.push(("meta.sizes".into(), net.sizes().iter().map(|&s| s as f64).collect()));
        let lif = net.lif;
        arrays.push(("meta.lif".into(), vec![lif.v_th, lif.rho_m, lif.a, lif.dt]));
        let delta = match net.delta_mode {
            DeltaMode::Full => 0.0,
            DeltaMode::Increment => 1.0,
        };
        arrays.push(("meta.delta_mode".into(), vec![delta]));
        arrays.push(("sbp".into(), vec![net.sbp.lambda_f, net.sbp.lambda_p, net.sbp.tau_w]));
        for (l, layer) in net.layers.iter().enumerate() {
            arrays.push((format!("layer{l}.w1"), layer.w1.as_slice().to_vec()));
            arrays.push((format!("layer{l}.w2"), layer.w2.as_slice().to_vec()));
            arrays.push((format!("layer{l}.w3"), layer.w3.as_slice().to_vec()));
            arrays.push((format!("layer{l}.dw2"), layer.dw2_last.as_slice().to_vec()));
            arrays.push((format!("layer{l}.lambda"), layer.lambda.to_vec()));
            arrays.push((format!("layer{l}.eta_beta"), vec![layer.eta, layer.beta]));
        }
        let a = &self.adam;
        // The step count is stored as an f64; exact below 2^53.
        arrays.push(("adam.hyper".into(), vec![a.lr, a.beta1, a.beta2, a.eps, a.step as f64]));
        arrays.push(("adam.m".into(), a.m.clone()));
        arrays.push(("adam.v".into(), a.v.clone()));

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.rng.seed.to_le_bytes());
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for (name, data) in &arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not an MPSL checkpoint".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let config_hash = r.u64()?;
        let epoch = r.u64()?;
        let rng = RngState {
            seed: r.u64()?,
            stream: r.u64()?,
            word_pos: u128::from_le_bytes(r.take(16)?.try_into().unwrap()),
        };
        let count = r.u32()? as usize;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?
                .to_string();
            let len = r.u64()? as usize;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::Checkpoint("array too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect::<Vec<_>>();
            arrays.insert(name, data);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let mut get = |name: &str, len: Option<usize>| -> Result<Vec<f64>> {
            let v = arrays
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
            match len {
                Some(n) if v.len() != n => Err(Error::Checkpoint(format!(
                    "array {name} has {} values, expected {n}",
                    v.len()
                ))),
                _ => Ok(v),
            }
        };
        let sizes: Vec<usize> = get("meta.sizes", None)?.into_iter().map(|s| s as usize).collect();
        if sizes.len() < 2 {
            return Err(Error::Checkpoint("fewer than two layer sizes".into()));
        }
        let lif = get("meta.lif", Some(4))?;
        let lif = LifConfig {
            v_th: lif[0],
            rho_m: lif[1],
            a: lif[2],
            dt: lif[3],
        };
        let delta_mode = if get("meta.delta_mode", Some(1))?[0] == 0.0 {
            DeltaMode::Full
        } else {
            DeltaMode::Increment
        };
        let sbp = get("sbp", Some(3))?;
        let sbp = SbpParams {
            lambda_f: sbp[0],
            lambda_p: sbp[1],
            tau_w: sbp[2],
        };
        let mut layers = Vec::new();
        for (l, p) in sizes.windows(2).enumerate() {
            let (rows, cols) = (p[1], p[0]);
            let mut mat = |what: &str| -> Result<DenseMatrix> {
                DenseMatrix::from_vec(rows, cols, get(&format!("layer{l}.{what}"), Some(rows * cols))?)
            };
            let (w1, w2, w3, dw2) = (mat("w1")?, mat("w2")?, mat("w3")?, mat("dw2")?);
            let lambda = get(&format!("layer{l}.lambda"), Some(3))?;
            let eb = get(&format!("layer{l}.eta_beta"), Some(2))?;
            let mut layer = MultiPathLayer::from_parts(w1, w2, w3, [lambda[0], lambda[1], lambda[2]], eb[0], eb[1])?;
            layer.dw2_last = dw2;
            layers.push(layer);
        }
        let hyper = get("adam.hyper", Some(5))?;
        let n_params = sizes.windows(2).map(|p| p[0] * p[1] + 5).sum::<usize>() + 2;
        let adam = Adam {
            lr: hyper[0],
            beta1: hyper[1],
            beta2: hyper[2],
            eps: hyper[3],
            step: hyper[4] as u64,
            m: get("adam.m", Some(n_params))?,
            v: get("adam.v", Some(n_params))?,
        };
        if let Some(extra) = arrays.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected array {extra}")));
        }
        Ok(Self {
            net: Network {
                layers,
                sbp,
                lif,
                delta_mode,
            },
            adam,
            epoch,
            rng,
            config_hash,
        })
    }

    /// Writes to a temporary file next to `path`, then renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::from_bytes(&bytes)
    }
}

/// Write-temp-then-rename in the destination directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
