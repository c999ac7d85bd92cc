use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::mlp::Mlp;
use super::state::{CondCovNet, CondMeanNet, ConditionalGaussianState, InputScaling};
use crate::error::{AssimError, Result};
use crate::prob::Gaussian;

const MAGIC: &[u8; 8] = b"ASSIMCK1";

/// Everything needed to resume after step `step`: `ν_k` and `ρ_k`.
///
/// On disk: 8 magic bytes, the header length as a little-endian `u64`, a
/// JSON header, then all network weights as little-endian `f64`
/// (mean net first).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub nu: Gaussian,
    pub state: ConditionalGaussianState,
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    step: usize,
    nu_mean: Vec<f64>,
    /// Column-major.
    nu_factor: Vec<f64>,
    state_dim: usize,
    scaling: InputScaling,
    mean_sizes: Vec<usize>,
    cov_sizes: Vec<usize>,
    weight_count: usize,
    #[serde(default)]
    meta: serde_json::Value,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            step: self.step,
            nu_mean: self.nu.mean().iter().cloned().collect(),
            nu_factor: self.nu.cov_factor().iter().cloned().collect(),
            state_dim: self.state.state_dim,
            scaling: self.state.scaling.clone(),
            mean_sizes: self.state.mean_net.mlp.sizes().to_vec(),
            cov_sizes: self.state.cov_net.mlp.sizes().to_vec(),
            weight_count: self.state.weight_count(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * header.weight_count);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for w in self.state.weights() {
            out.extend_from_slice(&w.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| AssimError::InvalidArgument(format!("corrupt checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("short header"))?;
        let h: Header = serde_json::from_slice(body)?;
        let raw = &bytes[16 + hlen..];
        if raw.len() != 8 * h.weight_count {
            return Err(bad("weight block has the wrong length"));
        }
        let weights: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let d = h.nu_mean.len();
        if h.nu_factor.len() != d * d {
            return Err(bad("ν factor has the wrong length"));
        }
        let nu = Gaussian::new(DVector::from_vec(h.nu_mean), DMatrix::from_vec(d, d, h.nu_factor))?;
        let count = |sizes: &[usize]| sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum::<usize>();
        let km = count(&h.mean_sizes);
        if km > weights.len() {
            return Err(bad("weight count does not match layer sizes"));
        }
        let mean = Mlp::from_parts(h.mean_sizes, weights[..km].to_vec())?;
        let cov = Mlp::from_parts(h.cov_sizes, weights[km..].to_vec())?;
        Ok(Self {
            step: h.step,
            nu,
            state: ConditionalGaussianState {
                mean_net: CondMeanNet { mlp: mean },
                cov_net: CondCovNet { mlp: cov },
                scaling: h.scaling,
                state_dim: h.state_dim,
                step: h.step,
            },
            meta: h.meta,
        })
    }

    /// Writes to a temporary sibling, then renames into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes()?)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
