//! Score-network weight files: raw little-endian `f32` parameters plus a
//! JSON manifest describing the architecture they belong to.

use std::path::Path;

use ctmoco_core::scorefield::NoiseSchedule;
use ctmoco_core::scorenet::{Architecture, ScoreNet};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, f32_from_le, sha256_hex, sidecar_path};

pub const FORMAT: &str = "ctmoco-scorenet/1";

/// Intensity mapping applied before the network sees an image:
/// `x_net = (x - offset) * scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub offset: f64,
    pub scale: f64,
    /// Nominal intensity range of the training images after normalization.
    pub range: [f64; 2],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            offset: 0.0,
            scale: 1.0,
            range: [0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightManifest {
    pub format: String,
    pub architecture: Architecture,
    /// `[out, in, 3, 3]` per convolution, input layer first.
    pub layer_shapes: Vec<[usize; 4]>,
    pub param_count: usize,
    /// SHA-256 of the architecture descriptor.
    pub architecture_hash: String,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub normalization: Normalization,
    pub dtype: String,
    pub byte_order: String,
    pub payload_sha256: String,
}

pub fn architecture_hash(arch: &Architecture) -> String {
    sha256_hex(arch.descriptor().as_bytes())
}

fn layer_shapes(arch: &Architecture) -> Vec<[usize; 4]> {
    let c = arch.channels;
    let mut shapes = vec![[c, Architecture::INPUT_CHANNELS, 3, 3]];
    shapes.extend((0..arch.layers.saturating_sub(2)).map(|_| [c, c, 3, 3]));
    shapes.push([1, c, 3, 3]);
    shapes
}

/// Writes `path` (parameters) and its `.json` manifest.
pub fn save_weights(net: &ScoreNet, normalization: Normalization, path: &Path) -> Result<WeightManifest> {
    let mut bytes = Vec::with_capacity(4 * net.params().len());
    for &p in net.params() {
        let f = p as f32;
        if f64::from(f) != p {
            return Err(Error::format(path, "parameter is not exactly representable as f32"));
        }
        bytes.extend_from_slice(&f.to_le_bytes());
    }
    let arch = *net.architecture();
    let manifest = WeightManifest {
        format: FORMAT.into(),
        architecture: arch,
        layer_shapes: layer_shapes(&arch),
        param_count: arch.param_count(),
        architecture_hash: architecture_hash(&arch),
        sigma_min: net.schedule().sigma_min(),
        sigma_max: net.schedule().sigma_max(),
        normalization,
        dtype: io::DTYPE.into(),
        byte_order: io::BYTE_ORDER.into(),
        payload_sha256: sha256_hex(&bytes),
    };
    io::write_bytes(path, &bytes)?;
    io::write_json(&sidecar_path(path), &manifest)?;
    Ok(manifest)
}

pub fn load_weights(path: &Path) -> Result<(ScoreNet, WeightManifest)> {
    let manifest: WeightManifest = io::read_json(&sidecar_path(path))?;
    let incompatible = |msg: String| Error::Core(ctmoco_core::Error::IncompatibleWeights(msg));
    if manifest.format != FORMAT {
        return Err(incompatible(format!("unknown weight format {:?}", manifest.format)));
    }
    let arch = manifest.architecture;
    arch.validate()?;
    let hash = architecture_hash(&arch);
    if hash != manifest.architecture_hash {
        return Err(incompatible(format!(
            "architecture hash {} does not match the recorded {}",
            hash, manifest.architecture_hash
        )));
    }
    if manifest.layer_shapes != layer_shapes(&arch) || manifest.param_count != arch.param_count() {
        return Err(incompatible("layer shapes do not match the architecture".into()));
    }
    if manifest.dtype != io::DTYPE || manifest.byte_order != io::BYTE_ORDER {
        return Err(Error::format(path, "unsupported dtype or byte order"));
    }
    let bytes = io::read_bytes(path)?;
    if bytes.len() != 4 * manifest.param_count {
        return Err(incompatible(format!(
            "payload holds {} bytes, architecture needs {} parameters",
            bytes.len(),
            manifest.param_count
        )));
    }
    if sha256_hex(&bytes) != manifest.payload_sha256 {
        return Err(Error::format(path, "payload checksum mismatch"));
    }
    let schedule = NoiseSchedule::new(manifest.sigma_min, manifest.sigma_max)?;
    let params = f32_from_le(&bytes).into_iter().map(f64::from).collect();
    let net = ScoreNet::from_params(arch, schedule, params)?;
    Ok((net, manifest))
}
