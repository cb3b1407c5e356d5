//! The optimizable Gaussian cloud and its parameter activations.
//!
//! Parameters live in unconstrained spaces: scales in log space, opacities
//! in logit space, rotations as (possibly unnormalized) quaternions stored
//! `w, x, y, z`. Covariances are built as `R S Sᵀ Rᵀ`.

use std::collections::hash_map::DefaultHasher;
use std::fs::File;
use std::hash::{Hash, Hasher};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3, Vector4};

use crate::error::{Error, Result};

/// Diagonal regularization applied to near-singular covariances.
pub const COV_EPSILON: f64 = 1e-8;
const MAX_CONDITION: f64 = 1e12;

const MAGIC: &[u8; 8] = b"HGSCLOUD";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianCloud {
    pub means: Vec<Vector3<f64>>,
    pub log_scales: Vec<Vector3<f64>>,
    /// Quaternions, `w` first.
    pub rotations: Vec<Vector4<f64>>,
    pub raw_opacities: Vec<f64>,
    /// Linear RGB; clamped to `[0, 1]` on activation.
    pub colors: Vec<Vector3<f64>>,
}

/// A Gaussian with its parameters mapped to their constrained forms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivatedGaussian {
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

/// One Gaussian's raw parameters, used when building clouds element-wise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianParams {
    pub mean: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    pub rotation: Vector4<f64>,
    pub raw_opacity: f64,
    pub color: Vector3<f64>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Rotation matrix of the unit quaternion `(w, x, y, z)`.
pub(crate) fn quat_to_matrix(q: &Vector4<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient on the rotation matrix back to the unit quaternion.
pub(crate) fn quat_to_matrix_vjp(q: &Vector4<f64>, d_r: &Matrix3<f64>) -> Vector4<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let g = |r: usize, c: usize| d_r[(r, c)];
    let dw = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
            + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    Vector4::new(dw, dx, dy, dz)
}

pub(crate) fn normalize_quat(q: &Vector4<f64>) -> Result<Vector4<f64>> {
    let n = q.norm();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateRotation);
    }
    Ok(q / n)
}

/// `R · diag(exp(log_scale))² · Rᵀ` for the normalized `rotation`.
pub fn build_covariance(log_scale: &Vector3<f64>, rotation: &Vector4<f64>) -> Result<Matrix3<f64>> {
    let r = quat_to_matrix(&normalize_quat(rotation)?);
    let s = log_scale.map(f64::exp);
    let m = r * Matrix3::from_diagonal(&s);
    let cov = m * m.transpose();
    // Exact symmetry regardless of rounding in the product.
    Ok((cov + cov.transpose()) * 0.5)
}

/// Unnormalized 3D Gaussian kernel `exp(-½ dᵀ Σ⁻¹ d)` with `d = x - mean`.
pub fn evaluate_gaussian(mean: &Vector3<f64>, cov: &Matrix3<f64>, x: &Vector3<f64>) -> Result<f64> {
    let d = x - mean;
    if d == Vector3::zeros() {
        return Ok(1.0);
    }
    let inv = regularized_inverse(cov)?;
    let q = d.dot(&(inv * d));
    Ok((-0.5 * q).exp())
}

fn regularized_inverse(cov: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let eig = cov.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    let ill = !(lo > 0.0) || hi / lo > MAX_CONDITION;
    let m = if ill {
        cov + Matrix3::identity() * COV_EPSILON
    } else {
        *cov
    };
    m.try_inverse()
        .filter(|inv| inv.iter().all(|v| v.is_finite()))
        .ok_or(Error::SingularCovariance)
}

impl GaussianCloud {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn push(&mut self, p: GaussianParams) {
        self.means.push(p.mean);
        self.log_scales.push(p.log_scale);
        self.rotations.push(p.rotation);
        self.raw_opacities.push(p.raw_opacity);
        self.colors.push(p.color);
    }

    pub fn params(&self, index: usize) -> GaussianParams {
        GaussianParams {
            mean: self.means[index],
            log_scale: self.log_scales[index],
            rotation: self.rotations[index],
            raw_opacity: self.raw_opacities[index],
            color: self.colors[index],
        }
    }

    pub fn set_params(&mut self, index: usize, p: GaussianParams) {
        self.means[index] = p.mean;
        self.log_scales[index] = p.log_scale;
        self.rotations[index] = p.rotation;
        self.raw_opacities[index] = p.raw_opacity;
        self.colors[index] = p.color;
    }

    pub fn opacity(&self, index: usize) -> f64 {
        sigmoid(self.raw_opacities[index])
    }

    pub fn max_scale(&self, index: usize) -> f64 {
        self.log_scales[index].max().exp()
    }

    /// Keeps the Gaussians whose mask entry is `true`, preserving order.
    pub fn retain_mask(&self, keep: &[bool]) -> GaussianCloud {
        let mut out = GaussianCloud::new();
        for (i, _) in keep.iter().enumerate().filter(|(_, k)| **k) {
            out.push(self.params(i));
        }
        out
    }

    /// Checks the shared-length invariant.
    pub fn validate(&self) -> Result<()> {
        let n = self.means.len();
        if self.log_scales.len() != n
            || self.rotations.len() != n
            || self.raw_opacities.len() != n
            || self.colors.len() != n
        {
            return Err(Error::DimensionMismatch(
                "gaussian cloud arrays have different lengths".into(),
            ));
        }
        Ok(())
    }

    pub fn activate(&self, index: usize) -> Result<ActivatedGaussian> {
        if index >= self.len() {
            return Err(Error::IndexOutOfRange {
                index,
                len: self.len(),
            });
        }
        Ok(ActivatedGaussian {
            mean: self.means[index],
            cov: build_covariance(&self.log_scales[index], &self.rotations[index])?,
            opacity: sigmoid(self.raw_opacities[index]),
            color: self.colors[index].map(|c| c.clamp(0.0, 1.0)),
        })
    }

    /// Stable 64-bit digest of every parameter bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.len().hash(&mut h);
        for i in 0..self.len() {
            for v in self.means[i]
                .iter()
                .chain(self.log_scales[i].iter())
                .chain(self.rotations[i].iter())
                .chain(std::iter::once(&self.raw_opacities[i]))
                .chain(self.colors[i].iter())
            {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Flattens parameters in the per-Gaussian order mean, log_scale,
    /// rotation, raw_opacity, color (14 values each).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * PARAMS_PER_GAUSSIAN);
        for i in 0..self.len() {
            out.extend(self.means[i].iter());
            out.extend(self.log_scales[i].iter());
            out.extend(self.rotations[i].iter());
            out.push(self.raw_opacities[i]);
            out.extend(self.colors[i].iter());
        }
        out
    }

    pub fn from_flat(flat: &[f64]) -> Result<GaussianCloud> {
        if !flat.len().is_multiple_of(PARAMS_PER_GAUSSIAN) {
            return Err(Error::DimensionMismatch(format!(
                "flat parameter vector of length {} is not a multiple of {PARAMS_PER_GAUSSIAN}",
                flat.len()
            )));
        }
        let mut cloud = GaussianCloud::new();
        for g in flat.chunks_exact(PARAMS_PER_GAUSSIAN) {
            cloud.push(GaussianParams {
                mean: Vector3::new(g[0], g[1], g[2]),
                log_scale: Vector3::new(g[3], g[4], g[5]),
                rotation: Vector4::new(g[6], g[7], g[8], g[9]),
                raw_opacity: g[10],
                color: Vector3::new(g[11], g[12], g[13]),
            });
        }
        Ok(cloud)
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for v in self.to_flat() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        w.flush()
    }

    pub fn read_from(mut r: impl Read) -> Result<GaussianCloud> {
        let bad = |m: &str| Error::BadCheckpoint(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("missing HGSCLOUD magic"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|_| bad("truncated header"))?;
        let version = u32::from_le_bytes(b4);
        if version != FORMAT_VERSION {
            return Err(Error::BadCheckpoint(format!("unsupported version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(|_| bad("truncated header"))?;
        let count = u64::from_le_bytes(b8) as usize;
        let mut flat = Vec::with_capacity(count.min(1 << 24) * PARAMS_PER_GAUSSIAN);
        for _ in 0..count * PARAMS_PER_GAUSSIAN {
            r.read_exact(&mut b4).map_err(|_| bad("truncated body"))?;
            flat.push(f32::from_le_bytes(b4) as f64);
        }
        GaussianCloud::from_flat(&flat)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<GaussianCloud> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        GaussianCloud::read_from(BufReader::new(f))
    }
}

pub const PARAMS_PER_GAUSSIAN: usize = 14;
