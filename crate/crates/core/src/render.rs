//! EWA projection of 3D Gaussians to screen-space splats and tiled
//! front-to-back alpha blending.
//!
//! Pixel `(x, y)` is sampled at the integer coordinate `(x, y)`. A splat's
//! kernel is truncated at Mahalanobis distance 3, which keeps every
//! contribution inside the splat's `radius` and therefore inside the tiles it
//! was binned to.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::camera::{Camera, NEAR_PLANE};
use crate::error::Result;
use crate::gaussian::{ActivatedGaussian, GaussianCloud};
use crate::img::Image;

pub const TILE_SIZE: usize = 16;
/// Low-pass dilation added to the 2D covariance diagonal (px²).
pub const DILATION: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// A pixel stops blending after the term that takes its transmittance
/// below this.
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
/// Squared Mahalanobis radius of the kernel support (3σ).
pub const SUPPORT_MAHALANOBIS2: f64 = 9.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat2D {
    pub mean2d: Vector2<f64>,
    /// Inverse 2D covariance `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub gaussian_index: usize,
    pub radius: f64,
}

impl Splat2D {
    #[inline]
    pub fn mahalanobis2(&self, px: f64, py: f64) -> f64 {
        let dx = px - self.mean2d.x;
        let dy = py - self.mean2d.y;
        let [a, b, c] = self.conic;
        a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
    }
}

/// One blended term of a pixel, in front-to-back order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contribution {
    /// Index into [`RenderOutput::splats`].
    pub splat: u32,
    pub gaussian: u32,
    pub alpha: f64,
    /// `alpha · transmittance` in front of this term.
    pub weight: f64,
    /// Whether `alpha` hit [`ALPHA_MAX`].
    pub clamped: bool,
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub image: Image,
    /// Per-pixel index of the max-weight Gaussian, −1 if none.
    pub rendered_index: Vec<i64>,
    pub final_transmittance: Vec<f64>,
    pub pixel_counts: Vec<u32>,
    pub visible: Vec<bool>,
    pub splats: Vec<Splat2D>,
    pub background: Vector3<f64>,
    contrib_offsets: Vec<usize>,
    contribs: Vec<Contribution>,
    pub(crate) token: Option<u64>,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    /// Front-to-back contributions of pixel `p = y·W + x`.
    pub fn contributions(&self, p: usize) -> &[Contribution] {
        &self.contribs[self.contrib_offsets[p]..self.contrib_offsets[p + 1]]
    }

    pub fn total_contributions(&self) -> usize {
        self.contribs.len()
    }

    /// Splat of each Gaussian, if it was projected.
    pub fn splat_of(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.pixel_counts.len()];
        for (s, sp) in self.splats.iter().enumerate() {
            out[sp.gaussian_index] = Some(s);
        }
        out
    }
}

pub(crate) fn render_token(cloud: &GaussianCloud, camera: &Camera, background: &Vector3<f64>) -> u64 {
    let mut h = DefaultHasher::new();
    cloud.fingerprint().hash(&mut h);
    for v in [camera.fx, camera.fy, camera.cx, camera.cy]
        .iter()
        .chain(camera.rotation.iter())
        .chain(camera.translation.iter())
        .chain(background.iter())
    {
        v.to_bits().hash(&mut h);
    }
    (camera.width, camera.height, camera.view_id).hash(&mut h);
    h.finish()
}

/// Perspective Jacobian of `(fx·x/z, fy·y/z)` at camera-space point `t`.
pub(crate) fn projection_jacobian(camera: &Camera, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    Matrix2x3::new(
        camera.fx * iz,
        0.0,
        -camera.fx * t.x * iz * iz,
        0.0,
        camera.fy * iz,
        -camera.fy * t.y * iz * iz,
    )
}

/// Dilated screen-space covariance `(A, B, C)` of a camera-space Gaussian.
pub(crate) fn screen_covariance(camera: &Camera, t: &Vector3<f64>, cov_world: &Matrix3<f64>) -> [f64; 3] {
    let j = projection_jacobian(camera, t);
    let cov_cam = camera.rotation * cov_world * camera.rotation.transpose();
    let c2 = j * cov_cam * j.transpose();
    [
        c2[(0, 0)] + DILATION,
        0.5 * (c2[(0, 1)] + c2[(1, 0)]),
        c2[(1, 1)] + DILATION,
    ]
}

pub fn project_gaussian(camera: &Camera, g: &ActivatedGaussian, index: usize) -> Option<Splat2D> {
    let t = camera.to_camera(&g.mean);
    if !(t.z > NEAR_PLANE) {
        return None;
    }
    let [a, b, c] = screen_covariance(camera, &t, &g.cov);
    let det = a * c - b * b;
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let mid = 0.5 * (a + c);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = 3.0 * lambda_max.sqrt();
    let mean2d = Vector2::new(
        camera.fx * t.x / t.z + camera.cx,
        camera.fy * t.y / t.z + camera.cy,
    );
    let (w, h) = ((camera.width - 1) as f64, (camera.height - 1) as f64);
    if mean2d.x + radius < 0.0 || mean2d.x - radius > w || mean2d.y + radius < 0.0 || mean2d.y - radius > h {
        return None;
    }
    Some(Splat2D {
        mean2d,
        conic: [c / det, -b / det, a / det],
        depth: t.z,
        opacity: g.opacity,
        color: g.color,
        gaussian_index: index,
        radius,
    })
}

struct TileResult {
    /// Contributions for the tile's pixels, row-major inside the tile.
    contribs: Vec<Contribution>,
    counts: Vec<u32>,
    colors: Vec<[f64; 3]>,
    rendered_index: Vec<i64>,
    final_t: Vec<f64>,
}

/// Blends `splats` front to back. `n_gaussians` sizes the per-Gaussian
/// statistics.
pub fn rasterize(
    splats: &[Splat2D],
    camera: &Camera,
    background: &Vector3<f64>,
    n_gaussians: usize,
) -> RenderOutput {
    let (w, h) = (camera.width, camera.height);
    let tiles_x = w.div_ceil(TILE_SIZE);
    let tiles_y = h.div_ceil(TILE_SIZE);

    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&i, &j| {
        splats[i]
            .depth
            .total_cmp(&splats[j].depth)
            .then(splats[i].gaussian_index.cmp(&splats[j].gaussian_index))
    });

    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for &s in &order {
        let sp = &splats[s];
        let span = |m: f64, limit: usize, tiles: usize| {
            let lo = (m - sp.radius).ceil().max(0.0);
            let hi = (m + sp.radius).floor().min((limit - 1) as f64);
            if lo > hi {
                None
            } else {
                Some((lo as usize / TILE_SIZE, (hi as usize / TILE_SIZE).min(tiles - 1)))
            }
        };
        let (Some((x0, x1)), Some((y0, y1))) = (span(sp.mean2d.x, w, tiles_x), span(sp.mean2d.y, h, tiles_y))
        else {
            continue;
        };
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                bins[ty * tiles_x + tx].push(s as u32);
            }
        }
    }

    let tiles: Vec<TileResult> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|tile| {
            let (tx, ty) = (tile % tiles_x, tile / tiles_x);
            let xs = tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(w);
            let ys = ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(h);
            let n = xs.len() * ys.len();
            let mut out = TileResult {
                contribs: Vec::new(),
                counts: Vec::with_capacity(n),
                colors: Vec::with_capacity(n),
                rendered_index: Vec::with_capacity(n),
                final_t: Vec::with_capacity(n),
            };
            for y in ys {
                for x in xs.clone() {
                    blend_pixel(splats, &bins[tile], x as f64, y as f64, background, &mut out);
                }
            }
            out
        })
        .collect();

    // Deterministic merge in fixed tile order.
    let mut counts = vec![0usize; w * h];
    for (tile, res) in tiles.iter().enumerate() {
        let (tx, ty) = (tile % tiles_x, tile / tiles_x);
        for_each_tile_pixel(tx, ty, w, h, |k, p| counts[p] = res.counts[k] as usize);
    }
    let mut contrib_offsets = Vec::with_capacity(w * h + 1);
    contrib_offsets.push(0);
    for c in &counts {
        contrib_offsets.push(contrib_offsets.last().unwrap() + c);
    }
    let mut contribs = vec![
        Contribution {
            splat: 0,
            gaussian: 0,
            alpha: 0.0,
            weight: 0.0,
            clamped: false,
        };
        *contrib_offsets.last().unwrap()
    ];
    let mut image = Image::new(w, h);
    let mut rendered_index = vec![-1i64; w * h];
    let mut final_transmittance = vec![1.0; w * h];
    let mut pixel_counts = vec![0u32; n_gaussians];
    let mut visible = vec![false; n_gaussians];
    for (tile, res) in tiles.iter().enumerate() {
        let (tx, ty) = (tile % tiles_x, tile / tiles_x);
        let mut cursor = 0usize;
        for_each_tile_pixel(tx, ty, w, h, |k, p| {
            let n = res.counts[k] as usize;
            let src = &res.contribs[cursor..cursor + n];
            contribs[contrib_offsets[p]..contrib_offsets[p + 1]].copy_from_slice(src);
            for c in src {
                visible[c.gaussian as usize] = true;
            }
            cursor += n;
            image.data[p * 3..p * 3 + 3].copy_from_slice(&res.colors[k]);
            rendered_index[p] = res.rendered_index[k];
            if res.rendered_index[k] >= 0 {
                pixel_counts[res.rendered_index[k] as usize] += 1;
            }
            final_transmittance[p] = res.final_t[k];
        });
    }

    RenderOutput {
        image,
        rendered_index,
        final_transmittance,
        pixel_counts,
        visible,
        splats: splats.to_vec(),
        background: *background,
        contrib_offsets,
        contribs,
        token: None,
    }
}

fn for_each_tile_pixel(tx: usize, ty: usize, w: usize, h: usize, mut f: impl FnMut(usize, usize)) {
    let mut k = 0;
    for y in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(h) {
        for x in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(w) {
            f(k, y * w + x);
            k += 1;
        }
    }
}

fn blend_pixel(
    splats: &[Splat2D],
    bin: &[u32],
    px: f64,
    py: f64,
    background: &Vector3<f64>,
    out: &mut TileResult,
) {
    let mut t = 1.0;
    let mut color = Vector3::zeros();
    let mut best: Option<(f64, u32)> = None;
    let mut n = 0u32;
    for &s in bin {
        let sp = &splats[s as usize];
        let m2 = sp.mahalanobis2(px, py);
        if m2 > SUPPORT_MAHALANOBIS2 {
            continue;
        }
        let raw = sp.opacity * (-0.5 * m2).exp();
        let clamped = raw >= ALPHA_MAX;
        let alpha = if clamped { ALPHA_MAX } else { raw };
        if alpha < ALPHA_MIN {
            continue;
        }
        let next_t = t * (1.0 - alpha);
        let weight = alpha * t;
        color += sp.color * weight;
        let gi = sp.gaussian_index as u32;
        best = match best {
            Some((bw, bi)) if bw > weight || (bw == weight && bi < gi) => Some((bw, bi)),
            _ => Some((weight, gi)),
        };
        out.contribs.push(Contribution {
            splat: s,
            gaussian: gi,
            alpha,
            weight,
            clamped,
        });
        n += 1;
        t = next_t;
        if t < TRANSMITTANCE_MIN {
            break;
        }
    }
    color += background * t;
    out.counts.push(n);
    out.colors.push([color.x, color.y, color.z]);
    out.rendered_index.push(best.map_or(-1, |(_, i)| i as i64));
    out.final_t.push(t);
}

/// Projects every Gaussian of `cloud`, in parallel.
pub fn project_cloud(cloud: &GaussianCloud, camera: &Camera) -> Result<Vec<Splat2D>> {
    let projected: Vec<Option<Splat2D>> = (0..cloud.len())
        .into_par_iter()
        .map(|i| cloud.activate(i).map(|g| project_gaussian(camera, &g, i)))
        .collect::<Result<_>>()?;
    Ok(projected.into_iter().flatten().collect())
}

pub fn render_view(
    cloud: &GaussianCloud,
    camera: &Camera,
    background: &Vector3<f64>,
) -> Result<RenderOutput> {
    let splats = project_cloud(cloud, camera)?;
    let mut out = rasterize(&splats, camera, background, cloud.len());
    out.token = Some(render_token(cloud, camera, background));
    Ok(out)
}
