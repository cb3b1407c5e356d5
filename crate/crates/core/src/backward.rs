//! Reverse-mode gradients of a per-view image loss through blending,
//! the 2D kernel, EWA projection and the covariance factorization.
//!
//! `viewspace_grads` holds ∂L/∂(projected 2D mean) in pixels, taken at the
//! screen-space node before the projection Jacobian is applied.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3, Vector4};
use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::gaussian::{normalize_quat, quat_to_matrix, quat_to_matrix_vjp, sigmoid, GaussianCloud};
use crate::img::Image;
use crate::render::{project_cloud, projection_jacobian, rasterize, render_token, render_view, RenderOutput};

/// Fixed pixel-row chunking for the blend backward; keeps the reduction
/// order independent of the thread count.
const ROWS_PER_CHUNK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub d_means: Vec<Vector3<f64>>,
    pub d_log_scales: Vec<Vector3<f64>>,
    pub d_rotations: Vec<Vector4<f64>>,
    pub d_raw_opacities: Vec<f64>,
    pub d_colors: Vec<Vector3<f64>>,
    pub viewspace_grads: Vec<Vector2<f64>>,
}

impl ParamGrads {
    pub fn zeros(n: usize) -> Self {
        ParamGrads {
            d_means: vec![Vector3::zeros(); n],
            d_log_scales: vec![Vector3::zeros(); n],
            d_rotations: vec![Vector4::zeros(); n],
            d_raw_opacities: vec![0.0; n],
            d_colors: vec![Vector3::zeros(); n],
            viewspace_grads: vec![Vector2::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.d_means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_means.is_empty()
    }

    /// Parameter gradients flattened in [`GaussianCloud::to_flat`] order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * crate::gaussian::PARAMS_PER_GAUSSIAN);
        for i in 0..self.len() {
            out.extend(self.d_means[i].iter());
            out.extend(self.d_log_scales[i].iter());
            out.extend(self.d_rotations[i].iter());
            out.push(self.d_raw_opacities[i]);
            out.extend(self.d_colors[i].iter());
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
            && self
                .viewspace_grads
                .iter()
                .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct SplatGrad {
    mean2d: Vector2<f64>,
    conic: [f64; 3],
    opacity: f64,
    color: Vector3<f64>,
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        self.mean2d += o.mean2d;
        for k in 0..3 {
            self.conic[k] += o.conic[k];
        }
        self.opacity += o.opacity;
        self.color += o.color;
    }
}

/// Gradients w.r.t. each splat's screen-space parameters.
fn blend_backward(render: &RenderOutput, d_image: &Image) -> Vec<SplatGrad> {
    let (w, h) = (render.width(), render.height());
    let n_splats = render.splats.len();
    let chunks: Vec<Vec<SplatGrad>> = (0..h.div_ceil(ROWS_PER_CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut acc = vec![SplatGrad::default(); n_splats];
            for y in chunk * ROWS_PER_CHUNK..((chunk + 1) * ROWS_PER_CHUNK).min(h) {
                for x in 0..w {
                    let p = y * w + x;
                    let d_c = Vector3::new(
                        d_image.data[p * 3],
                        d_image.data[p * 3 + 1],
                        d_image.data[p * 3 + 2],
                    );
                    if d_c == Vector3::zeros() {
                        continue;
                    }
                    let mut behind = render.background;
                    for c in render.contributions(p).iter().rev() {
                        let sp = &render.splats[c.splat as usize];
                        let g = &mut acc[c.splat as usize];
                        let t_front = c.weight / c.alpha;
                        g.color += d_c * c.weight;
                        let d_alpha = t_front * (sp.color - behind).dot(&d_c);
                        behind = sp.color * c.alpha + behind * (1.0 - c.alpha);
                        if c.clamped {
                            continue;
                        }
                        let dx = x as f64 - sp.mean2d.x;
                        let dy = y as f64 - sp.mean2d.y;
                        let [a, b, cc] = sp.conic;
                        let kernel = c.alpha / sp.opacity;
                        g.opacity += d_alpha * kernel;
                        // power = -½ (a dx² + 2b dx dy + c dy²)
                        let d_power = d_alpha * sp.opacity * kernel;
                        g.conic[0] += -0.5 * dx * dx * d_power;
                        g.conic[1] += -dx * dy * d_power;
                        g.conic[2] += -0.5 * dy * dy * d_power;
                        g.mean2d += Vector2::new(a * dx + b * dy, b * dx + cc * dy) * d_power;
                    }
                }
            }
            acc
        })
        .collect();
    let mut total = vec![SplatGrad::default(); n_splats];
    for chunk in &chunks {
        for (t, g) in total.iter_mut().zip(chunk) {
            t.add(g);
        }
    }
    total
}

struct GaussianGrad {
    index: usize,
    mean: Vector3<f64>,
    log_scale: Vector3<f64>,
    rotation: Vector4<f64>,
    raw_opacity: f64,
    color: Vector3<f64>,
    viewspace: Vector2<f64>,
}

fn gaussian_backward(
    cloud: &GaussianCloud,
    camera: &Camera,
    index: usize,
    sg: &SplatGrad,
    conic: [f64; 3],
) -> Result<GaussianGrad> {
    let q_raw = cloud.rotations[index];
    let q_norm = q_raw.norm();
    let q = normalize_quat(&q_raw)?;
    let rq = quat_to_matrix(&q);
    let sc = cloud.log_scales[index].map(f64::exp);
    let m = rq * Matrix3::from_diagonal(&sc);
    let cov = m * m.transpose();
    let wr = camera.rotation;
    let t = camera.to_camera(&cloud.means[index]);
    let j = projection_jacobian(camera, &t);
    let cov_cam = wr * cov * wr.transpose();
    let (fx, fy) = (camera.fx, camera.fy);
    let iz = 1.0 / t.z;

    // Conic → screen covariance.
    let k = Matrix2::new(conic[0], conic[1], conic[1], conic[2]);
    let g_k = Matrix2::new(sg.conic[0], 0.5 * sg.conic[1], 0.5 * sg.conic[1], sg.conic[2]);
    let g_cov2 = -(k * g_k * k);

    // Screen covariance → camera covariance and Jacobian.
    let g_cov_cam = j.transpose() * g_cov2 * j;
    let g_j = 2.0 * g_cov2 * j * cov_cam;

    let mut d_t = Vector3::new(
        fx * iz * sg.mean2d.x,
        fy * iz * sg.mean2d.y,
        -fx * t.x * iz * iz * sg.mean2d.x - fy * t.y * iz * iz * sg.mean2d.y,
    );
    d_t.x += g_j[(0, 2)] * (-fx * iz * iz);
    d_t.y += g_j[(1, 2)] * (-fy * iz * iz);
    d_t.z += g_j[(0, 0)] * (-fx * iz * iz)
        + g_j[(0, 2)] * (2.0 * fx * t.x * iz * iz * iz)
        + g_j[(1, 1)] * (-fy * iz * iz)
        + g_j[(1, 2)] * (2.0 * fy * t.y * iz * iz * iz);

    let g_cov = wr.transpose() * g_cov_cam * wr;
    let g_m = 2.0 * g_cov * m;
    let mut d_log_scale = Vector3::zeros();
    let mut g_rq = Matrix3::zeros();
    for col in 0..3 {
        let mut d_s = 0.0;
        for r in 0..3 {
            d_s += g_m[(r, col)] * rq[(r, col)];
            g_rq[(r, col)] = g_m[(r, col)] * sc[col];
        }
        d_log_scale[col] = d_s * sc[col];
    }
    let d_q_unit = quat_to_matrix_vjp(&q, &g_rq);
    let d_rotation = (d_q_unit - q * q.dot(&d_q_unit)) / q_norm;

    let o = sigmoid(cloud.raw_opacities[index]);
    let raw_color = cloud.colors[index];
    let color = Vector3::from_fn(|c, _| {
        if (0.0..=1.0).contains(&raw_color[c]) {
            sg.color[c]
        } else {
            0.0
        }
    });

    Ok(GaussianGrad {
        index,
        mean: wr.transpose() * d_t,
        log_scale: d_log_scale,
        rotation: d_rotation,
        raw_opacity: sg.opacity * o * (1.0 - o),
        color,
        viewspace: sg.mean2d,
    })
}

/// Back-propagates `d_image = ∂L/∂image` of a render of `cloud` from `camera`.
pub fn backward_view(
    cloud: &GaussianCloud,
    camera: &Camera,
    render: &RenderOutput,
    d_image: &Image,
) -> Result<ParamGrads> {
    if render.token != Some(render_token(cloud, camera, &render.background)) {
        return Err(Error::StaleRender);
    }
    d_image.same_dims(&render.image)?;
    let splat_grads = blend_backward(render, d_image);
    let per_gaussian: Vec<GaussianGrad> = render
        .splats
        .par_iter()
        .zip(splat_grads.par_iter())
        .map(|(sp, sg)| gaussian_backward(cloud, camera, sp.gaussian_index, sg, sp.conic))
        .collect::<Result<_>>()?;
    let mut out = ParamGrads::zeros(cloud.len());
    for g in per_gaussian {
        let i = g.index;
        out.d_means[i] = g.mean;
        out.d_log_scales[i] = g.log_scale;
        out.d_rotations[i] = g.rotation;
        out.d_raw_opacities[i] = g.raw_opacity;
        out.d_colors[i] = g.color;
        out.viewspace_grads[i] = g.viewspace;
    }
    Ok(out)
}

/// Digest of which terms blend at which pixels, including clamp state.
/// Central differences are only meaningful while this stays fixed.
fn branch_signature(render: &RenderOutput) -> u64 {
    let mut h = DefaultHasher::new();
    for p in 0..render.width() * render.height() {
        for c in render.contributions(p) {
            (c.gaussian, c.clamped).hash(&mut h);
        }
        u32::MAX.hash(&mut h);
    }
    h.finish()
}

const MIN_FD_STEP: f64 = 1e-8;

/// Central difference of `f` at step `eps`, shrinking the step by 10× while
/// either probe lands on a different blending branch than the base point.
fn central_difference(eps: f64, base_sig: u64, f: &mut dyn FnMut(f64) -> Result<(f64, u64)>) -> Result<f64> {
    let mut step = eps;
    loop {
        let (lp, sp) = f(step)?;
        let (lm, sm) = f(-step)?;
        if (sp == base_sig && sm == base_sig) || step / 10.0 < MIN_FD_STEP {
            return Ok((lp - lm) / (2.0 * step));
        }
        step /= 10.0;
    }
}

/// Finite-difference gradients of `loss(render(cloud, camera))`, including
/// `viewspace_grads` taken by perturbing each splat's 2D mean directly.
/// `O(14·N)` renders; meant for small test scenes.
pub fn finite_diff_grads(
    cloud: &GaussianCloud,
    camera: &Camera,
    background: &Vector3<f64>,
    loss: &dyn Fn(&Image) -> f64,
    eps: f64,
) -> Result<ParamGrads> {
    finite_diff_grads_branched(cloud, camera, background, &|img| (loss(img), 0), eps)
}

/// As [`finite_diff_grads`], for a loss that also reports which smooth piece
/// of itself the image falls on (for example the sign pattern of an L1
/// residual). Steps are refined until neither the blending branch nor the
/// loss piece changes.
pub fn finite_diff_grads_branched(
    cloud: &GaussianCloud,
    camera: &Camera,
    background: &Vector3<f64>,
    loss: &dyn Fn(&Image) -> (f64, u64),
    eps: f64,
) -> Result<ParamGrads> {
    if !(eps > 0.0) {
        return Err(Error::InvalidInput(
            "finite-difference step must be positive".into(),
        ));
    }
    let base = render_view(cloud, camera, background)?;
    let probe = |r: &RenderOutput| {
        let (l, piece) = loss(&r.image);
        (l, branch_signature(r) ^ piece.rotate_left(17))
    };
    let base_sig = probe(&base).1;
    let flat = cloud.to_flat();
    let mut grads = Vec::with_capacity(flat.len());
    for k in 0..flat.len() {
        let d = central_difference(eps, base_sig, &mut |s| {
            let mut p = flat.clone();
            p[k] += s;
            let r = render_view(&GaussianCloud::from_flat(&p)?, camera, background)?;
            Ok(probe(&r))
        })?;
        grads.push(d);
    }

    let mut out = ParamGrads::zeros(cloud.len());
    for (i, g) in grads
        .chunks_exact(crate::gaussian::PARAMS_PER_GAUSSIAN)
        .enumerate()
    {
        out.d_means[i] = Vector3::new(g[0], g[1], g[2]);
        out.d_log_scales[i] = Vector3::new(g[3], g[4], g[5]);
        out.d_rotations[i] = Vector4::new(g[6], g[7], g[8], g[9]);
        out.d_raw_opacities[i] = g[10];
        out.d_colors[i] = Vector3::new(g[11], g[12], g[13]);
    }

    let splats = project_cloud(cloud, camera)?;
    for s in 0..splats.len() {
        let gi = splats[s].gaussian_index;
        if !base.visible[gi] {
            continue;
        }
        for axis in 0..2 {
            let d = central_difference(eps, base_sig, &mut |step| {
                let mut moved = splats.clone();
                moved[s].mean2d[axis] += step;
                let r = rasterize(&moved, camera, background, cloud.len());
                Ok(probe(&r))
            })?;
            out.viewspace_grads[gi][axis] = d;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{logit, GaussianParams};
    use crate::loss::{combined_loss, l1_loss};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera(w: usize, h: usize) -> Camera {
        Camera::look_at(
            Vector3::new(0.4, -3.0, 0.6),
            Vector3::zeros(),
            Vector3::z(),
            w as f64 * 1.2,
            w,
            h,
            0,
        )
    }

    fn random_cloud(rng: &mut impl Rng, n: usize) -> GaussianCloud {
        let mut cloud = GaussianCloud::new();
        for _ in 0..n {
            cloud.push(GaussianParams {
                mean: Vector3::from_fn(|_, _| rng.gen_range(-0.7..0.7)),
                log_scale: Vector3::from_fn(|_, _| rng.gen_range(-2.6..-1.4)),
                rotation: Vector4::from_fn(|_, _| rng.gen_range(-1.0..1.0)),
                raw_opacity: logit(rng.gen_range(0.2..0.9)),
                color: Vector3::from_fn(|_, _| rng.gen_range(0.05..0.95)),
            });
        }
        cloud
    }

    fn assert_close(a: f64, b: f64, what: &str) {
        if a.abs().max(b.abs()) > 1e-6 {
            let rel = (a - b).abs() / a.abs().max(b.abs());
            assert!(rel < 1e-3, "{what}: analytic {a:e} vs fd {b:e} (rel {rel:e})");
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = random_cloud(&mut rng, 10);
        let cam = camera(24, 24);
        let r = render_view(&cloud, &cam, &Vector3::zeros()).unwrap();
        let g = backward_view(&cloud, &cam, &r, &Image::new(24, 24)).unwrap();
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
        assert!(g.viewspace_grads.iter().all(|v| *v == Vector2::zeros()));
    }

    #[test]
    fn stale_render_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cloud = random_cloud(&mut rng, 3);
        let cam = camera(16, 16);
        let r = render_view(&cloud, &cam, &Vector3::zeros()).unwrap();
        cloud.means[0].x += 1e-3;
        assert!(matches!(
            backward_view(&cloud, &cam, &r, &Image::new(16, 16)),
            Err(Error::StaleRender)
        ));
    }

    #[test]
    fn single_gaussian_l1_matches_finite_differences() {
        let mut cloud = GaussianCloud::new();
        cloud.push(GaussianParams {
            mean: Vector3::new(0.05, 0.1, -0.05),
            log_scale: Vector3::new(-1.2, -1.6, -1.4),
            rotation: Vector4::new(0.9, 0.2, -0.3, 0.1),
            raw_opacity: logit(0.7),
            color: Vector3::new(0.8, 0.3, 0.5),
        });
        let cam = camera(24, 24);
        let bg = Vector3::new(0.1, 0.1, 0.1);
        let gt = Image::filled(24, 24, [0.4, 0.45, 0.3]);
        let r = render_view(&cloud, &cam, &bg).unwrap();
        let (_, d_img) = l1_loss(&r.image, &gt).unwrap();
        let g = backward_view(&cloud, &cam, &r, &d_img).unwrap();
        let fd = finite_diff_grads(&cloud, &cam, &bg, &|img| l1_loss(img, &gt).unwrap().0, 1e-4).unwrap();
        for (k, (a, b)) in g.to_flat().iter().zip(fd.to_flat()).enumerate() {
            assert_close(*a, b, &format!("param {k}"));
        }
        for ax in 0..2 {
            assert_close(g.viewspace_grads[0][ax], fd.viewspace_grads[0][ax], "viewspace");
        }
    }

    #[test]
    fn multi_view_directional_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cloud = random_cloud(&mut rng, 20);
        let target = random_cloud(&mut rng, 20);
        let bg = Vector3::zeros();
        let cams: Vec<Camera> = (0..3)
            .map(|v| {
                let a = v as f64 * 2.1;
                Camera::look_at(
                    Vector3::new(3.0 * a.cos(), 3.0 * a.sin(), 0.5),
                    Vector3::zeros(),
                    Vector3::z(),
                    30.0,
                    24,
                    24,
                    v,
                )
            })
            .collect();
        let gts: Vec<Image> = cams
            .iter()
            .map(|c| render_view(&target, c, &bg).unwrap().image)
            .collect();
        // Loss summed over views plus the combined blending-branch digest.
        let total_loss = |c: &GaussianCloud| -> (f64, u64) {
            let mut h = DefaultHasher::new();
            let mut sum = 0.0;
            for (cam, gt) in cams.iter().zip(&gts) {
                let r = render_view(c, cam, &bg).unwrap();
                branch_signature(&r).hash(&mut h);
                sum += combined_loss(&r.image, gt, 0.2).unwrap().0;
            }
            (sum, h.finish())
        };
        let mut analytic = vec![0.0; cloud.len() * 14];
        for (cam, gt) in cams.iter().zip(&gts) {
            let r = render_view(&cloud, cam, &bg).unwrap();
            let (_, d) = combined_loss(&r.image, gt, 0.2).unwrap();
            let g = backward_view(&cloud, cam, &r, &d).unwrap();
            for (a, v) in analytic.iter_mut().zip(g.to_flat()) {
                *a += v;
            }
        }
        let flat = cloud.to_flat();
        let base_sig = total_loss(&cloud).1;
        for trial in 0..5 {
            let mut drng = ChaCha8Rng::seed_from_u64(100 + trial);
            let v: Vec<f64> = (0..flat.len()).map(|_| drng.gen_range(-1.0..1.0)).collect();
            let want: f64 = analytic.iter().zip(&v).map(|(a, b)| a * b).sum();
            let fd = central_difference(1e-4, base_sig, &mut |s| {
                let p: Vec<f64> = flat.iter().zip(&v).map(|(a, b)| a + s * b).collect();
                Ok(total_loss(&GaussianCloud::from_flat(&p).unwrap()))
            })
            .unwrap();
            let rel = (want - fd).abs() / want.abs();
            assert!(rel < 1e-3, "direction {trial}: {want:e} vs {fd:e}");
        }
    }

    #[test]
    fn finite_difference_error_shrinks_quadratically() {
        let mut cloud = GaussianCloud::new();
        cloud.push(GaussianParams {
            mean: Vector3::new(0.0, 0.0, 0.0),
            log_scale: Vector3::repeat(-1.0),
            rotation: Vector4::new(1.0, 0.1, 0.0, 0.0),
            raw_opacity: 0.0,
            color: Vector3::new(0.6, 0.2, 0.9),
        });
        let cam = camera(16, 16);
        let bg = Vector3::zeros();
        // Smooth loss, and opacity moves no support boundary, so only
        // truncation error remains.
        let loss = |img: &Image| img.data.iter().map(|v| v * v).sum::<f64>();
        let r = render_view(&cloud, &cam, &bg).unwrap();
        let mut d = r.image.clone();
        d.data.iter_mut().for_each(|v| *v *= 2.0);
        let analytic = backward_view(&cloud, &cam, &r, &d).unwrap().d_raw_opacities[0];
        let base_sig = branch_signature(&r);
        let fd = |eps: f64| {
            let at = |s: f64| {
                let mut c = cloud.clone();
                c.raw_opacities[0] += s;
                let r = render_view(&c, &cam, &bg).unwrap();
                assert_eq!(branch_signature(&r), base_sig);
                loss(&r.image)
            };
            (at(eps) - at(-eps)) / (2.0 * eps)
        };
        let e1 = (fd(0.2) - analytic).abs();
        let e2 = (fd(0.1) - analytic).abs();
        let ratio = e1 / e2;
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn linear_loss_oracle_self_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cloud = random_cloud(&mut rng, 6);
        let cam = camera(20, 20);
        let bg = Vector3::new(0.2, 0.3, 0.4);
        let r = render_view(&cloud, &cam, &bg).unwrap();
        let g = backward_view(&cloud, &cam, &r, &Image::filled(20, 20, [1.0; 3])).unwrap();
        let fd = finite_diff_grads(&cloud, &cam, &bg, &|img| img.data.iter().sum(), 1e-4).unwrap();
        for (a, b) in g.to_flat().iter().zip(fd.to_flat()) {
            assert_close(*a, b, "linear loss");
        }
    }

    #[test]
    fn transparent_gaussians_have_zero_color_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cloud = random_cloud(&mut rng, 5);
        cloud.raw_opacities.iter_mut().for_each(|o| *o = -40.0);
        let cam = camera(16, 16);
        let r = render_view(&cloud, &cam, &Vector3::zeros()).unwrap();
        let g = backward_view(&cloud, &cam, &r, &Image::filled(16, 16, [1.0; 3])).unwrap();
        assert!(g.d_colors.iter().all(|c| *c == Vector3::zeros()));
        let fd = finite_diff_grads(
            &cloud,
            &cam,
            &Vector3::zeros(),
            &|img| img.data.iter().sum(),
            1e-4,
        )
        .unwrap();
        assert!(fd.d_colors.iter().all(|c| *c == Vector3::zeros()));
    }

    #[test]
    fn fully_occluded_gaussian_gets_no_color_gradient() {
        let mut cloud = GaussianCloud::new();
        let cam = camera(16, 16);
        let c = cam.center();
        let dir = (Vector3::zeros() - c).normalize();
        // Three large opaque walls, then a small Gaussian behind them.
        for (k, d) in [1.0, 1.2, 1.4, 2.5].iter().enumerate() {
            cloud.push(GaussianParams {
                mean: c + dir * *d,
                log_scale: if k < 3 {
                    Vector3::repeat(2.0)
                } else {
                    Vector3::repeat(-2.0)
                },
                rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
                raw_opacity: 10.0,
                color: Vector3::new(0.5, 0.5, 0.5),
            });
        }
        let r = render_view(&cloud, &cam, &Vector3::zeros()).unwrap();
        let g = backward_view(&cloud, &cam, &r, &Image::filled(16, 16, [1.0; 3])).unwrap();
        assert_eq!(g.d_colors[3], Vector3::zeros());
        assert_eq!(g.viewspace_grads[3], Vector2::zeros());
        assert!(!r.visible[3]);
    }

    #[test]
    fn viewspace_grads_translation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cloud = random_cloud(&mut rng, 12);
        let cam = camera(24, 24);
        let gt = Image::filled(24, 24, [0.3, 0.5, 0.2]);
        let offset = Vector3::new(0.7, -1.3, 2.1);
        let mut moved = cloud.clone();
        moved.means.iter_mut().for_each(|m| *m += offset);
        let mut cam2 = cam.clone();
        cam2.translation -= cam.rotation * offset;
        let grads = |c: &GaussianCloud, cam: &Camera| {
            let r = render_view(c, cam, &Vector3::zeros()).unwrap();
            let (_, d) = l1_loss(&r.image, &gt).unwrap();
            backward_view(c, cam, &r, &d).unwrap()
        };
        let a = grads(&cloud, &cam);
        let b = grads(&moved, &cam2);
        for (u, v) in a.viewspace_grads.iter().zip(&b.viewspace_grads) {
            assert!((u - v).norm() < 1e-6);
        }
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cloud = random_cloud(&mut rng, 40);
        let cam = camera(40, 36);
        let gt = Image::filled(40, 36, [0.3, 0.5, 0.2]);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| {
                    let r = render_view(&cloud, &cam, &Vector3::zeros()).unwrap();
                    let (_, d) = combined_loss(&r.image, &gt, 0.2).unwrap();
                    backward_view(&cloud, &cam, &r, &d).unwrap()
                })
        };
        assert_eq!(run(1), run(3));
    }
}
