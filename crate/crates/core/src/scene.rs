//! Multi-view scenes: synthetic generation, sparse initialization and the
//! on-disk directory format.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Vector3, Vector4};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitBall};
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, CameraRecord, Split};
use crate::error::{Error, Result};
use crate::gaussian::{logit, GaussianCloud, GaussianParams};
use crate::img::Image;
use crate::render::render_view;

pub const CAMERAS_FILE: &str = "cameras.json";
pub const SCENE_FILE: &str = "scene.json";
pub const IMAGES_DIR: &str = "images";
pub const REFERENCE_FILE: &str = "gt.hgs";

/// Initial opacity of seeded Gaussians.
pub const INIT_OPACITY: f64 = 0.1;
/// Color of seeded Gaussians.
pub const INIT_GRAY: f64 = 0.5;
/// Position jitter of subsampled seeds, as a fraction of the extent.
pub const INIT_JITTER: f64 = 0.05;
/// Neighbours averaged for the initial isotropic scale.
pub const INIT_NEIGHBOURS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cameras: Vec<Camera>,
    pub gt_images: Vec<Image>,
    pub split: Vec<Split>,
    pub background: Vector3<f64>,
    /// Radius of the camera-centre bounding sphere.
    pub extent: f64,
    /// Ground-truth cloud, when known. Its means seed `gt-subsample`.
    pub reference: Option<GaussianCloud>,
}

/// Radius of the sphere around the centroid of the camera centres.
pub fn camera_extent(cameras: &[Camera]) -> f64 {
    if cameras.is_empty() {
        return 0.0;
    }
    let centers: Vec<_> = cameras.iter().map(Camera::center).collect();
    let centroid = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
    centers.iter().map(|c| (c - centroid).norm()).fold(0.0, f64::max)
}

impl Scene {
    pub fn new(
        cameras: Vec<Camera>,
        gt_images: Vec<Image>,
        split: Vec<Split>,
        background: Vector3<f64>,
        reference: Option<GaussianCloud>,
    ) -> Result<Scene> {
        let scene = Scene {
            extent: camera_extent(&cameras),
            cameras,
            gt_images,
            split,
            background,
            reference,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras.len() != self.gt_images.len() || self.cameras.len() != self.split.len() {
            return Err(Error::InvalidInput(format!(
                "scene has {} cameras, {} images and {} split tags",
                self.cameras.len(),
                self.gt_images.len(),
                self.split.len()
            )));
        }
        let mut ids = HashSet::new();
        for (cam, img) in self.cameras.iter().zip(&self.gt_images) {
            cam.validate()?;
            if !ids.insert(cam.view_id) {
                return Err(Error::InvalidInput(format!("duplicate view id {}", cam.view_id)));
            }
            if img.width != cam.width || img.height != cam.height {
                return Err(Error::DimensionMismatch(format!(
                    "view {}: image is {}x{}, camera is {}x{}",
                    cam.view_id, img.width, img.height, cam.width, cam.height
                )));
            }
        }
        if self.views(Split::Train).len() < 2 {
            return Err(Error::InvalidInput("scene needs at least 2 train views".into()));
        }
        Ok(())
    }

    /// Indices of the views in `split`, in scene order.
    pub fn views(&self, split: Split) -> Vec<usize> {
        (0..self.cameras.len())
            .filter(|&i| self.split[i] == split)
            .collect()
    }

    pub fn view_index(&self, view_id: u32) -> Option<usize> {
        self.cameras.iter().position(|c| c.view_id == view_id)
    }

    /// Largest image dimensions over all views.
    pub fn max_dims(&self) -> (usize, usize) {
        self.cameras
            .iter()
            .fold((0, 0), |(w, h), c| (w.max(c.width), h.max(c.height)))
    }

    /// Writes `cameras.json`, `scene.json`, `images/<view_id>.png` and, if
    /// known, the reference cloud.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let images = dir.join(IMAGES_DIR);
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        let records: Vec<CameraRecord> = self
            .cameras
            .iter()
            .zip(&self.split)
            .map(|(c, &s)| CameraRecord::from_camera(c, s))
            .collect();
        write_json(&dir.join(CAMERAS_FILE), &records)?;
        let meta = SceneMeta {
            background: self.background.into(),
        };
        write_json(&dir.join(SCENE_FILE), &meta)?;
        for (cam, img) in self.cameras.iter().zip(&self.gt_images) {
            img.save_png(&images.join(format!("{}.png", cam.view_id)))?;
        }
        if let Some(cloud) = &self.reference {
            cloud.save(&dir.join(REFERENCE_FILE))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Scene> {
        let path = dir.join(CAMERAS_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let records: Vec<CameraRecord> =
            serde_json::from_str(&text).map_err(|source| Error::Json { path, source })?;
        let meta_path = dir.join(SCENE_FILE);
        let meta = if meta_path.exists() {
            let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
            serde_json::from_str(&text).map_err(|source| Error::Json {
                path: meta_path,
                source,
            })?
        } else {
            SceneMeta::default()
        };
        let mut cameras = Vec::with_capacity(records.len());
        let mut images = Vec::with_capacity(records.len());
        let mut split = Vec::with_capacity(records.len());
        for r in &records {
            cameras.push(r.to_camera());
            images.push(Image::load_png(
                &dir.join(IMAGES_DIR).join(format!("{}.png", r.view_id)),
            )?);
            split.push(r.split);
        }
        let ref_path = dir.join(REFERENCE_FILE);
        let reference = if ref_path.exists() {
            Some(GaussianCloud::load(&ref_path)?)
        } else {
            None
        };
        Scene::new(cameras, images, split, Vector3::from(meta.background), reference)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct SceneMeta {
    background: [f64; 3],
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Parameters of a synthetic ring scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub views: usize,
    pub ring_radius: f64,
    pub gaussians: usize,
    /// Focal length as a multiple of the image width.
    pub focal_factor: f64,
    /// Camera elevation, alternating sign around the ring (radians).
    pub elevation: f64,
    /// Every view with `index % test_every == test_offset` is a test view.
    pub test_every: usize,
    pub test_offset: usize,
    /// Range of ground-truth per-axis scales.
    pub min_scale: f64,
    pub max_scale: f64,
    pub background: [f64; 3],
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 64,
            height: 64,
            views: 16,
            ring_radius: 4.0,
            gaussians: 300,
            focal_factor: 1.5,
            elevation: 0.25,
            test_every: 4,
            test_offset: 2,
            min_scale: 0.02,
            max_scale: 0.15,
            background: [0.0; 3],
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.gaussians == 0 {
            return bad("ground-truth gaussian count must be positive".into());
        }
        if self.views < 3 {
            return bad(format!("need at least 3 cameras, got {}", self.views));
        }
        if self.width < 8 || self.height < 8 {
            return bad("images must be at least 8x8".into());
        }
        if !(self.ring_radius > 1.0) {
            return bad("ring radius must exceed the unit ball".into());
        }
        if !(self.min_scale > 0.0 && self.min_scale <= self.max_scale) {
            return bad("scale range must be positive and ordered".into());
        }
        if !(self.focal_factor > 0.0) {
            return bad("focal factor must be positive".into());
        }
        if self.test_every == 0 {
            return bad("test_every must be positive".into());
        }
        Ok(())
    }

    /// Split of view `k`.
    pub fn split_of(&self, k: usize) -> Split {
        if k % self.test_every == self.test_offset {
            Split::Test
        } else {
            Split::Train
        }
    }
}

/// Ring of cameras around the origin (world z up) viewing a random cloud
/// inside the unit ball.
pub fn gen_synthetic(spec: &SceneSpec, seed: u64) -> Result<(Scene, GaussianCloud)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = GaussianCloud::new();
    let (lo, hi) = (spec.min_scale.ln(), spec.max_scale.ln());
    for _ in 0..spec.gaussians {
        let p: [f64; 3] = UnitBall.sample(&mut rng);
        let q = Vector4::from_fn(|_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let q = if q.norm() > 1e-6 {
            q.normalize()
        } else {
            Vector4::x()
        };
        cloud.push(GaussianParams {
            mean: Vector3::from(p),
            log_scale: Vector3::from_fn(|_, _| rng.gen_range(lo..=hi)),
            rotation: q,
            raw_opacity: logit(rng.gen_range(0.5..=0.95)),
            color: Vector3::from_fn(|_, _| rng.gen_range(0.0..=1.0)),
        });
    }
    let focal = spec.focal_factor * spec.width as f64;
    let mut cameras = Vec::with_capacity(spec.views);
    let mut split = Vec::with_capacity(spec.views);
    for k in 0..spec.views {
        let theta = std::f64::consts::TAU * k as f64 / spec.views as f64;
        let elev = if k % 2 == 0 {
            spec.elevation
        } else {
            -spec.elevation
        };
        let eye =
            spec.ring_radius * Vector3::new(elev.cos() * theta.cos(), elev.cos() * theta.sin(), elev.sin());
        cameras.push(Camera::look_at(
            eye,
            Vector3::zeros(),
            Vector3::z(),
            focal,
            spec.width,
            spec.height,
            k as u32,
        ));
        split.push(spec.split_of(k));
    }
    let background = Vector3::from(spec.background);
    let gt_images = cameras
        .iter()
        .map(|cam| render_view(&cloud, cam, &background).map(|r| r.image))
        .collect::<Result<Vec<_>>>()?;
    let scene = Scene::new(cameras, gt_images, split, background, Some(cloud.clone()))?;
    Ok((scene, cloud))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    GtSubsample,
    RandomBall,
}

impl FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt-subsample" => Ok(InitMode::GtSubsample),
            "random-ball" => Ok(InitMode::RandomBall),
            _ => Err(Error::InvalidInput(format!(
                "unknown init mode {s:?} (expected gt-subsample or random-ball)"
            ))),
        }
    }
}

/// Mean distance from each point to its nearest neighbours (up to
/// [`INIT_NEIGHBOURS`]). Isolated points get `fallback`.
pub fn knn_mean_distance(points: &[Vector3<f64>], fallback: f64) -> Vec<f64> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d: Vec<f64> = points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| (p - q).norm())
                .collect();
            d.sort_by(f64::total_cmp);
            d.truncate(INIT_NEIGHBOURS);
            let mean = d.iter().sum::<f64>() / d.len().max(1) as f64;
            if mean > 0.0 {
                mean
            } else {
                fallback
            }
        })
        .collect()
}

/// Seeds a gray, faint, isotropic cloud of `count` Gaussians.
pub fn init_cloud(scene: &Scene, count: usize, mode: InitMode, seed: u64) -> Result<GaussianCloud> {
    if count == 0 {
        return Err(Error::InvalidInput(
            "initial gaussian count must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<Vector3<f64>> = match mode {
        InitMode::GtSubsample => {
            let reference = scene.reference.as_ref().ok_or_else(|| {
                Error::InvalidInput("gt-subsample needs a scene with a reference cloud".into())
            })?;
            if count > reference.len() {
                return Err(Error::InvalidInput(format!(
                    "asked for {count} seed points, scene has {}",
                    reference.len()
                )));
            }
            let mut idx = sample(&mut rng, reference.len(), count).into_vec();
            idx.sort_unstable();
            let jitter = Normal::new(0.0, INIT_JITTER * scene.extent)
                .map_err(|e| Error::InvalidInput(e.to_string()))?;
            idx.into_iter()
                .map(|i| reference.means[i] + Vector3::from_fn(|_, _| jitter.sample(&mut rng)))
                .collect()
        }
        InitMode::RandomBall => {
            let centroid = scene.cameras.iter().map(Camera::center).sum::<Vector3<f64>>()
                / scene.cameras.len().max(1) as f64;
            (0..count)
                .map(|_| {
                    let p: [f64; 3] = UnitBall.sample(&mut rng);
                    centroid + scene.extent * Vector3::from(p)
                })
                .collect()
        }
    };
    let scales = knn_mean_distance(&points, 0.01 * scene.extent.max(1e-6));
    let mut cloud = GaussianCloud::new();
    for (p, s) in points.into_iter().zip(scales) {
        cloud.push(GaussianParams {
            mean: p,
            log_scale: Vector3::repeat(s.ln()),
            rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
            raw_opacity: logit(INIT_OPACITY),
            color: Vector3::repeat(INIT_GRAY),
        });
    }
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SceneSpec {
        SceneSpec {
            width: 24,
            height: 24,
            views: 8,
            gaussians: 20,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn ring_cameras_sit_on_the_ring() {
        let (scene, _) = gen_synthetic(&small_spec(), 3).unwrap();
        for cam in &scene.cameras {
            assert!((cam.center().norm() - 4.0).abs() < 1e-9);
            // Origin projects to the principal point.
            let p = cam.project_point(&Vector3::zeros());
            assert!((p.pixel.x - cam.cx).abs() < 1e-9 && (p.pixel.y - cam.cy).abs() < 1e-9);
        }
        assert_eq!(scene.views(Split::Test), vec![2, 6]);
    }

    #[test]
    fn generation_is_deterministic() {
        let (a, ca) = gen_synthetic(&small_spec(), 11).unwrap();
        let (b, cb) = gen_synthetic(&small_spec(), 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        let (c, _) = gen_synthetic(&small_spec(), 12).unwrap();
        assert_ne!(a.gt_images, c.gt_images);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let zero = SceneSpec {
            gaussians: 0,
            ..small_spec()
        };
        assert!(matches!(gen_synthetic(&zero, 0), Err(Error::InvalidSpec(_))));
        let two = SceneSpec {
            views: 2,
            ..small_spec()
        };
        assert!(matches!(gen_synthetic(&two, 0), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn ground_truth_cloud_is_in_range() {
        let (_, cloud) = gen_synthetic(&small_spec(), 5).unwrap();
        for i in 0..cloud.len() {
            assert!(cloud.means[i].norm() <= 1.0);
            let o = cloud.opacity(i);
            assert!((0.5 - 1e-12..=0.95 + 1e-12).contains(&o));
            assert!(cloud.colors[i].iter().all(|c| (0.0..=1.0).contains(c)));
        }
    }

    #[test]
    fn tetrahedron_scales_equal_edge_length() {
        let s = 1.0 / 2f64.sqrt();
        let pts = [
            Vector3::new(1.0, 1.0, 1.0) * s,
            Vector3::new(1.0, -1.0, -1.0) * s,
            Vector3::new(-1.0, 1.0, -1.0) * s,
            Vector3::new(-1.0, -1.0, 1.0) * s,
        ];
        // Brute-force edge lengths.
        let edge = (pts[0] - pts[1]).norm();
        for d in knn_mean_distance(&pts, 1.0) {
            assert!((d - edge).abs() < 1e-12);
        }
        assert!((edge - 2.0).abs() < 1e-12);
    }

    #[test]
    fn init_modes() {
        let (scene, _) = gen_synthetic(&small_spec(), 1).unwrap();
        let one = init_cloud(&scene, 1, InitMode::RandomBall, 4).unwrap();
        assert_eq!(one.len(), 1);
        let centroid = scene.cameras.iter().map(Camera::center).sum::<Vector3<f64>>() / 8.0;
        assert!((one.means[0] - centroid).norm() <= scene.extent);

        let a = init_cloud(&scene, 10, InitMode::GtSubsample, 9).unwrap();
        let b = init_cloud(&scene, 10, InitMode::GtSubsample, 9).unwrap();
        assert_eq!(a, b);
        for i in 0..a.len() {
            assert!((a.opacity(i) - INIT_OPACITY).abs() < 1e-12);
            assert_eq!(a.colors[i], Vector3::repeat(INIT_GRAY));
            assert_eq!(a.log_scales[i].x, a.log_scales[i].y);
        }
        assert!(init_cloud(&scene, 21, InitMode::GtSubsample, 9).is_err());
        assert!(init_cloud(&scene, 0, InitMode::RandomBall, 9).is_err());
    }

    #[test]
    fn directory_round_trip() {
        let (scene, _) = gen_synthetic(&small_spec(), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        scene.save(dir.path()).unwrap();
        let once = Scene::load(dir.path()).unwrap();
        for (a, b) in scene.cameras.iter().zip(&once.cameras) {
            assert!((a.rotation - b.rotation).abs().max() < 1e-6);
            assert!((a.translation - b.translation).abs().max() < 1e-6);
            assert_eq!(a.view_id, b.view_id);
        }
        assert_eq!(once.split, scene.split);
        let dir2 = tempfile::tempdir().unwrap();
        once.save(dir2.path()).unwrap();
        let twice = Scene::load(dir2.path()).unwrap();
        assert_eq!(once, twice);
        // 8-bit quantization stays within half a code value.
        for (a, b) in scene.gt_images.iter().zip(&once.gt_images) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!(
                    (crate::img::srgb_encode(*x) - crate::img::srgb_encode(*y)).abs() <= 0.5 / 255.0 + 1e-9
                );
            }
        }
    }
}
