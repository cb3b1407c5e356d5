//! Pinhole cameras. Camera space is x right, y down, z forward.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points at or in front of this depth are culled.
pub const NEAR_PLANE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation.
    pub translation: Vector3<f64>,
    pub view_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    pub depth: f64,
    pub visible: bool,
}

impl Camera {
    /// Camera at `eye` looking at `target`, with `up` giving the world up
    /// direction (image y points opposite to it).
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
        view_id: u32,
    ) -> Camera {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Camera {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            rotation,
            translation: -(rotation * eye),
            view_id,
        }
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn project_point(&self, x: &Vector3<f64>) -> Projection {
        let p = self.to_camera(x);
        let z = p.z;
        Projection {
            pixel: Vector2::new(self.fx * p.x / z + self.cx, self.fy * p.y / z + self.cy),
            depth: z,
            visible: z > NEAR_PLANE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidInput(format!(
                "camera {}: focal lengths must be positive",
                self.view_id
            )));
        }
        if self.width < 8 || self.height < 8 {
            return Err(Error::InvalidInput(format!(
                "camera {}: image must be at least 8x8",
                self.view_id
            )));
        }
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity())
            .abs()
            .max();
        if err > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "camera {}: rotation is not orthonormal (error {err:e})",
                self.view_id
            )));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// On-disk camera record of `cameras.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub view_id: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl CameraRecord {
    pub fn from_camera(cam: &Camera, split: Split) -> Self {
        let r = &cam.rotation;
        CameraRecord {
            view_id: cam.view_id,
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: cam.translation.into(),
            split,
        }
    }

    pub fn to_camera(&self) -> Camera {
        Camera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            rotation: Matrix3::from_row_slice(&self.rotation),
            translation: Vector3::from(self.translation),
            view_id: self.view_id,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{Matrix4, Rotation3, Vector4};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn simple(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Camera {
        Camera {
            fx: 100.0,
            fy: 100.0,
            cx: 32.0,
            cy: 32.0,
            width: 64,
            height: 64,
            rotation,
            translation,
            view_id: 0,
        }
    }

    fn random_camera(rng: &mut impl Rng) -> Camera {
        let axis = Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let rot = Rotation3::new(axis).into_inner();
        let mut c = simple(rot, Vector3::from_fn(|_, _| rng.gen_range(-2.0..2.0)));
        c.fx = rng.gen_range(20.0..200.0);
        c.fy = rng.gen_range(20.0..200.0);
        c.cx = rng.gen_range(0.0..64.0);
        c.cy = rng.gen_range(0.0..64.0);
        c
    }

    #[test]
    fn optical_axis_and_offset() {
        let cam = simple(Matrix3::identity(), Vector3::zeros());
        let p = cam.project_point(&Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(p.pixel, Vector2::new(32.0, 32.0));
        assert_eq!(p.depth, 1.0);
        assert!(p.visible);
        let p = cam.project_point(&Vector3::new(0.1, 0.0, 1.0));
        assert_relative_eq!(p.pixel, Vector2::new(42.0, 32.0), epsilon = 1e-12);
        assert!(!cam.project_point(&Vector3::new(0.0, 0.0, 0.005)).visible);
        assert!(!cam.project_point(&Vector3::new(0.0, 0.0, -1.0)).visible);
    }

    #[test]
    fn matches_homogeneous_pipeline() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let cam = random_camera(&mut rng);
            let x = Vector3::from_fn(|_, _| rng.gen_range(-3.0..3.0));
            let mut ext = Matrix4::identity();
            ext.fixed_view_mut::<3, 3>(0, 0).copy_from(&cam.rotation);
            ext.fixed_view_mut::<3, 1>(0, 3).copy_from(&cam.translation);
            let k = Matrix4::new(
                cam.fx, 0.0, cam.cx, 0.0, 0.0, cam.fy, cam.cy, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0,
            );
            let h = k * ext * Vector4::new(x.x, x.y, x.z, 1.0);
            if h.z.abs() < 1e-3 {
                continue;
            }
            let p = cam.project_point(&x);
            assert_relative_eq!(
                p.pixel,
                Vector2::new(h.x / h.z, h.y / h.z),
                epsilon = 1e-9,
                max_relative = 1e-9
            );
            assert_relative_eq!(p.depth, h.z, epsilon = 1e-12);
        }
    }

    #[test]
    fn look_at_is_orthonormal_and_faces_target() {
        let eye = Vector3::new(4.0, 1.0, 0.5);
        let cam = Camera::look_at(eye, Vector3::zeros(), Vector3::z(), 96.0, 64, 64, 3);
        cam.validate().unwrap();
        assert_relative_eq!(cam.center(), eye, epsilon = 1e-12);
        let p = cam.project_point(&Vector3::zeros());
        assert_relative_eq!(p.pixel, Vector2::new(32.0, 32.0), epsilon = 1e-9);
        // World up maps to image up (negative y).
        assert!(cam.project_point(&Vector3::new(0.0, 0.0, 0.5)).pixel.y < 32.0);
    }

    #[test]
    fn validation_rejects_bad_cameras() {
        let mut cam = simple(Matrix3::identity(), Vector3::zeros());
        cam.validate().unwrap();
        cam.fx = 0.0;
        assert!(cam.validate().is_err());
        let mut cam = simple(Matrix3::identity() * 1.01, Vector3::zeros());
        assert!(cam.validate().is_err());
        cam.rotation = Matrix3::identity();
        cam.width = 4;
        assert!(cam.validate().is_err());
    }

    proptest! {
        #[test]
        fn projection_is_scale_consistent(
            seed in 0u64..1000,
            lambda in 0.1f64..10.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cam = random_camera(&mut rng);
            let c = cam.center();
            let x = c + cam.rotation.transpose() * Vector3::new(
                rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.5..3.0));
            let a = cam.project_point(&x);
            let b = cam.project_point(&(c + (x - c) * lambda));
            prop_assert!((a.pixel - b.pixel).norm() < 1e-8);
            prop_assert!((b.depth - lambda * a.depth).abs() < 1e-9);
        }
    }
}
