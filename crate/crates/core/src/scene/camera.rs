use nalgebra::{Matrix2, Matrix2x3, Matrix3, UnitQuaternion, Vector2, Vector3};

use super::gaussian::Gaussian3D;
use crate::error::{Error, Result};

/// Isotropic blur (pixel²) added to every projected covariance.
pub const COV2D_BLUR: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Resolution {
    pub height: usize,
    pub width: usize,
}

impl Resolution {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Pinhole camera. The camera frame is x right, y down, z forward;
/// `orientation` maps camera-frame vectors into the world frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    position: Vector3<f64>,
    orientation: UnitQuaternion<f64>,
    focal: Vector2<f64>,
    principal_point: Vector2<f64>,
    resolution: Resolution,
    near_clip: f64,
}

/// A Gaussian projected to the image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat2D {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub depth: f64,
}

/// Projection result plus the intermediates needed to chain image-space
/// gradients back to the world-space mean.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub splat: Splat2D,
    pub cam_point: Vector3<f64>,
    /// `∂mean2d / ∂cam_point`.
    pub jacobian: Matrix2x3<f64>,
    /// World covariance rotated into the camera frame.
    pub cov_cam: Matrix3<f64>,
}

impl Camera {
    pub fn new(
        position: Vector3<f64>,
        orientation: UnitQuaternion<f64>,
        focal: Vector2<f64>,
        principal_point: Vector2<f64>,
        resolution: Resolution,
        near_clip: f64,
    ) -> Result<Self> {
        if resolution.height == 0 || resolution.width == 0 {
            return Err(Error::param("camera resolution must be positive"));
        }
        if !(near_clip > 0.0) {
            return Err(Error::param("near clip must be positive"));
        }
        if !(focal.x > 0.0 && focal.y > 0.0) {
            return Err(Error::param("focal lengths must be positive"));
        }
        Ok(Self {
            position,
            orientation,
            focal,
            principal_point,
            resolution,
            near_clip,
        })
    }

    /// Camera at `position` looking at `target`, principal point at the image
    /// center. `up` is the world up direction; image y points away from it.
    pub fn look_at(
        position: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        resolution: Resolution,
    ) -> Result<Self> {
        let forward = (target - position)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::param("camera target coincides with position"))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::param("up vector parallel to viewing direction"))?;
        let down = forward.cross(&right);
        let rot = nalgebra::Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[right, down, forward]));
        Self::new(
            position,
            UnitQuaternion::from_rotation_matrix(&rot),
            Vector2::new(focal, focal),
            Vector2::new(resolution.width as f64 / 2.0, resolution.height as f64 / 2.0),
            resolution,
            0.01,
        )
    }

    pub fn position(&self) -> &Vector3<f64> {
        &self.position
    }

    pub fn orientation(&self) -> &UnitQuaternion<f64> {
        &self.orientation
    }

    pub fn focal(&self) -> &Vector2<f64> {
        &self.focal
    }

    pub fn principal_point(&self) -> &Vector2<f64> {
        &self.principal_point
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    pub fn near_clip(&self) -> f64 {
        self.near_clip
    }

    pub fn with_position(&self, position: Vector3<f64>) -> Self {
        Self {
            position,
            ..self.clone()
        }
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.orientation.inverse_transform_vector(&(p - self.position))
    }

    /// Projects a Gaussian; `None` when its mean is not beyond the near plane.
    pub fn project(&self, g: &Gaussian3D) -> Option<Projection> {
        let pc = self.world_to_camera(g.mean());
        if !(pc.z >= self.near_clip) {
            return None;
        }
        let (fx, fy) = (self.focal.x, self.focal.y);
        let (x, y, z) = (pc.x, pc.y, pc.z);
        let mean = Vector2::new(fx * x / z + self.principal_point.x, fy * y / z + self.principal_point.y);
        let jacobian = Matrix2x3::new(fx / z, 0.0, -fx * x / (z * z), 0.0, fy / z, -fy * y / (z * z));
        let w = self.orientation.to_rotation_matrix().into_inner().transpose();
        let cov_cam = w * g.covariance() * w.transpose();
        let mut cov = jacobian * cov_cam * jacobian.transpose();
        cov = (cov + cov.transpose()) * 0.5 + Matrix2::identity() * COV2D_BLUR;
        Some(Projection {
            splat: Splat2D { mean, cov, depth: z },
            cam_point: pc,
            jacobian,
            cov_cam,
        })
    }

    fn check_pixel(&self, u: &Vector2<f64>) -> Result<()> {
        let (w, h) = (self.resolution.width as f64, self.resolution.height as f64);
        if u.x.is_finite() && u.y.is_finite() && (0.0..=w).contains(&u.x) && (0.0..=h).contains(&u.y) {
            Ok(())
        } else {
            Err(Error::param(format!("pixel {u:?} outside {w}x{h} image")))
        }
    }

    /// Unit viewing direction through image point `u`, camera frame.
    pub fn ray_camera(&self, u: &Vector2<f64>) -> Result<Vector3<f64>> {
        self.check_pixel(u)?;
        let d = Vector3::new(
            (u.x - self.principal_point.x) / self.focal.x,
            (u.y - self.principal_point.y) / self.focal.y,
            1.0,
        );
        Ok(d.normalize())
    }

    /// Unit viewing direction through image point `u`, world frame.
    pub fn ray_world(&self, u: &Vector2<f64>) -> Result<Vector3<f64>> {
        Ok(self.orientation * self.ray_camera(u)?)
    }

    /// World-frame ray through the center of pixel `(x, y)`.
    pub fn pixel_center_ray(&self, x: usize, y: usize) -> Vector3<f64> {
        let u = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
        self.ray_world(&u).expect("pixel center inside image")
    }
}

impl Projection {
    /// Chains gradients w.r.t. the projected mean and covariance back to the
    /// world-space mean. `d_cov2d` is the full-matrix gradient (symmetric).
    pub fn mean_gradient(
        &self,
        camera: &Camera,
        d_mean2d: &Vector2<f64>,
        d_cov2d: &Matrix2<f64>,
    ) -> Vector3<f64> {
        let (fx, fy) = (camera.focal.x, camera.focal.y);
        let (x, y, z) = (self.cam_point.x, self.cam_point.y, self.cam_point.z);
        let mut d_cam = self.jacobian.transpose() * d_mean2d;
        // cov2d = J M Jᵀ, so ∂L/∂J = 2 G J M for symmetric G and M.
        let dj = 2.0 * d_cov2d * self.jacobian * self.cov_cam;
        let (z2, z3) = (z * z, z * z * z);
        d_cam.x += -fx / z2 * dj[(0, 2)];
        d_cam.y += -fy / z2 * dj[(1, 2)];
        d_cam.z += -fx / z2 * dj[(0, 0)]
            + 2.0 * fx * x / z3 * dj[(0, 2)]
            + -fy / z2 * dj[(1, 1)]
            + 2.0 * fy * y / z3 * dj[(1, 2)];
        camera.orientation * d_cam
    }
}

/// Free-function form of [`Camera::project`].
pub fn project_gaussian(camera: &Camera, g: &Gaussian3D) -> Option<Splat2D> {
    camera.project(g).map(|p| p.splat)
}

/// Unit ray through pixel coordinates `u` (world frame when `world` is set).
pub fn pixel_ray(camera: &Camera, u: &Vector2<f64>, world: bool) -> Result<Vector3<f64>> {
    if world {
        camera.ray_world(u)
    } else {
        camera.ray_camera(u)
    }
}
