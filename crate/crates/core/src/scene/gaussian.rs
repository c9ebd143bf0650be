use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

/// One anisotropic 3D Gaussian with RGB color.
///
/// Fields are private so the construction invariants (unit quaternion,
/// positive scale, opacity and color in `[0, 1]`) cannot be broken.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian3D {
    mean: Vector3<f64>,
    rotation: UnitQuaternion<f64>,
    scale: Vector3<f64>,
    opacity: f64,
    color: Vector3<f64>,
}

fn in_unit(v: f64) -> bool {
    (0.0..=1.0).contains(&v)
}

impl Gaussian3D {
    pub fn new(
        mean: Vector3<f64>,
        rotation: UnitQuaternion<f64>,
        scale: Vector3<f64>,
        opacity: f64,
        color: Vector3<f64>,
    ) -> Result<Self> {
        if !mean.iter().all(|v| v.is_finite()) {
            return Err(Error::param("gaussian mean must be finite"));
        }
        check_scale(&scale)?;
        if !in_unit(opacity) {
            return Err(Error::param(format!("opacity {opacity} outside [0, 1]")));
        }
        if !color.iter().all(|&c| in_unit(c)) {
            return Err(Error::param(format!("color {color:?} outside [0, 1]")));
        }
        // Re-normalize so the stored quaternion is unit to machine precision.
        let rotation = UnitQuaternion::new_normalize(rotation.into_inner());
        Ok(Self {
            mean,
            rotation,
            scale,
            opacity,
            color,
        })
    }

    pub fn isotropic(mean: Vector3<f64>, scale: f64, opacity: f64, color: Vector3<f64>) -> Result<Self> {
        Self::new(
            mean,
            UnitQuaternion::identity(),
            Vector3::repeat(scale),
            opacity,
            color,
        )
    }

    pub fn mean(&self) -> &Vector3<f64> {
        &self.mean
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn scale(&self) -> &Vector3<f64> {
        &self.scale
    }

    pub fn opacity(&self) -> f64 {
        self.opacity
    }

    pub fn color(&self) -> &Vector3<f64> {
        &self.color
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        covariance_unchecked(&self.rotation, &self.scale)
    }

    pub fn with_mean(&self, mean: Vector3<f64>) -> Self {
        Self {
            mean,
            ..self.clone()
        }
    }

    pub fn with_opacity(&self, opacity: f64) -> Result<Self> {
        if !in_unit(opacity) {
            return Err(Error::param(format!("opacity {opacity} outside [0, 1]")));
        }
        Ok(Self {
            opacity,
            ..self.clone()
        })
    }

    /// Sets the color, clamping each component into `[0, 1]`.
    pub fn set_color_clamped(&mut self, color: Vector3<f64>) {
        self.color = color.map(|c| c.clamp(0.0, 1.0));
    }

    /// Sets the opacity, clamping into `[0, 1]`.
    pub fn set_opacity_clamped(&mut self, opacity: f64) {
        self.opacity = opacity.clamp(0.0, 1.0);
    }

    pub fn set_mean(&mut self, mean: Vector3<f64>) {
        self.mean = mean;
    }
}

fn check_scale(scale: &Vector3<f64>) -> Result<()> {
    if scale.iter().all(|&s| s > 0.0 && s.is_finite()) {
        Ok(())
    } else {
        Err(Error::param(format!("scale {scale:?} must be positive")))
    }
}

fn covariance_unchecked(rotation: &UnitQuaternion<f64>, scale: &Vector3<f64>) -> Matrix3<f64> {
    let r = rotation.to_rotation_matrix().into_inner();
    let rs = r * Matrix3::from_diagonal(scale);
    let cov = rs * rs.transpose();
    // Symmetrize away rounding asymmetry.
    (cov + cov.transpose()) * 0.5
}

/// `R S Sᵀ Rᵀ` for a rotation and per-axis scale.
pub fn covariance_from_rs(rotation: &UnitQuaternion<f64>, scale: &Vector3<f64>) -> Result<Matrix3<f64>> {
    check_scale(scale)?;
    Ok(covariance_unchecked(rotation, scale))
}

/// Unnormalized density `exp(-½ (x-μ)ᵀ Σ⁻¹ (x-μ))`, evaluated in the
/// rotated frame so no matrix inverse is formed.
pub fn gaussian_density_at(g: &Gaussian3D, x: &Vector3<f64>) -> f64 {
    let local = g.rotation.inverse_transform_vector(&(x - g.mean));
    let q: f64 = local
        .iter()
        .zip(g.scale.iter())
        .map(|(d, s)| (d / s) * (d / s))
        .sum();
    (-0.5 * q).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn quat(w: f64, x: f64, y: f64, z: f64) -> UnitQuaternion<f64> {
        UnitQuaternion::new_normalize(nalgebra::Quaternion::new(w, x, y, z))
    }

    #[test]
    fn identity_covariances() {
        let id = UnitQuaternion::identity();
        let c = covariance_from_rs(&id, &Vector3::new(1.0, 1.0, 1.0)).unwrap();
        assert_relative_eq!(c, Matrix3::identity(), epsilon = 1e-15);
        let c = covariance_from_rs(&id, &Vector3::new(2.0, 1.0, 1.0)).unwrap();
        assert_relative_eq!(c, Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)), epsilon = 1e-15);
    }

    #[test]
    fn nonpositive_scale_rejected() {
        let id = UnitQuaternion::identity();
        assert!(matches!(
            covariance_from_rs(&id, &Vector3::new(1.0, 0.0, 1.0)),
            Err(Error::InvalidParameter(_))
        ));
        assert!(Gaussian3D::isotropic(Vector3::zeros(), -1.0, 0.5, Vector3::zeros()).is_err());
    }

    #[test]
    fn construction_invariants() {
        assert!(Gaussian3D::isotropic(Vector3::zeros(), 1.0, 1.5, Vector3::zeros()).is_err());
        assert!(Gaussian3D::isotropic(Vector3::zeros(), 1.0, 0.5, Vector3::new(0.0, 2.0, 0.0)).is_err());
        let g = Gaussian3D::new(
            Vector3::zeros(),
            quat(3.0, 1.0, -2.0, 0.5),
            Vector3::new(1.0, 2.0, 3.0),
            0.5,
            Vector3::repeat(0.5),
        )
        .unwrap();
        assert!((g.rotation().quaternion().norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn density_examples() {
        let g = Gaussian3D::isotropic(Vector3::new(1.0, 2.0, 3.0), 1.0, 1.0, Vector3::zeros()).unwrap();
        assert_eq!(gaussian_density_at(&g, g.mean()), 1.0);
        let x = g.mean() + Vector3::new(1.0, 0.0, 0.0);
        assert_relative_eq!(gaussian_density_at(&g, &x), (-0.5f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn density_matches_direct_quadratic_form() {
        // Oracle: explicit Σ⁻¹ via matrix inverse.
        let g = Gaussian3D::new(
            Vector3::new(0.3, -0.2, 1.0),
            quat(0.8, 0.3, -0.4, 0.2),
            Vector3::new(0.5, 1.3, 0.2),
            0.7,
            Vector3::repeat(0.1),
        )
        .unwrap();
        let inv = g.covariance().try_inverse().unwrap();
        for x in [
            Vector3::new(0.1, 0.0, 1.1),
            Vector3::new(0.9, -1.0, 0.7),
            Vector3::new(0.3, -0.1, 1.05),
        ] {
            let d = x - g.mean();
            let direct = (-0.5 * (d.transpose() * inv * d)[(0, 0)]).exp();
            assert!((gaussian_density_at(&g, &x) - direct).abs() <= 1e-12);
        }
    }

    /// Symmetric eigenvalues by Jacobi rotations; independent of nalgebra's solver.
    fn jacobi_eigenvalues(mut a: Matrix3<f64>) -> [f64; 3] {
        for _ in 0..100 {
            let (mut p, mut q, mut best) = (0, 1, 0.0);
            for i in 0..3 {
                for j in (i + 1)..3 {
                    if a[(i, j)].abs() > best {
                        best = a[(i, j)].abs();
                        p = i;
                        q = j;
                    }
                }
            }
            if best < 1e-300 {
                break;
            }
            let theta = 0.5 * (2.0 * a[(p, q)]).atan2(a[(q, q)] - a[(p, p)]);
            let (s, c) = theta.sin_cos();
            let mut j = Matrix3::identity();
            j[(p, p)] = c;
            j[(q, q)] = c;
            j[(p, q)] = s;
            j[(q, p)] = -s;
            a = j.transpose() * a * j;
        }
        let mut e = [a[(0, 0)], a[(1, 1)], a[(2, 2)]];
        e.sort_by(f64::total_cmp);
        e
    }

    proptest! {
        #[test]
        fn covariance_eigenvalues_are_squared_scales(
            w in -1.0f64..1.0, x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0,
            s0 in 0.05f64..3.0, s1 in 0.05f64..3.0, s2 in 0.05f64..3.0,
        ) {
            prop_assume!((w * w + x * x + y * y + z * z) > 1e-3);
            let q = quat(w, x, y, z);
            let c = covariance_from_rs(&q, &Vector3::new(s0, s1, s2)).unwrap();
            prop_assert!((c - c.transpose()).abs().max() < 1e-15);
            let eig = jacobi_eigenvalues(c);
            let mut want = [s0 * s0, s1 * s1, s2 * s2];
            want.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(want.iter()) {
                prop_assert!((a - b).abs() <= 1e-10 * b.max(1.0));
            }
            // PD: Cholesky exists.
            prop_assert!(c.cholesky().is_some());
        }
    }
}
