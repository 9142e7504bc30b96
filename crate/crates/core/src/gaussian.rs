//! Gaussian primitive, pinhole camera, covariance construction and projection.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, SymmetricEigen, Vector2, Vector3};

use crate::error::{Error, Result};

pub const FEATURE_DIM: usize = 16;
pub const SCALE_FLOOR: f64 = 1e-6;
pub const NEAR_PLANE: f64 = 1e-4;
/// Screen-space low-pass added to every projected covariance (px²).
pub const COV2D_FLOOR: f64 = 0.3;

/// Unit quaternion stored as `(w, x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quat(pub [f64; 4]);

impl Quat {
    pub const IDENTITY: Quat = Quat([1.0, 0.0, 0.0, 0.0]);

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Quat {
        let a = axis.normalize();
        let (s, c) = (angle * 0.5).sin_cos();
        Quat([c, a.x * s, a.y * s, a.z * s])
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn normalized(&self) -> Result<Quat> {
        let n = self.norm();
        if !(n > 1e-12) || !n.is_finite() {
            return Err(Error::DegenerateRotation(n));
        }
        Ok(Quat(self.0.map(|v| v / n)))
    }

    pub fn to_rotation(&self) -> Matrix3<f64> {
        let [w, x, y, z] = self.0;
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

    /// Pulls a gradient on the rotation matrix back onto the (unnormalized) quaternion
    /// components used by [`Quat::to_rotation`].
    pub fn rotation_backward(&self, d_r: &Matrix3<f64>) -> [f64; 4] {
        let [w, x, y, z] = self.0;
        let g = |r: usize, c: usize| d_r[(r, c)];
        let dw = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
        let dx = 2.0
            * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) + w * g(2, 1)
                - 2.0 * x * g(2, 2));
        let dy = 2.0
            * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) + z * g(2, 1)
                - 2.0 * y * g(2, 2));
        let dz = 2.0
            * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
                + y * g(1, 2)
                + x * g(2, 0)
                + y * g(2, 1));
        [dw, dx, dy, dz]
    }
}

/// Gradient of `q / |q|` pulled back to `q`.
pub fn normalize_backward(raw: &[f64; 4], d_unit: &[f64; 4]) -> [f64; 4] {
    let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let u = raw.map(|v| v / n);
    let dot: f64 = u.iter().zip(d_unit).map(|(a, b)| a * b).sum();
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = (d_unit[i] - u[i] * dot) / n;
    }
    out
}

/// One splat primitive in canonical space.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub id: u64,
    pub mu_c: Vector3<f64>,
    pub rot_c: Quat,
    pub scale_c: Vector3<f64>,
    pub base_opacity: f64,
    /// Degree-0 color.
    pub color: [f64; 3],
    /// Optional degree-1 coefficients, one RGB triple per basis function.
    pub sh1: Option<[[f64; 3]; 3]>,
    pub feature: Option<[f64; FEATURE_DIM]>,
}

impl Gaussian {
    pub fn new(id: u64, mu_c: Vector3<f64>, scale_c: Vector3<f64>, color: [f64; 3]) -> Self {
        Gaussian {
            id,
            mu_c,
            rot_c: Quat::IDENTITY,
            scale_c,
            base_opacity: 1.0,
            color,
            sh1: None,
            feature: None,
        }
    }

    /// Restores the stated invariants after a parameter update.
    pub fn enforce_invariants(&mut self) -> Result<()> {
        self.rot_c = self.rot_c.normalized()?;
        for s in self.scale_c.iter_mut() {
            *s = s.max(SCALE_FLOOR);
        }
        self.base_opacity = self.base_opacity.clamp(0.0, 1.0);
        Ok(())
    }
}

/// Pinhole camera. `rotation` maps world to camera; camera looks down +z with y down.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Camera {
        let forward = (target - eye).normalize();
        let down = -(up - forward * up.dot(&forward)).normalize();
        let right = down.cross(&forward);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Camera {
            rotation,
            translation: -(rotation * eye),
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("camera dimensions must be >= 1".into()));
        }
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity())
            .abs()
            .max();
        if err > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "camera rotation not orthonormal (err {err:e})"
            )));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Pixel coordinates of a world point, or `None` behind the near plane.
    pub fn project_point(&self, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        let c = self.to_camera(p);
        if c.z <= NEAR_PLANE {
            return None;
        }
        Some(Vector2::new(
            self.fx * c.x / c.z + self.cx,
            self.fy * c.y / c.z + self.cy,
        ))
    }

    /// World point seen at pixel `(u, v)` with camera-space depth `z`.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        let c = Vector3::new((u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z);
        self.rotation.transpose() * (c - self.translation)
    }

    pub fn in_bounds(&self, p: &Vector2<f64>) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x < self.width as f64 && p.y < self.height as f64
    }
}

/// `Σ = R S Sᵀ Rᵀ` for a unit quaternion and per-axis scales.
pub fn covariance_from_rs(rot: &Quat, scale: &Vector3<f64>) -> Result<Matrix3<f64>> {
    if (rot.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!("quaternion norm {} is not 1", rot.norm())));
    }
    if scale.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::InvalidInput(format!("non-positive scale {scale:?}")));
    }
    Ok(covariance_unchecked(&rot.to_rotation(), scale))
}

pub(crate) fn covariance_unchecked(r: &Matrix3<f64>, scale: &Vector3<f64>) -> Matrix3<f64> {
    let m = r * Matrix3::from_diagonal(scale);
    let cov = m * m.transpose();
    // exact symmetry
    (cov + cov.transpose()) * 0.5
}

/// Unnormalized Gaussian density `exp(-½ (x-μ)ᵀ Σ⁻¹ (x-μ))`.
pub fn eval_density(mu: &Vector3<f64>, cov: &Matrix3<f64>, x: &Vector3<f64>) -> Result<f64> {
    let d = x - mu;
    let eig = SymmetricEigen::new(*cov);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let mut c = *cov;
    if !(min > 0.0) || max / min > 1e12 {
        c += Matrix3::identity() * 1e-8;
    }
    let chol = c
        .cholesky()
        .ok_or_else(|| Error::DegenerateCovariance(format!("eigenvalues {:?}", eig.eigenvalues.as_slice())))?;
    let m = d.dot(&chol.solve(&d));
    Ok((-0.5 * m.max(0.0)).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
}

/// Pinhole projection Jacobian at a camera-space point.
pub fn projection_jacobian(cam: &Camera, p: &Vector3<f64>) -> Matrix2x3<f64> {
    let z = p.z;
    let z2 = z * z;
    Matrix2x3::new(cam.fx / z, 0.0, -cam.fx * p.x / z2, 0.0, cam.fy / z, -cam.fy * p.y / z2)
}

/// `x/z` and `y/z` clamped to this multiple of the half field of view before the Jacobian is
/// evaluated, so splats far outside the image keep a bounded footprint.
pub const JACOBIAN_GUARD: f64 = 1.3;

/// Clamped tangents `(u, v)` and whether each one hit its limit.
fn guarded_tangents(cam: &Camera, p: &Vector3<f64>) -> ([f64; 2], [bool; 2]) {
    let lim = [
        JACOBIAN_GUARD * 0.5 * cam.width as f64 / cam.fx,
        JACOBIAN_GUARD * 0.5 * cam.height as f64 / cam.fy,
    ];
    let raw = [p.x / p.z, p.y / p.z];
    let mut out = [0.0; 2];
    let mut hit = [false; 2];
    for k in 0..2 {
        out[k] = raw[k].clamp(-lim[k], lim[k]);
        hit[k] = raw[k].abs() > lim[k];
    }
    (out, hit)
}

/// [`projection_jacobian`] with the tangents clamped by [`JACOBIAN_GUARD`].
fn guarded_jacobian(cam: &Camera, p: &Vector3<f64>) -> Matrix2x3<f64> {
    let ([u, v], _) = guarded_tangents(cam, p);
    let z = p.z;
    Matrix2x3::new(cam.fx / z, 0.0, -cam.fx * u / z, 0.0, cam.fy / z, -cam.fy * v / z)
}

/// Projects a 3D Gaussian to screen space (EWA first-order). Returns `None` when culled.
pub fn project(mean: &Vector3<f64>, cov: &Matrix3<f64>, cam: &Camera) -> Option<Projection> {
    let p = cam.to_camera(mean);
    if p.z <= NEAR_PLANE {
        return None;
    }
    let t = guarded_jacobian(cam, &p) * cam.rotation;
    let cov2d = t * cov * t.transpose() + Matrix2::identity() * COV2D_FLOOR;
    Some(Projection {
        mean2d: Vector2::new(cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy),
        cov2d: (cov2d + cov2d.transpose()) * 0.5,
        depth: p.z,
    })
}

/// Gradients of a projection's outputs pulled back to the world mean and 3D covariance.
///
/// `d_cov2d` is the gradient w.r.t. the full (symmetric) 2×2 matrix.
pub fn project_backward(
    mean: &Vector3<f64>,
    cov: &Matrix3<f64>,
    cam: &Camera,
    d_mean2d: &Vector2<f64>,
    d_cov2d: &Matrix2<f64>,
) -> (Vector3<f64>, Matrix3<f64>) {
    let p = cam.to_camera(mean);
    let (x, y, z) = (p.x, p.y, p.z);
    let w = cam.rotation;
    let j = guarded_jacobian(cam, &p);
    let t = j * w;
    let g = (d_cov2d + d_cov2d.transpose()) * 0.5;

    let d_cov = t.transpose() * g * t;
    let d_t = 2.0 * g * t * cov;
    let d_j = d_t * w.transpose();

    let (fx, fy) = (cam.fx, cam.fy);
    let ([u, v], [u_hit, v_hit]) = guarded_tangents(cam, &p);
    let z2 = z * z;
    let mut dp = Vector3::zeros();
    dp.z += -fx / z2 * d_j[(0, 0)];
    dp.z += -fy / z2 * d_j[(1, 1)];
    // J02 = -fx·u/z with u = x/z unless clamped
    dp.z += fx * u / z2 * d_j[(0, 2)];
    if !u_hit {
        dp.x += -fx / z2 * d_j[(0, 2)];
        dp.z += fx * x / (z2 * z) * d_j[(0, 2)];
    }
    dp.z += fy * v / z2 * d_j[(1, 2)];
    if !v_hit {
        dp.y += -fy / z2 * d_j[(1, 2)];
        dp.z += fy * y / (z2 * z) * d_j[(1, 2)];
    }

    dp.x += fx / z * d_mean2d.x;
    dp.z += -fx * x / z2 * d_mean2d.x;
    dp.y += fy / z * d_mean2d.y;
    dp.z += -fy * y / z2 * d_mean2d.y;

    (w.transpose() * dp, d_cov)
}
