//! Time-instant Gaussians to screen-space splats (covariance, projection, view-dependent
//! opacity and color) and the matching backward pass.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

use crate::deform::TimeGaussian;
use crate::error::Result;
use crate::gaussian::{covariance_unchecked, normalize_backward, project, project_backward, Camera, SCALE_FLOOR};
use crate::image::Image;
use crate::opacity::{physical_opacity_backward, ISOTROPY_GAP, MIN_DISTANCE};
use crate::render::{render, render_backward, RenderOutput, Splat2D, SplatGrad};

/// Degree-1 real spherical-harmonic constant.
pub const SH_C1: f64 = 0.488_602_511_902_919_9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatSettings {
    /// Reference distance for the inverse-square opacity term.
    pub d_ref: f64,
    pub physical_opacity: bool,
    pub background: [f64; 3],
}

#[derive(Debug, Clone)]
struct Geometry {
    rot: Matrix3<f64>,
    cov: Matrix3<f64>,
    /// Shortest axis, `None` when the two smallest scales coincide.
    axis: Option<usize>,
    to_camera: Vector3<f64>,
    distance: f64,
    /// Per-channel mask of colors inside `[0, 1]` before clamping.
    color_live: [bool; 3],
    view_dir: Vector3<f64>,
}

/// Splats for one camera, with `owner[s]` the index of the Gaussian behind splat `s`.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub splats: Vec<Splat2D>,
    pub owner: Vec<usize>,
    geom: Vec<Geometry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TimeGrad {
    pub mu: Vector3<f64>,
    pub rot_raw: [f64; 4],
    pub scale_raw: Vector3<f64>,
    pub base_opacity: f64,
    pub color: [f64; 3],
    pub sh1: [[f64; 3]; 3],
}

fn shortest_axis(scale: &Vector3<f64>) -> Option<usize> {
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| scale[a].total_cmp(&scale[b]));
    let (s0, s1) = (scale[idx[0]], scale[idx[1]]);
    (s1 * s1 - s0 * s0 >= ISOTROPY_GAP).then_some(idx[0])
}

fn sh_basis(d: &Vector3<f64>) -> [f64; 3] {
    [-SH_C1 * d.y, SH_C1 * d.z, -SH_C1 * d.x]
}

/// The opacity normal is the oriented shortest axis `R e_k`, so a splat seen from behind is
/// transparent.
pub fn prepare_splats(gs: &[TimeGaussian], cam: &Camera, settings: &SplatSettings) -> Prepared {
    let center = cam.center();
    let items: Vec<Option<(Splat2D, Geometry)>> = map_gaussians(gs.len(), |i| {
        let g = &gs[i];
        let rot = g.rot.to_rotation();
        let cov = covariance_unchecked(&rot, &g.scale);
        let proj = project(&g.mu, &cov, cam)?;
        let offset = center - g.mu;
        let distance = offset.norm();
        if distance <= MIN_DISTANCE {
            return None;
        }
        let to_camera = offset / distance;
        let axis = shortest_axis(&g.scale);
        let opacity = if settings.physical_opacity {
            let cos = axis.map_or(1.0, |k| rot.column(k).dot(&to_camera)).max(0.0);
            (g.base_opacity * cos * (settings.d_ref / distance).powi(2)).clamp(0.0, 1.0)
        } else {
            g.base_opacity
        };
        let view_dir = -to_camera;
        let mut color = g.color;
        let mut color_live = [true; 3];
        if let Some(sh) = &g.sh1 {
            let b = sh_basis(&view_dir);
            for c in 0..3 {
                let v = color[c] + b[0] * sh[0][c] + b[1] * sh[1][c] + b[2] * sh[2][c];
                color_live[c] = (0.0..=1.0).contains(&v);
                color[c] = v.clamp(0.0, 1.0);
            }
        }
        Some((
            Splat2D {
                id: g.id,
                mean: [proj.mean2d.x, proj.mean2d.y],
                cov: [proj.cov2d[(0, 0)], proj.cov2d[(0, 1)], proj.cov2d[(1, 1)]],
                opacity,
                color,
                depth: proj.depth,
            },
            Geometry {
                rot,
                cov,
                axis,
                to_camera,
                distance,
                color_live,
                view_dir,
            },
        ))
    });
    let mut out = Prepared {
        splats: Vec::with_capacity(gs.len()),
        owner: Vec::with_capacity(gs.len()),
        geom: Vec::with_capacity(gs.len()),
    };
    for (i, item) in items.into_iter().enumerate() {
        if let Some((s, g)) = item {
            out.splats.push(s);
            out.owner.push(i);
            out.geom.push(g);
        }
    }
    out
}

/// Pulls splat gradients back to the time-instant parameters. Returns one entry per input
/// Gaussian (zero for culled ones).
pub fn splat_backward(
    gs: &[TimeGaussian],
    cam: &Camera,
    settings: &SplatSettings,
    prepared: &Prepared,
    grads: &[SplatGrad],
) -> Vec<TimeGrad> {
    let per_splat: Vec<TimeGrad> = map_gaussians(prepared.splats.len(), |s| {
        let g = &gs[prepared.owner[s]];
        let geo = &prepared.geom[s];
        let sg = &grads[s];
        let mut out = TimeGrad::default();

        for c in 0..3 {
            if geo.color_live[c] {
                out.color[c] = sg.color[c];
            }
        }
        if let Some(sh) = &g.sh1 {
            let b = sh_basis(&geo.view_dir);
            let mut d_b = [0.0; 3];
            for k in 0..3 {
                for c in 0..3 {
                    out.sh1[k][c] = b[k] * out.color[c];
                    d_b[k] += sh[k][c] * out.color[c];
                }
            }
            let d_dir = Vector3::new(-SH_C1 * d_b[2], -SH_C1 * d_b[0], SH_C1 * d_b[1]);
            let u = geo.view_dir;
            out.mu += (d_dir - u * u.dot(&d_dir)) / geo.distance;
        }

        let mut d_rot = Matrix3::zeros();
        if settings.physical_opacity {
            let normal: Vector3<f64> = match geo.axis {
                Some(k) => geo.rot.column(k).into(),
                None => geo.to_camera,
            };
            let og = physical_opacity_backward(
                g.base_opacity,
                &normal,
                &geo.to_camera,
                geo.distance,
                settings.d_ref,
                sg.opacity,
            );
            out.base_opacity = og.base;
            if let Some(k) = geo.axis {
                let mut col = d_rot.column_mut(k);
                col += og.normal;
                // to_camera = (c - μ)/|c - μ| and distance = |c - μ|
                let v = geo.to_camera;
                let d_v = og.to_camera;
                out.mu -= (d_v - v * v.dot(&d_v)) / geo.distance;
            }
            out.mu -= geo.to_camera * og.distance;
        } else {
            out.base_opacity = sg.opacity;
        }

        let d_cov2d = Matrix2::new(sg.cov[0], 0.5 * sg.cov[1], 0.5 * sg.cov[1], sg.cov[2]);
        let (d_mean, d_cov) = project_backward(&g.mu, &geo.cov, cam, &Vector2::from(sg.mean), &d_cov2d);
        out.mu += d_mean;

        // Σ = M Mᵀ with M = R S
        let m = geo.rot * Matrix3::from_diagonal(&g.scale);
        let d_m = (d_cov + d_cov.transpose()) * m;
        d_rot += d_m * Matrix3::from_diagonal(&g.scale);
        let rt_dm = geo.rot.transpose() * d_m;
        for k in 0..3 {
            if g.scale_raw[k] >= SCALE_FLOOR {
                out.scale_raw[k] = rt_dm[(k, k)];
            }
        }
        let d_unit = g.rot.rotation_backward(&d_rot);
        out.rot_raw = normalize_backward(&g.rot_raw, &d_unit);
        out
    });
    let mut result = vec![TimeGrad::default(); gs.len()];
    for (s, g) in per_splat.into_iter().enumerate() {
        result[prepared.owner[s]] = g;
    }
    result
}

/// Renders time-instant Gaussians from `cam`.
pub fn render_gaussians(
    gs: &[TimeGaussian],
    cam: &Camera,
    settings: &SplatSettings,
    retain: bool,
) -> (Prepared, RenderOutput) {
    let prepared = prepare_splats(gs, cam, settings);
    let out = render(&prepared.splats, cam.width, cam.height, settings.background, retain);
    (prepared, out)
}

/// Render plus the gradient of `loss(image)` w.r.t. every Gaussian given `d_image`.
pub fn render_gaussians_backward(
    gs: &[TimeGaussian],
    cam: &Camera,
    settings: &SplatSettings,
    prepared: &Prepared,
    out: &RenderOutput,
    d_image: &[[f64; 3]],
) -> Result<Vec<TimeGrad>> {
    let sg = render_backward(out, &prepared.splats, d_image)?;
    Ok(splat_backward(gs, cam, settings, prepared, &sg))
}

pub fn render_image(gs: &[TimeGaussian], cam: &Camera, settings: &SplatSettings) -> Image {
    render_gaussians(gs, cam, settings, false).1.image
}

#[cfg(feature = "parallel")]
fn map_gaussians<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_gaussians<T>(n: usize, f: impl Fn(usize) -> T) -> Vec<T> {
    (0..n).map(f).collect()
}
