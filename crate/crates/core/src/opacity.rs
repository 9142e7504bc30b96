//! View-dependent opacity from orientation and distance, and importance-based pruning.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};
use crate::gaussian::Gaussian;
use crate::render::Trace;

/// Eigenvalue gap below which the shortest axis is considered undefined.
pub const ISOTROPY_GAP: f64 = 1e-9;
pub const MIN_DISTANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpacityContext {
    pub camera_position: Vector3<f64>,
    pub d_ref: f64,
}

/// Median distance from the camera centers to `centroid`.
pub fn reference_distance(camera_centers: &[Vector3<f64>], centroid: &Vector3<f64>) -> Result<f64> {
    if camera_centers.is_empty() {
        return Err(Error::InvalidInput("no cameras for reference distance".into()));
    }
    let mut d: Vec<f64> = camera_centers.iter().map(|c| (c - centroid).norm()).collect();
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let m = if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    };
    if !(m > 0.0) {
        return Err(Error::InvalidInput("reference distance must be positive".into()));
    }
    Ok(m)
}

/// Shortest-axis direction of `cov`, oriented against `view_dir` (the ray from the camera
/// toward the Gaussian). When the two smallest eigenvalues coincide the normal is taken to
/// face the camera.
pub fn gaussian_normal(cov: &Matrix3<f64>, view_dir: &Vector3<f64>) -> Vector3<f64> {
    let eig = SymmetricEigen::new(*cov);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    if eig.eigenvalues[idx[1]] - eig.eigenvalues[idx[0]] < ISOTROPY_GAP {
        return -view_dir;
    }
    let n: Vector3<f64> = eig.eigenvectors.column(idx[0]).into();
    if n.dot(&-view_dir) < 0.0 {
        -n
    } else {
        n
    }
}

/// `clamp(base · max(cos θ, 0) · (d_ref / distance)², 0, 1)` with `cos θ = normal · to_camera`.
pub fn physical_opacity(
    base: f64,
    normal: &Vector3<f64>,
    to_camera: &Vector3<f64>,
    distance: f64,
    d_ref: f64,
) -> Result<f64> {
    if distance <= MIN_DISTANCE {
        return Err(Error::NearSingular(distance));
    }
    let cos = normal.dot(to_camera).max(0.0);
    Ok((base * cos * (d_ref / distance).powi(2)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpacityGrad {
    pub base: f64,
    pub normal: Vector3<f64>,
    pub to_camera: Vector3<f64>,
    pub distance: f64,
}

/// Gradient of [`physical_opacity`] given the upstream `d_alpha`. Zero where a clamp is active.
pub fn physical_opacity_backward(
    base: f64,
    normal: &Vector3<f64>,
    to_camera: &Vector3<f64>,
    distance: f64,
    d_ref: f64,
    d_alpha: f64,
) -> OpacityGrad {
    let cos = normal.dot(to_camera);
    let falloff = (d_ref / distance).powi(2);
    let raw = base * cos.max(0.0) * falloff;
    let mut g = OpacityGrad {
        base: 0.0,
        normal: Vector3::zeros(),
        to_camera: Vector3::zeros(),
        distance: 0.0,
    };
    if !(raw > 0.0 && raw < 1.0) {
        return g;
    }
    g.base = d_alpha * cos * falloff;
    let d_cos = d_alpha * base * falloff;
    g.normal = to_camera * d_cos;
    g.to_camera = normal * d_cos;
    g.distance = -2.0 * d_alpha * raw / distance;
    g
}

/// Per-Gaussian maximum of `α · T` over every pixel of every accumulated render.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceTable {
    pub w: Vec<f64>,
}

impl ImportanceTable {
    pub fn new(n: usize) -> ImportanceTable {
        ImportanceTable { w: vec![0.0; n] }
    }

    pub fn merge(&mut self, other: &ImportanceTable) {
        for (a, b) in self.w.iter_mut().zip(&other.w) {
            *a = a.max(*b);
        }
    }
}

/// `owner[s]` maps splat index `s` of the traced render to its row in the table.
pub fn accumulate_importance(table: &mut ImportanceTable, trace: &Trace, owner: &[usize]) {
    for c in trace.all() {
        let g = owner[c.splat as usize];
        let v = c.alpha * c.t_before;
        if v > table.w[g] {
            table.w[g] = v;
        }
    }
}

/// Rows to keep and rows to remove (`w < tau`), both ascending.
pub fn prune_plan(table: &ImportanceTable, tau: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    let (keep, remove): (Vec<usize>, Vec<usize>) = (0..table.w.len()).partition(|&i| !(table.w[i] < tau));
    if keep.is_empty() && !remove.is_empty() {
        return Err(Error::PruneEmptiesScene { tau, n: remove.len() });
    }
    Ok((keep, remove))
}

pub fn prune(scene: &[Gaussian], table: &ImportanceTable, tau: f64) -> Result<(Vec<Gaussian>, Vec<u64>)> {
    if table.w.len() != scene.len() {
        return Err(Error::ShapeMismatch(format!(
            "importance table has {} entries for {} gaussians",
            table.w.len(),
            scene.len()
        )));
    }
    let (keep, remove) = prune_plan(table, tau)?;
    Ok((
        keep.iter().map(|&i| scene[i].clone()).collect(),
        remove.iter().map(|&i| scene[i].id).collect(),
    ))
}

/// One line per removed Gaussian: `id importance`.
pub fn prune_report(ids: &[u64], table: &ImportanceTable, removed: &[usize]) -> String {
    let mut s = format!("# removed {} of {}\n", removed.len(), ids.len());
    for &i in removed {
        s.push_str(&format!("{} {:e}\n", ids[i], table.w[i]));
    }
    s
}
