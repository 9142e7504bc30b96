//! Dynamic/static classification from offset variance and motion-flow consistency.

use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::gaussian::Camera;
use crate::image::DepthMap;

pub const FLOW_MAGIC: &[u8] = b"DSFLOW1\n";

/// Per-pixel displacement in pixels from frame `t` to `t + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMap {
    pub width: usize,
    pub height: usize,
    pub flow: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl FlowMap {
    pub fn zeros(width: usize, height: usize) -> FlowMap {
        FlowMap {
            width,
            height,
            flow: vec![[0.0; 2]; width * height],
            valid: vec![true; width * height],
        }
    }

    pub fn invalid(width: usize, height: usize) -> FlowMap {
        FlowMap {
            width,
            height,
            flow: vec![[0.0; 2]; width * height],
            valid: vec![false; width * height],
        }
    }

    /// Flow at the pixel nearest to `(u, v)`, or `None` outside the image or on an invalid pixel.
    pub fn sample_nearest(&self, u: f64, v: f64) -> Option<[f64; 2]> {
        let (x, y) = (u.round(), v.round());
        if !(x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64) {
            return None;
        }
        let i = y as usize * self.width + x as usize;
        self.valid[i].then_some(self.flow[i])
    }

    pub fn max_magnitude(&self) -> f64 {
        self.flow
            .iter()
            .zip(&self.valid)
            .filter(|(_, v)| **v)
            .map(|(f, _)| f[0].hypot(f[1]))
            .fold(0.0, f64::max)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = FLOW_MAGIC.to_vec();
        out.extend((self.width as u32).to_le_bytes());
        out.extend((self.height as u32).to_le_bytes());
        for f in &self.flow {
            out.extend(f[0].to_le_bytes());
            out.extend(f[1].to_le_bytes());
        }
        out.extend(self.valid.iter().map(|v| *v as u8));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<FlowMap> {
        let bad = |m: &str| Error::parse("flow file", m.to_string());
        let rest = bytes.strip_prefix(FLOW_MAGIC).ok_or_else(|| bad("bad magic"))?;
        if rest.len() < 8 {
            return Err(bad("truncated header"));
        }
        let w = u32::from_le_bytes(rest[0..4].try_into().unwrap()) as usize;
        let h = u32::from_le_bytes(rest[4..8].try_into().unwrap()) as usize;
        let n = w * h;
        let body = &rest[8..];
        if body.len() != n * 17 {
            return Err(bad("size does not match dimensions"));
        }
        let (pairs, mask) = body.split_at(n * 16);
        let flow = pairs
            .chunks_exact(16)
            .map(|c| {
                [
                    f64::from_le_bytes(c[..8].try_into().unwrap()),
                    f64::from_le_bytes(c[8..].try_into().unwrap()),
                ]
            })
            .collect();
        let valid = mask
            .iter()
            .map(|b| match b {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(bad("validity byte not 0/1")),
            })
            .collect::<Result<_>>()?;
        Ok(FlowMap {
            width: w,
            height: h,
            flow,
            valid,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<FlowMap> {
        FlowMap::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Static,
    Dynamic,
}

impl Label {
    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Static => "static",
            Label::Dynamic => "dynamic",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub ids: Vec<u64>,
    pub labels: Vec<Label>,
    pub variance: Vec<f64>,
    pub ratio: Vec<f64>,
}

impl Partition {
    pub fn all_static(ids: &[u64]) -> Partition {
        Partition {
            ids: ids.to_vec(),
            labels: vec![Label::Static; ids.len()],
            variance: vec![0.0; ids.len()],
            ratio: vec![0.0; ids.len()],
        }
    }

    pub fn dynamic_ids(&self) -> Vec<u64> {
        self.ids
            .iter()
            .zip(&self.labels)
            .filter(|(_, l)| **l == Label::Dynamic)
            .map(|(i, _)| *i)
            .collect()
    }

    pub fn n_dynamic(&self) -> usize {
        self.labels.iter().filter(|l| **l == Label::Dynamic).count()
    }

    pub fn select(&self, rows: &[usize]) -> Partition {
        Partition {
            ids: rows.iter().map(|&r| self.ids[r]).collect(),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            variance: rows.iter().map(|&r| self.variance[r]).collect(),
            ratio: rows.iter().map(|&r| self.ratio[r]).collect(),
        }
    }

    /// One line per Gaussian: `id label variance ratio`.
    pub fn report(&self) -> String {
        let mut s = String::from("# id label variance ratio\n");
        for i in 0..self.ids.len() {
            s.push_str(&format!(
                "{} {} {:e} {}\n",
                self.ids[i],
                self.labels[i].as_str(),
                self.variance[i],
                self.ratio[i]
            ));
        }
        s
    }
}

/// `(1/T) Σ ‖Δμ_t − mean‖²`
pub fn offset_variance(trajectory: &[Vector3<f64>]) -> f64 {
    if trajectory.is_empty() {
        return 0.0;
    }
    let n = trajectory.len() as f64;
    let mean = trajectory.iter().sum::<Vector3<f64>>() / n;
    trajectory.iter().map(|d| (d - mean).norm_squared()).sum::<f64>() / n
}

pub fn variance_candidates(variances: &[f64], tau: f64) -> Vec<usize> {
    (0..variances.len()).filter(|&i| variances[i] > tau).collect()
}

/// Flow induced by moving from `cam_t` to `cam_t1` with the scene frozen, using `depth`
/// rendered at `cam_t`.
pub fn camera_flow(depth: &DepthMap, cam_t: &Camera, cam_t1: &Camera) -> FlowMap {
    let (w, h) = (depth.width, depth.height);
    let mut out = FlowMap::invalid(w, h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let z = depth.data[i];
            if !z.is_finite() {
                continue;
            }
            let p = cam_t.unproject(x as f64, y as f64, z);
            if let Some(q) = cam_t1.project_point(&p) {
                out.flow[i] = [q.x - x as f64, q.y - y as f64];
                out.valid[i] = true;
            }
        }
    }
    out
}

pub fn motion_flow(optical: &FlowMap, camera_induced: &FlowMap) -> Result<FlowMap> {
    if (optical.width, optical.height) != (camera_induced.width, camera_induced.height) {
        return Err(Error::DimensionMismatch {
            a: (optical.width, optical.height),
            b: (camera_induced.width, camera_induced.height),
        });
    }
    Ok(FlowMap {
        width: optical.width,
        height: optical.height,
        flow: optical
            .flow
            .iter()
            .zip(&camera_induced.flow)
            .map(|(a, b)| [a[0] - b[0], a[1] - b[1]])
            .collect(),
        valid: optical
            .valid
            .iter()
            .zip(&camera_induced.valid)
            .map(|(a, b)| *a && *b)
            .collect(),
    })
}

/// Frames `t` (among the `T - 1` with a forward flow) where any view's motion flow at the
/// Gaussian's projected pixel exceeds `epsilon`, divided by `T`.
///
/// `tracks[v][t]` is the projection in view `v` at frame `t`; `flows[v][t]` the motion flow
/// from `t` to `t + 1`.
pub fn consistency_ratio(tracks: &[&[Option<[f64; 2]>]], flows: &[&[FlowMap]], epsilon: f64) -> f64 {
    let n_frames = tracks.iter().map(|t| t.len()).max().unwrap_or(0);
    if n_frames == 0 {
        return 0.0;
    }
    let hits = (0..n_frames)
        .filter(|&t| {
            tracks.iter().zip(flows).any(|(track, fl)| {
                let (Some(Some(p)), Some(f)) = (track.get(t), fl.get(t)) else {
                    return false;
                };
                f.sample_nearest(p[0], p[1]).is_some_and(|m| m[0].hypot(m[1]) > epsilon)
            })
        })
        .count();
    hits as f64 / n_frames as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeparationParams {
    pub tau: f64,
    pub epsilon: f64,
    pub gamma: f64,
}

/// Evidence for one view: `projections[g][t]` and `T - 1` motion flows.
#[derive(Debug, Clone)]
pub struct ViewEvidence {
    pub projections: Vec<Vec<Option<[f64; 2]>>>,
    pub motion_flows: Vec<FlowMap>,
}

/// Dynamic iff `variance > tau` and `ratio > gamma`.
pub fn classify(
    ids: &[u64],
    trajectories: &[Vec<Vector3<f64>>],
    views: &[ViewEvidence],
    params: &SeparationParams,
) -> Result<Partition> {
    if trajectories.len() != ids.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} trajectories for {} gaussians",
            trajectories.len(),
            ids.len()
        )));
    }
    let n_frames = trajectories.first().map_or(0, |t| t.len());
    for tr in trajectories {
        if tr.len() != n_frames {
            return Err(Error::FrameCountMismatch {
                expected: n_frames,
                got: tr.len(),
                what: "trajectory",
            });
        }
    }
    for v in views {
        if v.projections.len() != ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} projection tracks for {} gaussians",
                v.projections.len(),
                ids.len()
            )));
        }
        if let Some(p) = v.projections.iter().find(|p| p.len() != n_frames) {
            return Err(Error::FrameCountMismatch {
                expected: n_frames,
                got: p.len(),
                what: "projections",
            });
        }
        if v.motion_flows.len() + 1 != n_frames.max(1) {
            return Err(Error::FrameCountMismatch {
                expected: n_frames.saturating_sub(1),
                got: v.motion_flows.len(),
                what: "motion flows",
            });
        }
    }
    let variance: Vec<f64> = trajectories.iter().map(|t| offset_variance(t)).collect();
    let flows: Vec<&[FlowMap]> = views.iter().map(|v| v.motion_flows.as_slice()).collect();
    let ratio: Vec<f64> = (0..ids.len())
        .map(|g| {
            let tracks: Vec<&[Option<[f64; 2]>]> = views.iter().map(|v| v.projections[g].as_slice()).collect();
            consistency_ratio(&tracks, &flows, params.epsilon)
        })
        .collect();
    let labels = (0..ids.len())
        .map(|g| {
            if variance[g] > params.tau && ratio[g] > params.gamma {
                Label::Dynamic
            } else {
                Label::Static
            }
        })
        .collect();
    Ok(Partition {
        ids: ids.to_vec(),
        labels,
        variance,
        ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn variance_examples() {
        let c = vec![Vector3::new(0.3, -1.0, 2.0); 7];
        assert_eq!(offset_variance(&c), 0.0);
        let alt: Vec<_> = (0..8)
            .map(|i| Vector3::new(if i % 2 == 0 { 1.0 } else { -1.0 }, 0.0, 0.0))
            .collect();
        assert_eq!(offset_variance(&alt), 1.0);
        assert_eq!(offset_variance(&[Vector3::new(5.0, 5.0, 5.0)]), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tr: Vec<Vector3<f64>> = (0..13)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        // two passes over the scalar components
        let n = tr.len() as f64;
        let mut m = [0.0; 3];
        for d in &tr {
            for k in 0..3 {
                m[k] += d[k] / n;
            }
        }
        let mut v = 0.0;
        for d in &tr {
            for k in 0..3 {
                v += (d[k] - m[k]).powi(2) / n;
            }
        }
        assert!((offset_variance(&tr) - v).abs() < 1e-12);
    }

    #[test]
    fn candidate_examples() {
        assert!(variance_candidates(&[0.0, 0.0], 0.01).is_empty());
        assert!(variance_candidates(&[0.01], 0.01).is_empty());
        assert_eq!(variance_candidates(&[0.005, 0.02, 0.5], 0.01), vec![1, 2]);
    }

    fn plane_depth(z: f64) -> DepthMap {
        DepthMap {
            width: 16,
            height: 12,
            data: vec![z; 16 * 12],
        }
    }

    fn cam_at(x: f64) -> Camera {
        Camera::look_at(
            Vector3::new(x, 0.0, -4.0),
            Vector3::new(x, 0.0, 0.0),
            Vector3::new(0.0, -1.0, 0.0),
            20.0,
            16,
            12,
        )
    }

    #[test]
    fn camera_flow_examples() {
        let d = plane_depth(4.0);
        let f = camera_flow(&d, &cam_at(0.0), &cam_at(0.0));
        assert!(f.valid.iter().all(|v| *v));
        assert!(f.flow.iter().all(|v| v[0].abs() < 1e-12 && v[1].abs() < 1e-12));

        let dx = 0.3;
        let f = camera_flow(&d, &cam_at(0.0), &cam_at(dx));
        let expected = -20.0 * dx / 4.0;
        for v in &f.flow {
            assert!((v[0] - expected).abs() < 1e-9 && v[1].abs() < 1e-9);
        }

        let mut d = plane_depth(4.0);
        d.data[5] = f64::INFINITY;
        let f = camera_flow(&d, &cam_at(0.0), &cam_at(dx));
        assert!(!f.valid[5] && f.valid[6]);
    }

    #[test]
    fn motion_flow_examples() {
        let mut a = FlowMap::zeros(3, 2);
        a.flow = vec![[1.0, 2.0], [0.5, -0.5], [3.0, 0.0], [0.0, 0.0], [-1.0, 1.0], [2.0, 2.0]];
        let same = motion_flow(&a, &a).unwrap();
        assert!(same.flow.iter().all(|v| *v == [0.0, 0.0]));
        assert_eq!(motion_flow(&a, &FlowMap::zeros(3, 2)).unwrap().flow, a.flow);
        let mut b = FlowMap::zeros(3, 2);
        b.flow = vec![[0.5, 0.5]; 6];
        b.valid[4] = false;
        let m = motion_flow(&a, &b).unwrap();
        for i in 0..6 {
            assert_eq!(m.flow[i], [a.flow[i][0] - 0.5, a.flow[i][1] - 0.5]);
        }
        assert!(!m.valid[4]);
        assert!(motion_flow(&a, &FlowMap::zeros(2, 3)).is_err());
    }

    fn uniform_flow(mag: f64) -> FlowMap {
        let mut f = FlowMap::zeros(8, 8);
        f.flow = vec![[mag, 0.0]; 64];
        f
    }

    #[test]
    fn ratio_examples() {
        let track = vec![Some([3.0, 3.0]); 4];
        let zeros = vec![uniform_flow(0.0); 3];
        assert_eq!(consistency_ratio(&[&track], &[&zeros], 1.0), 0.0);
        let flows = vec![uniform_flow(2.0), uniform_flow(2.0), uniform_flow(2.0)];
        // three of the four frames have forward flow above epsilon
        assert_eq!(consistency_ratio(&[&track], &[&flows], 1.0), 0.75);
        let exact = vec![uniform_flow(1.0); 3];
        assert_eq!(consistency_ratio(&[&track], &[&exact], 1.0), 0.0);
        let off = vec![Some([3.0, 3.0]), None, Some([100.0, 3.0]), Some([3.0, 3.0])];
        assert_eq!(consistency_ratio(&[&off], &[&flows], 1.0), 0.25);
    }

    #[test]
    fn classify_examples() {
        let ids = [1, 2, 3];
        let zero = vec![vec![Vector3::zeros(); 4]; 3];
        let view = ViewEvidence {
            projections: vec![vec![Some([3.0, 3.0]); 4]; 3],
            motion_flows: vec![uniform_flow(5.0); 3],
        };
        let p = SeparationParams {
            tau: 0.01,
            epsilon: 1.0,
            gamma: 0.5,
        };
        let part = classify(&ids, &zero, std::slice::from_ref(&view), &p).unwrap();
        assert_eq!(part.n_dynamic(), 0);

        // high variance, but the motion flow under the track is zero
        let wobble: Vec<Vector3<f64>> = (0..4)
            .map(|i| Vector3::new(if i % 2 == 0 { 0.5 } else { -0.5 }, 0.0, 0.0))
            .collect();
        let still = ViewEvidence {
            projections: view.projections.clone(),
            motion_flows: vec![uniform_flow(0.0); 3],
        };
        let part = classify(&ids, &vec![wobble.clone(); 3], &[still], &p).unwrap();
        assert_eq!(part.n_dynamic(), 0);
        assert!(part.variance.iter().all(|v| *v > 0.01));
        let part = classify(&ids, &vec![wobble; 3], std::slice::from_ref(&view), &p).unwrap();
        assert_eq!(part.n_dynamic(), 3);
        assert!(part.report().lines().nth(1).unwrap().starts_with("1 dynamic"));

        let short = vec![vec![Vector3::zeros(); 3]; 3];
        assert!(matches!(
            classify(&ids, &short, &[view], &p),
            Err(Error::FrameCountMismatch { .. })
        ));
    }

    #[test]
    fn flow_bytes_round_trip() {
        let mut f = FlowMap::zeros(5, 3);
        f.flow[7] = [1.25, -3.5];
        f.valid[2] = false;
        assert_eq!(FlowMap::from_bytes(&f.to_bytes()).unwrap(), f);
        assert!(FlowMap::from_bytes(&f.to_bytes()[..20]).is_err());
    }

    fn random_case(seed: u64) -> (Vec<u64>, Vec<Vec<Vector3<f64>>>, Vec<ViewEvidence>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 30;
        let t = 5;
        let ids: Vec<u64> = (0..n as u64).map(|i| i * 3 + 1).collect();
        let trajectories = (0..n)
            .map(|_| {
                let a = rng.gen_range(0.0..0.4);
                (0..t).map(|_| Vector3::new(rng.gen_range(-a..=a), 0.0, 0.0)).collect()
            })
            .collect();
        let views = (0..2)
            .map(|_| ViewEvidence {
                projections: (0..n)
                    .map(|_| {
                        (0..t)
                            .map(|_| Some([rng.gen_range(0.0..8.0), rng.gen_range(0.0..8.0)]))
                            .collect()
                    })
                    .collect(),
                motion_flows: (0..t - 1)
                    .map(|_| {
                        let mut f = FlowMap::zeros(8, 8);
                        for v in f.flow.iter_mut() {
                            *v = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
                        }
                        f
                    })
                    .collect(),
            })
            .collect();
        (ids, trajectories, views)
    }

    proptest! {
        #[test]
        fn raising_thresholds_never_grows_the_dynamic_set(seed in any::<u64>(), t1 in 0.0f64..0.05, t2 in 0.0f64..0.05, g1 in 0.0f64..1.0, g2 in 0.0f64..1.0) {
            let (ids, tr, views) = random_case(seed);
            let lo = SeparationParams { tau: t1.min(t2), epsilon: 1.0, gamma: g1.min(g2) };
            let hi = SeparationParams { tau: t1.max(t2), epsilon: 1.0, gamma: g1.max(g2) };
            let a = classify(&ids, &tr, &views, &lo).unwrap().dynamic_ids();
            let b = classify(&ids, &tr, &views, &hi).unwrap().dynamic_ids();
            prop_assert!(b.iter().all(|i| a.contains(i)));
        }

        #[test]
        fn labels_do_not_depend_on_order(seed in any::<u64>()) {
            let (ids, tr, views) = random_case(seed);
            let p = SeparationParams { tau: 0.01, epsilon: 1.0, gamma: 0.5 };
            let a = classify(&ids, &tr, &views, &p).unwrap();
            let perm: Vec<usize> = (0..ids.len()).rev().collect();
            let ids2: Vec<u64> = perm.iter().map(|&i| ids[i]).collect();
            let tr2: Vec<_> = perm.iter().map(|&i| tr[i].clone()).collect();
            let views2: Vec<_> = views.iter().map(|v| ViewEvidence {
                projections: perm.iter().map(|&i| v.projections[i].clone()).collect(),
                motion_flows: v.motion_flows.clone(),
            }).collect();
            let b = classify(&ids2, &tr2, &views2, &p).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(a.labels[i], b.labels[k]);
            }
        }

        #[test]
        fn variance_is_translation_invariant(seed in any::<u64>(), c in proptest::array::uniform3(-10.0f64..10.0)) {
            let (_, tr, _) = random_case(seed);
            let shift = Vector3::from(c);
            for t in &tr {
                let moved: Vec<_> = t.iter().map(|d| d + shift).collect();
                prop_assert!((offset_variance(t) - offset_variance(&moved)).abs() < 1e-12);
            }
        }
    }
}
