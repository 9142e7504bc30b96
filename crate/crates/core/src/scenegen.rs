//! Synthetic dynamic scenes with exact ground truth: canonical Gaussians, per-frame offsets,
//! labels, cameras, rendered frames, depth and optical flow.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::deform::{apply_offsets, OffsetTriple, TimeGaussian};
use crate::error::{Error, Result};
use crate::gaussian::{Camera, Gaussian, Quat};
use crate::image::Image;
use crate::opacity::reference_distance;
use crate::scene_io::write_scene_string;
use crate::separation::{offset_variance, FlowMap, Label};
use crate::splat::{render_gaussians, SplatSettings};

/// Depth assigned to pixels no Gaussian covers when computing ground-truth flow.
pub const FAR_PLANE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PathRecipe {
    /// Offset `v · t`.
    Translation { velocity: [f64; 3] },
    /// Offset `a · sin(2π f t + φ)`.
    Sinusoid {
        amplitude: [f64; 3],
        frequency: f64,
        phase: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionRecipe {
    pub path: PathRecipe,
    /// Relative scale change `p · sin(2π f t)`; zero amplitude disables it.
    pub pulse_amplitude: f64,
    pub pulse_frequency: f64,
}

impl MotionRecipe {
    pub fn position_offset(&self, t: f64) -> Vector3<f64> {
        match self.path {
            PathRecipe::Translation { velocity } => Vector3::from(velocity) * t,
            PathRecipe::Sinusoid {
                amplitude,
                frequency,
                phase,
            } => Vector3::from(amplitude) * (std::f64::consts::TAU * frequency * t + phase).sin(),
        }
    }

    pub fn offset(&self, g: &Gaussian, t: f64) -> OffsetTriple {
        let d = self.position_offset(t);
        let pulse = self.pulse_amplitude * (std::f64::consts::TAU * self.pulse_frequency * t).sin();
        OffsetTriple {
            d_mu: [d.x, d.y, d.z],
            d_rot: [0.0; 4],
            d_scale: [g.scale_c.x * pulse, g.scale_c.y * pulse, g.scale_c.z * pulse],
        }
    }

    fn to_text(self) -> String {
        let (kind, v, f, ph) = match self.path {
            PathRecipe::Translation { velocity } => ("translation", velocity, 0.0, 0.0),
            PathRecipe::Sinusoid {
                amplitude,
                frequency,
                phase,
            } => ("sinusoid", amplitude, frequency, phase),
        };
        format!(
            "{kind} {} {} {} {f} {ph} {} {}",
            v[0], v[1], v[2], self.pulse_amplitude, self.pulse_frequency
        )
    }

    fn parse(s: &str) -> Result<MotionRecipe> {
        let bad = || Error::parse("scene spec", format!("bad motion recipe '{s}'"));
        let mut it = s.split_whitespace();
        let kind = it.next().ok_or_else(bad)?;
        let nums: Vec<f64> = it.map(|t| t.parse().map_err(|_| bad())).collect::<Result<_>>()?;
        if nums.len() != 7 {
            return Err(bad());
        }
        let v = [nums[0], nums[1], nums[2]];
        let path = match kind {
            "translation" => PathRecipe::Translation { velocity: v },
            "sinusoid" => PathRecipe::Sinusoid {
                amplitude: v,
                frequency: nums[3],
                phase: nums[4],
            },
            _ => return Err(bad()),
        };
        Ok(MotionRecipe {
            path,
            pulse_amplitude: nums[5],
            pulse_frequency: nums[6],
        })
    }
}

/// Frontal arc of cameras around the origin, each drifting along x over the sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraRig {
    pub n_views: usize,
    pub n_frames: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub distance: f64,
    pub arc_degrees: f64,
    /// Total sideways camera travel over the sequence.
    pub drift: f64,
}

impl CameraRig {
    pub fn camera(&self, view: usize, t: f64) -> Camera {
        let frac = if self.n_views > 1 {
            view as f64 / (self.n_views - 1) as f64 - 0.5
        } else {
            0.0
        };
        let theta = self.arc_degrees.to_radians() * frac;
        let eye = Vector3::new(
            self.distance * theta.sin() + self.drift * (t - 0.5),
            -0.15 * self.distance * frac,
            -self.distance * theta.cos(),
        );
        Camera::look_at(
            eye,
            Vector3::zeros(),
            Vector3::new(0.0, -1.0, 0.0),
            self.focal,
            self.width,
            self.height,
        )
    }

    pub fn times(&self) -> Vec<f64> {
        frame_times(self.n_frames)
    }
}

/// `i / (T - 1)` for `i = 0..T`.
pub fn frame_times(n_frames: usize) -> Vec<f64> {
    if n_frames == 1 {
        return vec![0.0];
    }
    (0..n_frames).map(|i| i as f64 / (n_frames - 1) as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub n_static: usize,
    pub n_dynamic: usize,
    /// One recipe per dynamic cluster; dynamic Gaussians are split evenly across clusters.
    pub recipes: Vec<MotionRecipe>,
    pub rig: CameraRig,
    /// Perturbation applied to the ground truth to build the fitting initialization.
    pub noise: f64,
    pub seed: u64,
    pub background: [f64; 3],
}

impl SceneSpec {
    /// 64×64, 200 static + 50 dynamic Gaussians, 4 views × 12 frames.
    pub fn mini(seed: u64) -> SceneSpec {
        let sin = |a: [f64; 3], f: f64, ph: f64, p: f64| MotionRecipe {
            path: PathRecipe::Sinusoid {
                amplitude: a,
                frequency: f,
                phase: ph,
            },
            pulse_amplitude: p,
            pulse_frequency: 1.0,
        };
        SceneSpec {
            n_static: 200,
            n_dynamic: 50,
            recipes: vec![
                sin([0.4, 0.0, 0.0], 1.0, 0.0, 0.0),
                MotionRecipe {
                    path: PathRecipe::Translation {
                        velocity: [0.0, -1.2, 0.0],
                    },
                    pulse_amplitude: 0.0,
                    pulse_frequency: 0.0,
                },
                sin([0.0, 0.4, 0.0], 1.0, 1.0, 0.2),
                sin([0.3, 0.3, 0.0], 0.5, 0.0, 0.0),
                MotionRecipe {
                    path: PathRecipe::Translation {
                        velocity: [-1.2, 0.0, 0.3],
                    },
                    pulse_amplitude: 0.15,
                    pulse_frequency: 1.0,
                },
            ],
            rig: CameraRig {
                n_views: 4,
                n_frames: 12,
                width: 64,
                height: 64,
                focal: 80.0,
                distance: 5.0,
                arc_degrees: 20.0,
                drift: 1.0,
            },
            noise: 0.02,
            seed,
            background: [0.0; 3],
        }
    }

    pub fn to_text(&self) -> String {
        let r = &self.rig;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("n_static", self.n_static.to_string());
        kv("n_dynamic", self.n_dynamic.to_string());
        kv("n_views", r.n_views.to_string());
        kv("n_frames", r.n_frames.to_string());
        kv("width", r.width.to_string());
        kv("height", r.height.to_string());
        kv("focal", r.focal.to_string());
        kv("distance", r.distance.to_string());
        kv("arc_degrees", r.arc_degrees.to_string());
        kv("drift", r.drift.to_string());
        kv("noise", self.noise.to_string());
        kv("seed", self.seed.to_string());
        kv(
            "background",
            format!("{} {} {}", self.background[0], self.background[1], self.background[2]),
        );
        kv("groups", self.recipes.len().to_string());
        for (i, m) in self.recipes.iter().enumerate() {
            kv(&format!("group.{i}"), m.to_text());
        }
        s
    }

    pub fn parse(text: &str) -> Result<SceneSpec> {
        let map = parse_kv(text, "scene spec")?;
        let get = |k: &str| {
            map.get(k)
                .ok_or_else(|| Error::parse("scene spec", format!("missing key {k}")))
        };
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::parse("scene spec", format!("bad value for {k}: {v}")))
        }
        let groups: usize = num("groups", get("groups")?)?;
        let recipes = (0..groups)
            .map(|i| MotionRecipe::parse(get(&format!("group.{i}"))?))
            .collect::<Result<Vec<_>>>()?;
        let bg: Vec<f64> = get("background")?
            .split_whitespace()
            .map(|v| num("background", v))
            .collect::<Result<_>>()?;
        if bg.len() != 3 {
            return Err(Error::parse("scene spec", "background needs 3 values"));
        }
        let spec = SceneSpec {
            n_static: num("n_static", get("n_static")?)?,
            n_dynamic: num("n_dynamic", get("n_dynamic")?)?,
            recipes,
            rig: CameraRig {
                n_views: num("n_views", get("n_views")?)?,
                n_frames: num("n_frames", get("n_frames")?)?,
                width: num("width", get("width")?)?,
                height: num("height", get("height")?)?,
                focal: num("focal", get("focal")?)?,
                distance: num("distance", get("distance")?)?,
                arc_degrees: num("arc_degrees", get("arc_degrees")?)?,
                drift: num("drift", get("drift")?)?,
            },
            noise: num("noise", get("noise")?)?,
            seed: num("seed", get("seed")?)?,
            background: [bg[0], bg[1], bg[2]],
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rig;
        if r.n_views == 0 || r.n_frames == 0 || r.width == 0 || r.height == 0 {
            return Err(Error::InvalidInput(
                "rig needs at least one view, frame and pixel".into(),
            ));
        }
        if self.n_dynamic > 0 && self.recipes.is_empty() {
            return Err(Error::InvalidInput(
                "dynamic gaussians need at least one motion recipe".into(),
            ));
        }
        if self.n_static + self.n_dynamic == 0 {
            return Err(Error::InvalidInput("empty scene".into()));
        }
        Ok(())
    }
}

/// `key = value` lines; `#` starts a comment.
pub(crate) fn parse_kv(text: &str, what: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(what, format!("line {}: expected key = value", n + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// Ground truth of a generated scene.
#[derive(Debug, Clone)]
pub struct OracleScene {
    pub spec: SceneSpec,
    pub canonical: Vec<Gaussian>,
    pub labels: Vec<Label>,
    /// Motion recipe index per Gaussian (`None` for static ones).
    pub group: Vec<Option<usize>>,
    pub times: Vec<f64>,
    /// `offsets[f][g]` at frame time `times[f]`.
    pub offsets: Vec<Vec<OffsetTriple>>,
    /// `cameras[v][f]`
    pub cameras: Vec<Vec<Camera>>,
}

fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    let [w1, x1, y1, z1] = a.0;
    let [w2, x2, y2, z2] = b.0;
    Quat([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])
}

/// Disc facing the `-z` side (where the cameras are), spun in-plane by `spin` and tilted slightly.
fn facing_rotation(rng: &mut ChaCha8Rng, spin: f64) -> Quat {
    let flip = Quat::from_axis_angle(Vector3::new(1.0, 0.0, 0.0), std::f64::consts::PI);
    let tilt = Quat::from_axis_angle(
        Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0) + Vector3::new(1e-9, 0.0, 0.0),
        rng.gen_range(0.0..0.15),
    );
    let spin = Quat::from_axis_angle(Vector3::new(0.0, 0.0, 1.0), spin);
    quat_mul(&quat_mul(&tilt, &flip), &spin)
}

fn jitter_color(rng: &mut ChaCha8Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    base.map(|c| (c + rng.gen_range(-amount..amount)).clamp(0.02, 0.98))
}

/// Cluster centers for dynamic groups, chosen so the mini preset's motion stays in frame.
const DYNAMIC_CENTERS: [[f64; 3]; 5] = [
    [-0.9, -0.5, -1.0],
    [-0.2, 0.6, -1.0],
    [0.1, -0.4, -1.0],
    [0.6, 0.5, -1.0],
    [1.0, -0.1, -1.0],
];

/// Deterministic scene from `spec.seed`: a textured back wall, static foreground clusters and
/// moving dynamic clusters in front.
pub fn generate(spec: &SceneSpec) -> Result<OracleScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut canonical = Vec::with_capacity(spec.n_static + spec.n_dynamic);
    let mut labels = Vec::new();
    let mut group = Vec::new();

    // back wall: about 2/3 of the static budget on a jittered grid at z = 0.8
    let n_wall = spec.n_static * 2 / 3;
    let cols = ((n_wall as f64) * 4.0 / 3.0).sqrt().ceil().max(1.0) as usize;
    let rows = n_wall.div_ceil(cols).max(1);
    let (half_w, half_h) = (3.4, 2.7);
    for i in 0..n_wall {
        let (r, c) = (i / cols, i % cols);
        let x = -half_w + 2.0 * half_w * (c as f64 + 0.5) / cols as f64 + rng.gen_range(-0.05..0.05);
        let y = -half_h + 2.0 * half_h * (r as f64 + 0.5) / rows as f64 + rng.gen_range(-0.05..0.05);
        let s = 1.1 * half_w / cols as f64;
        let mut g = Gaussian::new(
            canonical.len() as u64,
            Vector3::new(x, y, 0.8 + rng.gen_range(-0.05..0.05)),
            Vector3::new(s * rng.gen_range(0.9..1.15), s * rng.gen_range(0.9..1.15), 0.04),
            jitter_color(
                &mut rng,
                [
                    0.45 + 0.35 * (x * 0.9).sin(),
                    0.4 + 0.3 * (y * 1.3).cos(),
                    0.55 + 0.3 * ((x + y) * 0.7).sin(),
                ],
                0.1,
            ),
        );
        let spin = rng.gen_range(0.0..std::f64::consts::PI);
        g.rot_c = facing_rotation(&mut rng, spin);
        canonical.push(g);
        labels.push(Label::Static);
        group.push(None);
    }

    // static foreground clusters
    let fg_centers = [[-1.3, 0.2, 0.1], [1.3, -0.1, 0.2], [0.1, 1.4, 0.0], [-0.2, -1.5, 0.3]];
    let fg_colors = [[0.85, 0.75, 0.2], [0.2, 0.6, 0.3], [0.6, 0.3, 0.7], [0.9, 0.5, 0.4]];
    let n_fg = spec.n_static - n_wall;
    for i in 0..n_fg {
        let k = i % fg_centers.len();
        let c = Vector3::from(fg_centers[k]);
        let off = Vector3::new(
            rng.gen_range(-0.4..0.4),
            rng.gen_range(-0.4..0.4),
            rng.gen_range(-0.1..0.1),
        );
        let mut g = Gaussian::new(
            canonical.len() as u64,
            c + off,
            Vector3::new(rng.gen_range(0.12..0.18), rng.gen_range(0.1..0.15), 0.03),
            jitter_color(&mut rng, fg_colors[k], 0.12),
        );
        let spin = rng.gen_range(0.0..std::f64::consts::PI);
        g.rot_c = facing_rotation(&mut rng, spin);
        canonical.push(g);
        labels.push(Label::Static);
        group.push(None);
    }

    // dynamic clusters in front
    let n_groups = spec.recipes.len().max(1);
    let dyn_colors = [
        [0.95, 0.15, 0.1],
        [0.1, 0.2, 0.95],
        [0.95, 0.95, 0.95],
        [0.1, 0.9, 0.9],
        [0.95, 0.2, 0.8],
    ];
    for i in 0..spec.n_dynamic {
        let k = i % n_groups;
        let center = Vector3::from(DYNAMIC_CENTERS[k % DYNAMIC_CENTERS.len()]);
        let off = Vector3::new(
            rng.gen_range(-0.25..0.25),
            rng.gen_range(-0.25..0.25),
            rng.gen_range(-0.05..0.05),
        );
        let mut g = Gaussian::new(
            canonical.len() as u64,
            center + off,
            Vector3::new(rng.gen_range(0.1..0.14), rng.gen_range(0.08..0.12), 0.03),
            jitter_color(&mut rng, dyn_colors[k % dyn_colors.len()], 0.05),
        );
        let spin = rng.gen_range(0.0..std::f64::consts::PI);
        g.rot_c = facing_rotation(&mut rng, spin);
        canonical.push(g);
        labels.push(Label::Dynamic);
        group.push(Some(k));
    }

    let times = spec.rig.times();
    let mut scene = OracleScene {
        spec: spec.clone(),
        canonical,
        labels,
        group,
        offsets: Vec::new(),
        cameras: (0..spec.rig.n_views)
            .map(|v| times.iter().map(|&t| spec.rig.camera(v, t)).collect())
            .collect(),
        times: times.clone(),
    };
    scene.offsets = times.iter().map(|&t| scene.offsets_at(t)).collect();
    Ok(scene)
}

impl OracleScene {
    pub fn offsets_at(&self, t: f64) -> Vec<OffsetTriple> {
        self.canonical
            .iter()
            .zip(&self.group)
            .map(|(g, k)| match k {
                Some(k) => self.spec.recipes[*k].offset(g, t),
                None => OffsetTriple::ZERO,
            })
            .collect()
    }

    pub fn gaussians_at(&self, t: f64) -> Result<Vec<TimeGaussian>> {
        self.canonical
            .iter()
            .zip(self.offsets_at(t))
            .map(|(g, d)| apply_offsets(g, &d))
            .collect()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.canonical.iter().map(|g| g.id).collect()
    }

    /// Exact position offsets `trajectories[g][f]`.
    pub fn trajectories(&self) -> Vec<Vec<Vector3<f64>>> {
        (0..self.canonical.len())
            .map(|g| self.offsets.iter().map(|o| Vector3::from(o[g].d_mu)).collect())
            .collect()
    }

    /// Median camera distance to the scene centroid over every view and frame.
    pub fn reference_distance(&self) -> Result<f64> {
        let n = self.canonical.len() as f64;
        let centroid = self.canonical.iter().map(|g| g.mu_c).sum::<Vector3<f64>>() / n;
        let centers: Vec<Vector3<f64>> = self.cameras.iter().flatten().map(|c| c.center()).collect();
        reference_distance(&centers, &centroid)
    }

    pub fn settings(&self) -> Result<SplatSettings> {
        Ok(SplatSettings {
            d_ref: self.reference_distance()?,
            physical_opacity: true,
            background: self.spec.background,
        })
    }

    /// Ground truth perturbed by the spec's noise level.
    pub fn noisy_init(&self) -> Vec<Gaussian> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed ^ 0x5eed_1417);
        let a = self.spec.noise * 3f64.sqrt();
        self.canonical
            .iter()
            .map(|g| {
                let mut g = g.clone();
                if a > 0.0 {
                    for k in 0..3 {
                        g.mu_c[k] += rng.gen_range(-a..a);
                        g.scale_c[k] *= (2.5 * rng.gen_range(-a..a)).exp();
                        g.color[k] = (g.color[k] + 2.5 * rng.gen_range(-a..a)).clamp(0.0, 1.0);
                    }
                    let axis = Vector3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    );
                    let turn = Quat::from_axis_angle(axis + Vector3::new(1e-9, 0.0, 0.0), 2.5 * rng.gen_range(0.0..a));
                    g.rot_c = quat_mul(&g.rot_c, &turn);
                }
                g
            })
            .collect()
    }

    pub fn render_frame(&self, view: usize, frame: usize) -> Result<(Image, crate::image::DepthMap)> {
        let gs = self.gaussians_at(self.times[frame])?;
        let (_, out) = render_gaussians(&gs, &self.cameras[view][frame], &self.settings()?, false);
        Ok((out.image, out.depth))
    }
}

/// Flow from `cam_t` at time-t parameters to `cam_t1` at time-t1 parameters: each pixel takes
/// the screen displacement of its frontmost contributing Gaussian's center. Uncovered pixels
/// carry the camera-induced flow of the far plane.
pub fn ground_truth_flow(
    at_t: &[TimeGaussian],
    at_t1: &[TimeGaussian],
    cam_t: &Camera,
    cam_t1: &Camera,
    settings: &SplatSettings,
) -> FlowMap {
    let (prep, out) = render_gaussians(at_t, cam_t, settings, true);
    let trace = out.trace.as_ref().unwrap();
    let (w, h) = (cam_t.width, cam_t.height);
    let mut flow = FlowMap::invalid(w, h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (from, to) = match trace.pixel(i).first() {
                Some(c) => {
                    let g = prep.owner[c.splat as usize];
                    (cam_t.project_point(&at_t[g].mu), cam_t1.project_point(&at_t1[g].mu))
                }
                None => {
                    let p = cam_t.unproject(x as f64, y as f64, FAR_PLANE);
                    (
                        Some(nalgebra::Vector2::new(x as f64, y as f64)),
                        cam_t1.project_point(&p),
                    )
                }
            };
            if let (Some(a), Some(b)) = (from, to) {
                flow.flow[i] = [b.x - a.x, b.y - a.y];
                flow.valid[i] = true;
            }
        }
    }
    flow
}

/// Relative paths of the per-frame files.
pub fn frame_path(view: usize, frame: usize) -> PathBuf {
    PathBuf::from(format!("frames/{view}/{frame}.ppm"))
}

pub fn depth_path(view: usize, frame: usize) -> PathBuf {
    PathBuf::from(format!("depth/{view}/{frame}.depth"))
}

pub fn flow_path(view: usize, frame: usize) -> PathBuf {
    PathBuf::from(format!("flow/{view}/{frame}.flow"))
}

/// Text listing of cameras: `view frame fx fy cx cy width height r00 … r22 t0 t1 t2`.
pub fn cameras_to_text(cameras: &[Vec<Camera>]) -> String {
    let mut s = String::from("# view frame fx fy cx cy width height rotation(9) translation(3)\n");
    for (v, row) in cameras.iter().enumerate() {
        for (f, c) in row.iter().enumerate() {
            write!(
                s,
                "{v} {f} {} {} {} {} {} {}",
                c.fx, c.fy, c.cx, c.cy, c.width, c.height
            )
            .unwrap();
            for r in 0..3 {
                for k in 0..3 {
                    write!(s, " {}", c.rotation[(r, k)]).unwrap();
                }
            }
            for k in 0..3 {
                write!(s, " {}", c.translation[k]).unwrap();
            }
            s.push('\n');
        }
    }
    s
}

pub fn cameras_from_text(text: &str) -> Result<Vec<Vec<Camera>>> {
    let bad = |n: usize| Error::parse("cameras", format!("line {n}"));
    let mut out: Vec<Vec<Camera>> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 20 {
            return Err(bad(n + 1));
        }
        let v: usize = tok[0].parse().map_err(|_| bad(n + 1))?;
        let f: usize = tok[1].parse().map_err(|_| bad(n + 1))?;
        let nums: Vec<f64> = tok[2..]
            .iter()
            .map(|t| t.parse().map_err(|_| bad(n + 1)))
            .collect::<Result<_>>()?;
        let cam = Camera {
            fx: nums[0],
            fy: nums[1],
            cx: nums[2],
            cy: nums[3],
            width: nums[4] as usize,
            height: nums[5] as usize,
            rotation: nalgebra::Matrix3::from_row_slice(&nums[6..15]),
            translation: Vector3::new(nums[15], nums[16], nums[17]),
        };
        cam.validate()?;
        if v > out.len() || (v == out.len() && f != 0) || (v < out.len() && f != out[v].len()) {
            return Err(Error::parse("cameras", format!("line {}: out-of-order entry", n + 1)));
        }
        if v == out.len() {
            out.push(Vec::new());
        }
        out[v].push(cam);
    }
    Ok(out)
}

pub fn labels_to_text(ids: &[u64], labels: &[Label]) -> String {
    let mut s = String::from("# id label\n");
    for (i, l) in ids.iter().zip(labels) {
        writeln!(s, "{i} {}", l.as_str()).unwrap();
    }
    s
}

pub fn labels_from_text(text: &str) -> Result<Vec<(u64, Label)>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let (id, lab) = l.split_once(' ').ok_or_else(|| Error::parse("labels", l.to_string()))?;
            let id = id.parse().map_err(|_| Error::parse("labels", l.to_string()))?;
            let lab = match lab.trim() {
                "static" => Label::Static,
                "dynamic" => Label::Dynamic,
                _ => return Err(Error::parse("labels", l.to_string())),
            };
            Ok((id, lab))
        })
        .collect()
}

fn write_file(root: &Path, rel: &Path, bytes: &[u8], manifest: &mut Vec<(String, String)>) -> Result<()> {
    let path = root.join(rel);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    manifest.push((
        rel.to_string_lossy().replace('\\', "/"),
        hex::encode(Sha256::digest(bytes)),
    ));
    Ok(())
}

pub const MANIFEST: &str = "manifest.txt";
pub const RENDER_SETTINGS: &str = "render.txt";

pub fn settings_to_text(s: &SplatSettings) -> String {
    let b = s.background;
    format!(
        "d_ref = {}\nphysical_opacity = {}\nbackground = {} {} {}\n",
        s.d_ref, s.physical_opacity, b[0], b[1], b[2]
    )
}

pub fn settings_from_text(text: &str) -> Result<SplatSettings> {
    let map = parse_kv(text, "render settings")?;
    let bad = |k: &str| Error::parse("render settings", format!("bad or missing {k}"));
    let d_ref: f64 = map
        .get("d_ref")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("d_ref"))?;
    let physical_opacity: bool = map
        .get("physical_opacity")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("physical_opacity"))?;
    let bg: Vec<f64> = map
        .get("background")
        .ok_or_else(|| bad("background"))?
        .split_whitespace()
        .map(|v| v.parse().map_err(|_| bad("background")))
        .collect::<Result<_>>()?;
    if bg.len() != 3 || !(d_ref > 0.0) {
        return Err(bad("background"));
    }
    Ok(SplatSettings {
        d_ref,
        physical_opacity,
        background: [bg[0], bg[1], bg[2]],
    })
}

/// Writes frames, depth maps, forward flows, the scene, the fitting initialization, labels,
/// cameras and a checksum manifest under `root`.
pub fn render_dataset(scene: &OracleScene, root: &Path) -> Result<()> {
    let settings = scene.settings()?;
    let mut manifest = Vec::new();
    let per_frame: Vec<Vec<TimeGaussian>> = scene
        .times
        .iter()
        .map(|&t| scene.gaussians_at(t))
        .collect::<Result<_>>()?;
    for (v, cams) in scene.cameras.iter().enumerate() {
        for (f, cam) in cams.iter().enumerate() {
            let (_, out) = render_gaussians(&per_frame[f], cam, &settings, false);
            let mut ppm = Vec::new();
            out.image
                .write_ppm(&mut ppm)
                .map_err(|e| Error::io(root.join(frame_path(v, f)), e))?;
            write_file(root, &frame_path(v, f), &ppm, &mut manifest)?;
            write_file(root, &depth_path(v, f), &out.depth.to_bytes(), &mut manifest)?;
            if f + 1 < cams.len() {
                let flow = ground_truth_flow(&per_frame[f], &per_frame[f + 1], cam, &cams[f + 1], &settings);
                write_file(root, &flow_path(v, f), &flow.to_bytes(), &mut manifest)?;
            }
        }
    }
    write_file(
        root,
        Path::new("scene.dsplat"),
        write_scene_string(&scene.canonical).as_bytes(),
        &mut manifest,
    )?;
    write_file(
        root,
        Path::new("init.dsplat"),
        write_scene_string(&scene.noisy_init()).as_bytes(),
        &mut manifest,
    )?;
    write_file(
        root,
        Path::new("labels.txt"),
        labels_to_text(&scene.ids(), &scene.labels).as_bytes(),
        &mut manifest,
    )?;
    write_file(
        root,
        Path::new("cameras.txt"),
        cameras_to_text(&scene.cameras).as_bytes(),
        &mut manifest,
    )?;
    write_file(
        root,
        Path::new("spec.txt"),
        scene.spec.to_text().as_bytes(),
        &mut manifest,
    )?;
    write_file(
        root,
        Path::new(RENDER_SETTINGS),
        settings_to_text(&settings).as_bytes(),
        &mut manifest,
    )?;

    let mut text = String::from("# dataset manifest\n");
    for line in scene.spec.to_text().lines() {
        writeln!(text, "spec {line}").unwrap();
    }
    writeln!(text, "seed {}", scene.spec.seed).unwrap();
    for (path, sum) in &manifest {
        writeln!(text, "sha256 {sum} {path}").unwrap();
    }
    let mpath = root.join(MANIFEST);
    std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))
}

/// Recomputes every checksum listed in the manifest; returns the paths that differ.
pub fn verify_manifest(root: &Path) -> Result<Vec<String>> {
    let mpath = root.join(MANIFEST);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut bad = Vec::new();
    for line in text.lines() {
        let Some(rest) = line.strip_prefix("sha256 ") else {
            continue;
        };
        let (sum, path) = rest
            .split_once(' ')
            .ok_or_else(|| Error::parse("manifest", line.to_string()))?;
        let p = root.join(path);
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        if hex::encode(Sha256::digest(&bytes)) != sum {
            bad.push(path.to_string());
        }
    }
    Ok(bad)
}

/// Smallest per-Gaussian offset variance over the frames among dynamic Gaussians, and the
/// largest among static ones.
pub fn variance_margins(scene: &OracleScene) -> (f64, f64) {
    let mut min_dyn = f64::INFINITY;
    let mut max_static: f64 = 0.0;
    for g in 0..scene.canonical.len() {
        let tr: Vec<Vector3<f64>> = scene.offsets.iter().map(|o| Vector3::from(o[g].d_mu)).collect();
        let v = offset_variance(&tr);
        match scene.labels[g] {
            Label::Dynamic => min_dyn = min_dyn.min(v),
            Label::Static => max_static = max_static.max(v),
        }
    }
    (min_dyn, max_static)
}
