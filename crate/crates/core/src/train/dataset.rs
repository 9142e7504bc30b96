use std::path::Path;

use crate::error::{Error, Result};
use crate::gaussian::{Camera, Gaussian};
use crate::image::Image;
use crate::scene_io::{load_scene, read_scene_str};
use crate::scenegen::{
    cameras_from_text, flow_path, frame_path, frame_times, ground_truth_flow, labels_from_text, settings_from_text,
    OracleScene, SceneSpec, RENDER_SETTINGS,
};
use crate::separation::{FlowMap, Label};
use crate::splat::{render_gaussians, SplatSettings};

/// Multi-view video with forward optical flow and a starting scene.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// `cameras[v][f]`
    pub cameras: Vec<Vec<Camera>>,
    pub times: Vec<f64>,
    /// `images[v][f]`
    pub images: Vec<Vec<Image>>,
    /// `flows[v][f]` maps frame `f` to `f + 1`.
    pub flows: Vec<Vec<FlowMap>>,
    pub init: Vec<Gaussian>,
    pub labels: Option<Vec<(u64, Label)>>,
    pub settings: SplatSettings,
    pub spec: Option<SceneSpec>,
}

/// Held-out rule: every fourth (view, frame) pair along the anti-diagonals.
pub fn is_held_out(view: usize, frame: usize) -> bool {
    (view + frame) % 4 == 2
}

fn quantize(img: &Image) -> Image {
    let mut buf = Vec::new();
    img.write_ppm(&mut buf).expect("in-memory write");
    Image::read_ppm(&buf[..]).expect("in-memory read")
}

impl Dataset {
    /// Renders the oracle in memory. Frames go through the same 8-bit quantization as the
    /// files written by `render_dataset`, so both paths yield identical data.
    pub fn from_oracle(scene: &OracleScene) -> Result<Dataset> {
        let settings = scene.settings()?;
        let per_frame = scene
            .times
            .iter()
            .map(|&t| scene.gaussians_at(t))
            .collect::<Result<Vec<_>>>()?;
        let mut images = Vec::new();
        let mut flows = Vec::new();
        for cams in &scene.cameras {
            images.push(
                cams.iter()
                    .zip(&per_frame)
                    .map(|(c, gs)| quantize(&render_gaussians(gs, c, &settings, false).1.image))
                    .collect(),
            );
            flows.push(
                (0..cams.len().saturating_sub(1))
                    .map(|f| ground_truth_flow(&per_frame[f], &per_frame[f + 1], &cams[f], &cams[f + 1], &settings))
                    .collect(),
            );
        }
        Ok(Dataset {
            cameras: scene.cameras.clone(),
            times: scene.times.clone(),
            images,
            flows,
            init: scene.noisy_init(),
            labels: Some(scene.ids().into_iter().zip(scene.labels.iter().copied()).collect()),
            settings,
            spec: Some(scene.spec.clone()),
        })
    }

    /// Reads a directory written by `render_dataset`.
    pub fn load(dir: &Path) -> Result<Dataset> {
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let cameras = cameras_from_text(&read("cameras.txt")?)?;
        if cameras.is_empty() {
            return Err(Error::InvalidInput(format!("{}: no cameras", dir.display())));
        }
        let n_frames = cameras[0].len();
        if cameras.iter().any(|c| c.len() != n_frames) {
            return Err(Error::FrameCountMismatch {
                expected: n_frames,
                got: cameras.iter().map(Vec::len).find(|&l| l != n_frames).unwrap(),
                what: "cameras per view",
            });
        }
        let spec = match dir.join("spec.txt").exists() {
            true => Some(SceneSpec::parse(&read("spec.txt")?)?),
            false => None,
        };
        let settings = settings_from_text(&read(RENDER_SETTINGS)?)?;
        let mut images = Vec::new();
        let mut flows = Vec::new();
        for (v, cams) in cameras.iter().enumerate() {
            let mut row = Vec::new();
            for (f, cam) in cams.iter().enumerate() {
                let img = Image::load_ppm(&dir.join(frame_path(v, f)))?;
                if img.dims() != (cam.width, cam.height) {
                    return Err(Error::DimensionMismatch {
                        a: img.dims(),
                        b: (cam.width, cam.height),
                    });
                }
                row.push(img);
            }
            images.push(row);
            flows.push(
                (0..n_frames.saturating_sub(1))
                    .map(|f| FlowMap::load(&dir.join(flow_path(v, f))))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let init = load_scene(&dir.join("init.dsplat"))?;
        let labels = match dir.join("labels.txt").exists() {
            true => Some(labels_from_text(&read("labels.txt")?)?),
            false => None,
        };
        Ok(Dataset {
            cameras,
            times: frame_times(n_frames),
            images,
            flows,
            init,
            labels,
            settings,
            spec,
        })
    }

    /// Ground-truth canonical scene shipped next to the frames, if present.
    pub fn load_ground_truth(dir: &Path) -> Result<Vec<Gaussian>> {
        let p = dir.join("scene.dsplat");
        read_scene_str(&std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)
    }

    pub fn n_views(&self) -> usize {
        self.cameras.len()
    }

    pub fn n_frames(&self) -> usize {
        self.times.len()
    }

    pub fn training_pairs(&self) -> Vec<(usize, usize)> {
        self.pairs(false)
    }

    pub fn held_out_pairs(&self) -> Vec<(usize, usize)> {
        self.pairs(true)
    }

    fn pairs(&self, held: bool) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for f in 0..self.n_frames() {
            for v in 0..self.n_views() {
                if is_held_out(v, f) == held {
                    out.push((v, f));
                }
            }
        }
        out
    }
}
