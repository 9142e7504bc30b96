//! Browser demo: scrub the synthetic scene, train on it in small chunks, tint moving Gaussians.

use wasm_bindgen::prelude::*;

use dynasplat::deform::TimeGaussian;
use dynasplat::image::{psnr, Image};
use dynasplat::scenegen::{generate, OracleScene, SceneSpec};
use dynasplat::separation::Label;
use dynasplat::splat::render_image;
use dynasplat::train::{Dataset, TrainConfig, TrainState};

const DYNAMIC_TINT: [f64; 3] = [0.95, 0.35, 0.2];
const STATIC_TINT: [f64; 3] = [0.55, 0.6, 0.7];

fn js_err(e: dynasplat::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn rgba(img: &Image) -> Vec<u8> {
    img.pixels
        .iter()
        .flat_map(|p| {
            let c = p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
            [c[0], c[1], c[2], 255]
        })
        .collect()
}

fn tint(gs: &mut [TimeGaussian], dynamic: impl Fn(u64) -> bool) {
    for g in gs {
        g.color = if dynamic(g.id) { DYNAMIC_TINT } else { STATIC_TINT };
    }
}

#[wasm_bindgen]
pub struct Demo {
    scene: OracleScene,
    data: Dataset,
    state: TrainState,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Demo, JsValue> {
        let scene = generate(&SceneSpec::mini(seed as u64)).map_err(js_err)?;
        let data = Dataset::from_oracle(&scene).map_err(js_err)?;
        let mut config = TrainConfig::mini();
        config.seed = seed as u64;
        let state = TrainState::new(config, &data).map_err(js_err)?;
        Ok(Demo { scene, data, state })
    }

    pub fn width(&self) -> usize {
        self.scene.spec.rig.width
    }

    pub fn height(&self) -> usize {
        self.scene.spec.rig.height
    }

    pub fn views(&self) -> usize {
        self.scene.spec.rig.n_views
    }

    pub fn step(&self) -> usize {
        self.state.step
    }

    pub fn total_steps(&self) -> usize {
        self.state.config.total_steps
    }

    pub fn n_gaussians(&self) -> usize {
        self.state.model.len()
    }

    pub fn n_dynamic(&self) -> usize {
        self.state.model.n_dynamic()
    }

    /// Ground truth at any time, as RGBA bytes. With `motion`, moving Gaussians are tinted.
    pub fn truth(&self, view: usize, t: f64, motion: bool) -> Result<Vec<u8>, JsValue> {
        let mut gs = self.scene.gaussians_at(t).map_err(js_err)?;
        if motion {
            let labels: std::collections::HashMap<u64, Label> = self
                .scene
                .ids()
                .into_iter()
                .zip(self.scene.labels.iter().copied())
                .collect();
            tint(&mut gs, |id| labels.get(&id) == Some(&Label::Dynamic));
        }
        let cam = self.scene.spec.rig.camera(view, t);
        Ok(rgba(&render_image(&gs, &cam, &self.scene.settings().map_err(js_err)?)))
    }

    /// The model being trained. With `motion`, Gaussians it has marked dynamic are tinted.
    pub fn model(&self, view: usize, t: f64, motion: bool) -> Result<Vec<u8>, JsValue> {
        let mut gs = self.state.model.gaussians_at(t).map_err(js_err)?;
        if motion {
            let dynamic: std::collections::HashSet<u64> = self
                .state
                .partition()
                .map(|p| p.dynamic_ids().into_iter().collect())
                .unwrap_or_default();
            tint(&mut gs, |id| dynamic.contains(&id));
        }
        let cam = self.scene.spec.rig.camera(view, t);
        Ok(rgba(&render_image(&gs, &cam, &self.state.model.settings)))
    }

    /// Runs up to `n` optimization steps and returns the mean loss.
    pub fn train(&mut self, n: usize) -> Result<f64, JsValue> {
        let mut sum = 0.0;
        let mut done = 0;
        while done < n && self.state.step < self.state.config.total_steps {
            sum += self.state.advance(&self.data).map_err(js_err)?;
            done += 1;
        }
        Ok(if done == 0 { f64::NAN } else { sum / done as f64 })
    }

    /// PSNR of the model against ground truth for one view and time.
    pub fn psnr(&self, view: usize, t: f64) -> Result<f64, JsValue> {
        let cam = self.scene.spec.rig.camera(view, t);
        let truth = render_image(
            &self.scene.gaussians_at(t).map_err(js_err)?,
            &cam,
            &self.scene.settings().map_err(js_err)?,
        );
        let model = render_image(
            &self.state.model.gaussians_at(t).map_err(js_err)?,
            &cam,
            &self.state.model.settings,
        );
        psnr(&model, &truth).map_err(js_err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_have_the_rig_size_and_training_moves_forward() {
        let mut d = Demo::new(3).unwrap();
        let n = d.width() * d.height() * 4;
        assert_eq!(d.truth(0, 0.5, false).unwrap().len(), n);
        assert_eq!(d.model(1, 0.0, true).unwrap().len(), n);
        let mean_psnr = |d: &Demo| (0..d.views()).map(|v| d.psnr(v, 0.0).unwrap()).sum::<f64>() / d.views() as f64;
        let before = mean_psnr(&d);
        let loss = d.train(150).unwrap();
        assert!(loss.is_finite());
        assert_eq!(d.step(), 150);
        assert!(mean_psnr(&d) > before + 1.0);
    }

    #[test]
    fn motion_tint_marks_only_moving_gaussians() {
        let d = Demo::new(3).unwrap();
        let plain = d.truth(2, 0.3, false).unwrap();
        let tinted = d.truth(2, 0.3, true).unwrap();
        assert_ne!(plain, tinted);
        // before separation the model has nothing marked, so everything is the static tint
        let m = d.model(2, 0.3, true).unwrap();
        let hot = m.chunks(4).filter(|p| p[0] > 200 && p[1] < 120).count();
        assert_eq!(hot, 0);
    }
}
