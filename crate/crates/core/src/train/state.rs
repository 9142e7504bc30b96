use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::dataset::{is_held_out, Dataset};
use super::loss::{recon_loss, tv_loss_edges};
use super::model::{DynamicBranch, Model, NetGrads};
use crate::autodiff::{adam_step, lr_schedule, AdamConfig, AdamState, Archive, MlpParams, Tensor};
use crate::deform::{deform_net, refiner_net, Encoding, MotionBlend, TimeGaussian, OFFSET_DIM, POS_FREQS, TIME_FREQS};
use crate::error::{Error, Result};
use crate::gaussian::{Camera, Gaussian, Quat, FEATURE_DIM};
use crate::image::{psnr, ssim, Image};
use crate::opacity::{accumulate_importance, prune_plan, ImportanceTable};
use crate::scenegen::OracleScene;
use crate::separation::{
    camera_flow, classify, motion_flow, FlowMap, Label, Partition, SeparationParams, ViewEvidence,
};
use crate::splat::{render_gaussians, render_gaussians_backward, SplatSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Only the deformation net trains.
    Early,
    /// Deformation net and canonical scene train together.
    Joint,
    Separated,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Early => "early",
            Stage::Joint => "joint",
            Stage::Separated => "separated",
        }
    }

    fn code(self) -> f64 {
        match self {
            Stage::Early => 0.0,
            Stage::Joint => 1.0,
            Stage::Separated => 2.0,
        }
    }

    fn from_code(c: f64) -> Result<Stage> {
        match c as i64 {
            0 => Ok(Stage::Early),
            1 => Ok(Stage::Joint),
            2 => Ok(Stage::Separated),
            _ => Err(Error::parse("checkpoint", format!("bad stage code {c}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub n_gaussians: usize,
    pub n_dynamic: usize,
}

pub const METRICS_HEADER: &str = "step,stage,loss,psnr,ssim,n_gaussians,n_dynamic";

impl MetricRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.stage.as_str(),
            self.loss,
            self.psnr,
            self.ssim,
            self.n_gaussians,
            self.n_dynamic
        )
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

/// Gradient of the training loss for one image.
#[derive(Debug, Clone)]
pub struct StepGrads {
    pub loss: f64,
    pub recon: f64,
    pub tv: f64,
    /// Per Gaussian: position, raw rotation, scale, opacity, color, degree-1 color.
    pub mu: Vec<Vector3<f64>>,
    pub rot: Vec<[f64; 4]>,
    pub scale: Vec<Vector3<f64>>,
    pub opacity: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    pub sh1: Vec<[[f64; 3]; 3]>,
    pub nets: NetGrads,
}

impl StepGrads {
    fn check_finite(&self) -> Result<()> {
        let ok = self.loss.is_finite()
            && self.mu.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.rot.iter().flatten().all(|x| x.is_finite())
            && self.scale.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.opacity.iter().all(|x| x.is_finite())
            && self.color.iter().flatten().all(|x| x.is_finite())
            && self.nets.deform.iter().all(|t| t.data().iter().all(|x| x.is_finite()));
        if ok {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("training loss {}", self.loss)))
        }
    }
}

/// Unique smoothness edges in global row indices for the model's current stage.
fn tv_edges(model: &Model) -> Vec<Vec<(usize, usize)>> {
    match &model.dynamic {
        None => vec![model.full_graph.edges()],
        Some(d) => {
            let map = |idx: &[usize], e: Vec<(usize, usize)>| e.into_iter().map(|(a, b)| (idx[a], idx[b])).collect();
            vec![
                map(&d.static_idx, d.static_graph.edges()),
                map(&d.dynamic_idx, d.dynamic_graph.edges()),
            ]
        }
    }
}

/// Loss of rendering `model` at time `t` from `cam` against `target`, with gradients for every
/// trainable quantity.
pub fn loss_and_grads(
    model: &Model,
    cam: &Camera,
    t: f64,
    target: &Image,
    lambda: f64,
    tv_weight: f64,
) -> Result<StepGrads> {
    let tape = model.tape(t)?;
    let gs = model.apply(&tape.offsets)?;
    let (prep, out) = render_gaussians(&gs, cam, &model.settings, true);
    let (recon, d_image) = recon_loss(&out.image, target, lambda)?;
    let tg = render_gaussians_backward(&gs, cam, &model.settings, &prep, &out, &d_image)?;

    let mut upstream: Vec<[f64; OFFSET_DIM]> = tg
        .iter()
        .map(|g| {
            let mut u = [0.0; OFFSET_DIM];
            u[..3].copy_from_slice(g.mu.as_slice());
            u[3..7].copy_from_slice(&g.rot_raw);
            u[7..].copy_from_slice(g.scale_raw.as_slice());
            u
        })
        .collect();
    let mut tv = 0.0;
    for edges in tv_edges(model) {
        let (l, d) = tv_loss_edges(&tape.offsets, &edges, tv_weight);
        tv += l;
        for (u, g) in upstream.iter_mut().zip(d) {
            for k in 0..OFFSET_DIM {
                u[k] += g[k];
            }
        }
    }
    let nets = tape.backward(&upstream)?;
    Ok(StepGrads {
        loss: recon + tv,
        recon,
        tv,
        mu: tg.iter().map(|g| g.mu).collect(),
        rot: tg.iter().map(|g| g.rot_raw).collect(),
        scale: tg.iter().map(|g| g.scale_raw).collect(),
        opacity: tg.iter().map(|g| g.base_opacity).collect(),
        color: tg.iter().map(|g| g.color).collect(),
        sh1: tg.iter().map(|g| g.sh1).collect(),
        nets,
    })
}

/// Adam moments for every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub mu: AdamState,
    pub rot: AdamState,
    pub log_scale: AdamState,
    pub opacity: AdamState,
    pub color: AdamState,
    pub sh1: AdamState,
    pub feature: AdamState,
    pub deform: Vec<AdamState>,
    pub modes: Vec<Vec<AdamState>>,
    pub betas: Option<AdamState>,
    pub refiner: Vec<AdamState>,
}

fn net_states(net: &MlpParams) -> Vec<AdamState> {
    net.tensors().map(|t| AdamState::new(t.shape())).collect()
}

impl Optimizer {
    pub fn new(model: &Model) -> Optimizer {
        let n = model.len();
        Optimizer {
            mu: AdamState::new(&[n, 3]),
            rot: AdamState::new(&[n, 4]),
            log_scale: AdamState::new(&[n, 3]),
            opacity: AdamState::new(&[n, 1]),
            color: AdamState::new(&[n, 3]),
            sh1: AdamState::new(&[n, 9]),
            feature: AdamState::new(&[n, FEATURE_DIM]),
            deform: net_states(&model.deform),
            modes: Vec::new(),
            betas: None,
            refiner: Vec::new(),
        }
    }

    fn select_rows(&mut self, keep: &[usize]) {
        for s in [
            &mut self.mu,
            &mut self.rot,
            &mut self.log_scale,
            &mut self.opacity,
            &mut self.color,
            &mut self.sh1,
            &mut self.feature,
        ] {
            *s = s.select_rows(keep);
        }
    }
}

fn step_net(net: &mut MlpParams, grads: &[Tensor], states: &mut [AdamState], lr: f64, cfg: &AdamConfig) -> Result<()> {
    for ((p, g), s) in net.tensors_mut().zip(grads).zip(states.iter_mut()) {
        adam_step(p, g, s, lr, cfg)?;
    }
    Ok(())
}

fn rows_tensor<const K: usize>(rows: impl Iterator<Item = [f64; K]>, n: usize) -> Tensor {
    Tensor::matrix(n, K, rows.flatten().collect()).unwrap()
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub step: usize,
    pub model: Model,
    pub optimizer: Optimizer,
    /// Append-only.
    pub metrics: Vec<MetricRow>,
    /// `(step, id, importance)` of every Gaussian removed so far.
    pub pruned: Vec<(usize, u64, f64)>,
    pub last_loss: f64,
}

fn seeded(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

impl TrainState {
    pub fn new(config: TrainConfig, data: &Dataset) -> Result<TrainState> {
        config.validate()?;
        if data.init.is_empty() {
            return Err(Error::InvalidInput("dataset has an empty initial scene".into()));
        }
        let mut rng = seeded(config.seed, 1);
        let gaussians: Vec<Gaussian> = data
            .init
            .iter()
            .map(|g| {
                let mut g = g.clone();
                g.base_opacity = config.alpha0;
                g.feature = None;
                g.sh1 = match config.sh_degree {
                    1 => Some(g.sh1.unwrap_or([[0.0; 3]; 3])),
                    _ => None,
                };
                g
            })
            .collect();
        let settings = SplatSettings {
            physical_opacity: config.physical_opacity,
            ..data.settings
        };
        let model = Model::new(gaussians, deform_net(&mut rng), settings, config.k);
        let optimizer = Optimizer::new(&model);
        Ok(TrainState {
            config,
            step: 0,
            model,
            optimizer,
            metrics: Vec::new(),
            pruned: Vec::new(),
            last_loss: f64::NAN,
        })
    }

    pub fn stage(&self) -> Stage {
        if self.model.dynamic.is_some() {
            Stage::Separated
        } else if self.step < self.config.early_end {
            Stage::Early
        } else {
            Stage::Joint
        }
    }

    pub fn partition(&self) -> Option<&Partition> {
        self.model.dynamic.as_ref().map(|d| &d.partition)
    }

    /// Training pair for `step`: a seeded shuffle of the training pairs, redrawn every pass.
    pub fn pair_for(&self, step: usize, pairs: &[(usize, usize)]) -> (usize, usize) {
        let epoch = step / pairs.len();
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut seeded(self.config.seed, 1000 + epoch as u64));
        pairs[order[step % pairs.len()]]
    }

    fn is_filter_step(&self, step: usize) -> bool {
        step >= self.config.filter_at && (step - self.config.filter_at) % self.config.filter_every == 0
    }

    /// Runs due milestone events, then one optimization step on the scheduled pair.
    pub fn advance(&mut self, data: &Dataset) -> Result<f64> {
        if self.step == self.config.separation_at && self.config.separation && self.model.dynamic.is_none() {
            self.separate(data)?;
        }
        if self.is_filter_step(self.step) {
            self.filter(data)?;
        }
        let pairs = data.training_pairs();
        let (v, f) = self.pair_for(self.step, &pairs);
        train_step(self, data, v, f)
    }

    fn apply(&mut self, g: &StepGrads) -> Result<()> {
        let cfg = &self.config;
        let adam = AdamConfig::default();
        let lr_net = lr_schedule(self.step, cfg.total_steps, cfg.lr_init, cfg.lr_final);
        let m = &mut self.model;
        let o = &mut self.optimizer;
        let n = m.len();

        if !g.nets.deform.is_empty() {
            step_net(&mut m.deform, &g.nets.deform, &mut o.deform, lr_net, &adam)?;
        }
        if let Some(d) = &mut m.dynamic {
            for ((net, gr), st) in d.blend.modes.iter_mut().zip(&g.nets.modes).zip(o.modes.iter_mut()) {
                step_net(net, gr, st, lr_net, &adam)?;
            }
            if !g.nets.refiner.is_empty() {
                step_net(&mut d.refiner, &g.nets.refiner, &mut o.refiner, lr_net, &adam)?;
            }
            if let (Some(gb), Some(st)) = (&g.nets.betas, &mut o.betas) {
                let mut b = Tensor::vector(d.blend.betas.clone());
                adam_step(&mut b, gb, st, cfg.lr_beta, &adam)?;
                d.blend.betas = b.into_data();
            }
            if let Some(gf) = &g.nets.features {
                let mut full_g = Tensor::zeros(&[n, FEATURE_DIM]);
                for (r, &i) in d.dynamic_idx.iter().enumerate() {
                    full_g.row_mut(i).copy_from_slice(gf.row(r));
                }
                let mut p = rows_tensor(m.gaussians.iter().map(|g| g.feature.unwrap_or([0.0; FEATURE_DIM])), n);
                adam_step(&mut p, &full_g, &mut o.feature, cfg.lr_feature, &adam)?;
                for &i in &d.dynamic_idx {
                    let mut f = [0.0; FEATURE_DIM];
                    f.copy_from_slice(p.row(i));
                    m.gaussians[i].feature = Some(f);
                }
            }
        }

        if self.step < cfg.early_end {
            return Ok(());
        }
        let lr_pos = lr_schedule(self.step, cfg.total_steps, cfg.lr_position_init, cfg.lr_position_final);
        let gs = &mut m.gaussians;

        let mut p = rows_tensor(gs.iter().map(|g| [g.mu_c.x, g.mu_c.y, g.mu_c.z]), n);
        adam_step(
            &mut p,
            &rows_tensor(g.mu.iter().map(|v| [v.x, v.y, v.z]), n),
            &mut o.mu,
            lr_pos,
            &adam,
        )?;
        for (i, gi) in gs.iter_mut().enumerate() {
            gi.mu_c = Vector3::from_row_slice(p.row(i));
        }

        let mut p = rows_tensor(gs.iter().map(|g| g.rot_c.0), n);
        adam_step(
            &mut p,
            &rows_tensor(g.rot.iter().copied(), n),
            &mut o.rot,
            cfg.lr_rotation,
            &adam,
        )?;
        for (i, gi) in gs.iter_mut().enumerate() {
            gi.rot_c = Quat([p.row(i)[0], p.row(i)[1], p.row(i)[2], p.row(i)[3]]);
        }

        // scales live in log space for the optimizer
        let mut p = rows_tensor(gs.iter().map(|g| g.scale_c.map(f64::ln).into()), n);
        let ds = rows_tensor(
            g.scale
                .iter()
                .zip(gs.iter())
                .map(|(d, gi)| d.component_mul(&gi.scale_c).into()),
            n,
        );
        adam_step(&mut p, &ds, &mut o.log_scale, cfg.lr_scale, &adam)?;
        for (i, gi) in gs.iter_mut().enumerate() {
            gi.scale_c = Vector3::from_row_slice(p.row(i)).map(f64::exp);
        }

        let mut p = rows_tensor(gs.iter().map(|g| [g.base_opacity]), n);
        adam_step(
            &mut p,
            &rows_tensor(g.opacity.iter().map(|v| [*v]), n),
            &mut o.opacity,
            cfg.lr_opacity,
            &adam,
        )?;
        for (i, gi) in gs.iter_mut().enumerate() {
            gi.base_opacity = p.row(i)[0];
        }

        let mut p = rows_tensor(gs.iter().map(|g| g.color), n);
        adam_step(
            &mut p,
            &rows_tensor(g.color.iter().copied(), n),
            &mut o.color,
            cfg.lr_color,
            &adam,
        )?;
        for (i, gi) in gs.iter_mut().enumerate() {
            gi.color = [p.row(i)[0], p.row(i)[1], p.row(i)[2]].map(|c| c.clamp(0.0, 1.0));
        }

        if cfg.sh_degree == 1 {
            let flat = |s: [[f64; 3]; 3]| {
                let mut out = [0.0; 9];
                for (k, v) in s.iter().flatten().enumerate() {
                    out[k] = *v;
                }
                out
            };
            let mut p = rows_tensor(gs.iter().map(|g| flat(g.sh1.unwrap_or_default())), n);
            adam_step(
                &mut p,
                &rows_tensor(g.sh1.iter().map(|s| flat(*s)), n),
                &mut o.sh1,
                cfg.lr_color / 20.0,
                &adam,
            )?;
            for (i, gi) in gs.iter_mut().enumerate() {
                let r = p.row(i);
                gi.sh1 = Some([[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]]);
            }
        }
        for gi in gs.iter_mut() {
            gi.enforce_invariants()?;
        }
        Ok(())
    }

    /// Splits the scene using the current deformation net and seeds the dynamic branch from it.
    pub fn separate(&mut self, data: &Dataset) -> Result<()> {
        if self.model.dynamic.is_some() {
            return Ok(());
        }
        let per_frame = data
            .times
            .iter()
            .map(|&t| self.model.gaussians_at(t))
            .collect::<Result<Vec<_>>>()?;
        let trajectories = self.model.trajectories(&data.times)?;
        let views = gather_evidence(&per_frame, &data.cameras, &data.flows, &self.model.settings, |v, f| {
            !is_held_out(v, f)
        })?;
        let ids: Vec<u64> = self.model.gaussians.iter().map(|g| g.id).collect();
        let partition = classify(
            &ids,
            &trajectories,
            &views,
            &SeparationParams {
                tau: self.config.tau_var,
                epsilon: self.config.epsilon,
                gamma: self.config.gamma,
            },
        )?;
        log::info!(
            "step {}: separation marks {} of {} gaussians dynamic",
            self.step,
            partition.n_dynamic(),
            ids.len()
        );
        self.install_partition(partition)
    }

    /// Builds the dynamic branch for a given partition.
    pub fn install_partition(&mut self, partition: Partition) -> Result<()> {
        let mut rng = seeded(self.config.seed, 2 + self.step as u64);
        let blend =
            MotionBlend::from_deform_net(&self.model.deform, self.config.modes, self.config.mode_noise, &mut rng)?;
        let refiner = refiner_net(&mut rng);
        let a = self.config.feature_init;
        for (g, l) in self.model.gaussians.iter_mut().zip(&partition.labels) {
            g.feature = match l {
                Label::Dynamic => Some([0.0; FEATURE_DIM].map(|_| if a > 0.0 { rng.gen_range(-a..a) } else { 0.0 })),
                Label::Static => None,
            };
        }
        let o = &mut self.optimizer;
        o.modes = blend.modes.iter().map(net_states).collect();
        o.betas = Some(AdamState::new(&[blend.betas.len()]));
        o.refiner = net_states(&refiner);
        o.feature = AdamState::new(&[self.model.len(), FEATURE_DIM]);
        self.model.dynamic = Some(DynamicBranch::new(
            &self.model.gaussians,
            partition,
            blend,
            refiner,
            self.model.k,
        ));
        Ok(())
    }

    /// Maximum contribution of each Gaussian over every training image.
    pub fn importance(&self, data: &Dataset) -> Result<ImportanceTable> {
        let mut table = ImportanceTable::new(self.model.len());
        let mut cache: Vec<Option<Vec<TimeGaussian>>> = vec![None; data.n_frames()];
        for (v, f) in data.training_pairs() {
            if cache[f].is_none() {
                cache[f] = Some(self.model.gaussians_at(data.times[f])?);
            }
            let gs = cache[f].as_ref().unwrap();
            let (prep, out) = render_gaussians(gs, &data.cameras[v][f], &self.model.settings, true);
            accumulate_importance(&mut table, out.trace.as_ref().unwrap(), &prep.owner);
        }
        Ok(table)
    }

    pub fn filter(&mut self, data: &Dataset) -> Result<Vec<u64>> {
        let table = self.importance(data)?;
        let (keep, remove) = prune_plan(&table, self.config.tau_prune)?;
        let removed: Vec<u64> = remove.iter().map(|&i| self.model.gaussians[i].id).collect();
        for &i in &remove {
            self.pruned.push((self.step, self.model.gaussians[i].id, table.w[i]));
        }
        if !remove.is_empty() {
            log::info!("step {}: pruned {} gaussians", self.step, remove.len());
            self.model.select_rows(&keep);
            self.optimizer.select_rows(&keep);
        }
        Ok(removed)
    }

    /// Mean PSNR and SSIM over the held-out pairs.
    pub fn evaluate(&self, data: &Dataset) -> Result<(f64, f64)> {
        evaluate_model(&self.model, data)
    }

    pub fn record_metrics(&mut self, data: &Dataset) -> Result<MetricRow> {
        let (p, s) = self.evaluate(data)?;
        let row = MetricRow {
            step: self.step,
            stage: self.stage(),
            loss: self.last_loss,
            psnr: p,
            ssim: s,
            n_gaussians: self.model.len(),
            n_dynamic: self.model.n_dynamic(),
        };
        self.metrics.push(row);
        Ok(row)
    }

    pub fn prune_report(&self) -> String {
        let mut s = format!("# step id importance ({} removed)\n", self.pruned.len());
        for (step, id, w) in &self.pruned {
            s.push_str(&format!("{step} {id} {w:e}\n"));
        }
        s
    }
}

pub fn evaluate_model(model: &Model, data: &Dataset) -> Result<(f64, f64)> {
    let pairs = data.held_out_pairs();
    if pairs.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let (mut p, mut s) = (0.0, 0.0);
    let mut cache: Vec<Option<Vec<TimeGaussian>>> = vec![None; data.n_frames()];
    for &(v, f) in &pairs {
        if cache[f].is_none() {
            cache[f] = Some(model.gaussians_at(data.times[f])?);
        }
        let (_, out) = render_gaussians(cache[f].as_ref().unwrap(), &data.cameras[v][f], &model.settings, false);
        p += psnr(&out.image, &data.images[v][f])?;
        s += ssim(&out.image, &data.images[v][f])?;
    }
    let n = pairs.len() as f64;
    Ok((p / n, s / n))
}

/// Per-view projections and motion-flow maps for classification. Flow intervals whose
/// endpoints are not both `usable` are marked invalid.
pub fn gather_evidence(
    per_frame: &[Vec<TimeGaussian>],
    cameras: &[Vec<Camera>],
    flows: &[Vec<FlowMap>],
    settings: &SplatSettings,
    usable: impl Fn(usize, usize) -> bool,
) -> Result<Vec<ViewEvidence>> {
    let n_frames = per_frame.len();
    let n = per_frame.first().map_or(0, Vec::len);
    let mut views = Vec::with_capacity(cameras.len());
    for (v, cams) in cameras.iter().enumerate() {
        if cams.len() != n_frames || flows[v].len() + 1 != n_frames {
            return Err(Error::FrameCountMismatch {
                expected: n_frames,
                got: cams.len(),
                what: "view cameras or flows",
            });
        }
        let projections = (0..n)
            .map(|g| {
                (0..n_frames)
                    .map(|f| cams[f].project_point(&per_frame[f][g].mu).map(|p| [p.x, p.y]))
                    .collect()
            })
            .collect();
        let mut motion_flows = Vec::with_capacity(n_frames.saturating_sub(1));
        for f in 0..n_frames.saturating_sub(1) {
            if !(usable(v, f) && usable(v, f + 1)) {
                motion_flows.push(FlowMap::invalid(cams[f].width, cams[f].height));
                continue;
            }
            let (_, out) = render_gaussians(&per_frame[f], &cams[f], settings, false);
            let cf = camera_flow(&out.depth, &cams[f], &cams[f + 1]);
            motion_flows.push(motion_flow(&flows[v][f], &cf)?);
        }
        views.push(ViewEvidence {
            projections,
            motion_flows,
        });
    }
    Ok(views)
}

/// Separation of the oracle's own Gaussians from their exact trajectories and the dataset flows.
pub fn classify_oracle(scene: &OracleScene, data: &Dataset, params: &SeparationParams) -> Result<Partition> {
    let per_frame = scene
        .times
        .iter()
        .map(|&t| scene.gaussians_at(t))
        .collect::<Result<Vec<_>>>()?;
    let views = gather_evidence(&per_frame, &data.cameras, &data.flows, &data.settings, |_, _| true)?;
    classify(&scene.ids(), &scene.trajectories(), &views, params)
}

/// One optimization step on view `view`, frame `frame`; returns the loss before the update.
pub fn train_step(state: &mut TrainState, data: &Dataset, view: usize, frame: usize) -> Result<f64> {
    let cam = &data.cameras[view][frame];
    let target = &data.images[view][frame];
    let grads = loss_and_grads(
        &state.model,
        cam,
        data.times[frame],
        target,
        state.config.lambda,
        state.config.tv_weight,
    )?;
    grads.check_finite()?;
    state.apply(&grads)?;
    state.step += 1;
    state.last_loss = grads.loss;
    Ok(grads.loss)
}

fn push_net(a: &mut Archive, prefix: &str, net: &MlpParams) {
    a.set_meta(&format!("{prefix}.layers"), net.layers.len().to_string());
    for (i, t) in net.tensors().enumerate() {
        a.push(format!("{prefix}.{i}"), t.clone());
    }
}

fn read_net(a: &Archive, prefix: &str) -> Result<MlpParams> {
    let n: usize = a.meta_parse(&format!("{prefix}.layers"))?;
    let mut layers = Vec::with_capacity(n);
    for i in 0..n {
        layers.push(crate::autodiff::Layer {
            weight: a.get(&format!("{prefix}.{}", 2 * i))?.clone(),
            bias: a.get(&format!("{prefix}.{}", 2 * i + 1))?.clone(),
        });
    }
    MlpParams::from_layers(layers)
}

fn push_adam(a: &mut Archive, name: &str, s: &AdamState) {
    a.push(format!("adam.{name}.m"), s.m.clone());
    a.push(format!("adam.{name}.v"), s.v.clone());
    a.set_meta(&format!("adam.{name}.step"), s.step.to_string());
}

fn read_adam(a: &Archive, name: &str) -> Result<AdamState> {
    Ok(AdamState {
        m: a.get(&format!("adam.{name}.m"))?.clone(),
        v: a.get(&format!("adam.{name}.v"))?.clone(),
        step: a.meta_parse(&format!("adam.{name}.step"))?,
    })
}

fn label_code(l: Label) -> f64 {
    match l {
        Label::Static => 0.0,
        Label::Dynamic => 1.0,
    }
}

impl TrainState {
    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::default();
        a.set_meta("kind", "train-state");
        a.set_meta("step", self.step.to_string());
        a.set_meta("last_loss", self.last_loss.to_string());
        for line in self.config.to_text().lines() {
            if let Some((k, v)) = line.split_once(" = ") {
                a.set_meta(&format!("config.{k}"), v.to_string());
            }
        }
        let m = &self.model;
        let s = &m.settings;
        a.set_meta("settings.d_ref", s.d_ref.to_string());
        a.set_meta("settings.physical_opacity", s.physical_opacity.to_string());
        a.set_meta(
            "settings.background",
            format!("{} {} {}", s.background[0], s.background[1], s.background[2]),
        );
        a.set_meta("encoding.radius", m.encoding.radius.to_string());
        a.set_meta("encoding.freqs", format!("{POS_FREQS} {TIME_FREQS}"));
        a.push("encoding.center", Tensor::vector(m.encoding.center.to_vec()));

        let n = m.len();
        let gs = &m.gaussians;
        a.push("ids", Tensor::vector(gs.iter().map(|g| g.id as f64).collect()));
        a.push("mu", rows_tensor(gs.iter().map(|g| [g.mu_c.x, g.mu_c.y, g.mu_c.z]), n));
        a.push("rot", rows_tensor(gs.iter().map(|g| g.rot_c.0), n));
        a.push("scale", rows_tensor(gs.iter().map(|g| g.scale_c.into()), n));
        a.push("opacity", rows_tensor(gs.iter().map(|g| [g.base_opacity]), n));
        a.push("color", rows_tensor(gs.iter().map(|g| g.color), n));
        if gs.iter().any(|g| g.sh1.is_some()) {
            a.push(
                "sh1",
                rows_tensor(
                    gs.iter().map(|g| {
                        let s = g.sh1.unwrap_or_default();
                        [
                            s[0][0], s[0][1], s[0][2], s[1][0], s[1][1], s[1][2], s[2][0], s[2][1], s[2][2],
                        ]
                    }),
                    n,
                ),
            );
        }
        a.push(
            "has_feature",
            Tensor::vector(gs.iter().map(|g| g.feature.is_some() as u8 as f64).collect()),
        );
        a.push(
            "feature",
            rows_tensor(gs.iter().map(|g| g.feature.unwrap_or([0.0; FEATURE_DIM])), n),
        );
        push_net(&mut a, "deform", &m.deform);

        let o = &self.optimizer;
        for (name, st) in [
            ("mu", &o.mu),
            ("rot", &o.rot),
            ("log_scale", &o.log_scale),
            ("opacity", &o.opacity),
            ("color", &o.color),
            ("sh1", &o.sh1),
            ("feature", &o.feature),
        ] {
            push_adam(&mut a, name, st);
        }
        for (i, st) in o.deform.iter().enumerate() {
            push_adam(&mut a, &format!("deform.{i}"), st);
        }

        if let Some(d) = &m.dynamic {
            a.set_meta("dynamic.modes", d.blend.modes.len().to_string());
            a.push(
                "dynamic.labels",
                Tensor::vector(d.partition.labels.iter().map(|l| label_code(*l)).collect()),
            );
            a.push("dynamic.variance", Tensor::vector(d.partition.variance.clone()));
            a.push("dynamic.ratio", Tensor::vector(d.partition.ratio.clone()));
            a.push("dynamic.betas", Tensor::vector(d.blend.betas.clone()));
            for (k, net) in d.blend.modes.iter().enumerate() {
                push_net(&mut a, &format!("mode{k}"), net);
                for (i, st) in o.modes[k].iter().enumerate() {
                    push_adam(&mut a, &format!("mode{k}.{i}"), st);
                }
            }
            push_net(&mut a, "refiner", &d.refiner);
            for (i, st) in o.refiner.iter().enumerate() {
                push_adam(&mut a, &format!("refiner.{i}"), st);
            }
            if let Some(b) = &o.betas {
                push_adam(&mut a, "betas", b);
            }
        }

        let rows = self.metrics.len();
        let data = self
            .metrics
            .iter()
            .flat_map(|r| {
                [
                    r.step as f64,
                    r.stage.code(),
                    r.loss,
                    r.psnr,
                    r.ssim,
                    r.n_gaussians as f64,
                    r.n_dynamic as f64,
                ]
            })
            .collect();
        a.push("metrics", Tensor::new(vec![rows, 7], data).unwrap());
        let data = self
            .pruned
            .iter()
            .flat_map(|(s, id, w)| [*s as f64, *id as f64, *w])
            .collect();
        a.push("pruned", Tensor::new(vec![self.pruned.len(), 3], data).unwrap());
        a
    }

    pub fn from_archive(a: &Archive) -> Result<TrainState> {
        if a.meta("kind") != Some("train-state") {
            return Err(Error::parse("checkpoint", "not a training checkpoint"));
        }
        let mut config = TrainConfig::mini();
        for (k, v) in &a.meta {
            if let Some(key) = k.strip_prefix("config.") {
                config.set(key, v)?;
            }
        }
        config.validate()?;
        let bg: Vec<f64> = a
            .meta("settings.background")
            .unwrap_or("")
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| Error::parse("checkpoint", "background")))
            .collect::<Result<_>>()?;
        if bg.len() != 3 {
            return Err(Error::parse("checkpoint", "background"));
        }
        let settings = SplatSettings {
            d_ref: a.meta_parse("settings.d_ref")?,
            physical_opacity: a.meta_parse("settings.physical_opacity")?,
            background: [bg[0], bg[1], bg[2]],
        };
        let freqs = a.meta("encoding.freqs").unwrap_or("");
        if freqs != format!("{POS_FREQS} {TIME_FREQS}") {
            return Err(Error::parse(
                "checkpoint",
                format!("encoding frequencies '{freqs}' differ from this build ({POS_FREQS} {TIME_FREQS})"),
            ));
        }
        let c = a.get("encoding.center")?;
        let encoding = Encoding {
            center: [c.data()[0], c.data()[1], c.data()[2]],
            radius: a.meta_parse("encoding.radius")?,
        };

        let ids = a.get("ids")?;
        let n = ids.len();
        let (mu, rot, scale, op, col) = (
            a.get("mu")?,
            a.get("rot")?,
            a.get("scale")?,
            a.get("opacity")?,
            a.get("color")?,
        );
        let (hf, feat) = (a.get("has_feature")?, a.get("feature")?);
        let sh1 = if a.has("sh1") { Some(a.get("sh1")?) } else { None };
        for t in [mu, rot, scale, op, col, feat] {
            if t.rows() != n {
                return Err(Error::parse("checkpoint", "gaussian tensors disagree in length"));
            }
        }
        let gaussians = (0..n)
            .map(|i| {
                let mut f = [0.0; FEATURE_DIM];
                f.copy_from_slice(feat.row(i));
                Gaussian {
                    id: ids.data()[i] as u64,
                    mu_c: Vector3::from_row_slice(mu.row(i)),
                    rot_c: Quat([rot.row(i)[0], rot.row(i)[1], rot.row(i)[2], rot.row(i)[3]]),
                    scale_c: Vector3::from_row_slice(scale.row(i)),
                    base_opacity: op.row(i)[0],
                    color: [col.row(i)[0], col.row(i)[1], col.row(i)[2]],
                    sh1: sh1.map(|s| {
                        let r = s.row(i);
                        [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]]
                    }),
                    feature: (hf.data()[i] != 0.0).then_some(f),
                }
            })
            .collect();
        let deform = read_net(a, "deform")?;
        let mut model = Model::new(gaussians, deform, settings, config.k);
        model.encoding = encoding;

        let mut optimizer = Optimizer {
            mu: read_adam(a, "mu")?,
            rot: read_adam(a, "rot")?,
            log_scale: read_adam(a, "log_scale")?,
            opacity: read_adam(a, "opacity")?,
            color: read_adam(a, "color")?,
            sh1: read_adam(a, "sh1")?,
            feature: read_adam(a, "feature")?,
            deform: (0..model.deform.tensors().count())
                .map(|i| read_adam(a, &format!("deform.{i}")))
                .collect::<Result<_>>()?,
            modes: Vec::new(),
            betas: None,
            refiner: Vec::new(),
        };

        if a.has("dynamic.labels") {
            let m: usize = a.meta_parse("dynamic.modes")?;
            let labels = a
                .get("dynamic.labels")?
                .data()
                .iter()
                .map(|c| if *c != 0.0 { Label::Dynamic } else { Label::Static })
                .collect();
            let partition = Partition {
                ids: model.gaussians.iter().map(|g| g.id).collect(),
                labels,
                variance: a.get("dynamic.variance")?.data().to_vec(),
                ratio: a.get("dynamic.ratio")?.data().to_vec(),
            };
            let modes = (0..m)
                .map(|k| read_net(a, &format!("mode{k}")))
                .collect::<Result<Vec<_>>>()?;
            for (k, net) in modes.iter().enumerate() {
                optimizer.modes.push(
                    (0..net.tensors().count())
                        .map(|i| read_adam(a, &format!("mode{k}.{i}")))
                        .collect::<Result<_>>()?,
                );
            }
            let mut blend = MotionBlend::new(modes);
            blend.betas = a.get("dynamic.betas")?.data().to_vec();
            let refiner = read_net(a, "refiner")?;
            optimizer.refiner = (0..refiner.tensors().count())
                .map(|i| read_adam(a, &format!("refiner.{i}")))
                .collect::<Result<_>>()?;
            optimizer.betas = Some(read_adam(a, "betas")?);
            model.dynamic = Some(DynamicBranch::new(
                &model.gaussians,
                partition,
                blend,
                refiner,
                config.k,
            ));
        }

        let metrics = a.get("metrics")?;
        let metrics = (0..metrics.rows())
            .map(|r| {
                let v = metrics.row(r);
                Ok(MetricRow {
                    step: v[0] as usize,
                    stage: Stage::from_code(v[1])?,
                    loss: v[2],
                    psnr: v[3],
                    ssim: v[4],
                    n_gaussians: v[5] as usize,
                    n_dynamic: v[6] as usize,
                })
            })
            .collect::<Result<_>>()?;
        let pruned = a.get("pruned")?;
        let pruned = (0..pruned.rows())
            .map(|r| {
                let v = pruned.row(r);
                (v[0] as usize, v[1] as u64, v[2])
            })
            .collect();
        Ok(TrainState {
            config,
            step: a.meta_parse("step")?,
            model,
            optimizer,
            metrics,
            pruned,
            last_loss: a.meta_parse("last_loss")?,
        })
    }
}
