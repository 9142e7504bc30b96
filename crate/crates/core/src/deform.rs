//! Per-time offsets of Gaussian parameters: a single deformation net, blended motion modes,
//! and the neighbor-averaged coarse term plus a learned fine residual.

use std::sync::Arc;

use nalgebra::Vector3;
use rand::Rng;

use crate::autodiff::{positional_encoding, Layer, MlpParams, Tensor};
use crate::error::{Error, Result};
use crate::gaussian::{Gaussian, Quat, FEATURE_DIM, SCALE_FLOOR};

pub const POS_FREQS: usize = 10;
/// Kept low enough that the top band stays near the frame sampling rate of a 12-frame clip;
/// higher bands alias and novel times between frames come out garbled.
pub const TIME_FREQS: usize = 4;
pub const NET_WIDTH: usize = 64;
pub const DEFAULT_K: usize = 8;
pub const DEFAULT_MODES: usize = 4;
/// Offset layout: `Δμ (3) | ΔR (4) | ΔS (3)`.
pub const OFFSET_DIM: usize = 10;
/// `γ(μ) | γ(t)`
pub const DEFORM_INPUT: usize = 2 * POS_FREQS * 3 + 2 * TIME_FREQS;
/// `γ(μ) | γ(t) | S_c | R_c`
pub const MODE_INPUT: usize = DEFORM_INPUT + 7;
pub const REFINER_INPUT: usize = OFFSET_DIM + FEATURE_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OffsetTriple {
    pub d_mu: [f64; 3],
    pub d_rot: [f64; 4],
    pub d_scale: [f64; 3],
}

impl OffsetTriple {
    pub const ZERO: OffsetTriple = OffsetTriple {
        d_mu: [0.0; 3],
        d_rot: [0.0; 4],
        d_scale: [0.0; 3],
    };

    pub fn from_slice(v: &[f64]) -> OffsetTriple {
        OffsetTriple {
            d_mu: [v[0], v[1], v[2]],
            d_rot: [v[3], v[4], v[5], v[6]],
            d_scale: [v[7], v[8], v[9]],
        }
    }

    pub fn to_array(&self) -> [f64; OFFSET_DIM] {
        let mut out = [0.0; OFFSET_DIM];
        out[..3].copy_from_slice(&self.d_mu);
        out[3..7].copy_from_slice(&self.d_rot);
        out[7..].copy_from_slice(&self.d_scale);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Maps canonical positions into roughly `[-1, 1]` before encoding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Encoding {
    pub center: [f64; 3],
    pub radius: f64,
}

impl Encoding {
    pub const UNIT: Encoding = Encoding {
        center: [0.0; 3],
        radius: 1.0,
    };

    /// Bounding sphere of the positions around their mean.
    pub fn fit(positions: &[Vector3<f64>]) -> Encoding {
        if positions.is_empty() {
            return Encoding::UNIT;
        }
        let c = positions.iter().sum::<Vector3<f64>>() / positions.len() as f64;
        let r = positions.iter().map(|p| (p - c).norm()).fold(0.0, f64::max);
        Encoding {
            center: [c.x, c.y, c.z],
            radius: if r > 0.0 { r } else { 1.0 },
        }
    }

    fn normalized(&self, mu: &Vector3<f64>) -> [f64; 3] {
        [
            (mu.x - self.center[0]) / self.radius,
            (mu.y - self.center[1]) / self.radius,
            (mu.z - self.center[2]) / self.radius,
        ]
    }

    /// Input row of the single deformation net.
    pub fn deform_input(&self, g: &Gaussian, t: f64) -> Vec<f64> {
        let mut row = positional_encoding(&self.normalized(&g.mu_c), POS_FREQS);
        row.extend(positional_encoding(&[t], TIME_FREQS));
        row
    }

    /// Input row of a motion-mode net.
    pub fn mode_input(&self, g: &Gaussian, t: f64) -> Vec<f64> {
        let mut row = self.deform_input(g, t);
        row.extend(g.scale_c.iter().map(|s| s / self.radius));
        row.extend(g.rot_c.0);
        row
    }

    pub fn deform_batch(&self, gs: &[&Gaussian], t: f64) -> Tensor {
        let data = gs.iter().flat_map(|g| self.deform_input(g, t)).collect();
        Tensor::matrix(gs.len(), DEFORM_INPUT, data).unwrap()
    }

    pub fn mode_batch(&self, gs: &[&Gaussian], t: f64) -> Tensor {
        let data = gs.iter().flat_map(|g| self.mode_input(g, t)).collect();
        Tensor::matrix(gs.len(), MODE_INPUT, data).unwrap()
    }
}

pub fn deform_net(rng: &mut impl Rng) -> MlpParams {
    MlpParams::init(&[DEFORM_INPUT, NET_WIDTH, NET_WIDTH, OFFSET_DIM], rng)
}

pub fn mode_net(rng: &mut impl Rng) -> MlpParams {
    MlpParams::init(&[MODE_INPUT, NET_WIDTH, NET_WIDTH, NET_WIDTH, OFFSET_DIM], rng)
}

pub fn refiner_net(rng: &mut impl Rng) -> MlpParams {
    MlpParams::init(&[REFINER_INPUT, NET_WIDTH, NET_WIDTH, OFFSET_DIM], rng)
}

fn single_row(net: &MlpParams, row: Vec<f64>) -> Result<OffsetTriple> {
    let n = row.len();
    let out = net.forward(&Tensor::matrix(1, n, row)?)?;
    if out.len() != OFFSET_DIM {
        return Err(Error::ShapeMismatch(format!(
            "offset net produces {} values",
            out.len()
        )));
    }
    Ok(OffsetTriple::from_slice(out.data()))
}

pub fn deform_single(net: &MlpParams, enc: &Encoding, g: &Gaussian, t: f64) -> Result<OffsetTriple> {
    single_row(net, enc.deform_input(g, t))
}

/// `M` motion nets mixed by `softmax(betas)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionBlend {
    pub modes: Vec<MlpParams>,
    pub betas: Vec<f64>,
}

impl MotionBlend {
    pub fn new(modes: Vec<MlpParams>) -> MotionBlend {
        let m = modes.len();
        MotionBlend {
            modes,
            betas: vec![0.0; m],
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        softmax(&self.betas)
    }

    /// Builds `m` modes that reproduce `net` (one extra identity hidden layer, zero weights
    /// on the shape inputs) plus uniform noise of magnitude `noise` on the hidden weights.
    pub fn from_deform_net(net: &MlpParams, m: usize, noise: f64, rng: &mut impl Rng) -> Result<MotionBlend> {
        let dims = net.dims();
        if dims[0] != DEFORM_INPUT || dims.len() < 3 {
            return Err(Error::ShapeMismatch(format!("cannot embed net with dims {dims:?}")));
        }
        let width = dims[1];
        let mut modes = Vec::with_capacity(m);
        for _ in 0..m {
            let mut layers = Vec::with_capacity(net.layers.len() + 1);
            let first = &net.layers[0];
            let mut w0 = Tensor::zeros(&[MODE_INPUT, width]);
            w0.data_mut()[..DEFORM_INPUT * width].copy_from_slice(first.weight.data());
            layers.push(Layer {
                weight: w0,
                bias: first.bias.clone(),
            });
            let last = net.layers.len() - 1;
            layers.extend(net.layers[1..last].iter().cloned());
            let hidden = net.layers[last].weight.shape()[0];
            let mut eye = Tensor::zeros(&[hidden, hidden]);
            for i in 0..hidden {
                eye.data_mut()[i * hidden + i] = 1.0;
            }
            layers.push(Layer {
                weight: eye,
                bias: Tensor::zeros(&[hidden]),
            });
            layers.push(net.layers[last].clone());
            let n = layers.len();
            for l in &mut layers[..n - 1] {
                for v in l.weight.data_mut() {
                    *v += rng.gen_range(-noise..=noise);
                }
            }
            modes.push(MlpParams::from_layers(layers)?);
        }
        Ok(MotionBlend::new(modes))
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn adaptive_motion(blend: &MotionBlend, enc: &Encoding, g: &Gaussian, t: f64) -> Result<OffsetTriple> {
    let row = enc.mode_input(g, t);
    let mut acc = [0.0; OFFSET_DIM];
    for (w, net) in blend.weights().iter().zip(&blend.modes) {
        let o = single_row(net, row.clone())?.to_array();
        for (a, v) in acc.iter_mut().zip(o) {
            *a += w * v;
        }
    }
    Ok(OffsetTriple::from_slice(&acc))
}

/// k-nearest neighbors by Euclidean distance. Ties are broken by index.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    pub k: usize,
    pub lists: Arc<Vec<Vec<usize>>>,
}

impl NeighborGraph {
    pub fn build(positions: &[Vector3<f64>], k: usize) -> NeighborGraph {
        let n = positions.len();
        let lists = (0..n)
            .map(|i| {
                let mut d: Vec<(f64, usize)> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| ((positions[i] - positions[j]).norm_squared(), j))
                    .collect();
                d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                d.truncate(k);
                d.into_iter().map(|(_, j)| j).collect()
            })
            .collect();
        NeighborGraph {
            k,
            lists: Arc::new(lists),
        }
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    /// Unordered edges `(i, j)` with `i < j`, each once.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<(usize, usize)> = self
            .lists
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.iter().map(move |&j| (i.min(j), i.max(j))))
            .collect();
        e.sort_unstable();
        e.dedup();
        e
    }
}

pub fn coarse_offset(g: usize, raw: &[OffsetTriple], graph: &NeighborGraph) -> OffsetTriple {
    let list = &graph.lists[g];
    if list.is_empty() {
        return raw[g];
    }
    let mut acc = [0.0; OFFSET_DIM];
    for &n in list {
        for (a, v) in acc.iter_mut().zip(raw[n].to_array()) {
            *a += v;
        }
    }
    let inv = 1.0 / list.len() as f64;
    OffsetTriple::from_slice(&acc.map(|v| v * inv))
}

pub fn fine_offset(
    refiner: &MlpParams,
    coarse: &OffsetTriple,
    feature: Option<&[f64; FEATURE_DIM]>,
) -> Result<OffsetTriple> {
    let f = feature.ok_or(Error::MissingFeature)?;
    let mut row = coarse.to_array().to_vec();
    row.extend_from_slice(f);
    single_row(refiner, row)
}

pub fn compose_offsets(coarse: &OffsetTriple, fine: &OffsetTriple) -> OffsetTriple {
    let (a, b) = (coarse.to_array(), fine.to_array());
    let mut out = [0.0; OFFSET_DIM];
    for i in 0..OFFSET_DIM {
        out[i] = a[i] + b[i];
    }
    OffsetTriple::from_slice(&out)
}

/// Gaussian parameters at one time instant.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGaussian {
    pub id: u64,
    pub mu: Vector3<f64>,
    /// Quaternion before renormalization.
    pub rot_raw: [f64; 4],
    pub rot: Quat,
    /// Scales before the floor is applied.
    pub scale_raw: Vector3<f64>,
    pub scale: Vector3<f64>,
    pub base_opacity: f64,
    pub color: [f64; 3],
    pub sh1: Option<[[f64; 3]; 3]>,
}

pub fn apply_offsets(g: &Gaussian, d: &OffsetTriple) -> Result<TimeGaussian> {
    let mut raw = g.rot_c.0;
    for (r, dr) in raw.iter_mut().zip(d.d_rot) {
        *r += dr;
    }
    let rot = Quat(raw).normalized()?;
    let scale_raw = g.scale_c + Vector3::from(d.d_scale);
    Ok(TimeGaussian {
        id: g.id,
        mu: g.mu_c + Vector3::from(d.d_mu),
        rot_raw: raw,
        rot,
        scale_raw,
        scale: scale_raw.map(|s| s.max(SCALE_FLOOR)),
        base_opacity: g.base_opacity,
        color: g.color,
        sh1: g.sh1,
    })
}
