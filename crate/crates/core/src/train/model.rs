use std::sync::Arc;

use nalgebra::Vector3;

use crate::autodiff::{Graph, MlpParams, MlpVars, Tensor, Var};
use crate::deform::{apply_offsets, Encoding, MotionBlend, NeighborGraph, OffsetTriple, TimeGaussian, OFFSET_DIM};
use crate::error::{Error, Result};
use crate::gaussian::{Gaussian, FEATURE_DIM};
use crate::separation::{Label, Partition};
use crate::splat::SplatSettings;

/// Networks and graphs that exist once the scene has been split.
#[derive(Debug, Clone)]
pub struct DynamicBranch {
    /// Aligned with `Model::gaussians`.
    pub partition: Partition,
    pub blend: MotionBlend,
    pub refiner: MlpParams,
    pub static_idx: Vec<usize>,
    pub dynamic_idx: Vec<usize>,
    /// kNN over dynamic Gaussians, in `dynamic_idx` order.
    pub dynamic_graph: NeighborGraph,
    /// kNN over static Gaussians, in `static_idx` order.
    pub static_graph: NeighborGraph,
}

impl DynamicBranch {
    pub fn new(
        gaussians: &[Gaussian],
        partition: Partition,
        blend: MotionBlend,
        refiner: MlpParams,
        k: usize,
    ) -> DynamicBranch {
        let mut b = DynamicBranch {
            partition,
            blend,
            refiner,
            static_idx: Vec::new(),
            dynamic_idx: Vec::new(),
            dynamic_graph: NeighborGraph::build(&[], k),
            static_graph: NeighborGraph::build(&[], k),
        };
        b.rebuild(gaussians, k);
        b
    }

    pub fn rebuild(&mut self, gaussians: &[Gaussian], k: usize) {
        self.static_idx.clear();
        self.dynamic_idx.clear();
        for (i, l) in self.partition.labels.iter().enumerate() {
            match l {
                Label::Static => self.static_idx.push(i),
                Label::Dynamic => self.dynamic_idx.push(i),
            }
        }
        let pos = |idx: &[usize]| idx.iter().map(|&i| gaussians[i].mu_c).collect::<Vec<_>>();
        self.dynamic_graph = NeighborGraph::build(&pos(&self.dynamic_idx), k);
        self.static_graph = NeighborGraph::build(&pos(&self.static_idx), k);
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub gaussians: Vec<Gaussian>,
    pub encoding: Encoding,
    pub deform: MlpParams,
    pub dynamic: Option<DynamicBranch>,
    pub settings: SplatSettings,
    pub k: usize,
    /// kNN over every Gaussian, used for smoothness before the split.
    pub full_graph: NeighborGraph,
}

/// One forward pass of the deformation networks at a fixed time, kept for the reverse sweep.
pub struct DeformTape {
    graph: Graph,
    deform: MlpVars,
    /// Gaussian rows handled by the deformation net and its output.
    deform_rows: Option<(Vec<usize>, Var)>,
    dynamic: Option<DynamicTape>,
    pub offsets: Vec<OffsetTriple>,
}

struct DynamicTape {
    rows: Vec<usize>,
    modes: Vec<MlpVars>,
    betas: Var,
    refiner: MlpVars,
    features: Var,
    out: Var,
    coarse: Var,
}

/// Gradients of a scalar w.r.t. every network parameter, in `MlpParams::tensors` order.
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub deform: Vec<Tensor>,
    pub modes: Vec<Vec<Tensor>>,
    pub betas: Option<Tensor>,
    pub refiner: Vec<Tensor>,
    /// Feature gradients for the rows in `DynamicBranch::dynamic_idx`.
    pub features: Option<Tensor>,
}

fn batch_of(model: &Model, rows: &[usize], t: f64, mode_input: bool) -> Tensor {
    let gs: Vec<&Gaussian> = rows.iter().map(|&i| &model.gaussians[i]).collect();
    if mode_input {
        model.encoding.mode_batch(&gs, t)
    } else {
        model.encoding.deform_batch(&gs, t)
    }
}

impl Model {
    pub fn new(gaussians: Vec<Gaussian>, deform: MlpParams, settings: SplatSettings, k: usize) -> Model {
        let encoding = Encoding::fit(&gaussians.iter().map(|g| g.mu_c).collect::<Vec<_>>());
        let full_graph = NeighborGraph::build(&gaussians.iter().map(|g| g.mu_c).collect::<Vec<_>>(), k);
        Model {
            gaussians,
            encoding,
            deform,
            dynamic: None,
            settings,
            k,
            full_graph,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn n_dynamic(&self) -> usize {
        self.dynamic.as_ref().map_or(0, |d| d.dynamic_idx.len())
    }

    pub fn rebuild_graphs(&mut self) {
        let pos: Vec<Vector3<f64>> = self.gaussians.iter().map(|g| g.mu_c).collect();
        self.full_graph = NeighborGraph::build(&pos, self.k);
        if let Some(d) = &mut self.dynamic {
            d.rebuild(&self.gaussians, self.k);
        }
    }

    /// Keeps only the listed Gaussian rows everywhere.
    pub fn select_rows(&mut self, keep: &[usize]) {
        self.gaussians = keep.iter().map(|&i| self.gaussians[i].clone()).collect();
        if let Some(d) = &mut self.dynamic {
            d.partition = d.partition.select(keep);
        }
        self.rebuild_graphs();
    }

    pub fn tape(&self, t: f64) -> Result<DeformTape> {
        let mut g = Graph::new();
        let deform = self.deform.register(&mut g);
        let n = self.gaussians.len();
        let mut offsets = vec![OffsetTriple::ZERO; n];
        let deform_rows: Vec<usize> = match &self.dynamic {
            Some(d) => d.static_idx.clone(),
            None => (0..n).collect(),
        };
        let deform_out = if deform_rows.is_empty() {
            None
        } else {
            let x = g.constant(batch_of(self, &deform_rows, t, false));
            let y = deform.forward(&mut g, x)?;
            for (r, &i) in deform_rows.iter().enumerate() {
                offsets[i] = OffsetTriple::from_slice(g.value(y).row(r));
            }
            Some((deform_rows, y))
        };
        let dynamic = match &self.dynamic {
            Some(d) if !d.dynamic_idx.is_empty() => {
                let rows = d.dynamic_idx.clone();
                let x = g.constant(batch_of(self, &rows, t, true));
                let betas = g.param(Tensor::vector(d.blend.betas.clone()));
                let w = g.softmax(betas);
                let mut modes = Vec::with_capacity(d.blend.modes.len());
                let mut acc: Option<Var> = None;
                for (m, net) in d.blend.modes.iter().enumerate() {
                    let vars = net.register(&mut g);
                    let y = vars.forward(&mut g, x)?;
                    let wm = g.index(w, m);
                    let ym = g.mul(y, wm)?;
                    acc = Some(match acc {
                        Some(a) => g.add(a, ym)?,
                        None => ym,
                    });
                    modes.push(vars);
                }
                let raw = acc.ok_or_else(|| Error::InvalidInput("motion blend without modes".into()))?;
                let coarse = g.row_mean(raw, Arc::clone(&d.dynamic_graph.lists))?;
                let mut fdata = Vec::with_capacity(rows.len() * FEATURE_DIM);
                for &i in &rows {
                    let f = self.gaussians[i].feature.ok_or(Error::MissingFeature)?;
                    fdata.extend_from_slice(&f);
                }
                let features = g.param(Tensor::matrix(rows.len(), FEATURE_DIM, fdata)?);
                let inp = g.concat(&[coarse, features])?;
                let refiner = d.refiner.register(&mut g);
                let fine = refiner.forward(&mut g, inp)?;
                let out = g.add(coarse, fine)?;
                for (r, &i) in rows.iter().enumerate() {
                    offsets[i] = OffsetTriple::from_slice(g.value(out).row(r));
                }
                Some(DynamicTape {
                    rows,
                    modes,
                    betas,
                    refiner,
                    features,
                    out,
                    coarse,
                })
            }
            _ => None,
        };
        Ok(DeformTape {
            graph: g,
            deform,
            deform_rows: deform_out,
            dynamic,
            offsets,
        })
    }

    pub fn offsets_at(&self, t: f64) -> Result<Vec<OffsetTriple>> {
        Ok(self.tape(t)?.offsets)
    }

    pub fn apply(&self, offsets: &[OffsetTriple]) -> Result<Vec<TimeGaussian>> {
        self.gaussians
            .iter()
            .zip(offsets)
            .map(|(g, d)| apply_offsets(g, d))
            .collect()
    }

    pub fn gaussians_at(&self, t: f64) -> Result<Vec<TimeGaussian>> {
        self.apply(&self.offsets_at(t)?)
    }

    /// Position offsets `trajectories[g][f]` over the given times.
    pub fn trajectories(&self, times: &[f64]) -> Result<Vec<Vec<Vector3<f64>>>> {
        let per_time = times.iter().map(|&t| self.offsets_at(t)).collect::<Result<Vec<_>>>()?;
        Ok((0..self.gaussians.len())
            .map(|g| per_time.iter().map(|o| Vector3::from(o[g].d_mu)).collect())
            .collect())
    }

    /// Coarse-only offsets, i.e. the dynamic rows without the refiner residual.
    pub fn coarse_offsets_at(&self, t: f64) -> Result<Vec<OffsetTriple>> {
        let tape = self.tape(t)?;
        let mut out = tape.offsets.clone();
        if let Some(d) = &tape.dynamic {
            for (r, &i) in d.rows.iter().enumerate() {
                out[i] = OffsetTriple::from_slice(tape.graph.value(d.coarse).row(r));
            }
        }
        Ok(out)
    }
}

impl DeformTape {
    /// Backpropagates `Σ_g ⟨offsets_g, upstream_g⟩` into every network parameter.
    pub fn backward(mut self, upstream: &[[f64; OFFSET_DIM]]) -> Result<NetGrads> {
        let g = &mut self.graph;
        let mut total: Option<Var> = None;
        let mut contract = |g: &mut Graph, rows: &[usize], out: Var| -> Result<()> {
            let data = rows.iter().flat_map(|&i| upstream[i]).collect();
            let up = g.constant(Tensor::matrix(rows.len(), OFFSET_DIM, data)?);
            let prod = g.mul(out, up)?;
            let s = g.sum(prod);
            total = Some(match total {
                Some(t) => g.add(t, s)?,
                None => s,
            });
            Ok(())
        };
        if let Some((rows, out)) = &self.deform_rows {
            contract(g, rows, *out)?;
        }
        if let Some(d) = &self.dynamic {
            contract(g, &d.rows, d.out)?;
        }
        let grads = match total {
            Some(t) => Some(g.backward(t)?),
            None => None,
        };
        let deform = match &grads {
            Some(gr) => self.deform.grads(gr),
            None => Vec::new(),
        };
        let (modes, betas, refiner, features) = match (&self.dynamic, &grads) {
            (Some(d), Some(gr)) => (
                d.modes.iter().map(|m| m.grads(gr)).collect(),
                Some(gr.get(d.betas)),
                d.refiner.grads(gr),
                Some(gr.get(d.features)),
            ),
            _ => (Vec::new(), None, Vec::new(), None),
        };
        Ok(NetGrads {
            deform,
            modes,
            betas,
            refiner,
            features,
        })
    }
}
