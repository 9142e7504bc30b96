use crate::deform::{NeighborGraph, OffsetTriple, OFFSET_DIM};
use crate::error::{Error, Result};
use crate::image::{ssim_with_grad, Image};

/// `(1 - λ)·L1 + λ·(1 - SSIM)` with L1 the mean absolute difference over pixels and channels.
/// Returns the loss and its gradient w.r.t. `rendered`.
pub fn recon_loss(rendered: &Image, target: &Image, lambda: f64) -> Result<(f64, Vec<[f64; 3]>)> {
    if rendered.dims() != target.dims() {
        return Err(Error::DimensionMismatch {
            a: rendered.dims(),
            b: target.dims(),
        });
    }
    let (s, ds) = if lambda > 0.0 {
        ssim_with_grad(rendered, target)?
    } else {
        (1.0, vec![[0.0; 3]; rendered.pixels.len()])
    };
    let n = (rendered.pixels.len() * 3) as f64;
    let mut l1 = 0.0;
    let mut grad = vec![[0.0; 3]; rendered.pixels.len()];
    for (i, (p, q)) in rendered.pixels.iter().zip(&target.pixels).enumerate() {
        for c in 0..3 {
            let d = p[c] - q[c];
            l1 += d.abs();
            let sign = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            grad[i][c] = (1.0 - lambda) * sign / n - lambda * ds[i][c];
        }
    }
    Ok(((1.0 - lambda) * l1 / n + lambda * (1.0 - s), grad))
}

/// `weight · mean over unique edges of ‖ΔX_a − ΔX_b‖²` and its gradient per Gaussian.
pub fn tv_loss(offsets: &[OffsetTriple], graph: &NeighborGraph, weight: f64) -> (f64, Vec<[f64; OFFSET_DIM]>) {
    tv_loss_edges(offsets, &graph.edges(), weight)
}

pub(crate) fn tv_loss_edges(
    offsets: &[OffsetTriple],
    edges: &[(usize, usize)],
    weight: f64,
) -> (f64, Vec<[f64; OFFSET_DIM]>) {
    let mut grad = vec![[0.0; OFFSET_DIM]; offsets.len()];
    if edges.is_empty() || weight == 0.0 {
        return (0.0, grad);
    }
    let scale = weight / edges.len() as f64;
    let mut sum = 0.0;
    for &(a, b) in edges {
        let (x, y) = (offsets[a].to_array(), offsets[b].to_array());
        for k in 0..OFFSET_DIM {
            let d = x[k] - y[k];
            sum += d * d;
            grad[a][k] += 2.0 * scale * d;
            grad[b][k] -= 2.0 * scale * d;
        }
    }
    (scale * sum, grad)
}
