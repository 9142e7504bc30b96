//! Front-to-back alpha compositing of screen-space splats with an analytic backward pass.

use crate::error::{Error, Result};
use crate::image::{DepthMap, Image};

/// Per-splat alpha is clamped to this value.
pub const ALPHA_MAX: f64 = 0.99;
/// Contributions below this alpha are skipped.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Accumulated alpha below which a pixel's depth is reported as infinite.
pub const DEPTH_ALPHA_MIN: f64 = 1e-4;

/// A projected splat ready for compositing. `cov` holds the symmetric 2×2 matrix as `(a, b, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat2D {
    pub id: u64,
    pub mean: [f64; 2],
    pub cov: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
    pub depth: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SplatGrad {
    pub mean: [f64; 2],
    /// Gradient w.r.t. `(a, b, c)` of the covariance.
    pub cov: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
}

/// One splat's contribution at one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contribution {
    /// Index into the splat slice passed to [`render`].
    pub splat: u32,
    pub alpha: f64,
    pub t_before: f64,
    /// Gaussian falloff `exp(-½ dᵀ Σ⁻¹ d)` at the pixel.
    falloff: f64,
    clamped: bool,
}

/// Per-pixel contribution lists retained for the backward pass and importance accumulation.
#[derive(Debug, Clone)]
pub struct Trace {
    offsets: Vec<usize>,
    entries: Vec<Contribution>,
    background: [f64; 3],
    n_splats: usize,
}

impl Trace {
    pub fn pixel(&self, idx: usize) -> &[Contribution] {
        &self.entries[self.offsets[idx]..self.offsets[idx + 1]]
    }

    pub fn all(&self) -> &[Contribution] {
        &self.entries
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub image: Image,
    pub depth: DepthMap,
    pub transmittance: Vec<f64>,
    pub trace: Option<Trace>,
}

struct Prepared {
    index: usize,
    conic: [f64; 3],
    x0: usize,
    x1: usize,
}

fn conic(cov: &[f64; 3]) -> Option<[f64; 3]> {
    let [a, b, c] = *cov;
    let det = a * c - b * b;
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    Some([c / det, -b / det, a / det])
}

struct RowOut {
    color: Vec<[f64; 3]>,
    depth: Vec<f64>,
    trans: Vec<f64>,
    offsets: Vec<usize>,
    entries: Vec<Contribution>,
}

/// Renders splats over `background`. Splats are composited in ascending depth order with ties
/// broken by id. When `retain` is set the per-pixel contribution lists are kept in the output.
pub fn render(splats: &[Splat2D], width: usize, height: usize, background: [f64; 3], retain: bool) -> RenderOutput {
    let mut order: Vec<usize> = (0..splats.len())
        .filter(|&i| splats[i].opacity >= ALPHA_MIN && splats[i].depth.is_finite())
        .collect();
    order.sort_by(|&i, &j| {
        splats[i]
            .depth
            .total_cmp(&splats[j].depth)
            .then(splats[i].id.cmp(&splats[j].id))
    });

    let mut rows: Vec<Vec<Prepared>> = (0..height).map(|_| Vec::new()).collect();
    for &i in &order {
        let s = &splats[i];
        let Some(con) = conic(&s.cov) else { continue };
        let [a, b, c] = s.cov;
        let lambda_max = 0.5 * (a + c) + (0.25 * (a - c) * (a - c) + b * b).sqrt();
        // beyond this Mahalanobis radius the alpha is below ALPHA_MIN
        let m2 = 2.0 * (s.opacity / ALPHA_MIN).ln();
        let r = (m2 * lambda_max).sqrt() + 1.0;
        let (mx, my) = (s.mean[0], s.mean[1]);
        if mx + r < 0.0 || my + r < 0.0 || mx - r > (width - 1) as f64 || my - r > (height - 1) as f64 {
            continue;
        }
        let x0 = (mx - r).ceil().max(0.0) as usize;
        let x1 = ((mx + r).floor() as usize).min(width - 1);
        let y0 = (my - r).ceil().max(0.0) as usize;
        let y1 = ((my + r).floor() as usize).min(height - 1);
        for row in rows.iter_mut().take(y1 + 1).skip(y0) {
            row.push(Prepared {
                index: i,
                conic: con,
                x0,
                x1,
            });
        }
    }

    let render_row = |y: usize| -> RowOut {
        let mut out = RowOut {
            color: Vec::with_capacity(width),
            depth: Vec::with_capacity(width),
            trans: Vec::with_capacity(width),
            offsets: Vec::with_capacity(width),
            entries: Vec::new(),
        };
        for x in 0..width {
            out.offsets.push(out.entries.len());
            let (px, py) = (x as f64, y as f64);
            let mut t = 1.0;
            let mut col = [0.0; 3];
            let mut zsum = 0.0;
            for p in &rows[y] {
                if x < p.x0 || x > p.x1 {
                    continue;
                }
                let s = &splats[p.index];
                let dx = px - s.mean[0];
                let dy = py - s.mean[1];
                let [ca, cb, cc] = p.conic;
                let power = -0.5 * (ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy);
                let g = power.exp();
                let raw = s.opacity * g;
                let clamped = raw > ALPHA_MAX;
                let alpha = raw.min(ALPHA_MAX);
                if alpha < ALPHA_MIN {
                    continue;
                }
                let w = alpha * t;
                for k in 0..3 {
                    col[k] += s.color[k] * w;
                }
                zsum += s.depth * w;
                if retain {
                    out.entries.push(Contribution {
                        splat: p.index as u32,
                        alpha,
                        t_before: t,
                        falloff: g,
                        clamped,
                    });
                }
                t *= 1.0 - alpha;
            }
            let acc = 1.0 - t;
            for k in 0..3 {
                col[k] = (col[k] + t * background[k]).clamp(0.0, 1.0);
            }
            out.color.push(col);
            out.depth.push(if acc > DEPTH_ALPHA_MIN {
                zsum / acc
            } else {
                f64::INFINITY
            });
            out.trans.push(t);
        }
        out
    };

    let row_outs: Vec<RowOut> = map_rows(height, render_row);

    let mut image = Image::new(width, height, [0.0; 3]);
    let mut depth = Vec::with_capacity(width * height);
    let mut transmittance = Vec::with_capacity(width * height);
    let mut offsets = Vec::with_capacity(width * height + 1);
    let mut entries = Vec::new();
    image.pixels.clear();
    for r in row_outs {
        image.pixels.extend(r.color);
        depth.extend(r.depth);
        transmittance.extend(r.trans);
        let base = entries.len();
        offsets.extend(r.offsets.iter().map(|o| o + base));
        entries.extend(r.entries);
    }
    offsets.push(entries.len());

    RenderOutput {
        image,
        depth: DepthMap {
            width,
            height,
            data: depth,
        },
        transmittance,
        trace: retain.then_some(Trace {
            offsets,
            entries,
            background,
            n_splats: splats.len(),
        }),
    }
}

#[cfg(feature = "parallel")]
fn map_rows<T: Send>(height: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    use rayon::prelude::*;
    (0..height).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_rows<T>(height: usize, f: impl Fn(usize) -> T) -> Vec<T> {
    (0..height).map(f).collect()
}

/// Gradients of a scalar loss w.r.t. every splat given `d_image`, the loss gradient per pixel
/// color. Row gradients are reduced in row order so the result is independent of threading.
pub fn render_backward(out: &RenderOutput, splats: &[Splat2D], d_image: &[[f64; 3]]) -> Result<Vec<SplatGrad>> {
    let trace = out.trace.as_ref().ok_or(Error::NoForwardPass)?;
    let (w, h) = (out.image.width, out.image.height);
    if d_image.len() != w * h || trace.n_splats != splats.len() {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient has {} pixels for a {}x{} render of {} splats",
            d_image.len(),
            w,
            h,
            splats.len()
        )));
    }
    let row_grad = |y: usize| -> Vec<(u32, SplatGrad)> {
        let mut local: Vec<(u32, SplatGrad)> = Vec::new();
        for x in 0..w {
            let idx = y * w + x;
            let dc = d_image[idx];
            if dc == [0.0; 3] {
                continue;
            }
            let contribs = trace.pixel(idx);
            let mut behind = trace.background;
            for cb in contribs.iter().rev() {
                let s = &splats[cb.splat as usize];
                let mut g = SplatGrad::default();
                let wgt = cb.alpha * cb.t_before;
                let mut d_alpha = 0.0;
                for k in 0..3 {
                    g.color[k] = wgt * dc[k];
                    d_alpha += cb.t_before * (s.color[k] - behind[k]) * dc[k];
                    behind[k] = cb.alpha * s.color[k] + (1.0 - cb.alpha) * behind[k];
                }
                if !cb.clamped {
                    g.opacity = cb.falloff * d_alpha;
                    let d_g = s.opacity * d_alpha;
                    let con = conic(&s.cov).unwrap();
                    let dx = x as f64 - s.mean[0];
                    let dy = y as f64 - s.mean[1];
                    // Q d with Q the conic
                    let qx = con[0] * dx + con[1] * dy;
                    let qy = con[1] * dx + con[2] * dy;
                    let gval = cb.falloff * d_g;
                    g.mean = [gval * qx, gval * qy];
                    // dG/dΣ' = ½ G (Qd)(Qd)ᵀ ; (a, b, c) with b appearing twice
                    g.cov = [0.5 * gval * qx * qx, gval * qx * qy, 0.5 * gval * qy * qy];
                }
                local.push((cb.splat, g));
            }
        }
        local
    };
    let rows = map_rows(h, row_grad);
    let mut grads = vec![SplatGrad::default(); splats.len()];
    for row in rows {
        for (i, g) in row {
            let t = &mut grads[i as usize];
            for k in 0..2 {
                t.mean[k] += g.mean[k];
            }
            for k in 0..3 {
                t.cov[k] += g.cov[k];
                t.color[k] += g.color[k];
            }
            t.opacity += g.opacity;
        }
    }
    for g in &grads {
        let vals = g.mean.iter().chain(&g.cov).chain(&g.color).chain([&g.opacity]);
        if vals.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("render_backward".into()));
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn splat(id: u64, mean: [f64; 2], var: f64, opacity: f64, color: [f64; 3], depth: f64) -> Splat2D {
        Splat2D {
            id,
            mean,
            cov: [var, 0.0, var],
            opacity,
            color,
            depth,
        }
    }

    #[test]
    fn empty_scene_is_background() {
        let out = render(&[], 8, 6, [0.0; 3], false);
        assert!(out.image.pixels.iter().all(|p| *p == [0.0; 3]));
        assert!(out.depth.data.iter().all(|d| d.is_infinite()));
        assert!(out.transmittance.iter().all(|t| *t == 1.0));
    }

    #[test]
    fn single_splat_center_is_clamped_alpha_times_color() {
        let s = splat(0, [4.0, 3.0], 2.0, 1.0, [1.0, 0.0, 0.0], 1.0);
        let out = render(&[s], 8, 6, [0.0; 3], false);
        let p = out.image.get(4, 3);
        // C = c α T with α = min(1 · e^0, 0.99), T = 1
        assert!((p[0] - 0.99).abs() < 1e-12);
        assert_eq!(p[1], 0.0);
        assert_eq!(out.depth.get(4, 3), 1.0);
    }

    #[test]
    fn front_splat_wins_and_swapping_depths_swaps_colors() {
        let red = splat(0, [4.0, 4.0], 4.0, 1.0, [1.0, 0.0, 0.0], 1.0);
        let green = splat(1, [4.0, 4.0], 4.0, 1.0, [0.0, 1.0, 0.0], 2.0);
        let out = render(&[red.clone(), green.clone()], 9, 9, [0.0; 3], false);
        let p = out.image.get(4, 4);
        // two-term oracle: 0.99·red + 0.01·0.99·green
        assert!((p[0] - 0.99).abs() < 1e-6);
        assert!((p[1] - 0.01 * 0.99).abs() < 1e-6);
        let (mut r2, mut g2) = (red, green);
        r2.depth = 2.0;
        g2.depth = 1.0;
        let p = render(&[r2, g2], 9, 9, [0.0; 3], false).image.get(4, 4);
        assert!((p[1] - 0.99).abs() < 1e-6);
        assert!((p[0] - 0.0099).abs() < 1e-6);
    }

    #[test]
    fn alpha_plus_transmittance_is_one_and_order_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let splats: Vec<Splat2D> = (0..12)
            .map(|i| {
                splat(
                    i,
                    [rng.gen_range(0.0..16.0), rng.gen_range(0.0..16.0)],
                    rng.gen_range(0.5..6.0),
                    rng.gen_range(0.1..1.0),
                    [rng.gen(), rng.gen(), rng.gen()],
                    rng.gen_range(1.0..5.0),
                )
            })
            .collect();
        let out = render(&splats, 16, 16, [0.2, 0.3, 0.4], true);
        let trace = out.trace.as_ref().unwrap();
        for i in 0..256 {
            let acc: f64 = trace.pixel(i).iter().map(|c| c.alpha * c.t_before).sum();
            assert!((acc + out.transmittance[i] - 1.0).abs() < 1e-6);
        }
        let mut shuffled = splats.clone();
        shuffled.reverse();
        let again = render(&shuffled, 16, 16, [0.2, 0.3, 0.4], false);
        assert_eq!(out.image, again.image);

        // non-overlapping splats: depth order does not matter
        let a = splat(0, [2.0, 2.0], 0.5, 0.9, [1.0, 0.0, 0.0], 1.0);
        let b = splat(1, [13.0, 13.0], 0.5, 0.9, [0.0, 0.0, 1.0], 2.0);
        let (mut a2, mut b2) = (a.clone(), b.clone());
        a2.depth = 2.0;
        b2.depth = 1.0;
        let x = render(&[a, b], 16, 16, [0.0; 3], false).image;
        let y = render(&[a2, b2], 16, 16, [0.0; 3], false).image;
        assert_eq!(x, y);
    }

    #[test]
    fn backward_requires_trace() {
        let out = render(&[], 4, 4, [0.0; 3], false);
        assert!(matches!(
            render_backward(&out, &[], &vec![[0.0; 3]; 16]),
            Err(Error::NoForwardPass)
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let s = splat(0, [4.0, 3.0], 2.0, 0.7, [1.0, 0.5, 0.0], 1.0);
        let out = render(std::slice::from_ref(&s), 8, 6, [0.0; 3], true);
        let g = render_backward(&out, &[s], &vec![[0.0; 3]; 48]).unwrap();
        assert_eq!(g[0], SplatGrad::default());
    }

    #[test]
    fn single_splat_opacity_gradient_is_falloff_times_color() {
        let s = splat(0, [4.2, 3.1], 2.0, 0.6, [0.8, 0.5, 0.0], 1.0);
        let out = render(std::slice::from_ref(&s), 8, 6, [0.0; 3], true);
        let mut up = vec![[0.0; 3]; 48];
        up[3 * 8 + 4] = [1.0, 0.0, 0.0];
        let g = render_backward(&out, std::slice::from_ref(&s), &up).unwrap();
        let (dx, dy) = (4.0 - 4.2, 3.0 - 3.1);
        let falloff = (-0.5 * (dx * dx + dy * dy) / 2.0f64).exp();
        assert!((g[0].opacity - falloff * 0.8).abs() < 1e-12);
        let f = |op: f64| {
            let mut t = s.clone();
            t.opacity = op;
            render(&[t], 8, 6, [0.0; 3], false).image.get(4, 3)[0]
        };
        let fd = (f(0.6 + 1e-4) - f(0.6 - 1e-4)) / 2e-4;
        assert!((fd - g[0].opacity).abs() / fd.abs() < 1e-6);
    }

    #[test]
    fn occluded_splat_gets_near_zero_gradient() {
        let front = splat(0, [4.0, 4.0], 5000.0, 1.0, [0.0, 0.0, 1.0], 1.0);
        let back = splat(1, [4.0, 4.0], 2.0, 0.8, [1.0, 0.0, 0.0], 2.0);
        let splats = vec![front, back];
        let out = render(&splats, 9, 9, [0.0; 3], true);
        let up = vec![[1.0, 1.0, 1.0]; 81];
        let g = render_backward(&out, &splats, &up).unwrap();
        let unoccluded = render(&splats[1..], 9, 9, [0.0; 3], true);
        let g2 = render_backward(&unoccluded, &splats[1..], &up).unwrap();
        assert!(g[1].opacity.abs() <= 0.0101 * g2[0].opacity.abs());
    }
}
