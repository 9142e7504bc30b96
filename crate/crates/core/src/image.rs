//! Images, depth maps, binary PPM I/O and the PSNR / SSIM metrics.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize, fill: [f64; 3]) -> Image {
        Image {
            width,
            height,
            pixels: vec![fill; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn clamp(&mut self) {
        for p in &mut self.pixels {
            for c in p.iter_mut() {
                *c = c.clamp(0.0, 1.0);
            }
        }
    }

    pub fn to_rgba8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.pixels.len() * 4);
        for p in &self.pixels {
            out.extend(p.iter().map(|&c| to_u8(c)));
            out.push(255);
        }
        out
    }

    pub fn write_ppm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.pixels.iter().flat_map(|p| p.map(to_u8)).collect();
        w.write_all(&bytes)
    }

    pub fn read_ppm<R: Read>(r: R) -> std::result::Result<Image, String> {
        let mut r = BufReader::new(r);
        let mut header = Vec::new();
        // magic, width, height, maxval; '#' comments allowed between tokens
        while header.len() < 4 {
            let mut line = String::new();
            if r.read_line(&mut line).map_err(|e| e.to_string())? == 0 {
                return Err("truncated PPM header".into());
            }
            let content = line.split('#').next().unwrap_or("");
            header.extend(content.split_ascii_whitespace().map(str::to_owned));
        }
        if header[0] != "P6" {
            return Err(format!("unsupported PPM magic {}", header[0]));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|e| format!("bad PPM header value {s}: {e}"));
        let (w, h, maxval) = (parse(&header[1])?, parse(&header[2])?, parse(&header[3])?);
        if maxval != 255 || header.len() != 4 {
            return Err("only 8-bit PPM with a header ending on its own line is supported".into());
        }
        let mut bytes = vec![0u8; w * h * 3];
        r.read_exact(&mut bytes)
            .map_err(|e| format!("truncated PPM data: {e}"))?;
        let pixels = bytes
            .chunks_exact(3)
            .map(|c| [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0])
            .collect();
        Ok(Image {
            width: w,
            height: h,
            pixels,
        })
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_ppm(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load_ppm(path: &Path) -> Result<Image> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Image::read_ppm(f).map_err(|msg| Error::parse(path.display().to_string(), msg))
    }
}

fn to_u8(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Per-pixel depth; `f64::INFINITY` where nothing was rendered.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Binary layout: `DSDEPTH1\n`, u32 width, u32 height, then f64 LE values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = b"DSDEPTH1\n".to_vec();
        out.extend((self.width as u32).to_le_bytes());
        out.extend((self.height as u32).to_le_bytes());
        for v in &self.data {
            out.extend(v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<DepthMap, String> {
        let rest = bytes.strip_prefix(b"DSDEPTH1\n").ok_or("bad depth magic")?;
        if rest.len() < 8 {
            return Err("truncated depth header".into());
        }
        let w = u32::from_le_bytes(rest[0..4].try_into().unwrap()) as usize;
        let h = u32::from_le_bytes(rest[4..8].try_into().unwrap()) as usize;
        let body = &rest[8..];
        if body.len() != w * h * 8 {
            return Err("depth payload size mismatch".into());
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(DepthMap {
            width: w,
            height: h,
            data,
        })
    }
}

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch {
            a: a.dims(),
            b: b.dims(),
        });
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let n = (a.pixels.len() * 3) as f64;
    let sum: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .flat_map(|(p, q)| (0..3).map(move |c| (p[c] - q[c]).powi(2)))
        .sum();
    Ok(sum / n)
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

pub fn gaussian_window_1d() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

struct Plane<'a> {
    w: usize,
    h: usize,
    data: &'a [f64],
}

/// Valid-region separable correlation with the SSIM window.
fn filter_valid(p: &Plane<'_>, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (p.w - SSIM_WINDOW + 1, p.h - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; p.h * ow];
    for y in 0..p.h {
        let row = &p.data[y * p.w..(y + 1) * p.w];
        for x in 0..ow {
            tmp[y * ow + x] = win.iter().zip(&row[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (k, wk) in win.iter().enumerate() {
                s += wk * tmp[(y + k) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: spreads a valid-region map back to full resolution.
fn filter_adjoint(map: &[f64], w: usize, h: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..oh {
        for x in 0..ow {
            let v = map[y * ow + x];
            for (k, wk) in win.iter().enumerate() {
                tmp[(y + k) * ow + x] += wk * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for (k, wk) in win.iter().enumerate() {
                out[y * w + x + k] += wk * v;
            }
        }
    }
    out
}

/// Mean SSIM over all valid 11×11 windows and the three channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim_impl(a, b, false).map(|(v, _)| v)
}

/// SSIM together with its gradient w.r.t. every channel value of `a`.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Vec<[f64; 3]>)> {
    ssim_impl(a, b, true).map(|(v, g)| (v, g.unwrap()))
}

fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Vec<[f64; 3]>>)> {
    check_dims(a, b)?;
    let (w, h) = a.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::ImageTooSmall { w, h, win: SSIM_WINDOW });
    }
    let win = gaussian_window_1d();
    let n_pos = (w - SSIM_WINDOW + 1) * (h - SSIM_WINDOW + 1);
    let norm = 1.0 / (3 * n_pos) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![[0.0; 3]; w * h]);

    for c in 0..3 {
        let x: Vec<f64> = a.pixels.iter().map(|p| p[c]).collect();
        let y: Vec<f64> = b.pixels.iter().map(|p| p[c]).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let f = |d: &[f64]| filter_valid(&Plane { w, h, data: d }, &win);
        let (mx, my, exx, eyy, exy) = (f(&x), f(&y), f(&xx), f(&yy), f(&xy));

        let mut d_m = vec![0.0; n_pos];
        let mut d_e = vec![0.0; n_pos];
        let mut d_c = vec![0.0; n_pos];
        for p in 0..n_pos {
            let (m, n) = (mx[p], my[p]);
            let sxx = exx[p] - m * m;
            let syy = eyy[p] - n * n;
            let sxy = exy[p] - m * n;
            let a1 = 2.0 * m * n + C1;
            let a2 = 2.0 * sxy + C2;
            let b1 = m * m + n * n + C1;
            let b2 = sxx + syy + C2;
            let s = (a1 * a2) / (b1 * b2);
            total += s;
            if want_grad {
                d_m[p] = norm * s * (2.0 * n / a1 - 2.0 * n / a2 - 2.0 * m / b1 + 2.0 * m / b2);
                d_e[p] = -norm * s / b2;
                d_c[p] = norm * s * 2.0 / a2;
            }
        }
        if let Some(g) = grad.as_mut() {
            let gm = filter_adjoint(&d_m, w, h, &win);
            let ge = filter_adjoint(&d_e, w, h, &win);
            let gc = filter_adjoint(&d_c, w, h, &win);
            for q in 0..w * h {
                g[q][c] = gm[q] + 2.0 * x[q] * ge[q] + y[q] * gc[q];
            }
        }
    }
    Ok((total * norm, grad))
}
