//! `DSPLAT1` line-oriented scene format.
//!
//! ```text
//! DSPLAT1
//! g <id> <mu x y z> <quat w x y z> <scale x y z> <opacity> <rgb> [sh1 <9>] [feat <16>]
//! ```
//!
//! Reals are written in Rust's shortest round-trip form, so a write/read cycle is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::gaussian::{Gaussian, Quat, FEATURE_DIM};

pub const SCENE_MAGIC: &str = "DSPLAT1";

pub fn write_scene_string(gaussians: &[Gaussian]) -> String {
    let mut out = String::new();
    out.push_str(SCENE_MAGIC);
    out.push('\n');
    for g in gaussians {
        write!(out, "g {}", g.id).unwrap();
        let vals = g
            .mu_c
            .iter()
            .chain(g.rot_c.0.iter())
            .chain(g.scale_c.iter())
            .chain(std::iter::once(&g.base_opacity))
            .chain(g.color.iter());
        for v in vals {
            write!(out, " {v}").unwrap();
        }
        if let Some(sh) = &g.sh1 {
            out.push_str(" sh1");
            for v in sh.iter().flatten() {
                write!(out, " {v}").unwrap();
            }
        }
        if let Some(f) = &g.feature {
            out.push_str(" feat");
            for v in f {
                write!(out, " {v}").unwrap();
            }
        }
        out.push('\n');
    }
    out
}

pub fn read_scene_str(text: &str) -> Result<Vec<Gaussian>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(l) if l.trim() == SCENE_MAGIC => {}
        other => {
            return Err(Error::parse(
                "scene",
                format!("expected header {SCENE_MAGIC}, got {other:?}"),
            ))
        }
    }
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(parse_record(line).map_err(|msg| Error::parse("scene", format!("line {}: {msg}", lineno + 2)))?);
    }
    Ok(out)
}

fn parse_record(line: &str) -> std::result::Result<Gaussian, String> {
    let mut tok = line.split_ascii_whitespace();
    if tok.next() != Some("g") {
        return Err("record must start with 'g'".into());
    }
    let id: u64 = tok
        .next()
        .ok_or("missing id")?
        .parse()
        .map_err(|e| format!("bad id: {e}"))?;
    let mut num = |what: &str| -> std::result::Result<f64, String> {
        tok.next()
            .ok_or_else(|| format!("missing {what}"))?
            .parse::<f64>()
            .map_err(|e| format!("bad {what}: {e}"))
    };
    let mut base = [0.0; 14];
    for (i, v) in base.iter_mut().enumerate() {
        *v = num(&format!("field {i}"))?;
    }
    let mut g = Gaussian {
        id,
        mu_c: Vector3::new(base[0], base[1], base[2]),
        rot_c: Quat([base[3], base[4], base[5], base[6]]),
        scale_c: Vector3::new(base[7], base[8], base[9]),
        base_opacity: base[10],
        color: [base[11], base[12], base[13]],
        sh1: None,
        feature: None,
    };
    let rest: Vec<&str> = tok.collect();
    let mut i = 0;
    let take = |i: &mut usize, n: usize, what: &str| -> std::result::Result<Vec<f64>, String> {
        let slice = rest.get(*i..*i + n).ok_or_else(|| format!("{what} needs {n} values"))?;
        *i += n;
        slice
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| format!("bad {what} value: {e}")))
            .collect()
    };
    while i < rest.len() {
        let tag = rest[i];
        i += 1;
        match tag {
            "sh1" => {
                let v = take(&mut i, 9, "sh1")?;
                g.sh1 = Some([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]]);
            }
            "feat" => {
                let v = take(&mut i, FEATURE_DIM, "feat")?;
                let mut f = [0.0; FEATURE_DIM];
                f.copy_from_slice(&v);
                g.feature = Some(f);
            }
            other => return Err(format!("unknown section '{other}'")),
        }
    }
    Ok(g)
}

pub fn save_scene(path: &Path, gaussians: &[Gaussian]) -> Result<()> {
    std::fs::write(path, write_scene_string(gaussians)).map_err(|e| Error::io(path, e))
}

pub fn load_scene(path: &Path) -> Result<Vec<Gaussian>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_scene_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn finite() -> impl Strategy<Value = f64> {
        prop_oneof![
            any::<f64>().prop_filter("finite", |v| v.is_finite()),
            Just(-0.0),
            Just(1e-300)
        ]
    }

    prop_compose! {
        fn gaussian()(id in any::<u64>(), v in proptest::collection::vec(finite(), 14),
                      sh in proptest::option::of(proptest::collection::vec(finite(), 9)),
                      feat in proptest::option::of(proptest::collection::vec(finite(), FEATURE_DIM))) -> Gaussian {
            Gaussian {
                id,
                mu_c: Vector3::new(v[0], v[1], v[2]),
                rot_c: Quat([v[3], v[4], v[5], v[6]]),
                scale_c: Vector3::new(v[7], v[8], v[9]),
                base_opacity: v[10],
                color: [v[11], v[12], v[13]],
                sh1: sh.map(|s| [[s[0], s[1], s[2]], [s[3], s[4], s[5]], [s[6], s[7], s[8]]]),
                feature: feat.map(|f| { let mut a = [0.0; FEATURE_DIM]; a.copy_from_slice(&f); a }),
            }
        }
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(scene in proptest::collection::vec(gaussian(), 0..6)) {
            let text = write_scene_string(&scene);
            let back = read_scene_str(&text).unwrap();
            prop_assert_eq!(back.len(), scene.len());
            for (a, b) in scene.iter().zip(&back) {
                let bits = |g: &Gaussian| {
                    let mut v: Vec<u64> = g.mu_c.iter().chain(g.rot_c.0.iter()).chain(g.scale_c.iter())
                        .chain([g.base_opacity].iter()).chain(g.color.iter()).map(|x| x.to_bits()).collect();
                    if let Some(s) = &g.sh1 { v.extend(s.iter().flatten().map(|x| x.to_bits())); }
                    if let Some(f) = &g.feature { v.extend(f.iter().map(|x| x.to_bits())); }
                    v
                };
                prop_assert_eq!(a.id, b.id);
                prop_assert_eq!(a.sh1.is_some(), b.sh1.is_some());
                prop_assert_eq!(a.feature.is_some(), b.feature.is_some());
                prop_assert_eq!(bits(a), bits(b));
            }
        }
    }

    #[test]
    fn rejects_bad_header_and_truncated_records() {
        assert!(read_scene_str("DSPLAT2\n").is_err());
        assert!(read_scene_str("DSPLAT1\ng 1 0 0 0\n").is_err());
        assert!(read_scene_str("DSPLAT1\ng 1 0 0 0 1 0 0 0 1 1 1 1 0.5 0.5 0.5 feat 1 2\n").is_err());
        let ok = read_scene_str("DSPLAT1\n# comment\ng 4 0 0 0 1 0 0 0 1 1 1 1 0.5 0.5 0.5\n").unwrap();
        assert_eq!(ok[0].id, 4);
    }
}
