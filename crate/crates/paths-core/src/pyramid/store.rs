//! Directory layout: `meta.json`, `level_<i>.ppm` (binary P6) and, for
//! synthetic slides, `truth.json`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GroundTruth, LevelImage, PyramidImage};
use crate::error::{PathsError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelMeta {
    pub width: usize,
    pub height: usize,
    pub magnification: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideMeta {
    pub slide_id: String,
    pub n: usize,
    #[serde(rename = "M")]
    pub ratio: usize,
    pub m1: f64,
    pub patch_size: usize,
    pub levels: Vec<LevelMeta>,
}

pub fn write_ppm(path: &Path, level: &LevelImage) -> Result<()> {
    let mut buf = Vec::with_capacity(level.pixels.len() + 32);
    write!(buf, "P6\n{} {}\n255\n", level.width, level.height).expect("vec write");
    buf.extend_from_slice(&level.pixels);
    fs::write(path, buf).map_err(|e| PathsError::io(path, e))
}

pub fn read_ppm(path: &Path, magnification: f64) -> Result<LevelImage> {
    let bytes = fs::read(path).map_err(|e| PathsError::io(path, e))?;
    parse_ppm(&bytes, magnification)
}

fn parse_ppm(bytes: &[u8], magnification: f64) -> Result<LevelImage> {
    let mut pos = 0usize;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(PathsError::format(pos as u64, "truncated PPM header"));
        }
        tokens.push((start, std::str::from_utf8(&bytes[start..pos]).unwrap_or("")));
    }
    if tokens[0].1 != "P6" {
        return Err(PathsError::format(0, "not a binary PPM (P6)"));
    }
    let num = |(off, t): (usize, &str)| {
        t.parse::<usize>()
            .map_err(|_| PathsError::format(off as u64, format!("bad header field `{t}`")))
    };
    let width = num(tokens[1])?;
    let height = num(tokens[2])?;
    let maxval = num(tokens[3])?;
    if maxval != 255 {
        return Err(PathsError::format(tokens[3].0 as u64, "only 8-bit PPM supported"));
    }
    // exactly one whitespace byte separates header from raster
    pos += 1;
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(PathsError::format(
            bytes.len() as u64,
            format!("raster truncated: need {need} bytes after offset {pos}"),
        ));
    }
    LevelImage::new(magnification, width, height, bytes[pos..pos + need].to_vec())
}

pub fn save_slide(dir: &Path, pyramid: &PyramidImage, truth: Option<&GroundTruth>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| PathsError::io(dir, e))?;
    let meta = SlideMeta {
        slide_id: pyramid.slide_id.clone(),
        n: pyramid.n_levels(),
        ratio: pyramid.ratio,
        m1: pyramid.levels[0].magnification,
        patch_size: pyramid.patch_size,
        levels: pyramid
            .levels
            .iter()
            .map(|l| LevelMeta {
                width: l.width,
                height: l.height,
                magnification: l.magnification,
            })
            .collect(),
    };
    let meta_path = dir.join("meta.json");
    fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?).map_err(|e| PathsError::io(&meta_path, e))?;
    for (i, level) in pyramid.levels.iter().enumerate() {
        write_ppm(&dir.join(format!("level_{i}.ppm")), level)?;
    }
    if let Some(t) = truth {
        let p = dir.join("truth.json");
        fs::write(&p, serde_json::to_vec_pretty(t)?).map_err(|e| PathsError::io(&p, e))?;
    }
    Ok(())
}

pub fn load_meta(dir: &Path) -> Result<SlideMeta> {
    let p = dir.join("meta.json");
    let text = fs::read(&p).map_err(|e| PathsError::io(&p, e))?;
    Ok(serde_json::from_slice(&text)?)
}

pub fn load_slide(dir: &Path) -> Result<(PyramidImage, Option<GroundTruth>)> {
    let meta = load_meta(dir)?;
    if meta.levels.len() != meta.n || meta.n == 0 {
        return Err(PathsError::Shape(format!(
            "meta.json declares n={} but lists {} levels",
            meta.n,
            meta.levels.len()
        )));
    }
    let mut levels = Vec::with_capacity(meta.n);
    for (i, lm) in meta.levels.iter().enumerate() {
        let l = read_ppm(&dir.join(format!("level_{i}.ppm")), lm.magnification)?;
        if (l.width, l.height) != (lm.width, lm.height) {
            return Err(PathsError::Shape(format!(
                "level {i} is {}x{}, meta says {}x{}",
                l.width, l.height, lm.width, lm.height
            )));
        }
        levels.push(l);
    }
    let pyramid = PyramidImage {
        slide_id: meta.slide_id,
        base_magnification: meta.levels[meta.n - 1].magnification,
        levels,
        patch_size: meta.patch_size,
        ratio: meta.ratio,
    };
    pyramid.validate()?;
    let tp = dir.join("truth.json");
    let truth = if tp.exists() {
        let bytes = fs::read(&tp).map_err(|e| PathsError::io(&tp, e))?;
        Some(serde_json::from_slice(&bytes)?)
    } else {
        None
    };
    Ok((pyramid, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PathsConfig;
    use crate::pyramid::{generate_synthetic_slide, SyntheticSpec};

    #[test]
    fn slide_round_trip() {
        let cfg = PathsConfig {
            n: 2,
            s: 8,
            ..PathsConfig::default()
        };
        let spec = SyntheticSpec {
            seed: 4,
            base_grid: (8, 6),
            lesion_grades: vec![0.5],
            background_tissue_fraction: 0.7,
        };
        let (p, t) = generate_synthetic_slide(&spec, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_slide(dir.path(), &p, Some(&t)).unwrap();
        let (q, tq) = load_slide(dir.path()).unwrap();
        assert_eq!(p, q);
        assert_eq!(Some(t), tq);
        let header = &fs::read(dir.path().join("level_1.ppm")).unwrap()[..12];
        assert_eq!(header, b"P6\n64 48\n255");
    }

    #[test]
    fn ppm_with_comment_and_truncation() {
        let mut bytes = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let l = parse_ppm(&bytes, 1.0).unwrap();
        assert_eq!(l.pixels, vec![1, 2, 3, 4, 5, 6]);
        bytes.pop();
        assert!(matches!(parse_ppm(&bytes, 1.0), Err(PathsError::Format { .. })));
        assert!(parse_ppm(b"P3\n1 1\n255\n", 1.0).is_err());
    }
}
