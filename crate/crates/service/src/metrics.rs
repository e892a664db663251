//! Image-quality comparison of two directories of PNGs.

use std::fs;
use std::path::{Path, PathBuf};

use dmiso_core::loss::{psnr, ssim};
use serde::Serialize;

use crate::dataset::{read_image, DatasetError};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl MetricTable {
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<32} {:>10} {:>8}\n", "image", "psnr", "ssim");
        for r in &self.rows {
            s.push_str(&format!("{:<32} {:>10.3} {:>8.4}\n", r.name, r.psnr, r.ssim));
        }
        s.push_str(&format!("{:<32} {:>10.3} {:>8.4}\n", "mean", self.mean_psnr, self.mean_ssim));
        s
    }
}

fn pngs(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
                out.push(path.strip_prefix(dir).expect("under dir").to_path_buf());
            }
        }
    }
    out.sort();
    Ok(out)
}

/// PSNR and SSIM of every PNG in `a` against the file at the same relative path in `b`.
pub fn compare_dirs(a: &Path, b: &Path) -> Result<MetricTable, DatasetError> {
    let mut rows = Vec::new();
    for rel in pngs(a)? {
        let x = read_image(&a.join(&rel), [0.0; 3])?;
        let y = read_image(&b.join(&rel), [0.0; 3])?;
        if !x.same_size(&y) {
            return Err(DatasetError::SizeMismatch {
                path: b.join(&rel),
                got: (y.width, y.height),
                expected: (x.width, x.height),
            });
        }
        let psnr = psnr(&x, &y).expect("same size");
        // SSIM needs at least one full window
        let ssim = ssim(&x, &y).unwrap_or(f64::NAN);
        rows.push(MetricRow { name: rel.display().to_string(), psnr, ssim });
    }
    let n = rows.len().max(1) as f64;
    Ok(MetricTable {
        mean_psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        rows,
    })
}
