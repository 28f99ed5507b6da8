//! Patch PCA bases and the `SIDB` basis file.
//!
//! File layout: `b"SIDB"`, `u16` version, `u32` header length, JSON
//! [`BasisHeader`], then for every scale the mean patch followed by the `k`
//! components, all little-endian `f64`.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::SyntheticImage;
use crate::error::{Error, Result};
use crate::nn::scale_pixel;
use crate::rng::{self, Domain};

const MAGIC: &[u8; 4] = b"SIDB";
const VERSION: u16 = 1;

/// Principal components of `side × side` patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleBasis {
    pub side: usize,
    pub mean: Vec<f64>,
    /// Unit-norm, row-major patches, ordered by decreasing variance.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub patches_used: usize,
}

impl ScaleBasis {
    pub fn k(&self) -> usize {
        self.components.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchBasis {
    pub scales: Vec<ScaleBasis>,
    pub seed: u64,
}

impl PatchBasis {
    pub fn sides(&self) -> Vec<usize> {
        self.scales.iter().map(|s| s.side).collect()
    }
}

/// Eigen-decomposition of a symmetric `n × n` row-major matrix by cyclic
/// Jacobi rotations. Returns eigenvalues in decreasing order and the matching
/// unit eigenvectors.
pub fn symmetric_eigen(matrix: &[f64], n: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if matrix.len() != n * n {
        return Err(Error::Shape(format!("{} entries for a {n}×{n} matrix", matrix.len())));
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite entry in covariance".into()));
    }
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let total: f64 = a.iter().map(|x| x * x).sum();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off <= 1e-30 * total || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|k| v[k * n + i]).collect()).collect();
    Ok((values, vectors))
}

/// Flips `v` so its largest-magnitude entry (first on ties) is positive.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Top-`k` principal components of the given flattened patches.
pub fn pca_from_patches(patches: &[Vec<f64>], side: usize, k: usize) -> Result<ScaleBasis> {
    let d = side * side;
    if side == 0 || k == 0 || k > d {
        return Err(Error::Param(format!("cannot take {k} components of {side}×{side} patches")));
    }
    if patches.len() < 2 {
        return Err(Error::TooFewPatches { needed: 2, got: patches.len() });
    }
    if let Some(p) = patches.iter().find(|p| p.len() != d) {
        return Err(Error::Shape(format!("patch of {} values, expected {d}", p.len())));
    }
    let n = patches.len() as f64;
    let mut mean = vec![0.0; d];
    for p in patches {
        mean.iter_mut().zip(p).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for p in patches {
        centered.iter_mut().zip(p.iter().zip(&mean)).for_each(|(c, (x, m))| *c = x - m);
        for i in 0..d {
            let ci = centered[i];
            let row = &mut cov[i * d..(i + 1) * d];
            for j in i..d {
                row[j] += ci * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / (n - 1.0);
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    let (values, mut vectors) = symmetric_eigen(&cov, d)?;
    vectors.truncate(k);
    vectors.iter_mut().for_each(|v| fix_sign(v));
    Ok(ScaleBasis { side, mean, components: vectors, eigenvalues: values[..k].to_vec(), patches_used: patches.len() })
}

/// Samples `max_patches` random `side × side` windows (pixels scaled as the
/// network sees them) from `images` and fits a `k`-component basis.
pub fn fit_patch_pca(images: &[&[u8]], image_size: usize, side: usize, k: usize, max_patches: usize, seed: u64) -> Result<ScaleBasis> {
    if side == 0 || side > image_size {
        return Err(Error::Param(format!("patch side {side} does not fit {image_size}-pixel images")));
    }
    if images.is_empty() {
        return Err(Error::TooFewPatches { needed: 2, got: 0 });
    }
    if let Some(img) = images.iter().find(|i| i.len() != image_size * image_size) {
        return Err(Error::Shape(format!("image of {} pixels, expected {}", img.len(), image_size * image_size)));
    }
    let mut rng = rng::stream(Domain::Patches, seed, side as u64);
    let span = image_size - side + 1;
    let patches: Vec<Vec<f64>> = (0..max_patches)
        .map(|_| {
            let img = images[rng.random_range(0..images.len())];
            let (top, left) = (rng.random_range(0..span), rng.random_range(0..span));
            (0..side)
                .flat_map(|r| img[(top + r) * image_size + left..][..side].iter().map(|&v| scale_pixel(v) as f64))
                .collect()
        })
        .collect();
    pca_from_patches(&patches, side, k)
}

/// One basis per side in `sides`.
pub fn fit_patch_basis(images: &[SyntheticImage], sides: &[usize], k: usize, max_patches: usize, seed: u64) -> Result<PatchBasis> {
    let size = images.first().map(|i| i.size).ok_or(Error::TooFewPatches { needed: 2, got: 0 })?;
    let pixels: Vec<&[u8]> = images.iter().map(|i| i.pixels.as_slice()).collect();
    let scales = sides.iter().map(|&s| fit_patch_pca(&pixels, size, s, k, max_patches, seed)).collect::<Result<_>>()?;
    Ok(PatchBasis { scales, seed })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisHeader {
    pub seed: u64,
    pub scales: Vec<ScaleHeader>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleHeader {
    pub side: usize,
    pub k: usize,
    pub eigenvalues: Vec<f64>,
    pub patches_used: usize,
}

pub fn write_basis(basis: &PatchBasis) -> Result<Vec<u8>> {
    let header = BasisHeader {
        seed: basis.seed,
        scales: basis
            .scales
            .iter()
            .map(|s| ScaleHeader { side: s.side, k: s.k(), eigenvalues: s.eigenvalues.clone(), patches_used: s.patches_used })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for s in &basis.scales {
        for v in s.mean.iter().chain(s.components.iter().flatten()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(r: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Truncated(what.to_string()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn floats(r: &mut &[u8], n: usize) -> Result<Vec<f64>> {
    Ok(take(r, n * 8, "basis data")?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

pub fn read_basis(bytes: &[u8]) -> Result<PatchBasis> {
    let mut r = bytes;
    if take(&mut r, 4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, expected SIDB".into()));
    }
    let version = u16::from_le_bytes(take(&mut r, 2, "version")?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported basis version {version}")));
    }
    let len = u32::from_le_bytes(take(&mut r, 4, "header length")?.try_into().expect("4 bytes")) as usize;
    let header: BasisHeader = serde_json::from_slice(take(&mut r, len, "header")?)?;
    let mut scales = Vec::new();
    for h in header.scales {
        let d = h.side * h.side;
        let mean = floats(&mut r, d)?;
        let components = (0..h.k).map(|_| floats(&mut r, d)).collect::<Result<_>>()?;
        scales.push(ScaleBasis { side: h.side, mean, components, eigenvalues: h.eigenvalues, patches_used: h.patches_used });
    }
    if !r.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after basis", r.len())));
    }
    Ok(PatchBasis { scales, seed: header.seed })
}

pub fn save_basis(basis: &PatchBasis, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_basis(basis)?)?;
    Ok(())
}

pub fn load_basis(path: impl AsRef<Path>) -> Result<PatchBasis> {
    read_basis(&fs::read(path)?)
}
