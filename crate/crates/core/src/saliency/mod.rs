//! Guided Backpropagation and patch-PCA saliency.
//!
//! The patch-PCA map scores every non-overlapping `s × s` window by how
//! strongly the class logit `f` reacts to moving the window along one of its
//! principal components `p`: `∂f(I + αp)/∂α` at `α = 0`, which is the inner
//! product of the input gradient with the zero-padded `p`. Scores live at
//! window centers, are interpolated bilinearly to full resolution and the
//! per-pixel maximum over scales is kept.

mod pca;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use pca::{
    fit_patch_basis, fit_patch_pca, load_basis, pca_from_patches, read_basis, save_basis, symmetric_eigen, write_basis,
    BasisHeader, PatchBasis, ScaleBasis, ScaleHeader,
};

use crate::dataset::pgm::write_pgm;
use crate::error::{Error, Result};
use crate::nn::{scale_pixel, Model, ReluRule, Tensor};
use crate::training::argmax;

/// Patch side lengths used when none are given.
pub const DEFAULT_SCALES: [usize; 3] = [4, 8, 16];
/// Components kept per scale.
pub const DEFAULT_COMPONENTS: usize = 8;
pub const DEFAULT_MAX_PATCHES: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Guided,
    PatchPca,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "guided" => Ok(Method::Guided),
            "patch_pca" => Ok(Method::PatchPca),
            _ => Err(Error::Param(format!("unknown saliency method {s:?} (expected guided or patch_pca)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub size: usize,
    /// Row-major, non-negative.
    pub values: Vec<f64>,
    pub image_id: Option<u64>,
    pub target_class: usize,
    pub method: Method,
    /// Whether ReLUs used the guided rule while backpropagating.
    pub guided: bool,
}

impl SaliencyMap {
    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    /// Mean over pixels where `mask` holds and where it does not.
    pub fn split_means(&self, mask: impl Fn(usize, usize) -> bool) -> (f64, f64) {
        let (mut sum_in, mut n_in, mut sum_out, mut n_out) = (0.0, 0usize, 0.0, 0usize);
        for (i, &v) in self.values.iter().enumerate() {
            if mask(i / self.size, i % self.size) {
                sum_in += v;
                n_in += 1;
            } else {
                sum_out += v;
                n_out += 1;
            }
        }
        (sum_in / n_in.max(1) as f64, sum_out / n_out.max(1) as f64)
    }
}

/// `1 × 1 × S × S` tensor of scaled pixels.
pub fn image_tensor(pixels: &[u8], size: usize) -> Result<Tensor> {
    Tensor::from_vec(&[1, 1, size, size], pixels.iter().map(|&v| scale_pixel(v)).collect())
}

/// Eval-mode predicted class.
pub fn predict(model: &Model, image: &Tensor) -> Result<usize> {
    Ok(argmax(model.infer(image)?.logits.data()))
}

/// Gradient of the `class` logit with respect to the single input image.
pub fn input_gradient(model: &Model, image: &Tensor, class: usize, rule: ReluRule) -> Result<Vec<f64>> {
    let classes = model.num_classes();
    if class >= classes {
        return Err(Error::Label { label: class, classes });
    }
    let size = model.input_size;
    if image.shape() != [1, 1, size, size] {
        return Err(Error::Shape(format!("expected a 1×1×{size}×{size} image, got {:?}", image.shape())));
    }
    let trace = model.infer(image)?;
    let mut onehot = Tensor::zeros(&[1, classes]);
    onehot.data_mut()[class] = 1.0;
    let g = model.input_gradient(&trace, &onehot, rule)?;
    g.ensure_finite("input gradient")?;
    Ok(g.data().iter().map(|&v| v as f64).collect())
}

pub fn guided_input_gradient(model: &Model, image: &Tensor, class: usize) -> Result<Vec<f64>> {
    input_gradient(model, image, class, ReluRule::Guided)
}

/// Plain Guided Backpropagation map: `|guided gradient|` per pixel.
pub fn guided_saliency(model: &Model, image: &Tensor, class: usize) -> Result<SaliencyMap> {
    let g = guided_input_gradient(model, image, class)?;
    Ok(SaliencyMap {
        size: model.input_size,
        values: g.into_iter().map(f64::abs).collect(),
        image_id: None,
        target_class: class,
        method: Method::Guided,
        guided: true,
    })
}

/// `⟨grad[window], component⟩` for the `side × side` window at `(top, left)`.
pub fn window_inner_product(grad: &[f64], size: usize, top: usize, left: usize, component: &[f64], side: usize) -> f64 {
    (0..side)
        .map(|r| {
            let row = &grad[(top + r) * size + left..][..side];
            row.iter().zip(&component[r * side..][..side]).map(|(g, p)| g * p).sum::<f64>()
        })
        .sum()
}

/// Per-window scores `max_p |⟨grad, p⟩|` on the `(size / side)²` tiling.
pub fn window_scores(grad: &[f64], size: usize, basis: &ScaleBasis) -> Vec<f64> {
    let s = basis.side;
    let tiles = size / s;
    let mut out = Vec::with_capacity(tiles * tiles);
    for ty in 0..tiles {
        for tx in 0..tiles {
            let score = basis
                .components
                .iter()
                .map(|p| window_inner_product(grad, size, ty * s, tx * s, p, s).abs())
                .fold(0.0, f64::max);
            out.push(score);
        }
    }
    out
}

/// Bilinear interpolation of a `tiles × tiles` grid anchored at window
/// centers; pixels beyond the outer centers take the nearest center's value.
pub fn interpolate_scores(scores: &[f64], tiles: usize, side: usize, size: usize) -> Vec<f64> {
    let c0 = (side as f64 - 1.0) / 2.0;
    let coord = |x: usize| -> (usize, usize, f64) {
        let u = ((x as f64 - c0) / side as f64).clamp(0.0, (tiles - 1) as f64);
        let i0 = u.floor() as usize;
        let i1 = (i0 + 1).min(tiles - 1);
        (i0, i1, u - i0 as f64)
    };
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let (y0, y1, fy) = coord(y);
        for x in 0..size {
            let (x0, x1, fx) = coord(x);
            let top = scores[y0 * tiles + x0] * (1.0 - fx) + scores[y0 * tiles + x1] * fx;
            let bottom = scores[y1 * tiles + x0] * (1.0 - fx) + scores[y1 * tiles + x1] * fx;
            out[y * size + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

/// Patch-PCA saliency map of `image` for `class`.
pub fn directional_saliency(model: &Model, image: &Tensor, class: usize, basis: &PatchBasis, guided: bool) -> Result<SaliencyMap> {
    if basis.scales.is_empty() {
        return Err(Error::Param("saliency basis has no scales".into()));
    }
    let size = model.input_size;
    if let Some(s) = basis.scales.iter().find(|s| s.side == 0 || s.side > size || s.components.is_empty()) {
        return Err(Error::Param(format!("basis scale {} unusable on {size}-pixel images", s.side)));
    }
    let rule = if guided { ReluRule::Guided } else { ReluRule::Plain };
    let grad = input_gradient(model, image, class, rule)?;
    let mut values = vec![0.0f64; size * size];
    for scale in &basis.scales {
        let scores = window_scores(&grad, size, scale);
        let map = interpolate_scores(&scores, size / scale.side, scale.side, size);
        values.iter_mut().zip(map).for_each(|(v, m)| *v = v.max(m));
    }
    Ok(SaliencyMap { size, values, image_id: None, target_class: class, method: Method::PatchPca, guided })
}

/// Values scaled to `0..=255` by their own maximum; an all-zero map stays 0.
pub fn normalize_to_u8(values: &[f64]) -> Vec<u8> {
    let max = values.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return vec![0; values.len()];
    }
    values.iter().map(|&v| (v / max * 255.0).round().clamp(0.0, 255.0) as u8).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl MapStats {
    pub fn of(values: &[f64]) -> Self {
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(0.0, f64::max);
        Self { min, max, mean: values.iter().sum::<f64>() / values.len().max(1) as f64 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SaliencyMeta {
    pub image_id: Option<u64>,
    pub target_class: usize,
    pub method: Method,
    pub guided: bool,
    pub stats: MapStats,
    pub baseline_stats: MapStats,
    pub files: Vec<String>,
}

/// Writes `<stem>_input.pgm`, `<stem>_saliency.pgm`, `<stem>_baseline.pgm`
/// and `<stem>.json` into `dir`; returns the written paths.
pub fn render_saliency(map: &SaliencyMap, image: &[u8], baseline: &SaliencyMap, dir: impl AsRef<Path>, stem: &str) -> Result<Vec<PathBuf>> {
    let n = map.size * map.size;
    if image.len() != n || map.values.len() != n || baseline.values.len() != n {
        return Err(Error::Shape(format!(
            "image of {} pixels, map of {}, baseline of {}",
            image.len(),
            map.values.len(),
            baseline.values.len()
        )));
    }
    let dir = dir.as_ref();
    let files = [
        (format!("{stem}_input.pgm"), image.to_vec()),
        (format!("{stem}_saliency.pgm"), normalize_to_u8(&map.values)),
        (format!("{stem}_baseline.pgm"), normalize_to_u8(&baseline.values)),
    ];
    let mut written = Vec::new();
    for (name, pixels) in &files {
        let path = dir.join(name);
        write_pgm(&path, map.size, map.size, pixels)?;
        written.push(path);
    }
    let meta = SaliencyMeta {
        image_id: map.image_id,
        target_class: map.target_class,
        method: map.method,
        guided: map.guided,
        stats: MapStats::of(&map.values),
        baseline_stats: MapStats::of(&baseline.values),
        files: files.iter().map(|f| f.0.clone()).collect(),
    };
    let path = dir.join(format!("{stem}.json"));
    fs::write(&path, serde_json::to_string_pretty(&meta)?)?;
    written.push(path);
    Ok(written)
}
