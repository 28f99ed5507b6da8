//! Intensity-activation profiles and kernel-dominance analysis.
//!
//! A profile answers "how much does channel `c` of layer `l` fire when the
//! circle has intensity `v`?": for every intensity on a grid, images whose
//! circle is forced to that intensity (noise still random) are pushed through
//! the eval-mode network and the channel's post-ReLU activation is averaged
//! over space.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{generate_image_with_intensity, ClassPartition, GenParams, Permutation};
use crate::error::{Error, Result};
use crate::nn::{scale_pixel, Model, Scalar, Tensor};

/// Profile images use indices from here on so they never repeat training
/// or held-out images of the same seed.
pub const PROFILE_INDEX_OFFSET: u64 = 1 << 41;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSpec {
    pub grid: Vec<u8>,
    pub samples_per_point: usize,
    pub seed: u64,
}

impl Default for ProfileSpec {
    fn default() -> Self {
        Self { grid: (0..240).step_by(4).map(|v| v as u8).collect(), samples_per_point: 16, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityProfile {
    /// 1-based; layers `1..=blocks` are conv blocks, `blocks + 1` is the head.
    pub layer: usize,
    pub channel: usize,
    pub grid: Vec<u8>,
    /// Mean activation per grid point; `None` where no samples were taken.
    pub mean_activation: Vec<Option<f64>>,
    pub samples: Vec<(u8, f64)>,
    pub partition: ClassPartition,
    /// Spatial positions averaged per sample (1 for head logits).
    pub spatial_size: usize,
}

impl IntensityProfile {
    /// Largest mean activation over the grid.
    pub fn peak(&self) -> f64 {
        self.mean_activation.iter().flatten().cloned().fold(0.0, f64::max)
    }

    /// Fraction of grid points whose mean reaches half the peak.
    pub fn half_max_fraction(&self) -> f64 {
        let peak = self.peak();
        let defined: Vec<f64> = self.mean_activation.iter().flatten().cloned().collect();
        if defined.is_empty() {
            return 1.0;
        }
        defined.iter().filter(|&&m| m >= 0.5 * peak).count() as f64 / defined.len() as f64
    }

    /// A channel is band-selective when it fires at all and its half-max
    /// set covers less than half of the grid.
    pub fn is_band_selective(&self) -> bool {
        self.peak() > 0.0 && self.half_max_fraction() < 0.5
    }
}

/// Number of profileable layers of `model` (conv blocks plus the head).
pub fn layer_count(model: &Model) -> usize {
    model.blocks.len() + 1
}

pub fn layer_channels(model: &Model, layer: usize) -> Result<usize> {
    let max = layer_count(model);
    if layer == 0 || layer > max {
        return Err(Error::InvalidLayer { layer, max });
    }
    Ok(if layer == max { model.num_classes() } else { model.blocks[layer - 1].conv.out_channels() })
}

/// Profiles of every channel of `layer`.
pub fn profile_layer(
    model: &Model,
    layer: usize,
    spec: &ProfileSpec,
    gen: &GenParams,
    partition: &ClassPartition,
    perm: Option<&Permutation>,
) -> Result<Vec<IntensityProfile>> {
    let channels = layer_channels(model, layer)?;
    if gen.image_size != model.input_size {
        return Err(Error::Shape(format!(
            "profile images of size {} for a model with input {}",
            gen.image_size, model.input_size
        )));
    }
    let gen = GenParams { seed: spec.seed, ..*gen };
    let head = layer == layer_count(model);
    let s = gen.image_size;

    // per grid point: [sample][channel] activation
    let per_point = spec
        .grid
        .par_iter()
        .enumerate()
        .map(|(gi, &intensity)| -> Result<Vec<Vec<f64>>> {
            if spec.samples_per_point == 0 {
                return Ok(Vec::new());
            }
            let mut data = Vec::with_capacity(spec.samples_per_point * s * s);
            for j in 0..spec.samples_per_point {
                let index = PROFILE_INDEX_OFFSET + (gi * spec.samples_per_point + j) as u64;
                let img = generate_image_with_intensity(&gen, partition, index, intensity)?;
                let px = match perm {
                    Some(p) => p.apply_to_pixels(&img.pixels)?,
                    None => img.pixels,
                };
                data.extend(px.iter().map(|&v| scale_pixel(v)));
            }
            let x = Tensor::from_vec(&[spec.samples_per_point, 1, s, s], data)?;
            let trace = model.infer(&x)?;
            if head {
                return Ok(trace
                    .logits
                    .data()
                    .chunks(channels)
                    .map(|row| row.iter().map(|&v| v as f64).collect())
                    .collect());
            }
            let act = &trace.activations[layer];
            let (n, c, h, w) = act.dims4()?;
            let plane = h * w;
            Ok((0..n)
                .map(|b| {
                    (0..c)
                        .map(|ch| {
                            let sum: Scalar = act.data()[(b * c + ch) * plane..][..plane].iter().sum();
                            sum as f64 / plane as f64
                        })
                        .collect()
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;

    let spatial_size = if head {
        1
    } else {
        let (_, h, w) = model.block_shapes()[layer - 1];
        h * w
    };
    Ok((0..channels)
        .map(|ch| {
            let mut samples = Vec::new();
            let mut mean_activation = Vec::with_capacity(spec.grid.len());
            for (&intensity, point) in spec.grid.iter().zip(&per_point) {
                let vals: Vec<f64> = point.iter().map(|row| row[ch]).collect();
                mean_activation.push(mean(&vals));
                samples.extend(vals.into_iter().map(|v| (intensity, v)));
            }
            IntensityProfile {
                layer,
                channel: ch,
                grid: spec.grid.clone(),
                mean_activation,
                samples,
                partition: partition.clone(),
                spatial_size,
            }
        })
        .collect())
}

fn mean(vals: &[f64]) -> Option<f64> {
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

pub fn intensity_profile(
    model: &Model,
    layer: usize,
    channel: usize,
    spec: &ProfileSpec,
    gen: &GenParams,
    partition: &ClassPartition,
    perm: Option<&Permutation>,
) -> Result<IntensityProfile> {
    let channels = layer_channels(model, layer)?;
    if channel >= channels {
        return Err(Error::InvalidChannel { layer, channel, channels });
    }
    Ok(profile_layer(model, layer, spec, gen, partition, perm)?.swap_remove(channel))
}

// ---------------------------------------------------------------------------
// Rendering

const PANEL_W: f64 = 300.0;
const PANEL_H: f64 = 200.0;
const MARGIN: f64 = 28.0;

fn panel(profile: &IntensityProfile, x0: f64, y0: f64, out: &mut String) {
    let x_max = profile.partition.limit().max(profile.grid.iter().map(|&g| g as u32 + 1).max().unwrap_or(1)) as f64;
    let values = profile.samples.iter().map(|s| s.1).chain(profile.mean_activation.iter().flatten().cloned());
    let (lo, hi) = values.fold((0.0f64, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let hi = if hi - lo > 0.0 { hi } else { lo + 1.0 };
    let pw = PANEL_W - 2.0 * MARGIN;
    let ph = PANEL_H - 2.0 * MARGIN;
    let sx = |v: f64| x0 + MARGIN + v / x_max * pw;
    let sy = |v: f64| y0 + MARGIN + (hi - v) / (hi - lo) * ph;

    let classes = profile.partition.num_classes.max(1) as f64;
    for (lo_i, hi_i, class) in profile.partition.bands() {
        let opacity = 0.08 + 0.32 * class as f64 / classes;
        let _ = writeln!(
            out,
            r##"<rect class="band" data-class="{class}" x="{:.2}" y="{:.2}" width="{:.2}" height="{ph:.2}" fill="#808080" fill-opacity="{opacity:.3}"/>"##,
            sx(lo_i as f64),
            y0 + MARGIN,
            sx(hi_i as f64) - sx(lo_i as f64),
        );
    }
    let _ = writeln!(
        out,
        r##"<rect x="{:.2}" y="{:.2}" width="{pw:.2}" height="{ph:.2}" fill="none" stroke="#000000" stroke-width="0.5"/>"##,
        x0 + MARGIN,
        y0 + MARGIN
    );
    for &(intensity, v) in &profile.samples {
        let _ = writeln!(
            out,
            r##"<circle class="sample" cx="{:.2}" cy="{:.2}" r="1.4" fill="#ff99ff" fill-opacity="0.5"/>"##,
            sx(intensity as f64),
            sy(v)
        );
    }
    let points: Vec<String> = profile
        .grid
        .iter()
        .zip(&profile.mean_activation)
        .filter_map(|(&g, m)| m.map(|m| format!("{:.2},{:.2}", sx(g as f64), sy(m))))
        .collect();
    let _ = writeln!(
        out,
        r##"<polyline class="mean" points="{}" fill="none" stroke="#ff0000" stroke-width="1.5"/>"##,
        points.join(" ")
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" font-size="11" font-family="sans-serif">layer {} channel {} (max {:.3})</text>"#,
        x0 + MARGIN,
        y0 + MARGIN - 8.0,
        profile.layer,
        profile.channel,
        hi
    );
}

fn svg_document(width: f64, height: f64, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n{body}</svg>\n"
    )
}

pub fn profile_svg(profile: &IntensityProfile) -> String {
    let mut body = String::new();
    panel(profile, 0.0, 0.0, &mut body);
    svg_document(PANEL_W, PANEL_H, &body)
}

/// All channels of a layer in a grid of panels, three per row.
pub fn profile_grid_svg(profiles: &[IntensityProfile]) -> String {
    let cols = profiles.len().clamp(1, 3);
    let rows = profiles.len().div_ceil(cols).max(1);
    let mut body = String::new();
    for (i, p) in profiles.iter().enumerate() {
        panel(p, (i % cols) as f64 * PANEL_W, (i / cols) as f64 * PANEL_H, &mut body);
    }
    svg_document(cols as f64 * PANEL_W, rows as f64 * PANEL_H, &body)
}

pub fn profile_csv(profile: &IntensityProfile) -> String {
    let mut out = format!(
        "# layer={} channel={} spatial_size={}\nkind,intensity,activation\n",
        profile.layer, profile.channel, profile.spatial_size
    );
    for (&g, m) in profile.grid.iter().zip(&profile.mean_activation) {
        let v = m.map(|m| m.to_string()).unwrap_or_default();
        let _ = writeln!(out, "mean,{g},{v}");
    }
    for &(g, v) in &profile.samples {
        let _ = writeln!(out, "sample,{g},{v}");
    }
    out
}

/// Writes `profile` as SVG to `svg_path` and its numbers as CSV to `csv_path`.
pub fn render_profile(profile: &IntensityProfile, svg_path: impl AsRef<Path>, csv_path: impl AsRef<Path>) -> Result<()> {
    if profile.grid.is_empty() {
        return Err(Error::Param("cannot render an empty profile".into()));
    }
    fs::write(svg_path, profile_svg(profile))?;
    fs::write(csv_path, profile_csv(profile))?;
    Ok(())
}

/// Parsed CSV twin: grid, means and samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileTable {
    pub grid: Vec<u8>,
    pub mean_activation: Vec<Option<f64>>,
    pub samples: Vec<(u8, f64)>,
}

pub fn parse_profile_csv(text: &str) -> Result<ProfileTable> {
    let mut table = ProfileTable { grid: Vec::new(), mean_activation: Vec::new(), samples: Vec::new() };
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.is_empty()).skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let [kind, intensity, value] = fields[..] else {
            return Err(Error::Format(format!("bad profile row {line:?}")));
        };
        let intensity: u8 = intensity.parse().map_err(|_| Error::Format(format!("bad intensity in {line:?}")))?;
        let value: Option<f64> = if value.is_empty() {
            None
        } else {
            Some(value.parse().map_err(|_| Error::Format(format!("bad value in {line:?}")))?)
        };
        match (kind, value) {
            ("mean", v) => {
                table.grid.push(intensity);
                table.mean_activation.push(v);
            }
            ("sample", Some(v)) => table.samples.push((intensity, v)),
            _ => return Err(Error::Format(format!("bad profile row {line:?}"))),
        }
    }
    Ok(table)
}

// ---------------------------------------------------------------------------
// Kernel dominance

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelDominance {
    /// 1-based conv layer.
    pub layer: usize,
    pub out_channel: usize,
    pub in_channel: usize,
    /// `max|w| / Σ|w|`, `None` for an all-zero kernel.
    pub dominance: Option<f64>,
    /// `(row, col)` of the largest-magnitude weight.
    pub argmax: (usize, usize),
    pub max_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelDominanceReport {
    /// Sorted by dominance, descending; degenerate kernels last.
    pub kernels: Vec<KernelDominance>,
}

pub fn kernel_stats(weights: &[Scalar]) -> (Option<f64>, (usize, usize), f64) {
    let mut best = 0;
    let mut sum = 0.0f64;
    for (i, &w) in weights.iter().enumerate() {
        sum += (w as f64).abs();
        if w.abs() > weights[best].abs() {
            best = i;
        }
    }
    let max_abs = (weights[best] as f64).abs();
    let dominance = (sum > 0.0).then(|| max_abs / sum);
    (dominance, (best / 3, best % 3), max_abs)
}

pub fn kernel_dominance(model: &Model) -> KernelDominanceReport {
    let mut kernels = Vec::new();
    for (li, block) in model.blocks.iter().enumerate() {
        let (cout, cin) = (block.conv.out_channels(), block.conv.in_channels());
        for co in 0..cout {
            for ci in 0..cin {
                let (dominance, argmax, max_abs) = kernel_stats(&block.conv.weight.data()[(co * cin + ci) * 9..][..9]);
                kernels.push(KernelDominance { layer: li + 1, out_channel: co, in_channel: ci, dominance, argmax, max_abs });
            }
        }
    }
    kernels.sort_by(|a, b| match (a.dominance, b.dominance) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    KernelDominanceReport { kernels }
}
