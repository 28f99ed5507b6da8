//! Synthetic circle-and-noise images.
//!
//! Each image starts as an all-zero `S×S` grid, receives one uniform-intensity
//! disc fully inside the grid, then a random number of square noise patches
//! that may overwrite the disc. The label is a non-monotonic function of the
//! disc intensity given by a [`ClassPartition`].

mod container;
pub mod pgm;

pub use container::{read_dataset, write_dataset, DatasetHeader, DatasetReader, DatasetWriter};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenParams {
    pub image_size: usize,
    pub r_min: usize,
    pub r_max: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub w_min: usize,
    pub w_max: usize,
    /// Inclusive lower bound of the circle intensity.
    pub circle_intensity_lo: u32,
    /// Exclusive upper bound of the circle intensity (at most 256).
    pub circle_intensity_hi: u32,
    pub seed: u64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            image_size: 128,
            r_min: 16,
            r_max: 42,
            n_min: 50,
            n_max: 70,
            w_min: 1,
            w_max: 9,
            circle_intensity_lo: 0,
            circle_intensity_hi: 240,
            seed: 0,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        let err = |m: String| Err(Error::Param(m));
        if s < 4 {
            return err(format!("image_size {s} must be at least 4"));
        }
        if s > u16::MAX as usize {
            return err(format!("image_size {s} exceeds {}", u16::MAX));
        }
        if self.r_min > self.r_max {
            return err(format!("r_min {} > r_max {}", self.r_min, self.r_max));
        }
        if self.r_max + 1 > s / 2 {
            return err(format!(
                "r_max {} must be at most floor(S/2) - 1 = {}",
                self.r_max,
                s / 2 - 1
            ));
        }
        if self.n_min > self.n_max {
            return err(format!("n_min {} > n_max {}", self.n_min, self.n_max));
        }
        if self.w_min == 0 || self.w_min > self.w_max {
            return err(format!("noise side range [{}, {}] is invalid", self.w_min, self.w_max));
        }
        if self.circle_intensity_lo >= self.circle_intensity_hi || self.circle_intensity_hi > 256 {
            return err(format!(
                "circle intensity range [{}, {}) is invalid",
                self.circle_intensity_lo, self.circle_intensity_hi
            ));
        }
        Ok(())
    }

    /// Inclusive range of valid circle-center coordinates.
    ///
    /// The upper end stops one short of `S - r_max` so that a disc of radius
    /// `r_max` centered there still ends on pixel `S - 1`.
    pub fn center_range(&self) -> (usize, usize) {
        (self.r_max, self.image_size - self.r_max - 1)
    }
}

/// Mapping from fixed-width intensity bands to class indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPartition {
    pub band_width: u32,
    pub band_classes: Vec<usize>,
    pub num_classes: usize,
}

impl Default for ClassPartition {
    fn default() -> Self {
        Self {
            band_width: 30,
            band_classes: vec![0, 1, 2, 1, 0, 1, 2, 0],
            num_classes: 3,
        }
    }
}

impl ClassPartition {
    pub fn new(band_width: u32, band_classes: Vec<usize>, num_classes: usize) -> Result<Self> {
        let p = Self {
            band_width,
            band_classes,
            num_classes,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.band_width == 0 || self.band_classes.is_empty() || self.num_classes == 0 {
            return Err(Error::Param("partition must have a positive band width and at least one band".into()));
        }
        if let Some(&c) = self.band_classes.iter().find(|&&c| c >= self.num_classes) {
            return Err(Error::Param(format!("band class {c} >= num_classes {}", self.num_classes)));
        }
        for c in 0..self.num_classes {
            if !self.band_classes.contains(&c) {
                return Err(Error::Param(format!("class {c} has no band")));
            }
        }
        Ok(())
    }

    /// One past the largest intensity the partition covers.
    pub fn limit(&self) -> u32 {
        self.band_width * self.band_classes.len() as u32
    }

    pub fn label_of_intensity(&self, intensity: u32) -> Result<usize> {
        if intensity >= self.limit() {
            return Err(Error::OutOfPartition {
                intensity,
                limit: self.limit(),
            });
        }
        Ok(self.band_classes[(intensity / self.band_width) as usize])
    }

    /// `[lo, hi)` intensity bounds of every band.
    pub fn bands(&self) -> impl Iterator<Item = (u32, u32, usize)> + '_ {
        self.band_classes
            .iter()
            .enumerate()
            .map(|(i, &c)| (i as u32 * self.band_width, (i as u32 + 1) * self.band_width, c))
    }
}

pub fn label_of_intensity(partition: &ClassPartition, intensity: u8) -> Result<usize> {
    partition.label_of_intensity(intensity as u32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSquare {
    pub row: usize,
    pub col: usize,
    pub side: usize,
    pub intensity: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticImage {
    pub size: usize,
    /// Row-major `size × size` intensities.
    pub pixels: Vec<u8>,
    pub circle_center: (usize, usize),
    pub circle_radius: usize,
    pub circle_intensity: u8,
    /// Noise squares in drawing order. Not persisted by the dataset container.
    pub noise: Vec<NoiseSquare>,
    pub label: usize,
    pub permuted: bool,
}

impl SyntheticImage {
    /// Whether `(row, col)` lies inside the circle's disc.
    pub fn in_disc(&self, row: usize, col: usize) -> bool {
        disc_contains(self.circle_center, self.circle_radius, row, col)
    }
}

fn disc_contains(center: (usize, usize), radius: usize, row: usize, col: usize) -> bool {
    let dr = row as i64 - center.0 as i64;
    let dc = col as i64 - center.1 as i64;
    dr * dr + dc * dc <= (radius * radius) as i64
}

fn check_partition_covers(params: &GenParams, partition: &ClassPartition) -> Result<()> {
    if params.circle_intensity_hi > partition.limit() {
        return Err(Error::Param(format!(
            "circle intensities up to {} are not covered by the partition (limit {})",
            params.circle_intensity_hi - 1,
            partition.limit()
        )));
    }
    Ok(())
}

pub fn generate_image(params: &GenParams, partition: &ClassPartition, index: u64) -> Result<SyntheticImage> {
    params.validate()?;
    partition.validate()?;
    check_partition_covers(params, partition)?;
    Ok(render(params, partition, index, None))
}

/// Like [`generate_image`] but with the circle intensity fixed. The random
/// stream is consumed identically, so radius, center and noise match the
/// unforced image with the same index.
pub fn generate_image_with_intensity(
    params: &GenParams,
    partition: &ClassPartition,
    index: u64,
    intensity: u8,
) -> Result<SyntheticImage> {
    params.validate()?;
    partition.validate()?;
    partition.label_of_intensity(intensity as u32)?;
    Ok(render(params, partition, index, Some(intensity)))
}

fn render(params: &GenParams, partition: &ClassPartition, index: u64, forced: Option<u8>) -> SyntheticImage {
    let s = params.image_size;
    let mut rng = rng::stream(Domain::Image, params.seed, index);
    let mut pixels = vec![0u8; s * s];

    let radius = rng.random_range(params.r_min..=params.r_max);
    let (c_lo, c_hi) = params.center_range();
    let center = (rng.random_range(c_lo..=c_hi), rng.random_range(c_lo..=c_hi));
    let drawn = rng.random_range(params.circle_intensity_lo..params.circle_intensity_hi) as u8;
    let intensity = forced.unwrap_or(drawn);

    for row in center.0 - radius..=center.0 + radius {
        for col in center.1 - radius..=center.1 + radius {
            if disc_contains(center, radius, row, col) {
                pixels[row * s + col] = intensity;
            }
        }
    }

    let count = rng.random_range(params.n_min..=params.n_max);
    let mut noise = Vec::with_capacity(count);
    for _ in 0..count {
        let sq = NoiseSquare {
            row: rng.random_range(0..s),
            col: rng.random_range(0..s),
            side: rng.random_range(params.w_min..=params.w_max),
            intensity: rng.random_range(0..=255u8),
        };
        for row in sq.row..(sq.row + sq.side).min(s) {
            pixels[row * s + sq.col..row * s + (sq.col + sq.side).min(s)].fill(sq.intensity);
        }
        noise.push(sq);
    }

    let label = partition
        .label_of_intensity(intensity as u32)
        .expect("partition coverage checked by caller");
    SyntheticImage {
        size: s,
        pixels,
        circle_center: center,
        circle_radius: radius,
        circle_intensity: intensity,
        noise,
        label,
        permuted: false,
    }
}

/// Images for indices `start..start + count`, in index order.
pub fn generate_range(
    params: &GenParams,
    partition: &ClassPartition,
    start: u64,
    count: usize,
) -> Result<Vec<SyntheticImage>> {
    params.validate()?;
    partition.validate()?;
    check_partition_covers(params, partition)?;
    Ok((0..count as u64)
        .into_par_iter()
        .map(|i| render(params, partition, start + i, None))
        .collect())
}

/// Lazily yields images `0..count`.
pub fn generate_dataset<'a>(
    params: &'a GenParams,
    partition: &'a ClassPartition,
    count: usize,
) -> Result<impl Iterator<Item = SyntheticImage> + 'a> {
    if count == 0 {
        return Err(Error::Param("count must be at least 1".into()));
    }
    params.validate()?;
    partition.validate()?;
    check_partition_covers(params, partition)?;
    Ok((0..count as u64).map(move |i| render(params, partition, i, None)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    pub mapping: Vec<usize>,
    pub seed: u64,
}

/// Fisher–Yates shuffle of `0..size²`.
pub fn make_permutation(size: usize, seed: u64) -> Permutation {
    let n = size * size;
    let mut mapping: Vec<usize> = (0..n).collect();
    let mut rng = rng::stream(Domain::Permutation, seed, size as u64);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        mapping.swap(i, j);
    }
    Permutation { mapping, seed }
}

impl Permutation {
    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn inverse(&self) -> Permutation {
        let mut mapping = vec![0; self.mapping.len()];
        for (i, &j) in self.mapping.iter().enumerate() {
            mapping[j] = i;
        }
        Permutation { mapping, seed: self.seed }
    }

    /// `out[mapping[i]] = input[i]`.
    pub fn apply_to_pixels(&self, input: &[u8]) -> Result<Vec<u8>> {
        if input.len() != self.mapping.len() {
            return Err(Error::Shape(format!(
                "permutation of length {} applied to {} pixels",
                self.mapping.len(),
                input.len()
            )));
        }
        let mut out = vec![0u8; input.len()];
        for (i, &j) in self.mapping.iter().enumerate() {
            out[j] = input[i];
        }
        Ok(out)
    }
}

pub fn apply_permutation(image: &SyntheticImage, perm: &Permutation) -> Result<SyntheticImage> {
    let pixels = perm.apply_to_pixels(&image.pixels)?;
    Ok(SyntheticImage {
        pixels,
        permuted: true,
        ..image.clone()
    })
}

pub fn export_pgm(image: &SyntheticImage, path: impl AsRef<std::path::Path>) -> Result<()> {
    pgm::write_pgm(path, image.size, image.size, &image.pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_examples() {
        let p = ClassPartition::default();
        assert_eq!(label_of_intensity(&p, 25).unwrap(), 0);
        assert_eq!(label_of_intensity(&p, 45).unwrap(), 1);
        assert_eq!(label_of_intensity(&p, 190).unwrap(), 2);
        assert_eq!(label_of_intensity(&p, 130).unwrap(), 0);
        assert_eq!(label_of_intensity(&p, 215).unwrap(), 0);
    }

    #[test]
    fn band_edges_are_half_open() {
        let p = ClassPartition::default();
        assert_eq!(p.label_of_intensity(29).unwrap(), 0);
        assert_eq!(p.label_of_intensity(30).unwrap(), 1);
        assert_eq!(p.label_of_intensity(239).unwrap(), 0);
        assert!(matches!(
            p.label_of_intensity(240),
            Err(Error::OutOfPartition { intensity: 240, limit: 240 })
        ));
    }

    #[test]
    fn partition_validation() {
        assert!(ClassPartition::new(30, vec![0, 2], 3).is_err());
        assert!(ClassPartition::new(30, vec![0, 3], 3).is_err());
        assert!(ClassPartition::new(0, vec![0], 1).is_err());
        assert!(ClassPartition::new(64, vec![0, 1, 1, 0], 2).is_ok());
    }

    #[test]
    fn params_validation() {
        assert!(GenParams::default().validate().is_ok());
        let bad = GenParams { r_max: 64, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = GenParams { n_min: 80, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = GenParams { circle_intensity_hi: 300, ..Default::default() };
        assert!(bad.validate().is_err());
        // partition must cover the sampler's range
        let p = ClassPartition::default();
        let wide = GenParams { circle_intensity_hi: 256, ..Default::default() };
        assert!(generate_image(&wide, &p, 0).is_err());
    }

    #[test]
    fn default_image_radius_in_range() {
        let img = generate_image(&GenParams::default(), &ClassPartition::default(), 0).unwrap();
        assert!((16..=42).contains(&img.circle_radius));
        assert_eq!(img.pixels.len(), 128 * 128);
    }

    #[test]
    fn generation_is_deterministic() {
        let params = GenParams { seed: 99, ..Default::default() };
        let p = ClassPartition::default();
        let a = generate_image(&params, &p, 17).unwrap();
        let b = generate_image(&params, &p, 17).unwrap();
        assert_eq!(a, b);
        let c = generate_image(&params, &p, 18).unwrap();
        assert_ne!(a.pixels, c.pixels);
    }

    #[test]
    fn noiseless_image_is_exactly_the_disc() {
        let params = GenParams { n_min: 0, n_max: 0, seed: 3, ..Default::default() };
        let p = ClassPartition::default();
        let img = generate_image_with_intensity(&params, &p, 5, 200).unwrap();
        assert!(img.noise.is_empty());
        assert_eq!(img.label, 2);
        for r in 0..img.size {
            for c in 0..img.size {
                let v = img.pixels[r * img.size + c];
                if img.in_disc(r, c) {
                    assert_eq!(v, 200);
                } else {
                    assert_eq!(v, 0);
                }
            }
        }
    }

    #[test]
    fn forced_intensity_keeps_geometry() {
        let params = GenParams::default();
        let p = ClassPartition::default();
        let a = generate_image(&params, &p, 11).unwrap();
        let b = generate_image_with_intensity(&params, &p, 11, 77).unwrap();
        assert_eq!(a.circle_center, b.circle_center);
        assert_eq!(a.circle_radius, b.circle_radius);
        assert_eq!(a.noise, b.noise);
        assert_eq!(b.circle_intensity, 77);
    }

    #[test]
    fn dataset_stream_indices() {
        let params = GenParams::default();
        let p = ClassPartition::default();
        let imgs: Vec<_> = generate_dataset(&params, &p, 3).unwrap().collect();
        assert_eq!(imgs.len(), 3);
        for (i, img) in imgs.iter().enumerate() {
            assert_eq!(*img, generate_image(&params, &p, i as u64).unwrap());
        }
        assert_eq!(generate_range(&params, &p, 0, 3).unwrap(), imgs);
        assert!(generate_dataset(&params, &p, 0).is_err());
    }

    #[test]
    fn permutation_basics() {
        assert_eq!(make_permutation(1, 5).mapping, vec![0]);
        let p = make_permutation(16, 5);
        let mut sorted = p.mapping.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..256).collect::<Vec<_>>());
        assert_eq!(p, make_permutation(16, 5));
        assert_ne!(p.mapping, make_permutation(16, 6).mapping);
    }

    #[test]
    fn permutation_application() {
        let params = GenParams { image_size: 32, r_min: 4, r_max: 8, n_min: 3, n_max: 5, ..Default::default() };
        let part = ClassPartition::default();
        let img = generate_image(&params, &part, 0).unwrap();
        let identity = Permutation { mapping: (0..32 * 32).collect(), seed: 0 };
        assert_eq!(apply_permutation(&img, &identity).unwrap().pixels, img.pixels);

        let perm = make_permutation(32, 1);
        let out = apply_permutation(&img, &perm).unwrap();
        assert!(out.permuted);
        assert_eq!(out.label, img.label);
        let mut a = img.pixels.clone();
        let mut b = out.pixels.clone();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
        let back = apply_permutation(&out, &perm.inverse()).unwrap();
        assert_eq!(back.pixels, img.pixels);

        assert!(matches!(apply_permutation(&img, &make_permutation(8, 0)), Err(Error::Shape(_))));
    }
}
