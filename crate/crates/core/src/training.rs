//! Training loop, evaluation and random hyperparameter search.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{generate_range, make_permutation, ClassPartition, GenParams, Permutation, SyntheticImage};
use crate::error::{Error, Result};
use crate::nn::{scale_pixel, softmax_cross_entropy, AdamConfig, AdamState, Arch, Mode, Model, Scalar, Tensor};
use crate::rng::{self, Domain};

/// Held-out images are generated from image indices starting here, so they
/// never coincide with training indices.
pub const HELDOUT_INDEX_OFFSET: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: Arch,
    /// Generator settings; `gen.seed` is the data seed.
    pub gen: GenParams,
    pub partition: ClassPartition,
    pub num_samples: usize,
    pub heldout_samples: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub variance_scale: f64,
    pub weight_decay: f64,
    pub permuted: bool,
    pub init_seed: u64,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Small,
            gen: GenParams::default(),
            partition: ClassPartition::default(),
            num_samples: 20_000,
            heldout_samples: 10_000,
            batch_size: 64,
            epochs: 15,
            lr: 3e-3,
            variance_scale: 2.0,
            weight_decay: 1e-5,
            permuted: false,
            init_seed: 0,
            shuffle_seed: 0,
        }
    }
}

impl TrainConfig {
    /// Long run on 250k training samples.
    pub fn full_scale(arch: Arch) -> Self {
        Self { arch, num_samples: 250_000, ..Self::default() }
    }

    pub fn data_seed(&self) -> u64 {
        self.gen.seed
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.partition.validate()?;
        let err = |m: &str| Err(Error::Param(m.into()));
        if self.num_samples == 0 || self.heldout_samples == 0 || self.epochs == 0 {
            return err("num_samples, heldout_samples and epochs must be at least 1");
        }
        if self.batch_size < 2 {
            return err("batch_size must be at least 2 (batch norm)");
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return err("lr must be finite and non-negative");
        }
        if !(self.weight_decay >= 0.0) || !(self.variance_scale >= 0.0) {
            return err("weight_decay and variance_scale must be non-negative");
        }
        Ok(())
    }

    /// Fixed permutation for the permuted task, derived from the data seed.
    pub fn permutation(&self) -> Option<Permutation> {
        self.permuted.then(|| make_permutation(self.gen.image_size, self.data_seed()))
    }

    /// SHA-256 of the JSON-serialized config.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Images flattened into one byte buffer with labels, ready for batching.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub size: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn from_images(images: &[SyntheticImage], perm: Option<&Permutation>) -> Result<Self> {
        let size = images.first().map(|i| i.size).unwrap_or(0);
        let mut pixels = Vec::with_capacity(images.len() * size * size);
        let mut labels = Vec::with_capacity(images.len());
        for img in images {
            if img.size != size {
                return Err(Error::Shape(format!("mixed image sizes {size} and {}", img.size)));
            }
            match perm {
                Some(p) => pixels.extend(p.apply_to_pixels(&img.pixels)?),
                None => pixels.extend_from_slice(&img.pixels),
            }
            labels.push(img.label);
        }
        Ok(Self { size, pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.size * self.size;
        &self.pixels[i * n..][..n]
    }

    /// `len(indices) × 1 × S × S` scaled input tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let n = self.size * self.size;
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| scale_pixel(v)));
        }
        Tensor::from_vec(&[indices.len(), 1, self.size, self.size], data).expect("sized")
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut c = vec![0; classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    /// Frequency of the most common true class.
    pub base_rate: f64,
    pub loss: f64,
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(row: &[Scalar]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const EVAL_CHUNK: usize = 250;

/// Eval-mode accuracy, confusion matrix and loss. The model is not modified.
pub fn evaluate(model: &Model, set: &LabeledSet) -> Result<EvalReport> {
    if set.size != model.input_size {
        return Err(Error::ArchMismatch {
            expected: format!("{} input {}", model.arch, model.input_size),
            found: format!("images of size {}", set.size),
        });
    }
    if set.is_empty() {
        return Err(Error::Param("empty evaluation set".into()));
    }
    let classes = model.num_classes();
    let chunks: Vec<Vec<usize>> = (0..set.len()).collect::<Vec<_>>().chunks(EVAL_CHUNK).map(<[usize]>::to_vec).collect();
    let partials = chunks
        .par_iter()
        .map(|idx| -> Result<(Vec<Vec<usize>>, f64)> {
            let trace = model.infer(&set.batch(idx))?;
            let labels: Vec<usize> = idx.iter().map(|&i| set.labels[i]).collect();
            let (loss, _) = softmax_cross_entropy(&trace.logits, &labels)?;
            let mut confusion = vec![vec![0; classes]; classes];
            for (row, &l) in trace.logits.data().chunks(classes).zip(&labels) {
                confusion[l][argmax(row)] += 1;
            }
            Ok((confusion, loss as f64 * idx.len() as f64))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut confusion = vec![vec![0; classes]; classes];
    let mut loss_sum = 0.0;
    for (c, l) in partials {
        for (row, prow) in confusion.iter_mut().zip(c) {
            for (a, b) in row.iter_mut().zip(prow) {
                *a += b;
            }
        }
        loss_sum += l;
    }
    let total = set.len();
    let correct: usize = (0..classes).map(|k| confusion[k][k]).sum();
    let majority = set.class_counts(classes).into_iter().max().unwrap_or(0);
    Ok(EvalReport {
        count: total,
        accuracy: correct as f64 / total as f64,
        confusion,
        base_rate: majority as f64 / total as f64,
        loss: loss_sum / total as f64,
    })
}

/// Errors unless `model` has the expected architecture.
pub fn check_arch(model: &Model, expected: &Arch) -> Result<()> {
    if &model.arch != expected {
        return Err(Error::ArchMismatch { expected: expected.to_string(), found: model.arch.to_string() });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    /// Filled on the last step of each epoch.
    pub heldout_acc: Option<f64>,
}

pub fn write_log_csv(rows: &[LogRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "step,epoch,loss,heldout_acc")?;
    for r in rows {
        let acc = r.heldout_acc.map(|a| a.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{}", r.step, r.epoch, r.loss, acc)?;
    }
    Ok(())
}

pub fn save_log_csv(rows: &[LogRow], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_log_csv(rows, &mut f)?;
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LogRow>,
    pub report: EvalReport,
    pub config_digest: String,
}

/// Training and held-out sets for a config, permuted when the config asks.
pub fn prepare_data(config: &TrainConfig) -> Result<(LabeledSet, LabeledSet)> {
    config.validate()?;
    let perm = config.permutation();
    let train = generate_range(&config.gen, &config.partition, 0, config.num_samples)?;
    let train = LabeledSet::from_images(&train, perm.as_ref())?;
    let heldout = generate_range(&config.gen, &config.partition, HELDOUT_INDEX_OFFSET, config.heldout_samples)?;
    let heldout = LabeledSet::from_images(&heldout, perm.as_ref())?;
    Ok((train, heldout))
}

pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    let (train_set, heldout) = prepare_data(config)?;
    train_on(config, &train_set, &heldout, |_| {})
}

/// Trains on explicit sets, calling `observe` with every log row.
pub fn train_on(
    config: &TrainConfig,
    train_set: &LabeledSet,
    heldout: &LabeledSet,
    mut observe: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.len() < 2 {
        return Err(Error::Param("need at least two training images".into()));
    }
    let mut model = Model::new(config.arch.clone(), train_set.size, config.partition.num_classes)?;
    model.init_params(config.variance_scale, config.init_seed);
    let adam = AdamConfig { lr: config.lr, weight_decay: config.weight_decay, ..AdamConfig::default() };
    let mut state = AdamState::default();
    let mut log = Vec::new();
    let mut step = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..config.epochs {
        let mut rng = rng::stream(Domain::Shuffle, config.shuffle_seed, epoch as u64);
        order.shuffle(&mut rng);
        let batches: Vec<&[usize]> = order.chunks(config.batch_size).filter(|b| b.len() >= 2).collect();
        let last = batches.len().saturating_sub(1);
        for (bi, idx) in batches.into_iter().enumerate() {
            let x = train_set.batch(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| train_set.labels[i]).collect();
            let trace = model.forward(&x, Mode::Train)?;
            if !trace.is_finite() {
                return Err(Error::Numerical(format!("non-finite activation at step {step}")));
            }
            let (loss, grad) = softmax_cross_entropy(&trace.logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("loss is {loss} at step {step} (epoch {epoch})")));
            }
            model.backward(&trace, &grad)?;
            if !model.grads.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient at step {step}")));
            }
            model.adam_step(&mut state, &adam);
            let heldout_acc = if bi == last { Some(evaluate(&model, heldout)?.accuracy) } else { None };
            let row = LogRow { step, epoch, loss: loss as f64, heldout_acc };
            observe(&row);
            log.push(row);
            step += 1;
        }
    }
    let report = evaluate(&model, heldout)?;
    Ok(TrainOutcome { model, log, report, config_digest: config.digest() })
}

/// Log-uniform ranges for the random search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub lr: (f64, f64),
    pub variance_scale: (f64, f64),
    pub weight_decay: (f64, f64),
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self { lr: (1e-4, 1e-1), variance_scale: (0.25, 4.0), weight_decay: (1e-6, 1e-2) }
    }
}

impl SearchSpace {
    fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("lr", self.lr), ("variance_scale", self.variance_scale), ("weight_decay", self.weight_decay)] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::Param(format!("search range for {name} [{lo}, {hi}] is empty or not positive")));
            }
        }
        Ok(())
    }

    /// `trials` configurations drawn deterministically from `seed`.
    pub fn sample(&self, base: &TrainConfig, trials: usize, seed: u64) -> Result<Vec<TrainConfig>> {
        self.validate()?;
        let mut rng = rng::stream(Domain::Search, seed, 0);
        let mut log_uniform = |(lo, hi): (f64, f64)| -> f64 {
            if lo == hi {
                return lo;
            }
            rng.random_range(lo.ln()..hi.ln()).exp()
        };
        Ok((0..trials)
            .map(|_| TrainConfig {
                lr: log_uniform(self.lr),
                variance_scale: log_uniform(self.variance_scale),
                weight_decay: log_uniform(self.weight_decay),
                ..base.clone()
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub lr: f64,
    pub variance_scale: f64,
    pub weight_decay: f64,
    pub accuracy: f64,
    pub loss: f64,
}

/// Trains every sampled config on the base config's data budget and returns
/// results sorted by held-out accuracy, best first. Failed (diverged) trials
/// are reported with accuracy 0.
pub fn random_search(base: &TrainConfig, space: &SearchSpace, trials: usize, seed: u64) -> Result<Vec<TrialResult>> {
    if trials == 0 {
        return Err(Error::Param("trials must be at least 1".into()));
    }
    let configs = space.sample(base, trials, seed)?;
    let (train_set, heldout) = prepare_data(base)?;
    let mut results = Vec::with_capacity(trials);
    for (trial, cfg) in configs.iter().enumerate() {
        let (accuracy, loss) = match train_on(cfg, &train_set, &heldout, |_| {}) {
            Ok(out) => (out.report.accuracy, out.report.loss),
            Err(Error::Numerical(_)) => (0.0, f64::INFINITY),
            Err(e) => return Err(e),
        };
        results.push(TrialResult {
            trial,
            lr: cfg.lr,
            variance_scale: cfg.variance_scale,
            weight_decay: cfg.weight_decay,
            accuracy,
            loss,
        });
    }
    results.sort_by(|a, b| b.accuracy.total_cmp(&a.accuracy).then(a.trial.cmp(&b.trial)));
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            gen: GenParams { image_size: 32, r_min: 5, r_max: 10, n_min: 2, n_max: 6, w_min: 1, w_max: 3, seed: 1, ..Default::default() },
            num_samples: 128,
            heldout_samples: 64,
            batch_size: 16,
            epochs: 2,
            ..Default::default()
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 1.0, 0.0]), 0);
        assert_eq!(argmax(&[0.0, 2.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 1.0, 3.0]), 2);
    }

    #[test]
    fn zero_lr_keeps_initial_params() {
        let cfg = TrainConfig { lr: 0.0, weight_decay: 0.0, ..tiny() };
        let out = train(&cfg).unwrap();
        let mut init = Model::new(Arch::Small, 32, 3).unwrap();
        init.init_params(cfg.variance_scale, cfg.init_seed);
        for (a, b) in out.model.blocks.iter().zip(&init.blocks) {
            assert_eq!(a.conv, b.conv);
            assert_eq!(a.bn.gamma, b.bn.gamma);
            assert_eq!(a.bn.beta, b.bn.beta);
        }
        assert_eq!(out.model.head, init.head);
    }

    #[test]
    fn training_is_deterministic() {
        let a = train(&tiny()).unwrap();
        let b = train(&tiny()).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log, b.log);
        let heldout_rows = a.log.iter().filter(|r| r.heldout_acc.is_some()).count();
        assert_eq!(heldout_rows, 2);
    }

    #[test]
    fn constant_bias_model_predicts_class_zero() {
        let (_, heldout) = prepare_data(&tiny()).unwrap();
        let mut m = Model::new(Arch::Small, 32, 3).unwrap();
        m.head.bias = vec![1.0, 0.0, 0.0];
        let r = evaluate(&m, &heldout).unwrap();
        let zeros = heldout.labels.iter().filter(|&&l| l == 0).count();
        assert_eq!(r.accuracy, zeros as f64 / heldout.len() as f64);
        let trace: usize = (0..3).map(|k| r.confusion[k][k]).sum();
        assert_eq!(trace as f64 / r.count as f64, r.accuracy);
        for (k, row) in r.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), heldout.class_counts(3)[k]);
        }
    }

    #[test]
    fn evaluation_has_no_side_effects() {
        let (_, heldout) = prepare_data(&tiny()).unwrap();
        let mut m = Model::new(Arch::Small, 32, 3).unwrap();
        m.init_params(1.0, 2);
        let before = m.clone();
        let a = evaluate(&m, &heldout).unwrap();
        let b = evaluate(&m, &heldout).unwrap();
        assert_eq!(a, b);
        assert_eq!(m, before);
    }

    #[test]
    fn evaluate_rejects_mismatched_size() {
        let (_, heldout) = prepare_data(&tiny()).unwrap();
        let m = Model::new(Arch::Small, 64, 3).unwrap();
        assert!(matches!(evaluate(&m, &heldout), Err(Error::ArchMismatch { .. })));
        assert!(check_arch(&m, &Arch::Large).is_err());
    }

    #[test]
    fn nan_is_reported() {
        let cfg = TrainConfig { lr: f64::INFINITY, ..tiny() };
        assert!(train(&cfg).is_err());
        let cfg = TrainConfig { lr: 1e300, ..tiny() };
        assert!(matches!(train(&cfg), Err(Error::Numerical(_))));
    }

    #[test]
    fn search_sampling_is_seeded_and_in_range() {
        let space = SearchSpace::default();
        let a = space.sample(&tiny(), 8, 3).unwrap();
        assert_eq!(a, space.sample(&tiny(), 8, 3).unwrap());
        assert_ne!(a, space.sample(&tiny(), 8, 4).unwrap());
        for c in &a {
            assert!((1e-4..=1e-1).contains(&c.lr));
            assert!((0.25..=4.0).contains(&c.variance_scale));
            assert!((1e-6..=1e-2).contains(&c.weight_decay));
        }
        let empty = SearchSpace { lr: (1e-1, 1e-4), ..space };
        assert!(empty.sample(&tiny(), 1, 0).is_err());
    }

    #[test]
    fn search_ranks_trials() {
        let res = random_search(&tiny(), &SearchSpace::default(), 1, 0).unwrap();
        assert_eq!(res.len(), 1);
        assert_eq!(res[0].trial, 0);
        let res = random_search(&TrainConfig { epochs: 1, ..tiny() }, &SearchSpace::default(), 3, 5).unwrap();
        assert!(res.windows(2).all(|w| w[0].accuracy >= w[1].accuracy));
        assert!(random_search(&tiny(), &SearchSpace::default(), 0, 0).is_err());
    }

    #[test]
    fn log_csv_format() {
        let rows = vec![
            LogRow { step: 0, epoch: 0, loss: 1.5, heldout_acc: None },
            LogRow { step: 1, epoch: 0, loss: 1.25, heldout_acc: Some(0.5) },
        ];
        let mut buf = Vec::new();
        write_log_csv(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,epoch,loss,heldout_acc\n0,0,1.5,\n1,0,1.25,0.5\n");
    }
}
