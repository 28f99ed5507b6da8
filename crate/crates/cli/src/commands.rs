use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;

use sidnet::dataset::{
    apply_permutation, export_pgm, generate_range, make_permutation, read_dataset, ClassPartition, DatasetHeader,
    DatasetWriter, Permutation,
};
use sidnet::nn::{load_checkpoint, save_checkpoint, CheckpointHeader, Model};
use sidnet::profiler::{self, ProfileSpec};
use sidnet::saliency::{self, Method, PatchBasis};
use sidnet::training::{self, check_arch, evaluate, LabeledSet, SearchSpace, TrainConfig, HELDOUT_INDEX_OFFSET};

use crate::manifest::Outcome;
use crate::{EvalCmd, GenArgs, GenCmd, GlobalArgs, HyperArgs, InspectCmd, ProfileCmd, SaliencyCmd, SearchCmd, TrainCmd, UsageError};

const GEN_CHUNK: usize = 1000;

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn checkpoint_path(g: &GlobalArgs, given: &Option<PathBuf>) -> PathBuf {
    given.clone().unwrap_or_else(|| g.out_dir.join("model.sidm"))
}

fn load_model(path: &Path) -> Result<(CheckpointHeader, Model)> {
    if !path.exists() {
        bail!("checkpoint {} not found (run `sidnet train` first)", path.display());
    }
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn permutation_for(permuted: bool, size: usize, seed: u64) -> Option<Permutation> {
    permuted.then(|| make_permutation(size, seed))
}

/// Generator for images fed to `model`; the image size follows the checkpoint.
fn gen_for_model(gen: &GenArgs, seed: u64, model: &Model) -> Result<sidnet::dataset::GenParams> {
    if let Some(s) = gen.image_size.filter(|&s| s != model.input_size) {
        return Err(UsageError(format!("--image-size {s} does not match the checkpoint input size {}", model.input_size)).into());
    }
    let params = sidnet::dataset::GenParams { image_size: model.input_size, ..gen.params(seed) };
    params.validate()?;
    Ok(params)
}

pub fn gen(g: &GlobalArgs, a: &GenCmd) -> Result<Outcome> {
    let params = a.gen.params(g.seed);
    params.validate()?;
    let partition = ClassPartition::default();
    let count = a.count as usize;
    let perm = permutation_for(a.permute, params.image_size, g.seed);
    let header = DatasetHeader {
        params,
        partition: partition.clone(),
        permutation_seed: a.permute.then_some(g.seed),
        count,
        image_size: params.image_size,
    };
    let path = g.out_dir.join(&a.output);
    let mut writer = DatasetWriter::create(&path, header)?;
    let mut artifacts = vec![path];
    let pgm_dir = g.out_dir.join("samples");
    if a.export_pgm > 0 {
        std::fs::create_dir_all(&pgm_dir)?;
    }
    for start in (0..count).step_by(GEN_CHUNK) {
        let n = GEN_CHUNK.min(count - start);
        for (i, img) in generate_range(&params, &partition, start as u64, n)?.into_iter().enumerate() {
            let img = match &perm {
                Some(p) => apply_permutation(&img, p)?,
                None => img,
            };
            let index = start + i;
            if index < a.export_pgm {
                let p = pgm_dir.join(format!("sample_{index:05}_class{}.pgm", img.label));
                export_pgm(&img, &p)?;
                artifacts.push(p);
            }
            writer.write(&img)?;
        }
    }
    writer.finish()?;
    Ok(Outcome { resolved: json!({ "params": params, "partition": partition, "count": count }), artifacts, ..Default::default() })
}

fn train_config(g: &GlobalArgs, gen: &GenArgs, h: &HyperArgs) -> TrainConfig {
    let d = TrainConfig::default();
    TrainConfig {
        arch: h.arch.clone(),
        gen: gen.params(g.seed),
        partition: ClassPartition::default(),
        num_samples: h.samples.unwrap_or(d.num_samples),
        heldout_samples: h.heldout.unwrap_or(d.heldout_samples),
        batch_size: h.batch_size.unwrap_or(d.batch_size),
        epochs: h.epochs.unwrap_or(d.epochs),
        lr: h.lr.unwrap_or(d.lr),
        variance_scale: h.variance_scale.unwrap_or(d.variance_scale),
        weight_decay: h.weight_decay.unwrap_or(d.weight_decay),
        permuted: h.permuted,
        init_seed: h.init_seed.unwrap_or(g.seed),
        shuffle_seed: h.shuffle_seed.unwrap_or(g.seed),
    }
}

pub fn train(g: &GlobalArgs, a: &TrainCmd) -> Result<Outcome> {
    let mut cfg = train_config(g, &a.gen, &a.hyper);
    let mut inputs = Vec::new();
    let (train_set, heldout) = match &a.dataset {
        Some(path) => {
            if !path.exists() {
                bail!("dataset {} not found", path.display());
            }
            let (header, images) = read_dataset(path).with_context(|| format!("reading {}", path.display()))?;
            inputs.push(path.clone());
            cfg.gen = header.params;
            cfg.partition = header.partition.clone();
            cfg.num_samples = header.count;
            cfg.permuted = header.permutation_seed.is_some();
            cfg.validate()?;
            let train_set = LabeledSet::from_images(&images, None)?;
            let held = generate_range(&header.params, &header.partition, HELDOUT_INDEX_OFFSET, cfg.heldout_samples)?;
            (train_set, LabeledSet::from_images(&held, header.permutation().as_ref())?)
        }
        None => training::prepare_data(&cfg)?,
    };
    let outcome = training::train_on(&cfg, &train_set, &heldout, |row| {
        if let Some(acc) = row.heldout_acc {
            eprintln!("epoch {} step {} loss {:.4} heldout_acc {:.4}", row.epoch, row.step, row.loss, acc);
        }
    })?;
    let model_path = g.out_dir.join(&a.output);
    save_checkpoint(&outcome.model, Some(outcome.config_digest.clone()), &model_path)?;
    let log_path = g.out_dir.join("train_log.csv");
    training::save_log_csv(&outcome.log, &log_path)?;
    let report_path = g.out_dir.join("train_report.json");
    write_json(&report_path, &json!({ "config_digest": outcome.config_digest, "heldout": outcome.report }))?;
    Ok(Outcome {
        resolved: json!({ "config": cfg, "config_digest": outcome.config_digest }),
        inputs,
        artifacts: vec![model_path, log_path, report_path],
    })
}

pub fn eval(g: &GlobalArgs, a: &EvalCmd) -> Result<Outcome> {
    let ckpt = checkpoint_path(g, &a.checkpoint);
    let (_, model) = load_model(&ckpt)?;
    if let Some(arch) = &a.arch {
        check_arch(&model, arch)?;
    }
    let mut inputs = vec![ckpt];
    let (set, source) = match &a.dataset {
        Some(path) => {
            let (header, images) = read_dataset(path).with_context(|| format!("reading {}", path.display()))?;
            inputs.push(path.clone());
            (LabeledSet::from_images(&images, None)?, json!({ "dataset": header }))
        }
        None => {
            let params = gen_for_model(&a.gen, g.seed, &model)?;
            let images = generate_range(&params, &ClassPartition::default(), HELDOUT_INDEX_OFFSET, a.samples)?;
            let perm = permutation_for(a.permuted, params.image_size, g.seed);
            (LabeledSet::from_images(&images, perm.as_ref())?, json!({ "generated": params, "permuted": a.permuted }))
        }
    };
    if set.size != model.input_size {
        bail!("images are {}×{} but the checkpoint expects {}×{}", set.size, set.size, model.input_size, model.input_size);
    }
    let report = evaluate(&model, &set)?;
    eprintln!("accuracy {:.4} (base rate {:.4}) on {} images", report.accuracy, report.base_rate, report.count);
    let path = g.out_dir.join("eval_report.json");
    write_json(&path, &report)?;
    Ok(Outcome { resolved: source, inputs, artifacts: vec![path] })
}

pub fn search(g: &GlobalArgs, a: &SearchCmd) -> Result<Outcome> {
    let base = train_config(g, &a.gen, &a.hyper);
    let space = SearchSpace::default();
    let results = training::random_search(&base, &space, a.trials as usize, g.seed)?;
    let best = &results[0];
    eprintln!("best trial {}: lr {:.3e} variance_scale {:.3} weight_decay {:.3e} accuracy {:.4}", best.trial, best.lr, best.variance_scale, best.weight_decay, best.accuracy);
    let path = g.out_dir.join("search.json");
    write_json(&path, &json!({ "space": space, "base": base, "ranked": results }))?;
    Ok(Outcome { resolved: json!({ "base": base, "space": space }), artifacts: vec![path], ..Default::default() })
}

pub fn profile(g: &GlobalArgs, a: &ProfileCmd) -> Result<Outcome> {
    let ckpt = checkpoint_path(g, &a.checkpoint);
    let (_, model) = load_model(&ckpt)?;
    let params = gen_for_model(&a.gen, g.seed, &model)?;
    let partition = ClassPartition::default();
    let spec = ProfileSpec {
        grid: (0..params.circle_intensity_hi.min(256)).step_by(a.step as usize).map(|v| v as u8).collect(),
        samples_per_point: a.samples_per_point,
        seed: g.seed,
    };
    let perm = permutation_for(a.permuted, params.image_size, g.seed);
    let profiles = if a.all_channels {
        profiler::profile_layer(&model, a.layer, &spec, &params, &partition, perm.as_ref())?
    } else {
        vec![profiler::intensity_profile(&model, a.layer, a.channel, &spec, &params, &partition, perm.as_ref())?]
    };
    let dir = g.out_dir.join("profiles");
    std::fs::create_dir_all(&dir)?;
    let mut artifacts = Vec::new();
    let mut summary = Vec::new();
    for p in &profiles {
        let stem = format!("layer{}_channel{}", p.layer, p.channel);
        let (svg, csv) = (dir.join(format!("{stem}.svg")), dir.join(format!("{stem}.csv")));
        profiler::render_profile(p, &svg, &csv)?;
        artifacts.extend([svg, csv]);
        summary.push(json!({
            "channel": p.channel,
            "peak": p.peak(),
            "half_max_fraction": p.half_max_fraction(),
            "band_selective": p.is_band_selective(),
        }));
    }
    if a.all_channels {
        let grid = dir.join(format!("layer{}.svg", a.layer));
        std::fs::write(&grid, profiler::profile_grid_svg(&profiles))?;
        artifacts.push(grid);
    }
    let path = dir.join(format!("layer{}_summary.json", a.layer));
    write_json(&path, &json!({ "layer": a.layer, "spatial_size": profiles[0].spatial_size, "channels": summary }))?;
    artifacts.push(path);
    Ok(Outcome { resolved: json!({ "spec": spec, "params": params }), inputs: vec![ckpt], artifacts })
}

fn fit_basis(a: &SaliencyCmd, params: &sidnet::dataset::GenParams, perm: Option<&Permutation>, seed: u64) -> Result<PatchBasis> {
    let images = generate_range(params, &ClassPartition::default(), 0, a.basis_images)?;
    let images = match perm {
        Some(p) => images.iter().map(|i| apply_permutation(i, p)).collect::<sidnet::Result<Vec<_>>>()?,
        None => images,
    };
    Ok(saliency::fit_patch_basis(&images, &a.scales, a.components, a.max_patches, seed)?)
}

pub fn saliency(g: &GlobalArgs, a: &SaliencyCmd) -> Result<Outcome> {
    let ckpt = checkpoint_path(g, &a.checkpoint);
    let (_, model) = load_model(&ckpt)?;
    let params = gen_for_model(&a.gen, g.seed, &model)?;
    let perm = permutation_for(a.permuted, params.image_size, g.seed);
    let mut inputs = vec![ckpt];
    let mut artifacts = Vec::new();
    let basis_path = a.basis.clone().unwrap_or_else(|| g.out_dir.join("basis.sidb"));
    let basis = match a.method {
        Method::Guided => None,
        Method::PatchPca if a.fit_basis => {
            let b = fit_basis(a, &params, perm.as_ref(), g.seed)?;
            saliency::save_basis(&b, &basis_path)?;
            artifacts.push(basis_path.clone());
            Some(b)
        }
        Method::PatchPca => {
            if !basis_path.exists() {
                bail!("basis {} not found (pass --fit-basis to create one)", basis_path.display());
            }
            inputs.push(basis_path.clone());
            Some(saliency::load_basis(&basis_path)?)
        }
    };
    let dir = g.out_dir.join("saliency");
    std::fs::create_dir_all(&dir)?;
    let images = generate_range(&params, &ClassPartition::default(), HELDOUT_INDEX_OFFSET, a.count)?;
    let mut summary = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let shown = match &perm {
            Some(p) => apply_permutation(img, p)?,
            None => img.clone(),
        };
        let x = saliency::image_tensor(&shown.pixels, shown.size)?;
        let predicted = saliency::predict(&model, &x)?;
        let class = a.class.unwrap_or(predicted);
        let baseline = saliency::guided_saliency(&model, &x, class)?;
        let mut map = match &basis {
            Some(b) => saliency::directional_saliency(&model, &x, class, b, !a.plain)?,
            None => baseline.clone(),
        };
        let id = HELDOUT_INDEX_OFFSET + i as u64;
        map.image_id = Some(id);
        artifacts.extend(saliency::render_saliency(&map, &shown.pixels, &baseline, &dir, &format!("image{i:03}"))?);
        // in/out-of-disc means only make sense on unpermuted pixels
        let means = (!a.permuted).then(|| map.split_means(|r, c| img.in_disc(r, c)));
        summary.push(json!({
            "image_id": id,
            "label": img.label,
            "predicted": predicted,
            "class": class,
            "mean_inside": means.map(|m| m.0),
            "mean_outside": means.map(|m| m.1),
        }));
    }
    let path = dir.join("summary.json");
    write_json(&path, &summary)?;
    artifacts.push(path);
    Ok(Outcome { resolved: json!({ "params": params, "method": a.method }), inputs, artifacts })
}

pub fn inspect(g: &GlobalArgs, a: &InspectCmd) -> Result<Outcome> {
    let ckpt = checkpoint_path(g, &a.checkpoint);
    let (header, model) = load_model(&ckpt)?;
    let params: usize = model.blocks.iter().map(|b| b.conv.weight.len() + b.conv.bias.len() + 2 * b.bn.gamma.len()).sum::<usize>()
        + model.head.weight.len()
        + model.head.bias.len();
    let path = g.out_dir.join("inspect.json");
    write_json(&path, &json!({ "header": header, "parameters": params, "block_shapes": model.block_shapes(), "flat_features": model.flat_features() }))?;
    let mut artifacts = vec![path];
    if a.kernels {
        let path = g.out_dir.join("kernels.json");
        write_json(&path, &profiler::kernel_dominance(&model))?;
        artifacts.push(path);
    }
    Ok(Outcome { resolved: json!({}), inputs: vec![ckpt], artifacts })
}
