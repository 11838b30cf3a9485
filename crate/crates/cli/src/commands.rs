use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use agrimae_core::anomaly::{
    detect, plan_for, train_with, InferConfig, TrainConfig, TrainState,
};
use agrimae_core::config::KeyValues;
use agrimae_core::data::{
    generate, load_dataset, load_image, load_label, read_index, write_map_pgm, write_pgm,
    GenSpec, LoadOptions, Raster,
};
use agrimae_core::metrics::{evaluate, fingerprint, EvalItem, IouMode};
use agrimae_core::models::{MaskedAutoencoder, ModelConfig};
use agrimae_core::numcore::Checkpoint;
use agrimae_core::selftest::{gradcheck_suite, oracle_suite};
use agrimae_core::{Error, Result, Tensor64};
use log::info;

use crate::{EvalArgs, GenDataArgs, InferArgs, TrainArgs};

pub const SEED_ENV: &str = "AGRIMAE_SEED";

/// Seed from `AGRIMAE_SEED`, which takes precedence over `--seed`.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(vec![format!("{SEED_ENV}=`{v}` is not an unsigned integer")])),
        Err(_) => Ok(None),
    }
}

/// Path of the settings file written next to a checkpoint.
pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn gen_data(a: GenDataArgs, seed_override: Option<u64>) -> Result<()> {
    let spec = GenSpec {
        count: a.n,
        size: a.size,
        bands: a.bands,
        anomaly_fraction: a.anomaly_frac,
        seed: seed_override.unwrap_or(a.seed),
        ..GenSpec::default()
    };
    spec.validate()?;
    create_dir(&a.out)?;
    let entries = generate(&spec, &a.out)?;
    let anomalous = entries.iter().filter(|e| e.has_anomaly).count();
    info!(
        "wrote {} images ({anomalous} anomalous) to {}",
        entries.len(),
        a.out.display()
    );
    Ok(())
}

pub fn train(a: TrainArgs, seed_override: Option<u64>) -> Result<()> {
    let mut kv = match &a.config {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::default(),
    };
    let mut model_cfg = ModelConfig::from_kv(&mut kv);
    let mut train_cfg = TrainConfig::from_kv(&mut kv);
    kv.finish()?;
    if let Some(e) = a.epochs {
        train_cfg.epochs = e;
    }
    if let Some(s) = a.asl {
        train_cfg.asl = s.0;
    }
    if let Some(s) = seed_override.or(a.seed) {
        train_cfg.seed = s;
    }
    train_cfg.validate()?;
    let samples = load_dataset(
        &a.data,
        LoadOptions {
            exclude_anomalous: a.exclude_anomalous,
        },
    )?;
    let Some(first) = samples.first() else {
        return Err(Error::Config(vec![format!(
            "{}: no training images",
            a.data.display()
        )]));
    };
    let shape = first.image.shape().to_vec();
    if a.config.is_none() {
        model_cfg.image_size = shape[0];
        model_cfg.bands = shape[2];
    }
    if let Some(s) = samples.iter().find(|s| {
        s.image.shape() != [model_cfg.image_size, model_cfg.image_size, model_cfg.bands]
    }) {
        return Err(Error::Shape(format!(
            "{}: image is {:?}, model expects {}x{}x{}",
            s.id,
            s.image.shape(),
            model_cfg.image_size,
            model_cfg.image_size,
            model_cfg.bands
        )));
    }
    let model = MaskedAutoencoder::<f64>::build(&model_cfg, train_cfg.seed)?;
    info!(
        "training {} on {} images, {} parameters",
        model_cfg.variant,
        samples.len(),
        model.param_count()
    );
    let images: Vec<Tensor64> = samples.into_iter().map(|s| s.image).collect();
    let start = Instant::now();
    let state = train_with(TrainState::new(model, train_cfg.clone())?, &images, |s| {
        info!(
            "epoch {} loss {:.6} masked_mse {:.6} asl {} ({:.1}s)",
            s.epoch,
            s.loss,
            s.masked_mse,
            s.asl_active,
            start.elapsed().as_secs_f64()
        );
    })?;
    if let Some(dir) = a.out_ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    Checkpoint::from_store(state.model.params(), true).save(&a.out_ckpt)?;
    let mut lines = model_cfg.to_kv_lines();
    lines.extend(train_cfg.to_kv_lines());
    write_text(&sidecar_path(&a.out_ckpt), &(lines.join("\n") + "\n"))?;
    info!("saved {}", a.out_ckpt.display());
    Ok(())
}

fn load_model(ckpt: &Path) -> Result<(MaskedAutoencoder<f64>, String)> {
    let side = sidecar_path(ckpt);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let mut kv = KeyValues::parse(&text)?;
    let cfg = ModelConfig::from_kv(&mut kv);
    let _ = TrainConfig::from_kv(&mut kv);
    kv.finish()?;
    let mut model = MaskedAutoencoder::<f64>::build(&cfg, 0)?;
    Checkpoint::load(ckpt)?.apply_to(model.params_mut())?;
    Ok((model, fingerprint(&text)))
}

pub fn infer(a: InferArgs, seed_override: Option<u64>) -> Result<()> {
    if a.k == 0 {
        return Err(Error::Config(vec!["--k must be at least 1".into()]));
    }
    let (model, fp) = load_model(&a.ckpt)?;
    let cfg = InferConfig {
        k: a.k,
        stratified: a.stratified.0,
        seed: seed_override.unwrap_or(a.seed),
    };
    let inputs: Vec<(String, Tensor64)> = if a.image.is_dir() {
        load_dataset(&a.image, LoadOptions::default())?
            .into_iter()
            .map(|s| (s.id, s.image))
            .collect()
    } else {
        let id = a
            .image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        vec![(id, load_image(&a.image)?)]
    };
    create_dir(&a.out_dir)?;
    let mut thresholds = String::new();
    for (index, (id, image)) in inputs.iter().enumerate() {
        let plan = plan_for(&model, &cfg, index)?;
        let d = detect(&model, image, &plan)?;
        let errors = d.errors.values();
        let out = |suffix: &str| a.out_dir.join(format!("{id}.{suffix}"));
        Raster::from_tensor(errors).save(&out("error.aten"))?;
        let mask = &d.anomaly.mask;
        Raster::U8 {
            dims: vec![mask.height, mask.width],
            data: mask.values.clone(),
        }
        .save(&out("anomaly.aten"))?;
        write_map_pgm(&out("error.pgm"), errors)?;
        let px: Vec<u8> = mask.values.iter().map(|&v| v * 255).collect();
        write_pgm(&out("anomaly.pgm"), mask.height, mask.width, &px)?;
        thresholds.push_str(&format!(
            "{id}\t{:e}\t{}\t{}\n",
            d.threshold.theta,
            u8::from(d.threshold.is_fallback()),
            mask.count()
        ));
        info!(
            "{id}: threshold {:.6e}, {} anomalous pixels",
            d.threshold.theta,
            mask.count()
        );
    }
    write_text(&a.out_dir.join("thresholds.tsv"), &thresholds)?;
    let run = [
        format!("checkpoint = {}", a.ckpt.display()),
        format!("fingerprint = {fp}"),
        format!("images = {}", inputs.len()),
        format!("k = {}", cfg.k),
        format!("seed = {}", cfg.seed),
        format!("stratified = {}", a.stratified),
    ];
    write_text(&a.out_dir.join("run.txt"), &(run.join("\n") + "\n"))
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mode = match a.iou_mode.as_str() {
        "pooled" => IouMode::Pooled,
        "per-image" => IouMode::PerImage,
        other => {
            return Err(Error::Config(vec![format!(
                "--iou-mode must be pooled or per-image, got `{other}`"
            )]))
        }
    };
    let run_path = a.pred_dir.join("run.txt");
    let (fp, seed) = if run_path.exists() {
        let mut kv = KeyValues::load(&run_path)?;
        let fp: Option<String> = kv.take("fingerprint");
        let seed: Option<u64> = kv.take("seed");
        (fp.unwrap_or_default(), seed.unwrap_or(0))
    } else {
        (String::new(), 0)
    };
    let mut entries = read_index(&a.gt_dir.join("index.txt"))?;
    entries.sort_by(|x, y| x.id.cmp(&y.id));
    let mut items = Vec::with_capacity(entries.len());
    for e in entries {
        let gt = load_label(&a.gt_dir.join("labels").join(format!("{}.aten", e.id)))?;
        let pred = load_label(&a.pred_dir.join(format!("{}.anomaly.aten", e.id)))?;
        let score_path = a.pred_dir.join(format!("{}.error.aten", e.id));
        let scores = if score_path.exists() {
            Some(Raster::load(&score_path)?.to_unit_tensor()?.into_data())
        } else {
            None
        };
        items.push(EvalItem {
            id: e.id,
            class_tag: e.has_anomaly.then_some(e.class_tag),
            pred,
            gt,
            scores,
        });
    }
    let report = evaluate(&items, mode, &fp, seed)?.render();
    match &a.report {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            write_text(p, &report)
        }
        None => {
            print!("{report}");
            Ok(())
        }
    }
}

pub fn selftest() -> Result<()> {
    let mut results = gradcheck_suite()?;
    results.extend(oracle_suite()?);
    let mut failed = 0;
    for r in &results {
        println!(
            "{} {:<28} {:.3e}",
            if r.passed { "ok  " } else { "FAIL" },
            r.name,
            r.error
        );
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} of {} checks failed", results.len())));
    }
    println!("all {} checks passed", results.len());
    Ok(())
}
