use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use chrono::{Duration, NaiveDate};
use log::info;
use mkst_core::data::{
    parse_timestamp, prepare, write_dataset_csv, DatasetConfig, ForecastSample, Instant, Prepared, ProblemDims,
};
use mkst_core::evaluation::{compute_metrics, trace_rows, write_metrics_csv, write_trace_csv};
use mkst_core::synthetic::{generate, start_time, SyntheticSpec};
use mkst_core::training::{fit, gradient_check, TrainConfig};
use mkst_core::{checkpoint, Architecture, Model, ModelConfig, ModelMeta, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::manifest::{hash_files, write_atomic, RunManifest};
use crate::{plot as svg, EvalArgs, ExportArgs, GradcheckArgs, PlotArgs, SynthArgs, TrainArgs};

/// Marker for failures that should exit with the numerical status.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Numerical(pub String);

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn dataset_files(cfg: &DatasetConfig) -> Vec<PathBuf> {
    cfg.energy_files.iter().chain(&cfg.weather_files).cloned().collect()
}

/// Load every config and report all validation problems together.
fn load_configs(a: &TrainArgs) -> Result<(DatasetConfig, Architecture, TrainConfig)> {
    let mut problems = Vec::new();
    let mut collect = |what: &str, path: &Path, e: mkst_core::Error| -> Result<()> {
        match e {
            mkst_core::Error::ConfigList { errors, .. } => {
                problems.extend(errors.into_iter().map(|m| format!("{what} {}: {m}", path.display())));
                Ok(())
            }
            e if e.is_io() => Err(e.into()),
            e => {
                problems.push(format!("{what} {}: {e}", path.display()));
                Ok(())
            }
        }
    };
    let dataset = match DatasetConfig::load(&a.dataset_config) {
        Ok(c) => Some(c),
        Err(e) => collect("dataset config", &a.dataset_config, e).map(|_| None)?,
    };
    let arch = match &a.model_config {
        None => Some(Architecture::default()),
        Some(p) => match Architecture::load(p) {
            Ok(c) => Some(c),
            Err(e) => collect("model config", p, e).map(|_| None)?,
        },
    };
    let train = match &a.train_config {
        None => Some(TrainConfig::default()),
        Some(p) => match TrainConfig::load(p) {
            Ok(c) => Some(c),
            Err(e) => collect("train config", p, e).map(|_| None)?,
        },
    };
    match (dataset, arch, train) {
        (Some(d), Some(m), Some(t)) if problems.is_empty() => Ok((d, m, t)),
        _ => Err(mkst_core::Error::ConfigList { count: problems.len(), errors: problems }.into()),
    }
}

fn meta_for(p: &Prepared) -> ModelMeta {
    ModelMeta {
        site_ids: p.dataset.site_ids(),
        location_ids: p.dataset.location_ids(),
        variable_names: p.dataset.variable_names.clone(),
        time_features: p.time_features,
        stats: p.split.stats.clone(),
    }
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut manifest = RunManifest::begin("train");
    let (dcfg, arch, mut tcfg) = load_configs(a)?;
    if let Some(seed) = a.seed {
        tcfg.seed = seed;
    }
    ensure_dir(&a.out_dir)?;
    manifest.configs =
        [Some(a.dataset_config.clone()), a.model_config.clone(), a.train_config.clone()].into_iter().flatten().collect();
    manifest.seed = Some(tcfg.seed);
    manifest.dataset_sha256 = Some(hash_files(&dataset_files(&dcfg))?);

    let prepared = prepare(&dcfg)?;
    if !prepared.report.rejected.is_empty() {
        log::warn!("{} input rows rejected", prepared.report.rejected.len());
    }
    for (id, hours) in &prepared.report.interpolated {
        log::warn!("{id}: {hours} missing hours interpolated");
    }
    info!(
        "{} train / {} validation / {} test windows",
        prepared.split.train.len(),
        prepared.split.validation.len(),
        prepared.split.test.len()
    );
    let mut model = Model::new(ModelConfig { dims: prepared.dims, arch }, tcfg.seed)?;
    model.meta = meta_for(&prepared);

    let log_path = a.out_dir.join("train_log.jsonl");
    let mut log_file =
        std::io::BufWriter::new(fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let mut log_err = None;
    let outcome = fit(model, &prepared.split.train, &prepared.split.validation, &tcfg, |r| {
        let line = serde_json::to_string(r).expect("epoch record serializes");
        if let Err(e) = writeln!(log_file, "{line}").and_then(|_| log_file.flush()) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(anyhow!(e).context(format!("writing {}", log_path.display())));
    }
    info!("best epoch {} (validation loss {:.6})", outcome.best_epoch, outcome.best_val_loss);

    let ckpt = a.out_dir.join("model.ckpt");
    checkpoint::save(&outcome.model, &ckpt)?;
    manifest.artifacts = vec![ckpt, log_path];
    manifest.finish(&a.out_dir)?;
    Ok(())
}

/// Checkpoint plus test windows normalized the way the model was trained.
fn load_for_eval(a: &EvalArgs) -> Result<(Model, Prepared, DatasetConfig)> {
    let model = checkpoint::load(&a.checkpoint)?;
    let dcfg = DatasetConfig::load(&a.dataset_config)?;
    let prepared = prepare(&dcfg)?;
    if model.config.dims != prepared.dims {
        bail!("checkpoint expects {:?} but the dataset yields {:?}", model.config.dims, prepared.dims);
    }
    if !model.meta.site_ids.is_empty() && model.meta.site_ids != prepared.dataset.site_ids() {
        bail!("checkpoint sites {:?} differ from dataset sites {:?}", model.meta.site_ids, prepared.dataset.site_ids());
    }
    if let (Some(ours), Some(theirs)) = (&model.meta.stats, &prepared.split.stats) {
        let close =
            |x: &[f64], y: &[f64]| x.len() == y.len() && x.iter().zip(y).all(|(a, b)| (a - b).abs() <= 1e-9 * a.abs().max(1.0));
        if !(close(&ours.weather_mean, &theirs.weather_mean)
            && close(&ours.weather_std, &theirs.weather_std)
            && close(&ours.capacities, &theirs.capacities))
        {
            bail!("normalization statistics of this dataset differ from those stored in the checkpoint; evaluate on the dataset the model was trained with");
        }
    }
    if prepared.split.test.is_empty() {
        bail!("test split is empty; set `test_end` past `validation_end` in {}", a.dataset_config.display());
    }
    Ok((model, prepared, dcfg))
}

fn parse_instant(s: &str) -> Result<Instant> {
    if let Ok(d) = NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d") {
        return Ok(d.and_hms_opt(0, 0, 0).unwrap().and_utc());
    }
    Ok(parse_timestamp(s)?)
}

/// `START..END`, end exclusive.
pub fn parse_span(s: &str) -> Result<(Instant, Instant)> {
    let (a, b) = s.split_once("..").ok_or_else(|| anyhow!("span `{s}` must look like START..END"))?;
    let (a, b) = (parse_instant(a)?, parse_instant(b)?);
    if b <= a {
        bail!("span `{s}` is empty");
    }
    Ok((a, b))
}

fn csv_bytes(write: impl FnOnce(&mut Vec<u8>) -> mkst_core::Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    Ok(buf)
}

pub fn evaluate(a: &EvalArgs) -> Result<()> {
    let mut manifest = RunManifest::begin("evaluate");
    let span = a.span.as_deref().map(parse_span).transpose()?;
    let (model, prepared, dcfg) = load_for_eval(a)?;
    ensure_dir(&a.out_dir)?;
    manifest.configs = vec![a.dataset_config.clone(), a.checkpoint.clone()];
    manifest.dataset_sha256 = Some(hash_files(&dataset_files(&dcfg))?);

    let test = &prepared.split.test;
    let preds = model.predict_batch(test)?.outputs;
    let targets: Vec<Tensor> = test.iter().map(|s| s.target.clone().expect("test windows carry targets")).collect();
    let ids = prepared.dataset.site_ids();
    let caps = prepared.capacities();
    let metrics = compute_metrics(&preds, &targets, &ids, (!dcfg.capacity.is_empty()).then_some(caps.as_slice()))?;
    info!("all sites: MAE {:.4}  RMSE {:.4}", metrics.all.mae, metrics.all.rmse);

    let metrics_path = a.out_dir.join("metrics.csv");
    write_atomic(&metrics_path, &csv_bytes(|b| write_metrics_csv(b, &metrics))?)?;
    let rows = trace_rows(test, &preds, &ids, span)?;
    if rows.is_empty() {
        bail!("span {} selects no test hours", a.span.as_deref().unwrap_or(""));
    }
    let trace_path = a.out_dir.join("trace.csv");
    write_atomic(&trace_path, &csv_bytes(|b| write_trace_csv(b, &rows))?)?;
    manifest.artifacts = vec![metrics_path, trace_path];
    manifest.finish(&a.out_dir)?;
    Ok(())
}

pub fn predict(a: &EvalArgs) -> Result<()> {
    let mut manifest = RunManifest::begin("predict");
    let span = a.span.as_deref().map(parse_span).transpose()?;
    let (model, prepared, dcfg) = load_for_eval(a)?;
    ensure_dir(&a.out_dir)?;
    manifest.configs = vec![a.dataset_config.clone(), a.checkpoint.clone()];
    manifest.dataset_sha256 = Some(hash_files(&dataset_files(&dcfg))?);

    let test: Vec<&ForecastSample> =
        prepared.split.test.iter().filter(|s| span.is_none_or(|(lo, hi)| s.issue_time >= lo && s.issue_time < hi)).collect();
    if test.is_empty() {
        bail!("no test windows are issued inside the requested span");
    }
    let owned: Vec<ForecastSample> = test.into_iter().cloned().collect();
    let preds = model.predict_batch(&owned)?.outputs;
    let ids = prepared.dataset.site_ids();
    let stats = prepared.split.stats.as_ref().expect("prepared splits are normalized");

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["issue_time", "timestamp", "site", "prediction"])?;
    for (s, p) in owned.iter().zip(&preds) {
        let phys = stats.energy_to_physical(p);
        let tf = s.horizon();
        let issued = s.issue_time.format("%Y-%m-%dT%H:%M:%SZ").to_string();
        for (site, id) in ids.iter().enumerate() {
            for (h, ts) in s.forecast_times().into_iter().enumerate() {
                w.write_record([
                    issued.clone(),
                    ts.format("%Y-%m-%dT%H:%M:%SZ").to_string(),
                    id.clone(),
                    phys.data()[site * tf + h].to_string(),
                ])?;
            }
        }
    }
    let path = a.out_dir.join("predictions.csv");
    write_atomic(&path, &w.into_inner().map_err(|e| anyhow!("{e}"))?)?;
    manifest.artifacts = vec![path];
    manifest.finish(&a.out_dir)?;
    Ok(())
}

pub fn export_attention(a: &ExportArgs) -> Result<()> {
    let mut manifest = RunManifest::begin("export-attention");
    let model = checkpoint::load(&a.checkpoint)?;
    let y = model.spatial_weights()?;
    let dims = model.config.dims;
    let ids = |given: &[String], n: usize, prefix: &str| -> Vec<String> {
        if given.len() == n {
            given.to_vec()
        } else {
            (0..n).map(|i| format!("{prefix}{i}")).collect()
        }
    };
    let sites = ids(&model.meta.site_ids, dims.energy_sites, "site");
    let locations = ids(&model.meta.location_ids, dims.weather_sites, "location");

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(std::iter::once("site".to_string()).chain(locations.iter().cloned()))?;
    for (j, row) in y.tensor().data().chunks(dims.weather_sites).enumerate() {
        w.write_record(std::iter::once(sites[j].clone()).chain(row.iter().map(f64::to_string)))?;
    }
    ensure_dir(&a.out_dir)?;
    let path = a.out_dir.join("attention.csv");
    write_atomic(&path, &w.into_inner().map_err(|e| anyhow!("{e}"))?)?;
    manifest.configs = vec![a.checkpoint.clone()];
    manifest.artifacts = vec![path];
    manifest.finish(&a.out_dir)?;
    Ok(())
}

pub fn plot(a: &PlotArgs) -> Result<()> {
    let mut manifest = RunManifest::begin("plot");
    let span = a.span.as_deref().map(parse_span).transpose()?;
    let rows = svg::read_trace(&a.trace)?;
    let text = svg::render(&rows, &a.sites, span)?;
    ensure_dir(&a.out_dir)?;
    let path = a.out_dir.join("plot.svg");
    write_atomic(&path, text.as_bytes())?;
    manifest.configs = vec![a.trace.clone()];
    manifest.artifacts = vec![path];
    manifest.finish(&a.out_dir)?;
    Ok(())
}

const GRADCHECK_TOLERANCE: f64 = 1e-3;

pub fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let arch = match &a.model_config {
        Some(p) => Architecture::load(p)?,
        None => Architecture {
            d_model: 8,
            d_head: 4,
            kernel_sizes: vec![3, 5],
            levels: 2,
            blocks: 1,
            d_lambda: 4,
            ..Default::default()
        },
    };
    let dims = ProblemDims { energy_sites: 2, weather_sites: 3, history: 8, horizon: 4, weather_vars: 2 };
    let model = Model::new(ModelConfig { dims, arch }, a.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut rand = |shape: [usize; 3]| Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
    let sample = ForecastSample {
        energy_history: rand([dims.energy_sites, dims.history, 1]),
        weather_history: rand([dims.weather_sites, dims.history, dims.weather_vars]),
        weather_future: rand([dims.weather_sites, dims.horizon, dims.weather_vars]),
        target: Some(rand([dims.energy_sites, dims.horizon, 1])),
        issue_time: start_time(),
    };
    let report = gradient_check(&model, &sample, a.epsilon, a.fraction, a.seed)?;
    println!(
        "{}",
        serde_json::json!({
            "max_rel_error": report.max_rel_error,
            "checked": report.checked,
            "total": report.total,
            "worst": report.worst.as_ref().map(|(name, i)| format!("{name}[{i}]")),
            "tolerance": GRADCHECK_TOLERANCE,
        })
    );
    if report.max_rel_error >= GRADCHECK_TOLERANCE {
        return Err(Numerical(format!("max relative error {:.3e} exceeds {GRADCHECK_TOLERANCE}", report.max_rel_error)).into());
    }
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    if a.days < 10 {
        bail!("--days must be at least 10");
    }
    let mut manifest = RunManifest::begin("synth");
    let syn = generate(&SyntheticSpec { hours: 24 * a.days, seed: a.seed, ..Default::default() })?;
    ensure_dir(&a.out_dir)?;
    let (energy, weather) = (a.out_dir.join("energy.csv"), a.out_dir.join("weather.csv"));
    write_dataset_csv(&syn.dataset, &energy, &weather)?;

    let t0 = start_time();
    let day = |d: usize| (t0 + Duration::days(d as i64)).format("%Y-%m-%dT%H:%M:%SZ").to_string();
    let (train_end, val_end) = (a.days * 7 / 10, a.days * 85 / 100);
    let dataset_toml = format!(
        "format = 1\nenergy_type = \"wind\"\nenergy_files = [\"energy.csv\"]\nweather_files = [\"weather.csv\"]\n\
         T_h = 48\nT_f = 24\nstride = 24\ntrain_end = \"{}\"\nvalidation_end = \"{}\"\ntest_end = \"{}\"\n",
        day(train_end),
        day(val_end),
        day(a.days)
    );
    let model_toml =
        "format = 1\nd_model = 12\nd_head = 4\nkernel_sizes = [3, 5, 7]\nlevels = 2\nblocks = 1\nd_lambda = 8\ndropout = 0.0\n";
    let train_toml = "format = 1\nlearning_rate = 0.003\nbatch_size = 8\nmax_epochs = 30\nearly_stop_patience = 0\n";
    let mapping: Vec<serde_json::Value> = syn
        .dataset
        .site_ids()
        .iter()
        .zip(&syn.driver)
        .map(|(s, &l)| serde_json::json!({ "site": s, "location": syn.dataset.location_ids()[l] }))
        .collect();
    let files = [
        ("dataset.toml", dataset_toml.into_bytes()),
        ("model.toml", model_toml.as_bytes().to_vec()),
        ("train.toml", train_toml.as_bytes().to_vec()),
        ("drivers.json", serde_json::to_vec_pretty(&mapping)?),
    ];
    manifest.artifacts = vec![energy, weather];
    for (name, bytes) in files {
        let p = a.out_dir.join(name);
        write_atomic(&p, &bytes)?;
        manifest.artifacts.push(p);
    }
    manifest.seed = Some(a.seed);
    manifest.dataset_sha256 = Some(hash_files(&manifest.artifacts[..2])?);
    manifest.finish(&a.out_dir)?;
    Ok(())
}
