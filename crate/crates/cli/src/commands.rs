use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use mixdiff::data::{encode, load_csv, save_csv, DatasetSchema, RecordTable};
use mixdiff::nn::{write_atomic, Denoiser, DenoiserConfig};
use mixdiff::pipeline::{evaluate, synthesize};
use mixdiff::privacy::privacy_report;
use mixdiff::structure::{demographic_coverage, CorrelationMatrix};
use mixdiff::training::{train, write_loss_log, TrainEvent};
use mixdiff::utility::{compare_policies, BandReward, UtilityModel};
use mixdiff::{toy, Scalar};

use crate::config::{Precision, RunConfig};
use crate::plots;

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> mixdiff::Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    write_atomic(path, &buf)?;
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Archives the effective configuration next to the outputs.
fn archive_config(cfg: &RunConfig, dir: &Path, command: &str) -> Result<()> {
    write_json(&dir.join(format!("run_config.{command}.json")), cfg)
}

fn load_schema(cfg: &RunConfig) -> Result<DatasetSchema> {
    let path = cfg.require(&cfg.schema, "schema")?;
    Ok(DatasetSchema::load_json(path)?)
}

fn load_table(path: &Path, schema: &DatasetSchema) -> Result<RecordTable> {
    let t = load_csv(path, schema).with_context(|| format!("loading {}", path.display()))?;
    t.validate(schema)?;
    Ok(t)
}

fn load_pair(cfg: &RunConfig) -> Result<(DatasetSchema, RecordTable, RecordTable)> {
    let schema = load_schema(cfg)?;
    let real = load_table(cfg.require(&cfg.real, "real")?, &schema)?;
    let syn = load_table(cfg.require(&cfg.synthetic, "synthetic")?, &schema)?;
    Ok((schema, real, syn))
}

pub fn toygen(cfg: &RunConfig, _plots: bool) -> Result<()> {
    let data = toy::generate(&cfg.toy)?;
    let dir = cfg.out_dir();
    ensure_dir(dir)?;
    save_csv(&data.train, dir.join("real_train.csv"), &data.schema)?;
    save_csv(&data.holdout, dir.join("real_holdout.csv"), &data.schema)?;
    write_atomic(&dir.join("schema.json"), data.schema.to_json()?.as_bytes())?;
    archive_config(cfg, dir, "toygen")?;
    log::info!(
        "wrote {} training and {} holdout patients to {}",
        data.train.n_episodes(),
        data.holdout.n_episodes(),
        dir.display()
    );
    Ok(())
}

pub fn train_cmd(cfg: &RunConfig, plots: bool) -> Result<()> {
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg, plots),
        Precision::F64 => train_typed::<f64>(cfg, plots),
    }
}

fn train_typed<T: Scalar>(cfg: &RunConfig, plots: bool) -> Result<()> {
    let mut schema = load_schema(cfg)?;
    let real = load_table(cfg.require(&cfg.real, "real")?, &schema)?;
    if schema.variables.iter().any(|v| v.kind.is_numeric() && v.range.is_none()) {
        log::info!("fitting missing numeric ranges on the training data");
        schema = schema.fit_ranges(&real)?;
    }
    let den_cfg = cfg
        .denoiser
        .clone()
        .unwrap_or_else(|| DenoiserConfig::for_length(schema.max_length));
    if den_cfg.length() != schema.max_length {
        bail!(
            "denoiser length {} does not match schema max_length {}",
            den_cfg.length(),
            schema.max_length
        );
    }
    let schedule = cfg.schedule.build::<T>()?;
    let batch = encode::<T>(&real, &schema)?;
    cfg.train.validate(batch.n_episodes())?;
    let mut denoiser = Denoiser::<T>::new(den_cfg, schema.width(), cfg.seed)?;

    let dir = cfg.out_dir().to_path_buf();
    let ck_dir = dir.join("checkpoints");
    ensure_dir(&ck_dir)?;
    write_atomic(&dir.join("schema.json"), schema.to_json()?.as_bytes())?;
    archive_config(cfg, &dir, "train")?;

    let log_every = (batch.n_episodes().div_ceil(cfg.train.batch_size) * cfg.train.epochs / 20).max(1);
    let result = train(batch.data(), &mut denoiser, &schedule, &cfg.train, |event| {
        match event {
            TrainEvent::Iteration(r) if r.iteration % log_every == 0 => {
                log::info!(
                    "iteration {} epoch {}: noise {:.5} total {:.5} (running {:.5})",
                    r.iteration,
                    r.epoch,
                    r.noise,
                    r.total,
                    r.running_total
                );
            }
            TrainEvent::Iteration(_) => {}
            TrainEvent::Checkpoint { epoch, denoiser } => {
                denoiser.save(ck_dir.join(format!("epoch_{epoch:06}.json")))?;
            }
            TrainEvent::Diverged { report, denoiser } => {
                log::error!("diverged at iteration {}", report.iteration);
                denoiser.save(ck_dir.join("diverged.json"))?;
            }
        }
        Ok(())
    });
    let reports = result?;
    denoiser.save(dir.join("denoiser.json"))?;
    write_with(&dir.join("loss.csv"), |buf| write_loss_log(&reports, buf))?;
    if plots {
        plots::loss_plot(&dir.join("loss.csv"), &dir.join("loss.png"))?;
    }
    log::info!("trained {} iterations; outputs in {}", reports.len(), dir.display());
    Ok(())
}

pub fn sample_cmd(cfg: &RunConfig, _plots: bool) -> Result<()> {
    match cfg.precision {
        Precision::F32 => sample_typed::<f32>(cfg),
        Precision::F64 => sample_typed::<f64>(cfg),
    }
}

fn sample_typed<T: Scalar>(cfg: &RunConfig) -> Result<()> {
    let schema = Arc::new(load_schema(cfg)?);
    if let Some(v) = schema.variables.iter().find(|v| v.kind.is_numeric() && v.range.is_none()) {
        return Err(mixdiff::Error::MissingRange(v.name.clone()).into());
    }
    let ck = cfg.require(&cfg.checkpoint, "checkpoint")?;
    let denoiser = Denoiser::<T>::load(ck).with_context(|| format!("loading {}", ck.display()))?;
    if denoiser.n_features() != schema.width() || denoiser.config().length() != schema.max_length {
        bail!(
            "checkpoint expects {}×{} episodes, schema gives {}×{}",
            denoiser.config().length(),
            denoiser.n_features(),
            schema.max_length,
            schema.width()
        );
    }
    let schedule = cfg.schedule.build::<T>()?;
    let syn = synthesize(&denoiser, &schedule, &schema, cfg.samples, cfg.seed)?;
    let dir = cfg.out_dir();
    ensure_dir(dir)?;
    save_csv(&syn, dir.join("synthetic.csv"), &schema)?;
    archive_config(cfg, dir, "sample")?;
    log::info!("sampled {} patients into {}", syn.n_episodes(), dir.join("synthetic.csv").display());
    Ok(())
}

fn matrix_csv(dir: &Path, name: &str, m: &CorrelationMatrix) -> Result<PathBuf> {
    let path = dir.join(format!("{name}.csv"));
    write_with(&path, |buf| m.write_csv(buf))?;
    Ok(path)
}

pub fn evaluate_cmd(cfg: &RunConfig, plots: bool) -> Result<()> {
    let (schema, real, syn) = load_pair(cfg)?;
    let mut ecfg = cfg.evaluation.clone();
    if ecfg.quasi_identifiers.is_empty() {
        ecfg.quasi_identifiers = cfg.quasi_identifiers.clone();
    }
    let report = evaluate(&real, &syn, &schema, &ecfg)?;
    let dir = cfg.out_dir().join("evaluation");
    ensure_dir(&dir)?;
    write_with(&dir.join("cascade.csv"), |b| report.cascade.write_csv(b))?;
    write_with(&dir.join("kl.csv"), |b| mixdiff::fidelity::write_kl_csv(&report.kl, b))?;
    let mut matrices = Vec::new();
    for (who, bundle) in [("real", &report.real_correlations), ("synthetic", &report.synthetic_correlations)] {
        for (kind, m) in [("static", &bundle.static_), ("trend", &bundle.trend), ("cycle", &bundle.cycle)] {
            matrices.push(matrix_csv(&dir, &format!("tau_{kind}_{who}"), m)?);
        }
    }
    write_json(&dir.join("report.json"), &report)?;
    archive_config(cfg, cfg.out_dir(), "evaluate")?;
    if plots {
        for m in &matrices {
            plots::matrix_plot(m, &m.with_extension("png"), -1.0, 1.0)?;
        }
    }
    let worst_ks = report.cascade.variables.iter().map(|v| v.ks).min().unwrap_or(0);
    log::info!(
        "KS pass counts ≥ {worst_ks}/{}; CAT {:?}; U {:.3}",
        report.cascade.repetitions,
        report.category_coverage,
        report.log_cluster.mean_u
    );
    Ok(())
}

pub fn privacy_cmd(cfg: &RunConfig, plots: bool) -> Result<()> {
    if cfg.quasi_identifiers.is_empty() {
        bail!("config field `quasi_identifiers` is required for privacy");
    }
    let (schema, real, syn) = load_pair(cfg)?;
    let report = privacy_report(&real, &syn, &schema, &cfg.quasi_identifiers)?;
    let coverage = demographic_coverage(&real, &syn, &schema, &cfg.quasi_identifiers)?;
    let dir = cfg.out_dir().join("privacy");
    ensure_dir(&dir)?;
    write_json(&dir.join("report.json"), &report)?;
    write_with(&dir.join("coverage.csv"), |b| coverage.write_csv(b))?;
    archive_config(cfg, cfg.out_dir(), "privacy")?;
    if plots {
        plots::coverage_plot(&dir.join("coverage.csv"), &dir.join("coverage.png"))?;
    }
    log::info!(
        "disclosure risk {:.4} (threshold {}, {}); min distance {:.4}",
        report.disclosure.risk,
        report.disclosure.threshold,
        if report.disclosure.pass { "pass" } else { "fail" },
        report.min_distance.distance
    );
    Ok(())
}

#[derive(Serialize)]
struct Divergence {
    total_variation: f64,
    components_real: usize,
    components_synthetic: usize,
    evaluated_on: &'static str,
}

pub fn utility_cmd(cfg: &RunConfig, plots: bool) -> Result<()> {
    let Some(rc) = &cfg.utility.reward else {
        bail!("config field `utility.reward` is required for utility");
    };
    let (schema, real, syn) = load_pair(cfg)?;
    let reward = BandReward::new(&schema, &rc.variable, rc.lo, rc.hi)?;
    let ucfg = cfg.utility_config();
    let real_model = UtilityModel::fit(&real, &schema, &reward, &ucfg)?;
    let syn_model = UtilityModel::fit(&syn, &schema, &reward, &ucfg)?;
    let h_real = real_model.heatmap(&real, &schema)?;
    let h_syn = syn_model.heatmap(&real, &schema)?;
    let tv = compare_policies(&h_real, &h_syn)?;

    let dir = cfg.out_dir().join("utility");
    ensure_dir(&dir)?;
    write_json(&dir.join("policy_real.json"), &real_model.policy)?;
    write_json(&dir.join("policy_synthetic.json"), &syn_model.policy)?;
    write_with(&dir.join("heatmap_real.csv"), |b| h_real.write_csv(b))?;
    write_with(&dir.join("heatmap_synthetic.csv"), |b| h_syn.write_csv(b))?;
    write_json(
        &dir.join("divergence.json"),
        &Divergence {
            total_variation: tv,
            components_real: real_model.decomposition.components(),
            components_synthetic: syn_model.decomposition.components(),
            evaluated_on: "real",
        },
    )?;
    archive_config(cfg, cfg.out_dir(), "utility")?;
    if plots {
        for who in ["real", "synthetic"] {
            let csv = dir.join(format!("heatmap_{who}.csv"));
            plots::heatmap_plot(&csv, &csv.with_extension("png"))?;
        }
    }
    log::info!("total variation between real and synthetic policies: {tv:.4}");
    Ok(())
}
