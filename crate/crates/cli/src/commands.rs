use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::process::ExitCode;

use aesthetic_ci::config::{self, EffectiveConfig, Source};
use aesthetic_ci::data::{self, Dataset, Split, SynthSpec};
use aesthetic_ci::gradcheck::{self, Objective};
use aesthetic_ci::model::ModelConfig;
use aesthetic_ci::stats::{self, CIConfig, ScoreLabel};
use aesthetic_ci::trainer::{self, TrainError, Trainer};

use crate::{EvalArgs, GenSynthArgs, GradCheckArgs, RankArgs, TrainArgs};

/// Fraction of items tagged train / val / test by `gen-synth`.
const SPLIT_FRACTIONS: [f64; 3] = [0.8, 0.1, 0.1];
/// Largest parameter count `grad-check` accepts.
const GRAD_CHECK_MAX_PARAMS: usize = 20_000;
/// Items in the `grad-check` batch.
const GRAD_CHECK_ITEMS: usize = 4;
const GRAD_CHECK_STEP: f64 = 1e-6;

#[derive(Debug)]
pub enum CliError {
    /// Bad input: flags, config values, missing files, incompatible artifacts.
    Usage(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Internal(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(e: impl fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn internal(e: impl fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

fn train_err(e: TrainError) -> CliError {
    match e {
        TrainError::Config(_)
        | TrainError::Invalid(_)
        | TrainError::ConfigMismatch(_)
        | TrainError::EmptySplit
        | TrainError::Loss(aesthetic_ci::losses::LossError::Config(_))
        | TrainError::Model(aesthetic_ci::model::ModelError::Config(_)) => usage(e),
        _ => internal(e),
    }
}

fn read_dataset(dir: &Path) -> Result<Dataset> {
    data::read_dataset_dir(dir).map_err(|e| usage(format!("cannot load dataset {}: {e}", dir.display())))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| internal(format!("cannot write {}: {e}", path.display())))
}

pub fn gen_synth(a: &GenSynthArgs) -> Result<ExitCode> {
    let total_channels = a.channels as usize * a.blocks as usize;
    let spec = SynthSpec {
        n_items: a.n as usize,
        feature_shape: [total_channels, a.spatial as usize, a.spatial as usize],
        seed: a.seed,
        n_obs: a.n_obs,
        ..SynthSpec::default()
    };
    let ds = data::generate_synthetic(&spec).map_err(usage)?;
    let ds = data::split_dataset(&ds, SPLIT_FRACTIONS, a.seed).map_err(internal)?;
    data::write_dataset_dir(&a.out, &ds).map_err(internal)?;
    let mut manifest = spec.to_manifest();
    writeln!(manifest, "blocks={}", a.blocks).unwrap();
    writeln!(manifest, "channels_per_block={}", a.channels).unwrap();
    let [tr, va, te] = SPLIT_FRACTIONS;
    writeln!(manifest, "split_fractions={tr},{va},{te}").unwrap();
    for s in [Split::Train, Split::Val, Split::Test] {
        writeln!(manifest, "n_{}={}", s.as_str(), ds.split(s).len()).unwrap();
    }
    write_file(&a.out.join(data::MANIFEST_FILE), &manifest)?;
    print!("out={}\n{manifest}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

/// Built-in defaults, then the config file, then dataset-derived model
/// dimensions (only where still default), then flags.
fn effective_train_config(a: &TrainArgs, ds: &Dataset) -> Result<EffectiveConfig> {
    let mut eff = EffectiveConfig::default();
    if let Some(path) = &a.config {
        eff.apply_file(path).map_err(usage)?;
    }
    let shape = ds
        .feature_shape()
        .ok_or_else(|| usage("dataset has no items"))?
        .to_vec();
    if shape.len() != 3 {
        return Err(usage(format!("features must be [C, H, W], got {shape:?}")));
    }
    if eff.source("model.spatial") == Some(Source::Default) {
        eff.set("model.spatial", &shape[1].to_string(), Source::Data)
            .map_err(usage)?;
    }
    if eff.source("model.in_channels_per_block") == Some(Source::Default) {
        let blocks = eff.config.model.n_blocks.max(1);
        if shape[0] % blocks != 0 {
            return Err(usage(format!(
                "model.n_blocks={blocks} does not divide the {} feature channels",
                shape[0]
            )));
        }
        eff.set(
            "model.in_channels_per_block",
            &(shape[0] / blocks).to_string(),
            Source::Data,
        )
        .map_err(usage)?;
    }
    let flags = [
        ("train.epochs", &a.epochs),
        ("loss.tau", &a.tau),
        ("loss.lambda", &a.lambda),
        ("loss.alpha_mu", &a.alpha_mu),
        ("loss.alpha_sigma", &a.alpha_sigma),
        ("train.seed", &a.seed),
        ("model.seed", &a.seed),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            eff.set(key, v, Source::Flag).map_err(usage)?;
        }
    }
    eff.config.validate().map_err(train_err)?;
    Ok(eff)
}

fn metric(v: &std::result::Result<f64, stats::StatsError>) -> String {
    match v {
        Ok(x) => x.to_string(),
        Err(_) => "undefined".into(),
    }
}

pub fn train(a: &TrainArgs) -> Result<ExitCode> {
    let ds = read_dataset(&a.data)?;
    let eff = effective_train_config(a, &ds)?;
    let cfg = eff.config.clone();
    let train_items = trainer::prepare(&ds.split(Split::Train), &cfg.model).map_err(train_err)?;
    let val_items = trainer::prepare(&ds.split(Split::Val), &cfg.model).map_err(train_err)?;
    if train_items.is_empty() {
        return Err(usage("dataset has no train items"));
    }
    fs::create_dir_all(&a.out).map_err(|e| internal(format!("cannot create {}: {e}", a.out.display())))?;

    let mut manifest = eff.manifest();
    writeln!(manifest, "data={}", a.data.display()).unwrap();
    writeln!(manifest, "n_train={}", train_items.len()).unwrap();
    writeln!(manifest, "n_val={}", val_items.len()).unwrap();
    let select = if val_items.is_empty() { "train" } else { "val" };
    writeln!(manifest, "select_split={select}").unwrap();
    write_file(&a.out.join("manifest.txt"), &manifest)?;

    let mut log = String::new();
    let mut t = Trainer::new(cfg.clone()).map_err(train_err)?;
    let outcome = t
        .fit(&train_items, &val_items, |m, r| {
            let line = format!(
                "{} {select}_scc_mu={} {select}_pcc_mu={} {select}_acc={}",
                m.to_record(),
                metric(&r.scc_mu),
                metric(&r.pcc_mu),
                r.acc
            );
            println!("{line}");
            log.push_str(&line);
            log.push('\n');
        })
        .map_err(train_err)?;
    write_file(&a.out.join("train_log.txt"), &log)?;

    let final_path = a.out.join("final.ftns");
    let best_path = a.out.join("best.ftns");
    trainer::save_checkpoint(&final_path, &t.params, &cfg, &t.state).map_err(internal)?;
    trainer::save_checkpoint(&best_path, &outcome.best_params, &cfg, &outcome.best_state).map_err(internal)?;
    println!("best_epoch={}", outcome.best_epoch);
    println!("best_{select}_scc_mu={}", outcome.best_scc_mu);
    println!("final_checkpoint={}", final_path.display());
    println!("best_checkpoint={}", best_path.display());
    Ok(ExitCode::SUCCESS)
}

fn select_items<'a>(ds: &'a Dataset, split: &str) -> Result<Vec<&'a data::Item>> {
    if split == "all" {
        return Ok(ds.items.iter().collect());
    }
    let s = Split::parse(split).ok_or_else(|| usage(format!("unknown split '{split}' (train, val, test, all)")))?;
    if !ds.has_split(s) {
        return Err(usage(format!("dataset has no items tagged '{split}'")));
    }
    Ok(ds.split(s))
}

fn load_checkpoint(path: &Path) -> Result<(aesthetic_ci::model::Parameters, trainer::TrainConfig)> {
    let (params, cfg, _) =
        trainer::load_checkpoint(path).map_err(|e| usage(format!("cannot load checkpoint {}: {e}", path.display())))?;
    Ok((params, cfg))
}

pub fn eval(a: &EvalArgs) -> Result<ExitCode> {
    let ds = read_dataset(&a.data)?;
    let items = select_items(&ds, &a.split)?;
    let (params, cfg) = load_checkpoint(&a.checkpoint)?;
    let prepared = trainer::prepare(&items, &cfg.model).map_err(train_err)?;
    let report = trainer::evaluate(&params, &cfg.model, &prepared, &cfg.loss, cfg.cutoff).map_err(train_err)?;
    print!("{}", config::to_kv(&cfg));
    println!("checkpoint={}", a.checkpoint.display());
    println!("split={}", a.split);
    print!("{}", report.to_kv());
    Ok(ExitCode::SUCCESS)
}

fn parse_pairs(spec: &str) -> Result<Vec<(String, String)>> {
    spec.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.split_once(':')
                .map(|(x, y)| (x.trim().to_string(), y.trim().to_string()))
                .ok_or_else(|| usage(format!("pair '{p}' is not of the form idA:idB")))
        })
        .collect()
}

pub fn rank(a: &RankArgs) -> Result<ExitCode> {
    if !(a.z >= 0.0 && a.z.is_finite()) {
        return Err(usage("--z must be a non-negative number"));
    }
    let ds = read_dataset(&a.data)?;
    let (params, cfg) = load_checkpoint(&a.checkpoint)?;
    let index: std::collections::HashMap<&str, usize> =
        ds.items.iter().enumerate().map(|(i, it)| (it.id.as_str(), i)).collect();
    let pairs: Vec<(usize, usize)> = if a.all_pairs {
        let n = ds.items.len();
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
    } else {
        let spec = a.pairs.as_deref().unwrap_or_default();
        parse_pairs(spec)?
            .into_iter()
            .map(|(x, y)| {
                let find = |id: &str| {
                    index
                        .get(id)
                        .copied()
                        .ok_or_else(|| usage(format!("unknown item id '{id}'")))
                };
                Ok((find(&x)?, find(&y)?))
            })
            .collect::<Result<_>>()?
    };
    if pairs.is_empty() {
        return Err(usage("no pairs to rank"));
    }
    let all: Vec<&data::Item> = ds.items.iter().collect();
    let prepared = trainer::prepare(&all, &cfg.model).map_err(train_err)?;
    let preds = trainer::predict_all(&params, &cfg.model, &prepared).map_err(train_err)?;
    let ci = CIConfig { z: a.z };
    println!("z={}", a.z);
    println!("n_obs_assumed={}", a.n_obs_assumed);
    let as_label = |i: usize| {
        ScoreLabel::direct(
            ds.items[i].id.clone(),
            a.n_obs_assumed,
            preds[i].mu_hat,
            preds[i].sigma_hat,
        )
        .map_err(internal)
    };
    for (i, j) in pairs {
        let (la, lb) = (as_label(i)?, as_label(j)?);
        let diff = stats::ci_difference(&la, &lb, &ci);
        let (ia, ib) = (stats::ci_mean(&la, &ci), stats::ci_mean(&lb, &ci));
        println!(
            "a={} b={} mu_a={} mu_b={} sigma_a={} sigma_b={} ci_a=[{},{}] ci_b=[{},{}] diff_ci=[{},{}] verdict={} n_obs=assumed-n",
            la.item_id,
            lb.item_id,
            la.mu,
            lb.mu,
            la.sigma,
            lb.sigma,
            ia.lo,
            ia.hi,
            ib.lo,
            ib.hi,
            diff.lo,
            diff.hi,
            stats::rank_verdict(&la, &lb, &ci)
        );
    }
    Ok(ExitCode::SUCCESS)
}

pub fn grad_check(a: &GradCheckArgs) -> Result<ExitCode> {
    if !(a.tolerance > 0.0) {
        return Err(usage("--tolerance must be positive"));
    }
    let mut eff = EffectiveConfig::new(trainer::TrainConfig {
        model: ModelConfig::toy(),
        ..trainer::TrainConfig::default()
    });
    if let Some(path) = &a.config {
        eff.apply_file(path).map_err(usage)?;
    }
    let cfg = eff.config;
    cfg.model.validate().map_err(usage)?;
    cfg.loss.validate().map_err(usage)?;
    let count = cfg.model.parameter_count();
    if count > GRAD_CHECK_MAX_PARAMS {
        return Err(usage(format!(
            "grad-check needs a toy-size model; this config has {count} parameters (limit {GRAD_CHECK_MAX_PARAMS})"
        )));
    }
    let (params, inputs, labels) =
        gradcheck::smooth_check_point(&cfg.model, GRAD_CHECK_ITEMS, a.seed).map_err(internal)?;
    let mut worst: Option<(Objective, gradcheck::ModelGradReport)> = None;
    println!("seed={}", a.seed);
    println!("parameters={count}");
    println!("step={GRAD_CHECK_STEP:e}");
    for objective in [Objective::MuSum, Objective::Mtl] {
        let r = gradcheck::model_grad_check(
            &params,
            &cfg.model,
            &inputs,
            &labels,
            objective,
            &cfg.loss,
            GRAD_CHECK_STEP,
        )
        .map_err(internal)?;
        let tag = match objective {
            Objective::MuSum => "mu_sum",
            Objective::Mtl => "loss_mtl",
        };
        println!("{tag}.max_rel_error={:e}", r.max_rel_error);
        if worst.as_ref().is_none_or(|(_, w)| r.max_rel_error > w.max_rel_error) {
            worst = Some((objective, r));
        }
    }
    let (_, w) = worst.expect("two objectives checked");
    let pass = w.max_rel_error < a.tolerance;
    println!("max_rel_error={:e}", w.max_rel_error);
    println!("worst_param={}", w.worst_param.as_deref().unwrap_or("none"));
    println!("worst_index={}", w.worst_index);
    println!("worst_analytic={:e}", w.analytic);
    println!("worst_numeric={:e}", w.numeric);
    println!("tolerance={:e}", a.tolerance);
    println!("result={}", if pass { "pass" } else { "fail" });
    if pass {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "gradient check failed: worst parameter {} (element {}) relative error {:e}",
            w.worst_param.as_deref().unwrap_or("none"),
            w.worst_index,
            w.max_rel_error
        );
        Ok(ExitCode::from(1))
    }
}
