use std::fs;
use std::path::{Path, PathBuf};

use lidsn::data::{euclidean_align, load_epochs, make_split, rpsd_features, save_epochs, synth_generate, EpochSet, Protocol, RpsdParams, SynthSpec};
use lidsn::model::{block_grad_check, count_params_flops, load_snapshot, random_tiny_config, saliency, save_snapshot, viz, Block, LiDsn};
use lidsn::training::{fit_config, prepare_fold, run_fold, Metrics, FoldReport, Summary};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Serialize)]
struct SeedReport {
    seed: u64,
    folds: Vec<FoldReport>,
    summary: Summary,
}

#[derive(Serialize)]
struct RunReport<'a> {
    config: &'a RunConfig,
    protocol: Protocol,
    seeds: Vec<SeedReport>,
    summary: Summary,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("reports serialise") + "\n"
}

/// Worker pool bounded by `LIDSN_THREADS`.
fn pool() -> Result<rayon::ThreadPool, CliError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("LIDSN_THREADS") {
        let n: usize = v.parse().map_err(|_| CliError::Usage(format!("LIDSN_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(CliError::Usage("LIDSN_THREADS must be positive".into()));
        }
        b = b.num_threads(n);
    }
    b.build().map_err(|e| CliError::Usage(e.to_string()))
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let set = cfg.load_data()?;
    let plan = make_split(&set, cfg.protocol)?;
    let jobs: Vec<(u64, usize)> = cfg.seeds.iter().flat_map(|&s| (0..plan.folds.len()).map(move |k| (s, k))).collect();
    let results = pool()?.install(|| {
        jobs.par_iter()
            .map(|&(seed, k)| {
                let tc = lidsn::training::TrainConfig { seed, ..cfg.train.clone() };
                let (report, model) = run_fold(&set, &plan.folds[k], k, &cfg.model, &tc, &cfg.preprocessing)?;
                let dir = out.join(format!("seed_{seed}")).join(format!("fold_{k}"));
                fs::create_dir_all(&dir)?;
                write(&dir.join("report.json"), json(&report))?;
                write(&dir.join("curves.csv"), report.train.curves_csv())?;
                write(&dir.join("confusion.csv"), report.test.confusion_csv())?;
                save_snapshot(&model, &dir.join("model.bin"))?;
                eprintln!(
                    "seed {seed} fold {k}: test acc {:.4} macro-F1 {:.4} ({} epochs, {:.1} s)",
                    report.test.acc, report.test.macro_f1, report.train.stop_epoch, report.train.wall_clock_s
                );
                Ok::<_, CliError>(report)
            })
            .collect::<Vec<_>>()
    });
    let mut reports = Vec::with_capacity(results.len());
    for r in results {
        reports.push(r?);
    }
    let seeds: Vec<SeedReport> = cfg
        .seeds
        .iter()
        .map(|&seed| {
            let folds: Vec<FoldReport> = reports.iter().filter(|r| r.seed == seed).cloned().collect();
            SeedReport { seed, summary: Summary::of(&folds), folds }
        })
        .collect();
    let summary = Summary::of(&reports);
    write(&out.join("report.json"), json(&RunReport { config: cfg, protocol: cfg.protocol, seeds, summary }))?;
    let first = out.join(format!("seed_{}", cfg.seeds[0])).join("fold_0");
    write(&out.join("curves.csv"), reports[0].train.curves_csv())?;
    fs::copy(first.join("model.bin"), out.join("model.bin"))?;
    println!("acc={} acc_std={} macro_f1={} macro_f1_std={}", summary.mean_acc, summary.std_acc, summary.mean_macro_f1, summary.std_macro_f1);
    Ok(())
}

/// Which prepared trials of a fold to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Subset {
    Fit,
    Val,
    Test,
}

fn fold_subset(cfg: &RunConfig, fold: usize, subset: Subset) -> Result<EpochSet, CliError> {
    let set = cfg.load_data()?;
    let plan = make_split(&set, cfg.protocol)?;
    let f = plan
        .folds
        .get(fold)
        .ok_or_else(|| CliError::Usage(format!("fold {fold} out of range, protocol has {} folds", plan.folds.len())))?;
    let p = prepare_fold(&set, f, cfg.train.val_fraction, &cfg.preprocessing)?;
    Ok(match subset {
        Subset::Fit => p.fit,
        Subset::Val => p.val,
        Subset::Test => p.test,
    })
}

fn load_matching(model: &Path, data: &EpochSet) -> Result<LiDsn, CliError> {
    let m = load_snapshot(model)?;
    let want = fit_config(&m.cfg, data);
    for (name, a, b) in [
        ("n_channels", m.cfg.n_channels, want.n_channels),
        ("n_samples", m.cfg.n_samples, want.n_samples),
        ("n_classes", m.cfg.n_classes, want.n_classes),
    ] {
        if a != b {
            return Err(CliError::Data(format!("snapshot expects {name}={a}, data has {name}={b}")));
        }
    }
    Ok(m)
}

pub fn eval(cfg: &RunConfig, model: &Path, fold: usize, subset: Subset, out: Option<&Path>) -> Result<(), CliError> {
    let data = fold_subset(cfg, fold, subset)?;
    let m = load_matching(model, &data)?;
    let metrics: Metrics = lidsn::training::evaluate(&m, &data)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| model.parent().map(Path::to_path_buf).unwrap_or_default());
    fs::create_dir_all(&dir)?;
    write(&dir.join("confusion.csv"), metrics.confusion_csv())?;
    let pos = metrics.positive_f1.map(|v| format!(" positive_f1={v}")).unwrap_or_default();
    println!("acc={} macro_f1={}{pos}", metrics.acc, metrics.macro_f1);
    Ok(())
}

pub fn export_viz(cfg: &RunConfig, model: &Path, fold: usize, subset: Subset, trials: &[usize], out: &Path) -> Result<(), CliError> {
    let data = fold_subset(cfg, fold, subset)?;
    let m = load_matching(model, &data)?;
    let mut written = 0;
    for &i in trials {
        if i >= data.n_trials() {
            return Err(CliError::Usage(format!("trial {i} out of range, subset has {} trials", data.n_trials())));
        }
        let x = data.batch(&[i]);
        let (_, trace) = m.logits_traced(&x, true)?;
        let trace = trace.expect("tracing was requested");
        let prefix = format!("trial{i}_");
        written += viz::export_trace(out, &trace, 0, &prefix)?.len();
        let single = lidsn::numeric::Tensor::new(&[data.n_channels(), data.n_samples()], data.trial(i).to_vec())
            .expect("trial extents are positive");
        let map = saliency(&m, &single, data.labels()[i])?;
        written += viz::export_saliency(out, &format!("{prefix}saliency"), &map)?.len();
    }
    println!("files={written} dir={}", out.display());
    Ok(())
}

pub fn count(cfg: &RunConfig) -> Result<(), CliError> {
    let c = count_params_flops(&cfg.model)?;
    println!("params={} flops={}", c.params, c.flops);
    Ok(())
}

pub fn synth(spec: &SynthSpec, seed: u64, out: &Path) -> Result<(), CliError> {
    let set = synth_generate(spec, seed)?;
    save_epochs(&set, out)?;
    println!("trials={} channels={} samples={} path={}", set.n_trials(), set.n_channels(), set.n_samples(), out.display());
    Ok(())
}

pub fn align(input: &Path, out: &Path) -> Result<(), CliError> {
    let set = euclidean_align(&load_epochs(input)?, None)?;
    save_epochs(&set, out)?;
    println!("trials={} subjects={} path={}", set.n_trials(), set.subject_ids().len(), out.display());
    Ok(())
}

pub fn features(input: &Path, params: &RpsdParams, out: &Path) -> Result<(), CliError> {
    let set = rpsd_features(&load_epochs(input)?, params)?;
    save_epochs(&set, out)?;
    println!("trials={} channels={} features={} path={}", set.n_trials(), set.n_channels(), set.n_samples(), out.display());
    Ok(())
}

pub fn split(input: &Path, protocol: Protocol, out: Option<&PathBuf>) -> Result<(), CliError> {
    let plan = make_split(&load_epochs(input)?, protocol)?;
    let text = json(&plan);
    match out {
        Some(p) => write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

/// Finite-difference checks of every block over random tiny configurations.
pub fn grad_check(configs: u64, seed: u64) -> Result<(), CliError> {
    const TOL: f64 = 1e-4;
    let mut worst = 0.0f64;
    for block in Block::ALL {
        let mut block_worst = 0.0f64;
        for k in 0..configs {
            let cfg = random_tiny_config(seed.wrapping_add(k));
            let r = block_grad_check(block, &cfg, seed.wrapping_add(k))?;
            block_worst = block_worst.max(r.max_rel_err);
        }
        println!("block={} configs={configs} max_rel_err={block_worst:.3e}", block.name());
        worst = worst.max(block_worst);
    }
    println!("max_rel_err={worst:.3e}");
    if worst < TOL {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("max relative error {worst:.3e} exceeds {TOL:e}")))
    }
}
