use serde::{Deserialize, Serialize};

use super::{evaluate, train, Metrics, TrainConfig, TrainError, TrainReport};
use crate::data::{euclidean_align, make_split, rpsd_features, EpochSet, Fold, Protocol, RpsdParams};
use crate::model::{LiDsn, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Preprocessing {
    pub ea: bool,
    /// Fit each subject's alignment on that subject's training trials only.
    pub ea_train_only: bool,
    pub rpsd: bool,
    pub rpsd_params: RpsdParams,
}

impl Default for Preprocessing {
    fn default() -> Self {
        Self { ea: true, ea_train_only: false, rpsd: false, rpsd_params: RpsdParams::default() }
    }
}

pub struct PreparedFold {
    pub fit: EpochSet,
    pub val: EpochSet,
    pub test: EpochSet,
}

/// Splits the chronological tail of each subject's training trials off
/// for validation.
fn split_validation(set: &EpochSet, train: &[usize], fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let (mut fit, mut val) = (Vec::new(), Vec::new());
    for s in set.subject_ids() {
        let own: Vec<usize> = train.iter().copied().filter(|&i| set.subjects()[i] == s).collect();
        if own.is_empty() {
            continue;
        }
        let n_val = if own.len() < 2 { 0 } else { ((own.len() as f64 * fraction).round() as usize).clamp(1, own.len() - 1) };
        fit.extend_from_slice(&own[..own.len() - n_val]);
        val.extend_from_slice(&own[own.len() - n_val..]);
    }
    fit.sort_unstable();
    val.sort_unstable();
    (fit, val)
}

pub fn prepare_fold(set: &EpochSet, fold: &Fold, val_fraction: f64, prep: &Preprocessing) -> Result<PreparedFold, TrainError> {
    let aligned;
    let base = if prep.ea {
        let mask: Option<Vec<bool>> = prep.ea_train_only.then(|| {
            let mut m = vec![false; set.n_trials()];
            fold.train.iter().for_each(|&i| m[i] = true);
            m
        });
        aligned = euclidean_align(set, mask.as_deref())?;
        &aligned
    } else {
        set
    };
    let (fit, val) = split_validation(base, &fold.train, val_fraction);
    if fit.is_empty() {
        return Err(TrainError::EmptySet("training"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySet("validation"));
    }
    if fold.test.is_empty() {
        return Err(TrainError::EmptySet("test"));
    }
    let finish = |idx: &[usize]| -> Result<EpochSet, TrainError> {
        let s = base.subset(idx)?;
        Ok(if prep.rpsd { rpsd_features(&s, &prep.rpsd_params)? } else { s })
    };
    Ok(PreparedFold { fit: finish(&fit)?, val: finish(&val)?, test: finish(&fold.test)? })
}

/// Model configuration with input extents taken from the data.
pub fn fit_config(cfg: &ModelConfig, data: &EpochSet) -> ModelConfig {
    ModelConfig { n_channels: data.n_channels(), n_samples: data.n_samples(), n_classes: data.n_classes(), ..cfg.clone() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub seed: u64,
    pub n_fit: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub train: TrainReport,
    /// Metrics of the stored 32-bit parameters on the fit trials.
    pub fit_metrics: Metrics,
    pub test: Metrics,
}

/// Fresh initialisation, training and evaluation on one fold. The
/// returned model carries 32-bit-rounded parameters, as stored on disk.
pub fn run_fold(
    set: &EpochSet,
    fold: &Fold,
    index: usize,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    prep: &Preprocessing,
) -> Result<(FoldReport, LiDsn), TrainError> {
    train_cfg.validate()?;
    let p = prepare_fold(set, fold, train_cfg.val_fraction, prep)?;
    let mut model = LiDsn::new(fit_config(model_cfg, &p.fit), train_cfg.seed)?;
    let report = train(&mut model, &p.fit, &p.val, train_cfg)?;
    model.params.round_to_f32();
    let fit_metrics = evaluate(&model, &p.fit)?;
    let test = evaluate(&model, &p.test)?;
    let r = FoldReport {
        fold: index,
        seed: train_cfg.seed,
        n_fit: p.fit.n_trials(),
        n_val: p.val.n_trials(),
        n_test: p.test.n_trials(),
        train: report,
        fit_metrics,
        test,
    };
    Ok((r, model))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean_acc: f64,
    pub std_acc: f64,
    pub mean_macro_f1: f64,
    pub std_macro_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub protocol: Protocol,
    pub folds: Vec<FoldReport>,
    pub summary: Summary,
}

/// Mean and sample standard deviation; equal values have deviation 0.
pub fn aggregate(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    if values.iter().all(|&v| v == values[0]) {
        return (values[0], 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

impl Summary {
    pub fn of(folds: &[FoldReport]) -> Self {
        let acc: Vec<f64> = folds.iter().map(|f| f.test.acc).collect();
        let f1: Vec<f64> = folds.iter().map(|f| f.test.macro_f1).collect();
        let (mean_acc, std_acc) = aggregate(&acc);
        let (mean_macro_f1, std_macro_f1) = aggregate(&f1);
        Self { mean_acc, std_acc, mean_macro_f1, std_macro_f1 }
    }
}

/// Runs every fold of the protocol in order.
pub fn run_protocol(
    set: &EpochSet,
    protocol: Protocol,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    prep: &Preprocessing,
) -> Result<ProtocolReport, TrainError> {
    let plan = make_split(set, protocol)?;
    let folds = plan
        .folds
        .iter()
        .enumerate()
        .map(|(k, f)| run_fold(set, f, k, model_cfg, train_cfg, prep).map(|(r, _)| r))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ProtocolReport { protocol, summary: Summary::of(&folds), folds })
}
