use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{DataError, EpochSet};

const CV_FOLDS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "CO")]
    Co,
    #[serde(rename = "CV")]
    Cv,
    #[serde(rename = "LOSO")]
    Loso,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Co => "CO",
            Protocol::Cv => "CV",
            Protocol::Loso => "LOSO",
        })
    }
}

impl FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "CO" => Ok(Protocol::Co),
            "CV" => Ok(Protocol::Cv),
            "LOSO" => Ok(Protocol::Loso),
            _ => Err(format!("unknown protocol {s:?}, expected CO, CV or LOSO")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub protocol: Protocol,
    pub folds: Vec<Fold>,
}

/// Sizes of `k` contiguous segments of `n` items, larger ones first.
fn segment_sizes(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| n / k + usize::from(i < n % k)).collect()
}

/// File order is taken as chronological within each subject.
pub fn make_split(set: &EpochSet, protocol: Protocol) -> Result<SplitPlan, DataError> {
    let subjects = set.subject_ids();
    let per_subject: Vec<Vec<usize>> = subjects.iter().map(|&s| set.subject_trials(s)).collect();
    let folds = match protocol {
        Protocol::Co => {
            let mut fold = Fold { train: Vec::new(), test: Vec::new() };
            for (trials, &subject) in per_subject.iter().zip(&subjects) {
                if trials.len() < 2 {
                    return Err(DataError::TooFewTrials { subject, found: trials.len(), needed: 2 });
                }
                let n_train = (trials.len() * 4 / 5).clamp(1, trials.len() - 1);
                fold.train.extend_from_slice(&trials[..n_train]);
                fold.test.extend_from_slice(&trials[n_train..]);
            }
            vec![fold]
        }
        Protocol::Cv => {
            let mut folds = vec![Fold { train: Vec::new(), test: Vec::new() }; CV_FOLDS];
            for (trials, &subject) in per_subject.iter().zip(&subjects) {
                if trials.len() < CV_FOLDS {
                    return Err(DataError::TooFewTrials { subject, found: trials.len(), needed: CV_FOLDS });
                }
                let mut start = 0;
                for (k, size) in segment_sizes(trials.len(), CV_FOLDS).into_iter().enumerate() {
                    for (j, fold) in folds.iter_mut().enumerate() {
                        let seg = &trials[start..start + size];
                        if j == k { fold.test.extend_from_slice(seg) } else { fold.train.extend_from_slice(seg) }
                    }
                    start += size;
                }
            }
            folds
        }
        Protocol::Loso => {
            if subjects.len() < 2 {
                return Err(DataError::InvalidSpec("LOSO needs at least two subjects".into()));
            }
            per_subject
                .iter()
                .enumerate()
                .map(|(k, test)| Fold {
                    train: per_subject.iter().enumerate().filter(|&(j, _)| j != k).flat_map(|(_, t)| t.iter().copied()).collect(),
                    test: test.clone(),
                })
                .collect()
        }
    };
    let folds = folds
        .into_iter()
        .map(|mut f| {
            f.train.sort_unstable();
            f.test.sort_unstable();
            f
        })
        .collect();
    Ok(SplitPlan { protocol, folds })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn earliest_segments_take_the_remainder() {
        assert_eq!(segment_sizes(12, 5), vec![3, 3, 2, 2, 2]);
        assert_eq!(segment_sizes(10, 5), vec![2; 5]);
        assert_eq!(segment_sizes(9, 5), vec![2, 2, 2, 2, 1]);
    }

    #[test]
    fn protocol_names_round_trip() {
        for p in [Protocol::Co, Protocol::Cv, Protocol::Loso] {
            assert_eq!(p.to_string().parse::<Protocol>().unwrap(), p);
            assert_eq!(serde_json::to_string(&p).unwrap(), format!("\"{p}\""));
        }
        assert!("kfold".parse::<Protocol>().is_err());
    }
}
