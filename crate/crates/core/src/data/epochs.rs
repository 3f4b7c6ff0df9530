use super::DataError;
use crate::numeric::Tensor;

/// Labelled trials `[n_trials, C, T]` with per-trial subject ids.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochSet {
    data: Vec<f64>,
    n_trials: usize,
    n_channels: usize,
    n_samples: usize,
    labels: Vec<usize>,
    subjects: Vec<usize>,
    fs: f64,
    n_classes: usize,
    pub channel_names: Vec<String>,
    pub provenance: String,
}

impl EpochSet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        data: Vec<f64>,
        n_channels: usize,
        n_samples: usize,
        labels: Vec<usize>,
        subjects: Vec<usize>,
        fs: f64,
        n_classes: usize,
    ) -> Result<Self, DataError> {
        let n_trials = labels.len();
        if n_trials == 0 {
            return Err(DataError::ZeroExtent("n_trials"));
        }
        if n_channels == 0 {
            return Err(DataError::ZeroExtent("n_channels"));
        }
        if n_samples == 0 {
            return Err(DataError::ZeroExtent("n_samples"));
        }
        if n_classes == 0 {
            return Err(DataError::ZeroExtent("n_classes"));
        }
        if !(fs.is_finite() && fs > 0.0) {
            return Err(DataError::InvalidSampleRate(fs));
        }
        if subjects.len() != n_trials {
            return Err(DataError::Inconsistent(format!("{} subject ids for {n_trials} trials", subjects.len())));
        }
        if data.len() != n_trials * n_channels * n_samples {
            return Err(DataError::Inconsistent(format!(
                "{} values for {n_trials} x {n_channels} x {n_samples}",
                data.len()
            )));
        }
        if let Some((trial, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= n_classes) {
            return Err(DataError::LabelOutOfRange { trial, label, n_classes });
        }
        Ok(Self {
            data,
            n_trials,
            n_channels,
            n_samples,
            labels,
            subjects,
            fs,
            n_classes,
            channel_names: Vec::new(),
            provenance: String::new(),
        })
    }

    pub fn n_trials(&self) -> usize {
        self.n_trials
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn subjects(&self) -> &[usize] {
        &self.subjects
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Trial `i` as a row-major `[C, T]` slice.
    pub fn trial(&self, i: usize) -> &[f64] {
        let w = self.n_channels * self.n_samples;
        &self.data[i * w..(i + 1) * w]
    }

    pub fn trial_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.n_channels * self.n_samples;
        &mut self.data[i * w..(i + 1) * w]
    }

    /// Distinct subject ids in ascending order.
    pub fn subject_ids(&self) -> Vec<usize> {
        let mut s = self.subjects.clone();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Trial indices of one subject in file order.
    pub fn subject_trials(&self, subject: usize) -> Vec<usize> {
        (0..self.n_trials).filter(|&i| self.subjects[i] == subject).collect()
    }

    /// Stacks the given trials into a `[B, C, T]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let w = self.n_channels * self.n_samples;
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend_from_slice(self.trial(i));
        }
        Tensor::new(&[indices.len(), self.n_channels, self.n_samples], data).expect("trial extents are positive")
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self, DataError> {
        let mut s = Self::new(
            self.batch(indices).into_data(),
            self.n_channels,
            self.n_samples,
            self.labels_of(indices),
            indices.iter().map(|&i| self.subjects[i]).collect(),
            self.fs,
            self.n_classes,
        )?;
        s.channel_names = self.channel_names.clone();
        s.provenance = self.provenance.clone();
        Ok(s)
    }

    /// Same labels and subjects with replaced trial values.
    pub fn with_data(&self, data: Vec<f64>, n_channels: usize, n_samples: usize) -> Result<Self, DataError> {
        let mut s = Self::new(data, n_channels, n_samples, self.labels.clone(), self.subjects.clone(), self.fs, self.n_classes)?;
        s.channel_names = self.channel_names.clone();
        s.provenance = self.provenance.clone();
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validates_contents() {
        assert!(EpochSet::new(vec![0.0; 12], 2, 3, vec![0, 1], vec![0, 0], 100.0, 2).is_ok());
        assert!(matches!(
            EpochSet::new(vec![0.0; 12], 2, 3, vec![0, 2], vec![0, 0], 100.0, 2),
            Err(DataError::LabelOutOfRange { trial: 1, .. })
        ));
        assert!(EpochSet::new(vec![0.0; 12], 2, 3, vec![0, 1], vec![0, 0], 0.0, 2).is_err());
        assert!(EpochSet::new(vec![0.0; 11], 2, 3, vec![0, 1], vec![0, 0], 1.0, 2).is_err());
    }

    #[test]
    fn batch_and_subsets() {
        let s = EpochSet::new((0..12).map(f64::from).collect(), 1, 3, vec![0, 1, 0, 1], vec![3, 1, 3, 1], 10.0, 2).unwrap();
        assert_eq!(s.subject_ids(), vec![1, 3]);
        assert_eq!(s.subject_trials(3), vec![0, 2]);
        assert_eq!(s.batch(&[2, 0]).data(), &[6.0, 7.0, 8.0, 0.0, 1.0, 2.0]);
        let sub = s.subset(&[1, 3]).unwrap();
        assert_eq!(sub.labels(), &[1, 1]);
        assert_eq!(sub.trial(1), &[9.0, 10.0, 11.0]);
    }
}
