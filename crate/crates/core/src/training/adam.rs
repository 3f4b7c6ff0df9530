use super::TrainError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments per parameter slot plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub hyper: AdamHyper,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(hyper: AdamHyper, sizes: &[usize]) -> Self {
        Self { hyper, m: sizes.iter().map(|&n| vec![0.0; n]).collect(), v: sizes.iter().map(|&n| vec![0.0; n]).collect(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, slot: usize) -> (&[f64], &[f64]) {
        (&self.m[slot], &self.v[slot])
    }

    /// One update over all slots in order. Gradients are checked before any
    /// parameter is touched.
    pub fn step(&mut self, slots: &mut [(&str, &mut [f64], &[f64])]) -> Result<(), TrainError> {
        if slots.len() != self.m.len() {
            return Err(TrainError::InvalidConfig(format!("{} gradient slots for {} moments", slots.len(), self.m.len())));
        }
        for (k, (name, p, g)) in slots.iter().enumerate() {
            if p.len() != self.m[k].len() || g.len() != p.len() {
                return Err(TrainError::InvalidConfig(format!("size mismatch for parameter {name}")));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFiniteGradient { param: (*name).to_string() });
            }
        }
        self.t += 1;
        let AdamHyper { lr, beta1, beta2, eps, weight_decay } = self.hyper;
        let c1 = 1.0 - beta1.powf(self.t as f64);
        let c2 = 1.0 - beta2.powf(self.t as f64);
        for (k, (_, p, g)) in slots.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for j in 0..p.len() {
                let gj = g[j] + weight_decay * p[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyper() -> AdamHyper {
        AdamHyper { lr: 1e-3, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.0 }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut adam = Adam::new(hyper(), &[1]);
        let mut p = [1.0];
        adam.step(&mut [("w", &mut p, &[1.0])]).unwrap();
        // m̂ = v̂ = 1, so the step is lr / (1 + eps).
        assert!((p[0] - (1.0 - 1e-3 / (1.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point_and_moments_decay() {
        let mut adam = Adam::new(hyper(), &[2]);
        let mut p = [0.5, -2.0];
        adam.step(&mut [("w", &mut p, &[0.3, -0.1])]).unwrap();
        let before = p;
        let (m0, v0) = (adam.moments(0).0.to_vec(), adam.moments(0).1.to_vec());
        adam.step(&mut [("w", &mut p, &[0.0, 0.0])]).unwrap();
        let (m1, v1) = adam.moments(0);
        assert!(m1.iter().zip(&m0).all(|(a, b)| a.abs() < b.abs()));
        assert!(v1.iter().zip(&v0).all(|(a, b)| a < b));
        let mut fresh = Adam::new(hyper(), &[2]);
        let mut q = before;
        fresh.step(&mut [("w", &mut q, &[0.0, 0.0])]).unwrap();
        assert_eq!(q, before);
    }

    #[test]
    fn slots_are_independent() {
        let mut adam = Adam::new(hyper(), &[1, 1]);
        let (mut a, mut b) = ([0.2], [0.2]);
        for g in [0.5, -1.5, 2.0] {
            adam.step(&mut [("a", &mut a, &[g]), ("b", &mut b, &[g])]).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut adam = Adam::new(hyper(), &[1, 1]);
        let (mut a, mut b) = ([0.0], [0.0]);
        let err = adam.step(&mut [("a", &mut a, &[0.0]), ("head.bias", &mut b, &[f64::NAN])]).unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteGradient { ref param } if param == "head.bias"));
        assert_eq!(adam.steps(), 0);
    }
}
