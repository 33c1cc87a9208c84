use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

/// Variance schedule over steps `1..=T`. Index 0 is the clean-data
/// convention `alpha_bar(0) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit per-step variances (`betas[t - 1]`).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
        }
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::InvalidArgument("betas must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidArgument("betas must be non-decreasing".into()));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Cumulative product of `1 - beta` up to `t`; `t = 0` gives 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside 0..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

pub fn make_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_1 <= beta_T < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas = match kind {
        ScheduleKind::Linear if steps == 1 => vec![beta_start],
        ScheduleKind::Linear => (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect(),
    };
    NoiseSchedule::from_betas(betas)
}

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_diffuse(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    if !x0.same_shape(eps) {
        return Err(Error::Shape(format!(
            "x0 {:?} vs noise {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| a * x + b * e)
        .collect();
    Tensor::from_vec(x0.shape(), data)
}

/// Evenly spaced strictly decreasing subsequence of `1..=T` ending at 1.
pub fn ddim_timesteps(total: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > total {
        return Err(Error::InvalidArgument(format!(
            "cannot take {count} sampling steps out of {total}"
        )));
    }
    let stride = total / count;
    Ok((0..count).rev().map(|i| 1 + i * stride).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.3, 0.3, ScheduleKind::Linear).unwrap();
        assert_eq!(s.alpha_bar(1), 0.7);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn default_schedule_nearly_destroys_signal() {
        let s = make_schedule(1000, 1e-4, 2e-2, ScheduleKind::Linear).unwrap();
        // prod(1 - beta_t) evaluated directly: ~4.0e-5
        let direct: f64 = (0..1000)
            .map(|i| 1.0 - (1e-4 + (2e-2 - 1e-4) * i as f64 / 999.0))
            .product();
        assert!((s.alpha_bar(1000) - direct).abs() < 1e-15);
        assert!(s.alpha_bar(1000) < 1e-3);
        for t in 0..1000 {
            assert!(s.alpha_bar(t + 1) < s.alpha_bar(t));
        }
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        assert!(make_schedule(0, 1e-4, 2e-2, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 2e-2, 1e-4, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.0, 1e-2, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 1e-4, 1.0, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn forward_limits() {
        let s = make_schedule(1000, 1e-4, 2e-2, ScheduleKind::Linear).unwrap();
        let x0 = Tensor::from_vec(&[1, 2, 2], vec![1.0, -1.0, 0.5, 0.0]).unwrap();
        let eps = Tensor::from_vec(&[1, 2, 2], vec![0.3, 0.2, -0.1, 2.0]).unwrap();
        assert_eq!(forward_diffuse(&x0, 0, &eps, &s).unwrap(), x0);
        let xt = forward_diffuse(&x0, 1000, &eps, &s).unwrap();
        for (a, e) in xt.data().iter().zip(eps.data()) {
            assert!((a - e).abs() < 1e-2);
        }
        assert!(forward_diffuse(&x0, 1001, &eps, &s).is_err());
    }

    #[test]
    fn forward_process_preserves_unit_variance() {
        let s = make_schedule(1000, 1e-4, 2e-2, ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let draw = |rng: &mut ChaCha8Rng| -> Tensor {
            Tensor::vector((0..n).map(|_| StandardNormal.sample(rng)).collect())
        };
        for t in [1, 250, 500, 1000] {
            let x0 = draw(&mut rng);
            let eps = draw(&mut rng);
            let xt = forward_diffuse(&x0, t, &eps, &s).unwrap();
            let mean = xt.sum() / n as f64;
            let var = xt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!((var - 1.0).abs() < 0.02, "t={t} var={var}");
        }
    }

    #[test]
    fn ddim_subsequence() {
        let ts = ddim_timesteps(1000, 50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 981);
        assert_eq!(*ts.last().unwrap(), 1);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(ddim_timesteps(10, 1).unwrap(), vec![1]);
        assert!(ddim_timesteps(10, 11).is_err());
    }
}
