use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::model::{Conditioning, ConditionalUnet};
use super::schedule::NoiseSchedule;
use crate::condition::tokenize;
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Anything that predicts the noise in `x_t` at step `t`.
pub trait EpsPredictor {
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor>;
}

impl<F> EpsPredictor for F
where
    F: Fn(&Tensor, usize) -> Result<Tensor>,
{
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self(x_t, t)
    }
}

/// A model bound to one conditioning.
pub struct Conditioned<'a> {
    pub model: &'a ConditionalUnet,
    pub cond: Conditioning<'a>,
}

impl EpsPredictor for Conditioned<'_> {
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self.model.predict_eps(x_t, t, &self.cond)
    }
}

fn check_steps(steps: &[usize], total: usize) -> Result<()> {
    let ok = !steps.is_empty()
        && steps.last() == Some(&1)
        && steps[0] <= total
        && steps.windows(2).all(|w| w[0] > w[1]);
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "sampling steps must be strictly decreasing within 1..={total} and end at 1"
        )))
    }
}

/// Deterministic (eta = 0) DDIM trajectory from `x_start` at `steps[0]`.
/// Returns the unclamped final estimate of `x0`.
pub fn ddim_sample_from<P: EpsPredictor + ?Sized>(
    predictor: &P,
    sched: &NoiseSchedule,
    x_start: Tensor,
    steps: &[usize],
) -> Result<Tensor> {
    check_steps(steps, sched.steps())?;
    let mut x = x_start;
    for (i, &t) in steps.iter().enumerate() {
        let next = steps.get(i + 1).copied().unwrap_or(0);
        let eps = predictor.predict(&x, t)?;
        if !eps.same_shape(&x) {
            return Err(Error::Shape(format!(
                "predictor returned {:?} for {:?}",
                eps.shape(),
                x.shape()
            )));
        }
        let (ab, ab_next) = (sched.alpha_bar(t), sched.alpha_bar(next));
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (na, nb) = (ab_next.sqrt(), (1.0 - ab_next).sqrt());
        for (xv, e) in x.data_mut().iter_mut().zip(eps.data()) {
            let x0 = (*xv - sb * e) / sa;
            *xv = na * x0 + nb * e;
        }
        if !x.all_finite() {
            return Err(Error::NonFinite(format!("sampling diverged at step {t}")));
        }
    }
    Ok(x)
}

/// Standard normal starting noise for `seed`.
pub fn initial_noise(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_vec(shape, data).expect("shape")
}

/// Samples from seeded noise and maps the clamped result to 8-bit pixels.
pub fn ddim_sample<P: EpsPredictor + ?Sized>(
    predictor: &P,
    sched: &NoiseSchedule,
    shape: &[usize],
    steps: &[usize],
    seed: u64,
) -> Result<Vec<u8>> {
    let x = ddim_sample_from(predictor, sched, initial_noise(shape, seed), steps)?;
    Ok(to_pixels(&x))
}

/// `[-1, 1]` (clamped) to `[0, 255]`.
pub fn to_pixels(x: &Tensor) -> Vec<u8> {
    x.data()
        .iter()
        .map(|v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8)
        .collect()
}

/// Replaces whole-word, case-insensitive occurrences of `city` in `caption`
/// with `style_city`; appends `style_city` when `city` does not occur.
pub fn restyle_caption(caption: &str, city: &str, style_city: &str) -> String {
    let city_tokens: Vec<String> = tokenize(city).collect();
    if city_tokens.is_empty() || city.eq_ignore_ascii_case(style_city) {
        return caption.to_string();
    }
    let words: Vec<&str> = caption.split(' ').collect();
    let norm = |w: &str| tokenize(w).collect::<Vec<_>>().join(" ");
    let n = city_tokens.len();
    let target = city_tokens.join(" ");
    let mut out: Vec<String> = Vec::with_capacity(words.len());
    let mut replaced = false;
    let mut i = 0;
    while i < words.len() {
        if i + n <= words.len() && norm(&words[i..i + n].join(" ")) == target {
            let tail: String = words[i + n - 1]
                .chars()
                .rev()
                .take_while(|c| !c.is_alphanumeric())
                .collect::<Vec<_>>()
                .into_iter()
                .rev()
                .collect();
            out.push(format!("{style_city}{tail}"));
            replaced = true;
            i += n;
        } else {
            out.push(words[i].to_string());
            i += 1;
        }
    }
    let mut s = out.join(" ");
    if !replaced {
        s = format!("{s} {style_city}");
    }
    s
}

/// Per-tile sampling seed derived from a run seed and a tile key, so output
/// does not depend on tile order or worker count.
pub fn tile_seed(seed: u64, key: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(key);
    rng.random()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::{ddim_timesteps, forward_diffuse, make_schedule, ScheduleKind};

    fn sched() -> NoiseSchedule {
        make_schedule(1000, 1e-4, 2e-2, ScheduleKind::Linear).unwrap()
    }

    #[test]
    fn zero_predictor_follows_closed_form() {
        let s = sched();
        let zero = |x: &Tensor, _t: usize| Ok(Tensor::zeros(x.shape()));
        let x_t = initial_noise(&[1, 4, 4], 5);
        let steps = ddim_timesteps(1000, 10).unwrap();
        let t0 = steps[0];
        let expected: Vec<f64> = x_t.data().iter().map(|v| v / s.alpha_bar(t0).sqrt()).collect();
        let out = ddim_sample_from(&zero, &s, x_t.clone(), &steps).unwrap();
        for (a, e) in out.data().iter().zip(&expected) {
            assert!((a - e).abs() <= 1e-12 * e.abs().max(1.0));
        }
        // Constant after the first step: one extra step changes nothing.
        let first = ddim_sample_from(&zero, &s, x_t, &steps[..1].iter().copied().chain([1]).collect::<Vec<_>>()).unwrap();
        for (a, b) in out.data().iter().zip(first.data()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn perfect_noise_oracle_recovers_x0() {
        let s = sched();
        let x0 = Tensor::from_vec(&[1, 2, 2], vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        let eps = initial_noise(&[1, 2, 2], 9);
        let x1 = forward_diffuse(&x0, 1, &eps, &s).unwrap();
        let oracle = |x: &Tensor, t: usize| {
            let (a, b) = (s.alpha_bar(t).sqrt(), (1.0 - s.alpha_bar(t)).sqrt());
            let d = x.data().iter().zip(x0.data()).map(|(xv, x0v)| (xv - a * x0v) / b).collect();
            Tensor::from_vec(x.shape(), d)
        };
        let out = ddim_sample_from(&oracle, &s, x1, &[1]).unwrap();
        for (a, e) in out.data().iter().zip(x0.data()) {
            assert!((a - e).abs() < 1e-12);
        }
        let x_t = forward_diffuse(&x0, 1000, &eps, &s).unwrap();
        let out = ddim_sample_from(&oracle, &s, x_t, &ddim_timesteps(1000, 20).unwrap()).unwrap();
        for (a, e) in out.data().iter().zip(x0.data()) {
            assert!((a - e).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_step_sequences() {
        let s = sched();
        let zero = |x: &Tensor, _t: usize| Ok(Tensor::zeros(x.shape()));
        let x = Tensor::zeros(&[1, 2, 2]);
        for bad in [vec![], vec![5, 5, 1], vec![5, 2], vec![1001, 1], vec![1, 5]] {
            assert!(ddim_sample_from(&zero, &s, x.clone(), &bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let s = sched();
        let pred = |x: &Tensor, t: usize| {
            let d = x.data().iter().map(|v| (v * t as f64 * 1e-3).tanh()).collect();
            Tensor::from_vec(x.shape(), d)
        };
        let steps = ddim_timesteps(1000, 8).unwrap();
        let a = ddim_sample(&pred, &s, &[1, 8, 8], &steps, 17).unwrap();
        let b = ddim_sample(&pred, &s, &[1, 8, 8], &steps, 17).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, ddim_sample(&pred, &s, &[1, 8, 8], &steps, 18).unwrap());
    }

    #[test]
    fn pixel_mapping() {
        let x = Tensor::vector(vec![-3.0, -1.0, 0.0, 1.0, 7.0]);
        assert_eq!(to_pixels(&x), vec![0, 0, 128, 255, 255]);
    }

    #[test]
    fn caption_restyling() {
        assert_eq!(
            restyle_caption("dense blocks in Curville, 40 houses", "curville", "gridtown"),
            "dense blocks in gridtown, 40 houses"
        );
        assert_eq!(
            restyle_caption("tile of New York harbour", "new york", "jakarta"),
            "tile of jakarta harbour"
        );
        assert_eq!(restyle_caption("a tile", "curville", "gridtown"), "a tile gridtown");
        assert_eq!(restyle_caption("tile of curville", "curville", "Curville"), "tile of curville");
    }
}
