//! Forward noising, the noise-prediction loss and ancestral sampling.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use ross_autograd::{Graph, Scalar, Tensor, Var};

use crate::error::{Result, RossError};
use crate::schedules::BetaSchedule;

/// A noised batch together with the noise that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisySample<T> {
    /// `[B, N, d_lat]` (or any shape whose leading axis is the batch).
    pub z_t: Tensor<T>,
    /// One 1-indexed timestep per batch item.
    pub t: Vec<usize>,
    pub eps: Tensor<T>,
}

/// Anything that predicts the injected noise from `(z_t, cond, t)`.
pub trait NoisePredictor<T: Scalar> {
    /// `z_t` is `[B, N, d_lat]`, `cond` is `[B, N_c, d_c]`, `t` has length `B`.
    fn predict(&self, g: &mut Graph<T>, z_t: Var, cond: Var, t: &[usize]) -> Result<Var>;
}

/// Wraps a plain function as a non-differentiable predictor.
pub struct FnPredictor<F>(pub F);

impl<T, F> NoisePredictor<T> for FnPredictor<F>
where
    T: Scalar,
    F: Fn(&Tensor<T>, &Tensor<T>, &[usize]) -> Result<Tensor<T>>,
{
    fn predict(&self, g: &mut Graph<T>, z_t: Var, cond: Var, t: &[usize]) -> Result<Var> {
        let out = (self.0)(g.value(z_t), g.value(cond), t)?;
        Ok(g.constant(out))
    }
}

pub fn standard_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    Tensor::randn(shape, 1.0, rng)
}

fn check_t(t: usize, schedule: &BetaSchedule) -> Result<()> {
    if t == 0 || t > schedule.steps() {
        return Err(RossError::TimestepOutOfRange {
            t,
            max: schedule.steps(),
        });
    }
    Ok(())
}

/// `z_t = sqrt(ᾱ_t) z_0 + sqrt(1 - ᾱ_t) ε` for one timestep shared by the whole tensor.
pub fn q_sample<T: Scalar>(z0: &Tensor<T>, t: usize, eps: &Tensor<T>, schedule: &BetaSchedule) -> Result<NoisySample<T>> {
    if z0.shape() != eps.shape() {
        return Err(RossError::shape(format!(
            "z0 {:?} vs eps {:?}",
            z0.shape(),
            eps.shape()
        )));
    }
    check_t(t, schedule)?;
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
    let z_t = z0.zip_map(eps, |x, e| a * x + b * e)?;
    let lead = z0.shape().first().copied().unwrap_or(1);
    Ok(NoisySample {
        z_t,
        t: vec![t; lead],
        eps: eps.clone(),
    })
}

/// Per-item closed form: item `b` of the leading axis uses timestep `t[b]`.
pub fn q_sample_batch<T: Scalar>(
    z0: &Tensor<T>,
    t: &[usize],
    eps: &Tensor<T>,
    schedule: &BetaSchedule,
) -> Result<NoisySample<T>> {
    if z0.shape() != eps.shape() {
        return Err(RossError::shape(format!(
            "z0 {:?} vs eps {:?}",
            z0.shape(),
            eps.shape()
        )));
    }
    let batch = z0.shape().first().copied().unwrap_or(1);
    if t.len() != batch {
        return Err(RossError::shape(format!("{} timesteps for batch {batch}", t.len())));
    }
    let per = z0.numel() / batch.max(1);
    let mut z_t = z0.clone();
    for (b, &tb) in t.iter().enumerate() {
        check_t(tb, schedule)?;
        let ab = schedule.alpha_bar(tb)?;
        let (ca, cb) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
        let range = b * per..(b + 1) * per;
        for (z, &e) in z_t.data_mut()[range.clone()].iter_mut().zip(&eps.data()[range]) {
            *z = ca * *z + cb * e;
        }
    }
    Ok(NoisySample {
        z_t,
        t: t.to_vec(),
        eps: eps.clone(),
    })
}

/// One forward kernel step `z_t ~ N(sqrt(1 - β_t) z_{t-1}, β_t I)`.
pub fn q_step<T: Scalar, R: Rng + ?Sized>(
    z_prev: &Tensor<T>,
    t: usize,
    schedule: &BetaSchedule,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let beta = schedule.beta(t)?;
    let (a, b) = ((1.0 - beta).sqrt(), beta.sqrt());
    let data = z_prev
        .data()
        .iter()
        .map(|&z| {
            let e: f64 = StandardNormal.sample(rng);
            T::lit(a) * z + T::lit(b * e)
        })
        .collect();
    Ok(Tensor::from_vec(z_prev.shape(), data)?)
}

/// Draws `t ~ U{1..T}` per item, then `ε ~ N(0, I)`, in that order.
pub fn sample_noise<T: Scalar, R: Rng + ?Sized>(
    z0: &Tensor<T>,
    schedule: &BetaSchedule,
    rng: &mut R,
) -> Result<NoisySample<T>> {
    let batch = z0.shape().first().copied().unwrap_or(1);
    let t: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=schedule.steps())).collect();
    let eps = standard_normal(z0.shape(), rng);
    q_sample_batch(z0, &t, &eps, schedule)
}

/// Mean squared error between the predicted and the true noise, averaged
/// over every token and latent channel. `z0` is treated as a fixed target.
pub fn denoising_loss<T: Scalar, P: NoisePredictor<T> + ?Sized, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    predictor: &P,
    z0: &Tensor<T>,
    cond: Var,
    schedule: &BetaSchedule,
    rng: &mut R,
) -> Result<(Var, NoisySample<T>)> {
    let sample = sample_noise(z0, schedule, rng)?;
    let loss = denoising_loss_at(g, predictor, &sample, cond)?;
    Ok((loss, sample))
}

/// The loss for an already drawn `(z_t, t, ε)`.
pub fn denoising_loss_at<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    g: &mut Graph<T>,
    predictor: &P,
    sample: &NoisySample<T>,
    cond: Var,
) -> Result<Var> {
    let z_t = g.constant(sample.z_t.clone());
    let pred = predictor.predict(g, z_t, cond, &sample.t)?;
    if g.shape(pred) != sample.eps.shape() {
        return Err(RossError::shape(format!(
            "predictor output {:?} vs noise {:?}",
            g.shape(pred),
            sample.eps.shape()
        )));
    }
    let eps = g.constant(sample.eps.clone());
    Ok(g.mse(pred, eps)?)
}

/// `z_{t-1} = (z_t - (1-α_t)/sqrt(1-ᾱ_t) ε̂) / sqrt(α_t) + σ_t ε'`, with no
/// added noise at `t = 1`.
pub fn p_sample_step<T: Scalar, P: NoisePredictor<T> + ?Sized, R: Rng + ?Sized>(
    predictor: &P,
    z_t: &Tensor<T>,
    t: usize,
    cond: &Tensor<T>,
    schedule: &BetaSchedule,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let noise = if t > 1 { Some(standard_normal(z_t.shape(), rng)) } else { None };
    p_sample_step_with(predictor, z_t, t, cond, schedule, noise.as_ref())
}

/// One reverse step with caller-supplied `ε'` (ignored at `t = 1`).
pub fn p_sample_step_with<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    predictor: &P,
    z_t: &Tensor<T>,
    t: usize,
    cond: &Tensor<T>,
    schedule: &BetaSchedule,
    noise: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    check_t(t, schedule)?;
    let batch = z_t.shape().first().copied().unwrap_or(1);
    let mut g = Graph::new();
    let zv = g.constant(z_t.clone());
    let cv = g.constant(cond.clone());
    let pred = predictor.predict(&mut g, zv, cv, &vec![t; batch])?;
    let eps_hat = g.value(pred);
    if eps_hat.shape() != z_t.shape() {
        return Err(RossError::shape(format!(
            "predictor output {:?} vs z_t {:?}",
            eps_hat.shape(),
            z_t.shape()
        )));
    }
    let (alpha, alpha_bar, sigma) = (schedule.alpha(t)?, schedule.alpha_bar(t)?, schedule.sigma(t)?);
    let beta = 1.0 - alpha;
    let coef = if beta == 0.0 { 0.0 } else { beta / (1.0 - alpha_bar).sqrt() };
    let inv = T::lit(1.0 / alpha.sqrt());
    let coef = T::lit(coef);
    let mut out = z_t.zip_map(eps_hat, |z, e| inv * (z - coef * e))?;
    if t > 1 {
        let noise = noise.ok_or_else(|| RossError::config("reverse step above t = 1 needs noise"))?;
        let s = T::lit(sigma);
        out = out.zip_map(noise, |o, n| o + s * n)?;
    }
    Ok(out)
}

/// Ancestral sampling from `z_T ~ N(0, I)` down to `z_0`.
pub fn sample_loop<T: Scalar, P: NoisePredictor<T> + ?Sized, R: Rng + ?Sized>(
    predictor: &P,
    cond: &Tensor<T>,
    schedule: &BetaSchedule,
    rng: &mut R,
    shape: &[usize],
) -> Result<Tensor<T>> {
    let z_t = standard_normal(shape, rng);
    sample_loop_from(predictor, z_t, cond, schedule, rng)
}

/// Ancestral sampling from a given `z_T`.
pub fn sample_loop_from<T: Scalar, P: NoisePredictor<T> + ?Sized, R: Rng + ?Sized>(
    predictor: &P,
    mut z: Tensor<T>,
    cond: &Tensor<T>,
    schedule: &BetaSchedule,
    rng: &mut R,
) -> Result<Tensor<T>> {
    for t in (1..=schedule.steps()).rev() {
        z = p_sample_step(predictor, &z, t, cond, schedule, rng)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedules::{make_beta_schedule, ScheduleKind, SigmaMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_predictor() -> FnPredictor<impl Fn(&Tensor<f64>, &Tensor<f64>, &[usize]) -> Result<Tensor<f64>>> {
        FnPredictor(|z: &Tensor<f64>, _: &Tensor<f64>, _: &[usize]| Ok(Tensor::zeros(z.shape())))
    }

    #[test]
    fn q_sample_examples() {
        let zero = BetaSchedule::from_betas(vec![0.0; 3], SigmaMode::Beta).unwrap();
        let z0 = Tensor::<f64>::from_vec(&[1, 2, 1], vec![0.3, -0.7]).unwrap();
        let eps = Tensor::from_vec(&[1, 2, 1], vec![1.5, 2.0]).unwrap();
        assert_eq!(q_sample(&z0, 2, &eps, &zero).unwrap().z_t, z0);

        let quarter = BetaSchedule::from_betas(vec![0.25], SigmaMode::Beta).unwrap();
        let zeros = Tensor::zeros(&[1, 2, 1]);
        let s = q_sample(&zeros, 1, &eps, &quarter).unwrap();
        assert_eq!(s.z_t.data(), &[0.75, 1.0]);

        let three_quarters = BetaSchedule::from_betas(vec![0.75], SigmaMode::Beta).unwrap();
        let one = Tensor::<f64>::from_vec(&[1, 1, 1], vec![1.0]).unwrap();
        let s = q_sample(&one, 1, &Tensor::zeros(&[1, 1, 1]), &three_quarters).unwrap();
        assert_eq!(s.z_t.data(), &[0.5]);
    }

    #[test]
    fn q_sample_errors() {
        let s = make_beta_schedule(ScheduleKind::Linear, 10, 1e-4, 0.02).unwrap();
        let a = Tensor::<f32>::zeros(&[1, 2, 2]);
        let b = Tensor::<f32>::zeros(&[1, 2, 3]);
        assert!(matches!(q_sample(&a, 1, &b, &s), Err(RossError::Shape(_))));
        assert!(matches!(
            q_sample(&a, 11, &a, &s),
            Err(RossError::TimestepOutOfRange { .. })
        ));
        assert!(q_sample(&a, 0, &a, &s).is_err());
    }

    #[test]
    fn single_step_reverse_with_zero_prediction() {
        let s = BetaSchedule::from_betas(vec![0.36], SigmaMode::Beta).unwrap();
        let z = Tensor::<f64>::from_vec(&[1, 1, 1], vec![2.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = p_sample_step(&zero_predictor(), &z, 1, &z, &s, &mut rng).unwrap();
        assert!((out.data()[0] - 2.0 / 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_beta_step_is_identity() {
        let s = BetaSchedule::from_betas(vec![0.0, 0.0], SigmaMode::Beta).unwrap();
        let z = Tensor::<f64>::from_vec(&[1, 3, 1], vec![1.0, -2.0, 0.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = p_sample_step(&zero_predictor(), &z, 2, &z, &s, &mut rng).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let s = make_beta_schedule(ScheduleKind::Linear, 20, 1e-4, 0.02).unwrap();
        let cond = Tensor::<f32>::zeros(&[1, 1, 1]);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = FnPredictor(|z: &Tensor<f32>, _: &Tensor<f32>, _: &[usize]| Ok(z.scale(0.1)));
            sample_loop(&p, &cond, &s, &mut rng, &[2, 3, 4]).unwrap()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }
}
