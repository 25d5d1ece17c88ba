//! Deterministic (DDIM) diffusion: schedule, closed-form noising, sampling
//! and inversion, plus the trainable noise predictor.

mod denoiser;
mod schedule;
mod train;

pub use denoiser::{Denoiser, DenoiserConfig, DenoiserMeta, DENOISER_KIND};
pub use schedule::{make_schedule, NoiseSchedule, ScheduleKind};
pub use train::{eval_eps_mse, train_denoiser, DiffusionTrainConfig, DiffusionTrainReport};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::SpatialTensor;

/// Generation condition. `Empty` is the reserved unconditional label used
/// for inversion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Empty,
    Class(u32),
}

/// Anything that predicts the noise in `x_t`. `conds` holds either one
/// condition for the whole batch or one per item.
pub trait NoisePredictor {
    fn predict_noise(&self, xt: &Tensor, t: usize, sched: &NoiseSchedule, conds: &[Condition]) -> Result<Tensor>;

    /// Rejects schedules the predictor was not trained for.
    fn check_schedule(&self, _sched: &NoiseSchedule) -> Result<()> {
        Ok(())
    }
}

fn check_step(t: usize, sched: &NoiseSchedule) -> Result<()> {
    if t > sched.steps() {
        return Err(invalid(format!("step {t} outside 0..={}", sched.steps())));
    }
    Ok(())
}

/// `sqrt(a_t) x0 + sqrt(1 - a_t) eps`.
pub fn forward_noise(x0: &SpatialTensor, t: usize, eps: &SpatialTensor, sched: &NoiseSchedule) -> Result<SpatialTensor> {
    check_step(t, sched)?;
    x0.require_same_shape(eps)?;
    x0.with_data(noise_tensor(x0.data(), eps.data(), sched.alpha(t))?)
}

/// [`forward_noise`] for an explicit cumulative alpha, including the `a = 0` limit.
pub fn noise_tensor(x0: &Tensor, eps: &Tensor, alpha: f64) -> Result<Tensor> {
    Ok(((x0 * alpha.sqrt())? + (eps * (1.0 - alpha).sqrt())?)?)
}

/// `(x_t - sqrt(1 - a_t) eps) / sqrt(a_t)`.
pub fn estimate_x0(xt: &SpatialTensor, t: usize, eps_pred: &SpatialTensor, sched: &NoiseSchedule) -> Result<SpatialTensor> {
    check_step(t, sched)?;
    if t == 0 {
        return Err(invalid("estimate_x0 needs t >= 1"));
    }
    xt.require_same_shape(eps_pred)?;
    xt.with_data(x0_tensor(xt.data(), eps_pred.data(), sched.alpha(t))?)
}

fn x0_tensor(xt: &Tensor, eps: &Tensor, alpha: f64) -> Result<Tensor> {
    Ok(((xt - (eps * (1.0 - alpha).sqrt())?)? / alpha.sqrt())?)
}

/// Moves `x` from the noise level of step `from` to step `to` along the
/// deterministic trajectory defined by `eps`.
fn transfer(x: &Tensor, eps: &Tensor, from: f64, to: f64) -> Result<Tensor> {
    noise_tensor(&x0_tensor(x, eps, from)?, eps, to)
}

/// One deterministic denoising step `t -> t - 1`.
pub fn ddim_step(
    xt: &SpatialTensor,
    t: usize,
    model: &dyn NoisePredictor,
    conds: &[Condition],
    sched: &NoiseSchedule,
) -> Result<SpatialTensor> {
    if t == 0 || t > sched.steps() {
        return Err(invalid(format!("ddim_step needs t in 1..={}, got {t}", sched.steps())));
    }
    model.check_schedule(sched)?;
    let eps = model.predict_noise(xt.data(), t, sched, conds)?.detach();
    xt.with_data(transfer(xt.data(), &eps, sched.alpha(t), sched.alpha(t - 1))?)
}

/// `D_theta`: denoise from step `T` down to 0.
pub fn ddim_sample(
    xt: &SpatialTensor,
    model: &dyn NoisePredictor,
    conds: &[Condition],
    sched: &NoiseSchedule,
) -> Result<SpatialTensor> {
    Ok(ddim_sample_trace(xt, model, conds, sched, &[])?.0)
}

/// [`ddim_sample`] that also returns the intermediate `x_t` for every `t` in
/// `capture` (in the order visited, i.e. descending `t`).
pub fn ddim_sample_trace(
    xt: &SpatialTensor,
    model: &dyn NoisePredictor,
    conds: &[Condition],
    sched: &NoiseSchedule,
    capture: &[usize],
) -> Result<(SpatialTensor, Vec<(usize, SpatialTensor)>)> {
    model.check_schedule(sched)?;
    let mut x = xt.clone();
    let mut trace = Vec::new();
    for t in (1..=sched.steps()).rev() {
        if capture.contains(&t) {
            trace.push((t, x.clone()));
        }
        x = ddim_step(&x, t, model, conds, sched)?;
    }
    if capture.contains(&0) {
        trace.push((0, x.clone()));
    }
    Ok((x, trace))
}

/// `D_theta^dagger`: re-estimate `x_T` from `x_0` with the empty condition.
///
/// The step `t -> t + 1` evaluates the predictor at `(x_t, t + 1)`, the same
/// time index the matching sampling step used, so inversion exactly undoes
/// sampling whenever the prediction does not depend on `x`.
pub fn ddim_invert(x0: &SpatialTensor, model: &dyn NoisePredictor, sched: &NoiseSchedule) -> Result<SpatialTensor> {
    x0.with_data(invert_tensor(x0.data(), model, sched, false)?)
}

/// Tensor-level inversion. With `track_grad` the result stays attached to
/// the graph of `x0`, so losses on it can be differentiated.
pub fn invert_tensor(x0: &Tensor, model: &dyn NoisePredictor, sched: &NoiseSchedule, track_grad: bool) -> Result<Tensor> {
    model.check_schedule(sched)?;
    let mut x = x0.clone();
    for t in 0..sched.steps() {
        let mut eps = model.predict_noise(&x, t + 1, sched, &[Condition::Empty])?;
        if !track_grad {
            eps = eps.detach();
        }
        x = transfer(&x, &eps, sched.alpha(t), sched.alpha(t + 1))?;
    }
    Ok(x)
}

/// Expands a one-or-per-item condition list to `batch` labels given the
/// index reserved for `Empty`.
pub fn condition_ids(conds: &[Condition], batch: usize, empty_id: u32) -> Result<Vec<u32>> {
    let id = |c: &Condition| match c {
        Condition::Empty => Ok(empty_id),
        Condition::Class(k) if *k < empty_id => Ok(*k),
        Condition::Class(k) => Err(invalid(format!("class {k} outside 0..{empty_id}"))),
    };
    match conds.len() {
        1 => Ok(vec![id(&conds[0])?; batch]),
        n if n == batch => conds.iter().map(id).collect(),
        n => Err(invalid(format!("{n} conditions for a batch of {batch}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Domain;

    struct ZeroNoise;
    impl NoisePredictor for ZeroNoise {
        fn predict_noise(&self, xt: &Tensor, _: usize, _: &NoiseSchedule, _: &[Condition]) -> Result<Tensor> {
            Ok(xt.zeros_like()?)
        }
    }

    fn lat(seed: u64) -> SpatialTensor {
        SpatialTensor::gaussian((2, 8, 8), &[seed], Domain::Latent).unwrap()
    }

    #[test]
    fn forward_noise_examples() {
        let s = make_schedule(10, ScheduleKind::Linear).unwrap();
        let (x0, eps) = (lat(1), lat(2));
        assert_eq!(forward_noise(&x0, 0, &eps, &s).unwrap().to_vec().unwrap(), x0.to_vec().unwrap());
        let z = SpatialTensor::zeros((1, 1, 2, 2), Domain::Latent).unwrap();
        let ones = z.with_data(z.data().ones_like().unwrap()).unwrap();
        let v = noise_tensor(z.data(), ones.data(), 0.64).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| (x - 0.6).abs() < 1e-7));
        let limit = noise_tensor(x0.data(), eps.data(), 0.0).unwrap();
        assert_eq!(limit.flatten_all().unwrap().to_vec1::<f32>().unwrap(), eps.to_vec().unwrap());
        assert!(forward_noise(&x0, 11, &eps, &s).is_err());
        assert!(forward_noise(&x0, 1, &SpatialTensor::zeros((1, 2, 4, 4), Domain::Latent).unwrap(), &s).is_err());
    }

    #[test]
    fn estimate_x0_examples() {
        let s = make_schedule(10, ScheduleKind::Cosine).unwrap();
        let (x0, eps) = (lat(3), lat(4));
        assert!(estimate_x0(&x0, 0, &eps, &s).is_err());
        let xt = forward_noise(&x0, 5, &eps, &s).unwrap();
        assert!(estimate_x0(&xt, 5, &eps, &s).unwrap().max_abs_diff(&x0).unwrap() < 1e-5);
        let zero = x0.with_data(x0.data().zeros_like().unwrap()).unwrap();
        let got = estimate_x0(&xt, 5, &zero, &s).unwrap();
        let want = xt.with_data((xt.data() / s.alpha(5).sqrt()).unwrap()).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() < 1e-6);
    }

    #[test]
    fn zero_denoiser_first_step() {
        let s = make_schedule(4, ScheduleKind::Linear).unwrap();
        let x1 = lat(5);
        let out = ddim_step(&x1, 1, &ZeroNoise, &[Condition::Empty], &s).unwrap();
        let want = x1.with_data((x1.data() / s.alpha(1).sqrt()).unwrap()).unwrap();
        assert!(out.max_abs_diff(&want).unwrap() < 1e-6);
        assert!(ddim_step(&x1, 0, &ZeroNoise, &[Condition::Empty], &s).is_err());
        assert!(ddim_step(&x1, 5, &ZeroNoise, &[Condition::Empty], &s).is_err());
    }

    #[test]
    fn single_step_schedule_sample_is_one_step() {
        let s = NoiseSchedule::from_alphas(vec![1.0, 0.3]).unwrap();
        let x = lat(6);
        let a = ddim_sample(&x, &ZeroNoise, &[Condition::Empty], &s).unwrap();
        let b = ddim_step(&x, 1, &ZeroNoise, &[Condition::Empty], &s).unwrap();
        assert_eq!(a.to_vec().unwrap(), b.to_vec().unwrap());
    }

    #[test]
    fn condition_expansion() {
        assert_eq!(condition_ids(&[Condition::Empty], 3, 8).unwrap(), vec![8, 8, 8]);
        assert_eq!(condition_ids(&[Condition::Class(1), Condition::Empty], 2, 8).unwrap(), vec![1, 8]);
        assert!(condition_ids(&[Condition::Class(8)], 1, 8).is_err());
        assert!(condition_ids(&[Condition::Empty; 2], 3, 8).is_err());
    }
}
