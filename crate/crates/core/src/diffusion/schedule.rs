use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// DDPM linear betas (1e-4 to 0.02 over 1000 steps) in continuous time.
    Linear,
    /// Improved-DDPM cosine schedule with per-step betas clipped at 0.999.
    Cosine,
    /// Hand-specified cumulative alphas.
    Custom,
}

const BETA_START: f64 = 1e-4;
const BETA_END: f64 = 0.02;
const REFERENCE_STEPS: f64 = 1000.0;
const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Cumulative-product noise schedule: `alphas[t]` for `t = 0..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alphas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps < 2 {
            return Err(invalid(format!("schedule needs at least 2 steps, got {steps}")));
        }
        let alphas = match kind {
            ScheduleKind::Linear => (0..=steps)
                .map(|t| {
                    let s = t as f64 / steps as f64;
                    let integral = REFERENCE_STEPS * (BETA_START * s + 0.5 * (BETA_END - BETA_START) * s * s);
                    (-integral).exp()
                })
                .collect(),
            ScheduleKind::Cosine => {
                let f = |s: f64| ((s + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2).cos().powi(2);
                let mut alphas = vec![1.0];
                for t in 1..=steps {
                    let beta = (1.0 - f(t as f64 / steps as f64) / f((t - 1) as f64 / steps as f64)).min(MAX_BETA);
                    alphas.push(alphas[t - 1] * (1.0 - beta));
                }
                alphas
            }
            ScheduleKind::Custom => return Err(invalid("custom schedules are built with from_alphas")),
        };
        let sched = Self { kind, alphas };
        sched.validate()?;
        Ok(sched)
    }

    /// Schedule from explicit cumulative alphas; `alphas[0]` must be exactly 1.
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        let sched = Self { kind: ScheduleKind::Custom, alphas };
        sched.validate()?;
        Ok(sched)
    }

    fn validate(&self) -> Result<()> {
        let a = &self.alphas;
        if a.len() < 2 {
            return Err(invalid("schedule needs at least one step"));
        }
        if a[0] != 1.0 {
            return Err(invalid(format!("alpha_0 must be exactly 1, got {}", a[0])));
        }
        if a.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
            return Err(invalid("alphas must lie in (0, 1]"));
        }
        if a.windows(2).any(|w| w[1] >= w[0]) {
            return Err(invalid("alphas must be strictly decreasing"));
        }
        Ok(())
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// Time conditioning fed to the denoiser, `t / T` scaled to `[0, 1000]`.
    pub fn time_input(&self, t: usize) -> f32 {
        (REFERENCE_STEPS * t as f64 / self.steps() as f64) as f32
    }

    /// A `stride`-times denser schedule of the same kind, used for training.
    /// Step `t` here corresponds to step `t * stride` there.
    pub fn dense(&self, stride: usize) -> Result<Self> {
        match self.kind {
            ScheduleKind::Custom if stride == 1 => Ok(self.clone()),
            ScheduleKind::Custom => Err(invalid("custom schedules cannot be densified")),
            kind => Self::new(self.steps() * stride.max(1), kind),
        }
    }

    /// Short stable identifier of this exact schedule.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}", self.kind).as_bytes());
        for a in &self.alphas {
            h.update(a.to_le_bytes());
        }
        hex::encode(h.finalize())[..16].to_string()
    }
}

/// `make_schedule(T, kind)`.
pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    NoiseSchedule::new(steps, kind)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_step_linear() {
        let s = make_schedule(2, ScheduleKind::Linear).unwrap();
        let a = s.alphas();
        assert_eq!(a.len(), 3);
        assert_eq!(a[0], 1.0);
        assert!(1.0 > a[1] && a[1] > a[2] && a[2] > 0.0);
        assert!(a[2] <= 0.05);
    }

    #[test]
    fn cosine_fifty_steps_ends_small() {
        // f(49/50)/f(0) with offset 0.008, times the clipped final factor 1 - 0.999.
        let s = make_schedule(50, ScheduleKind::Cosine).unwrap();
        let f = |x: f64| ((x + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let expected_49 = f(49.0 / 50.0) / f(0.0);
        assert!((s.alpha(49) - expected_49).abs() < 1e-12);
        assert!((s.alpha(50) - expected_49 * 0.001).abs() < 1e-12);
        assert!(s.alpha(50) <= 0.05);
    }

    #[test]
    fn rejects_single_step() {
        assert!(make_schedule(1, ScheduleKind::Linear).is_err());
        assert!(make_schedule(0, ScheduleKind::Cosine).is_err());
    }

    #[test]
    fn invariants_hold_for_many_lengths() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            for steps in [2, 3, 10, 25, 50, 1000] {
                let s = make_schedule(steps, kind).unwrap();
                assert_eq!(s.alpha(0), 1.0);
                assert!(s.alpha(steps) <= 0.05, "{kind:?} {steps}");
            }
        }
    }

    #[test]
    fn custom_validation() {
        assert!(NoiseSchedule::from_alphas(vec![1.0, 0.5]).is_ok());
        assert!(NoiseSchedule::from_alphas(vec![0.9, 0.5]).is_err());
        assert!(NoiseSchedule::from_alphas(vec![1.0, 0.5, 0.5]).is_err());
        assert!(NoiseSchedule::from_alphas(vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn dense_schedule_agrees_on_shared_steps() {
        let s = make_schedule(10, ScheduleKind::Linear).unwrap();
        let d = s.dense(5).unwrap();
        for t in 0..=10 {
            assert!((s.alpha(t) - d.alpha(5 * t)).abs() < 1e-12);
            assert_eq!(s.time_input(t), d.time_input(5 * t));
        }
        assert_ne!(s.fingerprint(), d.fingerprint());
    }
}
