//! Noise schedules, the closed-form forward process, posterior statistics,
//! v-parameterization conversions, and the training loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// The beta / alpha-bar tables defining the diffusion chain.
/// `alpha_bar` has T+1 entries with `alpha_bar[0] = 1`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

/// Loss weighting mode. `UniformV` is plain MSE in v-space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    #[default]
    UniformV,
    Snr,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossConfig {
    pub weighting: LossWeighting,
}

/// Builds a schedule. The linear ramp is scaled by 1000/T so shorter chains
/// keep the same terminal alpha-bar as the conventional 1000-step table.
pub fn make_schedule(steps: usize, kind: ScheduleKind, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::Config(format!(
            "invalid beta bounds: need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => {
            let scale = 1000.0 / steps as f64;
            (0..steps)
                .map(|t| {
                    let frac = if steps > 1 { t as f64 / (steps - 1) as f64 } else { 0.0 };
                    (scale * (beta_min + frac * (beta_max - beta_min))).min(0.999)
                })
                .collect()
        }
        ScheduleKind::Cosine => {
            // betas from the squared-cosine alpha-bar curve, clipped
            let s = 0.008;
            let f = |t: f64| ((t / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            (0..steps)
                .map(|t| (1.0 - f((t + 1) as f64) / f(t as f64)).clamp(beta_min, 0.999))
                .collect()
        }
    };
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    let mut prod = 1.0f64;
    for &b in &beta {
        prod *= 1.0 - b;
        alpha_bar.push(prod);
    }
    let sched = NoiseSchedule { steps, beta, alpha_bar };
    sched.validate()?;
    Ok(sched)
}

/// Schedule from an explicit beta table (used by tests and toy setups).
pub fn schedule_from_betas(beta: Vec<f64>) -> Result<NoiseSchedule> {
    let steps = beta.len();
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    let mut prod = 1.0f64;
    for &b in &beta {
        prod *= 1.0 - b;
        alpha_bar.push(prod);
    }
    let sched = NoiseSchedule { steps, beta, alpha_bar };
    sched.validate()?;
    Ok(sched)
}

impl NoiseSchedule {
    fn validate(&self) -> Result<()> {
        for (t, &b) in self.beta.iter().enumerate() {
            if !(0.0 < b && b < 1.0) {
                return Err(Error::Config(format!("beta[{t}] = {b} outside (0,1)")));
            }
        }
        if self.alpha_bar[0] != 1.0 {
            return Err(Error::Config("alpha_bar[0] must be 1".into()));
        }
        for t in 1..self.alpha_bar.len() {
            if self.alpha_bar[t] >= self.alpha_bar[t - 1] {
                return Err(Error::Config(format!("alpha_bar not strictly decreasing at t={t}")));
            }
        }
        Ok(())
    }

    pub fn check_t(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps {
            return Err(Error::Contract(format!(
                "diffusion step {t} outside [{lo}, {}]",
                self.steps
            )));
        }
        Ok(())
    }

    pub fn alpha_bar_f32(&self, t: usize) -> f32 {
        self.alpha_bar[t] as f32
    }
}

/// Closed-form forward marginal: x_t = sqrt(a_bar_t) x0 + sqrt(1 - a_bar_t) eps.
/// t = 0 returns x0 exactly.
pub fn forward_marginal(x0: &Tensor, t: usize, noise: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t, 0)?;
    x0.same_shape(noise, "forward_marginal")?;
    if t == 0 {
        return Ok(x0.detach());
    }
    let ab = sched.alpha_bar[t];
    let a = ab.sqrt() as f32;
    let b = (1.0 - ab).sqrt() as f32;
    x0.mul_scalar(a)?.add(&noise.mul_scalar(b)?)
}

/// Forward process posterior q(x_{t-1} | x_t, x0): returns (mean, variance).
pub fn posterior_mean_var(x_t: &Tensor, x0: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<(Tensor, f64)> {
    if t == 0 {
        return Err(Error::Contract("posterior undefined at t = 0".into()));
    }
    sched.check_t(t, 1)?;
    x_t.same_shape(x0, "posterior_mean_var")?;
    let ab_t = sched.alpha_bar[t];
    let ab_prev = sched.alpha_bar[t - 1];
    let beta_t = sched.beta[t - 1];
    let alpha_t = 1.0 - beta_t;
    let coef_x0 = ab_prev.sqrt() * beta_t / (1.0 - ab_t);
    let coef_xt = alpha_t.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
    let var = beta_t * (1.0 - ab_prev) / (1.0 - ab_t);
    let mean = x0
        .mul_scalar(coef_x0 as f32)?
        .add(&x_t.mul_scalar(coef_xt as f32)?)?;
    Ok((mean, var))
}

/// v target: v = sqrt(a_bar_t) eps - sqrt(1 - a_bar_t) x0.
pub fn to_v(x0: &Tensor, noise: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t, 0)?;
    x0.same_shape(noise, "to_v")?;
    let ab = sched.alpha_bar[t];
    let a = ab.sqrt() as f32;
    let b = (1.0 - ab).sqrt() as f32;
    noise.mul_scalar(a)?.sub(&x0.mul_scalar(b)?)
}

/// Inverts the v-parameterization at a known z_t:
/// x0_hat = sqrt(a_bar_t) z_t - sqrt(1 - a_bar_t) v,
/// eps_hat = sqrt(1 - a_bar_t) z_t + sqrt(a_bar_t) v.
pub fn from_v(z_t: &Tensor, v: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<(Tensor, Tensor)> {
    sched.check_t(t, 0)?;
    z_t.same_shape(v, "from_v")?;
    let ab = sched.alpha_bar[t];
    let a = ab.sqrt() as f32;
    let b = (1.0 - ab).sqrt() as f32;
    let x0 = z_t.mul_scalar(a)?.sub(&v.mul_scalar(b)?)?;
    let eps = z_t.mul_scalar(b)?.add(&v.mul_scalar(a)?)?;
    Ok((x0, eps))
}

/// Per-example training loss in v-space: mean of lambda_t (v - v_hat)^2.
pub fn training_loss(
    v_hat: &Tensor,
    x0: &Tensor,
    noise: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    cfg: &LossConfig,
) -> Result<Tensor> {
    v_hat.same_shape(x0, "training_loss")?;
    let v = to_v(x0, noise, t, sched)?;
    let diff = v.sub(v_hat)?;
    let mse = diff.mul(&diff)?.mean_all()?;
    let lambda = match cfg.weighting {
        LossWeighting::UniformV => 1.0,
        LossWeighting::Snr => {
            // SNR weighting relative to v-space: lambda = snr / (snr + 1)
            let ab = sched.alpha_bar[t];
            (ab / (1.0 - ab) / (ab / (1.0 - ab) + 1.0)) as f32
        }
    };
    if lambda == 1.0 {
        Ok(mse)
    } else {
        mse.mul_scalar(lambda)
    }
}
