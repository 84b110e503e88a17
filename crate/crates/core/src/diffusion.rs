//! Noise schedule, forward noising, and reverse steps.
//!
//! Step indices are 1-based: `n = 1..=N`. `alpha_bar(0)` is 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosteriorParams {
    /// Coefficient on the predicted clean sample.
    pub coef_x0: f64,
    /// Coefficient on the current noisy sample.
    pub coef_xn: f64,
    pub variance: f64,
}

/// Linear beta schedule from `beta_start` to `beta_end` over `n` steps.
pub fn make_schedule(n: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if n == 0 {
        return Err(Error::Config("diffusion needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end) {
        return Err(Error::Config(format!(
            "betas must satisfy 0 < {beta_start} <= {beta_end} < 1"
        )));
    }
    let betas: Vec<f64> = (0..n)
        .map(|i| {
            if n == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (n - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(n);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(DiffusionSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, n: usize) -> f64 {
        self.betas[n - 1]
    }

    pub fn alpha(&self, n: usize) -> f64 {
        self.alphas[n - 1]
    }

    pub fn alpha_bar(&self, n: usize) -> f64 {
        if n == 0 {
            1.0
        } else {
            self.alpha_bars[n - 1]
        }
    }

    fn check_step(&self, n: usize) -> Result<()> {
        if n == 0 || n > self.steps() {
            return Err(Error::Config(format!(
                "step {n} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `x_n = sqrt(abar_n) x0 + sqrt(1 - abar_n) eps`, elementwise.
    pub fn q_sample(&self, x0: &[f64], n: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_step(n)?;
        if x0.len() != eps.len() {
            return Err(Error::Shape(format!(
                "q_sample: {} values vs {} noise values",
                x0.len(),
                eps.len()
            )));
        }
        let ab = self.alpha_bar(n);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
    }

    pub fn posterior(&self, n: usize) -> Result<PosteriorParams> {
        self.check_step(n)?;
        let ab = self.alpha_bar(n);
        let ab_prev = self.alpha_bar(n - 1);
        let beta = self.beta(n);
        Ok(PosteriorParams {
            coef_x0: ab_prev.sqrt() * beta / (1.0 - ab),
            coef_xn: self.alpha(n).sqrt() * (1.0 - ab_prev) / (1.0 - ab),
            variance: (1.0 - ab_prev) / (1.0 - ab) * beta,
        })
    }

    /// One ancestral step `x_n -> x_{n-1}` given the model's clean estimate.
    /// At `n = 1` the estimate itself is returned.
    pub fn posterior_step(&self, xn: &[f64], x0_hat: &[f64], n: usize, z: &[f64]) -> Result<Vec<f64>> {
        self.check_step(n)?;
        if xn.len() != x0_hat.len() || xn.len() != z.len() {
            return Err(Error::Shape("posterior_step: length mismatch".into()));
        }
        if n == 1 {
            return Ok(x0_hat.to_vec());
        }
        let p = self.posterior(n)?;
        let sd = p.variance.sqrt();
        Ok(xn
            .iter()
            .zip(x0_hat)
            .zip(z)
            .map(|((x, h), z)| p.coef_x0 * h + p.coef_xn * x + sd * z)
            .collect())
    }

    /// Implicit step from `n` to `n_prev < n`. `eta = 0` is deterministic;
    /// `eta = 1` with `n_prev = n - 1` matches the ancestral posterior.
    pub fn ddim_step(
        &self,
        xn: &[f64],
        x0_hat: &[f64],
        n: usize,
        n_prev: usize,
        eta: f64,
        z: &[f64],
    ) -> Result<Vec<f64>> {
        self.check_step(n)?;
        if n_prev >= n {
            return Err(Error::Config(format!("ddim step {n} -> {n_prev} is not decreasing")));
        }
        if xn.len() != x0_hat.len() || xn.len() != z.len() {
            return Err(Error::Shape("ddim_step: length mismatch".into()));
        }
        if n_prev == 0 {
            return Ok(x0_hat.to_vec());
        }
        let ab = self.alpha_bar(n);
        let ab_prev = self.alpha_bar(n_prev);
        let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).max(0.0).sqrt();
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(xn
            .iter()
            .zip(x0_hat)
            .zip(z)
            .map(|((x, h), z)| {
                let eps = (x - sa * h) / sb;
                ab_prev.sqrt() * h + dir * eps + sigma * z
            })
            .collect())
    }
}

/// Ascending strided timesteps `round(i N / K)` for `i = 1..=K`.
pub fn ddim_timesteps(n: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(Error::Config(format!("ddim steps {k} not in 1..={n}")));
    }
    let mut out: Vec<usize> = (1..=k)
        .map(|i| ((i * n) as f64 / k as f64).round() as usize)
        .collect();
    out.dedup();
    Ok(out)
}
