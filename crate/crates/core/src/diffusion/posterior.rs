use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::vqvae::TokenSequence;

/// Tolerance on the per-position normalization of denoiser outputs.
pub const DENOISER_NORM_TOL: f64 = 1e-6;

/// Draws an index from unnormalized non-negative weights.
pub fn sample_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        if u < w {
            return i;
        }
        u -= w;
        last = i;
    }
    last
}

impl NoiseSchedule {
    /// `q(x_{t-1} | x_t, x_0)` over `K + 1` states.
    pub fn q_posterior(&self, xt: usize, x0: usize, t: usize) -> Result<Vec<f64>> {
        self.check_step(t)?;
        if xt > self.mask() {
            return Err(Error::TokenRange {
                token: xt,
                position: 0,
                mask: self.mask(),
            });
        }
        let prev = self.cumulative_marginal(t - 1, x0)?;
        let mut post: Vec<f64> = prev
            .iter()
            .enumerate()
            .map(|(j, &p)| self.step_prob(t, j, xt) * p)
            .collect();
        let z: f64 = post.iter().sum();
        if !(z > 0.0) {
            return Err(Error::ZeroNormalizer { xt, x0, t });
        }
        post.iter_mut().for_each(|p| *p /= z);
        Ok(post)
    }

    /// Row `i` holds `q(x_{t-1} | x_t, x_0 = i)`; shape `K x (K + 1)`, row-major.
    pub fn posterior_matrix(&self, xt: usize, t: usize) -> Result<Vec<f64>> {
        let n = self.classes() + 1;
        let mut out = Vec::with_capacity(self.classes() * n);
        for x0 in 0..self.classes() {
            out.extend(self.q_posterior(xt, x0, t)?);
        }
        Ok(out)
    }

    /// `p(x_{t-1} | x_t) = sum_i q(x_{t-1} | x_t, i) p(x~_0 = i)` for every position.
    ///
    /// `x0_probs` is `L x K` row-major over the ordinary classes.
    pub fn p_reverse_step(&self, xt: &[usize], x0_probs: &[f64], t: usize) -> Result<Vec<Vec<f64>>> {
        self.check_step(t)?;
        let k = self.classes();
        if x0_probs.len() != xt.len() * k {
            return Err(Error::Shape(format!(
                "denoiser output has {} values, expected {} x {k}",
                x0_probs.len(),
                xt.len()
            )));
        }
        let mut cache: Vec<Option<Vec<f64>>> = vec![None; k + 1];
        let mut out = Vec::with_capacity(xt.len());
        for (pos, &x) in xt.iter().enumerate() {
            let probs = &x0_probs[pos * k..(pos + 1) * k];
            let total: f64 = probs.iter().sum();
            if (total - 1.0).abs() > DENOISER_NORM_TOL || probs.iter().any(|&p| p < 0.0) {
                return Err(Error::InvalidDistribution(format!(
                    "denoiser row {pos} sums to {total}"
                )));
            }
            if x > k {
                return Err(Error::TokenRange {
                    token: x,
                    position: pos,
                    mask: k,
                });
            }
            if cache[x].is_none() {
                cache[x] = Some(self.posterior_matrix(x, t)?);
            }
            let m = cache[x].as_ref().unwrap();
            let mut row = vec![0.0; k + 1];
            // Zero weights are skipped so a one-hot x_0 reproduces the posterior bit for bit.
            for (i, &p) in probs.iter().enumerate() {
                if p > 0.0 {
                    for (r, q) in row.iter_mut().zip(&m[i * (k + 1)..(i + 1) * (k + 1)]) {
                        *r += p * q;
                    }
                }
            }
            out.push(row);
        }
        Ok(out)
    }

    /// Samples `x_t ~ q(x_t | x_0)` independently per position.
    pub fn q_forward_sample<R: Rng + ?Sized>(
        &self,
        x0: &TokenSequence,
        t: usize,
        rng: &mut R,
    ) -> Result<TokenSequence> {
        x0.check_clean(self.mask())?;
        if t == 0 {
            return Ok(x0.clone());
        }
        let mut tokens = Vec::with_capacity(x0.len());
        for &x in &x0.tokens {
            let m = self.cumulative_marginal(t, x)?;
            tokens.push(sample_categorical(&m, rng));
        }
        Ok(TokenSequence::new(tokens, x0.style))
    }
}
