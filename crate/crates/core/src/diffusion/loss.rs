use alloc::format;
use alloc::vec::Vec;

use super::schedule::NoiseSchedule;
use super::X0Predictor;
use crate::error::{Error, Result};
use crate::numerics::{categorical_kl, Graph, Tensor, Var};
use crate::vqvae::TokenSequence;

/// Upper bound on `(K + 1)^L` for exhaustive VLB evaluation.
pub const MAX_ENUMERATION: usize = 1 << 20;

/// Default weight of the auxiliary x~_0 cross-entropy term.
pub const DEFAULT_AUX_WEIGHT: f64 = 1e-2;

impl NoiseSchedule {
    /// `sum_pos KL(q(x_T | x_0) || p(x_T))`.
    pub fn prior_kl(&self, x0: &TokenSequence) -> Result<f64> {
        let prior = self.prior();
        x0.tokens
            .iter()
            .map(|&x| categorical_kl(&self.cumulative_marginal(self.steps(), x)?, &prior))
            .sum()
    }

    /// `sum_pos KL(q(x_{t-1} | x_t, x_0) || p_theta(x_{t-1} | x_t))` for one
    /// observed `x_t`; at `t = 1` this is `-log p_theta(x_0 | x_1)`.
    pub fn vlb_term(&self, x0: &TokenSequence, xt: &[usize], x0_probs: &[f64], t: usize) -> Result<f64> {
        x0.check_clean(self.mask())?;
        let reverse = self.p_reverse_step(xt, x0_probs, t)?;
        let mut total = 0.0;
        for ((&x, &x0v), p) in xt.iter().zip(&x0.tokens).zip(&reverse) {
            let q = self.q_posterior(x, x0v, t)?;
            let norm: f64 = p.iter().sum();
            let p: Vec<f64> = p.iter().map(|v| v / norm).collect();
            total += categorical_kl(&q, &p)?;
        }
        Ok(total)
    }

    /// Exact VLB of `x0` under `predictor`, enumerating every `x_t` sequence.
    pub fn exact_vlb<P: X0Predictor + ?Sized>(
        &self,
        x0: &TokenSequence,
        style: usize,
        predictor: &P,
    ) -> Result<f64> {
        x0.check_clean(self.mask())?;
        let n = self.classes() + 1;
        let len = x0.len();
        let count = (0..len).try_fold(1usize, |acc, _| acc.checked_mul(n).filter(|&c| c <= MAX_ENUMERATION));
        let count = count.ok_or_else(|| {
            Error::Config(format!("(K+1)^L too large to enumerate for K + 1 = {n}, L = {len}"))
        })?;
        let mut vlb = self.prior_kl(x0)?;
        let mut xt = alloc::vec![0usize; len];
        for t in 1..=self.steps() {
            let marginals: Vec<Vec<f64>> = x0
                .tokens
                .iter()
                .map(|&x| self.cumulative_marginal(t, x))
                .collect::<Result<_>>()?;
            for code in 0..count {
                let mut c = code;
                let mut weight = 1.0;
                for (pos, slot) in xt.iter_mut().enumerate() {
                    *slot = c % n;
                    c /= n;
                    weight *= marginals[pos][*slot];
                }
                if weight == 0.0 {
                    continue;
                }
                let probs = predictor.predict_x0(&[&xt], &[t], &[style])?.remove(0);
                vlb += weight * self.vlb_term(x0, &xt, &probs, t)?;
            }
        }
        Ok(vlb)
    }
}

/// Differentiable stochastic VLB estimate for a batch.
#[derive(Clone, Copy, Debug)]
pub struct VlbLoss {
    pub total: Var,
    /// Unweighted KL part, summed over positions and averaged over the batch.
    pub kl: Var,
    pub aux: Var,
    /// Constant prior term, averaged over the batch.
    pub prior: f64,
}

/// Loss for denoiser `logits[batch * L, K]` given clean `x0`, corrupted `xt`
/// and their timesteps: `prior + T * KL_t + aux_weight * CE(x~_0, x_0)`, each
/// summed over positions and averaged over the batch. Scaling the single-step
/// KL by `T` makes it an unbiased estimate of the full sum under uniform `t`.
pub fn vlb_loss(
    g: &mut Graph,
    logits: Var,
    schedule: &NoiseSchedule,
    x0: &[TokenSequence],
    xt: &[TokenSequence],
    ts: &[usize],
    aux_weight: f64,
) -> Result<VlbLoss> {
    let k = schedule.classes();
    let n = k + 1;
    let batch = x0.len();
    if batch == 0 || xt.len() != batch || ts.len() != batch {
        return Err(Error::Shape("vlb_loss batch sizes disagree".into()));
    }
    let len = x0[0].len();
    let rows = batch * len;
    if g.shape(logits) != [rows, k] {
        return Err(Error::Shape(format!(
            "logits {:?}, expected [{rows}, {k}]",
            g.shape(logits)
        )));
    }
    let mut mix = Vec::with_capacity(rows * k * n);
    let mut target = Vec::with_capacity(rows * n);
    let mut flat_x0 = Vec::with_capacity(rows);
    let mut prior = 0.0;
    for b in 0..batch {
        x0[b].check_clean(schedule.mask())?;
        xt[b].check_range(schedule.mask())?;
        if x0[b].len() != len || xt[b].len() != len {
            return Err(Error::Shape("sequences in a batch must share a length".into()));
        }
        let t = ts[b];
        schedule.check_step(t)?;
        prior += schedule.prior_kl(&x0[b])?;
        let mut cache: Vec<Option<Vec<f64>>> = alloc::vec![None; n];
        for (&x, &c) in xt[b].tokens.iter().zip(&x0[b].tokens) {
            if cache[x].is_none() {
                cache[x] = Some(schedule.posterior_matrix(x, t)?);
            }
            let m = cache[x].as_ref().unwrap();
            mix.extend_from_slice(m);
            target.extend_from_slice(&m[c * n..(c + 1) * n]);
            flat_x0.push(c);
        }
    }
    let probs = g.softmax(logits, 1)?;
    let p3 = g.reshape(probs, [rows, 1, k])?;
    let m = g.constant(Tensor::new([rows, k, n], mix)?);
    let rev = g.bmm(p3, m)?;
    let rev = g.reshape(rev, [rows, n])?;
    let q = g.constant(Tensor::new([rows, n], target)?);
    let kl_sum = g.kl_div(q, rev)?;
    let kl = g.scale(kl_sum, 1.0 / batch as f64)?;
    let t_max = schedule.steps() as f64;
    let weighted = g.scale(kl, t_max)?;
    let ce = g.cross_entropy(logits, &flat_x0)?;
    let aux = g.scale(ce, len as f64)?;
    let aux_scaled = g.scale(aux, aux_weight)?;
    let total = g.add(weighted, aux_scaled)?;
    let prior = prior / batch as f64;
    let prior_node = g.constant(Tensor::scalar(prior));
    let total = g.add(total, prior_node)?;
    if !g.value(total).item().is_finite() {
        return Err(Error::NanLoss { t: ts[0] });
    }
    Ok(VlbLoss {
        total,
        kl,
        aux,
        prior,
    })
}
