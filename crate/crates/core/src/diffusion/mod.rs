//! Mask-and-replace discrete diffusion over codebook indices.
//!
//! Each forward step keeps a token with probability `alpha_t`, resamples it
//! uniformly over the `K` codebook classes with total probability `K beta_t`,
//! or replaces it by the absorbing MASK state (index `K`) with probability
//! `gamma_t`. The reverse process mixes the analytic posterior
//! `q(x_{t-1} | x_t, x_0)` with a learned prediction of `x_0`.

mod loss;
mod posterior;
mod schedule;

pub use loss::{vlb_loss, VlbLoss, DEFAULT_AUX_WEIGHT, MAX_ENUMERATION};
pub use posterior::{sample_categorical, DENOISER_NORM_TOL};
pub use schedule::{NoiseSchedule, TransitionMatrix};

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::vqvae::TokenSequence;

/// Default cumulative keep probability at `t = T`.
pub const DEFAULT_ALPHA_BAR_FINAL: f64 = 0.01;
/// Default cumulative mask probability at `t = T`.
pub const DEFAULT_GAMMA_BAR_FINAL: f64 = 0.9;
pub const DEFAULT_STEPS: usize = 100;

/// Predicts `p(x~_0 | x_t, y)` over the `K` ordinary classes.
pub trait X0Predictor {
    fn classes(&self) -> usize;

    /// One `L x K` row-major probability table per sequence in the batch.
    fn predict_x0(&self, xt: &[&[usize]], t: &[usize], styles: &[usize]) -> Result<Vec<Vec<f64>>>;
}

/// Ignores its input and predicts the uniform distribution.
#[derive(Clone, Copy, Debug)]
pub struct UniformPredictor {
    pub classes: usize,
}

impl X0Predictor for UniformPredictor {
    fn classes(&self) -> usize {
        self.classes
    }

    fn predict_x0(&self, xt: &[&[usize]], _t: &[usize], _styles: &[usize]) -> Result<Vec<Vec<f64>>> {
        Ok(xt
            .iter()
            .map(|s| vec![1.0 / self.classes as f64; s.len() * self.classes])
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum InitMode {
    /// Every position starts as MASK.
    #[default]
    AllMask,
    /// Every position starts as a uniformly random codebook index.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct SampleOptions {
    pub mode: InitMode,
    /// Keep only the `k` most likely `x~_0` classes before mixing.
    pub top_k: Option<usize>,
}

fn truncate_top_k(row: &mut [f64], k: usize) {
    if k == 0 || k >= row.len() {
        return;
    }
    let mut sorted: Vec<f64> = row.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let threshold = sorted[k - 1];
    let mut kept = 0;
    for v in row.iter_mut() {
        if *v >= threshold && kept < k {
            kept += 1;
        } else {
            *v = 0.0;
        }
    }
    let z: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= z);
}

/// Ancestral sampling of one sequence per entry of `styles`, from `t = T` down to 1.
pub fn sample_batch<P, R>(
    predictor: &P,
    styles: &[usize],
    len: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
    options: SampleOptions,
) -> Result<Vec<TokenSequence>>
where
    P: X0Predictor + ?Sized,
    R: Rng + ?Sized,
{
    let k = schedule.classes();
    if predictor.classes() != k {
        return Err(Error::Config("predictor and schedule disagree on K".into()));
    }
    let mut xs: Vec<Vec<usize>> = styles
        .iter()
        .map(|_| match options.mode {
            InitMode::AllMask => vec![schedule.mask(); len],
            InitMode::Random => (0..len).map(|_| rng.random_range(0..k)).collect(),
        })
        .collect();
    for t in (1..=schedule.steps()).rev() {
        let views: Vec<&[usize]> = xs.iter().map(|x| x.as_slice()).collect();
        let ts = vec![t; xs.len()];
        let mut preds = predictor.predict_x0(&views, &ts, styles)?;
        for (x, probs) in xs.iter_mut().zip(preds.iter_mut()) {
            if let Some(top) = options.top_k {
                for row in probs.chunks_mut(k) {
                    truncate_top_k(row, top);
                }
            }
            let reverse = schedule.p_reverse_step(x, probs, t)?;
            for (slot, dist) in x.iter_mut().zip(&reverse) {
                *slot = sample_categorical(dist, rng);
            }
        }
    }
    xs.into_iter()
        .zip(styles)
        .map(|(tokens, &style)| {
            let masked = tokens.iter().filter(|&&t| t == schedule.mask()).count();
            if masked > 0 {
                return Err(Error::MaskRemaining(masked));
            }
            Ok(TokenSequence::new(tokens, Some(style)))
        })
        .collect()
}

/// Samples a single sequence for `style`.
pub fn sample<P, R>(
    predictor: &P,
    style: usize,
    len: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
    options: SampleOptions,
) -> Result<TokenSequence>
where
    P: X0Predictor + ?Sized,
    R: Rng + ?Sized,
{
    Ok(sample_batch(predictor, &[style], len, schedule, rng, options)?.remove(0))
}
