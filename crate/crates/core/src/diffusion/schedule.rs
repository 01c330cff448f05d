use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

const STEP_SUM_TOL: f64 = 1e-12;
const CUMULATIVE_SUM_TOL: f64 = 1e-10;

/// Per-step keep/replace/mask probabilities of the mask-and-replace chain.
///
/// Index 0 of every array is the identity step (`alpha = 1`), so `t` indexes
/// directly for `t = 0..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    classes: usize,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    gamma: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_bar: Vec<f64>,
    gamma_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Cumulative keep and mask probabilities interpolated linearly from
    /// `(1, 0)` at `t = 0` to `(alpha_bar_final, gamma_bar_final)` at `t = T`.
    pub fn linear(
        steps: usize,
        classes: usize,
        gamma_bar_final: f64,
        alpha_bar_final: f64,
    ) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Schedule("T must be >= 1".into()));
        }
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !open(alpha_bar_final) || !open(gamma_bar_final) || alpha_bar_final + gamma_bar_final >= 1.0 {
            return Err(Error::Schedule(format!(
                "need 0 < alpha_bar_T, gamma_bar_T < 1 with sum < 1, got {alpha_bar_final}, {gamma_bar_final}"
            )));
        }
        let frac = |t: usize| t as f64 / steps as f64;
        let alpha_bar = (0..=steps)
            .map(|t| 1.0 - frac(t) * (1.0 - alpha_bar_final))
            .collect();
        let gamma_bar = (0..=steps).map(|t| frac(t) * gamma_bar_final).collect();
        Self::from_cumulative(classes, alpha_bar, gamma_bar)
    }

    /// Recovers per-step values from cumulative curves (index 0 must be `(1, 0)`).
    pub fn from_cumulative(classes: usize, alpha_bar: Vec<f64>, gamma_bar: Vec<f64>) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Schedule("K must be >= 2".into()));
        }
        if alpha_bar.len() != gamma_bar.len() || alpha_bar.len() < 2 {
            return Err(Error::Schedule("cumulative curves need T + 1 >= 2 matching entries".into()));
        }
        if alpha_bar[0] != 1.0 || gamma_bar[0] != 0.0 {
            return Err(Error::Schedule("cumulative curves must start at (1, 0)".into()));
        }
        let steps = alpha_bar.len() - 1;
        let k = classes as f64;
        let mut alpha = vec![1.0; steps + 1];
        let mut beta = vec![0.0; steps + 1];
        let mut gamma = vec![0.0; steps + 1];
        let mut beta_bar = vec![0.0; steps + 1];
        for t in 1..=steps {
            if !(alpha_bar[t] < alpha_bar[t - 1]) {
                return Err(Error::Schedule(format!("alpha_bar not strictly decreasing at t = {t}")));
            }
            if !(gamma_bar[t] > gamma_bar[t - 1]) {
                return Err(Error::Schedule(format!("gamma_bar not strictly increasing at t = {t}")));
            }
            alpha[t] = alpha_bar[t] / alpha_bar[t - 1];
            gamma[t] = (gamma_bar[t] - gamma_bar[t - 1]) / (1.0 - gamma_bar[t - 1]);
            beta[t] = (1.0 - alpha[t] - gamma[t]) / k;
            beta_bar[t] = (1.0 - alpha_bar[t] - gamma_bar[t]) / k;
            for (name, v) in [("alpha", alpha[t]), ("beta", beta[t]), ("gamma", gamma[t])] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Schedule(format!("{name}_{t} = {v} outside [0, 1]")));
                }
            }
            if !(0.0..=1.0).contains(&beta_bar[t]) {
                return Err(Error::Schedule(format!("beta_bar_{t} = {} outside [0, 1]", beta_bar[t])));
            }
            if (alpha[t] + k * beta[t] + gamma[t] - 1.0).abs() > STEP_SUM_TOL {
                return Err(Error::Schedule(format!("step {t} probabilities do not sum to 1")));
            }
            if (alpha_bar[t] + k * beta_bar[t] + gamma_bar[t] - 1.0).abs() > CUMULATIVE_SUM_TOL {
                return Err(Error::Schedule(format!("cumulative {t} probabilities do not sum to 1")));
            }
        }
        Ok(Self {
            classes,
            alpha,
            beta,
            gamma,
            alpha_bar,
            beta_bar,
            gamma_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.alpha.len() - 1
    }

    /// Number of ordinary codebook classes `K`.
    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Index of the MASK state.
    pub fn mask(&self) -> usize {
        self.classes
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn gamma(&self, t: usize) -> f64 {
        self.gamma[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn beta_bar(&self, t: usize) -> f64 {
        self.beta_bar[t]
    }

    pub fn gamma_bar(&self, t: usize) -> f64 {
        self.gamma_bar[t]
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Timestep {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    /// `q(x_t = to | x_{t-1} = from)` without materializing the matrix.
    pub fn step_prob(&self, t: usize, from: usize, to: usize) -> f64 {
        let mask = self.mask();
        match (from == mask, to == mask) {
            (true, true) => 1.0,
            (true, false) => 0.0,
            (false, true) => self.gamma[t],
            (false, false) if from == to => self.alpha[t] + self.beta[t],
            (false, false) => self.beta[t],
        }
    }

    /// Dense `Q_t`.
    pub fn transition_matrix(&self, t: usize) -> Result<TransitionMatrix> {
        self.check_step(t)?;
        let n = self.classes + 1;
        let mut data = vec![0.0; n * n];
        for to in 0..n {
            for from in 0..n {
                data[to * n + from] = self.step_prob(t, from, to);
            }
        }
        Ok(TransitionMatrix { size: n, data })
    }

    /// `q(x_t | x_0)` over the `K + 1` states, closed form.
    pub fn cumulative_marginal(&self, t: usize, x0: usize) -> Result<Vec<f64>> {
        if x0 >= self.classes {
            return Err(Error::MaskToken(0));
        }
        if t > self.steps() {
            return Err(Error::Timestep {
                t,
                max: self.steps(),
            });
        }
        let mut out = vec![self.beta_bar[t]; self.classes + 1];
        out[x0] += self.alpha_bar[t];
        out[self.classes] = self.gamma_bar[t];
        Ok(out)
    }

    /// Forward-process prior `p(x_T)`: MASK with `gamma_bar_T`, the rest spread uniformly.
    pub fn prior(&self) -> Vec<f64> {
        let gt = self.gamma_bar[self.steps()];
        let mut p = vec![(1.0 - gt) / self.classes as f64; self.classes + 1];
        p[self.classes] = gt;
        p
    }
}

/// Column-stochastic `(K+1) x (K+1)` matrix; column = source, row = destination.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix {
    size: usize,
    data: Vec<f64>,
}

impl TransitionMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, to: usize, from: usize) -> f64 {
        self.data[to * self.size + from]
    }

    pub fn column(&self, from: usize) -> Vec<f64> {
        (0..self.size).map(|to| self.get(to, from)).collect()
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        (0..self.size)
            .map(|to| (0..self.size).map(|from| self.get(to, from) * v[from]).sum())
            .collect()
    }

    /// `self * other`.
    pub fn matmul(&self, other: &TransitionMatrix) -> TransitionMatrix {
        let n = self.size;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.get(i, k);
                for j in 0..n {
                    data[i * n + j] += a * other.get(k, j);
                }
            }
        }
        TransitionMatrix { size: n, data }
    }

    pub fn identity(size: usize) -> Self {
        let mut data = vec![0.0; size * size];
        for i in 0..size {
            data[i * size + i] = 1.0;
        }
        Self { size, data }
    }
}
