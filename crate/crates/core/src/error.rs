use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("reduction over an empty axis")]
    EmptyAxis,
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("graph node {0} references a later node (cycle)")]
    Cycle(usize),
    #[error("infinite divergence: p > 0 where q = 0 at index {0}")]
    InfiniteDivergence(usize),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid noise schedule: {0}")]
    Schedule(String),
    #[error("timestep {t} out of range 1..={max}")]
    Timestep { t: usize, max: usize },
    #[error("MASK token at position {0} is not allowed here")]
    MaskToken(usize),
    #[error("token {token} at position {position} exceeds the MASK index {mask}")]
    TokenRange {
        token: usize,
        position: usize,
        mask: usize,
    },
    #[error("frame count {frames} is not divisible by downsample factor {factor}; pad with {pad} frames")]
    Indivisible {
        frames: usize,
        factor: usize,
        pad: usize,
    },
    #[error("impossible posterior: q(x_t = {xt} | x_0 = {x0}) is zero at t = {t}")]
    ZeroNormalizer { xt: usize, x0: usize, t: usize },
    #[error("NaN loss at timestep {t}")]
    NanLoss { t: usize },
    #[error("training diverged at step {step}: loss {loss} exceeded 10x initial {initial} for 100 steps")]
    Diverged { step: usize, loss: f64, initial: f64 },
    #[error("MASK tokens remain after the final reverse step ({0} positions)")]
    MaskRemaining(usize),
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}
