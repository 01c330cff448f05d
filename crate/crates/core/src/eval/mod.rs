//! Objective evaluation: per-piece note statistics, Gaussian overlap between
//! populations, and a convolutional composer-style classifier.

mod classifier;

pub use classifier::{
    style_accuracy, tally_predictions, train_classifier, ClassifierConfig, ClassifierTrainConfig, StyleClassifier,
    StyleReport,
};

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::music::NoteEvent;

/// Lower bound on fitted standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

pub const FEATURE_NAMES: [&str; 6] = ["ND", "PR", "MP", "VP", "MD", "VD"];

/// Six summary statistics of one piece.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct FeatureVector {
    /// Notes per second.
    pub nd: f64,
    /// Highest minus lowest pitch, in semitones.
    pub pr: f64,
    pub mp: f64,
    pub vp: f64,
    /// Mean note duration in seconds.
    pub md: f64,
    pub vd: f64,
    /// Set when the piece has no notes; all statistics are then zero.
    pub empty: bool,
}

impl FeatureVector {
    /// Values in [`FEATURE_NAMES`] order.
    pub fn values(&self) -> [f64; 6] {
        [self.nd, self.pr, self.mp, self.vp, self.md, self.vd]
    }
}

/// Mean and population standard deviation.
fn moments(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}

/// Per-piece statistics; spreads use the population (`n`) denominator so a
/// single note has zero spread.
pub fn extract_features(events: &[NoteEvent], duration: f64) -> Result<FeatureVector> {
    if !(duration > 0.0) {
        return Err(Error::Config(format!("piece duration must be positive, got {duration}")));
    }
    if events.is_empty() {
        return Ok(FeatureVector {
            empty: true,
            ..FeatureVector::default()
        });
    }
    let pitches = events.iter().map(|e| e.pitch as f64);
    let (mp, vp) = moments(pitches.clone());
    let (md, vd) = moments(events.iter().map(|e| e.duration));
    let hi = pitches.clone().fold(f64::MIN, f64::max);
    let lo = pitches.fold(f64::MAX, f64::min);
    Ok(FeatureVector {
        nd: events.len() as f64 / duration,
        pr: hi - lo,
        mp,
        vp,
        md,
        vd,
        empty: false,
    })
}

/// A fitted normal distribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian {
    pub mean: f64,
    pub std: f64,
}

impl Gaussian {
    pub fn pdf(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.std;
        libm::exp(-0.5 * z * z) / (self.std * libm::sqrt(2.0 * core::f64::consts::PI))
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.std;
        -0.5 * z * z - libm::log(self.std) - 0.5 * libm::log(2.0 * core::f64::consts::PI)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        0.5 * libm::erfc(-(x - self.mean) / (self.std * core::f64::consts::SQRT_2))
    }
}

/// Sample mean and `n - 1` standard deviation, floored at [`STD_FLOOR`].
pub fn fit_gaussian(samples: &[f64]) -> Result<Gaussian> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples {
            need: 2,
            got: samples.len(),
        });
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    Ok(Gaussian {
        mean,
        std: libm::sqrt(var).max(STD_FLOOR),
    })
}

/// Where two densities cross.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Intersection {
    /// The crossing between the two means; with unequal spreads a second
    /// crossing lies outside them.
    Between(f64),
    /// Equal means, unequal spreads: two crossings mirrored about the mean.
    Symmetric { lower: f64, upper: f64 },
    /// Same mean and spread; the densities coincide everywhere.
    Identical,
}

/// Every real `x` with `a.pdf(x) == b.pdf(x)`, ascending.
fn crossings(a: &Gaussian, b: &Gaussian) -> Vec<f64> {
    let (m1, s1, m2, s2) = (a.mean, a.std, b.mean, b.std);
    if s1 == s2 {
        return if m1 == m2 { Vec::new() } else { alloc::vec![0.5 * (m1 + m2)] };
    }
    // s1^2 (x - m2)^2 - s2^2 (x - m1)^2 = 2 s1^2 s2^2 ln(s1 / s2)
    let (v1, v2) = (s1 * s1, s2 * s2);
    let qa = v1 - v2;
    let qb = 2.0 * (v2 * m1 - v1 * m2);
    let qc = v1 * m2 * m2 - v2 * m1 * m1 - 2.0 * v1 * v2 * libm::log(s1 / s2);
    // The discriminant factors as 4 v1 v2 ((m1 - m2)^2 + 2 (v1 - v2) ln(s1 / s2)) >= 0.
    let inner = (m1 - m2) * (m1 - m2) + 2.0 * (v1 - v2) * libm::log(s1 / s2);
    let root_disc = 2.0 * s1 * s2 * libm::sqrt(inner.max(0.0));
    let q = -0.5 * (qb + libm::copysign(root_disc, qb));
    let (r1, r2) = if q == 0.0 {
        let r = -qb / (2.0 * qa);
        (r, r)
    } else {
        (q / qa, qc / q)
    };
    let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
    alloc::vec![lo, hi]
}

/// Crossing of the two densities, with the larger mean treated as `o`.
pub fn intersection_point(o: &Gaussian, g: &Gaussian) -> Intersection {
    let (o, g) = if o.mean >= g.mean { (o, g) } else { (g, o) };
    if o.mean == g.mean {
        if o.std == g.std {
            return Intersection::Identical;
        }
        let r = crossings(o, g);
        return Intersection::Symmetric {
            lower: r[0],
            upper: r[1],
        };
    }
    let r = crossings(o, g);
    let between = r
        .iter()
        .copied()
        .find(|&x| x >= g.mean && x <= o.mean)
        .unwrap_or(0.5 * (o.mean + g.mean));
    Intersection::Between(between)
}

/// Area under `min(pdf_o, pdf_g)`, in `[0, 1]`.
///
/// The real line is cut at every crossing of the two densities; on each piece
/// one density is the smaller throughout and contributes its CDF increment.
/// This covers equal means and unequal spreads without special cases.
pub fn overlapping_area(o: &Gaussian, g: &Gaussian) -> f64 {
    // Canonical argument order makes the result exactly symmetric.
    let (o, g) = if (o.mean, o.std) <= (g.mean, g.std) { (o, g) } else { (g, o) };
    let cuts = crossings(o, g);
    if cuts.is_empty() {
        return 1.0;
    }
    let mut edges = alloc::vec![f64::NEG_INFINITY];
    edges.extend(cuts.iter().copied());
    edges.push(f64::INFINITY);
    let mut area = 0.0;
    for w in edges.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let probe = match (lo.is_finite(), hi.is_finite()) {
            (true, true) => 0.5 * (lo + hi),
            (false, true) => hi - 1.0,
            (true, false) => lo + 1.0,
            (false, false) => unreachable!("at least one crossing"),
        };
        let lower = if o.log_pdf(probe) <= g.log_pdf(probe) { o } else { g };
        let cdf = |x: f64| {
            if x == f64::NEG_INFINITY {
                0.0
            } else if x == f64::INFINITY {
                1.0
            } else {
                lower.cdf(x)
            }
        };
        area += cdf(hi) - cdf(lo);
    }
    area.clamp(0.0, 1.0)
}

/// Per-feature Gaussian fits and overlaps between a reference and a generated population.
#[derive(Clone, Debug, PartialEq)]
pub struct OverlapReport {
    pub reference: [Gaussian; 6],
    pub generated: [Gaussian; 6],
    pub overlap: [f64; 6],
}

impl OverlapReport {
    pub fn average(&self) -> f64 {
        self.overlap.iter().sum::<f64>() / 6.0
    }
}

/// Fits one Gaussian per feature per population, skipping empty pieces.
pub fn overlap_report(reference: &[FeatureVector], generated: &[FeatureVector]) -> Result<OverlapReport> {
    let fit = |pop: &[FeatureVector]| -> Result<[Gaussian; 6]> {
        let rows: Vec<[f64; 6]> = pop.iter().filter(|f| !f.empty).map(FeatureVector::values).collect();
        let mut out = [Gaussian { mean: 0.0, std: 1.0 }; 6];
        for (i, slot) in out.iter_mut().enumerate() {
            let col: Vec<f64> = rows.iter().map(|r| r[i]).collect();
            *slot = fit_gaussian(&col)?;
        }
        Ok(out)
    };
    let reference = fit(reference)?;
    let generated = fit(generated)?;
    let mut overlap = [0.0; 6];
    for i in 0..6 {
        overlap[i] = overlapping_area(&reference[i], &generated[i]);
    }
    Ok(OverlapReport {
        reference,
        generated,
        overlap,
    })
}

#[cfg(test)]
mod tests;
