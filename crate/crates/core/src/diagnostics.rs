//! Gradient-tail statistics, singular-value spectra and high-dimensional
//! concentration estimates.

use rand_distr::{Distribution, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, gaussian_matrix, gaussian_vector, singular_values, Matrix, Rng};

/// Floor below which a singular value counts as zero.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Log-spaced histogram edges.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub count: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Default for BinSpec {
    fn default() -> Self {
        Self {
            count: 50,
            lo: 1e-10,
            hi: 1e-1,
        }
    }
}

impl BinSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || !(self.lo > 0.0 && self.hi > self.lo && self.hi.is_finite()) {
            return Err(Error::InvalidConfig(format!("bad histogram spec {self:?}")));
        }
        Ok(())
    }

    /// `count + 1` edges from `lo` to `hi`.
    pub fn edges(&self) -> Vec<f64> {
        let (a, b) = (self.lo.log10(), self.hi.log10());
        (0..=self.count)
            .map(|i| 10f64.powf(a + (b - a) * i as f64 / self.count as f64))
            .collect()
    }

    fn index(&self, v: f64) -> Option<usize> {
        if v < self.lo || v >= self.hi {
            return None;
        }
        let t = (v.log10() - self.lo.log10()) / (self.hi.log10() - self.lo.log10());
        Some(((t * self.count as f64) as usize).min(self.count - 1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bins: BinSpec,
    pub counts: Vec<u64>,
    /// Entries below `lo`, including exact zeros.
    pub underflow: u64,
    /// Entries at or above `hi`.
    pub overflow: u64,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.underflow + self.overflow + self.counts.iter().sum::<u64>()
    }
}

/// Tail statistics of one gradient tensor. Quantiles are of `|g|`; the
/// kurtosis is of the signed entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub name: String,
    pub step: usize,
    pub entries: usize,
    pub histogram: Histogram,
    /// `None` when the entries have zero variance.
    pub excess_kurtosis: Option<f64>,
    pub q50: f64,
    pub q90: f64,
    pub q99: f64,
    pub max: f64,
    /// `None` when the median magnitude is zero.
    pub tail_ratio: Option<f64>,
    pub frac_above_10x_median: f64,
    pub frac_above_100x_median: f64,
    pub degenerate: bool,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Sample excess kurtosis `m₄/m₂² − 3` (population moments). `None` when
/// the variance vanishes relative to the data scale.
pub fn excess_kurtosis(values: &[f64]) -> Option<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let (m2, m4) = values.iter().fold((0.0, 0.0), |(a, b), &v| {
        let c = (v - mean) * (v - mean);
        (a + c, b + c * c)
    });
    let (m2, m4) = (m2 / n, m4 / n);
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    (m2.is_finite() && m2 > (1e-12 * scale).powi(2)).then(|| m4 / (m2 * m2) - 3.0)
}

pub fn grad_report(name: &str, step: usize, grads: &[f64], bins: BinSpec) -> Result<GradReport> {
    bins.validate()?;
    if grads.is_empty() {
        return Err(Error::Contract(format!("grad_report: `{name}` has no entries")));
    }
    if grads.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("gradient `{name}`")));
    }
    let mut mags: Vec<f64> = grads.iter().map(|v| v.abs()).collect();
    mags.sort_by(f64::total_cmp);

    let mut counts = vec![0u64; bins.count];
    let (mut underflow, mut overflow) = (0, 0);
    for &m in &mags {
        match bins.index(m) {
            Some(i) => counts[i] += 1,
            None if m < bins.lo => underflow += 1,
            None => overflow += 1,
        }
    }
    let q50 = quantile_sorted(&mags, 0.5);
    let frac_above = |k: f64| {
        let t = k * q50;
        mags.len().saturating_sub(mags.partition_point(|&m| m <= t)) as f64 / mags.len() as f64
    };
    let excess = excess_kurtosis(grads);
    Ok(GradReport {
        name: name.to_string(),
        step,
        entries: grads.len(),
        histogram: Histogram {
            bins,
            counts,
            underflow,
            overflow,
        },
        excess_kurtosis: excess,
        q50,
        q90: quantile_sorted(&mags, 0.9),
        q99: quantile_sorted(&mags, 0.99),
        max: *mags.last().expect("non-empty"),
        tail_ratio: (q50 > 0.0).then(|| quantile_sorted(&mags, 0.99) / q50),
        frac_above_10x_median: frac_above(10.0),
        frac_above_100x_median: frac_above(100.0),
        degenerate: excess.is_none() || q50 == 0.0,
    })
}

/// Tail-ratio threshold separating Gaussian-like from heavy magnitudes.
///
/// For Gaussian entries `q99/q50` of `|g|` is `2.576/0.674 ≈ 3.8`; for a
/// Student-t with 3 degrees of freedom it is `5.84/0.765 ≈ 7.6`.
pub const HEAVY_TAIL_RATIO: f64 = 5.0;
/// Excess-kurtosis threshold used alongside [`HEAVY_TAIL_RATIO`].
pub const HEAVY_KURTOSIS: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TailClass {
    Light,
    Heavy,
    Degenerate,
}

impl GradReport {
    pub fn tail_class(&self) -> TailClass {
        match (self.tail_ratio, self.excess_kurtosis) {
            (Some(r), Some(k)) if !self.degenerate => {
                if r > HEAVY_TAIL_RATIO && k > HEAVY_KURTOSIS {
                    TailClass::Heavy
                } else {
                    TailClass::Light
                }
            }
            _ => TailClass::Degenerate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub name: String,
    pub sigma_max: f64,
    /// Smallest singular value above [`SIGMA_FLOOR`]; 0 if none is.
    pub sigma_min: f64,
    /// `sigma_max / sigma_min`; infinite for the zero matrix.
    pub condition: f64,
    /// `exp(H(p))` with `p_i = σ_i² / Σσ²`.
    pub effective_rank: f64,
}

pub fn spectrum_report(name: &str, m: &Matrix) -> Result<SpectrumReport> {
    let s = singular_values(m)?;
    let sv = s.as_slice();
    let sigma_max = sv.first().copied().unwrap_or(0.0);
    let sigma_min = sv.iter().rev().copied().find(|&v| v > SIGMA_FLOOR).unwrap_or(0.0);
    let total: f64 = sv.iter().map(|v| v * v).sum();
    let effective_rank = if total > 0.0 {
        let h: f64 = sv
            .iter()
            .map(|v| v * v / total)
            .filter(|&p| p > 0.0)
            .map(|p| -p * p.ln())
            .sum();
        h.exp()
    } else {
        0.0
    };
    Ok(SpectrumReport {
        name: name.to_string(),
        sigma_max,
        sigma_min,
        condition: if sigma_min > 0.0 {
            sigma_max / sigma_min
        } else {
            f64::INFINITY
        },
        effective_rank,
    })
}

/// Mean and 95% normal-approximation half-width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub half_width: f64,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            half_width: 1.96 * (var / n).sqrt(),
        }
    }
}

/// Monte-Carlo estimates for pairs of independent standard Gaussian vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationSummary {
    pub d: usize,
    pub trials: usize,
    /// `E‖x‖²/d`, expected 1.
    pub norm_sq_over_d: Estimate,
    /// `E⟨x,y⟩²/d`, expected 1.
    pub inner_sq_over_d: Estimate,
    /// `E|cos θ|`, of order `1/√d`.
    pub abs_cos: Estimate,
    /// `‖x+y‖ / √(‖x‖²+‖y‖²)`, close to 1 for nearly orthogonal pairs.
    pub additivity: Estimate,
}

pub fn concentration_suite(d: usize, trials: usize, rng: &mut Rng) -> Result<ConcentrationSummary> {
    if d < 2 || trials < 100 {
        return Err(Error::InvalidConfig(format!(
            "concentration_suite needs d >= 2 and trials >= 100, got d={d}, trials={trials}"
        )));
    }
    let mut norm_sq = Vec::with_capacity(trials);
    let mut inner_sq = Vec::with_capacity(trials);
    let mut abs_cos = Vec::with_capacity(trials);
    let mut additivity = Vec::with_capacity(trials);
    for _ in 0..trials {
        let x = gaussian_vector(rng, d, 1.0);
        let y = gaussian_vector(rng, d, 1.0);
        let (xx, yy, xy) = (x.dot(&x), y.dot(&y), x.dot(&y));
        norm_sq.push(xx / d as f64);
        inner_sq.push(xy * xy / d as f64);
        abs_cos.push(xy.abs() / (xx * yy).sqrt());
        additivity.push(((xx + yy + 2.0 * xy) / (xx + yy)).sqrt());
    }
    Ok(ConcentrationSummary {
        d,
        trials,
        norm_sq_over_d: Estimate::from_samples(&norm_sq),
        inner_sq_over_d: Estimate::from_samples(&inner_sq),
        abs_cos: Estimate::from_samples(&abs_cos),
        additivity: Estimate::from_samples(&additivity),
    })
}

/// Measured `σ₁(W/‖Wx‖)` for Gaussian `W` (`m x n`, std `sigma_w`) and `x`
/// (std `sigma_x`), averaged over `trials` draws.
pub fn normalized_sigma_max(m: usize, n: usize, sigma_w: f64, sigma_x: f64, trials: usize, rng: &mut Rng) -> Result<f64> {
    let mut total = 0.0;
    for _ in 0..trials.max(1) {
        let w = gaussian_matrix(rng, m, n, sigma_w);
        let x = gaussian_vector(rng, n, sigma_x);
        let wx = w.mul_vec(x.as_slice())?.norm();
        total += tensor::top_singular_value(&w, 1e-10, 10_000)? / wx;
    }
    Ok(total / trials.max(1) as f64)
}

/// `n` draws from a Student-t distribution.
pub fn student_t_samples(rng: &mut Rng, n: usize, dof: f64) -> Result<Vec<f64>> {
    let dist = StudentT::new(dof).map_err(|e| Error::InvalidConfig(format!("Student-t dof {dof}: {e}")))?;
    Ok((0..n).map(|_| dist.sample(rng)).collect())
}

/// Diagnostics of one run: gradient reports and weight spectra.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunDiagnostics {
    pub grads: Vec<GradReport>,
    pub spectra: Vec<SpectrumReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub step: usize,
    pub kurtosis_a: Option<f64>,
    pub kurtosis_b: Option<f64>,
    pub tail_ratio_a: Option<f64>,
    pub tail_ratio_b: Option<f64>,
    /// `b − a`; `None` if either side is undefined.
    pub d_kurtosis: Option<f64>,
    pub d_tail_ratio: Option<f64>,
    pub d_condition: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub median_d_kurtosis: Option<f64>,
    pub median_d_tail_ratio: Option<f64>,
    pub median_d_condition: Option<f64>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(quantile_sorted(&v, 0.5))
}

/// Per-matrix deltas `b − a`. Both runs must cover the same
/// `(name, step)` pairs in the same order.
pub fn compare_runs(a: &RunDiagnostics, b: &RunDiagnostics) -> Result<Comparison> {
    let key = |g: &GradReport| (g.name.clone(), g.step);
    if a.grads.len() != b.grads.len() || a.grads.iter().zip(&b.grads).any(|(x, y)| key(x) != key(y)) {
        return Err(Error::Contract("compare_runs: gradient report schemas differ".into()));
    }
    let spectra_names = |r: &RunDiagnostics| r.spectra.iter().map(|s| s.name.clone()).collect::<Vec<_>>();
    if spectra_names(a) != spectra_names(b) {
        return Err(Error::Contract("compare_runs: spectrum report schemas differ".into()));
    }
    let diff = |x: Option<f64>, y: Option<f64>| match (x, y) {
        (Some(x), Some(y)) => Some(y - x),
        _ => None,
    };
    let rows: Vec<ComparisonRow> = a
        .grads
        .iter()
        .zip(&b.grads)
        .map(|(ga, gb)| {
            let cond = |r: &RunDiagnostics| {
                r.spectra
                    .iter()
                    .find(|s| s.name == ga.name)
                    .map(|s| s.condition)
                    .filter(|c| c.is_finite())
            };
            ComparisonRow {
                name: ga.name.clone(),
                step: ga.step,
                kurtosis_a: ga.excess_kurtosis,
                kurtosis_b: gb.excess_kurtosis,
                tail_ratio_a: ga.tail_ratio,
                tail_ratio_b: gb.tail_ratio,
                d_kurtosis: diff(ga.excess_kurtosis, gb.excess_kurtosis),
                d_tail_ratio: diff(ga.tail_ratio, gb.tail_ratio),
                d_condition: diff(cond(a), cond(b)),
            }
        })
        .collect();
    let med = |f: fn(&ComparisonRow) -> Option<f64>| median(&rows.iter().filter_map(f).collect::<Vec<_>>());
    Ok(Comparison {
        median_d_kurtosis: med(|r| r.d_kurtosis),
        median_d_tail_ratio: med(|r| r.d_tail_ratio),
        median_d_condition: med(|r| r.d_condition),
        rows,
    })
}
