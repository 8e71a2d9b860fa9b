//! Estimators and hypothesis tests: weighted log-slope fits, KS statistics,
//! empirical survival curves and the prefactor discrimination used for the
//! level-set growth law. Everything here is a deterministic function of its
//! inputs.

use serde::{Deserialize, Serialize};

use crate::engine::SQRT2;
use crate::error::{Error, Result};

/// Weighted least-squares fit of log(value) against the abscissa.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
    /// (abscissa, log value, weight) actually used.
    pub grid: Vec<(f64, f64, f64)>,
    pub method: String,
}

impl SlopeFit {
    /// Reruns the fit from the stored grid; must reproduce the stored slope.
    pub fn refit(&self) -> SlopeFit {
        weighted_line_fit(&self.grid, self.method.clone())
    }
}

fn weighted_line_fit(grid: &[(f64, f64, f64)], method: String) -> SlopeFit {
    let wsum: f64 = grid.iter().map(|&(_, _, w)| w).sum();
    let xbar: f64 = grid.iter().map(|&(x, _, w)| w * x).sum::<f64>() / wsum;
    let zbar: f64 = grid.iter().map(|&(_, z, w)| w * z).sum::<f64>() / wsum;
    let sxx: f64 = grid.iter().map(|&(x, _, w)| w * (x - xbar) * (x - xbar)).sum();
    let sxz: f64 = grid
        .iter()
        .map(|&(x, z, w)| w * (x - xbar) * (z - zbar))
        .sum();
    let slope = sxz / sxx;
    let intercept = zbar - slope * xbar;
    // Residual-scaled standard error; zero for exact lines.
    let n = grid.len() as f64;
    let dof = (n - 2.0).max(1.0);
    let rss: f64 = grid
        .iter()
        .map(|&(x, z, w)| {
            let r = z - intercept - slope * x;
            w * r * r
        })
        .sum();
    let stderr = (rss / dof / sxx).sqrt();
    SlopeFit {
        slope,
        intercept,
        stderr,
        grid: grid.to_vec(),
        method,
    }
}

/// Fit log(y) = intercept + slope * x by weighted least squares.
/// `weights` defaults to 1. Values must be strictly positive.
pub fn fit_log_slope(points: &[(f64, f64)], weights: Option<&[f64]>) -> Result<SlopeFit> {
    if points.len() < 3 {
        return Err(Error::InsufficientSamples {
            need: 3,
            have: points.len(),
        });
    }
    let x0 = points[0].0;
    if points.iter().all(|&(x, _)| x == x0) {
        return Err(Error::DegenerateGrid);
    }
    let mut grid = Vec::with_capacity(points.len());
    for (i, &(x, y)) in points.iter().enumerate() {
        if !(y > 0.0) {
            return Err(Error::NonPositiveValue(y));
        }
        let w = weights.map_or(1.0, |w| w[i]);
        grid.push((x, y.ln(), w));
    }
    Ok(weighted_line_fit(&grid, "weighted-least-squares-log".into()))
}

/// Delta-method fit for noisy positive counts: weight 1/se_log^2 with
/// se_log = se / value. Points with non-positive value are dropped.
pub fn fit_count_curve(points: &[(f64, f64, f64)]) -> Result<SlopeFit> {
    let kept: Vec<(f64, f64)> = points
        .iter()
        .filter(|&&(_, y, _)| y > 0.0)
        .map(|&(x, y, _)| (x, y))
        .collect();
    let weights: Vec<f64> = points
        .iter()
        .filter(|&&(_, y, _)| y > 0.0)
        .map(|&(_, y, se)| {
            let se_log = (se / y).max(1e-12);
            1.0 / (se_log * se_log)
        })
        .collect();
    fit_log_slope(&kept, Some(&weights))
}

/// One-sample KS statistic against an arbitrary CDF.
pub fn ks_statistic_vs_cdf<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max((((i + 1) as f64) / n - f).abs());
        d = d.max((f - (i as f64) / n).abs());
    }
    d
}

/// Two-sample KS statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_unstable_by(|p, q| p.partial_cmp(q).unwrap());
    ys.sort_unstable_by(|p, q| p.partial_cmp(q).unwrap());
    let (n, m) = (xs.len() as f64, ys.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < xs.len() && j < ys.len() {
        let v = xs[i].min(ys[j]);
        while i < xs.len() && xs[i] <= v {
            i += 1;
        }
        while j < ys.len() && ys[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    d
}

/// Asymptotic two-sided KS critical value at 95% for one sample of size n.
pub fn ks_critical_95(n: usize) -> f64 {
    1.36 / (n as f64).sqrt()
}

/// Asymptotic 95% critical value for a two-sample KS test.
pub fn ks_two_sample_critical_95(n: usize, m: usize) -> f64 {
    1.36 * ((n + m) as f64 / (n as f64 * m as f64)).sqrt()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UniformityReport {
    pub sample_count: usize,
    pub ks: f64,
    /// Fraction of the input mass above 1, excluded from the test.
    pub overflow_fraction: f64,
    pub bins: Vec<u64>,
}

pub const UNIFORMITY_BINS: usize = 20;

/// One-sample KS against U([0,1]) on the mass restricted to [0, 1]; mass
/// above 1 is excluded and reported.
pub fn ks_uniform(samples: &[f64]) -> Result<UniformityReport> {
    if samples.len() < 20 {
        return Err(Error::InsufficientSamples {
            need: 20,
            have: samples.len(),
        });
    }
    if samples.iter().any(|&s| s < 0.0 || !s.is_finite()) {
        return Err(Error::InvalidParam("uniformity samples must be >= 0".into()));
    }
    let kept: Vec<f64> = samples.iter().copied().filter(|&s| s <= 1.0).collect();
    let overflow_fraction = 1.0 - kept.len() as f64 / samples.len() as f64;
    if kept.len() < 20 {
        return Err(Error::InsufficientSamples {
            need: 20,
            have: kept.len(),
        });
    }
    let ks = ks_statistic_vs_cdf(&kept, |x| x.clamp(0.0, 1.0));
    let mut bins = vec![0u64; UNIFORMITY_BINS];
    for &s in &kept {
        let b = ((s * UNIFORMITY_BINS as f64) as usize).min(UNIFORMITY_BINS - 1);
        bins[b] += 1;
    }
    Ok(UniformityReport {
        sample_count: kept.len(),
        ks,
        overflow_fraction,
        bins,
    })
}

/// Empirical survival curve: for each threshold w, the fraction of samples
/// strictly above w with its binomial standard error.
pub fn tail_curve(samples: &[f64], thresholds: &[f64]) -> Result<Vec<(f64, f64, f64)>> {
    if samples.is_empty() {
        return Err(Error::InsufficientSamples { need: 1, have: 0 });
    }
    let n = samples.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&w| {
            let k = samples.iter().filter(|&&s| s > w).count() as f64;
            let p = k / n;
            (w, p, (p * (1.0 - p) / n).sqrt())
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlatterNormalization {
    /// Count / (Z v e^{sqrt(2) v}) is the flatter curve.
    LinearInV,
    /// Count / (Z e^{sqrt(2) v}) is the flatter curve.
    Plain,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrefactorReport {
    pub cv_linear: f64,
    pub cv_plain: f64,
    pub verdict: FlatterNormalization,
    /// cv of the winning normalization over the cv of the losing one.
    pub cv_ratio: f64,
    pub excluded_replicas: usize,
    /// (v, mean count/(Z v e^{sqrt2 v}), mean count/(Z e^{sqrt2 v})).
    pub grid: Vec<(f64, f64, f64)>,
}

fn coefficient_of_variation(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    var.sqrt() / mean
}

/// Decides whether level-set counts grow like v e^{sqrt(2) v} (linear
/// prefactor) or like a plain exponential, from per-replica count curves
/// paired with the replica's martingale value. Replicas with Z <= 0 are
/// excluded and counted.
pub fn prefactor_discrimination(
    per_replica: &[(Vec<f64>, f64)],
    v_grid: &[f64],
) -> Result<PrefactorReport> {
    if v_grid.len() < 3 {
        return Err(Error::DegenerateGrid);
    }
    let kept: Vec<&(Vec<f64>, f64)> = per_replica.iter().filter(|&&(_, z)| z > 0.0).collect();
    let excluded = per_replica.len() - kept.len();
    if kept.len() < 10 {
        return Err(Error::InsufficientReplicas {
            need: 10,
            have: kept.len(),
        });
    }
    let mut grid = Vec::with_capacity(v_grid.len());
    for (j, &v) in v_grid.iter().enumerate() {
        let scale = (-SQRT2 * v).exp();
        let mut lin = 0.0;
        let mut plain = 0.0;
        for &(counts, z) in &kept {
            lin += counts[j] * scale / (z * v);
            plain += counts[j] * scale / z;
        }
        let n = kept.len() as f64;
        grid.push((v, lin / n, plain / n));
    }
    let cv_linear = coefficient_of_variation(&grid.iter().map(|g| g.1).collect::<Vec<_>>());
    let cv_plain = coefficient_of_variation(&grid.iter().map(|g| g.2).collect::<Vec<_>>());
    let verdict = if cv_linear <= cv_plain {
        FlatterNormalization::LinearInV
    } else {
        FlatterNormalization::Plain
    };
    let cv_ratio = match verdict {
        FlatterNormalization::LinearInV => cv_linear / cv_plain,
        FlatterNormalization::Plain => cv_plain / cv_linear,
    };
    Ok(PrefactorReport {
        cv_linear,
        cv_plain,
        verdict,
        cv_ratio,
        excluded_replicas: excluded,
        grid,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TailSlopeReport {
    pub right: SlopeFit,
    pub left: SlopeFit,
    /// Right-tail slope at most -0.85 sqrt(2).
    pub right_ok: bool,
    /// Left-tail slope magnitude at least 0.6 (2 - sqrt(2)).
    pub left_ok: bool,
}

pub const MAX_TAIL_MIN_SAMPLES: usize = 10_000;
pub const MAX_TAIL_GRID: [f64; 9] = [1.0, 1.25, 1.5, 1.75, 2.0, 2.25, 2.5, 2.75, 3.0];

/// Fits the two tails of the centered-maximum distribution over u in [1, 3]:
/// survival above u on the right, mass below -u on the left.
pub fn max_tail_check(samples: &[f64]) -> Result<TailSlopeReport> {
    let samples: Vec<f64> = samples.iter().copied().filter(|s| s.is_finite()).collect();
    if samples.len() < MAX_TAIL_MIN_SAMPLES {
        return Err(Error::InsufficientSamples {
            need: MAX_TAIL_MIN_SAMPLES,
            have: samples.len(),
        });
    }
    let n = samples.len() as f64;
    let mut right_pts = Vec::new();
    let mut left_pts = Vec::new();
    for &u in MAX_TAIL_GRID.iter() {
        let r = samples.iter().filter(|&&s| s > u).count() as f64 / n;
        let l = samples.iter().filter(|&&s| s < -u).count() as f64 / n;
        if r > 0.0 {
            right_pts.push((u, r, (r * (1.0 - r) / n).sqrt()));
        }
        if l > 0.0 {
            left_pts.push((u, l, (l * (1.0 - l) / n).sqrt()));
        }
    }
    let right = fit_count_curve(&right_pts)?;
    let left = fit_count_curve(&left_pts)?;
    Ok(TailSlopeReport {
        right_ok: right.slope <= -0.85 * SQRT2,
        left_ok: left.slope.abs() >= 0.6 * (2.0 - SQRT2),
        right,
        left,
    })
}

/// Standard normal CDF via the Abramowitz-Stegun 7.1.26 rational
/// approximation of erf (absolute error below 1.5e-7, plenty for KS use).
pub fn normal_cdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / (sd * SQRT2);
    let t = 1.0 / (1.0 + 0.3275911 * z.abs());
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let erf = 1.0 - poly * (-z * z).exp();
    let erf = if z >= 0.0 { erf } else { -erf };
    0.5 * (1.0 + erf)
}

/// Sample mean and its standard error.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::INFINITY);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Standard error of a Bernoulli proportion.
pub fn binomial_se(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}
