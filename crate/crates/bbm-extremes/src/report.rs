//! Consolidated pass/fail report over the analysis artifacts of a run
//! directory. Every numeric gate lives in [`thresholds`]; the acceptance
//! test suite asserts the same constants, so the CLI report and the tests
//! cannot drift apart. A missing artifact marks its claims "not run" —
//! never a pass.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::SQRT2;
use crate::error::Result;
use crate::spine::IdentityCheck;
use crate::stats::{
    FlatterNormalization, PrefactorReport, SlopeFit, TailSlopeReport, UniformityReport,
};

/// Numeric gates for every checked claim. Slope windows are wide enough to
/// absorb finite-horizon bias at the run sizes the commands default to, and
/// tight enough to separate the competing growth laws.
pub mod thresholds {
    use super::SQRT2;

    /// Fitted growth rate of mean level-set counts over the v-window.
    pub const LEVEL_SET_SLOPE: (f64, f64) = (SQRT2 - 0.15, SQRT2 + 0.15);
    /// Default fit window in v for level sets.
    pub const LEVEL_SET_WINDOW: (f64, f64) = (2.0, 6.0);
    /// CV(count/(Z v e^{sqrt2 v})) must be below this fraction of
    /// CV(count/(Z e^{sqrt2 v})) for the full process (and the reverse for
    /// the star process).
    pub const PREFACTOR_CV_RATIO: f64 = 0.7;
    /// Star-process growth rate window (same exponent, no linear factor).
    pub const STAR_SLOPE: (f64, f64) = (SQRT2 - 0.15, SQRT2 + 0.15);
    /// KS gate for carrier-height uniformity on [0, 1].
    pub const CARRIER_KS: f64 = 0.1;
    pub const CARRIER_OVERFLOW: f64 = 0.1;
    /// Log-slope window for the survival of the gap between the two highest
    /// particles; target -(2 + sqrt 2).
    pub const GAP_SLOPE: (f64, f64) = (-4.3, -2.6);
    pub const GAP_WINDOW: (f64, f64) = (0.5, 2.5);
    /// Cluster mean count growth window; target sqrt 2.
    pub const CLUSTER_COUNT_SLOPE: (f64, f64) = (SQRT2 - 0.2, SQRT2 + 0.2);
    pub const CLUSTER_COUNT_WINDOW: (f64, f64) = (2.0, 5.0);
    /// Cluster gap log-slope window; target -2.
    pub const CLUSTER_GAP_SLOPE: (f64, f64) = (-2.6, -1.4);
    /// Median first-passage time of gap realizations at threshold w must
    /// fall within [w/4, w]; the heuristic optimum is w/2.
    pub const DIP_MEDIAN_FRACTION: (f64, f64) = (0.25, 1.0);
    pub const DIP_PROBE_W: f64 = 2.0;
    /// The log of the ratio second-moment / ((v+1) e^{2 sqrt2 v}) may not
    /// grow faster than this rate in v (envelope shape check).
    pub const SECOND_MOMENT_RATIO_SLOPE_MAX: f64 = 0.15;
    /// Centered-maximum tail windows at desk-scale horizons.
    pub const MAX_TAIL_RIGHT: (f64, f64) = (-1.8, -1.15);
    pub const MAX_TAIL_LEFT: (f64, f64) = (-1.1, -0.35);
    /// Two-sample KS gate certifying barrier pruning against exact runs.
    pub const PRUNING_KS: f64 = 0.05;
    /// Relative tolerance for t*p(t) stability between t and 2t.
    pub const STABILITY_TOLERANCE: f64 = 0.15;
    /// Identity checks pass within this many combined standard errors.
    pub const IDENTITY_SE: f64 = 3.0;
}

fn in_window(x: f64, w: (f64, f64)) -> bool {
    w.0 <= x && x <= w.1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Pass,
    Fail,
    NotRun,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClaimResult {
    pub name: String,
    pub status: Status,
    pub details: String,
}

impl ClaimResult {
    fn not_run(name: &str, why: &str) -> Self {
        ClaimResult {
            name: name.into(),
            status: Status::NotRun,
            details: why.into(),
        }
    }

    fn gated(name: &str, pass: bool, details: String) -> Self {
        ClaimResult {
            name: name.into(),
            status: if pass { Status::Pass } else { Status::Fail },
            details,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    /// Manifest hashes of every artifact folded into this report.
    pub sources: Vec<String>,
    pub claims: Vec<ClaimResult>,
}

impl Report {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for c in &self.claims {
            let tag = match c.status {
                Status::Pass => "PASS   ",
                Status::Fail => "FAIL   ",
                Status::NotRun => "NOT RUN",
            };
            out.push_str(&format!("{tag}  {:<46}  {}\n", c.name, c.details));
        }
        out
    }
}

// ---- analysis artifacts written by the CLI commands -----------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelSetArtifact {
    pub schema_version: u32,
    pub manifest_hash: String,
    pub window: (f64, f64),
    pub slope: SlopeFit,
    pub star_slope: SlopeFit,
    pub prefactor: PrefactorReport,
    pub star_prefactor: PrefactorReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapTailArtifact {
    pub schema_version: u32,
    pub manifest_hash: String,
    pub window: (f64, f64),
    /// (w, survival, stderr).
    pub curve: Vec<(f64, f64, f64)>,
    pub slope: SlopeFit,
    pub samples: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CarrierArtifact {
    pub schema_version: u32,
    pub manifest_hash: String,
    pub v: f64,
    pub radius: f64,
    pub report: UniformityReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapPointSummary {
    pub w: f64,
    pub survival: f64,
    pub stderr: f64,
    pub hits: u64,
    pub dip_median: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterArtifact {
    pub schema_version: u32,
    pub manifest_hash: String,
    pub t: f64,
    pub r: f64,
    pub samples: u64,
    pub mean_attempts: f64,
    pub window: (f64, f64),
    /// (v, mean count in [-v, 0], se).
    pub count_curve: Vec<(f64, f64, f64)>,
    pub count_slope: SlopeFit,
    /// (v, second moment of the count).
    pub second_moment_curve: Vec<(f64, f64)>,
    /// Slope of log(m2(v) / ((v+1) e^{2 sqrt2 v})).
    pub second_moment_ratio_slope: f64,
    pub gap_points: Vec<GapPointSummary>,
    pub gap_slope: SlopeFit,
    /// Optional doubled-horizon stability probe:
    /// (t2, mean count ratio at the window ends).
    pub stability: Option<(f64, Vec<(f64, f64)>)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpineArtifact {
    pub schema_version: u32,
    pub manifest_hash: String,
    pub t: f64,
    pub many_to_one: Vec<(String, IdentityCheck)>,
    pub many_to_two: IdentityCheck,
    /// (ks statistic, 95% critical value) for spine branch gaps vs Exp(2).
    pub branch_gap_ks: (f64, f64),
    /// Same for the pair overlap vs Exp(2) truncated at t.
    pub overlap_ks: (f64, f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BarrierCell {
    pub x: f64,
    pub y: f64,
    pub t: f64,
    pub estimate: f64,
    pub stderr: f64,
    /// Closed-form value for undecorated cells.
    pub exact: Option<f64>,
    pub n: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BarrierArtifact {
    pub schema_version: u32,
    pub manifest_hash: String,
    pub undecorated: Vec<BarrierCell>,
    /// Decorated estimates at t and 2t with x = y = 0.
    pub stability: Option<(BarrierCell, BarrierCell)>,
    /// Decorated estimates over a boundary grid, row-major in (x, y).
    pub monotonicity: Vec<BarrierCell>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaxTailArtifact {
    pub schema_version: u32,
    pub manifest_hash: String,
    pub samples: u64,
    pub report: TailSlopeReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruningArtifact {
    pub schema_version: u32,
    pub exact_manifest_hash: String,
    pub pruned_manifest_hash: String,
    pub ks_max: f64,
    pub ks_gap: f64,
    pub replicas: u64,
}

fn load<T: serde::de::DeserializeOwned>(dir: &Path, name: &str) -> Option<T> {
    let data = std::fs::read_to_string(dir.join(name)).ok()?;
    serde_json::from_str(&data).ok()
}

// ---- claim builders --------------------------------------------------------

pub fn level_set_claims(a: &LevelSetArtifact) -> Vec<ClaimResult> {
    use thresholds::*;
    let mut out = Vec::new();
    let slope_ok = in_window(a.slope.slope, LEVEL_SET_SLOPE);
    let verdict_ok = a.prefactor.verdict == FlatterNormalization::LinearInV
        && a.prefactor.cv_ratio < PREFACTOR_CV_RATIO;
    out.push(ClaimResult::gated(
        "level-set growth: count ~ Z v exp(sqrt2 v)",
        slope_ok && verdict_ok,
        format!(
            "slope {:.4} in [{:.3},{:.3}]; v-normalized CV {:.3} vs plain {:.3} (ratio {:.2})",
            a.slope.slope,
            LEVEL_SET_SLOPE.0,
            LEVEL_SET_SLOPE.1,
            a.prefactor.cv_linear,
            a.prefactor.cv_plain,
            a.prefactor.cv_ratio
        ),
    ));
    let star_ok = in_window(a.star_slope.slope, STAR_SLOPE);
    let star_verdict_ok = a.star_prefactor.verdict == FlatterNormalization::Plain
        && a.star_prefactor.cv_ratio < PREFACTOR_CV_RATIO;
    out.push(ClaimResult::gated(
        "star-process growth: count ~ Z exp(sqrt2 v), no linear factor",
        star_ok && star_verdict_ok,
        format!(
            "slope {:.4}; plain CV {:.3} vs v-normalized {:.3} (ratio {:.2})",
            a.star_slope.slope,
            a.star_prefactor.cv_plain,
            a.star_prefactor.cv_linear,
            a.star_prefactor.cv_ratio
        ),
    ));
    out
}

pub fn carrier_claim(a: &CarrierArtifact) -> ClaimResult {
    use thresholds::*;
    let pass = a.report.ks <= CARRIER_KS && a.report.overflow_fraction <= CARRIER_OVERFLOW;
    ClaimResult::gated(
        "carrier heights uniform on [0, 1]",
        pass,
        format!(
            "KS {:.4} (gate {CARRIER_KS}), overflow {:.4} (gate {CARRIER_OVERFLOW}), n={}",
            a.report.ks, a.report.overflow_fraction, a.report.sample_count
        ),
    )
}

pub fn gap_tail_claim(a: &GapTailArtifact) -> ClaimResult {
    use thresholds::*;
    ClaimResult::gated(
        "top-two gap tail: log-slope near -(2+sqrt2)",
        in_window(a.slope.slope, GAP_SLOPE),
        format!(
            "slope {:.3} (stderr {:.3}) in [{}, {}], window w in [{}, {}]",
            a.slope.slope, a.slope.stderr, GAP_SLOPE.0, GAP_SLOPE.1, a.window.0, a.window.1
        ),
    )
}

pub fn cluster_claims(a: &ClusterArtifact) -> Vec<ClaimResult> {
    use thresholds::*;
    let mut out = Vec::new();
    out.push(ClaimResult::gated(
        "cluster mean count growth exp(sqrt2 v)",
        in_window(a.count_slope.slope, CLUSTER_COUNT_SLOPE),
        format!(
            "slope {:.4} (stderr {:.4}) in [{:.3}, {:.3}]",
            a.count_slope.slope, a.count_slope.stderr, CLUSTER_COUNT_SLOPE.0, CLUSTER_COUNT_SLOPE.1
        ),
    ));
    out.push(ClaimResult::gated(
        "cluster second moment within (v+1) exp(2 sqrt2 v)",
        a.second_moment_ratio_slope <= SECOND_MOMENT_RATIO_SLOPE_MAX,
        format!(
            "ratio log-slope {:.4} <= {SECOND_MOMENT_RATIO_SLOPE_MAX}",
            a.second_moment_ratio_slope
        ),
    ));
    out.push(ClaimResult::gated(
        "cluster gap: log P(no atom in [-w,0)) slope near -2",
        in_window(a.gap_slope.slope, CLUSTER_GAP_SLOPE),
        format!(
            "slope {:.4} (stderr {:.4}) in [{}, {}]",
            a.gap_slope.slope, a.gap_slope.stderr, CLUSTER_GAP_SLOPE.0, CLUSTER_GAP_SLOPE.1
        ),
    ));
    let dip = a
        .gap_points
        .iter()
        .find(|p| (p.w - DIP_PROBE_W).abs() < 1e-9)
        .and_then(|p| p.dip_median.map(|m| (p.w, m)));
    out.push(match dip {
        Some((w, median)) => ClaimResult::gated(
            "gap realizations dip near w/2",
            in_window(median / w, DIP_MEDIAN_FRACTION),
            format!(
                "median first passage {median:.3} at w={w} (window [{}, {}]w)",
                DIP_MEDIAN_FRACTION.0, DIP_MEDIAN_FRACTION.1
            ),
        ),
        None => ClaimResult::not_run("gap realizations dip near w/2", "no dip samples at probe w"),
    });
    out
}

pub fn spine_claims(a: &SpineArtifact) -> Vec<ClaimResult> {
    use thresholds::*;
    let mut out = Vec::new();
    let worst = a
        .many_to_one
        .iter()
        .map(|(_, c)| c.gap_in_se)
        .fold(0.0_f64, f64::max);
    out.push(ClaimResult::gated(
        "single-lineage population-sum identity",
        worst <= IDENTITY_SE,
        format!("worst deviation {worst:.2} se over {} test functions", a.many_to_one.len()),
    ));
    out.push(ClaimResult::gated(
        "pair population-sum identity",
        a.many_to_two.gap_in_se <= IDENTITY_SE,
        format!(
            "direct {:.2} vs reweighted {:.2} ({:.2} se)",
            a.many_to_two.direct, a.many_to_two.spinal, a.many_to_two.gap_in_se
        ),
    ));
    out.push(ClaimResult::gated(
        "spine branch rate 2",
        a.branch_gap_ks.0 < a.branch_gap_ks.1,
        format!("KS {:.4} < {:.4}", a.branch_gap_ks.0, a.branch_gap_ks.1),
    ));
    out.push(ClaimResult::gated(
        "pair overlap law Exp(2) truncated at t",
        a.overlap_ks.0 < a.overlap_ks.1,
        format!("KS {:.4} < {:.4}", a.overlap_ks.0, a.overlap_ks.1),
    ));
    out
}

pub fn barrier_claims(a: &BarrierArtifact) -> Vec<ClaimResult> {
    use thresholds::*;
    let mut out = Vec::new();
    let mut worst = 0.0_f64;
    let mut all_ok = !a.undecorated.is_empty();
    for c in &a.undecorated {
        if let Some(exact) = c.exact {
            let gap = (c.estimate - exact).abs() / c.stderr.max(1e-300);
            worst = worst.max(gap);
            if gap > IDENTITY_SE {
                all_ok = false;
            }
        }
    }
    out.push(if a.undecorated.is_empty() {
        ClaimResult::not_run("bridge stay-below matches reflection law", "no cells")
    } else {
        ClaimResult::gated(
            "bridge stay-below matches reflection law",
            all_ok,
            format!("worst deviation {worst:.2} se over {} cells", a.undecorated.len()),
        )
    });
    out.push(match &a.stability {
        Some((p1, p2)) => {
            let tp1 = p1.t * p1.estimate;
            let tp2 = p2.t * p2.estimate;
            let rel = (tp1 - tp2).abs() / tp1.max(1e-300);
            ClaimResult::gated(
                "decorated bridge: t p(t) stable under doubling",
                rel <= STABILITY_TOLERANCE,
                format!(
                    "t p(t) = {tp1:.4} at t={}, {tp2:.4} at t={} (rel gap {rel:.3})",
                    p1.t, p2.t
                ),
            )
        }
        None => ClaimResult::not_run("decorated bridge: t p(t) stable under doubling", "missing"),
    });
    let mono_ok = monotone_in_boundaries(&a.monotonicity);
    out.push(if a.monotonicity.is_empty() {
        ClaimResult::not_run("stay-below probability monotone in boundaries", "no grid")
    } else {
        ClaimResult::gated(
            "stay-below probability monotone in boundaries",
            mono_ok,
            format!("{} grid cells", a.monotonicity.len()),
        )
    });
    out
}

/// Within statistical error, the estimate may not increase when a boundary
/// value increases.
fn monotone_in_boundaries(cells: &[BarrierCell]) -> bool {
    for a in cells {
        for b in cells {
            if a.t == b.t && a.x <= b.x && a.y <= b.y && (a.x, a.y) != (b.x, b.y) {
                let se = (a.stderr * a.stderr + b.stderr * b.stderr).sqrt();
                if b.estimate > a.estimate + thresholds::IDENTITY_SE * se {
                    return false;
                }
            }
        }
    }
    true
}

pub fn max_tail_claim(a: &MaxTailArtifact) -> ClaimResult {
    use thresholds::*;
    let r_ok = in_window(a.report.right.slope, MAX_TAIL_RIGHT);
    let l_ok = in_window(a.report.left.slope, MAX_TAIL_LEFT);
    ClaimResult::gated(
        "centered maximum tail exponents",
        r_ok && l_ok,
        format!(
            "right {:.3} in [{}, {}]; left {:.3} in [{}, {}]",
            a.report.right.slope,
            MAX_TAIL_RIGHT.0,
            MAX_TAIL_RIGHT.1,
            a.report.left.slope,
            MAX_TAIL_LEFT.0,
            MAX_TAIL_LEFT.1
        ),
    )
}

pub fn pruning_claim(a: &PruningArtifact) -> ClaimResult {
    use thresholds::*;
    ClaimResult::gated(
        "barrier pruning certified against exact runs",
        a.ks_max <= PRUNING_KS && a.ks_gap <= PRUNING_KS,
        format!(
            "KS(max) {:.4}, KS(gap) {:.4} <= {PRUNING_KS} at {} replicas",
            a.ks_max, a.ks_gap, a.replicas
        ),
    )
}

/// Builds the consolidated report from whatever artifacts exist in `dir`.
pub fn build_report(dir: &Path) -> Result<Report> {
    let mut claims = Vec::new();
    let mut sources = Vec::new();

    match load::<LevelSetArtifact>(dir, "level_sets.json") {
        Some(a) => {
            sources.push(a.manifest_hash.clone());
            claims.extend(level_set_claims(&a));
        }
        None => {
            claims.push(ClaimResult::not_run(
                "level-set growth: count ~ Z v exp(sqrt2 v)",
                "level_sets.json missing",
            ));
            claims.push(ClaimResult::not_run(
                "star-process growth: count ~ Z exp(sqrt2 v), no linear factor",
                "level_sets.json missing",
            ));
        }
    }
    match load::<CarrierArtifact>(dir, "carriers.json") {
        Some(a) => {
            sources.push(a.manifest_hash.clone());
            claims.push(carrier_claim(&a));
        }
        None => claims.push(ClaimResult::not_run(
            "carrier heights uniform on [0, 1]",
            "carriers.json missing",
        )),
    }
    match load::<GapTailArtifact>(dir, "gap_tail.json") {
        Some(a) => {
            sources.push(a.manifest_hash.clone());
            claims.push(gap_tail_claim(&a));
        }
        None => claims.push(ClaimResult::not_run(
            "top-two gap tail: log-slope near -(2+sqrt2)",
            "gap_tail.json missing",
        )),
    }
    match load::<MaxTailArtifact>(dir, "max_tail.json") {
        Some(a) => {
            sources.push(a.manifest_hash.clone());
            claims.push(max_tail_claim(&a));
        }
        None => claims.push(ClaimResult::not_run(
            "centered maximum tail exponents",
            "max_tail.json missing",
        )),
    }
    match load::<ClusterArtifact>(dir, "cluster.json") {
        Some(a) => {
            sources.push(a.manifest_hash.clone());
            claims.extend(cluster_claims(&a));
        }
        None => {
            for name in [
                "cluster mean count growth exp(sqrt2 v)",
                "cluster second moment within (v+1) exp(2 sqrt2 v)",
                "cluster gap: log P(no atom in [-w,0)) slope near -2",
                "gap realizations dip near w/2",
            ] {
                claims.push(ClaimResult::not_run(name, "cluster.json missing"));
            }
        }
    }
    match load::<SpineArtifact>(dir, "spine.json") {
        Some(a) => {
            sources.push(a.manifest_hash.clone());
            claims.extend(spine_claims(&a));
        }
        None => {
            for name in [
                "single-lineage population-sum identity",
                "pair population-sum identity",
                "spine branch rate 2",
                "pair overlap law Exp(2) truncated at t",
            ] {
                claims.push(ClaimResult::not_run(name, "spine.json missing"));
            }
        }
    }
    match load::<BarrierArtifact>(dir, "barrier.json") {
        Some(a) => {
            sources.push(a.manifest_hash.clone());
            claims.extend(barrier_claims(&a));
        }
        None => {
            for name in [
                "bridge stay-below matches reflection law",
                "decorated bridge: t p(t) stable under doubling",
                "stay-below probability monotone in boundaries",
            ] {
                claims.push(ClaimResult::not_run(name, "barrier.json missing"));
            }
        }
    }
    match load::<PruningArtifact>(dir, "pruning.json") {
        Some(a) => {
            sources.push(a.exact_manifest_hash.clone());
            sources.push(a.pruned_manifest_hash.clone());
            claims.push(pruning_claim(&a));
        }
        None => claims.push(ClaimResult::not_run(
            "barrier pruning certified against exact runs",
            "pruning.json missing",
        )),
    }

    Ok(Report {
        schema_version: crate::manifest::SCHEMA_VERSION,
        sources,
        claims,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_artifacts_are_not_run_never_pass() {
        let dir = tempfile::tempdir().unwrap();
        let report = build_report(dir.path()).unwrap();
        assert!(!report.claims.is_empty());
        assert!(report.claims.iter().all(|c| c.status == Status::NotRun));
        let text = report.render_text();
        assert!(text.contains("NOT RUN"));
        assert!(!text.contains("PASS"));
    }

    #[test]
    fn monotonicity_checker() {
        let cell = |x: f64, y: f64, p: f64| BarrierCell {
            x,
            y,
            t: 10.0,
            estimate: p,
            stderr: 0.001,
            exact: None,
            n: 1000,
        };
        // Lower boundaries give larger stay-below probability.
        let good = vec![cell(-2.0, -2.0, 0.5), cell(-1.0, -2.0, 0.4), cell(0.0, -2.0, 0.2)];
        assert!(monotone_in_boundaries(&good));
        let bad = vec![cell(-2.0, -2.0, 0.2), cell(-1.0, -2.0, 0.4)];
        assert!(!monotone_in_boundaries(&bad));
    }

    #[test]
    fn carrier_gate() {
        let art = CarrierArtifact {
            schema_version: 1,
            manifest_hash: "h".into(),
            v: 5.0,
            radius: 4.0,
            report: UniformityReport {
                sample_count: 3000,
                ks: 0.04,
                overflow_fraction: 0.02,
                bins: vec![150; 20],
            },
        };
        assert_eq!(carrier_claim(&art).status, Status::Pass);
        let mut bad = art;
        bad.report.ks = 0.2;
        assert_eq!(carrier_claim(&bad).status, Status::Fail);
    }
}
