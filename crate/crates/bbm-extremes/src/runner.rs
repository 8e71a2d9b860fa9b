//! Replicated simulation runs: schedules replicas across a thread pool,
//! reduces each population to a summary row, and aggregates. Replica
//! assignment never affects results; summaries come back indexed by replica.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{simulate, Mode, Population, SimConfig};
use crate::error::{Error, Result};
use crate::genealogy::{
    carrier_heights, derivative_martingale, extremal_process, gap12, star_process,
};
use crate::stats::mean_and_se;

/// What to extract from each replica.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummarySpec {
    /// Level-set counts are recorded at these v (count of heights >= m_t - v).
    pub v_grid: Vec<f64>,
    /// Ball radius for star counts and carrier statistics; None = sqrt(t).
    pub radius: Option<f64>,
    /// Collect carrier statistics at this level.
    pub carrier_v: Option<f64>,
    /// Carrier statistics are kept only for replica indices below this cap
    /// (they are large per replica; a prefix of replicas is an unbiased
    /// subsample).
    pub carrier_replica_cap: u64,
    /// For pruned runs: horizon of the exact companion run (same seed and
    /// replica) whose martingale value stands in for the biased pruned one.
    pub z_companion_t: Option<f64>,
}

impl Default for SummarySpec {
    fn default() -> Self {
        SummarySpec {
            v_grid: vec![2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0, 5.5, 6.0],
            radius: None,
            carrier_v: None,
            carrier_replica_cap: u64::MAX,
            z_companion_t: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicaSummary {
    pub replica: u64,
    pub leaf_count: u64,
    /// Maximum height minus m(t).
    pub max_centered: f64,
    pub gap12: Option<f64>,
    /// Martingale value of this run (exact mode only).
    pub z: Option<f64>,
    /// Martingale value of the exact companion run.
    pub z_companion: Option<f64>,
    pub level_counts: Vec<u64>,
    pub star_counts: Vec<u64>,
    pub carrier_stats: Vec<f64>,
    pub pruned_subtrees: u64,
}

pub fn summarize(pop: &Population, cfg: &SimConfig, spec: &SummarySpec) -> Result<ReplicaSummary> {
    let t = pop.horizon;
    let m = crate::engine::m_t(t);
    let radius = spec.radius.unwrap_or_else(|| t.sqrt());
    let extremal = extremal_process(pop);
    let level_counts: Vec<u64> = spec.v_grid.iter().map(|&v| extremal.count_ge(-v)).collect();
    let star_counts: Vec<u64> = if radius > 0.0 && radius <= t {
        let star = star_process(pop, radius)?;
        spec.v_grid.iter().map(|&v| star.count_ge(-v)).collect()
    } else {
        vec![0; spec.v_grid.len()]
    };
    let carrier_stats = match spec.carrier_v {
        Some(v) if radius > 0.0 && radius < t && cfg.replica_index < spec.carrier_replica_cap => {
            carrier_heights(pop, v, radius)?
        }
        _ => Vec::new(),
    };
    let z = match pop.mode {
        Mode::Exact => Some(derivative_martingale(pop, false)?.value),
        Mode::Barrier => None,
    };
    let z_companion = match spec.z_companion_t {
        Some(t0) => {
            let companion = simulate(&SimConfig::exact(t0.min(t), cfg.seed).with_replica(cfg.replica_index))?;
            Some(derivative_martingale(&companion, false)?.value)
        }
        None => None,
    };
    Ok(ReplicaSummary {
        replica: cfg.replica_index,
        leaf_count: pop.leaves().len() as u64,
        max_centered: pop.max_height().unwrap_or(f64::NEG_INFINITY) - m,
        gap12: gap12(pop).ok(),
        z,
        z_companion,
        level_counts,
        star_counts,
        carrier_stats,
        pruned_subtrees: pop.pruned_count,
    })
}

fn make_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidParam(e.to_string()))
}

/// Runs `replicas` independent simulations and maps each population through
/// `f`. Results come back ordered by replica index.
pub fn run_replicas_with<T: Send>(
    base: &SimConfig,
    replicas: u64,
    threads: usize,
    f: impl Fn(&SimConfig, &Population) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let pool = make_pool(threads)?;
    pool.install(|| {
        (0..replicas)
            .into_par_iter()
            .map(|i| {
                let cfg = base.clone().with_replica(i);
                let pop = simulate(&cfg)?;
                f(&cfg, &pop)
            })
            .collect()
    })
}

/// Standard summary pipeline.
pub fn run_replicas(
    base: &SimConfig,
    replicas: u64,
    threads: usize,
    spec: &SummarySpec,
) -> Result<Vec<ReplicaSummary>> {
    run_replicas_with(base, replicas, threads, |cfg, pop| summarize(pop, cfg, spec))
}

/// Aggregate view over replica summaries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregate {
    pub replicas: u64,
    pub mean_leaf_count: f64,
    pub se_leaf_count: f64,
    pub mean_max_centered: f64,
    pub se_max_centered: f64,
    /// Per v: (v, mean level count, se).
    pub level_curve: Vec<(f64, f64, f64)>,
    /// Per v: (v, mean star count, se).
    pub star_curve: Vec<(f64, f64, f64)>,
    pub mean_z: Option<f64>,
    pub mean_z_companion: Option<f64>,
    pub pruned_subtrees_total: u64,
    pub carrier_sample_count: u64,
}

pub fn aggregate(summaries: &[ReplicaSummary], v_grid: &[f64]) -> Aggregate {
    let leaf: Vec<f64> = summaries.iter().map(|s| s.leaf_count as f64).collect();
    // A barrier run can (rarely) cut every lineage; such replicas carry no
    // maximum.
    let maxes: Vec<f64> = summaries
        .iter()
        .map(|s| s.max_centered)
        .filter(|m| m.is_finite())
        .collect();
    let (mean_leaf_count, se_leaf_count) = mean_and_se(&leaf);
    let (mean_max_centered, se_max_centered) = mean_and_se(&maxes);
    let curve = |get: &dyn Fn(&ReplicaSummary) -> &[u64]| -> Vec<(f64, f64, f64)> {
        v_grid
            .iter()
            .enumerate()
            .map(|(j, &v)| {
                let vals: Vec<f64> = summaries.iter().map(|s| get(s)[j] as f64).collect();
                let (m, se) = mean_and_se(&vals);
                (v, m, se)
            })
            .collect()
    };
    let zs: Vec<f64> = summaries.iter().filter_map(|s| s.z).collect();
    let zcs: Vec<f64> = summaries.iter().filter_map(|s| s.z_companion).collect();
    Aggregate {
        replicas: summaries.len() as u64,
        mean_leaf_count,
        se_leaf_count,
        mean_max_centered,
        se_max_centered,
        level_curve: curve(&|s| &s.level_counts),
        star_curve: curve(&|s| &s.star_counts),
        mean_z: (!zs.is_empty()).then(|| zs.iter().sum::<f64>() / zs.len() as f64),
        mean_z_companion: (!zcs.is_empty()).then(|| zcs.iter().sum::<f64>() / zcs.len() as f64),
        pruned_subtrees_total: summaries.iter().map(|s| s.pruned_subtrees).sum(),
        carrier_sample_count: summaries.iter().map(|s| s.carrier_stats.len() as u64).sum(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replica_order_and_thread_invariance() {
        let base = SimConfig::exact(3.0, 500);
        let spec = SummarySpec::default();
        let one = run_replicas(&base, 64, 1, &spec).unwrap();
        let two = run_replicas(&base, 64, 2, &spec).unwrap();
        assert_eq!(one.len(), two.len());
        for (a, b) in one.iter().zip(&two) {
            assert_eq!(a.replica, b.replica);
            assert_eq!(a.leaf_count, b.leaf_count);
            assert_eq!(a.max_centered.to_bits(), b.max_centered.to_bits());
        }
    }

    #[test]
    fn summaries_carry_companion_z() {
        let base = SimConfig::pruned(6.0, 8.0, 77);
        let spec = SummarySpec {
            z_companion_t: Some(4.0),
            carrier_v: Some(3.0),
            ..Default::default()
        };
        let rows = run_replicas(&base, 8, 2, &spec).unwrap();
        for r in &rows {
            assert!(r.z.is_none());
            assert!(r.z_companion.is_some());
        }
        let agg = aggregate(&rows, &spec.v_grid);
        assert_eq!(agg.replicas, 8);
        assert!(agg.mean_z_companion.is_some());
        // Star counts never exceed full counts.
        for r in &rows {
            for (s, f) in r.star_counts.iter().zip(&r.level_counts) {
                assert!(s <= f);
            }
        }
    }

    #[test]
    fn budget_errors_propagate() {
        let mut base = SimConfig::exact(6.0, 1);
        base.max_particles = 50;
        assert!(matches!(
            run_replicas(&base, 4, 2, &SummarySpec::default()),
            Err(Error::BudgetExceeded { .. })
        ));
    }
}
