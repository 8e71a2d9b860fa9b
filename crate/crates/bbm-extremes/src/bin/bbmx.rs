//! Command-line front end: replicated simulation runs, analysis artifacts
//! and the consolidated report. All heavy lifting lives in the library;
//! this binary parses flags, applies flag > config-file > default
//! precedence, and wires files together.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use bbm_extremes::engine::{Mode, SimConfig};
use bbm_extremes::error::Error;
use bbm_extremes::genealogy::default_radius;
use bbm_extremes::io;
use bbm_extremes::manifest::{PruningCertificate, RunManifest, SCHEMA_VERSION};
use bbm_extremes::report::{self, BarrierCell};
use bbm_extremes::runner::{aggregate, run_replicas, ReplicaSummary, SummarySpec};
use bbm_extremes::spine::{self, TestFunction};
use bbm_extremes::stats;

#[derive(Parser)]
#[command(name = "bbmx", version, about = "Branching Brownian motion extremes toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run replicated simulations and write per-replica summaries.
    Simulate(SimulateArgs),
    /// Fit level-set growth and discriminate the linear prefactor.
    LevelSets(LevelSetsArgs),
    /// Survival curve and exponent of the gap between the top two particles.
    GapTail(GapTailArgs),
    /// Uniformity test of carrier heights.
    Carriers(CarriersArgs),
    /// Draw clusters from the limiting cluster-law sampler.
    ClusterSample(ClusterSampleArgs),
    /// Check the spinal population-sum identities and spine laws.
    VerifySpine(VerifySpineArgs),
    /// Bridge stay-below probabilities: exact baseline, stability, monotonicity.
    BarrierProb(BarrierProbArgs),
    /// Consolidate artifacts into a pass/fail report.
    Report(ReportArgs),
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::BudgetExceeded { .. } => 2,
        Error::AcceptanceStarved { .. } => 3,
        _ => 1,
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::LevelSets(a) => cmd_level_sets(a),
        Cmd::GapTail(a) => cmd_gap_tail(a),
        Cmd::Carriers(a) => cmd_carriers(a),
        Cmd::ClusterSample(a) => cmd_cluster_sample(a),
        Cmd::VerifySpine(a) => cmd_verify_spine(a),
        Cmd::BarrierProb(a) => cmd_barrier_prob(a),
        Cmd::Report(a) => cmd_report(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn threads_or_default(threads: usize) -> usize {
    if threads == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        threads
    }
}

fn parse_grid(s: &str) -> Result<Vec<f64>, Error> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidParam(format!("bad grid entry {x}")))
        })
        .collect()
}

fn parse_window(s: &str) -> Result<(f64, f64), Error> {
    let g = parse_grid(s)?;
    if g.len() != 2 || g[0] >= g[1] {
        return Err(Error::InvalidParam(format!("bad window {s}")));
    }
    Ok((g[0], g[1]))
}

// ---------------------------------------------------------------- simulate

#[derive(Args)]
struct SimulateArgs {
    /// Horizon t.
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    replicas: Option<u64>,
    /// exact | pruned
    #[arg(long)]
    mode: Option<String>,
    /// Barrier slack L (pruned mode).
    #[arg(long)]
    slack: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// 0 = available parallelism.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write one CSV + binary population file per replica.
    #[arg(long)]
    write_populations: bool,
    /// Comma-separated level-set grid in v.
    #[arg(long)]
    v_grid: Option<String>,
    /// Level at which carrier statistics are collected.
    #[arg(long)]
    carrier_v: Option<f64>,
    /// Collect carrier statistics from this many replicas only.
    #[arg(long)]
    carrier_replicas: Option<u64>,
    /// Ball radius for star counts and carriers; default sqrt(t).
    #[arg(long)]
    radius: Option<f64>,
    /// Horizon of the exact companion run supplying martingale values in
    /// pruned mode.
    #[arg(long)]
    z_companion_t: Option<f64>,
    /// TOML config file; flags take precedence over its keys.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Effective simulate configuration; also the manifest payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SimulateConfig {
    t: f64,
    replicas: u64,
    mode: String,
    slack: f64,
    seed: u64,
    threads: usize,
    out: PathBuf,
    write_populations: bool,
    v_grid: String,
    carrier_v: f64,
    carrier_replicas: u64,
    radius: f64,
    z_companion_t: f64,
}

#[derive(Debug, Default, Deserialize)]
struct SimulateFile {
    t: Option<f64>,
    replicas: Option<u64>,
    mode: Option<String>,
    slack: Option<f64>,
    seed: Option<u64>,
    threads: Option<usize>,
    out: Option<PathBuf>,
    write_populations: Option<bool>,
    v_grid: Option<String>,
    carrier_v: Option<f64>,
    carrier_replicas: Option<u64>,
    radius: Option<f64>,
    z_companion_t: Option<f64>,
}

fn effective_simulate_config(a: &SimulateArgs) -> Result<SimulateConfig, Error> {
    let file: SimulateFile = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|_| Error::MissingInput(path.display().to_string()))?;
            toml::from_str(&text).map_err(|e| Error::InvalidParam(e.to_string()))?
        }
        None => SimulateFile::default(),
    };
    let t = a.t.or(file.t).unwrap_or(4.0);
    let mode = a.mode.clone().or(file.mode).unwrap_or_else(|| "exact".into());
    if mode != "exact" && mode != "pruned" {
        return Err(Error::InvalidParam(format!("mode must be exact|pruned, got {mode}")));
    }
    let out = a
        .out
        .clone()
        .or(file.out)
        .ok_or_else(|| Error::InvalidParam("--out is required".into()))?;
    Ok(SimulateConfig {
        t,
        replicas: a.replicas.or(file.replicas).unwrap_or(1000),
        mode,
        slack: a.slack.or(file.slack).unwrap_or(8.0),
        seed: a.seed.or(file.seed).unwrap_or(1),
        threads: a.threads.or(file.threads).unwrap_or(0),
        out,
        write_populations: a.write_populations || file.write_populations.unwrap_or(false),
        v_grid: a
            .v_grid
            .clone()
            .or(file.v_grid)
            .unwrap_or_else(|| "2,2.5,3,3.5,4,4.5,5,5.5,6".into()),
        carrier_v: a.carrier_v.or(file.carrier_v).unwrap_or(5.0),
        carrier_replicas: a.carrier_replicas.or(file.carrier_replicas).unwrap_or(5000),
        radius: a.radius.or(file.radius).unwrap_or_else(|| default_radius(t)),
        z_companion_t: a.z_companion_t.or(file.z_companion_t).unwrap_or(8.0),
    })
}

#[derive(Serialize)]
struct AggregateFile {
    schema_version: u32,
    manifest_hash: String,
    v_grid: Vec<f64>,
    #[serde(flatten)]
    aggregate: bbm_extremes::runner::Aggregate,
}

fn cmd_simulate(a: SimulateArgs) -> Result<(), Error> {
    let cfg = effective_simulate_config(&a)?;
    let threads = threads_or_default(cfg.threads);
    let v_grid = parse_grid(&cfg.v_grid)?;
    std::fs::create_dir_all(&cfg.out)?;

    let mut manifest = RunManifest::new(
        "simulate",
        serde_json::to_value(&cfg)?,
        cfg.seed,
        cfg.replicas,
        threads,
    );

    let base = match cfg.mode.as_str() {
        "exact" => SimConfig::exact(cfg.t, cfg.seed),
        _ => SimConfig::pruned(cfg.t, cfg.slack, cfg.seed),
    };
    let spec = SummarySpec {
        v_grid: v_grid.clone(),
        radius: Some(cfg.radius),
        carrier_v: Some(cfg.carrier_v),
        carrier_replica_cap: cfg.carrier_replicas,
        z_companion_t: (base.mode == Mode::Barrier).then_some(cfg.z_companion_t),
    };
    let rows = run_replicas(&base, cfg.replicas, threads, &spec)?;

    let mut w = io::to_file(&cfg.out.join("summary.csv"))?;
    io::write_summary_csv(&rows, &v_grid, &mut w)?;
    drop(w);

    let mut w = io::to_file(&cfg.out.join("carriers.csv"))?;
    io::write_carriers_csv(&rows, &mut w)?;
    drop(w);

    if cfg.write_populations {
        let popdir = cfg.out.join("populations");
        std::fs::create_dir_all(&popdir)?;
        for i in 0..cfg.replicas {
            let pop = bbm_extremes::engine::simulate(&base.clone().with_replica(i))?;
            let mut w = io::to_file(&popdir.join(format!("replica_{i:06}.csv")))?;
            io::write_population_csv(&pop, &mut w)?;
            let mut w = io::to_file(&popdir.join(format!("replica_{i:06}.bin")))?;
            io::write_population_binary(&pop, &mut w)?;
        }
    }

    let agg = aggregate(&rows, &v_grid);
    if base.mode == Mode::Barrier {
        manifest.pruning = Some(PruningCertificate {
            slack: cfg.slack,
            pruned_subtrees_total: agg.pruned_subtrees_total,
            violation_bound: (-(2.0 - std::f64::consts::SQRT_2) * cfg.slack).exp(),
        });
    }
    let mean_max = agg.mean_max_centered;
    io::write_json_pretty(
        &AggregateFile {
            schema_version: SCHEMA_VERSION,
            manifest_hash: manifest.content_hash.clone(),
            v_grid: v_grid.clone(),
            aggregate: agg,
        },
        &cfg.out.join("aggregate.json"),
    )?;

    // Tail report of the centered maxima, when the sample is large enough.
    let maxes: Vec<f64> = rows.iter().map(|r| r.max_centered).collect();
    if let Ok(tails) = stats::max_tail_check(&maxes) {
        io::write_json_pretty(
            &report::MaxTailArtifact {
                schema_version: SCHEMA_VERSION,
                manifest_hash: manifest.content_hash.clone(),
                samples: maxes.len() as u64,
                report: tails,
            },
            &cfg.out.join("max_tail.json"),
        )?;
    }

    manifest.finish();
    manifest.write(&cfg.out.join("manifest.json"))?;
    println!(
        "simulate: {} replicas at t={} ({}), mean max {:.4}, out: {}",
        cfg.replicas,
        cfg.t,
        cfg.mode,
        mean_max,
        cfg.out.display()
    );
    Ok(())
}

// ------------------------------------------------------------- level-sets

#[derive(Args)]
struct LevelSetsArgs {
    /// Run directory produced by `simulate`.
    #[arg(long)]
    run: PathBuf,
    /// Fit window "lo,hi" in v.
    #[arg(long, default_value = "2,6")]
    window: String,
}

fn load_run(dir: &Path) -> Result<(RunManifest, Vec<f64>, Vec<ReplicaSummary>), Error> {
    let manifest = RunManifest::read(&dir.join("manifest.json"))?;
    manifest.verify_hash()?;
    let file = std::fs::File::open(dir.join("summary.csv"))
        .map_err(|_| Error::MissingInput(dir.join("summary.csv").display().to_string()))?;
    let (v_grid, rows) = io::read_summary_csv(file)?;
    Ok((manifest, v_grid, rows))
}

fn cmd_level_sets(a: LevelSetsArgs) -> Result<(), Error> {
    let window = parse_window(&a.window)?;
    let (manifest, v_grid, rows) = load_run(&a.run)?;
    let agg = aggregate(&rows, &v_grid);

    let in_window = |curve: &[(f64, f64, f64)]| -> Vec<(f64, f64, f64)> {
        curve
            .iter()
            .copied()
            .filter(|&(v, _, _)| window.0 <= v && v <= window.1)
            .collect()
    };
    let slope = stats::fit_count_curve(&in_window(&agg.level_curve))?;
    let star_slope = stats::fit_count_curve(&in_window(&agg.star_curve))?;

    let z_of = |r: &ReplicaSummary| r.z.or(r.z_companion).unwrap_or(0.0);
    let windowed: Vec<usize> = v_grid
        .iter()
        .enumerate()
        .filter(|&(_, &v)| window.0 <= v && v <= window.1)
        .map(|(j, _)| j)
        .collect();
    let wgrid: Vec<f64> = windowed.iter().map(|&j| v_grid[j]).collect();
    let pairs = |get: &dyn Fn(&ReplicaSummary) -> &[u64]| -> Vec<(Vec<f64>, f64)> {
        rows.iter()
            .map(|r| {
                (
                    windowed.iter().map(|&j| get(r)[j] as f64).collect(),
                    z_of(r),
                )
            })
            .collect()
    };
    let prefactor = stats::prefactor_discrimination(&pairs(&|r| &r.level_counts), &wgrid)?;
    let star_prefactor = stats::prefactor_discrimination(&pairs(&|r| &r.star_counts), &wgrid)?;

    let artifact = report::LevelSetArtifact {
        schema_version: SCHEMA_VERSION,
        manifest_hash: manifest.content_hash.clone(),
        window,
        slope,
        star_slope,
        prefactor,
        star_prefactor,
    };
    io::write_json_pretty(&artifact, &a.run.join("level_sets.json"))?;
    let rows_csv: Vec<Vec<f64>> = agg
        .level_curve
        .iter()
        .zip(&agg.star_curve)
        .map(|(&(v, m, se), &(_, sm, sse))| vec![v, m, se, sm, sse])
        .collect();
    let mut w = io::to_file(&a.run.join("level_counts.csv"))?;
    io::write_curve_csv("v,mean_count,se,star_mean_count,star_se", &rows_csv, &mut w)?;
    println!(
        "level-sets: slope {:.4}, star slope {:.4}, verdicts {:?}/{:?}",
        artifact.slope.slope,
        artifact.star_slope.slope,
        artifact.prefactor.verdict,
        artifact.star_prefactor.verdict
    );
    Ok(())
}

// --------------------------------------------------------------- gap-tail

#[derive(Args)]
struct GapTailArgs {
    #[arg(long)]
    run: PathBuf,
    /// Thresholds for the survival curve.
    #[arg(long, default_value = "0.5,0.75,1,1.25,1.5,1.75,2,2.25,2.5")]
    w_grid: String,
    /// Fit window "lo,hi" in w.
    #[arg(long, default_value = "0.5,2.5")]
    window: String,
}

fn cmd_gap_tail(a: GapTailArgs) -> Result<(), Error> {
    let w_grid = parse_grid(&a.w_grid)?;
    let window = parse_window(&a.window)?;
    let (manifest, _, rows) = load_run(&a.run)?;
    let gaps: Vec<f64> = rows.iter().filter_map(|r| r.gap12).collect();
    if gaps.len() < 2 {
        return Err(Error::InsufficientSamples {
            need: 2,
            have: gaps.len(),
        });
    }
    let curve = stats::tail_curve(&gaps, &w_grid)?;
    let fit_pts: Vec<(f64, f64, f64)> = curve
        .iter()
        .copied()
        .filter(|&(w, p, _)| window.0 <= w && w <= window.1 && p > 0.0)
        .collect();
    let slope = stats::fit_count_curve(&fit_pts)?;
    let artifact = report::GapTailArtifact {
        schema_version: SCHEMA_VERSION,
        manifest_hash: manifest.content_hash.clone(),
        window,
        curve: curve.clone(),
        slope,
        samples: gaps.len() as u64,
    };
    io::write_json_pretty(&artifact, &a.run.join("gap_tail.json"))?;
    let rows_csv: Vec<Vec<f64>> = curve.iter().map(|&(w, p, se)| vec![w, p, se]).collect();
    let mut w = io::to_file(&a.run.join("gap_curve.csv"))?;
    io::write_curve_csv("w,survival,stderr", &rows_csv, &mut w)?;
    println!(
        "gap-tail: slope {:.4} (stderr {:.4}) over {} samples",
        artifact.slope.slope, artifact.slope.stderr, artifact.samples
    );
    Ok(())
}

// --------------------------------------------------------------- carriers

#[derive(Args)]
struct CarriersArgs {
    #[arg(long)]
    run: PathBuf,
}

fn cmd_carriers(a: CarriersArgs) -> Result<(), Error> {
    let manifest = RunManifest::read(&a.run.join("manifest.json"))?;
    manifest.verify_hash()?;
    let v = manifest.config["carrier_v"].as_f64().unwrap_or(5.0);
    let radius = manifest.config["radius"].as_f64().unwrap_or(0.0);
    let file = std::fs::File::open(a.run.join("carriers.csv"))
        .map_err(|_| Error::MissingInput(a.run.join("carriers.csv").display().to_string()))?;
    let samples = io::read_carriers_csv(file)?;
    let rep = stats::ks_uniform(&samples)?;
    let artifact = report::CarrierArtifact {
        schema_version: SCHEMA_VERSION,
        manifest_hash: manifest.content_hash.clone(),
        v,
        radius,
        report: rep,
    };
    io::write_json_pretty(&artifact, &a.run.join("carriers.json"))?;
    println!(
        "carriers: KS {:.4}, overflow {:.4}, n={}",
        artifact.report.ks, artifact.report.overflow_fraction, artifact.report.sample_count
    );
    Ok(())
}

// ---------------------------------------------------------- cluster-sample

#[derive(Args)]
struct ClusterSampleArgs {
    #[arg(long, default_value_t = 64.0)]
    t: f64,
    #[arg(long, default_value_t = 8.0)]
    r: f64,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 4000)]
    max_attempts: u32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    threads: usize,
    #[arg(long)]
    out: PathBuf,
    /// Count-profile window "lo,hi" in v.
    #[arg(long, default_value = "2,5")]
    v_window: String,
    #[arg(long, default_value = "0.5,0.75,1,1.25,1.5,1.75,2,2.25,2.5")]
    w_grid: String,
    /// Also sample at 2t (quarter size) and report count-curve ratios.
    #[arg(long)]
    stability: bool,
}

fn cmd_cluster_sample(a: ClusterSampleArgs) -> Result<(), Error> {
    let threads = threads_or_default(a.threads);
    let v_window = parse_window(&a.v_window)?;
    let w_grid = parse_grid(&a.w_grid)?;
    std::fs::create_dir_all(&a.out)?;
    if let Some(w) = spine::nu_sampling_warning(a.t, a.r) {
        eprintln!("warning: {w}");
    }
    let config = serde_json::json!({
        "t": a.t, "r": a.r, "samples": a.samples, "max_attempts": a.max_attempts,
        "v_window": a.v_window, "w_grid": a.w_grid, "stability": a.stability,
    });
    let mut manifest = RunManifest::new("cluster-sample", config, a.seed, a.samples as u64, threads);

    let samples = spine::sample_cluster_batch(a.t, a.r, a.samples, a.max_attempts, a.seed, threads)?;
    let artifact = cluster_artifact(
        &manifest.content_hash,
        a.t,
        a.r,
        &samples,
        v_window,
        &w_grid,
        a.seed,
    )?;
    let artifact = if a.stability {
        let n2 = (a.samples / 4).max(50);
        let samples2 =
            spine::sample_cluster_batch(2.0 * a.t, a.r, n2, a.max_attempts * 2, a.seed ^ 0xD0, threads)?;
        let art2 = cluster_artifact(
            &manifest.content_hash,
             2.0 * a.t,
            a.r,
            &samples2,
            v_window,
            &w_grid,
            a.seed ^ 0xD0,
        )?;
        let ratios: Vec<(f64, f64)> = artifact
            .count_curve
            .iter()
            .zip(&art2.count_curve)
            .map(|(&(v, m1, _), &(_, m2, _))| (v, m2 / m1))
            .collect();
        report::ClusterArtifact {
            stability: Some((2.0 * a.t, ratios)),
            ..artifact
        }
    } else {
        artifact
    };

    let mut w = io::to_file(&a.out.join("cluster_atoms.csv"))?;
    io::write_cluster_samples_csv(&samples, &mut w)?;
    drop(w);
    io::write_json_pretty(&artifact, &a.out.join("cluster.json"))?;
    manifest.finish();
    manifest.write(&a.out.join("manifest.json"))?;
    println!(
        "cluster-sample: {} samples at t={}, r={}; count slope {:.4}, gap slope {:.4}",
        artifact.samples, a.t, a.r, artifact.count_slope.slope, artifact.gap_slope.slope
    );
    Ok(())
}

fn cluster_artifact(
    manifest_hash: &str,
    t: f64,
    r: f64,
    samples: &[spine::ClusterSample],
    v_window: (f64, f64),
    w_grid: &[f64],
    seed: u64,
) -> Result<report::ClusterArtifact, Error> {
    let v_grid: Vec<f64> = {
        let mut g = Vec::new();
        let mut v = v_window.0;
        while v <= v_window.1 + 1e-9 {
            g.push(v);
            v += 0.5;
        }
        g
    };
    let mut count_curve = Vec::new();
    let mut second_moment_curve = Vec::new();
    for &v in &v_grid {
        let counts: Vec<f64> = samples
            .iter()
            .map(|s| s.config.count_closed(-v, 0.0) as f64)
            .collect();
        let (mean, se) = stats::mean_and_se(&counts);
        count_curve.push((v, mean, se));
        let m2 = counts.iter().map(|c| c * c).sum::<f64>() / counts.len() as f64;
        second_moment_curve.push((v, m2));
    }
    let count_slope = stats::fit_count_curve(&count_curve)?;
    let ratio_pts: Vec<(f64, f64)> = second_moment_curve
        .iter()
        .filter(|&&(_, m2)| m2 > 0.0)
        .map(|&(v, m2)| {
            (
                v,
                m2 / ((v + 1.0) * (2.0 * std::f64::consts::SQRT_2 * v).exp()),
            )
        })
        .collect();
    let second_moment_ratio_slope = stats::fit_log_slope(&ratio_pts, None)?.slope;

    let mut rng = bbm_extremes::rng::stream(seed, 0xD1B, 1);
    let profile = spine::gap_profile_from_samples(samples, w_grid, &mut rng);
    let gap_points: Vec<report::GapPointSummary> = profile
        .points
        .iter()
        .map(|p| {
            let mut dips = p.dip_times.clone();
            dips.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
            report::GapPointSummary {
                w: p.w,
                survival: p.survival,
                stderr: p.stderr,
                hits: p.hits,
                dip_median: (!dips.is_empty()).then(|| dips[dips.len() / 2]),
            }
        })
        .collect();
    let gap_fit: Vec<(f64, f64, f64)> = profile
        .points
        .iter()
        .filter(|p| p.survival > 0.0)
        .map(|p| (p.w, p.survival, p.stderr))
        .collect();
    let gap_slope = stats::fit_count_curve(&gap_fit)?;
    let mean_attempts =
        samples.iter().map(|s| s.attempts as f64).sum::<f64>() / samples.len().max(1) as f64;
    Ok(report::ClusterArtifact {
        schema_version: SCHEMA_VERSION,
        manifest_hash: manifest_hash.to_string(),
        t,
        r,
        samples: samples.len() as u64,
        mean_attempts,
        window: v_window,
        count_curve,
        count_slope,
        second_moment_curve,
        second_moment_ratio_slope,
        gap_points,
        gap_slope,
        stability: None,
    })
}

// ------------------------------------------------------------ verify-spine

#[derive(Args)]
struct VerifySpineArgs {
    #[arg(long, default_value_t = 3.0)]
    t: f64,
    #[arg(long, default_value_t = 20000)]
    replicas: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    threads: usize,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_verify_spine(a: VerifySpineArgs) -> Result<(), Error> {
    let threads = threads_or_default(a.threads);
    std::fs::create_dir_all(&a.out)?;
    let config = serde_json::json!({"t": a.t, "replicas": a.replicas});
    let mut manifest = RunManifest::new("verify-spine", config, a.seed, a.replicas, threads);

    let fns = [
        ("one", TestFunction::One),
        ("above-0", TestFunction::IndicatorAbove(0.0)),
        (
            "band-with-cap",
            TestFunction::BandWithMaxCap {
                lo: -1.0,
                hi: 0.5,
                cap: 1.0,
            },
        ),
    ];
    let mut many_to_one = Vec::new();
    for (name, f) in fns {
        many_to_one.push((
            name.to_string(),
            spine::many_to_one_check(f, a.t, a.replicas, a.seed, threads)?,
        ));
    }
    let many_to_two = spine::many_to_two_check(a.t, a.replicas, a.seed ^ 0x22, threads)?;

    // Spine branch gaps: first waiting time per realization vs Exp(2).
    let mut rng = bbm_extremes::rng::stream(a.seed, 0x6A9, 0);
    let mut gaps = Vec::new();
    let want = a.replicas.min(20_000);
    while (gaps.len() as u64) < want {
        let s = spine::simulate_one_spine(a.t, &mut rng)?;
        let first = s.checkpoints[0];
        if first.0 < a.t {
            gaps.push(first.0);
        }
    }
    let gap_ks = stats::ks_statistic_vs_cdf(&gaps, |x| 1.0 - (-2.0 * x).exp());
    let branch_gap_ks = (gap_ks, stats::ks_critical_95(gaps.len()));

    let overlaps: Vec<f64> = (0..want)
        .map(|_| spine::simulate_two_spine_overlap(a.t, &mut rng))
        .collect();
    let t = a.t;
    let ov_ks = stats::ks_statistic_vs_cdf(&overlaps, |x| {
        if x >= t {
            1.0
        } else {
            1.0 - (-2.0 * x).exp()
        }
    });
    let overlap_ks = (ov_ks, stats::ks_critical_95(overlaps.len()));

    let artifact = report::SpineArtifact {
        schema_version: SCHEMA_VERSION,
        manifest_hash: manifest.content_hash.clone(),
        t: a.t,
        many_to_one,
        many_to_two,
        branch_gap_ks,
        overlap_ks,
    };
    io::write_json_pretty(&artifact, &a.out.join("spine.json"))?;
    manifest.finish();
    manifest.write(&a.out.join("manifest.json"))?;
    for (name, c) in &artifact.many_to_one {
        println!(
            "verify-spine {name}: direct {:.3} vs spinal {:.3} ({:.2} se)",
            c.direct, c.spinal, c.gap_in_se
        );
    }
    println!(
        "verify-spine pair: direct {:.2} vs spinal {:.2} ({:.2} se); gap KS {:.4}, overlap KS {:.4}",
        artifact.many_to_two.direct,
        artifact.many_to_two.spinal,
        artifact.many_to_two.gap_in_se,
        artifact.branch_gap_ks.0,
        artifact.overlap_ks.0
    );
    Ok(())
}

// ------------------------------------------------------------ barrier-prob

#[derive(Args)]
struct BarrierProbArgs {
    /// Horizon for the decorated stability pair (compared against 2t).
    #[arg(long, default_value_t = 20.0)]
    t: f64,
    /// Paths per estimate.
    #[arg(long, default_value_t = 20000)]
    n: u64,
    /// Horizon for the undecorated baseline cells.
    #[arg(long, default_value_t = 50.0)]
    baseline_t: f64,
    /// Boundary values for the undecorated baseline and monotonicity grids.
    #[arg(long, default_value = "-0.5,-1,-2")]
    grid_vals: String,
    /// Horizon for the monotonicity grid.
    #[arg(long, default_value_t = 12.0)]
    mono_t: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    threads: usize,
    #[arg(long)]
    out: PathBuf,
    /// Skip the decorated estimates (baseline only).
    #[arg(long)]
    undecorated_only: bool,
}

fn cmd_barrier_prob(a: BarrierProbArgs) -> Result<(), Error> {
    let threads = threads_or_default(a.threads);
    let vals = parse_grid(&a.grid_vals)?;
    std::fs::create_dir_all(&a.out)?;
    let config = serde_json::json!({
        "t": a.t, "n": a.n, "baseline_t": a.baseline_t, "grid_vals": a.grid_vals,
        "mono_t": a.mono_t, "undecorated_only": a.undecorated_only,
    });
    let mut manifest = RunManifest::new("barrier-prob", config, a.seed, a.n, threads);

    let mut undecorated = Vec::new();
    for &x in &vals {
        for &y in &vals {
            let (p, se) =
                spine::barrier_probability_batch(x, y, a.baseline_t, false, a.n, a.seed, threads)?;
            undecorated.push(BarrierCell {
                x,
                y,
                t: a.baseline_t,
                estimate: p,
                stderr: se,
                exact: Some(spine::bridge_stay_below_exact(x, y, a.baseline_t)),
                n: a.n,
            });
        }
    }

    let (stability, monotonicity) = if a.undecorated_only {
        (None, Vec::new())
    } else {
        let (p1, se1) = spine::barrier_probability_batch(0.0, 0.0, a.t, true, a.n, a.seed, threads)?;
        let (p2, se2) =
            spine::barrier_probability_batch(0.0, 0.0, 2.0 * a.t, true, a.n / 2, a.seed, threads)?;
        let stability = Some((
            BarrierCell {
                x: 0.0,
                y: 0.0,
                t: a.t,
                estimate: p1,
                stderr: se1,
                exact: None,
                n: a.n,
            },
            BarrierCell {
                x: 0.0,
                y: 0.0,
                t: 2.0 * a.t,
                estimate: p2,
                stderr: se2,
                exact: None,
                n: a.n / 2,
            },
        ));
        let mut monotonicity = Vec::new();
        let mut mono_vals = vals.clone();
        mono_vals.push(0.0);
        mono_vals.sort_by(|p, q| p.partial_cmp(q).unwrap());
        for &x in &mono_vals {
            for &y in &mono_vals {
                let (p, se) =
                    spine::barrier_probability_batch(x, y, a.mono_t, true, a.n / 2, a.seed, threads)?;
                monotonicity.push(BarrierCell {
                    x,
                    y,
                    t: a.mono_t,
                    estimate: p,
                    stderr: se,
                    exact: None,
                    n: a.n / 2,
                });
            }
        }
        (stability, monotonicity)
    };

    let artifact = report::BarrierArtifact {
        schema_version: SCHEMA_VERSION,
        manifest_hash: manifest.content_hash.clone(),
        undecorated,
        stability,
        monotonicity,
    };
    io::write_json_pretty(&artifact, &a.out.join("barrier.json"))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for c in artifact
        .undecorated
        .iter()
        .chain(artifact.monotonicity.iter())
        .chain(artifact.stability.iter().flat_map(|(a, b)| [a, b]))
    {
        rows.push(vec![
            c.x,
            c.y,
            c.t,
            c.estimate,
            c.stderr,
            c.n as f64,
            c.exact.unwrap_or(f64::NAN),
        ]);
    }
    let mut w = io::to_file(&a.out.join("barrier_curve.csv"))?;
    io::write_curve_csv("x,y,t,estimate,stderr,n,exact", &rows, &mut w)?;
    manifest.finish();
    manifest.write(&a.out.join("manifest.json"))?;
    if let Some((p1, p2)) = &artifact.stability {
        println!(
            "barrier-prob: t p(t) = {:.4} at t={}, {:.4} at t={}",
            p1.t * p1.estimate,
            p1.t,
            p2.t * p2.estimate,
            p2.t
        );
    }
    Ok(())
}

// ----------------------------------------------------------------- report

#[derive(Args)]
struct ReportArgs {
    /// Directory holding the analysis artifacts.
    #[arg(long)]
    dir: PathBuf,
    /// Exact-mode run directory for the pruning certification.
    #[arg(long)]
    compare_exact: Option<PathBuf>,
    /// Pruned-mode run directory for the pruning certification.
    #[arg(long)]
    compare_pruned: Option<PathBuf>,
}

fn cmd_report(a: ReportArgs) -> Result<(), Error> {
    if let (Some(e), Some(p)) = (&a.compare_exact, &a.compare_pruned) {
        let (me, _, rows_e) = load_run(e)?;
        let (mp, _, rows_p) = load_run(p)?;
        let max_e: Vec<f64> = rows_e.iter().map(|r| r.max_centered).collect();
        let max_p: Vec<f64> = rows_p.iter().map(|r| r.max_centered).collect();
        let gap_e: Vec<f64> = rows_e.iter().filter_map(|r| r.gap12).collect();
        let gap_p: Vec<f64> = rows_p.iter().filter_map(|r| r.gap12).collect();
        let artifact = report::PruningArtifact {
            schema_version: SCHEMA_VERSION,
            exact_manifest_hash: me.content_hash.clone(),
            pruned_manifest_hash: mp.content_hash.clone(),
            ks_max: stats::ks_two_sample(&max_e, &max_p),
            ks_gap: stats::ks_two_sample(&gap_e, &gap_p),
            replicas: rows_e.len().min(rows_p.len()) as u64,
        };
        io::write_json_pretty(&artifact, &a.dir.join("pruning.json"))?;
    }
    let rep = report::build_report(&a.dir)?;
    io::write_json_pretty(&rep, &a.dir.join("report.json"))?;
    std::fs::write(a.dir.join("report.txt"), rep.render_text())?;
    print!("{}", rep.render_text());
    Ok(())
}
