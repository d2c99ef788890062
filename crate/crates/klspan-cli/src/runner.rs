//! Executes experiment configs: one deterministic run per seed, CSV
//! metrics per run, a JSON manifest per invocation, and grid sweeps
//! with per-cell aggregation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use klspan::baselines::{self, GdConfig};
use klspan::exact;
use klspan::metrics::{fmt_f64, MetricsRow};
use klspan::mtss::{self, MtssParams};
use klspan::oracle::{MdpEnv, OracleHandle, OracleMode, QueryLedger};
use klspan::rng::RngFactory;
use klspan::softdp;
use klspan::spanner::{self, SpannerParams};

use crate::config::{build_instance, BuiltInstance, ExperimentConfig, LearnerSpec};

#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub final_regret: Option<f64>,
    pub ledger: QueryLedger,
    #[serde(skip)]
    pub rows: Vec<MetricsRow>,
    #[serde(skip)]
    pub diag_names: Vec<&'static str>,
}

/// Runs every seed of a config and returns the per-seed summaries.
pub fn run_all_seeds(config: &ExperimentConfig) -> Result<Vec<RunSummary>> {
    let instance = build_instance(&config.instance)?;
    config
        .seeds
        .par_iter()
        .map(|&seed| run_one(config, &instance, seed))
        .collect()
}

/// One deterministic run: the outcome depends only on (config, seed).
pub fn run_one(
    config: &ExperimentConfig,
    instance: &BuiltInstance,
    seed: u64,
) -> Result<RunSummary> {
    let factory = RngFactory::new(seed);
    match (&config.learner, instance) {
        (
            LearnerSpec::Spanner {
                t_prompt,
                n_span,
                t_exp,
                delta,
                c_stat,
                c_cov,
                nu,
                lambda,
                m_rej,
                delta_rej,
            },
            BuiltInstance::Bandit(inst),
        ) => {
            let c_cov = c_cov.unwrap_or_else(|| {
                let (pi_star, _) = exact::exact_optimal(inst);
                exact::coverage_coefficients(inst, &pi_star).0
            });
            let mut params = SpannerParams::derive(
                inst.dim,
                inst.beta,
                inst.r_max,
                inst.param_radius,
                *delta,
                *c_stat,
                c_cov,
                *t_prompt,
                *n_span,
                *t_exp,
            )?;
            if let Some(v) = nu {
                params.nu = *v;
            }
            if let Some(v) = lambda {
                params.lambda = *v;
            }
            if let Some(v) = m_rej {
                params.m_rej = *v;
            }
            if let Some(v) = delta_rej {
                params.delta_rej = *v;
            }
            let mut oracle = OracleHandle::new(inst.clone(), OracleMode::Weak, &factory);
            let mut rng = factory.stream("learner");
            let (_, metrics) =
                spanner::spanner_sampling(&mut oracle, &params, &mut rng, config.oracle_checks)?;
            let diag_names = vec!["spanner_size", "rejection_queries", "rejection_accepted"];
            let mut rows: Vec<MetricsRow> = metrics
                .rounds
                .iter()
                .map(|r| {
                    let mut row = MetricsRow::from_ledger(seed, r.round as u64, &r.ledger);
                    row.exact_regret = r.exact_regret;
                    row.estimation_error = r.theta_err_sigma;
                    row.diagnostics = vec![
                        ("spanner_size", metrics.spanner_size as f64),
                        ("rejection_queries", r.rejection_queries as f64),
                        ("rejection_accepted", r.rejection_accepted as u8 as f64),
                    ];
                    row
                })
                .collect();
            let mut final_row =
                MetricsRow::from_ledger(seed, metrics.rounds.len() as u64, &metrics.ledger);
            final_row.exact_regret = metrics.exact_mixture_regret;
            final_row.diagnostics = vec![
                ("spanner_size", metrics.spanner_size as f64),
                ("rejection_queries", 0.0),
                ("rejection_accepted", 1.0),
            ];
            rows.push(final_row);
            Ok(RunSummary {
                seed,
                final_regret: metrics.exact_mixture_regret,
                ledger: metrics.ledger,
                rows,
                diag_names,
            })
        }
        (LearnerSpec::OnlineDpo { t_rounds, lambda }, BuiltInstance::Bandit(inst)) => {
            let lambda = lambda.unwrap_or((inst.r_max / inst.param_radius).powi(2));
            let mut oracle = OracleHandle::new(inst.clone(), OracleMode::Strong, &factory);
            let (_, metrics) =
                baselines::online_dpo(&mut oracle, *t_rounds, lambda, config.oracle_checks)?;
            Ok(baseline_summary(seed, metrics, &[]))
        }
        (
            LearnerSpec::Xpo { t_rounds, step_size, iterations, alpha, backtracking },
            BuiltInstance::Bandit(inst),
        ) => {
            let cfg = GdConfig {
                step_size: *step_size,
                iterations: *iterations,
                alpha: *alpha,
                backtracking: *backtracking,
            };
            let mut oracle = OracleHandle::new(inst.clone(), OracleMode::Strong, &factory);
            let mut rng = factory.stream("learner");
            let inst_ref = inst.clone();
            let partition =
                move |x: usize, th: &[f64]| baselines::exact_partition(&inst_ref, x, th);
            let (_, metrics) = baselines::xpo(
                &mut oracle,
                *t_rounds,
                &cfg,
                &partition,
                &mut rng,
                config.oracle_checks,
            )?;
            Ok(baseline_summary(seed, metrics, &["objective"]))
        }
        (
            LearnerSpec::Mtss {
                t_iters,
                n_reg,
                n_span,
                n_span_bar,
                m_rej,
                delta_rej,
                nu,
                eps,
                lambda,
                c_log,
            },
            BuiltInstance::Mdp(mdp),
        ) => {
            let m_rej = m_rej.unwrap_or_else(|| {
                let (_, pi_star, _) = softdp::exact_qstar(mdp);
                4.0 * conditional_coverage(mdp, &pi_star)
            });
            let params = MtssParams {
                t_iters: *t_iters,
                n_reg: *n_reg,
                n_span: *n_span,
                n_span_bar: *n_span_bar,
                m_rej,
                delta_rej: *delta_rej,
                nu: *nu,
                lambda: lambda
                    .unwrap_or(*eps / (*c_log * mdp.param_radius * mdp.param_radius)),
                eps_reg: eps.sqrt(),
                b_radius: mdp.param_radius,
                c_log: *c_log,
            };
            let mut env = MdpEnv::new(mdp.clone(), &factory);
            let mut rng = factory.stream("learner");
            let result = mtss::mtss(&mut env, &params, &mut rng)?;
            let final_regret = config.oracle_checks.then(|| {
                let law = mtss::exact_policy_law(mdp, &result.policy, params.m_rej, params.delta_rej);
                let (_, _, j_star) = softdp::exact_qstar(mdp);
                let (_, j_hat) = softdp::exact_qpi(mdp, &law);
                j_star - j_hat.expect_finite("J(pi_hat)")
            });
            let diag_names = vec!["max_uncertainty_sq", "triggered", "certified_round"];
            let mut rows: Vec<MetricsRow> = result
                .rounds
                .iter()
                .map(|r| {
                    let mut row = MetricsRow::from_ledger(seed, r.round as u64, &r.ledger);
                    row.diagnostics = vec![
                        ("max_uncertainty_sq", r.max_uncertainty_sq),
                        ("triggered", r.triggered as u8 as f64),
                        ("certified_round", -1.0),
                    ];
                    row
                })
                .collect();
            let mut final_row =
                MetricsRow::from_ledger(seed, result.rounds.len() as u64, &result.ledger);
            final_row.exact_regret = final_regret;
            final_row.diagnostics = vec![
                ("max_uncertainty_sq", 0.0),
                ("triggered", result.certified as u8 as f64),
                ("certified_round", result.round as f64),
            ];
            rows.push(final_row);
            Ok(RunSummary {
                seed,
                final_regret,
                ledger: result.ledger,
                rows,
                diag_names,
            })
        }
        (learner, instance) => {
            let kind = match instance {
                BuiltInstance::Bandit(_) => "bandit",
                BuiltInstance::Mdp(_) => "mdp",
            };
            bail!("learner {learner:?} cannot run on a {kind} instance")
        }
    }
}

/// Conditional coverage max_{h,x,a} pi_h(a|x) / pi_ref_h(a|x).
pub fn conditional_coverage(mdp: &klspan::mdp::TokenMdp, policy: &[Vec<Vec<f64>>]) -> f64 {
    let mut worst = 0.0f64;
    for h in 0..mdp.horizon {
        for x in 0..mdp.n_states[h] {
            for a in 0..mdp.n_actions {
                let q = mdp.pi_ref[h][x][a];
                let p = policy[h][x][a];
                if p > 0.0 && q > 0.0 {
                    worst = worst.max(p / q);
                }
            }
        }
    }
    worst.max(1.0)
}

fn baseline_summary(
    seed: u64,
    metrics: baselines::BaselineMetrics,
    diag_names: &[&'static str],
) -> RunSummary {
    let with_objective = diag_names.contains(&"objective");
    let mut rows: Vec<MetricsRow> = metrics
        .rounds
        .iter()
        .map(|r| {
            let mut row = MetricsRow::from_ledger(seed, r.round as u64, &r.ledger);
            row.exact_regret = r.exact_regret;
            if with_objective {
                row.diagnostics = vec![("objective", r.objective.unwrap_or(f64::NAN))];
            }
            row
        })
        .collect();
    let mut final_row = MetricsRow::from_ledger(seed, metrics.rounds.len() as u64, &metrics.ledger);
    final_row.exact_regret = metrics.final_exact_regret;
    if with_objective {
        final_row.diagnostics = vec![("objective", f64::NAN)];
    }
    rows.push(final_row);
    RunSummary {
        seed,
        final_regret: metrics.final_exact_regret,
        ledger: metrics.ledger,
        rows,
        diag_names: diag_names.to_vec(),
    }
}

#[derive(Debug, Serialize)]
struct Manifest {
    config_hash: String,
    crate_version: &'static str,
    wall_time_secs: f64,
    seeds: Vec<u64>,
    status: String,
    summaries: Vec<serde_json::Value>,
}

/// Executes `run <config>`: one CSV per seed plus a manifest.
pub fn run_command(config_text: &str, config: &ExperimentConfig, out_dir: &Path, name: &str) -> Result<()> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output dir {}", out_dir.display()))?;
    let start = Instant::now();
    let result = run_all_seeds(config);
    let (summaries, status) = match &result {
        Ok(s) => (s, "complete".to_string()),
        Err(e) => (&Vec::new(), format!("failed: {e:#}")),
    };
    for summary in summaries {
        let path = out_dir.join(format!("{name}-seed{}.csv", summary.seed));
        write_csv(&path, summary)?;
    }
    let manifest = Manifest {
        config_hash: fnv_hex(config_text),
        crate_version: env!("CARGO_PKG_VERSION"),
        wall_time_secs: start.elapsed().as_secs_f64(),
        seeds: config.seeds.clone(),
        status,
        summaries: summaries
            .iter()
            .map(|s| {
                serde_json::json!({
                    "seed": s.seed,
                    "final_regret": s.final_regret,
                    "ledger": s.ledger,
                })
            })
            .collect(),
    };
    std::fs::write(
        out_dir.join(format!("{name}-manifest.json")),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    result.map(|_| ())
}

pub fn write_csv(path: &Path, summary: &RunSummary) -> Result<()> {
    let mut text = String::new();
    text.push_str(&MetricsRow::csv_header(&summary.diag_names));
    text.push('\n');
    for row in &summary.rows {
        text.push_str(&row.csv_row());
        text.push('\n');
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn fnv_hex(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

// --- sweeps ---------------------------------------------------------------

#[derive(Debug, Clone, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Refuse grids bigger than this many (cell, seed) runs.
    #[serde(default = "default_max_runs")]
    pub max_runs: usize,
    pub base: toml::Value,
    /// Dotted config paths mapped to value lists.
    pub grid: toml::value::Table,
}

fn default_max_runs() -> usize {
    10_000
}

pub fn parse_sweep(text: &str) -> Result<SweepConfig> {
    let sweep: SweepConfig = toml::from_str(text).context("sweep schema error")?;
    if sweep.grid.is_empty() {
        bail!("sweep schema error: empty grid");
    }
    Ok(sweep)
}

fn set_path(value: &mut toml::Value, path: &str, new: toml::Value) -> Result<()> {
    let mut cursor = value;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cursor
            .as_table_mut()
            .with_context(|| format!("path {path}: {part} is not a table"))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), new);
            return Ok(());
        }
        cursor = table
            .get_mut(*part)
            .with_context(|| format!("path {path}: missing key {part}"))?;
    }
    Ok(())
}

/// One grid cell: assignments plus the materialized config.
#[derive(Debug)]
pub struct SweepCell {
    pub assignments: Vec<(String, toml::Value)>,
    pub config: ExperimentConfig,
}

pub fn expand_cells(sweep: &SweepConfig) -> Result<Vec<SweepCell>> {
    let keys: Vec<&String> = sweep.grid.keys().collect();
    let lists: Vec<&Vec<toml::Value>> = keys
        .iter()
        .map(|k| {
            sweep.grid[*k]
                .as_array()
                .with_context(|| format!("grid entry {k} must be a list"))
        })
        .collect::<Result<_>>()?;
    let n_cells: usize = lists.iter().map(|l| l.len().max(1)).product();
    let mut cells = Vec::with_capacity(n_cells);
    for mut idx in 0..n_cells {
        let mut value = sweep.base.clone();
        let mut assignments = Vec::with_capacity(keys.len());
        for (k, list) in keys.iter().zip(&lists) {
            let pick = &list[idx % list.len()];
            idx /= list.len();
            set_path(&mut value, k, pick.clone())?;
            assignments.push(((*k).clone(), pick.clone()));
        }
        let config: ExperimentConfig =
            value.try_into().context("sweep cell failed config schema")?;
        cells.push(SweepCell { assignments, config });
    }
    let total_runs: usize = cells.iter().map(|c| c.config.seeds.len()).sum();
    if total_runs > sweep.max_runs {
        bail!("sweep would execute {total_runs} runs, over the limit of {}", sweep.max_runs);
    }
    Ok(cells)
}

/// Per-cell aggregates over seeds.
#[derive(Debug)]
pub struct CellAggregate {
    pub assignments: Vec<(String, toml::Value)>,
    pub n_seeds: usize,
    pub regret_mean: f64,
    pub regret_median: f64,
    pub regret_q25: f64,
    pub regret_q75: f64,
    pub t_data_mean: f64,
    pub t_comp_mean: f64,
    pub resets_mean: f64,
}

pub fn run_sweep(sweep: &SweepConfig) -> Result<Vec<CellAggregate>> {
    let cells = expand_cells(sweep)?;
    cells
        .par_iter()
        .map(|cell| {
            let summaries = run_all_seeds(&cell.config)?;
            let mut regrets: Vec<f64> =
                summaries.iter().filter_map(|s| s.final_regret).collect();
            regrets.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mean = |xs: &[f64]| {
                if xs.is_empty() {
                    f64::NAN
                } else {
                    xs.iter().sum::<f64>() / xs.len() as f64
                }
            };
            Ok(CellAggregate {
                assignments: cell.assignments.clone(),
                n_seeds: summaries.len(),
                regret_mean: mean(&regrets),
                regret_median: quantile(&regrets, 0.5),
                regret_q25: quantile(&regrets, 0.25),
                regret_q75: quantile(&regrets, 0.75),
                t_data_mean: mean(
                    &summaries.iter().map(|s| s.ledger.t_data as f64).collect::<Vec<_>>(),
                ),
                t_comp_mean: mean(
                    &summaries.iter().map(|s| s.ledger.total_comp() as f64).collect::<Vec<_>>(),
                ),
                resets_mean: mean(
                    &summaries.iter().map(|s| s.ledger.resets as f64).collect::<Vec<_>>(),
                ),
            })
        })
        .collect()
}

/// Sorted-sample quantile (linear interpolation).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

pub fn sweep_command(text: &str, out_dir: &Path, name: &str) -> Result<PathBuf> {
    let sweep = parse_sweep(text)?;
    let aggregates = run_sweep(&sweep)?;
    std::fs::create_dir_all(out_dir)?;
    let keys: Vec<String> = aggregates
        .first()
        .map(|a| a.assignments.iter().map(|(k, _)| k.clone()).collect())
        .unwrap_or_default();
    let mut text_out = String::new();
    for k in &keys {
        text_out.push_str(k);
        text_out.push(',');
    }
    text_out.push_str(
        "n_seeds,regret_mean,regret_median,regret_q25,regret_q75,t_data_mean,t_comp_mean,resets_mean\n",
    );
    for agg in &aggregates {
        for (_, v) in &agg.assignments {
            text_out.push_str(&toml_scalar_to_string(v));
            text_out.push(',');
        }
        text_out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            agg.n_seeds,
            fmt_f64(agg.regret_mean),
            fmt_f64(agg.regret_median),
            fmt_f64(agg.regret_q25),
            fmt_f64(agg.regret_q75),
            fmt_f64(agg.t_data_mean),
            fmt_f64(agg.t_comp_mean),
            fmt_f64(agg.resets_mean),
        ));
    }
    let path = out_dir.join(format!("{name}-sweep.csv"));
    std::fs::write(&path, text_out)?;
    Ok(path)
}

fn toml_scalar_to_string(v: &toml::Value) -> String {
    match v {
        toml::Value::Float(f) => fmt_f64(*f),
        other => other.to_string().trim_matches('"').to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    const CFG: &str = r#"
seeds = [0, 1, 2]
oracle_checks = true

[instance]
kind = "random"
dim = 3
n_prompts = 2
n_responses = 6
beta = 0.4
param_radius = 2.0
instance_seed = 7

[learner]
kind = "online_dpo"
t_rounds = 10
"#;

    #[test]
    fn runs_are_deterministic_per_seed() {
        let config = parse_config(CFG).unwrap();
        let a = run_all_seeds(&config).unwrap();
        let b = run_all_seeds(&config).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.seed, y.seed);
            assert_eq!(x.ledger, y.ledger);
            assert_eq!(
                x.rows.iter().map(|r| r.csv_row()).collect::<Vec<_>>(),
                y.rows.iter().map(|r| r.csv_row()).collect::<Vec<_>>()
            );
        }
        assert_ne!(a[0].rows.last().unwrap().csv_row().split_once(',').unwrap().1,
                   a[1].rows.last().unwrap().csv_row().split_once(',').unwrap().1);
    }

    /// Nests the flat experiment config under [base] for sweep files.
    fn as_base(cfg: &str) -> String {
        format!("[base]\n{}", cfg.replace("[instance]", "[base.instance]").replace("[learner]", "[base.learner]"))
    }

    #[test]
    fn sweep_expansion_and_refusal() {
        let sweep_text = format!(
            "max_runs = 100\n{}\n[grid]\n\"learner.t_rounds\" = [5, 10]\n\"instance.beta\" = [0.3, 0.4]\n",
            as_base(CFG)
        );
        let sweep = parse_sweep(&sweep_text).unwrap();
        let cells = expand_cells(&sweep).unwrap();
        assert_eq!(cells.len(), 4);
        let tight = sweep_text.replace("max_runs = 100", "max_runs = 5");
        let sweep = parse_sweep(&tight).unwrap();
        let err = expand_cells(&sweep).unwrap_err().to_string();
        assert!(err.contains("12 runs"), "{err}");
    }

    #[test]
    fn one_point_grid_matches_plain_run() {
        let sweep_text =
            format!("{}\n[grid]\n\"learner.t_rounds\" = [10]\n", as_base(CFG));
        let sweep = parse_sweep(&sweep_text).unwrap();
        let aggs = run_sweep(&sweep).unwrap();
        assert_eq!(aggs.len(), 1);
        let config = parse_config(CFG).unwrap();
        let plain = run_all_seeds(&config).unwrap();
        let mut regrets: Vec<f64> = plain.iter().filter_map(|s| s.final_regret).collect();
        regrets.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(aggs[0].regret_median, quantile(&regrets, 0.5));
    }

    #[test]
    fn quantile_interpolation() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&xs, 0.0), 1.0);
        assert_eq!(quantile(&xs, 1.0), 4.0);
        assert_eq!(quantile(&xs, 0.5), 2.5);
    }
}
