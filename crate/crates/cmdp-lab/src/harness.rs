//! Experiment harness: builds environments from a parsed config, executes
//! seeded (algorithm, seed) runs with bounded parallelism, and emits the
//! learning curves as CSV files plus cross-seed summaries.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use thiserror::Error;

use crate::cmdp::{CmdpError, TabularCmdp, TabularCmdpDoc};
use crate::config::{Algorithm, ConfigError, EnvSpec, ExperimentConfig};
use crate::driver::{run_apdo, run_pdo, run_primal_dual_ddpg, DriverError, RunRecord};
use crate::envs::grid::{GridEnv, GridError};
use crate::envs::{Environment, TabularEnv};
use crate::onpolicy::{SoftmaxPolicy, ValueBaseline};
use crate::oracle::{solve_dual_bisection, OracleError};
use crate::seeding::{stream, StreamId};

const BASELINE_FIT_ITERS: usize = 200;
const BASELINE_FIT_LR: f64 = 1e-2;
const BASELINE_FIT_MINIBATCH: usize = 64;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Driver(#[from] DriverError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Cmdp(#[from] CmdpError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("cannot {action} `{path}`: {source}")]
    Io { action: &'static str, path: PathBuf, source: std::io::Error },
}

fn io_err<'a>(action: &'static str, path: &'a Path) -> impl FnOnce(std::io::Error) -> HarnessError + 'a {
    move |source| HarnessError::Io { action, path: path.to_path_buf(), source }
}

fn invalid(path: &str, message: impl Into<String>) -> HarnessError {
    ConfigError::Invalid { path: path.to_string(), message: message.into() }.into()
}

/// A concrete environment instance built from the config's `env` section.
pub enum BuiltEnv {
    Tabular(TabularEnv),
    Grid(GridEnv),
}

/// Instantiates the configured environment. Tabular models are loaded from
/// disk and must agree with the config's discount factor.
pub fn build_env(cfg: &ExperimentConfig) -> Result<BuiltEnv, HarnessError> {
    match &cfg.env {
        EnvSpec::RiskyChain { d } => {
            let cmdp = crate::envs::risky_chain::make_risky_chain(cfg.gamma, *d)?;
            Ok(BuiltEnv::Tabular(TabularEnv::new(cmdp)))
        }
        EnvSpec::Grid(spec) => Ok(BuiltEnv::Grid(GridEnv::new(spec.clone(), cfg.gamma)?)),
        EnvSpec::Tabular { path } => {
            let text = std::fs::read_to_string(path).map_err(io_err("read", path))?;
            let doc: TabularCmdpDoc = serde_json::from_str(&text).map_err(ConfigError::Json)?;
            let cmdp = TabularCmdp::from_doc(doc)?;
            if (cmdp.gamma() - cfg.gamma).abs() > 1e-12 {
                return Err(invalid(
                    "gamma",
                    format!(
                        "config gamma {} does not match the tabular model's gamma {}",
                        cfg.gamma,
                        cmdp.gamma()
                    ),
                ));
            }
            Ok(BuiltEnv::Tabular(TabularEnv::new(cmdp)))
        }
    }
}

fn make_setup<E: Environment>(
    env: &E,
    cfg: &ExperimentConfig,
    seed: u64,
    tabular: bool,
) -> Result<(SoftmaxPolicy, ValueBaseline), HarnessError> {
    let num_channels = 1 + env.num_cost_channels();
    if tabular {
        let num_states = env.num_states().expect("tabular environments enumerate states");
        let init = match &cfg.init_logits {
            Some(logits) => {
                if logits.len() != env.num_actions() {
                    return Err(invalid(
                        "init_logits",
                        format!("expected {} entries, got {}", env.num_actions(), logits.len()),
                    ));
                }
                logits.clone()
            }
            None => vec![0.0; env.num_actions()],
        };
        Ok((
            SoftmaxPolicy::tabular(num_states, &init),
            ValueBaseline::tabular(num_states, num_channels),
        ))
    } else {
        if cfg.init_logits.is_some() {
            return Err(invalid("init_logits", "only supported for tabular environments"));
        }
        let policy = SoftmaxPolicy::mlp(
            env.feature_dim(),
            &cfg.policy_hidden,
            env.num_actions(),
            &mut stream(seed, StreamId::PolicyInit),
        );
        let baseline = ValueBaseline::mlp(
            env.feature_dim(),
            &cfg.policy_hidden,
            num_channels,
            BASELINE_FIT_ITERS,
            BASELINE_FIT_LR,
            BASELINE_FIT_MINIBATCH,
            &mut stream(seed, StreamId::ValueInit),
        );
        Ok((policy, baseline))
    }
}

/// One finished (algorithm, seed) run.
#[derive(Debug)]
pub struct CompletedRun {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub records: Vec<RunRecord>,
    pub lambda_off: Option<Vec<f64>>,
}

fn run_on<E: Environment>(
    env: &mut E,
    cfg: &ExperimentConfig,
    algorithm: Algorithm,
    seed: u64,
    tabular: bool,
) -> Result<CompletedRun, HarnessError> {
    let (records, lambda_off) = match algorithm {
        Algorithm::Pdo => {
            let (policy, baseline) = make_setup(env, cfg, seed, tabular)?;
            let out = run_pdo(env, policy, baseline, &cfg.pdo_config(), seed)?;
            (out.records, None)
        }
        Algorithm::Apdo => {
            let (policy, baseline) = make_setup(env, cfg, seed, tabular)?;
            let out = run_apdo(env, policy, baseline, &cfg.apdo_config(), seed)?;
            (out.records, out.lambda_off)
        }
        Algorithm::PdDdpg => {
            let records = run_primal_dual_ddpg(env, &cfg.pdo_config(), &cfg.off_config(), seed)?;
            (records, None)
        }
    };
    Ok(CompletedRun { algorithm, seed, records, lambda_off })
}

/// Builds a fresh environment and executes one (algorithm, seed) run.
pub fn execute(
    cfg: &ExperimentConfig,
    algorithm: Algorithm,
    seed: u64,
) -> Result<CompletedRun, HarnessError> {
    match build_env(cfg)? {
        BuiltEnv::Tabular(mut env) => run_on(&mut env, cfg, algorithm, seed, true),
        BuiltEnv::Grid(mut env) => run_on(&mut env, cfg, algorithm, seed, false),
    }
}

/// Executes every configured (algorithm, seed) pair with at most
/// `parallelism` runs in flight.
pub fn execute_all(cfg: &ExperimentConfig) -> Result<Vec<CompletedRun>, HarnessError> {
    let jobs: Vec<(Algorithm, u64)> = cfg
        .algorithm
        .iter()
        .flat_map(|&a| cfg.seeds.iter().map(move |&s| (a, s)))
        .collect();
    let workers = cfg.parallelism.min(jobs.len()).max(1);
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<CompletedRun, HarnessError>>>> =
        jobs.iter().map(|_| Mutex::new(None)).collect();

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(algorithm, seed)) = jobs.get(i) else { break };
                let result = execute(cfg, algorithm, seed);
                *slots[i].lock().unwrap() = Some(result);
            });
        }
    });

    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("every job ran"))
        .collect()
}

fn format_cell(x: f64) -> String {
    if x == x.trunc() && x.abs() < 1e15 {
        format!("{:.1}", x)
    } else {
        format!("{x}")
    }
}

fn run_csv(records: &[RunRecord]) -> String {
    let m = records.first().map_or(0, |r| r.avg_costs.len());
    let mut header = String::from("epoch,avg_return");
    for i in 1..=m {
        header.push_str(&format!(",avg_cost_{i}"));
    }
    for i in 1..=m {
        header.push_str(&format!(",lambda_{i}"));
    }
    header.push_str(",samples,wall_s,adjusted");
    let mut out = header;
    out.push('\n');
    for r in records {
        out.push_str(&format!("{},{}", r.epoch, format_cell(r.avg_return)));
        for c in &r.avg_costs {
            out.push_str(&format!(",{}", format_cell(*c)));
        }
        for l in &r.lambda {
            out.push_str(&format!(",{}", format_cell(*l)));
        }
        out.push_str(&format!(
            ",{},{},{}\n",
            r.samples,
            format_cell(r.wall_s),
            u8::from(r.adjusted)
        ));
    }
    out
}

/// Linear-interpolation quantile of a sorted sample.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "empty sample");
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 < n {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[lo]
    }
}

fn summary_csv(runs: &[&CompletedRun]) -> String {
    let epochs = runs.iter().map(|r| r.records.len()).min().unwrap_or(0);
    let m = runs
        .first()
        .and_then(|r| r.records.first())
        .map_or(0, |r| r.avg_costs.len());
    let mut names = vec!["avg_return".to_string()];
    names.extend((1..=m).map(|i| format!("avg_cost_{i}")));
    names.extend((1..=m).map(|i| format!("lambda_{i}")));

    let mut out = String::from("epoch");
    for name in &names {
        out.push_str(&format!(",{name}_median,{name}_q1,{name}_q3"));
    }
    out.push('\n');

    for epoch in 0..epochs {
        out.push_str(&epoch.to_string());
        let metrics = |run: &CompletedRun| -> Vec<f64> {
            let r = &run.records[epoch];
            let mut v = vec![r.avg_return];
            v.extend_from_slice(&r.avg_costs);
            v.extend_from_slice(&r.lambda);
            v
        };
        for k in 0..names.len() {
            let mut sample: Vec<f64> = runs.iter().map(|r| metrics(r)[k]).collect();
            sample.sort_by(f64::total_cmp);
            for p in [0.5, 0.25, 0.75] {
                out.push_str(&format!(",{}", format_cell(quantile(&sample, p))));
            }
        }
        out.push('\n');
    }
    out
}

fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    let mut file = std::fs::File::create(path).map_err(io_err("create", path))?;
    file.write_all(contents.as_bytes()).map_err(io_err("write", path))
}

fn write_outputs(
    dir: &Path,
    cfg: &ExperimentConfig,
    runs: &[CompletedRun],
) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(dir).map_err(io_err("create directory", dir))?;
    let mut written = Vec::new();
    for run in runs {
        let path = dir.join(format!("{}_seed{}.csv", run.algorithm.name(), run.seed));
        write_file(&path, &run_csv(&run.records))?;
        written.push(path);
    }
    for &algorithm in &cfg.algorithm {
        let group: Vec<&CompletedRun> =
            runs.iter().filter(|r| r.algorithm == algorithm).collect();
        if group.is_empty() {
            continue;
        }
        let path = dir.join(format!("{}_summary.csv", algorithm.name()));
        write_file(&path, &summary_csv(&group))?;
        written.push(path);
    }
    Ok(written)
}

/// Runs the full experiment matrix and writes one CSV per (algorithm, seed)
/// plus one cross-seed summary CSV per algorithm. Returns the written paths.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, HarnessError> {
    let runs = execute_all(cfg)?;
    write_outputs(&cfg.output, cfg, &runs)
}

/// Runs the APDO adjustment-epoch sweep: one full seeded run set per value
/// (written under `kadj_<value>/`), plus a combined comparison table with
/// the multiplier right after adjustment and the final batch statistics.
pub fn sweep_kadj(cfg: &ExperimentConfig, values: &[usize]) -> Result<Vec<PathBuf>, HarnessError> {
    if values.is_empty() {
        return Err(invalid("values", "at least one adjustment epoch required"));
    }
    for &v in values {
        if v >= cfg.epochs {
            return Err(invalid(
                "values",
                format!("adjustment epoch {v} must be below epochs ({})", cfg.epochs),
            ));
        }
    }
    let mut written = Vec::new();
    let mut comparison = String::from(
        "k_adj,seed,lambda_after_adjustment,final_avg_return,final_avg_cost_1\n",
    );
    for &k_adj in values {
        let mut sub = cfg.clone();
        sub.algorithm = vec![Algorithm::Apdo];
        sub.k_adj = k_adj;
        sub.output = cfg.output.join(format!("kadj_{k_adj}"));
        let runs = execute_all(&sub)?;
        for run in &runs {
            let lambda_off = run.lambda_off.as_ref().expect("adjustment fired")[0];
            let last = run.records.last().expect("at least one epoch");
            comparison.push_str(&format!(
                "{},{},{},{},{}\n",
                k_adj,
                run.seed,
                format_cell(lambda_off),
                format_cell(last.avg_return),
                format_cell(last.avg_costs[0]),
            ));
        }
        written.extend(write_outputs(&sub.output, &sub, &runs)?);
    }
    std::fs::create_dir_all(&cfg.output).map_err(io_err("create directory", &cfg.output))?;
    let path = cfg.output.join("kadj_comparison.csv");
    write_file(&path, &comparison)?;
    written.push(path);
    Ok(written)
}

/// Solves a tabular model from disk with the exact dual oracle and returns
/// `lambda_star`, `r_star`, `c_star` as a JSON document.
pub fn oracle_report(path: &Path) -> Result<String, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(io_err("read", path))?;
    let doc: TabularCmdpDoc = serde_json::from_str(&text).map_err(ConfigError::Json)?;
    let cmdp = TabularCmdp::from_doc(doc)?;
    let solution = solve_dual_bisection(&cmdp)?;
    let report = serde_json::json!({
        "lambda_star": solution.lambda_star,
        "r_star": solution.r_star,
        "c_star": solution.c_star,
    });
    Ok(serde_json::to_string_pretty(&report).expect("report serializes"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::risky_chain::make_risky_chain;

    fn tiny_chain_config(output: &Path) -> ExperimentConfig {
        ExperimentConfig::parse(&format!(
            r#"{{
                "env": {{"type": "risky_chain", "d": 2.0}},
                "algorithm": ["pdo", "apdo"],
                "seeds": [0, 1],
                "output": {:?},
                "gamma": 0.9,
                "alpha": 0.5,
                "weight_decay": 0.1,
                "normalize_advantages": false,
                "batch_size": 88,
                "epochs": 3,
                "k_adj": 1,
                "off_iterations": 25,
                "critic_hidden": [8],
                "actor_hidden": [8],
                "init_logits": [0.0, -3.0]
            }}"#,
            output.to_str().unwrap()
        ))
        .unwrap()
    }

    fn read(path: &Path) -> String {
        std::fs::read_to_string(path).unwrap()
    }

    /// Replaces the wall-clock column with a constant so outputs can be
    /// compared across runs.
    fn mask_wall(csv: &str) -> String {
        let mut lines = csv.lines();
        let header = lines.next().unwrap();
        let Some(wall_idx) = header.split(',').position(|c| c == "wall_s") else {
            return csv.to_string();
        };
        let mut out = format!("{header}\n");
        for line in lines {
            let mut cells: Vec<&str> = line.split(',').collect();
            cells[wall_idx] = "0";
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    #[test]
    fn experiment_writes_run_and_summary_csvs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_chain_config(dir.path());
        let written = run_experiment(&cfg).unwrap();
        assert_eq!(written.len(), 6);

        let run = read(&dir.path().join("apdo_seed0.csv"));
        let mut lines = run.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,avg_return,avg_cost_1,lambda_1,samples,wall_s,adjusted"
        );
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 3);
        for row in &rows {
            let cells: Vec<&str> = row.split(',').collect();
            assert_eq!(cells.len(), 7);
            for cell in cells {
                cell.parse::<f64>().unwrap();
            }
        }
        let adjusted: Vec<&str> =
            rows.iter().map(|r| *r.split(',').collect::<Vec<_>>().last().unwrap()).collect();
        assert_eq!(adjusted, vec!["0", "1", "0"]);

        let pdo_run = read(&dir.path().join("pdo_seed1.csv"));
        assert!(pdo_run.lines().skip(1).all(|r| r.ends_with(",0")));

        let summary = read(&dir.path().join("pdo_summary.csv"));
        assert_eq!(
            summary.lines().next().unwrap(),
            "epoch,avg_return_median,avg_return_q1,avg_return_q3,\
             avg_cost_1_median,avg_cost_1_q1,avg_cost_1_q3,\
             lambda_1_median,lambda_1_q1,lambda_1_q3"
        );
        assert_eq!(summary.lines().count(), 4);
    }

    #[test]
    fn reruns_are_identical_apart_from_wall_clock() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        run_experiment(&tiny_chain_config(dir_a.path())).unwrap();
        run_experiment(&tiny_chain_config(dir_b.path())).unwrap();
        for name in ["pdo_seed0.csv", "pdo_seed1.csv", "apdo_seed0.csv", "apdo_seed1.csv"] {
            let a = mask_wall(&read(&dir_a.path().join(name)));
            let b = mask_wall(&read(&dir_b.path().join(name)));
            assert_eq!(a, b, "{name} differs across reruns");
        }
    }

    #[test]
    fn parallel_execution_matches_serial_execution() {
        let dir_serial = tempfile::tempdir().unwrap();
        let dir_parallel = tempfile::tempdir().unwrap();
        let serial = tiny_chain_config(dir_serial.path());
        let mut parallel = tiny_chain_config(dir_parallel.path());
        parallel.parallelism = 4;
        run_experiment(&serial).unwrap();
        run_experiment(&parallel).unwrap();
        for name in ["pdo_seed0.csv", "apdo_seed1.csv", "pdo_summary.csv", "apdo_summary.csv"] {
            let a = mask_wall(&read(&dir_serial.path().join(name)));
            let b = mask_wall(&read(&dir_parallel.path().join(name)));
            assert_eq!(a, b, "{name} differs under parallelism");
        }
    }

    #[test]
    fn quantiles_interpolate_linearly() {
        let sorted = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&sorted, 0.5), 2.5);
        assert_eq!(quantile(&sorted, 0.25), 1.75);
        assert_eq!(quantile(&sorted, 0.75), 3.25);
        assert_eq!(quantile(&[7.0], 0.25), 7.0);
    }

    #[test]
    fn kadj_sweep_writes_run_sets_and_a_comparison_table() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_chain_config(dir.path());
        sweep_kadj(&cfg, &[0, 1]).unwrap();

        assert!(dir.path().join("kadj_0/apdo_seed0.csv").exists());
        assert!(dir.path().join("kadj_1/apdo_seed1.csv").exists());

        let table = read(&dir.path().join("kadj_comparison.csv"));
        let mut lines = table.lines();
        assert_eq!(
            lines.next().unwrap(),
            "k_adj,seed,lambda_after_adjustment,final_avg_return,final_avg_cost_1"
        );
        let rows: Vec<Vec<f64>> = lines
            .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 4);
        assert_eq!(
            rows.iter().map(|r| r[0] as usize).collect::<Vec<_>>(),
            vec![0, 0, 1, 1]
        );
        assert!(rows.iter().all(|r| r[2] >= 0.0));

        assert!(matches!(
            sweep_kadj(&cfg, &[]),
            Err(HarnessError::Config(ConfigError::Invalid { .. }))
        ));
        assert!(matches!(
            sweep_kadj(&cfg, &[5]),
            Err(HarnessError::Config(ConfigError::Invalid { .. }))
        ));
    }

    #[test]
    fn oracle_report_solves_a_model_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.json");
        let doc = make_risky_chain(0.9, 2.0).unwrap().to_doc();
        std::fs::write(&path, serde_json::to_string(&doc).unwrap()).unwrap();

        let report = oracle_report(&path).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&report).unwrap();
        assert!((parsed["lambda_star"].as_f64().unwrap() - 9.0).abs() < 1e-3);
        assert!((parsed["r_star"].as_f64().unwrap() - 28.0).abs() < 1e-3);
        assert!((parsed["c_star"].as_f64().unwrap() - 2.0).abs() < 1e-3);
    }

    #[test]
    fn tabular_models_load_from_disk_and_check_gamma() {
        let dir = tempfile::tempdir().unwrap();
        let model = dir.path().join("chain.json");
        let doc = make_risky_chain(0.9, 2.0).unwrap().to_doc();
        std::fs::write(&model, serde_json::to_string(&doc).unwrap()).unwrap();

        let mut cfg = tiny_chain_config(dir.path());
        cfg.env = EnvSpec::Tabular { path: model.clone() };
        let run = execute(&cfg, Algorithm::Pdo, 0).unwrap();
        assert_eq!(run.records.len(), 3);

        cfg.gamma = 0.995;
        match execute(&cfg, Algorithm::Pdo, 0) {
            Err(HarnessError::Config(ConfigError::Invalid { path, .. })) => {
                assert_eq!(path, "gamma");
            }
            other => panic!("expected gamma mismatch, got {other:?}"),
        }
    }

    #[test]
    fn policy_initialization_is_validated_per_environment() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_chain_config(dir.path());
        cfg.init_logits = Some(vec![0.0, 0.0, 0.0]);
        match execute(&cfg, Algorithm::Pdo, 0) {
            Err(HarnessError::Config(ConfigError::Invalid { path, .. })) => {
                assert_eq!(path, "init_logits");
            }
            other => panic!("expected init_logits error, got {other:?}"),
        }

        let grid = ExperimentConfig::parse(
            r#"{"env": {"type": "grid", "grid_size": 2, "num_apples": 1, "num_bombs": 1,
                "episode_length": 3, "layout_seed": 0},
                "init_logits": [0.0, 0.0, 0.0, 0.0],
                "batch_size": 6, "epochs": 1}"#,
        )
        .unwrap();
        match execute(&grid, Algorithm::Pdo, 0) {
            Err(HarnessError::Config(ConfigError::Invalid { path, .. })) => {
                assert_eq!(path, "init_logits");
            }
            other => panic!("expected init_logits error, got {other:?}"),
        }
    }

    #[test]
    fn ddpg_runs_flow_through_the_harness() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_chain_config(dir.path());
        cfg.algorithm = vec![Algorithm::PdDdpg];
        cfg.seeds = vec![0];
        cfg.batch_size = 64;
        cfg.off_iterations = 30;
        let written = run_experiment(&cfg).unwrap();
        assert_eq!(written.len(), 2);
        let run = read(&dir.path().join("pd-ddpg_seed0.csv"));
        assert_eq!(run.lines().count(), 4);
        assert!(run.lines().skip(1).all(|r| r.ends_with(",0")));
    }
}
