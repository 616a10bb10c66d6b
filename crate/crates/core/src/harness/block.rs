//! Running a block of trials and exporting or rebuilding its results.
//!
//! Seeds: every random draw comes from `derive_seed(master, path)`. Per trial
//! `i` the task, initial policy and test set use `[TASK, i]`,
//! `[INIT_POLICY, i]` and `[TEST_SET, i]`; estimator initialization uses
//! `[LEARNER, i, 0]` and learning `[LEARNER, i, 1]` for every method, so
//! methods in the same trial share all initial conditions. Evaluation `j`
//! draws task noise from `[EVAL, i, j]`.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::PolicyCheckpoint;
use super::config::{Learner, MethodKind, ResolvedMethod, RunConfig, TaskConfig};
use super::curves::{babble_equivalent_shift, mean, LearningCurve, TrialSummary};
use super::sizing::{size_networks, SizedNetworks};
use super::{evaluate_policy, fingerprint};
use crate::costate::{Agent, RolloutStats};
use crate::ddpg::DdpgAgent;
use crate::envgen::{make_task, Acceleration, Environment, TaskSpec};
use crate::error::{Error, Result};
use crate::nn::MlpNet;
use crate::rng::{derive_seed, rng_from_seed, stream, uniform_pm1};

pub const SUMMARY_FILE: &str = "summary.json";
pub const TABLE_FILE: &str = "table.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const CURVES_DIR: &str = "curves";
pub const POLICIES_DIR: &str = "policies";
pub const DIAGNOSTICS_DIR: &str = "diagnostics";

/// Everything shared by the methods of one trial.
#[derive(Debug, Clone)]
pub struct TrialSetup {
    pub trial: usize,
    pub task: TaskSpec,
    pub env: Environment,
    pub policy: MlpNet,
    pub test_set_seed: u64,
    pub test_states: Array2<f64>,
}

pub fn trial_setup(config: &RunConfig, sized: &SizedNetworks, trial: usize) -> Result<TrialSetup> {
    let seed = |s: u64| derive_seed(config.master_seed, &[s, trial as u64]);
    let task = config.task.spec(seed(stream::TASK));
    let env = make_task(&task)?;
    let policy = MlpNet::new(sized.policy.clone(), &mut rng_from_seed(seed(stream::INIT_POLICY)))?;
    let test_set_seed = seed(stream::TEST_SET);
    let test_states = uniform_pm1(task.n_s, config.test_set_size, &mut rng_from_seed(test_set_seed));
    Ok(TrialSetup { trial, task, env, policy, test_set_seed, test_states })
}

#[derive(Debug, Clone)]
pub struct MethodResult {
    pub curve: LearningCurve,
    pub stats: Vec<RolloutStats>,
    pub policy: MlpNet,
    /// Fingerprint of the freshly initialized estimators.
    pub estimator_fingerprint: String,
}

fn estimator_fingerprint(nets: &[&MlpNet]) -> String {
    fingerprint(nets.iter().flat_map(|n| n.params_flat()))
}

/// Trains one method on one trial from the shared initial conditions.
pub fn run_method(
    config: &RunConfig,
    sized: &SizedNetworks,
    setup: &TrialSetup,
    method: &ResolvedMethod,
) -> Result<MethodResult> {
    let env = setup.env.clone();
    let trial = setup.trial as u64;
    let est_rng = &mut rng_from_seed(derive_seed(config.master_seed, &[stream::LEARNER, trial, 0]));
    let rng = &mut rng_from_seed(derive_seed(config.master_seed, &[stream::LEARNER, trial, 1]));
    let mut eval_index = 0u64;
    let evaluate = |p: &MlpNet| {
        let mut r = rng_from_seed(derive_seed(config.master_seed, &[stream::EVAL, trial, eval_index]));
        eval_index += 1;
        evaluate_policy(p, &env, &setup.test_states, &mut r)
    };
    let (outcome, policy, babble_shift, est_fp) = match &method.learner {
        Learner::Costate(cfg) => {
            let mut agent = Agent::new(
                cfg.clone(),
                setup.policy.clone(),
                sized.model.clone(),
                sized.cprime.clone(),
                est_rng,
            )?;
            let fp = estimator_fingerprint(&[&agent.model, &agent.cprime]);
            agent.babble(&env, rng)?;
            let outcome = agent.run_learning(&env, config.n_rolls, config.eval_period, rng, evaluate)?;
            let shift = babble_equivalent_shift(cfg.babble_minibatches, env.steps());
            (outcome, agent.policy, shift, fp)
        }
        Learner::Ddpg(cfg) => {
            let mut agent = DdpgAgent::new(cfg.clone(), setup.policy.clone(), sized.critic.clone(), est_rng)?;
            let fp = estimator_fingerprint(&[&agent.critic]);
            let outcome = agent.run_learning(&env, config.n_rolls, config.eval_period, rng, evaluate)?;
            (outcome, agent.actor, 0, fp)
        }
    };
    Ok(MethodResult {
        curve: LearningCurve { label: method.label.clone(), babble_shift, points: outcome.curve },
        stats: outcome.stats,
        policy,
        estimator_fingerprint: est_fp,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub label: String,
    pub method: MethodKind,
    pub task_seed: u64,
    pub test_set_seed: u64,
    pub task_fingerprint: String,
    pub initial_policy_fingerprint: String,
    pub test_set_fingerprint: String,
    pub estimator_fingerprint: Option<String>,
    pub babble_shift: usize,
    pub summary: Option<TrialSummary>,
    pub error: Option<String>,
    pub real_rollouts: usize,
    pub imaginary_rollouts: usize,
    pub env_steps_real: u64,
    pub env_steps_imaginary: u64,
    pub diverged_rollouts: usize,
    /// Mean gate rate over learned-from rollouts.
    pub mean_gate_rate: Option<f64>,
    pub curve_file: String,
    pub policy_file: String,
}

/// One Table-1 line: means over completed trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub label: String,
    pub method: MethodKind,
    pub n_s: usize,
    pub n_c: usize,
    pub n_cost: usize,
    pub n_mu: usize,
    pub n_est: usize,
    pub completed_trials: usize,
    pub failed_trials: usize,
    pub initial_cost: Option<f64>,
    pub c_min: Option<f64>,
    pub c_final: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub name: String,
    pub master_seed: u64,
    pub trials: usize,
    pub n_rolls: usize,
    pub eval_period: usize,
    pub test_set_size: usize,
    pub batch_size: usize,
    pub task: TaskConfig,
    pub networks: SizedNetworks,
    pub rows: Vec<MethodRow>,
    pub records: Vec<TrialRecord>,
}

#[derive(Debug, Clone)]
pub struct BlockOutcome {
    pub report: BlockReport,
    /// Curves, rollout statistics and final policies of completed runs,
    /// in the same order as the matching entries of `report.records`.
    pub runs: Vec<(usize, LearningCurve, Vec<RolloutStats>, MlpNet)>,
}

impl BlockOutcome {
    pub fn record(&self, trial: usize, label: &str) -> Option<&TrialRecord> {
        self.report.records.iter().find(|r| r.trial == trial && r.label == label)
    }

    pub fn curve(&self, trial: usize, label: &str) -> Option<&LearningCurve> {
        self.runs
            .iter()
            .find(|(t, c, ..)| *t == trial && c.label == label)
            .map(|(_, c, ..)| c)
    }

    pub fn row(&self, label: &str) -> Option<&MethodRow> {
        self.report.rows.iter().find(|r| r.label == label)
    }
}

fn file_stem(trial: usize, label: &str) -> String {
    format!("trial{trial:03}_{label}")
}

fn accel_values(env: &Environment) -> Vec<f64> {
    match env.acceleration() {
        Acceleration::Linear { state, action } => state.iter().chain(action.iter()).copied().collect(),
        Acceleration::TanhNet { net, gain } => {
            let mut v = net.params_flat();
            v.push(*gain);
            v
        }
    }
}

type FinishedRun = (LearningCurve, Vec<RolloutStats>, MlpNet);

fn run_job(
    config: &RunConfig,
    sized: &SizedNetworks,
    trial: usize,
    method: &ResolvedMethod,
) -> Result<(TrialRecord, Option<FinishedRun>)> {
    let setup = trial_setup(config, sized, trial)?;
    let stem = file_stem(trial, &method.label);
    let mut record = TrialRecord {
        trial,
        label: method.label.clone(),
        method: method.kind,
        task_seed: setup.task.seed,
        test_set_seed: setup.test_set_seed,
        task_fingerprint: fingerprint(accel_values(&setup.env)),
        initial_policy_fingerprint: fingerprint(setup.policy.params_flat()),
        test_set_fingerprint: fingerprint(setup.test_states.iter().copied()),
        estimator_fingerprint: None,
        babble_shift: 0,
        summary: None,
        error: None,
        real_rollouts: 0,
        imaginary_rollouts: 0,
        env_steps_real: 0,
        env_steps_imaginary: 0,
        diverged_rollouts: 0,
        mean_gate_rate: None,
        curve_file: format!("{CURVES_DIR}/{stem}.csv"),
        policy_file: format!("{POLICIES_DIR}/{stem}.json"),
    };
    let result = match run_method(config, sized, &setup, method) {
        Ok(r) => r,
        Err(e) => {
            record.error = Some(e.to_string());
            return Ok((record, None));
        }
    };
    record.estimator_fingerprint = Some(result.estimator_fingerprint.clone());
    record.babble_shift = result.curve.babble_shift;
    match result.curve.summarize(config.n_rolls) {
        Ok(s) => record.summary = Some(s),
        Err(e) => record.error = Some(e.to_string()),
    }
    for st in &result.stats {
        if st.imaginary {
            record.imaginary_rollouts += 1;
            record.env_steps_imaginary += st.env_steps;
        } else {
            record.real_rollouts += 1;
            record.env_steps_real += st.env_steps;
        }
        record.diverged_rollouts += st.diverged as usize;
    }
    if method.kind != MethodKind::Ddpg {
        let rates: Vec<f64> = result.stats.iter().filter(|s| !s.diverged).map(|s| s.gate_rate).collect();
        record.mean_gate_rate = (!rates.is_empty()).then(|| mean(rates));
    }
    Ok((record, Some((result.curve, result.stats, result.policy))))
}

fn build_rows(
    methods: &[(String, MethodKind)],
    task: &TaskConfig,
    sized: &SizedNetworks,
    records: &[TrialRecord],
) -> Vec<MethodRow> {
    methods
        .iter()
        .map(|(label, kind)| {
            let done: Vec<&TrialSummary> = records
                .iter()
                .filter(|r| &r.label == label)
                .filter_map(|r| r.summary.as_ref())
                .collect();
            let total = records.iter().filter(|r| &r.label == label).count();
            let avg = |f: fn(&TrialSummary) -> f64| (!done.is_empty()).then(|| mean(done.iter().map(|s| f(s))));
            MethodRow {
                label: label.clone(),
                method: *kind,
                n_s: task.n_s,
                n_c: task.n_c,
                n_cost: task.n_cost,
                n_mu: sized.n_mu,
                n_est: if *kind == MethodKind::Ddpg { sized.n_est_ddpg } else { sized.n_est_costate },
                completed_trials: done.len(),
                failed_trials: total - done.len(),
                initial_cost: avg(|s| s.initial_cost),
                c_min: avg(|s| s.c_min),
                c_final: avg(|s| s.c_final),
            }
        })
        .collect()
}

/// Runs every configured method on every trial. Failed runs are recorded,
/// not propagated; the result does not depend on `config.parallel`.
pub fn run_block(config: &RunConfig) -> Result<BlockOutcome> {
    config.validate()?;
    let methods = config.resolved_methods()?;
    let n_a = config.task.spec(0).n_a();
    let net = &config.networks;
    let sized = size_networks(
        config.task.n_s,
        n_a,
        net.policy_hidden.as_deref(),
        net.n_mu,
        net.n_est,
        net.ddpg_n_est.unwrap_or(net.n_est),
        net.model_layers,
    )?;
    let jobs: Vec<(usize, &ResolvedMethod)> = (0..config.trials)
        .flat_map(|t| methods.iter().map(move |m| (t, m)))
        .collect();
    let run = |&(t, m): &(usize, &ResolvedMethod)| run_job(config, &sized, t, m);
    let results: Vec<_> = if config.parallel {
        jobs.par_iter().map(run).collect()
    } else {
        jobs.iter().map(run).collect()
    };
    let mut records = Vec::with_capacity(results.len());
    let mut runs = Vec::new();
    for r in results {
        let (record, run) = r?;
        if let Some((curve, stats, policy)) = run {
            runs.push((record.trial, curve, stats, policy));
        }
        records.push(record);
    }
    let labels: Vec<_> = methods.iter().map(|m| (m.label.clone(), m.kind)).collect();
    let rows = build_rows(&labels, &config.task, &sized, &records);
    Ok(BlockOutcome {
        report: BlockReport {
            name: config.name.clone(),
            master_seed: config.master_seed,
            trials: config.trials,
            n_rolls: config.n_rolls,
            eval_period: config.eval_period,
            test_set_size: config.test_set_size,
            batch_size: config.batch_size,
            task: config.task.clone(),
            networks: sized,
            rows,
            records,
        },
        runs,
    })
}

fn diagnostics_csv(stats: &[RolloutStats]) -> String {
    let mut s = String::from("rollout,imaginary,gate_rate,mean_focus_error_sq,mean_cost,env_steps,diverged\n");
    for st in stats {
        let cost = st.mean_cost.map(|c| format!("{c:?}")).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{:?},{:?},{},{},{}",
            st.rollout, st.imaginary, st.gate_rate, st.mean_focus_error_sq, cost, st.env_steps, st.diverged
        );
    }
    s
}

/// The Table-1 view of a report.
pub fn table_csv(report: &BlockReport) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut s = String::from("method,n_s,n_c,n_cost,n_mu,n_est,trials,failed,initial_cost,c_min,c_final\n");
    for r in &report.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.label,
            r.n_s,
            r.n_c,
            r.n_cost,
            r.n_mu,
            r.n_est,
            r.completed_trials,
            r.failed_trials,
            opt(r.initial_cost),
            opt(r.c_min),
            opt(r.c_final)
        );
    }
    s
}

fn write_summary(dir: &Path, report: &BlockReport) -> Result<()> {
    std::fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(report)?)?;
    std::fs::write(dir.join(TABLE_FILE), table_csv(report))?;
    Ok(())
}

/// Writes curves, diagnostics, policy checkpoints, the summary, the table
/// and `config_text` (echoed verbatim) under `dir`.
pub fn write_block(dir: &Path, outcome: &BlockOutcome, config_text: &str) -> Result<()> {
    for sub in [CURVES_DIR, POLICIES_DIR, DIAGNOSTICS_DIR] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    std::fs::write(dir.join(CONFIG_FILE), config_text)?;
    let report = &outcome.report;
    for (trial, curve, stats, policy) in &outcome.runs {
        let record = outcome
            .record(*trial, &curve.label)
            .ok_or_else(|| Error::Config(format!("no record for trial {trial} {}", curve.label)))?;
        curve.write_csv(&dir.join(&record.curve_file), report.n_rolls)?;
        std::fs::write(
            dir.join(DIAGNOSTICS_DIR).join(format!("{}.csv", file_stem(*trial, &curve.label))),
            diagnostics_csv(stats),
        )?;
        let task = report.task.spec(record.task_seed);
        PolicyCheckpoint::new(&curve.label, *trial, task, record.test_set_seed, report.test_set_size, policy.clone())
            .save(&dir.join(&record.policy_file))?;
    }
    write_summary(dir, report)
}

/// Recomputes every summary and Table-1 row from the exported curve CSVs.
pub fn rebuild_report(dir: &Path, rewrite: bool) -> Result<BlockReport> {
    let mut report: BlockReport = serde_json::from_str(&std::fs::read_to_string(dir.join(SUMMARY_FILE))?)?;
    for rec in report.records.iter_mut().filter(|r| r.summary.is_some()) {
        let (curve, budget) = LearningCurve::read_csv(&dir.join(&rec.curve_file))?;
        if curve.label != rec.label {
            return Err(Error::Config(format!("{} holds curve '{}'", rec.curve_file, curve.label)));
        }
        rec.babble_shift = curve.babble_shift;
        rec.summary = Some(curve.summarize(budget)?);
    }
    let labels: Vec<_> = report.rows.iter().map(|r| (r.label.clone(), r.method)).collect();
    report.rows = build_rows(&labels, &report.task, &report.networks, &report.records);
    if rewrite {
        write_summary(dir, &report)?;
    }
    Ok(report)
}
