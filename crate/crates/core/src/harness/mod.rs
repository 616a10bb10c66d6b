//! Benchmark harness: network sizing, shared per-trial initializations,
//! evaluation on a fixed test set, curve summaries and exports.

mod block;
mod checkpoint;
mod config;
mod curves;
mod sizing;

pub use block::{
    rebuild_report, run_block, run_method, table_csv, trial_setup, write_block, BlockOutcome, BlockReport, MethodResult,
    MethodRow, TrialRecord, TrialSetup, CONFIG_FILE, CURVES_DIR, DIAGNOSTICS_DIR, POLICIES_DIR, SUMMARY_FILE, TABLE_FILE,
};
pub use checkpoint::{AgentCheckpoint, PolicyCheckpoint};
pub use config::{Learner, MethodConfig, MethodKind, NetworkConfig, ResolvedMethod, RunConfig, TaskConfig};
pub use curves::{babble_equivalent_shift, mean, smooth, LearningCurve, TrialSummary, SMOOTHING_WINDOW};
pub use sizing::{critic_width, estimator_widths, policy_width, size_networks, SizedNetworks};

use ndarray::{Array2, Axis};
use rand::Rng;

use crate::envgen::{Environment, DT, STEPS};
use crate::error::{Error, Result};
use crate::nn::MlpNet;

/// Cost charged to a test movement whose state becomes non-finite: the
/// maximum cost-rate of 1 at every recorded time.
pub const DIVERGED_MOVEMENT_COST: f64 = (STEPS + 1) as f64 * DT;

/// Mean total cost of `policy` over the columns of `test_states`.
///
/// Noise, if the task has any, is drawn from `rng`. Movements that diverge
/// are charged [`DIVERGED_MOVEMENT_COST`] and the rest are unaffected.
pub fn evaluate_policy<R: Rng + ?Sized>(
    policy: &MlpNet,
    env: &Environment,
    test_states: &Array2<f64>,
    rng: &mut R,
) -> Result<f64> {
    let n = test_states.ncols();
    if n == 0 {
        return Err(Error::Config("empty test set".into()));
    }
    let dt = env.dt();
    let mut s = test_states.clone();
    let mut alive = vec![true; n];
    let mut total = env.cost_rate(s.view())? * dt;
    for _ in 0..env.steps() {
        let a = policy.predict(s.view())?;
        s = env.advance(s.view(), a.view(), rng)?;
        for (j, mut col) in s.axis_iter_mut(Axis(1)).enumerate() {
            if !col.iter().all(|x| x.is_finite()) {
                alive[j] = false;
            }
            if !alive[j] {
                col.fill(0.0);
            }
        }
        total += &(env.cost_rate(s.view())? * dt);
    }
    let sum: f64 = total
        .iter()
        .zip(&alive)
        .map(|(&c, &ok)| if ok { c } else { DIVERGED_MOVEMENT_COST })
        .sum();
    Ok(sum / n as f64)
}

/// FNV-1a over raw f64 bits, rendered as hex.
pub fn fingerprint(values: impl IntoIterator<Item = f64>) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envgen::{make_task, TaskSpec};
    use crate::nn::{Activation, MlpSpec};
    use crate::rng::{rng_from_seed, uniform_pm1};

    #[test]
    fn zero_state_with_zero_policy_costs_nothing() {
        let env = make_task(&TaskSpec::linear(4, 1, 2, 3)).unwrap();
        let policy = MlpNet::zeros(MlpSpec::relu(vec![4, 3, 3, 1], Activation::Tanh).unwrap()).unwrap();
        let cost = evaluate_policy(&policy, &env, &Array2::zeros((4, 7)), &mut rng_from_seed(0)).unwrap();
        assert_eq!(cost, 0.0);
    }

    #[test]
    fn evaluation_matches_direct_rollout() {
        let env = make_task(&TaskSpec::linear(6, 2, 4, 9)).unwrap();
        let mut r = rng_from_seed(1);
        let policy = MlpNet::new(MlpSpec::relu(vec![6, 5, 5, 2], Activation::Tanh).unwrap(), &mut r).unwrap();
        let x = uniform_pm1(6, 3, &mut r);
        let got = evaluate_policy(&policy, &env, &x, &mut r).unwrap();
        let mut want = 0.0;
        for j in 0..3 {
            let mut s = x.column(j).to_owned().insert_axis(Axis(1));
            let mut c = env.cost_rate(s.view()).unwrap()[0];
            for _ in 0..STEPS {
                let a = policy.predict(s.view()).unwrap();
                s = env.step(s.view(), a.view(), &mut r).unwrap();
                c += env.cost_rate(s.view()).unwrap()[0];
            }
            want += c * DT / 3.0;
        }
        assert!((got - want).abs() < 1e-12, "{got} {want}");
    }

    #[test]
    fn diverged_movements_take_the_fixed_charge() {
        let mut spec = TaskSpec::linear(2, 1, 2, 5);
        spec.noise_sigma = 1e308;
        let env = make_task(&spec).unwrap();
        let policy = MlpNet::zeros(MlpSpec::relu(vec![2, 2, 2, 1], Activation::Tanh).unwrap()).unwrap();
        let x = uniform_pm1(2, 4, &mut rng_from_seed(2));
        let cost = evaluate_policy(&policy, &env, &x, &mut rng_from_seed(3)).unwrap();
        assert_eq!(cost, DIVERGED_MOVEMENT_COST);
    }

    #[test]
    fn fingerprint_sees_every_bit() {
        assert_ne!(fingerprint([0.0]), fingerprint([-0.0]));
        assert_eq!(fingerprint([1.0, 2.0]), fingerprint(vec![1.0, 2.0]));
    }
}
