//! Reconstructing layer widths from published parameter totals.
//!
//! Every network is an equal-width stack: four layers (two hidden) unless a
//! three-layer dynamics model is requested.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{param_count, Activation, MlpSpec};

fn stack_params(input: usize, width: usize, hidden_layers: usize, output: usize) -> usize {
    let mut sizes = vec![input];
    sizes.extend(std::iter::repeat_n(width, hidden_layers));
    sizes.push(output);
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Width with parameter count closest to `target` (smallest width on ties).
fn closest_width(target: usize, count: impl Fn(usize) -> usize, what: &str) -> Result<(usize, usize)> {
    let minimum = count(1);
    if target < minimum {
        return Err(Error::Infeasible(format!(
            "{what} needs at least {minimum} parameters, target was {target}"
        )));
    }
    let mut best = (1, minimum);
    let mut w = 1;
    loop {
        let p = count(w);
        if p.abs_diff(target) < best.1.abs_diff(target) {
            best = (w, p);
        }
        if p > target {
            break;
        }
        w += 1;
    }
    Ok(best)
}

/// Equal-width two-hidden-layer policy closest to `target_n_mu`.
pub fn policy_width(n_s: usize, n_a: usize, target_n_mu: usize) -> Result<usize> {
    Ok(closest_width(target_n_mu, |h| stack_params(n_s, h, 2, n_a), "policy")?.0)
}

/// Widths of the ⟨Q⟩ critic closest to `target_n_est`.
pub fn critic_width(n_s: usize, n_a: usize, target_n_est: usize) -> Result<usize> {
    Ok(closest_width(target_n_est, |h| stack_params(n_s + n_a, h, 2, 1), "critic")?.0)
}

/// Splits `target_n_est` between ⟨f⟩ and ⟨c′⟩.
///
/// Minimizes |achieved − target|, then the width difference, then prefers
/// the wider model. ⟨c′⟩ always has two hidden layers; ⟨f⟩ has
/// `model_layers − 2` (3 or 4 layers in total).
pub fn estimator_widths(n_s: usize, n_a: usize, target_n_est: usize, model_layers: usize) -> Result<(usize, usize)> {
    if !(3..=4).contains(&model_layers) {
        return Err(Error::Config(format!("dynamics model must have 3 or 4 layers, got {model_layers}")));
    }
    let input = n_s + n_a;
    let model = |w| stack_params(input, w, model_layers - 2, n_s);
    let cprime = |w| stack_params(input, w, 2, 1);
    let minimum = model(1) + cprime(1);
    if target_n_est < minimum {
        return Err(Error::Infeasible(format!(
            "estimators need at least {minimum} parameters, target was {target_n_est}"
        )));
    }
    let mut best: Option<(usize, usize, usize, usize, usize)> = None;
    let mut wf = 1;
    while model(wf) + cprime(1) <= 2 * target_n_est {
        let (wc, _) = closest_width(target_n_est.saturating_sub(model(wf)).max(cprime(1)), cprime, "c'")?;
        for wc in [wc.saturating_sub(1).max(1), wc, wc + 1] {
            let dev = (model(wf) + cprime(wc)).abs_diff(target_n_est);
            let key = (dev, wf.abs_diff(wc), usize::MAX - wf, wf, wc);
            if best.is_none_or(|b| key < b) {
                best = Some(key);
            }
        }
        wf += 1;
    }
    let (.., wf, wc) = best.expect("at least one candidate");
    Ok((wf, wc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizedNetworks {
    pub policy: MlpSpec,
    pub model: MlpSpec,
    pub cprime: MlpSpec,
    pub critic: MlpSpec,
    pub n_mu: usize,
    /// ⟨f⟩ plus ⟨c′⟩.
    pub n_est_costate: usize,
    /// ⟨Q⟩ only (target copies are not counted).
    pub n_est_ddpg: usize,
}

/// Solves every network shape for one task.
pub fn size_networks(
    n_s: usize,
    n_a: usize,
    policy_hidden: Option<&[usize]>,
    target_n_mu: Option<usize>,
    target_n_est: usize,
    target_ddpg_n_est: usize,
    model_layers: usize,
) -> Result<SizedNetworks> {
    let hidden = match (policy_hidden, target_n_mu) {
        (Some(h), None) => h.to_vec(),
        (None, Some(t)) => vec![policy_width(n_s, n_a, t)?; 2],
        _ => {
            return Err(Error::Config(
                "give exactly one of the policy hidden widths or the target n_mu".into(),
            ))
        }
    };
    let mut sizes = vec![n_s];
    sizes.extend(hidden);
    sizes.push(n_a);
    let policy = MlpSpec::relu(sizes, Activation::Tanh)?;

    let (wf, wc) = estimator_widths(n_s, n_a, target_n_est, model_layers)?;
    let mut model_sizes = vec![n_s + n_a];
    model_sizes.extend(std::iter::repeat_n(wf, model_layers - 2));
    model_sizes.push(n_s);
    let model = MlpSpec::relu(model_sizes, Activation::Linear)?;
    let cprime = MlpSpec::relu(vec![n_s + n_a, wc, wc, 1], Activation::Linear)?;

    let wq = critic_width(n_s, n_a, target_ddpg_n_est)?;
    let critic = MlpSpec::relu(vec![n_s + n_a, wq, wq, 1], Activation::Linear)?;

    Ok(SizedNetworks {
        n_mu: param_count(&policy),
        n_est_costate: param_count(&model) + param_count(&cprime),
        n_est_ddpg: param_count(&critic),
        policy,
        model,
        cprime,
        critic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_widths_reproduce_published_counts() {
        assert_eq!(policy_width(10, 2, 314).unwrap(), 12);
        assert_eq!(policy_width(30, 2, 554).unwrap(), 12);
        assert_eq!(policy_width(100, 4, 3124).unwrap(), 24);
        assert_eq!(policy_width(100, 4, 444).unwrap(), 4);
    }

    #[test]
    fn critic_width_for_small_task() {
        assert_eq!(critic_width(10, 2, 4501).unwrap(), 60);
    }

    #[test]
    fn estimator_split_is_exact_when_possible() {
        // 32→12→12→30 plus 32→12→12→1 is 1507 exactly.
        assert_eq!(estimator_widths(30, 2, 1507, 4).unwrap(), (12, 12));
        let (wf, wc) = estimator_widths(10, 2, 4483, 4).unwrap();
        let total = stack_params(12, wf, 2, 10) + stack_params(12, wc, 2, 1);
        assert!(total.abs_diff(4483) <= 2, "{wf} {wc} {total}");
    }

    #[test]
    fn infeasible_targets_state_the_minimum() {
        let err = policy_width(10, 2, 5).unwrap_err().to_string();
        assert!(err.contains("at least 17"), "{err}");
        assert!(estimator_widths(10, 2, 10, 4).is_err());
        assert!(estimator_widths(10, 2, 4483, 5).is_err());
    }

    #[test]
    fn size_networks_reports_achieved_counts() {
        let s = size_networks(10, 2, None, Some(314), 4483, 4501, 4).unwrap();
        assert_eq!(s.n_mu, 314);
        assert_eq!(s.n_est_ddpg, 4501);
        assert_eq!(s.policy.layer_sizes, vec![10, 12, 12, 2]);
        assert!(size_networks(10, 2, Some(&[8, 8]), Some(314), 4483, 4501, 4).is_err());
        let explicit = size_networks(10, 2, Some(&[8, 8]), None, 4483, 4501, 3).unwrap();
        assert_eq!(explicit.model.layer_sizes.len(), 3);
    }
}
