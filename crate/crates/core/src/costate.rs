//! Costate policy learning: CPG, CF and VCF.
//!
//! An agent first babbles (random probing) to fit a dynamics model ⟨f⟩ and a
//! cost surrogate ⟨c′⟩, then alternates rollouts of its policy with backward
//! costate sweeps. Along a rollout of `T` steps, with `λ_t = ∂C/∂s_t`:
//!
//! ```text
//! λ_T = Δt·(∂c_T/∂s + ∂c_T/∂a·∂μ/∂s)
//! g_t = ∂C/∂a_t = Δt·(∂c_t/∂a + λ_{t+1}·∂f/∂a)
//! λ_t = λ_{t+1} + Δt·(∂c_t/∂s + λ_{t+1}·∂f/∂s) + g_t·∂μ/∂s
//! ```
//!
//! CPG sums `g_t·∂a_t/∂θ` over the rollout and takes one policy step
//! afterward. CF additionally focuses ⟨f⟩ on the costate-projected error
//! `e_t = λ_{t+1}·(Δt·⟨f⟩(s_t, a_t) − Δs_t)` and feeds each `g_t` into a
//! shadow copy of the policy as soon as it is available, gated on the model
//! error being small. VCF is CF with the exact cost-rate gradient in place of
//! the ⟨c′⟩ estimate.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envgen::{squash_chain, Environment};
use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamState, ForwardCache, Gradients, MlpNet, MlpSpec};
use crate::replay::ReplayBuffer;
use crate::rng::uniform_pm1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cpg,
    Cf,
    Vcf,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Cpg => "CPG",
            Method::Cf => "CF",
            Method::Vcf => "VCF",
        }
    }

    /// CF and VCF update a shadow policy during the sweep; CPG updates directly.
    pub fn uses_shadow(self) -> bool {
        !matches!(self, Method::Cpg)
    }

    pub fn focuses_model(self) -> bool {
        !matches!(self, Method::Cpg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub method: Method,
    pub lr_babble: f64,
    pub lr_focus: f64,
    pub lr_policy: f64,
    pub lr_cprime: f64,
    pub tau: f64,
    pub gate: bool,
    pub babble_minibatches: usize,
    /// Fraction of rollouts run inside the learned model.
    pub mental_practice: f64,
    pub batch_size: usize,
    /// CPG only: keep fitting ⟨f⟩ on real transitions with the babble error.
    pub cpg_model_refresh: bool,
    /// CPG only: refine ⟨c′⟩ from a replay buffer of visited (s, a, c′).
    pub cprime_refinement: bool,
    pub cprime_replay_capacity: usize,
}

impl LearnerConfig {
    pub fn defaults(method: Method) -> Self {
        let (lr_policy, cprime_refinement) = match method {
            Method::Cpg => (0.0003, true),
            Method::Cf | Method::Vcf => (0.001, false),
        };
        LearnerConfig {
            method,
            lr_babble: 0.001,
            lr_focus: 0.0001,
            lr_policy,
            lr_cprime: 0.0003,
            tau: 0.1,
            gate: method.uses_shadow(),
            babble_minibatches: 15_000,
            mental_practice: 0.0,
            batch_size: 100,
            cpg_model_refresh: false,
            cprime_refinement,
            cprime_replay_capacity: 100_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [self.lr_babble, self.lr_focus, self.lr_policy, self.lr_cprime];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::Config("learning rates must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.mental_practice) {
            return Err(Error::Config(format!(
                "mental practice fraction must lie in [0, 1], got {}",
                self.mental_practice
            )));
        }
        if self.batch_size == 0 || self.cprime_replay_capacity == 0 {
            return Err(Error::Config("batch size and replay capacity must be positive".into()));
        }
        Ok(())
    }
}

/// Whether rollout `k` (0-based) is imaginary under fraction `p`:
/// p = 0.5 alternates real/imaginary, p = 0.75 makes 3 of every 4 imaginary.
pub fn is_imaginary(k: usize, p: f64) -> bool {
    ((k + 1) as f64 * p).floor() > (k as f64 * p).floor()
}

/// Something that yields a state rate f(s, a) and its vector-Jacobian product.
pub trait Dynamics {
    fn rate(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<Array2<f64>>;

    /// (wᵀ ∂f/∂s, wᵀ ∂f/∂a), column by column.
    fn rate_vjp(
        &self,
        s: ArrayView2<f64>,
        a: ArrayView2<f64>,
        w: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)>;
}

impl Dynamics for Environment {
    fn rate(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<Array2<f64>> {
        Environment::rate(self, s, a)
    }

    fn rate_vjp(
        &self,
        s: ArrayView2<f64>,
        a: ArrayView2<f64>,
        w: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        Environment::rate_vjp(self, s, a, w)
    }
}

fn stack(s: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<Array2<f64>> {
    concatenate(Axis(0), &[s, a]).map_err(|_| Error::shape("state/action columns", s.ncols(), a.ncols()))
}

/// A network ⟨f⟩ reading `[s; a]` and predicting the state rate.
pub struct LearnedDynamics<'a>(pub &'a MlpNet);

impl Dynamics for LearnedDynamics<'_> {
    fn rate(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.0.predict(stack(s, a)?.view())
    }

    fn rate_vjp(
        &self,
        s: ArrayView2<f64>,
        a: ArrayView2<f64>,
        w: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let (_, cache) = self.0.forward(stack(s, a)?.view())?;
        let dx = self.0.input_grad(&cache, w)?;
        let n_s = s.nrows();
        Ok((dx.slice(s![..n_s, ..]).to_owned(), dx.slice(s![n_s.., ..]).to_owned()))
    }
}

/// Source of cost-rate gradients (∂c/∂s, ∂c/∂a).
pub trait CostSignal {
    fn cost_grad(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)>;
}

/// Exact analytic gradient (VCF).
pub struct ExactCost<'a>(pub &'a Environment);

impl CostSignal for ExactCost<'_> {
    fn cost_grad(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        Ok((self.0.cost_grad(s)?, Array2::zeros(a.raw_dim())))
    }
}

/// Exact c′ pushed through φ = tanh by the same chain a learned ⟨c′⟩ uses.
pub struct ExactCprime<'a>(pub &'a Environment);

impl CostSignal for ExactCprime<'_> {
    fn cost_grad(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let cp = self.0.cprime(s)?;
        let mut gs = self.0.cprime_grad(s)?;
        squash_chain(&cp, &mut gs);
        Ok((gs, Array2::zeros(a.raw_dim())))
    }
}

/// ⟨c⟩ = tanh(⟨c′⟩(s, a)); the gradient backpropagates 1 − ⟨c⟩² through ⟨c′⟩.
pub struct LearnedCost<'a>(pub &'a MlpNet);

impl CostSignal for LearnedCost<'_> {
    fn cost_grad(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let (y, cache) = self.0.forward(stack(s, a)?.view())?;
        let dy = y.mapv(|cp| {
            let c = cp.tanh();
            1.0 - c * c
        });
        let dx = self.0.input_grad(&cache, dy.view())?;
        let n_s = s.nrows();
        Ok((dx.slice(s![..n_s, ..]).to_owned(), dx.slice(s![n_s.., ..]).to_owned()))
    }
}

/// Terminal costate and action gradient: (λ_T, g_T).
pub fn terminal_costate(
    policy: &MlpNet,
    cost: &dyn CostSignal,
    s_t: ArrayView2<f64>,
    a_t: ArrayView2<f64>,
    dt: f64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let (cs, ca) = cost.cost_grad(s_t, a_t)?;
    let g = ca * dt;
    let (_, cache) = policy.forward(s_t)?;
    let mut lambda = policy.input_grad(&cache, g.view())?;
    lambda.scaled_add(dt, &cs);
    Ok((lambda, g))
}

/// One backward step: given λ_{t+1}, returns (λ_t, g_t).
pub fn costate_step(
    policy: &MlpNet,
    model: &dyn Dynamics,
    cost: &dyn CostSignal,
    s_t: ArrayView2<f64>,
    a_t: ArrayView2<f64>,
    lambda_next: ArrayView2<f64>,
    dt: f64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let (fs, fa) = model.rate_vjp(s_t, a_t, lambda_next)?;
    let (cs, ca) = cost.cost_grad(s_t, a_t)?;
    let g = (ca + fa) * dt;
    let (_, cache) = policy.forward(s_t)?;
    let mut lambda = policy.input_grad(&cache, g.view())?;
    lambda += &lambda_next;
    Zip::from(&mut lambda)
        .and(&cs)
        .and(&fs)
        .for_each(|l, &c, &f| *l += dt * (c + f));
    Ok((lambda, g))
}

/// Per-sample focus error e = λ_{t+1}·(Δt·⟨f⟩ − Δs).
pub fn focus_error(
    model_rate: ArrayView2<f64>,
    lambda_next: ArrayView2<f64>,
    delta_s: ArrayView2<f64>,
    dt: f64,
) -> Array1<f64> {
    let mut e = Array1::zeros(model_rate.ncols());
    Zip::from(&mut e)
        .and(model_rate.columns())
        .and(lambda_next.columns())
        .and(delta_s.columns())
        .for_each(|e, f, l, d| {
            *e = Zip::from(&f)
                .and(&l)
                .and(&d)
                .fold(0.0, |acc, &f, &l, &d| acc + l * (dt * f - d));
        });
    e
}

/// True when mean(e²) is below the within-batch (population) variance of
/// the scalars λ_{t+1}·Δs, i.e. when the normalized squared error is < 1.
pub fn gate_open(e: &Array1<f64>, lambda_next: ArrayView2<f64>, delta_s: ArrayView2<f64>) -> bool {
    let n = e.len() as f64;
    let mse = e.iter().map(|x| x * x).sum::<f64>() / n;
    let proj: Vec<f64> = lambda_next
        .columns()
        .into_iter()
        .zip(delta_s.columns())
        .map(|(l, d)| l.dot(&d))
        .collect();
    let mean = proj.iter().sum::<f64>() / n;
    let var = proj.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n;
    mse < var
}

/// States s_0..s_T and actions a_0..a_T of one minibatch of movements.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Array2<f64>>,
    pub actions: Vec<Array2<f64>>,
    pub imaginary: bool,
    /// Set when a non-finite state ended the rollout early.
    pub diverged_at: Option<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Number of transitions.
    pub fn steps(&self) -> usize {
        self.states.len().saturating_sub(1)
    }
}

/// Rolls `policy` forward from `s0` for `steps` transitions.
///
/// `transition` maps (s_t, a_t) to s_{t+1}. A non-finite state truncates the
/// trajectory and records the step.
pub fn simulate<F>(policy: &MlpNet, s0: Array2<f64>, steps: usize, imaginary: bool, mut transition: F) -> Result<Trajectory>
where
    F: FnMut(ArrayView2<f64>, ArrayView2<f64>) -> Result<Array2<f64>>,
{
    let mut states = Vec::with_capacity(steps + 1);
    let mut actions = Vec::with_capacity(steps + 1);
    let mut diverged_at = None;
    states.push(s0);
    for t in 0..steps {
        let a = policy.predict(states[t].view())?;
        let next = match transition(states[t].view(), a.view()) {
            Ok(n) if n.iter().all(|x| x.is_finite()) => n,
            Ok(_) | Err(Error::NonFinite(_)) => {
                actions.push(a);
                diverged_at = Some(t);
                break;
            }
            Err(e) => return Err(e),
        };
        actions.push(a);
        states.push(next);
    }
    if diverged_at.is_none() {
        let last = states.last().expect("s0 present");
        actions.push(policy.predict(last.view())?);
    }
    Ok(Trajectory {
        states,
        actions,
        imaginary,
        diverged_at,
    })
}

/// Costates, action gradients, focus errors and gate flags of one sweep.
#[derive(Debug, Clone)]
pub struct CostateSweep {
    /// λ_t for t = 0..=T.
    pub costates: Vec<Array2<f64>>,
    /// g_t for t = 0..=T.
    pub action_grads: Vec<Array2<f64>>,
    /// e_t for t = 0..T.
    pub focus_errors: Vec<Array1<f64>>,
    pub gates: Vec<bool>,
}

/// Pure backward sweep with no learning: the model, cost signal and policy
/// are held fixed for the whole pass.
pub fn costate_backsweep(
    traj: &Trajectory,
    policy: &MlpNet,
    model: &dyn Dynamics,
    cost: &dyn CostSignal,
    dt: f64,
) -> Result<CostateSweep> {
    if traj.diverged_at.is_some() || traj.is_empty() || traj.actions.len() != traj.len() {
        return Err(Error::NonFinite("trajectory is incomplete".into()));
    }
    let big_t = traj.steps();
    let (lambda_t, g_t) = terminal_costate(policy, cost, traj.states[big_t].view(), traj.actions[big_t].view(), dt)?;
    let mut costates = vec![Array2::zeros((0, 0)); big_t + 1];
    let mut action_grads = vec![Array2::zeros((0, 0)); big_t + 1];
    let mut focus_errors = vec![Array1::zeros(0); big_t];
    let mut gates = vec![false; big_t];
    costates[big_t] = lambda_t;
    action_grads[big_t] = g_t;
    for t in (0..big_t).rev() {
        let (s_t, a_t) = (traj.states[t].view(), traj.actions[t].view());
        let delta_s = &traj.states[t + 1] - &traj.states[t];
        let lambda_next = costates[t + 1].view();
        let f_hat = model.rate(s_t, a_t)?;
        let e = focus_error(f_hat.view(), lambda_next, delta_s.view(), dt);
        gates[t] = gate_open(&e, lambda_next, delta_s.view());
        focus_errors[t] = e;
        let (lambda, g) = costate_step(policy, model, cost, s_t, a_t, lambda_next, dt)?;
        if lambda.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("costate at step {t}")));
        }
        costates[t] = lambda;
        action_grads[t] = g;
    }
    Ok(CostateSweep {
        costates,
        action_grads,
        focus_errors,
        gates,
    })
}

/// Σ_t g_t·∂μ(s_t)/∂θ over the given steps.
pub fn accumulate_policy_gradient(
    policy: &MlpNet,
    states: &[Array2<f64>],
    action_grads: &[Array2<f64>],
) -> Result<Gradients> {
    let mut total = Gradients::zeros_like(policy);
    for (s, g) in states.iter().zip(action_grads) {
        let (_, cache) = policy.forward(s.view())?;
        let (grads, _) = policy.backward(&cache, g.view())?;
        total.add_assign(&grads);
    }
    Ok(total)
}

/// Per-rollout diagnostics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RolloutStats {
    pub rollout: usize,
    pub imaginary: bool,
    /// Fraction of steps whose gate was open.
    pub gate_rate: f64,
    /// Mean of e² over steps and samples.
    pub mean_focus_error_sq: f64,
    /// Mean true cost of the rollout's movements (real rollouts only).
    pub mean_cost: Option<f64>,
    pub env_steps: u64,
    pub diverged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RolloutMode {
    Real,
    Imaginary,
}

/// Network shapes for one costate agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpecs {
    pub policy: MlpSpec,
    pub model: MlpSpec,
    pub cprime: MlpSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Agent {
    pub config: LearnerConfig,
    /// μ
    pub policy: MlpNet,
    /// μ⁻
    pub shadow: MlpNet,
    /// ⟨f⟩
    pub model: MlpNet,
    /// ⟨c′⟩
    pub cprime: MlpNet,
    policy_opt: AdamState,
    shadow_opt: AdamState,
    model_opt: AdamState,
    /// Focusing has its own moment estimates, separate from babbling.
    focus_opt: AdamState,
    cprime_opt: AdamState,
    cprime_replay: ReplayBuffer<(Vec<f64>, f64)>,
}

/// Mean cost per movement, Δt·Σ_{t=0..T} c(s_t), using the true cost-rate.
pub fn trajectory_cost(env: &Environment, traj: &Trajectory) -> Result<Array1<f64>> {
    let n_m = traj.states[0].ncols();
    let mut total = Array1::zeros(n_m);
    for s in &traj.states {
        total += &env.cost_rate(s.view())?;
    }
    Ok(total * env.dt())
}

impl Agent {
    /// Builds an agent around a given initial policy (shared across methods).
    pub fn new<R: Rng + ?Sized>(
        config: LearnerConfig,
        policy: MlpNet,
        model_spec: MlpSpec,
        cprime_spec: MlpSpec,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let n_s = policy.spec().input_dim();
        let n_a = policy.spec().output_dim();
        if model_spec.input_dim() != n_s + n_a || model_spec.output_dim() != n_s {
            return Err(Error::InvalidSpec(format!(
                "dynamics model must map {} inputs to {} outputs",
                n_s + n_a,
                n_s
            )));
        }
        if cprime_spec.input_dim() != n_s + n_a || cprime_spec.output_dim() != 1 {
            return Err(Error::InvalidSpec(format!(
                "c' model must map {} inputs to 1 output",
                n_s + n_a
            )));
        }
        let model = MlpNet::new(model_spec, rng)?;
        let cprime = MlpNet::new(cprime_spec, rng)?;
        Ok(Agent {
            policy_opt: AdamState::new(&policy),
            shadow_opt: AdamState::new(&policy),
            model_opt: AdamState::new(&model),
            focus_opt: AdamState::new(&model),
            cprime_opt: AdamState::new(&cprime),
            cprime_replay: ReplayBuffer::new(config.cprime_replay_capacity),
            shadow: policy.clone(),
            policy,
            model,
            cprime,
            config,
        })
    }

    pub fn specs(&self) -> AgentSpecs {
        AgentSpecs {
            policy: self.policy.spec().clone(),
            model: self.model.spec().clone(),
            cprime: self.cprime.spec().clone(),
        }
    }

    pub fn n_state(&self) -> usize {
        self.policy.spec().input_dim()
    }

    pub fn n_action(&self) -> usize {
        self.policy.spec().output_dim()
    }

    /// Parameters in ⟨f⟩ and ⟨c′⟩ together.
    pub fn estimator_params(&self) -> usize {
        self.model.param_count() + self.cprime.param_count()
    }

    fn check_env(&self, env: &Environment) -> Result<()> {
        if env.n_s() != self.n_state() || env.n_a() != self.n_action() {
            return Err(Error::shape(
                "agent/environment dims",
                format!("n_s={}, n_a={}", self.n_state(), self.n_action()),
                format!("n_s={}, n_a={}", env.n_s(), env.n_a()),
            ));
        }
        Ok(())
    }

    /// One babble minibatch; returns (½‖e^f‖², ½‖e^{c′}‖²) summed over the batch.
    pub fn babble_step<R: Rng + ?Sized>(&mut self, env: &Environment, rng: &mut R) -> Result<(f64, f64)> {
        let n_m = self.config.batch_size;
        let s = uniform_pm1(self.n_state(), n_m, rng);
        let a = uniform_pm1(self.n_action(), n_m, rng);
        let x = stack(s.view(), a.view())?;
        let dt = env.dt();

        let target = env.rate(s.view(), a.view())?;
        let (f_hat, cache) = self.model.forward(x.view())?;
        // e^f = Δt(⟨f⟩ − f); d(½e²)/d⟨f⟩ = Δt·e^f
        let ef = (&f_hat - &target) * dt;
        let model_loss = 0.5 * ef.iter().map(|v| v * v).sum::<f64>();
        let (grads, _) = self.model.backward(&cache, (&ef * dt).view())?;
        adam_step(&mut self.model, &grads, &mut self.model_opt, self.config.lr_babble)?;

        let cp = env.cprime(s.view())?;
        let (c_hat, cache) = self.cprime.forward(x.view())?;
        let ec = &c_hat - &cp.insert_axis(Axis(0));
        let cprime_loss = 0.5 * ec.iter().map(|v| v * v).sum::<f64>();
        let (grads, _) = self.cprime.backward(&cache, ec.view())?;
        adam_step(&mut self.cprime, &grads, &mut self.cprime_opt, self.config.lr_babble)?;

        if !(model_loss.is_finite() && cprime_loss.is_finite()) {
            return Err(Error::NonFinite("babble loss".into()));
        }
        Ok((model_loss, cprime_loss))
    }

    /// Runs the configured number of babble minibatches; returns per-minibatch losses.
    pub fn babble<R: Rng + ?Sized>(&mut self, env: &Environment, rng: &mut R) -> Result<Vec<(f64, f64)>> {
        self.check_env(env)?;
        (0..self.config.babble_minibatches)
            .map(|_| self.babble_step(env, rng))
            .collect()
    }

    /// Rolls μ from fresh uniform initial states, through the environment or ⟨f⟩.
    pub fn rollout_forward<R: Rng + ?Sized>(
        &self,
        env: &Environment,
        mode: RolloutMode,
        rng: &mut R,
    ) -> Result<Trajectory> {
        self.check_env(env)?;
        let s0 = uniform_pm1(self.n_state(), self.config.batch_size, rng);
        self.rollout_from(env, s0, mode, rng)
    }

    pub fn rollout_from<R: Rng + ?Sized>(
        &self,
        env: &Environment,
        s0: Array2<f64>,
        mode: RolloutMode,
        rng: &mut R,
    ) -> Result<Trajectory> {
        let dt = env.dt();
        match mode {
            RolloutMode::Real => simulate(&self.policy, s0, env.steps(), false, |s, a| env.step(s, a, rng)),
            RolloutMode::Imaginary => simulate(&self.policy, s0, env.steps(), true, |s, a| {
                let mut next = self.model.predict(stack(s, a)?.view())?;
                Zip::from(&mut next).and(&s).for_each(|n, &sv| *n = sv + dt * *n);
                Ok(next)
            }),
        }
    }

    fn cost_signal<'a>(&'a self, env: &'a Environment) -> Box<dyn CostSignal + 'a> {
        match self.config.method {
            Method::Vcf => Box::new(ExactCost(env)),
            Method::Cf | Method::Cpg => Box::new(LearnedCost(&self.cprime)),
        }
    }

    /// Backsweep over `traj` with in-loop learning, then the post-rollout
    /// policy update. Returns (gate rate, mean e²).
    pub fn learn_from(&mut self, env: &Environment, traj: &Trajectory, rng: &mut impl Rng) -> Result<(f64, f64)> {
        if traj.diverged_at.is_some() {
            return Err(Error::Divergence {
                step: traj.diverged_at.unwrap_or_default(),
            });
        }
        let dt = env.dt();
        let method = self.config.method;
        let big_t = traj.steps();
        let focus = method.focuses_model() && !traj.imaginary;
        let refresh = method == Method::Cpg && self.config.cpg_model_refresh && !traj.imaginary;

        let (mut lambda, g_terminal) = {
            let cost = self.cost_signal(env);
            terminal_costate(&self.policy, cost.as_ref(), traj.states[big_t].view(), traj.actions[big_t].view(), dt)?
        };
        let mut direct = (method == Method::Cpg).then(|| Gradients::zeros_like(&self.policy));
        if let Some(acc) = direct.as_mut() {
            let (_, cache) = self.policy.forward(traj.states[big_t].view())?;
            acc.add_assign(&self.policy.backward(&cache, g_terminal.view())?.0);
        }

        let mut open = 0usize;
        let mut e2_sum = 0.0;
        for t in (0..big_t).rev() {
            let (s_t, a_t) = (traj.states[t].view(), traj.actions[t].view());
            let delta_s = &traj.states[t + 1] - &traj.states[t];
            let x = stack(s_t, a_t)?;

            let (f_hat, cache) = self.model.forward(x.view())?;
            let e = focus_error(f_hat.view(), lambda.view(), delta_s.view(), dt);
            e2_sum += e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64;
            let gate = if traj.imaginary {
                true
            } else {
                gate_open(&e, lambda.view(), delta_s.view())
            };
            if focus {
                self.focus_update(&cache, &lambda, &e, dt)?;
            } else if refresh {
                let dy = (&f_hat - &(&delta_s / dt)) * (dt * dt);
                let (grads, _) = self.model.backward(&cache, dy.view())?;
                adam_step(&mut self.model, &grads, &mut self.model_opt, self.config.lr_babble)?;
            }

            let (lambda_t, g_t) = {
                let cost = self.cost_signal(env);
                costate_step(&self.policy, &LearnedDynamics(&self.model), cost.as_ref(), s_t, a_t, lambda.view(), dt)?
            };
            if lambda_t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("costate at step {t}")));
            }

            if gate {
                open += 1;
            }
            if let Some(acc) = direct.as_mut() {
                let (_, cache) = self.policy.forward(s_t)?;
                acc.add_assign(&self.policy.backward(&cache, g_t.view())?.0);
            } else if gate || !self.config.gate {
                let (_, cache) = self.shadow.forward(s_t)?;
                let (grads, _) = self.shadow.backward(&cache, g_t.view())?;
                adam_step(&mut self.shadow, &grads, &mut self.shadow_opt, self.config.lr_policy)?;
            }
            lambda = lambda_t;
        }

        if let Some(acc) = direct {
            adam_step(&mut self.policy, &acc, &mut self.policy_opt, self.config.lr_policy)?;
        } else {
            self.policy.soft_update_toward(&self.shadow, self.config.tau)?;
        }
        self.shadow = self.policy.clone();

        if method == Method::Cpg && self.config.cprime_refinement && !traj.imaginary {
            self.record_cprime(env, traj)?;
            for _ in 0..big_t {
                self.refine_cprime(rng)?;
            }
        }
        Ok((open as f64 / big_t.max(1) as f64, e2_sum / big_t.max(1) as f64))
    }

    /// Adam step on ½Σe², whose gradient at the ⟨f⟩ output is e·Δt·λ_{t+1}.
    fn focus_update(&mut self, cache: &ForwardCache, lambda_next: &Array2<f64>, e: &Array1<f64>, dt: f64) -> Result<()> {
        let mut dy = lambda_next.clone();
        for (mut col, &ej) in dy.axis_iter_mut(Axis(1)).zip(e) {
            col *= ej * dt;
        }
        let (grads, _) = self.model.backward(cache, dy.view())?;
        adam_step(&mut self.model, &grads, &mut self.focus_opt, self.config.lr_focus)?;
        Ok(())
    }

    /// Backsweep over a real trajectory that only focuses ⟨f⟩, leaving μ, μ⁻
    /// and ⟨c′⟩ untouched. Stops after `max_updates`; returns the count.
    pub fn focus_only(&mut self, env: &Environment, traj: &Trajectory, max_updates: usize) -> Result<usize> {
        if traj.diverged_at.is_some() || traj.imaginary {
            return Err(Error::Config("focusing needs a complete real trajectory".into()));
        }
        let dt = env.dt();
        let big_t = traj.steps();
        let mut lambda = {
            let cost = self.cost_signal(env);
            terminal_costate(&self.policy, cost.as_ref(), traj.states[big_t].view(), traj.actions[big_t].view(), dt)?.0
        };
        let mut done = 0;
        for t in (0..big_t).rev() {
            if done == max_updates {
                break;
            }
            let (s_t, a_t) = (traj.states[t].view(), traj.actions[t].view());
            let delta_s = &traj.states[t + 1] - &traj.states[t];
            let (f_hat, cache) = self.model.forward(stack(s_t, a_t)?.view())?;
            let e = focus_error(f_hat.view(), lambda.view(), delta_s.view(), dt);
            self.focus_update(&cache, &lambda, &e, dt)?;
            done += 1;
            let cost = self.cost_signal(env);
            lambda = costate_step(&self.policy, &LearnedDynamics(&self.model), cost.as_ref(), s_t, a_t, lambda.view(), dt)?.0;
        }
        Ok(done)
    }

    fn record_cprime(&mut self, env: &Environment, traj: &Trajectory) -> Result<()> {
        for (s, a) in traj.states.iter().zip(&traj.actions) {
            let cp = env.cprime(s.view())?;
            let x = stack(s.view(), a.view())?;
            for (col, &c) in x.columns().into_iter().zip(&cp) {
                self.cprime_replay.push((col.to_vec(), c));
            }
        }
        Ok(())
    }

    /// Pushes visited (s, a) pairs with their c′ into the refinement buffer.
    pub fn push_cprime_samples(&mut self, x: ArrayView2<f64>, cprime: &Array1<f64>) {
        for (col, &c) in x.columns().into_iter().zip(cprime) {
            self.cprime_replay.push((col.to_vec(), c));
        }
    }

    pub fn cprime_replay_len(&self) -> usize {
        self.cprime_replay.len()
    }

    /// One supervised ⟨c′⟩ step on a replay minibatch; returns ½Σe², or
    /// `None` when the buffer is empty.
    pub fn refine_cprime<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Option<f64>> {
        let idx = self.cprime_replay.sample_indices(self.config.batch_size, rng);
        if idx.is_empty() {
            return Ok(None);
        }
        let dim = self.cprime.spec().input_dim();
        let mut x = Array2::zeros((dim, idx.len()));
        let mut target = Array2::zeros((1, idx.len()));
        for (j, &i) in idx.iter().enumerate() {
            let (col, c) = self.cprime_replay.get(i).expect("sampled index in range");
            x.column_mut(j).assign(&ndarray::ArrayView1::from(col.as_slice()));
            target[[0, j]] = *c;
        }
        let (c_hat, cache) = self.cprime.forward(x.view())?;
        let err = &c_hat - &target;
        let (grads, _) = self.cprime.backward(&cache, err.view())?;
        adam_step(&mut self.cprime, &grads, &mut self.cprime_opt, self.config.lr_cprime)?;
        Ok(Some(0.5 * err.iter().map(|v| v * v).sum::<f64>()))
    }

    /// Learns for `n_rolls` rollouts, calling `evaluate` before the first
    /// rollout and after every `eval_period` rollouts.
    pub fn run_learning<R, F>(
        &mut self,
        env: &Environment,
        n_rolls: usize,
        eval_period: usize,
        rng: &mut R,
        mut evaluate: F,
    ) -> Result<LearningOutcome>
    where
        R: Rng,
        F: FnMut(&MlpNet) -> Result<f64>,
    {
        self.check_env(env)?;
        if eval_period == 0 {
            return Err(Error::Config("evaluation period must be positive".into()));
        }
        let mut curve = vec![(0, evaluate(&self.policy)?)];
        let mut stats = Vec::with_capacity(n_rolls);
        for k in 0..n_rolls {
            let imaginary = is_imaginary(k, self.config.mental_practice);
            let mode = if imaginary { RolloutMode::Imaginary } else { RolloutMode::Real };
            let before = env.step_calls();
            let traj = self.rollout_forward(env, mode, rng)?;
            let env_steps = env.step_calls() - before;
            let mean_cost = if imaginary {
                None
            } else {
                trajectory_cost(env, &traj)?.mean()
            };
            let mut st = RolloutStats {
                rollout: k,
                imaginary,
                mean_cost,
                env_steps,
                diverged: traj.diverged_at.is_some(),
                ..Default::default()
            };
            if !st.diverged {
                let (gate_rate, e2) = self.learn_from(env, &traj, rng)?;
                st.gate_rate = gate_rate;
                st.mean_focus_error_sq = e2;
            }
            stats.push(st);
            if (k + 1) % eval_period == 0 {
                curve.push((k + 1, evaluate(&self.policy)?));
            }
        }
        Ok(LearningOutcome { curve, stats })
    }
}

#[derive(Debug, Clone)]
pub struct LearningOutcome {
    /// (rollout index, mean test cost)
    pub curve: Vec<(usize, f64)>,
    pub stats: Vec<RolloutStats>,
}
