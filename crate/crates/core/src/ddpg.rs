//! Deep deterministic policy gradient, oriented to minimize cost.
//!
//! The critic regresses `Q(s, a) ← Δt·c + Q′(s′, μ′(s′))` with no discount
//! over the finite horizon. The last transition of each movement is terminal:
//! it carries the terminal cost-rate term and no bootstrap. The actor
//! descends ∂Q/∂a through μ.

use ndarray::{concatenate, s, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::costate::RolloutStats;
use crate::envgen::Environment;
use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamState, Gradients, MlpNet, MlpSpec};
use crate::replay::ReplayBuffer;
use crate::rng::uniform_pm1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExplorationNoise {
    /// Independent Gaussian noise, σ decaying linearly over the run.
    Gaussian { sigma_start: f64, sigma_end: f64 },
    /// Ornstein–Uhlenbeck process per movement and action component.
    OrnsteinUhlenbeck { theta: f64, sigma: f64 },
}

impl Default for ExplorationNoise {
    fn default() -> Self {
        ExplorationNoise::Gaussian {
            sigma_start: 0.2,
            sigma_end: 0.05,
        }
    }
}

type Minibatch = (Array2<f64>, Array2<f64>, Array2<f64>, Vec<f64>, Vec<bool>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdpgConfig {
    pub lr_critic: f64,
    pub lr_actor: f64,
    pub tau: f64,
    pub minibatch: usize,
    pub replay_capacity: usize,
    /// Gradient updates per environment time step.
    pub updates_per_step: usize,
    /// Movements per rollout.
    pub batch_size: usize,
    pub noise: ExplorationNoise,
}

impl Default for DdpgConfig {
    fn default() -> Self {
        DdpgConfig {
            lr_critic: 0.0003,
            lr_actor: 0.0001,
            tau: 0.0003,
            minibatch: 64,
            replay_capacity: 1_000_000,
            updates_per_step: 1,
            batch_size: 100,
            noise: ExplorationNoise::default(),
        }
    }
}

impl DdpgConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.lr_critic, self.lr_actor].iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::Config("DDPG learning rates must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("DDPG tau must lie in [0, 1], got {}", self.tau)));
        }
        if self.minibatch == 0 || self.replay_capacity == 0 || self.batch_size == 0 {
            return Err(Error::Config("DDPG batch sizes and capacity must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    /// Δt-weighted cost of this step (plus the terminal term when `terminal`).
    pub cost: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

/// Stateful exploration stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseProcess {
    kind: ExplorationNoise,
    ou_state: Option<Array2<f64>>,
}

impl NoiseProcess {
    pub fn new(kind: ExplorationNoise) -> Self {
        NoiseProcess { kind, ou_state: None }
    }

    /// Resets per-movement state at the start of a rollout.
    pub fn reset(&mut self) {
        self.ou_state = None;
    }

    /// Noise of the given shape; `progress` ∈ [0, 1] is the fraction of the run done.
    pub fn sample<R: Rng + ?Sized>(&mut self, shape: (usize, usize), progress: f64, rng: &mut R) -> Array2<f64> {
        let mut normal = || -> f64 { StandardNormal.sample(rng) };
        match self.kind {
            ExplorationNoise::Gaussian { sigma_start, sigma_end } => {
                let p = progress.clamp(0.0, 1.0);
                let sigma = sigma_start + (sigma_end - sigma_start) * p;
                Array2::from_shape_simple_fn(shape, || sigma * normal())
            }
            ExplorationNoise::OrnsteinUhlenbeck { theta, sigma } => {
                let state = self
                    .ou_state
                    .take()
                    .filter(|x| x.dim() == shape)
                    .unwrap_or_else(|| Array2::zeros(shape));
                let next = state.mapv(|x| x - theta * x + sigma * normal());
                self.ou_state = Some(next.clone());
                next
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DdpgAgent {
    pub config: DdpgConfig,
    pub actor: MlpNet,
    pub critic: MlpNet,
    pub target_actor: MlpNet,
    pub target_critic: MlpNet,
    actor_opt: AdamState,
    critic_opt: AdamState,
    buffer: ReplayBuffer<Transition>,
    noise: NoiseProcess,
}

/// a = clamp(μ(s) + noise, −1, 1)
pub fn ddpg_act(actor: &MlpNet, s: ArrayView2<f64>, noise: &Array2<f64>) -> Result<Array2<f64>> {
    let mut a = actor.predict(s)?;
    if noise.dim() != a.dim() {
        return Err(Error::shape("exploration noise", format!("{:?}", a.dim()), format!("{:?}", noise.dim())));
    }
    a += noise;
    a.mapv_inplace(|x| x.clamp(-1.0, 1.0));
    Ok(a)
}

/// Diagnostics from one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    /// ½Σ(Q − y)² before the critic step.
    pub critic_loss: f64,
    /// Mean Q(s, μ(s)) over the minibatch before the actor step.
    pub mean_q: f64,
}

impl DdpgAgent {
    pub fn new<R: Rng + ?Sized>(config: DdpgConfig, actor: MlpNet, critic_spec: MlpSpec, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let n_s = actor.spec().input_dim();
        let n_a = actor.spec().output_dim();
        if critic_spec.input_dim() != n_s + n_a || critic_spec.output_dim() != 1 {
            return Err(Error::InvalidSpec(format!("critic must map {} inputs to 1 output", n_s + n_a)));
        }
        let critic = MlpNet::new(critic_spec, rng)?;
        Ok(DdpgAgent {
            actor_opt: AdamState::new(&actor),
            critic_opt: AdamState::new(&critic),
            buffer: ReplayBuffer::new(config.replay_capacity),
            noise: NoiseProcess::new(config.noise),
            target_actor: actor.clone(),
            target_critic: critic.clone(),
            actor,
            critic,
            config,
        })
    }

    pub fn n_state(&self) -> usize {
        self.actor.spec().input_dim()
    }

    pub fn n_action(&self) -> usize {
        self.actor.spec().output_dim()
    }

    pub fn buffer_len(&self) -> usize {
        self.buffer.len()
    }

    pub fn push(&mut self, t: Transition) {
        self.buffer.push(t);
    }

    /// States, actions, next states, costs and terminal flags of `idx`.
    fn gather(&self, idx: &[usize]) -> Minibatch {
        let (n_s, n_a, n) = (self.n_state(), self.n_action(), idx.len());
        let mut s = Array2::zeros((n_s, n));
        let mut a = Array2::zeros((n_a, n));
        let mut s2 = Array2::zeros((n_s, n));
        let mut cost = Vec::with_capacity(n);
        let mut terminal = Vec::with_capacity(n);
        for (j, &i) in idx.iter().enumerate() {
            let t = self.buffer.get(i).expect("sampled index in range");
            s.column_mut(j).assign(&ArrayView1::from(t.state.as_slice()));
            a.column_mut(j).assign(&ArrayView1::from(t.action.as_slice()));
            s2.column_mut(j).assign(&ArrayView1::from(t.next_state.as_slice()));
            cost.push(t.cost);
            terminal.push(t.terminal);
        }
        (s, a, s2, cost, terminal)
    }

    /// Critic regression targets y = cost + (1 − terminal)·Q′(s′, μ′(s′)).
    pub fn critic_targets(&self, s2: ArrayView2<f64>, cost: &[f64], terminal: &[bool]) -> Result<Vec<f64>> {
        let a2 = self.target_actor.predict(s2)?;
        let q2 = self.target_critic.predict(concatenate(Axis(0), &[s2, a2.view()]).expect("same columns").view())?;
        Ok(cost
            .iter()
            .zip(terminal)
            .zip(q2.row(0))
            .map(|((&c, &term), &q)| if term { c } else { c + q })
            .collect())
    }

    /// One critic step, one actor step and one target nudge on a sampled
    /// minibatch. Skipped (returns `None`) while the buffer is smaller than
    /// the minibatch.
    pub fn update<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Option<UpdateStats>> {
        if self.buffer.len() < self.config.minibatch {
            return Ok(None);
        }
        let idx = self.buffer.sample_indices(self.config.minibatch, rng);
        self.update_on(&idx).map(Some)
    }

    /// ½Σ(Q(s, a) − y)² on the given buffer entries and its critic gradient.
    pub fn critic_gradient(&self, idx: &[usize]) -> Result<(f64, Gradients)> {
        let (s, a, s2, cost, terminal) = self.gather(idx);
        let y = self.critic_targets(s2.view(), &cost, &terminal)?;
        let x = concatenate(Axis(0), &[s.view(), a.view()]).expect("same columns");
        let (q, cache) = self.critic.forward(x.view())?;
        let mut err = q;
        for (e, &t) in err.iter_mut().zip(&y) {
            *e -= t;
        }
        let loss = 0.5 * err.iter().map(|e| e * e).sum::<f64>();
        let (grads, _) = self.critic.backward(&cache, err.view())?;
        Ok((loss, grads))
    }

    /// Gradient of Σ Q(s, μ(s)) with respect to the actor, and the mean Q.
    pub fn actor_gradient(&self, idx: &[usize]) -> Result<(f64, Gradients)> {
        let (s, ..) = self.gather(idx);
        let n_s = self.n_state();
        let (mu, actor_cache) = self.actor.forward(s.view())?;
        let x = concatenate(Axis(0), &[s.view(), mu.view()]).expect("same columns");
        let (q_pi, cache) = self.critic.forward(x.view())?;
        let dx = self.critic.input_grad(&cache, Array2::ones(q_pi.raw_dim()).view())?;
        let dq_da = dx.slice(s![n_s.., ..]).to_owned();
        let (grads, _) = self.actor.backward(&actor_cache, dq_da.view())?;
        Ok((q_pi.mean().unwrap_or(0.0), grads))
    }

    /// Update on explicit buffer indices. Costs are minimized, so the actor
    /// descends ⟨Q⟩.
    pub fn update_on(&mut self, idx: &[usize]) -> Result<UpdateStats> {
        let (critic_loss, grads) = self.critic_gradient(idx)?;
        adam_step(&mut self.critic, &grads, &mut self.critic_opt, self.config.lr_critic)?;
        let (mean_q, grads) = self.actor_gradient(idx)?;
        adam_step(&mut self.actor, &grads, &mut self.actor_opt, self.config.lr_actor)?;
        self.target_critic.soft_update_toward(&self.critic, self.config.tau)?;
        self.target_actor.soft_update_toward(&self.actor, self.config.tau)?;
        Ok(UpdateStats { critic_loss, mean_q })
    }

    /// One rollout of `batch_size` exploratory movements, storing every
    /// transition and updating after each time step.
    pub fn rollout<R: Rng + ?Sized>(&mut self, env: &Environment, progress: f64, rng: &mut R) -> Result<RolloutStats> {
        let (n_s, n_a, n_m) = (self.n_state(), self.n_action(), self.config.batch_size);
        if env.n_s() != n_s || env.n_a() != n_a {
            return Err(Error::shape("agent/environment dims", format!("n_s={n_s}, n_a={n_a}"), format!("n_s={}, n_a={}", env.n_s(), env.n_a())));
        }
        let dt = env.dt();
        let before = env.step_calls();
        let mut s = uniform_pm1(n_s, n_m, rng);
        let mut total = 0.0;
        self.noise.reset();
        let steps = env.steps();
        let mut diverged = false;
        for t in 0..steps {
            let noise = self.noise.sample((n_a, n_m), progress, rng);
            let a = ddpg_act(&self.actor, s.view(), &noise)?;
            let next = match env.step(s.view(), a.view(), rng) {
                Ok(n) => n,
                Err(Error::NonFinite(_)) => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            let c = env.cost_rate(s.view())?;
            total += c.sum() * dt;
            let terminal = t + 1 == steps;
            let c_next = if terminal { Some(env.cost_rate(next.view())?) } else { None };
            if let Some(cn) = &c_next {
                total += cn.sum() * dt;
            }
            for j in 0..n_m {
                let mut cost = dt * c[j];
                if let Some(cn) = &c_next {
                    cost += dt * cn[j];
                }
                self.buffer.push(Transition {
                    state: s.column(j).to_vec(),
                    action: a.column(j).to_vec(),
                    cost,
                    next_state: next.column(j).to_vec(),
                    terminal,
                });
            }
            for _ in 0..self.config.updates_per_step {
                self.update(rng)?;
            }
            s = next;
        }
        Ok(RolloutStats {
            rollout: 0,
            imaginary: false,
            gate_rate: 0.0,
            mean_focus_error_sq: 0.0,
            mean_cost: (!diverged).then_some(total / n_m as f64),
            env_steps: env.step_calls() - before,
            diverged,
        })
    }

    pub fn run_learning<R, F>(
        &mut self,
        env: &Environment,
        n_rolls: usize,
        eval_period: usize,
        rng: &mut R,
        mut evaluate: F,
    ) -> Result<crate::costate::LearningOutcome>
    where
        R: Rng,
        F: FnMut(&MlpNet) -> Result<f64>,
    {
        if eval_period == 0 {
            return Err(Error::Config("evaluation period must be positive".into()));
        }
        let mut curve = vec![(0, evaluate(&self.actor)?)];
        let mut stats = Vec::with_capacity(n_rolls);
        for k in 0..n_rolls {
            let progress = if n_rolls > 1 { k as f64 / (n_rolls - 1) as f64 } else { 1.0 };
            let mut st = self.rollout(env, progress, rng)?;
            st.rollout = k;
            stats.push(st);
            if (k + 1) % eval_period == 0 {
                curve.push((k + 1, evaluate(&self.actor)?));
            }
        }
        Ok(crate::costate::LearningOutcome { curve, stats })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envgen::{make_task, TaskSpec};
    use crate::nn::Activation;
    use crate::rng::rng_from_seed;

    fn agent(seed: u64, config: DdpgConfig) -> DdpgAgent {
        let mut r = rng_from_seed(seed);
        let actor = MlpNet::new(MlpSpec::relu(vec![4, 8, 8, 1], Activation::Tanh).unwrap(), &mut r).unwrap();
        DdpgAgent::new(config, actor, MlpSpec::relu(vec![5, 10, 10, 1], Activation::Linear).unwrap(), &mut r).unwrap()
    }

    fn transition(r: &mut impl Rng, cost: f64, terminal: bool) -> Transition {
        Transition {
            state: (0..4).map(|_| r.random_range(-1.0..1.0)).collect(),
            action: vec![r.random_range(-1.0..1.0)],
            cost,
            next_state: (0..4).map(|_| r.random_range(-1.0..1.0)).collect(),
            terminal,
        }
    }

    #[test]
    fn zero_noise_acts_greedily_and_large_noise_saturates() {
        let ag = agent(1, DdpgConfig::default());
        let s = uniform_pm1(4, 6, &mut rng_from_seed(2));
        let greedy = ag.actor.predict(s.view()).unwrap();
        assert_eq!(ddpg_act(&ag.actor, s.view(), &Array2::zeros((1, 6))).unwrap(), greedy);
        let sat = ddpg_act(&ag.actor, s.view(), &Array2::from_elem((1, 6), 5.0)).unwrap();
        assert!(sat.iter().all(|&a| a == 1.0));
    }

    #[test]
    fn noise_stream_is_reproducible() {
        for kind in [
            ExplorationNoise::default(),
            ExplorationNoise::OrnsteinUhlenbeck { theta: 0.15, sigma: 0.2 },
        ] {
            let draw = || {
                let mut p = NoiseProcess::new(kind);
                let mut r = rng_from_seed(77);
                (0..5).map(|k| p.sample((2, 3), k as f64 / 4.0, &mut r)).collect::<Vec<_>>()
            };
            assert_eq!(draw(), draw());
        }
    }

    #[test]
    fn update_waits_for_enough_transitions() {
        let mut ag = agent(3, DdpgConfig::default());
        let mut r = rng_from_seed(4);
        for _ in 0..10 {
            ag.push(transition(&mut r, 0.1, false));
        }
        assert!(ag.update(&mut r).unwrap().is_none());
    }

    #[test]
    fn zero_tau_keeps_targets_fixed() {
        let mut ag = agent(5, DdpgConfig { tau: 0.0, minibatch: 8, ..DdpgConfig::default() });
        let mut r = rng_from_seed(6);
        for _ in 0..16 {
            ag.push(transition(&mut r, 0.2, false));
        }
        let (ta, tc) = (ag.target_actor.clone(), ag.target_critic.clone());
        for _ in 0..5 {
            ag.update(&mut r).unwrap().unwrap();
        }
        assert!(ag.target_actor.same_params(&ta));
        assert!(ag.target_critic.same_params(&tc));
        assert!(!ag.critic.same_params(&tc));
    }

    #[test]
    fn terminal_transitions_do_not_bootstrap() {
        let ag = agent(7, DdpgConfig::default());
        let s2 = uniform_pm1(4, 2, &mut rng_from_seed(8));
        let y = ag.critic_targets(s2.view(), &[0.3, 0.3], &[true, false]).unwrap();
        assert_eq!(y[0], 0.3);
        let q2 = {
            let a2 = ag.target_actor.predict(s2.view()).unwrap();
            ag.target_critic
                .predict(concatenate(Axis(0), &[s2.view(), a2.view()]).unwrap().view())
                .unwrap()
        };
        assert_eq!(y[1], 0.3 + q2[[0, 1]]);
    }

    #[test]
    fn critic_converges_to_constant_terminal_cost() {
        let cbar = 0.05;
        let mut ag = agent(9, DdpgConfig { lr_critic: 0.003, lr_actor: 0.0, minibatch: 32, ..DdpgConfig::default() });
        let mut r = rng_from_seed(10);
        for _ in 0..64 {
            ag.push(transition(&mut r, cbar, true));
        }
        for _ in 0..1500 {
            ag.update(&mut r).unwrap();
        }
        let idx: Vec<usize> = (0..64).collect();
        let (s, a, ..) = ag.gather(&idx);
        let q = ag.critic.predict(concatenate(Axis(0), &[s.view(), a.view()]).unwrap().view()).unwrap();
        let worst = q.iter().map(|v| (v - cbar).abs()).fold(0.0, f64::max);
        assert!(worst < 5e-3, "max |Q - c| = {worst}");
    }

    #[test]
    fn actor_step_lowers_critic_value() {
        let mut ag = agent(11, DdpgConfig { lr_critic: 0.0, lr_actor: 1e-4, tau: 0.0, minibatch: 32, ..DdpgConfig::default() });
        let mut r = rng_from_seed(12);
        for _ in 0..32 {
            ag.push(transition(&mut r, 0.1, false));
        }
        let idx: Vec<usize> = (0..32).collect();
        let (s, ..) = ag.gather(&idx);
        let q_of = |ag: &DdpgAgent| {
            let mu = ag.actor.predict(s.view()).unwrap();
            ag.critic.predict(concatenate(Axis(0), &[s.view(), mu.view()]).unwrap().view()).unwrap().sum()
        };
        let before = q_of(&ag);
        ag.update_on(&idx).unwrap();
        assert!(q_of(&ag) < before);
    }

    #[test]
    fn target_lag_shrinks_under_repeated_nudges() {
        let mut ag = agent(13, DdpgConfig::default());
        let mut r = rng_from_seed(14);
        let other = MlpNet::new(ag.critic.spec().clone(), &mut r).unwrap();
        ag.target_critic = other;
        let mut last = ag.target_critic.param_distance_sq(&ag.critic);
        for _ in 0..10 {
            ag.target_critic.soft_update_toward(&ag.critic, 0.1).unwrap();
            let d = ag.target_critic.param_distance_sq(&ag.critic);
            assert!(d < last);
            last = d;
        }
    }

    #[test]
    fn rollout_fills_buffer_and_marks_terminal() {
        let env = make_task(&TaskSpec::linear(4, 1, 2, 1)).unwrap();
        let mut ag = agent(15, DdpgConfig { batch_size: 5, ..DdpgConfig::default() });
        let mut r = rng_from_seed(16);
        let st = ag.rollout(&env, 0.0, &mut r).unwrap();
        assert_eq!(ag.buffer_len(), 5 * env.steps());
        assert_eq!(st.env_steps, env.steps() as u64);
        let terminals = (0..ag.buffer_len()).filter(|&i| ag.buffer.get(i).unwrap().terminal).count();
        assert_eq!(terminals, 5);
        assert!(st.mean_cost.unwrap() > 0.0);
    }
}
