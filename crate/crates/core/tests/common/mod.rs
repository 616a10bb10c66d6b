//! Test-only oracles: a scalar reverse-mode tape and finite differences over
//! whole unrolled trajectories.
#![allow(dead_code)]

use std::cell::RefCell;

use costate::envgen::{Acceleration, Environment};
use costate::nn::{Activation, MlpNet};
use ndarray::{Array1, Array2, Axis};

/// Each node stores up to two (parent, local derivative) pairs.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<[(usize, f64); 2]>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
    pub val: f64,
}

impl Tape {
    fn push(&self, parents: [(usize, f64); 2]) -> usize {
        let mut n = self.nodes.borrow_mut();
        n.push(parents);
        n.len() - 1
    }

    pub fn var(&self, val: f64) -> Var<'_> {
        let idx = self.push([(usize::MAX, 0.0); 2]);
        Var { tape: self, idx, val }
    }

    /// d(out)/d(node) for every node.
    pub fn grad(&self, out: Var<'_>) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0; nodes.len()];
        adj[out.idx] = 1.0;
        for i in (0..nodes.len()).rev() {
            for &(p, d) in &nodes[i] {
                if p != usize::MAX {
                    adj[p] += d * adj[i];
                }
            }
        }
        adj
    }
}

impl<'t> Var<'t> {
    fn unary(self, val: f64, d: f64) -> Var<'t> {
        let idx = self.tape.push([(self.idx, d), (usize::MAX, 0.0)]);
        Var { tape: self.tape, idx, val }
    }

    fn binary(self, o: Var<'t>, val: f64, da: f64, db: f64) -> Var<'t> {
        let idx = self.tape.push([(self.idx, da), (o.idx, db)]);
        Var { tape: self.tape, idx, val }
    }

    pub fn add(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, self.val + o.val, 1.0, 1.0)
    }

    pub fn mul(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, self.val * o.val, o.val, self.val)
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        self.unary(k * self.val, k)
    }

    pub fn offset(self, k: f64) -> Var<'t> {
        self.unary(self.val + k, 1.0)
    }

    pub fn tanh(self) -> Var<'t> {
        let y = self.val.tanh();
        self.unary(y, 1.0 - y * y)
    }

    pub fn relu(self) -> Var<'t> {
        if self.val > 0.0 {
            self.unary(self.val, 1.0)
        } else {
            self.unary(0.0, 0.0)
        }
    }

    pub fn idx(self) -> usize {
        self.idx
    }
}

fn activate<'t>(x: Var<'t>, act: Activation) -> Var<'t> {
    match act {
        Activation::Relu => x.relu(),
        Activation::Tanh => x.tanh(),
        Activation::Linear => x,
    }
}

fn affine<'t>(tape: &'t Tape, w: &Array2<f64>, b: &Array1<f64>, x: &[Var<'t>]) -> Vec<Var<'t>> {
    (0..w.nrows())
        .map(|i| {
            x.iter()
                .enumerate()
                .fold(tape.var(0.0).offset(b[i]), |acc, (j, &xj)| acc.add(xj.scale(w[[i, j]])))
        })
        .collect()
}

pub fn policy_on_tape<'t>(tape: &'t Tape, net: &MlpNet, x: &[Var<'t>]) -> Vec<Var<'t>> {
    let depth = net.weights().len();
    let mut h = x.to_vec();
    for (l, (w, b)) in net.weights().iter().zip(net.biases()).enumerate() {
        let act = if l + 1 == depth {
            net.spec().output_activation
        } else {
            net.spec().hidden_activation
        };
        h = affine(tape, w, b, &h).into_iter().map(|z| activate(z, act)).collect();
    }
    h
}

fn linear_parts(env: &Environment) -> (&Array2<f64>, &Array2<f64>) {
    match env.acceleration() {
        Acceleration::Linear { state, action } => (state, action),
        Acceleration::TanhNet { .. } => panic!("tape oracle supports linear tasks"),
    }
}

pub fn step_on_tape<'t>(tape: &'t Tape, env: &Environment, s: &[Var<'t>], a: &[Var<'t>]) -> Vec<Var<'t>> {
    let (am, gm) = linear_parts(env);
    let n_q = s.len() / 2;
    let dt = env.dt();
    let zero = Array1::zeros(n_q);
    let alpha_s = affine(tape, am, &zero, s);
    let alpha_a = affine(tape, gm, &zero, a);
    (0..s.len())
        .map(|i| {
            let rate = if i < n_q { s[n_q + i] } else { alpha_s[i - n_q].add(alpha_a[i - n_q]) };
            s[i].add(rate.scale(dt))
        })
        .collect()
}

pub fn cost_on_tape<'t>(tape: &'t Tape, env: &Environment, s: &[Var<'t>]) -> Var<'t> {
    let diag = env.cost_diag();
    let mut acc = tape.var(0.0);
    for (i, &si) in s.iter().enumerate() {
        if diag[i] != 0.0 {
            acc = acc.add(si.mul(si).scale(diag[i]));
        }
    }
    acc.tanh()
}

/// Δt·Σ_{t'≥t} c_{t'} on the tape, starting from state `s_t` with action
/// `a_t` (or μ(s_t) when `None`) and following μ afterwards.
pub fn tail_cost_on_tape<'t>(
    tape: &'t Tape,
    env: &Environment,
    policy: &MlpNet,
    s_t: Vec<Var<'t>>,
    a_t: Option<Vec<Var<'t>>>,
    remaining: usize,
) -> Var<'t> {
    let dt = env.dt();
    let mut s = s_t;
    let mut a = a_t.unwrap_or_else(|| policy_on_tape(tape, policy, &s));
    let mut total = cost_on_tape(tape, env, &s).scale(dt);
    for k in 0..remaining {
        s = step_on_tape(tape, env, &s, &a);
        total = total.add(cost_on_tape(tape, env, &s).scale(dt));
        if k + 1 < remaining {
            a = policy_on_tape(tape, policy, &s);
        }
    }
    total
}

fn column(v: &[f64]) -> Array2<f64> {
    Array1::from(v.to_vec()).insert_axis(Axis(1))
}

/// The same tail cost in plain floating point (deterministic tasks only).
pub fn tail_cost(env: &Environment, policy: &MlpNet, s_t: &[f64], a_t: Option<&[f64]>, remaining: usize) -> f64 {
    let mut rng = costate::rng::rng_from_seed(0);
    let dt = env.dt();
    let mut s = column(s_t);
    let mut a = match a_t {
        Some(a) => column(a),
        None => policy.predict(s.view()).unwrap(),
    };
    let mut total = env.cost_rate(s.view()).unwrap()[0] * dt;
    for _ in 0..remaining {
        s = env.step(s.view(), a.view(), &mut rng).unwrap();
        total += env.cost_rate(s.view()).unwrap()[0] * dt;
        a = policy.predict(s.view()).unwrap();
    }
    total
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_diff(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += h;
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

/// ‖a − b‖ / max(‖b‖, 1e-12)
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-12)
}

/// Errors of the backsweep against both oracles on one random tiny task.
#[derive(Debug, Clone, Copy)]
pub struct OracleCase {
    pub n_s: usize,
    pub steps: usize,
    /// ∂C/∂a_t: backsweep vs central differences, and vs the tape.
    pub action_fd: f64,
    pub action_tape: f64,
    /// λ_t against ∂C/∂s_t.
    pub costate_fd: f64,
    pub costate_tape: f64,
}

pub const FD_STEP: f64 = 1e-5;

pub fn oracle_case(seed: u64) -> OracleCase {
    use costate::costate::{costate_backsweep, simulate, ExactCost};
    use costate::envgen::{make_task, TaskSpec};
    use costate::nn::MlpSpec;
    use costate::rng::rng_from_seed;
    use rand::Rng;

    let mut r = rng_from_seed(seed);
    let n_s = 2 * r.random_range(1..=3usize);
    let steps = r.random_range(3..=5usize);
    let n_cost = 2 * r.random_range(1..=n_s / 2);
    let n_c = r.random_range(1..=n_cost / 2);
    let env = make_task(&TaskSpec::linear(n_s, n_c, n_cost, r.random())).unwrap();
    let n_a = env.n_a();
    let mut policy = MlpNet::new(MlpSpec::relu(vec![n_s, 5, 5, n_a], Activation::Tanh).unwrap(), &mut r).unwrap();
    // Nonzero biases keep every relu away from its kink.
    for b in policy.params_mut().1 {
        b.mapv_inplace(|_| r.random_range(0.05..0.2));
    }
    let s0 = Array2::from_shape_simple_fn((n_s, 1), || r.random_range(-0.3..0.3));
    let traj = simulate(&policy, s0, steps, false, |s, a| env.step(s, a, &mut rng_from_seed(0))).unwrap();
    let sweep = costate_backsweep(&traj, &policy, &env, &ExactCost(&env), env.dt()).unwrap();

    let (mut g, mut g_fd, mut g_tape) = (vec![], vec![], vec![]);
    let (mut l, mut l_fd, mut l_tape) = (vec![], vec![], vec![]);
    for t in 0..=steps {
        let s_t: Vec<f64> = traj.states[t].iter().copied().collect();
        let a_t: Vec<f64> = traj.actions[t].iter().copied().collect();
        let rem = steps - t;

        g.extend(sweep.action_grads[t].iter().copied());
        g_fd.extend(central_diff(&a_t, FD_STEP, |a| tail_cost(&env, &policy, &s_t, Some(a), rem)));
        let tape = Tape::default();
        let sv: Vec<_> = s_t.iter().map(|&x| tape.var(x)).collect();
        let av: Vec<_> = a_t.iter().map(|&x| tape.var(x)).collect();
        let idx: Vec<usize> = av.iter().map(|v| v.idx()).collect();
        let out = tail_cost_on_tape(&tape, &env, &policy, sv, Some(av), rem);
        let adj = tape.grad(out);
        g_tape.extend(idx.iter().map(|&i| adj[i]));

        l.extend(sweep.costates[t].iter().copied());
        l_fd.extend(central_diff(&s_t, FD_STEP, |s| tail_cost(&env, &policy, s, None, rem)));
        let tape = Tape::default();
        let sv: Vec<_> = s_t.iter().map(|&x| tape.var(x)).collect();
        let idx: Vec<usize> = sv.iter().map(|v| v.idx()).collect();
        let out = tail_cost_on_tape(&tape, &env, &policy, sv, None, rem);
        let adj = tape.grad(out);
        l_tape.extend(idx.iter().map(|&i| adj[i]));
    }
    OracleCase {
        n_s,
        steps,
        action_fd: rel_err(&g, &g_fd),
        action_tape: rel_err(&g, &g_tape),
        costate_fd: rel_err(&l, &l_fd),
        costate_tape: rel_err(&l, &l_tape),
    }
}

/// Mean e² of ⟨f⟩ on held-out on-trajectory transitions, before and after
/// `updates` focusing steps with the policy and ⟨c′⟩ frozen.
pub fn focusing_repetition(seed: u64, n_s: usize, n_mu: usize, n_est: usize, babble: usize, updates: usize) -> (f64, f64) {
    use costate::costate::{costate_backsweep, focus_error, Agent, LearnedCost, LearnedDynamics, LearnerConfig, Method, RolloutMode};
    use costate::envgen::{make_task, TaskSpec};
    use costate::harness::size_networks;
    use costate::rng::{derive_seed, rng_from_seed};
    use ndarray::concatenate;

    let env = make_task(&TaskSpec::linear(n_s, 1, 4, derive_seed(seed, &[1]))).unwrap();
    let sized = size_networks(n_s, 2, None, Some(n_mu), n_est, n_est, 4).unwrap();
    let mut r = rng_from_seed(derive_seed(seed, &[2]));
    let policy = MlpNet::new(sized.policy.clone(), &mut r).unwrap();
    let mut config = LearnerConfig::defaults(Method::Cf);
    config.babble_minibatches = babble;
    let mut agent = Agent::new(config, policy, sized.model, sized.cprime, &mut r).unwrap();
    agent.babble(&env, &mut r).unwrap();

    let held = agent.rollout_forward(&env, RolloutMode::Real, &mut r).unwrap();
    let sweep = costate_backsweep(
        &held,
        &agent.policy,
        &LearnedDynamics(&agent.model),
        &LearnedCost(&agent.cprime),
        env.dt(),
    )
    .unwrap();
    let held_out_e2 = |model: &MlpNet| -> f64 {
        let mut total = 0.0;
        for t in 0..held.steps() {
            let x = concatenate(ndarray::Axis(0), &[held.states[t].view(), held.actions[t].view()]).unwrap();
            let f = model.predict(x.view()).unwrap();
            let ds = &held.states[t + 1] - &held.states[t];
            let e = focus_error(f.view(), sweep.costates[t + 1].view(), ds.view(), env.dt());
            total += e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64;
        }
        total / held.steps() as f64
    };
    let before = held_out_e2(&agent.model);
    let frozen = agent.policy.clone();
    let mut done = 0;
    while done < updates {
        let traj = agent.rollout_forward(&env, RolloutMode::Real, &mut r).unwrap();
        done += agent.focus_only(&env, &traj, updates - done).unwrap();
    }
    assert!(agent.policy.same_params(&frozen));
    (before, held_out_e2(&agent.model))
}
