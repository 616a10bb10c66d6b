//! Randomized second-order mechanical tasks.
//!
//! The state is `s = [q; v]` with `n_q = n_s / 2` configuration and velocity
//! coordinates. One Euler step is `s' = s + Δt·[v; α(s, a)]`. The cost-rate is
//! `tanh(sᵀ B s)` with `B = diag(10, .., 10, 0, ..)` over the first `n_c`
//! entries.
//!
//! Relevance layout: with `k = n_C / 2`, the cost-relevant elements are
//! `q_1..q_k` and `v_1..v_k`. The accelerations of those `k` coordinates read
//! only relevant elements and the actions, so no other element can influence
//! total cost. The remaining accelerations are distractors and may read the
//! full state.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, MlpNet, MlpSpec};
use crate::rng::rng_from_seed;

pub const DT: f64 = 0.1;
pub const HORIZON: f64 = 3.0;
/// Integration steps per movement; states are recorded at `STEPS + 1` times.
pub const STEPS: usize = 30;
pub const COST_WEIGHT: f64 = 10.0;

const LINEAR_SPECTRAL_BOUND: f64 = 1.5;
/// Scale of the linear input matrix `G = ACTION_GAIN · N(0, 1)`.
pub const ACTION_GAIN: f64 = 3.0;
const TANH_NET_GAIN: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DynamicsKind {
    Linear,
    TanhNet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub n_s: usize,
    /// State elements read by the cost-rate.
    pub n_c: usize,
    /// State elements that can influence total cost.
    pub n_cost: usize,
    pub dynamics: DynamicsKind,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl TaskSpec {
    pub fn linear(n_s: usize, n_c: usize, n_cost: usize, seed: u64) -> Self {
        TaskSpec {
            n_s,
            n_c,
            n_cost,
            dynamics: DynamicsKind::Linear,
            noise_sigma: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidTask(m));
        if self.n_s == 0 || !self.n_s.is_multiple_of(2) {
            return bad(format!("n_s must be positive and even, got {}", self.n_s));
        }
        if self.n_cost == 0 || !self.n_cost.is_multiple_of(2) || self.n_cost > self.n_s {
            return bad(format!(
                "n_C must be positive, even and <= n_s, got {} (n_s = {})",
                self.n_cost, self.n_s
            ));
        }
        if self.n_c == 0 || self.n_c > self.n_cost / 2 {
            return bad(format!("n_c must be in 1..=n_C/2, got {}", self.n_c));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        Ok(())
    }

    pub fn n_q(&self) -> usize {
        self.n_s / 2
    }

    pub fn n_a(&self) -> usize {
        self.n_cost / 2
    }

    /// Indices of the cost-relevant state elements.
    pub fn relevant_indices(&self) -> Vec<usize> {
        let k = self.n_cost / 2;
        (0..k).chain(self.n_q()..self.n_q() + k).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Acceleration {
    /// α = A·s + G·a
    Linear { state: Array2<f64>, action: Array2<f64> },
    /// α = gain · net([s; a]) with a one-hidden-layer tanh net.
    TanhNet { net: MlpNet, gain: f64 },
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Environment {
    spec: TaskSpec,
    accel: Acceleration,
    cost_diag: Array1<f64>,
    dt: f64,
    steps: usize,
    #[serde(skip)]
    step_calls: AtomicU64,
}

impl Clone for Environment {
    fn clone(&self) -> Self {
        Environment {
            spec: self.spec.clone(),
            accel: self.accel.clone(),
            cost_diag: self.cost_diag.clone(),
            dt: self.dt,
            steps: self.steps,
            step_calls: AtomicU64::new(0),
        }
    }
}

/// Largest singular value by power iteration on `MᵀM`.
pub fn spectral_norm(m: &Array2<f64>) -> f64 {
    let n = m.ncols();
    let mut x = Array1::from_shape_fn(n, |i| 1.0 + 0.01 * i as f64);
    let mut sigma = 0.0;
    for _ in 0..10_000 {
        let y = m.t().dot(&m.dot(&x));
        let norm = y.dot(&y).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm.sqrt() / x.dot(&x).sqrt().sqrt();
        x = y / norm;
        if (next - sigma).abs() <= 1e-14 * next {
            return next;
        }
        sigma = next;
    }
    sigma
}

pub fn make_task(spec: &TaskSpec) -> Result<Environment> {
    spec.validate()?;
    let mut rng = rng_from_seed(spec.seed);
    let (n_s, n_q, n_a) = (spec.n_s, spec.n_q(), spec.n_a());
    let k = spec.n_cost / 2;
    let relevant = spec.relevant_indices();
    let accel = match spec.dynamics {
        DynamicsKind::Linear => {
            let mut a: Array2<f64> =
                Array2::from_shape_simple_fn((n_q, n_s), || StandardNormal.sample(&mut rng));
            let g: Array2<f64> = Array2::from_shape_simple_fn((n_q, n_a), || {
                let x: f64 = StandardNormal.sample(&mut rng);
                ACTION_GAIN * x
            });
            for i in 0..k {
                for j in 0..n_s {
                    if !relevant.contains(&j) {
                        a[[i, j]] = 0.0;
                    }
                }
            }
            let norm = spectral_norm(&a);
            if norm > LINEAR_SPECTRAL_BOUND {
                a *= LINEAR_SPECTRAL_BOUND / norm;
            }
            Acceleration::Linear { state: a, action: g }
        }
        DynamicsKind::TanhNet => {
            let net_spec = MlpSpec::new(vec![n_s + n_a, n_s, n_q], Activation::Tanh, Activation::Linear)?;
            let mut net = MlpNet::new(net_spec, &mut rng)?;
            // First n_C hidden units form the relevant block.
            let hidden_rel = spec.n_cost;
            let (weights, _) = net.params_mut();
            for h in 0..hidden_rel {
                for j in 0..n_s {
                    if !relevant.contains(&j) {
                        weights[0][[h, j]] = 0.0;
                    }
                }
            }
            for i in 0..k {
                for h in hidden_rel..n_s {
                    weights[1][[i, h]] = 0.0;
                }
            }
            Acceleration::TanhNet {
                net,
                gain: TANH_NET_GAIN,
            }
        }
    };
    let cost_diag = Array1::from_shape_fn(n_s, |i| if i < spec.n_c { COST_WEIGHT } else { 0.0 });
    Ok(Environment {
        spec: spec.clone(),
        accel,
        cost_diag,
        dt: DT,
        steps: STEPS,
        step_calls: AtomicU64::new(0),
    })
}

/// Multiplies each column `j` of `grad` (a ∂c′/∂x) by `1 − tanh(c′_j)²`,
/// turning it into ∂c/∂x for `c = tanh(c′)`.
pub fn squash_chain(cprime: &Array1<f64>, grad: &mut Array2<f64>) {
    for (mut col, &cp) in grad.axis_iter_mut(Axis(1)).zip(cprime) {
        let c = cp.tanh();
        let w = 1.0 - c * c;
        col.mapv_inplace(|g| w * g);
    }
}

impl Environment {
    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn acceleration(&self) -> &Acceleration {
        &self.accel
    }

    pub fn cost_diag(&self) -> &Array1<f64> {
        &self.cost_diag
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn n_s(&self) -> usize {
        self.spec.n_s
    }

    pub fn n_a(&self) -> usize {
        self.spec.n_a()
    }

    /// Number of `step` calls since construction (clones start at zero).
    pub fn step_calls(&self) -> u64 {
        self.step_calls.load(Ordering::Relaxed)
    }

    fn check(&self, s: &ArrayView2<f64>, a: Option<&ArrayView2<f64>>) -> Result<()> {
        if s.nrows() != self.spec.n_s {
            return Err(Error::shape("state batch rows", self.spec.n_s, s.nrows()));
        }
        if let Some(a) = a {
            if a.dim() != (self.spec.n_a(), s.ncols()) {
                return Err(Error::shape(
                    "action batch",
                    format!("({}, {})", self.spec.n_a(), s.ncols()),
                    format!("{:?}", a.dim()),
                ));
            }
        }
        Ok(())
    }

    /// α(s, a), shape `(n_q, n_m)`.
    pub fn accel(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(&s, Some(&a))?;
        Ok(match &self.accel {
            Acceleration::Linear { state, action } => state.dot(&s) + action.dot(&a),
            Acceleration::TanhNet { net, gain } => {
                let x = concatenate(Axis(0), &[s, a]).expect("same column count");
                let mut y = net.predict(x.view())?;
                y *= *gain;
                y
            }
        })
    }

    /// Noiseless state rate f(s, a) = [v; α(s, a)].
    pub fn rate(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<Array2<f64>> {
        let alpha = self.accel(s, a)?;
        let v = s.slice(s![self.spec.n_q().., ..]);
        Ok(concatenate(Axis(0), &[v, alpha.view()]).expect("same column count"))
    }

    /// Vector-Jacobian product of the noiseless rate: returns
    /// (wᵀ ∂f/∂s, wᵀ ∂f/∂a) column by column.
    pub fn rate_vjp(
        &self,
        s: ArrayView2<f64>,
        a: ArrayView2<f64>,
        w: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check(&s, Some(&a))?;
        if w.dim() != s.dim() {
            return Err(Error::shape("rate_vjp weights", format!("{:?}", s.dim()), format!("{:?}", w.dim())));
        }
        let n_q = self.spec.n_q();
        let w_q = w.slice(s![..n_q, ..]);
        let w_v = w.slice(s![n_q.., ..]);
        let (mut ds, da) = match &self.accel {
            Acceleration::Linear { state, action } => (state.t().dot(&w_v), action.t().dot(&w_v)),
            Acceleration::TanhNet { net, gain } => {
                let x = concatenate(Axis(0), &[s, a]).expect("same column count");
                let (_, cache) = net.forward(x.view())?;
                let dx = net.input_grad(&cache, (&w_v * *gain).view())?;
                let n_s = self.spec.n_s;
                (dx.slice(s![..n_s, ..]).to_owned(), dx.slice(s![n_s.., ..]).to_owned())
            }
        };
        // dq/dt = v contributes w_q to the velocity rows.
        let mut ds_v = ds.slice_mut(s![n_q.., ..]);
        ds_v += &w_q;
        Ok((ds, da))
    }

    /// One Euler step, adding σ·ξ to the acceleration when the task is noisy.
    /// Fails if any resulting element is non-finite.
    pub fn step<R: Rng + ?Sized>(
        &self,
        s: ArrayView2<f64>,
        a: ArrayView2<f64>,
        rng: &mut R,
    ) -> Result<Array2<f64>> {
        let next = self.advance(s, a, rng)?;
        if next.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("environment state".into()));
        }
        Ok(next)
    }

    /// Like [`Environment::step`] but leaves non-finite columns for the caller.
    pub fn advance<R: Rng + ?Sized>(
        &self,
        s: ArrayView2<f64>,
        a: ArrayView2<f64>,
        rng: &mut R,
    ) -> Result<Array2<f64>> {
        self.step_calls.fetch_add(1, Ordering::Relaxed);
        let mut f = self.rate(s, a)?;
        let sigma = self.spec.noise_sigma;
        if sigma > 0.0 {
            let mut alpha = f.slice_mut(s![self.spec.n_q().., ..]);
            alpha.mapv_inplace(|x| {
                let xi: f64 = StandardNormal.sample(rng);
                x + sigma * xi
            });
        }
        let dt = self.dt;
        Zip::from(&mut f).and(&s).for_each(|fv, &sv| *fv = sv + dt * *fv);
        Ok(f)
    }

    /// c′ = sᵀBs per column.
    pub fn cprime(&self, s: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.check(&s, None)?;
        let n_c = self.spec.n_c;
        Ok(s.axis_iter(Axis(1))
            .map(|col| (0..n_c).map(|i| self.cost_diag[i] * col[i] * col[i]).sum())
            .collect())
    }

    /// c = tanh(sᵀBs) per column.
    pub fn cost_rate(&self, s: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.cprime(s)?.mapv(f64::tanh))
    }

    /// ∂c′/∂s = 2·B·s.
    pub fn cprime_grad(&self, s: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(&s, None)?;
        let mut g = s.to_owned();
        for (mut row, &b) in g.axis_iter_mut(Axis(0)).zip(&self.cost_diag) {
            row.mapv_inplace(|x| 2.0 * b * x);
        }
        Ok(g)
    }

    /// Exact ∂c/∂s = (1 − tanh(c′)²)·2·B·s. The cost-rate has no action dependence.
    pub fn cost_grad(&self, s: ArrayView2<f64>) -> Result<Array2<f64>> {
        let cp = self.cprime(s)?;
        let mut g = self.cprime_grad(s)?;
        squash_chain(&cp, &mut g);
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_from_seed, uniform_pm1};

    fn both_kinds(n_s: usize, n_c: usize, n_cost: usize, seed: u64) -> Vec<Environment> {
        [DynamicsKind::Linear, DynamicsKind::TanhNet]
            .into_iter()
            .map(|dynamics| {
                make_task(&TaskSpec {
                    dynamics,
                    ..TaskSpec::linear(n_s, n_c, n_cost, seed)
                })
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn action_dimension_is_half_of_n_cost() {
        assert_eq!(make_task(&TaskSpec::linear(10, 1, 4, 0)).unwrap().n_a(), 2);
        assert_eq!(make_task(&TaskSpec::linear(100, 2, 8, 0)).unwrap().n_a(), 4);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for spec in [
            TaskSpec::linear(9, 1, 4, 0),
            TaskSpec::linear(10, 1, 3, 0),
            TaskSpec::linear(10, 1, 12, 0),
            TaskSpec::linear(10, 3, 4, 0),
            TaskSpec::linear(10, 0, 4, 0),
            TaskSpec {
                noise_sigma: -1.0,
                ..TaskSpec::linear(10, 1, 4, 0)
            },
        ] {
            assert!(matches!(make_task(&spec), Err(Error::InvalidTask(_))), "{spec:?}");
        }
    }

    #[test]
    fn same_seed_same_environment() {
        for dynamics in [DynamicsKind::Linear, DynamicsKind::TanhNet] {
            let spec = TaskSpec {
                dynamics,
                ..TaskSpec::linear(10, 1, 4, 42)
            };
            let a = serde_json::to_string(&make_task(&spec).unwrap()).unwrap();
            let b = serde_json::to_string(&make_task(&spec).unwrap()).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn linear_acceleration_is_spectrally_bounded() {
        let env = make_task(&TaskSpec::linear(30, 1, 4, 5)).unwrap();
        let Acceleration::Linear { state, .. } = env.acceleration() else { panic!() };
        assert!(spectral_norm(state) <= LINEAR_SPECTRAL_BOUND * (1.0 + 1e-9));
    }

    #[test]
    fn cost_matrix_layout() {
        let env = make_task(&TaskSpec::linear(10, 2, 6, 1)).unwrap();
        let d = env.cost_diag();
        assert_eq!(d.slice(s![..2]).to_vec(), vec![10.0, 10.0]);
        assert!(d.slice(s![2..]).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn origin_is_fixed_point() {
        for env in both_kinds(10, 1, 4, 3) {
            let mut r = rng_from_seed(0);
            let next = env.step(Array2::zeros((10, 3)).view(), Array2::zeros((2, 3)).view(), &mut r).unwrap();
            assert!(next.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn zero_velocity_keeps_configuration() {
        // α ≡ 0: zero dynamics matrices.
        let mut env = make_task(&TaskSpec::linear(6, 1, 2, 3)).unwrap();
        env.accel = Acceleration::Linear {
            state: Array2::zeros((3, 6)),
            action: Array2::zeros((3, 1)),
        };
        let mut r = rng_from_seed(0);
        let mut s = uniform_pm1(6, 4, &mut r);
        s.slice_mut(s![3.., ..]).fill(0.0);
        let next = env.step(s.view(), Array2::zeros((1, 4)).view(), &mut r).unwrap();
        assert_eq!(next, s);
    }

    #[test]
    fn configuration_changes_by_dt_times_velocity() {
        for env in both_kinds(8, 1, 4, 9) {
            let mut r = rng_from_seed(4);
            let s = uniform_pm1(8, 5, &mut r);
            let a = uniform_pm1(2, 5, &mut r);
            let next = env.step(s.view(), a.view(), &mut r).unwrap();
            for i in 0..4 {
                for j in 0..5 {
                    assert_eq!(next[[i, j]], s[[i, j]] + DT * s[[i + 4, j]]);
                }
            }
        }
    }

    #[test]
    fn irrelevant_elements_never_reach_relevant_trajectory() {
        for env in both_kinds(10, 1, 4, 17) {
            let mut r = rng_from_seed(8);
            let s0 = uniform_pm1(10, 3, &mut r);
            let mut s1 = s0.clone();
            for &j in &[2usize, 3, 4, 7, 8, 9] {
                s1.row_mut(j).mapv_inplace(|x| x + 0.7);
            }
            let (mut a0, mut b0) = (s0, s1);
            let rel = env.spec().relevant_indices();
            for _ in 0..STEPS {
                let act = uniform_pm1(2, 3, &mut r);
                a0 = env.step(a0.view(), act.view(), &mut r).unwrap();
                b0 = env.step(b0.view(), act.view(), &mut r).unwrap();
                for &i in &rel {
                    assert_eq!(a0.row(i), b0.row(i));
                }
                assert_eq!(env.cost_rate(a0.view()).unwrap(), env.cost_rate(b0.view()).unwrap());
            }
        }
    }

    #[test]
    fn cost_rate_values() {
        let env = make_task(&TaskSpec::linear(10, 1, 4, 0)).unwrap();
        let mut s = Array2::zeros((10, 3));
        s[[0, 1]] = 1.0;
        s[[5, 2]] = 0.8;
        s[[1, 2]] = -0.4;
        let c = env.cost_rate(s.view()).unwrap();
        assert_eq!(c[0], 0.0);
        assert!((c[1] - 0.999_999_995_877_692_8).abs() < 1e-15);
        assert_eq!(c[2], 0.0);
        let cp = env.cprime(s.view()).unwrap();
        for j in 0..3 {
            assert!((cp[j].tanh() - c[j]).abs() <= 1e-15);
        }
        let cp2 = env.cprime((&s * 2.0).view()).unwrap();
        assert_eq!(cp2, &cp * 4.0);
    }

    #[test]
    fn cost_grad_matches_finite_differences() {
        let env = make_task(&TaskSpec::linear(8, 2, 4, 0)).unwrap();
        let mut r = rng_from_seed(2);
        let s = uniform_pm1(8, 4, &mut r) * 0.3;
        let g = env.cost_grad(s.view()).unwrap();
        let h = 1e-6;
        for idx in ndarray::indices(s.dim()) {
            let (i, j) = idx;
            let mut sp = s.clone();
            sp[[i, j]] += h;
            let mut sm = s.clone();
            sm[[i, j]] -= h;
            let fd = (env.cost_rate(sp.view()).unwrap()[j] - env.cost_rate(sm.view()).unwrap()[j]) / (2.0 * h);
            let err = (g[[i, j]] - fd).abs() / g[[i, j]].abs().max(fd.abs()).max(1e-8);
            assert!(err <= 1e-6 || (g[[i, j]] - fd).abs() < 1e-10, "{idx:?}: {} vs {fd}", g[[i, j]]);
            if i >= 2 {
                assert_eq!(g[[i, j]], 0.0);
            }
        }
        assert!(env.cost_grad(Array2::zeros((8, 2)).view()).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rate_vjp_matches_finite_differences() {
        for env in both_kinds(6, 1, 4, 23) {
            let mut r = rng_from_seed(6);
            let s = uniform_pm1(6, 2, &mut r);
            let a = uniform_pm1(2, 2, &mut r);
            let w = uniform_pm1(6, 2, &mut r);
            let (ds, da) = env.rate_vjp(s.view(), a.view(), w.view()).unwrap();
            let obj = |s: &Array2<f64>, a: &Array2<f64>| (&env.rate(s.view(), a.view()).unwrap() * &w).sum();
            let h = 1e-6;
            for idx in ndarray::indices(s.dim()) {
                let (mut p, mut m) = (s.clone(), s.clone());
                p[idx] += h;
                m[idx] -= h;
                let fd = (obj(&p, &a) - obj(&m, &a)) / (2.0 * h);
                assert!((ds[idx] - fd).abs() < 1e-7, "ds {idx:?}");
            }
            for idx in ndarray::indices(a.dim()) {
                let (mut p, mut m) = (a.clone(), a.clone());
                p[idx] += h;
                m[idx] -= h;
                let fd = (obj(&s, &p) - obj(&s, &m)) / (2.0 * h);
                assert!((da[idx] - fd).abs() < 1e-7, "da {idx:?}");
            }
        }
    }

    #[test]
    fn noisy_steps_average_to_deterministic_step() {
        let sigma = 10.0;
        let env = make_task(&TaskSpec {
            noise_sigma: sigma,
            ..TaskSpec::linear(4, 1, 2, 12)
        })
        .unwrap();
        let mut r = rng_from_seed(13);
        let s0 = uniform_pm1(4, 1, &mut r);
        let a0 = uniform_pm1(1, 1, &mut r);
        let n = 10_000;
        let s = s0.broadcast((4, n)).unwrap().to_owned();
        let a = a0.broadcast((1, n)).unwrap().to_owned();
        let noisy = env.step(s.view(), a.view(), &mut r).unwrap();
        let mean = noisy.mean_axis(Axis(1)).unwrap();
        let f = env.rate(s0.view(), a0.view()).unwrap();
        let tol = 3.0 * sigma * DT / (n as f64).sqrt();
        for i in 0..4 {
            let exact = s0[[i, 0]] + DT * f[[i, 0]];
            assert!((mean[i] - exact).abs() <= tol, "component {i}");
        }
        // configuration rows are noise-free
        assert!(noisy.row(0).iter().all(|&x| x == noisy[[0, 0]]));
    }

    #[test]
    fn step_counter_counts_calls() {
        let env = make_task(&TaskSpec::linear(4, 1, 2, 0)).unwrap();
        let mut r = rng_from_seed(0);
        for _ in 0..3 {
            env.step(Array2::zeros((4, 1)).view(), Array2::zeros((1, 1)).view(), &mut r).unwrap();
        }
        assert_eq!(env.step_calls(), 3);
        assert_eq!(env.clone().step_calls(), 0);
    }
}
