//! C interface to the costate library.
//!
//! Batches cross the boundary as flat `double` buffers holding `n` samples
//! back to back, each sample contiguous. Every fallible call returns a
//! [`CsStatus`]; on failure [`cs_last_error`] describes what went wrong on
//! the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use costate::envgen::{make_task, Environment, TaskSpec};
use costate::harness::{run_block, write_block, PolicyCheckpoint, RunConfig};
use costate::nn::{param_count, Activation, MlpNet, MlpSpec};
use costate::rng::{rng_from_seed, SimRng};
use costate::Error;
use ndarray::{Array2, ArrayView2, ShapeBuilder};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    NonFinite = 4,
    Io = 5,
    Checkpoint = 6,
    Config = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsActivation {
    Relu = 0,
    Tanh = 1,
    Linear = 2,
}

/// A generated task plus the noise stream used by [`cs_env_step`].
pub struct CsEnv {
    env: Environment,
    rng: SimRng,
}

/// A feed-forward network.
pub struct CsMlp {
    net: MlpNet,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> CsStatus {
    match err {
        Error::Shape { .. } | Error::StaleCache => CsStatus::Shape,
        Error::NonFinite(_) | Error::Divergence { .. } => CsStatus::NonFinite,
        Error::Io(_) => CsStatus::Io,
        Error::Checkpoint(_) | Error::Json(_) => CsStatus::Checkpoint,
        Error::Config(_) | Error::Infeasible(_) => CsStatus::Config,
        Error::InvalidSpec(_) | Error::InvalidTask(_) => CsStatus::InvalidArgument,
    }
}

struct Fail(CsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CsStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CsStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(CsStatus::NullPointer, format!("{what} is null"))
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    unsafe { p.as_ref() }.ok_or_else(|| null(what))
}

unsafe fn as_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    unsafe { p.as_mut() }.ok_or_else(|| null(what))
}

unsafe fn batch<'a>(p: *const f64, dim: usize, n: usize, what: &str) -> Result<ArrayView2<'a, f64>, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let data = unsafe { std::slice::from_raw_parts(p, dim * n) };
    ArrayView2::from_shape((dim, n).f(), data).map_err(|e| Fail(CsStatus::Shape, format!("{what}: {e}")))
}

unsafe fn write_batch(out: *mut f64, values: &Array2<f64>) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output buffer"));
    }
    let dst = unsafe { std::slice::from_raw_parts_mut(out, values.len()) };
    for (d, v) in dst.iter_mut().zip(values.t().iter()) {
        *d = *v;
    }
    Ok(())
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Fail(CsStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// Message for the most recent failure on this thread. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn cs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Parameter count of a relu network with the given layer sizes.
/// Returns 0 when the sizes are invalid.
///
/// # Safety
/// `sizes` must point to `n_layers` values.
#[no_mangle]
pub unsafe extern "C" fn cs_param_count(sizes: *const usize, n_layers: usize) -> usize {
    if sizes.is_null() {
        return 0;
    }
    let sizes = unsafe { std::slice::from_raw_parts(sizes, n_layers) }.to_vec();
    MlpSpec::relu(sizes, Activation::Linear).map(|s| param_count(&s)).unwrap_or(0)
}

/// Generates a linear task. `seed` drives both the task and the noise stream.
///
/// # Safety
/// `out` must be a valid pointer to write the handle to.
#[no_mangle]
pub unsafe extern "C" fn cs_env_new(
    n_s: usize,
    n_c: usize,
    n_cost: usize,
    noise_sigma: f64,
    seed: u64,
    out: *mut *mut CsEnv,
) -> CsStatus {
    guard(|| {
        let out = unsafe { as_mut(out, "out") }?;
        let spec = TaskSpec { noise_sigma, ..TaskSpec::linear(n_s, n_c, n_cost, seed) };
        let env = make_task(&spec)?;
        *out = Box::into_raw(Box::new(CsEnv { env, rng: rng_from_seed(seed ^ 0x9e37_79b9_7f4a_7c15) }));
        Ok(())
    })
}

/// # Safety
/// `env` must come from [`cs_env_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cs_env_free(env: *mut CsEnv) {
    if !env.is_null() {
        drop(unsafe { Box::from_raw(env) });
    }
}

/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cs_env_dims(env: *const CsEnv, n_s: *mut usize, n_a: *mut usize) -> CsStatus {
    guard(|| {
        let env = unsafe { as_ref(env, "env") }?;
        *unsafe { as_mut(n_s, "n_s") }? = env.env.n_s();
        *unsafe { as_mut(n_a, "n_a") }? = env.env.n_a();
        Ok(())
    })
}

/// Advances `n` states by one Euler step. Buffers hold `n·n_s` states,
/// `n·n_a` actions and `n·n_s` outputs.
///
/// # Safety
/// Buffers must have the sizes above.
#[no_mangle]
pub unsafe extern "C" fn cs_env_step(
    env: *mut CsEnv,
    states: *const f64,
    actions: *const f64,
    n: usize,
    out: *mut f64,
) -> CsStatus {
    guard(|| {
        let env = unsafe { as_mut(env, "env") }?;
        let s = unsafe { batch(states, env.env.n_s(), n, "states") }?;
        let a = unsafe { batch(actions, env.env.n_a(), n, "actions") }?;
        let next = env.env.step(s, a, &mut env.rng)?;
        unsafe { write_batch(out, &next) }
    })
}

/// Cost rate c(s) of `n` states, one value per state.
///
/// # Safety
/// `states` holds `n·n_s` values and `out` has room for `n`.
#[no_mangle]
pub unsafe extern "C" fn cs_env_cost_rate(env: *const CsEnv, states: *const f64, n: usize, out: *mut f64) -> CsStatus {
    guard(|| {
        let env = unsafe { as_ref(env, "env") }?;
        let s = unsafe { batch(states, env.env.n_s(), n, "states") }?;
        let c = env.env.cost_rate(s)?;
        unsafe { write_batch(out, &c.insert_axis(ndarray::Axis(0))) }
    })
}

/// Glorot-initialized network with relu hidden layers.
///
/// # Safety
/// `sizes` holds `n_layers` values and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cs_mlp_new(
    sizes: *const usize,
    n_layers: usize,
    output: CsActivation,
    seed: u64,
    out: *mut *mut CsMlp,
) -> CsStatus {
    guard(|| {
        let out = unsafe { as_mut(out, "out") }?;
        if sizes.is_null() {
            return Err(null("sizes"));
        }
        let sizes = unsafe { std::slice::from_raw_parts(sizes, n_layers) }.to_vec();
        let act = match output {
            CsActivation::Relu => Activation::Relu,
            CsActivation::Tanh => Activation::Tanh,
            CsActivation::Linear => Activation::Linear,
        };
        let net = MlpNet::new(MlpSpec::relu(sizes, act)?, &mut rng_from_seed(seed))?;
        *out = Box::into_raw(Box::new(CsMlp { net }));
        Ok(())
    })
}

/// Loads a network checkpoint, or the policy inside a policy checkpoint.
///
/// # Safety
/// `path` is a NUL-terminated string and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cs_mlp_load(path: *const c_char, out: *mut *mut CsMlp) -> CsStatus {
    guard(|| {
        let out = unsafe { as_mut(out, "out") }?;
        let path = unsafe { path_arg(path, "path") }?;
        let net = match MlpNet::load(&path) {
            Ok(net) => net,
            Err(first) => PolicyCheckpoint::load(&path).map(|c| c.policy).map_err(|_| first)?,
        };
        *out = Box::into_raw(Box::new(CsMlp { net }));
        Ok(())
    })
}

/// # Safety
/// `net` is a valid handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cs_mlp_save(net: *const CsMlp, path: *const c_char) -> CsStatus {
    guard(|| {
        let net = unsafe { as_ref(net, "net") }?;
        net.net.save(&unsafe { path_arg(path, "path") }?)?;
        Ok(())
    })
}

/// # Safety
/// `net` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cs_mlp_free(net: *mut CsMlp) {
    if !net.is_null() {
        drop(unsafe { Box::from_raw(net) });
    }
}

/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cs_mlp_dims(
    net: *const CsMlp,
    input: *mut usize,
    output: *mut usize,
    params: *mut usize,
) -> CsStatus {
    guard(|| {
        let net = unsafe { as_ref(net, "net") }?;
        *unsafe { as_mut(input, "input") }? = net.net.spec().input_dim();
        *unsafe { as_mut(output, "output") }? = net.net.spec().output_dim();
        *unsafe { as_mut(params, "params") }? = net.net.param_count();
        Ok(())
    })
}

/// Evaluates `n` inputs. `out` receives `n·output_dim` values.
///
/// # Safety
/// Buffers must match the network dimensions.
#[no_mangle]
pub unsafe extern "C" fn cs_mlp_forward(net: *const CsMlp, x: *const f64, n: usize, out: *mut f64) -> CsStatus {
    guard(|| {
        let net = unsafe { as_ref(net, "net") }?;
        let x = unsafe { batch(x, net.net.spec().input_dim(), n, "x") }?;
        let (y, _) = net.net.forward(x)?;
        unsafe { write_batch(out, &y) }
    })
}

/// Runs the block described by a TOML config and writes its outputs to
/// `out_dir`, or to the config's own output directory when `out_dir` is null.
///
/// # Safety
/// `config_path` is a NUL-terminated string; `out_dir` is null or one.
#[no_mangle]
pub unsafe extern "C" fn cs_run_block(config_path: *const c_char, out_dir: *const c_char) -> CsStatus {
    guard(|| {
        let (cfg, text) = RunConfig::load(&unsafe { path_arg(config_path, "config_path") }?)?;
        let dir = if out_dir.is_null() {
            cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name))
        } else {
            unsafe { path_arg(out_dir, "out_dir") }?
        };
        let outcome = run_block(&cfg)?;
        write_block(&dir, &outcome, &text)?;
        Ok(())
    })
}
