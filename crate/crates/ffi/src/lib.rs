//! C ABI over `dspib-core`.
//!
//! Every fallible call returns a [`DspibStatus`]; on failure the message is
//! available from [`dspib_last_error`] on the same thread until the next call.
//! Trajectories and model bundles are opaque handles released with their
//! `_free` function. Output buffers are caller-allocated and their length is
//! checked.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use dspib_core::eval::{self, Binning};
use dspib_core::sim::{self, potential_energy, potential_gradient};
use dspib_core::{featurize, io, Error, ModelBundle, PotentialSpec, SimulationConfig, SystemKind, Trajectory};
use ndarray::ArrayView2;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DspibStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Io = 4,
    Format = 5,
    Numerical = 6,
    Training = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DspibSystem {
    ThreeHole = 0,
    Lj7 = 1,
}

impl From<DspibSystem> for SystemKind {
    fn from(s: DspibSystem) -> Self {
        match s {
            DspibSystem::ThreeHole => SystemKind::ThreeHole,
            DspibSystem::Lj7 => SystemKind::Lj7,
        }
    }
}

/// Opaque recorded trajectory.
pub struct DspibTrajectory(Trajectory);

/// Opaque trained model bundle.
pub struct DspibBundle(ModelBundle);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> DspibStatus {
    match e {
        Error::Io { .. } => DspibStatus::Io,
        Error::Format { .. } | Error::Json(_) => DspibStatus::Format,
        Error::NonFiniteDynamics { .. }
        | Error::NonFinite(_)
        | Error::NonFiniteGradient { .. }
        | Error::NonFiniteSample { .. }
        | Error::Singularity { .. } => DspibStatus::Numerical,
        Error::StateCollapse { .. } | Error::Diverged { .. } => DspibStatus::Training,
        Error::Stage { source, .. } => status_of(source),
        _ => DspibStatus::InvalidArgument,
    }
}

struct Failure(DspibStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(DspibStatus::NullPointer, format!("`{what}` is null"))
}

/// Run `body`, translating errors and panics into a status code.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> DspibStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error(String::new());
            DspibStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            DspibStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn out_slice<'a, T>(ptr: *mut T, len: usize, needed: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len < needed {
        return Err(Failure(DspibStatus::BufferTooSmall, format!("`{what}` holds {len} values, {needed} needed")));
    }
    if needed == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(&mut std::slice::from_raw_parts_mut(ptr, len)[..needed])
}

unsafe fn path<'a>(ptr: *const c_char) -> Result<&'a Path, Failure> {
    if ptr.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Failure(DspibStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(Path::new(s))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread, or an empty string.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn dspib_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Number of coordinates of a configuration of `system`.
#[no_mangle]
pub extern "C" fn dspib_system_dim(system: DspibSystem) -> usize {
    SystemKind::from(system).dim()
}

/// Potential energy of one configuration with the default parameters.
///
/// # Safety
/// `coords` must point to `len` doubles and `energy` to one writable double.
#[no_mangle]
pub unsafe extern "C" fn dspib_potential_energy(
    system: DspibSystem,
    coords: *const f64,
    len: usize,
    energy: *mut f64,
) -> DspibStatus {
    guard(|| {
        let x = slice(coords, len, "coords")?;
        let out = out_slice(energy, 1, 1, "energy")?;
        out[0] = potential_energy(&PotentialSpec::for_system(system.into()), x)?;
        Ok(())
    })
}

/// Gradient of the potential; `grad` must hold `len` doubles.
///
/// # Safety
/// `coords` must point to `len` doubles and `grad` to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn dspib_potential_gradient(
    system: DspibSystem,
    coords: *const f64,
    len: usize,
    grad: *mut f64,
) -> DspibStatus {
    guard(|| {
        let x = slice(coords, len, "coords")?;
        let g = potential_gradient(&PotentialSpec::for_system(system.into()), x)?;
        out_slice(grad, len, g.len(), "grad")?.copy_from_slice(&g);
        Ok(())
    })
}

/// Run Langevin dynamics with the system's default settings except for the
/// given temperature, length, stride and seed.
///
/// # Safety
/// `out` must point to writable storage for one handle pointer.
#[no_mangle]
pub unsafe extern "C" fn dspib_simulate(
    system: DspibSystem,
    temperature: f64,
    n_steps: u64,
    record_stride: u64,
    seed: u64,
    out: *mut *mut DspibTrajectory,
) -> DspibStatus {
    guard(|| {
        let kind = SystemKind::from(system);
        let config = SimulationConfig {
            n_steps,
            record_stride,
            seed,
            ..SimulationConfig::for_system(kind, temperature)
        };
        let traj = sim::simulate(&PotentialSpec::for_system(kind), &config)?;
        put(out, DspibTrajectory(traj))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dspib_trajectory_load(path_: *const c_char, out: *mut *mut DspibTrajectory) -> DspibStatus {
    guard(|| {
        let traj = io::load_trajectory(path(path_)?)?;
        put(out, DspibTrajectory(traj))
    })
}

/// # Safety
/// `traj` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dspib_trajectory_save(traj: *const DspibTrajectory, path_: *const c_char) -> DspibStatus {
    guard(|| {
        let t = traj.as_ref().ok_or_else(|| null("traj"))?;
        io::save_trajectory(path(path_)?, &t.0)?;
        Ok(())
    })
}

/// Number of recorded frames, or 0 for a null handle.
///
/// # Safety
/// `traj` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dspib_trajectory_frames(traj: *const DspibTrajectory) -> usize {
    traj.as_ref().map_or(0, |t| t.0.n_frames())
}

/// Coordinates per frame, or 0 for a null handle.
///
/// # Safety
/// `traj` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dspib_trajectory_dim(traj: *const DspibTrajectory) -> usize {
    traj.as_ref().map_or(0, |t| t.0.dim)
}

/// Copy frames (row-major, frames x dim) into `out`.
///
/// # Safety
/// `traj` must be a live handle and `out` must point to `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn dspib_trajectory_copy(traj: *const DspibTrajectory, out: *mut f32, len: usize) -> DspibStatus {
    guard(|| {
        let t = traj.as_ref().ok_or_else(|| null("traj"))?;
        out_slice(out, len, t.0.frames.len(), "out")?.copy_from_slice(&t.0.frames);
        Ok(())
    })
}

/// # Safety
/// `traj` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dspib_trajectory_free(traj: *mut DspibTrajectory) {
    if !traj.is_null() {
        drop(Box::from_raw(traj));
    }
}

/// Load a model bundle from its JSON manifest path.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dspib_bundle_load(path_: *const c_char, out: *mut *mut DspibBundle) -> DspibStatus {
    guard(|| {
        let b = ModelBundle::load(path(path_)?)?;
        put(out, DspibBundle(b))
    })
}

/// Latent dimension, or 0 for a null handle.
///
/// # Safety
/// `bundle` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dspib_bundle_latent_dim(bundle: *const DspibBundle) -> usize {
    bundle.as_ref().map_or(0, |b| b.0.latent_dim())
}

/// Number of active metastable states, or 0 for a null handle.
///
/// # Safety
/// `bundle` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dspib_bundle_num_states(bundle: *const DspibBundle) -> usize {
    bundle.as_ref().map_or(0, |b| b.0.num_states())
}

/// Deterministic encoder means of every frame (frames x latent_dim).
///
/// # Safety
/// Handles must be live and `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn dspib_bundle_encode(
    bundle: *const DspibBundle,
    traj: *const DspibTrajectory,
    out: *mut f64,
    len: usize,
) -> DspibStatus {
    guard(|| {
        let b = bundle.as_ref().ok_or_else(|| null("bundle"))?;
        let t = traj.as_ref().ok_or_else(|| null("traj"))?;
        let features = featurize::extract_features(&t.0, &b.0.feature_config)?;
        let z = b.0.encode(features.view())?;
        let dst = out_slice(out, len, z.len(), "out")?;
        dst.iter_mut().zip(z.iter()).for_each(|(d, s)| *d = *s);
        Ok(())
    })
}

/// Draw `count` latents from the learned prior (count x latent_dim).
/// Pass NaN as `temperature` to use the bundle's own default.
///
/// # Safety
/// `bundle` must be live and `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn dspib_bundle_sample(
    bundle: *const DspibBundle,
    count: usize,
    temperature: f64,
    seed: u64,
    out: *mut f64,
    len: usize,
) -> DspibStatus {
    guard(|| {
        let b = bundle.as_ref().ok_or_else(|| null("bundle"))?;
        let dst = out_slice(out, len, count * b.0.latent_dim(), "out")?;
        let t = (!temperature.is_nan()).then_some(temperature);
        let z = b.0.sample(count, t, seed)?;
        dst.iter_mut().zip(z.iter()).for_each(|(d, s)| *d = *s);
        Ok(())
    })
}

/// # Safety
/// `bundle` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dspib_bundle_free(bundle: *mut DspibBundle) {
    if !bundle.is_null() {
        drop(Box::from_raw(bundle));
    }
}

/// Symmetrized KL divergence between histograms of two point sets
/// (row-major, `dim` columns), binned on `bins` per axis over their padded
/// common bounding box.
///
/// # Safety
/// `p` and `q` must point to `n_p * dim` and `n_q * dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn dspib_symmetrized_kl(
    p: *const f64,
    n_p: usize,
    q: *const f64,
    n_q: usize,
    dim: usize,
    bins: usize,
    out: *mut f64,
) -> DspibStatus {
    guard(|| {
        let a = ArrayView2::from_shape((n_p, dim), slice(p, n_p * dim, "p")?)
            .map_err(|e| Failure(DspibStatus::InvalidArgument, e.to_string()))?;
        let b = ArrayView2::from_shape((n_q, dim), slice(q, n_q * dim, "q")?)
            .map_err(|e| Failure(DspibStatus::InvalidArgument, e.to_string()))?;
        let binning = Binning::covering(&[a, b], bins, eval::DEFAULT_PADDING)?;
        out_slice(out, 1, 1, "out")?[0] = eval::kl_between(a, b, &binning)?;
        Ok(())
    })
}
