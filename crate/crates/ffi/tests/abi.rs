use std::ffi::{CStr, CString};
use std::ptr;

use dspib_core::diffusion::ScoreNet;
use dspib_core::featurize::FeatureConfig;
use dspib_core::spib::{SpibModel, StateBook};
use dspib_core::trainer::{rng_stream, TrainConfig, TrainReport, Trained};
use dspib_core::{ModelBundle, SystemKind};
use dspib_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(dspib_last_error()) }.to_string_lossy().into_owned()
}

fn tiny_bundle(dir: &std::path::Path) -> CString {
    let mut cfg = TrainConfig::for_system(SystemKind::ThreeHole);
    cfg.score_hidden = 8;
    cfg.score_layers = 3;
    cfg.decoder_hidden = vec![4];
    let mut rng = rng_stream(5, 0);
    let trained = Trained {
        model: SpibModel::new(2, 2, &cfg.decoder_hidden, 3, &mut rng),
        score: ScoreNet::new(cfg.score_config(), &mut rng).unwrap(),
        schedule: cfg.schedule().unwrap(),
        book: StateBook::from_labels(&[0, 1, 2], 3),
        report: TrainReport::default(),
    };
    let bundle = ModelBundle::from_training(SystemKind::ThreeHole, FeatureConfig::default(), cfg, vec![1.0], trained);
    let path = dir.join("bundle.json");
    bundle.save(&path).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

#[test]
fn potential_matches_core() {
    let x = [0.3, -0.7];
    let mut e = 0.0;
    let mut g = [0.0; 2];
    unsafe {
        assert_eq!(dspib_potential_energy(DspibSystem::ThreeHole, x.as_ptr(), 2, &mut e), DspibStatus::Ok);
        assert_eq!(dspib_potential_gradient(DspibSystem::ThreeHole, x.as_ptr(), 2, g.as_mut_ptr()), DspibStatus::Ok);
    }
    assert_eq!(e, dspib_core::sim::three_hole(0.3, -0.7));
    assert!(g.iter().all(|v| v.is_finite()));
    assert_eq!(dspib_system_dim(DspibSystem::Lj7), 14);
}

#[test]
fn argument_errors_set_status_and_message() {
    let mut e = 0.0;
    let x = [0.0; 3];
    unsafe {
        assert_eq!(dspib_potential_energy(DspibSystem::ThreeHole, ptr::null(), 2, &mut e), DspibStatus::NullPointer);
        assert!(last_error().contains("coords"));
        assert_eq!(dspib_potential_energy(DspibSystem::ThreeHole, x.as_ptr(), 3, &mut e), DspibStatus::InvalidArgument);
        assert!(!last_error().is_empty());
        assert_eq!(dspib_potential_energy(DspibSystem::ThreeHole, x.as_ptr(), 2, &mut e), DspibStatus::Ok);
        assert_eq!(last_error(), "");
        let mut handle = ptr::null_mut();
        assert_eq!(dspib_simulate(DspibSystem::ThreeHole, -1.0, 10, 1, 0, &mut handle), DspibStatus::InvalidArgument);
        assert!(handle.is_null());
        let missing = CString::new("/nonexistent/traj.f32").unwrap();
        assert_eq!(dspib_trajectory_load(missing.as_ptr(), &mut handle), DspibStatus::Io);
        assert_eq!(dspib_trajectory_frames(ptr::null()), 0);
        dspib_trajectory_free(ptr::null_mut());
        dspib_bundle_free(ptr::null_mut());
    }
}

#[test]
fn trajectory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("t.f32").to_str().unwrap()).unwrap();
    unsafe {
        let mut t = ptr::null_mut();
        assert_eq!(dspib_simulate(DspibSystem::ThreeHole, 1.0, 1000, 10, 3, &mut t), DspibStatus::Ok);
        let (n, d) = (dspib_trajectory_frames(t), dspib_trajectory_dim(t));
        assert_eq!((n, d), (100, 2));
        let mut small = vec![0f32; n * d - 1];
        assert_eq!(dspib_trajectory_copy(t, small.as_mut_ptr(), small.len()), DspibStatus::BufferTooSmall);
        let mut a = vec![0f32; n * d];
        assert_eq!(dspib_trajectory_copy(t, a.as_mut_ptr(), a.len()), DspibStatus::Ok);
        assert_eq!(dspib_trajectory_save(t, path.as_ptr()), DspibStatus::Ok);
        dspib_trajectory_free(t);

        let mut u = ptr::null_mut();
        assert_eq!(dspib_trajectory_load(path.as_ptr(), &mut u), DspibStatus::Ok);
        let mut b = vec![0f32; n * d];
        assert_eq!(dspib_trajectory_copy(u, b.as_mut_ptr(), b.len()), DspibStatus::Ok);
        assert_eq!(a, b);
        dspib_trajectory_free(u);
    }
}

#[test]
fn bundle_encode_and_sample() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_bundle(dir.path());
    unsafe {
        let mut b = ptr::null_mut();
        assert_eq!(dspib_bundle_load(path.as_ptr(), &mut b), DspibStatus::Ok);
        assert_eq!(dspib_bundle_latent_dim(b), 2);
        assert_eq!(dspib_bundle_num_states(b), 3);

        let mut t = ptr::null_mut();
        assert_eq!(dspib_simulate(DspibSystem::ThreeHole, 1.0, 200, 10, 1, &mut t), DspibStatus::Ok);
        let mut z = vec![0.0; 20 * 2];
        assert_eq!(dspib_bundle_encode(b, t, z.as_mut_ptr(), z.len()), DspibStatus::Ok);
        assert!(z.iter().all(|v| v.is_finite()));
        dspib_trajectory_free(t);

        let mut s1 = vec![0.0; 50 * 2];
        let mut s2 = vec![0.0; 50 * 2];
        assert_eq!(dspib_bundle_sample(b, 50, f64::NAN, 9, s1.as_mut_ptr(), s1.len()), DspibStatus::Ok);
        assert_eq!(dspib_bundle_sample(b, 50, f64::NAN, 9, s2.as_mut_ptr(), s2.len()), DspibStatus::Ok);
        assert_eq!(s1, s2);
        assert_eq!(dspib_bundle_sample(b, 51, f64::NAN, 9, s1.as_mut_ptr(), s1.len()), DspibStatus::BufferTooSmall);
        dspib_bundle_free(b);
    }
}

#[test]
fn kl_is_zero_on_identical_sets_and_symmetric() {
    let p: Vec<f64> = (0..200).map(|i| ((i * 37) % 101) as f64 / 10.0).collect();
    let q: Vec<f64> = (0..200).map(|i| ((i * 53) % 97) as f64 / 8.0).collect();
    let (mut same, mut pq, mut qp) = (1.0, 0.0, 0.0);
    unsafe {
        assert_eq!(dspib_symmetrized_kl(p.as_ptr(), 100, p.as_ptr(), 100, 2, 10, &mut same), DspibStatus::Ok);
        assert_eq!(dspib_symmetrized_kl(p.as_ptr(), 100, q.as_ptr(), 100, 2, 10, &mut pq), DspibStatus::Ok);
        assert_eq!(dspib_symmetrized_kl(q.as_ptr(), 100, p.as_ptr(), 100, 2, 10, &mut qp), DspibStatus::Ok);
        assert_eq!(dspib_symmetrized_kl(p.as_ptr(), 100, q.as_ptr(), 100, 2, 0, &mut qp), DspibStatus::InvalidArgument);
    }
    assert_eq!(same, 0.0);
    assert!(pq > 0.0);
    assert_eq!(pq, qp);
}

/// The generated header must be valid C.
#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/dspib.h");
    let Ok(status) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header])
        .status()
    else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    assert!(status.success());
}
