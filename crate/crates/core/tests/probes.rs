//! Landscape probes on a short-file root, where the side view of the root is
//! not much longer than it is wide.

use cortrack::baselines::{finite_diff_hessian, projected_gradient_descent};
use cortrack::ga::{fitness, optimize_plane, GaConfig};
use cortrack::synth::{generate, preset, SyntheticConfig};
use cortrack::{FrameCloud, ProjectionPlane, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn short_root(seed: u64) -> FrameCloud {
    let cfg = SyntheticConfig {
        nuclei_per_file_init: 6,
        stagger_um: 5.0,
        num_frames: 1,
        ..preset("bent_rotating").unwrap()
    }
    .with_seed(seed);
    let (mut ds, _) = generate(&cfg).unwrap();
    ds.frames.swap_remove(0)
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n <= 1.0 && n > 1e-3 {
            return v / n;
        }
    }
}

#[test]
fn pgd_reaches_distinct_minima_on_short_files() {
    for seed in 0..2 {
        let frame = short_root(seed);
        let pts = frame.positions();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let finals: Vec<f64> = (0..20)
            .map(|_| {
                let start = ProjectionPlane::new(random_unit(&mut rng)).unwrap();
                projected_gradient_descent(&pts, &start, 0.05, 3000).unwrap().fitness
            })
            .collect();
        let lo = finals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = finals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(hi - lo > 1e-3, "seed {seed}: spread {}", hi - lo);

        let ga = optimize_plane(
            &frame,
            &GaConfig {
                rng_seed: seed,
                ..GaConfig::default()
            },
        )
        .unwrap();
        assert!((fitness(&pts, &ga.best_plane).unwrap() - ga.best_fitness).abs() < 1e-9);
        assert!(
            ga.best_fitness <= lo + 1e-3,
            "seed {seed}: GA {} worse than best PGD {lo}",
            ga.best_fitness
        );
    }
}

#[test]
fn hessian_is_symmetric_at_ga_optimum() {
    let frame = short_root(0);
    let res = optimize_plane(&frame, &GaConfig::default()).unwrap();
    let probe = finite_diff_hessian(&frame.positions(), &res.best_plane, 1e-4).unwrap();
    assert!(probe.asymmetry < 1e-6, "{}", probe.asymmetry);
    assert!(probe.eigenvalues.iter().all(|e| e.is_finite()));
}
