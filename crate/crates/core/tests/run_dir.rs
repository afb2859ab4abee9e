use std::fs;

use cortrack::clustering::{CorrectionSet, KMeansConfig};
use cortrack::ga::GaConfig;
use cortrack::pipeline::{
    files, persist_run, replay_run, run_downstream, run_pipeline, PipelineConfig, RunInputs, RunManifest, RunState,
};
use cortrack::synth::{generate, preset, SyntheticConfig};

fn config() -> PipelineConfig {
    PipelineConfig {
        seed: 11,
        ga: GaConfig {
            population_size: 200,
            ..GaConfig::default()
        },
        kmeans: KMeansConfig {
            n_init: 100,
            ..KMeansConfig::default()
        },
    }
}

fn small_dividing() -> SyntheticConfig {
    SyntheticConfig {
        num_frames: 8,
        nuclei_per_file_init: 8,
        division_prob_per_frame: 0.1,
        ..preset("dividing").unwrap()
    }
    .with_seed(4)
}

#[test]
fn persisted_run_reloads_and_replays_identically() {
    let synth = small_dividing();
    let (ds, truth) = generate(&synth).unwrap();
    let cfg = config();
    let out = run_pipeline(&ds, &cfg, None, Some(&truth)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let manifest = persist_run(
        dir.path(),
        &cfg,
        RunInputs {
            dataset: &ds,
            corrections: None,
            truth: Some(&truth),
            synth: Some(&synth),
        },
        &out,
    )
    .unwrap();
    assert!(manifest.verify(dir.path()).unwrap().is_empty());
    assert_eq!(RunManifest::load(dir.path()).unwrap(), manifest);

    let state = RunState::load(dir.path()).unwrap();
    assert_eq!(state.dataset, ds);
    assert_eq!(state.raw, out.raw);
    assert_eq!(state.plane_list(), out.plane_list());
    assert_eq!(state.truth.as_ref(), Some(&truth));

    let again = tempfile::tempdir().unwrap();
    let replayed = replay_run(dir.path(), again.path()).unwrap();
    assert_eq!(replayed, manifest);
    for e in manifest.inputs.values().chain(manifest.outputs.values()) {
        let a = fs::read(dir.path().join(&e.path)).unwrap();
        let b = fs::read(again.path().join(&e.path)).unwrap();
        assert_eq!(a, b, "{} differs on replay", e.path);
    }
}

#[test]
fn tampered_stage_is_reported_by_manifest() {
    let synth = SyntheticConfig {
        num_frames: 3,
        ..small_dividing()
    };
    let (ds, _) = generate(&synth).unwrap();
    let cfg = config();
    let out = run_pipeline(&ds, &cfg, None, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let inputs = RunInputs {
        dataset: &ds,
        corrections: None,
        truth: None,
        synth: None,
    };
    let manifest = persist_run(dir.path(), &cfg, inputs, &out).unwrap();
    let path = dir.path().join(files::FOREST);
    let mut bytes = fs::read(&path).unwrap();
    bytes.push(b' ');
    fs::write(&path, bytes).unwrap();
    assert_eq!(manifest.verify(dir.path()).unwrap(), vec!["forest".to_owned()]);
}

#[test]
fn rerun_with_oracle_corrections_reaches_truth() {
    let synth = SyntheticConfig {
        num_frames: 10,
        ..preset("bent_rotating").unwrap()
    }
    .with_seed(2);
    let (ds, truth) = generate(&synth).unwrap();
    // Default K-means: a few frames may be mislabelled before correction.
    let cfg = PipelineConfig {
        kmeans: KMeansConfig::default(),
        ..config()
    };
    let out = run_pipeline(&ds, &cfg, None, Some(&truth)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let inputs = RunInputs {
        dataset: &ds,
        corrections: None,
        truth: Some(&truth),
        synth: Some(&synth),
    };
    persist_run(dir.path(), &cfg, inputs, &out).unwrap();

    let mut state = RunState::load(dir.path()).unwrap();
    let oracle = truth.oracle_corrections(&state.raw).unwrap();
    let d = state.rerun_with(oracle.clone()).unwrap();
    let m = d.metrics.unwrap();
    assert!(m.is_perfect(), "{m:?}");
    assert!(d.report.is_clean());
    assert_eq!(d.report.forest, truth.forest().unwrap());

    // The manifest on disk matches the refreshed stage files.
    let reloaded = RunState::load(dir.path()).unwrap();
    assert_eq!(reloaded.corrections, oracle);
    assert!(reloaded.manifest.verify(dir.path()).unwrap().is_empty());

    // Clearing corrections restores the uncorrected result.
    let cleared = state.rerun_with(CorrectionSet::default()).unwrap();
    assert_eq!(cleared.report.forest, out.downstream.report.forest);
}

#[test]
fn injected_label_errors_are_fixed_by_corrections() {
    let synth = SyntheticConfig {
        num_frames: 10,
        ..preset("bent_rotating").unwrap()
    }
    .with_seed(1);
    let (ds, truth) = generate(&synth).unwrap();
    let out = run_pipeline(&ds, &config(), None, Some(&truth)).unwrap();
    let planes = out.plane_list();

    // Move three nuclei per damaged frame into a neighbouring file.
    let mut damaged = out.raw.clone();
    for t in [2, 5, 7] {
        let ids: Vec<_> = ds.frames[t].nuclei.iter().take(3).map(|n| n.id.clone()).collect();
        for id in ids {
            let l = damaged[t].labels.get_mut(&id).unwrap();
            *l = (*l + 1) % 8;
        }
    }
    let broken = run_downstream(&ds, &planes, &damaged, None, Some(&truth)).unwrap();
    assert!(!broken.metrics.unwrap().is_perfect());

    let fixes: CorrectionSet = truth.oracle_corrections(&damaged).unwrap();
    assert!(!fixes.is_empty());
    let fixed = run_downstream(&ds, &planes, &damaged, Some(&fixes), Some(&truth)).unwrap();
    let m = fixed.metrics.unwrap();
    assert_eq!((m.precision, m.recall), (1.0, 1.0), "{m:?}");
    assert!(fixed.report.is_clean());
}
