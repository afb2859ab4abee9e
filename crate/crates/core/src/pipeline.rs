//! End-to-end run: plane search, clustering, corrections, file matching,
//! label propagation, nucleus linking and scoring, with every stage output
//! persisted under one run directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{apply_corrections, cluster_frame, CorrectionSet, FileAssignment, KMeansConfig};
use crate::error::{Error, Result};
use crate::evaluation::{compare_links, forest_links, TrackingMetrics};
use crate::ga::{optimize_plane, GaConfig};
use crate::io::{self, DiagnosticDoc, PlaneDoc, FORMAT_VERSION};
use crate::lineage::{track_dataset, TrackingReport};
use crate::lines::{match_files, propagate_labels, select_representatives, FileCorrespondence, RepresentativeSet};
use crate::model::{Dataset, ProjectionPlane};
use crate::synth::{GroundTruth, SyntheticConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Base seed; per-frame GA and K-means seeds are derived from it.
    pub seed: u64,
    pub ga: GaConfig,
    pub kmeans: KMeansConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.ga.validate()?;
        self.kmeans.validate()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for one frame.
pub fn frame_seed(seed: u64, frame: usize) -> u64 {
    splitmix64(splitmix64(seed) ^ frame as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FramePlane {
    pub frame: usize,
    pub plane: ProjectionPlane,
    pub fitness: f64,
    pub generations: usize,
}

pub fn project_frames(dataset: &Dataset, config: &PipelineConfig) -> Result<Vec<FramePlane>> {
    dataset
        .frames
        .par_iter()
        .map(|f| {
            let ga = GaConfig {
                rng_seed: frame_seed(config.seed, f.frame_index),
                ..config.ga.clone()
            };
            let r = optimize_plane(f, &ga).map_err(|e| e.in_stage("project", Some(f.frame_index)))?;
            log::debug!(
                "frame {}: fitness {:.4} after {} generations",
                f.frame_index,
                r.best_fitness,
                r.generations_run
            );
            Ok(FramePlane {
                frame: f.frame_index,
                plane: r.best_plane,
                fitness: r.best_fitness,
                generations: r.generations_run,
            })
        })
        .collect()
}

pub fn cluster_frames(
    dataset: &Dataset,
    planes: &[ProjectionPlane],
    config: &PipelineConfig,
) -> Result<Vec<FileAssignment>> {
    check_len(dataset, planes.len(), "planes")?;
    dataset
        .frames
        .par_iter()
        .zip(planes)
        .map(|(f, p)| {
            let km = KMeansConfig {
                rng_seed: frame_seed(config.seed ^ 0x6B6D_6561_6E73, f.frame_index),
                ..config.kmeans.clone()
            };
            cluster_frame(f, p, &km).map_err(|e| e.in_stage("cluster", Some(f.frame_index)))
        })
        .collect()
}

fn check_len(dataset: &Dataset, n: usize, what: &str) -> Result<()> {
    if n != dataset.num_frames() {
        return Err(Error::DegenerateInput(format!(
            "{n} {what} for {} frames",
            dataset.num_frames()
        )));
    }
    Ok(())
}

/// Everything computed after clustering.
#[derive(Debug, Clone)]
pub struct Downstream {
    pub corrected: Vec<FileAssignment>,
    pub representatives: Vec<RepresentativeSet>,
    pub correspondences: Vec<FileCorrespondence>,
    /// Labels consistent across frames.
    pub global: Vec<FileAssignment>,
    pub report: TrackingReport,
    pub metrics: Option<TrackingMetrics>,
}

pub fn run_downstream(
    dataset: &Dataset,
    planes: &[ProjectionPlane],
    raw: &[FileAssignment],
    corrections: Option<&CorrectionSet>,
    truth: Option<&GroundTruth>,
) -> Result<Downstream> {
    check_len(dataset, planes.len(), "planes")?;
    check_len(dataset, raw.len(), "assignments")?;
    let empty = CorrectionSet::default();
    let corrections = corrections.unwrap_or(&empty);

    let mut corrected = Vec::with_capacity(raw.len());
    let mut representatives = Vec::with_capacity(raw.len());
    for ((f, a), p) in dataset.frames.iter().zip(raw).zip(planes) {
        let c = apply_corrections(a, corrections, f, p).map_err(|e| e.in_stage("corrections", Some(f.frame_index)))?;
        representatives
            .push(select_representatives(f, &c).map_err(|e| e.in_stage("representatives", Some(f.frame_index)))?);
        corrected.push(c);
    }
    if let Some(c) = corrections.entries().iter().find(|c| c.frame >= dataset.num_frames()) {
        return Err(Error::UnknownNucleus {
            frame: c.frame,
            id: c.id.clone(),
        }
        .in_stage("corrections", Some(c.frame)));
    }

    let correspondences = (0..dataset.num_frames().saturating_sub(1))
        .map(|t| {
            match_files(&representatives[t], &representatives[t + 1], &planes[t], &planes[t + 1])
                .map_err(|e| e.in_stage("lines", Some(t)))
        })
        .collect::<Result<Vec<_>>>()?;
    let global = propagate_labels(&corrected, &correspondences).map_err(|e| e.in_stage("propagate", None))?;
    let report = track_dataset(dataset, &global).map_err(|e| e.in_stage("track", None))?;
    for e in &report.errors {
        log::warn!("{e}");
    }
    let metrics = truth
        .map(|t| compare_links(&forest_links(&report.forest), &t.links()))
        .transpose()
        .map_err(|e| e.in_stage("evaluate", None))?;
    Ok(Downstream {
        corrected,
        representatives,
        correspondences,
        global,
        report,
        metrics,
    })
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub planes: Vec<FramePlane>,
    pub raw: Vec<FileAssignment>,
    pub downstream: Downstream,
}

impl PipelineOutput {
    pub fn plane_list(&self) -> Vec<ProjectionPlane> {
        self.planes.iter().map(|p| p.plane).collect()
    }
}

pub fn run_pipeline(
    dataset: &Dataset,
    config: &PipelineConfig,
    corrections: Option<&CorrectionSet>,
    truth: Option<&GroundTruth>,
) -> Result<PipelineOutput> {
    config.validate()?;
    let planes = project_frames(dataset, config)?;
    let plane_list: Vec<ProjectionPlane> = planes.iter().map(|p| p.plane).collect();
    let raw = cluster_frames(dataset, &plane_list, config)?;
    let downstream = run_downstream(dataset, &plane_list, &raw, corrections, truth)?;
    log::info!(
        "{} frames tracked: {} links, {} reconciliation errors",
        dataset.num_frames(),
        downstream.report.forest.edges().len(),
        downstream.report.errors.len()
    );
    Ok(PipelineOutput {
        planes,
        raw,
        downstream,
    })
}

/// Stage file names inside a run directory.
pub mod files {
    pub const DATASET: &str = "dataset.csv";
    pub const CORRECTIONS: &str = "corrections.json";
    pub const TRUTH: &str = "truth.json";
    pub const PLANES: &str = "planes.json";
    pub const ASSIGNMENTS: &str = "assignments.json";
    pub const CORRECTED: &str = "corrected_assignments.json";
    pub const CORRESPONDENCES: &str = "correspondences.json";
    pub const GLOBAL: &str = "global_assignments.json";
    pub const FOREST: &str = "forest.json";
    pub const DIAGNOSTICS: &str = "diagnostics.json";
    pub const METRICS: &str = "metrics.json";
    pub const MANIFEST: &str = "manifest.json";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneRecord {
    pub frame: usize,
    pub plane: PlaneDoc,
    pub fitness: f64,
    pub generations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanesDoc {
    pub version: u32,
    pub planes: Vec<PlaneRecord>,
}

pub fn save_planes(path: &Path, planes: &[FramePlane]) -> Result<()> {
    io::write_json(path, &planes_doc(planes))
}

fn planes_doc(planes: &[FramePlane]) -> PlanesDoc {
    PlanesDoc {
        version: FORMAT_VERSION,
        planes: planes
            .iter()
            .map(|p| PlaneRecord {
                frame: p.frame,
                plane: (&p.plane).into(),
                fitness: p.fitness,
                generations: p.generations,
            })
            .collect(),
    }
}

pub fn load_planes(path: &Path) -> Result<Vec<FramePlane>> {
    let d: PlanesDoc = io::read_json(path)?;
    if d.version != FORMAT_VERSION {
        return Err(Error::Schema(format!("planes: unsupported version {}", d.version)));
    }
    d.planes
        .into_iter()
        .map(|r| {
            Ok(FramePlane {
                frame: r.frame,
                plane: r.plane.to_plane()?,
                fitness: r.fitness,
                generations: r.generations,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to reproduce a run, and fingerprints of what it wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub config: PipelineConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SyntheticConfig>,
    pub inputs: BTreeMap<String, FileEntry>,
    pub outputs: BTreeMap<String, FileEntry>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let m: RunManifest = io::read_json(&dir.join(files::MANIFEST))?;
        if m.version != FORMAT_VERSION {
            return Err(Error::Schema(format!("manifest: unsupported version {}", m.version)));
        }
        Ok(m)
    }

    fn record(map: &mut BTreeMap<String, FileEntry>, stage: &str, name: &str, bytes: &[u8]) {
        map.insert(
            stage.to_owned(),
            FileEntry {
                path: name.to_owned(),
                sha256: io::sha256_hex(bytes),
            },
        );
    }

    /// Stages whose file on disk no longer matches the recorded checksum.
    pub fn verify(&self, dir: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for (stage, e) in self.inputs.iter().chain(&self.outputs) {
            let ok = fs::read(dir.join(&e.path))
                .map(|b| io::sha256_hex(&b) == e.sha256)
                .unwrap_or(false);
            if !ok {
                bad.push(stage.clone());
            }
        }
        Ok(bad)
    }
}

fn put(dir: &Path, map: &mut BTreeMap<String, FileEntry>, stage: &str, name: &str, bytes: Vec<u8>) -> Result<()> {
    io::write_atomic(&dir.join(name), &bytes)?;
    RunManifest::record(map, stage, name, &bytes);
    Ok(())
}

fn assignment_bytes(asg: &[FileAssignment], planes: &[ProjectionPlane]) -> Result<Vec<u8>> {
    let docs: Vec<io::AssignmentDoc> = asg
        .iter()
        .zip(planes)
        .map(|(a, p)| io::AssignmentDoc::new(a, p))
        .collect();
    io::to_json_bytes(&docs)
}

/// Writes the post-clustering stage files and returns their entries.
pub fn persist_downstream(
    dir: &Path,
    planes: &[ProjectionPlane],
    d: &Downstream,
) -> Result<BTreeMap<String, FileEntry>> {
    let mut out = BTreeMap::new();
    put(
        dir,
        &mut out,
        "corrected",
        files::CORRECTED,
        assignment_bytes(&d.corrected, planes)?,
    )?;
    put(
        dir,
        &mut out,
        "correspondences",
        files::CORRESPONDENCES,
        io::to_json_bytes(&io::CorrespondencesDoc {
            version: FORMAT_VERSION,
            pairs: d.correspondences.clone(),
        })?,
    )?;
    put(
        dir,
        &mut out,
        "global",
        files::GLOBAL,
        assignment_bytes(&d.global, planes)?,
    )?;
    put(
        dir,
        &mut out,
        "forest",
        files::FOREST,
        io::to_json_bytes(&io::ForestDoc::from(&d.report.forest))?,
    )?;
    let diags: Vec<DiagnosticDoc> = d
        .report
        .errors
        .iter()
        .map(DiagnosticDoc::from)
        .chain(d.report.diagnostics.iter().map(DiagnosticDoc::from))
        .collect();
    put(
        dir,
        &mut out,
        "diagnostics",
        files::DIAGNOSTICS,
        io::to_json_bytes(&diags)?,
    )?;
    let metrics_path = dir.join(files::METRICS);
    match &d.metrics {
        Some(m) => put(dir, &mut out, "metrics", files::METRICS, io::to_json_bytes(m)?)?,
        None if metrics_path.exists() => fs::remove_file(metrics_path)?,
        None => {}
    }
    Ok(out)
}

/// Inputs of a run as they will be stored next to its outputs.
#[derive(Debug, Clone, Copy)]
pub struct RunInputs<'a> {
    pub dataset: &'a Dataset,
    pub corrections: Option<&'a CorrectionSet>,
    pub truth: Option<&'a GroundTruth>,
    pub synth: Option<&'a SyntheticConfig>,
}

/// Writes inputs, every stage output and the manifest into `dir`.
pub fn persist_run(
    dir: &Path,
    config: &PipelineConfig,
    inputs: RunInputs<'_>,
    out: &PipelineOutput,
) -> Result<RunManifest> {
    fs::create_dir_all(dir)?;
    let mut ins = BTreeMap::new();
    let mut dataset_bytes = Vec::new();
    io::write_dataset(inputs.dataset, &mut dataset_bytes)?;
    put(dir, &mut ins, "dataset", files::DATASET, dataset_bytes)?;
    let corrections = inputs.corrections.cloned().unwrap_or_default();
    put(
        dir,
        &mut ins,
        "corrections",
        files::CORRECTIONS,
        io::to_json_bytes(&io::CorrectionsDoc::from(&corrections))?,
    )?;
    if let Some(t) = inputs.truth {
        put(
            dir,
            &mut ins,
            "truth",
            files::TRUTH,
            io::to_json_bytes(&io::TruthDoc {
                version: FORMAT_VERSION,
                truth: t.clone(),
            })?,
        )?;
    }

    let planes = out.plane_list();
    let mut outs = BTreeMap::new();
    put(
        dir,
        &mut outs,
        "planes",
        files::PLANES,
        io::to_json_bytes(&planes_doc(&out.planes))?,
    )?;
    put(
        dir,
        &mut outs,
        "assignments",
        files::ASSIGNMENTS,
        assignment_bytes(&out.raw, &planes)?,
    )?;
    outs.extend(persist_downstream(dir, &planes, &out.downstream)?);

    let manifest = RunManifest {
        version: FORMAT_VERSION,
        config: config.clone(),
        synth: inputs.synth.cloned(),
        inputs: ins,
        outputs: outs,
    };
    io::write_json(&dir.join(files::MANIFEST), &manifest)?;
    Ok(manifest)
}

/// A run directory loaded back into memory, for re-running later stages.
#[derive(Debug, Clone)]
pub struct RunState {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub dataset: Dataset,
    pub planes: Vec<FramePlane>,
    pub raw: Vec<FileAssignment>,
    pub corrections: CorrectionSet,
    pub truth: Option<GroundTruth>,
}

impl RunState {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = RunManifest::load(dir)?;
        let dataset = io::load_dataset(&dir.join(files::DATASET), io::Units::Micrometers)?;
        let planes = load_planes(&dir.join(files::PLANES))?;
        let (raw, _) = io::load_assignments(&dir.join(files::ASSIGNMENTS))?;
        let corr_path = dir.join(files::CORRECTIONS);
        let corrections = if corr_path.exists() {
            io::load_corrections(&corr_path)?
        } else {
            CorrectionSet::default()
        };
        let truth_path = dir.join(files::TRUTH);
        let truth = truth_path.exists().then(|| io::load_truth(&truth_path)).transpose()?;
        check_len(&dataset, planes.len(), "planes")?;
        check_len(&dataset, raw.len(), "assignments")?;
        Ok(Self {
            dir: dir.to_owned(),
            manifest,
            dataset,
            planes,
            raw,
            corrections,
            truth,
        })
    }

    pub fn plane_list(&self) -> Vec<ProjectionPlane> {
        self.planes.iter().map(|p| p.plane).collect()
    }

    /// Clustering of frame `t` with the current corrections applied.
    pub fn corrected_frame(&self, t: usize) -> Result<FileAssignment> {
        let frame = self
            .dataset
            .frame(t)
            .ok_or_else(|| Error::DegenerateInput(format!("no frame {t}")))?;
        apply_corrections(&self.raw[t], &self.corrections, frame, &self.planes[t].plane)
    }

    /// Replaces the corrections overlay on disk without touching any stage
    /// output. Entries must name existing nuclei.
    pub fn save_corrections(&mut self, corrections: CorrectionSet) -> Result<()> {
        for c in corrections.entries() {
            if self.dataset.frame(c.frame).and_then(|f| f.get(&c.id)).is_none() {
                return Err(Error::UnknownNucleus {
                    frame: c.frame,
                    id: c.id.clone(),
                });
            }
        }
        let bytes = io::to_json_bytes(&io::CorrectionsDoc::from(&corrections))?;
        put(
            &self.dir,
            &mut self.manifest.inputs,
            "corrections",
            files::CORRECTIONS,
            bytes,
        )?;
        io::write_json(&self.dir.join(files::MANIFEST), &self.manifest)?;
        self.corrections = corrections;
        Ok(())
    }

    /// Stores `corrections` as the run's overlay, recomputes every stage
    /// after clustering and refreshes the manifest.
    pub fn rerun_with(&mut self, corrections: CorrectionSet) -> Result<Downstream> {
        let planes = self.plane_list();
        let d = run_downstream(
            &self.dataset,
            &planes,
            &self.raw,
            Some(&corrections),
            self.truth.as_ref(),
        )?;
        let bytes = io::to_json_bytes(&io::CorrectionsDoc::from(&corrections))?;
        put(
            &self.dir,
            &mut self.manifest.inputs,
            "corrections",
            files::CORRECTIONS,
            bytes,
        )?;
        self.corrections = corrections;
        let fresh = persist_downstream(&self.dir, &planes, &d)?;
        self.manifest.outputs.retain(|k, _| !matches!(k.as_str(), "metrics"));
        self.manifest.outputs.extend(fresh);
        io::write_json(&self.dir.join(files::MANIFEST), &self.manifest)?;
        Ok(d)
    }
}

/// Re-executes the run recorded in `dir` from its stored inputs and
/// configuration, writing into `out_dir`.
pub fn replay_run(dir: &Path, out_dir: &Path) -> Result<RunManifest> {
    let manifest = RunManifest::load(dir)?;
    let dataset = io::load_dataset(&dir.join(files::DATASET), io::Units::Micrometers)?;
    let corrections = io::load_corrections(&dir.join(files::CORRECTIONS))?;
    let truth_path = dir.join(files::TRUTH);
    let truth = truth_path.exists().then(|| io::load_truth(&truth_path)).transpose()?;
    let out = run_pipeline(&dataset, &manifest.config, Some(&corrections), truth.as_ref())?;
    persist_run(
        out_dir,
        &manifest.config,
        RunInputs {
            dataset: &dataset,
            corrections: Some(&corrections),
            truth: truth.as_ref(),
            synth: manifest.synth.as_ref(),
        },
        &out,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, preset};

    fn quick_config() -> PipelineConfig {
        PipelineConfig {
            seed: 3,
            ga: GaConfig {
                population_size: 200,
                ..GaConfig::default()
            },
            // Enough Forgy restarts that no frame settles in a local minimum.
            kmeans: KMeansConfig {
                n_init: 100,
                ..KMeansConfig::default()
            },
        }
    }

    fn small(name: &str) -> (Dataset, GroundTruth, SyntheticConfig) {
        let cfg = SyntheticConfig {
            num_frames: 6,
            nuclei_per_file_init: 6,
            ..preset(name).unwrap()
        };
        let (ds, t) = generate(&cfg).unwrap();
        (ds, t, cfg)
    }

    #[test]
    fn frame_seeds_differ() {
        let s: std::collections::HashSet<u64> = (0..100).map(|t| frame_seed(7, t)).collect();
        assert_eq!(s.len(), 100);
        assert_ne!(frame_seed(0, 1), frame_seed(1, 0));
    }

    #[test]
    fn straight_without_corrections_is_perfect() {
        let (ds, truth, _) = small("straight");
        let out = run_pipeline(&ds, &quick_config(), None, Some(&truth)).unwrap();
        let m = out.downstream.metrics.unwrap();
        assert!(m.is_perfect(), "{m:?}");
        assert!(out.downstream.report.is_clean());
    }

    #[test]
    fn stage_error_carries_context() {
        let (ds, _, _) = small("straight");
        let cfg = quick_config();
        let planes: Vec<ProjectionPlane> = project_frames(&ds, &cfg).unwrap().iter().map(|p| p.plane).collect();
        let raw = cluster_frames(&ds, &planes, &cfg).unwrap();
        let bad = CorrectionSet::new(vec![crate::clustering::Correction {
            frame: 2,
            id: "nope".into(),
            label: 1,
        }])
        .unwrap();
        match run_downstream(&ds, &planes, &raw, Some(&bad), None) {
            Err(Error::Stage { stage, frame, .. }) => {
                assert_eq!(stage, "corrections");
                assert_eq!(frame, Some(2));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn persisted_run_replays_byte_identically() {
        let (ds, truth, syn) = small("rotating");
        let cfg = quick_config();
        let out = run_pipeline(&ds, &cfg, None, Some(&truth)).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let inputs = RunInputs {
            dataset: &ds,
            corrections: None,
            truth: Some(&truth),
            synth: Some(&syn),
        };
        let m1 = persist_run(a.path(), &cfg, inputs, &out).unwrap();
        assert!(m1.verify(a.path()).unwrap().is_empty());
        let m2 = replay_run(a.path(), b.path()).unwrap();
        assert_eq!(m1, m2);
        for e in m1.outputs.values() {
            assert_eq!(
                fs::read(a.path().join(&e.path)).unwrap(),
                fs::read(b.path().join(&e.path)).unwrap()
            );
        }
    }

    #[test]
    fn run_state_rerun_applies_corrections() {
        let (ds, truth, _) = small("straight");
        let cfg = quick_config();
        let out = run_pipeline(&ds, &cfg, None, Some(&truth)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        persist_run(
            dir.path(),
            &cfg,
            RunInputs {
                dataset: &ds,
                corrections: None,
                truth: Some(&truth),
                synth: None,
            },
            &out,
        )
        .unwrap();
        let mut state = RunState::load(dir.path()).unwrap();
        // Move one nucleus to another file: the count mismatch must surface.
        let (id, &l) = state.raw[1].labels.iter().next().unwrap();
        let mut c = CorrectionSet::default();
        c.upsert(1, id.clone(), ((l + 1) % 8) as u32).unwrap();
        let d = state.rerun_with(c.clone()).unwrap();
        assert!(!d.report.is_clean());
        assert!(!d.metrics.unwrap().is_perfect());
        let again = RunState::load(dir.path()).unwrap();
        assert_eq!(again.corrections, c);
        assert!(again.manifest.verify(dir.path()).unwrap().is_empty());
    }
}
