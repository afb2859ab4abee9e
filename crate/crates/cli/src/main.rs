use std::collections::HashMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cortrack::baselines::{
    cluster_count, dbscan, finite_diff_hessian, fixed_plane, greedy_euclidean_link, kmeans_3d_control, pca_plane,
    pgd_multistart, FixedPlane, PcaVariant,
};
use cortrack::clustering::{apply_corrections, cluster_frame, clustering_accuracy, CorrectionSet, FileAssignment};
use cortrack::evaluation::{compare_links, forest_links, per_frame_breakdown};
use cortrack::ga::{fitness, GaConfig};
use cortrack::io::{self, DiagnosticDoc, Units};
use cortrack::lineage::track_dataset;
use cortrack::lines::{match_files, propagate_labels, select_representatives};
use cortrack::model::{rotate_plane, to_plane_coords, Axis};
use cortrack::pipeline::{self, files, frame_seed, persist_run, replay_run, run_pipeline, PipelineConfig, RunInputs};
use cortrack::synth::{generate, preset, scenario_presets, GroundTruth, SyntheticConfig};
use cortrack::{Dataset, FrameCloud, NucleusId, ProjectionPlane};
use cortrack_cli::config::{resolve, Overrides};
use serde::Serialize;
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "cortrack",
    version,
    about = "Track root cortex nuclei through 3D time-lapse point clouds"
)]
struct Cli {
    /// Output directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// TOML file with `seed`, `[ga]` and `[kmeans]` tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset coordinates are voxel indices rather than micrometers.
    #[arg(long, global = true)]
    voxel_units: bool,
    /// Voxel size as z,y,x in micrometers (with --voxel-units).
    #[arg(long, global = true, value_delimiter = ',', num_args = 3)]
    voxel_size: Option<Vec<f64>>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground truth.
    Synth {
        /// Preset name; see --list.
        #[arg(long, default_value = "rotating")]
        preset: String,
        #[arg(long)]
        frames: Option<usize>,
        /// Print the presets and exit.
        #[arg(long)]
        list: bool,
    },
    /// Search a projection plane per frame.
    Project {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Cluster every frame into files on its plane.
    Cluster {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        planes: PathBuf,
    },
    /// Apply corrections, match files across frames and propagate labels.
    Lines {
        #[arg(long)]
        dataset: PathBuf,
        /// Output of `cluster`.
        #[arg(long)]
        assignments: PathBuf,
        #[arg(long)]
        corrections: Option<PathBuf>,
    },
    /// Link nuclei file by file into a lineage forest.
    Track {
        #[arg(long)]
        dataset: PathBuf,
        /// Globally consistent labels, as written by `lines`.
        #[arg(long)]
        assignments: PathBuf,
    },
    /// Score a forest against ground truth.
    Eval {
        #[arg(long)]
        forest: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Also print per-frame-pair counts.
        #[arg(long)]
        per_frame: bool,
    },
    /// Run every stage and persist the run directory with its manifest.
    Pipeline {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        corrections: Option<PathBuf>,
        /// Re-execute the run stored in this directory into --out.
        #[arg(long, conflicts_with_all = ["dataset", "preset", "corrections"])]
        replay: Option<PathBuf>,
    },
    /// Serve a run directory to the refinement UI.
    Serve {
        /// Run directory written by `pipeline`.
        #[arg(long)]
        state: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
    },
    /// Baselines and landscape probes.
    Probe {
        #[arg(value_enum)]
        kind: ProbeKind,
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        /// PGD starts.
        #[arg(long, default_value_t = 20)]
        starts: usize,
        /// PGD step size.
        #[arg(long, default_value_t = 0.05)]
        step: f64,
        /// Finite-difference step for the Hessian.
        #[arg(long, default_value_t = 1e-4)]
        h: f64,
        /// DBSCAN radius in micrometers.
        #[arg(long, default_value_t = 6.0)]
        eps: f64,
        #[arg(long, default_value_t = 3)]
        min_pts: usize,
        /// Plane rotations in degrees.
        #[arg(long, value_delimiter = ',', default_value = "1,2,5,10")]
        degrees: Vec<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ProbeKind {
    /// GA against PCA and fixed planes: fitness and clustering accuracy.
    Planes,
    /// Projected gradient descent from random starts.
    Pgd,
    /// Finite-difference Hessian at the GA optimum.
    Hessian,
    /// DBSCAN on the GA chart.
    Dbscan,
    /// K-means on raw 3D positions.
    Kmeans3d,
    /// Greedy Euclidean linking against polar matching for frames t, t+1.
    Euclidean,
    /// Clustering accuracy after rotating the GA plane.
    Rotation,
}

#[derive(Args)]
struct Source {
    /// Dataset CSV.
    #[arg(long, conflicts_with = "preset")]
    dataset: Option<PathBuf>,
    /// Ground truth JSON for --dataset.
    #[arg(long, requires = "dataset")]
    truth: Option<PathBuf>,
    /// Generate a synthetic preset instead of reading a dataset.
    #[arg(long)]
    preset: Option<String>,
    /// Frame count override for --preset.
    #[arg(long, requires = "preset")]
    frames: Option<usize>,
}

struct Loaded {
    dataset: Dataset,
    truth: Option<GroundTruth>,
    synth: Option<SyntheticConfig>,
}

fn units(cli: &Cli) -> Result<Units> {
    Ok(match (cli.voxel_units, &cli.voxel_size) {
        (false, None) => Units::Micrometers,
        (true, None) => Units::default_voxels(),
        (true, Some(v)) => Units::Voxels([v[0], v[1], v[2]]),
        (false, Some(_)) => bail!("--voxel-size needs --voxel-units"),
    })
}

fn synth_config(name: &str, frames: Option<usize>, seed: u64) -> Result<SyntheticConfig> {
    let mut cfg = preset(name).with_context(|| format!("unknown preset {name:?}"))?;
    if let Some(n) = frames {
        cfg.num_frames = n;
    }
    Ok(cfg.with_seed(seed))
}

fn load_source(cli: &Cli, src: &Source, seed: u64) -> Result<Loaded> {
    match (&src.dataset, &src.preset) {
        (Some(path), _) => Ok(Loaded {
            dataset: load_dataset(path, units(cli)?)?,
            truth: src.truth.as_deref().map(load_truth).transpose()?,
            synth: None,
        }),
        (None, Some(name)) => {
            let cfg = synth_config(name, src.frames, seed)?;
            let (dataset, truth) = generate(&cfg)?;
            Ok(Loaded {
                dataset,
                truth: Some(truth),
                synth: Some(cfg),
            })
        }
        (None, None) => bail!("pass --dataset or --preset"),
    }
}

fn load_dataset(path: &Path, units: Units) -> Result<Dataset> {
    io::load_dataset(path, units).with_context(|| format!("loading {}", path.display()))
}

fn load_truth(path: &Path) -> Result<GroundTruth> {
    io::load_truth(path).with_context(|| format!("loading {}", path.display()))
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = resolve(cli.config.as_deref(), &cli.overrides)?;
    match &cli.command {
        Command::Synth { preset, frames, list } => {
            if *list {
                for (name, c) in scenario_presets() {
                    println!("{name}: {}", serde_json::to_string(&c)?);
                }
                return Ok(());
            }
            synth(&cli.out, preset, *frames, cfg.seed)
        }
        Command::Project { dataset } => project(&cli.out, &load_dataset(dataset, units(&cli)?)?, &cfg),
        Command::Cluster { dataset, planes } => cluster(&cli.out, &load_dataset(dataset, units(&cli)?)?, planes, &cfg),
        Command::Lines {
            dataset,
            assignments,
            corrections,
        } => lines(
            &cli.out,
            &load_dataset(dataset, units(&cli)?)?,
            assignments,
            corrections.as_deref(),
        ),
        Command::Track { dataset, assignments } => track(&cli.out, &load_dataset(dataset, units(&cli)?)?, assignments),
        Command::Eval {
            forest,
            truth,
            per_frame,
        } => eval(&cli.out, forest, truth, *per_frame),
        Command::Pipeline {
            source,
            corrections,
            replay,
        } => match replay {
            Some(dir) => {
                let m = replay_run(dir, &cli.out).with_context(|| format!("replaying {}", dir.display()))?;
                let original = pipeline::RunManifest::load(dir)?;
                let identical = m.outputs == original.outputs;
                print_json(&json!({ "out": cli.out, "identical": identical }))?;
                if !identical {
                    bail!("replay differs from {}", dir.display());
                }
                Ok(())
            }
            None => run(&cli, source, corrections.as_deref(), &cfg),
        },
        Command::Serve { state, bind } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(cortrack_cli::serve::serve(state, *bind))
        }
        Command::Probe {
            kind, source, frame, ..
        } => {
            let loaded = load_source(&cli, source, cfg.seed)?;
            let f = loaded
                .dataset
                .frame(*frame)
                .with_context(|| format!("no frame {frame}"))?;
            probe(*kind, &cli.command, &loaded, f, &cfg)
        }
    }
}

fn synth(out: &Path, name: &str, frames: Option<usize>, seed: u64) -> Result<()> {
    let cfg = synth_config(name, frames, seed)?;
    let (ds, truth) = generate(&cfg)?;
    fs::create_dir_all(out)?;
    io::save_dataset(&ds, &out.join(files::DATASET))?;
    io::save_truth(&out.join(files::TRUTH), &truth)?;
    io::write_json(&out.join("synth.json"), &cfg)?;
    print_json(&json!({
        "preset": name,
        "frames": ds.num_frames(),
        "nuclei": ds.num_nuclei(),
        "divisions": truth.divisions.len(),
    }))
}

fn project(out: &Path, ds: &Dataset, cfg: &PipelineConfig) -> Result<()> {
    let planes = pipeline::project_frames(ds, cfg)?;
    fs::create_dir_all(out)?;
    pipeline::save_planes(&out.join(files::PLANES), &planes)?;
    let mean = planes.iter().map(|p| p.fitness).sum::<f64>() / planes.len().max(1) as f64;
    print_json(&json!({ "frames": planes.len(), "mean_fitness": mean }))
}

fn cluster(out: &Path, ds: &Dataset, planes: &Path, cfg: &PipelineConfig) -> Result<()> {
    let planes: Vec<ProjectionPlane> = pipeline::load_planes(planes)?.iter().map(|p| p.plane).collect();
    let asg = pipeline::cluster_frames(ds, &planes, cfg)?;
    fs::create_dir_all(out)?;
    io::save_assignments(&out.join(files::ASSIGNMENTS), &asg, &planes)?;
    print_json(&json!({ "frames": asg.len() }))
}

fn lines(out: &Path, ds: &Dataset, assignments: &Path, corrections: Option<&Path>) -> Result<()> {
    let (raw, planes) = io::load_assignments(assignments)?;
    if raw.len() != ds.num_frames() {
        bail!("{} assignments for {} frames", raw.len(), ds.num_frames());
    }
    let corrections = corrections.map(io::load_corrections).transpose()?.unwrap_or_default();
    let mut corrected = Vec::with_capacity(raw.len());
    let mut reps = Vec::with_capacity(raw.len());
    for ((f, a), p) in ds.frames.iter().zip(&raw).zip(&planes) {
        let c = apply_corrections(a, &corrections, f, p)?;
        reps.push(select_representatives(f, &c)?);
        corrected.push(c);
    }
    let pairs = (0..ds.num_frames().saturating_sub(1))
        .map(|t| match_files(&reps[t], &reps[t + 1], &planes[t], &planes[t + 1]))
        .collect::<cortrack::Result<Vec<_>>>()?;
    let global = propagate_labels(&corrected, &pairs)?;
    fs::create_dir_all(out)?;
    io::save_assignments(&out.join(files::CORRECTED), &corrected, &planes)?;
    io::save_correspondences(&out.join(files::CORRESPONDENCES), &pairs)?;
    io::save_assignments(&out.join(files::GLOBAL), &global, &planes)?;
    print_json(&json!({ "frame_pairs": pairs.len(), "corrections": corrections.len() }))
}

fn track(out: &Path, ds: &Dataset, assignments: &Path) -> Result<()> {
    let (global, _) = io::load_assignments(assignments)?;
    let report = track_dataset(ds, &global)?;
    fs::create_dir_all(out)?;
    io::save_forest(&out.join(files::FOREST), &report.forest)?;
    let diags: Vec<DiagnosticDoc> = report
        .errors
        .iter()
        .map(DiagnosticDoc::from)
        .chain(report.diagnostics.iter().map(DiagnosticDoc::from))
        .collect();
    io::write_json(&out.join(files::DIAGNOSTICS), &diags)?;
    for e in &report.errors {
        log::warn!("{e}");
    }
    print_json(&json!({
        "edges": report.forest.edges().len(),
        "divisions": report.forest.division_events().len(),
        "reconciliation_errors": report.errors.len(),
    }))
}

fn eval(out: &Path, forest: &Path, truth: &Path, per_frame: bool) -> Result<()> {
    let predicted = forest_links(&io::load_forest(forest)?);
    let truth = load_truth(truth)?.links();
    let m = compare_links(&predicted, &truth)?;
    fs::create_dir_all(out)?;
    io::write_json(&out.join(files::METRICS), &m)?;
    if per_frame {
        print_json(&json!({ "pooled": m, "per_frame": per_frame_breakdown(&predicted, &truth)? }))
    } else {
        print_json(&m)
    }
}

fn run(cli: &Cli, source: &Source, corrections: Option<&Path>, cfg: &PipelineConfig) -> Result<()> {
    let loaded = load_source(cli, source, cfg.seed)?;
    let corrections: Option<CorrectionSet> = corrections.map(io::load_corrections).transpose()?;
    let out = run_pipeline(&loaded.dataset, cfg, corrections.as_ref(), loaded.truth.as_ref())?;
    let manifest = persist_run(
        &cli.out,
        cfg,
        RunInputs {
            dataset: &loaded.dataset,
            corrections: corrections.as_ref(),
            truth: loaded.truth.as_ref(),
            synth: loaded.synth.as_ref(),
        },
        &out,
    )?;
    let d = &out.downstream;
    print_json(&json!({
        "out": cli.out,
        "frames": loaded.dataset.num_frames(),
        "edges": d.report.forest.edges().len(),
        "reconciliation_errors": d.report.errors.len(),
        "metrics": d.metrics,
        "stages": manifest.outputs.keys().collect::<Vec<_>>(),
    }))
}

fn truth_map(loaded: &Loaded, t: usize) -> Option<HashMap<NucleusId, u8>> {
    loaded.truth.as_ref().map(|g| g.label_map(t))
}

fn accuracy(
    f: &FrameCloud,
    plane: &ProjectionPlane,
    cfg: &PipelineConfig,
    truth: Option<&HashMap<NucleusId, u8>>,
) -> Result<Option<f64>> {
    let Some(truth) = truth else { return Ok(None) };
    let asg = cluster_frame(f, plane, &kmeans_config(cfg, f.frame_index))?;
    Ok(Some(clustering_accuracy(&asg, truth)?))
}

fn kmeans_config(cfg: &PipelineConfig, t: usize) -> cortrack::clustering::KMeansConfig {
    cortrack::clustering::KMeansConfig {
        rng_seed: frame_seed(cfg.seed ^ 1, t),
        ..cfg.kmeans.clone()
    }
}

fn ga_plane(f: &FrameCloud, cfg: &PipelineConfig) -> Result<(ProjectionPlane, f64)> {
    let r = cortrack::ga::optimize_plane(
        f,
        &GaConfig {
            rng_seed: frame_seed(cfg.seed, f.frame_index),
            ..cfg.ga.clone()
        },
    )?;
    Ok((r.best_plane, r.best_fitness))
}

fn probe(kind: ProbeKind, cmd: &Command, loaded: &Loaded, f: &FrameCloud, cfg: &PipelineConfig) -> Result<()> {
    let Command::Probe {
        starts,
        step,
        h,
        eps,
        min_pts,
        degrees,
        ..
    } = cmd
    else {
        unreachable!()
    };
    let pts = f.positions();
    let truth = truth_map(loaded, f.frame_index);
    let truth = truth.as_ref();
    match kind {
        ProbeKind::Planes => {
            let (ga, _) = ga_plane(f, cfg)?;
            let candidates = [
                ("ga", ga),
                ("pca_c12", pca_plane(&pts, PcaVariant::C12)?),
                ("pca_c23", pca_plane(&pts, PcaVariant::C23)?),
                ("fixed_xz", fixed_plane(FixedPlane::XZ)),
                ("fixed_xy", fixed_plane(FixedPlane::XY)),
                ("fixed_yz", fixed_plane(FixedPlane::YZ)),
            ];
            let mut rows = Vec::new();
            for (name, p) in candidates {
                rows.push(json!({
                    "plane": name,
                    "normal": io::PlaneDoc::from(&p),
                    "fitness": fitness(&pts, &p)?,
                    "accuracy": accuracy(f, &p, cfg, truth)?,
                }));
            }
            print_json(&rows)
        }
        ProbeKind::Pgd => {
            let runs = pgd_multistart(&pts, *starts, cfg.seed, *step, 3000)?;
            let finals: Vec<_> = runs
                .iter()
                .map(|r| json!({ "fitness": r.fitness, "steps": r.path.len(), "converged": r.converged }))
                .collect();
            let (_, ga) = ga_plane(f, cfg)?;
            print_json(&json!({ "ga_fitness": ga, "pgd": finals }))
        }
        ProbeKind::Hessian => {
            let (ga, fit) = ga_plane(f, cfg)?;
            let p = finite_diff_hessian(&pts, &ga, *h)?;
            print_json(&json!({
                "fitness": fit,
                "eigenvalues": p.eigenvalues,
                "asymmetry": p.asymmetry,
            }))
        }
        ProbeKind::Dbscan => {
            let (ga, _) = ga_plane(f, cfg)?;
            let labels = dbscan(&to_plane_coords(&pts, &ga), *eps, *min_pts)?;
            print_json(&json!({
                "clusters": cluster_count(&labels),
                "noise": labels.iter().filter(|l| l.is_none()).count(),
            }))
        }
        ProbeKind::Kmeans3d => {
            let (_, acc3d) = kmeans_3d_control(f, &kmeans_config(cfg, f.frame_index), truth)?;
            let (ga, _) = ga_plane(f, cfg)?;
            print_json(&json!({ "kmeans_3d": acc3d, "ga_chart": accuracy(f, &ga, cfg, truth)? }))
        }
        ProbeKind::Euclidean => {
            let t = f.frame_index;
            let next = loaded
                .dataset
                .frame(t + 1)
                .with_context(|| format!("no frame {}", t + 1))?;
            let side = |g: &FrameCloud| -> Result<(ProjectionPlane, FileAssignment)> {
                let (p, _) = ga_plane(g, cfg)?;
                let a = match &loaded.truth {
                    Some(tr) => tr.assignments()[g.frame_index].clone(),
                    None => cluster_frame(g, &p, &kmeans_config(cfg, g.frame_index))?,
                };
                Ok((p, a))
            };
            let (p0, a0) = side(f)?;
            let (p1, a1) = side(next)?;
            let r0 = select_representatives(f, &a0)?;
            let r1 = select_representatives(next, &a1)?;
            let euclid = greedy_euclidean_link(&r0, &r1);
            let polar = match_files(&r0, &r1, &p0, &p1)?;
            print_json(&json!({
                "euclidean": { "mapping": euclid.mapping, "duplicates": euclid.duplicates },
                "polar": polar,
            }))
        }
        ProbeKind::Rotation => {
            let (ga, _) = ga_plane(f, cfg)?;
            let base = accuracy(f, &ga, cfg, truth)?;
            let mut rows = Vec::new();
            for &d in degrees {
                for (name, axis) in [("x", Axis::X), ("y", Axis::Y), ("z", Axis::Z)] {
                    let p = rotate_plane(&ga, axis, d);
                    rows.push(json!({ "axis": name, "degrees": d, "accuracy": accuracy(f, &p, cfg, truth)? }));
                }
            }
            print_json(&json!({ "base": base, "rotated": rows }))
        }
    }
}
