//! Synthetic roots with full ground truth.
//!
//! Eight files sit at 45° steps on a ring around a central curve that runs
//! from the tip (high y) towards the base. The curve may bend (constant
//! curvature in the x-y plane) and the whole root may be tilted about z.
//! Every frame the ring turns about the local axis, nuclei drift away from
//! the tip as the root elongates, and eligible nuclei go through mitosis and
//! split into two daughters. Isotropic noise is added last, per frame.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::clustering::{best_relabeling, Correction, CorrectionSet, FileAssignment, NUM_FILES};
use crate::error::{Error, Result};
use crate::evaluation::Link;
use crate::lineage::{LineageEdge, LineageForest, NodeRef};
use crate::model::{Dataset, FrameCloud, NucleusId, NucleusRecord, Phase, Vec2, Vec3, DEFAULT_TIME_INTERVAL_MIN};

/// Largest per-frame ring rotation for which line matching stays reliable.
pub const MAX_ROTATION_DEG: f64 = 22.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_frames: usize,
    pub nuclei_per_file_init: usize,
    pub ring_radius_um: f64,
    pub axial_spacing_um: f64,
    pub rotation_deg_per_frame: f64,
    /// Frames between reversals of the rotation direction; 0 keeps one
    /// direction throughout.
    pub rotation_reversal_period: usize,
    /// Angle of the ring at frame 0, in degrees.
    pub ring_phase_deg: f64,
    /// Curvature of the central axis, per micrometer.
    pub bend_curvature: f64,
    /// Tilt of the root axis away from y, about the z axis, in degrees.
    pub tilt_deg: f64,
    /// Axial offset of file k's first nucleus is `stagger_um · cos(45°·k)`,
    /// as when the field of view cuts the files obliquely.
    pub stagger_um: f64,
    /// Relative axial growth per frame.
    pub elongation_rate: f64,
    pub division_prob_per_frame: f64,
    pub mitotic_duration_frames: usize,
    pub position_noise_um: f64,
    pub rng_seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_frames: 50,
            nuclei_per_file_init: 12,
            ring_radius_um: 20.0,
            axial_spacing_um: 8.0,
            rotation_deg_per_frame: 3.0,
            rotation_reversal_period: 0,
            ring_phase_deg: 0.0,
            bend_curvature: 0.0,
            tilt_deg: 0.0,
            stagger_um: 0.0,
            elongation_rate: 0.002,
            division_prob_per_frame: 0.02,
            mitotic_duration_frames: 1,
            position_noise_um: 0.5,
            rng_seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_owned()));
        if self.num_frames == 0 {
            return fail("num_frames must be at least 1");
        }
        if self.nuclei_per_file_init == 0 {
            return fail("nuclei_per_file_init must be at least 1");
        }
        if self.rotation_deg_per_frame.abs() >= MAX_ROTATION_DEG {
            return fail("rotation per frame must stay below 22.5 degrees");
        }
        if !(0.0..=1.0).contains(&self.division_prob_per_frame) {
            return fail("division_prob_per_frame must lie in [0, 1]");
        }
        if self.mitotic_duration_frames == 0 {
            return fail("mitotic_duration_frames must be at least 1");
        }
        if !(self.ring_radius_um > 0.0 && self.axial_spacing_um > 0.0) {
            return fail("ring radius and axial spacing must be positive");
        }
        if self.position_noise_um < 0.0 || self.elongation_rate < 0.0 || self.bend_curvature < 0.0 {
            return fail("noise, elongation and curvature must be non-negative");
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }
}

/// Named scenarios, in a stable order.
pub fn scenario_presets() -> Vec<(&'static str, SyntheticConfig)> {
    let base = SyntheticConfig::default();
    vec![
        (
            "straight",
            SyntheticConfig {
                rotation_deg_per_frame: 0.0,
                ..base.clone()
            },
        ),
        ("rotating", base.clone()),
        (
            "bent_rotating",
            SyntheticConfig {
                rotation_reversal_period: 8,
                bend_curvature: 0.002,
                tilt_deg: 15.0,
                stagger_um: 10.0,
                ..base.clone()
            },
        ),
        (
            "dividing",
            SyntheticConfig {
                rotation_deg_per_frame: 2.0,
                division_prob_per_frame: 0.05,
                ..base.clone()
            },
        ),
        (
            "long",
            SyntheticConfig {
                nuclei_per_file_init: 40,
                rotation_deg_per_frame: 1.0,
                ..base
            },
        ),
    ]
}

pub fn preset(name: &str) -> Option<SyntheticConfig> {
    scenario_presets().into_iter().find(|(n, _)| *n == name).map(|(_, c)| c)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DivisionEvent {
    pub parent: NodeRef,
    pub daughters: [NodeRef; 2],
}

/// Everything the generator knows about the dataset it emitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Per frame, the physical file of every nucleus.
    pub labels: Vec<BTreeMap<NucleusId, u8>>,
    pub edges: Vec<LineageEdge>,
    pub divisions: Vec<DivisionEvent>,
}

impl GroundTruth {
    pub fn label_map(&self, frame: usize) -> HashMap<NucleusId, u8> {
        self.labels
            .get(frame)
            .map(|m| m.iter().map(|(k, v)| (k.clone(), *v)).collect())
            .unwrap_or_default()
    }

    pub fn forest(&self) -> Result<LineageForest> {
        LineageForest::new(self.edges.clone())
    }

    pub fn links(&self) -> Vec<Link> {
        self.edges
            .iter()
            .flat_map(|e| e.children.iter().map(|c| Link::new(e.parent.clone(), c.clone())))
            .collect()
    }

    /// The true labels as assignments (centroids left at zero).
    pub fn assignments(&self) -> Vec<FileAssignment> {
        self.labels
            .iter()
            .enumerate()
            .map(|(t, labels)| FileAssignment {
                frame_index: t,
                labels: labels.clone(),
                centroids: vec![Vec2::zeros(); NUM_FILES],
            })
            .collect()
    }

    /// Corrections that turn each predicted partition into the true one,
    /// expressed in the predicted label space (matched through the best
    /// relabeling of each frame).
    pub fn oracle_corrections(&self, predicted: &[FileAssignment]) -> Result<CorrectionSet> {
        let mut entries = Vec::new();
        for asg in predicted {
            let truth = self
                .labels
                .get(asg.frame_index)
                .ok_or_else(|| Error::DegenerateInput(format!("no ground truth for frame {}", asg.frame_index)))?;
            let ids: Vec<&NucleusId> = asg.labels.keys().collect();
            let pred: Vec<usize> = ids.iter().map(|id| asg.labels[*id] as usize).collect();
            let tru: Vec<usize> = ids
                .iter()
                .map(|id| {
                    truth
                        .get(*id)
                        .map(|&l| l as usize)
                        .ok_or_else(|| Error::UnknownNucleus {
                            frame: asg.frame_index,
                            id: (*id).clone(),
                        })
                })
                .collect::<Result<_>>()?;
            let relabel = best_relabeling(&pred, &tru)?;
            let inverse: HashMap<usize, usize> = relabel.mapping.iter().map(|(p, t)| (*t, *p)).collect();
            for (i, id) in ids.iter().enumerate() {
                let want = *inverse.get(&tru[i]).ok_or_else(|| {
                    Error::DegenerateInput(format!(
                        "frame {}: true file {} has no predicted counterpart",
                        asg.frame_index, tru[i]
                    ))
                })?;
                if want != pred[i] {
                    entries.push(Correction {
                        frame: asg.frame_index,
                        id: (*id).clone(),
                        label: want as u8,
                    });
                }
            }
        }
        CorrectionSet::new(entries)
    }
}

#[derive(Debug, Clone)]
struct SimNucleus {
    uid: u64,
    file: u8,
    /// Arc length from the tip along the central axis.
    s: f64,
    /// Frames spent in mitosis so far; 0 when not mitotic.
    mitotic_frames: usize,
    can_divide: bool,
}

struct Geometry<'a> {
    cfg: &'a SyntheticConfig,
    tip: Vec3,
    tilt: nalgebra::Rotation3<f64>,
}

impl Geometry<'_> {
    fn position(&self, n: &SimNucleus, ring_rotation: f64) -> Vec3 {
        let k = self.cfg.bend_curvature;
        let s = n.s;
        let (center, normal) = if k > 0.0 {
            let a = k * s;
            (
                Vec3::new((1.0 - a.cos()) / k, -a.sin() / k, 0.0),
                Vec3::new(a.cos(), a.sin(), 0.0),
            )
        } else {
            (Vec3::new(0.0, -s, 0.0), Vec3::x())
        };
        let phi = (n.file as f64 * 45.0).to_radians() + ring_rotation;
        let r = self.cfg.ring_radius_um;
        let local = center + (normal * phi.cos() + Vec3::z() * phi.sin()) * r;
        self.tip + self.tilt * local
    }
}

/// Generates a dataset and its ground truth. Deterministic in `rng_seed`.
pub fn generate(cfg: &SyntheticConfig) -> Result<(Dataset, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let noise =
        Normal::new(0.0, cfg.position_noise_um.max(f64::MIN_POSITIVE)).map_err(|e| Error::Config(e.to_string()))?;
    let geo = Geometry {
        cfg,
        tip: Vec3::new(140.0, 420.0, 34.0),
        tilt: nalgebra::Rotation3::from_axis_angle(&Vec3::z_axis(), cfg.tilt_deg.to_radians()),
    };

    let mut next_uid = 0u64;
    let mut alive: Vec<SimNucleus> = Vec::new();
    for file in 0..NUM_FILES as u8 {
        let offset = cfg.stagger_um * (file as f64 * 45.0).to_radians().cos() + cfg.stagger_um.abs();
        for i in 0..cfg.nuclei_per_file_init {
            alive.push(SimNucleus {
                uid: next_uid,
                file,
                s: cfg.axial_spacing_um * (i as f64 + 1.0) + offset,
                mitotic_frames: 0,
                can_divide: true,
            });
            next_uid += 1;
        }
    }

    let mut frames = Vec::with_capacity(cfg.num_frames);
    let mut truth = GroundTruth {
        labels: Vec::with_capacity(cfg.num_frames),
        edges: Vec::new(),
        divisions: Vec::new(),
    };
    let mut ring_rotation = cfg.ring_phase_deg.to_radians();
    let mut prev_ids: HashMap<u64, NucleusId> = HashMap::new();
    // uid at t+1 -> uid at t, plus whether it came from a split
    let mut ancestry: Vec<(u64, Vec<u64>)> = Vec::new();

    for t in 0..cfg.num_frames {
        // Ids are shuffled per frame so they carry no cross-frame identity.
        let mut order: Vec<usize> = (0..alive.len()).collect();
        order.shuffle(&mut rng);
        let mut ids: HashMap<u64, NucleusId> = HashMap::with_capacity(alive.len());
        for (rank, &i) in order.iter().enumerate() {
            ids.insert(alive[i].uid, NucleusId(format!("n{rank:04}")));
        }

        let mut records = Vec::with_capacity(alive.len());
        let mut labels = BTreeMap::new();
        for &i in &order {
            let n = &alive[i];
            let mut p = geo.position(n, ring_rotation);
            if cfg.position_noise_um > 0.0 {
                p += Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng));
            }
            let phase = if n.mitotic_frames > 0 {
                Phase::Mitotic
            } else {
                Phase::NonMitotic
            };
            let id = ids[&n.uid].clone();
            labels.insert(id.clone(), n.file);
            records.push(NucleusRecord::new(t, id, p, phase));
        }
        records.sort_by(|a, b| a.id.cmp(&b.id));
        frames.push(FrameCloud::new(t, records, DEFAULT_TIME_INTERVAL_MIN)?);
        truth.labels.push(labels);

        if t > 0 {
            for (parent_uid, children) in ancestry.drain(..) {
                let parent = NodeRef::new(t - 1, prev_ids[&parent_uid].clone());
                let kids: Vec<NodeRef> = children.iter().map(|c| NodeRef::new(t, ids[c].clone())).collect();
                if kids.len() == 2 {
                    truth.divisions.push(DivisionEvent {
                        parent: parent.clone(),
                        daughters: [kids[0].clone(), kids[1].clone()],
                    });
                }
                truth.edges.push(LineageEdge { parent, children: kids });
            }
        }
        prev_ids = ids;

        if t + 1 == cfg.num_frames {
            break;
        }

        // Advance to t+1.
        let growth = 1.0 + cfg.elongation_rate;
        let mut next = Vec::with_capacity(alive.len() + 8);
        for n in alive.drain(..) {
            let s = n.s * growth;
            if n.mitotic_frames >= cfg.mitotic_duration_frames {
                let quarter = cfg.axial_spacing_um / 4.0;
                let mut kids = Vec::with_capacity(2);
                for ds in [-quarter, quarter] {
                    kids.push(next_uid);
                    next.push(SimNucleus {
                        uid: next_uid,
                        file: n.file,
                        s: s + ds,
                        mitotic_frames: 0,
                        can_divide: false,
                    });
                    next_uid += 1;
                }
                ancestry.push((n.uid, kids));
            } else {
                let mitotic_frames = if n.mitotic_frames > 0 {
                    n.mitotic_frames + 1
                } else if n.can_divide && rng.random_bool(cfg.division_prob_per_frame) {
                    1
                } else {
                    0
                };
                ancestry.push((n.uid, vec![n.uid]));
                next.push(SimNucleus { s, mitotic_frames, ..n });
            }
        }
        alive = next;

        let mut step = cfg.rotation_deg_per_frame;
        if cfg.rotation_reversal_period > 0 && (t / cfg.rotation_reversal_period) % 2 == 1 {
            step = -step;
        }
        ring_rotation += step.to_radians();
    }

    Ok((Dataset::new(frames)?, truth))
}
