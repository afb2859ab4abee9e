//! File-level correspondence between consecutive frames.
//!
//! Each file is represented by its median-y nucleus. The eight
//! representatives form a ring around the root axis; one anchor file is
//! matched by the smallest angular displacement and the rest follow by
//! cyclic order, so the result is always a bijection.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::clustering::{FileAssignment, NUM_FILES};
use crate::error::{Error, Result};
use crate::model::{plane_basis, FrameCloud, NucleusId, PlaneBasis, ProjectionPlane, Vec2, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct Representative {
    pub file_label: u8,
    pub id: NucleusId,
    pub position: Vec3,
}

/// One representative nucleus per file, indexed by file label.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentativeSet {
    pub frame_index: usize,
    pub reps: Vec<Representative>,
}

impl RepresentativeSet {
    pub fn positions(&self) -> Vec<Vec3> {
        self.reps.iter().map(|r| r.position).collect()
    }
}

/// `mapping[label at t] = label at t+1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileCorrespondence {
    pub frame: usize,
    pub mapping: [u8; NUM_FILES],
}

impl FileCorrespondence {
    pub fn identity(frame: usize) -> Self {
        Self {
            frame,
            mapping: std::array::from_fn(|i| i as u8),
        }
    }

    pub fn is_bijection(&self) -> bool {
        let mut seen = [false; NUM_FILES];
        for &m in &self.mapping {
            match seen.get_mut(m as usize) {
                Some(s) if !*s => *s = true,
                _ => return false,
            }
        }
        true
    }
}

/// Picks, per file, the nucleus at the lower median of the file's y values.
pub fn select_representatives(frame: &FrameCloud, assignment: &FileAssignment) -> Result<RepresentativeSet> {
    let mut files: Vec<Vec<&crate::model::NucleusRecord>> = vec![Vec::new(); NUM_FILES];
    for n in &frame.nuclei {
        let label = assignment.label_of(&n.id).ok_or_else(|| Error::UnknownNucleus {
            frame: frame.frame_index,
            id: n.id.clone(),
        })?;
        files[label as usize].push(n);
    }
    let mut reps = Vec::with_capacity(NUM_FILES);
    for (label, mut members) in files.into_iter().enumerate() {
        if members.is_empty() {
            return Err(Error::MissingFile {
                frame: frame.frame_index,
                file_label: label as u8,
            });
        }
        members.sort_by(|a, b| a.position.y.total_cmp(&b.position.y).then_with(|| a.id.cmp(&b.id)));
        let pick = members[(members.len() - 1) / 2];
        reps.push(Representative {
            file_label: label as u8,
            id: pick.id.clone(),
            position: pick.position,
        });
    }
    Ok(RepresentativeSet {
        frame_index: frame.frame_index,
        reps,
    })
}

fn angles_in_basis(reps: &RepresentativeSet, basis: &PlaneBasis) -> Result<[f64; NUM_FILES]> {
    if reps.reps.len() != NUM_FILES {
        return Err(Error::DegenerateInput(format!(
            "expected {NUM_FILES} representatives, got {}",
            reps.reps.len()
        )));
    }
    let coords: Vec<Vec2> = reps.reps.iter().map(|r| basis.coords(&r.position)).collect();
    let centroid = coords.iter().sum::<Vec2>() / NUM_FILES as f64;
    let mut out = [0.0; NUM_FILES];
    for (slot, (c, r)) in out.iter_mut().zip(coords.iter().zip(&reps.reps)) {
        let d = c - centroid;
        if d.norm() < 1e-12 {
            return Err(Error::DegenerateGeometry(format!(
                "representative {} of file {} sits on the ring centroid",
                r.id, r.file_label
            )));
        }
        *slot = d.y.atan2(d.x).rem_euclid(TAU);
    }
    Ok(out)
}

/// Angle of each representative about the centroid of the eight projected
/// representatives, in [0, 2π), measured in the plane's deterministic basis.
pub fn polar_angles(reps: &RepresentativeSet, plane: &ProjectionPlane) -> Result<[f64; NUM_FILES]> {
    angles_in_basis(reps, &plane_basis(plane))
}

/// Wraps an angle difference into (-π, π].
pub fn wrap_angle(d: f64) -> f64 {
    let w = d.rem_euclid(TAU);
    if w > PI {
        w - TAU
    } else {
        w
    }
}

fn cyclic_order(angles: &[f64; NUM_FILES], start: usize) -> [usize; NUM_FILES] {
    let mut order: [usize; NUM_FILES] = std::array::from_fn(|i| i);
    let key = |i: usize| (angles[i] - angles[start]).rem_euclid(TAU);
    order.sort_by(|&a, &b| key(a).total_cmp(&key(b)).then(a.cmp(&b)));
    // The start always leads even if rounding left it a hair below TAU.
    let pos = order.iter().position(|&i| i == start).unwrap();
    order.rotate_left(pos);
    order
}

/// Matches the eight files of frame t to those of frame t+1.
///
/// The t+1 normal is flipped into the hemisphere of the t normal, and the
/// t+1 chart uses the t basis carried onto the t+1 plane, so both charts
/// share orientation even when the planes differ slightly.
pub fn match_files(
    reps_t: &RepresentativeSet,
    reps_t1: &RepresentativeSet,
    plane_t: &ProjectionPlane,
    plane_t1: &ProjectionPlane,
) -> Result<FileCorrespondence> {
    let basis_t = plane_basis(plane_t);
    let basis_t1 = basis_t.transported_to(&plane_t1.aligned_with(plane_t))?;
    let a_t = angles_in_basis(reps_t, &basis_t)?;
    let a_t1 = angles_in_basis(reps_t1, &basis_t1)?;

    // Anchor: file 0 goes to the smallest wrapped displacement; on an exact
    // tie the counterclockwise (positive) candidate wins.
    let anchor = (0..NUM_FILES)
        .min_by(|&i, &j| {
            let di = wrap_angle(a_t1[i] - a_t[0]);
            let dj = wrap_angle(a_t1[j] - a_t[0]);
            di.abs()
                .total_cmp(&dj.abs())
                .then_with(|| dj.total_cmp(&di))
                .then(i.cmp(&j))
        })
        .unwrap();

    let order_t = cyclic_order(&a_t, 0);
    let order_t1 = cyclic_order(&a_t1, anchor);
    let mut mapping = [0u8; NUM_FILES];
    for (&from, &to) in order_t.iter().zip(&order_t1) {
        mapping[from] = to as u8;
    }
    Ok(FileCorrespondence {
        frame: reps_t.frame_index,
        mapping,
    })
}

/// Relabels every frame so each physical file keeps its frame-0 label.
///
/// `assignments` must be ordered by frame; `correspondences` must cover every
/// consecutive pair.
pub fn propagate_labels(
    assignments: &[FileAssignment],
    correspondences: &[FileCorrespondence],
) -> Result<Vec<FileAssignment>> {
    let mut out = Vec::with_capacity(assignments.len());
    // local label -> global label for the current frame
    let mut to_global: [u8; NUM_FILES] = std::array::from_fn(|i| i as u8);
    for (i, asg) in assignments.iter().enumerate() {
        if i > 0 {
            let prev = assignments[i - 1].frame_index;
            let corr = correspondences
                .iter()
                .find(|c| c.frame == prev)
                .ok_or(Error::MissingCorrespondence(prev))?;
            let mut next = [0u8; NUM_FILES];
            for (local_t, &local_t1) in corr.mapping.iter().enumerate() {
                next[local_t1 as usize] = to_global[local_t];
            }
            to_global = next;
        }
        out.push(asg.relabeled(&to_global));
    }
    Ok(out)
}
