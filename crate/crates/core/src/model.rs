//! Domain records for annotated nuclei and the plane geometry used to chart
//! them.
//!
//! Positions are in micrometers. The y axis is the root's longitudinal axis.
//! Every projection plane passes through the coordinate origin, so
//! projection is a linear map.

use std::collections::HashSet;
use std::fmt;

use nalgebra::{Rotation3, Unit};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Vec2 = nalgebra::Vector2<f64>;

/// Default voxel size (z, y, x) in micrometers.
pub const DEFAULT_VOXEL_SIZE_UM: [f64; 3] = [2.5, 0.61, 0.61];

/// Default interval between frames, in minutes.
pub const DEFAULT_TIME_INTERVAL_MIN: f64 = 30.0;

const UNIT_TOL: f64 = 1e-9;

/// Opaque nucleus identifier, unique within one frame.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NucleusId(pub String);

impl fmt::Display for NucleusId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NucleusId {
    fn from(s: &str) -> Self {
        NucleusId(s.to_owned())
    }
}

impl From<String> for NucleusId {
    fn from(s: String) -> Self {
        NucleusId(s)
    }
}

impl From<usize> for NucleusId {
    fn from(n: usize) -> Self {
        NucleusId(n.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    NonMitotic,
    Mitotic,
}

impl Phase {
    pub fn is_mitotic(self) -> bool {
        matches!(self, Phase::Mitotic)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::NonMitotic => "non_mitotic",
            Phase::Mitotic => "mitotic",
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "non_mitotic" => Ok(Phase::NonMitotic),
            "mitotic" => Ok(Phase::Mitotic),
            other => Err(format!("unknown phase {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NucleusRecord {
    pub frame_index: usize,
    pub id: NucleusId,
    pub position: Vec3,
    pub phase: Phase,
}

impl NucleusRecord {
    pub fn new(frame_index: usize, id: impl Into<NucleusId>, position: Vec3, phase: Phase) -> Self {
        Self {
            frame_index,
            id: id.into(),
            position,
            phase,
        }
    }
}

/// All nuclei annotated in one volume.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameCloud {
    pub frame_index: usize,
    pub nuclei: Vec<NucleusRecord>,
    pub time_interval_min: f64,
}

impl FrameCloud {
    /// Builds a frame, checking that ids are unique, positions finite and
    /// every record carries `frame_index`.
    pub fn new(frame_index: usize, nuclei: Vec<NucleusRecord>, time_interval_min: f64) -> Result<Self> {
        let mut seen = HashSet::with_capacity(nuclei.len());
        for n in &nuclei {
            if n.frame_index != frame_index {
                return Err(Error::DegenerateInput(format!(
                    "nucleus {} carries frame {} inside frame {frame_index}",
                    n.id, n.frame_index
                )));
            }
            if !n.position.iter().all(|c| c.is_finite()) {
                return Err(Error::DegenerateInput(format!(
                    "nucleus {} in frame {frame_index} has a non-finite position",
                    n.id
                )));
            }
            if !seen.insert(&n.id) {
                return Err(Error::DegenerateInput(format!(
                    "duplicate nucleus id {} in frame {frame_index}",
                    n.id
                )));
            }
        }
        Ok(Self {
            frame_index,
            nuclei,
            time_interval_min,
        })
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.nuclei.iter().map(|n| n.position).collect()
    }

    pub fn len(&self) -> usize {
        self.nuclei.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nuclei.is_empty()
    }

    pub fn get(&self, id: &NucleusId) -> Option<&NucleusRecord> {
        self.nuclei.iter().find(|n| &n.id == id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub frames: Vec<FrameCloud>,
    /// (z, y, x) voxel size in micrometers; metadata only.
    pub voxel_size_um: [f64; 3],
}

impl Dataset {
    /// Frames must be indexed 0, 1, 2, ... in order.
    pub fn new(frames: Vec<FrameCloud>) -> Result<Self> {
        for (i, f) in frames.iter().enumerate() {
            if f.frame_index != i {
                return Err(Error::DegenerateInput(format!(
                    "frame indices must be contiguous from 0; found {} at position {i}",
                    f.frame_index
                )));
            }
        }
        Ok(Self {
            frames,
            voxel_size_um: DEFAULT_VOXEL_SIZE_UM,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn frame(&self, t: usize) -> Option<&FrameCloud> {
        self.frames.get(t)
    }

    pub fn num_nuclei(&self) -> usize {
        self.frames.iter().map(FrameCloud::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn unit(self) -> Vec3 {
        match self {
            Axis::X => Vec3::x(),
            Axis::Y => Vec3::y(),
            Axis::Z => Vec3::z(),
        }
    }
}

/// A plane through the origin, stored as its unit normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionPlane {
    normal: Vec3,
}

impl ProjectionPlane {
    /// Normalizes `normal`; fails on zero or non-finite input.
    pub fn new(normal: Vec3) -> Result<Self> {
        let norm = normal.norm();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(Error::DegenerateGeometry(format!(
                "plane normal {normal:?} cannot be normalized"
            )));
        }
        Ok(Self { normal: normal / norm })
    }

    /// Wraps a vector that is already unit length.
    pub(crate) fn from_unit(normal: Vec3) -> Self {
        debug_assert!((normal.norm() - 1.0).abs() < UNIT_TOL, "{normal:?}");
        Self { normal }
    }

    pub fn from_axis(axis: Axis) -> Self {
        Self::from_unit(axis.unit())
    }

    pub fn normal(&self) -> Vec3 {
        self.normal
    }

    pub fn flipped(&self) -> Self {
        Self { normal: -self.normal }
    }

    /// Returns this plane with its normal flipped if needed so that it points
    /// into the same half-space as `reference`.
    pub fn aligned_with(&self, reference: &ProjectionPlane) -> Self {
        if self.normal.dot(&reference.normal) < 0.0 {
            self.flipped()
        } else {
            *self
        }
    }

    /// Unsigned angle between the two planes, in degrees (0..=90).
    pub fn angle_to_deg(&self, other: &ProjectionPlane) -> f64 {
        let c = self.normal.dot(&other.normal).abs().min(1.0);
        c.acos().to_degrees()
    }
}

/// Orthonormal pair spanning a plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneBasis {
    pub u: Vec3,
    pub v: Vec3,
}

impl PlaneBasis {
    pub fn coords(&self, p: &Vec3) -> Vec2 {
        Vec2::new(p.dot(&self.u), p.dot(&self.v))
    }

    /// Carries this basis onto another plane with the smallest rotation:
    /// `u` is projected onto the new plane and `v` completes a right-handed
    /// frame with the new normal.
    pub fn transported_to(&self, plane: &ProjectionPlane) -> Result<PlaneBasis> {
        let n = plane.normal();
        let u = self.u - n * self.u.dot(&n);
        let len = u.norm();
        if len < 1e-9 {
            return Err(Error::DegenerateGeometry(
                "basis cannot be transported onto a perpendicular plane".into(),
            ));
        }
        let u = u / len;
        Ok(PlaneBasis { u, v: n.cross(&u) })
    }
}

/// Orthogonal projection of `p` onto the plane: `p - (p·n)n`.
pub fn project_point(p: &Vec3, plane: &ProjectionPlane) -> Vec3 {
    let n = plane.normal();
    p - n * p.dot(&n)
}

/// Deterministic in-plane basis: take the standard axis least aligned with
/// the normal (lowest index on ties), Gram-Schmidt it against the normal to
/// get `u`, and set `v = n × u`.
pub fn plane_basis(plane: &ProjectionPlane) -> PlaneBasis {
    let n = plane.normal();
    let mut best = Axis::X;
    let mut best_dot = n.x.abs();
    for (axis, d) in [(Axis::Y, n.y.abs()), (Axis::Z, n.z.abs())] {
        if d < best_dot {
            best = axis;
            best_dot = d;
        }
    }
    let e = best.unit();
    let u = (e - n * e.dot(&n)).normalize();
    let v = n.cross(&u);
    PlaneBasis { u, v }
}

/// 2D chart coordinates `(p·u, p·v)` in the deterministic basis.
pub fn to_plane_coords(points: &[Vec3], plane: &ProjectionPlane) -> Vec<Vec2> {
    let basis = plane_basis(plane);
    points.iter().map(|p| basis.coords(p)).collect()
}

/// Rotates the normal about a coordinate axis (right-handed, degrees).
pub fn rotate_plane(plane: &ProjectionPlane, axis: Axis, degrees: f64) -> ProjectionPlane {
    let rot = Rotation3::from_axis_angle(&Unit::new_unchecked(axis.unit()), degrees.to_radians());
    // A rotation is an isometry; renormalizing would perturb the bits of a
    // zero-degree rotation.
    ProjectionPlane::from_unit(rot * plane.normal())
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;

    fn plane(x: f64, y: f64, z: f64) -> ProjectionPlane {
        ProjectionPlane::new(Vec3::new(x, y, z)).unwrap()
    }

    #[test]
    fn projection_examples() {
        let p = project_point(&Vec3::new(1.0, 2.0, 3.0), &plane(0.0, 1.0, 0.0));
        assert_abs_diff_eq!(p, Vec3::new(1.0, 0.0, 3.0), epsilon = 1e-12);

        let p = project_point(&Vec3::new(4.0, -1.0, 0.0), &plane(0.0, 0.0, 1.0));
        assert_abs_diff_eq!(p, Vec3::new(4.0, -1.0, 0.0), epsilon = 1e-12);

        // p - (p·n)n with n = (1,1,1)/√3: p·n = √3, (p·n)n = (1,1,1).
        let p = project_point(&Vec3::new(1.0, 1.0, 1.0), &plane(1.0, 1.0, 1.0));
        assert_abs_diff_eq!(p, Vec3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn basis_examples() {
        let b = plane_basis(&plane(0.0, 0.0, 1.0));
        assert_abs_diff_eq!(b.u, Vec3::x(), epsilon = 1e-12);
        assert_abs_diff_eq!(b.v, Vec3::y(), epsilon = 1e-12);

        let b = plane_basis(&plane(1.0, 0.0, 0.0));
        assert_abs_diff_eq!(b.u, Vec3::y(), epsilon = 1e-12);
        assert_abs_diff_eq!(b.v, Vec3::z(), epsilon = 1e-12);

        let pl = plane(1.0, 1.0, 1.0);
        let n = pl.normal();
        let b = plane_basis(&pl);
        assert!(b.u.dot(&b.v).abs() < 1e-9);
        assert!(b.u.dot(&n).abs() < 1e-9);
        assert!(b.v.dot(&n).abs() < 1e-9);
        assert!((b.u.norm() - 1.0).abs() < 1e-9);
        assert!((b.v.norm() - 1.0).abs() < 1e-9);
        // All axes tie; x wins, so u lies in the span of x and n.
        assert!(b.u.dot(&Vec3::x()) > 0.0);
    }

    #[test]
    fn chart_examples() {
        // n = y: least aligned axis is x, u = x, v = n × u = -z.
        let c = to_plane_coords(&[Vec3::new(3.0, 5.0, 4.0)], &plane(0.0, 1.0, 0.0));
        assert_abs_diff_eq!(c[0], Vec2::new(3.0, -4.0), epsilon = 1e-12);

        let c = to_plane_coords(&[Vec3::zeros()], &plane(0.3, -0.2, 0.9));
        assert_abs_diff_eq!(c[0], Vec2::zeros(), epsilon = 1e-12);

        let pl = plane(0.3, -0.2, 0.9);
        let a = Vec3::new(1.0, 2.0, 3.0);
        let b = a + pl.normal() * 7.5;
        let c = to_plane_coords(&[a, b], &pl);
        assert_abs_diff_eq!(c[0], c[1], epsilon = 1e-12);
    }

    #[test]
    fn rotation_examples() {
        let r = rotate_plane(&plane(1.0, 0.0, 0.0), Axis::Z, 90.0);
        assert_abs_diff_eq!(r.normal(), Vec3::y(), epsilon = 1e-12);

        let p = plane(0.2, 0.7, -0.4);
        assert_eq!(rotate_plane(&p, Axis::X, 0.0), p);

        let r = rotate_plane(&plane(1.0, 0.0, 0.0), Axis::Z, 0.1);
        let t = 0.1_f64.to_radians();
        assert_abs_diff_eq!(r.normal(), Vec3::new(t.cos(), t.sin(), 0.0), epsilon = 1e-12);
    }

    #[test]
    fn frame_validation() {
        let dup = vec![
            NucleusRecord::new(0, "a", Vec3::zeros(), Phase::NonMitotic),
            NucleusRecord::new(0, "a", Vec3::x(), Phase::NonMitotic),
        ];
        assert!(FrameCloud::new(0, dup, 30.0).is_err());

        let nan = vec![NucleusRecord::new(
            0,
            "a",
            Vec3::new(f64::NAN, 0.0, 0.0),
            Phase::Mitotic,
        )];
        assert!(FrameCloud::new(0, nan, 30.0).is_err());

        let f1 = FrameCloud::new(1, vec![], 30.0).unwrap();
        assert!(Dataset::new(vec![f1]).is_err());
    }

    #[test]
    fn zero_normal_rejected() {
        assert!(ProjectionPlane::new(Vec3::zeros()).is_err());
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        fn vec3() -> impl Strategy<Value = Vec3> {
            (-50.0..50.0, -50.0..50.0, -50.0..50.0).prop_map(|(x, y, z)| Vec3::new(x, y, z))
        }

        fn unit() -> impl Strategy<Value = ProjectionPlane> {
            vec3()
                .prop_filter("non-zero", |v| v.norm() > 1e-3)
                .prop_map(|v| ProjectionPlane::new(v).unwrap())
        }

        proptest! {
            #[test]
            fn projection_idempotent_and_sign_symmetric(p in vec3(), pl in unit()) {
                let once = project_point(&p, &pl);
                let twice = project_point(&once, &pl);
                prop_assert!((once - twice).norm() < 1e-9);
                prop_assert!(once.dot(&pl.normal()).abs() < 1e-9);
                prop_assert_eq!(once, project_point(&p, &pl.flipped()));
            }

            #[test]
            fn chart_is_isometric(a in vec3(), b in vec3(), pl in unit()) {
                let pa = project_point(&a, &pl);
                let pb = project_point(&b, &pl);
                let c = to_plane_coords(&[pa, pb], &pl);
                prop_assert!(((pa - pb).norm() - (c[0] - c[1]).norm()).abs() < 1e-9);
            }

            #[test]
            fn rotation_round_trip(pl in unit(), deg in -180.0..180.0f64, axis in 0usize..3) {
                let axis = [Axis::X, Axis::Y, Axis::Z][axis];
                let back = rotate_plane(&rotate_plane(&pl, axis, deg), axis, -deg);
                prop_assert!((back.normal() - pl.normal()).norm() < 1e-9);
            }
        }
    }
}
