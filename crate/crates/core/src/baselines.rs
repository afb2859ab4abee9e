//! Comparison methods and analysis probes.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{Matrix3, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{clustering_accuracy, kmeans, FileAssignment, KMeansConfig};
use crate::error::{Error, Result};
use crate::ga::{random_unit, FitnessEvaluator};
use crate::lines::RepresentativeSet;
use crate::model::{Axis, FrameCloud, NucleusId, ProjectionPlane, Vec2, Vec3};

/// Principal axes of a point cloud, by descending variance.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    pub mean: Vec3,
    pub components: [Vec3; 3],
    pub explained_variance: [f64; 3],
}

pub fn pca(points: &[Vec3]) -> Result<PcaResult> {
    if points.len() < 3 {
        return Err(Error::DegenerateInput(format!(
            "PCA needs at least 3 points, got {}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let mean = points.iter().sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov /= n - 1.0;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let variance = order.map(|i| eig.eigenvalues[i].max(0.0));
    let scale = variance[0].max(f64::MIN_POSITIVE);
    let rank = variance.iter().filter(|&&v| v > 1e-12 * scale).count();
    if variance[0] <= 0.0 || rank < 2 {
        return Err(Error::RankDeficient {
            rank: if variance[0] <= 0.0 { 0 } else { rank },
        });
    }
    let mut components = order.map(|i| eig.eigenvectors.column(i).into_owned());
    // Right-handed and deterministic in sign.
    if components[0]
        .iter()
        .fold(0.0f64, |m, &c| if c.abs() > m.abs() { c } else { m })
        < 0.0
    {
        components[0] = -components[0];
    }
    if components[1]
        .iter()
        .fold(0.0f64, |m, &c| if c.abs() > m.abs() { c } else { m })
        < 0.0
    {
        components[1] = -components[1];
    }
    components[2] = components[0].cross(&components[1]);
    Ok(PcaResult {
        mean,
        components,
        explained_variance: variance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PcaVariant {
    /// Plane of the first two components.
    C12,
    /// Plane of the second and third components.
    C23,
}

pub fn pca_plane(points: &[Vec3], which: PcaVariant) -> Result<ProjectionPlane> {
    let r = pca(points)?;
    let normal = match which {
        PcaVariant::C12 => r.components[2],
        PcaVariant::C23 => r.components[0],
    };
    ProjectionPlane::new(normal)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FixedPlane {
    XZ,
    XY,
    YZ,
}

pub fn fixed_plane(which: FixedPlane) -> ProjectionPlane {
    ProjectionPlane::from_axis(match which {
        FixedPlane::XZ => Axis::Y,
        FixedPlane::XY => Axis::Z,
        FixedPlane::YZ => Axis::X,
    })
}

/// Nearest-neighbor file matching in 3D, one representative at a time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EuclideanLinks {
    /// Frame-t file label to the nearest frame-(t+1) file label.
    pub mapping: BTreeMap<u8, u8>,
    /// Frame-(t+1) labels claimed by more than one frame-t file.
    pub duplicates: Vec<u8>,
}

impl EuclideanLinks {
    pub fn is_bijection(&self) -> bool {
        self.duplicates.is_empty()
    }
}

pub fn greedy_euclidean_link(reps_t: &RepresentativeSet, reps_t1: &RepresentativeSet) -> EuclideanLinks {
    let mut mapping = BTreeMap::new();
    let mut claims: BTreeMap<u8, usize> = BTreeMap::new();
    for a in &reps_t.reps {
        let nearest = reps_t1
            .reps
            .iter()
            .min_by(|x, y| {
                (x.position - a.position)
                    .norm_squared()
                    .total_cmp(&(y.position - a.position).norm_squared())
                    .then(x.file_label.cmp(&y.file_label))
            })
            .map(|r| r.file_label);
        if let Some(b) = nearest {
            mapping.insert(a.file_label, b);
            *claims.entry(b).or_default() += 1;
        }
    }
    let duplicates = claims.into_iter().filter(|&(_, c)| c > 1).map(|(l, _)| l).collect();
    EuclideanLinks { mapping, duplicates }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PgdResult {
    pub plane: ProjectionPlane,
    pub fitness: f64,
    /// Fitness after each accepted step, starting with the start point.
    pub path: Vec<f64>,
    pub converged: bool,
}

const FD_STEP: f64 = 1e-6;

fn fd_gradient(f: &FitnessEvaluator, n: &Vec3, h: f64) -> Vec3 {
    let mut g = Vec3::zeros();
    for i in 0..3 {
        let mut plus = *n;
        let mut minus = *n;
        plus[i] += h;
        minus[i] -= h;
        g[i] = (f.eval_normal(&plus) - f.eval_normal(&minus)) / (2.0 * h);
    }
    g
}

/// Gradient descent on the unit sphere with finite-difference gradients.
///
/// Each step moves against the tangential gradient and renormalizes; a step
/// that raises the fitness is halved until it does not, and the run stops
/// when the step or the improvement falls below `1e-10`.
pub fn projected_gradient_descent(
    points: &[Vec3],
    start: &ProjectionPlane,
    step: f64,
    max_iter: usize,
) -> Result<PgdResult> {
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Config("step must be positive".into()));
    }
    let f = FitnessEvaluator::new(points)?;
    let mut n = start.normal();
    let mut value = f.eval_normal(&n);
    let mut path = vec![value];
    let mut converged = false;
    for _ in 0..max_iter {
        let g = fd_gradient(&f, &n, FD_STEP);
        let tangent = g - n * g.dot(&n);
        if tangent.norm() < 1e-12 {
            converged = true;
            break;
        }
        let mut s = step;
        let mut accepted = None;
        while s > 1e-12 {
            let cand = (n - tangent * s).normalize();
            let v = f.eval_normal(&cand);
            if v <= value {
                accepted = Some((cand, v));
                break;
            }
            s *= 0.5;
        }
        match accepted {
            Some((cand, v)) => {
                let gain = value - v;
                n = cand;
                value = v;
                path.push(v);
                if gain < 1e-10 {
                    converged = true;
                    break;
                }
            }
            None => {
                converged = true;
                break;
            }
        }
    }
    Ok(PgdResult {
        plane: ProjectionPlane::new(n)?,
        fitness: value,
        path,
        converged,
    })
}

/// Runs [`projected_gradient_descent`] from `starts` uniformly random
/// normals drawn from `seed`.
pub fn pgd_multistart(points: &[Vec3], starts: usize, seed: u64, step: f64, max_iter: usize) -> Result<Vec<PgdResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..starts)
        .map(|_| projected_gradient_descent(points, &ProjectionPlane::new(random_unit(&mut rng))?, step, max_iter))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HessianProbe {
    /// Symmetrized Hessian.
    pub hessian: Matrix3<f64>,
    /// Largest |H - Hᵀ| entry before symmetrization.
    pub asymmetry: f64,
    /// Ascending.
    pub eigenvalues: [f64; 3],
}

/// Central-difference Hessian of the fitness in ambient normal coordinates,
/// with normalization folded into the evaluation.
pub fn finite_diff_hessian(points: &[Vec3], plane: &ProjectionPlane, h: f64) -> Result<HessianProbe> {
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Config("h must be positive".into()));
    }
    let f = FitnessEvaluator::new(points)?;
    let n = plane.normal();
    let mut raw = Matrix3::zeros();
    for j in 0..3 {
        let mut plus = n;
        let mut minus = n;
        plus[j] += h;
        minus[j] -= h;
        let col = (fd_gradient(&f, &plus, h) - fd_gradient(&f, &minus, h)) / (2.0 * h);
        raw.set_column(j, &col);
    }
    let asymmetry = (raw - raw.transpose()).abs().max();
    let hessian = (raw + raw.transpose()) * 0.5;
    let mut eigenvalues: [f64; 3] = SymmetricEigen::new(hessian).eigenvalues.into();
    eigenvalues.sort_by(f64::total_cmp);
    Ok(HessianProbe {
        hessian,
        asymmetry,
        eigenvalues,
    })
}

/// Cluster id per point, `None` for noise.
pub fn dbscan(points: &[Vec2], eps: f64, min_pts: usize) -> Result<Vec<Option<usize>>> {
    if eps.is_nan() || eps <= 0.0 || min_pts == 0 {
        return Err(Error::Config("dbscan needs eps > 0 and min_pts >= 1".into()));
    }
    let eps2 = eps * eps;
    let neighbors = |i: usize| -> Vec<usize> {
        (0..points.len())
            .filter(|&j| (points[j] - points[i]).norm_squared() <= eps2)
            .collect()
    };
    let mut labels: Vec<Option<usize>> = vec![None; points.len()];
    let mut visited = vec![false; points.len()];
    let mut next = 0;
    for i in 0..points.len() {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        let seeds = neighbors(i);
        if seeds.len() < min_pts {
            continue;
        }
        let cluster = next;
        next += 1;
        labels[i] = Some(cluster);
        let mut queue = seeds;
        while let Some(j) = queue.pop() {
            if labels[j].is_none() {
                labels[j] = Some(cluster);
            }
            if visited[j] {
                continue;
            }
            visited[j] = true;
            let more = neighbors(j);
            if more.len() >= min_pts {
                queue.extend(more);
            }
        }
    }
    Ok(labels)
}

pub fn cluster_count(labels: &[Option<usize>]) -> usize {
    labels.iter().flatten().max().map_or(0, |m| m + 1)
}

/// K-means on raw 3D positions, with accuracy against `truth` when given.
pub fn kmeans_3d_control(
    frame: &FrameCloud,
    config: &KMeansConfig,
    truth: Option<&HashMap<NucleusId, u8>>,
) -> Result<(FileAssignment, Option<f64>)> {
    let km = kmeans(&frame.positions(), config)?;
    let labels = frame
        .nuclei
        .iter()
        .zip(&km.labels)
        .map(|(n, &l)| (n.id.clone(), l as u8))
        .collect();
    let asg = FileAssignment {
        frame_index: frame.frame_index,
        labels,
        centroids: vec![Vec2::zeros(); km.centroids.len()],
    };
    let accuracy = truth.map(|t| clustering_accuracy(&asg, t)).transpose()?;
    Ok((asg, accuracy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lines::Representative;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stretched_cloud(seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..400)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-100.0..100.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect()
    }

    #[test]
    fn pca_anisotropic_axes() {
        let pts = stretched_cloud(1);
        let r = pca(&pts).unwrap();
        assert!(r.components[0].y.abs() > 0.999);
        assert!(r.components[1].x.abs() > 0.999);
        let c12 = pca_plane(&pts, PcaVariant::C12).unwrap();
        assert!(c12.normal().z.abs() > 0.999);
        let c23 = pca_plane(&pts, PcaVariant::C23).unwrap();
        assert!(c23.normal().y.abs() > 0.999);
    }

    #[test]
    fn pca_collinear_rejected() {
        let pts: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert!(matches!(pca(&pts), Err(Error::RankDeficient { .. })));
        let same = vec![Vec3::new(1.0, 1.0, 1.0); 5];
        assert!(matches!(pca(&same), Err(Error::RankDeficient { rank: 0 })));
    }

    #[test]
    fn fixed_planes() {
        assert_eq!(fixed_plane(FixedPlane::XZ).normal(), Vec3::y());
        assert_eq!(fixed_plane(FixedPlane::XY).normal(), Vec3::z());
        assert_eq!(fixed_plane(FixedPlane::YZ).normal(), Vec3::x());
    }

    fn reps(points: &[Vec3]) -> RepresentativeSet {
        RepresentativeSet {
            frame_index: 0,
            reps: points
                .iter()
                .enumerate()
                .map(|(i, p)| Representative {
                    file_label: i as u8,
                    id: NucleusId::from(i),
                    position: *p,
                })
                .collect(),
        }
    }

    #[test]
    fn euclidean_identity_and_duplicate() {
        let pts: Vec<Vec3> = (0..8).map(|i| Vec3::new(i as f64 * 5.0, 0.0, 0.0)).collect();
        let r = greedy_euclidean_link(&reps(&pts), &reps(&pts));
        assert!(r.is_bijection());
        assert!(r.mapping.iter().all(|(a, b)| a == b));

        let t = reps(&[Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.1, 0.0, 0.0)]);
        let t1 = reps(&[Vec3::new(0.05, 0.0, 0.0), Vec3::new(10.0, 0.0, 0.0)]);
        let r = greedy_euclidean_link(&t, &t1);
        assert_eq!(r.duplicates, vec![0]);
        assert!(!r.is_bijection());
    }

    fn ring_points() -> Vec<Vec3> {
        let mut pts = Vec::new();
        for k in 0..8 {
            let a = (k as f64 * 45.0).to_radians();
            for s in 0..10 {
                let wobble = if k % 2 == 0 { 1.5 } else { -1.0 };
                pts.push(Vec3::new(
                    20.0 * a.cos() + wobble * (s as f64 * 0.7).sin(),
                    -8.0 * s as f64,
                    20.0 * a.sin(),
                ));
            }
        }
        pts
    }

    #[test]
    fn pgd_rejects_zero_step_and_stays_on_sphere() {
        let pts = ring_points();
        let start = ProjectionPlane::new(Vec3::new(0.3, 1.0, 0.2)).unwrap();
        assert!(projected_gradient_descent(&pts, &start, 0.0, 10).is_err());
        let r = projected_gradient_descent(&pts, &start, 0.05, 500).unwrap();
        assert_abs_diff_eq!(r.plane.normal().norm(), 1.0, epsilon = 1e-9);
        assert!(r.path.windows(2).all(|w| w[1] <= w[0]));
        assert!(r.fitness <= r.path[0]);
    }

    #[test]
    fn pgd_stationary_at_optimum() {
        let pts = ring_points();
        let first = projected_gradient_descent(&pts, &ProjectionPlane::from_axis(Axis::Y), 0.05, 2000).unwrap();
        let again = projected_gradient_descent(&pts, &first.plane, 0.05, 2000).unwrap();
        assert!(again.plane.angle_to_deg(&first.plane) < 0.05);
        assert!((again.fitness - first.fitness).abs() < 1e-6);
    }

    #[test]
    fn hessian_symmetric() {
        let pts = ring_points();
        let plane = ProjectionPlane::new(Vec3::new(0.2, 1.0, -0.1)).unwrap();
        let h = finite_diff_hessian(&pts, &plane, 1e-4).unwrap();
        assert!(h.asymmetry < 1e-6, "{}", h.asymmetry);
        assert_eq!(h.hessian, h.hessian.transpose());
        assert!(h.eigenvalues[0] <= h.eigenvalues[1] && h.eigenvalues[1] <= h.eigenvalues[2]);
        assert!(finite_diff_hessian(&pts, &plane, 0.0).is_err());
    }

    #[test]
    fn dbscan_examples() {
        let close: Vec<Vec2> = (0..5).map(|i| Vec2::new(i as f64 * 0.1, 0.0)).collect();
        let l = dbscan(&close, 1.0, 1).unwrap();
        assert!(l.iter().all(|&c| c == Some(0)));

        let mut pts = close.clone();
        pts.push(Vec2::new(50.0, 50.0));
        let l = dbscan(&pts, 1.0, 2).unwrap();
        assert_eq!(l[5], None);
        assert_eq!(cluster_count(&l), 1);
        assert!(dbscan(&pts, 0.0, 2).is_err());
    }

    #[test]
    fn dbscan_splits_stretched_file() {
        let mut pts = Vec::new();
        for k in 0..8 {
            let a = (k as f64 * 45.0).to_radians();
            let c = Vec2::new(20.0 * a.cos(), 20.0 * a.sin());
            let n = if k == 0 { 12 } else { 6 };
            let spread = if k == 0 { 3.0 } else { 0.4 };
            for i in 0..n {
                let off = (i as f64 - (n - 1) as f64 / 2.0) * spread;
                pts.push(c + Vec2::new(-a.sin(), a.cos()) * off);
            }
        }
        let l = dbscan(&pts, 1.0, 2).unwrap();
        assert_ne!(cluster_count(&l), 8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn pca_orthonormal(seed in 0u64..1000) {
            let r = pca(&stretched_cloud(seed)).unwrap();
            for i in 0..3 {
                prop_assert!((r.components[i].norm() - 1.0).abs() < 1e-9);
                for j in i + 1..3 {
                    prop_assert!(r.components[i].dot(&r.components[j]).abs() < 1e-9);
                }
            }
            prop_assert!(r.explained_variance[0] >= r.explained_variance[1]);
            prop_assert!(r.explained_variance[1] >= r.explained_variance[2]);
        }

        #[test]
        fn euclidean_bijective_iff_no_duplicates(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut cloud = || -> Vec<Vec3> {
                (0..8).map(|_| Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 0.0)).collect()
            };
            let r = greedy_euclidean_link(&reps(&cloud()), &reps(&cloud()));
            let mut targets: Vec<u8> = r.mapping.values().copied().collect();
            targets.sort_unstable();
            targets.dedup();
            prop_assert_eq!(targets.len() == 8, r.duplicates.is_empty());
        }
    }
}
