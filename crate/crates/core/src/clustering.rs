//! K-means partition of charted nuclei into the eight cortex cell files.

use std::collections::{BTreeMap, HashMap, HashSet};

use nalgebra::SVector;
use rand::{seq::index, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{to_plane_coords, FrameCloud, NucleusId, ProjectionPlane, Vec2};

/// Cortex cell files per root.
pub const NUM_FILES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub k: usize,
    pub n_init: usize,
    pub max_iterations: usize,
    /// Largest centroid displacement that still counts as converged.
    pub tolerance: f64,
    pub rng_seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: NUM_FILES,
            n_init: 10,
            max_iterations: 300,
            tolerance: 1e-4,
            rng_seed: 0,
        }
    }
}

impl KMeansConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n_init == 0 {
            return Err(Error::Config("k and n_init must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans<const D: usize> {
    pub labels: Vec<usize>,
    pub centroids: Vec<SVector<f64, D>>,
    /// Within-cluster sum of squared distances.
    pub inertia: f64,
    /// Inertia after every centroid update of the winning restart.
    pub inertia_trace: Vec<f64>,
    pub restart: usize,
}

fn count_distinct<const D: usize>(points: &[SVector<f64, D>]) -> Vec<usize> {
    let mut seen = HashSet::with_capacity(points.len());
    let mut firsts = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let key: Vec<u64> = p.iter().map(|c| (c + 0.0).to_bits()).collect();
        if seen.insert(key) {
            firsts.push(i);
        }
    }
    firsts
}

fn nearest<const D: usize>(p: &SVector<f64, D>, centroids: &[SVector<f64, D>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centroids.iter().enumerate() {
        let d = (p - c).norm_squared();
        // Strict comparison: ties stay with the lowest centroid index.
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

fn sse<const D: usize>(points: &[SVector<f64, D>], labels: &[usize], centroids: &[SVector<f64, D>]) -> f64 {
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| (p - centroids[l]).norm_squared())
        .sum()
}

/// Gives every empty cluster the point farthest from the centroid of the
/// currently largest cluster. Returns whether anything moved.
fn repair_empty<const D: usize>(
    points: &[SVector<f64, D>],
    labels: &mut [usize],
    centroids: &[SVector<f64, D>],
) -> bool {
    let k = centroids.len();
    let mut moved = false;
    loop {
        let mut counts = vec![0usize; k];
        for &l in labels.iter() {
            counts[l] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return moved;
        };
        let largest = (0..k)
            .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
            .unwrap();
        if counts[largest] < 2 {
            return moved;
        }
        let mut far = usize::MAX;
        let mut far_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            if labels[i] == largest {
                let d = (p - centroids[largest]).norm_squared();
                if d > far_d {
                    far = i;
                    far_d = d;
                }
            }
        }
        labels[far] = empty;
        moved = true;
    }
}

fn update<const D: usize>(points: &[SVector<f64, D>], labels: &[usize], centroids: &mut [SVector<f64, D>]) -> f64 {
    let k = centroids.len();
    let mut sums = vec![SVector::<f64, D>::zeros(); k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        sums[l] += p;
        counts[l] += 1;
    }
    let mut shift: f64 = 0.0;
    for j in 0..k {
        if counts[j] > 0 {
            let c = sums[j] / counts[j] as f64;
            shift = shift.max((c - centroids[j]).norm());
            centroids[j] = c;
        }
    }
    shift
}

/// One Lloyd run from the given centroids.
pub fn lloyd<const D: usize>(
    points: &[SVector<f64, D>],
    initial: Vec<SVector<f64, D>>,
    max_iterations: usize,
    tolerance: f64,
) -> KMeans<D> {
    let mut centroids = initial;
    let mut labels = vec![usize::MAX; points.len()];
    let mut trace = Vec::new();

    for it in 0..max_iterations.max(1) {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let l = nearest(p, &centroids);
            if labels[i] != l {
                labels[i] = l;
                changed = true;
            }
        }
        if it > 0 && !changed {
            break;
        }
        repair_empty(points, &mut labels, &centroids);
        let shift = update(points, &labels, &mut centroids);
        trace.push(sse(points, &labels, &centroids));
        if shift < tolerance {
            break;
        }
    }

    // Make labels consistent with the final centroids.
    let mut changed = false;
    for (i, p) in points.iter().enumerate() {
        let l = nearest(p, &centroids);
        if labels[i] != l {
            labels[i] = l;
            changed = true;
        }
    }
    changed |= repair_empty(points, &mut labels, &centroids);
    if changed {
        update(points, &labels, &mut centroids);
        trace.push(sse(points, &labels, &centroids));
    }
    let inertia = sse(points, &labels, &centroids);

    KMeans {
        labels,
        centroids,
        inertia,
        inertia_trace: trace,
        restart: 0,
    }
}

/// Lloyd's algorithm with `n_init` Forgy restarts; the lowest-inertia run
/// wins, ties going to the earlier restart.
pub fn kmeans<const D: usize>(points: &[SVector<f64, D>], config: &KMeansConfig) -> Result<KMeans<D>> {
    config.validate()?;
    let distinct = count_distinct(points);
    if distinct.len() < config.k {
        return Err(Error::InfeasibleClustering {
            k: config.k,
            distinct: distinct.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let inits: Vec<Vec<SVector<f64, D>>> = (0..config.n_init)
        .map(|_| {
            index::sample(&mut rng, distinct.len(), config.k)
                .into_iter()
                .map(|i| points[distinct[i]])
                .collect()
        })
        .collect();

    let runs: Vec<KMeans<D>> = inits
        .into_par_iter()
        .enumerate()
        .map(|(r, init)| {
            let mut run = lloyd(points, init, config.max_iterations, config.tolerance);
            run.restart = r;
            run
        })
        .collect();

    Ok(runs
        .into_iter()
        .min_by(|a, b| a.inertia.total_cmp(&b.inertia).then(a.restart.cmp(&b.restart)))
        .expect("n_init >= 1"))
}

/// Optimal one-to-one relabeling between two labelings of the same items.
#[derive(Debug, Clone, PartialEq)]
pub struct Relabeling {
    /// Items whose label agrees under the best mapping.
    pub matched: usize,
    pub total: usize,
    /// predicted label -> reference label.
    pub mapping: HashMap<usize, usize>,
}

impl Relabeling {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.matched as f64 / self.total as f64
        }
    }
}

/// Maximizes agreement over bijections between the two label sets via a
/// bitmask dynamic program on the contingency table. Each side may use at
/// most [`NUM_FILES`] distinct labels.
pub fn best_relabeling(predicted: &[usize], reference: &[usize]) -> Result<Relabeling> {
    assert_eq!(predicted.len(), reference.len());
    let index_of = |labels: &[usize]| -> Result<(Vec<usize>, Vec<usize>)> {
        let mut uniq: Vec<usize> = labels.to_vec();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.len() > NUM_FILES {
            return Err(Error::InvalidLabel {
                label: uniq.len() as u32,
                max: NUM_FILES as u32,
            });
        }
        let idx = labels.iter().map(|l| uniq.binary_search(l).unwrap()).collect();
        Ok((uniq, idx))
    };
    let (p_labels, p_idx) = index_of(predicted)?;
    let (r_labels, r_idx) = index_of(reference)?;
    let rows = p_labels.len();
    let cols = r_labels.len();

    let mut table = vec![[0usize; NUM_FILES]; rows];
    for (&p, &r) in p_idx.iter().zip(&r_idx) {
        table[p][r] += 1;
    }

    // dp[row][mask]: best score assigning rows[row..] given used columns.
    let full = 1usize << cols;
    let mut dp = vec![vec![0usize; full]; rows + 1];
    let mut choice = vec![vec![None; full]; rows];
    for row in (0..rows).rev() {
        for mask in 0..full {
            let mut best = dp[row + 1][mask];
            let mut pick = None;
            for c in 0..cols {
                if mask & (1 << c) == 0 {
                    let s = table[row][c] + dp[row + 1][mask | (1 << c)];
                    if s > best {
                        best = s;
                        pick = Some(c);
                    }
                }
            }
            dp[row][mask] = best;
            choice[row][mask] = pick;
        }
    }

    let mut mapping = HashMap::new();
    let mut mask = 0;
    for row in 0..rows {
        if let Some(c) = choice[row][mask] {
            mapping.insert(p_labels[row], r_labels[c]);
            mask |= 1 << c;
        }
    }
    // Rows left unmatched still need a target; give them unused columns.
    let mut free = (0..cols).filter(|c| mask & (1 << c) == 0);
    for &p in p_labels.iter().take(rows) {
        mapping
            .entry(p)
            .or_insert_with(|| free.next().map(|c| r_labels[c]).unwrap_or(usize::MAX));
    }

    Ok(Relabeling {
        matched: dp[0][0],
        total: predicted.len(),
        mapping,
    })
}

/// File labels of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FileAssignment {
    pub frame_index: usize,
    pub labels: BTreeMap<NucleusId, u8>,
    pub centroids: Vec<Vec2>,
}

impl FileAssignment {
    pub fn label_of(&self, id: &NucleusId) -> Option<u8> {
        self.labels.get(id).copied()
    }

    /// Relabels every nucleus through `map[old] = new`.
    pub fn relabeled(&self, map: &[u8; NUM_FILES]) -> FileAssignment {
        let labels = self
            .labels
            .iter()
            .map(|(id, &l)| (id.clone(), map[l as usize]))
            .collect();
        let mut centroids = self.centroids.clone();
        for (old, &new) in map.iter().enumerate() {
            if let (Some(c), Some(slot)) = (self.centroids.get(old), centroids.get_mut(new as usize)) {
                *slot = *c;
            }
        }
        FileAssignment {
            frame_index: self.frame_index,
            labels,
            centroids,
        }
    }
}

/// Clustering accuracy under the best bijective relabeling.
pub fn clustering_accuracy(predicted: &FileAssignment, truth: &HashMap<NucleusId, u8>) -> Result<f64> {
    let mut p = Vec::with_capacity(predicted.labels.len());
    let mut t = Vec::with_capacity(predicted.labels.len());
    for (id, &l) in &predicted.labels {
        let tl = truth.get(id).ok_or_else(|| Error::UnknownNucleus {
            frame: predicted.frame_index,
            id: id.clone(),
        })?;
        p.push(l as usize);
        t.push(*tl as usize);
    }
    if truth.len() != predicted.labels.len() {
        return Err(Error::DegenerateInput(format!(
            "frame {}: {} predicted labels vs {} true labels",
            predicted.frame_index,
            predicted.labels.len(),
            truth.len()
        )));
    }
    Ok(best_relabeling(&p, &t)?.accuracy())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Correction {
    pub frame: usize,
    pub id: NucleusId,
    pub label: u8,
}

/// Manual label overrides, unique per (frame, nucleus).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorrectionSet {
    entries: Vec<Correction>,
}

fn check_label(label: u32) -> Result<u8> {
    if label as usize >= NUM_FILES {
        return Err(Error::InvalidLabel {
            label,
            max: NUM_FILES as u32,
        });
    }
    Ok(label as u8)
}

impl CorrectionSet {
    pub fn new(entries: Vec<Correction>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            check_label(e.label as u32)?;
            if !seen.insert((e.frame, e.id.clone())) {
                return Err(Error::DegenerateInput(format!(
                    "duplicate correction for nucleus {} in frame {}",
                    e.id, e.frame
                )));
            }
        }
        Ok(Self { entries })
    }

    /// Inserts or replaces the entry for (frame, id).
    pub fn upsert(&mut self, frame: usize, id: NucleusId, label: u32) -> Result<()> {
        let label = check_label(label)?;
        match self.entries.iter_mut().find(|e| e.frame == frame && e.id == id) {
            Some(e) => e.label = label,
            None => self.entries.push(Correction { frame, id, label }),
        }
        Ok(())
    }

    pub fn entries(&self) -> &[Correction] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn for_frame(&self, frame: usize) -> impl Iterator<Item = &Correction> {
        self.entries.iter().filter(move |e| e.frame == frame)
    }
}

/// Overwrites the listed labels of this frame and recomputes centroids in
/// the chart of `plane`.
pub fn apply_corrections(
    assignment: &FileAssignment,
    corrections: &CorrectionSet,
    frame: &FrameCloud,
    plane: &ProjectionPlane,
) -> Result<FileAssignment> {
    let mut out = assignment.clone();
    let mut touched = false;
    for c in corrections.for_frame(assignment.frame_index) {
        let label = check_label(c.label as u32)?;
        let slot = out.labels.get_mut(&c.id).ok_or_else(|| Error::UnknownNucleus {
            frame: assignment.frame_index,
            id: c.id.clone(),
        })?;
        *slot = label;
        touched = true;
    }
    if touched {
        out.centroids = label_centroids(&out, frame, plane, &assignment.centroids);
    }
    Ok(out)
}

fn label_centroids(
    assignment: &FileAssignment,
    frame: &FrameCloud,
    plane: &ProjectionPlane,
    previous: &[Vec2],
) -> Vec<Vec2> {
    let coords = to_plane_coords(&frame.positions(), plane);
    let mut sums = [Vec2::zeros(); NUM_FILES];
    let mut counts = [0usize; NUM_FILES];
    for (n, c) in frame.nuclei.iter().zip(&coords) {
        if let Some(l) = assignment.label_of(&n.id) {
            sums[l as usize] += c;
            counts[l as usize] += 1;
        }
    }
    (0..NUM_FILES)
        .map(|j| {
            if counts[j] > 0 {
                sums[j] / counts[j] as f64
            } else {
                previous.get(j).copied().unwrap_or_else(Vec2::zeros)
            }
        })
        .collect()
}

/// Charts the frame on `plane` and partitions it into eight files.
pub fn cluster_frame(frame: &FrameCloud, plane: &ProjectionPlane, config: &KMeansConfig) -> Result<FileAssignment> {
    let coords = to_plane_coords(&frame.positions(), plane);
    let config = KMeansConfig {
        k: NUM_FILES,
        ..config.clone()
    };
    let km = kmeans(&coords, &config)?;
    Ok(FileAssignment {
        frame_index: frame.frame_index,
        labels: frame
            .nuclei
            .iter()
            .zip(&km.labels)
            .map(|(n, &l)| (n.id.clone(), l as u8))
            .collect(),
        centroids: km.centroids,
    })
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    use super::*;

    fn octagon_blobs(seed: u64) -> (Vec<Vec2>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for k in 0..8 {
            let a = k as f64 * PI / 4.0;
            for _ in 0..20 {
                pts.push(Vec2::new(
                    10.0 * a.cos() + noise.sample(&mut rng),
                    10.0 * a.sin() + noise.sample(&mut rng),
                ));
                truth.push(k);
            }
        }
        (pts, truth)
    }

    #[test]
    fn two_blobs() {
        let mut pts = vec![Vec2::new(0.0, 0.0), Vec2::new(0.5, 0.1), Vec2::new(-0.2, 0.3)];
        pts.extend([Vec2::new(100.0, 100.0), Vec2::new(100.4, 99.8), Vec2::new(99.7, 100.1)]);
        let km = kmeans(
            &pts,
            &KMeansConfig {
                k: 2,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(km.labels[0], km.labels[1]);
        assert_eq!(km.labels[0], km.labels[2]);
        assert_eq!(km.labels[3], km.labels[4]);
        assert_eq!(km.labels[3], km.labels[5]);
        assert_ne!(km.labels[0], km.labels[3]);
    }

    #[test]
    fn single_cluster_is_mean() {
        let pts = vec![Vec2::new(1.0, 2.0), Vec2::new(3.0, 4.0), Vec2::new(5.0, 0.0)];
        let km = kmeans(
            &pts,
            &KMeansConfig {
                k: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(km.labels.iter().all(|&l| l == 0));
        assert!((km.centroids[0] - Vec2::new(3.0, 2.0)).norm() < 1e-12);
    }

    #[test]
    fn octagon_blobs_recovered() {
        let (pts, truth) = octagon_blobs(5);
        // Brute-force check that the construction is separable: every point
        // is nearest its own vertex.
        for (p, &t) in pts.iter().zip(&truth) {
            let own = (0..8)
                .min_by(|&a, &b| {
                    let va = Vec2::new((a as f64 * PI / 4.0).cos(), (a as f64 * PI / 4.0).sin()) * 10.0;
                    let vb = Vec2::new((b as f64 * PI / 4.0).cos(), (b as f64 * PI / 4.0).sin()) * 10.0;
                    (p - va).norm().total_cmp(&(p - vb).norm())
                })
                .unwrap();
            assert_eq!(own, t);
        }
        let km = kmeans(&pts, &KMeansConfig::default()).unwrap();
        assert_eq!(best_relabeling(&km.labels, &truth).unwrap().accuracy(), 1.0);
    }

    #[test]
    fn infeasible_when_too_few_distinct_points() {
        let pts = vec![Vec2::new(1.0, 1.0); 20];
        assert!(matches!(
            kmeans(&pts, &KMeansConfig::default()),
            Err(Error::InfeasibleClustering { k: 8, distinct: 1 })
        ));
    }

    #[test]
    fn lloyd_inertia_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let pts: Vec<Vec2> = (0..200)
                .map(|_| Vec2::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)))
                .collect();
            let init: Vec<Vec2> = pts[..8].to_vec();
            let run = lloyd(&pts, init, 300, 0.0);
            for w in run.inertia_trace.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", run.inertia_trace);
            }
        }
    }

    #[test]
    fn empty_cluster_repaired() {
        // Two initial centroids far from every point: one would stay empty.
        let pts = vec![Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0), Vec2::new(10.0, 0.0)];
        let run = lloyd(&pts, vec![Vec2::new(0.5, 0.0), Vec2::new(-100.0, 0.0)], 50, 1e-9);
        let mut used: Vec<usize> = run.labels.clone();
        used.sort_unstable();
        used.dedup();
        assert_eq!(used, vec![0, 1]);
    }

    #[test]
    fn relabeling_examples() {
        let truth = vec![0, 0, 1, 1, 2, 2, 3, 3];
        assert_eq!(best_relabeling(&truth, &truth).unwrap().accuracy(), 1.0);
        let perm = vec![5, 5, 2, 2, 7, 7, 0, 0];
        assert_eq!(best_relabeling(&perm, &truth).unwrap().accuracy(), 1.0);
        let mut one_off = truth.clone();
        one_off[0] = 1;
        assert_eq!(best_relabeling(&one_off, &truth).unwrap().accuracy(), 7.0 / 8.0);
        let nine: Vec<usize> = (0..9).collect();
        assert!(best_relabeling(&nine, &nine).is_err());
    }

    fn assignment() -> (FrameCloud, FileAssignment, ProjectionPlane) {
        use crate::model::{NucleusRecord, Phase, Vec3};
        let nuclei = (0..16)
            .map(|i| {
                let a = (i % 8) as f64 * PI / 4.0;
                NucleusRecord::new(
                    0,
                    i,
                    Vec3::new(a.cos() * 10.0, i as f64, a.sin() * 10.0),
                    Phase::NonMitotic,
                )
            })
            .collect();
        let frame = FrameCloud::new(0, nuclei, 30.0).unwrap();
        let plane = ProjectionPlane::from_axis(crate::model::Axis::Y);
        let asg = cluster_frame(&frame, &plane, &KMeansConfig::default()).unwrap();
        (frame, asg, plane)
    }

    #[test]
    fn corrections() {
        let (frame, asg, plane) = assignment();
        let same = apply_corrections(&asg, &CorrectionSet::default(), &frame, &plane).unwrap();
        assert_eq!(same, asg);

        let id = NucleusId::from(3usize);
        let new_label = (asg.label_of(&id).unwrap() + 1) % 8;
        let set = CorrectionSet::new(vec![Correction {
            frame: 0,
            id: id.clone(),
            label: new_label,
        }])
        .unwrap();
        let fixed = apply_corrections(&asg, &set, &frame, &plane).unwrap();
        let diffs = asg.labels.iter().filter(|(k, v)| fixed.labels[*k] != **v).count();
        assert_eq!(diffs, 1);
        assert_eq!(fixed.label_of(&id), Some(new_label));

        let bad = CorrectionSet::new(vec![Correction {
            frame: 0,
            id: id.clone(),
            label: 9,
        }]);
        assert!(matches!(bad, Err(Error::InvalidLabel { label: 9, .. })));

        let unknown = CorrectionSet::new(vec![Correction {
            frame: 0,
            id: "nope".into(),
            label: 1,
        }])
        .unwrap();
        assert!(matches!(
            apply_corrections(&asg, &unknown, &frame, &plane),
            Err(Error::UnknownNucleus { .. })
        ));
    }

    #[test]
    fn accuracy_permutation_invariant() {
        let (_, asg, _) = assignment();
        let truth: HashMap<NucleusId, u8> = asg.labels.iter().map(|(k, v)| (k.clone(), *v)).collect();
        assert_eq!(clustering_accuracy(&asg, &truth).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let mut perm: [u8; 8] = [0, 1, 2, 3, 4, 5, 6, 7];
            use rand::seq::SliceRandom;
            perm.shuffle(&mut rng);
            assert_eq!(clustering_accuracy(&asg.relabeled(&perm), &truth).unwrap(), 1.0);
        }
    }
}
