//! Nucleus-level linking inside each tracked file.
//!
//! Both frames' nuclei of a file are ranked by y, descending, and walked in
//! lockstep. A non-mitotic parent takes one child. A mitotic parent takes two
//! children when the next two candidates are both non-mitotic (the division
//! completed); if the next candidate is still mitotic the parent continues
//! 1:1. Every child must be consumed exactly once, otherwise the line is
//! reported as a [`ReconciliationError`] and contributes no links.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{FileAssignment, NUM_FILES};
use crate::error::{Error, ReconciliationError, Result};
use crate::model::{Dataset, FrameCloud, NucleusId, NucleusRecord, Phase};

/// A nucleus addressed by (frame, id).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeRef {
    pub frame: usize,
    pub id: NucleusId,
}

impl NodeRef {
    pub fn new(frame: usize, id: impl Into<NucleusId>) -> Self {
        Self { frame, id: id.into() }
    }
}

impl std::fmt::Display for NodeRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}@{}", self.id, self.frame)
    }
}

/// The nuclei of one file in one frame, ranked by y descending.
#[derive(Debug, Clone, PartialEq)]
pub struct FileOfNuclei {
    pub frame_index: usize,
    pub file_label: u8,
    pub nuclei: Vec<NucleusRecord>,
}

impl FileOfNuclei {
    /// Sorts by y descending; equal y falls back to ascending id.
    pub fn new(frame_index: usize, file_label: u8, mut nuclei: Vec<NucleusRecord>) -> Self {
        nuclei.sort_by(|a, b| b.position.y.total_cmp(&a.position.y).then_with(|| a.id.cmp(&b.id)));
        Self {
            frame_index,
            file_label,
            nuclei,
        }
    }

    pub fn len(&self) -> usize {
        self.nuclei.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nuclei.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageEdge {
    pub parent: NodeRef,
    pub children: Vec<NodeRef>,
}

impl LineageEdge {
    pub fn is_division(&self) -> bool {
        self.children.len() == 2
    }
}

/// Situations the walk resolved by rule but that deserve a look.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LinkDiagnostic {
    /// A mitotic parent whose next candidates were not two non-mitotic
    /// nuclei nor a mitotic one; linked 1:1 to the first candidate.
    UnresolvedMitosis { file_label: u8, parent: NodeRef },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LineLinks {
    pub edges: Vec<LineageEdge>,
    pub diagnostics: Vec<LinkDiagnostic>,
}

/// Links one file between frames t and t+1.
pub fn link_line(line_t: &FileOfNuclei, line_t1: &FileOfNuclei) -> std::result::Result<LineLinks, ReconciliationError> {
    let parents = &line_t.nuclei;
    let children = &line_t1.nuclei;
    let (m, n) = (parents.len(), children.len());
    let node = |r: &NucleusRecord| NodeRef::new(r.frame_index, r.id.clone());
    let mismatch = |j: usize, k: usize| ReconciliationError {
        file_label: line_t.file_label,
        frame_t: line_t.frame_index,
        parents_left: m - j,
        children_left: n - k,
    };

    let mut out = LineLinks::default();
    let (mut j, mut k) = (0, 0);
    while j < m && k < n {
        let parent = &parents[j];
        let take = match parent.phase {
            Phase::NonMitotic => 1,
            Phase::Mitotic => {
                let first = children[k].phase;
                let second = children.get(k + 1).map(|c| c.phase);
                match (first, second) {
                    (Phase::NonMitotic, Some(Phase::NonMitotic)) => 2,
                    (Phase::Mitotic, _) => 1,
                    _ => {
                        out.diagnostics.push(LinkDiagnostic::UnresolvedMitosis {
                            file_label: line_t.file_label,
                            parent: node(parent),
                        });
                        1
                    }
                }
            }
        };
        out.edges.push(LineageEdge {
            parent: node(parent),
            children: children[k..k + take].iter().map(node).collect(),
        });
        j += 1;
        k += take;
    }
    if j < m || k < n {
        return Err(mismatch(j, k));
    }
    Ok(out)
}

/// Parent→child links over a whole dataset. Equality ignores edge order.
#[derive(Debug, Clone, Default)]
pub struct LineageForest {
    edges: Vec<LineageEdge>,
    by_parent: HashMap<NodeRef, usize>,
    parent_of: HashMap<NodeRef, NodeRef>,
}

impl LineageForest {
    /// Validates the forest invariants: 1 or 2 children, links only between
    /// consecutive frames, at most one parent per child and one edge per
    /// parent.
    pub fn new(edges: Vec<LineageEdge>) -> Result<Self> {
        let mut by_parent = HashMap::with_capacity(edges.len());
        let mut parent_of = HashMap::with_capacity(edges.len());
        for (i, e) in edges.iter().enumerate() {
            if e.children.is_empty() || e.children.len() > 2 {
                return Err(Error::MalformedLink(format!(
                    "{} has {} children",
                    e.parent,
                    e.children.len()
                )));
            }
            if by_parent.insert(e.parent.clone(), i).is_some() {
                return Err(Error::MalformedLink(format!("{} has more than one edge", e.parent)));
            }
            for c in &e.children {
                if c.frame != e.parent.frame + 1 {
                    return Err(Error::MalformedLink(format!(
                        "{} -> {} does not join consecutive frames",
                        e.parent, c
                    )));
                }
                if parent_of.insert(c.clone(), e.parent.clone()).is_some() {
                    return Err(Error::MalformedLink(format!("{c} has more than one parent")));
                }
            }
        }
        Ok(Self {
            edges,
            by_parent,
            parent_of,
        })
    }

    fn canonical(&self) -> Vec<(&NodeRef, Vec<&NodeRef>)> {
        let mut v: Vec<_> = self
            .edges
            .iter()
            .map(|e| {
                let mut c: Vec<&NodeRef> = e.children.iter().collect();
                c.sort();
                (&e.parent, c)
            })
            .collect();
        v.sort();
        v
    }

    pub fn edges(&self) -> &[LineageEdge] {
        &self.edges
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Every parent→child pair; a division contributes two.
    pub fn links(&self) -> impl Iterator<Item = (&NodeRef, &NodeRef)> {
        self.edges
            .iter()
            .flat_map(|e| e.children.iter().map(move |c| (&e.parent, c)))
    }

    pub fn children_of(&self, node: &NodeRef) -> &[NodeRef] {
        self.by_parent
            .get(node)
            .map(|&i| self.edges[i].children.as_slice())
            .unwrap_or(&[])
    }

    pub fn parent_of(&self, node: &NodeRef) -> Option<&NodeRef> {
        self.parent_of.get(node)
    }

    fn contains(&self, node: &NodeRef) -> bool {
        self.by_parent.contains_key(node) || self.parent_of.contains_key(node)
    }

    /// Transitive closure of children, in breadth-first order.
    pub fn descendants(&self, node: &NodeRef) -> Result<Vec<NodeRef>> {
        if !self.contains(node) {
            return Err(Error::UnknownNucleus {
                frame: node.frame,
                id: node.id.clone(),
            });
        }
        let mut out = Vec::new();
        let mut frontier = vec![node.clone()];
        while !frontier.is_empty() {
            let mut next = Vec::new();
            for n in &frontier {
                next.extend(self.children_of(n).iter().cloned());
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        Ok(out)
    }

    /// The tree rooted at `root`, grouped by frame (root included).
    pub fn track_of(&self, root: &NodeRef) -> Result<BTreeMap<usize, Vec<NodeRef>>> {
        let mut track: BTreeMap<usize, Vec<NodeRef>> = BTreeMap::new();
        track.entry(root.frame).or_default().push(root.clone());
        for d in self.descendants(root)? {
            track.entry(d.frame).or_default().push(d);
        }
        Ok(track)
    }

    pub fn division_events(&self) -> Vec<&LineageEdge> {
        self.edges.iter().filter(|e| e.is_division()).collect()
    }

    /// Nodes that have children but no parent.
    pub fn roots(&self) -> Vec<&NodeRef> {
        let mut roots: Vec<&NodeRef> = self
            .edges
            .iter()
            .map(|e| &e.parent)
            .filter(|p| !self.parent_of.contains_key(*p))
            .collect();
        roots.sort();
        roots
    }

    /// Number of frames spanned by each root's tree.
    pub fn track_lengths(&self) -> BTreeMap<NodeRef, usize> {
        self.roots()
            .into_iter()
            .map(|r| {
                let len = self.track_of(r).map(|t| t.len()).unwrap_or(1);
                (r.clone(), len)
            })
            .collect()
    }

    /// Distance from the tree root.
    pub fn depth(&self, node: &NodeRef) -> usize {
        let mut d = 0;
        let mut cur = node;
        while let Some(p) = self.parent_of.get(cur) {
            d += 1;
            cur = p;
        }
        d
    }
}

/// Result of linking a whole dataset. Lines that failed to reconcile are
/// listed in `errors` and contribute no links to `forest`.
#[derive(Debug, Clone, Default)]
pub struct TrackingReport {
    pub forest: LineageForest,
    pub errors: Vec<ReconciliationError>,
    pub diagnostics: Vec<LinkDiagnostic>,
}

impl TrackingReport {
    pub fn is_clean(&self) -> bool {
        self.errors.is_empty()
    }
}

impl PartialEq for LineageForest {
    fn eq(&self, other: &Self) -> bool {
        self.edges.len() == other.edges.len() && self.canonical() == other.canonical()
    }
}

/// Splits a frame into its eight files using globally consistent labels.
pub fn files_of(frame: &FrameCloud, assignment: &FileAssignment) -> Result<Vec<FileOfNuclei>> {
    let mut groups: Vec<Vec<NucleusRecord>> = vec![Vec::new(); NUM_FILES];
    for n in &frame.nuclei {
        let label = assignment.label_of(&n.id).ok_or_else(|| Error::UnknownNucleus {
            frame: frame.frame_index,
            id: n.id.clone(),
        })?;
        groups
            .get_mut(label as usize)
            .ok_or(Error::InvalidLabel {
                label: label as u32,
                max: NUM_FILES as u32,
            })?
            .push(n.clone());
    }
    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(l, g)| FileOfNuclei::new(frame.frame_index, l as u8, g))
        .collect())
}

/// Links every file across every consecutive frame pair.
///
/// `assignments[t]` must label frame t with labels that mean the same
/// physical file in every frame.
pub fn track_dataset(dataset: &Dataset, assignments: &[FileAssignment]) -> Result<TrackingReport> {
    if assignments.len() != dataset.num_frames() {
        return Err(Error::DegenerateInput(format!(
            "{} assignments for {} frames",
            assignments.len(),
            dataset.num_frames()
        )));
    }
    let files: Vec<Vec<FileOfNuclei>> = dataset
        .frames
        .iter()
        .zip(assignments)
        .map(|(f, a)| files_of(f, a))
        .collect::<Result<_>>()?;

    let per_pair: Vec<Vec<std::result::Result<LineLinks, ReconciliationError>>> = files
        .par_windows(2)
        .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| link_line(a, b)).collect())
        .collect();

    let mut report = TrackingReport::default();
    let mut edges = Vec::new();
    for line in per_pair.into_iter().flatten() {
        match line {
            Ok(l) => {
                edges.extend(l.edges);
                report.diagnostics.extend(l.diagnostics);
            }
            Err(e) => report.errors.push(e),
        }
    }
    report.forest = LineageForest::new(edges)?;
    Ok(report)
}
