//! Link-level scoring of predicted lineage against ground truth.
//!
//! A predicted parent→child link found in the truth is a true positive, one
//! absent from the truth a false positive, and a truth link never predicted a
//! false negative. A division contributes two links.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lineage::{LineageForest, NodeRef};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Link {
    pub parent: NodeRef,
    pub child: NodeRef,
}

impl Link {
    pub fn new(parent: NodeRef, child: NodeRef) -> Self {
        Self { parent, child }
    }
}

pub fn forest_links(forest: &LineageForest) -> Vec<Link> {
    forest.links().map(|(p, c)| Link::new(p.clone(), c.clone())).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingMetrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    /// Set when tp + fp = 0; precision is then reported as 1.0.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub precision_undefined: bool,
    /// Set when tp + fn = 0; recall is then reported as 1.0.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub recall_undefined: bool,
}

impl TrackingMetrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                (1.0, true)
            } else {
                (num as f64 / den as f64, false)
            }
        };
        let (precision, precision_undefined) = ratio(tp, tp + fp);
        let (recall, recall_undefined) = ratio(tp, tp + fn_);
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            precision_undefined,
            recall_undefined,
        }
    }

    pub fn is_perfect(&self) -> bool {
        self.fp == 0 && self.fn_ == 0
    }
}

fn check(links: &[Link]) -> Result<HashSet<&Link>> {
    for l in links {
        if l.child.frame != l.parent.frame + 1 {
            return Err(Error::MalformedLink(format!(
                "{} -> {} does not join consecutive frames",
                l.parent, l.child
            )));
        }
    }
    Ok(links.iter().collect())
}

pub fn compare_links(predicted: &[Link], truth: &[Link]) -> Result<TrackingMetrics> {
    let p = check(predicted)?;
    let t = check(truth)?;
    let tp = p.intersection(&t).count();
    Ok(TrackingMetrics::from_counts(tp, p.len() - tp, t.len() - tp))
}

/// Metrics split by the parent frame of each link; the per-frame counts
/// partition the pooled counts.
pub fn per_frame_breakdown(predicted: &[Link], truth: &[Link]) -> Result<BTreeMap<usize, TrackingMetrics>> {
    let p = check(predicted)?;
    let t = check(truth)?;
    let mut counts: BTreeMap<usize, (usize, usize, usize)> = BTreeMap::new();
    for l in &p {
        let c = counts.entry(l.parent.frame).or_default();
        if t.contains(l) {
            c.0 += 1;
        } else {
            c.1 += 1;
        }
    }
    for l in &t {
        if !p.contains(l) {
            counts.entry(l.parent.frame).or_default().2 += 1;
        }
    }
    Ok(counts
        .into_iter()
        .map(|(f, (tp, fp, fn_))| (f, TrackingMetrics::from_counts(tp, fp, fn_)))
        .collect())
}
