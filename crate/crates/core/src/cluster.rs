//! Salient region detection: DBSCAN over segment boxes under the boundary distance.

use serde::{Deserialize, Serialize};

use crate::doc::{boundary_distance, union_box, BBox, Segment};
use crate::error::{Error, Result};

/// Radius used for FUNSD-style pages.
pub const DEFAULT_RADIUS: f64 = 30.0;
pub const DEFAULT_MIN_PTS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    /// Neighborhood radius in page pixels.
    pub radius: f64,
    /// Number of *other* boxes that must lie within `radius` for a box to be core.
    pub min_pts: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self { radius: DEFAULT_RADIUS, min_pts: DEFAULT_MIN_PTS }
    }
}

impl ClusterParams {
    pub fn new(radius: f64, min_pts: usize) -> Self {
        Self { radius, min_pts }
    }

    /// Like [`ClusterParams::new`] but rejects a negative or non-finite radius.
    pub fn try_new(radius: f64, min_pts: usize) -> Result<Self> {
        if !(radius.is_finite() && radius >= 0.0) {
            return Err(Error::Invalid(format!("radius must be a non-negative number, got {radius}")));
        }
        Ok(Self::new(radius, min_pts))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClusterLabel {
    Cluster(usize),
    Noise,
}

impl ClusterLabel {
    pub fn cluster(self) -> Option<usize> {
        match self {
            ClusterLabel::Cluster(c) => Some(c),
            ClusterLabel::Noise => None,
        }
    }
}

fn neighbors(boxes: &[BBox], radius: f64) -> Vec<Vec<usize>> {
    let n = boxes.len();
    let mut out = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            if boundary_distance(&boxes[i], &boxes[j]) <= radius {
                out[i].push(j);
                out[j].push(i);
            }
        }
    }
    for list in &mut out {
        list.sort_unstable();
    }
    out
}

/// Density-based clustering of boxes.
///
/// Clusters are numbered in order of their lowest-index core box. A border
/// box joins the cluster of its lowest-index core neighbor, which makes the
/// labeling a function of the input order alone.
pub fn dbscan(boxes: &[BBox], params: &ClusterParams) -> Vec<ClusterLabel> {
    let n = boxes.len();
    let nbrs = neighbors(boxes, params.radius);
    let is_core: Vec<bool> = nbrs.iter().map(|l| l.len() >= params.min_pts).collect();

    let mut labels = vec![ClusterLabel::Noise; n];
    let mut next = 0;
    let mut queue = std::collections::VecDeque::new();
    for seed in 0..n {
        if !is_core[seed] || labels[seed] != ClusterLabel::Noise {
            continue;
        }
        labels[seed] = ClusterLabel::Cluster(next);
        queue.push_back(seed);
        while let Some(p) = queue.pop_front() {
            for &q in &nbrs[p] {
                if is_core[q] && labels[q] == ClusterLabel::Noise {
                    labels[q] = ClusterLabel::Cluster(next);
                    queue.push_back(q);
                }
            }
        }
        next += 1;
    }

    for i in 0..n {
        if is_core[i] {
            continue;
        }
        if let Some(&c) = nbrs[i].iter().find(|&&j| is_core[j]) {
            labels[i] = labels[c];
        }
    }
    labels
}

/// A cluster of segments treated as one coarse visual node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SalientRegion {
    pub bbox: BBox,
    #[serde(rename = "segments")]
    pub member_segment_ids: Vec<usize>,
}

/// Clusters segment boxes into regions. Noise segments become singleton
/// regions so that every segment has exactly one region. Regions are ordered
/// by their smallest member index.
pub fn detect_salient_regions(segments: &[Segment], params: &ClusterParams) -> Vec<SalientRegion> {
    let boxes: Vec<BBox> = segments.iter().map(|s| s.bbox).collect();
    regions_from_boxes(&boxes, params)
}

pub fn regions_from_boxes(boxes: &[BBox], params: &ClusterParams) -> Vec<SalientRegion> {
    let labels = dbscan(boxes, params);
    let n_clusters = labels.iter().filter_map(|l| l.cluster()).max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
    let mut singletons = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        match l {
            ClusterLabel::Cluster(c) => members[*c].push(i),
            ClusterLabel::Noise => singletons.push(vec![i]),
        }
    }
    members.extend(singletons);
    members.sort_by_key(|m| m[0]);
    members
        .into_iter()
        .map(|ids| {
            let bs: Vec<BBox> = ids.iter().map(|&i| boxes[i]).collect();
            SalientRegion {
                bbox: union_box(&bs).expect("regions are non-empty"),
                member_segment_ids: ids,
            }
        })
        .collect()
}
