//! Multi-grained document graph: fine nodes (words, patches), coarse nodes
//! (segments, salient regions) and the fine-to-coarse parent edges.
//!
//! Edges inside a granularity are not stored; the encoders treat each level
//! as fully connected.

use serde::{Deserialize, Serialize};

use crate::cluster::{detect_salient_regions, ClusterParams, SalientRegion};
use crate::doc::{boundary_distance, iou, BBox, Page};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    FineText,
    FineVisual,
    CoarseText,
    CoarseVisual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeRef {
    pub kind: NodeKind,
    pub index: usize,
}

impl NodeRef {
    pub fn new(kind: NodeKind, index: usize) -> Self {
        Self { kind, index }
    }
}

/// Patch grid size `(W, H)`: `W` columns by `H` rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub cols: usize,
    pub rows: usize,
}

impl Grid {
    pub fn new(cols: usize, rows: usize) -> Self {
        Self { cols, rows }
    }

    pub fn len(&self) -> usize {
        self.cols * self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::str::FromStr for Grid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| Error::Invalid(format!("grid must look like WxH, got {s:?}")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n >= 1)
                .ok_or_else(|| Error::Invalid(format!("bad grid dimension {v:?}")))
        };
        Ok(Grid::new(parse(w)?, parse(h)?))
    }
}

/// Uniform `cols x rows` tiling of the page, row-major.
pub fn patch_boxes(page_w: f64, page_h: f64, grid: Grid) -> Vec<BBox> {
    let mut out = Vec::with_capacity(grid.len());
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            out.push(BBox::new(
                c as f64 * page_w / grid.cols as f64,
                r as f64 * page_h / grid.rows as f64,
                (c + 1) as f64 * page_w / grid.cols as f64,
                (r + 1) as f64 * page_h / grid.rows as f64,
            ));
        }
    }
    out
}

/// Region with the largest IOU; ties go to the lowest index. A patch that
/// overlaps no region goes to the nearest one by boundary distance.
pub fn assign_patch(patch: &BBox, regions: &[SalientRegion]) -> Result<usize> {
    if regions.is_empty() {
        return Err(Error::Invalid("no regions for patch assignment".into()));
    }
    let mut best = (0, iou(patch, &regions[0].bbox));
    for (i, r) in regions.iter().enumerate().skip(1) {
        let v = iou(patch, &r.bbox);
        if v > best.1 {
            best = (i, v);
        }
    }
    if best.1 > 0.0 {
        return Ok(best.0);
    }
    let mut nearest = (0, boundary_distance(patch, &regions[0].bbox));
    for (i, r) in regions.iter().enumerate().skip(1) {
        let d = boundary_distance(patch, &r.bbox);
        if d < nearest.1 {
            nearest = (i, d);
        }
    }
    Ok(nearest.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DocumentGraph {
    page: Page,
    regions: Vec<SalientRegion>,
    grid: Grid,
    patch_boxes: Vec<BBox>,
    /// Segment index per word.
    text_parent: Vec<usize>,
    /// Region index per patch.
    visual_parent: Vec<usize>,
    text_children: Vec<Vec<usize>>,
    visual_children: Vec<Vec<usize>>,
}

/// Serialized form of a [`DocumentGraph`], without the page itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphJson {
    pub regions: Vec<SalientRegion>,
    pub patch_grid: [usize; 2],
    pub text_parent: Vec<usize>,
    pub visual_parent: Vec<usize>,
}

fn invert(parent: &[usize], n_coarse: usize) -> Vec<Vec<usize>> {
    let mut children = vec![Vec::new(); n_coarse];
    for (i, &p) in parent.iter().enumerate() {
        children[p].push(i);
    }
    children
}

pub fn build_graph(page: &Page, params: &ClusterParams, grid: Grid) -> Result<DocumentGraph> {
    if grid.is_empty() {
        return Err(Error::Invalid("patch grid must be at least 1x1".into()));
    }
    let regions = detect_salient_regions(page.segments(), params);
    let patches = patch_boxes(f64::from(page.width()), f64::from(page.height()), grid);
    let visual_parent = patches
        .iter()
        .map(|p| assign_patch(p, &regions))
        .collect::<Result<Vec<_>>>()?;
    let text_parent = page.words().iter().map(|w| w.segment_id).collect();
    DocumentGraph::from_parts(page.clone(), regions, grid, text_parent, visual_parent)
}

impl DocumentGraph {
    /// Assembles a graph from explicit parts, checking every structural invariant.
    pub fn from_parts(
        page: Page,
        regions: Vec<SalientRegion>,
        grid: Grid,
        text_parent: Vec<usize>,
        visual_parent: Vec<usize>,
    ) -> Result<Self> {
        let z = page.segments().len();
        if text_parent.len() != page.words().len() {
            return Err(Error::Invalid(format!(
                "text_parent has {} entries for {} words",
                text_parent.len(),
                page.words().len()
            )));
        }
        if let Some((i, _)) = text_parent
            .iter()
            .enumerate()
            .find(|(i, &p)| p >= z || page.words()[*i].segment_id != p)
        {
            return Err(Error::Invalid(format!("text_parent[{i}] disagrees with the page")));
        }
        if visual_parent.len() != grid.len() {
            return Err(Error::Invalid(format!(
                "visual_parent has {} entries for a {}x{} grid",
                visual_parent.len(),
                grid.cols,
                grid.rows
            )));
        }
        if let Some(i) = visual_parent.iter().position(|&p| p >= regions.len()) {
            return Err(Error::Invalid(format!("visual_parent[{i}] is not a region")));
        }
        let mut covered = vec![0usize; z];
        for r in &regions {
            for &s in &r.member_segment_ids {
                if s >= z {
                    return Err(Error::Invalid(format!("region lists unknown segment {s}")));
                }
                covered[s] += 1;
            }
        }
        if covered.iter().any(|&c| c != 1) {
            return Err(Error::Invalid("regions do not partition the segments".into()));
        }
        let patch_boxes = patch_boxes(f64::from(page.width()), f64::from(page.height()), grid);
        let text_children = invert(&text_parent, z);
        let visual_children = invert(&visual_parent, regions.len());
        Ok(Self {
            page,
            regions,
            grid,
            patch_boxes,
            text_parent,
            visual_parent,
            text_children,
            visual_children,
        })
    }

    pub fn from_json(page: Page, json: &GraphJson) -> Result<Self> {
        let [w, h] = json.patch_grid;
        Self::from_parts(
            page,
            json.regions.clone(),
            Grid::new(w, h),
            json.text_parent.clone(),
            json.visual_parent.clone(),
        )
    }

    pub fn to_json(&self) -> GraphJson {
        GraphJson {
            regions: self.regions.clone(),
            patch_grid: [self.grid.cols, self.grid.rows],
            text_parent: self.text_parent.clone(),
            visual_parent: self.visual_parent.clone(),
        }
    }

    pub fn page(&self) -> &Page {
        &self.page
    }

    pub fn regions(&self) -> &[SalientRegion] {
        &self.regions
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn patch_boxes(&self) -> &[BBox] {
        &self.patch_boxes
    }

    pub fn text_parent(&self) -> &[usize] {
        &self.text_parent
    }

    pub fn visual_parent(&self) -> &[usize] {
        &self.visual_parent
    }

    pub fn count(&self, kind: NodeKind) -> usize {
        match kind {
            NodeKind::FineText => self.text_parent.len(),
            NodeKind::FineVisual => self.visual_parent.len(),
            NodeKind::CoarseText => self.page.segments().len(),
            NodeKind::CoarseVisual => self.regions.len(),
        }
    }

    /// Parent of a fine node; `None` for coarse or out-of-range nodes.
    pub fn parent_of(&self, node: NodeRef) -> Option<NodeRef> {
        match node.kind {
            NodeKind::FineText => self
                .text_parent
                .get(node.index)
                .map(|&p| NodeRef::new(NodeKind::CoarseText, p)),
            NodeKind::FineVisual => self
                .visual_parent
                .get(node.index)
                .map(|&p| NodeRef::new(NodeKind::CoarseVisual, p)),
            _ => None,
        }
    }

    /// Fine children of a coarse node (empty for fine nodes).
    pub fn children_of(&self, node: NodeRef) -> &[usize] {
        let list = match node.kind {
            NodeKind::CoarseText => self.text_children.get(node.index),
            NodeKind::CoarseVisual => self.visual_children.get(node.index),
            _ => None,
        };
        list.map_or(&[], Vec::as_slice)
    }

    pub fn segment_boxes(&self) -> Vec<BBox> {
        self.page.segment_boxes()
    }

    pub fn region_boxes(&self) -> Vec<BBox> {
        self.regions.iter().map(|r| r.bbox).collect()
    }
}
