//! Cross-granularity region structure.
//!
//! Regions are addressed either by `(granularity, local id)` with a 0-based
//! granularity, or by a global id `offset[g] + local` in `[0, M)`.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Coord, RegionSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyTree {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    /// Sorted global ids overlapping each region (self excluded).
    overlaps: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    granularity_sizes: Vec<usize>,
    #[serde(default)]
    overlaps: Vec<(usize, usize)>,
}

impl HierarchyTree {
    /// Tree from explicit parent maps. `parents[g - 1][r]` is the local parent
    /// (at granularity `g - 1`) of local region `r` at granularity `g`.
    /// Overlaps are the ancestor/descendant pairs implied by the tree.
    pub fn from_parents(sizes: Vec<usize>, parents: &[Vec<usize>]) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::Config("hierarchy needs at least one granularity".into()));
        }
        if parents.len() + 1 != sizes.len() {
            return Err(Error::Schema(format!(
                "{} parent maps given for {} granularities",
                parents.len(),
                sizes.len()
            )));
        }
        let mut adjacent = Vec::with_capacity(parents.len());
        for (k, level) in parents.iter().enumerate() {
            let g = k + 1;
            if level.len() != sizes[g] {
                return Err(Error::Schema(format!(
                    "parent map for granularity {} has {} entries, expected {}",
                    g + 1,
                    level.len(),
                    sizes[g]
                )));
            }
            if let Some(&bad) = level.iter().find(|&&p| p >= sizes[g - 1]) {
                return Err(Error::Schema(format!("parent id {bad} out of range at granularity {g}")));
            }
            adjacent.push(level.iter().map(|&p| vec![p]).collect::<Vec<_>>());
        }
        Ok(Self::assemble(sizes, parents.to_vec(), adjacent))
    }

    /// `adjacent[g - 1][r]` lists local ids at `g - 1` overlapping region `r` at `g`.
    fn assemble(sizes: Vec<usize>, parents: Vec<Vec<usize>>, adjacent: Vec<Vec<Vec<usize>>>) -> Self {
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut acc = 0;
        for &s in &sizes {
            offsets.push(acc);
            acc += s;
        }
        let m = acc;
        let mut parent = vec![None; m];
        let mut children = vec![Vec::new(); m];
        for (k, level) in parents.iter().enumerate() {
            let g = k + 1;
            for (r, &p) in level.iter().enumerate() {
                let child = offsets[g] + r;
                let par = offsets[g - 1] + p;
                parent[child] = Some(par);
                children[par].push(child);
            }
        }

        let mut overlaps: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); m];
        for g in 1..sizes.len() {
            for r in 0..sizes[g] {
                // Walk upwards composing adjacent-level overlaps.
                let mut frontier: BTreeSet<usize> = adjacent[g - 1][r].iter().copied().collect();
                let me = offsets[g] + r;
                for k in (0..g).rev() {
                    for &q in &frontier {
                        let other = offsets[k] + q;
                        overlaps[me].insert(other);
                        overlaps[other].insert(me);
                    }
                    if k == 0 {
                        break;
                    }
                    frontier = frontier
                        .iter()
                        .flat_map(|&q| adjacent[k - 1][q].iter().copied())
                        .collect();
                }
            }
        }
        HierarchyTree {
            sizes,
            offsets,
            parent,
            children,
            overlaps: overlaps.into_iter().map(|s| s.into_iter().collect()).collect(),
        }
    }

    pub fn granularity_count(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn total_regions(&self) -> usize {
        self.parent.len()
    }

    pub fn offset(&self, g: usize) -> usize {
        self.offsets[g]
    }

    pub fn leaf_count(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn global_id(&self, g: usize, local: usize) -> usize {
        self.offsets[g] + local
    }

    /// `(granularity, local id)` of a global id.
    pub fn split_global(&self, global: usize) -> (usize, usize) {
        let g = self.offsets.partition_point(|&o| o <= global) - 1;
        (g, global - self.offsets[g])
    }

    pub fn parent(&self, global: usize) -> Option<usize> {
        self.parent[global]
    }

    pub fn children(&self, global: usize) -> &[usize] {
        &self.children[global]
    }

    /// Local parent id of local region `r` at granularity `g >= 1`.
    pub fn parent_local(&self, g: usize, r: usize) -> Option<usize> {
        self.parent[self.offsets[g] + r].map(|p| p - self.offsets[g - 1])
    }

    /// Local ids, coarsest first, of the path ending at finest-level `leaf`.
    pub fn path(&self, leaf: usize) -> Vec<usize> {
        let g_last = self.sizes.len() - 1;
        let mut out = vec![0; self.sizes.len()];
        let mut cur = self.offsets[g_last] + leaf;
        for g in (0..=g_last).rev() {
            out[g] = cur - self.offsets[g];
            if g > 0 {
                cur = self.parent[cur].expect("non-root region without parent");
            }
        }
        out
    }

    pub fn is_path(&self, ids: &[usize]) -> bool {
        ids.len() == self.sizes.len()
            && ids.iter().zip(&self.sizes).all(|(&i, &s)| i < s)
            && (1..ids.len()).all(|g| self.parent_local(g, ids[g]) == Some(ids[g - 1]))
    }

    /// Entry `R[i][j]` of the overlap matrix (diagonal is 1).
    pub fn overlaps(&self, i: usize, j: usize) -> bool {
        i == j || self.overlaps[i].binary_search(&j).is_ok()
    }

    pub fn overlap_neighbours(&self, global: usize) -> &[usize] {
        &self.overlaps[global]
    }

    /// Dense `M × M` overlap matrix.
    pub fn overlap_matrix(&self) -> Vec<Vec<bool>> {
        let m = self.total_regions();
        (0..m).map(|i| (0..m).map(|j| self.overlaps(i, j)).collect()).collect()
    }

    /// Local parent maps, one per granularity below the root level.
    pub fn parent_maps(&self) -> Vec<Vec<usize>> {
        (1..self.sizes.len())
            .map(|g| (0..self.sizes[g]).map(|r| self.parent_local(g, r).unwrap()).collect())
            .collect()
    }

    /// Writes the `(child_global_id, parent_global_id)` edge list and a JSON
    /// sidecar holding the granularity sizes and overlap pairs.
    pub fn save(&self, edges_csv: impl AsRef<Path>, sidecar_json: impl AsRef<Path>) -> Result<()> {
        let edges_csv = edges_csv.as_ref();
        let mut w = csv::Writer::from_path(edges_csv)?;
        w.write_record(["child_global_id", "parent_global_id"])?;
        for (child, p) in self.parent.iter().enumerate() {
            if let Some(p) = p {
                w.write_record([child.to_string(), p.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io(edges_csv, e))?;
        let pairs = (0..self.total_regions())
            .flat_map(|i| self.overlaps[i].iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
            .collect();
        let sidecar = Sidecar {
            granularity_sizes: self.sizes.clone(),
            overlaps: pairs,
        };
        let sidecar_json = sidecar_json.as_ref();
        std::fs::write(sidecar_json, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(sidecar_json, e))
    }

    pub fn load(edges_csv: impl AsRef<Path>, sidecar_json: impl AsRef<Path>) -> Result<Self> {
        let sidecar_json = sidecar_json.as_ref();
        let text = std::fs::read_to_string(sidecar_json).map_err(|e| Error::io(sidecar_json, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text)?;
        let sizes = sidecar.granularity_sizes;
        let mut offsets = vec![0];
        for s in &sizes {
            offsets.push(offsets.last().unwrap() + s);
        }
        let mut parents: Vec<Vec<Option<usize>>> = sizes.iter().skip(1).map(|&s| vec![None; s]).collect();
        let mut rdr = csv::Reader::from_path(edges_csv.as_ref())?;
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse = |i: usize| -> Result<usize> {
                rec.get(i)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| Error::parse(format!("hierarchy edge line {}", line + 2), "bad global id"))
            };
            let (child, par) = (parse(0)?, parse(1)?);
            let g = offsets.partition_point(|&o| o <= child) - 1;
            if g == 0 || g >= sizes.len() || par < offsets[g - 1] || par >= offsets[g] {
                return Err(Error::Schema(format!("edge {child} -> {par} does not link adjacent granularities")));
            }
            parents[g - 1][child - offsets[g]] = Some(par - offsets[g - 1]);
        }
        let parents = parents
            .into_iter()
            .enumerate()
            .map(|(k, level)| {
                level
                    .into_iter()
                    .enumerate()
                    .map(|(r, p)| {
                        p.ok_or(Error::Orphan {
                            granularity: k + 2,
                            ids: vec![r],
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let mut tree = Self::from_parents(sizes, &parents)?;
        if !sidecar.overlaps.is_empty() {
            let m = tree.total_regions();
            let mut sets: Vec<BTreeSet<usize>> = tree.overlaps.iter().map(|v| v.iter().copied().collect()).collect();
            for (i, j) in sidecar.overlaps {
                if i >= m || j >= m {
                    return Err(Error::Schema(format!("overlap pair ({i}, {j}) out of range")));
                }
                sets[i].insert(j);
                sets[j].insert(i);
            }
            tree.overlaps = sets.into_iter().map(|s| s.into_iter().collect()).collect();
        }
        Ok(tree)
    }
}

/// Extracts the hierarchy from region sets ordered coarsest first.
///
/// Adjacent levels are compared with exact polygon intersection areas; a
/// region overlaps a coarser one when the shared area is positive, and its
/// tree parent is the coarser region with the largest shared area (ties go
/// to the smaller id). Overlaps between non-adjacent levels are composed
/// through the intermediate levels.
pub fn build_hierarchy(sets: &[RegionSet]) -> Result<HierarchyTree> {
    if sets.len() < 2 {
        return Err(Error::Config("build_hierarchy needs at least 2 granularities".into()));
    }
    let sizes: Vec<usize> = sets.iter().map(RegionSet::len).collect();
    let mut parents = Vec::with_capacity(sets.len() - 1);
    let mut adjacent = Vec::with_capacity(sets.len() - 1);
    for g in 1..sets.len() {
        let (coarse, fine) = (&sets[g - 1], &sets[g]);
        let mut level_parents = Vec::with_capacity(fine.len());
        let mut level_adjacent = Vec::with_capacity(fine.len());
        let mut orphans = Vec::new();
        for region in fine.regions() {
            let own_area = region.area();
            let tol = 1e-9 * own_area.abs();
            let mut best: Option<(usize, f64)> = None;
            let mut touching = Vec::new();
            for cand in coarse.candidates_in(region.bbox()) {
                let area = region.intersection_area(&coarse.regions()[cand]);
                if area > tol {
                    touching.push(cand);
                    if best.map_or(true, |(_, a)| area > a * (1.0 + 1e-9)) {
                        best = Some((cand, area));
                    }
                }
            }
            match best {
                Some((p, _)) => level_parents.push(p),
                None => {
                    orphans.push(region.id);
                    level_parents.push(usize::MAX);
                }
            }
            level_adjacent.push(touching);
        }
        if !orphans.is_empty() {
            return Err(Error::Orphan {
                granularity: g + 1,
                ids: orphans,
            });
        }
        parents.push(level_parents);
        adjacent.push(level_adjacent);
    }
    Ok(HierarchyTree::assemble(sizes, parents, adjacent))
}

/// Region ids of one host, coarsest first, forming a root-to-leaf path.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelVector {
    pub per_granularity: Vec<usize>,
}

impl LabelVector {
    pub fn new(per_granularity: Vec<usize>, tree: &HierarchyTree) -> Result<Self> {
        if !tree.is_path(&per_granularity) {
            return Err(Error::Label(format!("{per_granularity:?} is not a root-to-leaf path")));
        }
        Ok(LabelVector { per_granularity })
    }

    pub fn leaf(&self) -> usize {
        *self.per_granularity.last().unwrap()
    }

    pub fn global_ids(&self, tree: &HierarchyTree) -> Vec<usize> {
        self.per_granularity
            .iter()
            .enumerate()
            .map(|(g, &r)| tree.global_id(g, r))
            .collect()
    }

    /// Length-M 0/1 encoding with one active region per granularity.
    pub fn multi_hot(&self, tree: &HierarchyTree) -> Vec<f64> {
        let mut v = vec![0.0; tree.total_regions()];
        for id in self.global_ids(tree) {
            v[id] = 1.0;
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Unassignable {
    /// No region at this (0-based) granularity contains the point.
    Outside { granularity: usize },
    /// Per-granularity ids do not form a tree path.
    Inconsistent { ids: Vec<usize> },
}

impl std::fmt::Display for Unassignable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Unassignable::Outside { granularity } => write!(f, "outside all regions at granularity {}", granularity + 1),
            Unassignable::Inconsistent { ids } => write!(f, "region ids {ids:?} violate the hierarchy"),
        }
    }
}

pub fn assign_labels(
    coord: Coord,
    sets: &[RegionSet],
    tree: &HierarchyTree,
) -> std::result::Result<LabelVector, Unassignable> {
    let ids = sets
        .iter()
        .enumerate()
        .map(|(g, set)| set.assign(coord).ok_or(Unassignable::Outside { granularity: g }))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if !tree.is_path(&ids) {
        return Err(Unassignable::Inconsistent { ids });
    }
    Ok(LabelVector { per_granularity: ids })
}
