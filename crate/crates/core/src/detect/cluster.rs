//! HDBSCAN over event coordinates.
//!
//! Events share integer pixel coordinates, so the clustering runs on
//! weighted atoms: each distinct pixel is one atom whose weight is its event
//! count. This is exact with respect to running HDBSCAN on the raw points
//! (coincident points are at distance zero and merge at their shared core
//! distance) while keeping the dense MST quadratic in distinct pixels rather
//! than in events.

use nalgebra::Vector2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ellipse::fit_ellipse_weighted;
use super::{BBox, Detection, DetectorParams};
use crate::events::EventChunk;

/// Core distances below this are clamped so every atom has a finite λ.
const CORE_FLOOR: f64 = 0.5;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct HdbscanParams {
    pub min_cluster_size: usize,
    /// Neighbour count (including the point itself) defining core distance.
    pub min_samples: usize,
}

/// Cluster labels for weighted points; `None` is noise.
///
/// Cluster selection is excess-of-mass without allowing the root as a single
/// cluster. Labels are numbered in order of first appearance among `atoms`.
pub fn hdbscan(atoms: &[(Vector2<f64>, usize)], params: &HdbscanParams) -> Vec<Option<usize>> {
    hdbscan_with(atoms, params, mutual_reachability_mst)
}

type MstFn = fn(&[(Vector2<f64>, usize)], &[f64]) -> Vec<(usize, usize, f64)>;

fn hdbscan_with(atoms: &[(Vector2<f64>, usize)], params: &HdbscanParams, mst_fn: MstFn) -> Vec<Option<usize>> {
    let n = atoms.len();
    let total: usize = atoms.iter().map(|a| a.1).sum();
    if n < 2 || total < params.min_cluster_size {
        return vec![None; n];
    }
    let core = core_distances(atoms, params.min_samples);
    let mst = mst_fn(atoms, &core);
    let tree = single_linkage(n, &mst, atoms);
    let condensed = condense(&tree, atoms, &core, params.min_cluster_size);
    let selected = select_eom(&condensed);

    // map every cluster to its selected ancestor (or itself)
    let mut owner: Vec<Option<usize>> = vec![None; condensed.clusters.len()];
    for c in 0..condensed.clusters.len() {
        owner[c] = if selected[c] {
            Some(c)
        } else {
            condensed.clusters[c].parent.and_then(|p| owner[p])
        };
    }
    let mut relabel = std::collections::HashMap::new();
    condensed
        .atom_cluster
        .iter()
        .map(|&c| {
            owner[c].map(|o| {
                let next = relabel.len();
                *relabel.entry(o).or_insert(next)
            })
        })
        .collect()
}

/// Offsets out to this length are tabulated for the integer-grid path of
/// [`core_distances`]; atoms needing farther neighbours use the ring search.
const OFFSET_RADIUS: i64 = 8;

/// Distance to the `k`-th nearest point counting multiplicities and the
/// point itself, floored at [`CORE_FLOOR`].
pub(crate) fn core_distances(atoms: &[(Vector2<f64>, usize)], k: usize) -> Vec<f64> {
    let grid = Grid::new(atoms);
    let mut cand = Vec::new();
    if !atoms.iter().all(|a| a.0.x.fract() == 0.0 && a.0.y.fract() == 0.0) {
        return (0..atoms.len()).map(|i| ring_core_distance(atoms, &grid, i, k, &mut cand)).collect();
    }
    // on the integer grid every cell offset is an exact distance, so walking
    // offsets by increasing length visits neighbours in distance order
    let mut offsets: Vec<(i64, i64, i64)> = (-OFFSET_RADIUS..=OFFSET_RADIUS)
        .flat_map(|dy| (-OFFSET_RADIUS..=OFFSET_RADIUS).map(move |dx| (dx * dx + dy * dy, dx, dy)))
        .filter(|&(d2, _, _)| d2 > 0 && d2 <= OFFSET_RADIUS * OFFSET_RADIUS)
        .collect();
    offsets.sort_unstable();
    atoms
        .iter()
        .enumerate()
        .map(|(i, &(p, w))| {
            if w >= k {
                return CORE_FLOOR;
            }
            let (gx, gy) = grid.cell(&p);
            let mut acc = w;
            grid.visit_cell(gx, gy, &mut |j| {
                if j != i {
                    acc += atoms[j].1;
                }
            });
            if acc >= k {
                return CORE_FLOOR;
            }
            for &(d2, dx, dy) in &offsets {
                grid.visit_cell(gx + dx, gy + dy, &mut |j| acc += atoms[j].1);
                if acc >= k {
                    return (d2 as f64).sqrt().max(CORE_FLOOR);
                }
            }
            ring_core_distance(atoms, &grid, i, k, &mut cand)
        })
        .collect()
}

/// Core distance of atom `i` by searching square rings of cells outwards.
fn ring_core_distance(atoms: &[(Vector2<f64>, usize)], grid: &Grid, i: usize, k: usize, cand: &mut Vec<(f64, usize)>) -> f64 {
    let (p, w) = atoms[i];
    if w >= k {
        return CORE_FLOOR;
    }
    let (gx, gy) = grid.cell(&p);
    cand.clear();
    let max_ring = grid.width.max(grid.height) as i64;
    let mut r = 0i64;
    loop {
        grid.ring(gx, gy, r, |j| {
            if j != i {
                cand.push(((atoms[j].0 - p).norm(), atoms[j].1));
            }
        });
        // all points within Euclidean distance r have been seen
        cand.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
        let mut acc = w;
        let mut found = None;
        for &(d, cw) in cand.iter() {
            acc += cw;
            if acc >= k {
                found = Some(d);
                break;
            }
        }
        match found {
            Some(d) if d <= r as f64 || r >= max_ring => return d.max(CORE_FLOOR),
            None if r >= max_ring => return f64::INFINITY,
            _ => r += 1,
        }
    }
}

/// Bucket grid with unit cells over the bounding box of the points.
struct Grid {
    x0: f64,
    y0: f64,
    width: usize,
    height: usize,
    head: Vec<u32>,
    next: Vec<u32>,
}

impl Grid {
    const NIL: u32 = u32::MAX;

    fn new(atoms: &[(Vector2<f64>, usize)]) -> Self {
        let x0 = atoms.iter().map(|a| a.0.x).fold(f64::INFINITY, f64::min).floor();
        let y0 = atoms.iter().map(|a| a.0.y).fold(f64::INFINITY, f64::min).floor();
        let x1 = atoms.iter().map(|a| a.0.x).fold(f64::NEG_INFINITY, f64::max);
        let y1 = atoms.iter().map(|a| a.0.y).fold(f64::NEG_INFINITY, f64::max);
        let width = (x1 - x0).floor() as usize + 1;
        let height = (y1 - y0).floor() as usize + 1;
        let mut g = Self {
            x0,
            y0,
            width,
            height,
            head: vec![Self::NIL; width * height],
            next: vec![Self::NIL; atoms.len()],
        };
        for (i, a) in atoms.iter().enumerate() {
            let (cx, cy) = g.cell(&a.0);
            let c = cy as usize * width + cx as usize;
            g.next[i] = g.head[c];
            g.head[c] = i as u32;
        }
        g
    }

    fn cell(&self, p: &Vector2<f64>) -> (i64, i64) {
        ((p.x - self.x0).floor() as i64, (p.y - self.y0).floor() as i64)
    }

    fn visit_cell(&self, x: i64, y: i64, f: &mut impl FnMut(usize)) {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return;
        }
        let mut j = self.head[y as usize * self.width + x as usize];
        while j != Self::NIL {
            f(j as usize);
            j = self.next[j as usize];
        }
    }

    /// Visits every point in cells at Chebyshev offset exactly `r`.
    fn ring(&self, cx: i64, cy: i64, r: i64, mut f: impl FnMut(usize)) {
        if r == 0 {
            self.visit_cell(cx, cy, &mut f);
            return;
        }
        for x in cx - r..=cx + r {
            self.visit_cell(x, cy - r, &mut f);
            self.visit_cell(x, cy + r, &mut f);
        }
        for y in cy - r + 1..cy + r {
            self.visit_cell(cx - r, y, &mut f);
            self.visit_cell(cx + r, y, &mut f);
        }
    }
}

/// Total order on candidate edges: weight, then endpoint indices. Borůvka
/// needs a strict order to stay acyclic under ties.
fn edge_less(w: f64, a: usize, b: usize, best: &(f64, usize, usize)) -> bool {
    let key = (a.min(b), a.max(b));
    match w.total_cmp(&best.0) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => key < (best.1.min(best.2), best.1.max(best.2)),
    }
}

const NO_COMPONENT: usize = usize::MAX;
const LEAF_SIZE: usize = 8;

struct KdNode {
    start: usize,
    end: usize,
    lo: Vector2<f64>,
    hi: Vector2<f64>,
    min_core: f64,
    children: Option<(usize, usize)>,
    /// Component shared by every point below, or [`NO_COMPONENT`].
    component: usize,
}

struct KdTree {
    order: Vec<usize>,
    /// Point coordinates in `order`.
    pts: Vec<Vector2<f64>>,
    nodes: Vec<KdNode>,
    leaves: Vec<usize>,
}

impl KdTree {
    fn new(atoms: &[(Vector2<f64>, usize)], core: &[f64]) -> Self {
        let mut items: Vec<(Vector2<f64>, usize)> = atoms.iter().enumerate().map(|(i, a)| (a.0, i)).collect();
        let mut t = Self {
            order: Vec::new(),
            pts: Vec::new(),
            nodes: Vec::with_capacity(4 * atoms.len() / LEAF_SIZE + 1),
            leaves: Vec::new(),
        };
        t.build(&mut items, core, 0);
        t.order = items.iter().map(|x| x.1).collect();
        t.pts = items.iter().map(|x| x.0).collect();
        t
    }

    fn build(&mut self, items: &mut [(Vector2<f64>, usize)], core: &[f64], start: usize) -> usize {
        let end = start + items.len();
        let mut lo = Vector2::repeat(f64::INFINITY);
        let mut hi = Vector2::repeat(f64::NEG_INFINITY);
        let mut min_core = f64::INFINITY;
        for (p, i) in items.iter() {
            lo = lo.inf(p);
            hi = hi.sup(p);
            min_core = min_core.min(core[*i]);
        }
        let id = self.nodes.len();
        self.nodes.push(KdNode {
            start,
            end,
            lo,
            hi,
            min_core,
            children: None,
            component: NO_COMPONENT,
        });
        if items.len() > LEAF_SIZE {
            let axis = if hi.x - lo.x >= hi.y - lo.y { 0 } else { 1 };
            let mid = items.len() / 2;
            items.select_nth_unstable_by(mid, |a, b| a.0[axis].total_cmp(&b.0[axis]).then(a.1.cmp(&b.1)));
            let (left_items, right_items) = items.split_at_mut(mid);
            let left = self.build(left_items, core, start);
            let right = self.build(right_items, core, start + mid);
            self.nodes[id].children = Some((left, right));
        } else {
            self.leaves.push(id);
        }
        id
    }

    /// Refreshes the per-node component labels; children follow parents in
    /// `nodes`, so a reverse sweep is bottom-up.
    fn label(&mut self, comp: &[usize]) {
        for id in (0..self.nodes.len()).rev() {
            let n = &self.nodes[id];
            let c = match n.children {
                Some((l, r)) => {
                    let (a, b) = (self.nodes[l].component, self.nodes[r].component);
                    if a == b {
                        a
                    } else {
                        NO_COMPONENT
                    }
                }
                None => {
                    let first = comp[self.order[n.start]];
                    if self.order[n.start..n.end].iter().all(|&i| comp[i] == first) {
                        first
                    } else {
                        NO_COMPONENT
                    }
                }
            };
            self.nodes[id].component = c;
        }
    }

    fn box_distance(&self, id: usize, p: &Vector2<f64>) -> f64 {
        let n = &self.nodes[id];
        let d = (n.lo - p).sup(&(p - n.hi)).sup(&Vector2::zeros());
        d.norm()
    }

    /// Whether some point outside component `c` might lie within
    /// mutual-reachability `limit` of a point of node `from`. Conservative:
    /// a `true` answer only means the box bounds could not rule it out.
    fn may_reach_foreign(&self, from: usize, c: usize, limit: f64, stack: &mut Vec<usize>) -> bool {
        let f = &self.nodes[from];
        if f.min_core > limit {
            return false;
        }
        stack.clear();
        stack.push(0);
        while let Some(id) = stack.pop() {
            let n = &self.nodes[id];
            if n.component == c || n.min_core > limit {
                continue;
            }
            let gap = (n.lo - f.hi).sup(&(f.lo - n.hi)).sup(&Vector2::zeros());
            if gap.norm() > limit {
                continue;
            }
            match n.children {
                None => return true,
                Some((l, r)) => {
                    stack.push(l);
                    stack.push(r);
                }
            }
        }
        false
    }

    /// Lightest mutual-reachability edge from `q` to another component.
    #[allow(clippy::too_many_arguments)]
    fn nearest_foreign(
        &self,
        q: usize,
        atoms: &[(Vector2<f64>, usize)],
        core: &[f64],
        comp: &[usize],
        best: &mut (f64, usize, usize),
        stack: &mut Vec<(usize, f64)>,
    ) {
        let p = atoms[q].0;
        let cq = comp[q];
        stack.clear();
        stack.push((0, 0.0));
        while let Some((id, lb)) = stack.pop() {
            if lb > best.0 {
                continue;
            }
            let n = &self.nodes[id];
            if n.component == cq {
                continue;
            }
            match n.children {
                None => {
                    for (&j, pj) in self.order[n.start..n.end].iter().zip(&self.pts[n.start..n.end]) {
                        if comp[j] == cq {
                            continue;
                        }
                        let w = (pj - p).norm().max(core[q]).max(core[j]);
                        if edge_less(w, q, j, best) {
                            *best = (w, q, j);
                        }
                    }
                }
                Some((l, r)) => {
                    let bound = |c: usize| self.box_distance(c, &p).max(core[q]).max(self.nodes[c].min_core);
                    let (bl, br) = (bound(l), bound(r));
                    // nearer child on top of the stack
                    if bl <= br {
                        stack.push((r, br));
                        stack.push((l, bl));
                    } else {
                        stack.push((l, bl));
                        stack.push((r, br));
                    }
                }
            }
        }
    }
}

fn find_root(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Mutual-reachability edges no heavier than this are found by direct grid
/// search before the kd-tree phase.
const SEED_RADIUS: f64 = 2.0;

/// Kruskal over every edge of weight at most `radius`. The result is the
/// minimum spanning forest of that subgraph, so it is a prefix of an MST of
/// the full graph.
fn seed_forest(atoms: &[(Vector2<f64>, usize)], core: &[f64], radius: f64, parent: &mut [usize]) -> Vec<(usize, usize, f64)> {
    let grid = Grid::new(atoms);
    // cell offsets in one half-plane whose nearest corners lie within
    // `radius`; every unordered pair of neighbouring cells is visited once
    let reach = radius.floor() as i64 + 1;
    let gap = |d: i64| (d.abs() - 1).max(0) as f64;
    let offsets: Vec<(i64, i64)> = (0..=reach)
        .flat_map(|dy| (-reach..=reach).map(move |dx| (dx, dy)))
        .filter(|&(dx, dy)| (dy > 0 || dx > 0) && gap(dx).hypot(gap(dy)) <= radius)
        .collect();
    let mut cand: Vec<(f64, usize, usize)> = Vec::new();
    let mut push = |i: usize, j: usize| {
        if core[j] <= radius {
            let w = (atoms[j].0 - atoms[i].0).norm().max(core[i]).max(core[j]);
            if w <= radius {
                cand.push((w, i.min(j), i.max(j)));
            }
        }
    };
    for (i, &(p, _)) in atoms.iter().enumerate() {
        if core[i] > radius {
            continue;
        }
        let (gx, gy) = grid.cell(&p);
        grid.visit_cell(gx, gy, &mut |j| {
            if j > i {
                push(i, j)
            }
        });
        for &(dx, dy) in &offsets {
            grid.visit_cell(gx + dx, gy + dy, &mut |j| push(i, j));
        }
    }
    // weights are non-negative, so their bit patterns sort like the values;
    // ties keep the deterministic generation order
    cand.sort_by_key(|c| c.0.to_bits());
    let mut edges = Vec::new();
    for (w, a, b) in cand {
        let (ra, rb) = (find_root(parent, a), find_root(parent, b));
        if ra != rb {
            parent[ra] = rb;
            edges.push((a, b, w));
        }
    }
    edges
}

/// Minimum spanning tree of the mutual-reachability graph. Light edges come
/// from [`seed_forest`]; the components left over are joined by Borůvka's
/// algorithm over a kd-tree. Subtrees lying inside the querying component
/// are skipped, as are subtrees whose distance bound cannot beat the
/// component's best edge. Edges are `(a, b, weight)`.
pub(crate) fn mutual_reachability_mst(atoms: &[(Vector2<f64>, usize)], core: &[f64]) -> Vec<(usize, usize, f64)> {
    boruvka_from(atoms, core, SEED_RADIUS)
}

fn boruvka_from(atoms: &[(Vector2<f64>, usize)], core: &[f64], seed_radius: f64) -> Vec<(usize, usize, f64)> {
    let n = atoms.len();
    if n < 2 {
        return Vec::new();
    }
    let mut parent: Vec<usize> = (0..n).collect();
    let mut edges = seed_forest(atoms, core, seed_radius, &mut parent);
    edges.reserve(n.saturating_sub(1 + edges.len()));
    let mut tree = KdTree::new(atoms, core);
    let mut comp: Vec<usize> = (0..n).map(|i| find_root(&mut parent, i)).collect();
    let mut best = vec![(f64::INFINITY, usize::MAX, usize::MAX); n];
    let mut stack = Vec::new();
    let mut node_stack = Vec::new();
    while edges.len() + 1 < n {
        tree.label(&comp);
        for b in best.iter_mut() {
            *b = (f64::INFINITY, usize::MAX, usize::MAX);
        }
        // leaves spanning several components first: they hold the light
        // edges, and the bounds they set let whole interior leaves be skipped
        let (mixed, uniform): (Vec<usize>, Vec<usize>) = tree.leaves.iter().partition(|&&l| tree.nodes[l].component == NO_COMPONENT);
        for leaf in mixed.into_iter().chain(uniform) {
            let node = &tree.nodes[leaf];
            let c = node.component;
            if c != NO_COMPONENT && best[c].0.is_finite() && !tree.may_reach_foreign(leaf, c, best[c].0, &mut node_stack) {
                continue;
            }
            for &q in &tree.order[node.start..node.end] {
                let c = comp[q];
                if core[q] > best[c].0 {
                    continue;
                }
                tree.nearest_foreign(q, atoms, core, &comp, &mut best[c], &mut stack);
            }
        }
        let mut added = false;
        for c in 0..n {
            let (w, a, b) = best[c];
            if a == usize::MAX {
                continue;
            }
            let (ra, rb) = (find_root(&mut parent, a), find_root(&mut parent, b));
            if ra != rb {
                parent[ra] = rb;
                edges.push((a, b, w));
                added = true;
            }
        }
        if !added {
            break;
        }
        for i in 0..n {
            comp[i] = find_root(&mut parent, i);
        }
    }
    edges
}

struct LinkNode {
    children: Vec<usize>,
    dist: f64,
    size: usize,
}

/// Single-linkage dendrogram. Nodes `0..n` are atoms; node `n + i` is the
/// `i`-th merge. The root is the last node. All clusters joining at the same
/// height merge in one node, so the tree depends only on the partition at
/// each height and not on which of several equal-weight MSTs was used.
struct Dendrogram {
    n_atoms: usize,
    merges: Vec<LinkNode>,
}

fn single_linkage(n: usize, mst: &[(usize, usize, f64)], atoms: &[(Vector2<f64>, usize)]) -> Dendrogram {
    let mut edges = mst.to_vec();
    edges.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    // `parent` links dendrogram nodes to the node that absorbed them
    let mut parent: Vec<usize> = (0..2 * n).collect();
    let mut size: Vec<usize> = atoms.iter().map(|a| a.1).chain(std::iter::repeat_n(0, n)).collect();
    let mut merges: Vec<LinkNode> = Vec::with_capacity(n.saturating_sub(1));
    // dense map from a dendrogram root to its slot among one height's roots
    let mut slot = vec![usize::MAX; 2 * n];
    let (mut local, mut local_parent): (Vec<usize>, Vec<usize>) = (Vec::new(), Vec::new());
    let mut i = 0;
    while i < edges.len() {
        let d = edges[i].2;
        let mut j = i;
        while j < edges.len() && edges[j].2.total_cmp(&d).is_eq() {
            j += 1;
        }
        if j == i + 1 {
            let (a, b, _) = edges[i];
            let (ra, rb) = (find_root(&mut parent, a), find_root(&mut parent, b));
            let children = vec![ra.min(rb), ra.max(rb)];
            let node = n + merges.len();
            let total = size[ra] + size[rb];
            parent[ra] = node;
            parent[rb] = node;
            size[node] = total;
            merges.push(LinkNode {
                children,
                dist: d,
                size: total,
            });
            i = j;
            continue;
        }
        // join the current roots touched by this height among themselves
        local.clear();
        local_parent.clear();
        for &(a, b, _) in &edges[i..j] {
            let mut index_of = |r: usize| {
                if slot[r] == usize::MAX {
                    slot[r] = local.len();
                    local.push(r);
                    local_parent.push(local.len() - 1);
                }
                slot[r]
            };
            let ka = index_of(find_root(&mut parent, a));
            let kb = index_of(find_root(&mut parent, b));
            let (la, lb) = (find_root(&mut local_parent, ka), find_root(&mut local_parent, kb));
            if la != lb {
                local_parent[la.max(lb)] = la.min(lb);
            }
        }
        let mut members: Vec<(usize, usize)> = (0..local.len()).map(|k| (find_root(&mut local_parent, k), local[k])).collect();
        for &r in &local {
            slot[r] = usize::MAX;
        }
        members.sort_unstable();
        let groups = members.chunk_by(|x, y| x.0 == y.0).map(|g| g.iter().map(|m| m.1).collect::<Vec<usize>>());
        for mut children in groups {
            if children.len() < 2 {
                continue;
            }
            children.sort_unstable();
            let node = n + merges.len();
            let total: usize = children.iter().map(|&c| size[c]).sum();
            for &c in &children {
                parent[c] = node;
            }
            size[node] = total;
            merges.push(LinkNode {
                children,
                dist: d,
                size: total,
            });
        }
        i = j;
    }
    Dendrogram { n_atoms: n, merges }
}

struct CondensedCluster {
    parent: Option<usize>,
    children: Vec<usize>,
    birth: f64,
    stability: f64,
}

struct Condensed {
    clusters: Vec<CondensedCluster>,
    /// Innermost cluster each atom belonged to before falling out.
    atom_cluster: Vec<usize>,
}

fn condense(tree: &Dendrogram, atoms: &[(Vector2<f64>, usize)], core: &[f64], mcs: usize) -> Condensed {
    let n = tree.n_atoms;
    let node_size = |v: usize| if v < n { atoms[v].1 } else { tree.merges[v - n].size };
    let lambda_of = |d: f64| if d > 0.0 { 1.0 / d } else { f64::INFINITY };

    let mut clusters = vec![CondensedCluster {
        parent: None,
        children: Vec::new(),
        birth: 0.0,
        stability: 0.0,
    }];
    let mut atom_cluster = vec![0usize; n];
    let root = n + tree.merges.len() - 1;

    // every atom in the subtree leaves `cluster` at `lambda`
    let mut sub: Vec<usize> = Vec::new();
    let mut drop_subtree = |v: usize, cluster: usize, lambda: f64, clusters: &mut Vec<CondensedCluster>, atom_cluster: &mut Vec<usize>| {
        let stack = &mut sub;
        stack.clear();
        stack.push(v);
        let birth = clusters[cluster].birth;
        while let Some(u) = stack.pop() {
            if u < n {
                atom_cluster[u] = cluster;
                clusters[cluster].stability += atoms[u].1 as f64 * (lambda - birth);
            } else {
                stack.extend(tree.merges[u - n].children.iter().copied());
            }
        }
    };

    let mut stack = vec![(root, 0usize)];
    while let Some((v, cluster)) = stack.pop() {
        if v < n {
            let birth = clusters[cluster].birth;
            atom_cluster[v] = cluster;
            clusters[cluster].stability += atoms[v].1 as f64 * (lambda_of(core[v]) - birth);
            continue;
        }
        let m = &tree.merges[v - n];
        let lambda = lambda_of(m.dist);
        for &c in m.children.iter().filter(|&&c| node_size(c) < mcs) {
            drop_subtree(c, cluster, lambda, &mut clusters, &mut atom_cluster);
        }
        let mut big = m.children.iter().copied().filter(|&c| node_size(c) >= mcs);
        match big.clone().count() {
            0 => {}
            1 => stack.push((big.next().expect("one big child"), cluster)),
            _ => {
                for child in big {
                    let id = clusters.len();
                    clusters.push(CondensedCluster {
                        parent: Some(cluster),
                        children: Vec::new(),
                        birth: lambda,
                        stability: 0.0,
                    });
                    clusters[cluster].children.push(id);
                    stack.push((child, id));
                }
            }
        }
    }
    Condensed { clusters, atom_cluster }
}

/// Excess-of-mass selection; the root is never selected.
fn select_eom(c: &Condensed) -> Vec<bool> {
    let k = c.clusters.len();
    let mut selected = vec![false; k];
    let mut stability: Vec<f64> = c.clusters.iter().map(|x| x.stability).collect();
    // children always have larger ids than their parent
    for id in (1..k).rev() {
        let children = &c.clusters[id].children;
        if children.is_empty() {
            selected[id] = true;
            continue;
        }
        let child_sum: f64 = children.iter().map(|&ch| stability[ch]).sum();
        if child_sum > stability[id] {
            stability[id] = child_sum;
        } else {
            selected[id] = true;
            let mut stack = children.clone();
            while let Some(d) = stack.pop() {
                selected[d] = false;
                stack.extend(c.clusters[d].children.iter().copied());
            }
        }
    }
    selected
}

/// Density-clustering detector over the chunk's raw events.
pub fn detect_cluster(chunk: &EventChunk, params: &DetectorParams) -> Vec<Detection> {
    let mut pixels: Vec<(u16, u16)> = if chunk.events.len() > params.subsample_max {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ chunk.t_start.rotate_left(17));
        let mut idx = rand::seq::index::sample(&mut rng, chunk.events.len(), params.subsample_max).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| (chunk.events[i].y, chunk.events[i].x)).collect()
    } else {
        chunk.events.iter().map(|e| (e.y, e.x)).collect()
    };
    pixels.sort_unstable();
    let mut atoms: Vec<(Vector2<f64>, usize)> = Vec::new();
    let mut last = None;
    for p in pixels {
        if last == Some(p) {
            atoms.last_mut().expect("atom exists").1 += 1;
        } else {
            atoms.push((Vector2::new(p.1 as f64, p.0 as f64), 1));
            last = Some(p);
        }
    }
    let hp = HdbscanParams {
        min_cluster_size: params.cluster_min_size,
        min_samples: params.cluster_min_samples,
    };
    let labels = hdbscan(&atoms, &hp);
    let n_clusters = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<(Vector2<f64>, usize)>> = vec![Vec::new(); n_clusters];
    for (atom, label) in atoms.iter().zip(&labels) {
        if let Some(l) = label {
            members[*l].push(*atom);
        }
    }
    members
        .into_iter()
        .filter_map(|m| {
            let ellipse = fit_ellipse_weighted(m.iter().copied()).ok()?;
            if ellipse.n_events < params.cluster_min_size || ellipse.semi_major < params.min_major_axis {
                return None;
            }
            let mut bbox = BBox::point(m[0].0.x as i32, m[0].0.y as i32);
            for (p, _) in &m {
                bbox.include(p.x as i32, p.y as i32);
            }
            Some(Detection {
                centroid: ellipse.mu,
                bbox,
                area: ellipse.n_events,
                ellipse: Some(ellipse),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{Event, Polarity};
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn chunk_from(points: &[(f64, f64)]) -> EventChunk {
        let events = points
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| Event::new(i as u64, x.round() as u16, y.round() as u16, Polarity::On))
            .collect();
        EventChunk::new(0, points.len() as u64 + 1, events)
    }

    fn gaussian_cloud(rng: &mut ChaCha8Rng, cx: f64, cy: f64, sigma: f64, n: usize) -> Vec<(f64, f64)> {
        let d = Normal::new(0.0, sigma).unwrap();
        (0..n).map(|_| (cx + d.sample(rng), cy + d.sample(rng))).collect()
    }

    #[test]
    fn two_gaussian_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut pts = gaussian_cloud(&mut rng, 270.0, 240.0, 3.0, 500);
        pts.extend(gaussian_cloud(&mut rng, 370.0, 240.0, 3.0, 500));
        let det = detect_cluster(&chunk_from(&pts), &DetectorParams::default());
        assert_eq!(det.len(), 2);
        let mut xs: Vec<f64> = det.iter().map(|d| d.centroid.x).collect();
        xs.sort_by(f64::total_cmp);
        assert!((xs[0] - 270.0).abs() < 1.0 && (xs[1] - 370.0).abs() < 1.0, "{xs:?}");
        for d in &det {
            // the generator labels: each detection holds essentially one whole cloud
            assert!(d.area > 450 && d.area <= 500, "{}", d.area);
        }
    }

    #[test]
    fn uniform_noise_yields_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<_> = (0..200).map(|_| (rng.random_range(0.0..639.0), rng.random_range(0.0..479.0))).collect();
        assert!(detect_cluster(&chunk_from(&pts), &DetectorParams::default()).is_empty());
    }

    #[test]
    fn undersized_cloud_rejected() {
        let params = DetectorParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = gaussian_cloud(&mut rng, 100.0, 100.0, 3.0, params.cluster_min_size - 1);
        assert!(detect_cluster(&chunk_from(&pts), &params).is_empty());
    }

    #[test]
    fn subsampling_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut pts = gaussian_cloud(&mut rng, 200.0, 200.0, 4.0, 1500);
        pts.extend(gaussian_cloud(&mut rng, 300.0, 200.0, 4.0, 1500));
        let params = DetectorParams {
            subsample_max: 1000,
            ..Default::default()
        };
        let chunk = chunk_from(&pts);
        let a = detect_cluster(&chunk, &params);
        let b = detect_cluster(&chunk, &params);
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert!(a.iter().map(|d| d.area).sum::<usize>() <= 1000);
    }

    /// Dense Prim's algorithm on the mutual-reachability graph.
    fn prim_mst(atoms: &[(Vector2<f64>, usize)], core: &[f64]) -> Vec<(usize, usize, f64)> {
        let n = atoms.len();
        let mut in_tree = vec![false; n];
        let mut best = vec![f64::INFINITY; n];
        let mut from = vec![0usize; n];
        let mut edges = Vec::with_capacity(n.saturating_sub(1));
        let mut current = 0usize;
        in_tree[0] = true;
        for _ in 1..n {
            let (pc, cc) = (atoms[current].0, core[current]);
            let mut next = usize::MAX;
            let mut next_d = f64::INFINITY;
            for j in 0..n {
                if in_tree[j] {
                    continue;
                }
                let d = (atoms[j].0 - pc).norm().max(cc).max(core[j]);
                if d < best[j] {
                    best[j] = d;
                    from[j] = current;
                }
                if best[j] < next_d || next == usize::MAX {
                    next_d = best[j];
                    next = j;
                }
            }
            in_tree[next] = true;
            edges.push((from[next], next, best[next]));
            current = next;
        }
        edges
    }

    /// Core distances straight from the definition on the expanded point set.
    fn oracle_core(points: &[Vector2<f64>], k: usize) -> Vec<f64> {
        points
            .iter()
            .map(|p| {
                let mut d: Vec<f64> = points.iter().map(|q| (q - p).norm()).collect();
                d.sort_by(f64::total_cmp);
                d[k - 1].max(CORE_FLOOR)
            })
            .collect()
    }

    /// Kruskal over every pair of the expanded (non-deduplicated) points.
    fn oracle_mst_weight(points: &[Vector2<f64>], k: usize) -> f64 {
        let core = oracle_core(points, k);
        let n = points.len();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                edges.push(((points[i] - points[j]).norm().max(core[i]).max(core[j]), i, j));
            }
        }
        edges.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut Vec<usize>, x: usize) -> usize {
            if p[x] != x {
                let r = find(p, p[x]);
                p[x] = r;
            }
            p[x]
        }
        let mut total = 0.0;
        for (w, i, j) in edges {
            let (a, b) = (find(&mut parent, i), find(&mut parent, j));
            if a != b {
                parent[a] = b;
                total += w;
            }
        }
        total
    }

    #[test]
    fn weighted_mst_matches_expanded_kruskal() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..20 {
            let k = rng.random_range(1..6);
            let n_atoms = rng.random_range(2..25);
            let atoms: Vec<(Vector2<f64>, usize)> = (0..n_atoms)
                .map(|i| (Vector2::new(i as f64 * 3.0 + rng.random_range(0..3) as f64, rng.random_range(0..20) as f64), rng.random_range(1..5)))
                .collect();
            let expanded: Vec<Vector2<f64>> = atoms.iter().flat_map(|(p, w)| std::iter::repeat_n(*p, *w)).collect();
            let core = core_distances(&atoms, k);
            // atoms expand to points with identical core distances
            let oc = oracle_core(&expanded, k);
            let mut o = 0;
            for (i, (_, w)) in atoms.iter().enumerate() {
                for _ in 0..*w {
                    assert!((oc[o] - core[i]).abs() < 1e-12, "trial {trial}");
                    o += 1;
                }
            }
            let internal: f64 = atoms.iter().zip(&core).map(|((_, w), c)| (*w - 1) as f64 * c).sum();
            let oracle = oracle_mst_weight(&expanded, k);
            for mst in [prim_mst(&atoms, &core), mutual_reachability_mst(&atoms, &core)] {
                assert_eq!(mst.len(), atoms.len() - 1);
                let total: f64 = mst.iter().map(|e| e.2).sum();
                assert!((total + internal - oracle).abs() < 1e-9, "trial {trial}: {} vs {oracle}", total + internal);
            }
        }
    }

    #[test]
    fn labels_are_per_atom_and_dense() {
        let mut atoms = Vec::new();
        for y in 0..8 {
            for x in 0..8 {
                atoms.push((Vector2::new(x as f64, y as f64), 2));
                atoms.push((Vector2::new(x as f64 + 60.0, y as f64), 2));
            }
        }
        let labels = hdbscan(&atoms, &HdbscanParams { min_cluster_size: 20, min_samples: 5 });
        assert_eq!(labels.len(), atoms.len());
        assert_eq!(labels[0], Some(0));
        assert_eq!(labels[1], Some(1));
        assert!(labels.iter().all(|l| l.is_some()));
    }

    /// Atoms of a spinning-disc chunk: a filled annulus per centre plus
    /// speckle, on the integer grid.
    fn disc_atoms(rng: &mut ChaCha8Rng, centres: &[(f64, f64)], radius: f64) -> Vec<(Vector2<f64>, usize)> {
        let mut pixels = std::collections::BTreeMap::new();
        for &(cx, cy) in centres {
            for y in (cy - radius) as i32..=(cy + radius) as i32 {
                for x in (cx - radius) as i32..=(cx + radius) as i32 {
                    let r = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                    if r <= radius && r >= 2.0 && rng.random_bool(0.9) {
                        *pixels.entry((y, x)).or_insert(0) += rng.random_range(1..6);
                    }
                }
            }
        }
        for _ in 0..60 {
            *pixels.entry((rng.random_range(0..480), rng.random_range(0..640))).or_insert(0) += 1;
        }
        pixels.into_iter().map(|((y, x), w)| (Vector2::new(x as f64, y as f64), w)).collect()
    }

    #[test]
    fn integer_core_distances_match_ring_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for trial in 0..20 {
            let k = rng.random_range(1..40);
            let span = rng.random_range(5..60u32);
            let atoms: Vec<(Vector2<f64>, usize)> = (0..rng.random_range(1..300))
                .map(|_| ((rng.random_range(0..span), rng.random_range(0..span)), rng.random_range(1..4usize)))
                .collect::<std::collections::BTreeMap<_, _>>()
                .into_iter()
                .map(|((x, y), w)| (Vector2::new(x as f64, y as f64), w))
                .collect();
            let grid = Grid::new(&atoms);
            let mut cand = Vec::new();
            let ring: Vec<f64> = (0..atoms.len()).map(|i| ring_core_distance(&atoms, &grid, i, k, &mut cand)).collect();
            assert_eq!(core_distances(&atoms, k), ring, "trial {trial}");
        }
    }

    #[test]
    fn boruvka_matches_prim_on_grid_atoms() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for trial in 0..16 {
            let k = rng.random_range(1..12);
            let atoms = if trial % 4 == 0 || trial % 4 == 2 {
                let radius = rng.random_range(6.0..16.0);
                disc_atoms(&mut rng, &[(200.0, 150.0), (240.0, 150.0), (200.0, 190.0), (240.0, 190.0)], radius)
            } else if trial % 4 == 3 {
                // off-grid points exercise the cell-gap bound of the seed search
                (0..rng.random_range(2..400))
                    .map(|_| (Vector2::new(rng.random_range(0.0..40.0), rng.random_range(0.0..40.0)), rng.random_range(1..4usize)))
                    .collect()
            } else {
                (0..rng.random_range(2..400))
                    .map(|_| ((rng.random_range(0..60u32), rng.random_range(0..60u32)), rng.random_range(1..4usize)))
                    .collect::<std::collections::BTreeMap<_, _>>()
                    .into_iter()
                    .map(|((x, y), w)| (Vector2::new(x as f64, y as f64), w))
                    .collect()
            };
            let core = core_distances(&atoms, k);
            let reference = prim_mst(&atoms, &core);
            let a: f64 = reference.iter().map(|e| e.2).sum();
            let mut ha: Vec<f64> = reference.iter().map(|e| e.2).collect();
            ha.sort_by(f64::total_cmp);
            // pure Borůvka, the default seeded forest, and a mostly-Kruskal seed
            let variants: [MstFn; 3] = [|a, c| boruvka_from(a, c, 0.0), mutual_reachability_mst, |a, c| boruvka_from(a, c, 5.0)];
            for (v, mst) in variants.iter().enumerate() {
                let fast = mst(&atoms, &core);
                let b: f64 = fast.iter().map(|e| e.2).sum();
                assert_eq!(fast.len(), atoms.len() - 1);
                assert!((a - b).abs() <= 1e-9 * a.max(1.0), "trial {trial} variant {v}: {a} vs {b}");
                // the merge heights of both trees agree, and so does the clustering
                let mut hb: Vec<f64> = fast.iter().map(|e| e.2).collect();
                hb.sort_by(f64::total_cmp);
                assert_eq!(ha, hb, "trial {trial} variant {v}");
                let params = HdbscanParams { min_cluster_size: 40, min_samples: k };
                assert_eq!(hdbscan_with(&atoms, &params, prim_mst), hdbscan_with(&atoms, &params, *mst), "trial {trial} variant {v}");
            }
            let params = HdbscanParams { min_cluster_size: 40, min_samples: k };
            assert_eq!(hdbscan_with(&atoms, &params, prim_mst), hdbscan(&atoms, &params), "trial {trial}");
        }
    }
}
