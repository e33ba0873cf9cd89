//! Hierarchical geometry tree.
//!
//! One tree of simplices is shared by every mesh in a run. A mesh is a
//! [`MeshView`]: a set of tree nodes whose cells tile the domain. Refining a
//! view creates the children in the tree if no other view created them
//! before, so node ids stay stable and any two views can be compared purely
//! through ancestry.
//!
//! Vertices live on an integer lattice. A cell at level `l` has its corners
//! on multiples of `2^(MAX_LEVEL - l)`, so midpoints are exact and all
//! incidence tests are done in integer arithmetic.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::geometry::{self, Point3};

/// Deepest refinement level the lattice can represent.
pub const MAX_LEVEL: u8 = 30;

const CELL: i64 = 1 << MAX_LEVEL;

pub type LatticePoint = [i64; 3];

static NEXT_TREE: AtomicU64 = AtomicU64::new(1);
static NEXT_GENERATION: AtomicU64 = AtomicU64::new(1);

pub(crate) fn next_generation() -> u64 {
    NEXT_GENERATION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellKind {
    Interval,
    Tetrahedron,
}

impl CellKind {
    pub fn n_vertices(self) -> usize {
        match self {
            CellKind::Interval => 2,
            CellKind::Tetrahedron => 4,
        }
    }

    pub fn n_children(self) -> usize {
        match self {
            CellKind::Interval => 2,
            CellKind::Tetrahedron => 8,
        }
    }
}

/// Ancestry relation between two tree nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    Equal,
    Contains,
    ContainedBy,
    Disjoint,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeometryNode {
    pub id: NodeId,
    pub dim: u8,
    /// Vertex ids into the tree's point table. Intervals use the first two.
    pub vertices: [u32; 4],
    pub parent: Option<NodeId>,
    /// Children are allocated contiguously starting here.
    pub first_child: Option<NodeId>,
    pub level: u8,
    pub on_boundary: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CoarseGrid {
    n: usize,
}

/// A boundary plane `normal . x = offset` on the lattice.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct Plane {
    normal: [i64; 3],
    offset: i128,
}

impl Plane {
    fn contains(&self, p: &LatticePoint) -> bool {
        let d: i128 = (0..3).map(|k| self.normal[k] as i128 * p[k] as i128).sum();
        d == self.offset
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Hgt {
    id: u64,
    kind: CellKind,
    nodes: Vec<GeometryNode>,
    roots: Vec<NodeId>,
    points: Vec<LatticePoint>,
    point_index: HashMap<LatticePoint, u32>,
    origin: Point3,
    unit: f64,
    grid: Option<CoarseGrid>,
    planes: Vec<Plane>,
}

/// A mesh expressed as a set of leaves of an [`Hgt`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeshView {
    tree: u64,
    leaf: Vec<bool>,
    leaves: Vec<NodeId>,
    vertex_use: HashMap<u32, u32>,
    generation: u64,
}

impl MeshView {
    pub fn tree_id(&self) -> u64 {
        self.tree
    }

    /// Leaves in tree preorder.
    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves.len()
    }

    #[inline]
    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.leaf.get(id.index()).copied().unwrap_or(false)
    }

    /// Number of distinct vertices used by the leaves (mesh grid points).
    pub fn n_vertices(&self) -> usize {
        self.vertex_use.len()
    }

    #[inline]
    pub fn has_vertex(&self, vid: u32) -> bool {
        self.vertex_use.contains_key(&vid)
    }

    /// Vertex ids in ascending order.
    pub fn vertices(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.vertex_use.keys().copied().collect();
        v.sort_unstable();
        v
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    fn set_leaf(&mut self, id: NodeId, on: bool) {
        if self.leaf.len() <= id.index() {
            self.leaf.resize(id.index() + 1, false);
        }
        self.leaf[id.index()] = on;
    }

    /// Attach a deserialized view to its (re-identified) tree.
    pub(crate) fn rebind(&mut self, tree: &Hgt) {
        self.tree = tree.id;
        self.generation = next_generation();
    }

    /// Same leaf set (generations may differ).
    pub fn same_leaves(&self, other: &MeshView) -> bool {
        self.tree == other.tree && self.leaves == other.leaves
    }
}

/// One tile of the finest common refinement of several views.
#[derive(Clone, Debug)]
pub struct Tile {
    pub cell: NodeId,
    /// For each view, the leaf containing (or equal to) `cell`.
    pub owners: Vec<NodeId>,
}

const TET_CORNERS: [[usize; 4]; 4] = [[0, 4, 5, 6], [4, 1, 7, 8], [5, 7, 2, 9], [6, 8, 9, 3]];
// Local point layout: x0 x1 x2 x3 m01 m02 m03 m12 m13 m23.
const INNER_02_13: [[usize; 4]; 4] = [[4, 5, 6, 8], [4, 5, 7, 8], [5, 6, 8, 9], [5, 7, 8, 9]];
const INNER_03_12: [[usize; 4]; 4] = [[4, 5, 6, 7], [5, 6, 7, 9], [6, 7, 8, 9], [4, 6, 7, 8]];
const INNER_01_23: [[usize; 4]; 4] = [[4, 5, 6, 9], [4, 6, 8, 9], [4, 7, 8, 9], [4, 5, 7, 9]];

pub(crate) const TET_EDGES: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
pub(crate) const TET_FACES: [[usize; 3]; 4] = [[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]];

fn midpoint(a: &LatticePoint, b: &LatticePoint) -> LatticePoint {
    [(a[0] + b[0]) / 2, (a[1] + b[1]) / 2, (a[2] + b[2]) / 2]
}

fn dist2(a: &LatticePoint, b: &LatticePoint) -> i128 {
    (0..3).map(|k| ((a[k] - b[k]) as i128).pow(2)).sum()
}

fn orient(a: &LatticePoint, b: &LatticePoint, c: &LatticePoint, d: &LatticePoint) -> i128 {
    let u = [(b[0] - a[0]) as i128, (b[1] - a[1]) as i128, (b[2] - a[2]) as i128];
    let v = [(c[0] - a[0]) as i128, (c[1] - a[1]) as i128, (c[2] - a[2]) as i128];
    let w = [(d[0] - a[0]) as i128, (d[1] - a[1]) as i128, (d[2] - a[2]) as i128];
    u[0] * (v[1] * w[2] - v[2] * w[1]) - u[1] * (v[0] * w[2] - v[2] * w[0]) + u[2] * (v[0] * w[1] - v[1] * w[0])
}

impl Hgt {
    fn empty(kind: CellKind, origin: Point3, unit: f64) -> Self {
        Hgt {
            id: NEXT_TREE.fetch_add(1, Ordering::Relaxed),
            kind,
            nodes: Vec::new(),
            roots: Vec::new(),
            points: Vec::new(),
            point_index: HashMap::new(),
            origin,
            unit,
            grid: None,
            planes: Vec::new(),
        }
    }

    /// The box `[-half_width, half_width]^3` split into `n^3` cubes, each cut
    /// into six tetrahedra along its main diagonal.
    pub fn cube(half_width: f64, n: usize) -> Result<Self> {
        if !(half_width > 0.0) || n == 0 || n > 1024 {
            return contract(format!("invalid box: half_width={half_width}, n={n}"));
        }
        let unit = 2.0 * half_width / (n as f64 * CELL as f64);
        let mut t = Hgt::empty(CellKind::Tetrahedron, [-half_width; 3], unit);
        let hi = n as i64 * CELL;
        for axis in 0..3 {
            let mut normal = [0i64; 3];
            normal[axis] = 1;
            t.planes.push(Plane { normal, offset: 0 });
            t.planes.push(Plane { normal, offset: hi as i128 });
        }
        const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        for k in 0..n as i64 {
            for j in 0..n as i64 {
                for i in 0..n as i64 {
                    let corner = [i * CELL, j * CELL, k * CELL];
                    for perm in PERMS {
                        let mut p = corner;
                        let mut verts = [0u32; 4];
                        verts[0] = t.point_id(p);
                        for (s, &axis) in perm.iter().enumerate() {
                            p[axis] += CELL;
                            verts[s + 1] = t.point_id(p);
                        }
                        t.push_root(verts);
                    }
                }
            }
        }
        t.grid = Some(CoarseGrid { n });
        Ok(t)
    }

    /// A single tetrahedron with corners `(0,0,0), (s,0,0), (s,s,0), (s,s,s)`.
    pub fn single_tetrahedron(scale: f64) -> Self {
        let unit = scale / CELL as f64;
        let mut t = Hgt::empty(CellKind::Tetrahedron, [0.0; 3], unit);
        let c = CELL;
        let pts = [[0, 0, 0], [c, 0, 0], [c, c, 0], [c, c, c]];
        let verts = pts.map(|p| t.point_id(p));
        for face in TET_FACES {
            let (a, b, cc) = (pts[face[0]], pts[face[1]], pts[face[2]]);
            let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
            let v = [cc[0] - a[0], cc[1] - a[1], cc[2] - a[2]];
            let normal =
                [(u[1] * v[2] - u[2] * v[1]) / c, (u[2] * v[0] - u[0] * v[2]) / c, (u[0] * v[1] - u[1] * v[0]) / c];
            let offset = (0..3).map(|k| normal[k] as i128 * a[k] as i128).sum();
            t.planes.push(Plane { normal, offset });
        }
        t.push_root(verts);
        t
    }

    /// The interval `[a, b]` split into `n` root cells.
    pub fn interval(a: f64, b: f64, n: usize) -> Result<Self> {
        if !(b > a) || n == 0 {
            return contract(format!("invalid interval [{a}, {b}] with {n} cells"));
        }
        let unit = (b - a) / (n as f64 * CELL as f64);
        let mut t = Hgt::empty(CellKind::Interval, [a, 0.0, 0.0], unit);
        t.planes.push(Plane { normal: [1, 0, 0], offset: 0 });
        t.planes.push(Plane { normal: [1, 0, 0], offset: (n as i64 * CELL) as i128 });
        for i in 0..n as i64 {
            let p0 = t.point_id([i * CELL, 0, 0]);
            let p1 = t.point_id([(i + 1) * CELL, 0, 0]);
            t.push_root([p0, p1, 0, 0]);
        }
        Ok(t)
    }

    fn push_root(&mut self, verts: [u32; 4]) {
        let id = NodeId(self.nodes.len() as u32);
        let on_boundary = self.cell_on_boundary(&verts);
        self.nodes.push(GeometryNode {
            id,
            dim: self.dim(),
            vertices: verts,
            parent: None,
            first_child: None,
            level: 0,
            on_boundary,
        });
        self.roots.push(id);
    }

    fn dim(&self) -> u8 {
        match self.kind {
            CellKind::Interval => 1,
            CellKind::Tetrahedron => 3,
        }
    }

    fn point_id(&mut self, p: LatticePoint) -> u32 {
        if let Some(&id) = self.point_index.get(&p) {
            return id;
        }
        let id = self.points.len() as u32;
        self.points.push(p);
        self.point_index.insert(p, id);
        id
    }

    fn cell_on_boundary(&self, verts: &[u32; 4]) -> bool {
        let nf = match self.kind {
            CellKind::Interval => 1,
            CellKind::Tetrahedron => 3,
        };
        let nv = self.kind.n_vertices();
        // A facet lies on the boundary when all its vertices share a plane.
        match self.kind {
            CellKind::Interval => {
                verts[..nv].iter().any(|&v| self.planes.iter().any(|pl| pl.contains(&self.points[v as usize])))
            }
            CellKind::Tetrahedron => TET_FACES.iter().any(|f| {
                self.planes.iter().any(|pl| f[..nf].iter().all(|&i| pl.contains(&self.points[verts[i] as usize])))
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Give a deserialized tree an identity unique to this process.
    pub(crate) fn reissue_id(&mut self) {
        self.id = NEXT_TREE.fetch_add(1, Ordering::Relaxed);
    }

    pub fn kind(&self) -> CellKind {
        self.kind
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn roots(&self) -> &[NodeId] {
        &self.roots
    }

    pub fn node(&self, id: NodeId) -> &GeometryNode {
        &self.nodes[id.index()]
    }

    pub fn children(&self, id: NodeId) -> impl Iterator<Item = NodeId> {
        let n = self.kind.n_children() as u32;
        let first = self.nodes[id.index()].first_child;
        (0..first.map_or(0, |_| n)).map(move |i| NodeId(first.unwrap().0 + i))
    }

    pub fn has_children(&self, id: NodeId) -> bool {
        self.nodes[id.index()].first_child.is_some()
    }

    /// Position of a node among its siblings.
    pub fn child_index(&self, id: NodeId) -> Option<usize> {
        let p = self.nodes[id.index()].parent?;
        Some((id.0 - self.nodes[p.index()].first_child.unwrap().0) as usize)
    }

    /// Child `i` of `id`, if the node has been subdivided.
    pub fn child(&self, id: NodeId, i: usize) -> Option<NodeId> {
        self.nodes[id.index()].first_child.map(|c| NodeId(c.0 + i as u32))
    }

    pub fn lattice_point(&self, vid: u32) -> LatticePoint {
        self.points[vid as usize]
    }

    pub fn lookup_point(&self, p: &LatticePoint) -> Option<u32> {
        self.point_index.get(p).copied()
    }

    #[inline]
    pub fn coords(&self, vid: u32) -> Point3 {
        let p = &self.points[vid as usize];
        [
            self.origin[0] + self.unit * p[0] as f64,
            self.origin[1] + self.unit * p[1] as f64,
            self.origin[2] + self.unit * p[2] as f64,
        ]
    }

    /// Real coordinates of a lattice point (need not be a tree vertex).
    pub fn lattice_to_real(&self, p: &LatticePoint) -> Point3 {
        [
            self.origin[0] + self.unit * p[0] as f64,
            self.origin[1] + self.unit * p[1] as f64,
            self.origin[2] + self.unit * p[2] as f64,
        ]
    }

    pub fn vertex_on_boundary(&self, vid: u32) -> bool {
        let p = &self.points[vid as usize];
        self.planes.iter().any(|pl| pl.contains(p))
    }

    pub fn node_vertices(&self, id: NodeId) -> &[u32] {
        &self.nodes[id.index()].vertices[..self.kind.n_vertices()]
    }

    /// Corner coordinates of a tetrahedral node.
    pub fn tet_coords(&self, id: NodeId) -> [Point3; 4] {
        let v = &self.nodes[id.index()].vertices;
        [self.coords(v[0]), self.coords(v[1]), self.coords(v[2]), self.coords(v[3])]
    }

    /// Volume (length for intervals) of a cell.
    pub fn cell_volume(&self, id: NodeId) -> f64 {
        match self.kind {
            CellKind::Interval => {
                let v = &self.nodes[id.index()].vertices;
                (self.coords(v[1])[0] - self.coords(v[0])[0]).abs()
            }
            CellKind::Tetrahedron => geometry::tet_volume(&self.tet_coords(id)),
        }
    }

    /// Longest edge of a cell.
    pub fn cell_diameter(&self, id: NodeId) -> f64 {
        match self.kind {
            CellKind::Interval => self.cell_volume(id),
            CellKind::Tetrahedron => geometry::longest_edge(&self.tet_coords(id)),
        }
    }

    /// Total measure of the root cells.
    pub fn domain_volume(&self) -> f64 {
        self.roots.iter().map(|&r| self.cell_volume(r)).sum()
    }

    /// The view whose leaves are the root cells.
    pub fn root_view(&self) -> MeshView {
        let mut v = MeshView {
            tree: self.id,
            leaf: vec![false; self.nodes.len()],
            leaves: Vec::new(),
            vertex_use: HashMap::new(),
            generation: next_generation(),
        };
        for &r in &self.roots {
            v.set_leaf(r, true);
            for &vid in self.node_vertices(r) {
                *v.vertex_use.entry(vid).or_insert(0) += 1;
            }
        }
        v.leaves = self.preorder_leaves(&v);
        v
    }

    pub(crate) fn check_view(&self, view: &MeshView) -> Result<()> {
        if view.tree != self.id {
            return contract("mesh view belongs to a different tree");
        }
        Ok(())
    }

    pub(crate) fn check_node(&self, id: NodeId) -> Result<()> {
        if id.index() >= self.nodes.len() {
            return contract(format!("node {} is not part of this tree", id.0));
        }
        Ok(())
    }

    fn preorder_leaves(&self, view: &MeshView) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack: Vec<NodeId> = self.roots.iter().rev().copied().collect();
        while let Some(n) = stack.pop() {
            if view.is_leaf(n) {
                out.push(n);
            } else if let Some(first) = self.nodes[n.index()].first_child {
                let k = self.kind.n_children() as u32;
                for i in (0..k).rev() {
                    stack.push(NodeId(first.0 + i));
                }
            }
        }
        out
    }

    /// Create the children of `id` if they do not exist yet.
    fn ensure_children(&mut self, id: NodeId) -> Result<()> {
        if self.nodes[id.index()].first_child.is_some() {
            return Ok(());
        }
        let node = self.nodes[id.index()].clone();
        if node.level >= MAX_LEVEL {
            return contract(format!("node {} is already at the maximum level", id.0));
        }
        let first = NodeId(self.nodes.len() as u32);
        let children: Vec<[u32; 4]> = match self.kind {
            CellKind::Interval => {
                let a = self.points[node.vertices[0] as usize];
                let b = self.points[node.vertices[1] as usize];
                let m = self.point_id(midpoint(&a, &b));
                vec![[node.vertices[0], m, 0, 0], [m, node.vertices[1], 0, 0]]
            }
            CellKind::Tetrahedron => {
                let x: Vec<LatticePoint> = node.vertices.iter().map(|&v| self.points[v as usize]).collect();
                let mut local = [0u32; 10];
                local[..4].copy_from_slice(&node.vertices);
                for (slot, (i, j)) in TET_EDGES.iter().enumerate() {
                    local[4 + slot] = self.point_id(midpoint(&x[*i], &x[*j]));
                }
                let lp = |k: usize| self.points[local[k] as usize];
                // Octahedron diagonals, preferred order on ties.
                let diag = [dist2(&lp(5), &lp(8)), dist2(&lp(6), &lp(7)), dist2(&lp(4), &lp(9))];
                let mut best = 0;
                for k in 1..3 {
                    if diag[k] < diag[best] {
                        best = k;
                    }
                }
                let inner = match best {
                    0 => &INNER_02_13,
                    1 => &INNER_03_12,
                    _ => &INNER_01_23,
                };
                TET_CORNERS
                    .iter()
                    .chain(inner.iter())
                    .map(|c| [local[c[0]], local[c[1]], local[c[2]], local[c[3]]])
                    .collect()
            }
        };
        for verts in children {
            let cid = NodeId(self.nodes.len() as u32);
            let on_boundary = node.on_boundary && self.cell_on_boundary(&verts);
            self.nodes.push(GeometryNode {
                id: cid,
                dim: node.dim,
                vertices: verts,
                parent: Some(id),
                first_child: None,
                level: node.level + 1,
                on_boundary,
            });
        }
        self.nodes[id.index()].first_child = Some(first);
        Ok(())
    }

    /// Replace a leaf by its children inside `view`; returns vertices that
    /// were not part of the view before.
    fn split_leaf(&mut self, view: &mut MeshView, id: NodeId) -> Result<Vec<u32>> {
        self.ensure_children(id)?;
        view.set_leaf(id, false);
        for &vid in &self.nodes[id.index()].vertices[..self.kind.n_vertices()] {
            if let Some(c) = view.vertex_use.get_mut(&vid) {
                *c -= 1;
            }
        }
        let mut fresh = Vec::new();
        let kids: Vec<NodeId> = self.children(id).collect();
        for c in kids {
            view.set_leaf(c, true);
            for &vid in &self.nodes[c.index()].vertices[..self.kind.n_vertices()] {
                let e = view.vertex_use.entry(vid).or_insert(0);
                if *e == 0 && !fresh.contains(&vid) {
                    fresh.push(vid);
                }
                *e += 1;
            }
        }
        Ok(fresh)
    }

    fn lattice_has_vertex(&self, view: &MeshView, p: &LatticePoint) -> bool {
        self.point_index.get(p).is_some_and(|vid| view.has_vertex(*vid))
    }

    /// Balance check: no neighbouring leaf may be more than one level finer
    /// across a face or an edge.
    fn admissible(&self, view: &MeshView, id: NodeId) -> bool {
        let node = &self.nodes[id.index()];
        if node.level + 2 > MAX_LEVEL {
            return true;
        }
        let x: Vec<LatticePoint> =
            node.vertices[..self.kind.n_vertices()].iter().map(|&v| self.points[v as usize]).collect();
        match self.kind {
            CellKind::Interval => {
                let len = x[1][0] - x[0][0];
                let left = [x[0][0] - len / 4, 0, 0];
                let right = [x[1][0] + len / 4, 0, 0];
                !(self.lattice_has_vertex(view, &left) || self.lattice_has_vertex(view, &right))
            }
            CellKind::Tetrahedron => {
                for (i, j) in TET_EDGES {
                    let m = midpoint(&x[i], &x[j]);
                    if self.lattice_has_vertex(view, &midpoint(&x[i], &m))
                        || self.lattice_has_vertex(view, &midpoint(&m, &x[j]))
                    {
                        return false;
                    }
                }
                for f in TET_FACES {
                    let (a, b, c) = (x[f[0]], x[f[1]], x[f[2]]);
                    let (mab, mbc, mca) = (midpoint(&a, &b), midpoint(&b, &c), midpoint(&c, &a));
                    if self.lattice_has_vertex(view, &midpoint(&mab, &mca))
                        || self.lattice_has_vertex(view, &midpoint(&mab, &mbc))
                        || self.lattice_has_vertex(view, &midpoint(&mbc, &mca))
                    {
                        return false;
                    }
                }
                true
            }
        }
    }

    /// Whether the closed cell `id` contains the lattice point `p`.
    fn cell_contains_lattice(&self, id: NodeId, p: &LatticePoint) -> bool {
        let v = &self.nodes[id.index()].vertices;
        match self.kind {
            CellKind::Interval => {
                let a = self.points[v[0] as usize][0];
                let b = self.points[v[1] as usize][0];
                a <= p[0] && p[0] <= b
            }
            CellKind::Tetrahedron => {
                let x: [LatticePoint; 4] = [
                    self.points[v[0] as usize],
                    self.points[v[1] as usize],
                    self.points[v[2] as usize],
                    self.points[v[3] as usize],
                ];
                let o = orient(&x[0], &x[1], &x[2], &x[3]).signum();
                let s = [
                    orient(p, &x[1], &x[2], &x[3]),
                    orient(&x[0], p, &x[2], &x[3]),
                    orient(&x[0], &x[1], p, &x[3]),
                    orient(&x[0], &x[1], &x[2], p),
                ];
                s.iter().all(|&d| d == 0 || d.signum() == o)
            }
        }
    }

    fn root_candidates_lattice(&self, p: &LatticePoint) -> Vec<NodeId> {
        match (&self.grid, self.kind) {
            (Some(g), CellKind::Tetrahedron) => {
                let n = g.n as i64;
                let mut ranges = [(0i64, 0i64); 3];
                for k in 0..3 {
                    let c = p[k].div_euclid(CELL);
                    let lo = if p[k].rem_euclid(CELL) == 0 { c - 1 } else { c };
                    ranges[k] = (lo.max(0), c.min(n - 1));
                }
                let mut out = Vec::new();
                for kz in ranges[2].0..=ranges[2].1 {
                    for ky in ranges[1].0..=ranges[1].1 {
                        for kx in ranges[0].0..=ranges[0].1 {
                            let cube = (kx + n * (ky + n * kz)) as usize;
                            out.extend((0..6).map(|s| self.roots[cube * 6 + s]));
                        }
                    }
                }
                out
            }
            _ => self.roots.clone(),
        }
    }

    /// Leaves of `view` whose closure contains `p` and which do not have it
    /// as a vertex.
    fn leaves_touching(&self, view: &MeshView, p: &LatticePoint, out: &mut Vec<NodeId>) {
        let mut stack = self.root_candidates_lattice(p);
        let vid = self.point_index.get(p).copied();
        while let Some(n) = stack.pop() {
            if !self.cell_contains_lattice(n, p) {
                continue;
            }
            if view.is_leaf(n) {
                let is_vertex = vid.is_some_and(|v| self.node_vertices(n).contains(&v));
                if !is_vertex {
                    out.push(n);
                }
            } else if self.has_children(n) {
                stack.extend(self.children(n));
            }
        }
    }

    fn refine_in_place(&mut self, view: &mut MeshView, marked: &[NodeId]) -> Result<()> {
        let mut queue: VecDeque<NodeId> = marked.iter().copied().collect();
        let mut check: Vec<NodeId> = Vec::new();
        loop {
            while let Some(k) = queue.pop_front() {
                if !view.is_leaf(k) {
                    continue;
                }
                let fresh = self.split_leaf(view, k)?;
                check.extend(self.children(k));
                for vid in fresh {
                    let p = self.points[vid as usize];
                    self.leaves_touching(view, &p, &mut check);
                }
            }
            if check.is_empty() {
                break;
            }
            check.sort_unstable();
            check.dedup();
            for l in check.drain(..) {
                if view.is_leaf(l) && !self.admissible(view, l) {
                    queue.push_back(l);
                }
            }
            if queue.is_empty() {
                break;
            }
        }
        Ok(())
    }

    /// Subdivide the marked leaves, then refine neighbours until the view
    /// is balanced again.
    pub fn refine(&mut self, view: &MeshView, marked: &[NodeId]) -> Result<MeshView> {
        self.check_view(view)?;
        for &m in marked {
            self.check_node(m)?;
            if !view.is_leaf(m) {
                return contract(format!("node {} is not a leaf of this view", m.0));
            }
        }
        let mut v = view.clone();
        self.refine_in_place(&mut v, marked)?;
        v.leaves = self.preorder_leaves(&v);
        v.generation = next_generation();
        Ok(v)
    }

    /// Refine every leaf once.
    pub fn refine_uniform(&mut self, view: &MeshView) -> Result<MeshView> {
        let all = view.leaves.clone();
        self.refine(view, &all)
    }

    /// Replace complete marked sibling sets by their parent. Parents whose
    /// sibling set is incomplete, or whose coarsening would break balance,
    /// are skipped and returned.
    pub fn coarsen(&self, view: &MeshView, marked: &[NodeId]) -> Result<(MeshView, Vec<NodeId>)> {
        self.check_view(view)?;
        let mut by_parent: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for &m in marked {
            self.check_node(m)?;
            if !view.is_leaf(m) {
                return contract(format!("node {} is not a leaf of this view", m.0));
            }
            if let Some(p) = self.nodes[m.index()].parent {
                let e = by_parent.entry(p).or_default();
                if !e.contains(&m) {
                    e.push(m);
                }
            }
        }
        let mut v = view.clone();
        let mut skipped = Vec::new();
        let nc = self.kind.n_children();
        let nv = self.kind.n_vertices();
        for (p, kids) in by_parent {
            if kids.len() != nc || !self.children(p).all(|c| v.is_leaf(c)) {
                skipped.push(p);
                continue;
            }
            for c in self.children(p) {
                v.set_leaf(c, false);
                for &vid in &self.nodes[c.index()].vertices[..nv] {
                    let e = v.vertex_use.get_mut(&vid).unwrap();
                    *e -= 1;
                    if *e == 0 {
                        v.vertex_use.remove(&vid);
                    }
                }
            }
            v.set_leaf(p, true);
            for &vid in &self.nodes[p.index()].vertices[..nv] {
                *v.vertex_use.entry(vid).or_insert(0) += 1;
            }
            if !self.admissible(&v, p) {
                // revert
                v.set_leaf(p, false);
                for &vid in &self.nodes[p.index()].vertices[..nv] {
                    let e = v.vertex_use.get_mut(&vid).unwrap();
                    *e -= 1;
                    if *e == 0 {
                        v.vertex_use.remove(&vid);
                    }
                }
                for c in self.children(p) {
                    v.set_leaf(c, true);
                    for &vid in &self.nodes[c.index()].vertices[..nv] {
                        *v.vertex_use.entry(vid).or_insert(0) += 1;
                    }
                }
                skipped.push(p);
            }
        }
        v.leaves = self.preorder_leaves(&v);
        v.generation = next_generation();
        Ok((v, skipped))
    }

    /// Classify two nodes by ancestry.
    pub fn relation(&self, a: NodeId, b: NodeId) -> Result<Relation> {
        self.check_node(a)?;
        self.check_node(b)?;
        let (mut x, mut y) = (a, b);
        let lvl = |n: NodeId| self.nodes[n.index()].level;
        while lvl(x) > lvl(y) {
            x = self.nodes[x.index()].parent.unwrap();
        }
        while lvl(y) > lvl(x) {
            y = self.nodes[y.index()].parent.unwrap();
        }
        Ok(if x != y {
            Relation::Disjoint
        } else if a == b {
            Relation::Equal
        } else if lvl(a) < lvl(b) {
            Relation::Contains
        } else {
            Relation::ContainedBy
        })
    }

    /// Tiles of the finest common refinement of `views`, in preorder.
    pub fn finest_cells(&self, views: &[&MeshView]) -> Result<Vec<Tile>> {
        if views.is_empty() {
            return contract("no views given");
        }
        for v in views {
            self.check_view(v)?;
        }
        let mut out = Vec::new();
        let none = vec![None; views.len()];
        for &r in &self.roots {
            self.finest_rec(views, r, none.clone(), &mut out);
        }
        Ok(out)
    }

    fn finest_rec(&self, views: &[&MeshView], node: NodeId, mut owners: Vec<Option<NodeId>>, out: &mut Vec<Tile>) {
        for (k, v) in views.iter().enumerate() {
            if owners[k].is_none() && v.is_leaf(node) {
                owners[k] = Some(node);
            }
        }
        if owners.iter().all(|o| o.is_some()) {
            out.push(Tile { cell: node, owners: owners.into_iter().map(|o| o.unwrap()).collect() });
            return;
        }
        let kids: Vec<NodeId> = self.children(node).collect();
        for c in kids {
            self.finest_rec(views, c, owners.clone(), out);
        }
    }

    /// Every overlapping pair `(leaf_a, leaf_b)`.
    pub fn common_cells(&self, a: &MeshView, b: &MeshView) -> Result<Vec<(NodeId, NodeId)>> {
        Ok(self.finest_cells(&[a, b])?.into_iter().map(|t| (t.owners[0], t.owners[1])).collect())
    }

    /// The finest-cell union of several views, rebalanced.
    pub fn merge(&mut self, views: &[&MeshView]) -> Result<MeshView> {
        let tiles = self.finest_cells(views)?;
        let mut v = MeshView {
            tree: self.id,
            leaf: vec![false; self.nodes.len()],
            leaves: Vec::new(),
            vertex_use: HashMap::new(),
            generation: 0,
        };
        for t in &tiles {
            v.set_leaf(t.cell, true);
            for &vid in self.node_vertices(t.cell) {
                *v.vertex_use.entry(vid).or_insert(0) += 1;
            }
        }
        let bad: Vec<NodeId> = tiles.iter().map(|t| t.cell).filter(|&c| !self.admissible(&v, c)).collect();
        self.refine_in_place(&mut v, &bad)?;
        v.leaves = self.preorder_leaves(&v);
        v.generation = next_generation();
        Ok(v)
    }

    /// Whether every leaf of the view satisfies the balance rule.
    pub fn is_balanced(&self, view: &MeshView) -> bool {
        view.leaves.iter().all(|&l| self.admissible(view, l))
    }

    /// Check that leaf bookkeeping is consistent (test helper).
    pub fn validate_view(&self, view: &MeshView) -> Result<()> {
        self.check_view(view)?;
        let mut uses: HashMap<u32, u32> = HashMap::new();
        for &l in &view.leaves {
            for &vid in self.node_vertices(l) {
                *uses.entry(vid).or_insert(0) += 1;
            }
        }
        if uses != view.vertex_use {
            return contract("vertex incidence counts are out of sync");
        }
        if self.preorder_leaves(view) != view.leaves {
            return contract("leaf list is out of sync");
        }
        Ok(())
    }

    // --- real-coordinate point location -------------------------------

    fn bary_in(&self, id: NodeId, p: &Point3) -> [f64; 4] {
        match self.kind {
            CellKind::Interval => {
                let v = &self.nodes[id.index()].vertices;
                let a = self.coords(v[0])[0];
                let b = self.coords(v[1])[0];
                let t = (p[0] - a) / (b - a);
                [1.0 - t, t, 0.0, 0.0]
            }
            CellKind::Tetrahedron => geometry::barycentric(&self.tet_coords(id), p),
        }
    }

    fn min_bary(&self, id: NodeId, p: &Point3) -> f64 {
        let nv = self.kind.n_vertices();
        self.bary_in(id, p)[..nv].iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Whether a real point lies in the domain (closed, with tolerance).
    pub fn domain_contains(&self, p: &Point3) -> bool {
        self.root_of(p).is_some()
    }

    fn root_of(&self, p: &Point3) -> Option<NodeId> {
        const TOL: f64 = -1e-10;
        let candidates: Vec<NodeId> = match (&self.grid, self.kind) {
            (Some(g), CellKind::Tetrahedron) => {
                let n = g.n as i64;
                let mut idx = [0i64; 3];
                for k in 0..3 {
                    let s = (p[k] - self.origin[k]) / (self.unit * CELL as f64);
                    if !(s >= -1e-9 && s <= n as f64 + 1e-9) {
                        return None;
                    }
                    idx[k] = (s.floor() as i64).clamp(0, n - 1);
                }
                let cube = (idx[0] + n * (idx[1] + n * idx[2])) as usize;
                (0..6).map(|s| self.roots[cube * 6 + s]).collect()
            }
            _ => self.roots.clone(),
        };
        let mut best = None;
        let mut best_val = f64::NEG_INFINITY;
        for r in candidates {
            let m = self.min_bary(r, p);
            if m > best_val {
                best_val = m;
                best = Some(r);
            }
        }
        if best_val >= TOL {
            best
        } else {
            None
        }
    }

    fn descend(&self, view: &MeshView, mut n: NodeId, p: &Point3) -> NodeId {
        while !view.is_leaf(n) {
            let mut best = None;
            let mut best_val = f64::NEG_INFINITY;
            for c in self.children(n) {
                let m = self.min_bary(c, p);
                if m > best_val {
                    best_val = m;
                    best = Some(c);
                }
            }
            match best {
                Some(c) => n = c,
                None => break,
            }
        }
        n
    }

    /// Leaf of `view` containing the real point `p`.
    pub fn locate(&self, view: &MeshView, p: &Point3) -> Result<NodeId> {
        let r = self.root_of(p).ok_or(Error::OutOfDomain(p[0], p[1], p[2]))?;
        Ok(self.descend(view, r, p))
    }

    /// Like [`Hgt::locate`], for a point known to lie inside cell `hint`.
    pub fn locate_from(&self, view: &MeshView, hint: NodeId, p: &Point3) -> NodeId {
        let mut a = Some(hint);
        while let Some(n) = a {
            if view.is_leaf(n) {
                return n;
            }
            a = self.nodes[n.index()].parent;
        }
        self.descend(view, hint, p)
    }

    /// Path of child indices from the root, e.g. `[0, 0, 3]` for T_{0,0,3}.
    pub fn path_of(&self, id: NodeId) -> Vec<usize> {
        let mut path = Vec::new();
        let mut n = id;
        while let Some(p) = self.nodes[n.index()].parent {
            path.push(self.child_index(n).unwrap());
            n = p;
        }
        path.push(self.roots.iter().position(|&r| r == n).unwrap());
        path.reverse();
        path
    }

    /// Node addressed by a root index followed by child indices.
    pub fn node_at(&self, path: &[usize]) -> Option<NodeId> {
        let mut n = *self.roots.get(*path.first()?)?;
        for &i in &path[1..] {
            n = self.child(n, i)?;
        }
        Some(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig3() -> (Hgt, MeshView, MeshView) {
        let mut t = Hgt::single_tetrahedron(1.0);
        let root = t.root_view();
        let v8 = t.refine(&root, &[t.roots()[0]]).unwrap();
        (t, root, v8)
    }

    #[test]
    fn one_subdivision_gives_eight_leaves() {
        let (t, _, v8) = fig3();
        assert_eq!(v8.n_leaves(), 8);
        assert_eq!(v8.n_vertices(), 10);
        let vol: f64 = v8.leaves().iter().map(|&l| t.cell_volume(l)).sum();
        assert!((vol - t.domain_volume()).abs() < 1e-12 * t.domain_volume());
    }

    #[test]
    fn local_refinement_matches_octree_figure() {
        let (mut t, _, v8) = fig3();
        let t00 = t.node_at(&[0, 0]).unwrap();
        let v15 = t.refine(&v8, &[t00]).unwrap();
        assert_eq!(v15.n_leaves(), 15);
        let mut expect: Vec<NodeId> = (0..8).map(|i| t.node_at(&[0, 0, i]).unwrap()).collect();
        expect.extend((1..8).map(|i| t.node_at(&[0, i]).unwrap()));
        assert_eq!(v15.leaves(), &expect[..]);
        assert!(t.is_balanced(&v15));
        t.validate_view(&v15).unwrap();
    }

    #[test]
    fn empty_refine_bumps_generation_only() {
        let (mut t, _, v8) = fig3();
        let v = t.refine(&v8, &[]).unwrap();
        assert!(v.same_leaves(&v8));
        assert!(v.generation() > v8.generation());
    }

    #[test]
    fn refine_rejects_non_leaf() {
        let (mut t, root, _) = fig3();
        let r = t.roots()[0];
        let v8 = t.refine(&root, &[r]).unwrap();
        assert!(matches!(t.refine(&v8, &[r]), Err(Error::Contract(_))));
    }

    #[test]
    fn coarsen_examples() {
        let (mut t, _, v8) = fig3();
        let kids: Vec<NodeId> = v8.leaves().to_vec();
        let (back, skipped) = t.coarsen(&v8, &kids).unwrap();
        assert_eq!(back.n_leaves(), 1);
        assert!(skipped.is_empty());

        let (partial, skipped) = t.coarsen(&v8, &kids[..7]).unwrap();
        assert!(partial.same_leaves(&v8));
        assert_eq!(skipped, vec![t.roots()[0]]);

        let t00 = t.node_at(&[0, 0]).unwrap();
        let v15 = t.refine(&v8, &[t00]).unwrap();
        let grand: Vec<NodeId> = t.children(t00).collect();
        let (v, skipped) = t.coarsen(&v15, &grand).unwrap();
        assert!(skipped.is_empty());
        assert!(v.same_leaves(&v8));
    }

    #[test]
    fn relation_examples() {
        let (mut t, _, v8) = fig3();
        let t00 = t.node_at(&[0, 0]).unwrap();
        let _ = t.refine(&v8, &[t00]).unwrap();
        let t0 = t.roots()[0];
        let t01 = t.node_at(&[0, 1]).unwrap();
        let t02 = t.node_at(&[0, 2]).unwrap();
        let t003 = t.node_at(&[0, 0, 3]).unwrap();
        assert_eq!(t.relation(t0, t00).unwrap(), Relation::Contains);
        assert_eq!(t.relation(t00, t0).unwrap(), Relation::ContainedBy);
        assert_eq!(t.relation(t01, t02).unwrap(), Relation::Disjoint);
        assert_eq!(t.relation(t003, t003).unwrap(), Relation::Equal);
        assert_eq!(t.relation(t003, t01).unwrap(), Relation::Disjoint);
        assert!(t.relation(NodeId(10_000), t0).is_err());
    }

    #[test]
    fn common_cells_examples() {
        let (mut t, root, v8) = fig3();
        let diag = t.common_cells(&v8, &v8).unwrap();
        assert!(diag.iter().all(|(a, b)| a == b));
        assert_eq!(diag.len(), 8);

        let pairs = t.common_cells(&root, &v8).unwrap();
        assert_eq!(pairs.len(), 8);
        assert!(pairs.iter().all(|(a, _)| *a == t.roots()[0]));

        let t00 = t.node_at(&[0, 0]).unwrap();
        let t07 = t.node_at(&[0, 7]).unwrap();
        let col3 = t.refine(&v8, &[t00]).unwrap();
        let col4 = t.refine(&v8, &[t07]).unwrap();
        let pairs = t.common_cells(&col3, &col4).unwrap();
        // 8 children of T00 against T00, 8 children of T07 against T07,
        // and the 6 untouched siblings paired with themselves.
        assert_eq!(pairs.len(), 22);
        let vol: f64 = t.finest_cells(&[&col3, &col4]).unwrap().iter().map(|tile| t.cell_volume(tile.cell)).sum();
        assert!((vol - t.domain_volume()).abs() < 1e-12);
        for (a, b) in pairs {
            assert_ne!(t.relation(a, b).unwrap(), Relation::Disjoint);
        }
    }

    #[test]
    fn merge_of_figure_columns() {
        let (mut t, _, v8) = fig3();
        let t00 = t.node_at(&[0, 0]).unwrap();
        let t07 = t.node_at(&[0, 7]).unwrap();
        let col3 = t.refine(&v8, &[t00]).unwrap();
        let col4 = t.refine(&v8, &[t07]).unwrap();
        let merged = t.merge(&[&col3, &col4]).unwrap();
        assert_eq!(merged.n_leaves(), 22);
        assert!(!merged.is_leaf(t00));
        assert!(!merged.is_leaf(t07));
        let again = t.merge(&[&col3, &col3]).unwrap();
        assert!(again.same_leaves(&col3));
    }

    #[test]
    fn cube_roots_fill_box() {
        let t = Hgt::cube(2.0, 2).unwrap();
        assert_eq!(t.roots().len(), 48);
        assert!((t.domain_volume() - 64.0).abs() < 1e-12);
        let v = t.root_view();
        assert_eq!(v.n_vertices(), 27);
        assert!(t.is_balanced(&v));
    }

    #[test]
    fn deep_local_refinement_stays_balanced() {
        let mut t = Hgt::cube(1.0, 1).unwrap();
        let mut v = t.root_view();
        for _ in 0..5 {
            let target = t.locate(&v, &[0.1, 0.2, 0.3]).unwrap();
            v = t.refine(&v, &[target]).unwrap();
            assert!(t.is_balanced(&v));
            t.validate_view(&v).unwrap();
        }
        let vol: f64 = v.leaves().iter().map(|&l| t.cell_volume(l)).sum();
        assert!((vol - 8.0).abs() < 1e-12 * 8.0);
    }

    #[test]
    fn kuhn_children_keep_their_shape() {
        let mut t = Hgt::single_tetrahedron(1.0);
        let mut v = t.root_view();
        for _ in 0..3 {
            v = t.refine_uniform(&v).unwrap();
        }
        let ratios: Vec<f64> = v.leaves().iter().map(|&l| t.cell_diameter(l).powi(3) / t.cell_volume(l)).collect();
        let first = ratios[0];
        assert!(ratios.iter().all(|r| (r - first).abs() < 1e-9 * first));
    }

    #[test]
    fn interval_tree_balance() {
        let mut t = Hgt::interval(0.0, 1.0, 2).unwrap();
        let mut v = t.root_view();
        for _ in 0..4 {
            let target = t.locate(&v, &[0.01, 0.0, 0.0]).unwrap();
            v = t.refine(&v, &[target]).unwrap();
        }
        assert!(t.is_balanced(&v));
        let lens: Vec<f64> = v.leaves().iter().map(|&l| t.cell_volume(l)).collect();
        for w in lens.windows(2) {
            let r = w[0] / w[1];
            assert!((0.5 - 1e-12..=2.0 + 1e-12).contains(&r), "{lens:?}");
        }
        assert!((lens.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
