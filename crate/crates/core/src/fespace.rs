//! Conforming piecewise-linear spaces on mesh views.
//!
//! A leaf whose edges carry midpoints of finer neighbours is split into
//! sub-tetrahedra so that every face matches its neighbour's triangulation:
//!
//! * one split edge: the twin construction (two halves through the edge
//!   midpoint and the opposite edge);
//! * one fully split face and nothing else: the four construction (the
//!   face's red split coned to the opposite vertex);
//! * any other pattern: every face is triangulated on its own and coned to
//!   an extra dof at the leaf centroid.
//!
//! Face triangulations depend only on the face's vertex ids, so both sides of
//! a shared face always agree.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{contract, Error, Result};
use crate::geometry::{self, Point3};
use crate::hgt::{CellKind, Hgt, MeshView, NodeId, TET_EDGES, TET_FACES};
use crate::par;
use crate::quadrature::Quadrature;

const CENTROID: u32 = u32::MAX;
const NONE: u32 = u32::MAX;

/// One linear sub-tetrahedron of a leaf's closure.
#[derive(Clone, Debug)]
pub struct Element {
    pub dofs: [u32; 4],
    pub x: [Point3; 4],
    pub volume: f64,
    pub grads: [Point3; 4],
    /// Position of the owning leaf in the view's leaf list.
    pub leaf: u32,
}

impl Element {
    fn new(dofs: [u32; 4], x: [Point3; 4], leaf: u32) -> Self {
        Element { dofs, x, volume: geometry::tet_volume(&x), grads: geometry::bary_gradients(&x), leaf }
    }

    /// Barycentric coordinates of `p`.
    #[inline]
    pub fn bary(&self, p: &Point3) -> [f64; 4] {
        let d = geometry::sub(p, &self.x[0]);
        let l1 = geometry::dot(&self.grads[1], &d);
        let l2 = geometry::dot(&self.grads[2], &d);
        let l3 = geometry::dot(&self.grads[3], &d);
        [1.0 - l1 - l2 - l3, l1, l2, l3]
    }

    #[inline]
    pub fn interpolate(&self, coeffs: &[f64], l: &[f64; 4]) -> f64 {
        (0..4).map(|i| l[i] * coeffs[self.dofs[i] as usize]).sum()
    }

    /// Gradient of a field restricted to this element.
    pub fn gradient(&self, coeffs: &[f64]) -> Point3 {
        let mut g = [0.0; 3];
        for i in 0..4 {
            let c = coeffs[self.dofs[i] as usize];
            for k in 0..3 {
                g[k] += c * self.grads[i][k];
            }
        }
        g
    }

    /// Local mass matrix, exact for linears.
    pub fn mass(&self) -> [[f64; 4]; 4] {
        let mut m = [[self.volume / 20.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = self.volume / 10.0;
        }
        m
    }

    /// Local stiffness matrix of the full Laplacian.
    pub fn stiffness(&self) -> [[f64; 4]; 4] {
        let mut k = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                k[i][j] = self.volume * geometry::dot(&self.grads[i], &self.grads[j]);
            }
        }
        k
    }

    pub fn centroid(&self) -> Point3 {
        geometry::centroid(&self.x)
    }

    pub fn diameter(&self) -> f64 {
        geometry::longest_edge(&self.x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MacroKind {
    Twin,
    Four,
    /// General pattern resolved by a centroid cone; carries the split-edge count.
    Cone(u8),
}

#[derive(Clone, Debug)]
pub struct MacroElement {
    pub leaf: NodeId,
    pub kind: MacroKind,
}

/// A conforming P1 space over one mesh view.
#[derive(Debug)]
pub struct FeSpace {
    view: MeshView,
    dof_points: Vec<Point3>,
    /// Tree vertex of each dof, `NONE` for centroid dofs.
    dof_vertex: Vec<u32>,
    vertex_dof: Vec<u32>,
    boundary: Vec<bool>,
    elements: Vec<Element>,
    leaf_ranges: Vec<(u32, u32)>,
    node_leaf: HashMap<NodeId, u32>,
    macros: Vec<MacroElement>,
    n_vertex_dofs: usize,
}

type Tri = [u32; 3];

fn edge_key(a: u32, b: u32) -> (u32, u32) {
    (a.min(b), a.max(b))
}

/// Triangulate a face `(p, q, r)` given midpoints of edges pq, qr, rp.
fn face_triangles(v: [u32; 3], mids: [u32; 3], out: &mut Vec<Tri>) {
    let [p, q, r] = v;
    let split: Vec<usize> = (0..3).filter(|&e| mids[e] != NONE).collect();
    match split.len() {
        0 => out.push(v),
        1 => {
            let e = split[0];
            let (s, t, o) = (v[e], v[(e + 1) % 3], v[(e + 2) % 3]);
            out.push([s, mids[e], o]);
            out.push([mids[e], t, o]);
        }
        2 => {
            // Unsplit edge is (v[u], v[u+1]); the apex sits opposite to it.
            let u = (0..3).find(|e| mids[*e] == NONE).unwrap();
            let apex = v[(u + 2) % 3];
            let (ea, eb) = ((u + 1) % 3, (u + 2) % 3);
            // ea joins v[u+1]..apex, eb joins apex..v[u].
            let (b, c) = (v[(u + 1) % 3], v[u]);
            let (ma, mb) = (mids[ea], mids[eb]);
            out.push([apex, ma, mb]);
            if edge_key(b, apex) > edge_key(c, apex) {
                out.push([ma, b, c]);
                out.push([ma, c, mb]);
            } else {
                out.push([mb, b, c]);
                out.push([mb, ma, b]);
            }
        }
        _ => {
            let (mpq, mqr, mrp) = (mids[0], mids[1], mids[2]);
            out.push([p, mpq, mrp]);
            out.push([mpq, q, mqr]);
            out.push([mrp, mqr, r]);
            out.push([mpq, mqr, mrp]);
        }
    }
}

/// Closure of a single leaf as tetrahedra over vertex ids (or `CENTROID`).
fn leaf_closure(v: [u32; 4], mid: [u32; 6]) -> (Vec<[u32; 4]>, Option<MacroKind>) {
    let split: Vec<usize> = (0..6).filter(|&e| mid[e] != NONE).collect();
    let mid_of = |i: usize, j: usize| {
        let e = TET_EDGES.iter().position(|&(a, b)| (a, b) == (i.min(j), i.max(j))).unwrap();
        mid[e]
    };
    match split.len() {
        0 => return (vec![v], None),
        1 => {
            let (i, j) = TET_EDGES[split[0]];
            let m = mid[split[0]];
            let rest: Vec<usize> = (0..4).filter(|&k| k != i && k != j).collect();
            let (k, l) = (v[rest[0]], v[rest[1]]);
            return (vec![[v[i], m, k, l], [m, v[j], k, l]], Some(MacroKind::Twin));
        }
        3 => {
            for (opp, f) in TET_FACES.iter().enumerate() {
                let on_face = [(f[0], f[1]), (f[0], f[2]), (f[1], f[2])];
                if on_face.iter().all(|&(a, b)| mid_of(a, b) != NONE) {
                    let (a, b, c, d) = (v[f[0]], v[f[1]], v[f[2]], v[opp]);
                    let mab = mid_of(f[0], f[1]);
                    let mac = mid_of(f[0], f[2]);
                    let mbc = mid_of(f[1], f[2]);
                    return (
                        vec![[a, mab, mac, d], [mab, b, mbc, d], [mac, mbc, c, d], [mab, mbc, mac, d]],
                        Some(MacroKind::Four),
                    );
                }
            }
        }
        _ => {}
    }
    let mut tris = Vec::new();
    for f in TET_FACES {
        let fv = [v[f[0]], v[f[1]], v[f[2]]];
        let fm = [mid_of(f[0], f[1]), mid_of(f[1], f[2]), mid_of(f[2], f[0])];
        face_triangles(fv, fm, &mut tris);
    }
    let tets = tris.into_iter().map(|t| [t[0], t[1], t[2], CENTROID]).collect();
    (tets, Some(MacroKind::Cone(split.len() as u8)))
}

impl FeSpace {
    /// Build the space over a balanced view.
    pub fn build(tree: &Hgt, view: &MeshView) -> Result<Self> {
        tree.check_view(view)?;
        if tree.kind() != CellKind::Tetrahedron {
            return Err(Error::UnsupportedElement("finite element spaces need a tetrahedral tree".into()));
        }
        if !tree.is_balanced(view) {
            return contract("mesh view violates the balance rule");
        }
        let leaves = view.leaves();
        let closures: Vec<(Vec<[u32; 4]>, Option<MacroKind>)> = par::map_range(leaves.len(), |li| {
            let node = tree.node(leaves[li]);
            let v = node.vertices;
            let mut mid = [NONE; 6];
            for (e, (i, j)) in TET_EDGES.iter().enumerate() {
                let a = tree.lattice_point(v[*i]);
                let b = tree.lattice_point(v[*j]);
                let m = [(a[0] + b[0]) / 2, (a[1] + b[1]) / 2, (a[2] + b[2]) / 2];
                if let Some(id) = tree.lookup_point(&m) {
                    if view.has_vertex(id) {
                        mid[e] = id;
                    }
                }
            }
            leaf_closure(v, mid)
        });

        let verts = view.vertices();
        let max_vid = verts.last().copied().unwrap_or(0) as usize;
        let mut vertex_dof = vec![NONE; max_vid + 1];
        let mut dof_points = Vec::with_capacity(verts.len());
        let mut dof_vertex = Vec::with_capacity(verts.len());
        let mut boundary = Vec::with_capacity(verts.len());
        for (d, &vid) in verts.iter().enumerate() {
            vertex_dof[vid as usize] = d as u32;
            dof_points.push(tree.coords(vid));
            dof_vertex.push(vid);
            boundary.push(tree.vertex_on_boundary(vid));
        }
        let n_vertex_dofs = verts.len();

        let mut elements = Vec::new();
        let mut leaf_ranges = Vec::with_capacity(leaves.len());
        let mut node_leaf = HashMap::with_capacity(leaves.len());
        let mut macros = Vec::new();
        for (li, (tets, kind)) in closures.into_iter().enumerate() {
            let leaf = leaves[li];
            node_leaf.insert(leaf, li as u32);
            let start = elements.len() as u32;
            let mut centroid_dof = NONE;
            if let Some(kind) = kind {
                macros.push(MacroElement { leaf, kind });
                if matches!(kind, MacroKind::Cone(_)) {
                    centroid_dof = dof_points.len() as u32;
                    dof_points.push(geometry::centroid(&tree.tet_coords(leaf)));
                    dof_vertex.push(NONE);
                    boundary.push(false);
                }
            }
            let centroid = if centroid_dof != NONE { dof_points[centroid_dof as usize] } else { [0.0; 3] };
            for t in tets {
                let mut dofs = [0u32; 4];
                let mut x = [[0.0; 3]; 4];
                for k in 0..4 {
                    if t[k] == CENTROID {
                        dofs[k] = centroid_dof;
                        x[k] = centroid;
                    } else {
                        dofs[k] = vertex_dof[t[k] as usize];
                        x[k] = tree.coords(t[k]);
                    }
                }
                elements.push(Element::new(dofs, x, li as u32));
            }
            leaf_ranges.push((start, elements.len() as u32));
        }
        Ok(FeSpace {
            view: view.clone(),
            dof_points,
            dof_vertex,
            vertex_dof,
            boundary,
            elements,
            leaf_ranges,
            node_leaf,
            macros,
            n_vertex_dofs,
        })
    }

    pub fn view(&self) -> &MeshView {
        &self.view
    }

    pub fn generation(&self) -> u64 {
        self.view.generation()
    }

    pub fn n_dofs(&self) -> usize {
        self.dof_points.len()
    }

    /// Dofs attached to mesh vertices (the rest are centroid dofs).
    pub fn n_vertex_dofs(&self) -> usize {
        self.n_vertex_dofs
    }

    pub fn dof_points(&self) -> &[Point3] {
        &self.dof_points
    }

    pub fn boundary(&self) -> &[bool] {
        &self.boundary
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn macro_elements(&self) -> &[MacroElement] {
        &self.macros
    }

    pub fn dof_of_vertex(&self, vid: u32) -> Option<usize> {
        self.vertex_dof.get(vid as usize).copied().filter(|&d| d != NONE).map(|d| d as usize)
    }

    pub fn vertex_of_dof(&self, dof: usize) -> Option<u32> {
        Some(self.dof_vertex[dof]).filter(|&v| v != NONE)
    }

    /// Closure elements of a leaf of this space's view.
    pub fn leaf_elements(&self, leaf: NodeId) -> Option<&[Element]> {
        let li = *self.node_leaf.get(&leaf)?;
        let (a, b) = self.leaf_ranges[li as usize];
        Some(&self.elements[a as usize..b as usize])
    }

    /// Value at `p` of the field with `coeffs`, restricted to `leaf`.
    pub fn eval_in_leaf(&self, leaf: NodeId, coeffs: &[f64], p: &Point3) -> f64 {
        let els = self.leaf_elements(leaf).expect("leaf of this view");
        let mut best = &els[0];
        let mut best_l = best.bary(p);
        let mut best_min = best_l.iter().copied().fold(f64::INFINITY, f64::min);
        for e in &els[1..] {
            if best_min >= 0.0 {
                break;
            }
            let l = e.bary(p);
            let m = l.iter().copied().fold(f64::INFINITY, f64::min);
            if m > best_min {
                best = e;
                best_l = l;
                best_min = m;
            }
        }
        best.interpolate(coeffs, &best_l)
    }

    /// Sample `f` at every dof point.
    pub fn interpolate_fn<F>(&self, f: F) -> Vec<f64>
    where
        F: Fn(&Point3) -> f64 + Sync + Send,
    {
        par::map_range(self.n_dofs(), |d| f(&self.dof_points[d]))
    }

    /// Position of `leaf` in the view's leaf list.
    pub fn leaf_position(&self, leaf: NodeId) -> Option<usize> {
        self.node_leaf.get(&leaf).map(|&i| i as usize)
    }

    pub fn leaf_element_range(&self, li: usize) -> std::ops::Range<usize> {
        let (a, b) = self.leaf_ranges[li];
        a as usize..b as usize
    }

    pub fn total_volume(&self) -> f64 {
        self.elements.iter().map(|e| e.volume).sum()
    }
}

/// Coefficients of a P1 function on a space, stamped with its mesh generation.
#[derive(Clone, Debug)]
pub struct Field {
    space: Arc<FeSpace>,
    coeffs: Vec<f64>,
    generation: u64,
}

impl Field {
    pub fn new(space: Arc<FeSpace>, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != space.n_dofs() {
            return contract(format!("field has {} coefficients, space has {} dofs", coeffs.len(), space.n_dofs()));
        }
        let generation = space.generation();
        Ok(Field { space, coeffs, generation })
    }

    pub fn zeros(space: Arc<FeSpace>) -> Self {
        let n = space.n_dofs();
        Field::new(space, vec![0.0; n]).unwrap()
    }

    pub fn from_fn<F>(space: Arc<FeSpace>, f: F) -> Self
    where
        F: Fn(&Point3) -> f64 + Sync + Send,
    {
        let c = space.interpolate_fn(f);
        Field::new(space, c).unwrap()
    }

    pub fn space(&self) -> &Arc<FeSpace> {
        &self.space
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Fails if the field was built for a different mesh generation than `space`.
    pub fn check_current(&self, space: &FeSpace) -> Result<()> {
        if self.generation != space.generation() {
            return contract(format!(
                "stale field: generation {} used with mesh generation {}",
                self.generation,
                space.generation()
            ));
        }
        Ok(())
    }

    /// Point value.
    pub fn evaluate(&self, tree: &Hgt, p: &Point3) -> Result<f64> {
        self.check_current(&self.space)?;
        let leaf = tree.locate(self.space.view(), p)?;
        Ok(self.space.eval_in_leaf(leaf, &self.coeffs, p))
    }

    /// Point value given a node known to contain `p`.
    pub fn evaluate_near(&self, tree: &Hgt, hint: NodeId, p: &Point3) -> f64 {
        let leaf = tree.locate_from(self.space.view(), hint, p);
        self.space.eval_in_leaf(leaf, &self.coeffs, p)
    }

    /// Nodal interpolation onto `target`.
    pub fn interpolate(&self, tree: &Hgt, target: &Arc<FeSpace>) -> Result<Field> {
        tree.check_view(target.view())?;
        tree.check_view(self.space.view())?;
        if Arc::ptr_eq(target, &self.space) {
            return Ok(self.clone());
        }
        let pts = target.dof_points();
        let vals: Vec<Result<f64>> = par::map_range(pts.len(), |d| self.evaluate(tree, &pts[d]));
        let coeffs = vals.into_iter().collect::<Result<Vec<f64>>>()?;
        Field::new(target.clone(), coeffs)
    }

    /// Move the field onto the space of an adapted mesh. Values at vertices
    /// kept by the adapt are copied, the rest are interpolated.
    pub fn transfer_after_adapt(&self, tree: &Hgt, new_space: &Arc<FeSpace>) -> Result<Field> {
        tree.check_view(new_space.view())?;
        if self.space.view().tree_id() != new_space.view().tree_id() {
            return contract("meshes belong to different trees");
        }
        let pts = new_space.dof_points();
        let vals: Vec<Result<f64>> = par::map_range(pts.len(), |d| {
            if let Some(vid) = new_space.vertex_of_dof(d) {
                if let Some(old) = self.space.dof_of_vertex(vid) {
                    if self.space.view().has_vertex(vid) {
                        return Ok(self.coeffs[old]);
                    }
                }
            }
            self.evaluate(tree, &pts[d])
        });
        let coeffs = vals.into_iter().collect::<Result<Vec<f64>>>()?;
        Field::new(new_space.clone(), coeffs)
    }

    /// `self += a * other` on a shared space.
    pub fn axpy(&mut self, a: f64, other: &Field) -> Result<()> {
        if !Arc::ptr_eq(&self.space, &other.space) {
            return contract("fields live on different spaces");
        }
        for (x, y) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *x += a * y;
        }
        Ok(())
    }
}

/// Integrate `g(values, point)` over the domain, where `values[i]` is the
/// value of `fields[i]` at `point`. Every field is evaluated on its own mesh,
/// and the quadrature runs over the finest common cells of all meshes, cut
/// along closure sub-elements so that every field is linear on each piece.
pub fn integrate_cross_with<G>(tree: &Hgt, fields: &[&Field], quad: &Quadrature, g: G) -> Result<f64>
where
    G: Fn(&[f64], &Point3) -> f64 + Sync + Send,
{
    if fields.is_empty() {
        return contract("integrate_cross needs at least one field");
    }
    let mut spaces: Vec<&Arc<FeSpace>> = Vec::new();
    let mut slot = Vec::with_capacity(fields.len());
    for f in fields {
        f.check_current(f.space())?;
        tree.check_view(f.space().view())?;
        match spaces.iter().position(|s| Arc::ptr_eq(s, f.space())) {
            Some(i) => slot.push(i),
            None => {
                slot.push(spaces.len());
                spaces.push(f.space());
            }
        }
    }
    let views: Vec<&MeshView> = spaces.iter().map(|s| s.view()).collect();
    let tiles = tree.finest_cells(&views)?;
    let total = par::sum_range(tiles.len(), |ti| {
        let tile = &tiles[ti];
        let host = tile.owners.iter().position(|&o| o == tile.cell).unwrap();
        let owned: Vec<&[Element]> =
            spaces.iter().zip(&tile.owners).map(|(s, &o)| s.leaf_elements(o).unwrap()).collect();
        // Fields whose leaf is split into several sub-elements are only
        // piecewise linear on a host element; clip along their pieces.
        let split: Vec<usize> = (0..spaces.len()).filter(|&k| k != host && owned[k].len() > 1).collect();
        let mut vals = vec![0.0; fields.len()];
        let mut acc = 0.0;
        for el in owned[host] {
            if split.is_empty() {
                let mut sub = 0.0;
                for (l, w) in quad.points.iter().zip(&quad.weights) {
                    let p = Quadrature::map(&el.x, l);
                    for (i, f) in fields.iter().enumerate() {
                        vals[i] = if slot[i] == host {
                            el.interpolate(f.coeffs(), l)
                        } else {
                            let o = &owned[slot[i]][0];
                            o.interpolate(f.coeffs(), &o.bary(&p))
                        };
                    }
                    sub += w * g(&vals, &p);
                }
                acc += el.volume * sub;
                continue;
            }
            // pieces of `el`, each with the sub-element index it lies in per space
            let mut pieces: Vec<([Point3; 4], Vec<usize>)> = vec![(el.x, vec![0; spaces.len()])];
            for &k in &split {
                let mut next = Vec::new();
                for (x, tag) in &pieces {
                    for (j, se) in owned[k].iter().enumerate() {
                        let mut parts = vec![*x];
                        for b in 0..4 {
                            parts =
                                parts.iter().flat_map(|y| geometry::clip_tet(y, y.map(|v| se.bary(&v)[b]))).collect();
                        }
                        for y in parts {
                            if geometry::tet_volume(&y) > 1e-14 * el.volume {
                                let mut t = tag.clone();
                                t[k] = j;
                                next.push((y, t));
                            }
                        }
                    }
                }
                pieces = next;
            }
            for (x, tag) in &pieces {
                let vol = geometry::tet_volume(x);
                let mut sub = 0.0;
                for (l, w) in quad.points.iter().zip(&quad.weights) {
                    let p = Quadrature::map(x, l);
                    for (i, f) in fields.iter().enumerate() {
                        let e = if slot[i] == host { el } else { &owned[slot[i]][tag[slot[i]]] };
                        vals[i] = e.interpolate(f.coeffs(), &e.bary(&p));
                    }
                    sub += w * g(&vals, &p);
                }
                acc += vol * sub;
            }
        }
        acc
    });
    Ok(total)
}

/// Integral of the pointwise product `prod f_i^{m_i}`.
pub fn integrate_cross(tree: &Hgt, fields: &[(&Field, u32)], quad: &Quadrature) -> Result<f64> {
    let fs: Vec<&Field> = fields.iter().map(|(f, _)| *f).collect();
    let mult: Vec<i32> = fields.iter().map(|(_, m)| *m as i32).collect();
    integrate_cross_with(tree, &fs, quad, |v, _| v.iter().zip(&mult).map(|(x, &m)| x.powi(m)).product())
}
