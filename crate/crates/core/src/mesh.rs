//! Structured triangulations of rectangles, their partition into subdomains,
//! overlap growth through the element dual graph (or the nodal graph), ghost
//! layers, and the vertex/edge classification of the subdomain interface.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-node boundary label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BoundaryTag {
    Interior,
    Dirichlet,
    Neumann,
    /// Moving lid of the cavity (Dirichlet data `(1, 0)`).
    Lid,
    /// The lower-left cavity corner: velocity Dirichlet node that also pins the pressure.
    CornerPressurePin,
}

impl BoundaryTag {
    /// True for every tag that carries essential data for the primary field.
    pub fn is_dirichlet(self) -> bool {
        matches!(
            self,
            BoundaryTag::Dirichlet | BoundaryTag::Lid | BoundaryTag::CornerPressurePin
        )
    }

    pub fn on_boundary(self) -> bool {
        self != BoundaryTag::Interior
    }

    pub fn name(self) -> &'static str {
        match self {
            BoundaryTag::Interior => "interior",
            BoundaryTag::Dirichlet => "dirichlet",
            BoundaryTag::Neumann => "neumann",
            BoundaryTag::Lid => "lid",
            BoundaryTag::CornerPressurePin => "corner_pressure_pin",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "interior" => BoundaryTag::Interior,
            "dirichlet" => BoundaryTag::Dirichlet,
            "neumann" => BoundaryTag::Neumann,
            "lid" => BoundaryTag::Lid,
            "corner_pressure_pin" => BoundaryTag::CornerPressurePin,
            _ => return None,
        })
    }
}

/// Which boundary conditions a structured mesh is tagged for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryLayout {
    /// Lid-driven cavity: lid on `y = y1`, no-slip elsewhere, pressure pin at the origin corner.
    Cavity,
    /// Beam clamped at both short ends, traction free on the long edges.
    Beam,
    /// Dirichlet data on the whole boundary.
    Clamped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Rect { x0, y0, x1, y1 }
    }

    pub fn unit_square() -> Self {
        Rect::new(0.0, 0.0, 1.0, 1.0)
    }

    /// The 5 m x 1 m beam.
    pub fn beam() -> Self {
        Rect::new(0.0, 0.0, 5.0, 1.0)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }
}

fn classify(p: [f64; 2], rect: &Rect, layout: BoundaryLayout) -> BoundaryTag {
    let tol = 1e-10 * rect.width().max(rect.height());
    let left = (p[0] - rect.x0).abs() < tol;
    let right = (p[0] - rect.x1).abs() < tol;
    let bottom = (p[1] - rect.y0).abs() < tol;
    let top = (p[1] - rect.y1).abs() < tol;
    match layout {
        BoundaryLayout::Cavity => {
            if top {
                BoundaryTag::Lid
            } else if left && bottom {
                BoundaryTag::CornerPressurePin
            } else if left || right || bottom {
                BoundaryTag::Dirichlet
            } else {
                BoundaryTag::Interior
            }
        }
        BoundaryLayout::Beam => {
            if left || right {
                BoundaryTag::Dirichlet
            } else if top || bottom {
                BoundaryTag::Neumann
            } else {
                BoundaryTag::Interior
            }
        }
        BoundaryLayout::Clamped => {
            if left || right || top || bottom {
                BoundaryTag::Dirichlet
            } else {
                BoundaryTag::Interior
            }
        }
    }
}

/// Linear triangle mesh.
///
/// Structured meshes number node `(i, j)` as `j * (nx + 1) + i`; cell `(i, j)` holds
/// elements `2 * (j * nx + i)` and `2 * (j * nx + i) + 1`, split along the
/// `(i, j) -> (i + 1, j + 1)` diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub nodes: Vec<[f64; 2]>,
    pub elements: Vec<[usize; 3]>,
    pub tags: Vec<BoundaryTag>,
    /// Structured cell counts, zero when the mesh did not come from [`build_structured_mesh`].
    pub nx: usize,
    pub ny: usize,
    pub rect: Rect,
}

/// Uniform `nx x ny` cell grid over `rect`, every cell split into two triangles.
pub fn build_structured_mesh(
    nx: usize,
    ny: usize,
    rect: Rect,
    layout: BoundaryLayout,
) -> Result<Mesh> {
    if nx == 0 || ny == 0 {
        return Err(Error::InvalidGeometry(format!(
            "cell counts must be positive, got {nx} x {ny}"
        )));
    }
    if !(rect.width() > 0.0 && rect.height() > 0.0) {
        return Err(Error::InvalidGeometry(format!(
            "rectangle extents must be positive, got {} x {}",
            rect.width(),
            rect.height()
        )));
    }
    let hx = rect.width() / nx as f64;
    let hy = rect.height() / ny as f64;
    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            // exact endpoints so boundary classification never depends on rounding
            let x = if i == nx { rect.x1 } else { rect.x0 + i as f64 * hx };
            let y = if j == ny { rect.y1 } else { rect.y0 + j as f64 * hy };
            nodes.push([x, y]);
        }
    }
    let tags = nodes.iter().map(|&p| classify(p, &rect, layout)).collect();
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut elements = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let a = id(i, j);
            let b = id(i + 1, j);
            let c = id(i + 1, j + 1);
            let d = id(i, j + 1);
            elements.push([a, b, c]);
            elements.push([a, c, d]);
        }
    }
    Ok(Mesh {
        nodes,
        elements,
        tags,
        nx,
        ny,
        rect,
    })
}

impl Mesh {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    /// Signed area; positive for counter-clockwise elements.
    pub fn signed_area(&self, e: usize) -> f64 {
        let [a, b, c] = self.elements[e];
        let (pa, pb, pc) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        0.5 * ((pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1]))
    }

    pub fn centroid(&self, e: usize) -> [f64; 2] {
        let [a, b, c] = self.elements[e];
        [
            (self.nodes[a][0] + self.nodes[b][0] + self.nodes[c][0]) / 3.0,
            (self.nodes[a][1] + self.nodes[b][1] + self.nodes[c][1]) / 3.0,
        ]
    }

    /// Elements incident to each node.
    pub fn node_elements(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for (e, tri) in self.elements.iter().enumerate() {
            for &n in tri {
                out[n].push(e);
            }
        }
        out
    }

    /// Check the element invariants: distinct, existing nodes and positive orientation.
    pub fn validate(&self) -> Result<()> {
        for (e, tri) in self.elements.iter().enumerate() {
            if tri.iter().any(|&n| n >= self.nodes.len()) {
                return Err(Error::InvalidGeometry(format!(
                    "element {e} references a missing node"
                )));
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::InvalidGeometry(format!(
                    "element {e} repeats a node"
                )));
            }
            if self.signed_area(e) <= 0.0 {
                return Err(Error::InvalidGeometry(format!(
                    "element {e} is not positively oriented"
                )));
            }
        }
        Ok(())
    }

    /// Plain-text dump: `nodes elements nx ny`, then `x y tag` per node and
    /// `n0 n1 n2` per element.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} {} {} {}",
            self.nodes.len(),
            self.elements.len(),
            self.nx,
            self.ny
        );
        for (p, t) in self.nodes.iter().zip(&self.tags) {
            let _ = writeln!(s, "{:?} {:?} {}", p[0], p[1], t.name());
        }
        for e in &self.elements {
            let _ = writeln!(s, "{} {} {}", e[0], e[1], e[2]);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Mesh> {
        let bad = |m: String| Error::Parse {
            path: "<mesh>".into(),
            message: m,
        };
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<usize> = lines
            .next()
            .ok_or_else(|| bad("empty input".into()))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad(format!("bad header token {t:?}"))))
            .collect::<Result<_>>()?;
        if header.len() != 4 {
            return Err(bad("header must hold four counts".into()));
        }
        let (nn, ne) = (header[0], header[1]);
        let mut nodes = Vec::with_capacity(nn);
        let mut tags = Vec::with_capacity(nn);
        for k in 0..nn {
            let line = lines.next().ok_or_else(|| bad(format!("missing node {k}")))?;
            let tok: Vec<&str> = line.split_whitespace().collect();
            if tok.len() != 3 {
                return Err(bad(format!("node line {k}: expected `x y tag`")));
            }
            let x: f64 = tok[0].parse().map_err(|_| bad(format!("node {k}: bad x")))?;
            let y: f64 = tok[1].parse().map_err(|_| bad(format!("node {k}: bad y")))?;
            let t = BoundaryTag::from_name(tok[2])
                .ok_or_else(|| bad(format!("node {k}: unknown tag {}", tok[2])))?;
            nodes.push([x, y]);
            tags.push(t);
        }
        let mut elements = Vec::with_capacity(ne);
        for k in 0..ne {
            let line = lines
                .next()
                .ok_or_else(|| bad(format!("missing element {k}")))?;
            let ids: Vec<usize> = line
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| bad(format!("element {k}: bad index"))))
                .collect::<Result<_>>()?;
            if ids.len() != 3 {
                return Err(bad(format!("element line {k}: expected three indices")));
            }
            elements.push([ids[0], ids[1], ids[2]]);
        }
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for p in &nodes {
            x0 = x0.min(p[0]);
            y0 = y0.min(p[1]);
            x1 = x1.max(p[0]);
            y1 = y1.max(p[1]);
        }
        let mesh = Mesh {
            nodes,
            elements,
            tags,
            nx: header[2],
            ny: header[3],
            rect: Rect::new(x0, y0, x1, y1),
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read_text(path: &Path) -> Result<Mesh> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Mesh::from_text(&s).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse {
                path: path.into(),
                message,
            },
            other => other,
        })
    }

    /// Lagrange node layout of the given order on this mesh.
    pub fn lagrange_nodes(&self, order: ElementOrder) -> LagrangeNodes {
        LagrangeNodes::new(self, order)
    }
}

/// Element adjacency across shared element edges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DualGraph {
    pub adjacency: Vec<Vec<usize>>,
}

impl DualGraph {
    pub fn num_edges(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }
}

/// Elements are adjacent iff they share two nodes.
pub fn dual_graph(mesh: &Mesh) -> DualGraph {
    let mut by_edge: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for (e, tri) in mesh.elements.iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            by_edge.entry((a.min(b), a.max(b))).or_default().push(e);
        }
    }
    let mut adjacency = vec![Vec::new(); mesh.elements.len()];
    for elems in by_edge.values() {
        for (i, &a) in elems.iter().enumerate() {
            for &b in &elems[i + 1..] {
                adjacency[a].push(b);
                adjacency[b].push(a);
            }
        }
    }
    for adj in &mut adjacency {
        adj.sort_unstable();
        adj.dedup();
    }
    DualGraph { adjacency }
}

/// How overlap layers are grown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapGraph {
    /// Add elements sharing an element edge (used by nonlinear Schwarz).
    Dual,
    /// Add every element sharing a node (one layer of the nodal/matrix graph).
    Nodal,
}

/// Nonoverlapping partition plus per-subdomain overlapping and ghost element sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub num_subdomains: usize,
    /// Structured subdomain grid `(px, py)`; subdomain `(a, b)` has index `b * px + a`.
    pub grid: (usize, usize),
    /// Owning subdomain of every element.
    pub owner: Vec<usize>,
    /// Sorted element sets of the nonoverlapping subdomains.
    pub owned: Vec<Vec<usize>>,
    /// Sorted element sets of the overlapping subdomains.
    pub overlap: Vec<Vec<usize>>,
    /// Sorted ghost element sets around the overlapping subdomains.
    pub ghost: Vec<Vec<usize>>,
    pub layers: usize,
    pub graph: OverlapGraph,
}

/// Block partition of a structured mesh: element `e` goes to the `px x py` block
/// containing its centroid.
pub fn partition_structured(mesh: &Mesh, px: usize, py: usize) -> Result<Decomposition> {
    if px == 0 || py == 0 {
        return Err(Error::Partition("subdomain counts must be positive".into()));
    }
    if mesh.nx == 0 || mesh.ny == 0 {
        return Err(Error::Partition(
            "mesh carries no structured cell counts".into(),
        ));
    }
    if !mesh.nx.is_multiple_of(px) || !mesh.ny.is_multiple_of(py) {
        return Err(Error::Partition(format!(
            "{} x {} cells cannot be split into {px} x {py} equal blocks",
            mesh.nx, mesh.ny
        )));
    }
    let bx = mesh.rect.width() / px as f64;
    let by = mesh.rect.height() / py as f64;
    let n = px * py;
    let mut owner = Vec::with_capacity(mesh.num_elements());
    let mut owned = vec![Vec::new(); n];
    for e in 0..mesh.num_elements() {
        let c = mesh.centroid(e);
        let a = (((c[0] - mesh.rect.x0) / bx).floor() as usize).min(px - 1);
        let b = (((c[1] - mesh.rect.y0) / by).floor() as usize).min(py - 1);
        let s = b * px + a;
        owner.push(s);
        owned[s].push(e);
    }
    Ok(Decomposition {
        num_subdomains: n,
        grid: (px, py),
        owner,
        overlap: owned.clone(),
        ghost: vec![Vec::new(); n],
        owned,
        layers: 0,
        graph: OverlapGraph::Dual,
    })
}

fn grow_dual(set: &[usize], graph: &DualGraph, mark: &mut [bool]) -> Vec<usize> {
    let mut out = set.to_vec();
    for &e in set {
        for &f in &graph.adjacency[e] {
            if !mark[f] {
                mark[f] = true;
                out.push(f);
            }
        }
    }
    out
}

/// Grow each owned set by `k` dual-graph layers. `k = 0` leaves `overlap == owned`.
pub fn extend_overlap(mut decomp: Decomposition, graph: &DualGraph, k: usize) -> Decomposition {
    let ne = decomp.owner.len();
    decomp.overlap = decomp
        .owned
        .iter()
        .map(|owned| {
            let mut mark = vec![false; ne];
            for &e in owned {
                mark[e] = true;
            }
            let mut set = owned.clone();
            for _ in 0..k {
                set = grow_dual(&set, graph, &mut mark);
            }
            set.sort_unstable();
            set
        })
        .collect();
    decomp.layers = k;
    decomp.graph = OverlapGraph::Dual;
    decomp.ghost = vec![Vec::new(); decomp.num_subdomains];
    decomp
}

fn grow_nodal(set: &[usize], mesh: &Mesh, node_elems: &[Vec<usize>], mark: &mut [bool]) -> Vec<usize> {
    let mut out = set.to_vec();
    for &e in set {
        for &n in &mesh.elements[e] {
            for &f in &node_elems[n] {
                if !mark[f] {
                    mark[f] = true;
                    out.push(f);
                }
            }
        }
    }
    out
}

/// Grow each owned set by `k` nodal-graph layers (all elements touching the current node set).
pub fn extend_overlap_nodal(mut decomp: Decomposition, mesh: &Mesh, k: usize) -> Decomposition {
    let node_elems = mesh.node_elements();
    let ne = decomp.owner.len();
    decomp.overlap = decomp
        .owned
        .iter()
        .map(|owned| {
            let mut mark = vec![false; ne];
            for &e in owned {
                mark[e] = true;
            }
            let mut set = owned.clone();
            for _ in 0..k {
                set = grow_nodal(&set, mesh, &node_elems, &mut mark);
            }
            set.sort_unstable();
            set
        })
        .collect();
    decomp.layers = k;
    decomp.graph = OverlapGraph::Nodal;
    decomp.ghost = vec![Vec::new(); decomp.num_subdomains];
    decomp
}

/// Ghost layer: elements sharing at least one node with the overlapping subdomain
/// but not contained in it.
pub fn ghost_layer(mut decomp: Decomposition, mesh: &Mesh) -> Decomposition {
    let node_elems = mesh.node_elements();
    let ne = decomp.owner.len();
    decomp.ghost = decomp
        .overlap
        .iter()
        .map(|set| {
            let mut mark = vec![false; ne];
            for &e in set {
                mark[e] = true;
            }
            let mut ghost = Vec::new();
            for &e in set {
                for &n in &mesh.elements[e] {
                    for &f in &node_elems[n] {
                        if !mark[f] {
                            mark[f] = true;
                            ghost.push(f);
                        }
                    }
                }
            }
            ghost.sort_unstable();
            ghost
        })
        .collect();
    decomp
}

/// Per-subdomain node sets on some Lagrange layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSets {
    /// Nodes of the nonoverlapping subdomain closure.
    pub owned: Vec<Vec<usize>>,
    /// Nodes of the overlapping subdomain.
    pub overlap: Vec<Vec<usize>>,
    /// Nodes of the overlapping subdomain plus its ghost layer.
    pub extended: Vec<Vec<usize>>,
}

fn nodes_of(elems: impl IntoIterator<Item = usize>, nodes: &LagrangeNodes) -> Vec<usize> {
    let mut out: Vec<usize> = elems
        .into_iter()
        .flat_map(|e| nodes.element(e).iter().copied())
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

impl Decomposition {
    pub fn node_sets(&self, nodes: &LagrangeNodes) -> NodeSets {
        let owned = self
            .owned
            .iter()
            .map(|s| nodes_of(s.iter().copied(), nodes))
            .collect();
        let overlap = self
            .overlap
            .iter()
            .map(|s| nodes_of(s.iter().copied(), nodes))
            .collect();
        let extended = self
            .overlap
            .iter()
            .zip(&self.ghost)
            .map(|(s, g)| nodes_of(s.iter().chain(g).copied(), nodes))
            .collect();
        NodeSets {
            owned,
            overlap,
            extended,
        }
    }

    /// Number of overlapping subdomains containing each node.
    pub fn multiplicity(&self, nodes: &LagrangeNodes) -> Vec<usize> {
        let mut m = vec![0usize; nodes.num_nodes()];
        for set in &self.overlap {
            for n in nodes_of(set.iter().copied(), nodes) {
                m[n] += 1;
            }
        }
        m
    }

    /// Subdomains whose closure touches a node satisfying `pred`.
    pub fn touching(&self, nodes: &LagrangeNodes, pred: impl Fn(usize) -> bool) -> Vec<bool> {
        self.owned
            .iter()
            .map(|s| s.iter().any(|&e| nodes.element(e).iter().any(|&n| pred(n))))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementOrder {
    Linear,
    Quadratic,
}

impl ElementOrder {
    pub fn nodes_per_element(self) -> usize {
        match self {
            ElementOrder::Linear => 3,
            ElementOrder::Quadratic => 6,
        }
    }
}

/// Lagrange node layout on a triangle mesh.
///
/// Vertices keep their mesh numbering; quadratic layouts append one node per mesh
/// edge. Local element order is `v0 v1 v2` followed by the midpoints of
/// `(v0 v1)`, `(v1 v2)`, `(v2 v0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LagrangeNodes {
    pub order: ElementOrder,
    pub coords: Vec<[f64; 2]>,
    pub tags: Vec<BoundaryTag>,
    pub num_vertices: usize,
    elem_nodes: Vec<usize>,
    per: usize,
    /// Consecutive node pairs along element edges.
    segments: Vec<(usize, usize)>,
}

impl LagrangeNodes {
    fn new(mesh: &Mesh, order: ElementOrder) -> Self {
        let per = order.nodes_per_element();
        let mut coords = mesh.nodes.clone();
        let mut tags = mesh.tags.clone();
        let mut elem_nodes = Vec::with_capacity(per * mesh.num_elements());
        let mut segments = Vec::new();
        match order {
            ElementOrder::Linear => {
                let mut seen = HashMap::new();
                for tri in &mesh.elements {
                    elem_nodes.extend_from_slice(tri);
                    for k in 0..3 {
                        let (a, b) = (tri[k], tri[(k + 1) % 3]);
                        seen.entry((a.min(b), a.max(b))).or_insert(());
                    }
                }
                let mut keys: Vec<_> = seen.into_keys().collect();
                keys.sort_unstable();
                segments = keys;
            }
            ElementOrder::Quadratic => {
                let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
                // boundary edges belong to a single element
                let mut count: HashMap<(usize, usize), usize> = HashMap::new();
                for tri in &mesh.elements {
                    for k in 0..3 {
                        let (a, b) = (tri[k], tri[(k + 1) % 3]);
                        *count.entry((a.min(b), a.max(b))).or_insert(0) += 1;
                    }
                }
                for tri in &mesh.elements {
                    elem_nodes.extend_from_slice(tri);
                    for k in 0..3 {
                        let (a, b) = (tri[k], tri[(k + 1) % 3]);
                        let key = (a.min(b), a.max(b));
                        let id = *mid.entry(key).or_insert_with(|| {
                            let id = coords.len();
                            let (pa, pb) = (mesh.nodes[a], mesh.nodes[b]);
                            let p = [0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])];
                            coords.push(p);
                            let tag = if count[&key] == 1 {
                                midpoint_tag(mesh.tags[a], mesh.tags[b])
                            } else {
                                BoundaryTag::Interior
                            };
                            tags.push(tag);
                            segments.push((key.0, id));
                            segments.push((key.1, id));
                            id
                        });
                        elem_nodes.push(id);
                    }
                }
            }
        }
        LagrangeNodes {
            order,
            coords,
            tags,
            num_vertices: mesh.num_nodes(),
            elem_nodes,
            per,
            segments,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn num_elements(&self) -> usize {
        self.elem_nodes.len() / self.per
    }

    pub fn nodes_per_element(&self) -> usize {
        self.per
    }

    pub fn element(&self, e: usize) -> &[usize] {
        &self.elem_nodes[e * self.per..(e + 1) * self.per]
    }

    pub fn segments(&self) -> &[(usize, usize)] {
        &self.segments
    }

    pub fn is_vertex(&self, n: usize) -> bool {
        n < self.num_vertices
    }

    pub fn node_elements(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_nodes()];
        for e in 0..self.num_elements() {
            for &n in self.element(e) {
                out[n].push(e);
            }
        }
        out
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        let (pa, pb) = (self.coords[a], self.coords[b]);
        ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt()
    }
}

/// Tag of a boundary edge midpoint from the tags of its two end vertices.
fn midpoint_tag(a: BoundaryTag, b: BoundaryTag) -> BoundaryTag {
    use BoundaryTag::*;
    match (a, b) {
        (Lid, Lid) => Lid,
        (Neumann, _) | (_, Neumann) => Neumann,
        // corner-to-side edges: the side decides (a lid corner next to a wall node is a wall edge)
        _ => Dirichlet,
    }
}

/// A maximal run of interface nodes shared by exactly two subdomains.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterfaceEdge {
    /// Edge nodes strictly between the end vertices, in geometric order.
    pub nodes: Vec<usize>,
    /// End vertices; `ends[0]` is adjacent to `nodes[0]`.
    pub ends: [Option<usize>; 2],
    pub subdomains: [usize; 2],
}

/// Vertex/edge classification of the interface `Γ` (nodes on two or more subdomain closures).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterfaceSkeleton {
    /// `Γ`, sorted.
    pub interface_nodes: Vec<usize>,
    /// `Γ'`: `Γ` without essential-boundary nodes, sorted.
    pub gamma_prime: Vec<usize>,
    /// Sorted vertex nodes (all of `Γ`, including those on the essential boundary).
    pub vertices: Vec<usize>,
    pub edges: Vec<InterfaceEdge>,
    /// Essential-boundary flag for every node of the layout.
    pub dirichlet: Vec<bool>,
}

impl InterfaceSkeleton {
    pub fn is_empty(&self) -> bool {
        self.interface_nodes.is_empty()
    }

    pub fn is_vertex(&self, n: usize) -> bool {
        self.vertices.binary_search(&n).is_ok()
    }

    /// Vertices that carry coarse functions (those in `Γ'`).
    pub fn active_vertices(&self) -> Vec<usize> {
        self.vertices
            .iter()
            .copied()
            .filter(|&v| !self.dirichlet[v])
            .collect()
    }
}

/// Classify `Γ` into vertices and edges.
///
/// A node is a vertex when it lies on three or more subdomain closures, or on two
/// and on the essential boundary (so edges that reach a Dirichlet boundary end in a
/// vertex). Edges reaching a natural boundary run up to it without an end vertex.
/// `is_dirichlet` marks essential-boundary nodes, which are removed from `Γ'`.
pub fn interface_skeleton(
    decomp: &Decomposition,
    nodes: &LagrangeNodes,
    is_dirichlet: impl Fn(usize) -> bool,
) -> Result<InterfaceSkeleton> {
    let nn = nodes.num_nodes();
    let mut subs: Vec<Vec<usize>> = vec![Vec::new(); nn];
    for (e, &s) in decomp.owner.iter().enumerate() {
        for &n in nodes.element(e) {
            if !subs[n].contains(&s) {
                subs[n].push(s);
            }
        }
    }
    for s in &mut subs {
        s.sort_unstable();
    }
    let dirichlet: Vec<bool> = (0..nn).map(&is_dirichlet).collect();
    let interface_nodes: Vec<usize> = (0..nn).filter(|&n| subs[n].len() >= 2).collect();
    let gamma_prime = interface_nodes
        .iter()
        .copied()
        .filter(|&n| !dirichlet[n])
        .collect();
    let is_vertex = |n: usize| {
        subs[n].len() >= 3 || (subs[n].len() == 2 && dirichlet[n] && nodes.tags[n].on_boundary())
    };
    let vertices: Vec<usize> = interface_nodes
        .iter()
        .copied()
        .filter(|&n| is_vertex(n))
        .collect();

    let mut nbrs: Vec<Vec<usize>> = vec![Vec::new(); nn];
    for &(a, b) in nodes.segments() {
        if subs[a].len() >= 2 && subs[b].len() >= 2 {
            nbrs[a].push(b);
            nbrs[b].push(a);
        }
    }

    let mut comp = vec![usize::MAX; nn];
    let mut edges = Vec::new();
    for &start in &interface_nodes {
        if is_vertex(start) || comp[start] != usize::MAX {
            continue;
        }
        let key = subs[start].clone();
        if key.len() != 2 {
            return Err(Error::MalformedSkeleton(format!(
                "non-vertex interface node {start} lies on {} subdomains",
                key.len()
            )));
        }
        let id = edges.len();
        let mut members = vec![start];
        comp[start] = id;
        let mut stack = vec![start];
        while let Some(n) = stack.pop() {
            for &m in &nbrs[n] {
                if comp[m] == usize::MAX && !is_vertex(m) && subs[m] == key {
                    comp[m] = id;
                    members.push(m);
                    stack.push(m);
                }
            }
        }
        let in_edge = |m: usize| comp[m] == id;
        let degree = |n: usize| nbrs[n].iter().filter(|&&m| in_edge(m)).count();
        let first = members
            .iter()
            .copied()
            .filter(|&n| degree(n) <= 1)
            .min()
            .unwrap_or_else(|| *members.iter().min().unwrap());
        let mut ordered = vec![first];
        let mut prev = usize::MAX;
        let mut cur = first;
        loop {
            let next = nbrs[cur]
                .iter()
                .copied()
                .filter(|&m| in_edge(m) && m != prev && !ordered.contains(&m))
                .min();
            match next {
                Some(m) => {
                    ordered.push(m);
                    prev = cur;
                    cur = m;
                }
                None => break,
            }
        }
        if ordered.len() != members.len() {
            return Err(Error::MalformedSkeleton(format!(
                "interface edge starting at node {first} is not a simple path"
            )));
        }
        let end_vertices = |n: usize| -> Vec<usize> {
            let mut v: Vec<usize> = nbrs[n]
                .iter()
                .copied()
                .filter(|&m| is_vertex(m) && key.iter().all(|s| subs[m].contains(s)))
                .collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        let head = end_vertices(ordered[0]);
        let tail = end_vertices(*ordered.last().unwrap());
        let ends = if ordered.len() == 1 {
            [head.first().copied(), head.get(1).copied()]
        } else {
            let h = head.first().copied();
            let t = tail.iter().copied().find(|&v| Some(v) != h);
            [h, t]
        };
        edges.push(InterfaceEdge {
            nodes: ordered,
            ends,
            subdomains: [key[0], key[1]],
        });
    }

    Ok(InterfaceSkeleton {
        interface_nodes,
        gamma_prime,
        vertices,
        edges,
        dirichlet,
    })
}

/// Skeleton of a linear mesh with the mesh's own Dirichlet tags.
pub fn mesh_interface_skeleton(decomp: &Decomposition, mesh: &Mesh) -> Result<InterfaceSkeleton> {
    let nodes = mesh.lagrange_nodes(ElementOrder::Linear);
    interface_skeleton(decomp, &nodes, |n| nodes.tags[n].is_dirichlet())
}
