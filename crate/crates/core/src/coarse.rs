//! GDSW-type coarse spaces: interface partitions of unity on the vertex/edge
//! skeleton, multiplied by nullspace vectors and extended discrete-harmonically into
//! the nonoverlapping subdomain interiors.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{Model, ProblemSpec};
use crate::error::{Error, Result};
use crate::mesh::{interface_skeleton, Decomposition, InterfaceSkeleton, LagrangeNodes};
use crate::sparse::{CsrMatrix, Factorization};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoarseKind {
    Gdsw,
    Rgdsw,
    Msfem,
}

impl CoarseKind {
    pub fn name(self) -> &'static str {
        match self {
            CoarseKind::Gdsw => "gdsw",
            CoarseKind::Rgdsw => "rgdsw",
            CoarseKind::Msfem => "msfem",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CoarseConfig {
    pub kind: CoarseKind,
    /// Inverse-distance decay on edges ending at the essential boundary (RGDSW, MsFEM).
    pub modified: bool,
}

impl CoarseConfig {
    pub fn label(&self) -> String {
        if self.modified && self.kind != CoarseKind::Gdsw {
            format!("mod_{}", self.kind.name())
        } else {
            self.kind.name().to_string()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoarseEntity {
    /// Vertex node id in the field's node layout.
    Vertex(usize),
    /// Index into the skeleton's edge list.
    Edge(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterfaceFunction {
    pub entity: CoarseEntity,
    /// `(node, value)` pairs sorted by node; nodes absent from the list carry 0.
    pub values: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterfaceFunctionSet {
    pub kind: CoarseKind,
    pub modified: bool,
    pub functions: Vec<InterfaceFunction>,
}

impl InterfaceFunctionSet {
    /// Pointwise sum of all functions over a layout with `num_nodes` nodes.
    pub fn sum(&self, num_nodes: usize) -> Vec<f64> {
        let mut s = vec![0.0; num_nodes];
        for f in &self.functions {
            for &(n, v) in &f.values {
                s[n] += v;
            }
        }
        s
    }
}

/// Edges adjacent to each vertex, as `(edge index, position of the vertex in `ends`)`.
fn vertex_edges(sk: &InterfaceSkeleton) -> std::collections::HashMap<usize, Vec<(usize, usize)>> {
    let mut map: std::collections::HashMap<usize, Vec<(usize, usize)>> = Default::default();
    for (k, e) in sk.edges.iter().enumerate() {
        for (side, end) in e.ends.iter().enumerate() {
            if let Some(v) = end {
                map.entry(*v).or_default().push((k, side));
            }
        }
    }
    map
}

fn active(sk: &InterfaceSkeleton, v: Option<usize>) -> bool {
    v.is_some_and(|v| !sk.dirichlet[v])
}

fn finish(entity: CoarseEntity, mut values: Vec<(usize, f64)>) -> InterfaceFunction {
    values.sort_unstable_by_key(|e| e.0);
    InterfaceFunction { entity, values }
}

/// Checks that every edge with interior nodes has at least one active end vertex.
fn check_covered(sk: &InterfaceSkeleton) -> Result<()> {
    for (k, e) in sk.edges.iter().enumerate() {
        let has_free = e.nodes.iter().any(|&n| !sk.dirichlet[n]);
        if has_free && !e.ends.iter().any(|&v| active(sk, v)) {
            return Err(Error::MalformedSkeleton(format!(
                "interface edge {k} has no end vertex off the essential boundary; \
                 vertex-based coarse spaces cannot cover it"
            )));
        }
    }
    Ok(())
}

/// Per-edge weight of end `side` at node `n` for vertex-based spaces without modification.
fn edge_weight(
    kind: CoarseKind,
    sk: &InterfaceSkeleton,
    nodes: &LagrangeNodes,
    edge: usize,
    side: usize,
    n: usize,
) -> Result<f64> {
    let e = &sk.edges[edge];
    let other = e.ends[1 - side];
    if !active(sk, other) {
        // a single active end vertex covers the whole edge
        return Ok(1.0);
    }
    match kind {
        CoarseKind::Rgdsw => Ok(0.5),
        CoarseKind::Msfem => {
            inverse_distance(nodes, e.ends[side].unwrap(), other.unwrap(), n)
        }
        CoarseKind::Gdsw => unreachable!("GDSW has no edge weights"),
    }
}

/// `(1/d_v) / (1/d_end + 1/d_v)` at node `n`.
fn inverse_distance(nodes: &LagrangeNodes, v: usize, end: usize, n: usize) -> Result<f64> {
    let dv = nodes.distance(n, v);
    let de = nodes.distance(n, end);
    if dv == 0.0 || de == 0.0 {
        return Err(Error::MalformedSkeleton(format!(
            "edge node {n} coincides with an end vertex"
        )));
    }
    Ok((1.0 / dv) / (1.0 / de + 1.0 / dv))
}

fn vertex_functions(
    kind: CoarseKind,
    sk: &InterfaceSkeleton,
    nodes: &LagrangeNodes,
) -> Result<InterfaceFunctionSet> {
    check_covered(sk)?;
    let adj = vertex_edges(sk);
    let mut functions = Vec::new();
    for v in sk.active_vertices() {
        let mut values = vec![(v, 1.0)];
        for &(k, side) in adj.get(&v).map(Vec::as_slice).unwrap_or(&[]) {
            for &n in &sk.edges[k].nodes {
                if !sk.dirichlet[n] {
                    values.push((n, edge_weight(kind, sk, nodes, k, side, n)?));
                }
            }
        }
        functions.push(finish(CoarseEntity::Vertex(v), values));
    }
    Ok(InterfaceFunctionSet {
        kind,
        modified: false,
        functions,
    })
}

/// RGDSW vertex functions: 1 at the vertex, 1/2 on edges shared with a second
/// active vertex, 1 on edges whose other end lies on the essential boundary.
pub fn rgdsw_interface_functions(
    sk: &InterfaceSkeleton,
    nodes: &LagrangeNodes,
) -> Result<InterfaceFunctionSet> {
    vertex_functions(CoarseKind::Rgdsw, sk, nodes)
}

/// MsFEM vertex functions: inverse-distance weights between the two end vertices of an edge.
pub fn msfem_interface_functions(
    sk: &InterfaceSkeleton,
    nodes: &LagrangeNodes,
) -> Result<InterfaceFunctionSet> {
    vertex_functions(CoarseKind::Msfem, sk, nodes)
}

/// GDSW: vertex deltas plus one indicator per edge.
pub fn gdsw_interface_functions(sk: &InterfaceSkeleton) -> InterfaceFunctionSet {
    let mut functions: Vec<InterfaceFunction> = sk
        .active_vertices()
        .into_iter()
        .map(|v| finish(CoarseEntity::Vertex(v), vec![(v, 1.0)]))
        .collect();
    for (k, e) in sk.edges.iter().enumerate() {
        let values: Vec<(usize, f64)> = e
            .nodes
            .iter()
            .filter(|&&n| !sk.dirichlet[n])
            .map(|&n| (n, 1.0))
            .collect();
        if !values.is_empty() {
            functions.push(finish(CoarseEntity::Edge(k), values));
        }
    }
    InterfaceFunctionSet {
        kind: CoarseKind::Gdsw,
        modified: false,
        functions,
    }
}

/// Replace the values on edges ending at the essential boundary by an inverse-distance
/// decay towards the boundary end vertex.
pub fn apply_dirichlet_edge_modification(
    mut fns: InterfaceFunctionSet,
    sk: &InterfaceSkeleton,
    nodes: &LagrangeNodes,
) -> Result<InterfaceFunctionSet> {
    if fns.kind == CoarseKind::Gdsw {
        return Err(Error::Config(
            "the Dirichlet-edge modification applies to RGDSW and MsFEM only".into(),
        ));
    }
    let adj = vertex_edges(sk);
    for f in &mut fns.functions {
        let CoarseEntity::Vertex(v) = f.entity else { continue };
        for &(k, side) in adj.get(&v).map(Vec::as_slice).unwrap_or(&[]) {
            let e = &sk.edges[k];
            let Some(end) = e.ends[1 - side] else { continue };
            if !sk.dirichlet[end] {
                continue;
            }
            for &n in &e.nodes {
                if let Ok(pos) = f.values.binary_search_by_key(&n, |x| x.0) {
                    f.values[pos].1 = inverse_distance(nodes, v, end, n)?;
                }
            }
        }
    }
    fns.modified = true;
    Ok(fns)
}

pub fn interface_functions(
    cfg: CoarseConfig,
    sk: &InterfaceSkeleton,
    nodes: &LagrangeNodes,
) -> Result<InterfaceFunctionSet> {
    let base = match cfg.kind {
        CoarseKind::Gdsw => return Ok(gdsw_interface_functions(sk)),
        CoarseKind::Rgdsw => rgdsw_interface_functions(sk, nodes)?,
        CoarseKind::Msfem => msfem_interface_functions(sk, nodes)?,
    };
    if cfg.modified {
        apply_dirichlet_edge_modification(base, sk, nodes)
    } else {
        Ok(base)
    }
}

/// Interface data of one field: its node layout, skeleton and interface functions.
#[derive(Debug, Clone)]
pub struct FieldInterface {
    pub field: usize,
    pub nodes: LagrangeNodes,
    pub skeleton: InterfaceSkeleton,
    pub functions: InterfaceFunctionSet,
}

/// Metadata of a coarse basis column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoarseColumn {
    pub entity: CoarseEntity,
    /// Index into the model's nullspace basis.
    pub nullspace: usize,
    /// Field whose interface functions define the column (the owning field in the monolithic case).
    pub field: usize,
}

#[derive(Debug, Clone)]
pub struct CoarseSpace {
    pub config: CoarseConfig,
    /// `ndofs x ncols` prolongation.
    pub p0: CsrMatrix,
    pub columns: Vec<CoarseColumn>,
    pub monolithic: bool,
    pub interfaces: Vec<FieldInterface>,
}

impl CoarseSpace {
    pub fn dim(&self) -> usize {
        self.columns.len()
    }
}

/// Interface skeleton and functions for every field of the model.
pub fn field_interfaces(
    model: &Model,
    decomp: &Decomposition,
    cfg: CoarseConfig,
) -> Result<Vec<FieldInterface>> {
    model
        .dofs
        .fields
        .iter()
        .enumerate()
        .map(|(f, fl)| {
            let nodes = if fl.order == model.nodes.order {
                model.nodes.clone()
            } else {
                model.mesh.lagrange_nodes(fl.order)
            };
            let off = fl.offset;
            let skeleton =
                interface_skeleton(decomp, &nodes, |n| model.dofs.dirichlet[off + n])?;
            let functions = interface_functions(cfg, &skeleton, &nodes)?;
            Ok(FieldInterface {
                field: f,
                nodes,
                skeleton,
                functions,
            })
        })
        .collect()
}

/// Extend interface columns into the nonoverlapping subdomain interiors.
///
/// `is_gamma` marks the interface dofs; `columns` hold the values on those dofs.
/// Interior dofs of subdomain `i` are the non-interface, non-essential dofs of its
/// closure. Each interior block is factorized once and solved for every column it touches:
/// `φ_I = -A_II⁻¹ A_IΓ φ_Γ`. Essential dofs stay zero.
pub fn harmonic_extension(
    a: &CsrMatrix,
    model: &Model,
    decomp: &Decomposition,
    is_gamma: &[bool],
    columns: &[Vec<(usize, f64)>],
) -> Result<CsrMatrix> {
    let n = model.ndofs();
    if a.nrows() != n || a.ncols() != n || is_gamma.len() != n {
        return Err(Error::Dimension("extension operator does not match the model".into()));
    }
    let ncols = columns.len();
    // columns touching each interface dof
    let mut touching: Vec<Vec<u32>> = vec![Vec::new(); n];
    for (c, col) in columns.iter().enumerate() {
        for &(d, v) in col {
            if !is_gamma[d] {
                return Err(Error::Dimension(format!("column {c} has a value off the interface at dof {d}")));
            }
            if v != 0.0 {
                touching[d].push(c as u32);
            }
        }
    }
    let per_subdomain: Vec<Result<Vec<(usize, usize, f64)>>> = (0..decomp.num_subdomains)
        .into_par_iter()
        .map(|i| {
            let mut seen = vec![false; n];
            let mut interior = Vec::new();
            let mut gamma = Vec::new();
            for &e in &decomp.owned[i] {
                for &d in model.dofs.element_dofs(e) {
                    let d = d as usize;
                    if seen[d] {
                        continue;
                    }
                    seen[d] = true;
                    if is_gamma[d] {
                        gamma.push(d);
                    } else if !model.dofs.dirichlet[d] {
                        interior.push(d);
                    }
                }
            }
            interior.sort_unstable();
            gamma.sort_unstable();
            let mut cols: Vec<u32> = gamma.iter().flat_map(|&d| touching[d].iter().copied()).collect();
            cols.sort_unstable();
            cols.dedup();
            if interior.is_empty() || cols.is_empty() {
                return Ok(Vec::new());
            }
            let aii = a.submatrix(&interior, &interior);
            let aig = a.submatrix(&interior, &gamma);
            let fact = Factorization::new(&aii).map_err(|e| match e {
                Error::SingularMatrix { pivot } => Error::SingularSubdomain { subdomain: i, pivot },
                other => other,
            })?;
            let ni = interior.len();
            let mut pos = vec![usize::MAX; n];
            for (k, &d) in gamma.iter().enumerate() {
                pos[d] = k;
            }
            let mut rhs = vec![0.0; ni * cols.len()];
            let mut phi_g = vec![0.0; gamma.len()];
            for (j, &c) in cols.iter().enumerate() {
                phi_g.iter_mut().for_each(|x| *x = 0.0);
                for &(d, v) in &columns[c as usize] {
                    if pos[d] != usize::MAX {
                        phi_g[pos[d]] = v;
                    }
                }
                let r = aig.mul_vec(&phi_g);
                for k in 0..ni {
                    rhs[j * ni + k] = -r[k];
                }
            }
            fact.solve_many_in_place(&mut rhs, cols.len());
            let mut out = Vec::new();
            for (j, &c) in cols.iter().enumerate() {
                for k in 0..ni {
                    let v = rhs[j * ni + k];
                    if v != 0.0 {
                        out.push((interior[k], c as usize, v));
                    }
                }
            }
            Ok(out)
        })
        .collect();
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    for (c, col) in columns.iter().enumerate() {
        for &(d, v) in col {
            if v != 0.0 {
                triplets.push((d, c, v));
            }
        }
    }
    for part in per_subdomain {
        triplets.extend(part?);
    }
    CsrMatrix::from_triplets(n, ncols, &triplets)
}

/// Build the coarse space of `model` on `decomp` with extension operator `a` (the
/// tangent at the initial iterate). Cavity problems get the monolithic construction:
/// one column per vertex and field, off-diagonal field blocks zeroed after extension.
pub fn build_coarse_space(
    model: &Model,
    decomp: &Decomposition,
    a: &CsrMatrix,
    cfg: CoarseConfig,
) -> Result<CoarseSpace> {
    let interfaces = field_interfaces(model, decomp, cfg)?;
    let n = model.ndofs();
    let mut is_gamma = vec![false; n];
    for fi in &interfaces {
        let off = model.dofs.fields[fi.field].offset;
        for &node in &fi.skeleton.interface_nodes {
            is_gamma[off + node] = true;
        }
    }
    let nullspace = model.nullspace_basis();
    let ns_fields = model.nullspace_fields();
    let mut columns = Vec::new();
    let mut meta = Vec::new();
    for (k, z) in nullspace.iter().enumerate() {
        match ns_fields[k] {
            Some(f) => {
                let fi = &interfaces[f];
                let off = model.dofs.fields[f].offset;
                for func in &fi.functions.functions {
                    let col: Vec<(usize, f64)> = func
                        .values
                        .iter()
                        .map(|&(node, v)| (off + node, v * z[off + node]))
                        .filter(|e| e.1 != 0.0)
                        .collect();
                    columns.push(col);
                    meta.push(CoarseColumn { entity: func.entity, nullspace: k, field: f });
                }
            }
            None => {
                // vector-valued nullspace: all fields share the layout of field 0
                let fi = &interfaces[0];
                if interfaces.iter().any(|o| o.skeleton != fi.skeleton) {
                    return Err(Error::Config(
                        "coupled nullspace vectors need identical field skeletons".into(),
                    ));
                }
                for func in &fi.functions.functions {
                    let mut col = Vec::new();
                    for fl in &model.dofs.fields {
                        for &(node, v) in &func.values {
                            let d = fl.offset + node;
                            let w = v * z[d];
                            if w != 0.0 {
                                col.push((d, w));
                            }
                        }
                    }
                    columns.push(col);
                    meta.push(CoarseColumn { entity: func.entity, nullspace: k, field: 0 });
                }
            }
        }
    }
    let mut p0 = harmonic_extension(a, model, decomp, &is_gamma, &columns)?;
    let monolithic = matches!(model.spec, ProblemSpec::Cavity { .. });
    if monolithic {
        p0 = zero_off_diagonal_blocks(&p0, model, &meta);
    }
    Ok(CoarseSpace {
        config: cfg,
        p0,
        columns: meta,
        monolithic,
        interfaces,
    })
}

fn zero_off_diagonal_blocks(p0: &CsrMatrix, model: &Model, meta: &[CoarseColumn]) -> CsrMatrix {
    let mut t = Vec::with_capacity(p0.nnz());
    for i in 0..p0.nrows() {
        let f = model.dofs.field_of(i);
        let (cols, vals) = p0.row(i);
        for (&c, &v) in cols.iter().zip(vals) {
            if meta[c as usize].field == f {
                t.push((i, c as usize, v));
            }
        }
    }
    CsrMatrix::from_triplets(p0.nrows(), p0.ncols(), &t).expect("same shape")
}

/// Node-value dump of one coarse column: `x y v_0 .. v_{fields-1}` per node of the
/// primary layout (fields on a coarser layout report their vertex values, 0 elsewhere).
pub fn export_column(space: &CoarseSpace, model: &Model, column: usize) -> Result<String> {
    if column >= space.dim() {
        return Err(Error::Config(format!(
            "column {column} out of range (coarse dimension {})",
            space.dim()
        )));
    }
    let n = model.ndofs();
    let mut e = vec![0.0; space.dim()];
    e[column] = 1.0;
    let phi = space.p0.mul_vec(&e);
    debug_assert_eq!(phi.len(), n);
    let mut s = String::new();
    let _ = writeln!(s, "# x y {}", model.dofs.fields.iter().map(|f| f.name).collect::<Vec<_>>().join(" "));
    for (k, p) in model.nodes.coords.iter().enumerate() {
        let _ = write!(s, "{:?} {:?}", p[0], p[1]);
        for fl in &model.dofs.fields {
            let v = if k < fl.count { phi[fl.offset + k] } else { 0.0 };
            let _ = write!(s, " {v:?}");
        }
        s.push('\n');
    }
    Ok(s)
}
