//! Nonlinear problem definitions and their finite element assembly.
//!
//! Three problems are supported:
//! - the stationary lid-driven cavity, Taylor-Hood P2/P1, unknowns `(u_x, u_y, p)`;
//! - a plane Neo-Hookean beam under a vertical body load, P1 displacements;
//! - scalar diffusion `-div(k(u) grad u) = f` with `k = 1 + alpha u^2` or constant `k`.
//!
//! Degrees of freedom are numbered field by field: every field owns a contiguous block
//! indexed by node id. Residual rows at essential-boundary dofs are `u - g` and the
//! matching tangent rows are unit rows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{BoundaryLayout, BoundaryTag, ElementOrder, LagrangeNodes, Mesh, Rect};
use crate::sparse::CsrMatrix;

/// Coefficient law of the scalar diffusion problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum DiffusionLaw {
    /// `k(u) = k`.
    Linear { k: f64 },
    /// `k(u) = 1 + alpha u^2`.
    Quadratic { alpha: f64 },
}

impl DiffusionLaw {
    fn k(&self, u: f64) -> (f64, f64) {
        match *self {
            DiffusionLaw::Linear { k } => (k, 0.0),
            DiffusionLaw::Quadratic { alpha } => (1.0 + alpha * u * u, 2.0 * alpha * u),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemSpec {
    Cavity {
        reynolds: f64,
    },
    Beam {
        /// Young's modulus in Pa.
        youngs_modulus: f64,
        poisson_ratio: f64,
        /// Downward body force per unit area in N/m².
        load_y: f64,
    },
    Diffusion {
        #[serde(flatten)]
        law: DiffusionLaw,
        source: f64,
    },
}

impl ProblemSpec {
    pub fn cavity(reynolds: f64) -> Self {
        ProblemSpec::Cavity { reynolds }
    }

    /// Beam with E = 210 MN/m², ν = 0.3 and the load given in MN/m². Loads of a few
    /// MN/m² then give deflections of the order of the beam height.
    pub fn beam_mn(load_mn: f64) -> Self {
        ProblemSpec::Beam {
            youngs_modulus: 210e6,
            poisson_ratio: 0.3,
            load_y: load_mn * 1e6,
        }
    }

    pub fn diffusion(alpha: f64, source: f64) -> Self {
        ProblemSpec::Diffusion {
            law: DiffusionLaw::Quadratic { alpha },
            source,
        }
    }

    pub fn linear_diffusion(k: f64, source: f64) -> Self {
        ProblemSpec::Diffusion {
            law: DiffusionLaw::Linear { k },
            source,
        }
    }

    pub fn layout(&self) -> BoundaryLayout {
        match self {
            ProblemSpec::Cavity { .. } => BoundaryLayout::Cavity,
            ProblemSpec::Beam { .. } => BoundaryLayout::Beam,
            ProblemSpec::Diffusion { .. } => BoundaryLayout::Clamped,
        }
    }

    pub fn domain(&self) -> Rect {
        match self {
            ProblemSpec::Beam { .. } => Rect::beam(),
            _ => Rect::unit_square(),
        }
    }

    pub fn order(&self) -> ElementOrder {
        match self {
            ProblemSpec::Cavity { .. } => ElementOrder::Quadratic,
            _ => ElementOrder::Linear,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            ProblemSpec::Cavity { reynolds } => reynolds > 0.0,
            ProblemSpec::Beam {
                youngs_modulus,
                poisson_ratio,
                load_y,
            } => youngs_modulus > 0.0 && poisson_ratio > -1.0 && poisson_ratio < 0.5 && load_y.is_finite(),
            ProblemSpec::Diffusion { law, source } => {
                source.is_finite()
                    && match law {
                        DiffusionLaw::Linear { k } => k > 0.0,
                        DiffusionLaw::Quadratic { alpha } => alpha >= 0.0,
                    }
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid problem parameters {self:?}")))
        }
    }
}

/// One solution field: a contiguous dof block over the nodes of some Lagrange order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldLayout {
    pub name: &'static str,
    pub order: ElementOrder,
    pub offset: usize,
    pub count: usize,
}

/// Global dof numbering plus essential boundary data.
#[derive(Debug, Clone, PartialEq)]
pub struct DofMap {
    pub fields: Vec<FieldLayout>,
    pub ndofs: usize,
    pub dirichlet: Vec<bool>,
    pub dirichlet_values: Vec<f64>,
    elem_dofs: Vec<u32>,
    per: usize,
}

impl DofMap {
    pub fn element_dofs(&self, e: usize) -> &[u32] {
        &self.elem_dofs[e * self.per..(e + 1) * self.per]
    }

    pub fn dofs_per_element(&self) -> usize {
        self.per
    }

    /// `(field, node)` of a global dof.
    pub fn locate(&self, d: usize) -> (usize, usize) {
        for (f, fl) in self.fields.iter().enumerate() {
            if d >= fl.offset && d < fl.offset + fl.count {
                return (f, d - fl.offset);
            }
        }
        panic!("dof {d} out of range");
    }

    pub fn dof(&self, field: usize, node: usize) -> usize {
        self.fields[field].offset + node
    }

    pub fn field_of(&self, d: usize) -> usize {
        self.locate(d).0
    }
}

/// A problem bound to a mesh: the object every solver works with.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ProblemSpec,
    pub mesh: Mesh,
    /// Nodes of the primary (velocity / displacement / scalar) field.
    pub nodes: LagrangeNodes,
    pub dofs: DofMap,
    pattern: CsrMatrix,
}

const DUNAVANT4: [([f64; 3], f64); 6] = {
    const A1: f64 = 0.445948490915965;
    const W1: f64 = 0.223381589678011;
    const A2: f64 = 0.091576213509771;
    const W2: f64 = 0.109951743655322;
    [
        ([A1, A1, 1.0 - 2.0 * A1], W1),
        ([A1, 1.0 - 2.0 * A1, A1], W1),
        ([1.0 - 2.0 * A1, A1, A1], W1),
        ([A2, A2, 1.0 - 2.0 * A2], W2),
        ([A2, 1.0 - 2.0 * A2, A2], W2),
        ([1.0 - 2.0 * A2, A2, A2], W2),
    ]
};

const MIDPOINT3: [([f64; 3], f64); 3] = [
    ([2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0], 1.0 / 3.0),
    ([1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0], 1.0 / 3.0),
    ([1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0], 1.0 / 3.0),
];

const MAX_PER: usize = 15;

/// Element output buffer.
struct Local {
    res: [f64; MAX_PER],
    jac: [f64; MAX_PER * MAX_PER],
}

impl Local {
    fn new() -> Self {
        Local {
            res: [0.0; MAX_PER],
            jac: [0.0; MAX_PER * MAX_PER],
        }
    }
}

/// Area and physical gradients of the barycentric coordinates.
fn geometry(p: [[f64; 2]; 3]) -> (f64, [[f64; 2]; 3]) {
    let (x10, y10) = (p[1][0] - p[0][0], p[1][1] - p[0][1]);
    let (x20, y20) = (p[2][0] - p[0][0], p[2][1] - p[0][1]);
    let det = x10 * y20 - x20 * y10;
    let g1 = [y20 / det, -x20 / det];
    let g2 = [-y10 / det, x10 / det];
    let g0 = [-g1[0] - g2[0], -g1[1] - g2[1]];
    (0.5 * det, [g0, g1, g2])
}

fn diffusion_kernel(
    law: DiffusionLaw,
    source: f64,
    p: [[f64; 2]; 3],
    u: &[f64],
    want_jac: bool,
    out: &mut Local,
) {
    let (area, g) = geometry(p);
    let grad = [
        u[0] * g[0][0] + u[1] * g[1][0] + u[2] * g[2][0],
        u[0] * g[0][1] + u[1] * g[1][1] + u[2] * g[2][1],
    ];
    for (lam, w) in MIDPOINT3 {
        let uq = lam[0] * u[0] + lam[1] * u[1] + lam[2] * u[2];
        let (k, dk) = law.k(uq);
        let wa = w * area;
        for a in 0..3 {
            let ga = grad[0] * g[a][0] + grad[1] * g[a][1];
            out.res[a] += wa * (k * ga - source * lam[a]);
            if want_jac {
                for c in 0..3 {
                    let gc = g[c][0] * g[a][0] + g[c][1] * g[a][1];
                    out.jac[a * 3 + c] += wa * (k * gc + dk * lam[c] * ga);
                }
            }
        }
    }
}

fn inv2(m: [[f64; 2]; 2]) -> ([[f64; 2]; 2], f64) {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    (
        [
            [m[1][1] / det, -m[0][1] / det],
            [-m[1][0] / det, m[0][0] / det],
        ],
        det,
    )
}

#[allow(clippy::too_many_arguments)]
fn beam_kernel(
    e: usize,
    young: f64,
    nu: f64,
    load: f64,
    p: [[f64; 2]; 3],
    u: &[f64],
    want_jac: bool,
    out: &mut Local,
) -> Result<()> {
    let (area, g) = geometry(p);
    let a = young / (1.0 + nu);
    let b = young * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
    // u layout: ux0 ux1 ux2 uy0 uy1 uy2
    let mut f = [[1.0, 0.0], [0.0, 1.0]];
    for n in 0..3 {
        for j in 0..2 {
            f[0][j] += u[n] * g[n][j];
            f[1][j] += u[3 + n] * g[n][j];
        }
    }
    let (finv, det) = inv2(f);
    if det <= 0.0 || !det.is_finite() {
        return Err(Error::NonPhysicalState { element: e, det });
    }
    let ft = [[finv[0][0], finv[1][0]], [finv[0][1], finv[1][1]]]; // F^{-T}
    let lnj = det.ln();
    let mut pk = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            pk[i][j] = a * (f[i][j] - ft[i][j]) + b * lnj * ft[i][j];
        }
    }
    for n in 0..3 {
        for i in 0..2 {
            let row = i * 3 + n;
            out.res[row] += area * (pk[i][0] * g[n][0] + pk[i][1] * g[n][1]);
        }
        out.res[3 + n] += load * area / 3.0;
    }
    if want_jac {
        for c in 0..3 {
            for k in 0..2 {
                // H = e_k ⊗ grad N_c
                let mut h = [[0.0; 2]; 2];
                h[k] = g[c];
                // F^{-T} Hᵀ F^{-T}
                let mut m = [[0.0; 2]; 2];
                for i in 0..2 {
                    for j in 0..2 {
                        let mut s = 0.0;
                        for p_ in 0..2 {
                            for q in 0..2 {
                                s += ft[i][p_] * h[q][p_] * ft[q][j];
                            }
                        }
                        m[i][j] = s;
                    }
                }
                let tr = ft[0][0] * h[0][0] + ft[0][1] * h[0][1] + ft[1][0] * h[1][0] + ft[1][1] * h[1][1];
                let col = k * 3 + c;
                for n in 0..3 {
                    for i in 0..2 {
                        let mut s = 0.0;
                        for j in 0..2 {
                            let dp = a * h[i][j] + (a - b * lnj) * m[i][j] + b * tr * ft[i][j];
                            s += dp * g[n][j];
                        }
                        out.jac[(i * 3 + n) * 6 + col] += area * s;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Quadratic shape values and gradients at barycentric point `lam`.
fn p2_basis(lam: [f64; 3], g: &[[f64; 2]; 3]) -> ([f64; 6], [[f64; 2]; 6]) {
    let mut n = [0.0; 6];
    let mut dn = [[0.0; 2]; 6];
    for v in 0..3 {
        n[v] = lam[v] * (2.0 * lam[v] - 1.0);
        let s = 4.0 * lam[v] - 1.0;
        dn[v] = [s * g[v][0], s * g[v][1]];
    }
    for (m, (i, j)) in [(0usize, 1usize), (1, 2), (2, 0)].into_iter().enumerate() {
        n[3 + m] = 4.0 * lam[i] * lam[j];
        dn[3 + m] = [
            4.0 * (lam[i] * g[j][0] + lam[j] * g[i][0]),
            4.0 * (lam[i] * g[j][1] + lam[j] * g[i][1]),
        ];
    }
    (n, dn)
}

fn cavity_kernel(nu: f64, p: [[f64; 2]; 3], u: &[f64], want_jac: bool, out: &mut Local) {
    let (area, g) = geometry(p);
    // u layout: ux[0..6] uy[6..12] p[12..15]
    const UY: usize = 6;
    const PR: usize = 12;
    for (lam, w) in DUNAVANT4 {
        let wa = w * area;
        let (n, dn) = p2_basis(lam, &g);
        let mut vel = [0.0; 2];
        let mut gv = [[0.0; 2]; 2]; // gv[i][j] = d u_i / d x_j
        for a in 0..6 {
            for i in 0..2 {
                let ui = u[i * UY + a];
                vel[i] += ui * n[a];
                gv[i][0] += ui * dn[a][0];
                gv[i][1] += ui * dn[a][1];
            }
        }
        let pq = lam[0] * u[PR] + lam[1] * u[PR + 1] + lam[2] * u[PR + 2];
        let div = gv[0][0] + gv[1][1];
        for a in 0..6 {
            for i in 0..2 {
                let visc = nu * (gv[i][0] * dn[a][0] + gv[i][1] * dn[a][1]);
                let conv = (vel[0] * gv[i][0] + vel[1] * gv[i][1]) * n[a];
                out.res[i * UY + a] += wa * (visc + conv - pq * dn[a][i]);
            }
        }
        for b in 0..3 {
            out.res[PR + b] -= wa * lam[b] * div;
        }
        if !want_jac {
            continue;
        }
        let adv: [f64; 6] = std::array::from_fn(|c| vel[0] * dn[c][0] + vel[1] * dn[c][1]);
        for a in 0..6 {
            for c in 0..6 {
                let lap = nu * (dn[c][0] * dn[a][0] + dn[c][1] * dn[a][1]) + adv[c] * n[a];
                let ncna = n[c] * n[a];
                for i in 0..2 {
                    for k in 0..2 {
                        let mut v = ncna * gv[i][k];
                        if i == k {
                            v += lap;
                        }
                        out.jac[(i * UY + a) * MAX_PER + k * UY + c] += wa * v;
                    }
                }
            }
            for b in 0..3 {
                for i in 0..2 {
                    let v = -wa * lam[b] * dn[a][i];
                    out.jac[(i * UY + a) * MAX_PER + PR + b] += v;
                    out.jac[(PR + b) * MAX_PER + i * UY + a] += v;
                }
            }
        }
    }
}

/// Element dofs of a subset together with a local numbering.
///
/// Local dofs are ordered with the dofs of the overlapping subdomain first (`0..n_inner`)
/// followed by dofs that appear only on ghost elements.
#[derive(Debug, Clone)]
pub struct LocalSpace {
    pub elements: Vec<usize>,
    pub global_dofs: Vec<usize>,
    pub n_inner: usize,
    elem_local: Vec<u32>,
    pattern: CsrMatrix,
}

impl LocalSpace {
    pub fn n_local(&self) -> usize {
        self.global_dofs.len()
    }

    pub fn inner_dofs(&self) -> &[usize] {
        &self.global_dofs[..self.n_inner]
    }

    /// Gather the local coefficients of a global vector.
    pub fn restrict(&self, u: &[f64]) -> Vec<f64> {
        self.global_dofs.iter().map(|&d| u[d]).collect()
    }
}

impl Model {
    pub fn new(spec: ProblemSpec, mesh: Mesh) -> Result<Model> {
        spec.validate()?;
        mesh.validate()?;
        let nodes = mesh.lagrange_nodes(spec.order());
        let nv = mesh.num_nodes();
        let nn = nodes.num_nodes();
        let fields = match spec {
            ProblemSpec::Cavity { .. } => vec![
                FieldLayout { name: "ux", order: ElementOrder::Quadratic, offset: 0, count: nn },
                FieldLayout { name: "uy", order: ElementOrder::Quadratic, offset: nn, count: nn },
                FieldLayout { name: "p", order: ElementOrder::Linear, offset: 2 * nn, count: nv },
            ],
            ProblemSpec::Beam { .. } => vec![
                FieldLayout { name: "ux", order: ElementOrder::Linear, offset: 0, count: nv },
                FieldLayout { name: "uy", order: ElementOrder::Linear, offset: nv, count: nv },
            ],
            ProblemSpec::Diffusion { .. } => vec![FieldLayout {
                name: "u",
                order: ElementOrder::Linear,
                offset: 0,
                count: nv,
            }],
        };
        let ndofs = fields.iter().map(|f| f.count).sum::<usize>();
        if u32::try_from(ndofs).is_err() {
            return Err(Error::Dimension(format!("{ndofs} dofs exceed 32-bit indexing")));
        }
        let mut dirichlet = vec![false; ndofs];
        let mut values = vec![0.0; ndofs];
        for fl in &fields {
            for n in 0..fl.count {
                let tag = nodes.tags[n];
                let d = fl.offset + n;
                match (spec, fl.name) {
                    (ProblemSpec::Cavity { .. }, "p") => {
                        dirichlet[d] = tag == BoundaryTag::CornerPressurePin;
                    }
                    (ProblemSpec::Cavity { .. }, name) => {
                        dirichlet[d] = tag.is_dirichlet();
                        if tag == BoundaryTag::Lid && name == "ux" {
                            values[d] = 1.0;
                        }
                    }
                    _ => dirichlet[d] = tag.is_dirichlet(),
                }
            }
        }
        let ne = mesh.num_elements();
        let mut elem_dofs = Vec::new();
        for e in 0..ne {
            let en = nodes.element(e);
            for fl in &fields {
                let k = fl.order.nodes_per_element();
                elem_dofs.extend(en[..k].iter().map(|&n| (fl.offset + n) as u32));
            }
        }
        let per = elem_dofs.len() / ne.max(1);
        let dofs = DofMap {
            fields,
            ndofs,
            dirichlet,
            dirichlet_values: values,
            elem_dofs,
            per,
        };
        let pattern = build_pattern(&dofs, 0..ne, |d| Some(d as u32), ndofs, ndofs)?;
        Ok(Model {
            spec,
            mesh,
            nodes,
            dofs,
            pattern,
        })
    }

    /// Structured model on the problem's default domain.
    pub fn structured(spec: ProblemSpec, nx: usize, ny: usize) -> Result<Model> {
        let mesh = crate::mesh::build_structured_mesh(nx, ny, spec.domain(), spec.layout())?;
        Model::new(spec, mesh)
    }

    pub fn ndofs(&self) -> usize {
        self.dofs.ndofs
    }

    pub fn with_spec(&self, spec: ProblemSpec) -> Result<Model> {
        if spec.order() != self.spec.order() || spec.layout() != self.spec.layout() {
            return Err(Error::Config("problem kind cannot change".into()));
        }
        spec.validate()?;
        let mut m = self.clone();
        m.spec = spec;
        Ok(m)
    }

    /// Zero in the interior, boundary data on essential dofs.
    pub fn initial_guess(&self) -> Vec<f64> {
        self.dofs
            .dirichlet
            .iter()
            .zip(&self.dofs.dirichlet_values)
            .map(|(&d, &g)| if d { g } else { 0.0 })
            .collect()
    }

    /// Coordinates of the node carrying dof `d`.
    pub fn dof_coords(&self, d: usize) -> [f64; 2] {
        let (_, n) = self.dofs.locate(d);
        self.nodes.coords[n]
    }

    /// Nullspace vectors: constant (diffusion), rigid modes (beam), per-field constants (cavity).
    pub fn nullspace_basis(&self) -> Vec<Vec<f64>> {
        let n = self.ndofs();
        let unit = |field: usize| {
            let fl = &self.dofs.fields[field];
            let mut v = vec![0.0; n];
            v[fl.offset..fl.offset + fl.count].fill(1.0);
            v
        };
        match self.spec {
            ProblemSpec::Diffusion { .. } => vec![unit(0)],
            ProblemSpec::Cavity { .. } => vec![unit(0), unit(1), unit(2)],
            ProblemSpec::Beam { .. } => {
                let mut rot = vec![0.0; n];
                let nv = self.dofs.fields[0].count;
                for k in 0..nv {
                    let [x, y] = self.nodes.coords[k];
                    rot[k] = -y;
                    rot[nv + k] = x;
                }
                vec![unit(0), unit(1), rot]
            }
        }
    }

    /// Field index each nullspace vector belongs to (`None` when it spans several fields).
    pub fn nullspace_fields(&self) -> Vec<Option<usize>> {
        match self.spec {
            ProblemSpec::Diffusion { .. } => vec![Some(0)],
            ProblemSpec::Cavity { .. } => vec![Some(0), Some(1), Some(2)],
            ProblemSpec::Beam { .. } => vec![None, None, None],
        }
    }

    fn element_kernel(&self, e: usize, u: &[f64], want_jac: bool, out: &mut Local) -> Result<()> {
        let tri = self.mesh.elements[e];
        let p = [self.mesh.nodes[tri[0]], self.mesh.nodes[tri[1]], self.mesh.nodes[tri[2]]];
        match self.spec {
            ProblemSpec::Diffusion { law, source } => {
                diffusion_kernel(law, source, p, u, want_jac, out);
                Ok(())
            }
            ProblemSpec::Beam {
                youngs_modulus,
                poisson_ratio,
                load_y,
            } => beam_kernel(e, youngs_modulus, poisson_ratio, load_y, p, u, want_jac, out),
            ProblemSpec::Cavity { reynolds } => {
                cavity_kernel(1.0 / reynolds, p, u, want_jac, out);
                Ok(())
            }
        }
    }

    /// Core assembly loop. `local_of(e)` gives the output index of each element dof;
    /// rows `>= n_rows` are dropped, as are rows of essential dofs.
    #[allow(clippy::too_many_arguments)]
    fn assemble<'a>(
        &self,
        elements: impl Iterator<Item = usize>,
        local_of: impl Fn(usize) -> &'a [u32],
        global_of: impl Fn(usize) -> usize,
        u: &[f64],
        n_rows: usize,
        mut res: Option<&mut [f64]>,
        mut jac: Option<&mut CsrMatrix>,
    ) -> Result<()> {
        let per = self.dofs.per;
        let jstride = if matches!(self.spec, ProblemSpec::Cavity { .. }) { MAX_PER } else { per };
        let mut buf = Local::new();
        let mut ue = [0.0; MAX_PER];
        for e in elements {
            let loc = local_of(e);
            for k in 0..per {
                ue[k] = u[loc[k] as usize];
            }
            buf.res[..per].fill(0.0);
            if jac.is_some() {
                buf.jac[..jstride * per].fill(0.0);
            }
            self.element_kernel(e, &ue[..per], jac.is_some(), &mut buf)?;
            for a in 0..per {
                let r = loc[a] as usize;
                if r >= n_rows || self.dofs.dirichlet[global_of(r)] {
                    continue;
                }
                if let Some(res) = res.as_deref_mut() {
                    res[r] += buf.res[a];
                }
                if let Some(jac) = jac.as_deref_mut() {
                    for c in 0..per {
                        let v = buf.jac[a * jstride + c];
                        if v != 0.0 {
                            jac.add_to(r, loc[c] as usize, v);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn apply_dirichlet(
        &self,
        rows: impl Iterator<Item = (usize, usize)>,
        u: &[f64],
        mut res: Option<&mut [f64]>,
        mut jac: Option<&mut CsrMatrix>,
    ) {
        for (r, g) in rows {
            if !self.dofs.dirichlet[g] {
                continue;
            }
            if let Some(res) = res.as_deref_mut() {
                res[r] = u[r] - self.dofs.dirichlet_values[g];
            }
            if let Some(jac) = jac.as_deref_mut() {
                jac.set_identity_row(r);
            }
        }
    }

    pub fn residual(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check_len(u)?;
        let n = self.ndofs();
        let mut r = vec![0.0; n];
        self.assemble(
            0..self.mesh.num_elements(),
            |e| self.dofs.element_dofs(e),
            |d| d,
            u,
            n,
            Some(&mut r),
            None,
        )?;
        self.apply_dirichlet((0..n).map(|d| (d, d)), u, Some(&mut r), None);
        Ok(r)
    }

    pub fn tangent(&self, u: &[f64]) -> Result<CsrMatrix> {
        Ok(self.residual_and_tangent_impl(u, false)?.1)
    }

    pub fn residual_and_tangent(&self, u: &[f64]) -> Result<(Vec<f64>, CsrMatrix)> {
        self.residual_and_tangent_impl(u, true)
    }

    fn residual_and_tangent_impl(&self, u: &[f64], want_res: bool) -> Result<(Vec<f64>, CsrMatrix)> {
        self.check_len(u)?;
        let n = self.ndofs();
        let mut r = vec![0.0; if want_res { n } else { 0 }];
        let mut jac = self.pattern.clone();
        self.assemble(
            0..self.mesh.num_elements(),
            |e| self.dofs.element_dofs(e),
            |d| d,
            u,
            n,
            want_res.then_some(&mut r[..]),
            Some(&mut jac),
        )?;
        self.apply_dirichlet(
            (0..n).map(|d| (d, d)),
            u,
            want_res.then_some(&mut r[..]),
            Some(&mut jac),
        );
        Ok((r, jac))
    }

    fn check_len(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.ndofs() {
            return Err(Error::Dimension(format!(
                "state has {} entries, model has {} dofs",
                u.len(),
                self.ndofs()
            )));
        }
        Ok(())
    }

    /// Local space of an overlapping subdomain (`inner` elements) extended by `ghost` elements.
    pub fn local_space(&self, inner: &[usize], ghost: &[usize]) -> Result<LocalSpace> {
        let n = self.ndofs();
        let mut mark = vec![u32::MAX; n];
        let mut inner_dofs: Vec<usize> = Vec::new();
        for &e in inner {
            for &d in self.dofs.element_dofs(e) {
                if mark[d as usize] == u32::MAX {
                    mark[d as usize] = 0;
                    inner_dofs.push(d as usize);
                }
            }
        }
        inner_dofs.sort_unstable();
        let mut ghost_dofs: Vec<usize> = Vec::new();
        for &e in ghost {
            for &d in self.dofs.element_dofs(e) {
                if mark[d as usize] == u32::MAX {
                    mark[d as usize] = 0;
                    ghost_dofs.push(d as usize);
                }
            }
        }
        ghost_dofs.sort_unstable();
        let n_inner = inner_dofs.len();
        let mut global_dofs = inner_dofs;
        global_dofs.extend(ghost_dofs);
        for (k, &d) in global_dofs.iter().enumerate() {
            mark[d] = k as u32;
        }
        let elements: Vec<usize> = inner.iter().chain(ghost).copied().collect();
        let per = self.dofs.per;
        let mut elem_local = Vec::with_capacity(per * elements.len());
        for &e in &elements {
            elem_local.extend(self.dofs.element_dofs(e).iter().map(|&d| mark[d as usize]));
        }
        let nl = global_dofs.len();
        let positions: Vec<usize> = (0..elements.len()).collect();
        let pattern = build_pattern_local(&elem_local, per, &positions, n_inner, nl)?;
        Ok(LocalSpace {
            elements,
            global_dofs,
            n_inner,
            elem_local,
            pattern,
        })
    }

    fn local_assemble(
        &self,
        space: &LocalSpace,
        u_local: &[f64],
        res: Option<&mut [f64]>,
        jac: Option<&mut CsrMatrix>,
    ) -> Result<()> {
        if u_local.len() != space.n_local() {
            return Err(Error::Dimension("local state has the wrong length".into()));
        }
        let per = self.dofs.per;
        let idx: Vec<usize> = (0..space.elements.len()).collect();
        // the element loop runs over positions in the space's element list
        let mut res = res;
        let mut jac = jac;
        {
            let els = &space.elements;
            let mut buf = Local::new();
            let jstride = if matches!(self.spec, ProblemSpec::Cavity { .. }) { MAX_PER } else { per };
            let mut ue = [0.0; MAX_PER];
            for &k in &idx {
                let loc = &space.elem_local[k * per..(k + 1) * per];
                for a in 0..per {
                    ue[a] = u_local[loc[a] as usize];
                }
                buf.res[..per].fill(0.0);
                if jac.is_some() {
                    buf.jac[..jstride * per].fill(0.0);
                }
                self.element_kernel(els[k], &ue[..per], jac.is_some(), &mut buf)?;
                for a in 0..per {
                    let r = loc[a] as usize;
                    if r >= space.n_inner || self.dofs.dirichlet[space.global_dofs[r]] {
                        continue;
                    }
                    if let Some(res) = res.as_deref_mut() {
                        res[r] += buf.res[a];
                    }
                    if let Some(jac) = jac.as_deref_mut() {
                        for c in 0..per {
                            let v = buf.jac[a * jstride + c];
                            if v != 0.0 {
                                jac.add_to(r, loc[c] as usize, v);
                            }
                        }
                    }
                }
            }
        }
        self.apply_dirichlet(
            (0..space.n_inner).map(|r| (r, space.global_dofs[r])),
            u_local,
            res.as_deref_mut(),
            jac.as_deref_mut(),
        );
        Ok(())
    }

    /// Residual rows of the overlapping subdomain, assembled over the subdomain and its ghost layer.
    pub fn local_residual(&self, space: &LocalSpace, u_local: &[f64]) -> Result<Vec<f64>> {
        let mut r = vec![0.0; space.n_inner];
        self.local_assemble(space, u_local, Some(&mut r), None)?;
        Ok(r)
    }

    /// Residual rows and the rectangular tangent block (`n_inner x n_local`).
    pub fn local_residual_and_tangent(
        &self,
        space: &LocalSpace,
        u_local: &[f64],
    ) -> Result<(Vec<f64>, CsrMatrix)> {
        let mut r = vec![0.0; space.n_inner];
        let mut jac = space.pattern.clone();
        self.local_assemble(space, u_local, Some(&mut r), Some(&mut jac))?;
        Ok((r, jac))
    }

    /// Residual assembled without essential-row replacement (the raw Galerkin vector).
    pub fn galerkin_residual(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check_len(u)?;
        let n = self.ndofs();
        let mut r = vec![0.0; n];
        let per = self.dofs.per;
        let mut buf = Local::new();
        let mut ue = [0.0; MAX_PER];
        for e in 0..self.mesh.num_elements() {
            let loc = self.dofs.element_dofs(e);
            for a in 0..per {
                ue[a] = u[loc[a] as usize];
            }
            buf.res[..per].fill(0.0);
            self.element_kernel(e, &ue[..per], false, &mut buf)?;
            for a in 0..per {
                r[loc[a] as usize] += buf.res[a];
            }
        }
        Ok(r)
    }
}

fn build_pattern(
    dofs: &DofMap,
    elements: impl Iterator<Item = usize>,
    map: impl Fn(usize) -> Option<u32>,
    nrows: usize,
    ncols: usize,
) -> Result<CsrMatrix> {
    let mut rows: Vec<Vec<u32>> = vec![Vec::new(); nrows];
    for e in elements {
        let ed = dofs.element_dofs(e);
        for &r in ed {
            if let Some(rl) = map(r as usize) {
                if (rl as usize) < nrows {
                    rows[rl as usize].extend(ed.iter().filter_map(|&c| map(c as usize)));
                }
            }
        }
    }
    for (i, r) in rows.iter_mut().enumerate() {
        if i < ncols {
            r.push(i as u32);
        }
        r.sort_unstable();
        r.dedup();
    }
    CsrMatrix::from_pattern(nrows, ncols, rows)
}

fn build_pattern_local(
    elem_local: &[u32],
    per: usize,
    positions: &[usize],
    nrows: usize,
    ncols: usize,
) -> Result<CsrMatrix> {
    let mut rows: Vec<Vec<u32>> = vec![Vec::new(); nrows];
    for &k in positions {
        let ed = &elem_local[k * per..(k + 1) * per];
        for &r in ed {
            if (r as usize) < nrows {
                rows[r as usize].extend_from_slice(ed);
            }
        }
    }
    for (i, r) in rows.iter_mut().enumerate() {
        r.push(i as u32);
        r.sort_unstable();
        r.dedup();
    }
    CsrMatrix::from_pattern(nrows, ncols, rows)
}
