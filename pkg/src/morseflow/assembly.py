"""P1 Galerkin assembly of the rescaled energy form and its ingredients.

All matrices are assembled on the fixed reference mesh; the deformation
enters only through pulled-back coefficients (volume terms) and Nanson
surface factors (boundary terms). Quadrature is order-2 Gauss on cells and
midpoint on boundary facets.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .coeff import CoefficientSet, MatrixField, ScalarField, VectorField
from .errors import DegenerateFamilyError, UnsupportedFamilyError
from .mesh import DiffeoFamily, Mesh, nanson_factors

__all__ = [
    "FormSystem",
    "ConstraintSpace",
    "pullback_coefficients",
    "assemble_form",
    "assemble_mass",
    "assemble_pullback_mass",
    "assemble_form_derivative",
    "constraint_space",
    "robin_boundary_term",
    "build_form_system",
    "export_matrix_text",
]

_SYM_TOL = 1e-12

# order-2 Gauss on the unit interval
_GAUSS1D = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
# order-2 rule on the reference triangle, barycentric coordinates, weights 1/3
_BARY2D = np.array([
    [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0],
    [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0],
    [1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0],
])


@dataclass(frozen=True)
class FormSystem:
    """Assembled pencil data at one parameter value.

    stiffness represents the rescaled form, mass the reference-domain L2
    product (t-independent), stiffness_dt the form's t-derivative.
    """

    stiffness: sp.csr_matrix
    mass: sp.csr_matrix
    stiffness_dt: sp.csr_matrix
    t: float
    metadata: dict = field(default_factory=dict)

    def validate(self) -> None:
        for name, m in (("stiffness", self.stiffness), ("stiffness_dt", self.stiffness_dt)):
            asym = np.abs((m - m.T)).max()
            scale = max(np.abs(m).max(), 1e-300)
            if asym > _SYM_TOL * scale:
                raise ValueError(f"{name} asymmetry {asym} exceeds tolerance")
        dense = self.mass.toarray()
        if np.abs(dense - dense.T).max() > _SYM_TOL * max(dense.max(), 1e-300):
            raise ValueError("mass matrix is not symmetric")
        try:
            np.linalg.cholesky(dense)
        except np.linalg.LinAlgError as exc:
            raise ValueError("mass matrix is not positive definite") from exc


def _cell_geometry(mesh: Mesh):
    """Per-cell measures, basis gradients (nc, nloc, dim), quad points/weights."""
    v = mesh.vertices[mesh.cells]
    if mesh.dimension == 1:
        h = v[:, 1, 0] - v[:, 0, 0]
        grads = np.stack([-1.0 / h, 1.0 / h], axis=1)[:, :, None]
        xq = v[:, 0, :][:, None, :] + _GAUSS1D[None, :, None] * (v[:, 1, :] - v[:, 0, :])[:, None, :]
        bary = np.stack([1.0 - _GAUSS1D, _GAUSS1D], axis=1)  # (nq, nloc)
        wq = np.abs(h) / len(_GAUSS1D)
        return np.abs(h), grads, xq, bary, wq
    e1 = v[:, 1] - v[:, 0]
    e2 = v[:, 2] - v[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    area = 0.5 * det
    inv = np.empty((len(det), 2, 2))
    inv[:, 0, 0] = e2[:, 1] / det
    inv[:, 0, 1] = -e2[:, 0] / det
    inv[:, 1, 0] = -e1[:, 1] / det
    inv[:, 1, 1] = e1[:, 0] / det
    grads = np.empty((len(det), 3, 2))
    grads[:, 1] = inv[:, 0]
    grads[:, 2] = inv[:, 1]
    grads[:, 0] = -grads[:, 1] - grads[:, 2]
    xq = np.einsum("qi,cid->cqd", _BARY2D, v)
    wq = area / _BARY2D.shape[0]
    return area, grads, xq, _BARY2D, wq


def _scatter(mesh: Mesh, local: np.ndarray) -> sp.csr_matrix:
    nloc = mesh.cells.shape[1]
    rows = np.repeat(mesh.cells, nloc, axis=1).ravel()
    cols = np.tile(mesh.cells, (1, nloc)).ravel()
    A = sp.coo_matrix((local.ravel(), (rows, cols)),
                      shape=(mesh.n_vertices, mesh.n_vertices))
    return A.tocsr()


def assemble_form(mesh: Mesh, coeffs: CoefficientSet) -> sp.csr_matrix:
    """Galerkin matrix of the form with the given (already rescaled) coefficients.

    Rejects nonsymmetric input (b != c): the index theory is for symmetric
    forms only.
    """
    _, grads, xq, bary, wq = _cell_geometry(mesh)
    nc, nq = xq.shape[0], xq.shape[1]
    flat = xq.reshape(nc * nq, -1)

    A = coeffs.a(flat).reshape(nc, nq, mesh.dimension, mesh.dimension)
    b = coeffs.b(flat).reshape(nc, nq, mesh.dimension)
    c = coeffs.c_vec(flat).reshape(nc, nq, mesh.dimension)
    d = coeffs.d(flat).reshape(nc, nq)

    scale = max(np.max(np.abs(b)), np.max(np.abs(c)), 1.0)
    if np.max(np.abs(b - c)) > 1e-12 * scale:
        raise ValueError("nonsymmetric form rejected: b and c coefficients differ")

    local = np.einsum("cid,cqde,cje->cij", grads, A, grads) * wq[:, None, None]
    if np.any(b):
        local += np.einsum("cqd,cid,qj->cij", b, grads, bary) * wq[:, None, None]
    if np.any(c):
        local += np.einsum("cqd,cjd,qi->cij", c, grads, bary) * wq[:, None, None]
    if np.any(d):
        local += np.einsum("cq,qi,qj->cij", d, bary, bary) * wq[:, None, None]
    return _scatter(mesh, local)


def assemble_mass(mesh: Mesh) -> sp.csr_matrix:
    """Exact P1 mass matrix of the reference domain."""
    measures = mesh.cell_measures()
    if mesh.dimension == 1:
        ref = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
    else:
        ref = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0
    local = measures[:, None, None] * ref[None, :, :]
    return _scatter(mesh, local)


def _weighted_mass(mesh: Mesh, weight: Callable[[np.ndarray], np.ndarray]) -> sp.csr_matrix:
    """Quadrature mass matrix with a spatial weight."""
    _, _, xq, bary, wq = _cell_geometry(mesh)
    nc, nq = xq.shape[0], xq.shape[1]
    w = np.asarray(weight(xq.reshape(nc * nq, -1))).reshape(nc, nq)
    local = np.einsum("cq,qi,qj->cij", w, bary, bary) * wq[:, None, None]
    return _scatter(mesh, local)


def assemble_pullback_mass(mesh: Mesh, family: DiffeoFamily, t: float) -> sp.csr_matrix:
    """Mass matrix of the deformed domain pulled back (weight |det Dphi_t|).

    The pencil (stiffness_t, pullback mass) has the physical spectrum of the
    operator on the deformed domain.
    """
    def weight(pts):
        J = family.jacobian(t, pts)
        det = np.linalg.det(J) if mesh.dimension > 1 else J[:, 0, 0]
        if np.any(det <= 0):
            raise DegenerateFamilyError(f"singular Jacobian at t={t}")
        return det

    return _weighted_mass(mesh, weight)


def pullback_coefficients(coeffs: CoefficientSet, family: DiffeoFamily,
                          t: float) -> CoefficientSet:
    """Coefficients of the rescaled form on the reference domain.

    a_t = |J| J^{-1} a(phi) J^{-T},  b_t = |J| J^{-1} b(phi),
    c_t likewise, d_t = |J| d(phi), with J = Dphi_t.
    """
    a_lo, b_hi = family.t_range
    if not (a_lo <= t <= b_hi):
        raise ValueError(f"t={t} outside family range {family.t_range}")
    dim = coeffs.dim

    def _geom(pts):
        J = family.jacobian(t, pts)
        det = np.linalg.det(J) if dim > 1 else J[:, 0, 0].copy()
        if np.any(det <= 0):
            raise DegenerateFamilyError(f"singular Jacobian at t={t}")
        return det, np.linalg.inv(J), family.map(t, pts)

    def a_eval(pts):
        det, Jinv, y = _geom(pts)
        return det[:, None, None] * np.einsum("nip,npq,njq->nij", Jinv, coeffs.a(y), Jinv)

    def b_eval(pts):
        det, Jinv, y = _geom(pts)
        return det[:, None] * np.einsum("nip,np->ni", Jinv, coeffs.b(y))

    def c_eval(pts):
        det, Jinv, y = _geom(pts)
        return det[:, None] * np.einsum("nip,np->ni", Jinv, coeffs.c_vec(y))

    def d_eval(pts):
        det, _, y = _geom(pts)
        return det * coeffs.d(y)

    return CoefficientSet(MatrixField(a_eval, dim), VectorField(b_eval, dim),
                          VectorField(c_eval, dim), ScalarField(d_eval), dim)


def _analytic_applicable(coeffs: CoefficientSet, family: DiffeoFamily,
                         robin_beta) -> bool:
    return (family.kind == "star_scale"
            and robin_beta is None
            and coeffs.a.is_constant
            and coeffs.b.is_constant and not np.any(coeffs.b.constant)
            and coeffs.c_vec.is_constant and not np.any(coeffs.c_vec.constant))


def assemble_form_derivative(mesh: Mesh, coeffs: CoefficientSet,
                             family: DiffeoFamily, t: float,
                             method: str = "auto",
                             fd_step: float | None = None,
                             robin_beta: ScalarField | None = None) -> sp.csr_matrix:
    """t-derivative of the assembled rescaled form.

    analytic (star scaling, constant a, b=c=0, no Robin term):
        (n-2) t^{n-3} K_a  +  quadrature mass weighted by
        t^{n-1} [ n d(y) + (y - center) . grad d(y) ],  y = phi_t(x).
    fd: central difference of the full assembly with step 1e-4*(b-a),
        one-sided O(step^2) at the ends of t_range.
    """
    if method == "auto":
        method = "analytic" if _analytic_applicable(coeffs, family, robin_beta) else "fd"

    if method == "analytic":
        if not _analytic_applicable(coeffs, family, robin_beta):
            raise UnsupportedFamilyError(
                "analytic form derivative needs star_scale, constant a, b=c=0 "
                "and no Robin term")
        n = mesh.dimension
        center = np.asarray(family.params["center"])

        stiff_only = CoefficientSet(coeffs.a, coeffs.b, coeffs.c_vec,
                                    ScalarField(lambda p: np.zeros(p.shape[0])), n)
        K = assemble_form(mesh, stiff_only)

        def weight(pts):
            y = family.map(t, pts)
            dv = coeffs.d(y)
            gv = coeffs.d.gradient(y)
            return t ** (n - 1) * (n * dv + np.einsum("ni,ni->n", y - center, gv))

        Mw = _weighted_mass(mesh, weight)
        return ((n - 2) * t ** (n - 3)) * K + Mw

    if method != "fd":
        raise ValueError(f"unknown derivative method {method!r}")

    a_lo, b_hi = family.t_range
    step = fd_step if fd_step is not None else 1e-4 * (b_hi - a_lo)

    def D(tv):
        A = assemble_form(mesh, pullback_coefficients(coeffs, family, tv))
        if robin_beta is not None:
            A = A + robin_boundary_term(mesh, family, tv, robin_beta)
        return A

    if t - step >= a_lo and t + step <= b_hi:
        return (D(t + step) - D(t - step)) / (2 * step)
    if t + 2 * step <= b_hi:
        return (-3.0 * D(t) + 4.0 * D(t + step) - D(t + 2 * step)) / (2 * step)
    return (3.0 * D(t) - 4.0 * D(t - step) + D(t - 2 * step)) / (2 * step)


# ---------------------------------------------------------------------------
# constraint spaces (the discrete boundary-condition subspaces)

_BC_KINDS = ("dirichlet", "neumann", "locally_constant", "mean_zero", "robin")


@dataclass(frozen=True)
class ConstraintSpace:
    """Orthonormal basis of the admissible FE subspace.

    For pure dof selections (dirichlet, neumann, robin) the basis is a set
    of identity columns, stored as `selection` for fast projection.
    """

    bc_kind: str
    n_dof: int
    selection: np.ndarray | None = None
    basis_matrix: np.ndarray | None = None
    constraints: np.ndarray | None = None

    @property
    def dim(self) -> int:
        if self.selection is not None:
            return len(self.selection)
        return self.basis_matrix.shape[1]

    def basis(self) -> np.ndarray:
        """Dense (n_dof, dim) orthonormal basis."""
        if self.basis_matrix is not None:
            return self.basis_matrix
        B = np.zeros((self.n_dof, len(self.selection)))
        B[self.selection, np.arange(len(self.selection))] = 1.0
        return B

    def project(self, A):
        """B^T A B for sparse or dense A."""
        if self.selection is not None:
            if sp.issparse(A):
                return A[self.selection][:, self.selection].toarray()
            return A[np.ix_(self.selection, self.selection)]
        B = self.basis_matrix
        AB = A @ B
        return B.T @ AB

    def expand(self, Z: np.ndarray) -> np.ndarray:
        """Lift constrained coordinates to full FE coordinates."""
        Z = np.atleast_2d(Z.T).T if Z.ndim == 1 else Z
        if self.selection is not None:
            full = np.zeros((self.n_dof, Z.shape[1]))
            full[self.selection] = Z
            return full
        return self.basis_matrix @ Z


def _boundary_vertex_weights(mesh: Mesh, family: DiffeoFamily | None,
                             t: float | None, induced: bool) -> np.ndarray:
    """Per-vertex boundary measure weights (reference by default)."""
    measures = mesh.facet_measures()
    if induced:
        if family is None or t is None:
            raise ValueError("induced boundary measure needs a family and t")
        _, jsurf = nanson_factors(family, t, mesh.facet_midpoints(), mesh.facet_normals)
        measures = measures * jsurf
    weights = np.zeros(mesh.n_vertices)
    share = 1.0 if mesh.dimension == 1 else 0.5
    for fv, m in zip(mesh.facet_vertices, measures):
        for v in fv:
            weights[v] += share * m
    return weights


def constraint_space(mesh: Mesh, bc_kind: str,
                     family: DiffeoFamily | None = None,
                     t: float | None = None,
                     use_induced_measure: bool = False) -> ConstraintSpace:
    """Discrete admissible subspace for the requested boundary condition.

    dirichlet drops boundary dofs; neumann/robin keep the full space;
    locally_constant identifies boundary dofs within each component;
    mean_zero imposes one weighted-mean constraint per component, using the
    pulled-back (reference) boundary measure unless use_induced_measure.
    """
    if bc_kind not in _BC_KINDS:
        raise ValueError(f"unknown boundary condition kind {bc_kind!r}")
    n = mesh.n_vertices
    boundary = mesh.boundary_vertex_indices()

    if bc_kind == "dirichlet":
        interior = np.setdiff1d(np.arange(n), boundary)
        return ConstraintSpace("dirichlet", n, selection=interior)

    if bc_kind in ("neumann", "robin"):
        return ConstraintSpace(bc_kind, n, selection=np.arange(n))

    if bc_kind == "locally_constant":
        interior = np.setdiff1d(np.arange(n), boundary)
        comp_of_vertex: dict[int, int] = {}
        for fv, comp in zip(mesh.facet_vertices, mesh.facet_components):
            for v in fv:
                comp_of_vertex[int(v)] = int(comp)
        ncomp = mesh.n_components
        cols = []
        rows_c = []
        for i in interior:
            e = np.zeros(n)
            e[i] = 1.0
            cols.append(e)
        for comp in range(ncomp):
            verts = [v for v, c in comp_of_vertex.items() if c == comp]
            e = np.zeros(n)
            e[verts] = 1.0 / np.sqrt(len(verts))
            cols.append(e)
            # pairwise-difference constraint rows within the component
            for v in verts[1:]:
                row = np.zeros(n)
                row[verts[0]] = 1.0
                row[v] = -1.0
                rows_c.append(row)
        B = np.column_stack(cols)
        C = np.array(rows_c) if rows_c else None
        return ConstraintSpace("locally_constant", n, basis_matrix=B, constraints=C)

    # mean_zero
    weights = _boundary_vertex_weights(mesh, family, t, use_induced_measure)
    comp_rows = []
    for comp_facets in mesh.boundary_components():
        verts = np.unique(mesh.facet_vertices[comp_facets].ravel())
        row = np.zeros(n)
        row[verts] = weights[verts]
        comp_rows.append(row)
    C = np.array(comp_rows)
    B = scipy.linalg.null_space(C)
    return ConstraintSpace("mean_zero", n, basis_matrix=B, constraints=C)


def robin_boundary_term(mesh: Mesh, family: DiffeoFamily, t: float,
                        beta: ScalarField) -> sp.csr_matrix:
    """Boundary mass  int beta_t (u o phi^{-1})(v o phi^{-1}) dmu_t  on reference facets.

    Surface measure carries the Nanson factor |det(Dphi) Dphi^{-T} N|;
    1D boundaries are point measures with no Jacobian factor. Midpoint rule.
    """
    mids = mesh.facet_midpoints()
    _, jsurf = nanson_factors(family, t, mids, mesh.facet_normals)
    beta_vals = beta(family.map(t, mids))
    n = mesh.n_vertices
    if mesh.dimension == 1:
        rows = mesh.facet_vertices[:, 0]
        return sp.coo_matrix((beta_vals, (rows, rows)), shape=(n, n)).tocsr()
    measures = mesh.facet_measures() * jsurf
    factor = beta_vals * measures
    local = factor[:, None, None] * np.full((1, 2, 2), 0.25)
    rows = np.repeat(mesh.facet_vertices, 2, axis=1).ravel()
    cols = np.tile(mesh.facet_vertices, (1, 2)).ravel()
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def build_form_system(mesh: Mesh, coeffs: CoefficientSet, family: DiffeoFamily,
                      t: float, robin_beta: ScalarField | None = None,
                      deriv_method: str = "auto",
                      fd_step: float | None = None) -> FormSystem:
    """Assemble stiffness, mass and form derivative at one parameter value."""
    stiffness = assemble_form(mesh, pullback_coefficients(coeffs, family, t))
    if robin_beta is not None:
        stiffness = stiffness + robin_boundary_term(mesh, family, t, robin_beta)
    resolved = deriv_method
    if resolved == "auto":
        resolved = "analytic" if _analytic_applicable(coeffs, family, robin_beta) else "fd"
    dt = assemble_form_derivative(mesh, coeffs, family, t, method=resolved,
                                  fd_step=fd_step, robin_beta=robin_beta)
    a_lo, b_hi = family.t_range
    meta = {
        "quadrature_order": 2,
        "family_kind": family.kind,
        "derivative_method": resolved,
        "fd_step": fd_step if fd_step is not None else
                   (None if resolved == "analytic" else 1e-4 * (b_hi - a_lo)),
    }
    return FormSystem(stiffness, assemble_mass(mesh), dt, t, meta)


def export_matrix_text(A) -> str:
    """Coordinate text format: 'row col value' per entry, 1-based indices."""
    coo = sp.coo_matrix(A)
    lines = [f"{i + 1} {j + 1} {v!r}" for i, j, v in
             sorted(zip(coo.row, coo.col, coo.data), key=lambda e: (e[0], e[1]))]
    return "\n".join(lines) + "\n"
