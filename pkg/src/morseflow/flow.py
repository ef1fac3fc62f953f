"""Eigenvalue-trajectory tracking, conjugate times, crossing forms, and the
index identity audit.

The driver scans the parameter grid, brackets sign changes of the
eigenvalue branch nearest zero, refines each bracket to a conjugate time,
evaluates the crossing form there by the volume formula (and by the
boundary formula where one applies), and accumulates the signed crossing
count with the endpoint conventions: an interior crossing contributes
p - q, an initial one -q, a terminal one +p.

Sign convention, pinned by the 1D closed-form run: a negative-definite
crossing form means the tracked eigenvalue decreases through zero as t
grows, so the count of negative eigenvalues rises and the crossing
contributes negatively.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.optimize import brentq

from .assembly import (ConstraintSpace, FormSystem, assemble_form, assemble_mass,
                       assemble_pullback_mass, build_form_system, constraint_space,
                       pullback_coefficients, robin_boundary_term)
from .coeff import CoefficientSet, ScalarField, neumann_condition_margin, schrodinger_coefficients
from .errors import (DegenerateCrossingError, InvalidBracketError, RefineGridError,
                     UnsupportedBCError, UnsupportedGeometryError)
from .mesh import DiffeoFamily, Mesh, boundary_velocity_normal, nanson_factors
from .spectral import PencilOperator, default_kernel_tol

__all__ = [
    "FlowTolerances",
    "DeformationProblem",
    "make_problem",
    "TrajectoryScan",
    "Crossing",
    "FlowReport",
    "IdentityAudit",
    "scan_trajectories",
    "locate_crossing",
    "crossing_form_volume",
    "crossing_form_boundary_dirichlet",
    "crossing_form_boundary_robin",
    "signature_of",
    "maslov_index",
    "run_flow_analysis",
    "verify_identities",
    "physical_eigenvalues",
]


@dataclass
class FlowTolerances:
    """Tolerances of the crossing machinery; None fields resolve to defaults.

    kernel_tol: |eigenvalue| below which a vector counts as kernel
        (default 1e-6 relative to the largest stiffness entry).
    cluster_tol: grouping width for degenerate kernels (default 50x kernel).
    bisect_tol: bracket width target for conjugate times (1e-9 * (b - a)).
    boundary_tol: accepted relative gap between the volume and boundary
        crossing forms.
    dense_cutoff: constrained size up to which scans use complete spectra.
    """

    kernel_tol: float | None = None
    cluster_tol: float | None = None
    bisect_tol: float | None = None
    boundary_tol: float = 0.05
    dense_cutoff: int = 2000
    grid_refine_max: int = 2
    degenerate_override: bool = False


class DeformationProblem:
    """A deforming boundary-value problem bundled with its discrete machinery.

    Immutable inputs; assembled systems are cached per parameter value.
    """

    def __init__(self, mesh: Mesh, family: DiffeoFamily, potential: ScalarField,
                 bc_kind: str, lam_shift: float = 0.0,
                 beta: ScalarField | None = None,
                 tolerances: FlowTolerances | None = None):
        if bc_kind == "robin" and beta is None:
            raise ValueError("robin boundary condition needs a beta field")
        self.mesh = mesh
        self.family = family
        self.potential = potential
        self.bc_kind = bc_kind
        self.lam_shift = float(lam_shift)
        self.beta = beta
        self.tol = tolerances or FlowTolerances()
        self.coeffs: CoefficientSet = schrodinger_coefficients(
            potential, mesh.dimension, lam_shift)
        self.constraints: ConstraintSpace = constraint_space(mesh, bc_kind)
        self.mass = assemble_mass(mesh)
        self.pencil = PencilOperator(self.mass, self.constraints)
        self._stiff_cache: dict[float, object] = {}
        self._system_cache: dict[float, FormSystem] = {}
        self._kernel_tol: float | None = self.tol.kernel_tol

    # -- assembled objects ---------------------------------------------------

    def stiffness_at(self, t: float):
        key = float(t)
        if key not in self._stiff_cache:
            A = assemble_form(self.mesh, pullback_coefficients(self.coeffs, self.family, t))
            if self.beta is not None:
                A = A + robin_boundary_term(self.mesh, self.family, t, self.beta)
            if len(self._stiff_cache) > 64:
                self._stiff_cache.clear()
            self._stiff_cache[key] = A
        return self._stiff_cache[key]

    def system_at(self, t: float) -> FormSystem:
        key = float(t)
        if key not in self._system_cache:
            if len(self._system_cache) > 16:
                self._system_cache.clear()
            self._system_cache[key] = build_form_system(
                self.mesh, self.coeffs, self.family, t, robin_beta=self.beta)
        return self._system_cache[key]

    def solve_at(self, t: float):
        from .spectral import solve_pencil
        return solve_pencil(self.system_at(t), self.constraints)

    # -- resolved tolerances --------------------------------------------------

    def kernel_tol(self) -> float:
        if self._kernel_tol is None:
            a, _ = self.family.t_range
            self._kernel_tol = default_kernel_tol(self.system_at(a))
        return self._kernel_tol

    def cluster_tol(self) -> float:
        return self.tol.cluster_tol if self.tol.cluster_tol is not None else \
            50.0 * self.kernel_tol()

    def bisect_tol(self) -> float:
        a, b = self.family.t_range
        return self.tol.bisect_tol if self.tol.bisect_tol is not None else \
            1e-9 * (b - a)


def make_problem(mesh: Mesh, family: DiffeoFamily, potential: ScalarField,
                 bc_kind: str, lam_shift: float = 0.0,
                 beta: ScalarField | None = None,
                 tolerances: FlowTolerances | None = None) -> DeformationProblem:
    return DeformationProblem(mesh, family, potential, bc_kind, lam_shift,
                              beta, tolerances)


# ---------------------------------------------------------------------------
# trajectory scan


@dataclass
class TrajectoryScan:
    """Eigenvalue branches nearest zero across the parameter grid."""

    t_grid: np.ndarray
    values: np.ndarray          # (n_samples, m), NaN where a branch is missing
    morse_a: int
    morse_b: int
    brackets: list[dict]        # {"index", "t_lo", "t_hi", "v_lo", "v_hi"}
    endpoint_kernels: list[str]  # "initial" / "terminal" markers
    morse_grid: np.ndarray | None = None
    warm_blocks: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)


def _align_offset(u: np.ndarray, v: np.ndarray) -> int:
    """Index offset aligning two sorted eigenvalue windows by value."""
    best, best_cost = 0, np.inf
    for o in range(-3, 4):
        pairs = [(u[j], v[j + o]) for j in range(len(u))
                 if 0 <= j + o < len(v)]
        if len(pairs) < max(1, min(len(u), len(v)) - 3):
            continue
        cost = float(np.mean([abs(a - b) for a, b in pairs]))
        if cost < best_cost:
            best, best_cost = o, cost
    return best


def scan_trajectories(problem: DeformationProblem, n_samples: int,
                      m_track: int = 6) -> TrajectoryScan:
    """Track the m eigenvalues nearest zero over a uniform t grid.

    Sign changes are bracketed per matched branch. A same-sign interval whose
    neighboring values predict an interior dip through zero is re-checked at
    the interval midpoint and raises RefineGridError on a confirmed double
    crossing.
    """
    if n_samples < 8:
        raise RefineGridError(f"t_samples must be at least 8, got {n_samples}")
    a, b = problem.family.t_range
    grid = np.linspace(a, b, n_samples)
    ktol = problem.kernel_tol()
    ncon = problem.constraints.dim
    warnings: list[str] = []

    if ncon == 0:
        empty = np.empty((n_samples, 0))
        return TrajectoryScan(grid, empty, 0, 0, [], [], np.zeros(n_samples, dtype=int),
                              warnings=["constrained subspace is empty"])

    dense = ncon <= problem.tol.dense_cutoff
    values = np.full((n_samples, m_track), np.nan)
    offsets = np.zeros(n_samples, dtype=int)
    morse_grid = np.full(n_samples, -1, dtype=int) if dense else None
    warm_blocks: dict[int, np.ndarray] = {}
    morse_a = morse_b = 0

    if dense:
        spectra = []
        for t in grid:
            A = problem.pencil.project(problem.stiffness_at(t))
            spectra.append(problem.pencil.eigenvalues_all(A))
        negs = [int(np.count_nonzero(w < -ktol)) for w in spectra]
        for i, w in enumerate(spectra):
            morse_grid[i] = negs[i]
            if np.count_nonzero(np.abs(w) <= ktol) and i not in (0, n_samples - 1):
                pass  # handled by sign array below
        half = m_track // 2
        lo = max(0, min(negs) - half)
        hi = min(ncon, max(negs) + (m_track - half))
        width = hi - lo
        values = np.full((n_samples, width), np.nan)
        for i, w in enumerate(spectra):
            values[i, :] = w[lo:hi]
        morse_a, morse_b = negs[0], negs[-1]
        for i, w in enumerate(spectra):
            nb = int(np.count_nonzero(np.abs(w) <= ktol))
            if nb and 0 < i < n_samples - 1:
                warnings.append(
                    f"borderline eigenvalue within kernel tolerance at grid t={grid[i]:.6g}")
    else:
        # complete spectra at the endpoints only; inverse iteration inside
        window = m_track + 2
        vals_list: list[np.ndarray] = []
        warm = None
        for i, t in enumerate(grid):
            A = problem.pencil.project(problem.stiffness_at(t))
            if i in (0, n_samples - 1):
                w_all = problem.pencil.eigenvalues_all(A)
                neg = int(np.count_nonzero(w_all < -ktol))
                if i == 0:
                    morse_a = neg
                else:
                    morse_b = neg
                order = np.argsort(np.abs(w_all))[:window]
                vals = np.sort(w_all[order])
                vals_list.append(vals)
            else:
                w, V, ok = problem.pencil.nearest_eigenpairs(A, window, warm=warm)
                if not ok:
                    w_all = problem.pencil.eigenvalues_all(A)
                    order = np.argsort(np.abs(w_all))[:window]
                    w = np.sort(w_all[order])
                    warnings.append(f"inverse iteration fell back to a full solve at t={t:.6g}")
                else:
                    warm = V
                    warm_blocks[i] = V
                vals_list.append(w)
        width = min(len(v) for v in vals_list)
        values = np.full((n_samples, width), np.nan)
        values[0, :] = vals_list[0][:width]
        shift = 0
        for i in range(1, n_samples):
            o = _align_offset(vals_list[i - 1], vals_list[i])
            shift += o
            for j in range(width):
                src = j + shift
                if 0 <= src < len(vals_list[i]):
                    values[i, j] = vals_list[i][src]
            offsets[i] = shift

    # ---- brackets from sign changes per matched branch
    brackets: list[dict] = []
    endpoint_kernels: list[str] = []
    sgn = np.sign(values)
    sgn[np.abs(values) <= ktol] = 0.0
    sgn[np.isnan(values)] = np.nan

    for j in range(values.shape[1]):
        col = sgn[:, j]
        if col[0] == 0:
            endpoint_kernels.append("initial")
        if col[-1] == 0:
            endpoint_kernels.append("terminal")
        last_sign, last_idx = 0.0, None
        for i in range(n_samples):
            s = col[i]
            if np.isnan(s) or s == 0:
                continue
            if last_sign != 0 and s != last_sign:
                brackets.append({
                    "index": j,
                    "t_lo": float(grid[last_idx]),
                    "t_hi": float(grid[i]),
                    "v_lo": float(values[last_idx, j]),
                    "v_hi": float(values[i, j]),
                })
            last_sign, last_idx = s, i

    # merge brackets from branches crossing in the same interval at the same
    # point (degenerate pairs cross together; they are resolved jointly later)
    seen = {}
    merged = []
    for br in brackets:
        key = (br["t_lo"], br["t_hi"])
        if key in seen:
            continue
        seen[key] = True
        merged.append(br)
    brackets = merged

    _check_double_crossings(problem, grid, values, sgn, ktol, brackets, dense)

    return TrajectoryScan(grid, values, morse_a, morse_b, brackets,
                          sorted(set(endpoint_kernels)), morse_grid,
                          warm_blocks, warnings)


def _check_double_crossings(problem, grid, values, sgn, ktol, brackets, dense):
    """Midpoint check on same-sign intervals whose quadratic fit dips past zero."""
    n_samples, width = values.shape
    bracketed = {(br["t_lo"], br["t_hi"]) for br in brackets}
    for j in range(width):
        for i in range(n_samples - 1):
            if (float(grid[i]), float(grid[i + 1])) in bracketed:
                continue
            v0, v1 = values[i, j], values[i + 1, j]
            if np.isnan(v0) or np.isnan(v1) or sgn[i, j] == 0 or sgn[i, j] != sgn[i + 1, j]:
                continue
            if min(abs(v0), abs(v1)) <= 10 * ktol:
                continue
            dip = _quadratic_dip(grid, values[:, j], i)
            if dip is None or np.sign(dip) == sgn[i, j]:
                continue
            tm = 0.5 * (grid[i] + grid[i + 1])
            vm = _branch_value_at(problem, tm, 0.5 * (v0 + v1))
            if np.sign(vm) != 0 and np.sign(vm) != sgn[i, j]:
                raise RefineGridError(
                    f"suspected double crossing in [{grid[i]:.6g}, {grid[i + 1]:.6g}]",
                    interval=(float(grid[i]), float(grid[i + 1])))


def _quadratic_dip(grid, col, i):
    """Extremal value of the parabola through three points inside [t_i, t_{i+1}]."""
    for idx in ((i - 1, i, i + 1), (i, i + 1, i + 2)):
        if idx[0] < 0 or idx[-1] >= len(grid):
            continue
        ts = grid[list(idx)]
        vs = col[list(idx)]
        if np.any(np.isnan(vs)):
            continue
        coeff = np.polyfit(ts, vs, 2)
        if abs(coeff[0]) < 1e-300:
            continue
        tv = -coeff[1] / (2 * coeff[0])
        if grid[i] < tv < grid[i + 1]:
            return float(np.polyval(coeff, tv))
    return None


def _branch_value_at(problem, t, prediction):
    """Near-zero eigenvalue at t closest to the predicted branch value."""
    A = problem.pencil.project(problem.stiffness_at(t))
    if problem.constraints.dim <= problem.tol.dense_cutoff:
        w = problem.pencil.eigenvalues_all(A)
    else:
        w, _, ok = problem.pencil.nearest_eigenpairs(A, 6)
        if not ok:
            w = problem.pencil.eigenvalues_all(A)
    return float(w[np.argmin(np.abs(w - prediction))])


# ---------------------------------------------------------------------------
# crossing location and crossing forms


def locate_crossing(problem: DeformationProblem, t_lo: float, t_hi: float,
                    warm: np.ndarray | None = None):
    """Refine a sign-change bracket to a conjugate time.

    Returns (t_star, kernel_values, kernel_vectors) with the kernel grouped
    by the clustering tolerance and M-orthonormal vectors in full
    coordinates. Raises InvalidBracketError when the tracked eigenvalue has
    the same sign at both ends.
    """
    ktol = problem.kernel_tol()
    state = {"warm": warm}

    def nearest(t, prediction):
        A = problem.pencil.project(problem.stiffness_at(t))
        if problem.constraints.dim <= problem.tol.dense_cutoff:
            w = problem.pencil.eigenvalues_all(A)
            return float(w[np.argmin(np.abs(w - prediction))])
        w, V, ok = problem.pencil.nearest_eigenpairs(A, 6, warm=state["warm"])
        if not ok:
            w = problem.pencil.eigenvalues_all(A)
        else:
            state["warm"] = V
        return float(w[np.argmin(np.abs(w - prediction))])

    v_lo = nearest(t_lo, 0.0)
    v_hi = nearest(t_hi, 0.0)
    s_lo = 0.0 if abs(v_lo) <= ktol else np.sign(v_lo)
    s_hi = 0.0 if abs(v_hi) <= ktol else np.sign(v_hi)
    if s_lo == s_hi and s_lo != 0.0:
        raise InvalidBracketError(
            f"no sign change over [{t_lo}, {t_hi}]: values ({v_lo:.3e}, {v_hi:.3e})")
    if s_lo == 0.0 or s_hi == 0.0:
        t_star = t_lo if s_lo == 0.0 else t_hi
    else:
        slope = (v_hi - v_lo) / (t_hi - t_lo)

        def f(t):
            pred = v_lo + slope * (t - t_lo)
            return nearest(t, pred)

        t_star = brentq(f, t_lo, t_hi, xtol=0.4 * problem.bisect_tol(),
                        rtol=4 * np.finfo(float).eps)

    vals, vecs = _kernel_at(problem, t_star, state["warm"])
    return float(t_star), vals, vecs


def _kernel_at(problem, t_star, warm=None):
    """Kernel eigenpairs at a conjugate time (cluster-tolerance grouping)."""
    ctol = problem.cluster_tol()
    A = problem.pencil.project(problem.stiffness_at(t_star))
    if problem.constraints.dim <= problem.tol.dense_cutoff:
        w_all = problem.pencil.eigenvalues_all(A)
        mask = np.abs(w_all) <= ctol
        if not mask.any():
            mask[np.argmin(np.abs(w_all))] = True
        idx = np.nonzero(mask)[0]
        w, V = problem.pencil.eigenpairs_window(A, int(idx[0]), int(idx[-1]))
        return w, V
    w, V, ok = problem.pencil.nearest_eigenpairs(A, 6, warm=warm)
    if not ok:
        w_all = problem.pencil.eigenvalues_all(A)
        mask = np.abs(w_all) <= ctol
        if not mask.any():
            mask[np.argmin(np.abs(w_all))] = True
        idx = np.nonzero(mask)[0]
        return problem.pencil.eigenpairs_window(A, int(idx[0]), int(idx[-1]))
    mask = np.abs(w) <= ctol
    if not mask.any():
        mask[np.argmin(np.abs(w))] = True
    return w[mask], problem.pencil.expand(V[:, mask])


def crossing_form_volume(problem: DeformationProblem, t_star: float,
                         kernel: np.ndarray) -> np.ndarray:
    """Q_ij = D_t'(u_i, u_j) on the kernel, from the assembled form derivative."""
    dt = problem.system_at(t_star).stiffness_dt
    Q = kernel.T @ (dt @ kernel)
    return 0.5 * (Q + Q.T)


def _facet_frame(problem, t_star):
    """Per-facet image geometry: unit normals, X.N, measures, midpoints."""
    mesh, family = problem.mesh, problem.family
    mids = mesh.facet_midpoints()
    normals_t, jsurf = nanson_factors(family, t_star, mids, mesh.facet_normals)
    y = family.map(t_star, mids)
    X = family.velocity(t_star, y)
    xn = np.einsum("ni,ni->n", X, normals_t)
    if mesh.dimension == 1:
        measures = np.ones(mesh.n_facets)
    else:
        measures = mesh.facet_measures() * jsurf
    return normals_t, xn, measures, y


def _kernel_boundary_gradients(problem, t_star, kernel):
    """Transformed kernel gradients (nbf, k, dim) at facet midpoints.

    Gradients are taken from the unique cell adjacent to each facet and
    pushed forward by Dphi^{-T} (lowest-order flux recovery).
    """
    mesh = problem.mesh
    from .assembly import _cell_geometry
    _, grads, _, _, _ = _cell_geometry(mesh)
    fcells = mesh.facet_cells
    G = grads[fcells]                       # (nbf, nloc, dim)
    Uc = kernel[mesh.cells[fcells]]         # (nbf, nloc, k)
    g_ref = np.einsum("fld,flk->fkd", G, Uc)
    mids = mesh.facet_midpoints()
    J = problem.family.jacobian(t_star, mids)
    Jinv = np.linalg.inv(J)
    return np.einsum("fji,fkj->fki", Jinv, g_ref)


def crossing_form_boundary_dirichlet(problem: DeformationProblem, t_star: float,
                                     kernel: np.ndarray):
    """Q_ij = -int (d u_i/dN_t)(d u_j/dN_t) (X.N_t) dmu_t over the image boundary.

    Returns (Q, warnings). The normal derivative comes from the single cell
    adjacent to each boundary facet.
    """
    if problem.bc_kind != "dirichlet":
        raise UnsupportedBCError(
            f"Dirichlet boundary crossing form requested for bc {problem.bc_kind!r}")
    normals_t, xn, measures, _ = _facet_frame(problem, t_star)
    g_im = _kernel_boundary_gradients(problem, t_star, kernel)
    dn = np.einsum("fki,fi->fk", g_im, normals_t)
    Q = -np.einsum("fi,fj,f->ij", dn, dn, xn * measures)
    warnings = []
    scale = np.abs(dn).max() if dn.size else 0.0
    for k in range(kernel.shape[1]):
        if scale > 0 and np.abs(dn[:, k]).max() <= 1e-8 * scale:
            warnings.append(
                f"kernel vector {k} has vanishing boundary flux at t={t_star:.6g}; "
                f"its boundary crossing-form row is unreliable")
    return 0.5 * (Q + Q.T), warnings


def _mean_curvature(problem, y_mids, normals_t):
    """Mean curvature of the image boundary at facet midpoints (2D circles, 1D)."""
    kind = problem.mesh.geometry.get("kind")
    if problem.mesh.dimension == 1 or kind == "interval":
        return np.zeros(len(y_mids))
    if kind in ("disk", "annulus"):
        radii = np.linalg.norm(y_mids, axis=1)
        outward = np.sign(np.einsum("ni,ni->n", normals_t, y_mids))
        return outward / radii
    raise UnsupportedGeometryError(
        f"mean curvature unavailable for geometry kind {kind!r}")


def crossing_form_boundary_robin(problem: DeformationProblem, t_star: float,
                                 kernel: np.ndarray,
                                 beta: ScalarField | None = None):
    """Robin/Neumann boundary crossing form.

    Q_ij = int [ grad_T u_i . grad_T u_j
                 + (V_eff - beta^2 + beta H + dbeta/dN) u_i u_j ] (X.N_t) dmu_t,
    with V_eff the level-shifted potential and H the mean curvature of the
    image boundary (circles and 1D only; polygons are rejected).
    """
    if problem.bc_kind not in ("neumann", "robin"):
        raise UnsupportedBCError(
            f"Robin boundary crossing form requested for bc {problem.bc_kind!r}")
    if problem.mesh.geometry.get("kind") == "polygon":
        raise UnsupportedGeometryError("mean curvature undefined at polygon corners")
    if beta is None:
        beta = problem.beta
    normals_t, xn, measures, y = _facet_frame(problem, t_star)
    g_im = _kernel_boundary_gradients(problem, t_star, kernel)
    dn = np.einsum("fki,fi->fk", g_im, normals_t)
    g_tan = g_im - np.einsum("fk,fi->fki", dn, normals_t)

    u_mid = kernel[problem.mesh.facet_vertices].mean(axis=1)  # (nbf, k)
    coeff = problem.coeffs.d(y)
    if beta is not None:
        bvals = beta(y)
        if np.any(bvals):
            H = _mean_curvature(problem, y, normals_t)
            dbdn = np.einsum("ni,ni->n", beta.gradient(y), normals_t)
            coeff = coeff - bvals ** 2 + bvals * H + dbdn

    w = xn * measures
    Q = np.einsum("fki,fli,f->kl", g_tan, g_tan, w)
    Q += np.einsum("fk,fl,f->kl", u_mid, u_mid, coeff * w)
    return 0.5 * (Q + Q.T)


# ---------------------------------------------------------------------------
# signatures, the Maslov count, reports


@dataclass
class Crossing:
    """A conjugate time with its kernel and crossing-form data."""

    t_star: float
    kernel_dim: int
    q_volume: np.ndarray
    signature: tuple[int, int, int]   # (p, q, z) of q_volume
    position: str                     # interior | initial | terminal
    q_boundary: np.ndarray | None = None
    kernel: np.ndarray | None = None
    warnings: list[str] = field(default_factory=list)


def signature_of(Q: np.ndarray, scale_floor: float = 0.0) -> tuple[int, int, int]:
    """(positive, negative, zero) eigenvalue counts of a symmetric matrix."""
    w = np.linalg.eigvalsh(0.5 * (Q + Q.T))
    ztol = 1e-7 * max(np.abs(w).max(initial=0.0), scale_floor, 1e-300)
    p = int(np.count_nonzero(w > ztol))
    q = int(np.count_nonzero(w < -ztol))
    return p, q, len(w) - p - q


def maslov_index(crossings: list[Crossing], override: bool = False) -> int:
    """Signed crossing count with endpoint conventions.

    Interior crossings contribute p - q, an initial crossing -q, a terminal
    one +p. Degenerate crossing forms (z > 0) abort unless override is set,
    in which case the nondegenerate part of the signature is used.
    """
    total = 0
    for cr in crossings:
        p, q, z = cr.signature
        if z > 0 and not override:
            raise DegenerateCrossingError(cr.t_star, z)
        if cr.position == "interior":
            total += p - q
        elif cr.position == "initial":
            total += -q
        elif cr.position == "terminal":
            total += p
        else:
            raise ValueError(f"unknown crossing position {cr.position!r}")
    return total


@dataclass
class FlowReport:
    """End-to-end audit of one deformation run."""

    morse_a: int
    morse_b: int
    crossings: list[Crossing]
    maslov: int
    residual: int
    t_grid: np.ndarray
    trajectories: np.ndarray
    warnings: list[str] = field(default_factory=list)
    degenerate: bool = False
    n_samples: int = 0


def _classify_position(problem, t_star) -> str:
    a, b = problem.family.t_range
    btol = problem.bisect_tol()
    if t_star - a <= btol:
        return "initial"
    if b - t_star <= btol:
        return "terminal"
    return "interior"


def _resolve_crossing(problem, t_star, vals, vecs) -> Crossing:
    warnings = []
    dim = vecs.shape[1]
    Qv = crossing_form_volume(problem, t_star, vecs)
    dt_scale = np.abs(problem.system_at(t_star).stiffness_dt).max()
    sig = signature_of(Qv, scale_floor=1e-9 * dt_scale)
    Qb = None
    if problem.bc_kind == "dirichlet":
        Qb, wmsg = crossing_form_boundary_dirichlet(problem, t_star, vecs)
        warnings.extend(wmsg)
    elif problem.bc_kind in ("neumann", "robin"):
        if problem.mesh.geometry.get("kind") != "polygon":
            Qb = crossing_form_boundary_robin(problem, t_star, vecs)
    position = _classify_position(problem, t_star)
    return Crossing(t_star, dim, Qv, sig, position, q_boundary=Qb,
                    kernel=vecs, warnings=warnings)


def run_flow_analysis(problem: DeformationProblem, n_samples: int,
                      m_track: int = 6) -> FlowReport:
    """Scan, locate and classify all crossings, and audit the index identity.

    Retries with a doubled grid on RefineGridError up to grid_refine_max
    times. Degenerate crossings are kept, flagged, and (without the
    override) make the report degenerate instead of raising.
    """
    attempts = 0
    while True:
        try:
            scan = scan_trajectories(problem, n_samples, m_track)
            break
        except RefineGridError:
            if attempts >= problem.tol.grid_refine_max:
                raise
            attempts += 1
            n_samples = 2 * n_samples

    crossings: list[Crossing] = []
    warnings = list(scan.warnings)
    a, b = problem.family.t_range

    for marker in scan.endpoint_kernels:
        t_star = a if marker == "initial" else b
        vals, vecs = _kernel_at(problem, t_star)
        crossings.append(_resolve_crossing(problem, t_star, vals, vecs))

    for br in scan.brackets:
        warm = scan.warm_blocks.get(br.get("index"))
        t_star, vals, vecs = locate_crossing(problem, br["t_lo"], br["t_hi"], warm=warm)
        if any(abs(t_star - c.t_star) <= problem.bisect_tol() for c in crossings):
            continue
        crossings.append(_resolve_crossing(problem, t_star, vals, vecs))

    crossings.sort(key=lambda c: c.t_star)
    for cr in crossings:
        warnings.extend(cr.warnings)

    degenerate = any(cr.signature[2] > 0 for cr in crossings)
    if degenerate:
        for cr in crossings:
            if cr.signature[2] > 0:
                warnings.append(
                    f"degenerate crossing at t={cr.t_star:.9g} (z={cr.signature[2]})"
                    + ("; using nondegenerate signature (override)"
                       if problem.tol.degenerate_override else "; report unverified"))
    maslov = maslov_index(crossings, override=True)
    residual = maslov - (scan.morse_a - scan.morse_b)
    return FlowReport(scan.morse_a, scan.morse_b, crossings, maslov, residual,
                      scan.t_grid, scan.values, warnings,
                      degenerate and not problem.tol.degenerate_override,
                      n_samples)


# ---------------------------------------------------------------------------
# identity audit


@dataclass
class IdentityAudit:
    """Checks of the index identities; failures recorded, never thrown."""

    residual: int
    identity_ok: bool
    smale: dict | None = None
    neumann_plus_one: dict | None = None
    notes: list[str] = field(default_factory=list)


def verify_identities(report: FlowReport, problem: DeformationProblem) -> IdentityAudit:
    """Audit Mas = Mor_a - Mor_b plus the Dirichlet counting identity
    (expanding family, all-negative crossings; crossings in [a, b) counted)
    and the Neumann '+1' formula (negative margin potential, no level shift).
    """
    audit = IdentityAudit(report.residual, report.residual == 0)
    a, b = problem.family.t_range

    if problem.bc_kind == "dirichlet" and report.crossings:
        xn_a = boundary_velocity_normal(problem.family, a, problem.mesh)
        xn_b = boundary_velocity_normal(problem.family, b, problem.mesh)
        expanding = min(xn_a.min(), xn_b.min()) >= -1e-10
        all_negative = all(c.signature == (0, c.kernel_dim, 0) for c in report.crossings)
        if expanding and all_negative:
            total = sum(c.kernel_dim for c in report.crossings
                        if c.position != "terminal")
            audit.smale = {
                "morse_a": report.morse_a,
                "crossing_sum": total,
                "expected_morse_b": report.morse_a + total,
                "morse_b": report.morse_b,
                "ok": report.morse_b == report.morse_a + total,
            }
        else:
            audit.notes.append("Dirichlet counting identity skipped: family not "
                               "expanding or a crossing is not negative definite")

    if problem.bc_kind == "neumann" and problem.lam_shift == 0.0:
        pts = problem.family.map(b, problem.mesh.vertices)
        margin = neumann_condition_margin(problem.potential, 0.0, pts)
        if margin > 0:
            total = sum(c.kernel_dim for c in report.crossings
                        if c.position == "interior")
            audit.neumann_plus_one = {
                "interior_crossing_sum": total,
                "plus_one": total + 1,
                "morse_b": report.morse_b,
                "margin": margin,
                "ok": report.morse_b == total + 1,
            }
            if report.morse_a != 1:
                audit.notes.append(
                    f"morse index at t={a:.6g} is {report.morse_a}, not 1; the "
                    f"window may clip small-t crossings")
        else:
            audit.notes.append(
                f"Neumann '+1' formula skipped: margin {margin:.6g} not positive")
    return audit


def physical_eigenvalues(problem: DeformationProblem, t: float, k: int = 6) -> np.ndarray:
    """Smallest k eigenvalues of the operator on the deformed domain.

    Solves the pencil of the rescaled stiffness against the pulled-back
    (Jacobian-weighted) mass, which carries the physical spectrum of the
    deformed-domain problem, unlike the reference-mass pencil used by the
    index machinery.
    """
    A = problem.constraints.project(problem.stiffness_at(t))
    Mt = problem.constraints.project(
        assemble_pullback_mass(problem.mesh, problem.family, t))
    A = A if isinstance(A, np.ndarray) else A.toarray()
    Mt = Mt if isinstance(Mt, np.ndarray) else Mt.toarray()
    k = min(k, A.shape[0])
    w = scipy.linalg.eigh(A, Mt, eigvals_only=True, subset_by_index=[0, k - 1])
    return w + 0.0
