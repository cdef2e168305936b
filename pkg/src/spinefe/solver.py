"""Linear elastostatics on tet10 meshes.

Assembly produces a global sparse stiffness matrix; kinematic constraints
are handled by elimination (reduce to the free block, move prescribed
columns to the right-hand side); the reduced system is solved with a
Jacobi-preconditioned conjugate gradient.  Reactions are recovered from
the full matrix.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import BracketError, ConvergenceError, MaterialError, SolverError
from .materials import MaterialField, Provenance
from .mesh import EDGE_PAIRS, Mesh
from .quadrature import tet_rule
from .registration import RigidMotion

__all__ = [
    "BoundaryConditionSet",
    "ElasticitySystem",
    "SolveStats",
    "tet10_stiffness",
    "assemble",
    "apply_bcs",
    "solve_pcg",
    "reaction_force",
    "fit_disc_modulus",
]

STIFFNESS_POINTS = 11          # degree-4 rule, exact for straight tet10 stiffness
PCG_TOL = 1e-9

# barycentric gradients of (L0, L1, L2, L3) wrt reference coords
_DL = np.array([[-1.0, -1.0, -1.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 0.0, 1.0]])


def _shape_gradients(bary: np.ndarray) -> np.ndarray:
    """Reference-space gradients of the 10 tet10 shape functions.

    bary: (q, 4) quadrature points.  Returns (q, 10, 3).
    """
    q = bary.shape[0]
    grads = np.zeros((q, 10, 3))
    for i in range(4):
        grads[:, i] = (4.0 * bary[:, i] - 1.0)[:, None] * _DL[i]
    for k, (i, j) in enumerate(EDGE_PAIRS):
        grads[:, 4 + k] = 4.0 * (bary[:, i][:, None] * _DL[j] + bary[:, j][:, None] * _DL[i])
    return grads


def _element_stiffness_batch(coords: np.ndarray, e_mpa: np.ndarray,
                             nu: np.ndarray, points: int = STIFFNESS_POINTS) -> np.ndarray:
    """(m, 30, 30) stiffness matrices for a batch of tet10 elements."""
    bary, wts = tet_rule(points)
    dn_ref = _shape_gradients(bary)                       # (q, 10, 3)
    m = coords.shape[0]

    lam = e_mpa * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    mu = e_mpa / (2.0 * (1.0 + nu))

    k = np.zeros((m, 30, 30))
    for q in range(bary.shape[0]):
        # jac[a, b] = d x_a / d xi_b so that inv(jac) maps reference
        # gradients to physical ones
        jac = np.einsum("ib,mia->mab", dn_ref[q], coords)  # (m, 3, 3)
        det = np.linalg.det(jac)
        if (det <= 0.0).any():
            bad = int(np.flatnonzero(det <= 0.0)[0])
            raise SolverError(f"element {bad} has non-positive Jacobian")
        inv = np.linalg.inv(jac)
        g = np.einsum("ia,mab->mib", dn_ref[q], inv)       # (m, 10, 3) d N / d x
        w = wts[q] * det
        outer = np.einsum("mia,mjb->miajb", g, g)
        kq = lam[:, None, None, None, None] * outer
        kq += mu[:, None, None, None, None] * outer.transpose(0, 1, 4, 3, 2)
        gram = np.einsum("mic,mjc->mij", g, g)
        for a in range(3):
            kq[:, :, a, :, a] += mu[:, None, None] * gram
        k += w[:, None, None] * kq.reshape(m, 30, 30)
    return 0.5 * (k + k.transpose(0, 2, 1))


def tet10_stiffness(coords: np.ndarray, e_mpa: float, nu: float,
                    points: int = STIFFNESS_POINTS) -> np.ndarray:
    """30x30 stiffness of one tet10 element (coords: (10, 3), mm/MPa)."""
    coords = np.asarray(coords, dtype=np.float64).reshape(1, 10, 3)
    return _element_stiffness_batch(coords, np.array([e_mpa]), np.array([nu]),
                                    points=points)[0]


@dataclass
class BoundaryConditionSet:
    """Kinematic constraints on node sets.

    fixed: node ids held at zero displacement.
    driven: node ids following ``motion`` through its strain-free
    linearization (``motion.small_displacement``), consistent with the
    small-strain kinematics of the solver.
    prescribed_nodes/prescribed_values: optional explicit per-node vectors
    for general kinematic fields.  The three groups must be disjoint and
    at least one node must be constrained.
    """

    fixed: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    driven: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    motion: RigidMotion | None = None
    prescribed_nodes: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    prescribed_values: np.ndarray = field(default_factory=lambda: np.empty((0, 3)))

    def __post_init__(self) -> None:
        self.fixed = np.unique(np.asarray(self.fixed, dtype=np.int64))
        self.driven = np.unique(np.asarray(self.driven, dtype=np.int64))
        self.prescribed_nodes = np.asarray(self.prescribed_nodes, dtype=np.int64)
        self.prescribed_values = np.asarray(self.prescribed_values, dtype=np.float64).reshape(-1, 3)
        if len(np.unique(self.prescribed_nodes)) != len(self.prescribed_nodes):
            raise SolverError("prescribed node list repeats a node")
        if self.prescribed_nodes.shape[0] != self.prescribed_values.shape[0]:
            raise SolverError("prescribed nodes and values disagree in length")
        groups = [set(self.fixed.tolist()), set(self.driven.tolist()),
                  set(self.prescribed_nodes.tolist())]
        for i in range(3):
            for j in range(i + 1, 3):
                if groups[i] & groups[j]:
                    raise SolverError("constraint groups overlap")
        if self.driven.size and self.motion is None:
            raise SolverError("driven nodes require a rigid motion")
        if not (self.fixed.size or self.driven.size or self.prescribed_nodes.size):
            raise SolverError("at least one node must be constrained")


@dataclass
class ElasticitySystem:
    """Assembled system, optionally reduced by constraints."""

    k_full: sp.csr_matrix
    f: np.ndarray
    n_nodes: int
    free: np.ndarray | None = None
    prescribed: np.ndarray | None = None
    prescribed_u: np.ndarray | None = None
    k_ff: sp.csr_matrix | None = None
    rhs: np.ndarray | None = None


@dataclass
class SolveStats:
    iterations: int
    residual: float
    wall_time_s: float


def assemble(mesh: Mesh, materials: MaterialField, part_ids=None,
             chunk: int = 4096) -> ElasticitySystem:
    """Assemble the global stiffness matrix.

    ``part_ids`` restricts assembly (and the material-coverage check) to
    the elements of those parts; the matrix keeps the full DOF layout.
    Elements are processed in fixed-order chunks and summed through a
    COO->CSR conversion, so the result is bitwise reproducible.
    """
    if part_ids is None:
        sel = np.arange(mesh.n_elements)
    else:
        part_ids = sorted(set(int(p) for p in np.atleast_1d(part_ids)))
        unknown = [p for p in part_ids if p not in mesh.part_table]
        if unknown:
            raise MaterialError(f"unknown part ids {unknown}")
        sel = np.flatnonzero(np.isin(mesh.parts, part_ids))
    if sel.size == 0:
        raise MaterialError("no elements selected for assembly")

    covered = materials.provenance != Provenance.UNSET
    gap = sel[~covered[sel]]
    if gap.size:
        raise MaterialError(f"element {int(gap[0])} has no material assigned "
                            f"({gap.size} elements uncovered)")
    if not (np.isfinite(materials.e_mpa[sel]).all()
            and np.isfinite(materials.nu[sel]).all()):
        raise MaterialError("material field contains non-finite values")

    ndof = 3 * mesh.n_nodes
    elements = mesh.elements[sel]
    edof = (3 * elements[:, :, None] + np.arange(3)).reshape(-1, 30)

    blocks = []
    for start in range(0, len(sel), chunk):
        stop = min(start + chunk, len(sel))
        coords = mesh.nodes[elements[start:stop]]
        ke = _element_stiffness_batch(coords, materials.e_mpa[sel[start:stop]],
                                      materials.nu[sel[start:stop]])
        ed = edof[start:stop]
        rows = np.repeat(ed, 30, axis=1).ravel()
        cols = np.tile(ed, (1, 30)).ravel()
        blocks.append(sp.coo_matrix((ke.ravel(), (rows, cols)),
                                    shape=(ndof, ndof)).tocsr())
    k_full = blocks[0]
    for b in blocks[1:]:
        k_full = k_full + b
    k_full.sum_duplicates()
    return ElasticitySystem(k_full=k_full, f=np.zeros(ndof), n_nodes=mesh.n_nodes)


def apply_bcs(system: ElasticitySystem, bcs: BoundaryConditionSet,
              mesh: Mesh) -> ElasticitySystem:
    """Reduce the system to its free DOFs.

    Driven nodes get the linearized rigid displacement of ``motion``;
    fixed nodes get zero; explicit prescriptions are taken verbatim.
    Prescribed columns move to the right-hand side.
    """
    n = system.n_nodes
    for group in (bcs.fixed, bcs.driven, bcs.prescribed_nodes):
        if group.size and (group.min() < 0 or group.max() >= n):
            raise SolverError("constrained node id out of range")

    nodes = np.concatenate([bcs.fixed, bcs.driven, bcs.prescribed_nodes])
    values = np.zeros((nodes.size, 3))
    if bcs.driven.size:
        x = mesh.nodes[bcs.driven]
        values[bcs.fixed.size:bcs.fixed.size + bcs.driven.size] = \
            bcs.motion.small_displacement(x)
    if bcs.prescribed_nodes.size:
        values[bcs.fixed.size + bcs.driven.size:] = bcs.prescribed_values

    order = np.argsort(nodes, kind="stable")
    nodes, values = nodes[order], values[order]
    pres = (3 * nodes[:, None] + np.arange(3)).ravel()
    u_p = values.ravel()

    mask = np.ones(3 * n, dtype=bool)
    mask[pres] = False
    free = np.flatnonzero(mask)

    k_csr = system.k_full
    k_ff = k_csr[free][:, free].tocsr()
    k_fp = k_csr[free][:, pres]
    rhs = system.f[free] - k_fp @ u_p
    return ElasticitySystem(k_full=system.k_full, f=system.f, n_nodes=n,
                            free=free, prescribed=pres, prescribed_u=u_p,
                            k_ff=k_ff, rhs=rhs)


def solve_pcg(system: ElasticitySystem, tol: float = PCG_TOL,
              max_iter: int | None = None) -> tuple[np.ndarray, SolveStats]:
    """Solve the reduced system with Jacobi-preconditioned CG.

    Returns the full (n_nodes, 3) displacement field (prescribed values
    exact) and solve statistics.  Convergence is relative:
    ||r|| <= tol * ||rhs||.
    """
    if system.k_ff is None:
        raise SolverError("apply_bcs must run before solve_pcg")
    a = system.k_ff
    b = system.rhs
    n = b.size
    if max_iter is None:
        max_iter = int(20.0 * np.sqrt(n)) + 1000

    t0 = time.perf_counter()
    x = np.zeros(n)
    bnorm = float(np.linalg.norm(b))
    iterations = 0
    resid = 0.0
    if bnorm > 0.0 and n > 0:
        diag = a.diagonal()
        if (diag <= 0.0).any():
            raise SolverError("reduced matrix has a non-positive diagonal entry")
        inv_diag = 1.0 / diag
        r = b.copy()
        z = inv_diag * r
        p = z.copy()
        rz = float(r @ z)
        resid = 1.0
        while resid > tol:
            if iterations >= max_iter:
                raise ConvergenceError(
                    f"PCG stalled at relative residual {resid:.3e} "
                    f"after {iterations} iterations")
            ap = a @ p
            pap = float(p @ ap)
            if not np.isfinite(pap) or pap <= 0.0:
                raise SolverError("matrix is not positive definite on the free DOFs")
            alpha = rz / pap
            x += alpha * p
            r -= alpha * ap
            z = inv_diag * r
            rz_new = float(r @ z)
            beta = rz_new / rz
            p = z + beta * p
            rz = rz_new
            iterations += 1
            resid = float(np.linalg.norm(r)) / bnorm
        if not np.isfinite(x).all():
            raise SolverError("solution contains non-finite values")

    u = np.zeros(3 * system.n_nodes)
    u[system.free] = x
    u[system.prescribed] = system.prescribed_u
    stats = SolveStats(iterations=iterations, residual=resid,
                       wall_time_s=time.perf_counter() - t0)
    return u.reshape(-1, 3), stats


def reaction_force(system: ElasticitySystem, u: np.ndarray,
                   node_ids: np.ndarray) -> np.ndarray:
    """Net reaction (3,) transmitted through a node set.

    Computed from the full stiffness matrix: internal force minus applied
    load, summed over the set.
    """
    node_ids = np.asarray(node_ids, dtype=np.int64)
    f_int = system.k_full @ np.asarray(u, dtype=np.float64).reshape(-1) - system.f
    dofs = (3 * node_ids[:, None] + np.arange(3)).ravel()
    return f_int[dofs].reshape(-1, 3).sum(axis=0)


def fit_disc_modulus(force_fn, target: float,
                     bracket: tuple[float, float],
                     tol_rel: float = 1e-4,
                     max_solves: int = 30) -> float:
    """Find the disc modulus whose reaction magnitude matches ``target``.

    ``force_fn(e_mpa)`` must be monotone over the bracket.  Secant steps
    with bisection fallback; stops when ``|force - target| <= tol_rel *
    target``.  Raises BracketError (reporting both endpoint forces) when
    the target is outside the bracket.
    """
    lo, hi = float(bracket[0]), float(bracket[1])
    if not 0.0 < lo < hi:
        raise BracketError(f"invalid bracket ({lo}, {hi})")
    if target <= 0.0:
        raise BracketError(f"target force must be positive, got {target}")

    tol_abs = tol_rel * abs(target)
    f_lo = float(force_fn(lo)) - target
    if abs(f_lo) <= tol_abs:
        return lo
    f_hi = float(force_fn(hi)) - target
    if abs(f_hi) <= tol_abs:
        return hi
    if f_lo * f_hi > 0.0:
        raise BracketError(
            f"target {target:.6g} N not bracketed: force({lo:.6g} MPa) = "
            f"{f_lo + target:.6g} N, force({hi:.6g} MPa) = {f_hi + target:.6g} N")

    solves = 2
    a, fa, b, fb = lo, f_lo, hi, f_hi
    x_prev, f_prev = a, fa
    x_cur, f_cur = b, fb
    while solves < max_solves:
        denom = f_cur - f_prev
        if denom != 0.0:
            x_next = x_cur - f_cur * (x_cur - x_prev) / denom
        else:
            x_next = 0.5 * (a + b)
        if not a < x_next < b:
            x_next = 0.5 * (a + b)
        f_next = float(force_fn(x_next)) - target
        solves += 1
        if abs(f_next) <= tol_abs:
            return x_next
        if fa * f_next < 0.0:
            b, fb = x_next, f_next
        else:
            a, fa = x_next, f_next
        x_prev, f_prev = x_cur, f_cur
        x_cur, f_cur = x_next, f_next
    raise ConvergenceError(
        f"modulus fit did not reach tolerance within {max_solves} solves")
