"""Propagation of Y' = (F(x) + s*lambda*E_n1) Y for complex spectral parameters.

The integrator is a two-point Gauss Magnus scheme (order 4), exact for
constant systems.  Per lambda the system is balanced by the diagonal
Theta = diag(1, rho, ..., rho^(n-1)), rho = |lambda|^(1/n), which keeps the
step matrices O(h*rho) and lets a batched Pade exponential run without
squaring for desk-scale spectral parameters.

Overflow control: fundamental-solution columns are renormalized every step
with per-column log-scale bookkeeping, and characteristic minors are
propagated as exterior-power (compound) components with one scalar
log-scale per wedge, so no intermediate leaves floating range.

Laurent data of meromorphic maps come from discrete contour quadrature on
circles (FFT over equispaced nodes).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .grids import UniformGrid
from .operators import Problem, apply_boundary_form

GAUSS_OFFSETS = (0.5 - math.sqrt(3.0) / 6.0, 0.5 + math.sqrt(3.0) / 6.0)
MAGNUS_COMM = math.sqrt(3.0) / 12.0

# log-scale beyond which raw (unscaled) values may not be materialized
UNSCALE_GUARD = 660.0

DEFAULT_CONTOUR_POINTS = 32


class PropagationError(RuntimeError):
    """NaN/overflow or step breakdown inside the propagator."""


class PoleProximity(RuntimeError):
    """A Weyl-matrix evaluation came too close to a characteristic zero."""


class OverflowGuard(PropagationError):
    """Raised when unscaling a solution would exceed floating range."""


# --- batched matrix exponential ---------------------------------------------

_PADE13 = (
    64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
    1187353796428800.0, 129060195264000.0, 10559470521600.0,
    670442572800.0, 33522128640.0, 1323241920.0,
    40840800.0, 960960.0, 16380.0, 182.0, 1.0,
)


def expm_batch(a: np.ndarray) -> np.ndarray:
    """Matrix exponential of a stack (..., d, d) via Pade-13 with scaling."""
    a = np.asarray(a, dtype=complex)
    d = a.shape[-1]
    norms = np.max(np.sum(np.abs(a), axis=-2), axis=-1)
    smax = 0
    if norms.size:
        with np.errstate(divide="ignore"):
            s_each = np.ceil(np.log2(np.maximum(norms, 1e-300) / 4.25))
        s_each = np.maximum(s_each, 0.0).astype(int)
        smax = int(s_each.max())
    else:
        s_each = np.zeros(a.shape[:-2], dtype=int)
    scaled = a / (2.0 ** s_each)[..., None, None]
    ident = np.broadcast_to(np.eye(d, dtype=complex), scaled.shape)
    a2 = scaled @ scaled
    a4 = a2 @ a2
    a6 = a2 @ a4
    b = _PADE13
    u = scaled @ (
        a6 @ (b[13] * a6 + b[11] * a4 + b[9] * a2)
        + b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * ident
    )
    v = (
        a6 @ (b[12] * a6 + b[10] * a4 + b[8] * a2)
        + b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * ident
    )
    out = np.linalg.solve(v - u, v + u)
    for step in range(smax):
        todo = s_each > step
        if not todo.any():
            break
        out[todo] = out[todo] @ out[todo]
    return out


# --- exterior powers ----------------------------------------------------------


def _subsets(n: int, p: int) -> list[tuple]:
    return list(combinations(range(n), p))


def compound_matrix(a: np.ndarray, p: int) -> np.ndarray:
    """p-th multiplicative compound: all p x p minors of a (stacked)."""
    a = np.asarray(a)
    n = a.shape[-1]
    subs = _subsets(n, p)
    out = np.empty(a.shape[:-2] + (len(subs), len(subs)), dtype=a.dtype)
    for i, rows in enumerate(subs):
        for j, cols in enumerate(subs):
            out[..., i, j] = np.linalg.det(a[..., rows, :][..., :, cols])
    return out


class AdditiveCompound:
    """Linear map A -> A^[p] (the generator of the compound flow)."""

    def __init__(self, n: int, p: int):
        self.n, self.p = n, p
        subs = _subsets(n, p)
        self.dim = len(subs)
        index = {s: i for i, s in enumerate(subs)}
        diag_terms = []   # (row_of_out, i_diag_of_A) pairs
        off_terms = []    # (row, col, sign, a_row, a_col)
        for i, s in enumerate(subs):
            for ii in s:
                diag_terms.append((i, ii))
            sset = set(s)
            for pos, a_el in enumerate(s):
                for b_el in range(n):
                    if b_el in sset:
                        continue
                    t = tuple(sorted(sset - {a_el} | {b_el}))
                    jpos = t.index(b_el)
                    sign = (-1.0) ** (pos + jpos)
                    off_terms.append((i, index[t], sign, a_el, b_el))
        self._diag = np.array(diag_terms, dtype=int)
        self._off = off_terms

    def apply(self, a: np.ndarray) -> np.ndarray:
        """A has shape (..., n, n); returns (..., dim, dim)."""
        out = np.zeros(a.shape[:-2] + (self.dim, self.dim), dtype=a.dtype)
        rows, idiag = self._diag[:, 0], self._diag[:, 1]
        np.add.at(out, (..., rows, rows), a[..., idiag, idiag])
        for i, j, sign, ar, ac in self._off:
            out[..., i, j] += sign * a[..., ar, ac]
        return out


# --- the Magnus propagator ----------------------------------------------------


def _lambda_rho(lams: np.ndarray, n: int) -> np.ndarray:
    return np.maximum(np.abs(lams) ** (1.0 / n), 1.0)


def step_count(problem: Problem, lams, steps_per_unit: float = 4.0) -> int:
    """Shared step count for a batch: max of the grid size and c * rho."""
    lams = np.atleast_1d(np.asarray(lams, dtype=complex))
    m = problem.grid.m
    rho = float(np.max(_lambda_rho(lams, problem.n)))
    cells = max(1, math.ceil(steps_per_unit * rho / m))
    return m * cells


@dataclass
class PropagationResult:
    """Scaled fundamental data of one batch of spectral parameters.

    ``grid_values``: (B, M+1, n, n) column-scaled samples of C(x, lambda);
    ``grid_scales``: (B, M+1, n) per-column log-scales (true = value*exp(s)).
    ``wedges``: for each propagated exterior power p, the endpoint compound
    matrix (B, dim, dim) with per-column log-scales (B, dim).
    ``transfers``: (B, M, n, n) balanced per-cell transfer matrices
    (conjugated by Theta(rho)), for the two-point field solver.
    """

    lams: np.ndarray
    grid_values: np.ndarray = None
    grid_scales: np.ndarray = None
    end_values: np.ndarray = None
    end_scales: np.ndarray = None
    wedges: dict = None
    transfers: np.ndarray = None
    theta_pow: np.ndarray = None


def propagate(
    problem: Problem,
    lams,
    record_grid: bool = False,
    compound_ps: tuple = (),
    n_steps: int | None = None,
    steps_per_unit: float = 4.0,
    record_transfers: bool = False,
) -> PropagationResult:
    """Propagate C(x, lambda) for a batch of lambdas, optionally with wedges.

    The batch shares one step sequence; callers bucket lambdas by magnitude.
    """
    lams = np.atleast_1d(np.asarray(lams, dtype=complex))
    nb = lams.shape[0]
    n = problem.n
    grid = problem.grid
    if n_steps is None:
        n_steps = step_count(problem, lams, steps_per_unit)
    if n_steps % grid.m:
        n_steps = grid.m * math.ceil(n_steps / grid.m)
    sub = n_steps // grid.m
    h = 1.0 / n_steps

    rho = _lambda_rho(lams, n)
    theta_pow = rho[:, None] ** np.arange(n)          # (B, n)
    lam_bal = problem.lambda_sign * lams / rho ** (n - 1)

    # F at the two Gauss nodes of every step, balanced per batch entry
    xs = (np.arange(n_steps)[:, None] + np.array(GAUSS_OFFSETS)[None, :]) * h
    fvals = problem.F.at(xs.ravel())                  # (n, n, n_steps*2)
    fvals = np.moveaxis(fvals, -1, 0).reshape(n_steps, 2, n, n)
    scale_rows = theta_pow[:, :, None]                # Theta^-1 A Theta
    scale_cols = theta_pow[:, None, :]

    y = np.broadcast_to(problem.u0_inv / theta_pow[:, :, None], (nb, n, n)).astype(complex).copy()
    scales = np.zeros((nb, n))
    compounds = {}
    for p in compound_ps:
        ac = AdditiveCompound(n, p)
        w0 = compound_matrix(problem.u0_inv[None, :, :] / scale_rows, p)
        compounds[p] = (ac, w0.astype(complex), np.zeros((nb, ac.dim)))

    if record_grid:
        gv = np.empty((nb, grid.npoints, n, n), dtype=complex)
        gs = np.empty((nb, grid.npoints, n))
        gv[:, 0] = y
        gs[:, 0] = scales
    else:
        gv = gs = None
    if record_transfers:
        transfers = np.empty((nb, grid.m, n, n), dtype=complex)
        cell = np.broadcast_to(np.eye(n, dtype=complex), (nb, n, n)).copy()
    else:
        transfers = cell = None

    en1 = np.zeros((n, n))
    en1[n - 1, 0] = 1.0

    for i in range(n_steps):
        a1 = fvals[i, 0][None, :, :] * scale_cols / scale_rows
        a2 = fvals[i, 1][None, :, :] * scale_cols / scale_rows
        a1 = a1 + lam_bal[:, None, None] * en1[None, :, :]
        a2 = a2 + lam_bal[:, None, None] * en1[None, :, :]
        omega = (0.5 * h) * (a1 + a2) + (MAGNUS_COMM * h * h) * (a2 @ a1 - a1 @ a2)
        estep = expm_batch(omega)
        y = estep @ y
        colmax = np.max(np.abs(y), axis=1)
        colmax = np.where(colmax > 0.0, colmax, 1.0)
        y /= colmax[:, None, :]
        scales = scales + np.log(colmax)
        if record_transfers:
            cell = estep @ cell
            if (i + 1) % sub == 0:
                transfers[:, (i + 1) // sub - 1] = cell
                cell = np.broadcast_to(np.eye(n, dtype=complex), (nb, n, n)).copy()
        for p, (ac, w, ws) in compounds.items():
            w = expm_batch(ac.apply(omega)) @ w
            wmax = np.max(np.abs(w), axis=1)
            wmax = np.where(wmax > 0.0, wmax, 1.0)
            w /= wmax[:, None, :]
            compounds[p] = (ac, w, ws + np.log(wmax))
        if record_grid and (i + 1) % sub == 0:
            node = (i + 1) // sub
            gv[:, node] = y
            gs[:, node] = scales
        if not np.all(np.isfinite(y)):
            raise PropagationError(f"non-finite propagation at step {i + 1}/{n_steps}")

    # undo the balancing on recorded values (row scaling by Theta)
    if record_grid:
        gv = gv * theta_pow[:, None, :, None]
    end_values = y * theta_pow[:, :, None]
    wedges = {}
    for p, (ac, w, ws) in compounds.items():
        subs = _subsets(n, p)
        row_pow = np.array([float(sum(s)) for s in subs])
        w = w * (rho[:, None] ** row_pow)[:, :, None]
        wmax = np.max(np.abs(w), axis=1)
        wmax = np.where(wmax > 0.0, wmax, 1.0)
        w /= wmax[:, None, :]
        ws = ws + np.log(wmax)
        wedges[p] = (w, ws, subs)
    return PropagationResult(
        lams=lams, grid_values=gv, grid_scales=gs,
        end_values=end_values, end_scales=scales, wedges=wedges,
        transfers=transfers, theta_pow=theta_pow,
    )


# --- fundamental solutions and minors ------------------------------------------


@dataclass
class FundamentalSolution:
    """Grid samples of C(x, lambda) with per-column log-scale factors."""

    problem: Problem
    lam: complex
    values: np.ndarray    # (M+1, n, n), stored value = true * exp(-scale)
    scales: np.ndarray    # (M+1, n)

    def matrix(self, node: int | None = None) -> np.ndarray:
        """Unscaled C at one grid node (or all nodes); guarded against overflow."""
        if np.max(self.scales) > UNSCALE_GUARD:
            raise OverflowGuard(f"log-scale {np.max(self.scales):.1f} exceeds unscale guard")
        if node is None:
            return self.values * np.exp(self.scales)[:, None, :]
        return self.values[node] * np.exp(self.scales[node])[None, :]

    def quasi_vectors(self, node: int) -> np.ndarray:
        """Columns are the quasi-derivative vectors of C_1..C_n at the node."""
        return self.matrix(node)

    def det_drift(self) -> float:
        """Relative drift of det(C) * exp(sum of scales) across the grid."""
        dets = np.linalg.det(self.values)
        logs = np.sum(self.scales, axis=-1)
        vals = dets * np.exp(logs - logs[0])
        ref = vals[0]
        return float(np.max(np.abs(vals - ref)) / abs(ref))


def integrate_fundamental(problem: Problem, lam: complex, steps_per_unit: float = 4.0) -> FundamentalSolution:
    """C(., lambda) on the grid with initial value U_0^{-1} at x = 0."""
    res = propagate(problem, [lam], record_grid=True, steps_per_unit=steps_per_unit)
    values = res.grid_values[0]
    scales = res.grid_scales[0]
    return FundamentalSolution(problem=problem, lam=lam, values=values, scales=scales)


@dataclass
class ScaledComplex:
    """mantissa * exp(log_scale); the return shape of characteristic minors."""

    mantissa: complex
    log_scale: float

    def value(self) -> complex:
        return self.mantissa * math.exp(self.log_scale)

    def abs_log(self) -> float:
        return math.log(abs(self.mantissa)) + self.log_scale if self.mantissa != 0 else -math.inf


def _wedge_sign_and_subset(n: int, k: int, j: int) -> tuple:
    """Ordered columns (k+1..n) with column j replaced by k, 1-based math."""
    cols = list(range(k + 1, n + 1))
    if j > k:
        cols[cols.index(j)] = k
    sign = 1.0
    # bubble-sort sign of bringing the tuple to increasing order
    arr = cols[:]
    for i in range(len(arr)):
        for t in range(len(arr) - 1 - i):
            if arr[t] > arr[t + 1]:
                arr[t], arr[t + 1] = arr[t + 1], arr[t]
                sign = -sign
    return sign, tuple(c - 1 for c in arr)


class MinorTable:
    """All minors Delta_{j,k}(lambda) of one batch, as scaled complexes."""

    def __init__(self, problem: Problem, lams, steps_per_unit: float = 4.0,
                 n_steps: int | None = None, result: PropagationResult | None = None,
                 ks: tuple | None = None):
        self.problem = problem
        self.lams = np.atleast_1d(np.asarray(lams, dtype=complex))
        n = problem.n
        columns = tuple(range(1, n)) if ks is None else tuple(ks)
        if result is None:
            result = propagate(problem, self.lams, compound_ps=tuple(n - k for k in columns),
                               n_steps=n_steps, steps_per_unit=steps_per_unit)
        u1 = problem.boundary.u1
        nb = self.lams.shape[0]
        self._mant = np.zeros((nb, n + 1, n + 1), dtype=complex)   # [j, k] 1-based
        self._logs = np.zeros((nb, n + 1, n + 1))
        for k in columns:
            p = n - k
            w, ws, subs = result.wedges[p]
            index = {s: i for i, s in enumerate(subs)}
            rows = tuple(range(k, n))      # 0-based rows k+1..n of U_1
            u1rows = u1[rows, :]
            # boundary-form functional of a wedge column: sum of det(U1[rows, T]) * w[T]
            functional = np.array(
                [np.linalg.det(u1rows[:, list(s)]) for s in subs], dtype=complex
            )
            for j in range(k, n + 1):
                sign, subset = _wedge_sign_and_subset(n, k, j)
                col = index[subset]
                self._mant[:, j, k] = sign * (w[:, :, col] @ functional)
                self._logs[:, j, k] = ws[:, col]
        self._mant[:, n, n] = 1.0   # empty determinant

    def minor(self, j: int, k: int, b: int = 0) -> ScaledComplex:
        if not (1 <= k <= j <= self.problem.n):
            raise ValueError(f"need 1 <= k <= j <= n, got j={j} k={k}")
        return ScaledComplex(complex(self._mant[b, j, k]), float(self._logs[b, j, k]))

    def weyl_matrices(self, pole_tol: float = 1e-8) -> np.ndarray:
        """Unit lower-triangular M(lambda) for the batch; raises PoleProximity."""
        n = self.problem.n
        nb = self.lams.shape[0]
        mats = np.zeros((nb, n, n), dtype=complex)
        mats[:, range(n), range(n)] = 1.0
        for k in range(1, n):
            mant_kk = self._mant[:, k, k]
            if np.any(np.abs(mant_kk) < pole_tol):
                bad = int(np.argmin(np.abs(mant_kk)))
                raise PoleProximity(
                    f"Delta_{{{k},{k}}} mantissa {abs(mant_kk[bad]):.2e} at "
                    f"lambda={self.lams[bad]:.6g} is below {pole_tol}"
                )
            for j in range(k + 1, n + 1):
                ratio = -self._mant[:, j, k] / mant_kk
                ratio *= np.exp(self._logs[:, j, k] - self._logs[:, k, k])
                mats[:, j - 1, k - 1] = ratio
        return mats


def char_minor(problem: Problem, j: int, k: int, lam: complex, steps_per_unit: float = 4.0) -> ScaledComplex:
    """Delta_{j,k}(lambda) as mantissa * exp(log-scale), via a compound system."""
    return MinorTable(problem, [lam], steps_per_unit=steps_per_unit).minor(j, k)


def weyl_matrix(problem: Problem, lam: complex, pole_tol: float = 1e-8) -> np.ndarray:
    return MinorTable(problem, [lam]).weyl_matrices(pole_tol=pole_tol)[0]


@dataclass
class WeylField:
    """Grid samples of the Weyl-solution matrix with its Weyl matrix."""

    problem: Problem
    lam: complex
    values: np.ndarray    # (M+1, n, n), unscaled
    weyl: np.ndarray      # (n, n)

    def first_row(self) -> np.ndarray:
        return self.values[:, 0, :]


def weyl_field_batch(problem: Problem, lams, pole_tol: float = 1e-8,
                     steps_per_unit: float = 4.0, n_steps: int | None = None) -> tuple:
    """Phi(., lambda) = C(., lambda) M(lambda) for a batch sharing one step grid.

    Returns ``(fields, weyls)`` with ``fields`` of shape (B, M+1, n, n).
    One propagation supplies both the grid samples and the endpoint wedges.
    """
    lams = np.atleast_1d(np.asarray(lams, dtype=complex))
    n = problem.n
    res = propagate(problem, lams, record_grid=True, compound_ps=tuple(range(1, n)),
                    steps_per_unit=steps_per_unit, n_steps=n_steps)
    table = MinorTable(problem, lams, result=res)
    weyls = table.weyl_matrices(pole_tol=pole_tol)
    if np.max(res.grid_scales) > UNSCALE_GUARD:
        raise OverflowGuard("fundamental solution exceeds unscale guard")
    raw = res.grid_values * np.exp(res.grid_scales)[:, :, None, :]
    fields = raw @ weyls[:, None, :, :]
    return fields, weyls


def weyl_fields(problem: Problem, lams, pole_tol: float = 1e-8,
                steps_per_unit: float = 4.0, n_steps: int | None = None) -> list:
    lams = np.atleast_1d(np.asarray(lams, dtype=complex))
    fields, weyls = weyl_field_batch(problem, lams, pole_tol=pole_tol,
                                     steps_per_unit=steps_per_unit, n_steps=n_steps)
    return [
        WeylField(problem=problem, lam=complex(lams[b]), values=fields[b], weyl=weyls[b])
        for b in range(lams.shape[0])
    ]


def weyl_solutions(problem: Problem, lam: complex, pole_tol: float = 1e-8) -> WeylField:
    return weyl_fields(problem, [lam], pole_tol=pole_tol)[0]


def weyl_fields_two_point(problem: Problem, lams, steps_per_unit: float = 4.0,
                          n_steps: int | None = None) -> np.ndarray:
    """Weyl-solution matrices Phi(x, lambda) via cell-wise two-point solves.

    The product form C(x, lambda) M(lambda) cancels the dominant solution
    mode catastrophically at interior x for large |lambda|.  Here each column
    is instead the solution of its own boundary problem discretized cell by
    cell (multiple shooting on the grid): unknowns are exponentially rescaled
    quasi-derivative vectors at the nodes, the per-cell transfer blocks stay
    O(1), and pivoted banded LU resolves the dichotomy stably.

    Returns raw field values of shape (B, M+1, n, n).
    """
    from scipy.linalg import solve_banded

    lams = np.atleast_1d(np.asarray(lams, dtype=complex))
    n = problem.n
    grid = problem.grid
    m = grid.m
    res = propagate(problem, lams, record_transfers=True,
                    steps_per_unit=steps_per_unit, n_steps=n_steps)
    nb = lams.shape[0]
    size = n * (m + 1)
    lband, uband = 2 * n - 1, n - 1
    xs = grid.x
    u0t = problem.boundary.u0
    u1t = problem.boundary.u1
    out = np.empty((nb, m + 1, n, n), dtype=complex)
    roots_of_unity = np.exp(2j * np.pi * np.arange(n) / n)
    for b in range(nb):
        lam = lams[b]
        theta = res.theta_pow[b]
        mu = (problem.lambda_sign * lam) ** (1.0 / n) * roots_of_unity
        rates = np.sort(mu.real)
        if np.max(rates) > UNSCALE_GUARD:
            raise OverflowGuard(f"field growth rate {np.max(rates):.1f} exceeds guard")
        u0s = u0t * theta[None, :]
        u1s = u1t * theta[None, :]
        tcell = res.transfers[b]                     # (m, n, n) balanced
        for km in range(1, n + 1):
            rate = rates[km - 1]
            scaled_t = tcell * np.exp(-rate / m)
            ab = np.zeros((lband + uband + 1, size), dtype=complex)
            rhs = np.zeros(size, dtype=complex)
            # left boundary rows 0..km-1: U0 Theta acting on node-0 unknowns
            for s in range(km):
                for c in range(n):
                    ab[uband + s - c, c] = u0s[s, c]
            rhs[km - 1] = 1.0
            # continuity rows: Y_{i+1} - A_i Y_i = 0
            for j in range(n):
                ab[uband + km - n, n + j :: n][: m] = 1.0
                for jj in range(n):
                    ab[uband + km + j - jj, jj : n * m : n] = -scaled_t[:, j, jj]
            # right boundary rows: U1 Theta at node M (scale factor drops: rhs 0)
            for s in range(km, n):
                for jj in range(n):
                    ab[uband + s - jj, n * m + jj] = u1s[s, jj]
            try:
                sol = solve_banded((lband, uband), ab, rhs)
            except np.linalg.LinAlgError as exc:
                raise PoleProximity(f"two-point system singular at lambda={lam:.6g}") from exc
            ytil = sol.reshape(m + 1, n)
            out[b, :, :, km - 1] = ytil * theta[None, :] * np.exp(rate * xs)[:, None]
        if not np.all(np.isfinite(out[b])):
            raise PropagationError(f"two-point field non-finite at lambda={lam:.6g}")
    return out


def boundary_forms_of_field(problem: Problem, field: WeylField, a: int) -> np.ndarray:
    """Matrix of boundary forms applied to every Weyl solution column."""
    node = 0 if a == 0 else problem.grid.m
    return np.stack(
        [apply_boundary_form(problem, a, field.values[node, :, c]) for c in range(problem.n)],
        axis=1,
    )


# --- contour quadrature --------------------------------------------------------


def contour_nodes(center: complex, radius: float, q: int = DEFAULT_CONTOUR_POINTS) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(q) / q
    return center + radius * np.exp(1j * angles)


def laurent_from_samples(samples: np.ndarray, radius: float, orders) -> dict:
    """Laurent coefficients from equispaced circle samples (axis 0 = node)."""
    q = samples.shape[0]
    coeff = np.fft.fft(samples, axis=0) / q
    out = {}
    for j in orders:
        out[j] = coeff[j % q] * radius ** (-j)
    return out


def laurent_coefficient(sampler, lam0: complex, order: int, radius: float,
                        q: int = DEFAULT_CONTOUR_POINTS, check: bool = True,
                        rtol: float = 1e-6):
    """Laurent coefficient of a map lambda -> array at lam0 by circle quadrature.

    ``sampler`` takes an array of lambdas and returns stacked values with the
    lambda axis first.  With ``check`` the quadrature is repeated at 2q nodes
    and must agree to rtol.
    """
    if order < -2:
        raise ValueError("orders below -2 are not produced by simple-pole data")
    vals = np.asarray(sampler(contour_nodes(lam0, radius, q)))
    a = laurent_from_samples(vals, radius, [order])[order]
    if check:
        vals2 = np.asarray(sampler(contour_nodes(lam0, radius, 2 * q)))
        a2 = laurent_from_samples(vals2, radius, [order])[order]
        # compare against the coefficient size, with a floor from the sample
        # magnitude so expected-zero coefficients pass
        floor = 1e-12 * np.max(np.abs(vals)) * radius ** (-order)
        scale = max(np.max(np.abs(a2)), floor, 1e-300)
        if np.max(np.abs(a - a2)) > rtol * scale:
            raise PropagationError(
                f"contour quadrature not converged at order {order}: "
                f"delta {np.max(np.abs(a - a2)):.3e} vs scale {scale:.3e}"
            )
        a = a2
    return a
