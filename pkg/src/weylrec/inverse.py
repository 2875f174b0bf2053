"""Main equation of the inverse problem in the sequence space.

Given two spectral data sets (target and model) and the model problem, this
module builds, for each grid point x, the vector psi-tilde and the matrix
R-tilde of the linear main equation (I - R~(x)) psi(x) = psi~(x), solves it,
and transforms the solution back to the field values phi_{l,k,eps}(x).

Everything is driven by Laurent tables of the model Weyl fields at the data
points.  The x-derivatives of all model-side quantities are exact (the
x-derivative of a structural G entry is the rank-one product of an eta-tilde
scalar and a model field scalar), so derivative chains of the solution are
obtained by re-solving with the same matrix and differentiated right-hand
sides, never by numerical differentiation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .engine import (
    DEFAULT_CONTOUR_POINTS,
    contour_nodes,
    laurent_from_samples,
    step_count,
    weyl_fields_two_point,
)
from scipy.linalg import lu_factor, lu_solve

from .forward import SpectralDataSet, eigenvalue_predictor
from .grids import UniformGrid, spline
from .operators import Problem, star_problem

POLE_RTOL = 1e-8           # |lam - pole| below this (relative) is "at the pole"
DEDUP_RTOL = 1e-6          # same-eps duplicate detection
RADIUS_FRACTION = 0.25     # contour radius as a fraction of the pole gap
INTERNAL_POLE_TOL = 1e-13  # Weyl-matrix conditioning floor for bundle contours
RESIDUAL_RTOL = 1e-10
TAYLOR_ORDERS = 20
CANCEL_FLOOR = 2e-13   # dot-product cancellation floor used to clip G entries         # extra Taylor/Laurent orders kept where needed
NEAR_FRACTION = 0.4        # |delta| below this fraction of the cluster's
                           # convergence distance switches a pair to the
                           # pole-split evaluation


class MainEquationError(RuntimeError):
    pass


# --- index bookkeeping ---------------------------------------------------------


@dataclass(frozen=True, order=True)
class IndexV:
    """Index (l, k, eps) into the combined data sequence; lexicographic order."""

    el: int
    k: int
    eps: int


def index_list(n: int, levels: int) -> list:
    return [
        IndexV(el, k, eps)
        for el in range(1, levels + 1)
        for k in range(1, n)
        for eps in (0, 1)
    ]


@dataclass
class XiSequence:
    """Level-wise distance of two spectral data sets, with reciprocals."""

    xi: np.ndarray      # index l-1
    theta: np.ndarray

    def check(self):
        prod = self.xi * self.theta
        ok = np.all((np.abs(prod) < 1e-12) | (np.abs(prod - 1.0) < 1e-12))
        if not ok:
            raise MainEquationError("theta_l * xi_l must be exactly 0 or 1")


def xi_sequence(target: SpectralDataSet, model: SpectralDataSet) -> XiSequence:
    """xi_l = sum_k (|lam diff| + sum_j |N-column diff| l^(p_k - p_{k+1})) l^(1-n)."""
    if (target.n, target.p0, target.p1) != (model.n, model.p0, model.p1):
        raise MainEquationError("data sets belong to different problem shapes")
    levels = min(target.levels, model.levels)
    n = target.n
    p0 = target.p0
    xi = np.zeros(levels)
    for el in range(1, levels + 1):
        acc = 0.0
        for k in range(1, n):
            dt = target.datum(el, k)
            dm = model.datum(el, k)
            acc += abs(dt.lam - dm.lam)
            coldiff = dt.nmatrix(n)[:, k - 1] - dm.nmatrix(n)[:, k - 1]
            acc += float(np.sum(np.abs(coldiff))) * float(el) ** (p0[k - 1] - p0[k])
        xi[el - 1] = acc * float(el) ** (1 - n)
    theta = np.where(xi != 0.0, 1.0 / np.where(xi != 0.0, xi, 1.0), 0.0)
    seq = XiSequence(xi=xi, theta=theta)
    seq.check()
    return seq


def weight_w(el: int, k: int, x, p_next: int, n: int):
    """w_{l,k}(x) = l^(-p_{k+1,0}) exp(-x pi l cot(k pi / n)).

    The exponential rate is the leading real part of the relevant
    characteristic mode, pi l cot(k pi / n); with the rate off by the factor
    pi the sequence-space scaling stops bounding the data at realistic
    truncation levels.
    """
    x = np.asarray(x, dtype=float)
    c = math.pi * el / math.tan(math.pi * k / n)
    return float(el) ** (-p_next) * np.exp(-x * c)


# --- data pairing ----------------------------------------------------------------


@dataclass
class DataPair:
    """Target and model spectral data aligned on a truncated index set."""

    target: SpectralDataSet
    model: SpectralDataSet
    trunc: int
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        avail = min(self.target.levels, self.model.levels)
        if self.trunc > avail:
            self.warnings.append(
                f"truncation N={self.trunc} clipped to available levels L={avail}"
            )
            self.trunc = avail
        self.n = self.target.n
        if (self.target.n, self.target.p0, self.target.p1) != (
            self.model.n, self.model.p0, self.model.p1,
        ):
            raise MainEquationError("target and model data have different problem shapes")
        self.xi_seq = xi_sequence(self.target, self.model)
        self.V = index_list(self.n, self.trunc)
        self.lams = np.array([self._lam(v) for v in self.V])
        self.nrows = np.array([self._nrow(v) for v in self.V])
        self.signs = np.array([(-1.0) ** v.eps for v in self.V])
        self._dedup_check()

    def _lam(self, v: IndexV) -> complex:
        ds = self.target if v.eps == 0 else self.model
        return ds.lam(v.el, v.k)

    def _nrow(self, v: IndexV) -> np.ndarray:
        ds = self.target if v.eps == 0 else self.model
        return ds.datum(v.el, v.k).nrow(self.n)

    def _dedup_check(self):
        for eps in (0, 1):
            vals = [(v, self.lams[i]) for i, v in enumerate(self.V) if v.eps == eps]
            for i in range(len(vals)):
                for j in range(i + 1, len(vals)):
                    va, la = vals[i]
                    vb, lb = vals[j]
                    if abs(la - lb) < DEDUP_RTOL * (1.0 + abs(la)) and va.k == vb.k:
                        raise MainEquationError(
                            f"duplicate eigenvalue within column k={va.k} at l={va.el},{vb.el}"
                        )

    def xi_of(self, el: int) -> float:
        return float(self.xi_seq.xi[el - 1])

    def theta_of(self, el: int) -> float:
        return float(self.xi_seq.theta[el - 1])


# --- model field bundles ----------------------------------------------------------


@dataclass
class _Cluster:
    center: complex
    members: list          # indices into V
    is_pole: bool
    radius: float
    conv_dist: float = 0.0   # distance to the nearest other model pole


class FieldBundle:
    """Laurent tables of one problem's Weyl fields at all data points.

    For the main equation the field problem is the model; the same class
    builds target-side bundles for identity tests.  ``chain_depth`` is the
    number of exact x-derivatives carried along.
    """

    def __init__(self, problem: Problem, pair: DataPair, chain_depth: int = 1,
                 q: int = DEFAULT_CONTOUR_POINTS, batch_limit: int = 360,
                 steps_per_unit: float = 4.0):
        self.problem = problem
        self.star = star_problem(problem)
        self.pair = pair
        self.depth = int(chain_depth)
        self.q = int(q)
        self.steps_per_unit = float(steps_per_unit)
        self.grid = problem.grid
        n = problem.n
        self.n = n
        self.V = pair.V
        self.nv = len(self.V)
        self._cluster_points()
        self._evaluate_contours(batch_limit)
        self._build_chains()
        self._per_index_arrays()

    # -- geometry of the data points

    def _cluster_points(self):
        lams = self.pair.lams
        model = self.pair.model
        poles = list(model.all_lams())
        # pad the pole set with one predicted level per column for gap safety
        for k in range(1, self.n):
            lam_pred, _ = eigenvalue_predictor(
                self.n, k, model.levels + 1, model.p0, model.p1
            )
            poles.append(lam_pred)
        poles = np.array(poles)
        clusters: list[_Cluster] = []
        owner = np.full(self.nv, -1, dtype=int)
        for i, lam in enumerate(lams):
            for ci, cl in enumerate(clusters):
                if abs(lam - cl.center) < POLE_RTOL * (1.0 + abs(cl.center)):
                    cl.members.append(i)
                    owner[i] = ci
                    break
            else:
                clusters.append(_Cluster(center=complex(lam), members=[i], is_pole=False, radius=0.0))
                owner[i] = len(clusters) - 1
        n = self.n
        for cl in clusters:
            dists = np.abs(poles - cl.center)
            near = dists < POLE_RTOL * (1.0 + abs(cl.center))
            cl.is_pole = bool(np.any(near))
            others = dists[~near]
            if others.size == 0:
                raise MainEquationError("cannot size a contour: no distinct poles found")
            # cap by the rho-plane sampling scale: the fields oscillate in
            # lambda with local frequency ~ x / (n rho^(n-1)), so the circle
            # radius must stay a fixed fraction of n rho^(n-1) for the
            # contour FFT to converge at fixed Q
            rho = max(abs(cl.center) ** (1.0 / n), 1.0)
            cl.conv_dist = float(np.min(others))
            cl.radius = min(
                RADIUS_FRACTION * cl.conv_dist,
                0.35 * n * rho ** (n - 1),
            )
        self.clusters = clusters
        self.owner = owner
        # pairs (v, w) where lam_w falls inside the near zone of v's cluster:
        # the plain expansion of G cancels catastrophically there, so those
        # entries use the pole-split form with higher Taylor orders
        self.near_pairs = []
        need_high = set()
        for i in range(self.nv):
            ci = owner[i]
            cl = clusters[ci]
            if abs(lams[i] - cl.center) > POLE_RTOL * (1.0 + abs(cl.center)):
                continue
            for w in range(self.nv):
                if owner[w] == ci:
                    continue
                delta = lams[w] - cl.center
                if abs(delta) <= NEAR_FRACTION * cl.conv_dist:
                    self.near_pairs.append((i, w, complex(delta), ci))
                    need_high.add(ci)
        self.need_high = need_high

    # -- contour evaluation of both fields

    def _evaluate_contours(self, batch_limit: int):
        # clusters that feed high Taylor orders get twice the nodes: order j
        # aliases like gamma^(Q - j), so Q must stay well ahead of the top order
        qs = [2 * self.q if ci in self.need_high else self.q for ci in range(len(self.clusters))]
        starts = np.concatenate([[0], np.cumsum(qs)])
        all_nodes = np.concatenate(
            [contour_nodes(cl.center, cl.radius, qs[ci]) for ci, cl in enumerate(self.clusters)]
        )
        npts = self.grid.npoints
        n = self.n
        samples = {"phi": np.empty((len(all_nodes), npts, n, n), dtype=complex),
                   "phis": np.empty((len(all_nodes), npts, n, n), dtype=complex)}
        for name, prob in (("phi", self.problem), ("phis", self.star)):
            order = np.argsort([step_count(prob, [la]) for la in all_nodes], kind="stable")
            for start in range(0, len(order), batch_limit):
                idx = order[start : start + batch_limit]
                samples[name][idx] = weyl_fields_two_point(
                    prob, all_nodes[idx], steps_per_unit=self.steps_per_unit)
        j0 = self.problem.J0
        j0_inv = self.problem.J0_inv
        self.tables = []
        for ci, cl in enumerate(self.clusters):
            sl = slice(starts[ci], starts[ci + 1])
            phi_orders = (-1, 0, 1, 2)
            if ci in self.need_high:
                phi_orders = tuple(range(-1, TAYLOR_ORDERS + 3))
            tab = {}
            for name, orders in (("phi", phi_orders), ("phis", (-1, 0))):
                co = laurent_from_samples(samples[name][sl], cl.radius, orders)
                tab[name] = co
            # principal parts via the exact residue identities: the raw
            # quadrature coefficient is noise on structurally zero columns
            nmat = self._cluster_residue(ci)
            nstar = -(j0 @ nmat @ j0_inv).T
            tab["phi"][-1] = tab["phi"][0] @ nmat
            tab["phis"][-1] = tab["phis"][0] @ nstar
            self.tables.append(tab)

    # -- exact x-derivative chains of the order -1 and 0 tables

    def _build_chains(self):
        depth = self.depth
        self.chains = []
        fgrids = {}
        for name, prob in (("phi", self.problem), ("phis", self.star)):
            ent = prob.F.on_grid()
            ders = [np.moveaxis(ent, -1, 0).astype(complex)]
            sp = spline(self.grid, ent)
            for j in range(1, depth):
                ders.append(np.moveaxis(sp.derivative(j)(self.grid.x), -1, 0).astype(complex))
            fgrids[name] = ders
        en1 = np.zeros((self.n, self.n))
        en1[self.n - 1, 0] = 1.0
        for ci, cl in enumerate(self.clusters):
            per = {}
            for name, prob in (("phi", self.problem), ("phis", self.star)):
                sgn = prob.lambda_sign
                lam_term = sgn * cl.center * en1
                fd = fgrids[name]
                cm1 = [self.tables[ci][name][-1]]
                c0 = [self.tables[ci][name][0]]
                for j in range(depth):
                    dm1 = _ode_derivative(cm1, fd, lam_term, en1, sgn, lower=None)
                    d0 = _ode_derivative(c0, fd, lam_term, en1, sgn, lower=cm1)
                    cm1.append(dm1)
                    c0.append(d0)
                per[name] = {-1: cm1, 0: c0}
            self.chains.append(per)

    # -- per-index arrays used by the assembler

    def _cluster_residue(self, ci: int) -> np.ndarray:
        """Residue data matrix of the model pole behind cluster ci (or zeros)."""
        n = self.n
        if not self.clusters[ci].is_pole:
            return np.zeros((n, n), dtype=complex)
        mats = []
        for i in self.clusters[ci].members:
            v = self.V[i]
            if v.eps == 1:
                mats.append(self.pair.model.datum(v.el, v.k).nmatrix(n))
        if not mats:
            # a target point sitting on a model pole outside the index set
            return np.zeros((n, n), dtype=complex)
        if any(np.max(np.abs(m - mats[0])) > 0 for m in mats[1:]):
            # distinct generic rows at a shared pole combine additively
            return np.sum(np.unique(np.array(mats), axis=0), axis=0)
        return mats[0]

    def _per_index_arrays(self):
        n, nv, npts = self.n, self.nv, self.grid.npoints
        depth = self.depth
        J = self.problem.J
        J0_inv = self.problem.J0_inv
        self.u = self.pair.nrows @ J0_inv                     # (V, n)
        self.a = np.empty((nv, npts, n), dtype=complex)
        # the double-pole prefactor u_v Phi*_<-1>^T J vanishes identically
        # (N^2 = 0), so only the simple-pole row a_v survives
        self.b = np.zeros((nv, npts, n), dtype=complex)
        self.h = {}
        for alpha in (-1, 0, 1, 2):
            self.h[alpha] = np.empty((nv, npts, n), dtype=complex)
        self.phisc = np.zeros((depth + 1, nv, npts), dtype=complex)
        self.etaraw = np.zeros((depth + 1, nv, npts), dtype=complex)
        self.eta_quasi = np.zeros((n, nv, npts), dtype=complex)
        for i, v in enumerate(self.V):
            ci = self.owner[i]
            tab = self.tables[ci]
            ch = self.chains[ci]
            col = v.k            # 0-based column k+1
            s0 = tab["phis"][0]
            self.a[i] = np.einsum("m,xjm,jk->xk", self.u[i], s0, J)
            for alpha in (-1, 0, 1, 2):
                self.h[alpha][i] = tab["phi"][alpha][:, :, col]
            for j in range(depth + 1):
                self.phisc[j, i] = ch["phi"][0][j][:, 0, col]
                self.etaraw[j, i] = np.einsum("m,xm->x", self.u[i], ch["phis"][0][j][:, 0, :])
            for j in range(n):
                self.eta_quasi[j, i] = np.einsum("m,xm->x", self.u[i], s0[:, j, :])

    # -- public views

    def eta(self, order: int = 0) -> np.ndarray:
        """Signed eta-tilde quasi-derivative of the given order; (V, M+1)."""
        return self.pair.signs[:, None] * self.eta_quasi[order]

    def model_phi(self, order: int = 0) -> np.ndarray:
        """Model field scalars (and x-derivatives) at the data points; (V, M+1)."""
        return self.phisc[order]

    def prow_at(self, lam: complex) -> np.ndarray:
        """P-tilde rows at a probe lambda: (V, M+1, n)."""
        phi_here = weyl_fields_two_point(self.problem, [lam])[0]   # (M+1, n, n)
        dl = lam - self.pair.lams                  # (V,)
        if np.any(np.abs(dl) < 1e3 * POLE_RTOL * (1.0 + abs(lam))):
            raise MainEquationError("probe lambda too close to a data point")
        pref = self.a / dl[:, None, None] + self.b / (dl ** 2)[:, None, None]
        return np.einsum("vxj,xjm->vxm", pref, phi_here)


def _ode_derivative(chain, fders, lam_term, en1, sgn, lower):
    """Next x-derivative of a Laurent-coefficient matrix via the system ODE.

    d^(j+1) Phi_<a> = sum_i C(j,i) F^(i) d^(j-i) Phi_<a>
                      + s lam0 E_n1 d^j Phi_<a> + s E_n1 d^j Phi_<a-1>.
    """
    j = len(chain) - 1
    total = None
    for i in range(min(j, len(fders) - 1) + 1):
        term = math.comb(j, i) * np.einsum("xij,xjk->xik", fders[i], chain[j - i])
        total = term if total is None else total + term
    total = total + np.einsum("ij,xjk->xik", lam_term, chain[j])
    if lower is not None:
        total = total + sgn * np.einsum("ij,xjk->xik", en1, lower[j])
    return total


# --- main equation assembly -----------------------------------------------------


@dataclass
class MainEquationSystem:
    """The dense truncated system at one grid node."""

    x: float
    indices: list
    psi_t: np.ndarray
    r_t: np.ndarray
    row_sum: float = 0.0
    residual: float = None


class MainEquationSolver:
    """Streaming assembler and solver of the main equation over the grid."""

    def __init__(self, bundle: FieldBundle, chunk: int = 64):
        self.bundle = bundle
        self.pair = bundle.pair
        self.grid = bundle.grid
        self.chunk = chunk
        self.depth = bundle.depth
        self._prepare_scalars()

    def _prepare_scalars(self):
        pair = self.pair
        n = pair.n
        V = pair.V
        nv = len(V)
        els = np.array([v.el for v in V])
        ks = np.array([v.k for v in V])
        self.eps = np.array([v.eps for v in V])
        p0 = pair.target.p0
        self.wexp = np.array([math.pi * el / math.tan(math.pi * k / n) for el, k in zip(els, ks)])
        self.wpow = np.array([float(el) ** (-p0[k]) for el, k in zip(els, ks)])
        self.xi_v = np.array([pair.xi_of(el) for el in els])
        self.theta_v = np.array([pair.theta_of(el) for el in els])
        lams = pair.lams
        self.delta = lams[None, :] - lams[:, None]      # delta[v, w] = lam_w - lam_v
        self.same = self.bundle.owner[None, :] == self.bundle.owner[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = np.where(self.same, 0.0, 1.0 / np.where(self.same, 1.0, self.delta))
        self.c1 = inv
        self.c2 = -(inv ** 2)
        self.nv = nv

    def weights(self, xs: np.ndarray) -> np.ndarray:
        """w_{l,k}(x) for every index; (V, len(xs))."""
        return self.wpow[:, None] * np.exp(-self.wexp[:, None] * xs[None, :])

    def g_chains(self, sl: slice) -> list:
        """G-tilde tensors (V, V, Xc) and their x-derivative chains on a chunk.

        Entries whose value sits below the cancellation floor of their own
        dot products are clipped to zero: those are the exponentially
        suppressed couplings whose true size is negligible, while the
        rounding residue would be re-amplified by the weight ratios.
        """
        b = self.bundle
        a = b.a[:, sl, :]
        out = []
        g0 = (
            self.c1[:, :, None] * np.einsum("vxn,wxn->vwx", a, b.h[0][:, sl, :])
            + self.c2[:, :, None] * np.einsum("vxn,wxn->vwx", a, b.h[-1][:, sl, :])
        )
        floor = CANCEL_FLOOR * (
            np.abs(self.c1)[:, :, None] * np.einsum("vxn,wxn->vwx", np.abs(a), np.abs(b.h[0][:, sl, :]))
            + np.abs(self.c2)[:, :, None] * np.einsum("vxn,wxn->vwx", np.abs(a), np.abs(b.h[-1][:, sl, :]))
        )
        g0[np.abs(g0) < floor] = 0.0
        same_pairs = np.argwhere(self.same)
        for v, w in same_pairs:
            g0[v, w] = np.einsum("xn,xn->x", a[v], b.h[1][w, sl, :])
        # pole-split form for near pairs: the exact simple pole in the data
        # coordinate plus the Taylor tail of the regular part
        for vi, wi, delta, ci in b.near_pairs:
            col = self.pair.V[wi].k
            tab = b.tables[ci]["phi"]
            acc = np.full(g0.shape[2], self.pair.nrows[vi][col] / delta, dtype=complex)
            dpow = 1.0
            top = max(o for o in tab if o >= 0)
            for m in range(0, top):
                gpart = np.einsum("xn,xn->x", a[vi], tab[m + 1][sl, :, col])
                acc += gpart * dpow
                dpow *= delta
            g0[vi, wi] = acc
        out.append(g0)
        for j in range(1, self.depth + 1):
            gj = None
            for i in range(j):
                term = math.comb(j - 1, i) * np.einsum(
                    "vx,wx->vwx", b.etaraw[i][:, sl], b.phisc[j - 1 - i][:, sl]
                )
                gj = term if gj is None else gj + term
            out.append(gj)
        return out

    def psi_t_chains(self, sl: slice, winv: np.ndarray) -> list:
        """psi-tilde chains on a chunk; (V, Xc) per order."""
        b = self.bundle
        nv = self.nv
        out = []
        phi0 = b.phisc[:, :, sl]       # (J+1, V, Xc)
        e0 = self.eps == 0
        e1 = self.eps == 1
        pairidx = _pair_partner(self.pair.V)
        for j in range(self.depth + 1):
            acc = np.zeros((nv, phi0.shape[2]), dtype=complex)
            for i in range(j + 1):
                fac = math.comb(j, i) * (self.wexp[:, None] ** i) * winv
                diff = phi0[j - i]
                # eps=0 rows: theta * (phi(eps0) - phi(eps1)); eps=1 rows: phi(eps1)
                part = np.where(
                    e0[:, None],
                    self.theta_v[:, None] * (diff - diff[pairidx]),
                    diff,
                )
                acc += fac * part
            out.append(acc)
        return out

    def r_t_chains(self, sl: slice, w: np.ndarray, gch: list) -> list:
        """R-tilde chains on a chunk; (V, V, Xc) per order, indexed [v0, v]."""
        tg = [self._transform(g) for g in gch]
        wr = w[None, :, :] / w[:, None, :]          # wr[v0, v, x] = w_v / w_v0
        dc = self.wexp[:, None] - self.wexp[None, :]   # (v0, v): c_v0 - c_v
        out = []
        for j in range(self.depth + 1):
            acc = np.zeros_like(tg[0])
            for i in range(j + 1):
                acc += math.comb(j, i) * (dc ** i)[:, :, None] * tg[j - i]
            out.append(acc * wr)
        return out

    def _transform(self, g: np.ndarray) -> np.ndarray:
        """2x2 eps-block transform from G[v, w] to the R layout [v0, v].

        With E[p, b, p0] = G[(p,b),(p0,0)] - G[(p,b),(p0,1)]:
          R[(p0,0),(p,0)] = theta_{l0} xi_l E[p,0,p0]
          R[(p0,0),(p,1)] = theta_{l0} (E[p,0,p0] - E[p,1,p0])
          R[(p0,1),(p,0)] = xi_l G[(p,0),(p0,1)]
          R[(p0,1),(p,1)] = G[(p,0),(p0,1)] - G[(p,1),(p0,1)]
        (the w_{l,k}/w_{l0,k0} prefactor is applied by the caller).
        """
        nv, _, xc = g.shape
        npair = nv // 2
        gv = g.reshape(npair, 2, npair, 2, xc)
        ediff = gv[:, :, :, 0, :] - gv[:, :, :, 1, :]        # [p, b, p0, x]
        theta0 = self.theta_v.reshape(npair, 2)[:, 0]
        xis = self.xi_v.reshape(npair, 2)[:, 0]
        e0 = ediff[:, 0].transpose(1, 0, 2)                  # [p0, p, x]
        e1 = ediff[:, 1].transpose(1, 0, 2)
        g01 = gv[:, 0, :, 1, :].transpose(1, 0, 2)
        g11 = gv[:, 1, :, 1, :].transpose(1, 0, 2)
        r = np.empty((npair, 2, npair, 2, xc), dtype=complex)
        r[:, 0, :, 0, :] = theta0[:, None, None] * xis[None, :, None] * e0
        r[:, 0, :, 1, :] = theta0[:, None, None] * (e0 - e1)
        r[:, 1, :, 0, :] = xis[None, :, None] * g01
        r[:, 1, :, 1, :] = g01 - g11
        return r.reshape(nv, nv, xc)

    # -- solving

    def solve_range(self, node_slice: slice = None, orders: int = None,
                    collect_rowsum: bool = False):
        """Solve the main equation (and derivative chains) on grid nodes.

        Returns a dict with ``psi`` (orders+1, V, X), ``phi`` (orders+1, V, X)
        recovered target field scalars, per-node residuals and diagnostics.
        """
        if node_slice is None:
            node_slice = slice(0, self.grid.npoints)
        if orders is None:
            orders = self.depth
        if orders > self.depth:
            raise MainEquationError(f"chain depth {self.depth} < requested orders {orders}")
        xs = self.grid.x[node_slice]
        nx = xs.shape[0]
        nv = self.nv
        psi = np.zeros((orders + 1, nv, nx), dtype=complex)
        residuals = np.zeros(nx)
        rowsums = np.zeros(nx)
        start_idx = node_slice.start or 0
        for cstart in range(0, nx, self.chunk):
            cs = slice(start_idx + cstart, start_idx + min(cstart + self.chunk, nx))
            local = slice(cstart, cstart + (cs.stop - cs.start))
            xs_c = self.grid.x[cs]
            w = self.weights(xs_c)
            winv = 1.0 / w
            gch = self.g_chains(cs)
            psit = self.psi_t_chains(cs, winv)
            rch = self.r_t_chains(cs, w, gch)
            for xi_local in range(xs_c.shape[0]):
                a_mat = np.eye(nv, dtype=complex) - rch[0][:, :, xi_local]
                lu, piv = lu_factor(a_mat)
                sol0 = _solve_refined(lu, piv, a_mat, psit[0][:, xi_local])
                rhs0 = psit[0][:, xi_local]
                sols = [sol0]
                for j in range(1, orders + 1):
                    rhs = psit[j][:, xi_local].copy()
                    for i in range(1, j + 1):
                        rhs += math.comb(j, i) * rch[i][:, :, xi_local] @ sols[j - i]
                    sols.append(_solve_refined(lu, piv, a_mat, rhs))
                for j in range(orders + 1):
                    psi[j, :, cstart + xi_local] = sols[j]
                resid = np.max(np.abs(a_mat @ sol0 - rhs0))
                residuals[cstart + xi_local] = resid
                if collect_rowsum:
                    rowsums[cstart + xi_local] = float(
                        np.max(np.sum(np.abs(rch[0][:, :, xi_local]), axis=1))
                    )
                tol = RESIDUAL_RTOL * (1.0 + float(np.max(np.abs(rhs0))))
                if resid > tol:
                    raise MainEquationError(
                        f"main-equation residual {resid:.3e} above {tol:.3e} at x={xs_c[xi_local]:.4f}"
                    )
        phi = self.phi_chains_from_psi(psi, xs)
        return {
            "x": xs, "psi": psi, "phi": phi,
            "residuals": residuals, "rowsums": rowsums,
        }

    def pair_fields(self, psi: np.ndarray, xs: np.ndarray) -> dict:
        """Recovered fields in pair-difference form, per (l, k) pair.

        Returns ``diff`` = chains of phi_{l,k,0} - phi_{l,k,1} (computed as
        w xi psi_0, which is accurate where the plain difference of the two
        recovered fields would cancel) and ``eps1`` = chains of phi_{l,k,1};
        both of shape (orders+1, P, X).  Everything the reconstruction series
        need is a bilinear combination of these with model-side quantities.
        """
        orders = psi.shape[0] - 1
        nv = self.nv
        w = self.weights(xs)
        acc = np.zeros((orders + 1, nv, xs.shape[0]), dtype=complex)
        for j in range(orders + 1):
            for i in range(j + 1):
                wfac = math.comb(j, i) * ((-self.wexp[:, None]) ** i) * w
                acc[j] += wfac * psi[j - i]
        diff = self.xi_v[0::2, None] * acc[:, 0::2, :]
        eps1 = acc[:, 1::2, :]
        return {"diff": diff, "eps1": eps1}

    def phi_chains_from_psi(self, psi: np.ndarray, xs: np.ndarray) -> np.ndarray:
        """Recovered phi_{l,k,eps} chains from psi chains (inverse transform)."""
        orders = psi.shape[0] - 1
        nv = self.nv
        pairidx = _pair_partner(self.pair.V)
        w = self.weights(xs)
        e0 = (self.eps == 0)[:, None]
        phi = np.zeros_like(psi)
        for j in range(orders + 1):
            acc = np.zeros((nv, xs.shape[0]), dtype=complex)
            for i in range(j + 1):
                wfac = math.comb(j, i) * ((-self.wexp[:, None]) ** i) * w
                base = psi[j - i]
                inner = np.where(e0, self.xi_v[:, None] * base + base[pairidx], base)
                acc += wfac * inner
            phi[j] = acc
        return phi

    def assemble_at(self, node: int) -> MainEquationSystem:
        """The spec-level system object at a single grid node."""
        cs = slice(node, node + 1)
        xs = self.grid.x[cs]
        w = self.weights(xs)
        gch = self.g_chains(cs)
        psit = self.psi_t_chains(cs, 1.0 / w)
        rch = self.r_t_chains(cs, w, gch)
        r0 = rch[0][:, :, 0]
        return MainEquationSystem(
            x=float(xs[0]), indices=list(self.pair.V),
            psi_t=psit[0][:, 0], r_t=r0,
            row_sum=float(np.max(np.sum(np.abs(r0), axis=1))),
        )


def _solve_refined(lu, piv, a_mat, rhs):
    """LU solve with one step of iterative refinement."""
    x = lu_solve((lu, piv), rhs)
    x += lu_solve((lu, piv), rhs - a_mat @ x)
    return x


def _pair_partner(V: list) -> np.ndarray:
    """Index of the (l, k, 1-eps) partner for every v."""
    pos = {(v.el, v.k, v.eps): i for i, v in enumerate(V)}
    return np.array([pos[(v.el, v.k, 1 - v.eps)] for v in V])


def solve_main_equation(system: MainEquationSystem) -> np.ndarray:
    """Dense solve of (I - R~) psi = psi~ with the residual contract."""
    nv = system.psi_t.shape[0]
    a_mat = np.eye(nv, dtype=complex) - system.r_t
    lu, piv = lu_factor(a_mat)
    psi = _solve_refined(lu, piv, a_mat, system.psi_t)
    resid = float(np.max(np.abs(a_mat @ psi - system.psi_t)))
    system.residual = resid
    tol = RESIDUAL_RTOL * (1.0 + float(np.max(np.abs(system.psi_t))))
    if resid > tol:
        raise MainEquationError(f"residual {resid:.3e} exceeds {tol:.3e} at x={system.x}")
    return psi


def recover_phi(psi_pairs: np.ndarray, xi: float, w: float) -> np.ndarray:
    """(phi_0, phi_1) = w [[xi, 1], [0, 1]] (psi_0, psi_1) for one (l, k)."""
    psi_pairs = np.asarray(psi_pairs)
    return np.stack(
        [w * (xi * psi_pairs[..., 0] + psi_pairs[..., 1]), w * psi_pairs[..., 1]],
        axis=-1,
    )


def synthesize_weyl(bundle: FieldBundle, phi0: np.ndarray, lam: complex) -> dict:
    """First-row field at a probe lambda from recovered phi scalars.

    phi(x, lam) = phi~(x, lam) + sum_v (-1)^eps phi_v(x) P~_v(x, lam), with a
    truncation-tail estimate from the last level block.
    """
    prows = bundle.prow_at(lam)                      # (V, M+1, n)
    base = weyl_fields_two_point(bundle.problem, [lam])[0][:, 0, :]   # (M+1, n)
    signs = bundle.pair.signs
    terms = signs[:, None, None] * phi0[:, :, None] * prows
    total = base + np.sum(terms, axis=0)
    last_el = max(v.el for v in bundle.pair.V)
    tail_mask = np.array([v.el == last_el for v in bundle.pair.V])
    tail = float(np.max(np.abs(np.sum(terms[tail_mask], axis=0))))
    return {"phi": total, "tail_estimate": tail}


def structural_g(bundle: FieldBundle, vi: int, wi: int, node: int) -> complex:
    """Single G-tilde value (slow path); vi, wi index the bundle's V list."""
    solver_like = MainEquationSolver(bundle, chunk=1)
    g = solver_like.g_chains(slice(node, node + 1))[0]
    return complex(g[vi, wi, 0])
