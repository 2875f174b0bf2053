"""Reconstruction series for the supported coefficient classes.

Every recovered coefficient is a finite sum over the data indices of
bilinear terms in the recovered fields and the model-side eta functions.
The sums are evaluated with the eps-pairs fused, in pair-difference form:
each pair contributes  D^[a] eta0^[b] + E^[a] (eta0 - eta1)^[b]  where
D = phi_(eps=0) - phi_(eps=1) comes straight from the solved sequence
variables and the eta difference is model-side arithmetic, so the pair
cancellation costs no precision.

Quasi-derivatives of the recovered fields are formed from the exact
ordinary-derivative chains by the class's quasi-derivative recursion; at the
orders each step needs, the recursion uses only coefficient values recovered
in previous steps (derivatives of recovered coefficients enter only for
n >= 6 at the last steps, where spline differentiation is used).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import make_smoothing_spline

from .forward import SpectralDataSet, assemble_spectral_data, fit_mean_tau1_n3
from .grids import UniformGrid, spline_derivative
from .inverse import DataPair, FieldBundle, MainEquationSolver
from .operators import (
    CLASS_DISTRIBUTIONAL_EVEN,
    CLASS_N3_MIXED,
    CLASS_REGULAR_EVEN,
    CoefficientSet,
    ValidationError,
    associated_matrix,
    build_problem,
)

TAIL_WARN = 0.2    # last-level block norm relative to the series norm


@dataclass
class SeriesTerm:
    """One eps-fused pair term of a reconstruction series."""

    el: int
    k: int
    values: np.ndarray           # fused pair contribution on the grid
    regularization: complex = 0.0


@dataclass
class SeriesResult:
    values: np.ndarray
    tail_norm: float
    warn: bool
    terms: list = field(default_factory=list)


def assemble_series(pairV, contributions) -> SeriesResult:
    """Sum eps-fused pair contributions in level order with a tail diagnostic.

    ``contributions`` has shape (P, X): one fused term per (l, k) pair.
    """
    pairs = pairV[0::2]
    total = np.sum(contributions, axis=0)
    last_el = max(v.el for v in pairs)
    mask = np.array([v.el == last_el for v in pairs])
    tail = float(np.max(np.abs(np.sum(contributions[mask], axis=0))))
    scale = float(np.max(np.abs(total))) or 1.0
    terms = [
        SeriesTerm(el=v.el, k=v.k, values=contributions[i])
        for i, v in enumerate(pairs)
    ]
    return SeriesResult(values=total, tail_norm=tail, warn=tail > TAIL_WARN * scale, terms=terms)


# --- one model pass of the main equation -------------------------------------


class InversionPass:
    """Solve the main equation against one model problem and keep the chains."""

    def __init__(self, target_data: SpectralDataSet, model_coeffs: CoefficientSet,
                 trunc: int, depth: int, q: int = 32, levels: int = None):
        self.model_coeffs = model_coeffs
        self.model = build_problem(model_coeffs)
        levels = levels or min(target_data.levels, trunc)
        self.model_data = assemble_spectral_data(self.model, max(trunc, levels))
        self.pair = DataPair(target=target_data, model=self.model_data, trunc=trunc)
        self.bundle = FieldBundle(self.model, self.pair, chain_depth=depth, q=q)
        self.solver = MainEquationSolver(self.bundle)
        self.out = self.solver.solve_range(orders=depth)
        xs = self.model.grid.x
        pf = self.solver.pair_fields(self.out["psi"], xs)
        self.diff = pf["diff"]           # (depth+1, P, X)
        self.eps1 = pf["eps1"]
        self.grid = self.model.grid

    def eta_pair(self, order: int):
        """(eta0^[order], eta0^[order] - eta1^[order]) per pair, unsigned raw."""
        eta = self.bundle.eta_quasi[order]
        return eta[0::2], eta[0::2] - eta[1::2]

    def series(self, combos) -> SeriesResult:
        """Sum of c * phi^[a] eta^[b] terms over V, pair-fused.

        ``combos``: iterable of (a, b, c) with a the quasi-order of the
        recovered field, b the quasi-order of eta, and c a scalar factor.
        """
        contrib = None
        for a, b, c in combos:
            e0, ed = self.eta_pair(b)
            da = self.quasi_diff[a]
            ea = self.quasi_eps1[a]
            t = c * (da * e0 + ea * ed)
            contrib = t if contrib is None else contrib + t
        return assemble_series(self.pair.V, contrib)

    def convert_quasi(self, known_coeffs: dict, klass: str, orders: int):
        """Populate quasi-derivative pair chains up to the given order."""
        conv = quasi_conversion(self.grid, klass, self.pair.n, known_coeffs, orders)
        npair = self.diff.shape[1]
        xlen = self.diff.shape[2]
        self.quasi_diff = np.zeros((orders + 1, npair, xlen), dtype=complex)
        self.quasi_eps1 = np.zeros((orders + 1, npair, xlen), dtype=complex)
        for j in range(orders + 1):
            for i, cji in enumerate(conv[j]):
                if cji is None:
                    continue
                self.quasi_diff[j] += cji[None, :] * self.diff[i]
                self.quasi_eps1[j] += cji[None, :] * self.eps1[i]


def quasi_conversion(grid: UniformGrid, klass: str, n: int, known_coeffs: dict,
                     orders: int) -> list:
    """Coefficients c[j][i](x) with  y^[j] = sum_i c[j][i] y^(i).

    Built from the quasi-derivative recursion of the class's associated
    matrix, using only the coefficients in ``known_coeffs`` (others zero;
    the class structure guarantees rows up to ``orders`` never touch them).
    """
    zero = np.zeros(grid.npoints)
    full = {}
    from .operators import coefficient_names

    for name in coefficient_names(klass, n):
        full[name] = np.asarray(known_coeffs.get(name, zero), dtype=float)
    coeffs = CoefficientSet(n=n, klass=klass, grid=grid, values=full)
    fmat = associated_matrix(coeffs).on_grid()
    # rows above `orders` may involve unknown coefficients; they are not used
    conv = [[None] * (orders + 1) for _ in range(orders + 1)]
    conv[0][0] = np.ones(grid.npoints)
    for j in range(1, orders + 1):
        prev = conv[j - 1]
        new = [None] * (orders + 1)
        for i in range(orders + 1):
            acc = None
            if i >= 1 and prev[i - 1] is not None:
                acc = prev[i - 1].copy()
            if prev[i] is not None and np.any(prev[i] != prev[i][0]):
                d = spline_derivative(grid, prev[i])
                acc = d if acc is None else acc + d
            for m in range(1, j + 1):
                frow = fmat[j - 1, m - 1]
                cm = conv[m - 1][i]
                if cm is None or not np.any(frow):
                    continue
                term = -frow * cm
                acc = term if acc is None else acc + term
            new[i] = acc
        conv[j] = new
    return conv


def rec_even_combos(n: int, s: int) -> list:
    """(a, b, c) term list of the even-order step-s reconstruction sum."""
    combos = []
    for r in range(n - s, n + 1):
        combos.append((n - r, r - n + s, float(math.comb(n, r) * math.comb(r - 1, n - s - 1))))
    combos.append((0, s, float((-1.0) ** (s + 1))))
    check = sum(
        math.comb(n, r) * math.comb(r - 1, n - s - 1) * (-1) ** r for r in range(n - s, n + 1)
    ) + (-1) ** (s + 1)
    if n % 2 == 0 and check != 0:
        raise ValidationError(f"binomial identity failed for n={n}, s={s}")
    return combos


def rec2_b_coefficients(n: int, s: int) -> list:
    """b_j coefficients of the antiderivative form of the distributional step."""
    a = []
    for j in range(s + 1):
        val = math.comb(n, s - j) * math.comb(n - s + j - 1, j)
        if j == s:
            val += (-1) ** (s + 1)
        a.append(val)
    if sum(a) != 0:
        raise ValidationError(f"sum of a_j must vanish (n={n}, s={s})")
    b = []
    for j in range(s):
        b.append(float(sum((-1) ** (j - i) * a[i] for i in range(j + 1))))
    return b


def smooth_extend(grid: UniformGrid, values: np.ndarray, layer: float,
                  mean_target: float = None) -> np.ndarray:
    """Smoothing-spline fit on the interior window, held flat in the layers."""
    xs = grid.x
    lo = int(np.searchsorted(xs, layer))
    hi = int(np.searchsorted(xs, 1.0 - layer))
    sp = make_smoothing_spline(xs[lo:hi], np.real(values[lo:hi]))
    out = sp(xs)
    out[:lo] = out[lo]
    out[hi:] = out[hi - 1]
    if mean_target is not None:
        out = out - float(grid.mean(out)) + mean_target
    return out


# --- class drivers -------------------------------------------------------------


def invert_n3(target_data: SpectralDataSet, grid: UniformGrid, trunc: int,
              passes: int = 2, mean_tau1: float = None, q: int = 32) -> dict:
    """Recover (tau1, sigma0) of the third-order mixed class.

    Pass 1 uses the constant model prescribed for this class; later passes
    rebuild the model from the smoothed previous output with the coefficient
    mean pinned to the asymptotic fit.
    """
    if target_data.n != 3:
        raise ValidationError("n=3 driver needs third-order data")
    if mean_tau1 is None:
        mean_tau1 = target_data.meta.get("coefficient_means", {}).get("tau1")
    if mean_tau1 is None:
        mean_tau1 = fit_mean_tau1_n3(target_data, el_lo=max(3, target_data.levels // 2))
    npts = grid.npoints
    model_tau1 = np.full(npts, mean_tau1)
    model_sig0 = np.zeros(npts)
    report = {"passes": [], "mean_tau1": float(mean_tau1)}
    layer = 1.5 / max(trunc, 2)
    tau1 = sig0 = None
    for p in range(passes):
        mc = CoefficientSet(3, CLASS_N3_MIXED, grid,
                            {"tau1": model_tau1.copy(), "sigma0": model_sig0.copy()})
        run = InversionPass(target_data, mc, trunc, depth=1, q=q)
        run.convert_quasi({"tau1": mc.coefficient("tau1"), "sigma0": mc.coefficient("sigma0")},
                          CLASS_N3_MIXED, 1)
        s_pp = run.series([(1, 0, 1.0), (0, 1, 1.0)])
        tau1 = np.real(mc.coefficient("tau1") - 1.5 * s_pp.values)
        hat = tau1 - mc.coefficient("tau1")
        s10 = run.series([(1, 0, 1.0)])
        s00 = run.series([(0, 0, 1.0)])
        sig0 = mc.coefficient("sigma0") - hat - 3.0 * np.real(s10.values) \
            - 2.0 * grid.antiderivative(hat * np.real(s00.values))
        sig0 = np.real(sig0 - grid.mean(sig0))
        report["passes"].append({
            "residual_max": float(run.out["residuals"].max()),
            "xi_max": float(run.pair.xi_seq.xi.max()),
            "tail_tau1": s_pp.tail_norm,
            "warnings": list(run.pair.warnings),
        })
        if p + 1 < passes:
            model_tau1 = smooth_extend(grid, tau1, layer, mean_target=mean_tau1)
            model_sig0 = smooth_extend(grid, sig0, layer, mean_target=0.0)
    return {"tau1": tau1, "sigma0": sig0, "report": report}


def _even_means(target_data: SpectralDataSet, n: int, means: dict = None) -> dict:
    out = dict(target_data.meta.get("coefficient_means", {}))
    if means:
        out.update(means)
    missing = [nu for nu in range(n - 1) if f"tau{nu}" not in out]
    if missing:
        raise ValidationError(
            f"means of tau{missing} are needed for the even-order models; supply them "
            "in the data metadata or the means argument"
        )
    return out


def invert_even_regular(target_data: SpectralDataSet, grid: UniformGrid, trunc: int,
                        means: dict = None, passes: int = 2, q: int = 32) -> dict:
    """Step-by-step recovery of tau_{n-2} .. tau_0 for the even integrable class."""
    n = target_data.n
    if n % 2:
        raise ValidationError("even-order driver needs even n")
    means = _even_means(target_data, n, means)
    npts = grid.npoints
    recovered = {}
    report = {"steps": [], "passes": []}
    layer = 1.5 / max(trunc, 2)

    # pass 1: the prescribed stepwise models
    for s in range(1, n):
        nu = n - s - 1
        model_vals = {}
        for m in range(n - 1):
            if m >= n - s:
                model_vals[f"tau{m}"] = np.real(recovered[f"tau{m}"]).copy()
            elif m == nu:
                model_vals[f"tau{m}"] = np.full(npts, means[f"tau{m}"])
            else:
                model_vals[f"tau{m}"] = np.zeros(npts)
        mc = CoefficientSet(n, CLASS_REGULAR_EVEN, grid, model_vals)
        run = InversionPass(target_data, mc, trunc, depth=s, q=q)
        run.convert_quasi({k: v for k, v in model_vals.items() if k != f"tau{nu}"} |
                          {f"tau{nu}": np.zeros(npts)}, CLASS_REGULAR_EVEN, s)
        ser = run.series(rec_even_combos(n, s))
        half = 0.5 if s % 2 == 0 else 1.0
        recovered[f"tau{nu}"] = np.real(mc.coefficient(f"tau{nu}") - half * ser.values)
        report["steps"].append({
            "s": s, "coefficient": f"tau{nu}",
            "residual_max": float(run.out["residuals"].max()),
            "tail": ser.tail_norm, "tail_warn": ser.warn,
            "xi_max": float(run.pair.xi_seq.xi.max()),
        })

    # refinement passes: one full model per pass, all step formulas reapplied
    for p in range(1, passes):
        model_vals = {
            f"tau{m}": smooth_extend(grid, recovered[f"tau{m}"], layer,
                                     mean_target=means[f"tau{m}"])
            for m in range(n - 1)
        }
        mc = CoefficientSet(n, CLASS_REGULAR_EVEN, grid, model_vals)
        run = InversionPass(target_data, mc, trunc, depth=n - 1, q=q)
        newrec = {}
        for s in range(1, n):
            nu = n - s - 1
            known = {k: np.real(v) for k, v in (model_vals | newrec).items()}
            run.convert_quasi(known, CLASS_REGULAR_EVEN, s)
            ser = run.series(rec_even_combos(n, s))
            half = 0.5 if s % 2 == 0 else 1.0
            newrec[f"tau{nu}"] = np.real(mc.coefficient(f"tau{nu}") - half * ser.values)
        recovered = newrec
        report["passes"].append({
            "residual_max": float(run.out["residuals"].max()),
            "xi_max": float(run.pair.xi_seq.xi.max()),
        })
    return {**recovered, "report": report}


def invert_even_distributional(target_data: SpectralDataSet, grid: UniformGrid,
                               trunc: int, passes: int = 2, q: int = 32) -> dict:
    """Step-by-step recovery of sigma_{n-2} .. sigma_0 (antiderivative form)."""
    n = target_data.n
    if n % 2:
        raise ValidationError("even-order driver needs even n")
    npts = grid.npoints
    recovered = {}
    report = {"steps": [], "passes": []}
    layer = 1.5 / max(trunc, 2)

    for s in range(1, n):
        nu = n - s - 1
        model_vals = {}
        for m in range(n - 1):
            if m >= n - s:
                model_vals[f"sigma{m}"] = np.real(recovered[f"sigma{m}"]).copy()
            else:
                model_vals[f"sigma{m}"] = np.zeros(npts)
        mc = CoefficientSet(n, CLASS_DISTRIBUTIONAL_EVEN, grid, model_vals)
        run = InversionPass(target_data, mc, trunc, depth=max(s - 1, 1), q=q)
        run.convert_quasi(model_vals, CLASS_DISTRIBUTIONAL_EVEN, max(s - 1, 1))
        bcoef = rec2_b_coefficients(n, s)
        combos = [(s - j - 1, j, bj) for j, bj in enumerate(bcoef)]
        ser = run.series(combos)
        half = 0.5 if s % 2 == 0 else 1.0
        sig = mc.coefficient(f"sigma{nu}") - half * np.real(ser.values)
        recovered[f"sigma{nu}"] = np.real(sig - grid.mean(sig))
        report["steps"].append({
            "s": s, "coefficient": f"sigma{nu}",
            "residual_max": float(run.out["residuals"].max()),
            "tail": ser.tail_norm, "tail_warn": ser.warn,
            "xi_max": float(run.pair.xi_seq.xi.max()),
        })

    for p in range(1, passes):
        model_vals = {
            f"sigma{m}": smooth_extend(grid, recovered[f"sigma{m}"], layer, mean_target=0.0)
            for m in range(n - 1)
        }
        mc = CoefficientSet(n, CLASS_DISTRIBUTIONAL_EVEN, grid, model_vals)
        run = InversionPass(target_data, mc, trunc, depth=n - 2, q=q)
        newrec = {}
        for s in range(1, n):
            nu = n - s - 1
            run.convert_quasi(model_vals, CLASS_DISTRIBUTIONAL_EVEN, max(s - 1, 1))
            bcoef = rec2_b_coefficients(n, s)
            combos = [(s - j - 1, j, bj) for j, bj in enumerate(bcoef)]
            ser = run.series(combos)
            half = 0.5 if s % 2 == 0 else 1.0
            sig = mc.coefficient(f"sigma{nu}") - half * np.real(ser.values)
            newrec[f"sigma{nu}"] = np.real(sig - grid.mean(sig))
        recovered = newrec
        report["passes"].append({
            "residual_max": float(run.out["residuals"].max()),
            "xi_max": float(run.pair.xi_seq.xi.max()),
        })
    return {**recovered, "report": report}


# --- classical-form coefficients (testing aid) ---------------------------------


def p_from_tau(coeffs: CoefficientSet) -> dict:
    """Coefficients p_s of the expanded form y^(n) + sum p_s y^(s) on the grid.

    Only meaningful for smooth samples; derivatives are spline-based.
    """
    n = coeffs.n
    grid = coeffs.grid
    if coeffs.klass != CLASS_REGULAR_EVEN:
        raise ValidationError("expanded-form coefficients need integrable tau samples")

    def tau(nu):
        if nu >= n - 1:
            return np.zeros(grid.npoints)
        return coeffs.coefficient(f"tau{nu}")

    def dtau(nu, order):
        return spline_derivative(grid, tau(nu), order) if order else tau(nu)

    out = {}
    for s in range(0, n - 1):
        acc = np.zeros(grid.npoints)
        for k in range(math.ceil(s / 2), min(s, n // 2 - 1) + 1):
            acc = acc + math.comb(k, s - k) * (dtau(2 * k, 2 * k - s) + dtau(2 * k + 1, 2 * k - s + 1))
        for k in range(math.ceil((s - 1) / 2), min(s, (n - 1) // 2) - 1 + 1):
            acc = acc + 2 * math.comb(k, s - k - 1) * dtau(2 * k + 1, 2 * k + 1 - s)
        out[s] = acc
    return out


def series_t(run: InversionPass, j1: int, j2: int) -> SeriesResult:
    """Plain T_{j1,j2} series (quasi-derivative orders), pair-fused."""
    return run.series([(j1, j2, 1.0)])


def t_ks(run: InversionPass, k: int, s: int) -> np.ndarray:
    """Mixed coefficient sums t_{k,s} built from the T series."""
    acc = np.zeros(run.grid.npoints, dtype=complex)
    for r in range(s, k):
        acc += math.comb(k, r + 1) * math.comb(r, s) * series_t(run, k - r - 1, r - s).values
    return acc


def findp(run: InversionPass, known_p: dict = None) -> dict:
    """General expanded-form recovery p_s (zero model), for cross-checks."""
    n = run.pair.n
    ps = dict(known_p or {})
    for s in range(n - 2, -1, -1):
        lead = run.series([(0, n - s - 1, 1.0)]).values * (-1.0) ** (n - s - 1)
        val = lead - t_ks(run, n, s)
        for k in range(s + 1, n - 1):
            val = val - ps[k] * t_ks(run, k, s)
        ps[s] = np.real(val)
    return ps
