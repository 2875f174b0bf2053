"""Domain types for differential expressions in first-order-system form.

A differential expression of order n is represented by an associated matrix
F(x): the n x n sampled matrix of the system Y' = (F + Lambda) Y whose rows
define the quasi-derivatives.  The structural class Fn requires

    f[k, j] == 0 for k + 1 < j,   f[k, k+1] == 1,   trace F(x) == 0.

Boundary conditions enter through matrices U_0, U_1 whose row s has a unit
leading entry in column p[s] + 1 and free entries to the left of it.  Each
problem carries the signed anti-diagonal matrices J, J_0, J_1 and the dual
exponents used by the adjoint (star) constructs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grids import UniformGrid, eval_tokens, spline

FN_TOL = 1e-12

CLASS_SCHRODINGER_N2 = "schrodinger-n2"
CLASS_N3_MIXED = "n3-mixed"
CLASS_REGULAR_EVEN = "regular-even"
CLASS_DISTRIBUTIONAL_EVEN = "distributional-even"

COEFFICIENT_CLASSES = (
    CLASS_SCHRODINGER_N2,
    CLASS_N3_MIXED,
    CLASS_REGULAR_EVEN,
    CLASS_DISTRIBUTIONAL_EVEN,
)


class ValidationError(ValueError):
    """Raised when a domain object violates its structural invariants."""


def coefficient_names(klass: str, n: int) -> tuple[str, ...]:
    if klass == CLASS_SCHRODINGER_N2:
        return ("sigma0",)
    if klass == CLASS_N3_MIXED:
        return ("tau1", "sigma0")
    if klass == CLASS_REGULAR_EVEN:
        return tuple(f"tau{nu}" for nu in range(n - 1))
    if klass == CLASS_DISTRIBUTIONAL_EVEN:
        return tuple(f"sigma{nu}" for nu in range(n - 1))
    raise ValidationError(f"unknown coefficient class {klass!r}")


def _antiderivative_names(klass: str, n: int) -> tuple[str, ...]:
    """Names of stored antiderivatives that carry the zero-mean convention."""
    if klass in (CLASS_SCHRODINGER_N2, CLASS_N3_MIXED):
        return ("sigma0",)
    if klass == CLASS_DISTRIBUTIONAL_EVEN:
        return tuple(f"sigma{nu}" for nu in range(n - 1))
    return ()


@dataclass
class CoefficientSet:
    """Sampled coefficient functions of one differential expression.

    ``values`` maps coefficient names (``tau1``, ``sigma0``, ...) to sample
    arrays on ``grid``.  Stored antiderivatives are mean-normalized on
    construction; the subtracted constants are recorded in ``metadata``.
    """

    n: int
    klass: str
    grid: UniformGrid
    values: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.klass not in COEFFICIENT_CLASSES:
            raise ValidationError(f"unknown coefficient class {self.klass!r}")
        if self.n < 2:
            raise ValidationError("order n must be at least 2")
        if self.klass == CLASS_SCHRODINGER_N2 and self.n != 2:
            raise ValidationError("schrodinger-n2 requires n = 2")
        if self.klass == CLASS_N3_MIXED and self.n != 3:
            raise ValidationError("n3-mixed requires n = 3")
        if self.klass in (CLASS_REGULAR_EVEN, CLASS_DISTRIBUTIONAL_EVEN) and self.n % 2:
            raise ValidationError(f"{self.klass} requires even n, got {self.n}")
        names = coefficient_names(self.klass, self.n)
        if set(self.values) != set(names):
            raise ValidationError(
                f"class {self.klass} with n={self.n} needs coefficients {names}, "
                f"got {tuple(sorted(self.values))}"
            )
        npts = self.grid.npoints
        clean = {}
        for name in names:
            arr = np.asarray(self.values[name], dtype=float)
            if arr.shape != (npts,):
                raise ValidationError(
                    f"coefficient {name}: expected {npts} samples, got shape {arr.shape}"
                )
            clean[name] = arr
        self.values = clean
        subtracted = self.metadata.setdefault("subtracted_means", {})
        for name in _antiderivative_names(self.klass, self.n):
            mean = float(self.grid.mean(self.values[name]))
            if abs(mean) > 0.0:
                self.values[name] = self.values[name] - mean
            subtracted[name] = subtracted.get(name, 0.0) + mean

    def coefficient(self, name: str) -> np.ndarray:
        return self.values[name]


def coefficients_from_specs(n, klass, grid, specs, metadata=None) -> CoefficientSet:
    """Build a CoefficientSet from sample arrays and/or token expressions.

    ``specs`` maps coefficient names to either
    ``{"kind": "samples", "data": [...]}`` or
    ``{"kind": "expr", "tokens": [...]}``.
    """
    values = {}
    for name in coefficient_names(klass, n):
        if name not in specs:
            raise ValidationError(f"missing coefficient {name!r}")
        entry = specs[name]
        kind = entry.get("kind", "samples")
        if kind == "samples":
            values[name] = np.asarray(entry["data"], dtype=float)
        elif kind == "expr":
            values[name] = eval_tokens(entry["tokens"], grid.x)
        else:
            raise ValidationError(f"coefficient {name}: unknown kind {kind!r}")
    return CoefficientSet(n=n, klass=klass, grid=grid, values=values, metadata=metadata or {})


# --- associated matrices -----------------------------------------------------


@dataclass
class AssociatedMatrix:
    """Grid-sampled n x n matrix of class Fn.

    ``entries`` has shape (n, n, M+1).  ``is_zero``/``is_one`` record which
    entries are structurally 0 or 1.
    """

    n: int
    grid: UniformGrid
    entries: np.ndarray
    is_zero: np.ndarray = None
    is_one: np.ndarray = None

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=float)
        n, npts = self.n, self.grid.npoints
        if self.entries.shape != (n, n, npts):
            raise ValidationError(f"entries must have shape {(n, n, npts)}")
        if self.is_zero is None:
            self.is_zero = np.all(self.entries == 0.0, axis=-1)
        if self.is_one is None:
            self.is_one = np.all(self.entries == 1.0, axis=-1)
        self.validate()
        self._spline = spline(self.grid, self.entries)

    def validate(self):
        n = self.n
        for i in range(n):
            for j in range(i + 2, n):
                if np.any(self.entries[i, j] != 0.0):
                    raise ValidationError(f"entry ({i + 1},{j + 1}) above the superdiagonal is nonzero")
        for i in range(n - 1):
            if np.any(np.abs(self.entries[i, i + 1] - 1.0) > 0.0):
                raise ValidationError(f"superdiagonal entry ({i + 1},{i + 2}) is not identically 1")
        trace = np.einsum("iix->x", self.entries)
        worst = np.max(np.abs(trace))
        if worst > FN_TOL:
            raise ValidationError(f"trace(F) reaches {worst:.3e}, exceeds {FN_TOL}")

    def at(self, x) -> np.ndarray:
        """Entries evaluated at arbitrary points; shape (n, n, len(x))."""
        return self._spline(np.asarray(x))

    def on_grid(self) -> np.ndarray:
        return self.entries


def associated_matrix(coeffs: CoefficientSet) -> AssociatedMatrix:
    """Associated matrix of the differential expression for each class."""
    n, grid = coeffs.n, coeffs.grid
    npts = grid.npoints
    F = np.zeros((n, n, npts))
    for i in range(n - 1):
        F[i, i + 1] = 1.0

    if coeffs.klass == CLASS_SCHRODINGER_N2:
        s0 = coeffs.coefficient("sigma0")
        F[0, 0] = s0
        F[1, 0] = -(s0**2)
        F[1, 1] = -s0
    elif coeffs.klass == CLASS_N3_MIXED:
        t1 = coeffs.coefficient("tau1")
        s0 = coeffs.coefficient("sigma0")
        F[1, 0] = -(s0 + t1)
        F[2, 1] = s0 - t1
    elif coeffs.klass == CLASS_REGULAR_EVEN:
        m = n // 2
        for k in range(m):
            F[n - 1 - k, k] = -coeffs.coefficient(f"tau{2 * k}")
        for k in range(m - 1):
            F[n - 2 - k, k] = -coeffs.coefficient(f"tau{2 * k + 1}")
            F[n - 1 - k, k + 1] = -coeffs.coefficient(f"tau{2 * k + 1}")
    elif coeffs.klass == CLASS_DISTRIBUTIONAL_EVEN:
        m = n // 2
        q = _distributional_q(coeffs)
        for j in range(1, m + 1):
            F[m - 1, j - 1] = (-1.0) ** (m + 1) * q[j - 1, m]
        for k in range(m + 1, 2 * m + 1):
            F[k - 1, m] = (-1.0) ** (k + 1) * q[m, 2 * m - k]
            for j in range(1, m + 1):
                F[k - 1, j - 1] = (-1.0) ** (k + 1) * q[j - 1, 2 * m - k] + (
                    -1.0
                ) ** (m + k) * q[j - 1, m] * q[m, 2 * m - k]
    else:  # pragma: no cover - guarded by CoefficientSet
        raise ValidationError(f"unsupported class {coeffs.klass!r}")

    return AssociatedMatrix(n=n, grid=grid, entries=F)


def _distributional_q(coeffs: CoefficientSet) -> np.ndarray:
    """Symmetrized antiderivative matrix Q(x); shape (m+1, m+1, M+1)."""
    n = coeffs.n
    m = n // 2
    q = np.zeros((m + 1, m + 1, coeffs.grid.npoints))
    for nu in range(n - 1):
        sign = (-1.0) ** (((nu - 1) // 2) % 2)
        s = coeffs.coefficient(f"sigma{nu}")
        if nu % 2 == 0:
            k = nu // 2
            q[k, k + 1] += sign * s
            q[k + 1, k] += sign * s
        else:
            k = (nu - 1) // 2
            q[k, k + 2] += sign * s
            q[k + 2, k] -= sign * s
    return q


# --- boundary configuration --------------------------------------------------


def _default_u(n: int, p: np.ndarray) -> np.ndarray:
    u = np.zeros((n, n))
    u[np.arange(n), p] = 1.0
    return u


@dataclass
class BoundaryConfig:
    """Boundary-form matrices U_0, U_1 with their exponent permutations."""

    n: int
    p0: tuple
    p1: tuple
    u0: np.ndarray = None
    u1: np.ndarray = None

    def __post_init__(self):
        self.p0 = tuple(int(p) for p in self.p0)
        self.p1 = tuple(int(p) for p in self.p1)
        for a, p in ((0, self.p0), (1, self.p1)):
            if sorted(p) != list(range(self.n)):
                raise ValidationError(f"p[{a}] = {p} is not a permutation of 0..{self.n - 1}")
        if self.u0 is None:
            self.u0 = _default_u(self.n, np.asarray(self.p0))
        if self.u1 is None:
            self.u1 = _default_u(self.n, np.asarray(self.p1))
        self.u0 = np.asarray(self.u0, dtype=complex)
        self.u1 = np.asarray(self.u1, dtype=complex)
        for a, (u, p) in enumerate(((self.u0, self.p0), (self.u1, self.p1))):
            if u.shape != (self.n, self.n):
                raise ValidationError(f"U_{a} must be {self.n} x {self.n}")
            for s in range(self.n):
                lead = u[s, p[s]]
                if abs(lead - 1.0) > FN_TOL:
                    raise ValidationError(f"U_{a} row {s + 1}: leading entry is {lead}, expected 1")
                tail = u[s, p[s] + 1 :]
                if np.any(np.abs(tail) > FN_TOL):
                    raise ValidationError(f"U_{a} row {s + 1}: nonzero entries beyond column {p[s] + 1}")
            if abs(np.linalg.det(u)) < 1e-12:
                raise ValidationError(f"U_{a} is singular")

    def u(self, a: int) -> np.ndarray:
        return self.u0 if a == 0 else self.u1

    def p(self, a: int) -> tuple:
        return self.p0 if a == 0 else self.p1


def default_boundary(n: int) -> BoundaryConfig:
    """U_0 = I and anti-diagonal U_1; the configuration of the supported classes."""
    return BoundaryConfig(n=n, p0=tuple(range(n)), p1=tuple(range(n - 1, -1, -1)))


def signed_antidiagonal(n: int, exponents) -> np.ndarray:
    """Matrix with (-1)**exponents[k] at positions (k, n-1-k)."""
    mat = np.zeros((n, n))
    for i in range(n):
        mat[i, n - 1 - i] = (-1.0) ** (int(exponents[i]) % 2)
    return mat


def j_matrix(n: int) -> np.ndarray:
    return signed_antidiagonal(n, np.arange(n))


def dual_exponents(p: tuple) -> tuple:
    n = len(p)
    return tuple(n - 1 - p[n - 1 - i] for i in range(n))


# --- problems ----------------------------------------------------------------


@dataclass
class Problem:
    """A differential system (F, U_0, U_1) with its dual bookkeeping.

    ``lambda_sign`` is the sign in front of the spectral parameter in the
    system matrix; the dual of an odd-order problem flips it.
    """

    F: AssociatedMatrix
    boundary: BoundaryConfig
    coeffs: CoefficientSet = None
    lambda_sign: float = 1.0

    def __post_init__(self):
        if self.F.n != self.boundary.n:
            raise ValidationError(
                f"dimension mismatch: F has n={self.F.n}, boundary has n={self.boundary.n}"
            )
        n = self.n
        self.J = j_matrix(n)
        self.pstar0 = dual_exponents(self.boundary.p0)
        self.pstar1 = dual_exponents(self.boundary.p1)
        self.J0 = signed_antidiagonal(n, self.pstar0)
        self.J1 = signed_antidiagonal(n, self.pstar1)
        self.u0_inv = np.linalg.inv(self.boundary.u0)
        self.u1_inv = np.linalg.inv(self.boundary.u1)
        self.J0_inv = np.linalg.inv(self.J0)

    @property
    def n(self) -> int:
        return self.F.n

    @property
    def grid(self) -> UniformGrid:
        return self.F.grid

    def pstar(self, a: int) -> tuple:
        return self.pstar0 if a == 0 else self.pstar1

    def u_star(self, a: int) -> np.ndarray:
        # Defined by the duality requirement (U*)^T J_a U_a = J, which makes
        # the endpoint pairing identity hold for every admissible U_a and
        # gives U* unit leading entries at the dual exponent columns.
        ja = self.J0 if a == 0 else self.J1
        ua = self.boundary.u(a)
        return (self.J @ np.linalg.inv(ua) @ np.linalg.inv(ja)).T


def build_problem(coeffs: CoefficientSet, boundary: BoundaryConfig | None = None) -> Problem:
    if boundary is None:
        boundary = default_boundary(coeffs.n)
    if boundary.n != coeffs.n:
        raise ValidationError(f"boundary has n={boundary.n}, coefficients have n={coeffs.n}")
    return Problem(F=associated_matrix(coeffs), boundary=boundary, coeffs=coeffs)


def star_matrix(F: AssociatedMatrix) -> AssociatedMatrix:
    """Entrywise dual: f*[k, j] = (-1)^(k+j+1) f[n-j+1, n-k+1]."""
    n = F.n
    src = F.entries
    out = np.empty_like(src)
    for i in range(n):
        for j in range(n):
            out[i, j] = (-1.0) ** ((i + j + 1) % 2) * src[n - 1 - j, n - 1 - i]
    return AssociatedMatrix(n=n, grid=F.grid, entries=out)


def star_problem(problem: Problem) -> Problem:
    """The dual problem (F*, U_0*, U_1*) paired through the Lagrange bracket."""
    n = problem.n
    u0s = problem.u_star(0)
    u1s = problem.u_star(1)
    boundary = BoundaryConfig(n=n, p0=problem.pstar0, p1=problem.pstar1, u0=u0s, u1=u1s)
    sign = problem.lambda_sign * (-1.0) ** (n % 2)
    return Problem(F=star_matrix(problem.F), boundary=boundary, lambda_sign=sign)


# --- pointwise algebra on quasi-derivative vectors ----------------------------


def lagrange_bracket(zvec, yvec) -> complex:
    """Alternating pairing sum((-1)^j z[j] y[n-1-j]) of two quasi-derivative vectors."""
    z = np.asarray(zvec)
    y = np.asarray(yvec)
    if z.shape[-1] != y.shape[-1]:
        raise ValidationError(f"length mismatch: {z.shape[-1]} vs {y.shape[-1]}")
    n = z.shape[-1]
    signs = (-1.0) ** np.arange(n)
    return np.sum(signs * z * y[..., ::-1], axis=-1)


def apply_boundary_form(problem: Problem, a: int, qvec) -> np.ndarray:
    """All n boundary forms at endpoint a applied to a quasi-derivative vector."""
    qvec = np.asarray(qvec)
    if qvec.shape[-1] != problem.n:
        raise ValidationError(f"quasi-derivative vector must have length {problem.n}")
    return qvec @ problem.boundary.u(a).T
