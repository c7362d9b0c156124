"""Weighted quadratic least squares over Kronecker-lifted states.

The problem is ``min_v || W (A (z kron z) - b) ||_2`` with ``z = (v; 1)``.
:func:`solve_algorithm1` is the Tikhonov-regularised curvilinear iteration;
:func:`solve_als`, :func:`solve_modified_als` and :func:`solve_newton` are the
baselines it is compared against.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateSystemError, NumericalError, StructuralError
from .netmodel import VoltageState

logger = logging.getLogger(__name__)

DAMPING_MODES = ("adaptive", "fixed", "squared")


@dataclass(frozen=True)
class QuadraticSystem:
    """Stacked measurement system.

    ``a_tilde`` has one row per measurement holding the row-major ``vec`` of a
    symmetric ``(n+1) x (n+1)`` matrix; ``w`` is the diagonal of ``W``.
    """

    a_tilde: np.ndarray
    b_tilde: np.ndarray
    w: np.ndarray | None = None

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.a_tilde, float))
        b = np.asarray(self.b_tilde, float).ravel()
        w = np.ones(b.size) if self.w is None else np.asarray(self.w, float).ravel()
        m, cols = a.shape
        side = int(round(np.sqrt(cols)))
        if m < 1 or side * side != cols or side < 2:
            raise StructuralError(f"a_tilde of shape {a.shape} is not m x (n+1)^2")
        if b.size != m or w.size != m:
            raise StructuralError("a_tilde, b_tilde and w disagree on measurement count")
        if np.any(w < 0):
            raise StructuralError("weights must be nonnegative")
        cube = a.reshape(m, side, side)
        scale = max(1.0, float(np.abs(a).max()))
        if float(np.abs(cube - cube.transpose(0, 2, 1)).max()) > 1e-12 * scale:
            raise StructuralError("every row of a_tilde must be the vec of a symmetric matrix")
        for arr in (a, b, w):
            arr.setflags(write=False)
        object.__setattr__(self, "a_tilde", a)
        object.__setattr__(self, "b_tilde", b)
        object.__setattr__(self, "w", w)

    @classmethod
    def from_forms(cls, matrices, targets, weights=None) -> QuadraticSystem:
        rows = [np.asarray(getattr(mat, "coeff", mat), float).ravel() for mat in matrices]
        return cls(np.array(rows), np.asarray(targets, float), weights)

    @property
    def m(self) -> int:
        return self.a_tilde.shape[0]

    @property
    def n_vars(self) -> int:
        return int(round(np.sqrt(self.a_tilde.shape[1]))) - 1

    @property
    def W(self) -> np.ndarray:
        return np.diag(self.w)

    @property
    def cube(self) -> np.ndarray:
        """``a_tilde`` reshaped to ``(m, n+1, n+1)``."""
        side = self.n_vars + 1
        return self.a_tilde.reshape(self.m, side, side)

    def weighted(self) -> np.ndarray:
        return self.w[:, None] * self.a_tilde

    def with_weights(self, w) -> QuadraticSystem:
        return QuadraticSystem(self.a_tilde, self.b_tilde, w)


@dataclass
class SolveReport:
    solver: str
    solution: np.ndarray
    residual_history: list[float]
    iterations: int
    converged: bool
    mu: float
    status: str
    iterates: list[np.ndarray] = field(default_factory=list, repr=False)
    damping_history: list[float] = field(default_factory=list, repr=False)

    @property
    def final_residual(self) -> float:
        return self.residual_history[-1]

    def voltage_state(self) -> VoltageState:
        return VoltageState.from_vector(self.solution)

    def to_dict(self) -> dict:
        return {
            "solver": self.solver,
            "converged": bool(self.converged),
            "status": self.status,
            "iterations": int(self.iterations),
            "mu": float(self.mu),
            "residual_history": [float(r) for r in self.residual_history],
            "solution": [float(x) for x in self.solution],
        }


def _vector(v, n_vars: int) -> np.ndarray:
    x = v.vector() if isinstance(v, VoltageState) else np.asarray(v, float).ravel()
    if x.size != n_vars:
        raise StructuralError(f"state has {x.size} entries, system expects {n_vars}")
    return x


def quadratic_values(sys: QuadraticSystem, v) -> np.ndarray:
    """Unweighted ``A (z kron z)``."""
    z = np.append(_vector(v, sys.n_vars), 1.0)
    return sys.a_tilde @ np.kron(z, z)


def residual(sys: QuadraticSystem, v) -> np.ndarray:
    """``eps = W (b - A (z kron z))``."""
    return sys.w * (sys.b_tilde - quadratic_values(sys, v))


def jacobian(sys: QuadraticSystem, v) -> np.ndarray:
    """Derivative of ``W A (z kron z)`` with respect to ``v`` (``m x n``).

    Rows are symmetric, so the derivative is ``2 W (B_i z)`` restricted to the
    free coordinates; ``d eps / d v = -jacobian``.
    """
    z = np.append(_vector(v, sys.n_vars), 1.0)
    return 2.0 * sys.w[:, None] * np.einsum("ijk,k->ij", sys.cube, z)[:, :-1]


def regularization_mu(sys: QuadraticSystem) -> float:
    """Spectral norm of ``W A``."""
    wa = sys.weighted()
    gram = wa @ wa.T if wa.shape[0] <= wa.shape[1] else wa.T @ wa
    mu = float(np.sqrt(max(np.linalg.eigvalsh(gram)[-1], 0.0)))
    if mu == 0.0:
        raise DegenerateSystemError("W A is identically zero")
    return mu


def _svd(a: np.ndarray):
    try:
        return np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD failed: {exc}") from exc


def _filtered_step(s, vt, coeffs, damping):
    denom = s**2 + damping
    gain = np.divide(s, denom, out=np.zeros_like(s), where=denom > 0)
    return vt.T @ (gain * coeffs)


def step(sys: QuadraticSystem, v, mu: float | None = None, damping: float | None = None):
    """One regularised update ``(A^T A + damping I) y = A^T eps``.

    ``damping`` defaults to ``mu`` (itself defaulting to
    :func:`regularization_mu`).  The solve goes through the SVD of the
    Jacobian, so zero singular values are harmless whenever ``damping > 0``.
    Returns ``(y, v + y)``.
    """
    x = _vector(v, sys.n_vars)
    if damping is None:
        damping = regularization_mu(sys) if mu is None else mu
    eps = residual(sys, x)
    if not np.any(eps):
        return np.zeros_like(x), x.copy()
    u, s, vt = _svd(jacobian(sys, x))
    y = _filtered_step(s, vt, u.T @ eps, damping)
    return y, x + y


def sphere_radius(a_k: np.ndarray, eps: np.ndarray, mu: float) -> float:
    """Radius of the ball whose constrained LS solution is the ``mu**2`` step.

    Terms with zero singular value are skipped.
    """
    u, s, _ = _svd(a_k)
    keep = s > 0
    terms = s[keep] * (u.T @ eps)[keep] / (s[keep] ** 2 + mu**2)
    return float(np.sqrt(np.sum(terms**2)))


def solve_algorithm1(
    sys: QuadraticSystem,
    v0,
    eps_th: float = 1e-8,
    max_iter: int = 50,
    damping: str = "adaptive",
    xtol: float = 1e-14,
    max_retries: int = 60,
    mu: float | None = None,
) -> SolveReport:
    """Regularised curvilinear least squares.

    Each iteration solves ``(A_k^T A_k + lam_k I) y = A_k^T eps_k`` through
    one SVD of ``A_k`` and moves to ``v_k + y``.  ``damping`` selects
    ``lam_k``:

    ``"adaptive"``
        ``theta_k * mu * ||eps_k||``, with ``theta_k`` shrunk after steps whose
        actual decrease matches the linear model and grown after poor ones.
        The damping vanishes with the residual, which gives the quadratic tail.
    ``"fixed"``
        ``mu``.
    ``"squared"``
        ``mu**2``.

    A trial step that fails to lower ``||eps||`` is rejected and retried with
    larger damping from the same SVD, so the residual history never increases.
    When no retry helps the point is stationary and the solve stops.

    ``mu`` may be passed in when the same ``W A`` is solved repeatedly.
    """
    if damping not in DAMPING_MODES:
        raise ValueError(f"damping must be one of {DAMPING_MODES}")
    if eps_th <= 0:
        raise ValueError("eps_th must be positive")
    mu = regularization_mu(sys) if mu is None else float(mu)
    x = _vector(v0, sys.n_vars).copy()
    eps = residual(sys, x)
    r = float(np.linalg.norm(eps))
    history, iterates, lams = [r], [x.copy()], []
    theta, growth = 1.0, 2.0
    status = "max_iter"
    k = 0
    while True:
        if r <= eps_th:
            status = "converged"
            break
        if k >= max_iter:
            break
        a_k = jacobian(sys, x)
        u, s, vt = _svd(a_k)
        coeffs = u.T @ eps
        accepted = False
        boost = 1.0
        for _ in range(max_retries):
            if damping == "adaptive":
                lam = theta * mu * r
            elif damping == "fixed":
                lam = mu * boost
            else:
                lam = mu * mu * boost
            y = _filtered_step(s, vt, coeffs, lam)
            if not np.all(np.isfinite(y)):
                raise NumericalError("non-finite update")
            trial = x + y
            eps_new = residual(sys, trial)
            r_new = float(np.linalg.norm(eps_new))
            if r_new < r:
                accepted = True
                if damping == "adaptive":
                    predicted = r * r - float(np.sum((eps - a_k @ y) ** 2))
                    rho = (r * r - r_new * r_new) / predicted if predicted > 0 else 0.0
                    theta *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
                    growth = 2.0
                break
            if damping == "adaptive":
                theta *= growth
                growth *= 2.0
            else:
                boost *= 2.0
        if not accepted:
            status = "stationary"
            break
        k += 1
        lams.append(lam)
        x, eps, r = trial, eps_new, r_new
        history.append(r)
        iterates.append(x.copy())
        if np.linalg.norm(y) <= xtol * (np.linalg.norm(x) + xtol):
            status = "converged" if r <= eps_th else "stationary"
            break
    return SolveReport("algorithm1", x, history, k, status == "converged", mu, status, iterates, lams)


def _half_step(sys: QuadraticSystem, fixed: np.ndarray) -> np.ndarray:
    """Weighted linear LS for one factor of ``z_L^T B z_R`` with the other fixed."""
    zf = np.append(fixed, 1.0)
    lin = np.einsum("ijk,k->ij", sys.cube, zf)
    design = sys.w[:, None] * lin[:, :-1]
    rhs = sys.w * (sys.b_tilde - lin[:, -1])
    sol, *_ = np.linalg.lstsq(design, rhs, rcond=None)
    return sol


def bilinear_residual(sys: QuadraticSystem, left, right) -> float:
    """``|| W (b - A (z_L kron z_R)) ||_2``."""
    zl = np.append(np.asarray(left, float), 1.0)
    zr = np.append(np.asarray(right, float), 1.0)
    return float(np.linalg.norm(sys.w * (sys.b_tilde - sys.a_tilde @ np.kron(zl, zr))))


def _alternating(sys, v0, eps_th, max_iter, average, name) -> SolveReport:
    x = _vector(v0, sys.n_vars).copy()
    r = float(np.linalg.norm(residual(sys, x)))
    history, iterates = [r], [x.copy()]
    right = x
    status = "max_iter"
    k = 0
    while True:
        if r <= eps_th:
            status = "converged"
            break
        if k >= max_iter:
            break
        left = _half_step(sys, right)
        new_right = _half_step(sys, left)
        x = 0.5 * (left + new_right) if average else new_right
        right = x
        k += 1
        r = float(np.linalg.norm(residual(sys, x)))
        if not np.isfinite(r):
            status = "diverged"
            history.append(r)
            iterates.append(x.copy())
            break
        history.append(r)
        iterates.append(x.copy())
    try:
        mu = regularization_mu(sys)
    except DegenerateSystemError:
        mu = 0.0
    return SolveReport(name, x, history, k, status == "converged", mu, status, iterates)


def solve_als(sys: QuadraticSystem, v0, eps_th: float = 1e-8, max_iter: int = 50) -> SolveReport:
    """Alternating least squares on the bilinear split ``z_L^T B z_R``.

    Solves for the left factor with the right held at its previous value,
    then for the right factor with the new left; the right factor is the
    iterate.  No descent or convergence guarantee.
    """
    return _alternating(sys, v0, eps_th, max_iter, False, "als")


def solve_modified_als(sys: QuadraticSystem, v0, eps_th: float = 1e-8, max_iter: int = 50) -> SolveReport:
    """ALS where each sweep ends at the mean of the left and right solutions."""
    return _alternating(sys, v0, eps_th, max_iter, True, "mals")


def solve_newton(
    sys: QuadraticSystem,
    v0,
    eps_th: float = 1e-8,
    max_iter: int = 50,
    window: int = 6,
    cond_limit: float = 1e14,
) -> SolveReport:
    """Unregularised Gauss-Newton, ``v += (A^T A)^{-1} A^T eps``.

    Stops with status ``"singular"`` when the normal matrix cannot be
    inverted, ``"oscillating"`` when ``window`` consecutive iterations fail to
    set a new residual minimum, and ``"diverged"`` on non-finite residuals.
    """
    try:
        mu = regularization_mu(sys)
    except DegenerateSystemError:
        mu = 0.0
    x = _vector(v0, sys.n_vars).copy()
    eps = residual(sys, x)
    r = float(np.linalg.norm(eps))
    history, iterates = [r], [x.copy()]
    best, since_best = r, 0
    status = "max_iter"
    k = 0
    while True:
        if r <= eps_th:
            status = "converged"
            break
        if k >= max_iter:
            break
        a_k = jacobian(sys, x)
        normal = a_k.T @ a_k
        if not np.all(np.isfinite(normal)) or np.linalg.cond(normal) > cond_limit:
            status = "singular"
            break
        try:
            y = np.linalg.solve(normal, a_k.T @ eps)
        except np.linalg.LinAlgError:
            status = "singular"
            break
        x = x + y
        k += 1
        eps = residual(sys, x)
        r = float(np.linalg.norm(eps))
        history.append(r)
        iterates.append(x.copy())
        if not np.isfinite(r):
            status = "diverged"
            break
        if r < best:
            best, since_best = r, 0
        else:
            since_best += 1
            if since_best >= window:
                status = "oscillating"
                break
    return SolveReport("newton", x, history, k, status == "converged", mu, status, iterates)


SOLVERS = {
    "algorithm1": solve_algorithm1,
    "als": solve_als,
    "mals": solve_modified_als,
    "newton": solve_newton,
}


def convergence_order(errors, floor: float = 1e-13) -> float:
    """Least-squares fit of ``p`` in ``log e_{k+1} = p log e_k + c``.

    Uses the last four errors above ``floor``.
    """
    e = np.asarray([x for x in errors if x > floor], float)[-4:]
    if e.size < 3:
        raise ValueError("need at least three errors above the floor")
    p, _ = np.polyfit(np.log(e[:-1]), np.log(e[1:]), 1)
    return float(p)
