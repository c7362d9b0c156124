"""Rewrite polynomial systems as quadratic systems in augmented variables.

Every monomial of degree three or more is split into a product of two
augmented variables; each auxiliary ``a = u * v`` contributes the defining
equation ``u v - a = 0``.  The resulting forms live over ``(aug; 1)`` so the
estimator's solvers apply unchanged.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, StructuralError
from .estimator import QuadraticSystem, SolveReport, solve_algorithm1

HOMOG = -1


@dataclass(frozen=True)
class PolySystem:
    """Equations ``sum_k coeff_k * prod_i x_i**p_ik = 0``.

    Each equation maps an exponent tuple (aligned with ``variables``) to its
    coefficient.
    """

    variables: tuple[str, ...]
    equations: tuple[dict, ...]

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "equations", tuple(dict(eq) for eq in self.equations))
        if not self.variables:
            raise StructuralError("need at least one variable")
        if len(set(self.variables)) != len(self.variables):
            raise StructuralError("variable names must be unique")
        if not self.equations:
            raise StructuralError("need at least one equation")
        n = len(self.variables)
        for eq in self.equations:
            for mono, c in eq.items():
                if len(mono) != n or any(int(p) != p or p < 0 for p in mono):
                    raise StructuralError(f"bad monomial exponents {mono}")
                if not math.isfinite(c):
                    raise StructuralError("coefficients must be finite")

    @classmethod
    def from_records(cls, equations, variables=None) -> PolySystem:
        """Build from lists of ``{"monomial": {var: power}, "coeff": c}`` records."""
        names = list(variables or [])
        for eq in equations:
            for rec in eq:
                for var in rec.get("monomial", {}):
                    if var not in names:
                        names.append(var)
        eqs = []
        for eq in equations:
            terms: dict = {}
            for rec in eq:
                powers = rec.get("monomial", {})
                mono = tuple(int(powers.get(v, 0)) for v in names)
                terms[mono] = terms.get(mono, 0.0) + float(rec["coeff"])
            eqs.append(terms)
        return cls(tuple(names), tuple(eqs))

    @classmethod
    def univariate(cls, coeffs_high_first, var: str = "x") -> PolySystem:
        deg = len(coeffs_high_first) - 1
        eq = {(deg - k,): float(c) for k, c in enumerate(coeffs_high_first) if c != 0}
        return cls((var,), (eq,))

    @property
    def degree(self) -> int:
        return max(sum(m) for eq in self.equations for m in eq)

    def evaluate(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        return np.array([sum(c * np.prod(x ** np.array(m)) for m, c in eq.items()) for eq in self.equations])

    def jacobian(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        jac = np.zeros((len(self.equations), len(self.variables)))
        for i, eq in enumerate(self.equations):
            for m, c in eq.items():
                for j, p in enumerate(m):
                    if p == 0:
                        continue
                    dm = np.array(m)
                    dm[j] -= 1
                    jac[i, j] += c * p * np.prod(x**dm)
        return jac


def load_poly(path) -> PolySystem:
    """Read a polynomial JSON file.

    Accepts either a bare list of monomial records (one equation) or an object
    with ``equations`` (list of record lists) and optional ``variables``.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"polynomial file is not valid JSON: {exc.msg}", exc.lineno) from exc
    try:
        if isinstance(doc, list):
            return PolySystem.from_records([doc])
        return PolySystem.from_records(doc["equations"], doc.get("variables"))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"invalid polynomial document: {exc}") from exc


@dataclass
class QuadratizedSystem:
    aug_variables: list[str]
    definitions: dict[str, tuple[str, str]]
    forms: list[np.ndarray]
    targets: np.ndarray
    roles: list[str]
    n_original: int
    _factors: list[tuple[int, int]] = field(default_factory=list, repr=False)

    @property
    def n_aug(self) -> int:
        return len(self.aug_variables)

    def system(self, weights=None) -> QuadraticSystem:
        return QuadraticSystem.from_forms(self.forms, self.targets, weights)

    def lift(self, x) -> np.ndarray:
        """Augmented vector consistent with every auxiliary definition."""
        x = np.asarray(x, float).ravel()
        if x.size != self.n_original:
            raise StructuralError(f"expected {self.n_original} original values")
        z = np.concatenate([x, np.zeros(self.n_aug - self.n_original)])
        for k, (a, b) in enumerate(self._factors):
            z[self.n_original + k] = z[a] * z[b]
        return z

    def project(self, z) -> np.ndarray:
        return np.asarray(z, float)[: self.n_original]


def _split(mono: tuple[int, ...]):
    factors = [i for i, p in enumerate(mono) for _ in range(p)]
    half = (len(factors) + 1) // 2
    left, right = [0] * len(mono), [0] * len(mono)
    for i in factors[:half]:
        left[i] += 1
    for i in factors[half:]:
        right[i] += 1
    return tuple(left), tuple(right)


def quadratize(sys: PolySystem) -> QuadratizedSystem:
    n = len(sys.variables)
    names = list(sys.variables)
    aux_index: dict[tuple[int, ...], int] = {}
    factors: list[tuple[int, int]] = []
    definitions: dict[str, tuple[str, str]] = {}

    def mono_name(mono):
        parts = []
        for v, p in zip(sys.variables, mono):
            if p:
                parts.append(v if p == 1 else f"{v}^{p}")
        return "*".join(parts)

    def var_for(mono):
        d = sum(mono)
        if d == 0:
            return HOMOG
        if d == 1:
            return mono.index(1)
        if mono in aux_index:
            return aux_index[mono]
        a, b = pair_for(mono)
        idx = len(names)
        names.append(mono_name(mono))
        aux_index[mono] = idx
        factors.append((a, b))
        definitions[names[idx]] = (names[a] if a != HOMOG else "1", names[b] if b != HOMOG else "1")
        return idx

    def pair_for(mono):
        d = sum(mono)
        if d == 0:
            return HOMOG, HOMOG
        if d == 1:
            return mono.index(1), HOMOG
        left, right = _split(mono)
        return var_for(left), var_for(right)

    eq_terms = []
    eq_targets = []
    for eq in sys.equations:
        terms = []
        target = 0.0
        for mono in sorted(eq):
            c = eq[mono]
            if c == 0:
                continue
            if sum(mono) == 0:
                target -= c
            else:
                a, b = pair_for(mono)
                terms.append((a, b, c))
        eq_terms.append(terms)
        eq_targets.append(target)

    size = len(names) + 1

    def matrix(terms):
        mat = np.zeros((size, size))
        for a, b, c in terms:
            a = size - 1 if a == HOMOG else a
            b = size - 1 if b == HOMOG else b
            if a == b:
                mat[a, a] += c
            else:
                mat[a, b] += 0.5 * c
                mat[b, a] += 0.5 * c
        return mat

    forms, targets, roles = [], [], []
    for k, (a, b) in enumerate(factors):
        forms.append(matrix([(a, b, 1.0), (n + k, HOMOG, -1.0)]))
        targets.append(0.0)
        roles.append("definition")
    for terms, t in zip(eq_terms, eq_targets):
        forms.append(matrix(terms))
        targets.append(t)
        roles.append("equation")
    homog = np.zeros((size, size))
    homog[-1, -1] = 1.0
    forms.append(homog)
    targets.append(1.0)
    roles.append("homogenization")
    return QuadratizedSystem(names, definitions, forms, np.array(targets), roles, n, factors)


@dataclass
class PolyReport:
    root: dict[str, float]
    augmented: np.ndarray
    report: SolveReport

    @property
    def converged(self) -> bool:
        return self.report.converged

    def to_dict(self) -> dict:
        return {"root": dict(self.root), "augmented": [float(x) for x in self.augmented], **self.report.to_dict()}


def solve_poly(
    sys: PolySystem,
    init: dict[str, float],
    aux_init: dict[str, float] | None = None,
    eps_th: float = 1e-12,
    max_iter: int = 100,
    damping: str = "adaptive",
) -> PolyReport:
    """Solve a polynomial system through its quadratization.

    Auxiliaries start from their definitions evaluated at ``init`` unless
    overridden in ``aux_init`` (keyed by auxiliary name, e.g. ``"x^2"``).
    """
    missing = [v for v in sys.variables if v not in init]
    if missing:
        raise StructuralError(f"initial values missing for {missing}")
    q = quadratize(sys)
    z0 = q.lift([init[v] for v in sys.variables])
    for name, value in (aux_init or {}).items():
        if name not in q.aug_variables[q.n_original :]:
            raise StructuralError(f"unknown auxiliary {name!r}; have {q.aug_variables[q.n_original :]}")
        z0[q.aug_variables.index(name)] = value
    rep = solve_algorithm1(q.system(), z0, eps_th=eps_th, max_iter=max_iter, damping=damping)
    root = {v: float(x) for v, x in zip(sys.variables, q.project(rep.solution))}
    return PolyReport(root, rep.solution, rep)


def newton_poly(
    sys: PolySystem,
    init: dict[str, float],
    eps_th: float = 1e-12,
    max_iter: int = 50,
    window: int = 6,
) -> SolveReport:
    """Newton-Raphson (Gauss-Newton when non-square) on the original equations.

    Status is ``"oscillating"`` after ``window`` iterations without a new
    residual minimum and ``"singular"`` when the Jacobian cannot be inverted.
    """
    x = np.array([init[v] for v in sys.variables], float)
    f = sys.evaluate(x)
    r = float(np.linalg.norm(f))
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
        jac = sys.jacobian(x)
        try:
            if jac.shape[0] == jac.shape[1]:
                dx = np.linalg.solve(jac, -f)
            else:
                dx = np.linalg.solve(jac.T @ jac, -jac.T @ f)
        except np.linalg.LinAlgError:
            status = "singular"
            break
        x = x + dx
        k += 1
        f = sys.evaluate(x)
        r = float(np.linalg.norm(f))
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
    return SolveReport("newton", x, history, k, status == "converged", 0.0, status, iterates)
