"""Network data and quadratic measurement forms in rectangular coordinates.

Every measurable quantity (bus injection, branch flow, squared voltage
magnitude, PMU voltage component) is written as ``z.T @ coeff @ z`` over the
homogeneous vector ``z = (vx; vy; 1)`` of length ``2N + 1``.  Buses are
numbered 1..N as in case files; branches are addressed by their 0-based
position in :attr:`NetworkModel.branches`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ParseError, StructuralError

FORM_KINDS = (
    "active_injection",
    "reactive_injection",
    "vmag_squared",
    "branch_flow_p",
    "branch_flow_q",
    "pmu_linear",
)


@dataclass(frozen=True)
class Branch:
    """Series admittance ``y`` between two buses, standard pi model."""

    from_bus: int
    to_bus: int
    y: complex
    b_shunt: float = 0.0
    tap: float = 1.0


@dataclass(frozen=True)
class Bus:
    """Per-bus operating data used by the simulator (per-unit)."""

    id: int
    type: str = "pq"
    pd: float = 0.0
    qd: float = 0.0
    pg: float = 0.0
    vm: float = 1.0


@dataclass(frozen=True)
class NetworkModel:
    n_buses: int
    branches: tuple[Branch, ...] = ()
    bus_shunts: np.ndarray | None = None
    buses: tuple[Bus, ...] = ()
    name: str = ""

    def __post_init__(self):
        if int(self.n_buses) < 1:
            raise StructuralError(f"n_buses must be positive, got {self.n_buses}")
        object.__setattr__(self, "branches", tuple(self.branches))
        for k, br in enumerate(self.branches):
            for b in (br.from_bus, br.to_bus):
                if not 1 <= b <= self.n_buses:
                    raise StructuralError(f"branch {k}: bus {b} outside [1, {self.n_buses}]")
            if br.from_bus == br.to_bus:
                raise StructuralError(f"branch {k}: self-loop at bus {br.from_bus}")
            if br.tap <= 0:
                raise StructuralError(f"branch {k}: tap ratio must be positive")
        shunts = np.zeros(self.n_buses, complex) if self.bus_shunts is None else np.asarray(self.bus_shunts, complex)
        if shunts.shape != (self.n_buses,):
            raise StructuralError("bus_shunts must have one entry per bus")
        shunts.setflags(write=False)
        object.__setattr__(self, "bus_shunts", shunts)
        if self.buses and len(self.buses) != self.n_buses:
            raise StructuralError("bus metadata must cover every bus")
        if not self.buses:
            object.__setattr__(self, "buses", tuple(Bus(i + 1) for i in range(self.n_buses)))

    @property
    def slack_bus(self) -> int:
        for bus in self.buses:
            if bus.type == "slack":
                return bus.id
        return 1

    def find_branch(self, a: int, b: int) -> tuple[int, str]:
        """Return ``(index, end)`` of the first branch joining buses ``a`` and ``b``.

        ``end`` is ``"from"`` when ``a`` is the branch's from-bus, else ``"to"``.
        """
        for k, br in enumerate(self.branches):
            if (br.from_bus, br.to_bus) == (a, b):
                return k, "from"
            if (br.from_bus, br.to_bus) == (b, a):
                return k, "to"
        raise StructuralError(f"no branch between buses {a} and {b}")


@dataclass(frozen=True)
class QuadForm:
    """Symmetric quadratic form over ``(vx; vy; 1)``."""

    coeff: np.ndarray
    kind: str
    label: tuple = field(default=(), compare=False)

    def __post_init__(self):
        c = np.asarray(self.coeff, float)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise StructuralError("coefficient matrix must be square")
        if self.kind not in FORM_KINDS:
            raise StructuralError(f"unknown form kind {self.kind!r}")
        c = 0.5 * (c + c.T)
        c.setflags(write=False)
        object.__setattr__(self, "coeff", c)

    @property
    def n_buses(self) -> int:
        return (self.coeff.shape[0] - 1) // 2

    def evaluate(self, state) -> float:
        z = state.homogeneous() if isinstance(state, VoltageState) else _homogeneous(state)
        if z.shape[0] != self.coeff.shape[0]:
            raise StructuralError(f"state of length {z.shape[0] - 1} does not match form size")
        return float(z @ self.coeff @ z)


@dataclass(frozen=True)
class VoltageState:
    vx: np.ndarray
    vy: np.ndarray

    def __post_init__(self):
        vx = np.asarray(self.vx, float).ravel()
        vy = np.asarray(self.vy, float).ravel()
        if vx.shape != vy.shape:
            raise StructuralError("vx and vy must have equal length")
        if not (np.all(np.isfinite(vx)) and np.all(np.isfinite(vy))):
            raise StructuralError("voltage state must be finite")
        object.__setattr__(self, "vx", vx)
        object.__setattr__(self, "vy", vy)

    @classmethod
    def flat(cls, n_buses: int) -> VoltageState:
        return cls(np.ones(n_buses), np.zeros(n_buses))

    @classmethod
    def from_vector(cls, v) -> VoltageState:
        v = np.asarray(v, float).ravel()
        if v.size % 2:
            raise StructuralError("stacked voltage vector must have even length")
        n = v.size // 2
        return cls(v[:n], v[n:])

    @classmethod
    def from_complex(cls, v) -> VoltageState:
        v = np.asarray(v, complex)
        return cls(v.real, v.imag)

    @property
    def n_buses(self) -> int:
        return self.vx.size

    def vector(self) -> np.ndarray:
        return np.concatenate([self.vx, self.vy])

    def homogeneous(self) -> np.ndarray:
        return np.concatenate([self.vx, self.vy, [1.0]])

    def to_complex(self) -> np.ndarray:
        return self.vx + 1j * self.vy


def _homogeneous(v) -> np.ndarray:
    return np.append(np.asarray(v, float).ravel(), 1.0)


def _check_bus(bus: int, n_buses: int):
    if not 1 <= int(bus) <= n_buses:
        raise StructuralError(f"bus {bus} outside [1, {n_buses}]")


def branch_admittances(branch: Branch) -> tuple[complex, complex, complex, complex]:
    """Pi-model two-port entries ``(Yff, Yft, Ytf, Ytt)``."""
    half = 0.5j * branch.b_shunt
    t = branch.tap
    return (branch.y + half) / t**2, -branch.y / t, -branch.y / t, branch.y + half


def build_ybus(model: NetworkModel) -> np.ndarray:
    """Complex nodal admittance matrix; parallel branches are summed."""
    n = model.n_buses
    ybus = np.zeros((n, n), complex)
    for br in model.branches:
        f, t = br.from_bus - 1, br.to_bus - 1
        yff, yft, ytf, ytt = branch_admittances(br)
        ybus[f, f] += yff
        ybus[f, t] += yft
        ybus[t, f] += ytf
        ybus[t, t] += ytt
    ybus[np.diag_indices(n)] += model.bus_shunts
    return ybus


def _power_pair(bus: int, row: np.ndarray, n: int, kinds, label) -> tuple[QuadForm, QuadForm]:
    # P + jQ = V_a * conj(sum_k row_k V_k) with V = vx + j vy
    a = bus - 1
    g, b = row.real, row.imag
    p = np.zeros((2 * n + 1, 2 * n + 1))
    q = np.zeros_like(p)
    x, y = slice(0, n), slice(n, 2 * n)
    # P = vx_a (g.vx - b.vy) + vy_a (g.vy + b.vx)
    p[a, x] += g
    p[a, y] -= b
    p[n + a, y] += g
    p[n + a, x] += b
    # Q = vy_a (g.vx - b.vy) - vx_a (g.vy + b.vx)
    q[n + a, x] += g
    q[n + a, y] -= b
    q[a, y] -= g
    q[a, x] -= b
    return QuadForm(p, kinds[0], label), QuadForm(q, kinds[1], label)


def injection_quadforms(model: NetworkModel, ybus: np.ndarray | None = None) -> list[QuadForm]:
    """Active then reactive injection forms: ``[P_1..P_N, Q_1..Q_N]``."""
    ybus = build_ybus(model) if ybus is None else ybus
    n = model.n_buses
    pairs = [_power_pair(j, ybus[j - 1], n, ("active_injection", "reactive_injection"), (j,)) for j in range(1, n + 1)]
    return [p for p, _ in pairs] + [q for _, q in pairs]


def vmag_quadform(n_buses: int, bus: int) -> QuadForm:
    """Squared voltage magnitude ``vx_j^2 + vy_j^2``."""
    _check_bus(bus, n_buses)
    c = np.zeros((2 * n_buses + 1, 2 * n_buses + 1))
    c[bus - 1, bus - 1] = 1.0
    c[n_buses + bus - 1, n_buses + bus - 1] = 1.0
    return QuadForm(c, "vmag_squared", (bus,))


def branch_flow_quadforms(model: NetworkModel, branch: int, end: str = "from") -> tuple[QuadForm, QuadForm]:
    """Active and reactive power leaving ``end`` of a branch into it."""
    if not 0 <= branch < len(model.branches):
        raise StructuralError(f"branch index {branch} out of range")
    if end not in ("from", "to"):
        raise StructuralError(f"end must be 'from' or 'to', not {end!r}")
    br = model.branches[branch]
    yff, yft, ytf, ytt = branch_admittances(br)
    n = model.n_buses
    row = np.zeros(n, complex)
    if end == "from":
        bus, other = br.from_bus, br.to_bus
        row[bus - 1] += yff
        row[other - 1] += yft
    else:
        bus, other = br.to_bus, br.from_bus
        row[bus - 1] += ytt
        row[other - 1] += ytf
    return _power_pair(bus, row, n, ("branch_flow_p", "branch_flow_q"), (bus, other))


def pmu_quadform(n_buses: int, bus: int, part: str) -> QuadForm:
    """Bordered embedding of a direct voltage-component measurement."""
    _check_bus(bus, n_buses)
    if part not in ("real", "imag"):
        raise StructuralError(f"part must be 'real' or 'imag', not {part!r}")
    idx = bus - 1 if part == "real" else n_buses + bus - 1
    c = np.zeros((2 * n_buses + 1, 2 * n_buses + 1))
    c[idx, -1] = c[-1, idx] = 0.5
    return QuadForm(c, "pmu_linear", (bus, part))


def model_from_dict(doc: dict) -> NetworkModel:
    try:
        raw_buses = sorted(doc["buses"], key=lambda b: int(b["id"]))
        ids = [int(b["id"]) for b in raw_buses]
        if ids != list(range(1, len(ids) + 1)):
            raise StructuralError("bus ids must be exactly 1..N")
        buses = tuple(
            Bus(
                id=int(b["id"]),
                type=b.get("type", "pq"),
                pd=float(b.get("pd", 0.0)),
                qd=float(b.get("qd", 0.0)),
                pg=float(b.get("pg", 0.0)),
                vm=float(b.get("vm", 1.0)),
            )
            for b in raw_buses
        )
        shunts = np.array([complex(b.get("shunt_g", 0.0), b.get("shunt_b", 0.0)) for b in raw_buses])
        branches = []
        for b in doc.get("branches", []):
            z = complex(float(b["r"]), float(b["x"]))
            if z == 0:
                raise StructuralError(f"branch {b['from']}-{b['to']} has zero impedance")
            branches.append(
                Branch(int(b["from"]), int(b["to"]), 1.0 / z, float(b.get("b_shunt", 0.0)), float(b.get("tap", 1.0) or 1.0))
            )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, StructuralError):
            raise
        raise ParseError(f"invalid case document: {exc}") from exc
    return NetworkModel(len(buses), tuple(branches), shunts, buses, doc.get("name", ""))


def load_case(path) -> NetworkModel:
    """Load a JSON case file; the bundled name ``ieee30`` is also accepted."""
    if str(path) == "ieee30":
        text = resources.files("gridsense.data").joinpath("ieee30.json").read_text()
    else:
        text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"case file is not valid JSON: {exc.msg}", exc.lineno) from exc
    return model_from_dict(doc)


def ieee30() -> NetworkModel:
    return load_case("ieee30")
