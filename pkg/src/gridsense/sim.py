"""Quasi-static scenario simulation: ground truth and noisy measurement streams."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InfeasibleOperatingPointError, StructuralError
from .estimator import QuadraticSystem, regularization_mu, solve_algorithm1
from .measure import FormCatalog, Measurement, write_measurements_csv
from .netmodel import NetworkModel, VoltageState, load_case

DEFAULT_PMU_BUSES = (1, 4, 10, 12, 15, 27)


@dataclass(frozen=True)
class Event:
    """Change of ``(dp, dq)`` injected at ``bus`` from ``time_s`` onward.

    With ``ramp_s > 0`` the change follows a first-order lag of that time
    constant instead of a step.  ``fluctuation`` scales the change by
    ``1 + fluctuation * g`` where ``g`` is a unit gust sample shared by all
    events at the same bus, so a later event with the opposite ``dp`` and the
    same ``fluctuation`` removes both the mean change and its gusts.
    """

    time_s: float
    bus: int
    dp: float
    dq: float = 0.0
    ramp_s: float = 0.0
    fluctuation: float = 0.0

    def delta(self, t: float, gust: float = 0.0) -> tuple[float, float]:
        if t < self.time_s:
            return 0.0, 0.0
        frac = 1.0 if self.ramp_s <= 0 else 1.0 - math.exp(-(t - self.time_s) / self.ramp_s)
        frac *= 1.0 + self.fluctuation * gust
        return self.dp * frac, self.dq * frac


@dataclass(frozen=True)
class Scenario:
    model: NetworkModel
    duration_s: float = 20.0
    pmu_rate_hz: float = 30.0
    scada_period_s: float = 2.0
    pmu_buses: tuple[int, ...] = DEFAULT_PMU_BUSES
    load_trend: float = 0.01
    load_amplitude: float = 0.02
    load_period_s: float = 5.0
    load_phase_s: float = 0.0
    load_jitter: float = 1e-4
    events: tuple[Event, ...] = ()
    pmu_sigma: float = 1e-3
    scada_sigma: float = 1e-2
    case: str = ""

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        object.__setattr__(self, "pmu_buses", tuple(int(b) for b in self.pmu_buses))
        if self.duration_s <= 0 or self.pmu_rate_hz <= 0 or self.scada_period_s <= 0:
            raise StructuralError("duration, PMU rate and SCADA period must be positive")
        if self.pmu_rate_hz <= 1.0 / self.scada_period_s:
            raise StructuralError("PMU rate must exceed the SCADA rate")
        for ev in self.events:
            if not 0 <= ev.time_s <= self.duration_s:
                raise StructuralError(f"event at {ev.time_s}s outside [0, {self.duration_s}]")
            if not 1 <= ev.bus <= self.model.n_buses:
                raise StructuralError(f"event bus {ev.bus} out of range")
        for b in self.pmu_buses:
            if not 1 <= b <= self.model.n_buses:
                raise StructuralError(f"PMU bus {b} out of range")
        if self.pmu_sigma < 0 or self.scada_sigma < 0:
            raise StructuralError("noise sigmas must be nonnegative")

    def to_dict(self) -> dict:
        doc = {k: v for k, v in asdict(self).items() if k != "model"}
        doc["events"] = [asdict(e) for e in self.events]
        doc["pmu_buses"] = list(self.pmu_buses)
        return doc


@dataclass
class Trajectory:
    timestamps: np.ndarray
    states: np.ndarray
    measurements: list[Measurement]
    events: tuple[Event, ...] = ()
    n_buses: int = 0

    def state_at(self, k: int) -> VoltageState:
        return VoltageState.from_vector(self.states[k])

    def pmu_series(self, bus: int, kind: str = "VI") -> tuple[np.ndarray, np.ndarray]:
        pts = [(m.timestamp, m.value) for m in self.measurements if m.source == "pmu" and m.kind == kind and m.index[0] == bus]
        arr = np.array(pts)
        return arr[:, 0], arr[:, 1]


@dataclass
class OperatingPoint:
    """Specified injections: slack holds ``(slack_vm, 0)``, PV buses hold ``|V|``."""

    p: np.ndarray
    q: np.ndarray
    pv: dict[int, float] = field(default_factory=dict)
    slack: int = 1
    slack_vm: float = 1.0


def base_operating_point(model: NetworkModel) -> OperatingPoint:
    p = np.array([b.pg - b.pd for b in model.buses])
    q = np.array([-b.qd for b in model.buses])
    pv = {b.id: b.vm for b in model.buses if b.type == "pv"}
    slack = model.slack_bus
    return OperatingPoint(p, q, pv, slack, model.buses[slack - 1].vm)


def power_flow_system(model: NetworkModel, op: OperatingPoint, catalog: FormCatalog | None = None) -> QuadraticSystem:
    catalog = FormCatalog(model) if catalog is None else catalog
    forms, targets = [], []
    for j in range(1, model.n_buses + 1):
        if j == op.slack:
            forms += [catalog.form("VR", j), catalog.form("VI", j)]
            targets += [op.slack_vm, 0.0]
            continue
        forms.append(catalog.form("P", j))
        targets.append(op.p[j - 1])
        if j in op.pv:
            forms.append(catalog.form("VM2", j))
            targets.append(op.pv[j] ** 2)
        else:
            forms.append(catalog.form("Q", j))
            targets.append(op.q[j - 1])
    return QuadraticSystem.from_forms(forms, targets)


def solve_ground_truth(
    model: NetworkModel,
    op: OperatingPoint | None = None,
    v0=None,
    tol: float = 1e-11,
    max_iter: int = 100,
    catalog: FormCatalog | None = None,
    mu: float | None = None,
) -> VoltageState:
    """Power flow through the estimator on the fully specified square system."""
    op = base_operating_point(model) if op is None else op
    sys = power_flow_system(model, op, catalog)
    v0 = VoltageState.flat(model.n_buses) if v0 is None else v0
    rep = solve_algorithm1(sys, v0, eps_th=tol, max_iter=max_iter, mu=mu)
    if not rep.converged:
        raise InfeasibleOperatingPointError(f"power flow stopped with residual {rep.final_residual:.3e} ({rep.status})")
    return rep.voltage_state()


def load_scale(scn: Scenario, t: float) -> float:
    """Common load multiplier: linear trend plus a sinusoidal cycle."""
    cycle = math.sin(2 * math.pi * (t - scn.load_phase_s) / scn.load_period_s)
    return 1.0 + scn.load_trend * t / scn.duration_s + scn.load_amplitude * cycle


def injections_at(
    scn: Scenario, base: OperatingPoint, t: float, jitter: np.ndarray, gust: np.ndarray | None = None
) -> OperatingPoint:
    loads_p = np.array([b.pd for b in scn.model.buses])
    loads_q = np.array([b.qd for b in scn.model.buses])
    gen_p = np.array([b.pg for b in scn.model.buses])
    scale = load_scale(scn, t) + jitter
    p = gen_p - loads_p * scale
    q = -loads_q * scale
    for ev in scn.events:
        dp, dq = ev.delta(t, 0.0 if gust is None else float(gust[ev.bus - 1]))
        p[ev.bus - 1] += dp
        q[ev.bus - 1] += dq
    return OperatingPoint(p, q, base.pv, base.slack, base.slack_vm)


def run_scenario(scn: Scenario, seed: int = 0) -> Trajectory:
    """Sweep power flows at the PMU rate and sample PMU/SCADA measurements."""
    rng = np.random.default_rng(seed)
    model = scn.model
    n = model.n_buses
    catalog = FormCatalog(model)
    base = base_operating_point(model)
    n_steps = int(round(scn.duration_s * scn.pmu_rate_hz)) + 1
    times = np.arange(n_steps) / scn.pmu_rate_hz
    jitter = scn.load_jitter * rng.standard_normal((n_steps, n)) if scn.load_jitter > 0 else np.zeros((n_steps, n))
    gusty = any(ev.fluctuation for ev in scn.events)
    gust = rng.standard_normal((n_steps, n)) if gusty else None
    scada_every = max(1, int(round(scn.scada_period_s * scn.pmu_rate_hz)))

    scada_specs = []
    for j in range(1, n + 1):
        scada_specs += [("P", j, None), ("Q", j, None), ("VM2", j, None)]
    for br in model.branches:
        scada_specs += [("PF", br.from_bus, br.to_bus), ("QF", br.from_bus, br.to_bus)]

    states = np.empty((n_steps, 2 * n))
    measurements: list[Measurement] = []
    guess = VoltageState.flat(n)
    # the power-flow data matrix does not change over the sweep
    mu = regularization_mu(power_flow_system(model, base, catalog))
    for k, t in enumerate(times):
        t = float(t)
        op = injections_at(scn, base, t, jitter[k], None if gust is None else gust[k])
        try:
            state = solve_ground_truth(model, op, v0=guess, catalog=catalog, mu=mu)
        except InfeasibleOperatingPointError as exc:
            raise InfeasibleOperatingPointError(f"t={t:.6f}s: {exc}") from exc
        guess = state
        states[k] = state.vector()
        for b in scn.pmu_buses:
            for kind, value in (("VR", state.vx[b - 1]), ("VI", state.vy[b - 1])):
                noisy = value + scn.pmu_sigma * rng.standard_normal()
                measurements.append(catalog.measurement(kind, b, None, noisy, _sigma(scn.pmu_sigma), t, "pmu"))
        if k % scada_every == 0:
            for kind, i1, i2 in scada_specs:
                exact = catalog.form(kind, i1, i2).evaluate(state)
                noisy = exact + scn.scada_sigma * rng.standard_normal()
                measurements.append(catalog.measurement(kind, i1, i2, noisy, _sigma(scn.scada_sigma), t, "scada"))
    return Trajectory(times, states, measurements, scn.events, n)


def _sigma(s: float) -> float:
    # noiseless streams still need a positive weight scale
    return s if s > 0 else 1e-3


def voltage_change_metric(v_est, v0) -> float:
    """``||v_est - v0|| / ||v_ref - v0||`` with ``v_ref`` the flat profile."""
    est = v_est.vector() if isinstance(v_est, VoltageState) else np.asarray(v_est, float)
    ref0 = v0.vector() if isinstance(v0, VoltageState) else np.asarray(v0, float)
    if est.shape != ref0.shape or est.size % 2:
        raise StructuralError("voltage vectors must share an even length")
    n = est.size // 2
    v_ref = np.concatenate([np.ones(n), np.zeros(n)])
    denom = np.linalg.norm(v_ref - ref0)
    if denom == 0:
        raise ZeroDivisionError("v0 equals the flat reference profile")
    return float(np.linalg.norm(est - ref0) / denom)


def write_ground_truth_csv(traj: Trajectory, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["timestamp_s", "bus", "vx", "vy"])
        n = traj.n_buses
        for t, row in zip(traj.timestamps, traj.states):
            for j in range(n):
                writer.writerow([repr(float(t)), j + 1, repr(float(row[j])), repr(float(row[n + j]))])


def read_ground_truth_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(timestamps, states)`` with states stacked as ``(vx; vy)``."""
    rows: dict[float, dict[int, tuple[float, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            rows.setdefault(float(rec["timestamp_s"]), {})[int(rec["bus"])] = (float(rec["vx"]), float(rec["vy"]))
    times = np.array(sorted(rows))
    n = max(max(r) for r in rows.values())
    states = np.empty((times.size, 2 * n))
    for k, t in enumerate(times):
        for j in range(1, n + 1):
            states[k, j - 1], states[k, n + j - 1] = rows[t][j]
    return times, states


def write_trajectory(traj: Trajectory, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"measurements": out / "measurements.csv", "ground_truth": out / "ground_truth.csv"}
    write_measurements_csv(traj.measurements, paths["measurements"])
    write_ground_truth_csv(traj, paths["ground_truth"])
    return paths


_SCENARIO_FIELDS = (
    "duration_s",
    "pmu_rate_hz",
    "scada_period_s",
    "load_trend",
    "load_amplitude",
    "load_period_s",
    "load_phase_s",
    "load_jitter",
    "pmu_sigma",
    "scada_sigma",
)


def scenario_from_dict(doc: dict, model: NetworkModel | None = None) -> Scenario:
    case = doc.get("case", "ieee30")
    model = load_case(case) if model is None else model
    kwargs = {k: float(doc[k]) for k in _SCENARIO_FIELDS if k in doc}
    if "pmu_buses" in doc:
        kwargs["pmu_buses"] = tuple(doc["pmu_buses"])
    events = tuple(
        Event(
            float(e["time_s"]),
            int(e["bus"]),
            float(e.get("dp", 0.0)),
            float(e.get("dq", 0.0)),
            float(e.get("ramp_s", 0.0)),
            float(e.get("fluctuation", 0.0)),
        )
        for e in doc.get("events", [])
    )
    return Scenario(model=model, events=events, case=str(case), **kwargs)


def load_scenario(path, model: NetworkModel | None = None) -> Scenario:
    return scenario_from_dict(json.loads(Path(path).read_text()), model)


def replica_scenario(model: NetworkModel | None = None, **overrides) -> Scenario:
    """IEEE 30-bus run with extra wind injection at bus 4 between 2 s and 14 s.

    The wind change is gusty (``fluctuation``) while it lasts; the load follows
    the default trend and amplitude with a 12 s cycle.  ``wind_dp`` and
    ``wind_fluctuation`` adjust the event; any other keyword overrides the
    matching :class:`Scenario` field.
    """
    model = load_case("ieee30") if model is None else model
    wind = overrides.pop("wind_dp", 0.2)
    gusts = overrides.pop("wind_fluctuation", 0.034)
    params = dict(
        duration_s=20.0,
        pmu_rate_hz=60.0,
        scada_period_s=2.0,
        load_period_s=12.0,
        load_phase_s=6.0,
        pmu_sigma=1e-4,
        scada_sigma=1e-2,
        events=(Event(2.0, 4, wind, fluctuation=gusts), Event(14.0, 4, -wind, fluctuation=gusts)),
        case="ieee30",
    )
    params.update(overrides)
    return Scenario(model=model, **params)
