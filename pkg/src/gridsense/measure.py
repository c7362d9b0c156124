"""Timestamped measurements, weight decay and system assembly."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ObservabilityError, ParseError, StructuralError, TemporalOrderError
from .estimator import QuadraticSystem, jacobian
from .netmodel import (
    NetworkModel,
    QuadForm,
    branch_flow_quadforms,
    build_ybus,
    injection_quadforms,
    pmu_quadform,
    vmag_quadform,
)

CSV_COLUMNS = ("timestamp_s", "source", "kind", "index_1", "index_2", "value", "sigma")
KINDS = ("P", "Q", "VM2", "PF", "QF", "VR", "VI")
BRANCH_KINDS = ("PF", "QF")


@dataclass(frozen=True)
class Measurement:
    form: QuadForm
    value: float
    base_sigma: float
    timestamp: float
    source: str
    kind: str = ""
    index: tuple = ()

    def __post_init__(self):
        if not self.base_sigma > 0:
            raise StructuralError(f"base_sigma must be positive, got {self.base_sigma}")
        if not math.isfinite(self.timestamp):
            raise StructuralError("timestamp must be finite")
        if self.source not in ("scada", "pmu"):
            raise StructuralError(f"source must be 'scada' or 'pmu', not {self.source!r}")


@dataclass(frozen=True)
class MeasurementSnapshot:
    measurements: tuple[Measurement, ...]
    estimation_time: float

    def __post_init__(self):
        object.__setattr__(self, "measurements", tuple(self.measurements))
        if not self.measurements:
            raise StructuralError("a snapshot needs at least one measurement")
        pmu_times = [m.timestamp for m in self.measurements if m.source == "pmu"]
        if pmu_times and self.estimation_time < max(pmu_times):
            raise TemporalOrderError("estimation_time precedes a PMU measurement")

    @property
    def n_buses(self) -> int:
        return self.measurements[0].form.n_buses


@dataclass(frozen=True)
class WeightPolicy:
    """Lyapunov-driven decay of SCADA weights.

    ``period`` is the active alarm period (1, 2 or 3) or ``None`` when no
    event has been alarmed; ``period_factors`` holds the multipliers for
    periods 1..3.  ``decay="inverse_variance"`` squares the decay factor.
    ``delta0`` records the error scale of the last estimate and does not
    enter the weight.
    """

    lyap: float = 0.0
    delta0: float = 0.0
    period_factors: tuple[float, float, float] = (0.1, 0.5, 0.9)
    period: int | None = None
    decay: str = "linear"

    def __post_init__(self):
        f = tuple(float(x) for x in self.period_factors)
        if len(f) != 3 or not all(0 < x <= 1 for x in f):
            raise StructuralError("period_factors must be three values in (0, 1]")
        if not f[0] < f[1] < f[2]:
            raise StructuralError("period_factors must increase from period 1 to period 3")
        if self.delta0 < 0:
            raise StructuralError("delta0 must be nonnegative")
        if self.period not in (None, 1, 2, 3):
            raise StructuralError("period must be None, 1, 2 or 3")
        if self.decay not in ("linear", "inverse_variance"):
            raise StructuralError("decay must be 'linear' or 'inverse_variance'")
        object.__setattr__(self, "period_factors", f)


def effective_weight(meas: Measurement, policy: WeightPolicy, now: float) -> float:
    if now < meas.timestamp:
        raise TemporalOrderError(f"now={now} precedes measurement time {meas.timestamp}")
    base = 1.0 / meas.base_sigma
    if meas.source == "pmu":
        return base
    rate = max(policy.lyap, 0.0)
    if policy.decay == "inverse_variance":
        rate *= 2.0
    weight = base * math.exp(-rate * (now - meas.timestamp))
    if policy.period is not None:
        weight *= policy.period_factors[policy.period - 1]
    return weight


def assemble_system(snapshot: MeasurementSnapshot, policy: WeightPolicy | None = None) -> QuadraticSystem:
    policy = WeightPolicy() if policy is None else policy
    sizes = {m.form.coeff.shape for m in snapshot.measurements}
    if len(sizes) != 1:
        raise StructuralError(f"measurements mix network sizes {sorted(sizes)}")
    rows = np.array([m.form.coeff.ravel() for m in snapshot.measurements])
    values = np.array([m.value for m in snapshot.measurements])
    weights = np.array([effective_weight(m, policy, snapshot.estimation_time) for m in snapshot.measurements])
    return QuadraticSystem(rows, values, weights)


class FormCatalog:
    """Resolves CSV ``(kind, index_1, index_2)`` triples to quadratic forms."""

    def __init__(self, model: NetworkModel):
        self.model = model
        self._injections = None
        self._cache: dict = {}

    def form(self, kind: str, i1: int, i2: int | None = None) -> QuadForm:
        key = (kind, i1, i2)
        if key in self._cache:
            return self._cache[key]
        n = self.model.n_buses
        if kind in ("P", "Q"):
            if not 1 <= i1 <= n:
                raise StructuralError(f"bus {i1} outside [1, {n}]")
            if self._injections is None:
                self._injections = injection_quadforms(self.model, build_ybus(self.model))
            form = self._injections[i1 - 1 + (n if kind == "Q" else 0)]
        elif kind == "VM2":
            form = vmag_quadform(n, i1)
        elif kind in BRANCH_KINDS:
            if i2 is None:
                raise StructuralError(f"{kind} needs index_2")
            k, end = self.model.find_branch(i1, i2)
            p, q = branch_flow_quadforms(self.model, k, end)
            form = p if kind == "PF" else q
        elif kind in ("VR", "VI"):
            form = pmu_quadform(n, i1, "real" if kind == "VR" else "imag")
        else:
            raise StructuralError(f"unknown measurement kind {kind!r}")
        self._cache[key] = form
        return form

    def measurement(self, kind, i1, i2, value, sigma, timestamp, source) -> Measurement:
        idx = (i1, i2) if kind in BRANCH_KINDS else (i1,)
        return Measurement(self.form(kind, i1, i2), float(value), float(sigma), float(timestamp), source, kind, idx)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_measurements_csv(measurements, path_or_buf):
    """Write measurements in the fixed column order; floats use ``repr``."""
    own = not hasattr(path_or_buf, "write")
    fh = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for m in measurements:
            i2 = m.index[1] if len(m.index) > 1 else ""
            writer.writerow([_fmt(m.timestamp), m.source, m.kind, m.index[0], i2, _fmt(m.value), _fmt(m.base_sigma)])
    finally:
        if own:
            fh.close()


def read_measurements_csv(path, model: NetworkModel) -> list[Measurement]:
    return parse_measurements(Path(path).read_text(), model)


def parse_measurements(text: str, model: NetworkModel) -> list[Measurement]:
    """Parse measurement CSV text; errors carry the 1-based line number."""
    reader = csv.reader(io.StringIO(text))
    catalog = FormCatalog(model)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise ParseError("empty measurement file", 1) from None
    if tuple(header) != CSV_COLUMNS:
        raise ParseError(f"expected header {','.join(CSV_COLUMNS)}", 1)
    out = []
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(CSV_COLUMNS):
            raise ParseError(f"expected {len(CSV_COLUMNS)} fields, got {len(row)}", line)
        ts, source, kind, i1, i2, value, sigma = (c.strip() for c in row)
        try:
            kind = kind.upper()
            if kind not in KINDS:
                raise ValueError(f"unknown kind {kind!r}")
            idx2 = int(i2) if kind in BRANCH_KINDS else None
            out.append(catalog.measurement(kind, int(i1), idx2, float(value), float(sigma), float(ts), source.lower()))
        except (ValueError, StructuralError) as exc:
            raise ParseError(str(exc), line) from exc
    return out


def latest_snapshot(measurements, now: float) -> MeasurementSnapshot:
    """PMU samples at the latest PMU time <= now plus the latest SCADA set.

    Older SCADA sets are discarded once a newer one exists.
    """
    pmu = [m for m in measurements if m.source == "pmu" and m.timestamp <= now]
    scada = [m for m in measurements if m.source == "scada" and m.timestamp <= now]
    chosen = []
    if pmu:
        t_pmu = max(m.timestamp for m in pmu)
        chosen += [m for m in pmu if m.timestamp == t_pmu]
    if scada:
        t_scada = max(m.timestamp for m in scada)
        chosen += [m for m in scada if m.timestamp == t_scada]
    return MeasurementSnapshot(tuple(chosen), now)


def unobserved_buses(snapshot: MeasurementSnapshot, rel_tol: float = 1e-9) -> list[int]:
    """Buses whose voltage is not pinned down by the snapshot (1-based).

    Rank check of the measurement Jacobian at a generic near-flat point.
    Without any PMU sample there is no angle reference, so the global
    rotation direction is not counted against observability.
    """
    n = snapshot.n_buses
    rows = np.array([m.form.coeff.ravel() for m in snapshot.measurements])
    system = QuadraticSystem(rows, np.zeros(len(rows)))
    v = np.concatenate([np.ones(n), np.zeros(n)]) + 1e-2 * np.random.default_rng(0).standard_normal(2 * n)
    jac = jacobian(system, v)
    _, s, vt = np.linalg.svd(jac, full_matrices=True)
    rank = int(np.sum(s > rel_tol * (s[0] if s.size else 1.0)))
    null = vt[rank:].T
    if not any(m.source == "pmu" for m in snapshot.measurements) and null.shape[1]:
        rot = np.concatenate([-v[n:], v[:n]])
        rot /= np.linalg.norm(rot)
        null = null - np.outer(rot, rot @ null)
    weight = np.hypot(np.linalg.norm(null[:n], axis=1), np.linalg.norm(null[n:], axis=1))
    return [b + 1 for b in range(n) if weight[b] > 1e-6]


def check_observable(snapshot: MeasurementSnapshot) -> None:
    missing = unobserved_buses(snapshot)
    if missing:
        raise ObservabilityError(f"{len(missing)} unobserved buses: {missing}", missing)
