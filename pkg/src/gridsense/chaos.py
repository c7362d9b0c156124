"""Delay embedding, correlation dimension, Lyapunov exponents and event alarms.

All exponents are returned per sample unless a sample rate is supplied, in
which case they are per second so that ``1 / exponent`` is a window in
seconds.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy import stats
from scipy.spatial import cKDTree

from .errors import DimensionUndefinedError, ExponentUndefinedError, InsufficientDataError

BRUTE_FORCE_MAX = 2000
LYAP_METHODS = ("kantz", "rosenstein")
SCALING_REGIONS = ("run", "full")


@dataclass(frozen=True)
class EmbeddingConfig:
    dim: int = 2
    delay: int = 1
    theiler: int = 0

    def __post_init__(self):
        if self.dim < 1 or self.delay < 1 or self.theiler < 0:
            raise ValueError("dim and delay must be >= 1 and theiler >= 0")


@dataclass(frozen=True)
class ChaosReport:
    dimension: float
    dim_stderr: float
    lyapunov: float | None
    relevancy_window_s: float
    alarm: bool
    window: tuple[float, float]
    actions: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["window"] = list(self.window)
        doc["actions"] = list(self.actions)
        if math.isinf(self.relevancy_window_s):
            doc["relevancy_window_s"] = None
        for key in ("dimension", "dim_stderr"):
            if isinstance(doc[key], float) and math.isnan(doc[key]):
                doc[key] = None
        return doc


def relevancy_window(lyap: float | None) -> float:
    """``1 / lyap`` for positive exponents, unbounded otherwise."""
    if lyap is None or not lyap > 0:
        return math.inf
    return 1.0 / lyap


# -- embedding ---------------------------------------------------------------


def delay_embed(series, cfg: EmbeddingConfig) -> np.ndarray:
    s = np.asarray(series, float).ravel()
    span = (cfg.dim - 1) * cfg.delay
    count = s.size - span
    if count < 1:
        raise InsufficientDataError(f"series of length {s.size} too short for dim={cfg.dim}, delay={cfg.delay}")
    return np.stack([s[k * cfg.delay : k * cfg.delay + count] for k in range(cfg.dim)], axis=1)


def autocorrelation_time(series, threshold: float = math.exp(-1)) -> int:
    """First lag at which the sample autocorrelation drops below ``threshold``."""
    s = np.asarray(series, float).ravel()
    s = s - s.mean()
    var = float(s @ s)
    if var == 0.0:
        return 1
    n = s.size
    spec = np.fft.rfft(s, 2 * n)
    acf = np.fft.irfft(spec * np.conj(spec))[:n] / var
    below = np.nonzero(acf < threshold)[0]
    return int(below[0]) if below.size else n - 1


def auto_embedding(series, max_dim: int = 6, tol: float = 0.1) -> EmbeddingConfig:
    """Delay from the autocorrelation time; dim where the dimension stabilises."""
    acf = autocorrelation_time(series)
    tau = max(1, acf)
    theiler = round(acf / tau)
    prev = None
    best = EmbeddingConfig(1, tau, theiler)
    for dim in range(1, max_dim + 1):
        cfg = EmbeddingConfig(dim, tau, theiler)
        try:
            d, _ = correlation_dimension(series, cfg)
        except (InsufficientDataError, DimensionUndefinedError):
            break
        best = cfg
        if prev is not None and abs(d - prev) < tol * max(prev, 1e-12):
            return EmbeddingConfig(dim - 1, tau, theiler)
        prev = d
    return best


# -- correlation sum ---------------------------------------------------------


def _admissible_pairs(n: int, theiler: int) -> int:
    k = n - 1 - theiler
    return k * (k + 1) // 2 if k > 0 else 0


def _band_distances(points: np.ndarray, theiler: int) -> np.ndarray:
    parts = [np.linalg.norm(points[lag:] - points[:-lag], axis=1) for lag in range(1, theiler + 1) if lag < len(points)]
    return np.concatenate(parts) if parts else np.empty(0)


def correlation_sums(points, epsilons, theiler: int = 0) -> np.ndarray:
    """Fraction of pairs with ``|i - j| > theiler`` and distance ``<= eps``.

    Small point sets are counted exactly from all pairwise distances; larger
    ones use a k-d tree with the Theiler band subtracted explicitly.
    """
    x = np.asarray(points, float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    total = _admissible_pairs(n, theiler)
    if total < 1:
        raise InsufficientDataError(f"no admissible pairs among {n} points with theiler={theiler}")
    eps = np.atleast_1d(np.asarray(epsilons, float))
    if n <= BRUTE_FORCE_MAX:
        i, j = np.triu_indices(n, k=theiler + 1)
        d = np.sort(np.linalg.norm(x[i] - x[j], axis=1))
        counts = np.searchsorted(d, eps, side="right")
    else:
        tree = cKDTree(x)
        ordered = tree.count_neighbors(tree, eps)
        counts = (np.asarray(ordered) - n) // 2
        band = np.sort(_band_distances(x, theiler))
        counts = counts - np.searchsorted(band, eps, side="right")
    return counts / total


def correlation_sum(points, epsilon: float, theiler: int = 0) -> float:
    return float(correlation_sums(points, [epsilon], theiler)[0])


def _distance_percentiles(x: np.ndarray, theiler: int, q=(1.0, 99.0), sample: int = 200_000) -> np.ndarray:
    n = x.shape[0]
    if n <= BRUTE_FORCE_MAX:
        i, j = np.triu_indices(n, k=theiler + 1)
        d = np.linalg.norm(x[i] - x[j], axis=1)
    else:
        rng = np.random.default_rng(0)
        i = rng.integers(0, n, sample)
        j = rng.integers(0, n, sample)
        keep = np.abs(i - j) > theiler
        d = np.linalg.norm(x[i[keep]] - x[j[keep]], axis=1)
    return np.percentile(d, q)


def _scaling_run(slopes: np.ndarray, min_points: int, rel_tol: float):
    best = None
    m = slopes.size
    for a in range(m):
        for b in range(a + min_points - 2, m):
            seg = slopes[a : b + 1]
            med = np.median(seg)
            if med <= 0 or np.any(np.abs(seg - med) >= rel_tol * med):
                continue
            if best is None or (b - a) > (best[1] - best[0]):
                best = (a, b)
    return best


def dimension_from_points(
    points,
    theiler: int = 0,
    n_eps: int = 24,
    min_points: int = 5,
    rel_tol: float = 0.25,
    c_max: float = 0.2,
    eps_min: float = 0.0,
    region: str = "run",
):
    """Correlation dimension ``(d, stderr)`` of a point cloud.

    ``C(eps)`` is sampled at ``n_eps`` log-spaced radii between the 1st and
    99th percentile of admissible pair distances.  Radii with ``C > c_max``
    sit in the saturation regime, where the finite extent of the cloud bends
    the curve, and are dropped.  The scaling region is the longest contiguous
    run of at least ``min_points`` remaining radii whose local slopes all lie
    within ``rel_tol`` of the run's median slope; ``d`` is the least-squares
    slope of ``log C`` on ``log eps`` there.  ``region="full"`` fits every
    remaining radius instead.  That estimate moves continuously with the data,
    whereas the run search can jump between two runs of similar length, which
    matters for short, noisy windows.

    ``eps_min`` raises the lower end of the radius range, typically to a few
    times the measurement noise so that scales dominated by sensor noise do
    not enter the fit.
    """
    x = np.asarray(points, float)
    if x.ndim == 1:
        x = x[:, None]
    if _admissible_pairs(x.shape[0], theiler) < 2:
        raise InsufficientDataError("fewer than two admissible pairs")
    lo, hi = _distance_percentiles(x, theiler)
    lo = max(lo, eps_min)
    if not (lo > 0 and hi > lo):
        raise DimensionUndefinedError("degenerate pair-distance distribution")
    eps = np.geomspace(lo, hi, n_eps)
    c = correlation_sums(x, eps, theiler)
    ok = (c > 0) & (c < 1)
    if ok.sum() < 8:
        raise InsufficientDataError(f"only {int(ok.sum())} radii with 0 < C < 1")
    ok &= c <= c_max
    if ok.sum() < min_points:
        raise DimensionUndefinedError(f"only {int(ok.sum())} radii below the saturation cut C <= {c_max}")
    le, lc = np.log(eps[ok]), np.log(c[ok])
    slopes = np.diff(lc) / np.diff(le)
    if region not in SCALING_REGIONS:
        raise ValueError(f"region must be one of {SCALING_REGIONS}, not {region!r}")
    run = _scaling_run(slopes, min_points, rel_tol) if region == "run" else (0, slopes.size - 1)
    if run is None:
        raise DimensionUndefinedError("no scaling region in the correlation sum")
    a, b = run
    fit = stats.linregress(le[a : b + 2], lc[a : b + 2])
    return float(fit.slope), float(fit.stderr)


def correlation_dimension(series, cfg: EmbeddingConfig, **kwargs):
    return dimension_from_points(delay_embed(series, cfg), cfg.theiler, **kwargs)


# -- Lyapunov exponent -------------------------------------------------------


def _linear_region(curve: np.ndarray, frac: float = 0.5, min_len: int = 3) -> int:
    """End index of the initial stretch whose local slopes keep ``frac`` of the first one."""
    d = np.diff(curve)
    if d.size < min_len or d[0] <= 0:
        return min(curve.size - 1, max(min_len, curve.size - 1))
    end = 1
    while end < d.size and d[end] >= frac * d[0]:
        end += 1
    return max(end, min_len)


def stretching_curve(series, cfg: EmbeddingConfig, radius: float, horizon: int, method: str = "kantz"):
    """Average log-separation of initially close trajectories, ``h = 0..horizon``.

    ``kantz`` averages distances over all neighbours within ``radius`` before
    taking the log; ``rosenstein`` follows the single nearest neighbour.
    Returns ``(curve, n_references)``.
    """
    if method not in LYAP_METHODS:
        raise ValueError(f"method must be one of {LYAP_METHODS}, not {method!r}")
    x = delay_embed(series, cfg)
    usable = x.shape[0] - horizon
    if usable < 2:
        raise InsufficientDataError("series too short for the requested horizon")
    base = x[:usable]
    tree = cKDTree(base)
    sums = np.zeros(horizon + 1)
    n_ref = 0
    for i in range(usable):
        if method == "kantz":
            nbrs = [j for j in tree.query_ball_point(base[i], radius) if abs(j - i) > cfg.theiler]
        else:
            k = min(usable, 2 * cfg.theiler + 3)
            dists, idx = tree.query(base[i], k=k)
            nbrs = [j for dj, j in zip(np.atleast_1d(dists), np.atleast_1d(idx)) if abs(j - i) > cfg.theiler and dj <= radius][:1]
        if not nbrs:
            continue
        nb = np.asarray(nbrs)
        offsets = np.arange(horizon + 1)
        sep = np.linalg.norm(x[i + offsets][None, :, :] - x[nb[:, None] + offsets[None, :]], axis=2)
        mean_sep = sep.mean(axis=0)
        if np.any(mean_sep <= 0):
            continue
        sums += np.log(mean_sep)
        n_ref += 1
    if n_ref == 0:
        raise ExponentUndefinedError(f"no neighbours within radius {radius:g}")
    return sums / n_ref, n_ref


def lyapunov_exponent(
    series,
    cfg: EmbeddingConfig,
    sample_rate: float | None = None,
    horizon: int = 12,
    radii=None,
    min_references: int = 20,
    method: str = "kantz",
    skip: int = 0,
) -> float:
    """Maximal Lyapunov exponent from the slope of the stretching curve.

    Radii are tried from small to large (default: 0.5% .. 20% of the embedded
    cloud's standard deviation) and the first one giving ``min_references``
    reference points is used.  The slope is fitted over the initial stretch
    of the curve that keeps at least half its initial growth rate.

    ``skip`` drops the first steps of the curve before fitting.  With noisy
    samples the first step mostly measures the noise spread of the neighbours,
    and ``skip=1`` removes it.
    """
    if method not in LYAP_METHODS:
        raise ValueError(f"method must be one of {LYAP_METHODS}, not {method!r}")
    if not 0 <= skip < horizon - 1:
        raise ValueError("skip must lie in [0, horizon - 1)")
    s = np.asarray(series, float).ravel()
    if s.size - (cfg.dim - 1) * cfg.delay < 100:
        raise InsufficientDataError("need at least 100 embedded points")
    spread = float(np.std(s))
    if spread == 0.0:
        return 0.0
    if radii is None:
        radii = spread * np.array([0.005, 0.01, 0.02, 0.05, 0.1, 0.2])
    curve = None
    for r in radii:
        try:
            curve, n_ref = stretching_curve(s, cfg, float(r), horizon, method)
        except ExponentUndefinedError:
            continue
        if n_ref >= min_references:
            break
    if curve is None:
        raise ExponentUndefinedError("too few neighbours at every radius")
    tail = curve[skip:]
    end = _linear_region(tail)
    h = np.arange(end + 1)
    slope = float(np.polyfit(h, tail[: end + 1], 1)[0])
    return slope * sample_rate if sample_rate else slope


# -- situational awareness ---------------------------------------------------


@dataclass(frozen=True)
class AwarenessConfig:
    """Detector settings.

    ``max_window_s`` caps the analysed window to the most recent samples so
    that a change is not diluted by a long history; ``None`` lets the window
    grow from ``tau_init``.  ``c_max``, ``eps_min`` and ``region`` are
    forwarded to :func:`dimension_from_points`; the defaults fit one slope
    over every radius with ``C <= 0.5`` so that short windows give stable
    estimates.
    """

    embedding: EmbeddingConfig = EmbeddingConfig(2, 2, 1)
    sample_rate: float = 30.0
    dim_threshold: float = 0.3
    min_window_s: float = 2.0
    lyap_horizon: int = 12
    lyap_method: str = "kantz"
    lyap_skip: int = 1
    max_window_s: float | None = 2.0
    c_max: float = 0.5
    eps_min: float = 0.0
    region: str = "full"

    def __post_init__(self):
        if self.sample_rate <= 0 or self.dim_threshold <= 0 or self.min_window_s < 0:
            raise ValueError("sample_rate and dim_threshold must be positive, min_window_s nonnegative")
        if self.max_window_s is not None and self.max_window_s < self.min_window_s:
            raise ValueError("max_window_s must be at least min_window_s")
        if not 0 < self.c_max <= 1:
            raise ValueError("c_max must lie in (0, 1]")
        if self.region not in SCALING_REGIONS:
            raise ValueError(f"region must be one of {SCALING_REGIONS}")


@dataclass(frozen=True)
class AwarenessState:
    tau_init: float = 0.0
    last_dimension: float | None = None
    phase: str = "watching"
    period: int | None = None


def awareness_step(state: AwarenessState, times, series, t: float, cfg: AwarenessConfig | None = None):
    """Run one pass of the detection procedure at time ``t``.

    The correlation dimension of the samples in ``[tau_init, t]`` is compared
    with the previous value.  A change above ``dim_threshold`` raises an
    alarm, moves ``tau_init`` to ``t`` and triggers the exponent estimate on
    the window that contained the change.  The exponent sign picks the
    estimator action.  Windows too short to analyse leave the state as is.

    Returns ``(new_state, report, actions)``; ``report`` is ``None`` for a
    no-op step.
    """
    cfg = AwarenessConfig() if cfg is None else cfg
    times = np.asarray(times, float)
    series = np.asarray(series, float)
    start = state.tau_init if cfg.max_window_s is None else max(state.tau_init, t - cfg.max_window_s)
    window = series[(times >= start) & (times <= t)]
    if t - state.tau_init < cfg.min_window_s:
        return state, None, ()
    try:
        d, err = correlation_dimension(window, cfg.embedding, c_max=cfg.c_max, eps_min=cfg.eps_min, region=cfg.region)
    except (InsufficientDataError, DimensionUndefinedError):
        return state, None, ()

    if state.last_dimension is None or abs(d - state.last_dimension) <= cfg.dim_threshold:
        new_state = replace(state, last_dimension=d, phase="watching")
        report = ChaosReport(d, err, None, math.inf, False, (start, t))
        return new_state, report, ()

    try:
        lyap = lyapunov_exponent(
            window, cfg.embedding, cfg.sample_rate, cfg.lyap_horizon, method=cfg.lyap_method, skip=cfg.lyap_skip
        )
    except (InsufficientDataError, ExponentUndefinedError):
        lyap = None
    if lyap is not None and lyap > 0:
        actions = ("prefer_fresh_scada", "reduce_old_scada_weight_period1", "run_estimator")
        period = 1
    else:
        actions = ("reduce_scada_weight", "run_estimator")
        period = 3
    new_state = AwarenessState(tau_init=t, last_dimension=None, phase="alarmed", period=period)
    report = ChaosReport(d, err, lyap, relevancy_window(lyap), True, (start, t), actions)
    return new_state, report, actions
