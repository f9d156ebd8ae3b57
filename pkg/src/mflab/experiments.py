"""End-to-end decay experiments.

The self-consistent stationary law is not available in closed form outside
the noninteracting case, so ergodicity is measured between two flows started
from different initial laws (their mutual distance obeys the same
exponential envelope), and entropy decay is measured against either an
exact Gaussian reference or a long pre-run surrogate of the stationary law.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .metrics import (DistanceSeries, EstimatorError, GaussianRef,
                      gaussian_w2, kstar_distance, relative_entropy,
                      wasserstein_p)
from .model import (DiffusionField, DriftField, EmpiricalMeasure, InitLaw,
                    InteractionKernel, ScenarioConfig, ValidationError)
from .sde_engine import MeasureMode, simulate

TWIN_SEED_OFFSET_A = 511151
TWIN_SEED_OFFSET_B = 761773
PRE_RUN_SEED_OFFSET = 424243
DEFAULT_SNAPSHOT_COUNT = 40


def log_spaced_snapshots(T_end: float, dt: float,
                         count: int = DEFAULT_SNAPSHOT_COUNT
                         ) -> Tuple[float, ...]:
    """Snapshot schedule, log-spaced so the early transient is resolved.

    Times are snapped to the step grid and deduplicated, so the returned
    tuple can be shorter than `count`.
    """
    if T_end <= 0 or dt <= 0:
        raise ValidationError("schedule needs positive horizon and step")
    n_steps = max(1, int(round(T_end / dt)))
    raw = np.geomspace(max(dt, T_end / 200.0), T_end, count)
    steps = np.unique(np.clip(np.round(raw / dt).astype(np.int64), 1,
                              n_steps))
    return tuple(float(s * dt) for s in steps)


def _mean_field_snapshots(config, drift, kernel, diffusion):
    mode = MeasureMode.mean_field()
    return simulate(config, drift, kernel, mode, diffusion)


def _series_from_snapshot_pairs(pairs, metrics, k, bandwidth, cell_size,
                                entropy_ref=None):
    times = []
    w1s = []
    w2s = []
    kss = []
    ents = []
    want_kstar = "kstar" in metrics
    want_entropy = "entropy" in metrics and entropy_ref is not None
    for t, mu, nu in pairs:
        times.append(t)
        w1s.append(float(wasserstein_p(mu, nu, 1))
                   if "w1" in metrics else math.nan)
        w2s.append(float(wasserstein_p(mu, nu, 2))
                   if "w2" in metrics else math.nan)
        if want_kstar:
            kss.append(kstar_distance(mu, nu, k, bandwidth=bandwidth,
                                      cell_size=cell_size))
        if want_entropy:
            ents.append(relative_entropy(mu, entropy_ref,
                                         bandwidth=bandwidth))
    return DistanceSeries(
        times=tuple(times), w1=tuple(w1s), w2=tuple(w2s),
        kstar=tuple(kss) if want_kstar else None,
        entropy=tuple(ents) if want_entropy else None)


def run_ergodicity(config: ScenarioConfig, drift: DriftField,
                   kernel: InteractionKernel, diffusion: DiffusionField,
                   init_a: InitLaw, init_b: InitLaw,
                   metrics: Sequence[str] = ("w1", "w2", "kstar"),
                   k: Optional[float] = None,
                   bandwidth: Optional[float] = None,
                   cell_size: Optional[float] = None,
                   seed_b: Optional[int] = None) -> DistanceSeries:
    """Distance decay between two interacting flows with independent noise.

    Both flows use the same particle count, step size, and snapshot grid;
    flow A starts from init_a with config.seed, flow B from init_b with
    seed_b (derived from config.seed when not given).  Selected metrics are
    evaluated between same-time snapshots.
    """
    allowed = {"w1", "w2", "kstar"}
    if not set(metrics) <= allowed:
        raise ValidationError(f"metrics must be a subset of {sorted(allowed)}")
    if not metrics:
        raise ValidationError("select at least one metric")
    if init_a.dim != config.d or init_b.dim != config.d:
        raise ValidationError("initial law dimension mismatch")
    snaps = config.snapshot_times or log_spaced_snapshots(config.T_end,
                                                         config.dt)
    if seed_b is None:
        seed_b = (config.seed + TWIN_SEED_OFFSET_B) % 2 ** 64
    cfg_a = replace(config, init_law=init_a, snapshot_times=snaps)
    cfg_b = replace(config, init_law=init_b, snapshot_times=snaps,
                    seed=seed_b)
    snaps_a = _mean_field_snapshots(cfg_a, drift, kernel, diffusion)
    snaps_b = _mean_field_snapshots(cfg_b, drift, kernel, diffusion)
    if len(snaps_a) != len(snaps_b):
        raise RuntimeError("snapshot grids of the two flows disagree")
    if k is None:
        k = float(kernel.k) if not kernel.is_zero else 2.0
    pairs = [(ta, ma, mb) for (ta, ma), (_, mb) in zip(snaps_a, snaps_b)]
    return _series_from_snapshot_pairs(pairs, tuple(metrics), k, bandwidth,
                                       cell_size)


def two_flow_noise_floor(config: ScenarioConfig, drift: DriftField,
                         kernel: InteractionKernel,
                         diffusion: DiffusionField, init_law: InitLaw,
                         metric: str = "w1",
                         k: Optional[float] = None,
                         bandwidth: Optional[float] = None,
                         cell_size: Optional[float] = None) -> float:
    """Monte-Carlo resolution of the two-flow design: run the same law
    twice with independent seeds and take the median distance over the
    second half of the snapshot grid (past the initial transient)."""
    base = config.seed
    series = run_ergodicity(
        replace(config, seed=(base + TWIN_SEED_OFFSET_A) % 2 ** 64),
        drift, kernel, diffusion, init_law, init_law,
        metrics=(metric,), k=k, bandwidth=bandwidth, cell_size=cell_size,
        seed_b=(base + TWIN_SEED_OFFSET_B + 1) % 2 ** 64)
    vals = _series_values(series, metric)
    half = len(vals) // 2
    return float(np.median(vals[half:]))


# ---------------------------------------------------------------------------
# rate fitting


@dataclass(frozen=True)
class RateReport:
    """Fitted exponential decay of one metric series.

    lambda_hat is minus the slope of log(value) against time over the
    post-burn-in window; c_hat = exp(intercept) / value(burn_in) expresses
    the fitted level as a multiple of the first window point.  ci bounds
    come from a moving-block bootstrap over the window.
    """

    metric_name: str
    lambda_hat: float
    c_hat: float
    ci_low: float
    ci_high: float
    r_squared: float
    burn_in_used: float
    noise_floor: float
    series: DistanceSeries
    theory_rate: Optional[float] = None
    theory_prefactor: Optional[float] = None

    def to_json_dict(self) -> dict:
        return {
            "metric": self.metric_name,
            "lambda_hat": self.lambda_hat,
            "c_hat": self.c_hat,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "r2": self.r_squared,
            "noise_floor": self.noise_floor,
            "theory_rate": self.theory_rate,
            "theory_prefactor": self.theory_prefactor,
        }


def _series_values(series: DistanceSeries, metric: str) -> np.ndarray:
    if metric == "w1":
        return np.asarray(series.w1, dtype=np.float64)
    if metric == "w2":
        return np.asarray(series.w2, dtype=np.float64)
    if metric == "kstar":
        if series.kstar is None:
            raise ValidationError("series has no kstar column")
        return np.asarray([e.midpoint for e in series.kstar])
    if metric == "combined":
        if series.kstar is None:
            raise ValidationError("series has no kstar column")
        return np.asarray([w + e.midpoint
                           for w, e in zip(series.w1, series.kstar)])
    if metric == "entropy":
        if series.entropy is None:
            raise ValidationError("series has no entropy column")
        return np.asarray(series.entropy, dtype=np.float64)
    raise ValidationError(f"unknown metric {metric!r}")


def fit_rate(series: DistanceSeries, metric: str = "w1",
             burn_in: Optional[float] = None,
             floor: Optional[float] = None, noise_floor: float = 0.0,
             theory_rate: Optional[float] = None,
             theory_prefactor: Optional[float] = None,
             bootstrap: int = 400, bootstrap_seed: int = 0) -> RateReport:
    """Log-linear decay fit with floor truncation and a bootstrap CI.

    The window starts at burn_in (default: 10% of the horizon) and is
    truncated before the first value within 3x the configured floor
    (default floor: 2x the supplied noise floor), so the fit never uses
    points indistinguishable from Monte-Carlo error.  At least 3 window
    points must exceed 10x the floor, otherwise EstimatorError reports the
    usable window.  The CI resamples contiguous time blocks, which respects
    the autocorrelation of simulation snapshots.
    """
    times = np.asarray(series.times, dtype=np.float64)
    values = _series_values(series, metric)
    if np.any(~np.isfinite(values)):
        raise ValidationError(f"metric {metric!r} has non-finite entries")
    if burn_in is None:
        burn_in = 0.1 * float(times[-1])
    if floor is None:
        floor = 2.0 * noise_floor
    mask = times >= burn_in - 1e-12
    t_w = times[mask]
    v_w = values[mask]
    cut = len(v_w)
    for i, v in enumerate(v_w):
        if v <= max(3.0 * floor, 0.0):
            cut = i
            break
    t_w, v_w = t_w[:cut], v_w[:cut]
    strong = int(np.sum(v_w > 10.0 * floor)) if floor > 0 \
        else int(np.sum(v_w > 0))
    if len(t_w) < 3 or strong < 3:
        lo = float(t_w[0]) if len(t_w) else float(burn_in)
        hi = float(t_w[-1]) if len(t_w) else float(burn_in)
        raise EstimatorError(
            f"usable window [{lo:.4g}, {hi:.4g}] has {strong} points above "
            f"10x floor ({10.0 * floor:.4g}); need at least 3")
    log_v = np.log(v_w)
    slope, intercept = np.polyfit(t_w, log_v, 1)
    lam = -float(slope)
    resid = log_v - (slope * t_w + intercept)
    ss_res = float(np.sum(resid ** 2))
    ss_tot = float(np.sum((log_v - log_v.mean()) ** 2))
    r2 = 1.0 if ss_tot <= 1e-30 else max(0.0, 1.0 - ss_res / ss_tot)
    c_hat = float(math.exp(intercept) / v_w[0])

    n = len(t_w)
    block = max(2, n // 4)
    starts = np.arange(n - block + 1)
    rng = np.random.default_rng(bootstrap_seed)
    reps = []
    for _ in range(bootstrap):
        picks = rng.integers(0, len(starts), size=math.ceil(n / block))
        idx = np.concatenate([np.arange(s, s + block) for s in picks])[:n]
        bs, _ = np.polyfit(t_w[idx], log_v[idx], 1)
        reps.append(-bs)
    ci_low, ci_high = np.percentile(reps, [2.5, 97.5])
    return RateReport(
        metric_name=metric, lambda_hat=lam, c_hat=c_hat,
        ci_low=float(ci_low), ci_high=float(ci_high), r_squared=float(r2),
        burn_in_used=float(burn_in), noise_floor=float(noise_floor),
        series=series, theory_rate=theory_rate,
        theory_prefactor=theory_prefactor)


# ---------------------------------------------------------------------------
# entropy decay


def _sample_gaussian_fit(positions: np.ndarray) -> GaussianRef:
    mean = positions.mean(axis=0)
    centered = positions - mean
    cov = centered.T @ centered / (positions.shape[0] - 1)
    return GaussianRef(mean=mean, cov=np.atleast_2d(cov))


def run_entropy_decay(config: ScenarioConfig, drift: DriftField,
                      kernel: InteractionKernel, diffusion: DiffusionField,
                      gaussian_fit: bool = False,
                      reference: Optional[Union[EmpiricalMeasure,
                                                GaussianRef]] = None,
                      pre_run_time: Optional[float] = None,
                      bandwidth: Optional[float] = None,
                      burn_in: Optional[float] = None,
                      noise_floor: float = 0.0,
                      theory_rate: Optional[float] = None,
                      bootstrap_seed: int = 0) -> RateReport:
    """Relative-entropy decay toward the stationary law.

    Requires constant diffusion and d <= 2.  The reference is resolved in
    this order: an explicit `reference`; the exact Gaussian stationary law
    when the scenario is noninteracting with linear pull and scalar noise;
    otherwise the terminal ensemble of a long pre-run started from the same
    scenario (seed derived from config.seed).

    gaussian_fit=True replaces the KDE plug-in by moment-fitted Gaussians
    on both sides, which is exact for the noninteracting linear scenario
    and is the low-variance path for near-Gaussian laws.  The returned
    report fits the entropy column; the series also carries W1 and W2
    against the same reference.
    """
    if diffusion.kind != "constant":
        raise ValidationError("entropy decay requires constant diffusion")
    if config.d > 2:
        raise ValidationError("entropy decay supports d <= 2")
    snaps_times = config.snapshot_times or log_spaced_snapshots(
        config.T_end, config.dt)
    cfg = replace(config, snapshot_times=snaps_times)

    ref: Union[EmpiricalMeasure, GaussianRef]
    if reference is not None:
        ref = reference
    elif kernel.is_zero and drift.kind == "linear" \
            and diffusion.matrix is None:
        var = diffusion.scalar ** 2 / (2.0 * drift.K)
        ref = GaussianRef(mean=np.zeros(config.d),
                          cov=var * np.eye(config.d))
    else:
        if pre_run_time is None:
            pre_run_time = 4.0 * config.T_end + 10.0 / max(
                drift.base_pull, 0.25)
        pre_cfg = replace(
            config, T_end=pre_run_time, snapshot_times=(pre_run_time,),
            seed=(config.seed + PRE_RUN_SEED_OFFSET) % 2 ** 64)
        pre_snaps = _mean_field_snapshots(pre_cfg, drift, kernel, diffusion)
        ref = pre_snaps[-1][1]

    snaps = _mean_field_snapshots(cfg, drift, kernel, diffusion)
    times = []
    w1s = []
    w2s = []
    ents = []
    for t, mu in snaps:
        times.append(t)
        if gaussian_fit:
            g_mu = _sample_gaussian_fit(mu.samples)
            g_ref = ref if isinstance(ref, GaussianRef) \
                else _sample_gaussian_fit(ref.samples)
            ents.append(relative_entropy(g_mu, g_ref))
            w2s.append(gaussian_w2(g_mu.mean, g_mu.cov, g_ref.mean,
                                   g_ref.cov))
            w1s.append(math.nan)
        else:
            ents.append(relative_entropy(mu, ref, bandwidth=bandwidth))
            if isinstance(ref, GaussianRef):
                w1s.append(math.nan)
                w2s.append(math.nan)
            else:
                w1s.append(float(wasserstein_p(mu, ref, 1)))
                w2s.append(float(wasserstein_p(mu, ref, 2)))
    series = DistanceSeries(times=tuple(times), w1=tuple(w1s),
                            w2=tuple(w2s), kstar=None, entropy=tuple(ents))
    return fit_rate(series, metric="entropy", burn_in=burn_in,
                    noise_floor=noise_floor, theory_rate=theory_rate,
                    bootstrap_seed=bootstrap_seed)
