"""Fixed-point iteration on the frozen-interaction map.

The map takes a measure, freezes it inside the interaction drift, runs the
resulting linear SDE to near-stationarity, and returns the terminal ensemble.
Iterating it is the constructive route to the self-consistent law, and the
recorded gap ratios are the empirical contraction certificate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np

from ._kernels import frozen_drift_raw, interp_table
from .metrics import CombinedResult, combined_w
from .model import (DiffusionField, DriftField, EmpiricalMeasure,
                    InteractionKernel, ScenarioConfig, ValidationError)
from .sde_engine import (STREAM_DYNAMICS, MeasureMode, ParticleEnsemble,
                         sample_init, simulate, step_noise)

FLOOR_SEED_OFFSET_A = 7919
FLOOR_SEED_OFFSET_B = 104729


def rate_constants(eta: float, k: float, d: int, c1: float = 1.0,
                   c: float = 1.0) -> Tuple[float, float]:
    """Explicit constants (t_eta, M_eta) used in convergence reporting.

    t_eta = ((k - d) / (4 k c1 (1 v eta)))^(2k/(k-d)) shrinks as the kernel
    norm grows; M_eta = c (1 v eta)^(d/(k-d)) grows with it.  c1 and c are
    existence-level inputs, defaulted to 1 and used only in reports, never
    in dynamics.
    """
    if not k > d:
        raise ValidationError("rate_constants needs k > d")
    if d < 1:
        raise ValidationError("rate_constants needs d >= 1")
    if c1 <= 0 or c <= 0:
        raise ValidationError("rate_constants needs positive c1, c")
    if eta < 0:
        raise ValidationError("eta must be nonnegative")
    peak = max(1.0, eta)
    t_eta = ((k - d) / (4.0 * k * c1 * peak)) ** (2.0 * k / (k - d))
    m_eta = c * peak ** (d / (k - d))
    return float(t_eta), float(m_eta)


class _TabulatedField:
    """Piecewise-linear tabulation of a frozen interaction field (d=1).

    The exact pairwise field is evaluated once on a uniform grid wide enough
    to contain the dynamics, then each step interpolates.  This turns an
    O(N*M) per-step cost into O(N) at a controlled interpolation error, at
    the price of locally mollifying the field at the grid scale.
    """

    def __init__(self, kernel: InteractionKernel, mu: EmpiricalMeasure,
                 lo: float, hi: float, n_points: int):
        if hi <= lo:
            raise ValidationError("tabulation range is empty")
        grid = np.linspace(lo, hi, n_points)
        vals = frozen_drift_raw(
            grid[:, None], mu.samples, mu.weights, kernel.offsets_array(),
            kernel.c, kernel.beta_sing, kernel.eps_cap, kernel.mode_code)
        self.lo = float(lo)
        self.dx = float(grid[1] - grid[0])
        self.table = np.ascontiguousarray(vals[:, 0])

    def __call__(self, x: np.ndarray) -> np.ndarray:
        flat = interp_table(np.ascontiguousarray(x[:, 0]), self.lo, self.dx,
                            self.table)
        return flat[:, None]


def _run_frozen(mu: EmpiricalMeasure, config: ScenarioConfig,
                drift: DriftField, kernel: InteractionKernel,
                diffusion: DiffusionField, burn_in_time: float,
                averaging_time: float, pool_snapshots: int,
                drift_table_points: Optional[int]) -> EmpiricalMeasure:
    total = burn_in_time + averaging_time
    if pool_snapshots == 1:
        snap_times = (total,)
    else:
        snap_times = tuple(
            burn_in_time + averaging_time * j / (pool_snapshots - 1)
            for j in range(pool_snapshots))
    cfg = replace(config, T_end=total, snapshot_times=snap_times)

    use_table = (drift_table_points is not None and config.d == 1
                 and not kernel.is_zero)
    if not use_table:
        mode = MeasureMode.mean_field() if kernel.is_zero \
            else MeasureMode.frozen(mu)
        clouds = [m.samples for _, m in
                  simulate(cfg, drift, kernel, mode, diffusion)]
    else:
        x0 = sample_init(cfg.init_law, cfg.N, cfg.d, cfg.seed).samples
        span = float(np.ptp(np.concatenate([mu.samples[:, 0], x0[:, 0]])))
        margin = 0.5 * span + 6.0 * diffusion.sigma_sup \
            / math.sqrt(2.0 * max(drift.base_pull, 0.25)) + 1.0
        lo = float(min(mu.samples[:, 0].min(), x0[:, 0].min())) - margin
        hi = float(max(mu.samples[:, 0].max(), x0[:, 0].max())) + margin
        table = _TabulatedField(kernel, mu, lo, hi, drift_table_points)
        n_steps = int(round(cfg.T_end / cfg.dt))
        capture = {}
        for t_req in snap_times:
            step = min(n_steps, max(0, int(round(t_req / cfg.dt))))
            capture[step] = step * cfg.dt
        clouds = []
        ens = ParticleEnsemble.fresh(x0)
        if 0 in capture:
            clouds.append(ens.positions.copy())
        for s in range(n_steps):
            xi = step_noise(cfg.seed, s, cfg.N, cfg.d, STREAM_DYNAMICS)
            total_drift = drift.evaluate(ens.positions) + table(ens.positions)
            if cfg.drift_cap is not None:
                norms = np.sqrt(np.sum(total_drift ** 2, axis=1,
                                       keepdims=True))
                scale = np.minimum(1.0, cfg.drift_cap / np.maximum(
                    norms, 1e-300))
                total_drift = total_drift * scale
            pos = ens.positions + total_drift * cfg.dt \
                + diffusion.apply_noise(ens.positions, xi) * math.sqrt(cfg.dt)
            if not np.all(np.isfinite(pos)):
                bad = int(np.argwhere(~np.isfinite(pos))[0][0])
                raise RuntimeError(
                    f"non-finite state for particle {bad} at step {s}")
            ens = ParticleEnsemble(positions=pos, t=(s + 1) * cfg.dt,
                                   stream_cursor=ens.stream_cursor + 1)
            if s + 1 in capture:
                clouds.append(ens.positions.copy())

    return EmpiricalMeasure.from_samples(np.vstack(clouds))


def approx_phi(mu: EmpiricalMeasure, config: ScenarioConfig,
               drift: DriftField, kernel: InteractionKernel,
               diffusion: DiffusionField, burn_in_time: float,
               averaging_time: float, pool_snapshots: int = 1,
               drift_table_points: Optional[int] = None) -> EmpiricalMeasure:
    """One application of the frozen-interaction map.

    Freezes mu inside the interaction term, runs the linear SDE from
    config.init_law for burn_in_time + averaging_time, and returns the
    terminal ensemble.  pool_snapshots > 1 additionally pools equally spaced
    post-burn-in snapshots; pooled snapshots are autocorrelated, so the
    pooled cloud overstates its effective sample size.  burn_in_time should
    be at least 5 relaxation times of the linear part.

    drift_table_points switches the d=1 path to a tabulated interaction
    field (exact pairwise values on that many grid nodes, linear
    interpolation in between).
    """
    if burn_in_time < 0 or averaging_time < 0:
        raise ValidationError("burn-in and averaging times must be >= 0")
    if burn_in_time + averaging_time <= 0:
        raise ValidationError("total simulated time must be positive")
    if pool_snapshots < 1:
        raise ValidationError("pool_snapshots must be >= 1")
    if pool_snapshots > 1 and averaging_time <= 0:
        raise ValidationError("pooling needs a positive averaging window")
    if mu.dim != config.d:
        raise ValidationError("frozen measure dimension mismatch")
    return _run_frozen(mu, config, drift, kernel, diffusion, burn_in_time,
                       averaging_time, pool_snapshots, drift_table_points)


@dataclass(frozen=True)
class PicardSettings:
    """Everything one application of the map needs, plus metric choices."""

    config: ScenarioConfig
    drift: DriftField
    kernel: InteractionKernel
    diffusion: DiffusionField
    burn_in_time: float
    averaging_time: float
    metric_k: Optional[float] = None
    bandwidth: Optional[float] = None
    cell_size: Optional[float] = None
    pool_snapshots: int = 1
    drift_table_points: Optional[int] = None

    def resolved_k(self) -> float:
        if self.metric_k is not None:
            return self.metric_k
        if not self.kernel.is_zero:
            return float(self.kernel.k)
        return 2.0


@dataclass(frozen=True)
class PicardTrace:
    """Record of a fixed-point run: iterates, gaps, ratios, noise floor.

    w_gaps[n] is the combined distance between iterates n and n+1 (so the
    list is one shorter than iterates); ratios[m] = w_gaps[m+1]/w_gaps[m].
    noise_floor is the same combined distance between two independent
    same-law runs of the map, the scale below which gaps are
    indistinguishable from Monte-Carlo error.
    """

    iterates: Tuple[EmpiricalMeasure, ...]
    w_gaps: Tuple[CombinedResult, ...]
    ratios: Tuple[float, ...]
    noise_floor: float
    pool_snapshots: int = 1

    def __post_init__(self):
        if len(self.w_gaps) != len(self.iterates) - 1:
            raise ValidationError("trace needs one gap per adjacent pair")
        if len(self.ratios) != max(0, len(self.w_gaps) - 1):
            raise ValidationError("trace ratio count inconsistent")
        if any(g < 0 for g in self.w_gaps):
            raise ValidationError("gaps must be nonnegative")

    def to_csv(self, path):
        """Columns iterate,w1_gap,kstar_lower,kstar_upper,ratio,noise_floor.
        The ratio column is blank on the first row (no predecessor gap)."""
        with open(path, "w", newline="\n") as fh:
            fh.write("iterate,w1_gap,kstar_lower,kstar_upper,ratio,"
                     "noise_floor\n")
            for i, gap in enumerate(self.w_gaps):
                ratio = "" if i == 0 else repr(self.ratios[i - 1])
                fh.write(f"{i + 1},{gap.w1!r},{gap.kstar.lower!r},"
                         f"{gap.kstar.upper!r},{ratio},"
                         f"{self.noise_floor!r}\n")


def _map_once(mu, s: PicardSettings, seed_override=None) -> EmpiricalMeasure:
    cfg = s.config if seed_override is None \
        else replace(s.config, seed=seed_override)
    return approx_phi(mu, cfg, s.drift, s.kernel, s.diffusion,
                      s.burn_in_time, s.averaging_time,
                      pool_snapshots=s.pool_snapshots,
                      drift_table_points=s.drift_table_points)


def measure_noise_floor(mu0: EmpiricalMeasure, settings: PicardSettings
                        ) -> CombinedResult:
    """Combined distance between two independent same-law applications of
    the map (distinct derived seeds), the Monte-Carlo resolution limit."""
    base = settings.config.seed
    a = _map_once(mu0, settings, (base + FLOOR_SEED_OFFSET_A) % 2 ** 64)
    b = _map_once(mu0, settings, (base + FLOOR_SEED_OFFSET_B) % 2 ** 64)
    return combined_w(a, b, settings.resolved_k(),
                      bandwidth=settings.bandwidth,
                      cell_size=settings.cell_size)


def picard_iterate(mu0: EmpiricalMeasure, n_iters: int,
                   settings: PicardSettings,
                   noise_floor: Optional[float] = None) -> PicardTrace:
    """Iterate the frozen-interaction map n_iters times from mu0.

    Each application reuses the same dynamics seed (common random numbers),
    so successive gaps reflect the map's contraction rather than fresh
    Monte-Carlo noise.  Gaps and ratios are recorded, never asserted; the
    noise floor (measured from twin runs unless supplied) is attached so
    callers can tell genuine gaps from noise.  Fixed iteration count by
    design: gaps bottom out at the floor, so tolerance stopping is moot.
    """
    if n_iters < 2:
        raise ValidationError("picard_iterate needs n_iters >= 2")
    if noise_floor is None:
        noise_floor = float(measure_noise_floor(mu0, settings))
    iterates: List[EmpiricalMeasure] = [mu0]
    gaps: List[CombinedResult] = []
    k = settings.resolved_k()
    current = mu0
    for _ in range(n_iters):
        nxt = _map_once(current, settings)
        gaps.append(combined_w(current, nxt, k,
                               bandwidth=settings.bandwidth,
                               cell_size=settings.cell_size))
        iterates.append(nxt)
        current = nxt
    ratios = tuple(
        float(gaps[i + 1] / gaps[i]) if gaps[i] > 0 else math.inf
        for i in range(len(gaps) - 1))
    return PicardTrace(iterates=tuple(iterates), w_gaps=tuple(gaps),
                       ratios=ratios, noise_floor=float(noise_floor),
                       pool_snapshots=settings.pool_snapshots)
