"""Reflection coupling with a split noise, and the concave rate profile.

The profile psi is the concave solution of

    2 * beta_ell * psi'' + phi(r) * psi' + r = 0,   psi(0) = 0,

with phi(r) = c2 + c3 * r^{-(1-alpha)+} - K * r, realized as the normalized
double integral

    psi(r) = (1 / 2 beta_ell) * int_0^r exp(-Phi(u)/2b) du
                               * int_u^inf s * exp(Phi(s)/2b) ds,

where Phi is the antiderivative of phi (known in closed form) and b is
beta_ell.  Its slope at zero gives the contraction bookkeeping: distances
between coupled paths satisfy E|X_t - Y_t| <= K * psi'(0) * exp(-t/psi'(0))
* E|X_0 - Y_0|, so rate = 1/psi'(0) and prefactor = K * psi'(0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq

from .model import (
    DiffusionField,
    DriftField,
    EmpiricalMeasure,
    InitLaw,
    InteractionKernel,
    ScenarioConfig,
    ValidationError,
    frozen_drift,
)
from .sde_engine import (
    STREAM_COUPLE_REFL,
    STREAM_COUPLE_SYNC,
    STREAM_INIT,
    STREAM_INIT_ALT,
    EngineError,
    sample_init,
    step_noise,
)


class PsiConstructionError(RuntimeError):
    """Quadrature resolution insufficient for the requested profile."""


@dataclass(frozen=True)
class PhiParams:
    """Coefficients of the comparison function phi.

    c2 bounds the distance-independent drift perturbation, c3 the Hoelder
    noise term with exponent alpha in (0, 2), K is the dissipativity rate,
    beta_ell the ellipticity split level.
    """

    c2: float
    c3: float
    K: float
    alpha: float
    beta_ell: float

    def __post_init__(self):
        if self.c2 < 0 or self.c3 < 0:
            raise ValidationError("phi params: c2, c3 must be nonnegative")
        if not (self.K > 0):
            raise ValidationError("phi params: K must be positive")
        if not (0 < self.alpha < 2):
            raise ValidationError("phi params: alpha must lie in (0, 2)")
        if not (self.beta_ell > 0):
            raise ValidationError("phi params: beta_ell must be positive")


def phi(r, params: PhiParams):
    """phi(r) = c2 + c3 * r^{-(1-alpha)+} - K r, defined for r > 0."""
    arr = np.asarray(r, dtype=np.float64)
    if np.any(arr <= 0):
        raise ValidationError("phi requires r > 0")
    p = 1.0 - params.alpha
    if p > 0:
        mid = params.c3 * arr ** (-p)
    else:
        mid = params.c3
    out = params.c2 + mid - params.K * arr
    return float(out) if np.isscalar(r) else out


def phi_antiderivative(u, params: PhiParams):
    """Closed form of Phi(u) = int_0^u phi(v) dv (integrable endpoint)."""
    arr = np.asarray(u, dtype=np.float64)
    if params.alpha < 1:
        mid = params.c3 * arr ** params.alpha / params.alpha
    else:
        mid = params.c3 * arr
    out = params.c2 * arr + mid - 0.5 * params.K * arr * arr
    return float(out) if np.isscalar(u) else out


def phi_root(params: PhiParams) -> float:
    """The radius where phi crosses zero (0 when phi is never positive)."""
    if params.c2 + params.c3 == 0.0:
        return 0.0
    hi = max(1.0, (params.c2 + params.c3) / params.K) + 1.0
    lo = 1e-12
    if phi(lo, params) <= 0:
        return 0.0
    return float(brentq(lambda r: phi(r, params), lo, hi, xtol=1e-14))


@dataclass(frozen=True)
class PsiProfile:
    """Tabulated concave profile with its derived contraction constants."""

    grid: np.ndarray
    values: np.ndarray
    psi_prime_0: float
    r_root: float
    rate: float
    prefactor: float
    params: PhiParams

    def interpolate(self, r):
        return np.interp(r, self.grid, self.values)


def build_psi(params: PhiParams, R_max: Optional[float] = None,
              grid_size: int = 8001) -> PsiProfile:
    """Tabulate psi on [0, R_max] and derive rate and prefactor.

    The antiderivative of phi is closed-form; the two exponential-weighted
    integrals use the composite trapezoid on the tabulation grid, with the
    first cell refined by adaptive quadrature when alpha < 1 (the integrand
    has a fractional-power endpoint there).  The inner tail integral is
    truncated where its integrand falls below 1e-14 of its maximum, which
    happens within r_root + O(sqrt(beta_ell/K)).

    Raises PsiConstructionError if the tabulated profile fails concavity or
    the two-sided linear envelope r/K <= psi(r) <= psi'(0) r.
    """
    if grid_size < 33:
        raise ValidationError("build_psi: grid_size >= 33 required")
    if R_max is None:
        R_max = 10.0 * (params.c2 + params.c3 + 1.0) / params.K
    if R_max <= 0:
        raise ValidationError("build_psi: R_max must be positive")
    r_root = phi_root(params)
    if R_max <= r_root:
        raise ValidationError("build_psi: R_max must exceed the root of phi")
    two_b = 2.0 * params.beta_ell
    h = R_max / (grid_size - 1)
    # past max(R_max, root, 1), Phi decays at least as -K(s-s0)^2/2, so the
    # mass of the inner integrand beyond this tail is below 1e-17 of the
    # value it contributes at R_max
    tail = math.sqrt(160.0 * params.beta_ell / params.K) + 1.0
    s_max = max(R_max, r_root, 1.0,
                (params.c2 + params.c3) / params.K) + tail
    n_ext = max(grid_size, int(math.ceil(s_max / h)) + 1)
    rs = h * np.arange(n_ext)
    big_phi = phi_antiderivative(rs, params)
    phi_peak = float(big_phi.max())
    if phi_peak / two_b > 550.0:
        raise PsiConstructionError(
            "profile would overflow double precision "
            f"(Phi_max / 2 beta = {phi_peak / two_b:.1f}); rescale the problem"
        )
    w = rs * np.exp((big_phi - phi_peak) / two_b)

    def w_exact(s):
        return s * math.exp((phi_antiderivative(s, params) - phi_peak) / two_b)

    # w' and (via the defining ODE) psi'' are closed-form, so both
    # cumulative integrals get Euler-Maclaurin endpoint corrections that
    # lift the composite trapezoid from O(h^2) to O(h^4).  Without them the
    # h^2 error is amplified by the exp(+Phi/2b) rescaling near R_max.
    e1 = params.alpha if params.alpha < 1 else 1.0
    s_phi = params.c2 * rs + params.c3 * rs ** e1 - params.K * rs * rs
    w_prime = np.exp((big_phi - phi_peak) / two_b) * (1.0 + s_phi / two_b)

    seg = 0.5 * (w[1:] + w[:-1]) * h
    trap = np.concatenate([np.cumsum(seg[::-1])[::-1], [0.0]])
    inner = trap - (h * h / 12.0) * (w_prime[-1] - w_prime)
    singular_start = params.alpha < 1 and params.c3 > 0
    if singular_start:
        first, _ = quad(w_exact, 0.0, h, limit=200)
        inner[0] = inner[1] + first
    g = np.exp((phi_peak - big_phi[:grid_size]) / two_b) * \
        inner[:grid_size] / two_b
    grid = rs[:grid_size]
    phi_mid = params.c2 + params.c3 * grid[1:] ** (-max(1.0 - params.alpha,
                                                        0.0)) \
        - params.K * grid[1:]
    g_prime = np.empty(grid_size)
    g_prime[1:] = -(grid[1:] + phi_mid * g[1:]) / two_b
    g_prime[0] = 0.0 if singular_start else \
        -(params.c2 + (params.c3 if params.alpha >= 1 else 0.0)) * g[0] \
        / two_b
    seg_psi = 0.5 * (g[1:] + g[:-1]) * h
    cumtrap = np.concatenate([[0.0], np.cumsum(seg_psi)])
    if singular_start:
        def g_exact(u):
            loc, _ = quad(w_exact, u, h, limit=200)
            scale = math.exp((phi_peak - phi_antiderivative(u, params)) / two_b)
            return scale * (inner[1] + loc) / two_b

        cell, _ = quad(g_exact, 0.0, h, limit=200)
        psi = np.empty(grid_size)
        psi[0] = 0.0
        psi[1:] = cell + (cumtrap[1:] - cumtrap[1]) \
            - (h * h / 12.0) * (g_prime[1:] - g_prime[1])
    else:
        psi = cumtrap - (h * h / 12.0) * (g_prime - g_prime[0])
    psi_prime_0 = float(g[0])

    d2 = psi[:-2] - 2.0 * psi[1:-1] + psi[2:]
    worst = float(d2.max()) if d2.size else 0.0
    if worst > 1e-8:
        raise PsiConstructionError(
            f"concavity residual {worst:.3e} exceeds 1e-8; refine the grid"
        )
    lower = grid / params.K
    upper = psi_prime_0 * grid
    tol = 1e-7 * max(1.0, float(psi[-1])) + 1e-12
    if np.any(psi < lower - tol) or np.any(psi > upper + tol):
        raise PsiConstructionError(
            "linear envelope r/K <= psi <= psi'(0) r violated; refine the grid"
        )
    return PsiProfile(
        grid=grid,
        values=psi,
        psi_prime_0=psi_prime_0,
        r_root=r_root,
        rate=1.0 / psi_prime_0,
        prefactor=params.K * psi_prime_0,
        params=params,
    )


def theoretical_rate(profile: PsiProfile) -> Tuple[float, float]:
    """(rate, prefactor) of the coupled-distance bound
    E|X_t - Y_t| <= prefactor * exp(-rate t) * E|X_0 - Y_0|."""
    return profile.rate, profile.prefactor


def psi_residuals(profile: PsiProfile) -> np.ndarray:
    """Finite-difference residual of 2b psi'' + phi psi' + r at interior nodes."""
    r = profile.grid
    v = profile.values
    h = r[1] - r[0]
    interior = r[1:-1]
    second = (v[2:] - 2.0 * v[1:-1] + v[:-2]) / (h * h)
    first = (v[2:] - v[:-2]) / (2.0 * h)
    return (2.0 * profile.params.beta_ell * second
            + phi(interior, profile.params) * first + interior)


def write_psi_csv(profile: PsiProfile, path):
    """Columns: r, psi, psi_prime (central differences), psi_second_residual.

    The residual column is the defect of 2b psi'' + phi psi' + r = 0; the
    endpoints carry 0.0 there since the identity is not evaluated at the
    boundary.
    """
    r = profile.grid
    v = profile.values
    prime = np.gradient(v, r)
    resid = np.zeros_like(r)
    resid[1:-1] = psi_residuals(profile)
    with open(path, "w", newline="\n") as fh:
        fh.write("r,psi,psi_prime,psi_second_residual\n")
        for j in range(r.shape[0]):
            fh.write(f"{float(r[j])!r},{float(v[j])!r},"
                     f"{float(prime[j])!r},{float(resid[j])!r}\n")


def dissipativity_c2(b0_sup: float, K: float, R: float, L: float) -> float:
    """One valid choice of c2 for a drift with dissipativity (K, R) and
    Lipschitz bound L plus a bounded interaction part.

    Realizes <b(x, mu) - b(y, mu'), e> <= c2 - K |x - y| via
    2 * b0_sup for the interaction difference and (K + L) * R to extend the
    dissipativity inequality below its onset radius.
    """
    if b0_sup < 0 or K <= 0 or R < 0 or L <= 0:
        raise ValidationError("dissipativity_c2: need b0_sup, R >= 0 and K, L > 0")
    return 2.0 * b0_sup + (K + L) * R


# ---------------------------------------------------------------------------
# reflection coupling


def mirror_matrix(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Householder reflection I - 2 e e^T across the hyperplane normal to
    e = (x - y)/|x - y|.  Errors out when x equals y exactly (the coupling
    time; callers switch to synchronous noise)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    diff = x - y
    norm = float(np.sqrt(np.sum(diff * diff)))
    if norm == 0.0:
        raise ValidationError("mirror_matrix undefined at x = y (coupled state)")
    e = diff / norm
    return np.eye(diff.shape[0]) - 2.0 * np.outer(e, e)


@dataclass(frozen=True)
class SigmaSplit:
    """Decomposition a(x) = beta_ell I + sigma_hat(x)^2 of the diffusion."""

    beta_ell: float
    diffusion: DiffusionField
    constant_matrix: Optional[np.ndarray]

    def matrix_at(self, x: np.ndarray) -> np.ndarray:
        if self.constant_matrix is not None:
            return self.constant_matrix
        s = float(self.diffusion.scale_at(np.atleast_2d(x))[0])
        val = s * s - self.beta_ell
        if val < -1e-12:
            raise ValidationError(
                "diffusion a_min overstated: a(x) - beta_ell I not PSD"
            )
        return math.sqrt(max(val, 0.0)) * np.eye(self.diffusion.d)

    def apply(self, x: np.ndarray, xi: np.ndarray) -> np.ndarray:
        """sigma_hat(x) applied rowwise; x and xi are (M, d)."""
        if self.constant_matrix is not None:
            return xi @ self.constant_matrix.T
        s = self.diffusion.scale_at(x)
        val = s * s - self.beta_ell
        if np.any(val < -1e-12):
            raise ValidationError(
                "diffusion a_min overstated: a(x) - beta_ell I not PSD"
            )
        return np.sqrt(np.clip(val, 0.0, None))[:, None] * xi


def split_noise(diffusion: DiffusionField) -> Tuple[float, SigmaSplit]:
    """Split level beta_ell = a_min / 2 and the matched sigma_hat field."""
    beta_ell = diffusion.a_min / 2.0
    const = None
    if diffusion.kind == "constant":
        if diffusion.matrix is not None:
            a = diffusion.matrix @ diffusion.matrix.T
        else:
            a = diffusion.scalar ** 2 * np.eye(diffusion.d)
        ev, evec = np.linalg.eigh(a - beta_ell * np.eye(diffusion.d))
        if ev[0] < -1e-12:
            raise ValidationError(
                "diffusion a_min overstated: a - beta_ell I not PSD"
            )
        const = evec @ np.diag(np.sqrt(np.clip(ev, 0.0, None))) @ evec.T
    return beta_ell, SigmaSplit(beta_ell=beta_ell, diffusion=diffusion,
                                constant_matrix=const)


@dataclass(frozen=True)
class CoupledTrajectories:
    """Snapshots of M coupled pairs plus the per-pair coupling times."""

    times: Tuple[float, ...]
    x_paths: np.ndarray  # (S, M, d)
    y_paths: np.ndarray  # (S, M, d)
    tau: np.ndarray      # (M,), inf where never coupled
    delta_couple: float

    def mean_distance(self) -> np.ndarray:
        gaps = self.x_paths - self.y_paths
        return np.sqrt(np.sum(gaps * gaps, axis=2)).mean(axis=1)

    def x_measure(self, index: int) -> EmpiricalMeasure:
        return EmpiricalMeasure.from_samples(self.x_paths[index])


def default_delta_couple(diffusion: DiffusionField, dt: float) -> float:
    return math.sqrt(dt) * diffusion.sigma_sup / 10.0


def reflection_coupled_pair(config: ScenarioConfig, drift: DriftField,
                            kernel: InteractionKernel,
                            frozen_mu: Optional[EmpiricalMeasure],
                            x0_law: InitLaw, y0_law: InitLaw,
                            diffusion: DiffusionField,
                            delta_couple: Optional[float] = None
                            ) -> CoupledTrajectories:
    """Simulate config.N independent coupled pairs of the frozen-measure SDE.

    Both components share the drift b1 + b0(., frozen_mu).  Before coupling,
    the pair is driven by a common factor reflected across the mirror plane
    plus a synchronous factor; a pair couples at the first step where the
    gap falls below delta_couple, after which the partner is set equal to
    the leader exactly and stays merged.

    When the two initial laws are equal the pair starts from the very same
    draw (coupling time 0); otherwise the partner's start uses a separate
    stream of the same seed.
    """
    M, d, dt = config.N, config.d, config.dt
    if delta_couple is None:
        delta_couple = default_delta_couple(diffusion, dt)
    if delta_couple <= 0:
        raise ValidationError("delta_couple must be positive")
    if not kernel.is_zero and frozen_mu is None:
        raise ValidationError("reflection_coupled_pair needs frozen_mu "
                              "for a nonzero kernel")
    beta_ell, sig_hat = split_noise(diffusion)
    sq_beta = math.sqrt(beta_ell)
    sqdt = math.sqrt(dt)

    x = sample_init(x0_law, M, d, config.seed, stream=STREAM_INIT).samples.copy()
    if y0_law == x0_law:
        y = x.copy()
    else:
        y = sample_init(y0_law, M, d, config.seed,
                        stream=STREAM_INIT_ALT).samples.copy()

    tau = np.full(M, np.inf)
    gap0 = np.sqrt(np.sum((x - y) ** 2, axis=1))
    hit = gap0 < delta_couple
    y[hit] = x[hit]
    tau[hit] = 0.0

    n_steps = int(round(config.T_end / dt))
    capture = {}
    for t in config.snapshot_times:
        s = min(max(int(round(t / dt)), 0), n_steps)
        capture.setdefault(s, s * dt)
    times, xs, ys = [], [], []
    if 0 in capture:
        times.append(capture[0]); xs.append(x.copy()); ys.append(y.copy())

    def total_drift(pos):
        out = drift.evaluate(pos)
        if not kernel.is_zero:
            out = out + frozen_drift(kernel, pos, frozen_mu)
        if config.drift_cap is not None:
            mag = np.sqrt(np.sum(out * out, axis=1))
            over = mag > config.drift_cap
            if np.any(over):
                out = out.copy()
                out[over] *= (config.drift_cap / mag[over])[:, None]
        return out

    for s in range(n_steps):
        xi1 = step_noise(config.seed, s, M, d, stream=STREAM_COUPLE_REFL)
        xi2 = step_noise(config.seed, s, M, d, stream=STREAM_COUPLE_SYNC)
        free = tau == np.inf
        bx = total_drift(x)
        x_new = x + bx * dt + sqdt * (sq_beta * xi1 + sig_hat.apply(x, xi2))
        y_new = x_new.copy()
        if np.any(free):
            yf = y[free]
            diff = x[free] - yf
            norm = np.sqrt(np.sum(diff * diff, axis=1))
            e = diff / norm[:, None]
            refl = xi1[free] - 2.0 * e * np.sum(e * xi1[free], axis=1)[:, None]
            by = total_drift(yf)
            y_new[free] = yf + by * dt + sqdt * (
                sq_beta * refl + sig_hat.apply(yf, xi2[free]))
        t_next = (s + 1) * dt
        gap = np.sqrt(np.sum((x_new - y_new) ** 2, axis=1))
        newly = free & (gap < delta_couple)
        y_new[newly] = x_new[newly]
        tau[newly] = t_next
        if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(y_new))):
            raise EngineError(f"coupled pair non-finite at time {t_next:.6g}")
        x, y = x_new, y_new
        if (s + 1) in capture:
            times.append(capture[s + 1]); xs.append(x.copy()); ys.append(y.copy())

    return CoupledTrajectories(
        times=tuple(times),
        x_paths=np.array(xs) if xs else np.zeros((0, M, d)),
        y_paths=np.array(ys) if ys else np.zeros((0, M, d)),
        tau=tau,
        delta_couple=delta_couple,
    )
