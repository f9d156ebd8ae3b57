"""Domain model: drifts, diffusions, interaction kernels, sample measures.

The types here are plain frozen dataclasses validated at construction.  The
central quantity is the localized integral norm of a kernel (its "strength"),
computed by midpoint quadrature over a lattice of unit balls.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from ._kernels import _g_batch_numpy, frozen_drift_raw, mean_field_drift_raw


class ValidationError(ValueError):
    """Raised when a domain object fails its construction-time checks."""


def _as_float_array(x, name, shape=None):
    arr = np.asarray(x, dtype=np.float64)
    if shape is not None and arr.shape != shape:
        raise ValidationError(f"{name}: expected shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name}: contains non-finite entries")
    return arr


# ---------------------------------------------------------------------------
# drift


@dataclass(frozen=True)
class DriftField:
    """State-dependent drift with declared dissipativity and Lipschitz bounds.

    K is the long-distance dissipativity constant, R the radius beyond which
    the dissipativity inequality is guaranteed, L a global Lipschitz bound.
    The declared constants are checked by sampling in the test suite, not at
    construction (for kind "custom_parametric" they are taken on trust).
    """

    kind: str
    K: float
    R: float
    L: float
    base_pull: float = 0.0
    well_amplitude: float = 0.0
    well_width: float = 1.0
    func: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if self.kind not in ("linear", "double_well", "custom_parametric"):
            raise ValidationError(f"unknown drift kind {self.kind!r}")
        if not (self.K > 0 and np.isfinite(self.K)):
            raise ValidationError("drift: K must be positive and finite")
        if self.R < 0:
            raise ValidationError("drift: R must be nonnegative")
        if not (self.L > 0 and np.isfinite(self.L)):
            raise ValidationError("drift: L must be positive and finite")
        if self.kind == "linear" and (self.R != 0.0 or self.L != self.K):
            raise ValidationError("linear drift requires R = 0 and L = K")
        if self.kind == "custom_parametric" and self.func is None:
            raise ValidationError("custom_parametric drift requires func")

    @classmethod
    def linear(cls, K: float) -> "DriftField":
        """b(x) = -K x."""
        return cls(kind="linear", K=float(K), R=0.0, L=float(K))

    @classmethod
    def double_well(cls, K: float, amplitude: float,
                    width: float = 1.0) -> "DriftField":
        """Linear pull -2K x plus an outward bump A x exp(-|x|^2 / 2 s^2).

        With amplitude A > 2K the origin is repelling and the radial part has
        stable rings, which is the interesting non-convex regime.  The
        declared constants are provable for this family:

            dissipativity K with onset radius R = 2 A s e^{-1/2} / K,
            Lipschitz L = 2K + A.

        The first follows from |x e^{-|x|^2/2s^2}| <= s e^{-1/2}, the second
        from the gradient bound |grad(x g(|x|))| <= 1 for this profile.
        """
        A = float(amplitude)
        s = float(width)
        if A < 0 or s <= 0:
            raise ValidationError("double_well: amplitude >= 0, width > 0")
        K = float(K)
        return cls(
            kind="double_well",
            K=K,
            R=2.0 * A * s * math.exp(-0.5) / K,
            L=2.0 * K + A,
            base_pull=2.0 * K,
            well_amplitude=A,
            well_width=s,
        )

    @classmethod
    def custom(cls, func, K: float, R: float, L: float) -> "DriftField":
        return cls(kind="custom_parametric", K=float(K), R=float(R),
                   L=float(L), func=func)

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Evaluate on a single point (d,) or a batch (N, d)."""
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "linear":
            return -self.K * x
        if self.kind == "double_well":
            sq = np.sum(x * x, axis=-1, keepdims=x.ndim > 1)
            g = np.exp(-sq / (2.0 * self.well_width ** 2))
            return (self.well_amplitude * g - self.base_pull) * x
        return np.asarray(self.func(x), dtype=np.float64)


# ---------------------------------------------------------------------------
# diffusion


@dataclass(frozen=True)
class DiffusionField:
    """Diffusion coefficient sigma with its operator-norm bookkeeping.

    sigma_sup bounds |sigma(x)|, sigma_inv_sup bounds |sigma(x)^{-1}|, and
    a_min lower-bounds the spectrum of a = sigma sigma^T, all uniformly in x.
    """

    kind: str
    d: int
    sigma_sup: float
    sigma_inv_sup: float
    a_min: float
    matrix: Optional[np.ndarray] = None
    scalar: float = 0.0
    base: float = 0.0
    amplitude: float = 0.0
    frequency: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "smooth_bounded"):
            raise ValidationError(f"unknown diffusion kind {self.kind!r}")
        if self.a_min <= 0:
            raise ValidationError("diffusion must be uniformly elliptic (a_min > 0)")

    @classmethod
    def constant(cls, sigma, d: int) -> "DiffusionField":
        """State-independent sigma, either a scalar multiple of I or a d x d matrix."""
        if np.isscalar(sigma):
            s = float(sigma)
            if s <= 0:
                raise ValidationError("constant scalar diffusion must be positive")
            return cls(kind="constant", d=d, sigma_sup=s, sigma_inv_sup=1.0 / s,
                       a_min=s * s, scalar=s)
        m = _as_float_array(sigma, "sigma", shape=(d, d))
        sv = np.linalg.svd(m, compute_uv=False)
        if sv[-1] <= 0:
            raise ValidationError("constant matrix diffusion must be invertible")
        return cls(kind="constant", d=d, sigma_sup=float(sv[0]),
                   sigma_inv_sup=float(1.0 / sv[-1]), a_min=float(sv[-1] ** 2),
                   matrix=m)

    @classmethod
    def smooth(cls, base: float, amplitude: float, frequency: float,
               d: int) -> "DiffusionField":
        """sigma(x) = (base + amplitude * sin(frequency * x_1)) I.

        Requires base > amplitude >= 0 so ellipticity holds everywhere.
        """
        base = float(base)
        amplitude = float(amplitude)
        if not (base > amplitude >= 0):
            raise ValidationError("smooth diffusion needs base > amplitude >= 0")
        lo = base - amplitude
        return cls(kind="smooth_bounded", d=d, sigma_sup=base + amplitude,
                   sigma_inv_sup=1.0 / lo, a_min=lo * lo, base=base,
                   amplitude=amplitude, frequency=float(frequency))

    @property
    def is_state_dependent(self) -> bool:
        return self.kind == "smooth_bounded"

    def scale_at(self, x: np.ndarray) -> np.ndarray:
        """Scalar multiplier of the identity at each state; (N,) for (N, d) input."""
        x = np.atleast_2d(x)
        if self.kind == "constant":
            if self.matrix is not None:
                raise ValidationError("matrix diffusion has no scalar scale")
            return np.full(x.shape[0], self.scalar)
        return self.base + self.amplitude * np.sin(self.frequency * x[:, 0])

    def apply_noise(self, x: np.ndarray, xi: np.ndarray) -> np.ndarray:
        """Compute sigma(x) applied to each row of xi; shapes (N, d)."""
        if self.kind == "constant":
            if self.matrix is not None:
                return xi @ self.matrix.T
            return self.scalar * xi
        return self.scale_at(x)[:, None] * xi


# ---------------------------------------------------------------------------
# interaction kernel


_MODE_CODES = {"radial_unit": 0, "componentwise": 1}


@dataclass(frozen=True)
class InteractionKernel:
    """Convolution interaction h with a power singularity at each offset.

    Per offset z the magnitude is c / (1 ∧ |x-z|^beta_sing), clamped at
    radius eps_cap, and zero exactly at x = z.  Mode fixes the direction:
    radial_unit points along (x-z)/|x-z|, componentwise applies the magnitude
    to the sign pattern of x-z scaled by 1/sqrt(d).  Mode "zero" is the
    interaction-free kernel.
    """

    mode: str
    d: int
    c: float = 0.0
    beta_sing: float = 0.0
    offsets: Tuple[Tuple[float, ...], ...] = ()
    k: float = np.inf
    eps_cap: float = 1e-3

    def __post_init__(self):
        if self.mode not in ("radial_unit", "componentwise", "zero"):
            raise ValidationError(f"unknown kernel mode {self.mode!r}")
        if self.d < 1:
            raise ValidationError("kernel: d >= 1 required")
        if self.mode == "zero":
            return
        if not (self.c > 0 and np.isfinite(self.c)):
            raise ValidationError("kernel: c must be positive and finite")
        if self.beta_sing < 0:
            raise ValidationError("kernel: beta_sing must be nonnegative")
        if not self.k > self.d:
            raise ValidationError(
                f"kernel: integrability index k must exceed d (k={self.k}, d={self.d})"
            )
        if self.beta_sing * self.k >= self.d:
            raise ValidationError(
                "kernel: beta_sing * k must be strictly below d "
                f"(got {self.beta_sing} * {self.k} vs d={self.d})"
            )
        if not (self.eps_cap > 0):
            raise ValidationError("kernel: eps_cap must be positive")
        if len(self.offsets) == 0:
            raise ValidationError("kernel: at least one offset required")
        for z in self.offsets:
            if len(z) != self.d:
                raise ValidationError("kernel: offset dimension mismatch")
            if not all(np.isfinite(v) for v in z):
                raise ValidationError("kernel: non-finite offset")

    @classmethod
    def radial(cls, c: float, beta_sing: float, k: float, d: int,
               offsets: Optional[Sequence[Sequence[float]]] = None,
               eps_cap: float = 1e-3) -> "InteractionKernel":
        if offsets is None:
            offsets = [tuple(0.0 for _ in range(d))]
        offs = tuple(tuple(float(v) for v in z) for z in offsets)
        return cls(mode="radial_unit", d=d, c=float(c),
                   beta_sing=float(beta_sing), offsets=offs, k=float(k),
                   eps_cap=float(eps_cap))

    @classmethod
    def componentwise(cls, c: float, beta_sing: float, k: float, d: int,
                      offsets: Optional[Sequence[Sequence[float]]] = None,
                      eps_cap: float = 1e-3) -> "InteractionKernel":
        if offsets is None:
            offsets = [tuple(0.0 for _ in range(d))]
        offs = tuple(tuple(float(v) for v in z) for z in offsets)
        return cls(mode="componentwise", d=d, c=float(c),
                   beta_sing=float(beta_sing), offsets=offs, k=float(k),
                   eps_cap=float(eps_cap))

    @classmethod
    def zero(cls, d: int) -> "InteractionKernel":
        return cls(mode="zero", d=d)

    @property
    def is_zero(self) -> bool:
        return self.mode == "zero"

    def offsets_array(self) -> np.ndarray:
        if self.mode == "zero":
            return np.zeros((1, self.d))
        return np.asarray(self.offsets, dtype=np.float64)

    @property
    def mode_code(self) -> int:
        return _MODE_CODES[self.mode]


def eval_kernel(kernel: InteractionKernel, x: np.ndarray) -> np.ndarray:
    """Evaluate h at a point (d,) or a batch of points (M, d)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    if pts.shape[1] != kernel.d:
        raise ValidationError(f"eval_kernel: expected dimension {kernel.d}")
    if kernel.is_zero:
        out = np.zeros_like(pts)
        return out[0] if single else out
    offs = kernel.offsets_array()
    out = np.zeros_like(pts)
    for o in range(offs.shape[0]):
        out += _g_batch_numpy(pts - offs[o], kernel.c, kernel.beta_sing,
                              kernel.eps_cap, kernel.mode_code)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# empirical measures


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Weighted sample cloud standing in for a probability measure."""

    samples: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 2 or s.shape[0] == 0:
            raise ValidationError("measure: samples must be a nonempty N x d array")
        if not np.all(np.isfinite(s)):
            raise ValidationError("measure: non-finite sample coordinates")
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (s.shape[0],):
            raise ValidationError("measure: weights shape mismatch")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValidationError("measure: weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValidationError("measure: weights must sum to 1 within 1e-12")
        object.__setattr__(self, "samples", np.ascontiguousarray(s))
        object.__setattr__(self, "weights", np.ascontiguousarray(w))

    @classmethod
    def from_samples(cls, samples: np.ndarray) -> "EmpiricalMeasure":
        s = np.atleast_2d(np.asarray(samples, dtype=np.float64))
        n = s.shape[0]
        return cls(samples=s, weights=np.full(n, 1.0 / n))

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def mean(self) -> np.ndarray:
        return self.weights @ self.samples


def interaction_drift(kernel: InteractionKernel, x: np.ndarray,
                      mu: EmpiricalMeasure) -> np.ndarray:
    """Drift contribution at point x from the measure: sum_j w_j h(x - y_j).

    Reference implementation with a fixed summation order (offsets outer,
    atoms reduced by numpy's deterministic pairwise sum).  The engine uses
    the compiled equivalents from _kernels for large ensembles.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValidationError("interaction_drift expects a single point")
    if kernel.is_zero:
        return np.zeros_like(x)
    diff = x[None, :] - mu.samples
    offs = kernel.offsets_array()
    out = np.zeros_like(x)
    for o in range(offs.shape[0]):
        g = _g_batch_numpy(diff - offs[o], kernel.c, kernel.beta_sing,
                           kernel.eps_cap, kernel.mode_code)
        out += mu.weights @ g
    return out


def mean_field_drift(kernel: InteractionKernel, positions: np.ndarray) -> np.ndarray:
    """Self-interaction drift of an unweighted ensemble, diagonal excluded.

    Row i gets (1/N) sum over j != i of h(x_i - x_j).  Dispatches to the
    active backend.
    """
    if kernel.is_zero:
        return np.zeros_like(np.asarray(positions, dtype=np.float64))
    return mean_field_drift_raw(positions, kernel.offsets_array(), kernel.c,
                                kernel.beta_sing, kernel.eps_cap,
                                kernel.mode_code)


def frozen_drift(kernel: InteractionKernel, positions: np.ndarray,
                 mu: EmpiricalMeasure) -> np.ndarray:
    """Drift of a batch of points against a fixed measure, via the backend."""
    if kernel.is_zero:
        return np.zeros_like(np.asarray(positions, dtype=np.float64))
    return frozen_drift_raw(positions, mu.samples, mu.weights,
                            kernel.offsets_array(), kernel.c, kernel.beta_sing,
                            kernel.eps_cap, kernel.mode_code)


# ---------------------------------------------------------------------------
# localized L^k norm


@dataclass(frozen=True)
class Field:
    """Descriptor of a scalar or vector field for the localized norm.

    func maps an (M, d) batch of points to (M,) scalars or (M, d) vectors;
    box = (lo, hi) bounds the region containing all non-negligible mass.
    """

    func: Callable[[np.ndarray], np.ndarray]
    d: int
    box: Tuple[Tuple[float, ...], Tuple[float, ...]]


def _ball_quadrature_offsets(d: int, q: int):
    """Midpoints of a regular grid on [-1, 1]^d restricted to the unit ball.

    Returns (points, cell_volume).  Midpoints never sit exactly at the
    origin, which keeps singular integrands evaluable.
    """
    axis = -1.0 + (2.0 * np.arange(q) + 1.0) / q
    if d == 1:
        pts = axis[:, None]
    else:
        grids = np.meshgrid(*([axis] * d), indexing="ij")
        pts = np.stack([g.ravel() for g in grids], axis=1)
        pts = pts[np.sum(pts * pts, axis=1) <= 1.0]
    return pts, (2.0 / q) ** d


def localized_lk_norm(f: Field, k: float, lattice_spacing: float = 0.25,
                      quad_points_per_axis: int = 64) -> float:
    """Largest L^k norm of f over unit balls centered on a covering lattice.

    The lattice covers f's declared box plus one unit of margin, anchored at
    integer multiples of the spacing.  Each ball integral uses the midpoint
    rule with quad_points_per_axis points per axis.  k = inf returns the
    sampled sup of |f|.

    Raises ValidationError if f evaluates non-finite inside some ball; the
    message names the offending center.
    """
    if not (k > 1):
        raise ValidationError("localized norm needs k > 1")
    if not (0 < lattice_spacing <= 1):
        raise ValidationError("lattice_spacing must lie in (0, 1]")
    if quad_points_per_axis < 2:
        raise ValidationError("need at least 2 quadrature points per axis")
    d = f.d
    lo = np.asarray(f.box[0], dtype=np.float64) - 1.0
    hi = np.asarray(f.box[1], dtype=np.float64) + 1.0
    axes = []
    for l in range(d):
        i0 = math.floor(lo[l] / lattice_spacing)
        i1 = math.ceil(hi[l] / lattice_spacing)
        axes.append(lattice_spacing * np.arange(i0, i1 + 1))
    if d == 1:
        centers = axes[0][:, None]
    else:
        grids = np.meshgrid(*axes, indexing="ij")
        centers = np.stack([g.ravel() for g in grids], axis=1)
    offs, vol = _ball_quadrature_offsets(d, quad_points_per_axis)
    best = 0.0
    for z in centers:
        vals = np.asarray(f.func(z[None, :] + offs), dtype=np.float64)
        if vals.ndim == 2:
            vals = np.sqrt(np.sum(vals * vals, axis=1))
        else:
            vals = np.abs(vals)
        if not np.all(np.isfinite(vals)):
            raise ValidationError(
                f"field evaluated non-finite inside the ball centered at {z}"
            )
        if np.isinf(k):
            cur = float(vals.max())
        else:
            cur = float(np.sum(vals ** k) * vol) ** (1.0 / k)
        if cur > best:
            best = cur
    return best


def kernel_eta(kernel: InteractionKernel, lattice_spacing: float = 0.25,
               quad_points: int = 64) -> float:
    """Localized L^k size of the kernel, the strength fed to smallness checks."""
    if kernel.is_zero:
        return 0.0
    offs = kernel.offsets_array()
    field = Field(
        func=lambda pts: eval_kernel(kernel, pts),
        d=kernel.d,
        box=(tuple(offs.min(axis=0)), tuple(offs.max(axis=0))),
    )
    return localized_lk_norm(field, kernel.k, lattice_spacing, quad_points)


# ---------------------------------------------------------------------------
# scenario configuration


@dataclass(frozen=True)
class InitLaw:
    """Initial law: gaussian(mean, cov), dirac(x), or uniform_box(low, high)."""

    kind: str
    mean: Optional[Tuple[float, ...]] = None
    cov: Optional[Tuple[Tuple[float, ...], ...]] = None
    point: Optional[Tuple[float, ...]] = None
    low: Optional[Tuple[float, ...]] = None
    high: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.kind not in ("gaussian", "dirac", "uniform_box"):
            raise ValidationError(f"unknown init law {self.kind!r}")
        if self.kind == "gaussian" and (self.mean is None or self.cov is None):
            raise ValidationError("gaussian init law needs mean and cov")
        if self.kind == "dirac" and self.point is None:
            raise ValidationError("dirac init law needs a point")
        if self.kind == "uniform_box" and (self.low is None or self.high is None):
            raise ValidationError("uniform_box init law needs low and high")

    @classmethod
    def gaussian(cls, mean, cov) -> "InitLaw":
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        d = mean.shape[0]
        cov = np.asarray(cov, dtype=np.float64)
        if cov.ndim == 0:
            cov = float(cov) * np.eye(d)
        if cov.shape != (d, d):
            raise ValidationError("gaussian init: cov shape mismatch")
        ev = np.linalg.eigvalsh((cov + cov.T) / 2)
        if ev[0] < -1e-12:
            raise ValidationError("gaussian init: cov must be positive semidefinite")
        return cls(kind="gaussian", mean=tuple(mean),
                   cov=tuple(tuple(row) for row in cov))

    @classmethod
    def dirac(cls, point) -> "InitLaw":
        p = np.atleast_1d(np.asarray(point, dtype=np.float64))
        return cls(kind="dirac", point=tuple(p))

    @classmethod
    def uniform_box(cls, low, high) -> "InitLaw":
        lo = np.atleast_1d(np.asarray(low, dtype=np.float64))
        hi = np.atleast_1d(np.asarray(high, dtype=np.float64))
        if lo.shape != hi.shape or np.any(hi < lo):
            raise ValidationError("uniform_box init: need low <= high, same shape")
        return cls(kind="uniform_box", low=tuple(lo), high=tuple(hi))

    @property
    def dim(self) -> int:
        for v in (self.mean, self.point, self.low):
            if v is not None:
                return len(v)
        raise ValidationError("init law carries no dimension")

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        for name in ("mean", "cov", "point", "low", "high"):
            v = getattr(self, name)
            if v is not None:
                out[name] = np.asarray(v).tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "InitLaw":
        kind = data.get("kind")
        if kind == "gaussian":
            return cls.gaussian(data["mean"], data["cov"])
        if kind == "dirac":
            return cls.dirac(data["point"])
        if kind == "uniform_box":
            return cls.uniform_box(data["low"], data["high"])
        raise ValidationError(f"unknown init law {kind!r}")


@dataclass(frozen=True)
class ScenarioConfig:
    """Inputs of one simulation run, serializable as a flat dictionary."""

    d: int
    N: int
    dt: float
    T_end: float
    seed: int
    init_law: InitLaw
    snapshot_times: Tuple[float, ...] = ()
    drift_cap: Optional[float] = None

    def __post_init__(self):
        if self.d < 1:
            raise ValidationError("config: d >= 1 required")
        if self.N < 1:
            raise ValidationError("config: N >= 1 required")
        if not (self.dt > 0):
            raise ValidationError("config: dt must be positive")
        if self.T_end < 0:
            raise ValidationError("config: T_end must be nonnegative")
        if not (0 <= self.seed < 2 ** 64):
            raise ValidationError("config: seed must fit in 64 bits")
        for t in self.snapshot_times:
            if t < 0 or t > self.T_end + 1e-12:
                raise ValidationError(
                    f"config: snapshot time {t} outside [0, T_end]"
                )
        if self.init_law.dim != self.d:
            raise ValidationError("config: init law dimension mismatch")
        if self.drift_cap is not None and not (self.drift_cap > 0):
            raise ValidationError("config: drift_cap must be positive when set")

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "N": self.N,
            "dt": self.dt,
            "T_end": self.T_end,
            "seed": self.seed,
            "init_law": self.init_law.to_dict(),
            "snapshot_times": list(self.snapshot_times),
            "drift_cap": self.drift_cap,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        return cls(
            d=int(data["d"]),
            N=int(data["N"]),
            dt=float(data["dt"]),
            T_end=float(data["T_end"]),
            seed=int(data["seed"]),
            init_law=InitLaw.from_dict(data["init_law"]),
            snapshot_times=tuple(float(t) for t in data.get("snapshot_times", [])),
            drift_cap=(None if data.get("drift_cap") is None
                       else float(data["drift_cap"])),
        )

    def replace(self, **kw) -> "ScenarioConfig":
        return dataclasses.replace(self, **kw)
