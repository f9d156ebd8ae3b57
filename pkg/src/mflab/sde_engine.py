"""Euler time stepping of the interacting particle system.

Three coupling modes for the measure argument of the drift: the ensemble's
own empirical law (mean_field), a fixed measure (frozen), and a supplied
time-indexed flow of measures (external_flow).

Randomness is counter-based: the (N, d) normal block of step s is a pure
function of (seed, s), generated from a Philox stream keyed by
(stream_id, seed) with the step index in the high counter word.  Particle i
owns row i of the block, so the noise a particle sees never depends on how
the update loop is scheduled, and any step can be reproduced in isolation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .model import (
    DiffusionField,
    DriftField,
    EmpiricalMeasure,
    InitLaw,
    InteractionKernel,
    ScenarioConfig,
    ValidationError,
    frozen_drift,
    mean_field_drift,
)

# stream ids carve up the Philox key space per purpose
STREAM_DYNAMICS = 0
STREAM_INIT = 1
STREAM_COUPLE_REFL = 2
STREAM_COUPLE_SYNC = 3
STREAM_INIT_ALT = 4


class EngineError(RuntimeError):
    """A particle left the finite range during stepping."""


def philox_generator(seed: int, stream: int, step: int = 0) -> np.random.Generator:
    """Generator positioned at (seed, stream, step) in the counter space.

    The 128-bit key is (stream << 64) | seed; the step index sits in the
    top 64-bit counter word, leaving 2^192 draws per step before overlap.
    """
    key = (int(stream) << 64) | int(seed)
    counter = int(step) << 192
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def step_noise(seed: int, step: int, n: int, d: int,
               stream: int = STREAM_DYNAMICS) -> np.ndarray:
    """The (n, d) standard-normal block for one step.

    Row i is the same for every ensemble size >= i+1 (prefix property), so
    subsetting particles does not change the noise the survivors see.
    """
    return philox_generator(seed, stream, step).standard_normal((n, d))


@dataclass(frozen=True)
class ParticleEnsemble:
    """Simulation state: positions, clock, and per-particle stream cursor."""

    positions: np.ndarray
    t: float
    stream_cursor: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=np.float64)
        if p.ndim != 2:
            raise ValidationError("ensemble positions must be N x d")
        if not np.all(np.isfinite(p)):
            raise ValidationError("ensemble positions must be finite")
        if self.t < 0:
            raise ValidationError("ensemble time must be nonnegative")
        c = np.asarray(self.stream_cursor, dtype=np.int64)
        if c.shape != (p.shape[0],):
            raise ValidationError("stream_cursor must have one entry per particle")
        object.__setattr__(self, "positions", np.ascontiguousarray(p))
        object.__setattr__(self, "stream_cursor", np.ascontiguousarray(c))

    @classmethod
    def fresh(cls, positions: np.ndarray, t: float = 0.0) -> "ParticleEnsemble":
        p = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        return cls(positions=p, t=float(t),
                   stream_cursor=np.zeros(p.shape[0], dtype=np.int64))

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    @property
    def step_index(self) -> int:
        return int(self.stream_cursor[0]) if self.n else 0

    def as_measure(self) -> EmpiricalMeasure:
        return EmpiricalMeasure.from_samples(self.positions)


@dataclass(frozen=True)
class MeasureMode:
    """How the drift's measure argument is resolved during stepping."""

    tag: str
    frozen_mu: Optional[EmpiricalMeasure] = None
    flow: Tuple[Tuple[float, EmpiricalMeasure], ...] = ()

    def __post_init__(self):
        if self.tag not in ("mean_field", "frozen", "external_flow"):
            raise ValidationError(f"unknown measure mode {self.tag!r}")
        if self.tag == "frozen" and self.frozen_mu is None:
            raise ValidationError("frozen mode needs a measure")
        if self.tag == "external_flow":
            if not self.flow:
                raise ValidationError("external_flow mode needs snapshots")
            times = [t for t, _ in self.flow]
            if any(b <= a for a, b in zip(times, times[1:])):
                raise ValidationError("external_flow times must strictly increase")
            if times[0] > 1e-12:
                raise ValidationError("external_flow must start at time 0")

    @classmethod
    def mean_field(cls) -> "MeasureMode":
        return cls(tag="mean_field")

    @classmethod
    def frozen(cls, mu: EmpiricalMeasure) -> "MeasureMode":
        return cls(tag="frozen", frozen_mu=mu)

    @classmethod
    def external_flow(cls, snapshots: Sequence[Tuple[float, EmpiricalMeasure]]
                      ) -> "MeasureMode":
        return cls(tag="external_flow",
                   flow=tuple((float(t), m) for t, m in snapshots))

    def measure_at(self, t: float) -> Optional[EmpiricalMeasure]:
        """The frozen measure, or the flow snapshot nearest below t."""
        if self.tag == "frozen":
            return self.frozen_mu
        if self.tag == "external_flow":
            idx = 0
            for i, (ti, _) in enumerate(self.flow):
                if ti <= t + 1e-12:
                    idx = i
                else:
                    break
            return self.flow[idx][1]
        return None


def _check_finite(positions: np.ndarray, t: float):
    if np.all(np.isfinite(positions)):
        return
    bad = np.argwhere(~np.isfinite(positions))
    i = int(bad[0, 0])
    raise EngineError(
        f"particle {i} became non-finite at time {t:.6g}; "
        "reduce dt or set a drift cap"
    )


def em_step(ensemble: ParticleEnsemble, drift: DriftField,
            kernel: InteractionKernel, mode: MeasureMode,
            diffusion: DiffusionField, dt: float, noise: np.ndarray,
            drift_cap: Optional[float] = None) -> ParticleEnsemble:
    """One explicit Euler step of every particle.

    noise is the (N, d) standard-normal block for this step; the caller owns
    noise generation so the step itself is a pure function.
    """
    if dt <= 0:
        raise ValidationError("em_step: dt must be positive")
    pos = ensemble.positions
    if noise.shape != pos.shape:
        raise ValidationError(
            f"em_step: noise shape {noise.shape} != positions {pos.shape}"
        )
    total = drift.evaluate(pos)
    if not kernel.is_zero:
        if mode.tag == "mean_field":
            total = total + mean_field_drift(kernel, pos)
        else:
            mu = mode.measure_at(ensemble.t)
            total = total + frozen_drift(kernel, pos, mu)
    if drift_cap is not None:
        mag = np.sqrt(np.sum(total * total, axis=1))
        over = mag > drift_cap
        if np.any(over):
            total = total.copy()
            total[over] *= (drift_cap / mag[over])[:, None]
    new_pos = pos + total * dt + diffusion.apply_noise(pos, noise) * np.sqrt(dt)
    t_next = ensemble.t + dt
    _check_finite(new_pos, t_next)
    return ParticleEnsemble(positions=new_pos, t=t_next,
                            stream_cursor=ensemble.stream_cursor + 1)


def sample_init(law: InitLaw, N: int, d: int, seed: int,
                stream: int = STREAM_INIT) -> EmpiricalMeasure:
    """Draw N iid points of the initial law, deterministically in seed."""
    if law.dim != d:
        raise ValidationError(f"init law dimension {law.dim} != d={d}")
    gen = philox_generator(seed, stream)
    if law.kind == "dirac":
        pts = np.tile(np.asarray(law.point, dtype=np.float64), (N, 1))
    elif law.kind == "uniform_box":
        lo = np.asarray(law.low, dtype=np.float64)
        hi = np.asarray(law.high, dtype=np.float64)
        pts = lo + gen.random((N, d)) * (hi - lo)
    else:
        mean = np.asarray(law.mean, dtype=np.float64)
        cov = np.asarray(law.cov, dtype=np.float64)
        ev, evec = np.linalg.eigh((cov + cov.T) / 2)
        if ev[0] < -1e-12:
            raise ValidationError("gaussian init law: covariance not PSD")
        root = evec @ np.diag(np.sqrt(np.clip(ev, 0.0, None))) @ evec.T
        pts = mean + gen.standard_normal((N, d)) @ root.T
    return EmpiricalMeasure.from_samples(pts)


def simulate(config: ScenarioConfig, drift: DriftField,
             kernel: InteractionKernel, mode: MeasureMode,
             diffusion: DiffusionField
             ) -> List[Tuple[float, EmpiricalMeasure]]:
    """Run the scenario and return (time, measure) snapshots.

    Snapshot requests are mapped to the nearest step boundary; the recorded
    time is the grid time actually reached.  Pure in (config, fields): same
    inputs give byte-identical outputs.
    """
    n_steps = int(round(config.T_end / config.dt))
    capture: dict = {}
    for t in config.snapshot_times:
        s = int(round(t / config.dt))
        s = min(max(s, 0), n_steps)
        capture.setdefault(s, s * config.dt)
    init = sample_init(config.init_law, config.N, config.d, config.seed)
    ens = ParticleEnsemble.fresh(init.samples, t=0.0)
    out: List[Tuple[float, EmpiricalMeasure]] = []
    if 0 in capture:
        out.append((0.0, ens.as_measure()))
    for s in range(n_steps):
        xi = step_noise(config.seed, s, config.N, config.d)
        ens = em_step(ens, drift, kernel, mode, diffusion, config.dt, xi,
                      drift_cap=config.drift_cap)
        if (s + 1) in capture:
            out.append((capture[s + 1], ens.as_measure()))
    return out


# ---------------------------------------------------------------------------
# snapshot export

_MAGIC = b"MFLB"
_BIN_VERSION = 1


def save_snapshots_csv(path, snapshots: Sequence[Tuple[float, EmpiricalMeasure]]):
    """Write snapshots as CSV with columns time, particle_index, x_1..x_d."""
    if not snapshots:
        raise ValidationError("no snapshots to save")
    d = snapshots[0][1].dim
    header = "time,particle_index," + ",".join(f"x_{j+1}" for j in range(d))
    with open(path, "w", newline="\n") as fh:
        fh.write(header + "\n")
        for t, mu in snapshots:
            for i in range(mu.n):
                coords = ",".join(repr(float(v)) for v in mu.samples[i])
                fh.write(f"{t!r},{i},{coords}\n")


def load_snapshots_csv(path) -> List[Tuple[float, EmpiricalMeasure]]:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header[:2] != ["time", "particle_index"]:
            raise ValidationError(f"{path}: not a snapshot CSV")
        d = len(header) - 2
        groups: List[Tuple[float, list]] = []
        for line in fh:
            parts = line.rstrip("\n").split(",")
            t = float(parts[0])
            row = [float(v) for v in parts[2:2 + d]]
            if not groups or groups[-1][0] != t:
                groups.append((t, []))
            groups[-1][1].append(row)
    return [(t, EmpiricalMeasure.from_samples(np.array(rows)))
            for t, rows in groups]


def save_snapshots_binary(path, snapshots: Sequence[Tuple[float, EmpiricalMeasure]]):
    """Compact dump: magic 'MFLB', then uint32 version, d, N, count (all
    little-endian), then per snapshot a float64 time followed by N*d float64
    positions in row-major order."""
    if not snapshots:
        raise ValidationError("no snapshots to save")
    d = snapshots[0][1].dim
    n = snapshots[0][1].n
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III I", _BIN_VERSION, d, n, len(snapshots)))
        for t, mu in snapshots:
            if mu.dim != d or mu.n != n:
                raise ValidationError("binary dump requires uniform snapshot shapes")
            fh.write(struct.pack("<d", t))
            fh.write(np.ascontiguousarray(mu.samples, dtype="<f8").tobytes())


def load_snapshots_binary(path) -> List[Tuple[float, EmpiricalMeasure]]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValidationError(f"{path}: bad magic {magic!r}")
        version, d, n, count = struct.unpack("<III I", fh.read(16))
        if version != _BIN_VERSION:
            raise ValidationError(f"{path}: unsupported version {version}")
        out = []
        for _ in range(count):
            (t,) = struct.unpack("<d", fh.read(8))
            a = np.frombuffer(fh.read(8 * n * d), dtype="<f8").reshape(n, d)
            out.append((t, EmpiricalMeasure.from_samples(a.copy())))
    return out
