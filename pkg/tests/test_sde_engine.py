import math

import numpy as np
import pytest

from mflab.model import (
    DiffusionField,
    DriftField,
    EmpiricalMeasure,
    InitLaw,
    InteractionKernel,
    ScenarioConfig,
    ValidationError,
)
from mflab.sde_engine import (
    STREAM_DYNAMICS,
    STREAM_INIT,
    EngineError,
    MeasureMode,
    ParticleEnsemble,
    em_step,
    load_snapshots_binary,
    load_snapshots_csv,
    sample_init,
    save_snapshots_binary,
    save_snapshots_csv,
    simulate,
    step_noise,
)

OU = dict(drift=DriftField.linear(1.0), kernel=InteractionKernel.zero(1),
          diffusion=DiffusionField.constant(1.0, d=1))


def _ou_config(**kw):
    base = dict(d=1, N=64, dt=0.01, T_end=0.5, seed=42,
                init_law=InitLaw.gaussian([0.0], 1.0),
                snapshot_times=(0.0, 0.25, 0.5))
    base.update(kw)
    return ScenarioConfig(**base)


# ---------------------------------------------------------------------------
# counter-based noise


def test_step_noise_is_reproducible_and_step_dependent():
    a = step_noise(7, 3, 16, 2)
    b = step_noise(7, 3, 16, 2)
    np.testing.assert_array_equal(a, b)
    c = step_noise(7, 4, 16, 2)
    assert not np.array_equal(a, c)


def test_step_noise_row_prefix_property():
    """Row i of the block must not depend on how many rows are drawn."""
    small = step_noise(123, 5, 8, 3)
    big = step_noise(123, 5, 64, 3)
    np.testing.assert_array_equal(small, big[:8])


def test_streams_are_separated():
    a = step_noise(9, 0, 8, 1, stream=STREAM_DYNAMICS)
    b = step_noise(9, 0, 8, 1, stream=STREAM_INIT)
    assert not np.array_equal(a, b)


def test_sample_init_laws(rng):
    d = sample_init(InitLaw.dirac([1.0, -2.0]), 5, 2, seed=0)
    np.testing.assert_array_equal(d.samples, np.tile([1.0, -2.0], (5, 1)))
    u = sample_init(InitLaw.uniform_box([0.0], [2.0]), 500, 1, seed=3)
    assert u.samples.min() >= 0.0 and u.samples.max() <= 2.0
    g = sample_init(InitLaw.gaussian([5.0], 0.01), 500, 1, seed=3)
    assert abs(float(g.samples.mean()) - 5.0) < 0.05
    with pytest.raises(ValidationError):
        sample_init(InitLaw.dirac([0.0]), 5, 2, seed=0)


# ---------------------------------------------------------------------------
# stepping


def test_em_step_shape_validation():
    ens = ParticleEnsemble.fresh(np.zeros((4, 1)))
    with pytest.raises(ValidationError):
        em_step(ens, OU["drift"], OU["kernel"], MeasureMode.mean_field(),
                OU["diffusion"], 0.01, np.zeros((3, 1)))
    with pytest.raises(ValidationError):
        em_step(ens, OU["drift"], OU["kernel"], MeasureMode.mean_field(),
                OU["diffusion"], -0.01, np.zeros((4, 1)))


def test_em_step_advances_clock_and_cursor():
    ens = ParticleEnsemble.fresh(np.ones((4, 1)))
    out = em_step(ens, OU["drift"], OU["kernel"], MeasureMode.mean_field(),
                  OU["diffusion"], 0.01, np.zeros((4, 1)))
    assert out.t == pytest.approx(0.01)
    assert out.step_index == 1
    np.testing.assert_allclose(out.positions, 0.99 * np.ones((4, 1)))


def test_drift_cap_limits_step_size():
    ens = ParticleEnsemble.fresh(np.full((1, 1), 100.0))
    out = em_step(ens, OU["drift"], OU["kernel"], MeasureMode.mean_field(),
                  OU["diffusion"], 0.1, np.zeros((1, 1)), drift_cap=5.0)
    # uncapped the pull would be -100; capped it is -5
    np.testing.assert_allclose(out.positions, [[99.5]])


def test_engine_error_names_particle_and_time():
    runaway = DriftField.custom(lambda x: 1e8 * x, K=1.0, R=0.0, L=1e8)
    config = _ou_config(N=4, T_end=1.0, drift_cap=None,
                        init_law=InitLaw.dirac([1.0]), snapshot_times=())
    with np.errstate(over="ignore"), \
            pytest.raises(EngineError, match="non-finite at time"):
        simulate(config, runaway, OU["kernel"], MeasureMode.mean_field(),
                 OU["diffusion"])


def test_external_flow_validation():
    mu = EmpiricalMeasure.from_samples(np.zeros((2, 1)))
    with pytest.raises(ValidationError):
        MeasureMode.external_flow([])
    with pytest.raises(ValidationError):
        MeasureMode.external_flow([(1.0, mu)])  # must start at 0
    with pytest.raises(ValidationError):
        MeasureMode.external_flow([(0.0, mu), (0.0, mu)])
    flow = MeasureMode.external_flow([(0.0, mu), (1.0, mu)])
    assert flow.measure_at(0.5) is mu


# ---------------------------------------------------------------------------
# simulate


def test_simulate_is_deterministic():
    config = _ou_config()
    a = simulate(config, **OU, mode=MeasureMode.mean_field())
    b = simulate(config, **OU, mode=MeasureMode.mean_field())
    assert [t for t, _ in a] == [t for t, _ in b]
    for (_, ma), (_, mb) in zip(a, b):
        assert ma.samples.tobytes() == mb.samples.tobytes()


def test_simulate_snapshot_times_snap_to_grid():
    config = _ou_config(snapshot_times=(0.003, 0.248, 0.5))
    out = simulate(config, **OU, mode=MeasureMode.mean_field())
    assert [t for t, _ in out] == [0.0, 0.25, 0.5]


def test_zero_kernel_modes_agree_bitwise():
    """With no interaction the measure argument is inert, so all three
    coupling modes must generate the same trajectory bytes."""
    config = _ou_config()
    frozen_src = EmpiricalMeasure.from_samples(np.zeros((3, 1)))
    runs = [
        simulate(config, **OU, mode=MeasureMode.mean_field()),
        simulate(config, **OU, mode=MeasureMode.frozen(frozen_src)),
        simulate(config, **OU,
                 mode=MeasureMode.external_flow([(0.0, frozen_src)])),
    ]
    ref = runs[0]
    for other in runs[1:]:
        for (_, ma), (_, mb) in zip(ref, other):
            assert ma.samples.tobytes() == mb.samples.tobytes()


def test_ou_terminal_variance_matches_theory():
    """Weak-error sanity check against the exact OU variance."""
    T, dt, n = 2.0, 1e-3, 2000
    config = _ou_config(N=n, dt=dt, T_end=T, init_law=InitLaw.dirac([0.0]),
                        snapshot_times=(T,), seed=2024)
    (_, mu), = simulate(config, **OU, mode=MeasureMode.mean_field())
    target = 0.5 * (1.0 - math.exp(-2.0 * T))
    se = math.sqrt(2.0 / (n - 1)) * target
    assert abs(float(np.var(mu.samples)) - target) < 3.0 * se


def test_mean_field_interaction_enters_dynamics():
    kern = InteractionKernel.radial(c=1.0, beta_sing=0.0, k=2.0, d=1)
    config = _ou_config(N=32, snapshot_times=(0.5,))
    with_int = simulate(config, OU["drift"], kern,
                        MeasureMode.mean_field(), OU["diffusion"])
    without = simulate(config, **OU, mode=MeasureMode.mean_field())
    assert not np.array_equal(with_int[0][1].samples, without[0][1].samples)


# ---------------------------------------------------------------------------
# snapshot files


def _small_run():
    config = _ou_config(N=8, snapshot_times=(0.0, 0.25, 0.5))
    return simulate(config, **OU, mode=MeasureMode.mean_field())


def test_csv_round_trip(tmp_path):
    snaps = _small_run()
    path = tmp_path / "snaps.csv"
    save_snapshots_csv(path, snaps)
    back = load_snapshots_csv(path)
    assert [t for t, _ in back] == [t for t, _ in snaps]
    for (_, ma), (_, mb) in zip(snaps, back):
        # repr round-trips doubles exactly
        np.testing.assert_array_equal(ma.samples, mb.samples)


def test_csv_header_is_documented_format(tmp_path):
    snaps = _small_run()
    path = tmp_path / "snaps.csv"
    save_snapshots_csv(path, snaps)
    header = path.read_text().splitlines()[0]
    assert header == "time,particle_index,x_1"


def test_binary_round_trip_and_validation(tmp_path):
    snaps = _small_run()
    path = tmp_path / "snaps.bin"
    save_snapshots_binary(path, snaps)
    back = load_snapshots_binary(path)
    for (ta, ma), (tb, mb) in zip(snaps, back):
        assert ta == tb
        np.testing.assert_array_equal(ma.samples, mb.samples)
    with open(path, "r+b") as fh:
        fh.write(b"XXXX")
    with pytest.raises(ValidationError, match="magic"):
        load_snapshots_binary(path)


def test_save_empty_snapshots_rejected(tmp_path):
    with pytest.raises(ValidationError):
        save_snapshots_csv(tmp_path / "x.csv", [])
    with pytest.raises(ValidationError):
        save_snapshots_binary(tmp_path / "x.bin", [])
