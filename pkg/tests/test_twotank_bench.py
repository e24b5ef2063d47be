import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lstm_resilience.twotank_bench import (
    PERTURB_WINDOW,
    X_MAX,
    X_MIN,
    Y_MAX,
    Y_MIN,
    DatasetSpec,
    PulseSpec,
    TankDataset,
    TankParams,
    denormalize,
    draw_pulses,
    generate_control,
    generate_dataset,
    inject_pulses,
    make_perturbed_input,
    normalize,
    recovery_input,
    rk4_step,
    simulate_levels,
    stream,
    tank_derivative,
)

P = TankParams()


def fine_euler(state, u, horizon, sub):
    """Forward Euler with ``sub`` substeps per benchmark step, written inline."""
    h1, h2 = state
    dt = P.dt / sub
    for _ in range(horizon * sub):
        q1 = math.sqrt(2 * P.g * max(h1, 0.0))
        q2 = math.sqrt(2 * P.g * max(h2, 0.0))
        h1, h2 = h1 + dt * (-P.p1 * q1 + P.p2 * u), h2 + dt * (P.p3 * q1 - P.p4 * q2)
    return h1, h2


def test_derivative_examples():
    assert tank_derivative(P, (0.0, 0.0), 1.0) == (0.5, 0.0)
    for u in (0.5, 1.0, 2.2, 3.0):
        d = tank_derivative(P, (u * u, u * u), u)
        assert d[0] == pytest.approx(0.0, abs=1e-15) and d[1] == pytest.approx(0.0, abs=1e-15)


def test_derivative_clamps_negative_levels():
    assert tank_derivative(P, (-1.0, -2.0), 1.0) == (0.5, 0.0)


def test_symmetric_params_equal_levels_at_rest():
    q = TankParams(p1=0.7, p2=0.3, p3=0.7, p4=0.7)
    h = simulate_levels(q, np.full(100_000, 2.0))[-1]
    assert h[0] == pytest.approx(h[1], abs=1e-9)


def test_rk4_equilibrium_unchanged():
    assert rk4_step(P, (4.0, 4.0), 2.0) == pytest.approx((4.0, 4.0), abs=1e-15)


@pytest.mark.parametrize("u", [0.5, 1.0, 3.0])
def test_steady_state(u):
    h = simulate_levels(P, np.full(100_000, u))[-1]
    assert abs(h[0] - u * u) <= 1e-6 and abs(h[1] - u * u) <= 1e-6


@pytest.mark.parametrize("start,u", [((1.0, 1.0), 1.0), ((2.0, 0.5), 3.0), ((6.0, 4.0), 0.5), ((0.3, 0.1), 2.0)])
def test_rk4_vs_fine_euler(start, u):
    h = start
    for _ in range(100):
        h = rk4_step(P, h, u)
    ref = fine_euler(start, u, 100, 1000)
    assert abs(h[0] - ref[0]) <= 1e-6 and abs(h[1] - ref[1]) <= 1e-6


def test_rk4_from_empty_tanks():
    # sqrt(h) is not smooth at h = 0, so the first steps lose fourth-order accuracy;
    # the gap to a fine-step reference stays at the 1e-5 level
    h = (0.0, 0.0)
    for _ in range(100):
        h = rk4_step(P, h, 1.0)
    ref = fine_euler((0.0, 0.0), 1.0, 100, 10_000)
    assert abs(h[0] - ref[0]) <= 1e-5 and abs(h[1] - ref[1]) <= 1e-5


def test_levels_stay_nonnegative():
    h = simulate_levels(P, np.full(500, 0.5), h0=(1e-6, 0.0))
    assert np.all(h >= 0)


def test_normalize_endpoints():
    np.testing.assert_array_equal(normalize(X_MIN, X_MIN, X_MAX), [-1, -1, -1])
    np.testing.assert_array_equal(normalize(X_MAX, X_MIN, X_MAX), [1, 1, 1])
    with pytest.raises(ValueError):
        normalize(1.0, 2.0, 2.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=3, max_size=3))
def test_normalize_roundtrip(v):
    back = denormalize(normalize(v, X_MIN, X_MAX), X_MIN, X_MAX)
    np.testing.assert_allclose(back, v, rtol=0, atol=1e-12)


def test_control_segments():
    spec = DatasetSpec(length=10_000, switch_interval=4000, seed=7)
    u = generate_control(spec)
    assert u.shape == (10_000,)
    assert np.all((u >= 0.5) & (u <= 3.0))
    changes = np.nonzero(np.diff(u))[0] + 1
    assert changes.tolist() == [4000, 8000]
    assert np.unique(generate_control(DatasetSpec(length=500, switch_interval=500))).size == 1


def test_dataset_definitions():
    ds = generate_dataset(DatasetSpec(length=300, switch_interval=100, noise_std=0.0, seed=2))
    levels = simulate_levels(P, ds.u)
    np.testing.assert_array_equal(ds.h_noisy, levels[:-1])
    np.testing.assert_array_equal(ds.y_raw, levels[1:])
    np.testing.assert_array_equal(ds.x_raw[:, 0], ds.u)
    assert ds.x.shape == (300, 3) and ds.y.shape == (300, 2)


def test_dataset_noise_level():
    ds = generate_dataset(DatasetSpec(length=20_000, noise_std=0.1, seed=4))
    w = ds.h_noisy - ds.h_clean
    assert np.std(w) == pytest.approx(0.1, rel=0.03)
    np.testing.assert_array_equal(ds.y_raw, generate_dataset(DatasetSpec(length=20_000, noise_std=0.0, seed=4)).y_raw)


def test_dataset_deterministic_and_seed_sensitive():
    a = generate_dataset(DatasetSpec(length=200, seed=1))
    b = generate_dataset(DatasetSpec(length=200, seed=1))
    c = generate_dataset(DatasetSpec(length=200, seed=2))
    assert a.x.tobytes() == b.x.tobytes()
    assert a.x.tobytes() != c.x.tobytes()


def test_dataset_save_load(tmp_path):
    ds = generate_dataset(DatasetSpec(length=50, seed=3))
    ds.save(tmp_path / "d.csv")
    back = TankDataset.load(tmp_path / "d.csv")
    assert back.spec == ds.spec
    np.testing.assert_allclose(back.x, ds.x, atol=1e-12)


def test_streams_are_independent():
    a = stream(0, "noise").random(5)
    b = stream(0, "control").random(5)
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(a, stream(0, "noise").random(5))


def test_perturbation_window():
    x = recovery_input(length=1200)
    x_hat, t0 = make_perturbed_input(x, 5.0)
    assert t0 == 1011
    diff = x_hat - x
    rows = np.nonzero(np.any(diff != 0, axis=1))[0]
    assert rows.tolist() == list(range(PERTURB_WINDOW[0], PERTURB_WINDOW[1] + 1))
    assert np.all(diff[rows, 1:] == 5.0) and np.all(diff[:, 0] == 0)
    same, _ = make_perturbed_input(x, 0.0)
    np.testing.assert_array_equal(same, x)
    with pytest.raises(ValueError):
        make_perturbed_input(x[:1010], 1.0)


def test_pulses_zero_amplitude_unchanged():
    x = recovery_input(length=5000)
    assert draw_pulses(5000, PulseSpec(rate=0.01, seed=0))[0].size > 0
    np.testing.assert_array_equal(inject_pulses(x, PulseSpec(rate=0.01, max_amplitude=0.0)), x)


def test_pulses_shape_and_channels():
    x = recovery_input(length=3000)
    spec = PulseSpec(rate=0.005, duration=10, max_amplitude=2.0, seed=11)
    y = inject_pulses(x, spec)
    starts, amps = draw_pulses(3000, spec)
    assert np.all(y[:, 0] == x[:, 0])
    assert np.all((starts >= 0) & (starts <= 2990)) and np.all((amps >= 0) & (amps <= 2.0))
    expected = x.copy()
    for s, a in zip(starts, amps):
        expected[s : s + 10, 1:] += a
    np.testing.assert_array_equal(y, expected)


def test_pulse_count_monte_carlo():
    T, rate = 10_000, 0.001
    counts = [draw_pulses(T, PulseSpec(rate=rate, seed=s))[0].size for s in range(1000)]
    assert np.mean(counts) == pytest.approx(rate * T, rel=0.05)


def test_spec_validation():
    with pytest.raises(ValueError):
        DatasetSpec(noise_std=-0.1)
    with pytest.raises(ValueError):
        PulseSpec(duration=0)
    with pytest.raises(ValueError):
        PulseSpec(rate=0.0)


def test_output_bounds_constants():
    assert Y_MIN == (0.0, 0.0) and Y_MAX == (10.0, 10.0)
