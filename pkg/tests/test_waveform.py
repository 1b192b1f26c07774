import numpy as np
import pytest

from oddm_ce.channel import ChannelSpec, PathSet, sample_paths, to_grid
from oddm_ce.modem import apply_channel, pilot_frames
from oddm_ce.waveform import OddmWaveform, db, srrc, waveform_oracle


@pytest.fixture(scope="module")
def wf():
    return OddmWaveform(32, 8)


@pytest.fixture(scope="module")
def tau(wf):
    return wf.ambiguity_residual(max_doppler=2)


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_srrc_peak_and_singularity():
    b = 0.25
    assert srrc(np.array([0.0]), 1.0, b)[0] == pytest.approx(1 - b + 4 * b / np.pi)
    t = np.array([1 / (4 * b) - 1e-7, 1 / (4 * b), 1 / (4 * b) + 1e-7])
    v = srrc(t, 1.0, b)
    assert v[1] == pytest.approx(v[0], rel=1e-5) and v[1] == pytest.approx(v[2], rel=1e-5)


def test_pulse_energy(wf):
    assert np.sum(wf.pulse ** 2) * wf.dt == pytest.approx(1 / wf.N)


def test_residual_below_minus_40_db(tau):
    assert db(tau) < -40


def test_zero_channel_gives_zero(wf, rng):
    X = pilot_frames(1, 32, 8, rng)[0]
    np.testing.assert_array_equal(wf.run(X, PathSet.from_paths([])), 0)


def test_identity_channel_matches_frame(wf, rng, tau):
    X = pilot_frames(1, 32, 8, rng)[0]
    Y = wf.run(X, PathSet.from_paths([(1.0, 0, 0, 0.0)]))
    assert rel(Y, X) < tau


def test_two_path_eva_matches_discrete_model(rng, tau):
    spec = ChannelSpec(num_paths=2, max_delay_index=4, max_doppler_index=2,
                       num_delay_bins=32, num_doppler_bins=8, delay_scale=None)
    paths = sample_paths(spec, rng)
    X = pilot_frames(1, 32, 8, rng)
    Y = waveform_oracle(X, paths)
    ref = apply_channel(X, to_grid(paths, spec))
    assert rel(Y, ref) < tau


def test_refuses_oversized_or_undersampled():
    with pytest.raises(ValueError):
        OddmWaveform(128, 8)
    with pytest.raises(ValueError):
        OddmWaveform(32, 32)
    with pytest.raises(ValueError):
        OddmWaveform(32, 8, oversampling=2)
    with pytest.raises(ValueError):
        waveform_oracle(np.ones((2, 8, 4)), PathSet.from_paths([]))
