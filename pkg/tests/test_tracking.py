import numpy as np
import pytest

from psvq import gridref, tracking
from psvq.engine import AuxArrays, batch_trajectories
from psvq.physics import ProtocolSchedule
from psvq.tracking import (TrackingSeries, ci_bound_check,
                           ci_error_correlation, track)


@pytest.fixture
def tracked(pools2, schedule_cw, bounds, rng):
    n = 4
    theta = np.column_stack([rng.uniform(0.05, 0.2, n),
                             rng.uniform(20.0, 70.0, n)])
    aux = AuxArrays(t1_water=np.full(n, 1.2), t2_water=0.07,
                    b0_shift=0.0, b1_scale=1.0)
    raw = batch_trajectories(pools2, theta, aux, schedule_cw, raw=True)
    raw = raw + 0.01 * rng.standard_normal(raw.shape)
    signals = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    spec = gridref.GridSpec(bounds=bounds, counts=(20, 20))
    series = track(signals, aux, schedule_cw, pools2, spec,
                   prefixes=[2, 3, 4, 5])
    return series, signals, aux, spec


def test_prefix_layout(tracked, schedule_cw):
    series, *_ = tracked
    n_full = len(schedule_cw)
    assert series.n_full == n_full
    # full length appended, strictly increasing
    assert series.prefixes.tolist() == [2, 3, 4, 5, n_full]
    assert series.delta[:, -1].max() == 0.0  # zero error at n = N
    assert np.all(series.cr_area > 0)
    assert np.all(series.ci_width > 0)


def test_prefix_equals_truncated_schedule(tracked, pools2, schedule_cw,
                                          bounds):
    """A length-n prefix posterior must be bit-identical to running the
    tracker on the physically truncated n-block schedule."""
    series, signals, aux, spec = tracked
    n = 3
    sched_trunc = ProtocolSchedule(blocks=schedule_cw.blocks[:n],
                                   field_strength=schedule_cw.field_strength)
    fresh = track(signals[:, :n], aux, sched_trunc, pools2, spec,
                  prefixes=[n])
    pi = series.prefixes.tolist().index(n)
    assert np.array_equal(series.mu[:, pi], fresh.mu[:, 0])
    assert np.array_equal(series.cov[:, pi], fresh.cov[:, 0])
    assert np.array_equal(series.map_f[:, pi], fresh.map_f[:, 0])


def test_prefixes_carry_less_information(tracked):
    series, *_ = tracked
    # shorter prefixes genuinely restrict the data: the moment means move
    assert not np.allclose(series.mu[:, 0], series.mu[:, -1])
    # and the noise scale is re-estimated per prefix, not shared
    assert np.isfinite(series.cr_area).all()


def test_mape_and_convergence(tracked):
    series, *_ = tracked
    mape = series.mape()
    assert mape.shape == (series.prefixes.size, 2)
    assert np.allclose(mape[-1], 0.0)
    n_conv = series.convergence_index(tol=0.10)
    assert n_conv in series.prefixes
    # with tol -> infinity the first prefix qualifies
    assert series.convergence_index(tol=1e9) == series.prefixes[0]


def test_ci_bound_check_excludes_terminal(tracked):
    series, *_ = tracked
    coverage, scatter = ci_bound_check(series)
    assert coverage.shape == (2,)
    assert np.all((coverage >= 0) & (coverage <= 1))
    v = series.voxel_index.size
    p = series.prefixes.size
    assert scatter.shape == (2, v * (p - 1), 2)


def test_ci_error_correlation(tracked):
    series, *_ = tracked
    r = ci_error_correlation(series)
    assert r.shape == (2,)
    assert np.all(np.abs(r) <= 1.0)
    short = TrackingSeries(prefixes=series.prefixes[:2],
                           voxel_index=series.voxel_index,
                           map_f=series.map_f[:, :2],
                           map_k=series.map_k[:, :2],
                           mu=series.mu[:, :2], cov=series.cov[:, :2],
                           cr_area=series.cr_area[:, :2],
                           ci_width=series.ci_width[:, :2],
                           delta=series.delta[:, :2])
    with pytest.raises(ValueError):
        ci_error_correlation(short)


def test_track_validation(tracked, pools2, schedule_cw):
    series, signals, aux, spec = tracked
    with pytest.raises(ValueError):
        track(signals, aux, schedule_cw, pools2, spec, prefixes=[0, 3])
    with pytest.raises(ValueError):
        track(signals, aux, schedule_cw, pools2, spec, prefixes=[3, 99])


def test_series_csv(tracked, tmp_path):
    series, *_ = tracked
    path = tmp_path / "track.csv"
    series.to_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0].split(",")[:3] == ["voxel", "n", "map_f"]
    assert len(lines) == 1 + series.voxel_index.size * series.prefixes.size
