"""Test the per-window error statistics"""

import io
import json

import numpy as np
import pytest

from tensortrack.decompose import DecompOptions, RankError
from tensortrack.errorstat import (
    ErrorPoint,
    ErrorSeries,
    RankSpec,
    Variant,
    compute_series,
    cp_forecast_error,
    cp_forecast_window,
    forecast_weights,
    format_float,
    normalize_series,
    read_series_csv,
    reconstruction_error,
    series_from_json,
    series_to_json,
    tucker_error,
    tucker_error_cluster,
    write_series_csv,
)
from tensortrack.ingest import IngestError, JobMatrix, UsageWindow
from tensortrack.tensor import ShapeError, Tensor3


def make_window(data, start=0, degraded=False):
    data = np.asarray(data, dtype=float)
    nodes = tuple(f"c300-{101 + i}" for i in range(data.shape[0]))
    return UsageWindow(start=start, nodes=nodes, tensor=Tensor3(data), degraded=degraded)


def random_window(seed, dims=(4, 5, 3), start=0):
    rng = np.random.default_rng(seed)
    return make_window(rng.normal(size=dims), start=start)


def mean_fill_distance(data):
    """Distance between the last slice and the per-metric mean of the earlier slices"""
    means = data[:, :-1, :].mean(axis=(0, 1))
    return float(np.linalg.norm(data[:, -1, :] - means[np.newaxis, :]))


def full_ranks(w):
    return RankSpec(*w.tensor.dims)


@pytest.mark.parametrize("seed", range(8))
def test_tucker_error_full_rank_is_mean_fill_distance(seed):
    w = random_window(seed)
    point = tucker_error(w, full_ranks(w))
    assert point.epsilon == pytest.approx(mean_fill_distance(w.tensor.data), rel=1e-8)
    assert point.variant is Variant.PLAIN
    assert point.k_used == 1


def test_tucker_error_constant_window_is_zero():
    data = np.broadcast_to(np.array([1.0, 2.0, 3.0]), (3, 4, 3))
    w = make_window(data)
    assert tucker_error(w, RankSpec(1, 1, 1)).epsilon == pytest.approx(0.0, abs=1e-10)


def test_tucker_error_carries_window_start_and_degraded():
    w = make_window(np.ones((2, 3, 2)), start=1200, degraded=True)
    point = tucker_error(w, RankSpec(1, 1, 1))
    assert point.window_start == 1200
    assert point.degraded


def test_tucker_error_needs_two_slices():
    w = make_window(np.ones((2, 1, 2)))
    with pytest.raises(ShapeError):
        tucker_error(w, RankSpec(1, 1, 1))


def test_single_cluster_matches_plain():
    w = random_window(21, dims=(5, 6, 4))
    jm = JobMatrix(w.nodes, ("1", "2"), np.array([[1, 0], [0, 1], [1, 1], [1, 0], [0, 1]]))
    ranks = RankSpec(2, 3, 2)
    clustered = tucker_error_cluster(w, jm, ranks, k=1)
    plain = tucker_error(w, ranks)
    assert clustered.epsilon == pytest.approx(plain.epsilon, rel=1e-10)
    assert clustered.variant is Variant.CLUSTERED
    assert clustered.k_used == 1


def test_clustered_error_combines_group_errors():
    """Two job groups at full ranks: epsilon is the root sum of squared group errors"""
    w = random_window(22, dims=(4, 5, 3))
    jm = JobMatrix(w.nodes, ("1", "2"), np.array([[1, 0], [1, 0], [0, 1], [0, 1]]))
    point = tucker_error_cluster(w, jm, full_ranks(w), k=2)
    data = w.tensor.data
    expected = np.sqrt(mean_fill_distance(data[:2]) ** 2 + mean_fill_distance(data[2:]) ** 2)
    assert point.epsilon == pytest.approx(expected, rel=1e-8)
    assert point.k_used == 2


def test_clustered_error_idle_nodes_scored_as_group():
    w = random_window(23, dims=(3, 4, 2))
    jm = JobMatrix(w.nodes, ("7",), np.array([[1], [0], [1]]))
    point = tucker_error_cluster(w, jm, full_ranks(w), k=2)
    data = w.tensor.data
    expected = np.sqrt(mean_fill_distance(data[[0, 2]]) ** 2 + mean_fill_distance(data[[1]]) ** 2)
    assert point.k_used == 2
    assert point.epsilon == pytest.approx(expected, rel=1e-8)


def test_clustered_error_without_jobs_is_single_group():
    w = random_window(24)
    jm = JobMatrix(w.nodes, (), np.zeros((4, 0)))
    point = tucker_error_cluster(w, jm, RankSpec(2, 2, 2))
    assert point.k_used == 1
    assert point.epsilon == pytest.approx(tucker_error(w, RankSpec(2, 2, 2)).epsilon)


def test_clustered_error_node_mismatch():
    w = random_window(25)
    jm = JobMatrix(("a", "b", "c", "d"), ("1",), np.ones((4, 1)))
    with pytest.raises(IngestError):
        tucker_error_cluster(w, jm, RankSpec(1, 1, 1))


def low_rank_window(seed, dims=(9, 6, 4), ranks=(2, 2, 2), noise=0.01):
    rng = np.random.default_rng(seed)
    core = rng.normal(size=ranks)
    factors = [rng.normal(size=(d, r)) for d, r in zip(dims, ranks)]
    data = np.einsum("abc,na,tb,mc->ntm", core, *factors) + noise * rng.normal(size=dims)
    return make_window(data)


# three disjoint job groups of 3, 3 and 2 nodes, and one idle node
GROUPED_JOBS = np.array(
    [[1, 0, 0], [1, 0, 0], [1, 0, 0], [0, 1, 0], [0, 1, 0], [0, 1, 0], [0, 0, 1], [0, 0, 1], [0, 0, 0]]
)


@pytest.mark.parametrize("seed", range(6))
def test_errors_invariant_to_node_order(seed):
    w = low_rank_window(seed)
    jm = JobMatrix(w.nodes, ("1", "2", "3"), GROUPED_JOBS)
    order = [int(i) for i in np.random.default_rng(100 + seed).permutation(len(w.nodes))]
    shuffled, shuffled_jm = w.select_nodes(order), jm.select_nodes(order)
    assert shuffled_jm.nodes == shuffled.nodes

    ranks = RankSpec(2, 2, 2)
    opts = DecompOptions(tol=1e-15, max_iter=200)
    clustered = tucker_error_cluster(w, jm, ranks, k=3, seed=seed, opts=opts)
    reordered = tucker_error_cluster(shuffled, shuffled_jm, ranks, k=3, seed=seed, opts=opts)
    assert reordered.k_used == clustered.k_used == 4
    assert reordered.epsilon == pytest.approx(clustered.epsilon, rel=1e-6)

    plain = tucker_error(w, ranks, opts)
    assert tucker_error(shuffled, ranks, opts).epsilon == pytest.approx(plain.epsilon, rel=1e-6)


@pytest.mark.parametrize("seed", range(4))
def test_reconstruction_error_full_rank_is_zero(seed):
    w = random_window(30 + seed)
    point = reconstruction_error(w, full_ranks(w))
    assert point.epsilon == pytest.approx(0.0, abs=1e-8)
    assert point.variant is Variant.RECONSTRUCTION


def test_reconstruction_error_shrinks_with_rank():
    w = random_window(40, dims=(6, 6, 6))
    errors = [reconstruction_error(w, RankSpec(r, r, r)).epsilon for r in range(1, 7)]
    assert all(later <= earlier + 1e-9 for earlier, later in zip(errors, errors[1:]))


def test_rank_spec_validation():
    with pytest.raises(RankError):
        RankSpec(0, 1, 1)


def test_rank_spec_clamp():
    assert RankSpec(50, 18, 30).clamp((4, 18, 12)) == RankSpec(4, 18, 12)


@pytest.mark.parametrize(
    "rho,expected",
    [
        (0.0, [2.0, 20.0]),
        (50.0, [3.0, 30.0]),
    ],
)
def test_forecast_weights(rho, expected):
    a_time = np.array([[1.0, 10.0], [2.0, 20.0], [3.0, 30.0]])
    np.testing.assert_allclose(forecast_weights(a_time, rho), expected, atol=1e-12)


def test_forecast_weights_recency():
    a_time = np.array([[0.0], [0.0], [1.0]])
    weights = np.exp(-1.0 * np.array([2.0, 1.0, 0.0]))
    assert forecast_weights(a_time, 1.0)[0] == pytest.approx(weights[2] / weights.sum())


def test_forecast_weights_negative_rho():
    with pytest.raises(ValueError):
        forecast_weights(np.ones((2, 1)), -0.1)


def test_cp_forecast_steady_state_is_exact():
    node = np.array([1.0, 2.0, 0.5])
    metric = np.array([3.0, 1.0])
    data = np.einsum("n,t,m->ntm", node, np.ones(5), metric)
    w = make_window(data, start=600)
    point = cp_forecast_window(w, rank=1, rho=0.5)
    assert point.epsilon == pytest.approx(0.0, abs=1e-8)
    assert point.window_start == 600
    assert point.variant is Variant.CP_FORECAST


def test_cp_forecast_detects_change():
    node = np.array([1.0, 2.0, 0.5])
    metric = np.array([3.0, 1.0])
    history = Tensor3(np.einsum("n,t,m->ntm", node, np.ones(4), metric))
    observed = np.outer(node, metric) + 1.0
    point = cp_forecast_error(history, 1, 0.5, observed)
    assert point.epsilon == pytest.approx(np.sqrt(6.0), rel=1e-6)


def test_cp_forecast_shape_errors():
    history = Tensor3(np.ones((2, 3, 2)))
    with pytest.raises(ShapeError):
        cp_forecast_error(history, 1, 0.5, np.ones((3, 2)))
    with pytest.raises(ShapeError):
        cp_forecast_error(Tensor3(np.ones((2, 1, 2))), 1, 0.5, np.ones((2, 2)))


def windows_for_series(count=4):
    return [random_window(60 + i, dims=(4, 3, 2), start=i * 1800) for i in range(count)]


@pytest.mark.parametrize("variant", ["plain", "reconstruction", "cp_forecast"])
def test_compute_series_ordered(variant):
    windows = windows_for_series()
    series = compute_series(windows[::-1], variant=variant, ranks=RankSpec(2, 2, 2), cp_rank=2)
    assert series.window_starts == [0, 1800, 3600, 5400]
    assert all(p.variant.value == variant for p in series)


def test_compute_series_workers_match_serial():
    windows = windows_for_series(6)
    ranks = RankSpec(2, 2, 2)
    serial = compute_series(windows, variant=Variant.PLAIN, ranks=ranks)
    pooled = compute_series(windows, variant=Variant.PLAIN, ranks=ranks, workers=3)
    np.testing.assert_array_equal(serial.epsilons, pooled.epsilons)


def test_compute_series_clamps_ranks():
    series = compute_series(windows_for_series(2), variant=Variant.PLAIN, ranks=RankSpec())
    assert len(series) == 2


def test_compute_series_clustered_needs_job_matrices():
    with pytest.raises(ValueError):
        compute_series(windows_for_series(2), variant=Variant.CLUSTERED)


def test_compute_series_clustered():
    windows = windows_for_series(3)
    matrices = [JobMatrix(w.nodes, ("1", "2"), np.array([[1, 0], [1, 0], [0, 1], [0, 1]])) for w in windows]
    series = compute_series(windows, matrices, Variant.CLUSTERED, RankSpec(2, 2, 2), k=2)
    assert [p.k_used for p in series] == [2, 2, 2]


def test_degraded_flag_propagates():
    windows = windows_for_series(2)
    windows[1] = UsageWindow(windows[1].start, windows[1].nodes, windows[1].tensor, degraded=True)
    series = compute_series(windows, variant=Variant.PLAIN, ranks=RankSpec(1, 1, 1))
    assert [p.degraded for p in series] == [False, True]


def test_series_must_increase():
    with pytest.raises(ValueError):
        ErrorSeries([ErrorPoint(600, 1.0, "plain"), ErrorPoint(0, 1.0, "plain")])


@pytest.mark.parametrize("epsilon", [-1.0, float("nan"), float("inf")])
def test_error_point_epsilon(epsilon):
    with pytest.raises(ValueError):
        ErrorPoint(0, epsilon, "plain")


def test_normalize_series():
    series = ErrorSeries(ErrorPoint(i, e, "plain") for i, e in enumerate([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(normalize_series(series), [-1.0, 0.0, 1.0])
    flat = ErrorSeries(ErrorPoint(i, 2.0, "plain") for i in range(3))
    np.testing.assert_array_equal(normalize_series(flat), [0.0, 0.0, 0.0])


def test_format_float():
    assert format_float(1 / 3) == "0.333333333333"
    assert format_float(2.0) == "2"
    assert format_float(1.5e-20) == "1.5e-20"


@pytest.fixture
def series():
    return ErrorSeries(
        [
            ErrorPoint(0, 0.25, Variant.CLUSTERED, 3),
            ErrorPoint(10800, 1 / 3, Variant.CLUSTERED, 2, True),
        ]
    )


def test_series_csv(series):
    stream = io.StringIO()
    write_series_csv(series, stream)
    assert stream.getvalue().splitlines() == [
        "window_start,epsilon,variant,k_used,degraded",
        "0,0.25,clustered,3,false",
        "10800,0.333333333333,clustered,2,true",
    ]
    stream.seek(0)
    parsed = read_series_csv(stream)
    assert parsed.window_starts == [0, 10800]
    assert parsed[1].degraded
    assert parsed[1].k_used == 2


def test_series_csv_malformed():
    stream = io.StringIO("window_start,epsilon,variant,k_used,degraded\n0,abc,plain,1,false\n")
    with pytest.raises(IngestError, match="line 2"):
        read_series_csv(stream)


def test_series_json(series):
    data = json.loads(json.dumps(series_to_json(series)))
    assert data[0] == {
        "window_start": 0,
        "epsilon": 0.25,
        "variant": "clustered",
        "k_used": 3,
        "degraded": False,
    }
    assert series_from_json(data).points[1].epsilon == pytest.approx(1 / 3)
