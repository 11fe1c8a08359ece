import json
import warnings

import numpy as np
import pytest

from adaptive_kernel.dynamics import Dataset, DivergenceError, FlowConfig, TrajectoryLog
from adaptive_kernel.experiments import (CsvParseError, ExperimentSpec, SpectrumSeries,
                                         gen_random_labels, gen_teacher, geometric_schedule,
                                         load_csv, run_spectrum_experiment, stabilization,
                                         write_experiment)
from adaptive_kernel.kernels import gram
from adaptive_kernel.model import InitSpec, NetworkState, forward, init_network
from adaptive_kernel.spectral import Spectrum


# -- data generators ----------------------------------------------------------


def test_teacher_labels_match_forced_teacher():
    teacher = NetworkState(np.array([2.0]), np.array([[1.0, -1.0, 0.0]]))
    data, t = gen_teacher(30, 3, 1, seed=4, teacher=teacher)
    assert t is teacher
    want = 2.0 * np.maximum(data.X[:, 0] - data.X[:, 1], 0.0)
    np.testing.assert_allclose(data.Y, want, rtol=0, atol=1e-15)


def test_teacher_is_deterministic_and_seeded():
    a, ta = gen_teacher(20, 4, 3, seed=1)
    b, tb = gen_teacher(20, 4, 3, seed=1)
    c, _ = gen_teacher(20, 4, 3, seed=2)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.Y, b.Y)
    assert np.array_equal(ta.U, tb.U)
    assert not np.array_equal(a.X, c.X)
    assert ta.m == 3 and a.provenance["J"] == 3


def test_teacher_rejects_zero_width():
    with pytest.raises(ValueError):
        gen_teacher(5, 2, 0)


def test_random_labels_are_balanced_signs():
    n = 10_000
    data = gen_random_labels(n, 3, seed=0)
    assert set(np.unique(data.Y)) == {-1.0, 1.0}
    assert abs(data.Y.mean()) < 3 / np.sqrt(n)
    assert abs(data.X.mean()) < 5 / np.sqrt(3 * n)


# -- CSV ----------------------------------------------------------------------


def write(tmp_path, text, name="data.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_csv_exact_load_without_normalization(tmp_path):
    p = write(tmp_path, "a,b,y\n1,2,3\n4,5,6\n7,8,9\n")
    data = load_csv(p, "y", normalize=False)
    np.testing.assert_array_equal(data.X, [[1, 2], [4, 5], [7, 8]])
    np.testing.assert_array_equal(data.Y, [3, 6, 9])
    # by index, target in the middle
    data = load_csv(p, 1, normalize=False)
    np.testing.assert_array_equal(data.X, [[1, 3], [4, 6], [7, 9]])
    np.testing.assert_array_equal(data.Y, [2, 5, 8])


def test_csv_normalization(tmp_path):
    rng = np.random.default_rng(0)
    M = rng.normal(5.0, 3.0, size=(40, 4))
    text = "f1,f2,f3,target\n" + "\n".join(",".join(repr(float(v)) for v in row) for row in M)
    data = load_csv(write(tmp_path, text), "target")
    assert np.max(np.abs(data.X.mean(axis=0))) < 1e-10
    np.testing.assert_allclose(data.X.var(axis=0), 1.0, atol=1e-10)
    np.testing.assert_array_equal(data.Y, M[:, 3])


def test_csv_non_numeric_cell_location(tmp_path):
    rows = ["x1,x2,y"] + [f"{i},{i + 1},{i + 2}" for i in range(10)]
    rows[7] = "6,oops,8"
    with pytest.raises(CsvParseError, match=r"\(7, 2\)") as info:
        load_csv(write(tmp_path, "\n".join(rows)), "y")
    assert (info.value.row, info.value.col) == (7, 2)


@pytest.mark.parametrize("text,target,match", [
    ("a,b\n1,2\n3\n", "b", "ragged"),
    ("a,b\n1,2\n", "c", "not in header"),
    ("a,b\n1,2\n", 5, "out of range"),
    ("a,b\n", "b", "no data"),
    ("", "b", "empty"),
    ("a,b\n1,nan\n", "b", "non-finite"),
])
def test_csv_errors(tmp_path, text, target, match):
    with pytest.raises(CsvParseError, match=match):
        load_csv(write(tmp_path, text), target)


def test_csv_constant_column_warns(tmp_path):
    with pytest.warns(UserWarning, match="constant"):
        data = load_csv(write(tmp_path, "a,b,y\n1,2,0\n1,3,1\n"), "y")
    assert not np.any(data.X[:, 0])


# -- schedule and spectra -----------------------------------------------------


def test_geometric_schedule():
    assert geometric_schedule(1000) == [0, 1, 10, 100, 1000]
    assert geometric_schedule(50) == [0, 1, 10, 50]
    assert geometric_schedule(100, 2) == [0, 1, 3, 10, 32, 100]
    assert geometric_schedule(0) == [0]


def test_stabilization_hand_value():
    a = Spectrum(np.array([2.0, 1.0]))
    b = Spectrum(np.array([2.2, 0.95]))
    assert stabilization(a, b) == pytest.approx(0.1)


def test_time_to_stabilization():
    vals = [[1.0], [2.0], [2.02], [2.5], [2.51], [2.52]]
    s = SpectrumSeries("x", [Spectrum(np.array(v), t=float(k)) for k, v in enumerate(vals)],
                       list(range(6)))
    assert s.diagnostics()[0] == pytest.approx(1.0)
    assert s.time_to_stabilization(0.05) == 3.0
    assert s.time_to_stabilization(1e-6) == float("inf")
    assert s.top_growth() == pytest.approx(1.52)


def test_spec_validation():
    with pytest.raises(ValueError, match="kind"):
        ExperimentSpec(kind="mnist")
    with pytest.raises(ValueError):
        ExperimentSpec(keep=0.0)
    with pytest.raises(ValueError, match="increasing"):
        ExperimentSpec(schedule=[0, 10, 10])
    with pytest.raises(ValueError, match="csv"):
        ExperimentSpec(kind="csv")
    spec = ExperimentSpec(flow={"max_steps": 100, "eps_grad": 1e-6})
    assert spec.schedule == [0, 1, 10, 100]
    assert spec.experiment_id == "teacherJ2-n50-m500-s0"


def test_init_snapshot_matches_infinite_width_kernel():
    # At t = 0 with m = 10^4 the empirical K is within Monte Carlo error of the
    # closed form; the error bar comes from splitting the neurons into blocks,
    # since the empirical kernel is additive over neurons.
    m, d = 10_000, 3
    X = np.random.default_rng(0).standard_normal((6, d))
    X /= np.linalg.norm(X, axis=1)[:, None]
    data = Dataset(X, np.ones(6))
    spec = ExperimentSpec(m=m, schedule=[0], flow=FlowConfig(max_steps=0, eps_grad=1e-6),
                          keep=1.0)
    series, _ = run_spectrum_experiment(spec, data)
    assert series.steps == [0] and series.times == [0.0]

    net = init_network(InitSpec("gaussian-rademacher", seed=0), m, d)
    blocks = [gram("K", NetworkState(net.w[k::20], net.U[k::20]), X).matrix for k in range(20)]
    K = sum(blocks)
    np.testing.assert_allclose(K, gram("K", net, X).matrix, atol=1e-12)
    se = np.std([20 * B for B in blocks], axis=0, ddof=1) / np.sqrt(20)
    K0 = gram("K0closed", net, X).matrix
    assert np.all(np.abs(K - K0) <= 4 * se + 1e-12)
    np.testing.assert_allclose(series.snapshots[0].values, np.linalg.eigvalsh(K)[::-1],
                               atol=1e-10)


def small_spec(**kw):
    base = dict(n=10, d=3, m=20, J=1, flow=FlowConfig(eta=0.05, max_steps=300, eps_grad=1e-9),
                schedule=[0, 10, 100, 300], keep=0.5)
    return ExperimentSpec(**{**base, **kw})


def test_experiment_runs_and_snapshots_on_schedule():
    series, result = run_spectrum_experiment(small_spec())
    assert series.steps == [0, 10, 100, 300]
    assert series.times == pytest.approx([0.0, 0.5, 5.0, 15.0])
    assert all(len(s) == 5 for s in series.snapshots)
    assert result.log.loss[-1] < result.log.loss[0]
    assert np.isfinite(series.stabilization)


def test_experiment_stops_early_with_final_snapshot():
    spec = small_spec(flow=FlowConfig(eta=0.05, max_steps=300, eps_grad=10.0))
    series, result = run_spectrum_experiment(spec)
    assert result.termination == "stationary"
    assert series.steps == [0]


def test_experiment_outputs_are_deterministic(tmp_path):
    spec = small_spec()
    outs = []
    for k in range(2):
        series, result = run_spectrum_experiment(spec)
        outs.append(write_experiment(tmp_path / str(k), spec, series, result))
    for name in ("spectra.csv", "trajectory.csv", "network.json"):
        assert (outs[0] / name).read_text() == (outs[1] / name).read_text()
    echo = json.loads((outs[0] / "spec.json").read_text())
    assert echo["m"] == 20 and echo["flow"]["eta"] == 0.05 and echo["resolved_eta"] == 0.05
    header = (outs[0] / "spectra.csv").read_text().splitlines()[0]
    assert header == "experiment_id,t,index,eigenvalue"
    log = TrajectoryLog.from_csv((outs[0] / "trajectory.csv").read_text())
    assert log.t[0] == 0.0
    net = NetworkState.from_json((outs[0] / "network.json").read_text())
    assert net.m == 20


@pytest.mark.filterwarnings("ignore:.*did not grow")
def test_default_step_is_resolved():
    spec = small_spec(flow=FlowConfig(max_steps=5, eps_grad=1e-9), schedule=[0, 5])
    _, result = run_spectrum_experiment(spec)
    assert result.eta > 0


def test_csv_experiment(tmp_path):
    rng = np.random.default_rng(1)
    M = rng.standard_normal((12, 3))
    M[:, 2] = np.maximum(M[:, 0], 0)
    p = write(tmp_path, "a,b,y\n" + "\n".join(",".join(str(float(v)) for v in r) for r in M))
    spec = small_spec(kind="csv", csv_path=str(p), target_column="y")
    series, _ = run_spectrum_experiment(spec)
    assert len(series.snapshots) == 4


def test_divergence_carries_partial_series():
    spec = small_spec(flow=FlowConfig(eta=1e4, max_steps=300, eps_grad=1e-9, alpha=0.0))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(DivergenceError) as info:
            run_spectrum_experiment(spec)
    assert len(info.value.series.snapshots) >= 1
    assert info.value.series.steps[0] == 0
