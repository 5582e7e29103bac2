import numpy as np
import pytest

from abclust.attention import AdditiveCompat, CompatKind, MultiplicativeCompat
from abclust.common_registries import CommonRegistries as CR
from abclust.common_registries import root_registry
from abclust.dynamics import (SUITES, SuiteOptions, Trajectory, WeightSchedule, check_hull_containment,
                              check_lemma2, check_prop2, diameter, hull_diameter_2d, rate_ratio,
                              sample_schedule, simulate_attention, simulate_no_skip,
                              simulate_two_clusters, write_trajectory)
from abclust.tensor import Tensor
from abclust.utils import ConfigurationError, DataError, ShapeError

MUL = CompatKind(MultiplicativeCompat())


def schedule_2x2(steps: int = 3) -> WeightSchedule:
    ones = np.ones(steps)
    return WeightSchedule(2, 2, 0.3 * ones, 0.3 * ones, 0.1 * ones, 0.5 * ones)


def test_diameter():
    assert diameter(np.array([[1.0, 2.0]])) == 0.0
    assert diameter(np.array([[0.0, 0.0], [3.0, 4.0]])) == pytest.approx(5.0)


def test_hull_diameter_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.standard_normal((int(rng.integers(1, 15)), 2))
        assert hull_diameter_2d(x) == pytest.approx(diameter(x))
    with pytest.raises(ShapeError):
        hull_diameter_2d(np.zeros((3, 3)))


def test_two_points_uniform_weights_meet_at_midpoint():
    x0 = np.array([[0.0, 0.0], [2.0, 4.0]])
    traj = simulate_attention(x0, 1, MUL, wq=np.zeros((2, 2)))
    assert np.allclose(traj.states[1], [[1.0, 2.0], [1.0, 2.0]])
    assert traj.floors[0] == pytest.approx(0.5)


def test_identical_points_are_fixed():
    x0 = np.tile([[1.5, -2.0, 0.5]], (4, 1))
    traj = simulate_attention(x0, 5, MUL)
    for x in traj.states:
        assert np.allclose(x, x0)


def test_simulate_attention_needs_two_points():
    with pytest.raises(DataError):
        simulate_attention(np.zeros((1, 2)), 1, MUL)


def test_hull_containment():
    rng = np.random.default_rng(1)
    tri = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    centroid = np.tile(tri.mean(axis=0), (3, 1))
    assert check_hull_containment(tri, centroid, 100, rng).passed
    outside = np.array([[0.2, 0.2], [1.0, 1.0], [0.1, 0.1]])
    assert not check_hull_containment(tri, outside, 100, rng).passed


@pytest.mark.parametrize("kind", ["mul", "add"])
def test_attention_steps_stay_in_hull_and_shrink(kind):
    rng = np.random.default_rng(2)
    for _ in range(10):
        x0 = rng.standard_normal((5, 3))
        compat = MUL if kind == "mul" else CompatKind(AdditiveCompat(), Tensor(rng.standard_normal((1, 3))))
        traj = simulate_attention(x0, 5, compat, rng.standard_normal((3, 3)), rng.standard_normal((3, 3)))
        for t in range(traj.steps):
            assert check_hull_containment(traj.states[t], traj.states[t + 1], 1000, rng).passed
        report = check_lemma2(traj)
        assert report.passed
        assert report.worst_margin >= -1e-9


def test_lemma2_needs_floors():
    with pytest.raises(DataError):
        check_lemma2(Trajectory([np.zeros((2, 1)), np.zeros((2, 1))]))


def test_schedule_validation():
    with pytest.raises(ConfigurationError):
        WeightSchedule(2, 2, np.array([0.3]), np.array([0.3]), np.array([0.1]), np.array([0.6]))
    with pytest.raises(ConfigurationError):
        WeightSchedule(0, 2, np.array([0.3]), np.array([0.3]), np.array([0.1]), np.array([0.5]))
    assert schedule_2x2().residual() <= 1e-12


def test_two_clusters_origin_is_fixed():
    traj = simulate_two_clusters(np.zeros((4, 2)), schedule_2x2(), 3)
    assert all(np.array_equal(x, np.zeros((4, 2))) for x in traj.states)


def test_two_cluster_identities_hold():
    rng = np.random.default_rng(3)
    sched = schedule_2x2()
    report = check_prop2(simulate_two_clusters(rng.standard_normal((4, 2)), sched, 3), sched)
    assert report.passed
    assert report.worst_error <= 1e-12


@pytest.mark.parametrize("n,m", [(3, 5), (1, 4), (1, 1), (6, 6)])
def test_identities_hold_for_varying_schedules(n, m):
    rng = np.random.default_rng(n * 10 + m)
    sched = sample_schedule(n, m, 5, rng)
    assert sched.residual() <= 1e-12
    report = check_prop2(simulate_two_clusters(rng.standard_normal((n + m, 3)), sched, 5), sched)
    assert report.passed


def test_schedule_length_and_shape_checked():
    sched = schedule_2x2(2)
    with pytest.raises(ConfigurationError):
        simulate_two_clusters(np.zeros((4, 2)), sched, 3)
    with pytest.raises(ShapeError):
        simulate_two_clusters(np.zeros((5, 2)), sched, 1)


def test_rate_ratio_values():
    r = rate_ratio(schedule_2x2(1), 0)
    assert r.ratio_first == pytest.approx(0.75)
    assert r.rates_above_one
    equal = WeightSchedule(2, 2, np.array([0.1]), np.array([0.1]), np.array([0.1]), np.array([0.7]))
    assert rate_ratio(equal, 0).ratio_first == 1.0


def test_rate_ratio_sign_follows_weights():
    rng = np.random.default_rng(4)
    for _ in range(200):
        n, m = (int(v) for v in rng.integers(2, 7, size=2))
        sched = sample_schedule(n, m, 1, rng)
        a, b, g, _ = sched.at(0)
        r = rate_ratio(sched, 0)
        assert r.rates_above_one
        assert (r.ratio_first < 1) == (a > g)
        assert (r.ratio_second < 1) == (b > g)


def test_no_skip_factors():
    sched = schedule_2x2()
    rng = np.random.default_rng(5)
    report = simulate_no_skip(rng.standard_normal((4, 2)), sched, 3)
    f1, f2, fc = report.factors[0]
    assert f1 == pytest.approx(0.2)
    assert fc == pytest.approx(0.6)
    assert report.passed


def test_write_trajectory(tmp_path):
    traj = Trajectory([np.array([[0.0, 1.0], [2.0, 3.0]])])
    path = tmp_path / "traj.csv"
    write_trajectory(path, traj)
    assert path.read_text(encoding="utf-8").splitlines() == ["step,point,x0,x1", "0,0,0,1", "0,1,2,3"]


def test_suites_are_registered():
    registry = root_registry().require(CR.Dynamics.SUITE)
    assert registry.keys() == [s.name for s in SUITES]
    assert registry.keys() == ["lemma1", "lemma2", "prop2", "corollary", "noskip"]


@pytest.mark.parametrize("name", ["lemma1", "lemma2", "prop2", "corollary", "noskip"])
def test_suites_pass_small(name):
    suite = root_registry().require(CR.Dynamics.SUITE).require(name)
    run = suite.run(SuiteOptions(trials=25, seed=3, directions=100))
    assert [r.violations for r in run.reports] == [0]
    assert run.reports[0].trials == 25


@pytest.mark.slow
@pytest.mark.parametrize("name,trials", [("lemma1", 1000), ("lemma2", 1000), ("prop2", 200),
                                         ("corollary", 1000), ("noskip", 200)])
def test_suites_pass_full(name, trials):
    suite = root_registry().require(CR.Dynamics.SUITE).require(name)
    run = suite.run(SuiteOptions(trials=trials, seed=3))
    assert sum(r.violations for r in run.reports) == 0
