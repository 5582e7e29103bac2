"""
Numerical checks of how attention moves a set of points.

Attention:      x_{i,t+1} = sum_j w_ijt x_jt            (softmax weights)
Residual form:  x_{i,t+1} = x_it + sum_j w_ijt x_jt     (two clusters, fixed pattern)

The two-cluster pattern uses delta on the diagonal, alpha inside the first
cluster (size n), beta inside the second (size m) and gamma across, with
every row summing to one.
"""
import csv
import io
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import tqdm
from pydantic import BaseModel, ConfigDict, Field

from abclust.attention import AdditiveCompat, CompatKind, MultiplicativeCompat, attention_weights
from abclust.common_registries import CommonRegistries as CR
from abclust.registry import Registries
from abclust.tensor import Tensor
from abclust.utils import ConfigurationError, DataError, ShapeError, write_atomic

HULL_SLACK = 1e-10
DIAMETER_SLACK = 1e-9
IDENTITY_TOL = 1e-10
ROW_SUM_TOL = 1e-12
SCHEDULE_TRIES = 1000

logger = logging.getLogger("Dynamics")


@dataclass
class Trajectory:
    states: list[np.ndarray]
    floors: list[float] = field(default_factory=list)
    """Smallest attention weight of every step, attention systems only"""
    weights: list[np.ndarray] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.states) - 1


def diameter(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 2:
        return 0.0
    diff = x[:, None, :] - x[None, :, :]
    return float(np.sqrt(np.einsum("ijk,ijk->ij", diff, diff).max()))


def _convex_hull_2d(x: np.ndarray) -> np.ndarray:
    pts = sorted(set(map(tuple, x)))
    if len(pts) <= 2:
        return np.array(pts)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list[tuple] = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[tuple] = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def hull_diameter_2d(x: np.ndarray) -> float:
    """Diameter over the convex hull vertices of a planar point set"""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 2:
        raise ShapeError(f"hull_diameter_2d needs 2-D points, got shape {x.shape}")
    return diameter(_convex_hull_2d(x))


def simulate_attention(x0: np.ndarray, steps: int, compat: CompatKind,
                       wq: np.ndarray | None = None, wk: np.ndarray | None = None) -> Trajectory:
    """Iterates single-head self attention with values equal to the points"""
    x = np.asarray(x0, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DataError(f"Attention dynamics need at least 2 points, got shape {x.shape}")
    d = x.shape[1]
    wq = np.eye(d) if wq is None else wq
    wk = np.eye(d) if wk is None else wk
    traj = Trajectory([x.copy()])
    for _ in range(steps):
        w = attention_weights(Tensor(x @ wq), Tensor(x @ wk), compat).data
        x = w @ x
        traj.states.append(x)
        traj.floors.append(float(w.min()))
        traj.weights.append(w)
    return traj


@dataclass
class HullReport:
    passed: bool
    worst_margin: float
    """Smallest (hull extent - new extent) over all tested directions"""


def check_hull_containment(x_t: np.ndarray, x_next: np.ndarray, directions: int,
                           rng: np.random.Generator, slack: float = HULL_SLACK) -> HullReport:
    """Necessary condition for hull(x_next) within hull(x_t), one projection per direction"""
    if x_t.shape[1] != x_next.shape[1]:
        raise ShapeError(f"Point dimensions differ: {x_t.shape[1]} vs {x_next.shape[1]}")
    u = rng.standard_normal((directions, x_t.shape[1]))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    p = x_t @ u.T
    q = x_next @ u.T
    margins = np.minimum(p.max(axis=0) - q.max(axis=0), q.min(axis=0) - p.min(axis=0))
    worst = float(margins.min())
    return HullReport(worst >= -slack, worst)


@dataclass
class StepMargin:
    step: int
    diameter: float
    next_diameter: float
    floor: float
    bound: float
    external_bound: float

    @property
    def margin(self) -> float:
        return self.bound - self.next_diameter

    @property
    def external_margin(self) -> float:
        return self.external_bound - self.next_diameter


@dataclass
class DiameterReport:
    steps: list[StepMargin]
    slack: float = DIAMETER_SLACK

    @property
    def violations(self) -> list[StepMargin]:
        return [s for s in self.steps if s.margin < -self.slack]

    @property
    def passed(self) -> bool:
        return not self.violations

    @property
    def worst_margin(self) -> float:
        return min((s.margin for s in self.steps), default=0.0)

    @property
    def worst_external_margin(self) -> float:
        return min((s.external_margin for s in self.steps), default=0.0)


def check_lemma2(traj: Trajectory, slack: float = DIAMETER_SLACK) -> DiameterReport:
    """diam(X_t+1) <= (1 - 2 delta_t) diam(X_t), delta_t the measured weight floor.

    The margin of the external (1 - n delta_t / 4) bound is recorded but not judged.
    """
    if len(traj.floors) != traj.steps:
        raise DataError("Trajectory carries no weight floors")
    n = traj.states[0].shape[0]
    out = []
    for t, floor in enumerate(traj.floors):
        d0 = diameter(traj.states[t])
        d1 = diameter(traj.states[t + 1])
        out.append(StepMargin(t, d0, d1, floor, (1.0 - 2.0 * floor) * d0,
                              (1.0 - n * floor / 4.0) * d0))
    report = DiameterReport(out, slack)
    for v in report.violations:
        logger.debug(f"Diameter bound broken at step {v.step}: {v.next_diameter!r} > {v.bound!r}")
    return report


@dataclass
class WeightSchedule:
    n: int
    m: int
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ConfigurationError(f"Cluster sizes must be positive, got n={self.n} m={self.m}")
        arrays = [np.atleast_1d(np.asarray(a, dtype=np.float64))
                  for a in (self.alpha, self.beta, self.gamma, self.delta)]
        if len({a.shape for a in arrays}) != 1:
            raise ConfigurationError("Schedule arrays differ in length")
        self.alpha, self.beta, self.gamma, self.delta = arrays
        if min(a.min() for a in arrays) <= 0:
            raise ConfigurationError("Schedule weights must be strictly positive")
        residual = self.residual()
        if residual > ROW_SUM_TOL:
            raise ConfigurationError(f"Rows of the weight pattern do not sum to one, residual {residual:.3e}")

    @property
    def length(self) -> int:
        return self.alpha.size

    def residual(self) -> float:
        r1 = self.delta + (self.n - 1) * self.alpha + self.m * self.gamma - 1.0
        r2 = self.delta + (self.m - 1) * self.beta + self.n * self.gamma - 1.0
        return float(max(np.abs(r1).max(), np.abs(r2).max()))

    def at(self, t: int) -> tuple[float, float, float, float]:
        return (float(self.alpha[t]), float(self.beta[t]),
                float(self.gamma[t]), float(self.delta[t]))

    def weight_matrix(self, t: int) -> np.ndarray:
        a, b, g, d = self.at(t)
        n, m = self.n, self.m
        w = np.full((n + m, n + m), g)
        w[:n, :n] = a
        w[n:, n:] = b
        np.fill_diagonal(w, d)
        return w


def _sample_step(n: int, m: int, rng: np.random.Generator) -> tuple[float, float, float, float]:
    for _ in range(SCHEDULE_TRIES):
        g = rng.uniform(0.0, 1.0 / (n + m))
        if n == 1 and m == 1:
            a = b = g
            d = 1.0 - g
        elif m == 1:
            # the second row forces delta, the first then forces alpha = gamma
            d = 1.0 - n * g
            a = b = g
        elif n == 1:
            d = 1.0 - m * g
            a = b = g
        else:
            a = rng.uniform(0.0, (1.0 - m * g) / (n - 1))
            d = 1.0 - (n - 1) * a - m * g
            b = (1.0 - d - n * g) / (m - 1)
        if min(a, b, g, d) > 0 and d > max(a, b) and (n + m) * g < 1.0:
            return a, b, g, d
    raise DataError(f"Could not sample a valid weight pattern for n={n} m={m}")


def sample_schedule(n: int, m: int, steps: int, rng: np.random.Generator,
                    vary: bool = True) -> WeightSchedule:
    """Samples gamma and alpha, then solves the row constraints for delta and beta"""
    if vary:
        rows = [_sample_step(n, m, rng) for _ in range(steps)]
    else:
        rows = [_sample_step(n, m, rng)] * steps
    a, b, g, d = (np.array(c) for c in zip(*rows))
    return WeightSchedule(n, m, a, b, g, d)


def _check_system(x0: np.ndarray, schedule: WeightSchedule, steps: int) -> np.ndarray:
    x = np.asarray(x0, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != schedule.n + schedule.m:
        raise ShapeError(f"Expected {schedule.n + schedule.m} points, got shape {x.shape}")
    if steps > schedule.length:
        raise ConfigurationError(f"Schedule covers {schedule.length} steps, {steps} requested")
    if schedule.residual() > ROW_SUM_TOL:
        raise ConfigurationError("Schedule breaks the row constraints")
    return x


def simulate_two_clusters(x0: np.ndarray, schedule: WeightSchedule, steps: int) -> Trajectory:
    x = _check_system(x0, schedule, steps)
    traj = Trajectory([x.copy()])
    for t in range(steps):
        w = schedule.weight_matrix(t)
        x = x + w @ x
        traj.states.append(x)
        traj.weights.append(w)
    return traj


def simulate_no_skip_states(x0: np.ndarray, schedule: WeightSchedule, steps: int) -> Trajectory:
    x = _check_system(x0, schedule, steps)
    traj = Trajectory([x.copy()])
    for t in range(steps):
        w = schedule.weight_matrix(t)
        x = w @ x
        traj.states.append(x)
        traj.weights.append(w)
    return traj


@dataclass
class IdentityReport:
    """Worst deviation of simulated differences from their closed-form scaling"""
    checks: int = 0
    violations: int = 0
    worst_error: float = 0.0
    tol: float = IDENTITY_TOL

    def record(self, got: np.ndarray, expected: np.ndarray):
        scale = max(1.0, float(np.abs(expected).max(initial=0.0)))
        err = float(np.abs(got - expected).max(initial=0.0)) / scale
        self.checks += 1
        self.worst_error = max(self.worst_error, err)
        if err > self.tol:
            self.violations += 1

    @property
    def passed(self) -> bool:
        return self.violations == 0


def _check_scalings(traj: Trajectory, schedule: WeightSchedule,
                    rates: Callable[[int], tuple[float, float, float]]) -> IdentityReport:
    n, m = schedule.n, schedule.m
    report = IdentityReport()
    for t in range(traj.steps):
        x0, x1 = traj.states[t], traj.states[t + 1]
        r1, r2, rc = rates(t)
        for lo, hi, r in ((0, n, r1), (n, n + m, r2)):
            for i in range(lo, hi):
                for j in range(i + 1, hi):
                    report.record(x1[i] - x1[j], r * (x0[i] - x0[j]))
        c0 = x0[:n].mean(axis=0) - x0[n:].mean(axis=0)
        c1 = x1[:n].mean(axis=0) - x1[n:].mean(axis=0)
        report.record(c1, rc * c0)
    return report


def skip_rates(schedule: WeightSchedule, t: int) -> tuple[float, float, float]:
    a, b, g, d = schedule.at(t)
    return 1.0 + d - a, 1.0 + d - b, 2.0 - (schedule.n + schedule.m) * g


def no_skip_factors(schedule: WeightSchedule, t: int) -> tuple[float, float, float]:
    a, b, g, d = schedule.at(t)
    return d - a, d - b, 1.0 - (schedule.n + schedule.m) * g


def check_prop2(traj: Trajectory, schedule: WeightSchedule) -> IdentityReport:
    """Within-cluster differences scale by 1 + delta - alpha (resp. beta) and the
    centroid difference by 2 - (n + m) gamma at every step"""
    return _check_scalings(traj, schedule, lambda t: skip_rates(schedule, t))


@dataclass
class RateReport:
    within_first: float
    within_second: float
    centroid: float
    ratio_first: float
    ratio_second: float

    @property
    def rates_above_one(self) -> bool:
        return self.within_first > 1 and self.within_second > 1 and self.centroid > 1


def rate_ratio(schedule: WeightSchedule, t: int) -> RateReport:
    """Within-cluster expansion relative to centroid expansion, per cluster"""
    a, b, g, _ = schedule.at(t)
    n, m = schedule.n, schedule.m
    w1, w2, c = skip_rates(schedule, t)
    return RateReport(w1, w2, c,
                      (2.0 - n * a - m * g) / (2.0 - n * g - m * g),
                      (2.0 - m * b - n * g) / (2.0 - m * g - n * g))


@dataclass
class NoSkipReport:
    trajectory: Trajectory
    identities: IdentityReport
    factors: list[tuple[float, float, float]]
    worst_margin: float
    violations: list[str]

    @property
    def passed(self) -> bool:
        return not self.violations and self.identities.passed


def simulate_no_skip(x0: np.ndarray, schedule: WeightSchedule, steps: int) -> NoSkipReport:
    """Runs the pattern without the residual and checks every factor lies in (0, 1),
    the diameter strictly shrinks and clusters contract faster than they approach"""
    traj = simulate_no_skip_states(x0, schedule, steps)
    identities = _check_scalings(traj, schedule, lambda t: no_skip_factors(schedule, t))
    n, m = schedule.n, schedule.m
    margins: list[float] = []
    violations: list[str] = []
    factors = []
    for t in range(steps):
        a, b, g, _ = schedule.at(t)
        f1, f2, fc = no_skip_factors(schedule, t)
        factors.append((f1, f2, fc))
        judged = [("centroid", fc)]
        if n > 1:
            judged.append(("within_first", f1))
        if m > 1:
            judged.append(("within_second", f2))
        for name, f in judged:
            margins.append(min(f, 1.0 - f))
            if not 0.0 < f < 1.0:
                violations.append(f"step {t}: {name} factor {f!r} outside (0, 1)")
        for present, w, p, name in ((n > 1, f1, a, "first"), (m > 1, f2, b, "second")):
            if present and p > g:
                margins.append(fc - w)
                if not w < fc:
                    violations.append(f"step {t}: {name} cluster factor {w!r} not below centroid {fc!r}")
        d0, d1 = diameter(traj.states[t]), diameter(traj.states[t + 1])
        if d0 > 0:
            margins.append(d0 - d1)
            if not d1 < d0:
                violations.append(f"step {t}: diameter {d1!r} did not shrink from {d0!r}")
    return NoSkipReport(traj, identities, factors, min(margins, default=0.0), violations)


def write_trajectory(path: Path, traj: Trajectory):
    d = traj.states[0].shape[1]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "point", *[f"x{i}" for i in range(d)]])
    for t, x in enumerate(traj.states):
        for i, row in enumerate(x):
            writer.writerow([t, i, *(format(float(v), ".17g") for v in row)])
    write_atomic(path, buf.getvalue())


# Suites

class CheckReport(BaseModel):
    model_config = ConfigDict(use_attribute_docstrings=True)

    name: str
    trials: int
    violations: int
    worst_margin: float
    """Smallest slack observed, negative beyond tolerance means a violation"""
    external_worst_margin: float | None = None
    """Margin of the external (1 - n delta / 4) bound, recorded only"""


class SuiteOptions(BaseModel):
    model_config = ConfigDict(use_attribute_docstrings=True, frozen=True, extra="forbid")

    trials: int = Field(1000, ge=1)
    seed: int = 0
    steps: int = Field(5, ge=1)
    directions: int = Field(1000, ge=1)
    """Random projections per hull containment check"""
    max_points: int = Field(10, ge=2)
    max_dim: int = Field(4, ge=1)
    max_cluster: int = Field(6, ge=1)


@dataclass
class SuiteRun:
    """What a suite hands back: reports plus one sample trajectory"""
    reports: list[CheckReport]
    sample: Trajectory | None = None


class CheckSuite(ABC):
    name: str

    @abstractmethod
    def run(self, opts: SuiteOptions, progress: bool = False) -> SuiteRun:
        ...

    def trials(self, opts: SuiteOptions, progress: bool):
        return tqdm.trange(opts.trials, desc=self.name, unit="trial", disable=not progress)


def random_attention_system(rng: np.random.Generator, opts: SuiteOptions
                            ) -> tuple[np.ndarray, CompatKind, np.ndarray, np.ndarray]:
    n = int(rng.integers(2, opts.max_points + 1))
    d = int(rng.integers(1, opts.max_dim + 1))
    x0 = rng.standard_normal((n, d))
    wq = rng.standard_normal((d, d))
    wk = rng.standard_normal((d, d))
    if rng.random() < 0.5:
        compat = CompatKind(MultiplicativeCompat())
    else:
        compat = CompatKind(AdditiveCompat(act="tanh"), Tensor(rng.standard_normal((1, d))))
    return x0, compat, wq, wk


class HullSuite(CheckSuite):
    name = "lemma1"

    def run(self, opts: SuiteOptions, progress: bool = False) -> SuiteRun:
        rng = np.random.default_rng(opts.seed)
        violations, worst, sample = 0, np.inf, None
        for _ in self.trials(opts, progress):
            x0, compat, wq, wk = random_attention_system(rng, opts)
            traj = simulate_attention(x0, opts.steps, compat, wq, wk)
            sample = sample or traj
            for t in range(traj.steps):
                r = check_hull_containment(traj.states[t], traj.states[t + 1], opts.directions, rng)
                worst = min(worst, r.worst_margin)
                violations += not r.passed
        return SuiteRun([CheckReport(name=self.name, trials=opts.trials, violations=violations,
                                     worst_margin=float(worst))], sample)


class DiameterSuite(CheckSuite):
    name = "lemma2"

    def run(self, opts: SuiteOptions, progress: bool = False) -> SuiteRun:
        rng = np.random.default_rng(opts.seed)
        violations, worst, external, sample = 0, np.inf, np.inf, None
        for _ in self.trials(opts, progress):
            x0, compat, wq, wk = random_attention_system(rng, opts)
            traj = simulate_attention(x0, opts.steps, compat, wq, wk)
            sample = sample or traj
            r = check_lemma2(traj)
            violations += len(r.violations)
            worst = min(worst, r.worst_margin)
            external = min(external, r.worst_external_margin)
        if external < 0:
            logger.info(f"External diameter bound undershot by {-external:.3e} (recorded only)")
        return SuiteRun([CheckReport(name=self.name, trials=opts.trials, violations=violations,
                                     worst_margin=float(worst),
                                     external_worst_margin=float(external))], sample)


def random_two_clusters(rng: np.random.Generator, opts: SuiteOptions
                        ) -> tuple[np.ndarray, WeightSchedule]:
    n = int(rng.integers(1, opts.max_cluster + 1))
    m = int(rng.integers(1, opts.max_cluster + 1))
    d = int(rng.integers(1, opts.max_dim + 1))
    schedule = sample_schedule(n, m, opts.steps, rng)
    return rng.standard_normal((n + m, d)), schedule


class SkipSuite(CheckSuite):
    name = "prop2"

    def run(self, opts: SuiteOptions, progress: bool = False) -> SuiteRun:
        rng = np.random.default_rng(opts.seed)
        violations, worst, sample = 0, 0.0, None
        for _ in self.trials(opts, progress):
            x0, schedule = random_two_clusters(rng, opts)
            traj = simulate_two_clusters(x0, schedule, opts.steps)
            sample = sample or traj
            r = check_prop2(traj, schedule)
            violations += r.violations + (schedule.residual() > ROW_SUM_TOL)
            worst = max(worst, r.worst_error)
        return SuiteRun([CheckReport(name=self.name, trials=opts.trials, violations=violations,
                                     worst_margin=IDENTITY_TOL - worst)], sample)


class RateSuite(CheckSuite):
    """Within-cluster expansion is slower than centroid expansion exactly when
    alpha (resp. beta) exceeds gamma, and every rate stays above one"""
    name = "corollary"

    def run(self, opts: SuiteOptions, progress: bool = False) -> SuiteRun:
        rng = np.random.default_rng(opts.seed)
        violations, worst = 0, np.inf
        for _ in self.trials(opts, progress):
            _, schedule = random_two_clusters(rng, opts)
            for t in range(schedule.length):
                a, b, g, _ = schedule.at(t)
                r = rate_ratio(schedule, t)
                margins = [r.within_first - 1, r.within_second - 1, r.centroid - 1]
                ok = r.rates_above_one
                for present, p, ratio in ((schedule.n > 1, a, r.ratio_first),
                                          (schedule.m > 1, b, r.ratio_second)):
                    if not present:
                        continue
                    if p == g:
                        ok = ok and ratio == 1.0
                        continue
                    margin = 1.0 - ratio if p > g else ratio - 1.0
                    margins.append(margin)
                    ok = ok and margin > 0
                worst = min(worst, *margins)
                violations += not ok
        return SuiteRun([CheckReport(name=self.name, trials=opts.trials, violations=violations,
                                     worst_margin=float(worst))])


class NoSkipSuite(CheckSuite):
    name = "noskip"

    def run(self, opts: SuiteOptions, progress: bool = False) -> SuiteRun:
        rng = np.random.default_rng(opts.seed)
        violations, worst, sample = 0, np.inf, None
        for _ in self.trials(opts, progress):
            x0, schedule = random_two_clusters(rng, opts)
            r = simulate_no_skip(x0, schedule, opts.steps)
            sample = sample or r.trajectory
            violations += len(r.violations) + r.identities.violations
            worst = min(worst, r.worst_margin)
        return SuiteRun([CheckReport(name=self.name, trials=opts.trials, violations=violations,
                                     worst_margin=float(worst))], sample)


SUITES: tuple[type[CheckSuite], ...] = (HullSuite, DiameterSuite, SkipSuite, RateSuite, NoSkipSuite)


def setup(registries: Registries):
    for suite in SUITES:
        registries.register_to(CR.Dynamics.SUITE, suite.name, suite())
