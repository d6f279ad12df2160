"""Driver-count estimation, preference tuning and driver identification.

Estimation: sample g unseen drivers, cluster their trip vectors with
affinity propagation, compare the cluster count with g (absolute error) and
the partition with the true drivers (AMI). Identification: segment accuracy
and trip-level top-1/top-5 from summed segment softmax outputs.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .. import arnet, clusteval, trip2vec
from ..featurize import FeatureMatrix, group_by_trip
from ..trip2vec import TripVector

# (points, preference) -> ClusterResult
ClusterFn = Callable[[np.ndarray, float], clusteval.ClusterResult]


def _points(vectors) -> np.ndarray:
    if isinstance(vectors, np.ndarray):
        return np.atleast_2d(vectors)
    return np.stack([tv.values for tv in vectors])


def estimate_driver_count(
    vectors,
    preference: float,
    damping: float = 0.5,
    max_iter: int = 200,
    convergence_iter: int = 15,
    seed: int = 0,
) -> clusteval.ClusterResult:
    """Cluster trip vectors; ``n_clusters`` is the driver-count estimate.

    Non-converged runs come back as singletons with ``converged=False``.
    """
    X = _points(vectors)
    if X.shape[0] < 1:
        raise ValueError("need at least one trip vector")
    S = clusteval.similarity(X, preference)
    return clusteval.affinity_propagation(S, damping, max_iter, convergence_iter, seed)


@dataclass
class EstimationRun:
    group: int
    repeat: int
    drivers: tuple[str, ...]
    n_trips: int
    n_clusters: int
    abs_error: int
    ami: float
    converged: bool


@dataclass
class GroupSummary:
    group: int
    mean_abs_error: float
    std_abs_error: float
    mean_ami: float
    std_ami: float


@dataclass
class EstimationReport:
    preference: float
    groups: list[GroupSummary]
    runs: list[EstimationRun] = field(repr=False)

    @property
    def avg_abs_error(self) -> float:
        return float(np.mean([g.mean_abs_error for g in self.groups]))

    @property
    def avg_ami(self) -> float:
        return float(np.mean([g.mean_ami for g in self.groups]))

    @property
    def n_unconverged(self) -> int:
        return sum(not r.converged for r in self.runs)

    def summary_line(self) -> str:
        return f"avg abs_error={self.avg_abs_error:.4f} ami={self.avg_ami:.4f}"

    def to_table(self) -> str:
        buf = io.StringIO()
        buf.write(f"{'drivers':>8}  {'abs error':>15}  {'AMI':>15}\n")
        for g in self.groups:
            err = f"{g.mean_abs_error:.2f}±{g.std_abs_error:.2f}"
            ami = f"{g.mean_ami:.2f}±{g.std_ami:.2f}"
            buf.write(f"{g.group:>8}  {err:>15}  {ami:>15}\n")
        buf.write(f"{'avg':>8}  {self.avg_abs_error:>15.2f}  {self.avg_ami:>15.2f}\n")
        return buf.getvalue()

    def to_keyvalue(self) -> str:
        lines = [f"preference={self.preference!r}"]
        for g in self.groups:
            lines += [
                f"group.{g.group}.mean_abs_error={g.mean_abs_error!r}",
                f"group.{g.group}.std_abs_error={g.std_abs_error!r}",
                f"group.{g.group}.mean_ami={g.mean_ami!r}",
                f"group.{g.group}.std_ami={g.std_ami!r}",
            ]
        lines += [
            f"avg_abs_error={self.avg_abs_error!r}",
            f"avg_ami={self.avg_ami!r}",
            f"unconverged_runs={self.n_unconverged}",
        ]
        return "\n".join(lines) + "\n"

    def runs_csv(self) -> str:
        """Raw per-run values, enough to draw per-group box plots."""
        rows = ["group,repeat,n_trips,n_clusters,abs_error,ami,converged,drivers"]
        for r in self.runs:
            rows.append(
                f"{r.group},{r.repeat},{r.n_trips},{r.n_clusters},{r.abs_error},{r.ami!r},"
                f"{int(r.converged)},{' '.join(r.drivers)}"
            )
        return "\n".join(rows) + "\n"


def _by_driver(vectors: Sequence[TripVector]) -> dict[str, list[TripVector]]:
    out: dict[str, list[TripVector]] = {}
    for tv in vectors:
        out.setdefault(tv.driver_id, []).append(tv)
    return out


def estimation_benchmark(
    vectors: Sequence[TripVector],
    preference: float,
    groups: int = 10,
    repeats: int = 25,
    seed: int = 0,
    trips_per_driver: int | None = None,
    cluster_fn: ClusterFn | None = None,
    damping: float = 0.5,
    max_iter: int = 200,
    convergence_iter: int = 15,
) -> EstimationReport:
    """Estimation protocol on already-encoded trip vectors.

    Group sizes run 1..groups; each (group, repeat) draws its drivers
    without replacement from its own RNG stream, so runs are independent of
    evaluation order. With ``trips_per_driver`` each sampled driver
    contributes at most that many trips, drawn from the same stream.
    """
    if groups < 1 or repeats < 1:
        raise ValueError("groups and repeats must be positive")
    pool = _by_driver(vectors)
    drivers = sorted(pool)
    if cluster_fn is None:
        def cluster_fn(X, p):
            return estimate_driver_count(X, p, damping, max_iter, convergence_iter, seed)

    runs: list[EstimationRun] = []
    summaries = []
    for g in range(1, groups + 1):
        if g > len(drivers):
            raise ValueError(f"group size {g} exceeds the pool's {len(drivers)} drivers")
        errs, amis = [], []
        for r in range(repeats):
            rng = np.random.default_rng([seed, g, r])
            chosen = [drivers[i] for i in sorted(rng.choice(len(drivers), size=g, replace=False))]
            sample: list[TripVector] = []
            for d in chosen:
                trips = pool[d]
                if trips_per_driver is not None and len(trips) > trips_per_driver:
                    keep = np.sort(rng.choice(len(trips), size=trips_per_driver, replace=False))
                    trips = [trips[i] for i in keep]
                sample.extend(trips)
            result = cluster_fn(_points(sample), preference)
            err = clusteval.abs_error(g, result.n_clusters)
            score = clusteval.ami([tv.driver_id for tv in sample], result.labels)
            runs.append(EstimationRun(g, r, tuple(chosen), len(sample), int(result.n_clusters), err, float(score), bool(result.converged)))
            errs.append(err)
            amis.append(score)
        summaries.append(GroupSummary(g, float(np.mean(errs)), float(np.std(errs)), float(np.mean(amis)), float(np.std(amis))))
    return EstimationReport(float(preference), summaries, runs)


def run_estimation_benchmark(
    model: arnet.ArnetModel,
    pool: Sequence[FeatureMatrix],
    preference: float,
    groups: int = 10,
    repeats: int = 25,
    seed: int = 0,
    layer: str | None = None,
    **kwargs,
) -> EstimationReport:
    """Encode an unseen-driver pool once, then run :func:`estimation_benchmark`."""
    seen = set(model.labels) & {m.meta.driver_id for m in pool}
    if seen:
        raise ValueError(f"pool drivers overlap the training drivers: {sorted(seen)[:5]}")
    vectors = trip2vec.encode_trips(model, pool, layer)
    return estimation_benchmark(vectors, preference, groups, repeats, seed, **kwargs)


def preference_grid(vectors, n: int = 25, low: float = 0.1, high: float = 100.0) -> np.ndarray:
    """Geometric grid of multiples of the median off-diagonal similarity."""
    X = _points(vectors)
    if X.shape[0] < 2:
        return np.array([-1.0])
    S = clusteval.similarity(X, 0.0)
    med = float(np.median(S[~np.eye(len(X), dtype=bool)]))
    if med == 0:
        med = -1.0
    return med * np.geomspace(low, high, n)


def tune_preference(
    vectors: Sequence[TripVector],
    grid: Sequence[float],
    groups: int = 10,
    repeats: int = 25,
    seed: int = 0,
    **kwargs,
) -> tuple[float, np.ndarray]:
    """Least mean-abs-error preference on the grid and the full error curve.

    Ties go to the preference of smaller magnitude.
    """
    grid = [float(p) for p in grid]
    if not grid:
        raise ValueError("preference grid is empty")
    curve = np.array([
        estimation_benchmark(vectors, p, groups, repeats, seed, **kwargs).avg_abs_error for p in grid
    ])
    best = min(range(len(grid)), key=lambda i: (curve[i], abs(grid[i]), i))
    return grid[best], curve


# -- identification -----------------------------------------------------------


def split_trips(
    matrices: Sequence[FeatureMatrix], held_out_fraction: float = 0.2, seed: int = 0
) -> tuple[list[FeatureMatrix], list[FeatureMatrix]]:
    """Per-driver trip split: round(fraction * n_trips) trips held out.

    Drivers with at least two trips always keep one trip on each side.
    Whole trips move together, so no trip contributes to both parts.
    """
    if not 0 < held_out_fraction < 1:
        raise ValueError("held_out_fraction must lie in (0, 1)")
    trips: dict[str, list[str]] = {}
    for driver, trip in group_by_trip(matrices):
        trips.setdefault(driver, []).append(trip)
    rng = np.random.default_rng([seed, 0x5917])
    held = set()
    for driver in sorted(trips):
        ids = sorted(trips[driver])
        order = rng.permutation(len(ids))
        if len(ids) < 2:
            continue
        k = min(max(1, round(held_out_fraction * len(ids))), len(ids) - 1)
        held.update((driver, ids[i]) for i in order[:k])
    train = [m for m in matrices if (m.driver_id, m.trip_id) not in held]
    test = [m for m in matrices if (m.driver_id, m.trip_id) in held]
    return train, test


@dataclass
class IdentificationReport:
    segment_accuracy: float
    trip_top1: float
    trip_top5: float
    confusion: np.ndarray  # (true, predicted top-1) trip counts
    labels: list[str]
    n_segments: int
    n_trips: int

    def summary_line(self) -> str:
        return (
            f"avg segment={self.segment_accuracy:.4f} trip_top1={self.trip_top1:.4f} "
            f"trip_top5={self.trip_top5:.4f}"
        )

    def to_table(self) -> str:
        return (
            f"{'level':>10}  {'accuracy':>8}\n"
            f"{'segment':>10}  {self.segment_accuracy:>8.3f}\n"
            f"{'trip top-1':>10}  {self.trip_top1:>8.3f}\n"
            f"{'trip top-5':>10}  {self.trip_top5:>8.3f}\n"
        )

    def to_keyvalue(self) -> str:
        lines = [
            f"segment_accuracy={self.segment_accuracy!r}",
            f"trip_top1={self.trip_top1!r}",
            f"trip_top5={self.trip_top5!r}",
            f"n_segments={self.n_segments}",
            f"n_trips={self.n_trips}",
        ]
        for i, row in enumerate(self.confusion):
            lines.append(f"confusion.{self.labels[i]}={','.join(str(int(v)) for v in row)}")
        return "\n".join(lines) + "\n"


def score_identification(
    distributions: np.ndarray,
    true_class: np.ndarray,
    trip_index: np.ndarray,
    labels: Sequence[str],
) -> IdentificationReport:
    """Accuracies from per-segment class distributions.

    ``trip_index`` assigns each segment to a trip; a trip's ranking sums its
    segments' distributions, ties broken by lower class index.
    """
    P = np.asarray(distributions, dtype=np.float64)
    y = np.asarray(true_class)
    trip_index = np.asarray(trip_index)
    n_classes = len(labels)
    if P.ndim != 2 or P.shape != (len(y), n_classes) or len(trip_index) != len(y):
        raise ValueError("distributions, labels and trip index disagree in shape")
    if len(y) == 0:
        raise ValueError("no test segments")
    seg_acc = float(np.mean(np.argmax(P, axis=1) == y))
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    top1 = top5 = 0
    trips = np.unique(trip_index)
    for t in trips:
        idx = np.flatnonzero(trip_index == t)
        truth = int(y[idx[0]])
        if np.any(y[idx] != truth):
            raise ValueError(f"trip {t} mixes drivers")
        _, ranking = trip2vec.vote(P[idx])
        confusion[truth, ranking[0]] += 1
        top1 += ranking[0] == truth
        top5 += truth in ranking[:5]
    return IdentificationReport(seg_acc, top1 / len(trips), top5 / len(trips), confusion, list(labels), len(y), len(trips))


def run_identification_benchmark(model: arnet.ArnetModel, test: Sequence[FeatureMatrix]) -> IdentificationReport:
    """Segment and trip accuracies on held-out trips of training drivers."""
    groups = group_by_trip(test)
    if not groups:
        raise ValueError("no test segments")
    index = model.class_index()
    flat, true_class, trip_index = [], [], []
    for t, ((driver, trip), segs) in enumerate(groups.items()):
        if driver not in index:
            raise ValueError(f"trip {trip} belongs to unknown driver {driver!r}")
        cls = index[driver]
        flat.extend(segs)
        true_class += [cls] * len(segs)
        trip_index += [t] * len(segs)
    P = arnet.predict_segment(model, flat)
    return score_identification(P, np.array(true_class), np.array(trip_index), model.labels)
