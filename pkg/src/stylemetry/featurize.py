"""GPS trip -> 35 x (2*L_s/L_f) statistical feature matrices.

Each trip yields a 5-row series of instantaneous movement features, one
column per GPS point. The series is cut into half-overlapping segments of
``L_s`` points and every segment into half-overlapping frames of ``L_f``
points; seven statistics per feature and frame give one matrix column.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import IO, Iterable, Iterator, NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .ingest import GpsPoint, RawTrip

EARTH_RADIUS_M = 6371008.8
N_BASIC = 5
N_STATS = 7
BASIC_FEATURES = ("speed", "diff_speed", "acceleration", "diff_acceleration", "angular_speed")
STATISTICS = ("mean", "min", "max", "q25", "q50", "q75", "std")


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class FeaturizeConfig:
    segment_len: int = 256  # L_s, seconds
    frame_len: int = 4  # L_f, seconds

    def __post_init__(self):
        if self.frame_len <= 0 or self.segment_len <= 0:
            raise ValueError("segment_len and frame_len must be positive")
        if self.frame_len >= self.segment_len:
            raise ValueError("frame_len must be smaller than segment_len")
        if self.frame_len % 2:
            raise ValueError("frame_len must be even")
        if self.segment_len % self.frame_len:
            raise ValueError("segment_len must be divisible by frame_len")

    @property
    def n_frames(self) -> int:
        return 2 * self.segment_len // self.frame_len


class FeatureMeta(NamedTuple):
    driver_id: str
    trip_id: str
    segment_index: int


@dataclass
class FeatureMatrix:
    values: np.ndarray  # (35, n_frames)
    meta: FeatureMeta

    @property
    def driver_id(self) -> str:
        return self.meta.driver_id

    @property
    def trip_id(self) -> str:
        return self.meta.trip_id


def row_index(feature: int, statistic: int) -> int:
    return N_STATS * feature + statistic


def _haversine(lat1, lon1, lat2, lon2):
    phi1, phi2 = np.radians(lat1), np.radians(lat2)
    dphi = phi2 - phi1
    dlmb = np.radians(lon2) - np.radians(lon1)
    a = np.sin(dphi / 2) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(dlmb / 2) ** 2
    dist = 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))
    y = np.sin(dlmb) * np.cos(phi2)
    x = np.cos(phi1) * np.sin(phi2) - np.sin(phi1) * np.cos(phi2) * np.cos(dlmb)
    bearing = np.arctan2(y, x)
    # identical points: bearing 0; fold -pi onto pi so the range is (-pi, pi]
    bearing = np.where(dist == 0, 0.0, bearing)
    bearing = np.where(bearing == -np.pi, np.pi, bearing)
    return dist, bearing


def geo_step(p1: GpsPoint, p2: GpsPoint) -> tuple[float, float]:
    """Great-circle distance (m) and initial bearing (rad, 0 = north)."""
    dist, bearing = _haversine(p1.lat, p1.lon, p2.lat, p2.lon)
    return float(dist), float(bearing)


def wrap_angle(a):
    """Wrap angles into [-pi, pi)."""
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


def basic_features(trip: RawTrip) -> np.ndarray:
    """5 x N series of speed, its difference, acceleration norm, its
    difference and angular speed, assuming 1 Hz sampling."""
    n = len(trip)
    if n < 3:
        raise InsufficientDataError(
            f"trip {trip.driver_id}/{trip.trip_id} has {n} points, need at least 3"
        )
    dist, bearing_step = _haversine(trip.lat[:-1], trip.lon[:-1], trip.lat[1:], trip.lon[1:])

    speed = np.empty(n)
    speed[1:] = dist
    speed[0] = speed[1]
    diff_speed = np.zeros(n)
    diff_speed[1:] = np.diff(speed)
    acc = np.abs(diff_speed)
    diff_acc = np.zeros(n)
    diff_acc[1:] = np.diff(acc)
    ang = np.zeros(n)
    ang[2:] = wrap_angle(np.diff(bearing_step))
    return np.vstack([speed, diff_speed, acc, diff_acc, ang])


def segment_series(series: np.ndarray, cfg: FeaturizeConfig = FeaturizeConfig()) -> list[np.ndarray]:
    n = series.shape[1]
    ls, shift = cfg.segment_len, cfg.segment_len // 2
    if n < ls:
        return []
    return [series[:, start:start + ls] for start in range(0, n - ls + 1, shift)]


def _frame_stats(windows: np.ndarray) -> np.ndarray:
    """windows: (5, F, L_f) -> (35, F)."""
    q25, q50, q75 = np.percentile(windows, [25, 50, 75], axis=-1)
    stats = np.stack(
        [
            windows.mean(axis=-1),
            windows.min(axis=-1),
            windows.max(axis=-1),
            q25,
            q50,
            q75,
            windows.std(axis=-1),
        ],
        axis=1,
    )  # (5, 7, F)
    return stats.reshape(N_BASIC * N_STATS, -1)


def frame_statistics(window: np.ndarray) -> np.ndarray:
    """35-vector of (mean, min, max, q25, q50, q75, std) per feature row."""
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2 or window.shape[0] != N_BASIC:
        raise ValueError(f"expected a 5 x L_f window, got shape {window.shape}")
    return _frame_stats(window[:, None, :])[:, 0]


def segment_matrix(segment: np.ndarray, cfg: FeaturizeConfig = FeaturizeConfig()) -> np.ndarray:
    half = cfg.frame_len // 2
    padded = np.concatenate([segment, np.repeat(segment[:, -1:], half, axis=1)], axis=1)
    windows = sliding_window_view(padded, cfg.frame_len, axis=1)[:, ::half, :]
    assert windows.shape[1] == cfg.n_frames
    return _frame_stats(windows)


def featurize_trip(trip: RawTrip, cfg: FeaturizeConfig = FeaturizeConfig()) -> list[FeatureMatrix]:
    if len(trip) < cfg.segment_len:
        return []
    series = basic_features(trip)
    return [
        FeatureMatrix(segment_matrix(seg, cfg), FeatureMeta(trip.driver_id, trip.trip_id, i))
        for i, seg in enumerate(segment_series(series, cfg))
    ]


def featurize_trips(trips: Iterable[RawTrip], cfg: FeaturizeConfig = FeaturizeConfig()) -> list[FeatureMatrix]:
    out: list[FeatureMatrix] = []
    for trip in trips:
        out.extend(featurize_trip(trip, cfg))
    return out


def group_by_trip(matrices: Iterable[FeatureMatrix]) -> dict[tuple[str, str], list[FeatureMatrix]]:
    """Group matrices by (driver_id, trip_id), preserving first-seen order."""
    groups: dict[tuple[str, str], list[FeatureMatrix]] = {}
    for m in matrices:
        groups.setdefault((m.meta.driver_id, m.meta.trip_id), []).append(m)
    return groups


def stack(matrices: list[FeatureMatrix]) -> np.ndarray:
    return np.stack([m.values for m in matrices]) if matrices else np.zeros((0, N_BASIC * N_STATS, 0))


# feature-matrix file: "driver_id,trip_id,segment_index" then one line per row


def iter_feature_lines(matrices: Iterable[FeatureMatrix]) -> Iterator[str]:
    for m in matrices:
        yield f"{m.meta.driver_id},{m.meta.trip_id},{m.meta.segment_index}\n"
        for row in m.values:
            yield ",".join(repr(float(v)) for v in row) + "\n"


def write_feature_file(matrices: Iterable[FeatureMatrix], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(iter_feature_lines(matrices))


def parse_feature_file(fh: IO[str], n_rows: int = N_BASIC * N_STATS) -> list[FeatureMatrix]:
    lines = [ln.rstrip("\r\n") for ln in fh]
    while lines and not lines[-1].strip():
        lines.pop()
    out = []
    i = 0
    while i < len(lines):
        meta = lines[i].split(",")
        if len(meta) != 3:
            raise ValueError(f"line {i + 1}: expected 'driver_id,trip_id,segment_index'")
        try:
            seg = int(meta[2])
        except ValueError:
            raise ValueError(f"line {i + 1}: bad segment index {meta[2]!r}") from None
        body = lines[i + 1:i + 1 + n_rows]
        if len(body) != n_rows:
            raise ValueError(f"line {i + 1}: record truncated, expected {n_rows} value lines")
        try:
            values = np.array([[float(v) for v in ln.split(",")] for ln in body])
        except ValueError as exc:
            raise ValueError(f"record at line {i + 1}: {exc}") from None
        if values.ndim != 2 or not np.all(np.isfinite(values)):
            raise ValueError(f"record at line {i + 1}: ragged or non-finite values")
        out.append(FeatureMatrix(values, FeatureMeta(meta[0], meta[1], seg)))
        i += 1 + n_rows
    return out


def read_feature_file(path) -> list[FeatureMatrix]:
    with open(path, encoding="utf-8") as fh:
        return parse_feature_file(fh)

