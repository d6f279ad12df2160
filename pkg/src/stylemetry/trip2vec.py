"""Trip-level style vectors and trip-level driver votes.

A trip's vector is the sum of its segment codes divided by the largest
coordinate of that sum, so every trip maps into [0, 1]^k regardless of how
many segments it has.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import IO, Iterable, Sequence

import numpy as np

from . import arnet
from .featurize import FeatureMatrix, group_by_trip

LAYERS = ("code", "shared")


@dataclass
class TripVector:
    values: np.ndarray
    driver_id: str
    trip_id: str
    q: int


def default_layer(model: arnet.ArnetModel) -> str:
    # a classification-only net has no trained bottleneck; use x_tilde
    return "shared" if model.config.mode == "conet" else "code"


def normalize_sum(codes: np.ndarray) -> np.ndarray:
    """Sum over segments divided by the max coordinate; all-zero stays zero.

    For codes that can be negative (the shared layer) the divisor is the
    largest absolute coordinate, which equals the max for nonnegative sums.
    """
    codes = np.atleast_2d(np.asarray(codes, dtype=np.float64))
    if codes.shape[0] == 0:
        raise ValueError("a trip needs at least one segment")
    sigma = codes.sum(axis=0)
    scale = np.max(np.abs(sigma))
    if scale == 0:
        return np.zeros_like(sigma)
    return sigma / scale


def _check_one_trip(segments: Sequence[FeatureMatrix]) -> None:
    if not segments:
        raise ValueError("a trip needs at least one segment")
    keys = {(m.meta.driver_id, m.meta.trip_id) for m in segments}
    if len(keys) != 1:
        raise ValueError(f"segments span {len(keys)} trips")


def encode_trip(model: arnet.ArnetModel, segments: Sequence[FeatureMatrix], layer: str | None = None) -> TripVector:
    _check_one_trip(segments)
    layer = layer or default_layer(model)
    if layer not in LAYERS:
        raise ValueError(f"layer must be one of {LAYERS}")
    enc = arnet.encode_segment if layer == "code" else arnet.encode_shared
    codes = enc(model, list(segments))
    m = segments[0].meta
    return TripVector(normalize_sum(codes), m.driver_id, m.trip_id, len(segments))


def encode_trips(
    model: arnet.ArnetModel, matrices: Iterable[FeatureMatrix], layer: str | None = None
) -> list[TripVector]:
    """Encode every trip in ``matrices`` with one batched forward pass."""
    groups = group_by_trip(matrices)
    if not groups:
        return []
    layer = layer or default_layer(model)
    if layer not in LAYERS:
        raise ValueError(f"layer must be one of {LAYERS}")
    flat = [m for segs in groups.values() for m in segs]
    enc = arnet.encode_segment if layer == "code" else arnet.encode_shared
    codes = enc(model, flat)
    out = []
    start = 0
    for (driver, trip), segs in groups.items():
        q = len(segs)
        out.append(TripVector(normalize_sum(codes[start:start + q]), driver, trip, q))
        start += q
    return out


def rank_votes(votes: np.ndarray) -> list[int]:
    """Descending by vote, ties broken by ascending class index."""
    votes = np.asarray(votes)
    return sorted(range(len(votes)), key=lambda j: (-votes[j], j))


def vote(distributions: np.ndarray) -> tuple[int, list[int]]:
    v = np.asarray(distributions, dtype=np.float64).sum(axis=0)
    ranking = rank_votes(v)
    return ranking[0], ranking


def predict_trip(model: arnet.ArnetModel, segments: Sequence[FeatureMatrix]) -> tuple[int, list[int]]:
    """Confidence-weighted vote: sum of segment softmax outputs."""
    _check_one_trip(segments)
    return vote(arnet.predict_segment(model, list(segments)))


# trip-vector file: driver_id,trip_id,q,v0..v{k-1}


def format_trip_vectors(vectors: Sequence[TripVector]) -> str:
    k = len(vectors[0].values) if vectors else 0
    buf = io.StringIO()
    buf.write(",".join(["driver_id", "trip_id", "q"] + [f"v{j}" for j in range(k)]) + "\n")
    for tv in vectors:
        if len(tv.values) != k:
            raise ValueError("trip vectors differ in length")
        buf.write(",".join([tv.driver_id, tv.trip_id, str(tv.q)] + [f"{v:.9g}" for v in tv.values]) + "\n")
    return buf.getvalue()


def write_trip_vectors(vectors: Sequence[TripVector], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_trip_vectors(vectors))


def parse_trip_vectors(fh: IO[str]) -> list[TripVector]:
    reader = csv.reader(fh)
    header = next(reader, None)
    if header is None:
        return []
    if header[:3] != ["driver_id", "trip_id", "q"]:
        raise ValueError("trip-vector header must start with driver_id,trip_id,q")
    k = len(header) - 3
    out = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != k + 3:
            raise ValueError(f"line {lineno}: expected {k + 3} columns, got {len(row)}")
        try:
            vals = np.array([float(v) for v in row[3:]])
            q = int(row[2])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
        out.append(TripVector(vals, row[0], row[1], q))
    return out


def read_trip_vectors(path) -> list[TripVector]:
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_trip_vectors(fh)
