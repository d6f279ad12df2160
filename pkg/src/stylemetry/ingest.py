"""Reading, writing and cleaning raw 1 Hz GPS trips.

Trip-CSV layout::

    driver_id,trip_id,t,lat,lon
    d1,t1,0,45.5012345,-73.5678901
    ...

Rows of one trip do not need to be contiguous.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import IO, Iterable, Iterator

import numpy as np

HEADER = ("driver_id", "trip_id", "t", "lat", "lon")
DEFAULT_MAX_GAP = 3


class TripParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class TripValidationError(ValueError):
    pass


@dataclass(frozen=True)
class GpsPoint:
    t: int
    lat: float
    lon: float


class RawTrip:
    """A driver-labelled GPS trip stored column-wise.

    ``points`` gives the row view; the ``t``/``lat``/``lon`` arrays are what
    the featurizer consumes.
    """

    __slots__ = ("driver_id", "trip_id", "t", "lat", "lon")

    def __init__(self, driver_id: str, trip_id: str, t, lat, lon):
        self.driver_id = str(driver_id)
        self.trip_id = str(trip_id)
        self.t = np.asarray(t, dtype=np.int64)
        self.lat = np.asarray(lat, dtype=np.float64)
        self.lon = np.asarray(lon, dtype=np.float64)
        if not (self.t.shape == self.lat.shape == self.lon.shape) or self.t.ndim != 1:
            raise ValueError("t, lat and lon must be 1-d arrays of equal length")

    @classmethod
    def from_points(cls, driver_id: str, trip_id: str, points: Iterable[GpsPoint]) -> "RawTrip":
        pts = list(points)
        return cls(
            driver_id,
            trip_id,
            [p.t for p in pts],
            [p.lat for p in pts],
            [p.lon for p in pts],
        )

    @property
    def points(self) -> list[GpsPoint]:
        return [GpsPoint(int(t), float(a), float(o)) for t, a, o in zip(self.t, self.lat, self.lon)]

    def __len__(self) -> int:
        return len(self.t)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RawTrip):
            return NotImplemented
        return (
            self.driver_id == other.driver_id
            and self.trip_id == other.trip_id
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.lat, other.lat)
            and np.array_equal(self.lon, other.lon)
        )

    def __repr__(self) -> str:
        return f"RawTrip(driver_id={self.driver_id!r}, trip_id={self.trip_id!r}, n={len(self)})"


def parse_trips(source: IO[bytes] | IO[str] | bytes | str) -> list[RawTrip]:
    """Parse trip-CSV text into trips, one per distinct (driver_id, trip_id).

    Points keep the order in which they were encountered. Only field parsing
    happens here; see :func:`validate_trip` for cleaning.
    """
    if isinstance(source, bytes):
        text = source.decode("utf-8")
    elif isinstance(source, str):
        text = source
    else:
        data = source.read()
        text = data.decode("utf-8") if isinstance(data, bytes) else data
    if not text.strip():
        return []

    reader = csv.reader(io.StringIO(text))
    groups: dict[tuple[str, str], tuple[list, list, list]] = {}
    for lineno, row in enumerate(reader, start=1):
        if lineno == 1:
            if tuple(c.strip() for c in row) != HEADER:
                raise TripParseError(lineno, f"expected header {','.join(HEADER)}")
            continue
        if not row:
            continue
        if len(row) != 5:
            raise TripParseError(lineno, f"expected 5 columns, got {len(row)}")
        driver_id, trip_id, t_raw, lat_raw, lon_raw = row
        try:
            t = int(t_raw)
            lat = float(lat_raw)
            lon = float(lon_raw)
        except ValueError as exc:
            raise TripParseError(lineno, str(exc)) from None
        ts, lats, lons = groups.setdefault((driver_id, trip_id), ([], [], []))
        ts.append(t)
        lats.append(lat)
        lons.append(lon)
    return [RawTrip(d, tr, *cols) for (d, tr), cols in groups.items()]


def _format_coord(v: float) -> str:
    # shortest exact positional form, padded to at least 6 fractional digits
    return np.format_float_positional(float(v), unique=True, trim="k", min_digits=6)


def iter_trip_rows(trips: Iterable[RawTrip]) -> Iterator[str]:
    yield ",".join(HEADER) + "\n"
    for trip in trips:
        for t, lat, lon in zip(trip.t.tolist(), trip.lat.tolist(), trip.lon.tolist()):
            yield f"{trip.driver_id},{trip.trip_id},{t},{_format_coord(lat)},{_format_coord(lon)}\n"


def serialize_trips(trips: Iterable[RawTrip]) -> str:
    return "".join(iter_trip_rows(trips))


def write_trips(trips: Iterable[RawTrip], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.writelines(iter_trip_rows(trips))


def read_trips(path) -> list[RawTrip]:
    with open(path, "rb") as fh:
        return parse_trips(fh)


def _check_coordinates(trip: RawTrip) -> None:
    for i, (t, lat, lon) in enumerate(zip(trip.t, trip.lat, trip.lon)):
        if not (math.isfinite(lat) and math.isfinite(lon)):
            raise TripValidationError(
                f"trip {trip.driver_id}/{trip.trip_id}: non-finite coordinate at point {i} (t={t})"
            )
        if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
            raise TripValidationError(
                f"trip {trip.driver_id}/{trip.trip_id}: coordinate out of range at point {i} "
                f"(t={t}, lat={lat}, lon={lon})"
            )


def validate_trip(trip: RawTrip, max_gap: int = DEFAULT_MAX_GAP) -> list[RawTrip]:
    """Sort, de-duplicate, split on long gaps and fill short gaps at 1 Hz.

    A gap longer than ``max_gap`` seconds starts a new trip; gaps of
    2..max_gap seconds are filled by linear interpolation. When a trip is
    split, pieces get ``-0``, ``-1``, ... appended to their trip_id.
    """
    if len(trip) == 0:
        raise TripValidationError(f"trip {trip.driver_id}/{trip.trip_id}: no points")
    _check_coordinates(trip)

    order = np.argsort(trip.t, kind="stable")
    t, lat, lon = trip.t[order], trip.lat[order], trip.lon[order]
    keep = np.ones(len(t), dtype=bool)
    keep[1:] = t[1:] != t[:-1]
    t, lat, lon = t[keep], lat[keep], lon[keep]

    breaks = np.flatnonzero(np.diff(t) > max_gap) + 1
    pieces = np.split(np.arange(len(t)), breaks)
    out = []
    for k, idx in enumerate(pieces):
        pt, plat, plon = t[idx], lat[idx], lon[idx]
        if len(pt) > 1 and np.any(np.diff(pt) > 1):
            full_t = np.arange(pt[0], pt[-1] + 1, dtype=np.int64)
            plat = np.interp(full_t, pt, plat)
            plon = np.interp(full_t, pt, plon)
            pt = full_t
        trip_id = trip.trip_id if len(pieces) == 1 else f"{trip.trip_id}-{k}"
        out.append(RawTrip(trip.driver_id, trip_id, pt, plat, plon))
    return out


def validate_trips(trips: Iterable[RawTrip], max_gap: int = DEFAULT_MAX_GAP) -> list[RawTrip]:
    out: list[RawTrip] = []
    for trip in trips:
        out.extend(validate_trip(trip, max_gap))
    return out
