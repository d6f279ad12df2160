"""Persona-driven synthetic 1 Hz telematics.

Every driver has a persona (cruise speed, acceleration aggressiveness, turn
sharpness, rate of speed-change events, GPS jitter). A trip is a point mass
driving between random waypoints: speed is pulled toward a target speed
(the cruise speed, or a slower one during an event) with acceleration
bounded by the aggressiveness, heading turns at waypoints at a yaw rate set
by the turn sharpness, and positions are integrated on a local tangent
plane before Gaussian jitter is added.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from scipy.stats import qmc

from ..featurize import EARTH_RADIUS_M
from ..ingest import RawTrip

# (low, high) of the auto-spread persona box
PERSONA_BOX = {
    "cruise_speed": (8.0, 30.0),
    "accel_aggressiveness": (0.6, 3.0),
    "turn_sharpness": (0.08, 0.5),
    "speed_change_rate": (0.5, 5.0),
    "jitter": (0.2, 1.5),
}
COORD_DECIMALS = 7


@dataclass(frozen=True)
class PersonaConfig:
    cruise_speed: float  # m/s
    accel_aggressiveness: float  # m/s^2
    turn_sharpness: float  # rad/s
    speed_change_rate: float  # events per minute
    jitter: float  # m, GPS noise std

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"persona {f.name} must be positive, got {v}")
        if self.cruise_speed > 60:
            raise ValueError(f"cruise_speed {self.cruise_speed} exceeds 60 m/s")


def spread_personas(n_drivers: int, seed: int = 0, first_driver: int = 0) -> list[PersonaConfig]:
    """Personas for drivers first_driver .. first_driver+n-1.

    Points come from a scrambled Halton sequence over the persona box so any
    window of driver indices is well spread, plus a small per-driver
    perturbation. The same (seed, driver index) always gives the same
    persona.
    """
    seq = qmc.Halton(d=len(PERSONA_BOX), scramble=True, seed=np.random.default_rng([seed, 0x50E5]))
    if first_driver:
        seq.fast_forward(first_driver)
    unit = seq.random(n_drivers)
    out = []
    for i, u in enumerate(unit):
        rng = np.random.default_rng([seed, first_driver + i, 0xD1])
        u = np.clip(u + rng.normal(0.0, 0.02, size=u.shape), 0.0, 1.0)
        vals = {k: lo + float(ui) * (hi - lo) for (k, (lo, hi)), ui in zip(PERSONA_BOX.items(), u)}
        out.append(PersonaConfig(**vals))
    return out


def simulate_track(persona: PersonaConfig, seconds: int, rng: np.random.Generator) -> np.ndarray:
    """(seconds, 2) east/north positions in metres, before jitter."""
    cruise = persona.cruise_speed * float(np.clip(rng.normal(1.0, 0.05), 0.8, 1.2))
    aggr = persona.accel_aggressiveness
    heading = rng.uniform(-np.pi, np.pi)
    v = cruise
    target = cruise
    event_left = 0
    to_waypoint = rng.uniform(150.0, 600.0)
    turn_left = 0.0
    p_event = persona.speed_change_rate / 60.0

    pos = np.zeros((seconds, 2))
    x = y = 0.0
    for i in range(seconds):
        pos[i] = x, y
        # speed: pull toward target, bounded by aggressiveness, plus OU noise
        if event_left > 0:
            event_left -= 1
            if event_left == 0:
                target = cruise
        elif rng.random() < p_event:
            target = cruise * rng.uniform(0.25, 0.9)
            event_left = int(rng.integers(8, 30))
        a = np.clip(0.5 * (target - v), -aggr, aggr) + 0.15 * aggr * rng.normal()
        v = max(0.0, v + a)
        # heading: turn at the waypoint's yaw rate until the turn is done
        if turn_left == 0.0:
            to_waypoint -= v
            if to_waypoint <= 0:
                turn_left = rng.uniform(0.3, 1.0) * np.pi / 2 * rng.choice([-1.0, 1.0])
                to_waypoint = rng.uniform(150.0, 600.0)
        if turn_left != 0.0:
            step = np.sign(turn_left) * min(persona.turn_sharpness, abs(turn_left))
            heading += step
            turn_left -= step
            if abs(turn_left) < 1e-12:
                turn_left = 0.0
        heading += 0.01 * persona.turn_sharpness * rng.normal()
        x += v * np.sin(heading)
        y += v * np.cos(heading)
    return pos


def track_to_latlon(xy: np.ndarray, lat0: float, lon0: float) -> tuple[np.ndarray, np.ndarray]:
    lat = lat0 + np.degrees(xy[:, 1] / EARTH_RADIUS_M)
    lon = lon0 + np.degrees(xy[:, 0] / (EARTH_RADIUS_M * np.cos(np.radians(lat0))))
    return np.round(lat, COORD_DECIMALS), np.round(lon, COORD_DECIMALS)


def generate_synthetic(
    n_drivers: int,
    trips_per_driver: int,
    trip_seconds: int,
    personas: list[PersonaConfig] | None = None,
    seed: int = 0,
    first_driver: int = 0,
) -> list[RawTrip]:
    """Deterministic synthetic trips; driver ids are ``d{index:04d}``.

    Without explicit personas, drivers get :func:`spread_personas`.
    """
    if n_drivers < 1 or trips_per_driver < 1:
        raise ValueError("n_drivers and trips_per_driver must be positive")
    if trip_seconds < 3:
        raise ValueError("trip_seconds must be at least 3")
    if personas is None:
        personas = spread_personas(n_drivers, seed, first_driver)
    if len(personas) != n_drivers:
        raise ValueError(f"{len(personas)} personas for {n_drivers} drivers")
    for p in personas:
        if not isinstance(p, PersonaConfig):
            raise ValueError(f"invalid persona {p!r}")

    trips = []
    for i, persona in enumerate(personas):
        d = first_driver + i
        for j in range(trips_per_driver):
            rng = np.random.default_rng([seed, d, j])
            xy = simulate_track(persona, trip_seconds, rng)
            xy = xy + rng.normal(0.0, persona.jitter, size=xy.shape)
            lat, lon = track_to_latlon(xy, rng.uniform(25.0, 50.0), rng.uniform(-120.0, -70.0))
            t0 = int(rng.integers(1_500_000_000, 1_600_000_000))
            trips.append(RawTrip(f"d{d:04d}", f"d{d:04d}-t{j:03d}", np.arange(t0, t0 + trip_seconds), lat, lon))
    return trips
