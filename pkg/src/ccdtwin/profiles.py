"""Procedural road elevation and vehicle speed profiles.

The road is a tabulated elevation z0(s) on a uniform grid of travel distance;
the speed profile is a tabulated v(t) on the controller sample grid. The
disturbance that reaches the suspension is the road vertical velocity
zdot0(t) = dz0/ds(s(t)) * v(t) with s integrated from the speed profile.
Everything is deterministic given (config, seed).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RoadConfig:
    length_m: float = 2000.0
    grid_m: float = 0.05
    n_bumps: int = 4
    n_dents: int = 3
    n_ramps: int = 2
    n_jumps: int = 2
    bump_height_m: float = 0.05
    bump_width_m: float = 2.0
    dent_depth_m: float = 0.04
    dent_width_m: float = 1.5
    ramp_height_m: float = 0.1
    ramp_length_m: float = 10.0
    jump_height_m: float = 0.03
    noise_std_m: float = 0.002
    noise_smooth_m: float = 0.5
    max_elevation_m: float = 0.15
    taper_m: float = 5.0


@dataclass(frozen=True)
class SpeedConfig:
    n_steps: int = 15000
    dt_s: float = 0.05
    v_mean_mps: float = 10.0
    v_init_mps: float = 10.0
    reversion_rate: float = 0.2
    volatility: float = 0.8
    v_min_mps: float = 0.0
    v_max_mps: float = 25.0


@dataclass(frozen=True)
class RoadProfile:
    s_m: np.ndarray
    z0_m: np.ndarray
    seed: int
    config: RoadConfig = field(default_factory=RoadConfig)

    @property
    def length_m(self) -> float:
        return float(self.config.length_m)

    def slopes(self) -> np.ndarray:
        """Cyclic central-difference dz0/ds on the grid."""
        z = self.z0_m
        ds = self.config.grid_m
        return (np.roll(z, -1) - np.roll(z, 1)) / (2.0 * ds)


@dataclass(frozen=True)
class SpeedProfile:
    t_s: np.ndarray
    v_mps: np.ndarray
    seed: int
    config: SpeedConfig = field(default_factory=SpeedConfig)


def _raised_cosine(s: np.ndarray, center: float, width: float, height: float) -> np.ndarray:
    rel = s - center
    inside = np.abs(rel) <= width / 2.0
    bump = np.zeros_like(s)
    bump[inside] = 0.5 * height * (1.0 + np.cos(2.0 * np.pi * rel[inside] / width))
    return bump


def generate_road(config: RoadConfig = RoadConfig(), seed: int = 0) -> RoadProfile:
    """Procedural road: raised-cosine bumps/dents, ramps, smoothed jumps,
    band-limited noise; capped at +/- max elevation and tapered to zero at
    both ends so the cyclic wrap is smooth."""
    rng = np.random.default_rng(seed)
    c = config
    n = int(round(c.length_m / c.grid_m))
    s = np.arange(n) * c.grid_m
    z = np.zeros(n)

    margin = c.taper_m + max(c.bump_width_m, c.dent_width_m, c.ramp_length_m)
    lo, hi = margin, c.length_m - margin

    for _ in range(c.n_bumps):
        z += _raised_cosine(s, rng.uniform(lo, hi), c.bump_width_m, c.bump_height_m)
    for _ in range(c.n_dents):
        z += _raised_cosine(s, rng.uniform(lo, hi), c.dent_width_m, -c.dent_depth_m)
    for _ in range(c.n_ramps):
        start = rng.uniform(lo, hi - c.ramp_length_m)
        sign = 1.0 if rng.uniform() < 0.5 else -1.0
        ramp = np.clip((s - start) / c.ramp_length_m, 0.0, 1.0) * c.ramp_height_m * sign
        # grade returns to zero after twice the ramp length
        fall = np.clip((s - start - 2.0 * c.ramp_length_m) / c.ramp_length_m, 0.0, 1.0)
        z += ramp - fall * c.ramp_height_m * sign
    for _ in range(c.n_jumps):
        at = rng.uniform(lo, hi)
        sign = 1.0 if rng.uniform() < 0.5 else -1.0
        # step smoothed over two grid cells so the derivative stays finite
        z += sign * c.jump_height_m * 0.5 * (1.0 + np.tanh((s - at) / c.grid_m))
        fall = np.clip((s - at - 20.0) / 10.0, 0.0, 1.0)
        z -= fall * c.jump_height_m * sign

    if c.noise_std_m > 0.0:
        white = rng.standard_normal(n)
        win = max(1, int(round(c.noise_smooth_m / c.grid_m)))
        kernel = np.ones(win) / win
        smooth = np.convolve(white, kernel, mode="same")
        sd = float(np.std(smooth))
        if sd > 0.0:
            z += smooth * (c.noise_std_m / sd)

    taper_n = max(1, int(round(c.taper_m / c.grid_m)))
    fade = 0.5 * (1.0 - np.cos(np.pi * np.arange(taper_n) / taper_n))
    z[:taper_n] *= fade
    z[-taper_n:] *= fade[::-1]

    n_clipped = int(np.sum(np.abs(z) > c.max_elevation_m))
    if n_clipped:
        log.info("road elevation cap +/-%.3g m active at %d of %d grid points",
                 c.max_elevation_m, n_clipped, n)
        z = np.clip(z, -c.max_elevation_m, c.max_elevation_m)

    return RoadProfile(s_m=s, z0_m=z, seed=seed, config=c)


def generate_speed(config: SpeedConfig = SpeedConfig(), seed: int = 0) -> SpeedProfile:
    """Mean-reverting speed trace, clipped to [v_min, v_max] (v >= 0)."""
    rng = np.random.default_rng(seed)
    c = config
    v = np.empty(c.n_steps)
    v[0] = np.clip(c.v_init_mps, c.v_min_mps, c.v_max_mps)
    noise = rng.standard_normal(c.n_steps - 1)
    sqdt = np.sqrt(c.dt_s)
    for k in range(c.n_steps - 1):
        dv = c.reversion_rate * (c.v_mean_mps - v[k]) * c.dt_s + c.volatility * sqdt * noise[k]
        v[k + 1] = np.clip(v[k] + dv, c.v_min_mps, c.v_max_mps)
    t = np.arange(c.n_steps) * c.dt_s
    return SpeedProfile(t_s=t, v_mps=v, seed=seed, config=c)


def road_slope_at(road: RoadProfile, s: np.ndarray) -> np.ndarray:
    """Linear interpolation of the central-difference grade at distance s,
    wrapping cyclically past the road end."""
    slopes = road.slopes()
    grid = np.append(road.s_m, road.length_m)
    vals = np.append(slopes, slopes[0])
    return np.interp(np.asarray(s, dtype=np.float64) % road.length_m, grid, vals)


def travel_positions(speed: SpeedProfile) -> np.ndarray:
    """Distance s(t_k) from left-endpoint integration of the speed trace."""
    s = np.zeros(speed.v_mps.size)
    s[1:] = np.cumsum(speed.v_mps[:-1]) * speed.config.dt_s
    return s


def disturbance_series(road: RoadProfile, speed: SpeedProfile) -> np.ndarray:
    """Road vertical velocity zdot0(t_k) = dz0/ds(s(t_k)) * v(t_k) for every
    step of the speed profile. Logs once if the ride wraps past the road end."""
    s = travel_positions(speed)
    if s[-1] > road.length_m:
        log.info("ride distance %.1f m exceeds road length %.1f m; wrapping cyclically",
                 s[-1], road.length_m)
    return road_slope_at(road, s) * speed.v_mps


def write_road_csv(road: RoadProfile, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        c = road.config
        fh.write(f"# road profile: seed={road.seed} length_m={c.length_m} grid_m={c.grid_m} "
                 f"bumps={c.n_bumps} dents={c.n_dents} ramps={c.n_ramps} jumps={c.n_jumps} "
                 f"noise_std_m={c.noise_std_m} cap_m={c.max_elevation_m}\n")
        w = csv.writer(fh)
        w.writerow(["s_m", "z0_m"])
        for s, z in zip(road.s_m, road.z0_m):
            w.writerow(["%.17g" % s, "%.17g" % z])


def write_speed_csv(speed: SpeedProfile, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        c = speed.config
        fh.write(f"# speed profile: seed={speed.seed} n_steps={c.n_steps} dt_s={c.dt_s} "
                 f"v_mean_mps={c.v_mean_mps} volatility={c.volatility}\n")
        w = csv.writer(fh)
        w.writerow(["t_s", "v_mps"])
        for t, v in zip(speed.t_s, speed.v_mps):
            w.writerow(["%.17g" % t, "%.17g" % v])


def _read_two_column_csv(path, col_a: str, col_b: str):
    with open(path, "r", encoding="utf-8") as fh:
        rows = [r for r in fh if not r.startswith("#")]
    reader = csv.reader(rows)
    header = next(reader)
    if header != [col_a, col_b]:
        raise ValueError(f"expected columns {[col_a, col_b]}, got {header}")
    a, b = [], []
    for row in reader:
        a.append(float(row[0]))
        b.append(float(row[1]))
    return np.array(a), np.array(b)


def read_road_csv(path, config: RoadConfig = RoadConfig(), seed: int = -1) -> RoadProfile:
    s, z = _read_two_column_csv(path, "s_m", "z0_m")
    grid = float(s[1] - s[0])
    cfg = RoadConfig(length_m=float(s[-1] + grid), grid_m=grid,
                     max_elevation_m=config.max_elevation_m)
    return RoadProfile(s_m=s, z0_m=z, seed=seed, config=cfg)


def read_speed_csv(path, seed: int = -1) -> SpeedProfile:
    t, v = _read_two_column_csv(path, "t_s", "v_mps")
    dt = float(t[1] - t[0])
    return SpeedProfile(t_s=t, v_mps=v, seed=seed,
                        config=SpeedConfig(n_steps=len(t), dt_s=dt))
