"""Diurnal user traffic: thinned inhomogeneous Poisson arrivals."""

from dataclasses import dataclass

import numpy as np

DAY_S = 86_400.0


def arrival_rate(t_ms, traffic):
    """Instantaneous arrival rate (per second) at simulated time ``t_ms``."""
    t = np.asarray(t_ms, dtype=float) / 1000.0
    return traffic.base_rate * (1.0 + traffic.amplitude * np.sin(2 * np.pi * (t - traffic.phase) / DAY_S))


def expected_arrivals(t0_ms, t1_ms, traffic):
    """Closed-form integral of the arrival rate over ``[t0, t1)``."""
    omega = 2 * np.pi / DAY_S
    t0 = np.asarray(t0_ms, dtype=float) / 1000.0 - traffic.phase
    t1 = np.asarray(t1_ms, dtype=float) / 1000.0 - traffic.phase
    return traffic.base_rate * ((t1 - t0) - traffic.amplitude / omega * (np.cos(omega * t1) - np.cos(omega * t0)))


@dataclass
class Arrivals:
    times: np.ndarray  # ms, sorted
    users: np.ndarray
    keys: np.ndarray

    def __len__(self):
        return len(self.times)


def generate_arrivals(t0_ms, t1_ms, traffic, rng):
    """Arrivals in ``[t0, t1)`` drawn from ``rng`` (a numpy Generator).

    Candidates come from a homogeneous process at the peak rate and are kept
    with probability ``rate(t) / peak``.
    """
    if not t1_ms > t0_ms:
        raise ValueError("interval must have t1 > t0")
    peak = traffic.base_rate * (1.0 + traffic.amplitude)
    n = rng.poisson(peak * (t1_ms - t0_ms) / 1000.0)
    times = np.sort(rng.uniform(t0_ms, t1_ms, n))
    if traffic.amplitude > 0:
        keep = rng.uniform(0.0, 1.0, n) * peak < arrival_rate(times, traffic)
        times = times[keep]
    m = len(times)
    users = rng.integers(0, traffic.population, m)
    keys = rng.integers(0, traffic.catalog, m)
    return Arrivals(times, users, keys)
