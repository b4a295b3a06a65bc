"""Seeded synthetic series shared by the test modules."""

import numpy as np

from stsad.data import LabeledSeries, TimeSeries

HOUR = 3600
T0 = 1_500_000_000 // 86400 * 86400


def grid(n, granularity=HOUR, start=T0):
    return start + granularity * np.arange(n, dtype=np.int64)


def random_walk(seed, n=2000, q=1.0, h=0.01, granularity=HOUR):
    rng = np.random.default_rng(seed)
    level = np.cumsum(rng.normal(0.0, np.sqrt(q), n))
    return TimeSeries(grid(n, granularity), level + rng.normal(0.0, np.sqrt(h), n), granularity)


def daily_sinusoid(seed, n=2000, amplitude=5.0, noise=1.0, level=50.0, granularity=HOUR):
    rng = np.random.default_rng(seed)
    ts = grid(n, granularity)
    phase = 2 * np.pi * (ts % 86400) / 86400
    return TimeSeries(ts, level + amplitude * np.sin(phase) + rng.normal(0.0, noise, n), granularity)


def exp_growth(seed, n=2000, rate=0.01, noise=0.01, granularity=HOUR):
    rng = np.random.default_rng(seed)
    t = np.arange(n)
    return TimeSeries(grid(n, granularity), np.exp(rate * t) * (1 + noise * rng.normal(size=n)),
                      granularity)


def labeled(series, anomalies=(), kpi_id="kpi", magnitude=10.0, width=3):
    """Add level spikes of ``magnitude`` at the given start indices and label them."""
    values = series.values.copy()
    labels = np.zeros(len(series), dtype=np.int8)
    for s in anomalies:
        values[s:s + width] += magnitude
        labels[s:s + width] = 1
    return LabeledSeries(TimeSeries(series.timestamps, values, series.granularity), labels, kpi_id)


def with_zeros(share, n=2000, seed=0, granularity=60):
    """Gaussian noise around 50 with a ``share`` of points set to exactly zero."""
    rng = np.random.default_rng(seed)
    v = 50 + rng.normal(0, 2.0, n)
    v[rng.choice(n, size=max(1, round(share * n)), replace=False)] = 0.0
    return TimeSeries(grid(n, granularity), v, granularity)
