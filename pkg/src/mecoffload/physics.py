"""Closed-form system-model formulas and unit conversions.

Everything here is pure and works on Python floats or numpy arrays alike.
Internal units are SI: bits, Hz, seconds, Watts, Joules.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

LN2 = math.log(2.0)


@dataclass(frozen=True)
class UnitProfile:
    """Conversion factors from the table units used in config files to SI."""

    size_unit_bits_per_MB: float = 8e6
    battery_unit_joules_per_MJ: float = 1e6
    frequency_unit_hz_per_GHz: float = 1e9
    bandwidth_unit_hz_per_MHz: float = 1e6

    def __post_init__(self):
        for name in ("size_unit_bits_per_MB", "battery_unit_joules_per_MJ",
                     "frequency_unit_hz_per_GHz", "bandwidth_unit_hz_per_MHz"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be strictly positive")

    def mb_to_bits(self, mb):
        return mb * self.size_unit_bits_per_MB

    def bits_to_mb(self, bits):
        return bits / self.size_unit_bits_per_MB

    def mj_to_joules(self, mj):
        return mj * self.battery_unit_joules_per_MJ

    def ghz_to_hz(self, ghz):
        return ghz * self.frequency_unit_hz_per_GHz

    def mhz_to_hz(self, mhz):
        return mhz * self.bandwidth_unit_hz_per_MHz


@dataclass(frozen=True)
class RadioParams:
    bandwidth_W: float
    subchannels_K: int

    def __post_init__(self):
        if not self.bandwidth_W > 0:
            raise ConfigError("bandwidth must be positive")
        if int(self.subchannels_K) != self.subchannels_K or self.subchannels_K < 1:
            raise ConfigError("subchannels_K must be a positive integer")


@dataclass(frozen=True)
class EnergyParams:
    kappa: float = 5e-27
    harvest_e_n: float = 0.001

    def __post_init__(self):
        if not self.kappa > 0:
            raise ConfigError("kappa must be positive")
        if self.harvest_e_n < 0:
            raise ConfigError("harvested energy must be non-negative")


@dataclass(frozen=True)
class CostWeights:
    lambda1: float = 0.5
    lambda2: float = 0.5

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("cost weights must be non-negative")


def dbm_to_watts(p):
    return 10.0 ** ((p - 30.0) / 10.0)


def watts_to_dbm(w):
    return 10.0 * np.log10(w) + 30.0


def db_to_linear(g):
    return 10.0 ** (g / 10.0)


def linear_to_db(x):
    return 10.0 * np.log10(x)


def _require_positive(name, value):
    if np.any(np.asarray(value) <= 0):
        raise ValueError(f"{name} must be > 0")


def local_latency(z, c, f):
    """Seconds to process ``z`` bits at ``c`` cycles/bit on an ``f`` Hz CPU."""
    _require_positive("f", f)
    return z * c / f


def local_energy(z, c, f, kappa):
    _require_positive("f", f)
    return kappa * z * c * f * f


def channel_rate(W, K, p, g):
    """Shannon rate of one of ``K`` equal sub-channels of bandwidth ``W``."""
    pg = np.asarray(p) * np.asarray(g)
    if np.any(pg < 0):
        raise ValueError("p*g must be non-negative")
    rate = (W / K) * np.log2(1.0 + pg)
    return float(rate) if np.ndim(rate) == 0 else rate


def offload_time(z, d):
    """Transmission time; +inf when a non-empty task meets a zero rate."""
    z_arr = np.asarray(z, dtype=float)
    d_arr = np.asarray(d, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(z_arr == 0.0, 0.0,
                     np.where(d_arr > 0.0, z_arr / np.where(d_arr > 0.0, d_arr, 1.0), np.inf))
    return float(t) if t.ndim == 0 else t


def offload_energy(p, t_off):
    # p = 0 with an infinite transmit time spends nothing
    p_arr = np.asarray(p, dtype=float)
    with np.errstate(invalid="ignore"):
        e = np.where(p_arr == 0.0, 0.0, p_arr * np.asarray(t_off, dtype=float))
    return float(e) if e.ndim == 0 else e


def server_service_time(z, c, f_e):
    _require_positive("f_e", f_e)
    return z * c / f_e


def task_cost(T_n, E_n, w: CostWeights):
    return w.lambda1 * T_n + w.lambda2 * E_n


def task_penalty(T_n, tau_n, b_n, b_min, w: CostWeights, t_cap=None):
    """Non-positive constraint penalty for a missed deadline or low battery.

    ``t_cap`` bounds the latency entering the deadline term, so an
    untransmittable task (``T_n = inf``) yields a finite penalty.
    """
    if t_cap is not None:
        T_n = np.minimum(T_n, t_cap)
    pen = (w.lambda1 * np.minimum(tau_n - T_n, 0.0)
           + w.lambda2 * np.minimum(b_n - b_min, 0.0))
    return float(pen) if np.ndim(pen) == 0 else pen


def system_reward(costs, penalties):
    costs = np.asarray(costs, dtype=float)
    penalties = np.asarray(penalties, dtype=float)
    if costs.size == 0:
        raise ValueError("system_reward needs at least one device")
    if costs.shape != penalties.shape:
        raise ValueError("costs and penalties must have equal length")
    return float(-np.mean(costs - penalties))


def battery_step(b, E, e, b_max):
    out = np.minimum(np.maximum(b - E + e, 0.0), b_max)
    return float(out) if np.ndim(out) == 0 else out


def epsilon_schedule(episode, max_episodes, eps_min, eps_max):
    if max_episodes < 1:
        raise ValueError("max_episodes must be >= 1")
    return eps_min + (eps_max - eps_min) * math.exp(-episode / max_episodes)
