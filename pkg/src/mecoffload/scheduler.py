"""Per-step FIFO scheduling of offloaded tasks on the server's processing units."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .errors import ConfigError


@dataclass(frozen=True)
class ServerConfig:
    units_U_e: int
    unit_speed_f_e: float
    storage_z_e: float

    def __post_init__(self):
        if int(self.units_U_e) != self.units_U_e or self.units_U_e < 1:
            raise ConfigError("units_U_e must be a positive integer")
        if not self.unit_speed_f_e > 0:
            raise ConfigError("unit_speed_f_e must be positive")
        if not self.storage_z_e > 0:
            raise ConfigError("storage_z_e must be positive")


@dataclass(frozen=True)
class AdmittedTask:
    task_id: int
    arrival: float
    service: float
    start: float
    finish: float


def schedule_arrays(task_ids, arrival, service, n_units: int):
    """Array form of :func:`schedule_step`; returns (start, finish) aligned with inputs."""
    task_ids = np.asarray(task_ids, dtype=np.int64)
    arrival = np.ascontiguousarray(arrival, dtype=np.float64)
    service = np.ascontiguousarray(service, dtype=np.float64)
    if arrival.size == 0:
        return np.empty(0), np.empty(0)
    order = np.lexsort((task_ids, arrival)).astype(np.int64)
    return _kernels.fifo_units(arrival, service, order, int(n_units))


def schedule_step(admitted: Iterable[Sequence], cfg: ServerConfig) -> list[AdmittedTask]:
    """Serve ``(task_id, arrival, service)`` tuples FIFO by arrival time.

    Ties in arrival go to the lower task id. Each task takes the unit that
    frees up first and starts at ``max(arrival, unit free time)``. No state
    carries over between calls. Output is sorted by start order.
    """
    rows = list(admitted)
    if not rows:
        return []
    ids = np.array([r[0] for r in rows], dtype=np.int64)
    arr = np.array([r[1] for r in rows], dtype=np.float64)
    svc = np.array([r[2] for r in rows], dtype=np.float64)
    if np.any(arr < 0) or np.any(svc < 0):
        raise ValueError("arrival and service times must be non-negative")
    start, finish = schedule_arrays(ids, arr, svc, cfg.units_U_e)
    order = np.lexsort((ids, arr))
    return [AdmittedTask(int(ids[i]), float(arr[i]), float(svc[i]),
                         float(start[i]), float(finish[i])) for i in order]


def t_mec(entry: AdmittedTask) -> float:
    """Total server-side latency: service time after max(arrival, unit availability)."""
    return entry.finish
