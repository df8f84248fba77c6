"""Episodic multi-device MEC offloading environment."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import physics
from .errors import ConfigError, ContractViolation
from .physics import CostWeights, EnergyParams, RadioParams, UnitProfile
from .scheduler import ServerConfig, schedule_arrays

OBS_DIM = 7
ACTION_DIM = 3

_RANGE_FIELDS = ("task_size_mb", "task_cycles_per_bit", "task_deadline_s", "gain_db")


@dataclass
class EpisodeConfig:
    """Environment parameters in table units (MB, dBm, dB, GHz, MJ).

    Converted to SI once, through ``units``, when an environment is built.
    """

    n_devices: int = 50
    steps_T: int = 10
    tau_max: float = 1.0
    subchannels_K: int = 10
    bandwidth_mhz: float = 40.0
    server_units: int = 8
    server_ghz: float = 4.0
    storage_mb: float = 400.0
    kappa: float = 5e-27
    harvest_j: float = 0.001
    lambda1: float = 0.5
    lambda2: float = 0.5
    task_size_mb: tuple = (1.0, 50.0)
    task_cycles_per_bit: tuple = (300.0, 737.5)
    task_deadline_s: tuple = (0.1, 0.9)
    gain_db: tuple = (5.0, 14.0)
    p_min_dbm: float = 1.0
    p_max_dbm: float = 24.0
    f_min_ghz: float = 0.4
    f_max_ghz: float = 1.5
    b_min_mj: float = 0.5
    b_max_mj: float = 3.2
    # when set, every device gets b_max = b_min + this many joules
    battery_headroom_j: Optional[float] = None
    # observation slot 5 holds p_max; True puts f_max there as the text literally reads
    pow_state_literal: bool = False
    # charge dropped tasks the energy they would have spent transmitting
    drop_charges_transmit_energy: bool = False
    seed: int = 37
    units: UnitProfile = field(default_factory=UnitProfile)

    def __post_init__(self):
        for name in _RANGE_FIELDS:
            lo, hi = getattr(self, name)
            setattr(self, name, (float(lo), float(hi)))
            if not lo <= hi:
                raise ConfigError(f"{name}: lower bound exceeds upper bound")
        if self.n_devices < 1 or self.steps_T < 1:
            raise ConfigError("n_devices and steps_T must be >= 1")
        if self.task_size_mb[0] <= 0 or self.task_cycles_per_bit[0] <= 0 or self.task_deadline_s[0] <= 0:
            raise ConfigError("task sizes, cycles and deadlines must be positive")
        if self.tau_max < self.task_deadline_s[1]:
            raise ConfigError("tau_max must be at least the largest task deadline")
        if self.p_min_dbm > self.p_max_dbm or self.f_min_ghz > self.f_max_ghz:
            raise ConfigError("device budget minimum exceeds maximum")
        if not 0 <= self.b_min_mj <= self.b_max_mj:
            raise ConfigError("battery bounds must satisfy 0 <= b_min <= b_max")
        if self.f_min_ghz <= 0:
            raise ConfigError("f_min must be positive")
        if self.battery_headroom_j is not None and self.battery_headroom_j < 0:
            raise ConfigError("battery_headroom_j must be non-negative")
        # constructing these validates them
        self.radio, self.server, self.energy, self.weights  # noqa: B018

    @property
    def radio(self) -> RadioParams:
        return RadioParams(self.units.mhz_to_hz(self.bandwidth_mhz), int(self.subchannels_K))

    @property
    def server(self) -> ServerConfig:
        return ServerConfig(int(self.server_units), self.units.ghz_to_hz(self.server_ghz),
                            self.units.mb_to_bits(self.storage_mb))

    @property
    def energy(self) -> EnergyParams:
        return EnergyParams(self.kappa, self.harvest_j)

    @property
    def weights(self) -> CostWeights:
        return CostWeights(self.lambda1, self.lambda2)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for name in _RANGE_FIELDS:
            d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown episode config keys: {sorted(unknown)}")
        if "units" in d and isinstance(d["units"], dict):
            d["units"] = UnitProfile(**d["units"])
        for name in _RANGE_FIELDS:
            if name in d:
                d[name] = tuple(d[name])
        return cls(**d)


@dataclass(frozen=True)
class DeviceProfile:
    """Static per-device budgets for a whole fleet (arrays of length N, SI units)."""

    gain: np.ndarray
    p_min: np.ndarray
    p_max: np.ndarray
    f_min: np.ndarray
    f_max: np.ndarray
    b_min: np.ndarray
    b_max: np.ndarray


@dataclass(frozen=True)
class TaskSpec:
    size_z: float
    cycles_c: float
    deadline_tau: float


@dataclass(frozen=True)
class Tasks:
    """One task per device, stored column-wise."""

    size_z: np.ndarray
    cycles_c: np.ndarray
    deadline_tau: np.ndarray

    def __len__(self):
        return self.size_z.shape[0]

    def __getitem__(self, n) -> TaskSpec:
        return TaskSpec(float(self.size_z[n]), float(self.cycles_c[n]), float(self.deadline_tau[n]))


@dataclass(frozen=True)
class DecodedActions:
    propose: np.ndarray  # bool
    p: np.ndarray        # Watts
    f: np.ndarray        # Hz


@dataclass
class StepOutcome:
    offloaded: np.ndarray
    dropped: np.ndarray
    T: np.ndarray          # latency charged (capped at tau_max)
    T_raw: np.ndarray      # nominal latency, may be inf
    E: np.ndarray
    cost: np.ndarray
    penalty: np.ndarray
    expired: np.ndarray
    battery: np.ndarray    # level after the step
    reward: float
    count_offloaded: int
    count_expired: int
    count_battery_violation: int


def _uniform(rng: np.random.Generator, lo: float, hi: float, size: int) -> np.ndarray:
    if lo == hi:
        return np.full(size, lo)
    return rng.uniform(lo, hi, size)


def _norm(x, lo, hi):
    if hi <= lo:
        return np.zeros_like(x, dtype=float)
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0)


class MecEnv:
    """Gym-like environment: ``reset`` then ``step`` ``steps_T`` times.

    Observations are ``(N, 7)`` arrays ``[z, c, tau, g, p_max, f_max, b]``
    min-max normalised with the static configured ranges (battery by the
    device's own capacity).
    """

    def __init__(self, cfg: EpisodeConfig):
        self.cfg = cfg
        u = cfg.units
        self.radio = cfg.radio
        self.server = cfg.server
        self.energy = cfg.energy
        self.weights = cfg.weights
        self._z_rng = tuple(u.mb_to_bits(np.array(cfg.task_size_mb)))
        self._g_rng = tuple(physics.db_to_linear(np.array(cfg.gain_db)))
        self._p_rng = (physics.dbm_to_watts(cfg.p_min_dbm), physics.dbm_to_watts(cfg.p_max_dbm))
        self._f_rng = (u.ghz_to_hz(cfg.f_min_ghz), u.ghz_to_hz(cfg.f_max_ghz))
        self.scheduler_calls = 0
        self.recorder: Optional[Callable[[dict], None]] = None
        self.rng: Optional[np.random.Generator] = None
        self.profile: Optional[DeviceProfile] = None
        self.tasks: Optional[Tasks] = None
        self.battery: Optional[np.ndarray] = None
        self.t = 0

    @property
    def n(self) -> int:
        return self.cfg.n_devices

    def reset(self, seed=None) -> np.ndarray:
        cfg, u, n = self.cfg, self.cfg.units, self.cfg.n_devices
        self.rng = np.random.default_rng(cfg.seed if seed is None else seed)
        gain_db = _uniform(self.rng, *cfg.gain_db, n)
        p_max_dbm = _uniform(self.rng, cfg.p_min_dbm, cfg.p_max_dbm, n)
        f_max = u.ghz_to_hz(_uniform(self.rng, cfg.f_min_ghz, cfg.f_max_ghz, n))
        b_min = np.full(n, u.mj_to_joules(cfg.b_min_mj))
        if cfg.battery_headroom_j is not None:
            b_max = b_min + cfg.battery_headroom_j
        else:
            b_max = u.mj_to_joules(_uniform(self.rng, cfg.b_min_mj, cfg.b_max_mj, n))
        self.profile = DeviceProfile(
            gain=physics.db_to_linear(gain_db),
            p_min=np.full(n, physics.dbm_to_watts(cfg.p_min_dbm)),
            p_max=physics.dbm_to_watts(p_max_dbm),
            f_min=np.full(n, u.ghz_to_hz(cfg.f_min_ghz)),
            f_max=f_max,
            b_min=b_min,
            b_max=b_max,
        )
        self.battery = b_max.copy()
        self.t = 0
        self.tasks = self.generate_tasks(self.rng)
        return self.observe()

    def generate_tasks(self, rng: np.random.Generator) -> Tasks:
        cfg, n = self.cfg, self.cfg.n_devices
        z = self.cfg.units.mb_to_bits(_uniform(rng, *cfg.task_size_mb, n))
        c = _uniform(rng, *cfg.task_cycles_per_bit, n)
        tau = _uniform(rng, *cfg.task_deadline_s, n)
        return Tasks(z, c, tau)

    def observe(self) -> np.ndarray:
        cfg, pr, tk = self.cfg, self.profile, self.tasks
        pow_slot = (_norm(pr.f_max, *self._f_rng) if cfg.pow_state_literal
                    else _norm(pr.p_max, *self._p_rng))
        return np.stack([
            _norm(tk.size_z, *self._z_rng),
            _norm(tk.cycles_c, *cfg.task_cycles_per_bit),
            _norm(tk.deadline_tau, *cfg.task_deadline_s),
            _norm(pr.gain, *self._g_rng),
            pow_slot,
            _norm(pr.f_max, *self._f_rng),
            np.clip(self.battery / pr.b_max, 0.0, 1.0),
        ], axis=1)

    def decode_actions(self, raw) -> DecodedActions:
        raw = np.asarray(raw, dtype=float)
        if raw.shape != (self.n, ACTION_DIM):
            raise ContractViolation(f"expected actions of shape {(self.n, ACTION_DIM)}, got {raw.shape}")
        if np.any(raw < 0.0) or np.any(raw > 1.0) or not np.all(np.isfinite(raw)):
            raise ContractViolation("client actions must lie in [0, 1]")
        pr = self.profile
        return DecodedActions(
            propose=raw[:, 0] >= 0.5,
            p=np.maximum(pr.p_min, raw[:, 1] * pr.p_max),
            f=np.maximum(pr.f_min, raw[:, 2] * pr.f_max),
        )

    def offload_times(self, decoded: DecodedActions) -> np.ndarray:
        d = physics.channel_rate(self.radio.bandwidth_W, self.radio.subchannels_K,
                                 decoded.p, self.profile.gain)
        return physics.offload_time(self.tasks.size_z, d)

    def check_mask(self, decoded: DecodedActions, accept_mask, dropped=None):
        mask = np.asarray(accept_mask, dtype=bool)
        if mask.shape != (self.n,):
            raise ContractViolation("accept mask must have one entry per device")
        if np.any(mask & ~decoded.propose):
            raise ContractViolation("accept mask marks a task that was not proposed")
        if mask.sum() > self.radio.subchannels_K:
            raise ContractViolation("accept mask exceeds the number of sub-channels")
        if self.tasks.size_z[mask].sum() > self.server.storage_z_e * (1 + 1e-12):
            raise ContractViolation("accepted task sizes exceed server storage")
        drop = np.zeros(self.n, dtype=bool) if dropped is None else np.asarray(dropped, dtype=bool)
        if np.any(drop & ~decoded.propose) or np.any(drop & mask):
            raise ContractViolation("dropped tasks must be rejected proposals")
        return mask, drop

    def step(self, decoded: DecodedActions, accept_mask, dropped=None):
        """Apply decisions for the current tasks and advance one time step.

        ``dropped`` marks rejected proposals that are discarded instead of
        run locally; they are charged ``tau_max`` latency.
        """
        if self.tasks is None:
            raise ContractViolation("step() called before reset()")
        cfg, pr, tk = self.cfg, self.profile, self.tasks
        mask, drop = self.check_mask(decoded, accept_mask, dropped)
        local = ~(mask | drop)

        T_raw = np.zeros(self.n)
        E = np.zeros(self.n)
        T_raw[local] = physics.local_latency(tk.size_z[local], tk.cycles_c[local], decoded.f[local])
        E[local] = physics.local_energy(tk.size_z[local], tk.cycles_c[local], decoded.f[local],
                                        self.energy.kappa)
        if mask.any() or (drop.any() and cfg.drop_charges_transmit_energy):
            t_off = self.offload_times(decoded)
            e_off = physics.offload_energy(decoded.p, t_off)
        if mask.any():
            ids = np.flatnonzero(mask)
            service = physics.server_service_time(tk.size_z[ids], tk.cycles_c[ids],
                                                  self.server.unit_speed_f_e)
            self.scheduler_calls += 1
            _, finish = schedule_arrays(ids, t_off[ids], service, self.server.units_U_e)
            T_raw[ids] = finish
            E[ids] = e_off[ids]
        if drop.any():
            T_raw[drop] = cfg.tau_max
            if cfg.drop_charges_transmit_energy:
                E[drop] = e_off[drop]

        T = np.minimum(T_raw, cfg.tau_max)
        expired = (T_raw > tk.deadline_tau) | drop
        b_next = physics.battery_step(self.battery, E, self.energy.harvest_e_n, pr.b_max)
        cost = physics.task_cost(T, E, self.weights)
        penalty = physics.task_penalty(T, tk.deadline_tau, b_next, pr.b_min, self.weights)
        reward = physics.system_reward(cost, penalty)
        outcome = StepOutcome(
            offloaded=mask, dropped=drop, T=T, T_raw=T_raw, E=E, cost=cost,
            penalty=np.asarray(penalty, dtype=float), expired=expired, battery=b_next,
            reward=reward, count_offloaded=int(mask.sum()), count_expired=int(expired.sum()),
            count_battery_violation=int((b_next < pr.b_min).sum()),
        )
        if self.recorder is not None:
            self.recorder(self._record(decoded, outcome))
        self.battery = b_next
        self.t += 1
        self.tasks = self.generate_tasks(self.rng)
        done = self.t >= cfg.steps_T
        return outcome, self.observe(), done

    def _record(self, decoded: DecodedActions, out: StepOutcome) -> dict:
        pr, tk = self.profile, self.tasks
        return {
            "t": self.t,
            "observations": self.observe().tolist(),
            "tasks": {"size_z": tk.size_z.tolist(), "cycles_c": tk.cycles_c.tolist(),
                      "deadline_tau": tk.deadline_tau.tolist()},
            "profile": {k: getattr(pr, k).tolist() for k in ("gain", "b_min", "b_max")},
            "battery_before": self.battery.tolist(),
            "decoded": {"propose": decoded.propose.tolist(), "p": decoded.p.tolist(),
                        "f": decoded.f.tolist()},
            "mask": out.offloaded.tolist(),
            "dropped": out.dropped.tolist(),
            "outcome": {
                "T": out.T.tolist(), "E": out.E.tolist(), "cost": out.cost.tolist(),
                "penalty": out.penalty.tolist(), "expired": out.expired.tolist(),
                "battery": out.battery.tolist(), "reward": out.reward,
                "count_offloaded": out.count_offloaded, "count_expired": out.count_expired,
                "count_battery_violation": out.count_battery_violation,
            },
        }


def reset(cfg: EpisodeConfig, seed=None):
    """Build an environment and reset it; returns ``(env, observations)``."""
    env = MecEnv(cfg)
    return env, env.reset(seed)


def decode_actions(raw, env: MecEnv) -> DecodedActions:
    return env.decode_actions(raw)
