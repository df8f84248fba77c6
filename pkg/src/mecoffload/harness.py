"""Training/evaluation driver, metrics files, aggregation, and trajectory replay."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import stats

from . import __version__, _kernels, physics
from .agents import AgentConfig, CcmMadrl
from .baselines import AdmissionRule, Maddpg
from .env import EpisodeConfig, MecEnv
from .errors import ConfigError, TrainingDivergence
from .replay import Transition
from .scheduler import schedule_arrays

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ALGORITHMS = {
    "ccm": None,
    "maddpg": AdmissionRule.FIFO_DROP,
    "maddpg-stf": AdmissionRule.SHORTEST_OFFLOAD_FIRST,
    "maddpg-dsf": AdmissionRule.DEADLINE_OVER_SIZE_FIRST,
    "random-master": AdmissionRule.RANDOM,
}
METRIC_COLUMNS = ("episode", "mean_eval_reward", "pct_expired_tasks", "pct_battery_violations",
                  "train_td_error", "epsilon")
EVAL_COLUMNS = ("episode", "eval_index", "reward", "expired_tasks", "battery_violation_uds",
                "offloaded_tasks")

EXIT_OK, EXIT_CONFIG, EXIT_TRUNCATED, EXIT_DIVERGED = 0, 2, 3, 4

# interpretation choices recorded in every run's metadata
DEVIATIONS = {
    "master_exploration": "shuffle with probability epsilon, rank by Q otherwise",
    "greedy_admission": "scan ranked proposals, accept while count < K and size fits",
    "hidden_activation": "relu hidden layers",
    "critic_output_activation": "identity",
    "latency_cap": "latency entering cost and penalty capped at tau_max",
    "client_feedback_proposal_test": "x >= 0.5",
    "training_starts": "first episode with at least batch_size transitions",
    "client_grad_path": "client gradient flows through its candidate and joint slots",
    "td_reward_scale": "TD targets use reward_scale * r; logged rewards are unscaled",
}


@dataclass
class MetricsRow:
    episode: int
    mean_eval_reward: float
    pct_expired_tasks: float
    pct_battery_violations: float
    train_td_error: float
    epsilon: float
    wall_time: float


@dataclass
class RunConfig:
    algorithm: str = "ccm"
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    max_episodes: int = 2000
    eval_episodes: int = 50
    eval_stride: int = 1
    eval_seed_base: int = 0
    seed: int = 37
    eps_min: float = 0.01
    eps_max: float = 1.0
    out_dir: Optional[str] = None
    budget_minutes: Optional[float] = None
    checkpoint_every: int = 0
    dump_trajectories: bool = False

    def __post_init__(self):
        if isinstance(self.episode, dict):
            self.episode = EpisodeConfig.from_dict(self.episode)
        if isinstance(self.agent, dict):
            self.agent = AgentConfig(**self.agent)
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; choose from {sorted(ALGORITHMS)}")
        for name in ("max_episodes", "eval_episodes", "eval_stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if self.budget_minutes is not None and not self.budget_minutes > 0:
            raise ConfigError("budget_minutes must be positive")
        if not 0 <= self.eps_min <= self.eps_max <= 1:
            raise ConfigError("need 0 <= eps_min <= eps_max <= 1")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["episode"] = self.episode.to_dict()
        d["agent"] = dataclasses.asdict(self.agent)
        d["agent"]["client_hidden"] = list(self.agent.client_hidden)
        d["agent"]["master_hidden"] = list(self.agent.master_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


CONFIG_DIR = Path(__file__).parent / "configs"


def load_config(path_or_name) -> RunConfig:
    """Load a JSON run config from a path, or a bundled one by name (``desk``, ``full``)."""
    p = Path(path_or_name)
    if not p.exists():
        p = CONFIG_DIR / f"{path_or_name}.json"
    try:
        with open(p) as fh:
            return RunConfig.from_dict(json.load(fh))
    except FileNotFoundError as exc:
        raise ConfigError(f"config not found: {path_or_name}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from exc


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for one concern, keyed by a stable hash of ``name``."""
    key = (zlib.crc32(name.encode()), *extra)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def build_algorithm(cfg: RunConfig, n_devices: int):
    init_rng = stream(cfg.seed, "weight-init")
    rule = ALGORITHMS[cfg.algorithm]
    if rule is None:
        return CcmMadrl(n_devices, cfg.agent, init_rng)
    return Maddpg(n_devices, cfg.agent, init_rng, rule)


def eval_env_seed(cfg: RunConfig, index: int) -> int:
    return cfg.eval_seed_base + index


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


class _Writers:
    def __init__(self, out: Path, dump: bool):
        self.metrics = open(out / "metrics.csv", "w", newline="")
        self.evals = open(out / "eval_episodes.csv", "w", newline="")
        self.timings = open(out / "timings.csv", "w", newline="")
        self.traj = open(out / "trajectories.jsonl", "w") if dump else None
        self.m = csv.writer(self.metrics, lineterminator="\n")
        self.e = csv.writer(self.evals, lineterminator="\n")
        self.t = csv.writer(self.timings, lineterminator="\n")
        self.m.writerow(METRIC_COLUMNS)
        self.e.writerow(EVAL_COLUMNS)
        self.t.writerow(("episode", "wall_time"))

    def row(self, r: MetricsRow, eval_rows):
        for er in eval_rows:
            self.e.writerow([_fmt(v) for v in er])
        self.m.writerow([_fmt(getattr(r, c)) for c in METRIC_COLUMNS])
        self.t.writerow([r.episode, _fmt(r.wall_time)])
        for fh in (self.evals, self.metrics, self.timings):
            fh.flush()

    def close(self):
        for fh in (self.metrics, self.evals, self.timings, self.traj):
            if fh is not None:
                fh.close()


def _write_json(path: Path, obj):
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    tmp.replace(path)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serialisable: {type(o)}")


def run_episode(env: MecEnv, algo, seed, epsilon: float, evaluation: bool,
                rng: np.random.Generator, memory=None, on_step=None):
    """Roll one episode; returns (total reward, expired, UDs below b_min, offloaded)."""
    obs = env.reset(seed)
    total, expired, offloaded = 0.0, 0, 0
    violated = np.zeros(env.n, dtype=bool)
    done = False
    while not done:
        dec = algo.act(env, obs, epsilon, evaluation, rng)
        if on_step is not None:
            env.recorder = lambda rec, a=dec.actions: on_step(rec, a)
        out, obs2, done = env.step(dec.decoded, dec.mask, dec.dropped)
        if memory is not None:
            memory.push(Transition(obs, dec.actions, dec.mask, out.reward, obs2, done))
        total += out.reward
        expired += out.count_expired
        offloaded += out.count_offloaded
        violated |= out.battery < env.profile.b_min
        obs = obs2
    env.recorder = None
    return total, expired, int(violated.sum()), offloaded


def run(cfg: RunConfig) -> dict:
    """Train ``cfg.algorithm`` and evaluate after every training episode.

    Writes ``metadata.json``, ``metrics.csv``, ``eval_episodes.csv``,
    ``timings.csv``, ``summary.json`` (and optionally ``trajectories.jsonl``
    and ``checkpoint.npz``) into ``cfg.out_dir``. Returns the summary dict,
    whose ``exit_code`` follows the CLI convention.
    """
    if cfg.out_dir is None:
        raise ConfigError("out_dir is required")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ep_cfg = cfg.episode
    n = ep_cfg.n_devices
    algo = build_algorithm(cfg, n)
    memory = cfg.agent.make_memory(n)
    explore_rng = stream(cfg.seed, "exploration")
    replay_rng = stream(cfg.seed, "replay")
    train_env = MecEnv(ep_cfg)
    eval_env = MecEnv(ep_cfg)

    meta = {
        "schema_version": SCHEMA_VERSION,
        "package_version": __version__,
        "algorithm": cfg.algorithm,
        "config": cfg.to_dict(),
        "kernel_backend": _kernels.backend(),
        "deviations": DEVIATIONS,
        "status": "running",
        "episodes_completed": 0,
    }
    _write_json(out / "metadata.json", meta)
    writers = _Writers(out, cfg.dump_trajectories)

    def dumper(kind, episode, index):
        if writers.traj is None:
            return None

        def on_step(rec, actions):
            rec = {"kind": kind, "episode": episode, "eval_index": index,
                   "raw_actions": actions.tolist(), **rec}
            writers.traj.write(json.dumps(rec) + "\n")
        return on_step

    t0 = time.monotonic()
    status, exit_code, diag = "completed", EXIT_OK, None
    rows: list[MetricsRow] = []
    try:
        for ep in range(cfg.max_episodes):
            eps = physics.epsilon_schedule(ep, cfg.max_episodes, cfg.eps_min, cfg.eps_max)
            frac = ep / max(1, cfg.max_episodes - 1)
            memory.beta = cfg.agent.per_beta0 + (cfg.agent.per_beta1 - cfg.agent.per_beta0) * frac
            train_seed = np.random.SeedSequence(cfg.seed, spawn_key=(zlib.crc32(b"env"), ep))
            run_episode(train_env, algo, train_seed, eps, False, explore_rng, memory,
                        dumper("train", ep, None))
            td = math.nan
            if len(memory) >= cfg.agent.batch_size:
                td = algo.train(memory, replay_rng).td_error

            eval_rows = []
            if ep % cfg.eval_stride == 0 or ep == cfg.max_episodes - 1:
                for k in range(cfg.eval_episodes):
                    s = eval_env_seed(cfg, k)
                    rng = stream(s, "eval-admission")
                    r, ex, bv, off = run_episode(eval_env, algo, s, 0.0, True, rng,
                                                 on_step=dumper("eval", ep, k))
                    eval_rows.append((ep, k, r, ex, bv, off))
            if eval_rows:
                arr = np.array([er[2:] for er in eval_rows], dtype=float)
                mean_r = float(arr[:, 0].mean())
                pct_exp = 100.0 * arr[:, 1].sum() / (n * ep_cfg.steps_T * len(eval_rows))
                pct_bat = 100.0 * arr[:, 2].sum() / (n * len(eval_rows))
            else:
                mean_r = pct_exp = pct_bat = math.nan
            row = MetricsRow(ep, mean_r, pct_exp, pct_bat, td, eps, time.monotonic() - t0)
            rows.append(row)
            writers.row(row, eval_rows)
            if cfg.checkpoint_every and (ep + 1) % cfg.checkpoint_every == 0:
                algo.save(out / "checkpoint.npz", {"episode": ep})
            if cfg.budget_minutes is not None and time.monotonic() - t0 > 60.0 * cfg.budget_minutes:
                if ep < cfg.max_episodes - 1:
                    status, exit_code = "truncated", EXIT_TRUNCATED
                    log.warning("wall-clock budget exhausted after episode %d", ep)
                break
    except TrainingDivergence as exc:
        status, exit_code = "diverged", EXIT_DIVERGED
        diag = {"error": str(exc), "episode": len(rows)}
        log.error("training diverged at episode %d: %s", len(rows), exc)
    finally:
        writers.close()

    if cfg.checkpoint_every:
        algo.save(out / "checkpoint.npz", {"episode": len(rows) - 1})
    rewards = np.array([r.mean_eval_reward for r in rows])
    summary = {
        "status": status,
        "exit_code": exit_code,
        "episodes_completed": len(rows),
        "wall_time": time.monotonic() - t0,
        "final_mean_eval_reward": rows[-1].mean_eval_reward if rows else None,
        "first50_mean_eval_reward": float(np.nanmean(rewards[:50])) if rows else None,
        "last50_mean_eval_reward": float(np.nanmean(rewards[-50:])) if rows else None,
        "diagnostic": diag,
    }
    meta.update(status=status, episodes_completed=len(rows), diagnostic=diag)
    _write_json(out / "metadata.json", meta)
    _write_json(out / "summary.json", summary)
    return summary


# ---------------------------------------------------------------------------
# aggregation


def read_metrics(run_dir) -> dict:
    """Columns of ``metrics.csv`` as float arrays (blank cells become NaN)."""
    with open(Path(run_dir) / "metrics.csv", newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        cols = reader.fieldnames or []
    return {c: np.array([float(r[c]) if r[c] != "" else math.nan for r in rows]) for c in cols}


def _compat_key(meta: dict):
    c = meta["config"]
    return (meta["algorithm"], json.dumps(c["episode"], sort_keys=True), c["eval_episodes"])


def mean_ci(values, conf: float = 0.95):
    """Mean and t-distribution half-width over finite entries (0 width below two)."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return math.nan, math.nan
    if v.size == 1:
        return float(v[0]), 0.0
    sem = v.std(ddof=1) / math.sqrt(v.size)
    return float(v.mean()), float(stats.t.ppf(0.5 + conf / 2.0, v.size - 1) * sem)


def aggregate(run_dirs, out_path=None) -> dict:
    """Per-episode mean and 95% CI half-width across runs, clipped to the shortest run."""
    run_dirs = [Path(d) for d in run_dirs]
    if not run_dirs:
        raise ConfigError("aggregate needs at least one run directory")
    metas = [json.loads((d / "metadata.json").read_text()) for d in run_dirs]
    keys = {_compat_key(m) for m in metas}
    if len(keys) != 1:
        raise ConfigError("runs have incompatible configurations")
    data = [read_metrics(d) for d in run_dirs]
    length = min(len(d["episode"]) for d in data)
    metrics = [c for c in METRIC_COLUMNS if c != "episode"]
    table = {"episode": data[0]["episode"][:length].astype(int)}
    for c in metrics:
        stacked = np.stack([d[c][:length] for d in data])
        pairs = [mean_ci(stacked[:, j]) for j in range(length)]
        table[f"{c}_mean"] = np.array([p[0] for p in pairs])
        table[f"{c}_ci95"] = np.array([p[1] for p in pairs])
    if out_path is not None:
        with open(out_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            cols = list(table)
            w.writerow(cols)
            for j in range(length):
                w.writerow([_fmt(table[c][j]) if c != "episode" else int(table[c][j]) for c in cols])
    table["n_runs"] = len(run_dirs)
    return table


# ---------------------------------------------------------------------------
# replay: re-score a trajectory dump through the physics formulas


def replay(run_dir) -> dict:
    """Recompute every dumped step from its tasks, decisions and battery.

    Returns the largest relative deviation per quantity and the
    recomputed eval expiry percentages per training episode.
    """
    run_dir = Path(run_dir)
    meta = json.loads((run_dir / "metadata.json").read_text())
    cfg = RunConfig.from_dict(meta["config"]).episode
    radio, server, energy, w = cfg.radio, cfg.server, cfg.energy, cfg.weights
    worst = {k: 0.0 for k in ("T", "E", "cost", "penalty", "battery", "reward")}
    expired_by_ep: dict = {}
    steps = 0

    def rel(a, b):
        a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
        scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-300)
        return float(np.max(np.abs(a - b) / scale)) if a.size else 0.0

    with open(run_dir / "trajectories.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            steps += 1
            tk, dec, prof = rec["tasks"], rec["decoded"], rec["profile"]
            z, c, tau = (np.array(tk[k]) for k in ("size_z", "cycles_c", "deadline_tau"))
            p, f = np.array(dec["p"]), np.array(dec["f"])
            mask, drop = np.array(rec["mask"], bool), np.array(rec["dropped"], bool)
            local = ~(mask | drop)
            T = np.zeros(z.size)
            E = np.zeros(z.size)
            T[local] = z[local] * c[local] / f[local]
            E[local] = energy.kappa * z[local] * c[local] * f[local] ** 2
            rate = physics.channel_rate(radio.bandwidth_W, radio.subchannels_K, p, np.array(prof["gain"]))
            t_off = physics.offload_time(z, rate)
            if mask.any():
                ids = np.flatnonzero(mask)
                _, fin = schedule_arrays(ids, t_off[ids], z[ids] * c[ids] / server.unit_speed_f_e,
                                         server.units_U_e)
                T[ids] = fin
                E[ids] = physics.offload_energy(p[ids], t_off[ids])
            T[drop] = cfg.tau_max
            if cfg.drop_charges_transmit_energy:
                E[drop] = physics.offload_energy(p[drop], t_off[drop])
            expired = (T > tau) | drop
            T = np.minimum(T, cfg.tau_max)
            b_min, b_max = np.array(prof["b_min"]), np.array(prof["b_max"])
            b = np.clip(np.array(rec["battery_before"]) - E + energy.harvest_e_n, 0.0, b_max)
            cost = w.lambda1 * T + w.lambda2 * E
            pen = w.lambda1 * np.minimum(tau - T, 0.0) + w.lambda2 * np.minimum(b - b_min, 0.0)
            reward = -np.mean(cost - pen)
            o = rec["outcome"]
            for k, v in (("T", T), ("E", E), ("cost", cost), ("penalty", pen),
                         ("battery", b), ("reward", reward)):
                worst[k] = max(worst[k], rel(v, o[k]))
            if rec["kind"] == "eval":
                expired_by_ep[rec["episode"]] = expired_by_ep.get(rec["episode"], 0) + int(expired.sum())
    n_eval = meta["config"]["eval_episodes"]
    pct = {ep: 100.0 * cnt / (cfg.n_devices * cfg.steps_T * n_eval) for ep, cnt in expired_by_ep.items()}
    return {"steps": steps, "max_rel_error": worst, "pct_expired_by_episode": pct}
