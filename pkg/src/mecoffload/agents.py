"""Client-master multi-agent learner with combinatorial admission.

Each device runs a client actor that proposes ``(offload, power, cpu)``.
A master value network scores every proposing client from the joint
state-action plus that client's own state-action slot, and admits the
best-scored proposals greedily under the sub-channel and storage budgets.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import _kernels
from .env import ACTION_DIM, OBS_DIM, DecodedActions, MecEnv
from .errors import TrainingDivergence
from .nn import Adam, Mlp, MlpSpec, load_checkpoint, save_checkpoint
from .replay import Batch, ReplayMemory

SLOT = OBS_DIM + ACTION_DIM


@dataclass
class AgentConfig:
    gamma: float = 0.99
    batch_size: int = 64
    memory_capacity: int = 10_000
    lr_client: float = 1e-4
    lr_master: float = 1e-3
    client_hidden: tuple = (64, 32)
    master_hidden: tuple = (512, 128)
    hidden_activation: str = "relu"
    master_output_activation: str = "identity"
    client_final_scale: float = 0.01
    noise: str = "normal"  # or "uniform" (symmetric on [-1, 1))
    per_alpha: float = 0.6
    per_beta0: float = 0.4
    per_beta1: float = 1.0
    per_eps: float = 1e-6
    # learner-side multiplier on r̄ inside TD targets; metrics stay unscaled
    reward_scale: float = 0.01
    # "candidate": client gradients flow through the candidate slot only;
    # "full": also through the client's own joint slot
    client_grad_path: str = "full"

    def __post_init__(self):
        self.client_hidden = tuple(self.client_hidden)
        self.master_hidden = tuple(self.master_hidden)
        if self.noise not in ("normal", "uniform"):
            raise ValueError(f"unknown noise kind {self.noise!r}")
        if self.client_grad_path not in ("candidate", "full"):
            raise ValueError(f"unknown client_grad_path {self.client_grad_path!r}")
        if not self.reward_scale > 0:
            raise ValueError("reward_scale must be positive")

    def client_spec(self) -> MlpSpec:
        return MlpSpec((OBS_DIM, *self.client_hidden, ACTION_DIM), self.hidden_activation,
                       "tanh", self.client_final_scale)

    def make_memory(self, n_devices: int) -> ReplayMemory:
        return ReplayMemory(self.memory_capacity, n_devices, OBS_DIM, ACTION_DIM,
                            self.per_alpha, self.per_beta0, self.per_eps)

    to_dict = asdict


@dataclass
class Decision:
    actions: np.ndarray        # (N, 3) scaled client actions
    decoded: DecodedActions
    mask: np.ndarray           # accepted for offloading
    dropped: Optional[np.ndarray] = None


def joint_input(S: np.ndarray, A: np.ndarray) -> np.ndarray:
    """(B, N, 7) states and (B, N, 3) actions -> (B, N*10) per-device slots."""
    S = np.asarray(S, dtype=float)
    A = np.asarray(A, dtype=float)
    return np.concatenate([S, A], axis=-1).reshape(S.shape[0], -1)


def scale_action(raw):
    return raw / 2.0 + 0.5


class ClientAgent:
    """Per-device actor with a hard-synced target copy."""

    def __init__(self, spec: MlpSpec, rng: np.random.Generator, lr: float):
        self.policy = Mlp.init(spec, rng)
        self.target = self.policy.copy()
        self.opt = Adam(lr)

    def raw(self, obs, target: bool = False):
        return (self.target if target else self.policy).forward(obs)


def client_act(agent: ClientAgent, observation, epsilon: float, evaluation: bool,
               rng: Optional[np.random.Generator] = None, noise: str = "normal"):
    """One client's action in [0, 1]^3; training adds scaled noise then clips."""
    a = agent.raw(observation)
    if not evaluation:
        a = np.clip(a + _noise(rng, a.shape, noise) * epsilon, -1.0, 1.0)
    return scale_action(a)


def _noise(rng, shape, kind):
    if kind == "uniform":
        return rng.uniform(-1.0, 1.0, shape)
    return rng.standard_normal(shape)


class MasterAgent:
    """Per-client value network: input is joint slots plus one candidate slot."""

    def __init__(self, n_devices: int, spec: MlpSpec, rng: np.random.Generator, lr: float):
        if spec.n_in != SLOT * (n_devices + 1):
            raise ValueError(f"master input width must be {SLOT * (n_devices + 1)}")
        self.n_devices = n_devices
        self.net = Mlp.init(spec, rng)
        self.target = self.net.copy()
        self.opt = Adam(lr)

    @staticmethod
    def make_spec(n_devices: int, cfg: AgentConfig) -> MlpSpec:
        return MlpSpec((SLOT * (n_devices + 1), *cfg.master_hidden, 1),
                       cfg.hidden_activation, cfg.master_output_activation)

    def q(self, joint, candidate, target: bool = False) -> np.ndarray:
        joint = np.atleast_2d(joint)
        candidate = np.atleast_2d(candidate)
        x = np.concatenate([joint, candidate], axis=1)
        return (self.target if target else self.net).forward(x)[:, 0]


def master_q(master: MasterAgent, S_all, candidate, target: bool = False) -> float:
    """Scalar Q for one candidate slot given the flattened joint state-action."""
    return float(master.q(np.asarray(S_all, dtype=float).reshape(1, -1),
                          np.asarray(candidate, dtype=float).reshape(1, -1), target)[0])


def admission_order(scores: np.ndarray) -> np.ndarray:
    """Descending score, ties to the lower position."""
    scores = np.asarray(scores, dtype=float)
    return np.lexsort((np.arange(scores.size), -scores)).astype(np.int64)


def greedy_admit(order, sizes, k_max: int, capacity: float) -> np.ndarray:
    """Mask over candidates accepted by scanning ``order`` under the two budgets."""
    sizes = np.ascontiguousarray(sizes, dtype=np.float64)
    return _kernels.greedy_admit(np.ascontiguousarray(order, dtype=np.int64), sizes,
                                 int(k_max), float(capacity))


def select_actions(clients, master: MasterAgent, observations, sizes, K: int, z_e: float,
                   epsilon: float, evaluation: bool, rng: Optional[np.random.Generator] = None,
                   noise: str = "normal"):
    """Client actions plus the master's accept mask.

    Proposals that fit both budgets are all accepted. Otherwise they are
    ranked (descending master Q; a random shuffle with probability
    ``epsilon`` during training) and admitted greedily. Returns
    ``(actions, mask)``.
    """
    obs = np.asarray(observations, dtype=float)
    sizes = np.asarray(sizes, dtype=float)
    n = obs.shape[0]
    raw = np.stack([c.raw(obs[i]) for i, c in enumerate(clients)])
    if not evaluation:
        raw = np.clip(raw + _noise(rng, raw.shape, noise) * epsilon, -1.0, 1.0)
    actions = scale_action(raw)
    explore = (not evaluation) and rng.random() < epsilon

    mask = np.zeros(n, dtype=bool)
    prop = np.flatnonzero(actions[:, 0] >= 0.5)
    if prop.size == 0:
        return actions, mask
    if prop.size <= K and sizes[prop].sum() <= z_e:
        mask[prop] = True
        return actions, mask
    if explore:
        order = rng.permutation(prop.size).astype(np.int64)
    else:
        joint = joint_input(obs[None], actions[None])
        cand = np.concatenate([obs[prop], actions[prop]], axis=1)
        qs = master.q(np.repeat(joint, prop.size, axis=0), cand)
        order = admission_order(qs)
    mask[prop[greedy_admit(order, sizes[prop], K, z_e)]] = True
    return actions, mask


def sync_targets(clients, master: MasterAgent):
    for c in clients:
        c.target.load_from(c.policy)
    master.target.load_from(master.net)


@dataclass
class TrainStats:
    td_error: float
    sample_td: np.ndarray
    client_objective: float


class CcmMadrl:
    """Client actors plus the combinatorial master, trained jointly."""

    name = "ccm"

    def __init__(self, n_devices: int, cfg: AgentConfig, init_rng: np.random.Generator):
        self.n = n_devices
        self.cfg = cfg
        cspec = cfg.client_spec()
        self.clients = [ClientAgent(cspec, init_rng, cfg.lr_client) for _ in range(n_devices)]
        self.master = MasterAgent(n_devices, MasterAgent.make_spec(n_devices, cfg), init_rng,
                                  cfg.lr_master)

    # -- acting -------------------------------------------------------------

    def act(self, env: MecEnv, obs, epsilon: float, evaluation: bool,
            rng: Optional[np.random.Generator] = None) -> Decision:
        actions, mask = select_actions(self.clients, self.master, obs, env.tasks.size_z,
                                       env.radio.subchannels_K, env.server.storage_z_e,
                                       epsilon, evaluation, rng, self.cfg.noise)
        return Decision(actions, env.decode_actions(actions), mask)

    def policy_actions(self, S: np.ndarray, target: bool = False):
        """Scaled noiseless actions for a batch of joint states (B, N, 7)."""
        return np.stack([scale_action(c.raw(S[:, i], target)) for i, c in enumerate(self.clients)],
                        axis=1)

    # -- training -----------------------------------------------------------

    def _all_slot_q(self, net: Mlp, S, A):
        """Q for every (sample, device) candidate slot plus the all-zeros slot.

        Returns ``(q_slots (B, N), q_zero (B,))``.
        """
        B, N = S.shape[0], S.shape[1]
        joint = joint_input(S, A)
        slots = np.concatenate([S, A], axis=-1).reshape(B * N, SLOT)
        x = np.concatenate([np.repeat(joint, N, axis=0), slots], axis=1)
        x0 = np.concatenate([joint, np.zeros((B, SLOT))], axis=1)
        q = net.forward(np.concatenate([x, x0], axis=0))[:, 0]
        return q[:B * N].reshape(B, N), q[B * N:]

    def next_q(self, batch: Batch) -> np.ndarray:
        """Bootstrap value per sample: DDQN over the next-step proposals."""
        A2 = self.policy_actions(batch.S_next, target=True)
        prop = A2[:, :, 0] >= 0.5
        q_on, _ = self._all_slot_q(self.master.net, batch.S_next, A2)
        q_tg, q_tg0 = self._all_slot_q(self.master.target, batch.S_next, A2)
        pick = np.argmax(np.where(prop, q_on, -np.inf), axis=1)
        chosen = q_tg[np.arange(len(batch)), pick]
        return np.where(prop.any(axis=1), chosen, q_tg0)

    def master_rows(self, batch: Batch):
        """Training rows: one per accepted (sample, device), or an all-zeros
        placeholder row for samples where nothing was accepted."""
        B = len(batch)
        joint = joint_input(batch.S, batch.A)
        mas = batch.A_mas.astype(bool)
        rows_i, rows_n = np.nonzero(mas)
        empty = np.flatnonzero(~mas.any(axis=1))
        slots = np.concatenate([batch.S[rows_i, rows_n], batch.A[rows_i, rows_n]], axis=1)
        sample = np.concatenate([rows_i, empty])
        cand = np.concatenate([slots, np.zeros((empty.size, SLOT))], axis=0)
        order = np.argsort(sample, kind="stable")
        sample, cand = sample[order], cand[order]
        x = np.concatenate([joint[sample], cand], axis=1)
        assert np.unique(sample).size == B
        return x, sample

    def train_master(self, batch: Batch, weights: np.ndarray):
        cfg = self.cfg
        y_sample = (cfg.reward_scale * batch.reward
                    + cfg.gamma * self.next_q(batch) * (1.0 - batch.done))
        x, sample = self.master_rows(batch)
        q, cache = self.master.net.forward_cached(x)
        q = q[:, 0]
        y = y_sample[sample]
        err = y - q
        if not np.all(np.isfinite(err)):
            raise TrainingDivergence("non-finite master TD error")
        td = float(np.mean(err ** 2))
        w = np.asarray(weights, dtype=float)[sample]
        grad_q = -2.0 * w * err / err.size
        grad, _ = self.master.net.backward(cache, grad_q[:, None])
        self.master.opt.step(self.master.net.params, grad)
        sample_td = np.bincount(sample, weights=np.abs(err), minlength=len(batch)) / \
            np.bincount(sample, minlength=len(batch))
        return td, sample_td, y, q

    def client_feedback(self, S: np.ndarray, A_new: np.ndarray):
        """Per-sample feedback Q for the clients and its gradient w.r.t. ``A_new``.

        Feedback is the largest Q among proposing clients, or the all-zeros
        placeholder Q when nobody proposes. Returns ``(tarQ (B,), dQ/dA (B, N, 3))``.
        """
        B, N = S.shape[0], S.shape[1]
        net = self.master.net
        joint = joint_input(S, A_new)
        slots = np.concatenate([S, A_new], axis=-1).reshape(B * N, SLOT)
        x = np.concatenate([np.concatenate([np.repeat(joint, N, axis=0), slots], axis=1),
                            np.concatenate([joint, np.zeros((B, SLOT))], axis=1)], axis=0)
        out, cache = net.forward_cached(x)
        q = out[:B * N, 0].reshape(B, N)
        q0 = out[B * N:, 0]
        prop = A_new[:, :, 0] >= 0.5
        any_prop = prop.any(axis=1)
        pick = np.argmax(np.where(prop, q, -np.inf), axis=1)
        tar = np.where(any_prop, q[np.arange(B), pick], q0)
        # d(mean tar)/d(row output): 1/B on the selected row of each sample
        g_out = np.zeros((x.shape[0], 1))
        rows = np.where(any_prop, np.arange(B) * N + pick, B * N + np.arange(B))
        g_out[rows, 0] = 1.0 / B
        _, gx = net.backward(cache, g_out)
        gA = np.zeros((B, N, ACTION_DIM))
        if self.cfg.client_grad_path == "full":
            joint_g = gx[:, :N * SLOT].reshape(-1, N, SLOT)[:, :, OBS_DIM:]
            gA += joint_g[:B * N].reshape(B, N, N, ACTION_DIM).sum(axis=1)
            gA += joint_g[B * N:]
        # candidate-slot contribution reaches the candidate's own action only
        cand_g = gx[:B * N, N * SLOT + OBS_DIM:].reshape(B, N, ACTION_DIM)
        gA += cand_g
        return tar, gA

    def train_clients(self, S: np.ndarray) -> float:
        objective = 0.0
        for n, client in enumerate(self.clients):
            A_new = self.policy_actions(S)
            raw, cache = client.policy.forward_cached(S[:, n])
            tar, gA = self.client_feedback(S, A_new)
            objective = float(np.mean(tar))
            # ascend mean tarQ: descend its negative; d(scaled)/d(raw) = 1/2
            g_raw = -0.5 * gA[:, n, :]
            grad, _ = client.policy.backward(cache, g_raw)
            client.opt.step(client.policy.params, grad)
            client.target.load_from(client.policy)
        return objective

    def train(self, memory: ReplayMemory, rng: np.random.Generator) -> TrainStats:
        M = self.cfg.batch_size
        batch, weights, idx = memory.sample(M, rng)
        td, sample_td, _, _ = self.train_master(batch, weights)
        self.master.target.load_from(self.master.net)
        objective = self.train_clients(batch.S)
        memory.update_priorities(idx, sample_td)
        return TrainStats(td, sample_td, objective)

    # -- persistence --------------------------------------------------------

    def save(self, path, extra: Optional[dict] = None):
        nets, opts = {"master": self.master.net, "master_target": self.master.target}, \
            {"master": self.master.opt}
        for i, c in enumerate(self.clients):
            nets[f"client{i}"] = c.policy
            nets[f"client{i}_target"] = c.target
            opts[f"client{i}"] = c.opt
        save_checkpoint(path, nets, opts, extra)

    def load(self, path) -> dict:
        nets, opts, extra = load_checkpoint(path)
        self.master.net.load_from(nets["master"])
        self.master.target.load_from(nets["master_target"])
        self.master.opt = opts["master"]
        for i, c in enumerate(self.clients):
            c.policy.load_from(nets[f"client{i}"])
            c.target.load_from(nets[f"client{i}_target"])
            c.opt = opts[f"client{i}"]
        return extra


def train(agent: CcmMadrl, memory: ReplayMemory, rng: np.random.Generator) -> TrainStats:
    return agent.train(memory, rng)
