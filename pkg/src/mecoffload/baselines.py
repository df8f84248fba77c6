"""MADDPG benchmarks with heuristic admission at the server."""

from __future__ import annotations

from enum import Enum
from typing import Optional

import numpy as np

from .agents import (SLOT, AgentConfig, ClientAgent, Decision, TrainStats, _noise,
                     greedy_admit, joint_input, scale_action)
from .env import MecEnv
from .errors import TrainingDivergence
from .nn import Adam, Mlp, MlpSpec, load_checkpoint, save_checkpoint
from .replay import ReplayMemory


class AdmissionRule(str, Enum):
    FIFO_DROP = "fifo_drop"
    SHORTEST_OFFLOAD_FIRST = "shortest_offload_first"
    DEADLINE_OVER_SIZE_FIRST = "deadline_over_size_first"
    RANDOM = "random"

    @property
    def drops_rejects(self) -> bool:
        return self is AdmissionRule.FIFO_DROP


def admission_order(rule: AdmissionRule, task_ids, t_off, tau, z,
                    rng: Optional[np.random.Generator] = None) -> np.ndarray:
    task_ids = np.asarray(task_ids)
    if rule in (AdmissionRule.FIFO_DROP, AdmissionRule.SHORTEST_OFFLOAD_FIRST):
        return np.lexsort((task_ids, np.asarray(t_off, dtype=float)))
    if rule is AdmissionRule.DEADLINE_OVER_SIZE_FIRST:
        ratio = np.asarray(tau, dtype=float) / np.asarray(z, dtype=float)
        return np.lexsort((task_ids, ratio))
    if rng is None:
        raise ValueError("the random rule needs an rng")
    return rng.permutation(task_ids.size)


def admit(rule, proposals, K: int, z_e: float,
          rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Accept mask over ``proposals``, a sequence of ``(task_id, T_off, tau, z)``.

    Candidates are scanned in the rule's priority order and accepted while
    fewer than ``K`` are in and the running size fits ``z_e``.
    """
    rule = AdmissionRule(rule)
    props = list(proposals)
    if not props:
        return np.zeros(0, dtype=bool)
    ids, t_off, tau, z = (np.array(col) for col in zip(*props))
    order = admission_order(rule, ids, t_off, tau, z, rng)
    return greedy_admit(order, z.astype(float), K, z_e)


class Maddpg:
    """Decentralised actors with one centralised critic over all N slots."""

    def __init__(self, n_devices: int, cfg: AgentConfig, init_rng: np.random.Generator,
                 rule=AdmissionRule.FIFO_DROP):
        self.n = n_devices
        self.cfg = cfg
        self.rule = AdmissionRule(rule)
        self.name = {
            AdmissionRule.FIFO_DROP: "maddpg",
            AdmissionRule.SHORTEST_OFFLOAD_FIRST: "maddpg-stf",
            AdmissionRule.DEADLINE_OVER_SIZE_FIRST: "maddpg-dsf",
            AdmissionRule.RANDOM: "random-master",
        }[self.rule]
        spec = cfg.client_spec()
        self.actors = [ClientAgent(spec, init_rng, cfg.lr_client) for _ in range(n_devices)]
        cspec = MlpSpec((SLOT * n_devices, *cfg.master_hidden, 1), cfg.hidden_activation,
                        cfg.master_output_activation)
        self.critic = Mlp.init(cspec, init_rng)
        self.critic_target = self.critic.copy()
        self.critic_opt = Adam(cfg.lr_master)

    def policy_actions(self, S, target: bool = False):
        return np.stack([scale_action(a.raw(S[:, i], target)) for i, a in enumerate(self.actors)],
                        axis=1)

    def act(self, env: MecEnv, obs, epsilon: float, evaluation: bool,
            rng: Optional[np.random.Generator] = None) -> Decision:
        obs = np.asarray(obs, dtype=float)
        raw = np.stack([a.raw(obs[i]) for i, a in enumerate(self.actors)])
        if not evaluation:
            raw = np.clip(raw + _noise(rng, raw.shape, self.cfg.noise) * epsilon, -1.0, 1.0)
        actions = scale_action(raw)
        decoded = env.decode_actions(actions)
        mask = np.zeros(self.n, dtype=bool)
        dropped = np.zeros(self.n, dtype=bool)
        prop = np.flatnonzero(decoded.propose)
        if prop.size:
            t_off = env.offload_times(decoded)[prop]
            tk = env.tasks
            order = admission_order(self.rule, prop, t_off, tk.deadline_tau[prop],
                                    tk.size_z[prop], rng)
            ok = greedy_admit(order, tk.size_z[prop], env.radio.subchannels_K,
                              env.server.storage_z_e)
            mask[prop[ok]] = True
            if self.rule.drops_rejects:
                dropped[prop[~ok]] = True
        return Decision(actions, decoded, mask, dropped)

    def critic_q(self, S, A, target: bool = False) -> np.ndarray:
        net = self.critic_target if target else self.critic
        return net.forward(joint_input(S, A))[:, 0]

    def train(self, memory: ReplayMemory, rng: np.random.Generator) -> TrainStats:
        cfg = self.cfg
        batch, weights, idx = memory.sample(cfg.batch_size, rng)
        A2 = self.policy_actions(batch.S_next, target=True)
        next_q = self.critic_q(batch.S_next, A2, target=True)
        y = cfg.reward_scale * batch.reward + cfg.gamma * next_q * (1.0 - batch.done)
        q, cache = self.critic.forward_cached(joint_input(batch.S, batch.A))
        err = y - q[:, 0]
        if not np.all(np.isfinite(err)):
            raise TrainingDivergence("non-finite critic TD error")
        td = float(np.mean(err ** 2))
        grad, _ = self.critic.backward(cache, (-2.0 * weights * err / err.size)[:, None])
        self.critic_opt.step(self.critic.params, grad)
        self.critic_target.load_from(self.critic)

        objective = 0.0
        B = len(batch)
        for n, actor in enumerate(self.actors):
            raw, acache = actor.policy.forward_cached(batch.S[:, n])
            A = batch.A.copy()
            A[:, n] = scale_action(raw)
            qa, ccache = self.critic.forward_cached(joint_input(batch.S, A))
            objective = float(qa.mean())
            _, gx = self.critic.backward(ccache, np.full((B, 1), 1.0 / B))
            gA = gx.reshape(B, self.n, SLOT)[:, n, -3:]
            grad, _ = actor.policy.backward(acache, -0.5 * gA)
            actor.opt.step(actor.policy.params, grad)
            actor.target.load_from(actor.policy)
        memory.update_priorities(idx, np.abs(err))
        return TrainStats(td, np.abs(err), objective)

    def save(self, path, extra: Optional[dict] = None):
        nets = {"critic": self.critic, "critic_target": self.critic_target}
        opts = {"critic": self.critic_opt}
        for i, a in enumerate(self.actors):
            nets[f"actor{i}"] = a.policy
            nets[f"actor{i}_target"] = a.target
            opts[f"actor{i}"] = a.opt
        save_checkpoint(path, nets, opts, extra)

    def load(self, path) -> dict:
        nets, opts, extra = load_checkpoint(path)
        self.critic.load_from(nets["critic"])
        self.critic_target.load_from(nets["critic_target"])
        self.critic_opt = opts["critic"]
        for i, a in enumerate(self.actors):
            a.policy.load_from(nets[f"actor{i}"])
            a.target.load_from(nets[f"actor{i}_target"])
            a.opt = opts[f"actor{i}"]
        return extra


def maddpg_train(agent: Maddpg, memory: ReplayMemory, rng: np.random.Generator) -> TrainStats:
    return agent.train(memory, rng)
