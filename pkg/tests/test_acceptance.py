"""Acceptance criteria. Each test prints one PASS/FAIL line."""

import math
import time

import numpy as np
import pytest

from mecoffload import harness, physics
from mecoffload.agents import AgentConfig, MasterAgent, greedy_admit, select_actions
from mecoffload.env import MecEnv
from mecoffload.nn import Mlp, MlpSpec
from mecoffload.physics import CostWeights
from mecoffload.scheduler import ServerConfig, schedule_step

from cases import FixedClient, ScriptedMaster, alg3_case, step_mismatches
from oracles import event_sim_schedule, fd_gradient_check, greedy_oracle

MB = 8e6


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail=""):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, f"{name}: {detail}"
    return emit


def rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def test_physics_oracles(report):
    t0 = time.perf_counter()
    w = CostWeights(0.5, 0.5)
    cases = [
        (physics.dbm_to_watts(30), 1.0),
        (physics.dbm_to_watts(0), 0.001),
        (physics.dbm_to_watts(24), 0.25118864315095801110850320678),
        (physics.db_to_linear(10), 10.0),
        (physics.db_to_linear(14), 25.118864315095801110850320678),
        (physics.local_latency(1e9, 1.0, 1e9), 1.0),
        (physics.local_latency(8e6, 300, 1.5e9), 1.6),
        (physics.local_energy(8e6, 300, 1.5e9, 5e-27), 27.0),
        (physics.local_energy(8e6, 300, 2e9, 5e-27) / physics.local_energy(8e6, 300, 1e9, 5e-27), 4.0),
        (physics.channel_rate(40e6, 10, 1.0, 1.0), 4e6),
        (physics.channel_rate(40e6, 10, 1.0, 3.0), 8e6),
        (physics.channel_rate(40e6, 10, 0.0, 5.0), 0.0),
        (physics.offload_time(4e6, 4e6), 1.0),
        (physics.offload_energy(0.25, 0.7), 0.175),
        (physics.offload_energy(0.0, math.inf), 0.0),
        (physics.server_service_time(8e6, 300, 4e9), 0.6),
        (physics.task_cost(1.0, 1.0, w), 1.0),
        (physics.task_cost(0.2, 0.1, CostWeights(1.0, 5.0)), 0.7),
        (physics.task_penalty(0.5, 0.9, 10.0, 1.0, w), 0.0),
        (physics.task_penalty(1.0, 0.5, 10.0, 1.0, w), -0.25),
        (physics.task_penalty(0.5, 0.9, 3.0, 5.0, w), -1.0),
        (physics.system_reward([0.5], [0.0]), -0.5),
        (physics.system_reward([1.0, 1.0], [0.0, -1.0]), -1.5),
        (physics.battery_step(1.0, 0.3, 0.001, 3.2e6), 0.701),
        (physics.battery_step(0.1, 0.5, 0.0, 3.2e6), 0.0),
        (physics.battery_step(3.2e6, 0.0, 0.001, 3.2e6), 3.2e6),
    ]
    worst = max(rel(g, e) if e != 0 else abs(g) for g, e in cases)
    dt = time.perf_counter() - t0
    report("physics oracle suite", worst <= 1e-12 and dt < 1.0,
           f"{len(cases)} examples, worst rel err {worst:.2e}, {dt:.3f}s")


def test_scheduler_equivalence(report):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    bad = 0
    for _ in range(1000):
        m = int(rng.integers(0, 9))
        units = int(rng.integers(1, 4))
        tasks = [(i, float(a), float(s)) for i, (a, s) in
                 enumerate(zip(rng.uniform(0, 2, m), rng.uniform(0, 1, m)))]
        ref = event_sim_schedule(tasks, units)
        got = {e.task_id: (e.start, e.finish) for e in schedule_step(tasks, ServerConfig(units, 4e9, 1e12))}
        bad += got != ref
    dt = time.perf_counter() - t0
    report("scheduler equivalence", bad == 0 and dt < 10.0,
           f"1000 instances, {bad} mismatches, {dt:.2f}s")


def _scripted(qs):
    n = len(qs)
    obs = np.zeros((n, 7))
    obs[:, 0] = np.arange(n) / 10
    clients = [FixedClient([0.8, 0.0, 0.0]) for _ in range(n)]
    return clients, ScriptedMaster({float(obs[i, 0]): q for i, q in enumerate(qs)}), obs


def test_combinatorial_selection(report):
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    wrong = violations = not_invariant = 0
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        K = int(rng.integers(1, 5))
        qs = rng.normal(size=n)
        sizes = rng.uniform(1, 50, n) * MB
        z_e = float(rng.uniform(20, 200)) * MB
        clients, master, obs = _scripted(list(qs))
        mask = select_actions(clients, master, obs, sizes, K, z_e, 0.0, True)[1]
        clients, master, obs = _scripted(list(np.exp(qs)))
        mask_exp = select_actions(clients, master, obs, sizes, K, z_e, 0.0, True)[1]
        wrong += set(np.flatnonzero(mask)) != greedy_oracle(list(qs), list(sizes), K, z_e)
        violations += mask.sum() > K or sizes[mask].sum() > z_e
        not_invariant += not np.array_equal(mask, mask_exp)
    dt = time.perf_counter() - t0
    ok = wrong == violations == not_invariant == 0 and dt < 5.0
    report("combinatorial selection oracle", ok,
           f"1000 sets, {wrong} oracle mismatches, {violations} budget violations, "
           f"{not_invariant} exp-transform changes, {dt:.2f}s")


def test_gradient_checks(report):
    rng = np.random.default_rng(11)
    t0 = time.perf_counter()
    client_spec = MlpSpec((7, 64, 32, 3), "relu", "tanh")
    master_spec = MasterAgent.make_spec(6, AgentConfig())
    assert master_spec.widths == (70, 512, 128, 1)
    worst_c = worst_m = 0.0
    for _ in range(10):
        net = Mlp.init(client_spec, rng)
        worst_c = max(worst_c, fd_gradient_check(net, rng.uniform(size=(2, 7)), rng.normal(size=(2, 3))))
        net = Mlp.init(master_spec, rng)
        worst_m = max(worst_m, fd_gradient_check(net, rng.uniform(size=(2, 70)), rng.normal(size=(2, 1)),
                                                 n_coords=150, rng=rng))
    dt = time.perf_counter() - t0
    report("gradient checks", worst_c <= 1.0 and worst_m <= 1.0 and dt < 30.0,
           f"client worst {worst_c:.3f}, master worst {worst_m:.3f} (of 1e-4 rel budget), {dt:.2f}s")


def test_constraint_invariants(report):
    env = MecEnv(harness.load_config("desk").episode)
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    steps = bad = 0
    K, z_e = env.cfg.subchannels_K, env.server.storage_z_e
    while steps < 10_000:
        env.reset(int(rng.integers(1 << 30)))
        done = False
        while not done:
            d = env.decode_actions(rng.uniform(0, 1, (env.n, 3)))
            ids = rng.permutation(np.flatnonzero(d.propose))
            mask = greedy_admit(ids, env.tasks.size_z, K, z_e) if ids.size else np.zeros(env.n, bool)
            ok = mask.sum() <= K and env.tasks.size_z[mask].sum() <= z_e
            out, _, done = env.step(d, mask)
            pr = env.profile
            ok = ok and np.all((d.p >= pr.p_min) & (d.p <= pr.p_max))
            ok = ok and np.all((d.f >= pr.f_min) & (d.f <= pr.f_max))
            ok = ok and np.all((out.battery >= 0) & (out.battery <= pr.b_max))
            bad += not ok
            steps += 1
    dt = time.perf_counter() - t0
    report("constraint invariants", bad == 0 and dt < 30.0, f"{steps} steps, {bad} violations, {dt:.2f}s")


def test_determinism(report, tmp_path):
    t0 = time.perf_counter()
    blobs = []
    for name in ("a", "b"):
        d = harness.load_config("desk").to_dict()
        d.update(algorithm="maddpg-stf", out_dir=str(tmp_path / name))
        harness.run(harness.RunConfig.from_dict(d))
        blobs.append((tmp_path / name / "metrics.csv").read_bytes())
    dt = time.perf_counter() - t0
    report("determinism", blobs[0] == blobs[1] and dt < 300.0,
           f"desk maddpg-stf x2, {len(blobs[0])} bytes, identical={blobs[0] == blobs[1]}, {dt:.1f}s")


def test_epsilon_schedule(report):
    # closed form at 0, max/2, max for (min, max) = (0.01, 1.0), 30-digit references
    refs = {0: 1.0, 1000: 0.610465353115507089367761539641, 2000: 0.37420064675972789837956853246}
    worst = max(rel(physics.epsilon_schedule(ep, 2000, 0.01, 1.0), v) for ep, v in refs.items())
    # a second schedule, reference 0.05 + 0.45 e^-ep/300 evaluated directly
    for ep in (0, 150, 300):
        worst = max(worst, rel(physics.epsilon_schedule(ep, 300, 0.05, 0.5), 0.05 + 0.45 * math.exp(-ep / 300)))
    report("epsilon schedule", worst <= 1e-12, f"worst rel err {worst:.2e}")


@pytest.mark.slow
def test_learning_smoke(report, tmp_path):
    wins, lines = 0, []
    for seed in (0, 1, 2):
        res = {}
        for algorithm in ("ccm", "random-master"):
            d = harness.load_config("desk").to_dict()
            d.update(algorithm=algorithm, seed=seed, out_dir=str(tmp_path / f"{algorithm}-{seed}"))
            t0 = time.perf_counter()
            s = harness.run(harness.RunConfig.from_dict(d))
            res[algorithm] = (s, time.perf_counter() - t0)
        ccm, rand = res["ccm"][0], res["random-master"][0]
        within = res["ccm"][1] + res["random-master"][1] < 900.0
        win = (ccm["last50_mean_eval_reward"] > rand["last50_mean_eval_reward"]
               and ccm["last50_mean_eval_reward"] > ccm["first50_mean_eval_reward"] and within)
        wins += win
        lines.append(f"seed {seed}: ccm last50 {ccm['last50_mean_eval_reward']:.2f} "
                     f"first50 {ccm['first50_mean_eval_reward']:.2f} "
                     f"random-master last50 {rand['last50_mean_eval_reward']:.2f} "
                     f"({res['ccm'][1] + res['random-master'][1]:.0f}s)")
    report("learning smoke test", wins >= 2, f"{wins}/3 seeds; " + "; ".join(lines))


def test_training_trace(report):
    bad = []
    for seed in (0, 1, 3):
        for accepted in (True, False):
            for done in (0.0, 1.0):
                got, exp = alg3_case(seed, accepted, done)
                cfg = got["agent"].cfg
                ok = got["y"] == pytest.approx(exp["y"], rel=1e-12)
                ok = ok and got["delta"] == pytest.approx(exp["delta"], rel=1e-12)
                ok = ok and not step_mismatches(got["master_step"], exp["g_master"], cfg.lr_master)
                ok = ok and all(not step_mismatches(s, g, cfg.lr_client)
                                for s, (g, _) in zip(got["client_steps"], exp["client_steps"]))
                if not ok:
                    bad.append((seed, accepted, done))
    report("training-step trace", not bad, f"12 scripted cases, mismatches {bad}")
