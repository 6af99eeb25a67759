"""Acceptance gate: one test per criterion, each reported as a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py`` (or ``python tests/test_acceptance.py``);
the per-criterion summary is printed at the end of the session.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from helpers import tiny_config
from promptfcl import tensor as T
from promptfcl.config import parse_config
from promptfcl.encoder import build_encoder
from promptfcl.fed import ClientDelta, ServerState, fedavg_aggregate, init_head, run_experiment
from promptfcl.gradcheck import POINTS, THRESHOLD, run_gradcheck
from promptfcl.losses import C2LossParams, c2_loss
from promptfcl.metrics import average_accuracy, average_forgetting
from promptfcl.prompts import ASYNC, SYNC, PromptPool, compose_prompt, init_task_prompts

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
criterion = pytest.mark.criterion


# ------------------------------------------------------------ 1. gradients

@criterion(1, "gradient fidelity (finite differences, rel err < 1e-5, < 30 s)")
def test_gradient_fidelity():
    start = time.perf_counter()
    report = run_gradcheck(seed=0)
    elapsed = time.perf_counter() - start
    print(report.render())
    names = set(report.checked)
    assert set(T.PRIMITIVES) <= {n.split("_batched")[0] for n in names}
    assert {"cross_entropy", "c2_loss", "fedprox_term"} <= names
    assert all(r.points >= 20 for r in report.results) and POINTS >= 20
    assert report.max_error < THRESHOLD, report.render()
    assert elapsed < 30.0


# ----------------------------------------------------------- 2. c2 oracle

def scalar_c2(cur, prev, others, gamma, margin):
    """Plain-Python reference: loops over flattened entries, no numpy."""
    def dist(a, b):
        return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))

    if not others:
        return 0.0
    near = min(dist(cur, o) for o in others)
    return max(dist(cur, prev) - gamma * near + margin, 0.0)


@criterion(2, "c2_loss equals a scalar re-implementation (1e-12)")
def test_c2_loss_oracle():
    rng = np.random.default_rng(2024)
    kinds = {"active": 0, "inactive": 0, "empty": 0}
    for i in range(100):
        shape = tuple(int(s) for s in rng.integers(1, 4, size=int(rng.integers(1, 3))))
        cur, prev = rng.normal(size=shape), rng.normal(size=shape)
        n_neg = 0 if i % 10 == 0 else int(rng.integers(1, 5))
        others = [rng.normal(size=shape) * rng.uniform(0.2, 3) for _ in range(n_neg)]
        gamma, margin = float(rng.uniform(0.05, 2)), float(rng.uniform(0, 1))
        got = c2_loss(cur, prev, others, C2LossParams(gamma, margin)).item()
        want = scalar_c2(cur.ravel().tolist(), prev.ravel().tolist(), [o.ravel().tolist() for o in others],
                         gamma, margin)
        assert abs(got - want) <= 1e-12, (i, got, want)
        kinds["empty" if not others else ("active" if want > 0 else "inactive")] += 1
    assert all(v > 0 for v in kinds.values()), kinds

    worked = [
        (np.array([1.0, 0]), np.array([1.0, 0]), [np.array([4.0, 0])], 1.0, 0.0, 0.0),
        (np.array([1.0, 0]), np.zeros(2), [np.array([3.0, 0])], 1.0, 0.0, 0.0),
        (np.array([2.0, 0]), np.zeros(2), [np.array([3.0, 0])], 0.5, 0.1, 1.6),
    ]
    for cur, prev, others, g, m, want in worked:
        assert abs(c2_loss(cur, prev, others, C2LossParams(g, m)).item() - want) <= 1e-12
        assert abs(scalar_c2(cur.tolist(), prev.tolist(), [o.tolist() for o in others], g, m) - want) <= 1e-12


# ------------------------------------------------------- 3. fedavg oracle

def _server(n_tasks, D=6, seed=0):
    s = ServerState()
    for t in range(1, n_tasks + 1):
        s.pool.add(init_task_prompts(t, 2, 2, D, (0, 1), [seed, t]))
        s.heads[t] = init_head(t, (2 * t - 2, 2 * t - 1), D, np.random.default_rng([seed, t]))
    return s


@criterion(3, "fedavg equals a brute-force weighted mean (1e-12)")
def test_fedavg_oracle():
    rng = np.random.default_rng(3)
    keys = ("P", "K", "A", "W", "b")
    for trial in range(20):
        server = _server(3, seed=trial)
        deltas = []
        for c in range(int(rng.integers(1, 8))):
            task = int(rng.integers(1, 4))
            shapes = {k: v.shape for k, v in server.task_arrays(task).items()}
            deltas.append(ClientDelta(c, task, *(rng.normal(size=shapes[k]) for k in keys),
                                      int(rng.integers(1, 100))))
        out = fedavg_aggregate(deltas, server)
        for task in (1, 2, 3):
            group = [d for d in deltas if d.task == task]
            for k in keys:
                got = out.task_arrays(task)[k]
                if not group:
                    assert np.array_equal(got, server.task_arrays(task)[k])
                    continue
                total = sum(d.n_samples for d in group)
                flat = [sum(d.n_samples * getattr(d, k).ravel()[j] for d in group) / total
                        for j in range(got.size)]
                assert np.max(np.abs(got.ravel() - np.array(flat))) <= 1e-12

    server = _server(1)
    d = ClientDelta(0, 1, *(rng.normal(size=v.shape) for v in server.task_arrays(1).values()), 5)
    same = [ClientDelta(c, 1, d.P, d.K, d.A, d.W, d.b, c + 1) for c in range(5)]
    idem, single = fedavg_aggregate(same, server), fedavg_aggregate([d], server)
    for k in keys:
        assert np.max(np.abs(idem.task_arrays(1)[k] - getattr(d, k))) <= 1e-12
        assert np.array_equal(single.task_arrays(1)[k], getattr(d, k))


# --------------------------------------------------- 4. composition laws

@criterion(4, "async composition reduces to sync; alpha is scale invariant (1e-12)")
def test_composition_reductions():
    rng = np.random.default_rng(4)
    D, layers = 8, (0, 1, 2)
    for trial in range(10):
        n = int(rng.integers(2, 5))
        pool = PromptPool(init_task_prompts(t, 3, 4, D, layers, [trial, t]) for t in range(1, n + 1))
        q = rng.normal(size=(5, D))
        same_s, same_a = compose_prompt(q, pool, n, n, SYNC), compose_prompt(q, pool, n, n, ASYNC)
        for layer in layers:
            assert np.array_equal(same_s[layer].data, same_a[layer].data)

        m = int(rng.integers(1, n))
        zeroed = pool.copy()
        for t in range(m + 1, n + 1):
            zeroed[t].P.data = np.zeros_like(zeroed[t].P.data)
        s, a = compose_prompt(q, pool, m, n, SYNC), compose_prompt(q, zeroed, m, n, ASYNC)
        for layer in layers:
            assert np.max(np.abs(s[layer].data - a[layer].data)) <= 1e-12

        c = float(np.exp(rng.uniform(-5, 5)))
        _, w1 = compose_prompt(q, pool, m, n, ASYNC, return_weights=True)
        _, w2 = compose_prompt(c * q, pool, m, n, ASYNC, return_weights=True)
        assert np.max(np.abs(w1.data - w2.data)) <= 1e-12


# ----------------------------------------------- 5. freezing / rehearsal

def _audit_run(cfg, monkeypatch):
    """Run an experiment while snapshotting every client's local state around each update."""
    import promptfcl.fed as fed

    original_update, original_freeze, original_copy = fed.client_update, fed.apply_freeze_policy, fed.Head.copy
    violations, reads = [], []
    local = {}

    def freeze(pool, m):
        local["pool"] = original_freeze(pool, m)
        return local["pool"]

    def head_copy(self):
        out = original_copy(self)
        local.setdefault("heads", {})[out.task] = out
        return out

    def audited(client, task, data, snapshot, enc, settings, rng):
        local.clear()
        enc_before = {k: v.copy() for k, v in enc.weights.items()}
        server_blocks = {t: {k: v.copy() for k, v in snapshot.task_arrays(t).items()} for t in snapshot.pool.sets}
        result = original_update(client, task, data, snapshot, enc, settings, rng)
        reads.append((task, set(data[2].tolist())))
        for k, v in enc.weights.items():
            if not np.array_equal(v, enc_before[k]):
                violations.append(f"encoder {k} changed")
        for t, s in local["pool"].sets.items():
            if t != task:
                for k, v in s.arrays().items():
                    if not np.array_equal(v, server_blocks[t][k]):
                        violations.append(f"client {client}: frozen prompt set {t}.{k} changed while training {task}")
        for t, h in local["heads"].items():
            if t != task:
                for k, v in (("W", h.W.data), ("b", h.b.data)):
                    if not np.array_equal(v, server_blocks[t][k]):
                        violations.append(f"client {client}: frozen head {t}.{k} changed while training {task}")
        if result[0] is not None and result[0].task != task:
            violations.append(f"delta for task {result[0].task} while training {task}")
        return result

    monkeypatch.setattr(fed, "client_update", audited)
    monkeypatch.setattr(fed, "apply_freeze_policy", freeze)
    monkeypatch.setattr(fed.Head, "copy", head_copy)
    try:
        res = run_experiment(cfg)
    finally:
        monkeypatch.undo()
    return res, violations, reads


@criterion(5, "frozen encoder, frozen past prompts/heads, no rehearsal (3 tasks)")
@pytest.mark.parametrize("mode", ["sync", "async"])
def test_freezing_and_rehearsal(mode, monkeypatch):
    cfg = tiny_config(fed__mode=mode, fed__n_clients=4, fed__rounds_per_task=3)
    res, violations, reads = _audit_run(cfg, monkeypatch)
    assert not violations, violations[:5]
    assert res.report["complete"] and len(res.report["accuracy_matrix"]) == 3
    assert len(reads) == cfg.fed.n_clients * res.schedule.rounds

    # every read is the client's scheduled task, and per client the tasks read never go back
    per_client = {}
    for r, c, task in res.store.access_log:
        assert task == res.schedule.task_of(r, c)
        per_client.setdefault(c, []).append(task)
    assert all(seq == sorted(seq) for seq in per_client.values())
    # the samples handed to training carry only the current task's labels
    positions = {t: {res.store.label_index[c] for c in res.store.tasks[t].class_ids} for t in res.store.tasks}
    assert all(labels <= positions[task] for task, labels in reads)


@criterion(5, "frozen encoder, frozen past prompts/heads, no rehearsal (3 tasks)")
def test_past_blocks_bitwise_constant_across_rounds():
    frozen_log = []

    def observer(r, before, after, assign):
        trained = set(assign)
        for t in before.pool.sets:
            if t in trained:
                continue
            for k, v in before.task_arrays(t).items():
                if not np.array_equal(v, after.task_arrays(t)[k]):
                    frozen_log.append((r, t, k))

    cfg = tiny_config(fed__n_clients=3, fed__rounds_per_task=3)
    enc = build_encoder(cfg.encoder_config(), 0)
    before = {k: v.copy() for k, v in enc.weights.items()}
    run_experiment(cfg, encoder=enc, on_round=observer)
    assert not frozen_log, frozen_log[:5]
    assert all(np.array_equal(before[k], enc.weights[k]) for k in before)


# --------------------------------------------------------- 6. determinism

@criterion(6, "byte-identical reports at any parallel degree")
def test_determinism_across_parallelism():
    dumps = []
    for mode in ("sync", "async"):
        cfg = tiny_config(fed__mode=mode, fed__n_clients=4, data__scheme="label_skew")
        runs = [run_experiment(cfg, parallel=p).report for p in (1, 1, 4)]
        texts = [json.dumps(r, sort_keys=True) for r in runs]
        assert texts[0] == texts[1] == texts[2]
        dumps.append(texts[0])
    assert dumps[0] != dumps[1]


# ----------------------------------------------------- 7. ablation trend

@criterion(7, "median accuracy cprompt >= ce_only and forgetting <= (3 seeds, < 5 min)")
def test_ablation_ordering():
    start = time.perf_counter()
    stats = {}
    for variant in ("cprompt", "ce_only"):
        accs, fgts = [], []
        for seed in (0, 1, 2):
            cfg = parse_config(CONFIGS / "ablation.toml", {"seed": seed, "loss.variant": variant})
            rep = run_experiment(cfg).report
            accs.append(rep["average_accuracy"])
            fgts.append(rep["average_forgetting"])
        stats[variant] = (float(np.median(accs)), float(np.median(fgts)), accs, fgts)
    elapsed = time.perf_counter() - start
    for v, (a, f, accs, fgts) in stats.items():
        print(f"{v:8s} median accuracy {100 * a:6.2f}%  median forgetting {100 * f:6.2f}%  "
              f"per seed acc {[round(100 * x, 1) for x in accs]} fgt {[round(100 * x, 1) for x in fgts]}")
    print(f"elapsed {elapsed:.1f}s")
    cp, ce = stats["cprompt"], stats["ce_only"]
    assert cp[2] != ce[2] or cp[3] != ce[3], "the contrastive term never engaged"
    assert cp[0] >= ce[0] and cp[1] <= ce[1]
    assert elapsed < 300


# -------------------------------------------------------- 8. sanity floors

@criterion(8, "single task > 90%; zero separation within 3 sigma of chance")
def test_sanity_floors():
    cfg = parse_config(CONFIGS / "ablation.toml", {"data.n_tasks": 1, "fed.n_clients": 1,
                                                   "data.scheme": "iid", "fed.rounds_per_task": 10,
                                                   "fed.local_epochs": 3})
    rep = run_experiment(cfg).report
    print(f"single task accuracy {100 * rep['average_accuracy']:.2f}%")
    assert rep["average_accuracy"] > 0.9

    cfg0 = parse_config(CONFIGS / "ablation.toml", {"data.separation": 0.0})
    res = run_experiment(cfg0)
    n_classes = cfg0.data.n_tasks * cfg0.data.classes_per_task
    per_task = [len(res.store.split_data(t, "test")[2]) for t in range(1, cfg0.data.n_tasks + 1)]
    pooled = sum(a * n for a, n in zip(res.report["accuracy_matrix"][-1], per_task)) / sum(per_task)
    p, n = 1 / n_classes, sum(per_task)
    sigma = math.sqrt(p * (1 - p) / n)
    print(f"zero separation pooled accuracy {100 * pooled:.2f}% (chance {100 * p:.1f}%, 3 sigma {100 * 3 * sigma:.2f}%)")
    assert abs(pooled - p) <= 3 * sigma


# ------------------------------------------------------------ 9. metrics

@criterion(9, "metrics match hand-computed 3x3 values")
def test_metrics_oracles():
    # forgetting with a drop: task1 best 0.9 -> 0.6, task2 0.8 -> 0.7
    m = [[0.9], [0.8, 0.8], [0.6, 0.7, 0.5]]
    assert average_accuracy(m) == (0.6 + 0.7 + 0.5) / 3
    assert average_forgetting(m) == ((0.9 - 0.6) + (0.8 - 0.7)) / 2
    # no forgetting
    z = [[0.7], [0.7, 0.6], [0.7, 0.6, 0.9]]
    assert average_accuracy(z) == (0.7 + 0.6 + 0.9) / 3
    assert average_forgetting(z) == 0.0
    # improvement gives negative forgetting: best over stages 1..2 only
    g = [[0.5], [0.4, 0.6], [0.8, 0.9, 0.7]]
    assert average_forgetting(g) == ((0.5 - 0.8) + (0.6 - 0.9)) / 2
    assert average_forgetting(g) < 0


# ------------------------------------------------------- 10. payload size

@criterion(10, "client payload bytes independent of encoder depth")
def test_payload_independent_of_encoder():
    uploads, encoder_bytes = {}, {}
    for depth in (4, 8):
        cfg = tiny_config(encoder__num_layers=depth, prompt__layers=[0, 1, 2, 3], data__n_tasks=2)
        res = run_experiment(cfg)
        per_client = sorted({t["upload_bytes"] for t in res.report["traces"]})
        uploads[depth] = (per_client, [c["upload_bytes"] for c in res.report["communication"]["per_round"]],
                          [c["per_client_download_bytes"] for c in res.report["communication"]["per_round"]])
        encoder_bytes[depth] = res.encoder.nbytes
    print(f"payload bytes {uploads[4][0]} vs {uploads[8][0]}; encoder bytes {encoder_bytes[4]} vs {encoder_bytes[8]}")
    assert uploads[4] == uploads[8]
    assert encoder_bytes[8] > encoder_bytes[4]


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
