"""Federated orchestration: task schedules, local prompt training, per-task FedAvg."""

from __future__ import annotations

import json
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ExperimentConfig, stream
from .data import PartitionSpec, generate_synthetic_benchmark, load_csv_dataset, partition
from .encoder import FrozenEncoder, build_encoder, encode_query, forward_with_prompts, load_encoder
from .losses import C2LossParams, c2_loss, cross_entropy, fedprox_term, total_loss
from .metrics import AccuracyMatrix, average_accuracy, average_forgetting
from .prompts import (ASYNC, SYNC, PromptPool, TaskPromptSet, apply_freeze_policy, compose_prompt,
                      init_task_prompts, prefixes_for)
from .tensor import Adam, Tensor

PARAM_NAMES = ("P", "K", "A", "W", "b")


class ExperimentError(RuntimeError):
    pass


# ------------------------------------------------------------------ state

@dataclass
class Head:
    task: int
    class_ids: tuple
    W: Tensor
    b: Tensor

    @property
    def trainable(self) -> bool:
        return self.W.requires_grad

    @trainable.setter
    def trainable(self, flag: bool):
        for t in (self.W, self.b):
            t.requires_grad = bool(flag)
            if not flag:
                t.grad = None

    def tensors(self) -> list:
        return [self.W, self.b]

    def copy(self) -> "Head":
        out = Head(self.task, self.class_ids, Tensor(self.W.data), Tensor(self.b.data))
        out.trainable = self.trainable
        return out


def init_head(task: int, class_ids, D: int, rng) -> Head:
    bound = 1.0 / np.sqrt(D)
    C = len(class_ids)
    return Head(task, tuple(int(c) for c in class_ids), Tensor(rng.uniform(-bound, bound, (D, C))),
                Tensor(np.zeros(C)))


@dataclass
class ServerState:
    pool: PromptPool = field(default_factory=PromptPool)
    heads: dict = field(default_factory=dict)
    round: int = 0

    @property
    def n(self) -> int:
        return self.pool.n

    def copy(self) -> "ServerState":
        return ServerState(self.pool.copy(), {t: h.copy() for t, h in self.heads.items()}, self.round)

    def task_arrays(self, task: int) -> dict:
        s, h = self.pool[task], self.heads[task]
        return {"P": s.P.data, "K": s.K.data, "A": s.A.data, "W": h.W.data, "b": h.b.data}

    def set_task_arrays(self, task: int, arrays: dict):
        s, h = self.pool[task], self.heads[task]
        s.P.data, s.K.data, s.A.data = (np.array(arrays[k], dtype=np.float64) for k in "PKA")
        h.W.data, h.b.data = np.array(arrays["W"], dtype=np.float64), np.array(arrays["b"], dtype=np.float64)

    @property
    def nbytes(self) -> int:
        """Size of what the server sends each client: all prompt sets and heads."""
        return sum(a.nbytes for t in self.pool.sets for a in self.task_arrays(t).values())


@dataclass
class ClientDelta:
    """Current-task parameters a client uploads after local training."""

    client: int
    task: int
    P: np.ndarray
    K: np.ndarray
    A: np.ndarray
    W: np.ndarray
    b: np.ndarray
    n_samples: int

    def arrays(self) -> dict:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def serialize(self) -> bytes:
        head = [self.client, self.task, self.n_samples]
        for k in PARAM_NAMES:
            a = getattr(self, k)
            head += [a.ndim, *a.shape]
        out = struct.pack(f"<{len(head) + 1}q", len(head), *head)
        return out + b"".join(np.ascontiguousarray(getattr(self, k), dtype="<f8").tobytes() for k in PARAM_NAMES)

    @classmethod
    def deserialize(cls, buf: bytes) -> "ClientDelta":
        (n,) = struct.unpack_from("<q", buf, 0)
        head = list(struct.unpack_from(f"<{n}q", buf, 8))
        client, task, n_samples = head[:3]
        pos, off, arrays = 3, 8 * (n + 1), {}
        for k in PARAM_NAMES:
            ndim = head[pos]
            shape = tuple(head[pos + 1: pos + 1 + ndim])
            pos += 1 + ndim
            size = int(np.prod(shape)) * 8
            arrays[k] = np.frombuffer(buf, dtype="<f8", count=size // 8, offset=off).reshape(shape).copy()
            off += size
        return cls(client, task, n_samples=n_samples, **arrays)

    @property
    def nbytes(self) -> int:
        return len(self.serialize())


# --------------------------------------------------------------- schedule

@dataclass(frozen=True)
class TaskSchedule:
    assignments: tuple  # assignments[r - 1][client] -> task id
    n_tasks: int
    rounds_per_task: int
    leaders: tuple = ()

    @property
    def rounds(self) -> int:
        return len(self.assignments)

    def task_of(self, r: int, client: int) -> int:
        return self.assignments[r - 1][client]


def build_schedule(mode: str, n_clients: int, n_tasks: int, rounds_per_task: int,
                   async_fraction: float = 0.5, async_offset: int = 1, seed=0) -> TaskSchedule:
    """Round-by-round task assignment.

    In async mode a random subset of clients spends only
    ``R // (async_offset + 1)`` rounds on each of the first ``async_offset``
    tasks, after which it stays ``async_offset`` tasks ahead of the rest.
    Leaders that finish the last task keep training it.
    """
    for name, v in (("n_clients", n_clients), ("n_tasks", n_tasks), ("rounds_per_task", rounds_per_task)):
        if v <= 0:
            raise ValueError(f"{name} must be positive, got {v}")
    R = rounds_per_task
    base = [(r - 1) // R + 1 for r in range(1, n_tasks * R + 1)]
    if mode == SYNC:
        return TaskSchedule(tuple(tuple([t] * n_clients) for t in base), n_tasks, R)
    if mode != ASYNC:
        raise ValueError(f"unknown schedule mode {mode!r}")
    if not 0 < async_fraction < 1:
        raise ValueError(f"async_fraction must lie in (0, 1), got {async_fraction}")
    if async_offset < 1:
        raise ValueError(f"async_offset must be >= 1, got {async_offset}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n_lead = min(max(int(round(async_fraction * n_clients)), 1), n_clients - 1) if n_clients > 1 else 0
    leaders = tuple(sorted(int(c) for c in rng.choice(n_clients, n_lead, replace=False)))
    h = max(1, R // (async_offset + 1))

    def leader_task(r):
        if r <= async_offset * h:
            t = (r - 1) // h + 1
        else:
            t = async_offset + 1 + (r - async_offset * h - 1) // R
        return min(t, n_tasks)

    rows = []
    for r, t in enumerate(base, start=1):
        lt = leader_task(r)
        rows.append(tuple(max(lt, t) if c in leaders else t for c in range(n_clients)))
    return TaskSchedule(tuple(rows), n_tasks, R, leaders)


# ------------------------------------------------------------- data store

class TaskStore:
    """Holds every task's data and cached queries; all client reads go through it.

    Each read is appended to ``access_log`` as ``(round, client, task)`` so
    tests can audit that finished tasks are never revisited.
    """

    def __init__(self, tasks, partitions, queries, label_index):
        self.tasks = {t.task_id: t for t in tasks}
        self.partitions = partitions  # task -> list of per-client index arrays
        self.queries = queries  # task -> (N, D) array over all samples
        self.label_index = label_index  # global class id -> logit position
        self.access_log: list = []

    def client_data(self, round_: int, client: int, task: int):
        self.access_log.append((round_, client, task))
        idx = self.partitions[task][client]
        t = self.tasks[task]
        return t.X[idx], self.queries[task][idx], self._labels(t.y[idx])

    def split_data(self, task: int, split: str):
        t = self.tasks[task]
        idx = t.splits[split]
        return t.X[idx], self.queries[task][idx], self._labels(t.y[idx])

    def _labels(self, y):
        return np.array([self.label_index[int(c)] for c in y], dtype=np.int64)


# --------------------------------------------------------------- training

@dataclass(frozen=True)
class LocalTraining:
    epochs: int = 5
    lr: float = 1e-4
    batch_size: int = 128
    mode: str = SYNC
    variant: str = "cprompt"
    c2: C2LossParams = C2LossParams()
    mu: float = 0.01


def _logits(features: Tensor, heads: dict, upto: int) -> Tensor:
    return T.concat([features @ heads[t].W + heads[t].b for t in range(1, upto + 1)], axis=-1)


def predict_features(X, q, pool: PromptPool, enc: FrozenEncoder, m: int, n: int, mode: str) -> Tensor:
    prompts = compose_prompt(q, pool, m, n, mode)
    return forward_with_prompts(X, enc, prefixes_for(prompts))


def client_update(client: int, task: int, data, snapshot: ServerState, enc: FrozenEncoder,
                  settings: LocalTraining, rng):
    """Train task ``task``'s prompt set and head on local data.

    ``data`` is ``(X, q, labels)`` for this client's current task. Returns
    ``(delta, epoch_losses)``; ``delta`` is None for an empty local dataset.
    The contrastive-continual term depends on parameters only, so it is added
    once per epoch, on the epoch's first mini-batch.
    """
    X, q, y = data
    if len(y) == 0:
        return None, []
    pool = apply_freeze_policy(snapshot.pool.copy(), task)
    heads = {t: h.copy() for t, h in snapshot.heads.items()}
    for t, h in heads.items():
        h.trainable = t == task
    n = pool.n if settings.mode == ASYNC else task
    current, head = pool[task], heads[task]
    params = current.tensors() + head.tensors()
    opt = Adam(params, lr=settings.lr)

    prev_prompt = snapshot.pool[task].P.data
    negatives = [snapshot.pool[i].P.data for i in range(1, n + 1) if i != task]
    anchor = [p.data.copy() for p in params]
    use_c2 = settings.variant == "cprompt" and settings.c2.lambda_c2l > 0
    use_prox = settings.variant == "ce_fedprox" and settings.mu > 0

    # only the current head is trained, on current-task classes (older logits masked out)
    offset = sum(len(heads[t].class_ids) for t in range(1, task))
    N = len(y)
    epoch_losses = []
    for _ in range(settings.epochs):
        order = rng.permutation(N)
        batch_losses = []
        for bi, start in enumerate(range(0, N, settings.batch_size)):
            idx = order[start:start + settings.batch_size]
            feats = predict_features(X[idx], q[idx], pool, enc, task, n, settings.mode)
            loss = cross_entropy(feats @ head.W + head.b, y[idx] - offset)
            if use_c2 and bi == 0:
                loss = total_loss(loss, c2_loss(current.P, prev_prompt, negatives, settings.c2),
                                  settings.c2.lambda_c2l)
            if use_prox:
                loss = loss + fedprox_term(params, anchor, settings.mu)
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            batch_losses.append(loss.item())
        epoch_losses.append(float(np.mean(batch_losses)))

    delta = ClientDelta(client, task, current.P.data.copy(), current.K.data.copy(), current.A.data.copy(),
                        head.W.data.copy(), head.b.data.copy(), int(N))
    return delta, epoch_losses


def fedavg_aggregate(deltas, server: ServerState) -> ServerState:
    """Sample-weighted mean per task; each task's group is reduced in client-id order."""
    out = server.copy()
    groups: dict[int, list] = {}
    for d in deltas:
        groups.setdefault(d.task, []).append(d)
    for task in sorted(groups):
        group = sorted(groups[task], key=lambda d: d.client)
        ref = out.task_arrays(task)
        counts = np.array([d.n_samples for d in group], dtype=np.float64)
        total = counts.sum()
        if total <= 0:
            raise ValueError(f"task {task}: zero total sample count in aggregation group")
        merged = {}
        for k in PARAM_NAMES:
            acc = np.zeros_like(ref[k])
            for d, c in zip(group, counts):
                a = getattr(d, k)
                if a.shape != ref[k].shape:
                    raise T.ShapeError(f"task {task} {k}: client {d.client} sent {a.shape}, server has {ref[k].shape}")
                acc = acc + (c / total) * a
            merged[k] = acc
        out.set_task_arrays(task, merged)
    out.round += 1
    return out


# ------------------------------------------------------------- evaluation

def evaluate_task(server: ServerState, enc: FrozenEncoder, data, upto: int, batch: int = 256) -> float:
    """Class-incremental accuracy: argmax over all heads 1..upto, no task id."""
    X, q, y = data
    if len(y) == 0:
        raise ValueError("empty evaluation set")
    correct = 0
    with T.no_grad():
        for s in range(0, len(y), batch):
            feats = predict_features(X[s:s + batch], q[s:s + batch], server.pool, enc, upto, upto, SYNC)
            pred = np.argmax(_logits(feats, server.heads, upto).data, axis=-1)
            correct += int((pred == y[s:s + batch]).sum())
    return correct / len(y)


def evaluate_global(server: ServerState, enc: FrozenEncoder, test_sets) -> list:
    """Row ``a[t][1..t]`` where ``t = len(test_sets)``."""
    t = len(test_sets)
    return [evaluate_task(server, enc, test_sets[i], t) for i in range(t)]


# ------------------------------------------------------------ checkpoints

def save_checkpoint(path, server: ServerState, meta: dict):
    arrays = {"server/round": np.array(server.round)}
    for t in server.pool.sets:
        for k, a in server.task_arrays(t).items():
            arrays[f"task/{t}/{k}"] = a
        arrays[f"task/{t}/classes"] = np.array(server.heads[t].class_ids)
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        server = ServerState(round=int(z["server/round"]))
        n = len({k.split("/")[1] for k in z.files if k.startswith("task/")})
        layers = tuple(meta["prompt_layers"])
        for t in range(1, n + 1):
            g = lambda k: z[f"task/{t}/{k}"].copy()
            ps = TaskPromptSet(t, Tensor(g("P")), Tensor(g("K")), Tensor(g("A")), layers)
            server.pool.add(ps)
            server.heads[t] = Head(t, tuple(int(c) for c in g("classes")), Tensor(g("W")), Tensor(g("b")))
    return server, meta


# ------------------------------------------------------------- experiment

@dataclass
class ExperimentResult:
    report: dict
    server: ServerState
    encoder: FrozenEncoder
    store: TaskStore
    schedule: TaskSchedule
    wall_clock: float = 0.0


def load_tasks(cfg: ExperimentConfig) -> list:
    d = cfg.data
    if d.csv_path:
        return load_csv_dataset(d.csv_path, d_in=d.input_dim)
    return generate_synthetic_benchmark(d.n_tasks, d.classes_per_task, d.input_dim,
                                        d.samples_per_class, d.separation, seed=stream(cfg.seed, "data"))


def build_store(cfg: ExperimentConfig, enc: FrozenEncoder, tasks) -> TaskStore:
    spec = PartitionSpec(cfg.data.scheme, cfg.data.beta, cfg.fed.n_clients, cfg.seed)
    partitions = {t.task_id: partition(t, spec, rng=stream(cfg.seed, "partition", t.task_id)) for t in tasks}
    queries = {}
    for t in tasks:
        queries[t.task_id] = np.concatenate([encode_query(t.X[s:s + 512], enc) for s in range(0, len(t.y), 512)])
    label_index, pos = {}, 0
    for t in tasks:
        for c in t.class_ids:
            label_index[c] = pos
            pos += 1
    return TaskStore(tasks, partitions, queries, label_index)


def run_experiment(cfg: ExperimentConfig, parallel: int = 1, checkpoint_path=None, resume_from=None,
                   stop_after_stage: int | None = None, encoder: FrozenEncoder | None = None,
                   on_round=None) -> ExperimentResult:
    """Run every task stage: distribute, train clients, aggregate per task, evaluate.

    ``on_round(r, server_before, server_after, assignments)`` is an optional
    observer used by audits; it must not mutate anything.
    """
    start = time.perf_counter()
    seed = cfg.seed
    if encoder is not None:
        enc = encoder
    elif cfg.encoder.weights:
        enc = load_encoder(cfg.encoder.weights)
    else:
        enc = build_encoder(cfg.encoder_config(), stream(seed, "weights"))
    if enc.config != cfg.encoder_config():
        raise ExperimentError(f"encoder weights {enc.config} do not match config {cfg.encoder_config()}")
    tasks = load_tasks(cfg)
    n_tasks = len(tasks)
    store = build_store(cfg, enc, tasks)
    f = cfg.fed
    schedule = build_schedule(f.mode, f.n_clients, n_tasks, f.rounds_per_task, f.async_fraction,
                              f.async_offset, seed=stream(seed, "schedule"))
    settings = LocalTraining(f.local_epochs, f.lr, f.batch_size, f.mode, cfg.loss.variant,
                             cfg.c2_params(), cfg.loss.mu)
    D = enc.config.embed_dim
    layers = enc.config.prompted_layers

    server = ServerState()
    rows = AccuracyMatrix()
    traces, comm, round_evals, stage_rounds = [], [], [], []
    first_stage = 1
    if resume_from is not None:
        server, meta = load_checkpoint(resume_from)
        if meta["config"] != cfg.to_dict():
            raise ExperimentError("checkpoint was written by a different configuration")
        rows = AccuracyMatrix(meta["accuracy_matrix"])
        traces, comm = meta["traces"], meta["communication"]
        round_evals, stage_rounds = meta["round_evals"], meta["stage_rounds"]
        first_stage = meta["stage"] + 1

    def ensure_tasks(upto):
        while server.pool.n < upto:
            k = server.pool.n + 1
            server.pool.add(init_task_prompts(k, cfg.prompt.components, cfg.prompt.length, D, layers,
                                              stream(seed, "prompts", k)))
            server.heads[k] = init_head(k, store.tasks[k].class_ids, D, stream(seed, "heads", k))

    def run_client(job):
        r, c, m, snap = job
        try:
            data = store.client_data(r, c, m)
            return client_update(c, m, data, snap, enc, settings, stream(seed, "batching", r, c))
        except Exception as exc:
            raise ExperimentError(f"round {r}, client {c}, task {m}: {exc}") from exc

    pool = ThreadPoolExecutor(max_workers=parallel) if parallel > 1 else None
    try:
        for stage in range(first_stage, n_tasks + 1):
            best_val, best_arrays, stale = -1.0, None, 0
            executed = 0
            for k in range(f.rounds_per_task):
                r = (stage - 1) * f.rounds_per_task + k + 1
                assign = schedule.assignments[r - 1]
                ensure_tasks(max(assign))
                snapshot = server
                jobs = [(r, c, assign[c], snapshot) for c in range(f.n_clients)]
                results = list(pool.map(run_client, jobs)) if pool else [run_client(j) for j in jobs]
                deltas = []
                down = snapshot.nbytes
                up_total = 0
                for (_, c, m, _), (delta, losses) in zip(jobs, results):
                    up = delta.nbytes if delta is not None else 0
                    up_total += up
                    traces.append({"round": r, "client": c, "task": m, "epoch_losses": losses,
                                   "n_samples": 0 if delta is None else delta.n_samples, "upload_bytes": up})
                    if delta is not None:
                        deltas.append(delta)
                comm.append({"round": r, "upload_bytes": up_total, "download_bytes": down * f.n_clients,
                             "per_client_download_bytes": down})
                new_server = fedavg_aggregate(deltas, server)
                if on_round is not None:
                    on_round(r, server, new_server, assign)
                server = new_server
                executed += 1
                if f.eval_every_round:
                    seen = [store.split_data(i, "test") for i in range(1, stage + 1)]
                    round_evals.append({"round": r, "accuracy": evaluate_global(server, enc, seen)})
                if f.early_stopping:
                    val = evaluate_task(server, enc, store.split_data(stage, "val"), stage)
                    if val > best_val:
                        best_val, best_arrays, stale = val, {k2: v.copy() for k2, v in server.task_arrays(stage).items()}, 0
                    else:
                        stale += 1
                        if stale >= f.patience:
                            break
            if f.early_stopping and best_arrays is not None:
                server.set_task_arrays(stage, best_arrays)
            stage_rounds.append(executed)
            seen = [store.split_data(i, "test") for i in range(1, stage + 1)]
            rows.append(evaluate_global(server, enc, seen))
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, server, {
                    "config": cfg.to_dict(), "stage": stage, "accuracy_matrix": rows.to_list(),
                    "traces": traces, "communication": comm, "round_evals": round_evals,
                    "stage_rounds": stage_rounds, "prompt_layers": list(layers),
                    "rng": {"root_seed": seed, "streams": "counter-based: (root_seed, name, keys)"},
                })
            if stop_after_stage is not None and stage >= stop_after_stage:
                break
    finally:
        if pool:
            pool.shutdown()

    complete = len(rows) == n_tasks
    report = {
        "config": cfg.to_dict(),
        "accuracy_matrix": rows.to_list(),
        "average_accuracy": average_accuracy(rows) if len(rows) else None,
        "average_forgetting": (average_forgetting(rows) if len(rows) >= 2 else 0.0) if len(rows) else None,
        "complete": complete,
        "stage_rounds": stage_rounds,
        "traces": traces,
        "round_evals": round_evals,
        "communication": {
            "per_round": comm,
            "total_upload_bytes": int(sum(c["upload_bytes"] for c in comm)),
            "total_download_bytes": int(sum(c["download_bytes"] for c in comm)),
            "encoder_bytes_not_sent": enc.nbytes,
        },
        "schedule": {"leaders": list(schedule.leaders), "rounds": schedule.rounds},
        "data": {"n_tasks": n_tasks, "classes": [t.class_ids for t in tasks],
                 "partition_sizes": {str(t): [len(p) for p in store.partitions[t]] for t in store.partitions}},
    }
    return ExperimentResult(report, server, enc, store, schedule, time.perf_counter() - start)
