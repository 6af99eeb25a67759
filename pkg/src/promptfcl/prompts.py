"""Task-specific prompt sets and their attention-weighted composition."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

SYNC, ASYNC = "sync", "async"


@dataclass
class TaskPromptSet:
    """Components of one task.

    ``P`` has shape ``(M, n_layers, L_p, D)``: one ``L_p x D`` block per
    prompted layer and component. ``K`` and ``A`` are ``(M, D)``; a component
    shares its key and attention vector across layers.
    """

    task: int
    P: Tensor
    K: Tensor
    A: Tensor
    layers: tuple

    @property
    def trainable(self) -> bool:
        return self.P.requires_grad

    @trainable.setter
    def trainable(self, flag: bool):
        for t in (self.P, self.K, self.A):
            t.requires_grad = bool(flag)
            if not flag:
                t.grad = None

    @property
    def num_components(self) -> int:
        return self.P.shape[0]

    @property
    def length(self) -> int:
        return self.P.shape[2]

    def tensors(self) -> list:
        return [self.P, self.K, self.A]

    def arrays(self) -> dict:
        return {"P": self.P.data, "K": self.K.data, "A": self.A.data}

    def copy(self) -> "TaskPromptSet":
        out = TaskPromptSet(self.task, Tensor(self.P.data), Tensor(self.K.data),
                            Tensor(self.A.data), self.layers)
        out.trainable = self.trainable
        return out


def _orthogonalize(vectors: np.ndarray) -> np.ndarray:
    """Modified Gram-Schmidt on the rows, keeping each row's original norm."""
    out = vectors.copy()
    norms = np.linalg.norm(vectors, axis=1)
    for _ in range(2):  # second pass removes round-off residue
        for i in range(len(out)):
            for j in range(i):
                uj = out[j] / np.linalg.norm(out[j])
                out[i] -= (out[i] @ uj) * uj
    return out * (norms / np.linalg.norm(out, axis=1))[:, None]


def init_task_prompts(m: int, M: int, L_p: int, D: int, layers, seed) -> TaskPromptSet:
    if L_p % 2:
        raise ValueError(f"prompt length must be even, got {L_p}")
    if M < 1:
        raise ValueError(f"need at least one component, got {M}")
    if M > L_p * D:
        raise ValueError(f"{M} components cannot be orthogonal in {L_p * D} dimensions")
    layers = tuple(layers)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(D)
    P = rng.uniform(-bound, bound, (M, len(layers), L_p, D))
    for li in range(len(layers)):
        P[:, li] = _orthogonalize(P[:, li].reshape(M, -1)).reshape(M, L_p, D)
    K = rng.uniform(-bound, bound, (M, D))
    A = rng.uniform(-bound, bound, (M, D))
    ps = TaskPromptSet(m, Tensor(P), Tensor(K), Tensor(A), layers)
    ps.trainable = True
    return ps


class PromptPool:
    """Ordered task id -> TaskPromptSet, with ids contiguous from 1."""

    def __init__(self, sets=()):
        self.sets: dict[int, TaskPromptSet] = {}
        for s in sets:
            self.add(s)

    def add(self, s: TaskPromptSet):
        if s.task != self.n + 1:
            raise ValueError(f"task ids must be contiguous: expected {self.n + 1}, got {s.task}")
        if self.sets:
            ref = self.sets[1]
            if s.P.shape[1:] != ref.P.shape[1:] or s.layers != ref.layers:
                raise ValueError(f"task {s.task} prompt geometry {s.P.shape} differs from {ref.P.shape}")
        self.sets[s.task] = s

    @property
    def n(self) -> int:
        return len(self.sets)

    def __getitem__(self, task: int) -> TaskPromptSet:
        try:
            return self.sets[task]
        except KeyError:
            raise KeyError(f"task {task} not in prompt pool (known: 1..{self.n})") from None

    def __contains__(self, task):
        return task in self.sets

    def __iter__(self):
        return iter(self.sets.values())

    def copy(self) -> "PromptPool":
        return PromptPool(s.copy() for s in self.sets.values())

    @property
    def layers(self) -> tuple:
        return self.sets[1].layers if self.sets else ()


def compute_attention_weight(q, K, A) -> Tensor:
    """alpha = cos(q * A, K), zero when either side has zero norm."""
    q = T.as_tensor(q)
    if not (q.shape[-1] == T.as_tensor(K).shape[-1] == T.as_tensor(A).shape[-1]):
        raise T.ShapeError(f"attention weight: lengths differ {q.shape}, {T.as_tensor(K).shape}, {T.as_tensor(A).shape}")
    return T.cosine_similarity(q * A, K)


def _frozen(t: Tensor) -> Tensor:
    # past/future tasks contribute values only
    return Tensor(t.data) if t.requires_grad else t


def compose_prompt(q, pool: PromptPool, m: int, n: int | None = None, mode: str = SYNC,
                   return_weights: bool = False):
    """Attention-weighted sum of prompt components, one ``(B, L_p, D)`` prompt per layer.

    Sync mode uses tasks ``1..m``; async mode additionally folds in tasks
    ``m+1..n`` already known to the server. Only task ``m`` keeps gradients.
    """
    n = m if n is None else n
    if mode not in (SYNC, ASYNC):
        raise ValueError(f"unknown composition mode {mode!r}")
    if m > n:
        raise ValueError(f"current task {m} is beyond latest task {n}")
    last = m if mode == SYNC else n
    sets = [pool[i] for i in range(1, last + 1)]
    pick = lambda s, t: t if s.task == m else _frozen(t)
    P = T.concat([pick(s, s.P) for s in sets], axis=0)
    K = T.concat([pick(s, s.K) for s in sets], axis=0)
    A = T.concat([pick(s, s.A) for s in sets], axis=0)

    qa = np.asarray(q.data if isinstance(q, Tensor) else q, dtype=np.float64)
    single = qa.ndim == 1
    qb = qa[None] if single else qa
    B, J = qb.shape[0], P.shape[0]
    alpha = T.cosine_similarity(Tensor(qb[:, None, :]) * A, K, axis=-1)  # (B, J)
    _, n_layers, L_p, D = P.shape
    flat = alpha @ P.reshape(J, n_layers * L_p * D)
    blocks = flat.reshape(B, n_layers, L_p, D)
    out = {}
    for li, layer in enumerate(pool.layers):
        out[layer] = blocks[0, li] if single else blocks[:, li]
    if return_weights:
        return out, alpha
    return out


def split_prefix(p: Tensor):
    """Rows ``[:L/2]`` become the key prefix, rows ``[L/2:]`` the value prefix."""
    p = T.as_tensor(p)
    L = p.shape[-2]
    if L % 2:
        raise ValueError(f"prompt length must be even, got {L}")
    h = L // 2
    return p[..., :h, :], p[..., h:, :]


def prefixes_for(prompts: dict) -> dict:
    return {layer: split_prefix(p) for layer, p in prompts.items()}


def apply_freeze_policy(pool: PromptPool, m: int) -> PromptPool:
    pool[m]  # raises for an unknown task
    for s in pool:
        s.trainable = s.task == m
    return pool
