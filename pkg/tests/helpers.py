"""Tiny experiment settings shared by the slower tests."""

from promptfcl.config import parse_config

TINY = {
    "encoder.num_layers": 2, "encoder.embed_dim": 16, "encoder.num_heads": 2, "encoder.num_tokens": 4,
    "prompt.components": 2, "prompt.length": 4, "prompt.layers": [0, 1],
    "data.n_tasks": 3, "data.classes_per_task": 2, "data.input_dim": 8, "data.samples_per_class": 20,
    "fed.n_clients": 2, "fed.rounds_per_task": 2, "fed.local_epochs": 1, "fed.lr": 1e-2,
    "fed.batch_size": 16,
}


def tiny_config(**extra):
    ov = dict(TINY)
    ov.update({k.replace("__", "."): v for k, v in extra.items()})
    return parse_config(None, ov)
