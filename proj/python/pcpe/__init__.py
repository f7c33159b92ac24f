"""Persona-coded poly-encoder: training, evaluation and scoring."""

import json

from ._core import (
    CacheError,
    ConfigError,
    DataError,
    Error,
    InputError,
    NumericError,
    bleu4,
    hit_rate_at_k,
    mrr,
    token_f1,
)
from ._core import run as _run

__all__ = [
    "CacheError", "ConfigError", "DataError", "Error", "InputError", "NumericError",
    "bleu4", "hit_rate_at_k", "mrr", "token_f1",
    "synth", "train", "evaluate", "score", "build_cache",
]


def _options(kwargs):
    out = {}
    for key, value in kwargs.items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        out[key] = str(value)
    return out


def synth(out_dir, **options):
    """Writes train.jsonl and valid.jsonl under out_dir."""
    stdout, _ = _run("synth", _options({"out_dir": out_dir, **options}))
    return json.loads(stdout)


def train(**options):
    """Trains and returns the best validation report.

    Without log=PATH the JSONL training log is discarded.
    """
    stdout, _ = _run("train", _options(options))
    lines = stdout.splitlines()
    if "log" in options:
        return json.loads(lines[-1])
    return json.loads(lines[-1])["best"]


def evaluate(**options):
    stdout, _ = _run("eval", _options(options))
    return json.loads(stdout.splitlines()[0])


def score(dialogue, **options):
    """Ranks one dialogue (a dict or a JSON line)."""
    if not isinstance(dialogue, str):
        dialogue = json.dumps(dialogue)
    stdout, _ = _run("score", _options(options), dialogue)
    return json.loads(stdout)


def build_cache(**options):
    stdout, _ = _run("cache", _options(options))
    return json.loads(stdout)
