"""Pipeline configuration: one JSON document, CLI-overridable by dot path."""
from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any, Iterable

from .errors import ConfigError

FEATURE_VARIANTS = ("dde", "topic_onehot", "none", "dde+ppr", "graphsage")
RETRIEVERS = ("mlp", "cosine")
ENCODERS = ("hash", "http")

DEFAULT_CONFIG: dict[str, Any] = {
    "paths": {
        "kg": "kg.tsv",
        "train_dataset": "train.jsonl",
        "test_dataset": "test.jsonl",
        "out_dir": "out",
        "relevance_labels": None,
    },
    "retriever": {
        "hops": 2,
        "dde_rounds": 2,
        "k": 100,
        "feature_variant": "dde",
        "retriever": "mlp",
        "workers": 1,
        "ppr": {"damping": 0.85, "iterations": 200, "tolerance": 1e-10},
        "graphsage": {"layers": 1, "seed": 0},
    },
    "embeddings": {
        "encoder": "hash",
        "endpoint": None,
        "dim": 64,
        "batch_size": 128,
        "retries": 3,
        "parallelism": 1,
    },
    "training": {
        "epochs": 20,
        "batch_size": 1024,
        "learning_rate": 1e-3,
        "seed": 0,
        "positive_weight": 1.0,
        "hidden_sizes": [1024, 1024],
        "val_fraction": 0.0,
        "parallel_shards": 1,
    },
    "reasoner": {
        "endpoint": None,
        "model": "gpt-4o-mini",
        "parallelism": 4,
        "retries": 3,
        "timeout": 120.0,
        "refusal_tokens": ["not available", "none", "no answer", "unknown"],
    },
    "eval": {
        "recall_at": [5, 10, 20, 50, 100],
        "dump_judgments": True,
    },
    "synth": {
        "entities": 200,
        "relations": 24,
        "layers": 4,
        "total_edges": 550,
        "train_questions": 600,
        "test_questions": 100,
        "template_mix": {"1": 0.25, "2": 0.45, "3": 0.30},
        "seed": 7,
    },
}


def _deep_merge(base: dict, override: dict) -> dict:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config(path: str | Path | None = None) -> dict[str, Any]:
    """Defaults deep-merged with the JSON document at `path` (if given)."""
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                user = json.load(f)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        config = _deep_merge(config, user)
    return config


def apply_overrides(config: dict[str, Any], assignments: Iterable[str]) -> dict[str, Any]:
    """Apply `--set key.path=value` assignments; values parse as JSON when
    possible, otherwise as literal strings."""
    config = copy.deepcopy(config)
    for assignment in assignments:
        if "=" not in assignment:
            raise ConfigError(f"--set expects key=value, got {assignment!r}")
        key, raw_value = assignment.split("=", 1)
        try:
            value = json.loads(raw_value)
        except json.JSONDecodeError:
            value = raw_value
        node = config
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                node[part] = {}
            node = node[part]
        node[parts[-1]] = value
    return config


def validate_config(config: dict[str, Any]) -> None:
    retriever = config["retriever"]
    if retriever["k"] < 0:
        raise ConfigError("retriever.k must be >= 0")
    if retriever["dde_rounds"] < 0:
        raise ConfigError("retriever.dde_rounds must be >= 0")
    if retriever["hops"] < 0:
        raise ConfigError("retriever.hops must be >= 0")
    if retriever["feature_variant"] not in FEATURE_VARIANTS:
        raise ConfigError(
            f"retriever.feature_variant must be one of {FEATURE_VARIANTS}, "
            f"got {retriever['feature_variant']!r}"
        )
    if retriever["retriever"] not in RETRIEVERS:
        raise ConfigError(f"retriever.retriever must be one of {RETRIEVERS}")
    embeddings = config["embeddings"]
    if embeddings["encoder"] not in ENCODERS:
        raise ConfigError(f"embeddings.encoder must be one of {ENCODERS}")
    if embeddings["encoder"] == "http" and not embeddings.get("endpoint"):
        raise ConfigError("embeddings.endpoint is required when encoder is 'http'")
    if config["training"]["epochs"] < 0:
        raise ConfigError("training.epochs must be >= 0")


def resolve_config(
    path: str | Path | None, assignments: Iterable[str] = ()
) -> dict[str, Any]:
    config = apply_overrides(load_config(path), assignments)
    validate_config(config)
    return config


def config_subset(config: dict[str, Any], key_paths: Iterable[str]) -> dict[str, Any]:
    """Extract the given dot-path keys (used for artifact fingerprints)."""
    subset: dict[str, Any] = {}
    for key_path in key_paths:
        node: Any = config
        for part in key_path.split("."):
            if not isinstance(node, dict) or part not in node:
                node = None
                break
            node = node[part]
        subset[key_path] = node
    return subset
