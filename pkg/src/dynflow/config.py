"""Run configuration: JSON document, schema validation and dataset construction."""
import copy
import json
import os
from importlib import resources
from dataclasses import dataclass, field

import jsonschema
import numpy as np

from . import data
from .models import ModelSpec
from .runtime import TrainConfig

_POS = {"type": "integer", "minimum": 1}

SCHEMA = {
    "type": "object",
    "required": ["model", "dataset"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "model": {
            "type": "object",
            "required": ["family"],
            "additionalProperties": False,
            "properties": {
                "family": {"enum": ["mlp", "rnn", "treernn", "ggsnn"]},
                "hidden": _POS,
                "embed": _POS,
                "classes": _POS,
                "vocab": _POS,
                "steps": _POS,
                "edge_types": _POS,
                "input_dim": _POS,
                "mlp_hidden": _POS,
                "identity_init": {"type": "number", "minimum": 0},
            },
        },
        "dataset": {
            "type": "object",
            "required": ["kind"],
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["list_reduction", "babi15", "trees", "mnist", "vectors", "sst"]},
                "train": _POS,
                "valid": _POS,
                "num_nodes": {"type": "integer", "minimum": 8},
                "depth_range": {"type": "array", "items": _POS, "minItems": 2, "maxItems": 2},
                "vocab": _POS,
                "dim": _POS,
                "classes": _POS,
                "bucket": _POS,
                "resample_train": {"type": "boolean"},
                "paths": {"type": "object", "additionalProperties": {"type": "string"}},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "threads": _POS,
                "max_active_keys": _POS,
                "min_update_frequency": {
                    "oneOf": [_POS, {"type": "object", "additionalProperties": _POS}],
                },
                "optimizer": {
                    "type": "object",
                    "required": ["name"],
                    "properties": {
                        "name": {"enum": ["sgd", "momentum", "adam"]},
                        "lr": {"type": "number", "exclusiveMinimum": 0},
                    },
                },
                "lr_decay": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "epochs": _POS,
                "target_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
                "placement": {"type": "object", "additionalProperties": {"type": "integer", "minimum": 0}},
                "replicas": {"type": "object", "additionalProperties": _POS},
                "deadlock_timeout": {"type": "number", "exclusiveMinimum": 0},
                "diagnostics": {"type": "boolean"},
                "debug": {"type": "boolean"},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"dir": {"type": "string"}, "event_log": {"type": "boolean"}},
        },
    },
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    doc: dict
    model: ModelSpec
    train: TrainConfig
    epochs: int
    target: float
    replicas: dict
    lr_decay: float
    seed: int
    out_dir: str
    event_log: bool = False
    dataset: dict = field(default_factory=dict)


def validate(doc):
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None


def load(path_or_doc, overrides=None):
    """Validate a config file or dict, apply CLI overrides and build a :class:`RunConfig`."""
    if isinstance(path_or_doc, (str, os.PathLike)):
        with open(path_or_doc) as f:
            doc = json.load(f)
    else:
        doc = copy.deepcopy(path_or_doc)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = doc
        *parents, last = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[last] = value
    validate(doc)
    tr = doc.get("train", {})
    muf = tr.get("min_update_frequency", 1)
    seed = int(doc.get("seed", 0))
    train = TrainConfig(
        threads=tr.get("threads", 1),
        max_active_keys=tr.get("max_active_keys", 1),
        min_update_frequency=muf if isinstance(muf, int) else int(muf.get("default", 1)),
        muf_overrides={} if isinstance(muf, int) else {k: v for k, v in muf.items() if k != "default"},
        optimizer=dict(tr.get("optimizer", {"name": "sgd", "lr": 0.1})),
        seed=seed,
        placement=dict(tr.get("placement", {})),
        diagnostics=bool(tr.get("diagnostics", False)),
        debug=bool(tr.get("debug", False)),
        deadlock_timeout=float(tr.get("deadlock_timeout", 60.0)),
    )
    return RunConfig(
        doc=doc,
        model=ModelSpec(**doc["model"]),
        train=train,
        epochs=int(tr.get("epochs", 10)),
        target=float(tr.get("target_accuracy", 1.1)),
        replicas=dict(tr.get("replicas", {})),
        lr_decay=float(tr.get("lr_decay", 1.0)),
        seed=seed,
        out_dir=doc.get("output", {}).get("dir", "runs"),
        event_log=bool(doc.get("output", {}).get("event_log", False)),
        dataset=dict(doc["dataset"]),
    )


def bundled(name):
    """Parsed copy of a config shipped in the package's ``configs`` directory."""
    return json.loads(resources.files("dynflow").joinpath("configs", name).read_text())


def seeds(seed, n):
    """Independent child seeds fanned out from the run seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def make_datasets(cfg):
    """``(train, valid, fresh)`` where ``fresh(epoch)`` regenerates training data or is ``None``."""
    d = cfg.dataset
    kind = d["kind"]
    s_train, s_valid, _ = seeds(cfg.seed, 3)
    n_tr, n_va = d.get("train", 1000), d.get("valid", 200)
    paths = d.get("paths", {})

    def need(*keys):
        missing = [k for k in keys if k not in paths]
        if missing:
            raise ConfigError(f"dataset {kind!r} needs paths {missing}")
        for k in keys:
            if not os.path.exists(paths[k]):
                raise ConfigError(f"dataset path {paths[k]!r} does not exist")

    if kind == "list_reduction":
        gen = lambda n, s: data.gen_list_reduction(n, s)  # noqa: E731
    elif kind == "babi15":
        gen = lambda n, s: data.gen_babi15_like(n, d.get("num_nodes", 8), s)  # noqa: E731
    elif kind == "trees":
        gen = lambda n, s: data.gen_trees(n, tuple(d.get("depth_range", (1, 4))), d.get("vocab", 50), s)  # noqa: E731
    elif kind == "vectors":
        gen = lambda n, s: data.gen_vectors(n, d.get("dim", 20), d.get("classes", 4), s)  # noqa: E731
    elif kind == "mnist":
        need("train_images", "train_labels", "valid_images", "valid_labels")
        train = data.load_mnist_idx(paths["train_images"], paths["train_labels"])
        valid = data.load_mnist_idx(paths["valid_images"], paths["valid_labels"])
        return train[: d.get("train", len(train))], valid[: d.get("valid", len(valid))], None
    elif kind == "sst":
        need("train", "valid")
        vocab = {}
        train = data.load_sst_format(paths["train"], vocab)
        valid = data.load_sst_format(paths["valid"], vocab)
        return train, valid, None
    else:  # unreachable after validation
        raise ConfigError(f"unknown dataset kind {kind!r}")
    fresh = None
    if d.get("resample_train"):
        fresh = lambda epoch: gen(n_tr, seeds(s_train, epoch + 1)[epoch])  # noqa: E731
    return gen(n_tr, s_train), gen(n_va, s_valid), fresh
