"""Asynchronous model-parallel training for networks with dynamic control flow.

Models are static graphs of message-processing nodes. Worker threads host the
nodes and exchange messages that carry a payload and a small integer state
(instance id, loop counters, structural ids). Parameterized nodes update
their own weights locally, so instances of different shapes train
concurrently without batching.
"""
from .ir import CONTROLLER, IrGraph, Message, State, build_graph, load_graph
from .models import ModelSpec, build_model, build_replicated
from .runtime import EpochReport, Runtime, TrainConfig

__version__ = "0.1.0"

__all__ = [
    "CONTROLLER", "EpochReport", "IrGraph", "Message", "ModelSpec", "Runtime", "State", "TrainConfig",
    "build_graph", "build_model", "build_replicated", "load_graph",
]
