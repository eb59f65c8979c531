"""Save and restore a complete learner state through the tensor container."""

from __future__ import annotations

from pathlib import Path
from typing import Any

import numpy as np

from .autodiff import get_dtype
from .checkpoint import CheckpointError, load_tensors, save_tensors
from .config import from_dict
from .harness import CilState
from .masks import CumulativeMasks
from .pfr import ProjectionNetwork


def state_tensors(state: CilState) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    for prefix, module in (("backbone.", state.backbone), ("gcab.", state.gcab)):
        tensors.update({prefix + k: v for k, v in module.state_dict().items()})
    if state.frozen_backbone is not None:
        tensors.update({"frozen_backbone." + k: v for k, v in state.frozen_backbone.state_dict().items()})
    for t in state.projectors.tasks():
        tensors.update({f"projector.{t}.{k}": v for k, v in state.projectors[t].state_dict().items()})
    tensors["cumulative.m_i"] = state.cumulative.m_i
    tensors["cumulative.m_2"] = state.cumulative.m_2
    for t, (m_i, m_2) in enumerate(state.task_masks, start=1):
        tensors[f"task_mask.{t}.m_i"] = m_i
        tensors[f"task_mask.{t}.m_2"] = m_2
    for k, v in state.optimizer_state.items():
        tensors["optimizer." + k] = np.asarray(v)
    return tensors


def save_state(path: str | Path, state: CilState, extra: dict[str, Any] | None = None) -> None:
    """Write a finalized learner state; ``extra`` lands in the header metadata."""
    if state.phase != "idle":
        raise CheckpointError("checkpoints are written between tasks only")
    meta = {
        "config": state.cfg.to_dict(),
        "config_hash": state.cfg.config_hash(),
        "seed": state.cfg.seed,
        "precision": np.dtype(get_dtype()).name,
        "completed": state.completed,
        "class_counts": state.class_counts,
        "class_order": None if state.class_order is None else [int(c) for c in state.class_order],
        "capacity_log": state.capacity_log,
        "accumulated": state.cumulative.accumulated,
        "backbone_frozen": state.backbone_frozen,
        "projector_layers": {str(t): state.projectors[t].layers for t in state.projectors.tasks()},
    }
    meta.update(extra or {})
    save_tensors(path, state_tensors(state), meta)


def _take(tensors: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


def load_state(path: str | Path) -> tuple[CilState, dict[str, Any]]:
    """Rebuild the learner; tensors take the current global precision."""
    tensors, meta = load_tensors(path)
    cfg = from_dict(meta["config"])
    state = CilState(cfg, meta["class_counts"], meta["class_order"])
    for t in range(1, meta["completed"] + 1):
        state.gcab.add_head(state.class_counts[t - 1], np.random.default_rng(0))
    state.backbone.load_state_dict(_take(tensors, "backbone."))
    state.gcab.load_state_dict(_take(tensors, "gcab."))
    if any(k.startswith("frozen_backbone.") for k in tensors):
        state.frozen_backbone = state.backbone.frozen_copy()
        state.frozen_backbone.load_state_dict(_take(tensors, "frozen_backbone."))
    dim = state.gcab.dim
    for key, layers in sorted(meta["projector_layers"].items(), key=lambda kv: int(kv[0])):
        t = int(key)
        net = ProjectionNetwork(dim, layers, np.random.default_rng(0))
        net.load_state_dict(_take(tensors, f"projector.{t}."))
        state.projectors.push(t, net)
    state.cumulative = CumulativeMasks(tensors["cumulative.m_i"], tensors["cumulative.m_2"],
                                       len(meta["accumulated"]), list(meta["accumulated"]))
    state.task_masks = [(tensors[f"task_mask.{t}.m_i"], tensors[f"task_mask.{t}.m_2"])
                        for t in range(1, meta["completed"] + 1) if f"task_mask.{t}.m_i" in tensors]
    state.optimizer_state = _take(tensors, "optimizer.")
    state.capacity_log = list(meta["capacity_log"])
    state.completed = meta["completed"]
    if meta["backbone_frozen"]:
        state.backbone.freeze()
        state.backbone_frozen = True
    return state, meta
