"""Adam with per-parameter gradient gates.

A gate is an array in [0, 1] with the parameter's shape. The gated gradient
``gate * grad`` is what enters the moment estimates. Entries whose gate is
exactly zero are skipped entirely: their moments and values never move, so a
frozen weight stays bitwise identical however many steps are taken.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class GradGate:
    target: Tensor
    mask: np.ndarray

    def __post_init__(self) -> None:
        self.mask = np.asarray(self.mask, dtype=self.target.data.dtype)
        if self.mask.shape != self.target.shape:
            raise ShapeError(f"gate shape {self.mask.shape} does not match parameter shape {self.target.shape}")
        if np.any(self.mask < 0) or np.any(self.mask > 1):
            raise ValueError("gate entries must lie in [0, 1]")


class Adam:
    def __init__(
        self,
        params: list[Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> None:
        seen: set[int] = set()
        self.params: list[Tensor] = []
        for p in params:
            if id(p) not in seen:
                seen.add(id(p))
                self.params.append(p)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self._gates: dict[int, np.ndarray] = {}

    def set_gates(self, gates: list[GradGate]) -> None:
        index = {id(p): i for i, p in enumerate(self.params)}
        self._gates = {}
        for gate in gates:
            if id(gate.target) not in index:
                continue
            self._gates[id(gate.target)] = gate.mask

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            gate = self._gates.get(id(p))
            if gate is None:
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
                p.data -= self.lr * (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)
                continue
            live = gate > 0
            if not live.any():
                continue
            g = gate * g
            m_new = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            v_new = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            self.m[i] = np.where(live, m_new, self.m[i])
            self.v[i] = np.where(live, v_new, self.v[i])
            update = self.lr * (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)
            p.data -= np.where(live, update, 0.0).astype(p.data.dtype)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"t": np.array(self.t, dtype=np.int64)}
        for i in range(len(self.params)):
            state[f"m.{i}"] = self.m[i]
            state[f"v.{i}"] = self.v[i]
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["t"])
        for i in range(len(self.params)):
            self.m[i] = np.array(state[f"m.{i}"], dtype=self.params[i].data.dtype)
            self.v[i] = np.array(state[f"v.{i}"], dtype=self.params[i].data.dtype)
