"""
Optimizer Module

Adam and plain SGD updates that mutate parameters in place and return the
applied change as a StepDelta. The delta is the authoritative record of the
step: after an update, theta_after == theta_before + delta holds bit-exactly.
"""

from dataclasses import dataclass, field
from typing import Dict, Mapping, MutableMapping

import numpy as np

from forgetloc.models.schemas import OptimizerKind, TrainConfig
from forgetloc.utils.exceptions import InvalidInputError


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, config: TrainConfig) -> "AdamState":
        return cls(lr=config.lr, beta1=config.beta1, beta2=config.beta2, epsilon=config.epsilon)


@dataclass
class StepDelta:
    """Per-block change of one optimizer step and the parameters it started from"""
    deltas: Dict[str, np.ndarray]
    before: Dict[str, np.ndarray]
    step: int

    def is_zero(self) -> bool:
        return all(not np.any(d) for d in self.deltas.values())

    def after(self) -> Dict[str, np.ndarray]:
        return {name: self.before[name] + d for name, d in self.deltas.items()}


def _check_shapes(grads: Mapping[str, np.ndarray], params: Mapping[str, np.ndarray]) -> None:
    for name, grad in grads.items():
        if name not in params:
            raise InvalidInputError(f"gradient for unknown parameter {name}")
        if grad.shape != params[name].shape:
            raise InvalidInputError(f"{name}: gradient shape {grad.shape} != parameter shape {params[name].shape}")


def _apply(deltas: Dict[str, np.ndarray], params: MutableMapping[str, np.ndarray], step: int) -> StepDelta:
    before = {name: params[name].copy() for name in deltas}
    for name, delta in deltas.items():
        params[name] += delta
    return StepDelta(deltas=deltas, before=before, step=step)


def adam_step(state: AdamState, grads: Mapping[str, np.ndarray],
              params: MutableMapping[str, np.ndarray]) -> StepDelta:
    """Bias-corrected Adam update of the parameters named in grads"""
    _check_shapes(grads, params)
    state.t += 1

    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t

    deltas = {}
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])

        state.m[name] *= state.beta1
        state.m[name] += (1.0 - state.beta1) * g
        state.v[name] *= state.beta2
        state.v[name] += (1.0 - state.beta2) * (g * g)

        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        deltas[name] = -state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)

    return _apply(deltas, params, state.t)


def sgd_step(lr: float, grads: Mapping[str, np.ndarray],
             params: MutableMapping[str, np.ndarray], step: int = 0) -> StepDelta:
    _check_shapes(grads, params)
    return _apply({name: -lr * g for name, g in grads.items()}, params, step)


class Optimizer:
    """Per-task optimizer: one fresh state per task, chosen by TrainConfig.optimizer"""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.adam = AdamState.from_config(config) if config.optimizer is OptimizerKind.ADAM else None
        self.steps = 0

    def step(self, grads: Mapping[str, np.ndarray], params: MutableMapping[str, np.ndarray]) -> StepDelta:
        self.steps += 1
        if self.adam is not None:
            return adam_step(self.adam, grads, params)
        return sgd_step(self.config.lr, grads, params, self.steps)
