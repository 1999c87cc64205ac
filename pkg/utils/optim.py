# acrkn/utils/optim.py

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable

import numpy as np

from domain.errors import NumericsError
from utils.params import ParamStore

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
RULES = ("sgd", "adam")


@dataclass
class OptimizerState:
    rule: str
    momentum: float = 0.0
    step: int = 0
    first: Dict[str, np.ndarray] = field(default_factory=dict)   # velocity (sgd) / first moment (adam)
    second: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.rule not in RULES:
            raise NumericsError(f"Unknown optimizer rule: {self.rule}")


def global_grad_norm(params: Iterable) -> float:
    return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params)))


def clip_grad_norm(params: ParamStore, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm. Returns the norm before clipping."""
    total = global_grad_norm(params)
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        logger.debug("Clipping gradient norm %.4g to %.4g", total, max_norm)
        for p in params:
            p.grad *= scale
    return total


def optimizer_step(params: ParamStore, rule: str, lr: float, state: OptimizerState) -> OptimizerState:
    """
    Apply one update in place, zero the gradients and advance the state.
    A non-finite gradient aborts before any parameter is touched.
    """
    if lr < 0:
        raise NumericsError(f"Learning rate must be non-negative, got {lr}")
    if rule != state.rule:
        raise NumericsError(f"Optimizer state was created for {state.rule}, not {rule}")

    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericsError(f"Non-finite gradient in parameter {p.name}")

    state.step += 1
    for p in params:
        g = p.grad
        if rule == "sgd":
            if state.momentum > 0:
                v = state.first.setdefault(p.name, np.zeros_like(g))
                v *= state.momentum
                v += g
                g = v
            p.value -= lr * g
        else:
            m = state.first.setdefault(p.name, np.zeros_like(g))
            v = state.second.setdefault(p.name, np.zeros_like(g))
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            m_hat = m / (1.0 - ADAM_BETA1 ** state.step)
            v_hat = v / (1.0 - ADAM_BETA2 ** state.step)
            p.value -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        p.zero_grad()

    return state
