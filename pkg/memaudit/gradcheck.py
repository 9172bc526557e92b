"""
Gradcheck: Compare autodiff gradients against central finite differences.

Contract: nn-core v1.0.0
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .autodiff import no_grad, softmax_cross_entropy
from .nn import Model

logger = logging.getLogger(__name__)

GradsFn = Callable[[Model, np.ndarray, np.ndarray], dict[str, np.ndarray]]


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    checked: int
    passed: bool
    worst_parameter: Optional[str] = None
    per_parameter: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _loss(model: Model, images: np.ndarray, labels: np.ndarray, rng_state) -> float:
    model.rng.bit_generator.state = copy.deepcopy(rng_state)
    with no_grad():
        logits, _, _ = model._run(images)
        return float(softmax_cross_entropy(logits, labels).data)


def _default_grads(model: Model, images: np.ndarray, labels: np.ndarray) -> dict[str, np.ndarray]:
    model.forward(images)
    return model.backward(labels)


def gradient_check(
    model: Model,
    images: np.ndarray,
    labels: np.ndarray,
    tolerance: float = 1e-4,
    per_param: int = 8,
    h: float = 1e-5,
    seed: int = 0,
    mode: str = "eval",
    grads_fn: Optional[GradsFn] = None,
) -> GradCheckReport:
    """
    Check autodiff gradients on a random subsample of every parameter.

    Works on a float64 copy of the model. Relative error per entry is
    |a - n| / max(|a|, |n|, floor) with floor = 1e-8 + 1e-3 * max|n| over the
    sampled entries of that parameter, so entries whose true gradient is
    numerically zero do not dominate. Running statistics are restored after
    each evaluation and the dropout stream is replayed so train-mode checks
    see identical masks.
    """
    grads_fn = grads_fn or _default_grads
    twin = model.astype(np.float64)
    twin.mode = mode
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)

    state0 = {k: v.copy() for k, v in twin.state.items()}
    rng_state = copy.deepcopy(twin.rng.bit_generator.state)

    twin.rng.bit_generator.state = copy.deepcopy(rng_state)
    analytic = grads_fn(twin, images, labels)
    twin.state = {k: v.copy() for k, v in state0.items()}

    picker = np.random.default_rng(seed)
    per_parameter: dict[str, float] = {}
    checked = 0
    for name, tensor in twin.params.items():
        flat = tensor.data.reshape(-1)
        count = min(per_param, flat.size)
        positions = picker.choice(flat.size, size=count, replace=False)
        numeric = np.empty(count)
        for i, pos in enumerate(positions):
            original = flat[pos]
            flat[pos] = original + h
            plus = _loss(twin, images, labels, rng_state)
            twin.state = {k: v.copy() for k, v in state0.items()}
            flat[pos] = original - h
            minus = _loss(twin, images, labels, rng_state)
            twin.state = {k: v.copy() for k, v in state0.items()}
            flat[pos] = original
            numeric[i] = (plus - minus) / (2.0 * h)

        auto = analytic[name].reshape(-1)[positions]
        floor = 1e-8 + 1e-3 * float(np.max(np.abs(numeric)))
        denom = np.maximum(np.maximum(np.abs(auto), np.abs(numeric)), floor)
        per_parameter[name] = float(np.max(np.abs(auto - numeric) / denom))
        checked += count

    worst = max(per_parameter, key=per_parameter.get) if per_parameter else None
    max_err = per_parameter[worst] if worst else 0.0
    report = GradCheckReport(
        max_rel_error=max_err,
        tolerance=tolerance,
        checked=checked,
        passed=max_err < tolerance,
        worst_parameter=worst,
        per_parameter=per_parameter,
    )
    logger.debug("gradient check: max rel err %.3e on %s", max_err, worst)
    return report
