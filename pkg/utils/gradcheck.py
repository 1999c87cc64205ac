# acrkn/utils/gradcheck.py

import logging
from typing import Callable, Optional, Sequence

import numpy as np

from domain.errors import NumericsError
from domain.models import GradCheckReport
from utils.params import ParamStore
from utils.tensor import Graph, Tensor, backward, no_graph

logger = logging.getLogger(__name__)


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(a), abs(b))


def _evaluate(f: Callable[[], Tensor]) -> float:
    with no_graph():
        value = f().item()
    if not np.isfinite(value):
        raise NumericsError("Objective is non-finite at a perturbed point")
    return value


def finite_diff_check(
        f: Callable[[], Tensor],
        params: ParamStore,
        eps: float = 1e-6,
        tol: float = 1e-4,
        names: Optional[Sequence[str]] = None,
) -> GradCheckReport:
    """
    Compare backward gradients of the scalar f() with central differences.

    Entries masked out of a parameter (structural zeros) are skipped.
    Gradient accumulators are left zeroed.
    """
    if eps <= 0:
        raise NumericsError(f"eps must be positive, got {eps}")

    params.zero_grad()
    with Graph() as graph:
        loss = f()
        backward(graph, loss)
    analytic = {p.name: p.grad.copy() for p in params}
    params.zero_grad()

    selected = [p for p in params if names is None or p.name in names]
    report = GradCheckReport(tol=tol, eps=eps)

    for p in selected:
        worst = 0.0
        flagged = []
        for idx in np.ndindex(p.value.shape):
            if p.mask is not None and p.mask[idx] == 0.0:
                continue
            original = p.value[idx]
            p.value[idx] = original + eps
            f_plus = _evaluate(f)
            p.value[idx] = original - eps
            f_minus = _evaluate(f)
            p.value[idx] = original

            numeric = (f_plus - f_minus) / (2.0 * eps)
            exact = float(analytic[p.name][idx])
            err = relative_error(exact, numeric)
            worst = max(worst, err)
            if err > tol:
                flagged.append((tuple(int(i) for i in idx), exact, numeric, err))

        report.max_rel_error[p.name] = worst
        if flagged:
            report.flagged[p.name] = flagged
            logger.warning("Gradient check failed for %s: %d entries above %.1e (max %.3e)",
                           p.name, len(flagged), tol, worst)

    return report
