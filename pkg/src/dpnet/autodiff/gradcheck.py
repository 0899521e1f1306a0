"""Central finite-difference oracle for reverse-mode gradients."""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import OracleInvalidError, UsageError
from .rng import Rng
from .tensor import Tensor, backward, no_grad, track_branches


@dataclass
class GradcheckReport:
    max_rel_err: float
    checked: int
    skipped_kinks: int
    worst: tuple[str, int] | None = None
    per_leaf: dict[str, float] = field(default_factory=dict)

    def passed(self, tol: float) -> bool:
        return self.checked > 0 and self.max_rel_err <= tol


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def _evaluate(f: Callable[[], Tensor], higher_order: bool = False) -> tuple[float, tuple[bytes, ...]]:
    with contextlib.ExitStack() as stack:
        if not higher_order:
            stack.enter_context(no_grad())
        log = stack.enter_context(track_branches())
        value = f().item()
    return value, tuple(log)


def gradcheck(
    f: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    h: float = 1e-4,
    max_elements: int | None = None,
    rng: Rng | None = None,
    higher_order: bool = False,
) -> GradcheckReport:
    """Compare reverse-mode gradients of scalar program ``f`` with central differences.

    ``f`` must close over ``leaves``; their data is perturbed in place and
    restored. Elements whose two stencil points take a different branch of a
    piecewise op than the base point are counted as kinks and skipped.
    ``max_elements`` samples that many elements per leaf instead of all.
    Set ``higher_order`` when ``f`` itself differentiates (calls ``grad``).
    """
    for leaf in leaves:
        if leaf.dtype != np.float64:
            raise UsageError("gradcheck requires 64-bit leaves")
    base, base_sig = _evaluate(f, higher_order)
    again, again_sig = _evaluate(f, higher_order)
    if base != again or base_sig != again_sig:
        raise OracleInvalidError("f is not deterministic; finite differences are meaningless")

    for leaf in leaves:
        leaf.zero_grad()
    backward(f())
    rng = rng or Rng(0)

    worst_err, worst = 0.0, None
    checked = skipped = 0
    per_leaf: dict[str, float] = {}
    for li, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros(leaf.shape)
        flat = leaf.data.reshape(-1)
        gflat = analytic.reshape(-1)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, max_elements, replace=False))
        else:
            idx = np.arange(flat.size)
        label = leaf.name or f"leaf{li}"
        leaf_err = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp, sig_p = _evaluate(f, higher_order)
            flat[i] = orig - h
            fm, sig_m = _evaluate(f, higher_order)
            flat[i] = orig
            if sig_p != base_sig or sig_m != base_sig:
                skipped += 1
                continue
            err = relative_error(float(gflat[i]), (fp - fm) / (2 * h))
            checked += 1
            leaf_err = max(leaf_err, err)
            if err > worst_err:
                worst_err, worst = err, (label, int(i))
        per_leaf[label] = leaf_err
    for leaf in leaves:
        leaf.zero_grad()
    return GradcheckReport(worst_err, checked, skipped, worst, per_leaf)
