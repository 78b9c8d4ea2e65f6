"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .autograd import Tensor, no_grad
from .nn import BatchNorm, Module


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4
    # probes dropped because the finite difference straddled a non-differentiable point
    kinks: int = 0
    probes: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def check_gradients(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor] | dict[str, Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    max_per_tensor: Optional[int] = None,
    modules: Iterable[Module] = (),
    rng: Optional[np.random.Generator] = None,
    skip_kinks: bool = False,
) -> GradCheckReport:
    """Compare backprop gradients of the scalar ``fn()`` against central differences.

    The error for each tensor is max|analytic - numeric| scaled by the
    largest gradient magnitude in that tensor. ``max_per_tensor`` limits the
    number of probed entries (chosen with ``rng``) for large tensors.

    With ``skip_kinks`` the forward and backward one-sided slopes are also
    compared. Where they differ by more than ``tolerance`` times the tensor's
    gradient scale, the step crossed a ReLU or max-pool switch and the
    central difference is not a valid reference for that entry, so the
    probe is excluded and counted in ``kinks``.
    """
    for m in modules:
        for sub in m.modules():
            if isinstance(sub, BatchNorm) and sub.training:
                raise ValueError("gradient check needs frozen batch norm; call .eval() first")
    named = dict(tensors) if isinstance(tensors, dict) else {f"t{i}": t for i, t in enumerate(tensors)}

    with no_grad():
        first, second = fn().data.copy(), fn().data.copy()
    if first.size != 1:
        raise ValueError("gradient check needs a scalar-valued fragment")
    if not np.array_equal(first, second):
        raise ValueError("fragment is not deterministic; gradients cannot be checked")

    for t in named.values():
        t.grad = None
    fn().backward()
    rng = rng or np.random.default_rng(0)
    with no_grad():
        base = fn().item()
    report = {}
    kinks = probes = 0
    for name, t in named.items():
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_tensor is not None and flat.size > max_per_tensor:
            idx = rng.choice(flat.size, size=max_per_tensor, replace=False)
        fwd = np.empty(len(idx))
        bwd = np.empty(len(idx))
        with no_grad():
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + step
                up = fn().item()
                flat[i] = orig - step
                down = fn().item()
                flat[i] = orig
                fwd[j] = (up - base) / step
                bwd[j] = (base - down) / step
        numeric = 0.5 * (fwd + bwd)
        a = analytic.reshape(-1)[idx]
        scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
        keep = np.ones(len(idx), dtype=bool)
        if skip_kinks:
            keep = np.abs(fwd - bwd) <= tolerance * scale
            kinks += int((~keep).sum())
        probes += len(idx)
        report[name] = float(np.abs(a - numeric)[keep].max(initial=0.0) / scale)
    return GradCheckReport(max(report.values(), default=0.0), report, tolerance, kinks, probes)
