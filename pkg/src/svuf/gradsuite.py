"""Finite-difference gradient suite over every differentiable operation,
three composite fragments and a full tiny model."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .enhancement import MaskNet, MaskNetConfig
from .extractor import FeaturePyramid, Pooling, ResNetConfig, SpeakerNetConfig
from .model import SpeakerSystem, SystemConfig
from .tensor import Tensor, functional as F, no_grad
from .tensor.gradcheck import check_gradients
from .tensor.ops import batch_norm, conv, conv_transpose, lstm_cell, max_pool
from .vad import SynchronizerConfig, VadNetConfig

OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3
STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    seconds: float
    probes: int = 0
    kinks: int = 0

    @property
    def passed(self) -> bool:
        # a check whose probes mostly straddle kinks has verified nothing
        return self.error < self.tolerance and self.kinks <= self.probes // 4


def _projection(rng: np.random.Generator, out: Tensor) -> np.ndarray:
    return rng.standard_normal(out.shape)


def _op_checks(rng: np.random.Generator) -> dict[str, Callable[[], tuple]]:
    """name -> builder returning (scalar fn, tensors to check)."""

    def leaf(*shape, low=None):
        data = rng.standard_normal(shape)
        if low is not None:
            data = low + np.abs(data)
        return Tensor(data, requires_grad=True)

    def weighted(op, *tensors):
        proj = _projection(rng, op())
        return (lambda: (op() * proj).sum()), list(tensors)

    a, b = leaf(3, 4), leaf(3, 4)
    row = leaf(4)
    pos = leaf(3, 4, low=0.5)
    m = leaf(4, 5)
    checks = {
        "add": lambda: weighted(lambda: a + row, a, row),
        "sub": lambda: weighted(lambda: a - b, a, b),
        "mul": lambda: weighted(lambda: a * row, a, row),
        "div": lambda: weighted(lambda: a / pos, a, pos),
        "neg": lambda: weighted(lambda: -a, a),
        "power": lambda: weighted(lambda: F.power(pos, 1.7), pos),
        "exp": lambda: weighted(lambda: F.exp(a), a),
        "log": lambda: weighted(lambda: F.log(pos), pos),
        "sqrt": lambda: weighted(lambda: F.sqrt(pos), pos),
        "clip_min": lambda: weighted(lambda: F.clip_min(pos, 1.0), pos),
        "clip": lambda: weighted(lambda: F.clip(a, -0.5, 0.5), a),
        "relu": lambda: weighted(lambda: F.relu(a), a),
        "tanh": lambda: weighted(lambda: F.tanh(a), a),
        "sigmoid": lambda: weighted(lambda: F.sigmoid(a), a),
        "softmax": lambda: weighted(lambda: F.softmax(a, axis=1), a),
        "log_softmax": lambda: weighted(lambda: F.log_softmax(a, axis=0), a),
        "sum": lambda: weighted(lambda: F.sum(a, axis=1), a),
        "mean": lambda: weighted(lambda: F.mean(a, axis=0), a),
        "reshape": lambda: weighted(lambda: a.reshape(2, 6), a),
        "transpose": lambda: weighted(lambda: a.transpose(1, 0), a),
        "getitem": lambda: weighted(lambda: a[np.array([0, 2, 2]), 1:3], a),
        "concat": lambda: weighted(lambda: F.concat([a, b], axis=1), a, b),
        "stack": lambda: weighted(lambda: F.stack([a, b], axis=0), a, b),
        "pad": lambda: weighted(lambda: F.pad(a, ((1, 0), (0, 2))), a),
        "fit_to": lambda: weighted(lambda: F.fit_to(a, (2, 6), (0, 1)), a),
        "matmul": lambda: weighted(lambda: a @ m, a, m),
        "affine": lambda: weighted(lambda: F.affine(a, m, row[:1] * np.ones(5)), a, m, row),
        "cross_entropy": lambda: (lambda: F.cross_entropy(a @ m, np.array([0, 4, 2])), [a, m]),
    }

    x2, w2, b2 = leaf(2, 3, 7, 9), leaf(4, 3, 3, 3), leaf(4)
    x1, w1 = leaf(2, 3, 12), leaf(2, 3, 5)
    xt, wt, bt = leaf(2, 3, 4, 5), leaf(3, 2, 2, 2), leaf(2)
    xp = leaf(2, 3, 6, 7)
    xb, gb, bb = leaf(4, 3, 5), leaf(3), leaf(3)
    xl, hl, cl, wl, bl = leaf(3, 4), leaf(3, 5), leaf(3, 5), leaf(9, 20), leaf(20)
    checks.update(
        {
            "conv2d_strided": lambda: weighted(
                lambda: conv(x2, w2, b2, stride=(2, 1), dilation=(1, 2), padding=((1, 0), (2, 2))), x2, w2, b2
            ),
            "conv2d": lambda: weighted(
                lambda: conv(x2, w2, b2, dilation=(2, 1), padding=((2, 1), (0, 3))), x2, w2, b2
            ),
            "conv1d": lambda: weighted(lambda: conv(x1, w1, None, dilation=2, padding=((1, 4),)), x1, w1),
            "conv1d_strided": lambda: weighted(lambda: conv(x1, w1, None, stride=2, padding=((1, 0),)), x1, w1),
            "conv_transpose": lambda: weighted(lambda: conv_transpose(xt, wt, bt, 2), xt, wt, bt),
            "max_pool": lambda: weighted(lambda: max_pool(xp, (2, 2), (2, 1), padding=((0, 0), (0, 1))), xp),
            "batch_norm": lambda: weighted(lambda: batch_norm(xb, gb, bb)[0], xb, gb, bb),
            "lstm_cell": lambda: weighted(lambda: lstm_cell(xl, hl, cl, wl, bl), xl, hl, cl, wl, bl),
        }
    )
    return checks


def _warm(module, *inputs):
    """One train-mode pass fills batch-norm running statistics, then freeze."""
    module.train()
    with no_grad():
        module(*inputs)
    module.eval()


def _module_check(module, args: list, inputs: dict[str, Tensor], rng: np.random.Generator):
    """Scalar = sum of every output map weighted by a fixed random projection."""
    first = module(*args)
    projs = [rng.standard_normal(o.shape) for o in (first if isinstance(first, list) else [first])]

    def fn():
        res = module(*args)
        res = res if isinstance(res, list) else [res]
        return sum(((o * p).sum() for o, p in zip(res, projs)), Tensor(0.0))

    tensors = dict(module.named_parameters())
    tensors.update(inputs)
    return fn, tensors


def _composite_checks(rng: np.random.Generator) -> dict[str, Callable[[], tuple]]:
    def masking():
        net = MaskNet(MaskNetConfig(layers=3, channels=4), rng)
        x = Tensor(rng.standard_normal((2, 8, 10)), requires_grad=True)
        _warm(net, x)
        return _module_check(net, [x], {"X": x}, rng)

    def sap():
        pool = Pooling("sap", 6, rng)
        fmap = Tensor(rng.standard_normal((2, 6, 3, 5)), requires_grad=True)
        return _module_check(pool, [fmap], {"map": fmap}, rng)

    def fpm():
        channels = (4, 8, 16, 32)
        pyr = FeaturePyramid(channels, 2, rng)
        # odd sizes exercise the crop-to-smaller merge
        stages = [Tensor(rng.standard_normal((2, c, 9 >> i, 11 >> i)), requires_grad=True) for i, c in enumerate(channels)]
        _warm(pyr, stages)
        return _module_check(pyr, [stages], {f"C{i + 2}": t for i, t in enumerate(stages)}, rng)

    return {"fragment_masking_net": masking, "fragment_sap_stage": sap, "fragment_fpm_merge": fpm}


def _tiny_model_check(rng: np.random.Generator, probes: int = 4, use_se: bool = False, dim: int = 64, frames: int = 16):
    """wm=1/8 2D extractor, FPM, SAP, DNN VAD and synchronizer with soft VAD, T=16.

    The masking net has its own fragment check. Chained in front of the
    extractor its ReLU grid puts a switch within 1e-5 of almost half of all
    probes, so it is left out here by default.
    """
    cfg = SystemConfig(
        speaker=SpeakerNetConfig(
            resnet=ResNetConfig(width_multiplier=1 / 8, feature_dim=dim), n_speakers=3, embed_dim=16
        ),
        use_se=use_se,
        use_vad=True,
        vad=VadNetConfig(arch="dnn", feature_dim=dim),
        sync=SynchronizerConfig(),
    )
    model = SpeakerSystem(cfg, rng)
    x = Tensor(rng.standard_normal((2, dim, frames)))
    xv = Tensor(rng.standard_normal((2, dim, frames)))
    _warm(model, x, xv)
    labels = np.array([0, 2])

    def fn():
        return F.cross_entropy(model(x, xv), labels)

    return fn, dict(model.named_parameters()), probes


def run_suite(seed: int = 0, include_model: bool = True, log: Optional[Callable[[CheckResult], None]] = None):
    """Run every check; returns the results in a fixed order."""
    rng = np.random.default_rng(seed)
    jobs = [(name, build, OP_TOLERANCE, False) for name, build in _op_checks(rng).items()]
    jobs += [(name, build, OP_TOLERANCE, False) for name, build in _composite_checks(rng).items()]
    if include_model:
        # thousands of ReLU units: probes that straddle a switch are detected and set aside
        jobs.append(("full_tiny_model", lambda: _tiny_model_check(rng), MODEL_TOLERANCE, True))
    results = []
    for name, build, tol, skip_kinks in jobs:
        start = time.perf_counter()
        fn, tensors, *rest = build()
        report = check_gradients(fn, tensors, tol, STEP, rest[0] if rest else None, rng=rng, skip_kinks=skip_kinks)
        res = CheckResult(
            name, report.max_rel_error, tol, time.perf_counter() - start, report.probes, report.kinks
        )
        results.append(res)
        if log is not None:
            log(res)
    return results
