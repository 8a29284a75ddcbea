"""Finite-difference gradient checks.

Every check rebuilds its function from numpy inputs in float64, draws any
stochastic quantities once and reuses them, then compares the tape's
gradients with central differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward

STEP = 1e-4
FLOOR = 1e-6


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps zero gradients finite."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    coords: int
    tol: float
    worst: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)


def check(
    name: str,
    fn: Callable[[Sequence[Tensor]], Tensor],
    inputs: Sequence[np.ndarray],
    tol: float = 1e-5,
    step: float = STEP,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> CheckResult:
    """Compare autodiff and central differences for scalar ``fn(inputs)``.

    ``max_coords`` caps the number of coordinates probed per input (chosen at
    random with ``rng``); all are probed otherwise.
    """
    base = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(x.copy(), requires_grad=True) for x in base]
    out = fn(leaves)
    if out.size != 1:
        raise ValueError(f"{name}: check function must return a scalar")
    backward(out)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    worst_info: dict = {}
    total = 0
    for k, x in enumerate(base):
        n = x.size
        coords = np.arange(n) if max_coords is None or max_coords >= n else rng.choice(n, size=max_coords, replace=False)
        for c in coords:
            idx = np.unravel_index(int(c), x.shape)

            def value(delta: float) -> float:
                probe = [b.copy() for b in base]
                probe[k][idx] += delta
                return float(fn([Tensor(p) for p in probe]).data)

            numeric = (value(step) - value(-step)) / (2 * step)
            analytic = float(leaves[k].grad[idx])
            err = float(rel_error(analytic, numeric))
            total += 1
            if err > worst:
                worst = err
                worst_info = {"input": k, "index": tuple(int(i) for i in idx), "analytic": analytic, "numeric": numeric}
    return CheckResult(name, worst, total, tol, worst_info)


# -- suite ------------------------------------------------------------------------

def _away(rng, shape, lo=0.1):
    """Normal draws pushed at least ``lo`` away from zero (keeps kinks out of reach)."""
    x = rng.standard_normal(shape)
    return np.sign(x) * (np.abs(x) + lo)


def _weighted(t: Tensor, w: np.ndarray) -> Tensor:
    return (t * Tensor(w)).sum()


def _suite_cases(rng: np.random.Generator) -> dict:
    """Name -> (scalar function of leaves, inputs, tolerance, max_coords)."""
    from . import nn, optics
    from .inverse import InverseModel, local_project
    from .tensor import ComplexTensor, conv, fft, ops, random as trandom

    def lazy_weights():
        # weights matching the output shape, drawn once on first use
        seed = int(rng.integers(2 ** 31))
        cache = {}

        def get(shape):
            if shape not in cache:
                cache[shape] = np.random.default_rng(seed).standard_normal(shape)
            return cache[shape]
        return get

    def unary(op, x):
        w = lazy_weights()
        return lambda t: _weighted(out := op(t[0]), w(out.shape)), [x]

    def binary(op, a, b):
        w = lazy_weights()
        return lambda t: _weighted(out := op(t[0], t[1]), w(out.shape)), [a, b]

    s = (3, 4)
    pos = rng.random(s) + 0.5
    cases = {
        "add": binary(ops.add, rng.standard_normal(s), rng.standard_normal(s)),
        "sub": binary(ops.sub, rng.standard_normal(s), rng.standard_normal(s)),
        "mul": binary(ops.mul, rng.standard_normal(s), rng.standard_normal(s)),
        "div": binary(ops.div, rng.standard_normal(s), pos),
        "scale": unary(lambda a: ops.scale(a, -2.5), rng.standard_normal(s)),
        "sqrt": unary(ops.sqrt, pos),
        "exp": unary(ops.exp, rng.standard_normal(s)),
        "log": unary(ops.log, pos),
        "relu": unary(ops.relu, _away(rng, s)),
        "clamp_min": unary(lambda a: ops.clamp_min(a, 0.0), _away(rng, s)),
        "abs": unary(ops.absolute, _away(rng, s)),
        "sigmoid": unary(ops.sigmoid, rng.standard_normal(s)),
        "custom_sigmoid": unary(lambda a: ops.custom_sigmoid(3.0, a), rng.standard_normal(s)),
        "sum": unary(lambda a: ops.sum(a, axis=1), rng.standard_normal(s)),
        "mean": unary(lambda a: ops.mean(a, axis=0), rng.standard_normal(s)),
        "reshape": unary(lambda a: ops.reshape(a, (2, 6)), rng.standard_normal(s)),
        "transpose": unary(lambda a: ops.transpose(a, (1, 0)), rng.standard_normal(s)),
        "expand": unary(lambda a: ops.expand(a, (2, 3, 4)), rng.standard_normal((1, 3, 1))),
        "getitem": unary(lambda a: a[1:, ::2], rng.standard_normal(s)),
        "concat": binary(lambda a, b: ops.concat([a, b], axis=1), rng.standard_normal(s), rng.standard_normal(s)),
        "l1_mean": binary(ops.l1_mean, rng.standard_normal(s), rng.standard_normal(s)),
    }
    w = rng.standard_normal((2, 4, 6, 6))
    cases["conv2d"] = (lambda t, w=w: _weighted(conv.conv2d(t[0], t[1], t[2]), w),
                       [rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)])
    w = rng.standard_normal((2, 4, 3, 3))
    cases["conv2d_stride"] = (lambda t, w=w: _weighted(conv.conv2d(t[0], t[1], padding=1, stride=2), w),
                              [rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((4, 3, 3, 3))])
    w = rng.standard_normal((2, 2, 8, 8))
    cases["transpose_conv2d"] = (lambda t, w=w: _weighted(conv.transpose_conv2d(t[0], t[1], 2, t[2]), w),
                                 [rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((3, 2, 2, 2)),
                                  rng.standard_normal(2)])
    w = rng.standard_normal((2, 3, 2, 2))
    for kind in ("avg", "sum", "max"):
        x = rng.permutation(96).reshape(2, 3, 4, 4) / 10.0  # distinct values: unique maxima
        cases[f"{kind}pool"] = unary(lambda a, kind=kind: conv.pool2d(kind, a, 2), x)
    wr, wi = rng.standard_normal((2, 8, 8)), rng.standard_normal((2, 8, 8))

    def spectral(transform):
        def f(t):
            z = transform(ComplexTensor(t[0], t[1]))
            return _weighted(z.real, wr) + _weighted(z.imag, wi)
        return f, [rng.standard_normal((2, 8, 8)), rng.standard_normal((2, 8, 8))]

    cases["fft2"] = spectral(fft.fft2)
    cases["ifft2"] = spectral(fft.ifft2)
    z = rng.standard_normal(s)
    cases["reparam_normal"] = binary(lambda a, b: trandom.reparam_normal(a, b, z=z), rng.standard_normal(s), pos)

    rm, rv = np.zeros(3), np.ones(3)
    w = rng.standard_normal((4, 3, 5, 5))
    cases["batch_norm"] = (lambda t, w=w: _weighted(nn.batch_norm(t[0], t[1], t[2], rm.copy(), rv.copy(), True), w),
                           [rng.standard_normal((4, 3, 5, 5)) * 2 + 1, rng.standard_normal(3), rng.standard_normal(3)])
    w = rng.standard_normal((2, 1, 8, 8))
    cases["local_project"] = (lambda t, w=w: _weighted(local_project(t[0], t[1]), w),
                              [rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((4, 4, 3, 4))])

    cfg = optics.ForwardConfig(k=50.0, sigma_read=2.0, gamma=10.0, n=2)
    zz = (rng.standard_normal((2, 2, 4, 4)), rng.standard_normal((2, 2, 4, 4)))
    w = rng.standard_normal((2, 2, 4, 4))
    cases["detector"] = unary(lambda a: optics.detect_normalized(a, cfg, z=zz, scale_photons=cfg.detector_scale),
                              rng.random((2, 2, 4, 4)) + 0.1)
    w = rng.standard_normal((2, 2, 8, 8))
    cases["encode"] = (lambda t, w=w: _weighted(optics.encode(t[0], t[1]), w),
                       [rng.random((2, 1, 8, 8)), rng.random((2, 8, 8))])
    w = rng.standard_normal((2, 2, 4, 4))

    def fwd(t, w=w):
        bank = optics.ExcitationPatternBank(W=ComplexTensor(t[1], t[2]), m=2.0)
        return _weighted(optics.forward_pass(t[0], bank, cfg, z=zz), w)

    spec = np.fft.fft2(rng.standard_normal((2, 8, 8)))
    cases["forward_pass"] = (fwd, [rng.random((2, 1, 8, 8)), spec.real, spec.imag])

    model = InverseModel(T=2, P=8, n=2, widths=(3, 3, 2, 2, 2), dtype=np.float64, rng=np.random.default_rng(7))

    def end_to_end(t):
        bank = optics.ExcitationPatternBank(W=ComplexTensor(t[1], t[2]), m=2.0)
        y = optics.forward_pass(t[0], bank, cfg, z=zz)
        recon = model.recon(model.expand(local_project(y, t[3])))
        return ops.l1_mean(recon, Tensor(target))

    target = rng.random((2, 1, 8, 8))
    cases["end_to_end"] = (end_to_end, [rng.random((2, 1, 8, 8)), spec.real, spec.imag,
                                        rng.standard_normal((4, 4, 2, 4))])
    out = {name: (fn, inputs, 1e-5, None) for name, (fn, inputs) in cases.items()}
    out["end_to_end"] = (*cases["end_to_end"], 1e-4, 24)
    return out


SUITE_NAMES = (
    "add", "sub", "mul", "div", "scale", "sqrt", "exp", "log", "relu", "clamp_min", "abs", "sigmoid",
    "custom_sigmoid", "sum", "mean", "reshape", "transpose", "expand", "getitem", "concat", "l1_mean",
    "conv2d", "conv2d_stride", "transpose_conv2d", "avgpool", "sumpool", "maxpool", "fft2", "ifft2",
    "reparam_normal", "batch_norm", "local_project", "detector", "encode", "forward_pass", "end_to_end",
)


def run_suite(names: Sequence[str] | None = None, seed: int = 0, tol: float | None = None) -> list[CheckResult]:
    """Run the finite-difference suite (all operators unless ``names`` is given)."""
    cases = _suite_cases(np.random.default_rng(seed))
    selected = list(names) if names else list(SUITE_NAMES)
    unknown = [n for n in selected if n not in cases]
    if unknown:
        raise KeyError(f"unknown gradcheck case(s): {', '.join(unknown)}")
    results = []
    for name in selected:
        fn, inputs, case_tol, max_coords = cases[name]
        results.append(check(name, fn, inputs, tol=tol if tol is not None else case_tol, max_coords=max_coords,
                             rng=np.random.default_rng(seed)))
    return results
