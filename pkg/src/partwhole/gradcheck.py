"""Central finite-difference checks for the tensor engine and the model blocks.

Every check runs in float64. The error of a case is the normwise relative
error ``|g_analytic - g_numeric| / max(|g_analytic|, |g_numeric|)`` over the
checked coordinates of all inputs.

Central differences only approximate the gradient where the function is
smooth at the scale of the step. A case whose forward and backward one-sided
differences disagree (a ReLU or max switch inside the probe, or a near-zero
quaternion norm) is rejected and the next random case is drawn instead. The
rejection test uses function values only, never the analytic gradient.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor

STEP = 1e-5            # near the cube root of float64 epsilon, the usual central-difference optimum
PRIMITIVE_TOL = 1e-4
COMPOSITE_TOL = 1e-3
SMOOTHNESS_TOL = 0.1      # allowed |forward - backward| slope gap, relative to the central slope
MAX_DRAWS_FACTOR = 5


class NonSmoothCase(ArithmeticError):
    """The finite-difference probe straddles a kink or a region of extreme curvature."""


def _compare(analytic, numeric, one_sided_gap) -> float:
    a, n, gap = np.array(analytic), np.array(numeric), np.array(one_sided_gap)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    if np.any(gap > SMOOTHNESS_TOL * np.abs(n) + 1e-6 * scale):
        raise NonSmoothCase(f"one-sided differences disagree by up to {gap.max():.3g}")
    return float(np.linalg.norm(a - n) / scale)


@dataclass
class CheckResult:
    name: str
    kind: str
    seeds: int
    max_error: float
    tolerance: float
    rejected: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.max_error < self.tolerance)


def gradient_error(fn: Callable[..., Tensor], inputs: list[np.ndarray], h: float = STEP,
                   max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Normwise relative error between backprop and central differences of ``sum(fn(*inputs))``.

    With ``max_coords`` only that many randomly chosen coordinates per input are perturbed.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    tensors = [Tensor(x, requires_grad=True) for x in inputs]
    out = fn(*tensors).sum()
    out.backward()
    base = float(out.item())
    analytic, numeric, gap = [], [], []
    for x, t in zip(inputs, tensors):
        grad = np.zeros_like(x) if t.grad is None else t.grad
        coords = np.arange(x.size)
        if max_coords is not None and x.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(x.size, max_coords, replace=False)
        flat = x.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            with ag.no_grad():
                up = float(fn(*[Tensor(v) for v in inputs]).sum().item())
            flat[c] = orig - h
            with ag.no_grad():
                down = float(fn(*[Tensor(v) for v in inputs]).sum().item())
            flat[c] = orig
            numeric.append((up - down) / (2 * h))
            gap.append(abs((up - base) - (base - down)) / h)
            analytic.append(grad.reshape(-1)[c])
    return _compare(analytic, numeric, gap)


def parameter_error(module, loss_fn: Callable[[], Tensor], count: int, rng: np.random.Generator,
                    h: float = STEP) -> float:
    """Same metric over ``count`` randomly chosen scalar parameters of ``module``."""
    params = module.parameters()
    module.zero_grad()
    out = loss_fn()
    out.backward()
    base = float(out.item())
    sizes = np.array([p.size for p in params])
    picks = rng.choice(int(sizes.sum()), size=min(count, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    analytic, numeric, gap = [], [], []
    for flat_index in picks:
        k = int(np.searchsorted(offsets, flat_index, side="right") - 1)
        p = params[k]
        i = flat_index - offsets[k]
        flat = p.data.reshape(-1)
        orig = flat[i]
        with ag.no_grad():
            flat[i] = orig + h
            up = float(loss_fn().item())
            flat[i] = orig - h
            down = float(loss_fn().item())
        flat[i] = orig
        numeric.append((up - down) / (2 * h))
        gap.append(abs((up - base) - (base - down)) / h)
        analytic.append(0.0 if p.grad is None else p.grad.reshape(-1)[i])
    module.zero_grad()
    return _compare(analytic, numeric, gap)


# -- primitive cases: rng -> (fn, inputs) ---------------------------------------------
def _spread(rng, shape):
    """Values with well separated magnitudes so max/relu stay away from kinks."""
    n = int(np.prod(shape))
    base = rng.permutation(n) / n - 0.5 + 0.05
    return (base + rng.uniform(-0.2, 0.2) / n).reshape(shape) * 2


def _primitive_cases() -> dict[str, Callable]:
    def shape(rng, lo=2, hi=4, rank=None):
        rank = rank or int(rng.integers(1, 4))
        return tuple(int(v) for v in rng.integers(lo, hi + 1, size=rank))

    def add(rng):
        s = shape(rng)
        return ag.add, [rng.standard_normal(s), rng.standard_normal(s[1:] or s)]

    def sub(rng):
        s = shape(rng)
        return ag.sub, [rng.standard_normal(s), rng.standard_normal((1,) + s[1:])]

    def mul(rng):
        s = shape(rng)
        return ag.mul, [rng.standard_normal(s), rng.standard_normal(s)]

    def div(rng):
        s = shape(rng)
        return ag.div, [rng.standard_normal(s), rng.uniform(0.5, 2.0, s) * rng.choice([-1, 1], s)]

    def matmul(rng):
        b, n, k, m = (int(v) for v in rng.integers(2, 5, size=4))
        return ag.matmul, [rng.standard_normal((b, n, k)), rng.standard_normal((k, m))]

    def relu(rng):
        return ag.relu, [_spread(rng, shape(rng))]

    def tanh(rng):
        return ag.tanh, [rng.standard_normal(shape(rng))]

    def exp(rng):
        return ag.exp, [rng.standard_normal(shape(rng))]

    def sqrt(rng):
        return ag.sqrt, [rng.uniform(0.5, 2.0, shape(rng))]

    def softmax(rng):
        s = shape(rng, rank=int(rng.integers(2, 4)))
        axis = int(rng.integers(len(s)))
        w = rng.standard_normal(s)
        return (lambda x: ag.softmax(x, axis=axis) * Tensor(w)), [rng.standard_normal(s)]

    def softmax_masked(rng):
        b, n = int(rng.integers(2, 4)), int(rng.integers(3, 6))
        mask = rng.random((b, n)) < 0.7
        mask[:, 0] = True
        w = rng.standard_normal((b, n))
        return (lambda x: ag.softmax(x, axis=-1, mask=mask) * Tensor(w)), [rng.standard_normal((b, n))]

    def concat(rng):
        s = shape(rng, rank=2)
        axis = int(rng.integers(2))
        other = list(s)
        other[axis] += 1
        w = rng.standard_normal(tuple(s[i] + other[i] if i == axis else s[i] for i in range(2)))
        return (lambda a, b: ag.concat([a, b], axis=axis) * Tensor(w)), [rng.standard_normal(s),
                                                                           rng.standard_normal(tuple(other))]

    def slice_(rng):
        s = shape(rng, lo=3, hi=5, rank=2)
        w = rng.standard_normal((s[0] - 1, 2))
        return (lambda x: x[1:, ::2][:, :2] * Tensor(w)), [rng.standard_normal(s)]

    def gather(rng):
        s = shape(rng, lo=3, hi=5, rank=2)
        idx = rng.integers(0, s[0], size=5)
        w = rng.standard_normal((5, s[1]))
        return (lambda x: x[idx] * Tensor(w)), [rng.standard_normal(s)]

    def reshape(rng):
        s = shape(rng, rank=3)
        w = rng.standard_normal((s[0], s[1] * s[2]))
        return (lambda x: x.reshape(s[0], s[1] * s[2]) * Tensor(w)), [rng.standard_normal(s)]

    def transpose(rng):
        s = shape(rng, rank=3)
        axes = tuple(int(v) for v in rng.permutation(3))
        w = rng.standard_normal(tuple(s[a] for a in axes))
        return (lambda x: ag.transpose(x, axes) * Tensor(w)), [rng.standard_normal(s)]

    def sum_(rng):
        s = shape(rng, rank=3)
        axis = int(rng.integers(3))
        w = rng.standard_normal(tuple(v for i, v in enumerate(s) if i != axis))
        return (lambda x: ag.sum(x, axis=axis) * Tensor(w)), [rng.standard_normal(s)]

    def mean(rng):
        s = shape(rng, rank=3)
        axis = int(rng.integers(3))
        w = rng.standard_normal(tuple(v for i, v in enumerate(s) if i != axis))
        return (lambda x: ag.mean(x, axis=axis) * Tensor(w)), [rng.standard_normal(s)]

    def max_(rng):
        s = shape(rng, rank=3)
        axis = int(rng.integers(3))
        w = rng.standard_normal(tuple(v for i, v in enumerate(s) if i != axis))
        return (lambda x: ag.max(x, axis=axis) * Tensor(w)), [_spread(rng, s)]

    def layer_norm(rng):
        s = shape(rng, lo=3, hi=6, rank=2)
        w = rng.standard_normal(s)
        return (lambda x, g, b: ag.layer_norm(x, g, b) * Tensor(w)), [
            rng.standard_normal(s), rng.standard_normal(s[-1]), rng.standard_normal(s[-1])]

    def broadcast(rng):
        s = shape(rng, rank=2)
        w = rng.standard_normal((3,) + s)
        return (lambda x: ag.broadcast_to(x, (3,) + s) * Tensor(w)), [rng.standard_normal((1, s[1]))]

    def chamfer(rng):
        from .training import chamfer as cd
        r, n, m = 2, int(rng.integers(3, 8)), int(rng.integers(3, 8))
        return (lambda x, y: cd(x, y)), [rng.standard_normal((r, n, 3)), rng.standard_normal((r, m, 3))]

    return {"add": add, "sub": sub, "mul": mul, "div": div, "matmul": matmul, "relu": relu, "tanh": tanh,
            "exp": exp, "sqrt": sqrt, "softmax": softmax, "softmax_masked": softmax_masked, "concat": concat,
            "slice": slice_, "gather": gather, "reshape": reshape, "transpose": transpose, "sum": sum_,
            "mean": mean, "max": max_, "layer_norm": layer_norm, "broadcast": broadcast, "chamfer": chamfer}


PRIMITIVES = _primitive_cases()


# -- composite cases: rng -> error ----------------------------------------------------------
def _small_config(**kw):
    from .model import ModelConfig
    base = dict(feat_dim=8, num_heads=2, super_encoder_layers=1, part_encoder_layers=1, instance_enc_dim=4,
                noise_dim=3, head_hidden=(8, 8), pointnet_hidden=(4, 6), ff_dim=8, max_parts=8)
    base.update(kw)
    return ModelConfig(**base)


def _toy_shape(rng, n_parts=2, d=6):
    from .geometry import random_quaternion
    pts = rng.uniform(-0.5, 0.5, size=(n_parts, d, 3))
    t = rng.uniform(-0.5, 0.5, size=(n_parts, 3))
    q = random_quaternion(rng, n_parts)
    return pts, t, q


def _pointnet(rng) -> float:
    from .model import PointNet
    net = PointNet((3, 5, 6), rng, np.float64)
    w = rng.standard_normal(6)
    fn = lambda x: net(x) * Tensor(w)
    pts = rng.uniform(-1, 1, size=(2, 7, 3))
    return max(gradient_error(fn, [pts]),
               parameter_error(net, lambda: fn(Tensor(pts)).sum(), 20, rng))


def _attention(kind: str):
    def case(rng) -> float:
        from .autograd import TransformerLayer
        dim, b, n, m = 8, 2, 4, 3
        layer = TransformerLayer(dim, 2, rng, ff_dim=8, qk_extra=5 if kind == "cond" else 0, dtype=np.float64)
        mask = np.ones((b, m if kind == "cross" else n), bool)
        mask[1, -1] = False
        w = rng.standard_normal((b, n, dim))
        mem = rng.standard_normal((b, m, dim))
        cond = rng.standard_normal((b, n, 5))

        def fn(x, extra):
            if kind == "cross":
                return layer(x, memory=extra, key_mask=mask) * Tensor(w)
            if kind == "cond":
                return layer(x, key_mask=mask, cond=extra) * Tensor(w)
            return (layer(x, key_mask=mask) + 0 * extra.sum()) * Tensor(w)

        x = rng.standard_normal((b, n, dim))
        extra = mem if kind == "cross" else cond
        return max(gradient_error(fn, [x, extra]),
                   parameter_error(layer, lambda: fn(Tensor(x), Tensor(extra)).sum(), 20, rng))
    return case


def _pose_head(rng) -> float:
    from .model import PoseHead
    head = PoseHead(6, (8, 8), rng, np.float64)
    wt, wq = rng.standard_normal((3, 4, 3)), rng.standard_normal((3, 4, 4))

    def fn(x):
        t, q = head(x)
        return (t * Tensor(wt)).sum() + (q * Tensor(wq)).sum()

    x = rng.standard_normal((3, 4, 6))
    return max(gradient_error(fn, [x]), parameter_error(head, lambda: fn(Tensor(x)), 20, rng))


def _total_loss(rng) -> float:
    from .training import LossWeights, total_loss
    pts, gt_t, gt_q = _toy_shape(rng)
    t0 = gt_t + 0.2 * rng.standard_normal(gt_t.shape)
    q0 = gt_q + 0.3 * rng.standard_normal(gt_q.shape)
    q0 /= np.linalg.norm(q0, axis=1, keepdims=True)
    fn = lambda t, q: total_loss(t, q, gt_t, gt_q, pts, None, LossWeights()).total
    return gradient_error(fn, [t0, q0])


def _model(use_super: bool):
    def case(rng) -> float:
        from .hierarchy import build_super_parts
        from .model import AssemblyModel, make_batch
        from .training import LossWeights, total_loss
        cfg = _small_config(use_super_encoder=use_super, seed=int(rng.integers(1 << 30)))
        model = AssemblyModel(cfg, dtype=np.float64)
        pts, gt_t, gt_q = _toy_shape(rng)
        batch = make_batch([pts], [build_super_parts(list(pts))], cfg, dtype=np.float64)
        noise = rng.standard_normal((1, cfg.noise_dim))

        def loss():
            out = model(batch, noise)
            return total_loss(out.part_t, out.part_q, gt_t[None], gt_q[None], batch.points, batch.part_mask,
                              LossWeights()).total.sum()

        return parameter_error(model, loss, 20, rng)
    return case


COMPOSITES = {
    "pointnet": _pointnet,
    "self_attention": _attention("self"),
    "cross_attention": _attention("cross"),
    "pose_attention": _attention("cond"),
    "pose_head": _pose_head,
    "total_loss": _total_loss,
    "model_full": _model(True),
    "model_no_super": _model(False),
}


def _run_cases(case: Callable[[np.random.Generator], float], seeds: int, seed: int, stream: int):
    """Worst error over ``seeds`` smooth cases, plus the number of rejected draws."""
    worst, accepted, rejected = 0.0, 0, 0
    with ag.default_dtype(np.float64):
        while accepted < seeds:
            if accepted + rejected >= MAX_DRAWS_FACTOR * seeds:
                return float("inf"), rejected
            rng = np.random.default_rng([seed, stream + accepted + rejected])
            try:
                worst = max(worst, case(rng))
                accepted += 1
            except NonSmoothCase:
                rejected += 1
    return worst, rejected


def check_primitive(name: str, seeds: int = 20, seed: int = 0) -> CheckResult:
    worst, rejected = _run_cases(lambda rng: gradient_error(*PRIMITIVES[name](rng)), seeds, seed, 0)
    return CheckResult(name, "primitive", seeds, worst, PRIMITIVE_TOL, rejected)


def check_composite(name: str, seeds: int = 20, seed: int = 0) -> CheckResult:
    worst, rejected = _run_cases(COMPOSITES[name], seeds, seed, 1000)
    return CheckResult(name, "composite", seeds, worst, COMPOSITE_TOL, rejected)


def run_suite(seed: int = 0, seeds: int = 20, names: list[str] | None = None) -> list[CheckResult]:
    results = []
    for name in PRIMITIVES:
        if names is None or name in names:
            results.append(check_primitive(name, seeds, seed))
    for name in COMPOSITES:
        if names is None or name in names:
            results.append(check_composite(name, seeds, seed))
    return results


def format_report(results: list[CheckResult]) -> str:
    lines = [f"{'check':<18} {'kind':<10} {'seeds':>5} {'rejected':>8} {'max_rel_err':>12} {'tol':>8}  status"]
    for r in results:
        lines.append(f"{r.name:<18} {r.kind:<10} {r.seeds:>5} {r.rejected:>8} {r.max_error:>12.3e} {r.tolerance:>8.0e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
