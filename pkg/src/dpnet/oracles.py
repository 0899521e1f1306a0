"""Gradient-check cases for every differentiable op and for the full joint loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import GradcheckReport, Rng, Tensor, batchnorm2d, concat, conv2d, gradcheck, pad2d, upsample_nearest
from .autodiff.functional import BatchNormState, conv2d_unfolded
from .config import Config
from .losses import Batch, focal_loss, enhancement_loss, joint_loss, match_anchors, smooth_l1, ssim_tensor, AnchorTargets
from .model import DPNetParams, build_params

Case = Callable[[Rng], tuple[Callable[[], Tensor], list[Tensor]]]


def _leaf(rng: Rng, shape, lo=-1.0, hi=1.0, name=None) -> Tensor:
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True, name=name)


def _away_from_zero(rng: Rng, shape, gap=0.1) -> Tensor:
    x = rng.uniform(gap, 1.0, shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(x, requires_grad=True)


def _probe(rng: Rng, out_shape) -> Tensor:
    """Random weights that turn a tensor output into a scalar with a generic gradient."""
    return Tensor(rng.normal(size=out_shape))


def _scalar(build: Callable[..., Tensor], *leaves: Tensor, rng: Rng):
    with_shape = build(*leaves)
    w = _probe(rng, with_shape.shape)
    return (lambda: (build(*leaves) * w).sum()), list(leaves)


def _unary(fn, lo=-1.0, hi=1.0, shape=(3, 4)) -> Case:
    return lambda rng: _scalar(fn, _leaf(rng, shape, lo, hi), rng=rng)


def _binary(fn, shapes=((3, 4), (3, 4)), lo=-1.0, hi=1.0) -> Case:
    return lambda rng: _scalar(fn, *(_leaf(rng, s, lo, hi) for s in shapes), rng=rng)


def _kinked(fn, shape=(3, 4)) -> Case:
    return lambda rng: _scalar(fn, _away_from_zero(rng, shape), rng=rng)


def _conv(k, stride, padding, bias=True, unfolded=False) -> Case:
    def case(rng):
        x = _leaf(rng, (2, 3, 7, 6))
        w = _leaf(rng, (4, 3, k, k))
        if unfolded:
            return _scalar(lambda x, w: conv2d_unfolded(x, w, stride, padding), x, w, rng=rng)
        if bias:
            b = _leaf(rng, (4,))
            return _scalar(lambda x, w, b: conv2d(x, w, b, stride, padding), x, w, b, rng=rng)
        return _scalar(lambda x, w: conv2d(x, w, None, stride, padding), x, w, rng=rng)

    return case


def _conv_double_backward(rng: Rng):
    from .autodiff import grad

    x, w = _leaf(rng, (1, 2, 6, 5)), _leaf(rng, (3, 2, 3, 3))
    probe = _probe(rng, (1, 3, 3, 3))

    def f():
        out = (conv2d(x, w, None, 2, 1) * probe).sum()
        gx, gw = grad(out, [x, w], create_graph=True)
        return (gx * gx).sum() + (gw * gw).sum() * 0.5 + (gx.sum() * gw.sum())

    return f, [x, w]


def _batchnorm(training: bool) -> Case:
    def case(rng):
        x = _leaf(rng, (2, 3, 4, 4))
        g, b = _leaf(rng, (3,), 0.5, 1.5), _leaf(rng, (3,))
        state = BatchNormState(rng.uniform(-0.2, 0.2, 3), rng.uniform(0.5, 1.5, 3))
        return _scalar(lambda x, g, b: batchnorm2d(x, g, b, state, training, update_stats=False), x, g, b, rng=rng)

    return case


def _detection_targets(rng: Rng, n_anchor=12):
    anchors = np.stack([np.array([i % 4, i // 4, i % 4 + 3, i // 4 + 2.5]) * 2.0 for i in range(n_anchor)])
    gts = np.array([[0.5, 0.0, 6.5, 5.0], [2.0, 3.0, 9.0, 8.0]])
    t = match_anchors(anchors, gts, np.array([0, 1]), 0.5, 0.4)
    return AnchorTargets.stack([t])


def _focal(rng: Rng):
    targets = _detection_targets(rng)
    logits = _leaf(rng, (1, 12, 2), -2.0, 2.0)
    return (lambda: focal_loss(logits, targets, 0.25, 2.0)), [logits]


def _smooth_l1(rng: Rng):
    targets = _detection_targets(rng)
    deltas = _leaf(rng, (1, 12, 4), -3.0, 3.0)
    return (lambda: smooth_l1(deltas, targets, 1 / 9)), [deltas]


def _ssim(rng: Rng):
    # Only the central patch varies: valid 11×11 windows weight the image corners
    # near 1e-5, where central differences measure roundoff rather than the gradient.
    patch = _leaf(rng, (1, 3, 4, 4), 0.2, 0.8)
    frame = rng.uniform(0, 1, (1, 3, 12, 12))
    frame[:, :, 4:8, 4:8] = 0.0
    frame = Tensor(frame)
    y = Tensor(rng.uniform(0, 1, (1, 3, 12, 12)))
    return (lambda: ssim_tensor(pad2d(patch, 4) + frame, y)), [patch]


def _enh_loss(rng: Rng):
    x = _leaf(rng, (2, 3, 12, 12), 0.0, 1.0)
    ref = rng.uniform(0, 1, (2, 3, 12, 12))
    return (lambda: enhancement_loss(x, ref, "l1+ssim", 0.5)), [x]


OP_CASES: dict[str, Case] = {
    "add": _binary(lambda a, b: a + b, ((3, 4), (1, 4))),
    "sub": _binary(lambda a, b: a - b, ((3, 1), (3, 4))),
    "mul": _binary(lambda a, b: a * b, ((3, 4), (3, 4))),
    "div": _binary(lambda a, b: a / b, ((3, 4), (3, 4)), 0.5, 2.0),
    "matmul": _binary(lambda a, b: a @ b, ((3, 5), (5, 2))),
    "neg": _unary(lambda a: -a),
    "exp": _unary(lambda a: a.exp()),
    "log": _unary(lambda a: a.log(), 0.2, 2.0),
    "pow": _unary(lambda a: a**1.5, 0.2, 2.0),
    "rsqrt": _unary(lambda a: a**-0.5, 0.2, 2.0),
    "abs": _kinked(lambda a: a.abs()),
    "relu": _kinked(lambda a: a.relu()),
    "sigmoid": _unary(lambda a: a.sigmoid(), -4.0, 4.0),
    "clip": _kinked(lambda a: a.clip(-0.5, 0.5)),
    "sum": _unary(lambda a: a.sum(axis=1, keepdims=True)),
    "mean": _unary(lambda a: a.mean(axis=0)),
    "reshape": _unary(lambda a: a.reshape(4, 3)),
    "transpose": _unary(lambda a: a.transpose(1, 0)),
    "expand": _unary(lambda a: a.expand((2, 3, 4)), shape=(1, 3, 1)),
    "slice": _unary(lambda a: a[1:, ::2]),
    "concat": _binary(lambda a, b: concat([a, b], axis=1), ((2, 3), (2, 2))),
    "pad2d": _unary(lambda a: pad2d(a, 1), shape=(1, 2, 3, 3)),
    "upsample_nearest": _unary(lambda a: upsample_nearest(a, 2), shape=(1, 2, 3, 3)),
    "conv2d_k3_s1_p1": _conv(3, 1, 1),
    "conv2d_k5_s1_p2": _conv(5, 1, 2),
    "conv2d_k3_s2_p1": _conv(3, 2, 1),
    "conv2d_k1_s1_p0": _conv(1, 1, 0, bias=False),
    "conv2d_unfolded_k3_s2": _conv(3, 2, 1, unfolded=True),
    "conv2d_double_backward": _conv_double_backward,
    "batchnorm_train": _batchnorm(True),
    "batchnorm_eval": _batchnorm(False),
    "focal_loss": _focal,
    "smooth_l1": _smooth_l1,
    "ssim": _ssim,
    "enhancement_loss": _enh_loss,
}
HIGHER_ORDER = {"conv2d_double_backward"}
LOSS_CASES = {"focal_loss", "smooth_l1", "ssim", "enhancement_loss"}


def check_op(name: str, seed: int = 0) -> GradcheckReport:
    f, leaves = OP_CASES[name](Rng((seed, sum(name.encode()))))
    return gradcheck(f, leaves, higher_order=name in HIGHER_ORDER)


# ------------------------------------------------------------ joint loss
def joint_batch(size: int = 16) -> Batch:
    """Two-image batch with three boxes over three classes."""
    rng = Rng(11)
    s = size / 16
    return Batch(
        rng.uniform(0, 1, (2, 3, size, size)),
        rng.uniform(0, 1, (2, 3, size, size)),
        [np.array([[2, 2, 10, 12]]) * s, np.array([[4, 1, 15, 9], [0, 8, 7, 16]]) * s],
        [np.array([1]), np.array([0, 2])],
    )


def well_conditioned(params: DPNetParams, seed: int = 0) -> None:
    """Redraw parameters so no gradient is tiny compared with finite-difference roundoff.

    At initialization the head output layers are nearly zero, which leaves
    gradients of order 1e-8 in some tensors; relative error there measures
    roundoff, not the backward pass.
    """
    rng = Rng((seed, 99))
    for name, t in sorted(params.named().items()):
        if t.ndim == 4:
            bound = np.sqrt(6.0 / (t.shape[1] * t.shape[2] * t.shape[3]))
            t.data[...] = rng.uniform(-bound, bound, t.shape)
        elif name.endswith(".gamma"):
            t.data[...] = rng.uniform(0.5, 1.5, t.shape)
        else:
            t.data[...] = rng.uniform(-0.1, 0.1, t.shape)


@dataclass
class JointCheck:
    report: GradcheckReport
    num_params: int


def check_joint_loss(cfg: Config | None = None, per_tensor: int | None = 24, seed: int = 0, size: int = 16) -> JointCheck:
    cfg = cfg or Config()
    params = build_params(cfg.model, seed, np.float64)
    well_conditioned(params, seed)
    batch = joint_batch(size)
    named = params.named()
    for n, t in named.items():
        t.name = n

    def f():
        return joint_loss(batch, params, cfg.model, cfg.loss, update_stats=False).total

    names = sorted(named)
    report = gradcheck(f, [named[n] for n in names], h=1e-4, max_elements=per_tensor, rng=Rng((seed, 5)))
    return JointCheck(report, params.count())


def gradcheck_table(tol: float = 1e-4, joint_per_tensor: int | None = 24, seed: int = 0) -> list[tuple[str, float, int, int, bool]]:
    """(name, max rel err, checked, skipped kinks, passed) per op plus the joint loss."""
    rows = []
    for name in OP_CASES:
        r = check_op(name, seed)
        rows.append((name, r.max_rel_err, r.checked, r.skipped_kinks, r.passed(tol)))
    j = check_joint_loss(per_tensor=joint_per_tensor, seed=seed).report
    rows.append(("joint_loss", j.max_rel_err, j.checked, j.skipped_kinks, j.passed(tol)))
    return rows


# ------------------------------------------------------------ hypergradient
def tiny_problem(seed: int = 3):
    """8×8 instance with a 4-channel shared module and one class, small enough for brute force."""
    from .trainer import Problem

    cfg = Config().replace(
        **{
            "model.shared_channels": 4, "model.enh_channels": 4, "model.det_stem_channels": 4,
            "model.det_stage_channels": (4, 4, 4), "model.fpn_channels": 4, "model.head_channels": 4,
            "model.head_convs": 1, "model.num_classes": 1, "model.anchor_sizes": (4.0, 8.0, 16.0),
        }
    )
    params = build_params(cfg.model, seed)

    def batch(s):
        r = Rng((seed, s))
        return Batch(r.uniform(0, 1, (2, 3, 8, 8)), r.uniform(0, 1, (2, 3, 8, 8)),
                     [np.array([[1.0, 1, 6, 7]]), np.array([[0.0, 2, 5, 8]])], [np.array([0]), np.array([0])])

    return Problem(params, cfg.model, cfg.loss), batch(1), batch(2)


def upper_objective(problem, train: Batch, val: Batch, eta: float) -> Tensor:
    """L^val after one plain gradient step on L^tr, recomputed from scratch at the current shared weights."""
    from .autodiff import grad, no_grad

    p, mc, lc = problem.params, problem.mcfg, problem.lcfg
    omega = p.omega()
    saved = {n: t.data for n, t in omega.items()}
    gs = grad(joint_loss(train, p, mc, lc, update_stats=False).total, list(omega.values()))
    try:
        for (n, t), g in zip(omega.items(), gs):
            t.data = saved[n] - eta * g.data
        with no_grad():
            return joint_loss(val, p, mc, lc, update_stats=False).total
    finally:
        for n, t in omega.items():
            t.data = saved[n]


def check_hypergradient(problem, train: Batch, val: Batch, eta: float, analytic: dict[str, np.ndarray],
                        h: float = 1e-6) -> GradcheckReport:
    """Central differences of ``upper_objective`` over every shared element against ``analytic``."""
    from .autodiff.gradcheck import _evaluate, relative_error

    def f():
        return upper_objective(problem, train, val, eta)

    _, base_sig = _evaluate(f, higher_order=True)
    worst_err, worst, checked, skipped, per_leaf = 0.0, None, 0, 0, {}
    for name, t in sorted(problem.params.shared.tensors().items()):
        flat, ana = t.data.reshape(-1), analytic[name].reshape(-1)
        leaf_err = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp, sp = _evaluate(f, higher_order=True)
            flat[i] = orig - h
            fm, sm = _evaluate(f, higher_order=True)
            flat[i] = orig
            if sp != base_sig or sm != base_sig:
                skipped += 1
                continue
            err = relative_error(float(ana[i]), (fp - fm) / (2 * h))
            checked += 1
            leaf_err = max(leaf_err, err)
            if err > worst_err:
                worst_err, worst = err, (name, i)
        per_leaf[name] = leaf_err
    return GradcheckReport(worst_err, checked, skipped, worst, per_leaf)
