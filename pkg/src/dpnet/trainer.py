"""Cooperative bilevel training.

Each iteration takes one Adam step on the subnet parameters ω (detection and
enhancement) against the training loss, then one Adam step on the shared
module u against the validation loss through the hypergradient

    dL^val/du = ∂_u L^val(ω^t, u) - η ∇_u( ∇_ω L^tr(ω^{t-1}, u) · v ),   v = ∂L^val/∂ω |_{ω^t}

The first term alone is ``first_order``. ``unrolled_exact`` adds the second
term by differentiating through one plain gradient step of size η;
``unrolled_fd`` replaces that Hessian-vector product with central differences
of ∇_u L^tr at ω^{t-1} ± εv, ε = 0.01/‖v‖.
"""
from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .autodiff import Rng, Tensor, grad, no_grad
from .boxes import AnchorSet
from .checkpoint import Checkpoint, atomic_write, check_shapes, load_checkpoint, save_checkpoint
from .config import Config, LossConfig, ModelConfig, TrainerConfig
from .datasynth import Dataset, Sample, check_disjoint
from .errors import CheckpointError, ConfigError, NumericError, ResourceGuardError, UsageError
from .evaluation import evaluate, make_batch
from .losses import Batch, LossBreakdown, task_losses
from .model import DPNet, DPNetParams, shared_forward

UPPER_MODES = ("first_order", "unrolled_exact", "unrolled_fd")
CHECKPOINT_NAME = "checkpoint.dpnt"
LOG_NAME = "log.tsv"
LOG_COLUMNS = (
    "epoch", "lr", "lr_upper", "train_l_det", "train_l_enh",
    "test_l_det_cls", "test_l_det_box", "test_l_det", "test_l_enh",
    "test_map", "test_psnr_degraded", "test_psnr_enhanced", "test_ssim", "psnr_gain_fraction", "seconds",
)


def lr_at(base: float, decay: float, epoch: int) -> float:
    """Learning rate used during the pass that follows ``epoch`` completed epochs."""
    return base * decay**epoch


# ------------------------------------------------------------------- Adam
@dataclass
class TrainState:
    t: int = 0
    epoch: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    lr_low: float = 0.0
    lr_up: float = 0.0

    @classmethod
    def fresh(cls, params: DPNetParams, cfg: TrainerConfig) -> "TrainState":
        named = params.named()
        return cls(
            m={n: np.zeros_like(t.data) for n, t in named.items()},
            v={n: np.zeros_like(t.data) for n, t in named.items()},
            lr_low=cfg.lr,
            lr_up=cfg.lr_upper,
        )


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray | None],
    state: TrainState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam on ``params`` only, in place, using iteration ``state.t`` (>= 1)."""
    if state.t < 1:
        raise UsageError("adam_step needs state.t >= 1")
    for name, g in grads.items():
        if g is not None and not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name!r} at iteration {state.t}")
    c1 = 1 - beta1**state.t
    c2 = 1 - beta2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        dt = p.data.dtype
        m = state.m[name]
        v = state.v[name]
        m *= dt.type(beta1)
        m += dt.type(1 - beta1) * g
        v *= dt.type(beta2)
        v += dt.type(1 - beta2) * (g * g)
        step = (m / dt.type(c1)) / (np.sqrt(v / dt.type(c2)) + dt.type(eps))
        p.data -= dt.type(lr) * step


def _fingerprint(tensors: Mapping[str, Tensor]) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(tensors[name].data.tobytes())
    return h.digest()


class _Untouched:
    """Raise if the guarded partition changes inside the block."""

    def __init__(self, tensors: Mapping[str, Tensor], what: str):
        self.tensors, self.what = tensors, what

    def __enter__(self):
        self.before = _fingerprint(self.tensors)

    def __exit__(self, exc_type, *_):
        if exc_type is None and _fingerprint(self.tensors) != self.before:
            raise UsageError(f"{self.what} was modified")


# -------------------------------------------------------------- objectives
@dataclass
class Problem:
    """Everything the two losses need besides the parameters."""

    params: DPNetParams
    mcfg: ModelConfig
    lcfg: LossConfig
    anchors: AnchorSet | None = None

    @property
    def dtype(self):
        return self.params.shared["shared.conv1.weight"].dtype

    def loss(self, batch: Batch, omega: Mapping[str, Tensor], features: Tensor | None = None,
             update_stats: bool = False, split_tag: str = "train") -> LossBreakdown:
        p = self.params
        if features is None:
            features = shared_forward(Tensor(batch.degraded.astype(self.dtype)), p.shared, self.mcfg)
        det = None if p.det is None else {n: omega[n] for n in p.det}
        enh = None if p.enh is None else {n: omega[n] for n in p.enh}
        return task_losses(features, batch, det, enh, p.bn, self.mcfg, self.lcfg, self.anchors, split_tag, update_stats)


def lower_step(batch: Batch, problem: Problem, state: TrainState, tcfg: TrainerConfig) -> LossBreakdown:
    """One Adam step on ω against L^tr with u fixed (features computed without a graph)."""
    p = problem.params
    omega = p.omega()
    with _Untouched(p.shared.tensors(), "shared module during lower step"):
        with no_grad():
            feats = shared_forward(Tensor(batch.degraded.astype(problem.dtype)), p.shared, problem.mcfg)
        losses = problem.loss(batch, omega, feats, update_stats=True)
        names = list(omega)
        grads = grad(losses.total, [omega[n] for n in names])
        adam_step(omega, {n: g.data for n, g in zip(names, grads)}, state, state.lr_low,
                  tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps)
    return losses


@dataclass
class Hypergradient:
    total: dict[str, np.ndarray]
    direct: dict[str, np.ndarray] | None = None
    response: dict[str, np.ndarray] | None = None


def _grad_dict(out: Tensor, tensors: Mapping[str, Tensor], **kw) -> dict[str, np.ndarray]:
    names = list(tensors)
    gs = grad(out, [tensors[n] for n in names], **kw)
    return {n: g.data for n, g in zip(names, gs)}


def _leaves(arrays: Mapping[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    return {n: Tensor(a, requires_grad=requires_grad, name=n) for n, a in arrays.items()}


def _lower_points(problem: Problem, train_batch: Batch, eta: float,
                  omega_prev: Mapping[str, np.ndarray] | None) -> tuple[dict, dict]:
    """(ω^{t-1}, ω^t) as arrays. Without a snapshot the current ω is ω^{t-1} and ω^t is one GD step."""
    current = {n: t.data for n, t in problem.params.omega().items()}
    if omega_prev is not None:
        return dict(omega_prev), current
    leaves = _leaves(current, requires_grad=True)
    g = _grad_dict(problem.loss(train_batch, leaves).total, leaves)
    return current, {n: current[n] - eta * g[n] for n in current}


def _direct_term(problem: Problem, val_batch: Batch, omega_t: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    loss = problem.loss(val_batch, _leaves(omega_t), split_tag="val").total
    return _grad_dict(loss, problem.params.shared.tensors())


def response_term_exact(problem: Problem, train_batch: Batch, omega_prev: Mapping[str, np.ndarray],
                        v: Mapping[str, np.ndarray], eta: float) -> dict[str, np.ndarray]:
    """-η ∇_u (∇_ω L^tr(ω^{t-1}, u) · v) by double backward."""
    u = problem.params.shared.tensors()
    prev = _leaves(omega_prev, requires_grad=True)
    names = list(prev)
    g = grad(problem.loss(train_batch, prev).total, [prev[n] for n in names], create_graph=True)
    dot = None
    for n, gn in zip(names, g):
        term = (gn * Tensor(v[n])).sum()
        dot = term if dot is None else dot + term
    out = _grad_dict(dot, u)
    return {n: -eta * a for n, a in out.items()}


def response_term_fd(problem: Problem, train_batch: Batch, omega_prev: Mapping[str, np.ndarray],
                     v: Mapping[str, np.ndarray], eta: float, radius: float = 0.01) -> dict[str, np.ndarray]:
    """Central-difference version of the response term with ε = radius/‖v‖."""
    u = problem.params.shared.tensors()
    norm = math.sqrt(sum(float(np.sum(a.astype(np.float64) ** 2)) for a in v.values()))
    if norm == 0:
        return {n: np.zeros_like(t.data) for n, t in u.items()}
    eps = radius / norm
    sides = []
    for sign in (1.0, -1.0):
        shifted = {n: omega_prev[n] + (sign * eps) * v[n] for n in omega_prev}
        sides.append(_grad_dict(problem.loss(train_batch, _leaves(shifted)).total, u))
    return {n: -eta * (sides[0][n] - sides[1][n]) / (2 * eps) for n in u}


def hypergradient(
    problem: Problem,
    val_batch: Batch,
    train_batch: Batch,
    mode: str = "first_order",
    eta: float = 0.002,
    omega_prev: Mapping[str, np.ndarray] | None = None,
    zero_v: bool = False,
    max_unrolled_params: int | None = None,
    decompose: bool = False,
) -> Hypergradient:
    """Hypergradient of L^val with respect to u.

    ``omega_prev`` is the ω snapshot from before the latest lower step (the
    current parameters then play ω^t). Without it, the current ω is ω^{t-1}
    and ω^t is a virtual plain gradient step of size ``eta``, which makes
    ``unrolled_exact`` the exact gradient of u ↦ L^val(ω - η∇_ω L^tr(ω, u), u).
    ``zero_v`` forces ∂L^val/∂ω to zero in the response term.
    """
    if mode not in UPPER_MODES:
        raise ConfigError(f"unknown upper mode {mode!r}")
    params = problem.params
    if mode == "unrolled_exact" and max_unrolled_params is not None and params.count() > max_unrolled_params:
        raise ResourceGuardError(
            f"unrolled_exact on {params.count()} parameters exceeds trainer.max_unrolled_params="
            f"{max_unrolled_params}; use trainer.upper_mode = unrolled_fd"
        )
    u = params.shared.tensors()
    prev, omega_t = _lower_points(problem, train_batch, eta, omega_prev)

    if mode == "first_order":
        direct = _direct_term(problem, val_batch, omega_t)
        return Hypergradient(direct, direct, None)

    if mode == "unrolled_exact" and not decompose:
        return Hypergradient(_unrolled_composed(problem, val_batch, train_batch, prev, omega_t, eta, zero_v))

    # Separate direct term and v from one backward pass over (u, ω^t).
    at_t = _leaves(omega_t, requires_grad=True)
    loss = problem.loss(val_batch, at_t, split_tag="val").total
    both = _grad_dict(loss, {**u, **at_t})
    direct = {n: both[n] for n in u}
    v = {n: (np.zeros_like(both[n]) if zero_v else both[n]) for n in at_t}
    respond = response_term_exact if mode == "unrolled_exact" else response_term_fd
    response = respond(problem, train_batch, prev, v, eta)
    return Hypergradient({n: direct[n] + response[n] for n in u}, direct, response)


def _unrolled_composed(problem: Problem, val_batch: Batch, train_batch: Batch, prev, omega_t, eta, zero_v):
    """d/du L^val(ω^t(u), u) with ω^t(u) = ω^t + η(g* - g(u)), g(u) = ∇_ω L^tr(ω^{t-1}, u), g* its current value."""
    u = problem.params.shared.tensors()
    if zero_v:
        return _direct_term(problem, val_batch, omega_t)
    prev_leaves = _leaves(prev, requires_grad=True)
    names = list(prev_leaves)
    g = grad(problem.loss(train_batch, prev_leaves).total, [prev_leaves[n] for n in names], create_graph=True)
    unrolled = {n: Tensor(omega_t[n] + eta * gn.data) - gn * eta for n, gn in zip(names, g)}
    return _grad_dict(problem.loss(val_batch, unrolled, split_tag="val").total, u)


def upper_step(
    val_batch: Batch,
    train_batch: Batch,
    problem: Problem,
    state: TrainState,
    tcfg: TrainerConfig,
    omega_prev: Mapping[str, np.ndarray] | None = None,
) -> Hypergradient:
    """One Adam step on u along the configured hypergradient; ω untouched."""
    p = problem.params
    with _Untouched(p.omega(), "subnet parameters during upper step"):
        hg = hypergradient(problem, val_batch, train_batch, tcfg.upper_mode, tcfg.unroll_lr, omega_prev,
                           max_unrolled_params=tcfg.max_unrolled_params)
        adam_step(p.shared.tensors(), hg.total, state, state.lr_up, tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps)
    return hg


# ------------------------------------------------------------ checkpoints
def state_entries(params: DPNetParams, state: TrainState) -> dict[str, np.ndarray]:
    entries: dict[str, np.ndarray] = {}
    for name, t in params.named().items():
        entries[name] = t.data
        entries[f"adam.m.{name}"] = state.m[name]
        entries[f"adam.v.{name}"] = state.v[name]
    for name, bn in params.bn.items():
        entries[f"bn.{name}.running_mean"] = bn.running_mean
        entries[f"bn.{name}.running_var"] = bn.running_var
    entries["state.t"] = np.array([state.t], dtype=np.float64)
    entries["state.epoch"] = np.array([state.epoch], dtype=np.float64)
    return entries


def round_to_disk(params: DPNetParams, state: TrainState) -> None:
    """Give in-memory values the 32-bit precision they have on disk, so resuming is bitwise."""
    for name, t in params.named().items():
        for arr in (t.data, state.m[name], state.v[name]):
            arr[...] = arr.astype(np.float32)
    for bn in params.bn.values():
        bn.running_mean = bn.running_mean.astype(np.float32).astype(bn.running_mean.dtype)
        bn.running_var = bn.running_var.astype(np.float32).astype(bn.running_var.dtype)


def restore(params: DPNetParams, ckpt: Checkpoint, state: TrainState | None = None) -> list[str]:
    """Load parameter values (and optimizer state) from ``ckpt``; returns skipped entry names."""
    named = params.named()
    check_shapes(ckpt.entries, {n: t.shape for n, t in named.items()})
    used = set()
    for n, t in named.items():
        t.data[...] = ckpt.entries[n]
        used.add(n)
    for name, bn in params.bn.items():
        for attr in ("running_mean", "running_var"):
            key = f"bn.{name}.{attr}"
            if key not in ckpt.entries:
                raise CheckpointError(f"checkpoint lacks batchnorm buffer {key!r}")
            setattr(bn, attr, ckpt.entries[key].astype(getattr(bn, attr).dtype))
            used.add(key)
    if state is not None:
        for n, t in named.items():
            for kind, store in (("m", state.m), ("v", state.v)):
                key = f"adam.{kind}.{n}"
                if key not in ckpt.entries:
                    raise CheckpointError(f"checkpoint lacks optimizer entry {key!r}")
                store[n] = ckpt.entries[key].astype(t.dtype)
                used.add(key)
        state.t = int(ckpt.entries["state.t"][0])
        state.epoch = int(ckpt.entries["state.epoch"][0])
        used |= {"state.t", "state.epoch"}
    return sorted(set(ckpt.entries) - used)


# ------------------------------------------------------------------ train
def holdout_split(train: list[Sample], fraction: float, seed: int) -> tuple[list[Sample], list[Sample]]:
    """Deterministically move ``fraction`` of the training samples into a validation split."""
    order = Rng((seed, 7)).permutation(len(train))
    k = max(1, int(round(fraction * len(train))))
    if k >= len(train):
        raise ConfigError("training split too small to hold out a validation split")
    held = set(order[:k].tolist())
    return [s for i, s in enumerate(train) if i not in held], [s for i, s in enumerate(train) if i in held]


def _batches(samples: Sequence[Sample], order: np.ndarray, size: int) -> list[Batch]:
    return [make_batch([samples[i] for i in order[s : s + size]]) for s in range(0, len(order), size)]


def _fmt(v: float) -> str:
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6g}"


@dataclass
class TrainResult:
    model: DPNet
    state: TrainState
    log: list[dict[str, float]]
    checkpoint: Path | None


class Trainer:
    def __init__(self, cfg: Config, dataset: Dataset, out_dir=None, echo: Callable[[str], None] | None = None):
        tc = cfg.trainer
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.echo = echo or (lambda _msg: None)
        train, val, test = list(dataset.train), list(dataset.val), list(dataset.test)
        check_disjoint({"train": train, "val": val, "test": test})
        if not val:
            train, val = holdout_split(train, tc.val_fraction, tc.seed)
        if not train or not test:
            raise ConfigError("training needs non-empty train and test splits")
        self.train, self.val, self.test = train, val, test
        dtype = np.float32 if tc.dtype == "float32" else np.float64
        self.model = DPNet.build(cfg.model, tc.seed, dtype, tc.tasks)
        h, w = train[0].degraded.shape[1:]
        self.anchors = self.model.anchors(h, w) if self.model.params.det is not None else None
        self.problem = Problem(self.model.params, cfg.model, cfg.loss, self.anchors)
        self.state = TrainState.fresh(self.model.params, tc)
        self.log: list[dict[str, float]] = []

    @property
    def checkpoint_path(self) -> Path | None:
        return None if self.out_dir is None else self.out_dir / CHECKPOINT_NAME

    def _evaluate_row(self, epoch: int, train_losses: tuple[float, float], seconds: float) -> dict[str, float]:
        res = evaluate(self.model, self.test, self.cfg)
        tc = self.cfg.trainer
        row = {
            "epoch": epoch,
            "lr": lr_at(tc.lr, tc.lr_decay, max(epoch - 1, 0)),
            "lr_upper": lr_at(tc.lr_upper, tc.lr_decay, max(epoch - 1, 0)),
            "train_l_det": train_losses[0],
            "train_l_enh": train_losses[1],
            "test_l_det_cls": res.l_det_cls,
            "test_l_det_box": res.l_det_box,
            "test_l_det": res.l_det,
            "test_l_enh": res.l_enh,
            "test_map": res.map,
            "test_psnr_degraded": float(np.mean(res.psnr_in)) if res.psnr_in else math.nan,
            "test_psnr_enhanced": float(np.mean(res.psnr_out)) if res.psnr_out else math.nan,
            "test_ssim": float(np.mean(res.ssim_out)) if res.ssim_out else math.nan,
            "psnr_gain_fraction": res.psnr_gain_fraction,
            "seconds": seconds,
        }
        self.log.append(row)
        self.echo("\t".join(f"{k}={_fmt(row[k])}" for k in ("epoch", "test_l_det", "test_l_enh", "test_map", "test_psnr_enhanced")))
        return row

    def _write_log(self) -> None:
        if self.out_dir is None:
            return
        lines = ["\t".join(LOG_COLUMNS)]
        lines += ["\t".join(_fmt(row[c]) if c != "epoch" else str(row[c]) for c in LOG_COLUMNS) for row in self.log]
        atomic_write(self.out_dir / LOG_NAME, ("\n".join(lines) + "\n").encode())

    def _save(self) -> None:
        if self.out_dir is None:
            return
        save_checkpoint(self.checkpoint_path, state_entries(self.model.params, self.state), self.cfg.digest())
        round_to_disk(self.model.params, self.state)

    def _resume(self) -> None:
        ckpt = load_checkpoint(self.checkpoint_path)
        if ckpt.digest != self.cfg.digest():
            raise CheckpointError("checkpoint was written under a different configuration")
        restore(self.model.params, ckpt, self.state)
        log_path = self.out_dir / LOG_NAME
        if log_path.exists():
            lines = log_path.read_text().splitlines()
            header = lines[0].split("\t")
            for line in lines[1:]:
                vals = line.split("\t")
                row = {k: (int(v) if k == "epoch" else float(v)) for k, v in zip(header, vals)}
                if row["epoch"] <= self.state.epoch:
                    self.log.append(row)

    def run(self, resume: bool = False, stop_after: int | None = None) -> TrainResult:
        """Train to ``trainer.epochs`` (or stop after epoch ``stop_after``), checkpointing every epoch."""
        tc = self.cfg.trainer
        p = self.model.params
        if resume and self.checkpoint_path is not None and self.checkpoint_path.exists():
            self._resume()
            self.echo(f"resumed at epoch {self.state.epoch}")
        else:
            start = time.perf_counter()
            self._evaluate_row(0, (math.nan, math.nan), time.perf_counter() - start)
            self._save()
            self._write_log()
        unrolled = tc.upper_mode != "first_order"
        update_u = not tc.freeze_shared
        for epoch in range(self.state.epoch, tc.epochs):
            if stop_after is not None and epoch >= stop_after:
                break
            start = time.perf_counter()
            self.state.lr_low = lr_at(tc.lr, tc.lr_decay, epoch)
            self.state.lr_up = lr_at(tc.lr_upper, tc.lr_decay, epoch)
            order = Rng((tc.seed, 1000 + epoch)).permutation(len(self.train))
            val_order = Rng((tc.seed, 2000 + epoch)).permutation(len(self.val))
            train_batches = _batches(self.train, order, tc.batch_size)
            val_batches = _batches(self.val, val_order, tc.batch_size)
            det_sum = enh_sum = 0.0
            for i, batch in enumerate(train_batches):
                self.state.t += 1
                prev = {n: t.data.copy() for n, t in p.omega().items()} if unrolled and update_u else None
                losses = lower_step(batch, self.problem, self.state, tc)
                det_sum += losses.l_det.item()
                enh_sum += losses.l_enh.item()
                if update_u:
                    upper_step(val_batches[i % len(val_batches)], batch, self.problem, self.state, tc, prev)
            self.state.epoch = epoch + 1
            k = len(train_batches)
            self._evaluate_row(epoch + 1, (det_sum / k, enh_sum / k), time.perf_counter() - start)
            self._save()
            self._write_log()
        return TrainResult(self.model, self.state, self.log, self.checkpoint_path)


def train(cfg: Config, dataset: Dataset, out_dir=None, resume: bool = False, echo=None,
          stop_after: int | None = None) -> TrainResult:
    return Trainer(cfg, dataset, out_dir, echo).run(resume=resume, stop_after=stop_after)
