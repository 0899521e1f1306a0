import numpy as np
import pytest

from dpnet.autodiff import Tensor, grad
from dpnet.checkpoint import load_checkpoint
from dpnet.config import Config
from dpnet.datasynth import Dataset
from dpnet.errors import CheckpointError, NumericError, ResourceGuardError
from dpnet.losses import Batch, joint_loss
from dpnet.model import build_params
from dpnet.trainer import (
    Problem, TrainState, Trainer, adam_step, holdout_split, hypergradient, lower_step, lr_at, response_term_fd,
    restore, upper_step,
)

ETA = 0.5


def _tiny_batch(seed):
    r = np.random.default_rng(seed)
    return Batch(r.uniform(0, 1, (2, 3, 8, 8)), r.uniform(0, 1, (2, 3, 8, 8)),
                 [np.array([[1.0, 1, 6, 7]]), np.array([[0.0, 2, 5, 8]])], [np.array([0]), np.array([0])])


@pytest.fixture
def tiny(tiny_cfg):
    params = build_params(tiny_cfg.model, 3)
    return Problem(params, tiny_cfg.model, tiny_cfg.loss), _tiny_batch(1), _tiny_batch(2), tiny_cfg


def _upper_objective(problem, train, val):
    """F(u) = L^val(ω - η ∇_ω L^tr(ω, u), u) evaluated from scratch with joint_loss."""
    p, mc, lc = problem.params, problem.mcfg, problem.lcfg
    omega = p.omega()
    saved = {n: t.data.copy() for n, t in omega.items()}
    gs = grad(joint_loss(train, p, mc, lc, update_stats=False).total, list(omega.values()))
    for (n, t), g in zip(omega.items(), gs):
        t.data = saved[n] - ETA * g.data
    val_loss = joint_loss(val, p, mc, lc, update_stats=False).total.item()
    for n, t in omega.items():
        t.data = saved[n]
    return val_loss


def test_unrolled_exact_matches_two_level_finite_differences(tiny):
    problem, train, val, _ = tiny
    hg = hypergradient(problem, val, train, "unrolled_exact", ETA)
    worst = 0.0
    for name, t in problem.params.shared.tensors().items():
        flat = t.data.reshape(-1)
        for i in range(0, flat.size, max(1, flat.size // 6)):
            orig = flat[i]
            flat[i] = orig + 1e-6
            fp = _upper_objective(problem, train, val)
            flat[i] = orig - 1e-6
            fm = _upper_objective(problem, train, val)
            flat[i] = orig
            num = (fp - fm) / 2e-6
            ana = hg.total[name].reshape(-1)[i]
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-8))
    assert worst <= 1e-3


def test_response_term_is_not_negligible(tiny):
    problem, train, val, _ = tiny
    ex = hypergradient(problem, val, train, "unrolled_exact", ETA)
    fo = hypergradient(problem, val, train, "first_order", ETA)
    diff = max(np.abs(ex.total[n] - fo.total[n]).max() for n in ex.total)
    assert diff > 1e-3


def test_decomposition_matches_composed_form(tiny):
    problem, train, val, _ = tiny
    ex = hypergradient(problem, val, train, "unrolled_exact", ETA)
    de = hypergradient(problem, val, train, "unrolled_exact", ETA, decompose=True)
    fo = hypergradient(problem, val, train, "first_order", ETA)
    for n in ex.total:
        np.testing.assert_allclose(de.total[n], ex.total[n], atol=1e-10)
        np.testing.assert_array_equal(de.direct[n], fo.total[n])


def test_zero_v_reduces_to_first_order(tiny):
    problem, train, val, _ = tiny
    fo = hypergradient(problem, val, train, "first_order", ETA)
    for decompose in (False, True):
        ex = hypergradient(problem, val, train, "unrolled_exact", ETA, zero_v=True, decompose=decompose)
        for n in fo.total:
            np.testing.assert_allclose(ex.total[n], fo.total[n], atol=1e-12)
    fd = hypergradient(problem, val, train, "unrolled_fd", ETA, zero_v=True)
    for n in fo.total:
        np.testing.assert_allclose(fd.total[n], fo.total[n], atol=1e-12)


def test_finite_difference_response_converges_to_exact(tiny):
    problem, train, val, _ = tiny
    ex = hypergradient(problem, val, train, "unrolled_exact", ETA, decompose=True)
    fd = hypergradient(problem, val, train, "unrolled_fd", ETA)
    # the default radius is a coarse secant; shrinking it must recover the exact product
    prev = {n: t.data for n, t in problem.params.omega().items()}
    omega_t = {n: prev[n] - ETA * g for n, g in _omega_grad(problem, train).items()}
    v = _val_grad_omega(problem, val, omega_t)
    fine = response_term_fd(problem, train, prev, v, ETA, radius=1e-4)
    for n in ex.total:
        scale = np.abs(ex.response[n]).max()
        assert np.abs(fine[n] - ex.response[n]).max() <= 1e-6 * scale
        np.testing.assert_array_equal(fd.total[n], fd.direct[n] + fd.response[n])
        cos = np.sum(fd.response[n] * ex.response[n]) / np.linalg.norm(fd.response[n]) / np.linalg.norm(ex.response[n])
        assert cos > 0.9


def _omega_grad(problem, batch):
    p = problem.params
    omega = p.omega()
    gs = grad(joint_loss(batch, p, problem.mcfg, problem.lcfg, update_stats=False).total, list(omega.values()))
    return {n: g.data for n, g in zip(omega, gs)}


def _val_grad_omega(problem, batch, omega_t):
    p = problem.params
    omega = p.omega()
    saved = {n: t.data for n, t in omega.items()}
    for n, t in omega.items():
        t.data = omega_t[n]
    g = _omega_grad(problem, batch)
    for n, t in omega.items():
        t.data = saved[n]
    return g


def test_snapshot_mode_matches_decomposition(tiny):
    problem, train, val, _ = tiny
    prev = {n: t.data.copy() for n, t in problem.params.omega().items()}
    for n, t in problem.params.omega().items():
        t.data = t.data + 0.01 * np.sign(t.data + 0.5)
    ex = hypergradient(problem, val, train, "unrolled_exact", ETA, omega_prev=prev)
    de = hypergradient(problem, val, train, "unrolled_exact", ETA, omega_prev=prev, decompose=True)
    for n in ex.total:
        np.testing.assert_allclose(de.total[n], ex.total[n], atol=1e-10)


def test_resource_guard(tiny):
    problem, train, val, _ = tiny
    with pytest.raises(ResourceGuardError, match="unrolled_fd"):
        hypergradient(problem, val, train, "unrolled_exact", ETA, max_unrolled_params=10)


def test_adam_matches_formula():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    st = TrainState(m={"w": np.zeros(2)}, v={"w": np.zeros(2)})
    grads = [np.array([0.5, -1.0]), np.array([0.1, 0.3])]
    w, m, v = np.array([1.0, -2.0]), np.zeros(2), np.zeros(2)
    for t, g in enumerate(grads, 1):
        st.t = t
        adam_step(p, {"w": g}, st, lr=0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p["w"].data, w, rtol=1e-14)


def test_adam_rejects_non_finite_gradient():
    p = {"w": Tensor(np.zeros(2))}
    st = TrainState(t=4, m={"w": np.zeros(2)}, v={"w": np.zeros(2)})
    with pytest.raises(NumericError, match="'w'.*iteration 4"):
        adam_step(p, {"w": np.array([np.nan, 0.0])}, st, 0.1)
    np.testing.assert_array_equal(p["w"].data, 0.0)


def test_steps_touch_only_their_partition(tiny):
    problem, train, val, cfg = tiny
    p = problem.params
    st = TrainState.fresh(p, cfg.trainer)
    u0 = {n: t.data.copy() for n, t in p.shared.tensors().items()}
    w0 = {n: t.data.copy() for n, t in p.omega().items()}
    st.t = 1
    lower_step(train, problem, st, cfg.trainer)
    assert all(np.array_equal(t.data, u0[n]) for n, t in p.shared.tensors().items())
    assert any(not np.array_equal(t.data, w0[n]) for n, t in p.omega().items())
    w1 = {n: t.data.copy() for n, t in p.omega().items()}
    upper_step(val, train, problem, st, cfg.trainer)
    assert all(np.array_equal(t.data, w1[n]) for n, t in p.omega().items())
    assert any(not np.array_equal(t.data, u0[n]) for n, t in p.shared.tensors().items())


def test_learning_rate_schedule():
    assert lr_at(0.002, 0.92, 0) == 0.002
    assert lr_at(0.002, 0.92, 3) == pytest.approx(0.002 * 0.92**3)


def test_holdout_split_is_deterministic_and_disjoint(small_dataset):
    a_tr, a_val = holdout_split(small_dataset.train, 0.34, 0)
    b_tr, b_val = holdout_split(small_dataset.train, 0.34, 0)
    assert [s.id for s in a_val] == [s.id for s in b_val] and len(a_val) == 2
    assert not {s.id for s in a_tr} & {s.id for s in a_val}


def _run(cfg, ds, out, **kw):
    return Trainer(cfg, ds, out).run(**kw)


def test_training_is_bitwise_deterministic(tmp_path, small_cfg, small_dataset):
    _run(small_cfg, small_dataset, tmp_path / "a")
    _run(small_cfg, small_dataset, tmp_path / "b")
    a = (tmp_path / "a" / "checkpoint.dpnt").read_bytes()
    assert a == (tmp_path / "b" / "checkpoint.dpnt").read_bytes()
    assert (tmp_path / "a" / "log.tsv").read_text().count("\n") == 4


def test_resume_equals_uninterrupted(tmp_path, small_cfg, small_dataset):
    cfg = small_cfg.replace(**{"trainer.epochs": 3})
    full = _run(cfg, small_dataset, tmp_path / "full")
    _run(cfg, small_dataset, tmp_path / "cut", stop_after=1)
    resumed = _run(cfg, small_dataset, tmp_path / "cut", resume=True)
    assert (tmp_path / "full" / "checkpoint.dpnt").read_bytes() == (tmp_path / "cut" / "checkpoint.dpnt").read_bytes()
    assert [r["epoch"] for r in resumed.log] == [0, 1, 2, 3]
    assert resumed.log[-1]["test_map"] == pytest.approx(full.log[-1]["test_map"], abs=1e-6)


def test_float64_resume_is_bitwise(tmp_path, small_cfg, small_dataset):
    cfg = small_cfg.replace(**{"trainer.epochs": 2, "trainer.dtype": "float64"})
    _run(cfg, small_dataset, tmp_path / "full")
    _run(cfg, small_dataset, tmp_path / "cut", stop_after=1)
    _run(cfg, small_dataset, tmp_path / "cut", resume=True)
    assert (tmp_path / "full" / "checkpoint.dpnt").read_bytes() == (tmp_path / "cut" / "checkpoint.dpnt").read_bytes()


def test_resume_rejects_other_config(tmp_path, small_cfg, small_dataset):
    _run(small_cfg.replace(**{"trainer.epochs": 1}), small_dataset, tmp_path)
    with pytest.raises(CheckpointError, match="different configuration"):
        _run(small_cfg.replace(**{"trainer.epochs": 1, "trainer.lr": 0.01}), small_dataset, tmp_path, resume=True)


@pytest.mark.parametrize("mode", ["unrolled_fd", "unrolled_exact"])
def test_unrolled_modes_train(tmp_path, small_cfg, small_dataset, mode):
    cfg = small_cfg.replace(**{"trainer.epochs": 1, "trainer.upper_mode": mode, "trainer.max_unrolled_params": 10**7})
    res = _run(cfg, small_dataset, None)
    assert res.state.t == 3 and np.isfinite(res.log[-1]["test_l_det"])


def test_unrolled_exact_guard_in_training(small_cfg, small_dataset):
    default_model = {k: v for k, v in Config().flat().items() if k.startswith("model.")}
    cfg = small_cfg.replace(**default_model, **{"trainer.epochs": 1, "trainer.upper_mode": "unrolled_exact"})
    with pytest.raises(ResourceGuardError):
        _run(cfg, small_dataset, None)


def test_empty_val_split_is_held_out(small_cfg, small_dataset):
    ds = Dataset(small_dataset.root, {"train": small_dataset.train, "test": small_dataset.test})
    tr = Trainer(small_cfg.replace(**{"trainer.val_fraction": 0.34}), ds)
    assert len(tr.val) == 2 and len(tr.train) == 4


def test_frozen_shared_module_stays_at_init(small_cfg, small_dataset):
    cfg = small_cfg.replace(**{"trainer.epochs": 1, "trainer.freeze_shared": True, "trainer.tasks": "det"})
    res = _run(cfg, small_dataset, None)
    init = build_params(cfg.model, cfg.trainer.seed, np.float32, "det")
    for n, t in res.model.params.shared.tensors().items():
        np.testing.assert_array_equal(t.data, init.shared[n].data)
    assert res.model.params.enh is None


def test_restore_skips_unneeded_entries(tmp_path, small_cfg, small_dataset):
    res = _run(small_cfg.replace(**{"trainer.epochs": 1}), small_dataset, tmp_path)
    enh_only = build_params(small_cfg.model, 9, np.float32, "enh")
    skipped = restore(enh_only, load_checkpoint(res.checkpoint))
    assert any(n.startswith("det.") for n in skipped)
    assert not any(n.startswith(("enh.", "shared.")) for n in skipped)
    np.testing.assert_array_equal(enh_only.shared["shared.conv1.weight"].data,
                                  res.model.params.shared["shared.conv1.weight"].data)
