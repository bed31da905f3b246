import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from partwhole import autograd as ag
from partwhole.geometry import chamfer_distance, quaternion_matrix, random_quaternion
from partwhole.model import AssemblyModel, ModelConfig
from partwhole.training import (
    LossWeights,
    NumericError,
    TrainConfig,
    batch_from_shapes,
    chamfer,
    load_model,
    mon_loss,
    read_loss_log,
    rotation_loss,
    shape_loss,
    total_loss,
    train,
    translation_loss,
)

SMALL = dict(feat_dim=16, num_heads=2, instance_enc_dim=4, noise_dim=8, head_hidden=(16, 16),
             pointnet_hidden=(8, 16), ff_dim=16, super_encoder_layers=1, part_encoder_layers=1)


def toy(rng, n=3, d=20):
    pts = rng.uniform(-0.4, 0.4, size=(n, d, 3))
    return pts, rng.uniform(-0.5, 0.5, (n, 3)), random_quaternion(rng, n)


def placed(pts, t, q):
    return np.einsum("npk,njk->npj", pts, quaternion_matrix(q)) + t[:, None]


# -- chamfer op ----------------------------------------------------------------------------
def test_chamfer_op_matches_reference(rng):
    x, y = rng.standard_normal((4, 30, 3)), rng.standard_normal((4, 25, 3))
    got = chamfer(x, y).data
    np.testing.assert_allclose(got, [chamfer_distance(a, b) for a, b in zip(x, y)], rtol=1e-10)


def test_chamfer_op_masks(rng):
    x, y = rng.standard_normal((2, 10, 3)), rng.standard_normal((2, 12, 3))
    xm = np.arange(10) < np.array([[6], [10]])
    ym = np.arange(12) < np.array([[12], [3]])
    got = chamfer(x, y, xm, ym).data
    ref = [chamfer_distance(x[i][xm[i]], y[i][ym[i]]) for i in range(2)]
    np.testing.assert_allclose(got, ref, rtol=1e-10)


def test_chamfer_op_large_blocks(rng, monkeypatch):
    import partwhole.training as tr
    monkeypatch.setattr(tr, "_CHUNK", 100)
    x, y = rng.standard_normal((5, 30, 3)), rng.standard_normal((5, 20, 3))
    np.testing.assert_allclose(chamfer(x, y).data, [chamfer_distance(a, b) for a, b in zip(x, y)], rtol=1e-10)


def test_chamfer_op_empty():
    with pytest.raises(ValueError):
        chamfer(np.zeros((1, 3, 3)), np.zeros((1, 3, 3)), np.zeros((1, 3), bool))


# -- loss values -------------------------------------------------------------------------------
def test_translation_loss_values(rng):
    assert translation_loss(np.zeros((1, 3)), np.zeros((1, 3))).item() == 0
    assert translation_loss(np.array([[0.1, 0, 0]]), np.zeros((1, 3))).item() == pytest.approx(0.01)
    pred, gt = rng.standard_normal((2, 4, 3)), rng.standard_normal((2, 4, 3))
    mask = np.array([[1, 1, 0, 1], [1, 1, 1, 1]], bool)
    oracle = [sum(float(np.sum((pred[b, i] - gt[b, i]) ** 2)) for i in range(4) if mask[b, i]) for b in range(2)]
    np.testing.assert_allclose(translation_loss(pred, gt, mask).data, oracle, rtol=1e-10)


def test_translation_loss_length_mismatch():
    with pytest.raises(ValueError):
        translation_loss(np.zeros((3, 3)), np.zeros((2, 3)))


def test_rotation_loss_values(rng):
    pts, _, q = toy(rng)
    assert rotation_loss(q, q, pts).item() == pytest.approx(0, abs=1e-12)
    assert rotation_loss(-q, q, pts).item() == pytest.approx(0, abs=1e-12)
    q2 = random_quaternion(rng, 3)
    ref = sum(chamfer_distance(p @ quaternion_matrix(a).T, p @ quaternion_matrix(b).T) for p, a, b in zip(pts, q2, q))
    assert rotation_loss(q2, q, pts).item() == pytest.approx(ref, rel=1e-10)


def test_rotation_loss_length_mismatch(rng):
    pts, _, q = toy(rng)
    with pytest.raises(ValueError):
        rotation_loss(q[:2], q, pts)


def test_shape_loss_values(rng):
    pts, t, q = toy(rng)
    assert shape_loss(t, q, t, q, pts).item() == pytest.approx(0, abs=1e-12)
    eps = 0.03
    shifted = shape_loss(t + [eps, 0, 0], q, t, q, pts).item()
    assert shifted <= 2 * eps ** 2 + 1e-12
    t2, q2 = rng.uniform(-0.5, 0.5, (3, 3)), random_quaternion(rng, 3)
    ref = chamfer_distance(placed(pts, t2, q2).reshape(-1, 3), placed(pts, t, q).reshape(-1, 3))
    assert shape_loss(t2, q2, t, q, pts).item() == pytest.approx(ref, rel=1e-10)


def test_shape_loss_masked_matches_unpadded(rng):
    pts, t, q = toy(rng, n=4)
    t2, q2 = rng.uniform(-0.5, 0.5, (4, 3)), random_quaternion(rng, 4)
    mask = np.array([[True, True, True, False]])
    padded = shape_loss(t2[None], q2[None], t[None], q[None], pts[None], mask).data[0]
    assert padded == pytest.approx(shape_loss(t2[:3], q2[:3], t[:3], q[:3], pts[:3]).item(), rel=1e-10)


def test_shape_loss_empty():
    with pytest.raises(ValueError):
        shape_loss(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 5, 3)))


def test_total_loss_weights(rng):
    pts, t, q = toy(rng)
    t2, q2 = rng.uniform(-0.5, 0.5, (3, 3)), random_quaternion(rng, 3)
    only_t = total_loss(t2, q2, t, q, pts, weights=LossWeights(1, 0, 0))
    assert only_t.total.item() == pytest.approx(translation_loss(t2, t).item())
    assert total_loss(t, q, t, q, pts).total.item() == pytest.approx(0, abs=1e-12)
    with pytest.raises(ValueError):
        LossWeights(-1, 0, 0)


def test_total_loss_gradient_two_part_toy(rng):
    from partwhole.gradcheck import gradient_error
    pts, t, q = toy(rng, n=2, d=8)
    t0, q0 = t + 0.1, q + 0.2
    err = gradient_error(lambda a, b: total_loss(a, b, t, q, pts).total, [t0, q0])
    assert err < 1e-3


@settings(max_examples=20)
@given(st.integers(0, 10_000))
def test_loss_invariants(seed):
    rng = np.random.default_rng(seed)
    pts, t, q = toy(rng, n=2, d=10)
    t2, q2 = rng.uniform(-0.9, 0.9, (2, 3)), random_quaternion(rng, 2)
    assert total_loss(t2, q2, t, q, pts).total.item() >= 0
    flips = rng.choice([-1.0, 1.0], size=(2, 1))
    a = rotation_loss(q2, q, pts).item()
    assert rotation_loss(q2 * flips, q * flips[::-1], pts).item() == pytest.approx(a, abs=1e-12)
    assert total_loss(t, q * flips, t, q, pts).total.item() == pytest.approx(0, abs=1e-12)


# -- MoN -------------------------------------------------------------------------------------------
@pytest.fixture(scope="module")
def tiny_setup(table_shapes):
    model = AssemblyModel(ModelConfig(**SMALL))
    batch, targets = batch_from_shapes(table_shapes[:2], model.config)
    return model, batch, targets


def test_mon_is_min_of_samples(tiny_setup, rng):
    model, batch, targets = tiny_setup
    res = mon_loss(model, batch, targets, 4, rng)
    assert res.per_sample.shape == (2, 4)
    assert res.loss.item() == pytest.approx(res.per_sample.min(axis=1).mean(), rel=1e-6)
    assert np.all(res.per_sample.min(axis=1)[:, None] <= res.per_sample)


def test_mon_single_sample_equals_total_loss(tiny_setup):
    model, batch, targets = tiny_setup
    noise = np.random.default_rng(5).standard_normal((2, 8))
    res = mon_loss(model, batch, targets, 1, noise=noise)
    out = model(batch, noise)
    ref = total_loss(out.part_t, out.part_q, targets.translations, targets.quaternions, batch.points,
                     batch.part_mask).total.data.mean()
    assert res.loss.item() == pytest.approx(ref, rel=1e-6)


def test_mon_first_draw_bound_and_replay(tiny_setup):
    model, batch, targets = tiny_setup
    noise = np.random.default_rng(9).standard_normal((2 * 5, 8))
    five = mon_loss(model, batch, targets, 5, noise=noise)
    first = mon_loss(model, batch, targets, 1, noise=noise.reshape(2, 5, 8)[:, 0])
    assert five.loss.item() <= first.loss.item() + 1e-6
    a = mon_loss(model, batch, targets, 5, np.random.default_rng(3))
    b = mon_loss(model, batch, targets, 5, np.random.default_rng(3))
    np.testing.assert_array_equal(a.best_index, b.best_index)
    assert a.loss.data.tobytes() == b.loss.data.tobytes()


def test_mon_gradient_only_through_argmin(tiny_setup):
    model, batch, targets = tiny_setup
    rng = np.random.default_rng(4)
    noise = rng.standard_normal((2 * 3, 8))
    model.zero_grad()
    res = mon_loss(model, batch, targets, 3, noise=noise)
    res.loss.backward()
    grad_mon = {n: p.grad.copy() for n, p in model.named_parameters() if p.grad is not None}
    winners = noise.reshape(2, 3, 8)[np.arange(2), res.best_index]
    model.zero_grad()
    mon_loss(model, batch, targets, 1, noise=winners).loss.backward()
    for n, p in model.named_parameters():
        if n in grad_mon:
            np.testing.assert_allclose(grad_mon[n], p.grad, rtol=1e-4, atol=1e-7)
    model.zero_grad()


# -- training loop -------------------------------------------------------------------------------
def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mon_samples=0)
    with pytest.raises(KeyError):
        TrainConfig.from_dict({"nope": 1})


def test_one_epoch_changes_parameters(table_shapes):
    model = AssemblyModel(ModelConfig(**SMALL))
    before = model.state_dict()
    train(model, table_shapes[:1], TrainConfig(epochs=1, mon_samples=2))
    after = model.state_dict()
    assert any(not np.array_equal(before[k], after[k]) for k in before)


def test_empty_dataset():
    with pytest.raises(ValueError):
        train(AssemblyModel(ModelConfig(**SMALL)), [], TrainConfig(epochs=1))


def test_loss_log_and_determinism(table_shapes, tmp_path):
    cfg = TrainConfig(epochs=3, batch_size=2, mon_samples=2, seed=7)
    logs = []
    for run in range(2):
        path = tmp_path / f"log{run}.csv"
        train(AssemblyModel(ModelConfig(**SMALL)), table_shapes[:4], cfg, log_path=path)
        logs.append(read_loss_log(path))
    assert list(logs[0][0]) == ["epoch", "mean_loss", "L_t", "L_r", "L_s", "wall_ms"]
    assert [r["epoch"] for r in logs[0]] == ["1", "2", "3"]
    strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_ms"} for r in rows]
    assert strip(logs[0]) == strip(logs[1])


def test_resume_continues_exactly(table_shapes, tmp_path):
    shapes = table_shapes[:4]
    cfg = TrainConfig(epochs=4, batch_size=2, mon_samples=2, seed=1)
    straight = train(AssemblyModel(ModelConfig(**SMALL)), shapes, cfg).history
    ckpt = tmp_path / "m.hapw"
    train(AssemblyModel(ModelConfig(**SMALL)), shapes, TrainConfig(**{**cfg.__dict__, "epochs": 2}),
          checkpoint_path=ckpt)
    resumed = train(AssemblyModel(ModelConfig(**SMALL)), shapes, cfg, resume_from=ckpt).history
    assert [r["epoch"] for r in resumed] == [3, 4]
    for a, b in zip(straight[2:], resumed):
        assert a["mean_loss"] == b["mean_loss"]
    model = load_model(ckpt)
    assert model.config.feat_dim == SMALL["feat_dim"]


def test_nan_loss_aborts_with_context(table_shapes):
    model = AssemblyModel(ModelConfig(**SMALL))
    model.part_input.weight.data[...] = np.nan
    with pytest.raises(NumericError, match=r"epoch 1, batch 0, shapes \['table_"):
        train(model, table_shapes[:2], TrainConfig(epochs=1, mon_samples=1))


def test_overfit_smoke(table_shapes):
    model = AssemblyModel(ModelConfig(**SMALL))
    hist = train(model, table_shapes[:2], TrainConfig(epochs=40, lr=1e-2, mon_samples=2, batch_size=2)).history
    losses = [r["mean_loss"] for r in hist]
    assert np.mean(losses[-5:]) < 0.8 * np.mean(losses[:5])
