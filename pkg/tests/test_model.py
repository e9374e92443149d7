import io
import math

import numpy as np
import pytest

from grl_dann.data import Batch, Dataset, Sample
from grl_dann.errors import CompositionError, ConfigError, DataError, ShapeError
from grl_dann.layers import softmax_xent
from grl_dann.model import (
    FEATURE_DIM, TrainConfig, build_network, compute_gradients, fit, load_checkpoint,
    read_checkpoint, save_checkpoint, train_step, write_checkpoint,
)
from grl_dann.optim import ScheduleConfig, SgdMomentum
from grl_dann.tensor_core import CHECK_DTYPE, make_rng


def _tiny_sets(n=4, seed=0):
    rng = make_rng(seed)
    src = Dataset([Sample(rng.random((4, 80, 80), dtype=np.float32), i % 3, "source")
                   for i in range(n)])
    tgt = Dataset([Sample(rng.random((4, 80, 80), dtype=np.float32), None, "target")
                   for i in range(n)])
    return src, tgt


def _batch(seed=0, n_src=2, n_tgt=2, dtype=np.float32):
    rng = make_rng(seed)
    images = rng.random((n_src + n_tgt, 4, 80, 80)).astype(dtype)
    return Batch(images, rng.integers(0, 3, n_src), np.array([0] * n_src + [1] * n_tgt), 0)


def _params(net):
    return {name: value.copy() for _, name, value, _ in net.named_parameters()}


def _zero_heads(net):
    for head in (net.label_predictor, net.domain_classifier):
        for _, value, _ in head.parameters():
            value[...] = 0


def test_shape_contract():
    net = build_network(make_rng(0))
    x = make_rng(1).random((3, 4, 80, 80), dtype=np.float32)
    f = net.features(x)
    assert f.shape == (3, FEATURE_DIM)
    assert net.label_logits(f).shape == (3, 3)
    assert net.domain_logits(f).shape == (3, 2)
    assert net.predict(x, chunk=2).shape == (3, 3)


@pytest.mark.parametrize("shape", [(2, 3, 80, 80), (2, 4, 72, 72), (4, 80, 80)])
def test_rejects_wrong_input_shape(shape):
    with pytest.raises(ShapeError):
        build_network(make_rng(0)).features(np.zeros(shape, np.float32))


def test_zeroed_heads_give_uniform_losses():
    net = build_network(make_rng(0))
    _zero_heads(net)
    b = _batch()
    ly, ld = compute_gradients(net, b.images, b.labels, b.domains, 0.5)
    assert ly == pytest.approx(math.log(3), abs=1e-6)
    assert ld == pytest.approx(math.log(2), abs=1e-6)


def test_parameter_roles_cover_all_heads():
    roles = {role for role, *_ in build_network(make_rng(0)).named_parameters()}
    assert roles == {"feature_extractor", "label_predictor", "domain_classifier"}


def test_domain_head_is_blind_to_label_loss():
    """Label loss never reaches the domain head, and vice versa."""
    net = build_network(make_rng(0), dtype=CHECK_DTYPE)
    b = _batch(dtype=CHECK_DTYPE)
    f = net.features(b.images)
    net.zero_grad()
    _, g = softmax_xent(net.label_logits(f[:2]), b.labels)
    net.label_predictor.backward(g)
    assert not any(grad.any() for _, _, grad in net.domain_classifier.parameters())
    net.zero_grad()
    _, g = softmax_xent(net.domain_logits(f), b.domains)
    net.domain_classifier.backward(g)
    assert not any(grad.any() for _, _, grad in net.label_predictor.parameters())


def test_reversal_scales_extractor_gradient_by_minus_lambda():
    net = build_network(make_rng(2), dtype=CHECK_DTYPE)
    b = _batch(2, dtype=CHECK_DTYPE)
    for _, value, _ in net.label_predictor.parameters():
        value[...] = 0                     # extractor then sees only the domain signal

    # plain dL_d/dtheta_f, backpropagated around the reversal layer
    net.zero_grad()
    f = net.features(b.images)
    _, g = softmax_xent(net.domain_logits(f), b.domains)
    for layer in reversed(net.domain_classifier.layers[1:]):
        g = layer.backward(g)
    net.feature_extractor.backward(g)
    plain = [g.copy() for role, _, _, g in net.named_parameters() if role == "feature_extractor"]
    assert any(p.any() for p in plain)

    lam = 0.3
    compute_gradients(net, b.images, b.labels, b.domains, lam)
    reversed_ = [g for role, _, _, g in net.named_parameters() if role == "feature_extractor"]
    for want, got in zip(plain, reversed_):
        np.testing.assert_allclose(got, -lam * want, rtol=1e-9, atol=1e-15)


def _domain_loss_after_step(net, b, role, lr=1e-3):
    saved = _params(net)
    compute_gradients(net, b.images, b.labels, b.domains, 1.0)
    for r, _, value, grad in net.named_parameters():
        if r == role:
            value -= lr * grad
    loss = softmax_xent(net.domain_logits(net.features(b.images)), b.domains)[0]
    for _, name, value, _ in net.named_parameters():
        value[...] = saved[name]
    return loss


def test_saddle_point_step_directions():
    """A small step lowers L_d through theta_d and raises it through theta_f."""
    net = build_network(make_rng(5), dtype=CHECK_DTYPE)
    b = _batch(5, dtype=CHECK_DTYPE)
    _, ld0 = compute_gradients(net, b.images, b.labels, b.domains, 1.0)
    assert _domain_loss_after_step(net, b, "domain_classifier") < ld0
    # silence the label head so only the reversed domain signal moves theta_f
    for _, value, _ in net.label_predictor.parameters():
        value[...] = 0
    assert _domain_loss_after_step(net, b, "feature_extractor") > ld0


def test_zero_learning_rate_leaves_parameters():
    net = build_network(make_rng(0))
    before = _params(net)
    cfg = TrainConfig(schedule=ScheduleConfig(mu0=1e-30))
    train_step(net, SgdMomentum(0.0), _batch(), 0.5, cfg)
    for _, name, value, _ in net.named_parameters():
        np.testing.assert_allclose(value, before[name], atol=1e-25)


def test_zero_lambda_matches_label_only_training():
    src, tgt = _tiny_sets()
    cfg = TrainConfig(epochs=2, batch_size=4, lambda_mode="zero")
    net = build_network(make_rng(0))
    frozen_domain = {n: v.copy() for r, n, v, _ in net.named_parameters() if r == "domain_classifier"}
    fit(net, src, tgt, cfg)

    # reference: plain SGD on the label loss only, using the same batches
    from grl_dann.data import make_batches
    from grl_dann.optim import lr_inverse_decay
    ref = build_network(make_rng(0))
    opt = SgdMomentum(cfg.momentum)
    batches = list(make_batches(src, tgt, 4, cfg.seed, epochs=2))
    total = len(batches)
    for t, b in enumerate(batches):
        ref.zero_grad()
        f = ref.features(b.images)
        _, g = softmax_xent(ref.label_logits(f[:2]), b.labels)
        df = np.zeros_like(f)
        df[:2] = ref.label_predictor.backward(g)
        ref.feature_extractor.backward(df)
        mu = lr_inverse_decay(t / (total - 1), cfg.schedule)
        for role, name, value, grad in ref.named_parameters():
            if role != "domain_classifier":
                opt.step(name, value, grad, mu)
        ref.clear_cache()

    got = {n: v for r, n, v, _ in net.named_parameters()}
    for r, name, value, _ in ref.named_parameters():
        np.testing.assert_allclose(got[name], value, rtol=1e-5, atol=1e-7)
    for name, value in frozen_domain.items():
        np.testing.assert_array_equal(got[name], value)


def test_fit_is_deterministic_and_records_history():
    src, tgt = _tiny_sets()
    cfg = TrainConfig(epochs=3, batch_size=4, seed=7)
    runs = []
    for _ in range(2):
        net = build_network(make_rng(7))
        history = fit(net, src, tgt, cfg)
        runs.append((history, _params(net)))
    (h1, p1), (h2, p2) = runs
    assert len(h1) == 3 * 2
    assert [r.label_loss for r in h1] == [r.label_loss for r in h2]
    assert all(np.array_equal(p1[k], p2[k]) for k in p1)
    assert h1[0].progress == 0.0 and h1[-1].progress == 1.0
    assert h1[0].lam == 0.0
    assert h1[-1].lam == pytest.approx(0.999909204262595, rel=1e-12)
    assert h1[-1].learning_rate == pytest.approx(8.278001303808509e-05, rel=1e-12)
    for r in h1:
        assert r.objective == pytest.approx(r.label_loss - r.lam * r.domain_loss)


def test_single_domain_batch_is_rejected():
    batch = _batch()
    batch = Batch(batch.images, batch.labels, np.zeros(4, int), 0)
    with pytest.raises(CompositionError):
        train_step(build_network(make_rng(0)), SgdMomentum(), batch, 0.1, TrainConfig())


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lambda_mode="sometimes")
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=3)
    with pytest.raises(ConfigError):
        train_step(build_network(make_rng(0)), SgdMomentum(), _batch(), 1.5, TrainConfig())


def test_checkpoint_round_trip(tmp_path):
    net = build_network(make_rng(3))
    x = make_rng(4).random((2, 4, 80, 80), dtype=np.float32)
    buf = io.BytesIO()
    save_checkpoint(buf, net, {"epoch": 2})
    buf.seek(0)
    back = load_checkpoint(buf)
    for (_, n1, v1, _), (_, n2, v2, _) in zip(net.named_parameters(), back.named_parameters()):
        assert n1 == n2 and v1.tobytes() == v2.tobytes()
    f1, f2 = net.features(x), back.features(x)
    assert f1.tobytes() == f2.tobytes()
    assert net.label_logits(f1).tobytes() == back.label_logits(f2).tobytes()
    write_checkpoint(tmp_path / "net.ckpt", net)
    assert np.array_equal(read_checkpoint(tmp_path / "net.ckpt").predict(x), net.predict(x))


def test_checkpoint_rejects_mismatch():
    net = build_network(make_rng(3))
    buf = io.BytesIO()
    save_checkpoint(buf, net)
    raw = buf.getvalue().replace(b'"version": 1', b'"version": 99', 1)
    with pytest.raises(DataError, match="version"):
        load_checkpoint(io.BytesIO(raw))
    with pytest.raises(ShapeError):
        load_checkpoint(io.BytesIO(buf.getvalue()[:-100]))
