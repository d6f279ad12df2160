import dataclasses
import math

import numpy as np
import pytest

from stylemetry import arnet, nn
from stylemetry.experiments.synth import generate_synthetic
from stylemetry.featurize import FeaturizeConfig, featurize_trips

TINY = dict(gru1_units=4, gru2_units=4, bottleneck_units=3, n_classes=2)


def _tiny(mode="arnet", seed=0, **kw):
    cfg = arnet.ArnetConfig(**{**TINY, **kw}, mode=mode, seed=seed)
    model = arnet.ArnetModel.init(cfg, ["a", "b"])
    # nonzero biases so every parameter's gradient is exercised
    rng = np.random.default_rng(seed + 100)
    for p in model.params():
        if p.name.split(".")[1].startswith("b"):
            p.value[...] = rng.normal(scale=0.3, size=p.shape)
    return model


def _batch(b=3, frames=6, seed=1):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(b, 35, frames)), rng.integers(0, 2, b)


# -- gradients -----------------------------------------------------------------


@pytest.mark.parametrize("mode", ["arnet", "ronet", "conet"])
def test_full_gradient_matches_differences(mode):
    model = _tiny(mode, dropout_p=0.0, target_grad=True)
    X, y = _batch()
    labels = None if mode == "ronet" else y

    def loss():
        return arnet.loss_and_grad(model, X, labels, train=False).J

    assert nn.gradient_check(loss, model.params(), n_probes=None, h=1e-5) < 1e-4


def test_full_gradient_with_fixed_dropout_mask():
    model = _tiny(dropout_p=0.5, target_grad=True)
    X, y = _batch()
    mask = np.random.default_rng(9).integers(0, 2, size=(3, 4)) * 2.0

    def loss():
        return arnet.loss_and_grad(model, X, y, train=True, mask=mask).J

    assert nn.gradient_check(loss, model.params(), n_probes=None) < 1e-4


def test_constant_target_gradient_matches_frozen_surrogate():
    # with the target held constant the analytic gradient is that of
    # J_c + mean ||x_hat - x_tilde_0||^2 + lam * mean ||s||_1 with x_tilde_0 frozen
    model = _tiny(dropout_p=0.0, lam=0.1)
    X, y = _batch()
    frozen = arnet.forward(model, X).x_tilde.copy()

    def loss():
        arnet.loss_and_grad(model, X, y, train=False)
        r = arnet.forward(model, X)
        J_c, _ = nn.softmax_xent(r.logits, y)
        J_r, *_ = nn.mse_l1(r.x_hat, frozen, r.s, 0.1)
        return J_c + J_r

    assert nn.gradient_check(loss, model.params(), n_probes=None) < 1e-4


def test_detached_lambda_zero_arnet_equals_conet():
    X, y = _batch(b=5)
    a = _tiny("arnet", lam=0.0)
    c = _tiny("conet", lam=0.0)
    oa = arnet.loss_and_grad(a, X, y, True, np.random.default_rng(3), detach_reconstruction=True)
    oc = arnet.loss_and_grad(c, X, y, True, np.random.default_rng(3), detach_reconstruction=True)
    assert oa.J_c == oc.J_c == oc.J
    shared = [p for p in a.params() if not p.name.startswith(("fc1", "fc2"))]
    others = [p for p in c.params() if not p.name.startswith(("fc1", "fc2"))]
    for pa, pc in zip(shared, others):
        assert np.array_equal(pa.grad, pc.grad), pa.name
        nn.adadelta_step(pa)
        nn.adadelta_step(pc)
        assert np.array_equal(pa.value, pc.value), pa.name


# -- forward and objective ---------------------------------------------------------


def test_zero_model_zero_input():
    model = arnet.ArnetModel.init(arnet.ArnetConfig(**TINY), zero=True)
    r = arnet.forward(model, np.zeros((2, 35, 6)))
    for part in (r.x_tilde, r.s, r.x_hat, r.logits):
        assert np.all(part == 0)
    np.testing.assert_allclose(arnet.predict_segment(model, np.zeros((2, 35, 6))), 0.5)
    assert np.all(arnet.encode_segment(model, np.zeros((1, 35, 6))) == 0)


def test_forward_ranges_and_determinism():
    model = _tiny(seed=4)
    X = 10 * np.random.default_rng(2).normal(size=(8, 35, 6))
    r1 = arnet.forward(model, X)
    r2 = arnet.forward(model, X)
    for f in dataclasses.fields(r1):
        assert np.array_equal(getattr(r1, f.name), getattr(r2, f.name))
    assert np.all(r1.s >= 0)
    assert np.all(np.abs(r1.x_hat) < 1)
    # inference: x_tilde is the clean second-GRU state
    Xn = np.ascontiguousarray(X.transpose(2, 0, 1))
    h1, _ = nn.gru_forward(Xn, model.gru1)
    h2, _ = nn.gru_forward(h1, model.gru2, return_sequence=False)
    np.testing.assert_array_equal(r1.x_tilde, h2)
    p = arnet.predict_segment(model, X)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_forward_shape_error():
    with pytest.raises(ValueError):
        arnet.forward(_tiny(), np.zeros((1, 34, 6)))


def _result(b=1, k=3, h=4, c=50, s=None):
    s = np.zeros((b, k)) if s is None else np.asarray(s, dtype=float)
    return arnet.ForwardResult(np.zeros((b, h)), s, np.zeros((b, h)), np.zeros((b, c)))


def test_objective_gating_and_composition():
    cfg = arnet.ArnetConfig(n_classes=50, lam=1e-5)
    obj, _ = arnet.objective(_result(s=[[1.0, 2.0, 0.0]]), [7], cfg)
    assert obj.J == pytest.approx(3e-5 + math.log(50), abs=1e-12)
    obj, _ = arnet.objective(_result(s=[[1.0, 2.0, 0.0]]), [7], cfg.replace(mode="conet"))
    assert obj.J_r == 0 and obj.J == obj.J_c
    assert obj.J_c == pytest.approx(math.log(50), abs=1e-12)
    obj, grads = arnet.objective(_result(s=[[1.0, 2.0, 0.0]]), None, cfg.replace(mode="ronet"))
    assert obj.J_c == 0 and obj.J == obj.J_r == pytest.approx(3e-5, abs=1e-12)
    assert grads["logits"] is None
    with pytest.raises(ValueError, match="labels"):
        arnet.objective(_result(), None, cfg)


def test_predict_segment_ronet_raises():
    with pytest.raises(ValueError, match="no classifier head"):
        arnet.predict_segment(_tiny("ronet"), np.zeros((1, 35, 6)))


@pytest.mark.parametrize(
    "kw",
    [dict(mode="bogus"), dict(lam=-1.0), dict(gru1_units=0), dict(dropout_p=1.0), dict(patience=0)],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        arnet.ArnetConfig(**kw)


# -- training ------------------------------------------------------------------


@pytest.fixture(scope="module")
def two_drivers():
    trips = generate_synthetic(2, 6, 400, seed=3)
    mats = featurize_trips(trips, FeaturizeConfig(128, 4))
    train = [m for m in mats if not m.trip_id.endswith(("4", "5"))]
    val = [m for m in mats if m.trip_id.endswith(("4", "5"))]
    return train, val


def _small_cfg(**kw):
    return arnet.ArnetConfig(**{**dict(gru1_units=16, gru2_units=16, bottleneck_units=8, batch_size=32, max_epochs=8), **kw})


def test_training_lowers_classification_loss(two_drivers):
    model, hist = arnet.fit(*two_drivers, _small_cfg(max_epochs=60, patience=60))
    assert model.labels == ["d0000", "d0001"]
    assert hist.records[-1].J_c < math.log(2)
    _, X, y, _, _ = arnet.prepare_training(*two_drivers, _small_cfg())
    assert arnet.segment_accuracy(model, X, y) > 0.5
    # the returned parameters are the best-validation snapshot
    assert max(r.val_accuracy for r in hist.records) == hist.records[hist.best_epoch - 1].val_accuracy
    _, _, _, Xv, yv = arnet.prepare_training(*two_drivers, _small_cfg())
    assert arnet.segment_accuracy(model, Xv, yv) == hist.records[hist.best_epoch - 1].val_accuracy


def test_training_is_deterministic(two_drivers):
    cfg = _small_cfg(max_epochs=2)
    m1, h1 = arnet.fit(*two_drivers, cfg)
    m2, h2 = arnet.fit(*two_drivers, cfg)
    strip = lambda h: [dataclasses.replace(r, seconds=0.0) for r in h.records]
    assert strip(h1) == strip(h2)
    rows = [line.split(",") for line in h1.to_csv().splitlines()[1:]]
    assert all(float(v) == float(v) for row in rows for v in row[1:6])
    assert arnet.checkpoint_bytes(m1) == arnet.checkpoint_bytes(m2)


def test_zero_learning_rate_keeps_parameters(two_drivers):
    model, X, y, Xv, yv = arnet.prepare_training(*two_drivers, _small_cfg(lr=0.0, max_epochs=2))
    before = [p.value.copy() for p in model.params()]
    arnet.train(model, X, y, Xv, yv)
    for a, p in zip(before, model.params()):
        assert np.array_equal(a, p.value)


def test_ronet_training_tracks_reconstruction(two_drivers):
    model, hist = arnet.fit(*two_drivers, _small_cfg(mode="ronet", max_epochs=4))
    assert all(math.isnan(r.val_accuracy) for r in hist.records)
    best = hist.records[hist.best_epoch - 1].val_J_r
    assert best == min(r.val_J_r for r in hist.records)


def test_training_input_errors(two_drivers):
    train, val = two_drivers
    with pytest.raises(ValueError):
        arnet.fit([], val, _small_cfg())
    model, X, y, Xv, yv = arnet.prepare_training(train, val, _small_cfg())
    with pytest.raises(ValueError, match="labels"):
        arnet.train(model, X, y + 5, Xv, yv)
    with pytest.raises(ValueError):
        arnet.train(model, X[:0], y[:0], Xv, yv)
    stranger = [dataclasses.replace(m, meta=m.meta._replace(driver_id="zzz")) for m in val[:1]]
    with pytest.raises(ValueError, match="zzz"):
        arnet.prepare_training(train, stranger, _small_cfg())


# -- checkpoints -----------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    model = _tiny(seed=6)
    model.input_mean = np.linspace(-1, 1, 35)
    model.input_std = np.linspace(0.5, 2, 35)
    path = tmp_path / "m.ckpt"
    arnet.save_model(model, path)
    loaded = arnet.load_model(path)
    assert arnet.checkpoint_bytes(loaded) == path.read_bytes()
    assert loaded.config == model.config and loaded.labels == model.labels
    X, _ = _batch(b=4)
    a = arnet.forward(model, X).logits
    b = arnet.forward(loaded, X).logits
    assert np.max(np.linalg.norm(a - b, axis=1) / np.linalg.norm(a, axis=1)) < 1e-5


def test_checkpoint_header_layout():
    data = arnet.checkpoint_bytes(_tiny())
    header = data[: data.index(b"\0")].decode().split("\n")
    assert header[0] == "ARNETCKPT1"
    keys = [item.split("=")[0] for item in header[1].split()]
    assert keys == sorted(keys)
    assert header[2] == "0:a,1:b"
    assert header[3].startswith("input_mean 1 35 0 140")


def test_checkpoint_corruption_fails_cleanly():
    data = arnet.checkpoint_bytes(_tiny())
    with pytest.raises(arnet.CheckpointError):
        arnet.model_from_bytes(b"NOTMAGIC" + data[10:])
    with pytest.raises(arnet.CheckpointError, match="fc3"):
        arnet.model_from_bytes(data[:-4])
    text = data.replace(b"fc1.W 2 3,4", b"fc1.W 2 4,3")
    with pytest.raises(arnet.CheckpointError, match="fc1.W"):
        arnet.model_from_bytes(text)
    with pytest.raises(arnet.CheckpointError):
        arnet.model_from_bytes(b"no separator")


def test_l1_weight_sparsifies_codes(two_drivers):
    # a large weight makes the effect visible in a few epochs
    def codes(lam):
        model, _ = arnet.fit(*two_drivers, _small_cfg(mode="ronet", lam=lam, max_epochs=10, patience=10))
        _, X, _, _, _ = arnet.prepare_training(*two_drivers, _small_cfg())
        return arnet.encode_segment(model, X)

    dense, sparse = codes(0.0), codes(1.0)
    assert (sparse < 1e-8).mean() > (dense < 1e-8).mean()
    assert sparse.sum(axis=1).mean() < dense.sum(axis=1).mean()
