import itertools
import math
import warnings

import numpy as np
import pytest

from mitransfer.gradcheck import check_gradients
from mitransfer.models import (
    CheckpointError,
    ConfigError,
    ContractError,
    LossBundle,
    ModelSpec,
    SpecError,
    build_model,
    cross_entropy,
    load_checkpoint,
    multitask_loss,
    save_checkpoint,
    select_semihard_triplets,
    triplet_loss,
)
from mitransfer.tensor import DimensionError, Tensor, precision
from mitransfer.training import AdamState, adam_step
from oracles import FROZEN_PARAM_COUNTS, deepconvnet_params, eegnet_params, min2net_params


@pytest.fixture(scope="module")
def batch():
    return np.random.default_rng(0).normal(size=(4, 16, 2000)).astype(np.float32)


@pytest.mark.parametrize(
    "kind, formula, frozen",
    [
        ("eegnet", eegnet_params, FROZEN_PARAM_COUNTS["eegnet"]),
        ("deepconvnet", deepconvnet_params, FROZEN_PARAM_COUNTS["deepconvnet"]),
        ("min2net", min2net_params, FROZEN_PARAM_COUNTS["min2net"]),
    ],
)
def test_parameter_counts(kind, formula, frozen):
    model = build_model(ModelSpec(kind, 16, 2000, 2))
    assert formula(16, 2000, 2) == frozen
    assert model.parameter_count() == frozen


def test_eegnet_forward_is_simplex(batch):
    model = build_model(ModelSpec("eegnet"))
    probs = model.forward(batch).data
    assert probs.shape == (4, 2)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(probs >= 0)


def test_deepconvnet_forward_is_simplex(batch):
    model = build_model(ModelSpec("deepconvnet"))
    probs = model.forward(batch[:2]).data
    assert probs.shape == (2, 2)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_min2net_shapes(batch):
    model = build_model(ModelSpec("min2net"))
    recon, z, probs = model.forward(batch)
    assert recon.shape == batch.shape
    assert z.shape == (4, 64)
    np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-6)
    assert np.mean((recon.data - batch) ** 2) > 0


def test_spec_errors():
    with pytest.raises(SpecError):
        ModelSpec("eegnet", n_channels=0)
    with pytest.raises(SpecError):
        build_model(ModelSpec("deepconvnet", 16, 40, 2))
    with pytest.raises(SpecError):
        ModelSpec("min2net", dropout_rate=0.3)
    with pytest.raises(SpecError):
        ModelSpec("resnet")
    with pytest.raises(SpecError):
        build_model(ModelSpec("min2net", n_samples=2000, min2net_pools=(7, 7)))


def test_dropout_defaults():
    assert ModelSpec("eegnet").dropout_rate == 0.4
    assert ModelSpec("deepconvnet").dropout_rate == 0.5
    assert ModelSpec("min2net").dropout_rate is None


def test_wrong_input_shape(batch):
    model = build_model(ModelSpec("eegnet"))
    with pytest.raises(DimensionError):
        model.forward(batch[:, :8])


def test_seed_determines_weights(batch):
    a = build_model(ModelSpec("eegnet", seed=3)).forward(batch).data
    b = build_model(ModelSpec("eegnet", seed=3)).forward(batch).data
    c = build_model(ModelSpec("eegnet", seed=4)).forward(batch).data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_predict_tie_goes_to_lower_class():
    model = build_model(ModelSpec("eegnet", n_channels=2, n_samples=64, temporal_kernel=8, eegnet_pools=(2, 2)))
    model.predict_proba = lambda x, batch_size=64: np.full((3, 2), 0.5)
    assert model.predict(np.zeros((3, 2, 64))).tolist() == [0, 0, 0]


# ----------------------------------------------------------------------
# losses


def test_cross_entropy_values():
    assert cross_entropy(Tensor(np.array([[1.0, 0.0]])), [0]).item() == pytest.approx(0.0, abs=1e-7)
    assert cross_entropy(Tensor(np.array([[0.5, 0.5]])), [1]).item() == pytest.approx(math.log(2), abs=1e-6)
    assert cross_entropy(Tensor(np.array([[0.9, 0.1]])), [0]).item() == pytest.approx(0.10536, abs=1e-5)
    # the probability floor keeps a confident miss finite
    assert math.isfinite(cross_entropy(Tensor(np.array([[1.0, 0.0]])), [1]).item())


def test_cross_entropy_contract():
    with pytest.raises(ContractError):
        cross_entropy(Tensor(np.array([[0.5, 0.5]])), [2])
    with pytest.raises(ContractError):
        cross_entropy(Tensor(np.array([[0.5, 0.5]])), [0, 1])


def brute_force_triplet(points, labels, margin):
    """Enumerate every (a, p, n) and apply the semi-hard rule by hand."""
    d = lambda i, j: float(np.linalg.norm(points[i] - points[j]))  # noqa: E731
    losses = []
    for a, p in itertools.permutations(range(len(labels)), 2):
        if labels[a] != labels[p]:
            continue
        candidates = [(d(a, n), n) for n in range(len(labels)) if labels[n] != labels[a]]
        farther = [c for c in candidates if c[0] > d(a, p)]
        d_an = min(farther)[0] if farther else max(candidates)[0]
        losses.append(max(0.0, d(a, p) - d_an + margin))
    return float(np.mean(losses))


def test_triplet_hand_placed_points():
    pts = np.array([[0.0], [1.0], [1.5], [3.0]])
    labels = [0, 0, 1, 1]
    with precision("double"):
        value = triplet_loss(Tensor(pts), labels, margin=1.0).item()
    assert brute_force_triplet(pts, labels, 1.0) == pytest.approx(0.5)
    assert value == pytest.approx(0.5, abs=1e-12)


def test_triplet_matches_brute_force_random():
    rng = np.random.default_rng(5)
    for _ in range(20):
        pts = rng.normal(size=(7, 3))
        labels = rng.integers(0, 2, size=7)
        if len(set(labels)) < 2 or np.bincount(labels).max() < 2:
            continue
        with precision("double"):
            value = triplet_loss(Tensor(pts), labels, margin=0.7).item()
        assert value == pytest.approx(brute_force_triplet(pts, labels, 0.7), abs=1e-10)


def test_triplet_degenerate_cases():
    far = np.array([[0.0, 0.0], [0.0, 0.0], [5.0, 0.0], [5.0, 0.0]])
    assert triplet_loss(Tensor(far), [0, 0, 1, 1], margin=1.0).item() == 0.0
    same = np.zeros((4, 2))
    assert triplet_loss(Tensor(same), [0, 0, 1, 1], margin=1.0).item() == pytest.approx(1.0)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        assert triplet_loss(Tensor(same), [1, 1, 1, 1]).item() == 0.0
    assert any("single class" in str(w.message) for w in caught)


def test_semihard_selection_prefers_farther_negative():
    dist = np.array(
        [
            [0.0, 1.0, 0.5, 2.0],
            [1.0, 0.0, 3.0, 4.0],
            [0.5, 3.0, 0.0, 1.0],
            [2.0, 4.0, 1.0, 0.0],
        ]
    )
    a, p, n = select_semihard_triplets(dist, np.array([0, 0, 1, 1]))
    chosen = dict(zip(zip(a.tolist(), p.tolist()), n.tolist()))
    assert chosen[(0, 1)] == 3  # 0.5 is closer than the positive, 2.0 is semi-hard
    assert chosen[(1, 0)] == 2


def test_multitask_loss():
    parts = [Tensor(np.array(v)) for v in (0.5, 0.2, 0.3)]
    assert multitask_loss(LossBundle(*parts)).item() == pytest.approx(1.0)
    assert multitask_loss(LossBundle(*parts, weights=(1, 0, 0))).item() == pytest.approx(0.5)
    with pytest.raises(ConfigError):
        multitask_loss(LossBundle(*parts, weights=(1, -1, 0)))


def _tiny_min2net(weights=(1.0, 1.0, 1.0)):
    return build_model(
        ModelSpec("min2net", n_channels=2, n_samples=16, latent_dim=3, min2net_pools=(2, 2),
                  min2net_kernels=(3, 3), precision="double", loss_weights=weights, seed=2)
    )  # fmt: skip


def test_multitask_gradient_is_sum_of_components():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 2, 16))
    y = np.array([0, 1, 0, 1, 0, 1])
    model = _tiny_min2net()
    encoder = [p for layer in model.encoder for p in layer.parameters()]
    with precision("double"):
        model.zero_grad()
        model.loss(x, y)[0].backward()
        total = [p.grad.copy() for p in encoder]
        summed = [np.zeros_like(g) for g in total]
        for w in ((1, 0, 0), (0, 1, 0), (0, 0, 1)):
            model.spec.loss_weights = w
            model.zero_grad()
            model.loss(x, y)[0].backward()
            for acc, p in zip(summed, encoder):
                if p.grad is not None:
                    acc += p.grad
        model.spec.loss_weights = (1.0, 1.0, 1.0)
        model.zero_grad()
        for t, s in zip(total, summed):
            np.testing.assert_allclose(t, s, rtol=1e-10, atol=1e-12)
        err = check_gradients(lambda: model.loss(x, y, training=False)[0], encoder)
    assert err < 1e-6


def test_min2net_reconstructs_constant_trials():
    spec = ModelSpec("min2net", n_channels=4, n_samples=100, seed=0, loss_weights=(0.0, 1.0, 0.0))
    model = build_model(spec)
    X = np.repeat(np.linspace(-1, 1, 8)[:, None, None], 4, 1).repeat(100, 2).astype(np.float32)
    y = np.array([0, 1] * 4)
    params = model.parameters()
    state = AdamState.zeros_like(params)
    for _ in range(300):
        model.zero_grad()
        loss, _ = model.loss(X, y)
        loss.backward()
        adam_step(params, [p.grad for p in params], state, 0.01)
    recon, _, _ = model.forward(X)
    assert np.mean((recon.data - X) ** 2) < 1e-2


def test_max_norm_constraints():
    model = build_model(ModelSpec("eegnet"))
    constrained = {p.name: p for p in model.constrained_parameters()}
    assert set(constrained) == {"spatial.weight", "classifier.weight"}
    dense = constrained["classifier.weight"]
    dense.data *= 100
    model.apply_constraints()
    norms = np.sqrt((dense.data.astype(np.float64) ** 2).sum(axis=0))
    assert norms.max() <= 0.25 * (1 + 1e-6)
    spatial = constrained["spatial.weight"]
    assert np.sqrt((spatial.data.astype(np.float64) ** 2).sum(axis=(1, 2, 3))).max() <= 1.0 + 1e-6
    assert build_model(ModelSpec("deepconvnet")).constrained_parameters() == []


# ----------------------------------------------------------------------
# checkpoints


@pytest.mark.parametrize("kind", ["eegnet", "min2net"])
def test_checkpoint_round_trip(tmp_path, batch, kind):
    model = build_model(ModelSpec(kind, seed=11))
    for buf in model.buffers():
        buf[...] = 0.5
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.spec == model.spec
    for a, b in zip(model.state(), loaded.state()):
        np.testing.assert_array_equal(a, b)
    if kind == "eegnet":
        np.testing.assert_array_equal(model.forward(batch).data, loaded.forward(batch).data)


def test_checkpoint_corruption(tmp_path):
    model = build_model(ModelSpec("eegnet", n_channels=2, n_samples=64, temporal_kernel=8, eegnet_pools=(2, 2)))
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    raw = path.read_bytes()
    (tmp_path / "magic.ckpt").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short.ckpt").write_bytes(raw[:-3])
    (tmp_path / "long.ckpt").write_bytes(raw + b"\0")
    for name, where in (("magic", "offset 0"), ("short", "truncated"), ("long", "trailing")):
        with pytest.raises(CheckpointError, match=where):
            load_checkpoint(tmp_path / f"{name}.ckpt")
