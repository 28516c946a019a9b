import numpy as np
import pytest

from deepfair import autodiff as ad
from deepfair import network
from deepfair.network import ModelFormatError, NetworkSpec
from deepfair.training import cross_entropy

# (dataset, p, K, growth, depth, reduction) configurations of the tabular and
# embedding benchmarks
SHAPE_ROWS = [
    ("adult", 101, 2, 20, 10, 0.2),
    ("bank", 62, 2, 20, 10, 0.2),
    ("bios", 768, 28, 64, 10, 0.2),
    ("moji", 2304, 2, 64, 10, 0.2),
    ("celeba", 512, 2, 64, 10, 0.2),
]


def rng_batch(n, p, seed=0):
    return np.random.default_rng(seed).normal(size=(n, p))


@pytest.mark.parametrize("name,p,k,g,depth,red", SHAPE_ROWS, ids=[r[0] for r in SHAPE_ROWS])
def test_shapes_for_benchmark_configs(name, p, k, g, depth, red):
    model = network.build(NetworkSpec(p, k, g, depth, red), seed=0)
    latent, logp = network.forward(model, rng_batch(5, p), "train")
    assert latent.shape == (5, p)
    assert logp.shape == (5, k)


def test_depth_seven_shape_propagation():
    spec = NetworkSpec(4, 2, 4, 7, 0.5)
    assert spec.layers_per_block == 1
    model = network.build(spec, seed=0)
    t = model.theta
    # stem 4 -> 8; block0 8 -> 12; trans0 -> 6; block1 -> 10; trans1 -> 5; block2 -> 9; latent -> 4
    assert t["stem.weight"].shape == (4, 8)
    assert t["block0.layer0.inner.weight"].shape == (8, 16)
    assert t["block0.layer0.out.weight"].shape == (16, 4)
    assert t["trans0.fc.weight"].shape == (12, 6)
    assert t["block1.layer0.inner.weight"].shape == (6, 16)
    assert t["trans1.fc.weight"].shape == (10, 5)
    assert t["block2.layer0.inner.weight"].shape == (5, 16)
    assert t["latent.bn.gamma"].shape == (9,)
    assert t["latent.fc.weight"].shape == (9, 4)
    assert model.phi["head.weight"].shape == (4, 2)


def test_depth_ten_has_two_layers_per_block():
    spec = NetworkSpec(3, 2, 2, 10, 0.2)
    assert spec.layers_per_block == 2
    model = network.build(spec)
    assert "block2.layer1.out.weight" in model.theta
    assert "block2.layer2.out.weight" not in model.theta


@pytest.mark.parametrize("kwargs", [
    dict(input_dim=0, output_classes=2),
    dict(input_dim=3, output_classes=1),
    dict(input_dim=3, output_classes=2, growth_rate=0),
    dict(input_dim=3, output_classes=2, depth=3),
    dict(input_dim=3, output_classes=2, reduction=0.0),
    dict(input_dim=3, output_classes=2, reduction=1.5),
])
def test_invalid_spec(kwargs):
    with pytest.raises(ValueError):
        NetworkSpec(**kwargs)


def test_same_seed_same_parameters():
    spec = NetworkSpec(6, 3, 4, 7, 0.5)
    a, b = network.build(spec, 11), network.build(spec, 11)
    for (ka, va), (kb, vb) in zip(a.parameters().items(), b.parameters().items()):
        assert ka == kb and va.value.tobytes() == vb.value.tobytes()
    c = network.build(spec, 12)
    assert c.theta["stem.weight"].value.tobytes() != a.theta["stem.weight"].value.tobytes()


def test_eval_forward_is_pure_and_normalized():
    model = network.build(NetworkSpec(5, 3, 4, 7, 0.5), 0)
    x = rng_batch(20, 5)
    network.forward(model, x, "train")
    snapshot = network.dumps(model)
    a = network.forward(model, x, "eval")[1].value
    b = network.forward(model, x, "eval")[1].value
    assert a.tobytes() == b.tobytes()
    assert network.dumps(model) == snapshot
    np.testing.assert_allclose(np.exp(a).sum(axis=1), 1.0, atol=1e-12)


def test_train_forward_batch_sizes():
    model = network.build(NetworkSpec(3, 2, 2, 7, 0.5), 0)
    network.forward(model, rng_batch(2, 3), "train")
    with pytest.raises(ad.BatchTooSmallError):
        network.forward(model, rng_batch(1, 3), "train")


def test_width_mismatch():
    model = network.build(NetworkSpec(3, 2, 2, 7, 0.5), 0)
    with pytest.raises(ad.DimensionError):
        network.forward(model, rng_batch(4, 5), "eval")


def test_probe_shapes_and_zero_biases():
    probe = network.build_probe(4, 8, 2, seed=0)
    latent, logp = network.forward(probe, rng_batch(7, 4))
    assert latent.shape == (7, 4) and logp.shape == (7, 2)
    assert np.all(probe.phi["hidden.bias"].value == 0.0)
    assert np.all(probe.phi["head.bias"].value == 0.0)
    with pytest.raises(ValueError):
        network.build_probe(4, 0, 2)


def test_dfl_biases_zero():
    model = network.build(NetworkSpec(5, 2, 4, 7, 0.5), 3)
    for name, p in model.parameters().items():
        if name.endswith(".bias") or name.endswith(".beta"):
            assert np.all(p.value == 0.0), name


def test_kaiming_variance():
    probe = network.build_probe(1000, 1000, 2, seed=0)
    var = probe.phi["hidden.weight"].value.var()
    assert abs(var - 2 / 1000) < 0.1 * 2 / 1000


@pytest.mark.parametrize("kind", ["dfl", "probe"])
def test_serialization_round_trip(tmp_path, kind):
    if kind == "dfl":
        model = network.build(NetworkSpec(5, 3, 4, 7, 0.5), 2)
        network.forward(model, rng_batch(10, 5), "train")
    else:
        model = network.build_probe(5, 6, 3, 2)
    blob = network.dumps(model)
    network.save(model, tmp_path / "m.dflm")
    again = network.load(tmp_path / "m.dflm")
    assert network.dumps(again) == blob
    x = rng_batch(4, 5)
    assert network.predict_proba(again, x).tobytes() == network.predict_proba(model, x).tobytes()


def test_serialization_rejects_bad_files():
    blob = network.dumps(network.build_probe(2, 2, 2))
    with pytest.raises(ModelFormatError):
        network.loads(b"garbage\n")
    with pytest.raises(ModelFormatError):
        network.loads(blob.replace(b"DFLMODEL v1", b"DFLMODEL v9", 1))
    with pytest.raises(ModelFormatError):
        network.loads(blob[:-8])


def test_gradient_flow_reaches_every_parameter():
    model = network.build(NetworkSpec(6, 3, 4, 7, 0.5), 0)
    x = rng_batch(32, 6, seed=1)
    y = np.random.default_rng(2).integers(0, 3, 32)
    _, logp = network.forward(model, x, "train")
    cross_entropy(logp, y).backward()
    for name, p in model.parameters().items():
        assert p.grad is not None and np.max(np.abs(p.grad)) > 0, name


def test_copy_is_independent():
    model = network.build_probe(3, 4, 2)
    clone = model.copy()
    clone.phi["head.bias"].value = clone.phi["head.bias"].value + 1
    assert np.all(model.phi["head.bias"].value == 0)
