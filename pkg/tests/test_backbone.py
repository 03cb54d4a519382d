import zlib

import numpy as np
import pytest

from hyperdys import autodiff as ad
from hyperdys.backbone import (
    TRUNK_NAMES,
    AlexNet,
    BackboneConfig,
    extract_features,
    from_torchvision_state,
    load_weights,
    read_state,
    save_state,
    save_weights,
)
from hyperdys.errors import ConfigError, CorruptionError, FormatError, IncompatibleWeightsError, ShapeError


def test_stage_shapes(alexnet, images):
    trace = []
    h = alexnet.trunk(ad.Tensor(images), trace=trace)
    assert dict(trace) == {
        "conv1": (2, 64, 55, 55),
        "conv1.pool": (2, 64, 27, 27),
        "conv2": (2, 192, 27, 27),
        "conv2.pool": (2, 192, 13, 13),
        "conv3": (2, 384, 13, 13),
        "conv4": (2, 256, 13, 13),
        "conv5": (2, 256, 13, 13),
        "conv5.pool": (2, 256, 6, 6),
        "flatten": (2, 9216),
    }
    assert h.shape == (2, 4096)


def test_parameter_count(alexnet):
    conv = [(64, 3, 11), (192, 64, 5), (384, 192, 3), (256, 384, 3), (256, 256, 3)]
    dense = [(9216, 4096), (4096, 4096), (4096, 768)]
    expected = sum(o * i * k * k + o for o, i, k in conv) + sum(i * o + o for i, o in dense)
    assert expected == 60_150_336
    assert alexnet.params.count() == expected


def test_feature_dimension_and_single_image(alexnet, images):
    assert extract_features(alexnet, images[0]).shape == (1, 768)
    with pytest.raises(ShapeError):
        extract_features(alexnet, np.zeros((3, 128, 128), np.float32))


def test_same_seed_same_weights_different_seed_differs():
    a = AlexNet(BackboneConfig(pretrained=False), seed=3)
    b = AlexNet(BackboneConfig(pretrained=False), seed=3)
    c = AlexNet(BackboneConfig(pretrained=False), seed=4)
    assert np.array_equal(a.params["conv1.weight"].data, b.params["conv1.weight"].data)
    assert not np.array_equal(a.params["conv1.weight"].data, c.params["conv1.weight"].data)


def test_pretrained_requires_path():
    with pytest.raises(ConfigError):
        BackboneConfig(pretrained=True)


def test_weights_roundtrip_bit_exact(tmp_path, alexnet, images):
    path = tmp_path / "w.hwts"
    save_weights(alexnet, path)
    other = AlexNet(BackboneConfig(pretrained=False), seed=99)
    load_weights(path, other)
    for name in alexnet.params:
        assert np.array_equal(alexnet.params[name].data, other.params[name].data)
    x = images[:1]
    assert np.array_equal(alexnet(x).data, other(x).data)


def test_pretrained_loads_trunk(tmp_path, alexnet):
    path = tmp_path / "trunk.hwts"
    save_weights(alexnet, path, names=TRUNK_NAMES)
    net = AlexNet(BackboneConfig(pretrained=True, weights_path=str(path)), seed=5)
    assert np.array_equal(net.params["fc7.weight"].data, alexnet.params["fc7.weight"].data)


def test_reshaped_tensor_rejected_without_mutation(tmp_path):
    store = ad.ParamStore()
    store.add("a", np.ones(3))
    store.add("b", np.ones((2, 2)))
    path = tmp_path / "bad.hwts"
    save_state({"a": np.zeros(3), "b": np.zeros(4)}, path)
    with pytest.raises(IncompatibleWeightsError):
        load_weights(path, store)
    # the well-shaped tensor listed first must not have been written
    assert np.all(store["a"].data == 1)


def test_missing_and_unknown_tensors(tmp_path):
    store = ad.ParamStore()
    store.add("a", np.ones(3))
    store.add("b", np.ones(2))
    path = tmp_path / "part.hwts"
    save_state({"a": np.zeros(3)}, path)
    with pytest.raises(IncompatibleWeightsError):
        load_weights(path, store)
    load_weights(path, store, require_all=False)
    assert np.all(store["a"].data == 0)
    save_state({"zzz": np.zeros(3)}, path)
    with pytest.raises(IncompatibleWeightsError):
        load_weights(path, store, require_all=False)


def test_crc_corruption_detected(tmp_path):
    path = tmp_path / "c.hwts"
    save_state({"w": np.arange(6, dtype=np.float32).reshape(2, 3)}, path)
    raw = bytearray(path.read_bytes())
    assert zlib.crc32(bytes(raw[:-4])) == int.from_bytes(raw[-4:], "little")
    raw[30] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptionError):
        read_state(path)


def test_empty_and_foreign_files(tmp_path):
    path = tmp_path / "e.hwts"
    path.write_bytes(b"")
    with pytest.raises(FormatError):
        read_state(path)
    path.write_bytes(b"PK\x03\x04" + bytes(40))
    with pytest.raises(FormatError):
        read_state(path)


def test_save_is_atomic_and_leaves_no_temp(tmp_path):
    path = tmp_path / "a.hwts"
    save_state({"w": np.zeros(2)}, path)
    save_state({"w": np.ones(2)}, path)
    assert [p.name for p in tmp_path.iterdir()] == ["a.hwts"]
    assert np.all(read_state(path)["w"] == 1)


def test_torchvision_mapping_transposes_dense():
    rng = np.random.default_rng(0)
    shapes = {
        "features.0": (64, 3, 11, 11),
        "features.3": (192, 64, 5, 5),
        "features.6": (384, 192, 3, 3),
        "features.8": (256, 384, 3, 3),
        "features.10": (256, 256, 3, 3),
        "classifier.1": (4096, 9216),
        "classifier.4": (4096, 4096),
        "classifier.6": (1000, 4096),
    }
    state = {}
    for k, s in shapes.items():
        state[f"{k}.weight"] = rng.random(s, dtype=np.float32) if s[0] < 1000 else np.ones(s, np.float32)
        state[f"{k}.bias"] = np.zeros(s[0], np.float32)
    state["classifier.1.weight"][5, 7] = 2.0
    out = from_torchvision_state(state)
    assert set(out) == set(TRUNK_NAMES)
    assert out["fc6.weight"].shape == (9216, 4096)
    assert out["fc6.weight"][7, 5] == 2.0
    del state["features.0.bias"]
    with pytest.raises(IncompatibleWeightsError):
        from_torchvision_state(state)


HEAD = ad.Tensor(np.random.default_rng(1).normal(size=(768, 2)).astype(np.float32))


def test_conv1_receives_gradient_when_fine_tuning(alexnet, images):
    alexnet.params.zero_grad()
    out = alexnet(images[:1], train=True, rng=np.random.default_rng(0))
    ad.softmax_cross_entropy(ad.linear(out, HEAD), np.array([1])).backward()
    g = alexnet.params["conv1.weight"].grad
    alexnet.params.zero_grad()
    assert g is not None and np.any(g != 0)


def test_conv1_untouched_when_frozen(alexnet, images):
    alexnet.params.zero_grad()
    h = ad.Tensor(alexnet.trunk(ad.Tensor(images[:1])).data)  # cached activation, detached
    out = alexnet.project(h)
    ad.softmax_cross_entropy(ad.linear(out, HEAD), np.array([0])).backward()
    assert alexnet.params["conv1.weight"].grad is None
    assert alexnet.params["proj.weight"].grad is not None
    alexnet.params.zero_grad()


def test_dropout_reproducible_and_inactive_in_eval(alexnet, images):
    x = images[:1]
    a = alexnet(x, train=True, rng=np.random.default_rng(11)).data
    b = alexnet(x, train=True, rng=np.random.default_rng(11)).data
    c = alexnet(x, train=True, rng=np.random.default_rng(12)).data
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    assert np.array_equal(alexnet(x).data, alexnet(x).data)
