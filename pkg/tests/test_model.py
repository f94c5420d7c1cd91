import math
import struct

import numpy as np
import pytest

from distembed import tensor as T
from distembed.checkpoint import (
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    load_into,
    load_model,
    save_checkpoint,
    save_model,
)
from distembed.errors import ChecksumError, ConfigError, DataError, DecodeError, ShapeError, VersionError
from distembed.gradcheck import check_gradients
from distembed.model import EmbedModel, ModelConfig
from distembed.tensor_io import decode_tensor, encode_tensor, load_tensor, save_tensor
from distembed.trainer import Adam


def _tiny(**kw):
    base = dict(channels=8, input_height=16, input_width=8, num_classes=3, widths=(4, 4), dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(backbone="resnet")
    with pytest.raises(ConfigError):
        ModelConfig(variance_head="full")
    with pytest.raises(ConfigError):
        ModelConfig(channels=10)
    cfg = _tiny()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_identity_vector_backbone():
    model = EmbedModel(ModelConfig(backbone="identity-vector", channels=4, num_classes=2, dropout=0.0))
    for p in model.params.values():
        p.data[...] = 0.0
    x = np.array([[1.0, -2.0, 0.5, 3.0], [0.0, 0.0, 0.0, 0.0]])
    means, variances = model.embed(x)
    np.testing.assert_array_equal(means, x)
    np.testing.assert_allclose(variances, math.log(2) + 1e-6, atol=1e-15)
    with pytest.raises(ShapeError):
        model.forward(np.ones((2, 5)))


def test_tiny_conv_shapes_and_positivity():
    model = EmbedModel(_tiny())
    x = np.random.default_rng(0).uniform(size=(3, 16, 8, 3))
    out = model.forward(x, keep_feature=True)
    assert out.mean.shape == (3, 8)
    assert out.variance.shape == (3, 8)
    assert out.feature.shape == (3, 4, 2, 8)
    assert np.all(out.variance.data > 0)
    with pytest.raises(ShapeError):
        model.forward(np.ones((1, 8, 16, 3)))


def test_constant_image_gives_relu_of_beta():
    # a constant image is constant after every conv interior-wise but padding breaks that;
    # with all weights zero the normalised map is exactly beta, so the mean is relu(beta)
    model = EmbedModel(_tiny())
    for name, p in model.params.items():
        if name.startswith("backbone.") and (name.endswith(".w") or name.endswith(".b")):
            p.data[...] = 0.0
    model.params["backbone.norm3.beta"].data[...] = np.linspace(-1, 1, 8)
    means, _ = model.embed(np.full((2, 16, 8, 3), 0.4))
    np.testing.assert_allclose(means, np.maximum(np.linspace(-1, 1, 8), 0.0)[None].repeat(2, 0), atol=1e-12)


def test_embed_matches_forward_and_is_chunk_invariant():
    model = EmbedModel(_tiny())
    x = np.random.default_rng(1).uniform(size=(5, 16, 8, 3))
    a = model.embed(x, batch_size=2)
    b = model.embed(x, batch_size=5)
    np.testing.assert_allclose(a[0], b[0], atol=1e-13)
    np.testing.assert_allclose(a[1], b[1], atol=1e-13)
    empty = model.embed(np.zeros((0, 16, 8, 3)))
    assert empty[0].shape == (0, 8)


def test_seed_determinism():
    a, b, c = EmbedModel(_tiny(), seed=3), EmbedModel(_tiny(), seed=3), EmbedModel(_tiny(), seed=4)
    for name, p in a.state_dict().items():
        np.testing.assert_array_equal(p, b.state_dict()[name])
    assert any(not np.array_equal(p, c.state_dict()[n]) for n, p in a.state_dict().items())


def test_full_model_gradient_two_samples():
    model = EmbedModel(_tiny())
    rng = np.random.default_rng(2)
    x = rng.uniform(size=(2, 16, 8, 3))
    w_mu, w_var = rng.normal(size=(2, 8)), rng.normal(size=(2, 8))

    def loss():
        out = model.forward(x, mode="eval")
        return T.tsum(out.mean * w_mu) + T.tsum(out.variance * w_var)

    params = model.params
    errs = check_gradients(loss, params, max_entries=4, seed=0)
    assert max(errs.values()) <= 1e-4


def test_classifier_logits():
    model = EmbedModel(_tiny(classifier=True))
    out = model.forward(np.zeros((1, 16, 8, 3)))
    assert model.classifier_logits(out.mean).shape == (1, 3)
    with pytest.raises(ConfigError):
        EmbedModel(_tiny()).classifier_logits(out.mean)


# -- tensor file format -----------------------------------------------------

def test_tensor_roundtrip(tmp_path):
    arr = np.random.default_rng(3).normal(size=(2, 3, 4))
    save_tensor(arr, tmp_path / "a.gten")
    np.testing.assert_array_equal(load_tensor(tmp_path / "a.gten"), arr)
    scalar, end = decode_tensor(encode_tensor(np.float64(2.5)))
    assert scalar.shape == () and scalar == 2.5


def test_tensor_header_layout():
    buf = encode_tensor(np.array([[1.0, 2.0, 3.0]]))
    assert buf[:4] == b"GTEN"
    assert struct.unpack_from("<IBI", buf, 4) == (1, 0, 2)
    assert struct.unpack_from("<2Q", buf, 13) == (1, 3)
    assert len(buf) == 13 + 16 + 24


def test_tensor_decode_errors(tmp_path):
    buf = encode_tensor(np.ones(4))
    with pytest.raises(DecodeError):
        decode_tensor(b"XXXX" + buf[4:])
    with pytest.raises(DecodeError):
        decode_tensor(buf[:-3])
    with pytest.raises(DecodeError):
        decode_tensor(buf[:8])
    with pytest.raises(VersionError):
        decode_tensor(buf[:4] + struct.pack("<I", 9) + buf[8:])
    (tmp_path / "t.gten").write_bytes(buf + b"\x00")
    with pytest.raises(DataError):
        load_tensor(tmp_path / "t.gten")


# -- checkpoints -------------------------------------------------------------

def test_checkpoint_roundtrip_with_meta(tmp_path):
    tensors = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([-1.5])}
    save_checkpoint(tmp_path / "c.gckp", tensors, {"epoch": 3, "note": "x"})
    loaded, meta = load_checkpoint(tmp_path / "c.gckp")
    assert meta == {"epoch": 3, "note": "x"}
    assert set(loaded) == {"a", "b"}
    np.testing.assert_array_equal(loaded["a"], tensors["a"])
    assert encode_checkpoint(tensors, {"epoch": 3}) == encode_checkpoint(tensors, {"epoch": 3})


def test_model_roundtrip_with_optimizer(tmp_path):
    model = EmbedModel(_tiny(), seed=5)
    opt = Adam()
    model.forward(np.ones((1, 16, 8, 3))).mean.sum().backward()
    opt.step(model.parameters(), 1e-3)
    save_model(tmp_path / "m.gckp", model, opt, epoch=7, extra={"tag": "t"})
    opt2 = Adam()
    model2, meta = load_model(tmp_path / "m.gckp", opt2)
    assert meta["epoch"] == 7 and meta["tag"] == "t"
    for name, arr in model.state_dict().items():
        np.testing.assert_array_equal(arr, model2.state_dict()[name])
    assert opt2.t == 1 and set(opt2.m) == set(opt.m)
    x = np.random.default_rng(6).uniform(size=(2, 16, 8, 3))
    np.testing.assert_array_equal(model.embed(x)[1], model2.embed(x)[1])


def test_truncated_checkpoint_leaves_model_untouched(tmp_path):
    model = EmbedModel(_tiny(), seed=5)
    save_model(tmp_path / "m.gckp", EmbedModel(_tiny(), seed=6))
    buf = (tmp_path / "m.gckp").read_bytes()
    (tmp_path / "cut.gckp").write_bytes(buf[: len(buf) // 2])
    before = model.state_dict()
    with pytest.raises(ChecksumError):
        load_into(model, tmp_path / "cut.gckp")
    for name, arr in model.state_dict().items():
        np.testing.assert_array_equal(arr, before[name])


def test_flipped_byte_fails_checksum():
    buf = bytearray(encode_checkpoint({"a": np.ones(3)}))
    buf[20] ^= 0xFF
    with pytest.raises(ChecksumError):
        decode_checkpoint(bytes(buf))
    with pytest.raises(DecodeError):
        decode_checkpoint(b"NOPE" + bytes(40))


def test_mismatched_channels_name_the_tensor(tmp_path):
    save_model(tmp_path / "m.gckp", EmbedModel(_tiny(channels=16)))
    model = EmbedModel(_tiny(channels=8))
    before = model.state_dict()
    with pytest.raises(ShapeError, match="backbone.conv3.w"):
        load_into(model, tmp_path / "m.gckp")
    for name, arr in model.state_dict().items():
        np.testing.assert_array_equal(arr, before[name])
