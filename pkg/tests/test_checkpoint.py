import numpy as np
import pytest

from pointgpt_nn.checkpoint import (MAGIC, config_from_text, config_to_text, load_checkpoint,
                                    load_pretrained, read_checkpoint, save_checkpoint)
from pointgpt_nn.errors import ConfigError, FormatError
from pointgpt_nn.gpt import GptConfig, GptModel, classify
from pointgpt_nn.npe import NpeConfig
from pointgpt_nn.pc_core import PointCloud


def small(**kw):
    base = dict(n_tokens=8, group_size=4, d_model=12, n_heads=2, extractor_depth=1, generator_depth=1,
                ffn_dim=16, embed_hidden=8, head_hidden=8, num_classes=4,
                npe=NpeConfig(initial_dim=12, stages=1))
    base.update(kw)
    return GptConfig(**base)


def test_config_text_roundtrip():
    cfg = small(lam=2.5, fusion_mode="none", npe=NpeConfig(alpha=123.0, beta=7.5, stages=3))
    text = config_to_text(cfg)
    assert config_from_text(text) == cfg
    assert text.splitlines() == sorted(text.splitlines())


def test_unknown_config_key():
    with pytest.raises(ConfigError):
        config_from_text("d_model=12\nwidth=3\n")


@pytest.mark.parametrize("dtype", ["float32", "float64"])
def test_checkpoint_roundtrip_logits_bit_exact(tmp_path, dtype, rng):
    model = GptModel(small(dtype=dtype, init_seed=3))
    for p in model.params.values():
        p.data += rng.normal(scale=0.01, size=p.shape).astype(p.dtype)
    save_checkpoint(tmp_path / "m.ckpt", model)
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.config == model.config
    for name, p in model.params.items():
        assert back.params[name].data.dtype == p.data.dtype
        assert back.params[name].data.tobytes() == p.data.tobytes()
    cloud = PointCloud(rng.normal(size=(64, 3)))
    assert classify(model, cloud)[0].tobytes() == classify(back, cloud)[0].tobytes()


def test_checkpoint_is_deterministic(tmp_path):
    save_checkpoint(tmp_path / "a", GptModel(small()))
    save_checkpoint(tmp_path / "b", GptModel(small()))
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    assert (tmp_path / "a").read_bytes().startswith(MAGIC)


def test_bad_magic_and_truncation(tmp_path):
    (tmp_path / "x").write_bytes(b"garbage!" * 4)
    with pytest.raises(FormatError):
        read_checkpoint(tmp_path / "x")
    save_checkpoint(tmp_path / "m", GptModel(small()))
    data = (tmp_path / "m").read_bytes()
    (tmp_path / "t").write_bytes(data[:-10])
    with pytest.raises(FormatError):
        read_checkpoint(tmp_path / "t")


def test_load_pretrained_restores_embedding_and_extractor(tmp_path):
    src = GptModel(small(init_seed=1, num_classes=3))
    save_checkpoint(tmp_path / "pre", src)
    dst = GptModel(small(init_seed=2, num_classes=8))
    restored = load_pretrained(dst, tmp_path / "pre")
    assert restored and all(n.startswith(("embed.", "extractor.")) for n in restored)
    for name in restored:
        np.testing.assert_array_equal(dst.params[name].data, src.params[name].data)
    assert not np.array_equal(dst.params["generator.dir.w"].data, src.params["generator.dir.w"].data)


def test_load_pretrained_shape_mismatch(tmp_path):
    save_checkpoint(tmp_path / "pre", GptModel(small(embed_hidden=6)))
    with pytest.raises(ConfigError):
        load_pretrained(GptModel(small()), tmp_path / "pre")
