import pytest

from clipmap.config import DEFAULTS, RunConfig
from clipmap.errors import ConfigError


def test_defaults_are_valid_and_documented():
    cfg = RunConfig()
    assert all(desc for _, desc in DEFAULTS.values())
    assert cfg.loss_weights().lam == 1.0
    assert cfg.compression_spec().image.d2 == 32
    assert cfg.stage_config("mapping").steps == 500
    assert cfg.stage_config("retraining").lr == 3e-4


def test_parse_is_order_independent():
    a = RunConfig.parse("compress.d2 = 16\nmodel.width = 32\n# note\n\ncompress.l2 = 2  # trailing")
    b = RunConfig.parse("compress.l2=2\nmodel.width=32\ncompress.d2=16")
    assert a.dump() == b.dump()
    assert RunConfig.parse(a.dump()).dump() == a.dump()


@pytest.mark.parametrize("text,key", [
    ("foo.bar = 1", "foo.bar"),
    ("model.width = wide", "model.width"),
    ("compress.d2 = 30", "compress.d2"),
    ("compress.d2 = 128", "compress.d2"),
    ("loss.lambda = 2", "loss.lambda"),
    ("compress.init = orthogonal", "compress.init"),
    ("train.map.warmup = 600", "train.map.warmup"),
    ("train.map.distill = maybe", "train.map.distill"),
    ("model.width = 64\nmodel.width = 32", "model.width"),
])
def test_errors_name_the_key(text, key):
    with pytest.raises(ConfigError) as info:
        RunConfig.parse(text)
    assert info.value.key == key
    assert key in str(info.value)


def test_missing_separator():
    with pytest.raises(ConfigError, match="line 1"):
        RunConfig.parse("model.width 64")


def test_bool_and_seed_views():
    cfg = RunConfig.parse("train.map.distill = yes\nrun.seed = 9\ndata.seed = 4")
    assert cfg.stage_config("mapping").distill is True
    assert cfg.stage_config("retraining").distill is False
    assert cfg.stage_config("mapping").seed == 9
    assert cfg.synthetic_spec().seed == 4
    img, txt = cfg.student_configs()
    assert (img.width, img.depth, txt.kind) == (32, 4, "text")
