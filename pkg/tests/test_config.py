import pytest

from aamgan import config
from aamgan.config import RunConfig, TrainConfig, parse_override
from aamgan.errors import ConfigError


def test_defaults_round_trip():
    cfg = RunConfig().validate()
    assert config.loads(cfg.to_text()) == cfg


def test_partial_file_fills_defaults():
    cfg = config.loads("[train]\nlambda_cls = 2.5\nseed = 3\n[head]\nkind = softmax\nmargin = 0\n")
    assert cfg.train.lambda_cls == 2.5 and cfg.train.seed == 3
    assert cfg.head.kind == "softmax"
    assert cfg.model == RunConfig().model


def test_tuple_and_optional_values():
    cfg = config.loads("[metrics]\nnoise_levels = 0, 0.5, 1\n[head]\nfake_margin = 0.2\n")
    assert cfg.metrics.noise_levels == (0.0, 0.5, 1.0)
    assert cfg.head.fake_margin == 0.2
    assert config.loads(cfg.to_text()) == cfg


@pytest.mark.parametrize("text,field", [
    ("[train]\nlambda_cls = -1\n", "train.lambda_cls"),
    ("[train]\nlamda_cls = 1\n", "train.lamda_cls"),
    ("[trian]\nseed = 1\n", "trian"),
    ("[train]\nseed = one\n", "train.seed"),
    ("[head]\nkind = arcface\n", "head.kind"),
    ("[head]\nmargin = 4\n", "head.margin"),
    ("[train]\nlr_decay_factor = 0\n", "train.lr_decay_factor"),
    ("[metrics]\nnoise_levels = 0.5, 0.1\n", "metrics.noise_levels"),
    ("[model]\nimage_size = 48\n", "model.image_size"),
])
def test_validation_names_field(text, field):
    with pytest.raises(ConfigError) as info:
        config.loads(text)
    assert info.value.field == field
    assert str(info.value).startswith(field)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        config.load(tmp_path / "none.cfg")


def test_overrides():
    cfg = RunConfig().with_overrides(dict([parse_override("train.lambda_rec=5"), parse_override("head.scale=16")]))
    assert cfg.train.lambda_rec == 5.0 and cfg.head.scale == 16.0
    with pytest.raises(ConfigError):
        parse_override("train.nope=1")
    with pytest.raises(ConfigError):
        RunConfig().with_overrides({"train.lambda_cls": -0.5})


def test_d_steps_default():
    assert TrainConfig().d_steps == 1
    assert TrainConfig(adversarial="wgan-gp").d_steps == 5
    assert TrainConfig(adversarial="wgan-gp", d_steps_per_g_step=2).d_steps == 2
