import pytest

from unlearnable.config import ConfigError, ExperimentConfig, desk_config, dump_config, from_dict, load_config


def test_defaults_carry_full_scale_hyperparameters():
    cfg = from_dict({})
    assert (cfg.victim.epochs, cfg.victim.lr, cfg.victim.momentum, cfg.gan.alpha) == (90, 0.025, 0.9, 0.001)
    assert cfg.emn_spec().inner_steps == 20


@pytest.mark.parametrize("size,eps", [([32, 32], 8 / 255), ([64, 64], 16 / 255), ([16, 16], 8 / 255)])
def test_epsilon_follows_resolution(size, eps):
    assert from_dict({"data": {"image_size": size}}).epsilon == eps


def test_explicit_epsilon_wins():
    assert from_dict({"budget": {"epsilon": 0.1}}).epsilon == 0.1


def test_round_trip(tmp_path):
    cfg = desk_config(3)
    dump_config(cfg, tmp_path / "c.yaml")
    back = load_config(tmp_path / "c.yaml")
    assert back == cfg and back.digest() == cfg.digest()


def test_digest_tracks_content():
    assert desk_config(0).digest() != desk_config(1).digest()


@pytest.mark.parametrize("raw,path", [
    ({"gan": {"epochz": 3}}, "gan.epochz"),
    ({"gan": {"epochs": "many"}}, "gan.epochs"),
    ({"gan": {"use_generator_adversarial_term": 1}}, "gan.use_generator_adversarial_term"),
    ({"data": {"image_size": [32]}}, "data.image_size"),
    ({"data": {"image_size": [32, "x"]}}, "data.image_size[1]"),
    ({"data": {"p": 0}}, "data.p"),
    ({"model": {"classifier": "vgg"}}, "model.classifier"),
    ({"victim": {"backbones": ["resnet18", "bogus"]}}, "victim.backbones[1]"),
    ({"victim": {"augmentation": "rotate"}}, "victim.augmentation"),
    ({"budget": {"epsilon": 2.0}}, "budget.epsilon"),
    ({"victim": {"lr": -1.0}}, "victim"),
    ({"version": 2}, "version"),
    ({"pretrain": 5}, "pretrain"),
])
def test_errors_name_the_field(raw, path):
    with pytest.raises(ConfigError) as e:
        from_dict(raw)
    assert e.value.path == path
    assert str(e.value).startswith(path)


def test_unparseable_yaml(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("gan: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_empty_file_is_defaults(tmp_path):
    p = tmp_path / "empty.yaml"
    p.write_text("")
    assert load_config(p) == ExperimentConfig()


def test_desk_preset_builds_every_spec():
    cfg = desk_config()
    assert cfg.image_shape == (3, 16, 16)
    cfg.gan_spec(), cfg.emn_spec(), cfg.denoiser_spec(), cfg.victim_spec(), cfg.augment_config()
    assert cfg.gan_spec(5).seed == 5
