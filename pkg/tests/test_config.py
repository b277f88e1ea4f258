import pytest

from trackssm.config import RunConfig, format_config, load_config, parse_config_text
from trackssm.errors import ConfigError


def test_defaults():
    cfg = load_config(None)
    assert cfg == RunConfig()
    assert cfg.history == 5 and cfg.model.n_layers == 6
    assert cfg.track.track_high_thresh == 0.6 and cfg.track.track_low_thresh == 0.1
    assert cfg.image_size == (1280.0, 720.0)


def test_parse_sections_and_types():
    cfg = parse_config_text(
        """
        # compact run
        seed = 4
        history = 10          # longer window
        normalize = false
        model.d_model = 32
        model.end_to_end_grad = yes
        train.lr = 1e-3
        train.seed = 9
        track.max_lost_age = 12
        scene.kind = sinusoidal
        """
    )
    assert cfg.history == 10 and cfg.image_size is None
    assert cfg.model.d_model == 32 and cfg.model.end_to_end_grad is True
    assert cfg.train.lr == 1e-3 and cfg.track.max_lost_age == 12 and cfg.scene.kind == "sinusoidal"
    # the top-level seed fills in components that did not set one
    assert cfg.model.seed == 4 and cfg.scene.seed == 4 and cfg.train.seed == 9
    assert cfg.association().history_len == 10


@pytest.mark.parametrize(
    "text",
    [
        "model.widths = 3",
        "colour = red",
        "optim.lr = 1",
        "history = five",
        "normalize = maybe",
        "seed = 1\nseed = 2",
        "just words",
        "history = 0",
        "model.pe_dim = 3",
        "track.track_low_thresh = 0.7",
        "scene.kind = spiral",
    ],
)
def test_rejects_bad_input(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_format_round_trip(tmp_path):
    cfg = parse_config_text("model.n_layers = 3\ntrain.use_giou = true\nimage_width = 640.5\nscene.speed = 0.1")
    p = tmp_path / "run.cfg"
    p.write_text(format_config(cfg))
    assert load_config(p) == cfg


def test_unreadable_config(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")


def test_overrides():
    cfg = RunConfig().with_overrides(seed=7, layers=2, history=3, s2l=False, normalize=False)
    assert (cfg.seed, cfg.model.seed, cfg.train.seed, cfg.scene.seed) == (7, 7, 7, 7)
    assert cfg.model.n_layers == 2 and cfg.history == 3 and cfg.train.s2l is False and cfg.image_size is None
    assert RunConfig().with_overrides() == RunConfig()
    assert RunConfig().with_overrides(end_to_end_grad=True).model.end_to_end_grad is True
