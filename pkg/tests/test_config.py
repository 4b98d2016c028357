import pytest

from voxmt.config import PROFILES, load_config, parse_config
from voxmt.errors import ConfigError


def test_waymo_profile():
    cfg = PROFILES["waymo"]
    assert cfg.grid_dims == (1504, 1504, 40)
    assert cfg.bottom_dims == (188, 188, 5)
    assert cfg.bev_channels_in == 1280
    assert cfg.encoder_width == (32, 64, 128, 256)
    assert cfg.thing_classes == (3, 4, 5) and cfg.stuff_classes == (0, 1, 2)


def test_nuscenes_profile():
    cfg = PROFILES["nuscenes"]
    assert cfg.grid_dims == (1440, 1440, 40)
    assert cfg.bottom_dims == (180, 180, 5)


def test_toy_profile():
    cfg = PROFILES["toy"]
    assert cfg.grid_dims == (32, 32, 16)
    assert cfg.bottom_dims == (4, 4, 2)
    assert cfg.bev_channels_out == 48


def test_parse_overrides_and_comments():
    cfg = parse_config("profile = toy  # small\nscore_thresh = 0.25\ngcp_mode = identity\n")
    assert cfg.profile == "toy" and cfg.score_thresh == 0.25
    assert cfg.bev_channels_out == cfg.bev_channels_in == 64


def test_text_roundtrip():
    cfg = PROFILES["toy"].replace(max_boxes=7)
    assert parse_config(cfg.to_text()) == cfg


@pytest.mark.parametrize(
    "text, needle",
    [
        ("bogus = 1", "unknown key 'bogus'"),
        ("profile = mars", "profile"),
        ("max_boxes = many", "max_boxes"),
        ("encoder_width = 4, 8", "encoder_depth"),
        ("thing_classes = 3, 3", "thing_classes"),
        ("voxel_size = 0.33, 0.1, 0.15", "voxel_size"),
        ("gcp_mode = partial", "gcp_mode"),
        ("no equals sign", ":1:"),
        ("max_boxes = 1\nmax_boxes = 2", "duplicate"),
    ],
)
def test_parse_errors_name_the_key(text, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config(text)


def test_load_config(tmp_path):
    assert load_config("toy") is PROFILES["toy"]
    path = tmp_path / "c.cfg"
    path.write_text("profile = nuscenes\n")
    assert load_config(path) == PROFILES["nuscenes"]
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")
