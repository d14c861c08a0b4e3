"""Config parsing, defaults, and run-time validation."""

from pathlib import Path

import pytest

from ctprep.config import PipelineConfig, config_text, load_config, parse_config_text
from ctprep.errors import ConfigError


def test_defaults():
    cfg = PipelineConfig()
    assert cfg.target_height == 500
    assert cfg.target_width == 400
    assert cfg.hu_window_max == 100.0
    assert cfg.split_review_threshold == 25
    assert cfg.localiser_slice_threshold == 3
    assert cfg.age_cutoff == 72
    assert cfg.default_when_age_missing == "older"
    assert cfg.crop_margin == 5
    assert cfg.parallelism == 1


def test_parse_basic():
    cfg = parse_config_text(
        """
        # comment line
        input_dir = /data/in
        output_dir = /data/out   # trailing comment
        crop_margin = 9
        hu_window_max = 80
        """
    )
    assert cfg.input_dir == "/data/in"
    assert cfg.output_dir == "/data/out"
    assert cfg.crop_margin == 9
    assert cfg.hu_window_max == 80.0


def test_parse_unknown_key():
    with pytest.raises(ConfigError, match="crop_margn"):
        parse_config_text("crop_margn = 5")


def test_parse_bad_value():
    with pytest.raises(ConfigError, match="crop_margin"):
        parse_config_text("crop_margin = five")


def test_parse_missing_equals():
    with pytest.raises(ConfigError, match="expected key = value"):
        parse_config_text("input_dir /data/in")


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")


def test_load_config_round_trip(tmp_path):
    cfg = PipelineConfig(input_dir="/a", output_dir="/b", gmm_seed=42)
    path = tmp_path / "run.cfg"
    path.write_text(config_text(cfg))
    back = load_config(path)
    assert back == cfg


def test_bone_tokens_parsing():
    cfg = PipelineConfig(bone_kernel_tokens=" bone , FC30 ,,h70h ")
    assert cfg.bone_tokens == frozenset({"BONE", "FC30", "H70H"})


def test_sidecar_path_default_and_override(tmp_path):
    cfg = PipelineConfig(input_dir=str(tmp_path))
    assert cfg.sidecar_path == tmp_path / "ages.txt"
    cfg.age_sidecar = str(tmp_path / "other.txt")
    assert cfg.sidecar_path == Path(tmp_path / "other.txt")


def _valid_cfg(tmp_path) -> PipelineConfig:
    return PipelineConfig(input_dir=str(tmp_path), output_dir=str(tmp_path / "out"))


def test_validate_ok(tmp_path):
    _valid_cfg(tmp_path).validate_for_run()


@pytest.mark.parametrize(
    "field,value,msg",
    [
        ("input_dir", "", "input_dir is not set"),
        ("input_dir", "/no/such/dir/here", "not a directory"),
        ("output_dir", "", "output_dir is not set"),
        ("default_when_age_missing", "middle", "younger"),
        ("gmm_k_min", 0, "gmm k range"),
        ("gmm_k_max", 0, "gmm k range"),
        ("parallelism", 0, "parallelism"),
        ("bone_threshold_hu", -1.0, "positive"),
        ("hu_window_max", 0.0, "positive"),
        ("target_height", 0, "at least 1"),
        ("split_review_threshold", 0, "at least 1"),
        ("crop_margin", -1, "non-negative"),
    ],
)
def test_validate_rejects(tmp_path, field, value, msg):
    cfg = _valid_cfg(tmp_path)
    setattr(cfg, field, value)
    with pytest.raises(ConfigError, match=msg):
        cfg.validate_for_run()


def test_validate_does_not_require_templates(tmp_path):
    # Template checks happen at the registration stage, not up front: a
    # run over an empty input directory must succeed without any.
    cfg = _valid_cfg(tmp_path)
    cfg.template_dir = ""
    cfg.validate_for_run()
