import pytest

from gla.config import ConfigError, ExperimentConfig, parse_config, parse_config_text, serialize_config


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "empty.cfg"
    p.write_text("")
    cfg = parse_config(p)
    assert cfg.lr == 0.00002 and cfg.batch_size == 2
    assert cfg == ExperimentConfig()


def test_documented_defaults():
    cfg = ExperimentConfig()
    assert (cfg.channels, cfg.image_height, cfg.image_width) == (16, 60, 120)
    assert cfg.partition_rows * cfg.partition_cols == 50
    assert cfg.anchor_scales == (8.0, 16.0, 32.0) and cfg.anchor_ratios == (0.5, 1.0, 2.0)
    assert (cfg.pos_iou, cfg.neg_iou, cfg.nms_threshold, cfg.eval_iou) == (0.5, 0.4, 0.7, 0.5)
    assert cfg.steps == 2000 and cfg.frames_per_cell == 100 and cfg.test_fraction == 0.2
    assert cfg.anchor_grid().per_cell == 9


def test_partition_grid_from_text():
    cfg = parse_config_text("partition_rows = 5\npartition_cols = 10\n")
    assert cfg.model_spec().partition_rows * cfg.model_spec().partition_cols == 50


def test_comments_and_lists():
    cfg = parse_config_text("# toy run\nsteps = 10  # short\nvariant = pair\nmodalities = camera, gated\nanchor_scales = 4 8\n")
    assert cfg.steps == 10 and cfg.modalities == ("camera", "gated") and cfg.anchor_scales == (4.0, 8.0)


def test_negative_lr_names_invariant_and_line():
    with pytest.raises(ConfigError) as exc:
        parse_config_text("# comment\nseed = 3\nlr = -1\n")
    assert exc.value.line == 3
    assert "line 3" in str(exc.value) and "lr > 0" in str(exc.value)


@pytest.mark.parametrize(
    "text,line,needle",
    [
        ("bogus = 1", 1, "unknown key"),
        ("seed = 1\nsteps = many", 2, "expected int"),
        ("steps = 1\nsteps = 2", 2, "duplicate"),
        ("just words", 1, "key = value"),
        ("batch_size = 0", 1, "batch_size >= 1"),
        ("partition_rows = 61", 1, "fit the feature extent"),
        ("variant = single", 1, "exactly 1 modalities"),
        ("modalities = camera, radar", 1, "distinct names"),
        ("channels = 10", 1, "multiple of 4"),
    ],
)
def test_validation_errors_carry_line_numbers(text, line, needle):
    with pytest.raises(ConfigError, match=needle) as exc:
        parse_config_text(text)
    assert exc.value.line == line


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        parse_config(tmp_path / "nope.cfg")


@pytest.mark.parametrize(
    "kw",
    [
        {},
        dict(variant="single", modalities=("gated",), lr=1e-3, partition_rows=3, partition_cols=6),
        dict(variant="concat", anchor_scales=(4.0, 12.5), eval_classes=("PassengerCar",), fusion_mode="literal"),
    ],
)
def test_round_trip(kw):
    cfg = ExperimentConfig().replace(**kw)
    text = serialize_config(cfg)
    assert parse_config_text(text) == cfg
    assert serialize_config(parse_config_text(text)) == text
