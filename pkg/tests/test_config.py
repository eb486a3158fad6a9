import pytest

from ltv_watermark.config import ConfigError, default_config_path, load_config, parse_config

BASE = default_config_path().read_text()


def test_default_config_loads():
    cfg = load_config(default_config_path())
    assert cfg.car.dt == 0.05 and cfg.window == 20
    assert cfg.target_rate == pytest.approx(1 / 50)
    assert cfg.attack.start_step(cfg.car.dt) == 500


def test_dt_zero_rejected_with_line():
    with pytest.raises(ConfigError) as exc:
        parse_config(BASE.replace("dt = 0.05", "dt = 0"), "car.ini")
    assert exc.value.line == 5 and "dt" in str(exc.value)


def test_missing_trajectory_section_named():
    text = BASE.replace("[trajectory]", "").replace("speed_mean = 10\n", "")
    with pytest.raises(ConfigError, match=r"trajectory"):
        parse_config(text)
    head, _, tail = BASE.partition("[trajectory]")
    _, _, rest = tail.partition("[control]")
    with pytest.raises(ConfigError, match=r"missing section \[trajectory\]"):
        parse_config(head + "[control]" + rest)


@pytest.mark.parametrize("old,new,msg", [
    ("window = 20", "window = 2.5", "integer"),
    ("window = 20", "window = 4", "below q \\+ r"),
    ("process_base = [", "process_base = [[", "JSON"),
    ("mode = replay", "mode = jam", "expected one of"),
    ("seed = 0", "seed = -3", "unsigned"),
    ("seed = 0", "seed = 0\nsneaky = 1", "unknown key 'sneaky'"),
    ("[run]", "[run]\nseed = 1", "duplicate key"),
    ("start = 25", "start = -1", "non-negative"),
])
def test_bad_values_diagnosed(old, new, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config(BASE.replace(old, new, 1), "c.ini")


def test_unknown_section_has_line():
    with pytest.raises(ConfigError) as exc:
        parse_config(BASE + "\n[extras]\na = 1\n", "c.ini")
    assert exc.value.line is not None and "extras" in str(exc.value)


def test_matrix_values_and_hash():
    text = BASE.replace("omega = replay-preset", "omega = [[1e-4, 0, 0, 0, 0], [0, 1e-4, 0, 0, 0], "
                        "[0, 0, 1e-4, 0, 0], [0, 0, 0, 1e-4, 0], [0, 0, 0, 0, 1e-4]]")
    cfg = parse_config(text)
    assert len(cfg.attack.omega) == 5
    base = parse_config(BASE)
    assert cfg.config_hash() == base.config_hash()  # attack settings are not hashed
    other = parse_config(BASE.replace("window = 20", "window = 21"))
    assert other.config_hash() != base.config_hash()
    assert other.synth_hash() == base.synth_hash()


def test_override():
    cfg = parse_config(BASE).override(seed=5, mode="none", start=None, runs=7)
    assert (cfg.seed, cfg.attack.mode, cfg.attack.start, cfg.runs) == (5, "none", 25.0, 7)


def test_unreadable_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "nope.ini")
