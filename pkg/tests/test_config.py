import pytest

from seldkit.config import ConfigError, load_config


def test_empty_file_gives_defaults(tmp_path):
    (tmp_path / "c.yaml").write_text("")
    cfg = load_config(tmp_path / "c.yaml")
    f = cfg.features()
    assert (f.sample_rate, f.n_fft, f.hop, f.n_mels) == (24000, 1024, 400, 128)
    c = cfg["codec"]
    assert (c["tracks"], c["lambda"], c["threshold"]) == (3, 0.5, 0.5)
    assert cfg["augment"]["chains"] == 3
    assert cfg["sim"]["snr_db"] == [6.0, 30.0] and cfg["sim"]["max_polyphony"] == 3
    assert cfg["features"]["segment_seconds"] == 5.0
    assert cfg.hash() == load_config().hash()


def test_precedence(tmp_path):
    (tmp_path / "c.yaml").write_text("codec:\n  lambda: 0.2\n  tracks: 2\nseed: 4\n")
    cfg = load_config(tmp_path / "c.yaml", ["lambda=0.3", "seed=9"])
    assert cfg["codec"]["lambda"] == 0.3
    assert cfg["codec"]["tracks"] == 2
    assert cfg.seed == 9
    assert cfg.to_dict()["codec"]["lambda"] == 0.3
    assert cfg.hash() != load_config().hash()


def test_typo_suggestion(tmp_path):
    with pytest.raises(ConfigError, match="did you mean 'lambda'"):
        load_config(overrides=["lamda=0.3"])
    (tmp_path / "c.yaml").write_text("codec:\n  lamda: 0.3\n")
    with pytest.raises(ConfigError, match="did you mean 'lambda'"):
        load_config(tmp_path / "c.yaml")


@pytest.mark.parametrize("override", ["lambda=2", "tracks=two", "threshold=0", "average=weighted",
                                      "snr_db=[30, 6]", "noequals", "segment_seconds=[1]"])
def test_invalid_values(override):
    with pytest.raises(ConfigError):
        load_config(overrides=[override])


def test_ambiguous_bare_key():
    with pytest.raises(ConfigError, match="ambiguous"):
        load_config(overrides=["segment_seconds=2"])
    assert load_config(overrides=["metrics.segment_seconds=2"]).frames_per_segment == 20


def test_typed_views():
    cfg = load_config(overrides={"sim.variant": "B", "sim.classes": [0, 1], "codec.class_names": ["a", "b"]})
    sim = cfg.sim()
    assert sim.variant == "B" and sim.classes == (0, 1) and sim.frame_len == 2400
    assert cfg.class_names == ["a", "b"]
    assert cfg.augment_ranges().shift_max == 10
