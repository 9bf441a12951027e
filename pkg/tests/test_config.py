import pytest

from shgreg.config import ConfigError, PipelineConfig, load_config, parse_config


def test_defaults_valid():
    cfg = load_config()
    assert cfg.instopt.adam_iters == 30
    assert cfg.fidelity.cmif_weight == 0.1 and cfg.fidelity.lncc_weight == 1.0
    assert cfg.bnce.tau == 0.5 and cfg.instopt.search_radius == 4
    assert cfg.instopt.fidelity is cfg.fidelity


def test_sections_and_coercion():
    cfg = parse_config("""
[pipeline]
encoder = runs/enc.json
per_modality_encoders = yes

[instopt]
adam_iters = 15
gaussian_sigma = 1.5

[fidelity]
cmif_weight = 0

[synth]
size = 64, 96
scale_range = 0.95, 1.05

[prealign]
fallback_angles = 0, 5, -5, 12
""")
    assert cfg.pipeline.encoder == "runs/enc.json" and cfg.pipeline.per_modality_encoders is True
    assert cfg.instopt.adam_iters == 15 and cfg.instopt.gaussian_sigma == 1.5
    assert cfg.fidelity.cmif_weight == 0.0
    assert cfg.instopt.fidelity.cmif_weight == 0.0  # refinement sees the same weights
    assert cfg.synth.size == (64, 96) and cfg.synth.scale_range == (0.95, 1.05)
    assert cfg.prealign.fallback_angles == (0.0, 5.0, -5.0, 12.0)


@pytest.mark.parametrize("text, message", [
    ("[instopt]\nadam_itres = 3\n", "unknown key"),
    ("[nonsense]\na = 1\n", "unknown section"),
    ("[instopt]\nadam_iters = many\n", "adam_iters"),
    ("[report]\noverlay = maybe\n", "boolean"),
    ("[fidelity]\nlncc_weight = 0\ncmif_weight = 0\n", "[fidelity]"),
    ("[synth]\nsize = 64\n", "[synth]"),
    ("no section header\n", "config"),
])
def test_rejections(text, message):
    with pytest.raises(ConfigError, match=message.replace("[", r"\[").replace("]", r"\]")):
        parse_config(text)


def test_keys_are_case_sensitive():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config("[instopt]\nAdam_Iters = 3\n")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read config"):
        load_config(tmp_path / "absent.ini")


def test_round_trip_through_dict():
    cfg = PipelineConfig()
    d = cfg.to_dict()
    assert set(d) == {"pipeline", "bnce", "prealign", "instopt", "fidelity", "report", "synth"}
    assert "fidelity" not in d["instopt"]
    lines = []
    for section, values in d.items():
        lines.append(f"[{section}]")
        for k, v in values.items():
            text = ", ".join(map(str, v)) if isinstance(v, tuple) else str(v)
            lines.append(f"{k} = {text}")
    assert parse_config("\n".join(lines)).to_dict() == d
