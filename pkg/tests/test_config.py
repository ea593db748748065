import json
import math

import pytest

from zerosiam.acceptance import preset
from zerosiam.adapt import MethodSpec
from zerosiam.config import (
    ExperimentConfig,
    SweepSpec,
    apply_axes,
    config_to_dict,
    dump_config,
    load_config,
    load_sweep,
    parse_config,
    run_id,
)
from zerosiam.objectives import DivergenceKind
from zerosiam.streams import AdditiveGaussian, Compose, ConfigError, PureNoise


def test_round_trip_all_presets(tmp_path):
    for name in ("collapse-bench", "stable-bench", "drift-bench", "blind-spot-bench", "noise-bench"):
        cfg = preset(name)
        path = tmp_path / f"{name}.json"
        dump_config(cfg, path)
        assert load_config(path) == cfg
        assert run_id(load_config(path)) == run_id(cfg)


def test_unknown_key_reports_field_path():
    with pytest.raises(ConfigError, match=r"method\.lr_ff: unknown field"):
        parse_config({"method": {"lr_ff": 0.1}})
    with pytest.raises(ConfigError, match=r"stream\.shift\.sigmaa: unknown field"):
        parse_config({"stream": {"shift": {"kind": "additive_gaussian", "sigmaa": 1.0}}})
    with pytest.raises(ConfigError, match=r"^bogus: unknown field"):
        parse_config({"bogus": 1})


def test_type_errors_report_field_path():
    with pytest.raises(ConfigError, match=r"task\.n_classes"):
        parse_config({"task": {"n_classes": "six"}})
    with pytest.raises(ConfigError, match=r"stream\.shift\.kind"):
        parse_config({"stream": {"shift": {"kind": "blur"}}})
    with pytest.raises(ConfigError, match=r"method\.divergence"):
        parse_config({"method": {"divergence": "hellinger"}})


def test_validation_errors_report_field_path():
    with pytest.raises(ConfigError, match=r"^stream: "):
        parse_config({"stream": {"ordering": "imbalanced", "rho": 0.5}})
    with pytest.raises(ConfigError, match=r"^task: "):
        parse_config({"task": {"noise_sigma": 5.0}})


def test_inf_rho():
    cfg = parse_config({"stream": {"ordering": "imbalanced", "rho": "inf"}})
    assert math.isinf(cfg.stream.rho)
    assert config_to_dict(cfg)["stream"]["rho"] == "inf"


def test_nested_shifts_parse():
    cfg = parse_config({"stream": {"shift": {"kind": "compose", "parts": [
        {"kind": "additive_gaussian", "sigma": 0.5}, {"kind": "pure_noise", "n_batches": 3}]}}})
    assert cfg.stream.shift == Compose((AdditiveGaussian(0.5), PureNoise(3)))


def test_predictor_shorthand():
    cfg = parse_config({"method": {"predictor": "random"}})
    assert cfg.method.predictor.variant == "random"


def test_run_id_ignores_output_location():
    cfg = ExperimentConfig()
    assert run_id(cfg) == run_id(ExperimentConfig(output_dir="elsewhere", emit_plots=True))
    assert run_id(cfg) != run_id(ExperimentConfig(seed=1))
    assert len(run_id(cfg)) == 16


def test_sweep_order_is_lexicographic():
    spec = SweepSpec(ExperimentConfig(), (("lr_h", (0.1, 0.2)), ("alpha", (1.0, 0.0))))
    assert [k for k, _ in spec.axes] == ["alpha", "lr_h"]
    assert spec.points() == [
        {"alpha": 1.0, "lr_h": 0.1}, {"alpha": 1.0, "lr_h": 0.2},
        {"alpha": 0.0, "lr_h": 0.1}, {"alpha": 0.0, "lr_h": 0.2},
    ]


def test_sweep_rejects_unknown_axis():
    with pytest.raises(ConfigError, match="axes.momentum"):
        SweepSpec(ExperimentConfig(), (("momentum", (0.9,)),))


def test_apply_axes():
    cfg = apply_axes(ExperimentConfig(), {"rho": "inf", "divergence": "js", "method": "tent", "lr_f": 0.2})
    assert math.isinf(cfg.stream.rho) and cfg.stream.ordering == "imbalanced"
    assert cfg.method == MethodSpec(name="tent", lr_f=0.2, divergence=DivergenceKind.JS)


def test_load_sweep(tmp_path):
    dump_config(ExperimentConfig(), tmp_path / "c.json")
    (tmp_path / "a.json").write_text(json.dumps({"method": ["tent", "zerosiam"]}))
    spec = load_sweep(tmp_path / "c.json", tmp_path / "a.json")
    assert [c.method.name for c in spec.configs()] == ["tent", "zerosiam"]


def test_invalid_json(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{")
    with pytest.raises(ConfigError):
        load_config(path)
