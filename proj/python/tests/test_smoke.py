import json
import math
import pathlib

import jsonschema
import numpy as np
import pytest

import peopl

ROOT = pathlib.Path(__file__).resolve().parents[2]
CONFIGS = ROOT / "configs"
SCHEMAS = ROOT / "schemas"


def load_schema(name):
    return json.loads((SCHEMAS / name).read_text())


def example_universe():
    return peopl.Universe([1, 2, 3, 4], ["+", "+", "-", "-"])


def test_example_one():
    u = example_universe()
    f = peopl.EncoderFamily(u, [[1, 2, 3, 4], [2, 1, 3, 4]])
    g = peopl.EncoderFamily(u, [[1, 2, 3, 4], [1, 2, 4, 3]])
    assert peopl.privacy_score(f, u, 1) == pytest.approx(1.0, abs=1e-9)
    assert peopl.privacy_score(g, u, 1) == pytest.approx(1.0, abs=1e-9)
    fg = peopl.compose(f, g)
    assert len(fg) == 4
    assert peopl.privacy_score(fg, u, 1) == pytest.approx(2.0, abs=1e-9)


def test_decomposition_sums_to_score():
    u = example_universe()
    f = peopl.permutation_family(u)
    d = peopl.decompose(f, u, 2)
    assert d["h_data"] + d["h_key_given_data"] == pytest.approx(
        peopl.privacy_score(f, u, 2), abs=1e-10)


def test_errors_map_to_python_exceptions():
    u = example_universe()
    with pytest.raises(ValueError):
        peopl.EncoderFamily(u, [[1, 1, 3, 4]])
    with pytest.raises(peopl.BudgetExceeded):
        peopl.privacy_score(peopl.permutation_family(u), u, 2, budget=10)


def test_mmd_separated_gaussians():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(400, 1))
    b = rng.normal(loc=5.0, size=(400, 1))
    assert peopl.mmd_unbiased(a, b, [1.0]) > 0.5
    assert abs(peopl.mmd_unbiased(a, rng.normal(size=(400, 1)), [1.0])) < 0.05


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.json")), ids=lambda p: p.stem)
def test_bundled_configs_match_schema(path):
    config = json.loads(path.read_text())
    jsonschema.validate(config, load_schema("config.schema.json"))
    peopl.validate_config(config)


def test_unknown_field_is_rejected():
    config = json.loads((CONFIGS / "two_swaps.json").read_text())
    config["score"]["bogus"] = 1
    with pytest.raises(ValueError, match="bogus"):
        peopl.validate_config(config)
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(config, load_schema("config.schema.json"))


def test_run_writes_schema_valid_outputs(tmp_path):
    config = json.loads((CONFIGS / "family_growth.json").read_text())
    report, summary = peopl.run(config, str(tmp_path / "run"), base_dir=str(CONFIGS))
    jsonschema.validate(report, load_schema("report.schema.json"))
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    jsonschema.validate(manifest, load_schema("manifest.schema.json"))
    assert summary == (tmp_path / "run" / "summary.csv").read_text()
    privacy = {row["family"]: row["bits"] for row in report["rows"]
               if row["metric"] == "privacy"}
    assert math.isclose(privacy["F"], 2.0, abs_tol=1e-9)
    assert math.isclose(privacy["F'"], 1.6, abs_tol=1e-9)


def test_run_is_worker_independent(tmp_path):
    config = json.loads((CONFIGS / "compose_sweep.json").read_text())
    _, one = peopl.run(config, str(tmp_path / "a"), workers=1)
    _, three = peopl.run(config, str(tmp_path / "b"), workers=3)
    assert one == three
