from pathlib import Path

import pytest
import yaml

from condflow.scenario import ScenarioError, dump_scenario, parse_scenario, parse_scenario_text

SCENARIOS = sorted(Path(__file__).resolve().parent.parent.joinpath("scenarios").glob("*.yaml"))

MINIMAL = """
name: minimal
grid:
  K: [50]
particles:
  M: [100]
seeds:
  master: 1
"""


def test_minimal_defaults_filled():
    sc = parse_scenario_text(MINIMAL)
    assert sc.T == 1.0
    assert sc.n_copies == 100
    assert sc.seeds["n_common"] == 10
    assert sc.experiment["pool"] in ("shared", "disjoint")
    assert sc.model_spec["drift"]["kind"] == "constant"
    assert sc.build_functional().value([[0.0]]) == pytest.approx(0.0)


@pytest.mark.parametrize("path", SCENARIOS, ids=lambda p: p.stem)
def test_shipped_scenarios_parse_and_build(path):
    sc = parse_scenario(path)
    sc.build_model()
    sc.build_grid()
    assert sc.name


def test_unknown_key_is_named():
    text = MINIMAL.replace("grid:", "model:\n  sigma_typo: 1.0\ngrid:")
    with pytest.raises(ScenarioError) as err:
        parse_scenario_text(text)
    msg = str(err.value)
    assert "sigma_typo" in msg and "line 3" in msg and "sigma_v" in msg


def test_missing_master_seed():
    with pytest.raises(ScenarioError, match="master"):
        parse_scenario_text(MINIMAL.replace("  master: 1", "  n_common: 3"))


def test_type_mismatch_has_context():
    with pytest.raises(ScenarioError) as err:
        parse_scenario_text(MINIMAL.replace("K: [50]", "K: fifty"))
    assert "grid.K" in str(err.value) and "line" in str(err.value)


def test_nonpositive_levels_rejected():
    with pytest.raises(ScenarioError):
        parse_scenario_text(MINIMAL.replace("K: [50]", "K: [0]"))
    with pytest.raises(ScenarioError):
        parse_scenario_text(MINIMAL.replace("K: [50]", "K: []"))


def test_unknown_catalog_name():
    text = MINIMAL.replace("grid:", "functional:\n  tests: [{name: nope}]\ngrid:")
    with pytest.raises(ScenarioError) as err:
        parse_scenario_text(text)
    assert "nope" in str(err.value)
    with pytest.raises(ScenarioError, match="kind"):
        parse_scenario_text(MINIMAL.replace("grid:", "model:\n  drift: {kind: warp}\ngrid:"))


def test_round_trip_k_list():
    sc = parse_scenario_text(MINIMAL.replace("K: [50]", "K: [50, 100, 200]"))
    again = parse_scenario_text(dump_scenario(sc))
    assert again.K_list == [50, 100, 200]
    assert again.to_dict() == sc.to_dict()
    assert dump_scenario(again) == dump_scenario(sc)


def test_hash_stable_under_reordering():
    raw = yaml.safe_load(MINIMAL)
    reordered = {k: raw[k] for k in reversed(list(raw))}
    a = parse_scenario_text(MINIMAL)
    b = parse_scenario_text(yaml.safe_dump(reordered, sort_keys=False))
    assert a.hash() == b.hash()
    assert a.hash() != a.with_master_seed(2).hash()


def test_common_seed_derivation():
    sc = parse_scenario_text(MINIMAL)
    assert sc.common_seeds() == sc.common_seeds()
    assert len(set(sc.common_seeds(50))) == 50
    assert sc.common_seeds(5) != sc.with_master_seed(2).common_seeds(5)
    assert sc.common_seeds(5, "pilot") != sc.common_seeds(5)


def test_not_a_mapping():
    with pytest.raises(ScenarioError):
        parse_scenario_text("- 1\n- 2\n")
