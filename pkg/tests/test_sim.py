import json
from pathlib import Path

import pytest

from embserve import cli
from embserve.errors import InvalidScenario, ReplayDivergence
from embserve.indexer import Indexer
from embserve.orchestrator import EmbeddingsOrchestrator, UserEmbedding
from embserve.scenario import Scenario, load_scenario
from embserve.serving import ServingLayer, build_query, user_key
from embserve.sim import Simulation, replay, report_bytes, run_scenario, sweep, write_trace

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def scenario(name: str, **overrides) -> Scenario:
    sc = load_scenario(SCENARIOS / f"{name}.json")
    return sc.with_overrides(**overrides) if overrides else sc


def test_no_trainer_means_all_fallback():
    report, _ = run_scenario(scenario("fixtures_tiny", trainer={"cycles": 0}), 1)
    assert report["ok"]
    assert report["counters"]["results_embedding"] == 0
    assert report["counters"]["results_fallback"] > 0


def test_one_training_and_one_shadow_cycle():
    sc = scenario("fixtures_tiny", trainer={"cycles": 1}, index={"cycles": 1},
                  requests={"count": 30, "start": 80})
    report, _ = run_scenario(sc, 4)
    assert report["ok"]
    assert report["counters"]["results_embedding"] > 0
    assert report["invariants"]["version_match"]["violations"] == 0


@pytest.mark.parametrize("name", sorted(p.stem for p in SCENARIOS.glob("*.json")))
def test_shipped_scenarios_pass(name):
    result = sweep(scenario(name), range(5))
    assert result["ok"], result["failed"]


def test_same_seed_same_bytes():
    sc = scenario("incremental_churn")
    a, ta = run_scenario(sc, 17)
    b, tb = run_scenario(sc, 17)
    assert report_bytes(a) == report_bytes(b)
    assert ta == tb
    c, _ = run_scenario(sc, 18)
    assert c["trace_digest"] != a["trace_digest"]


def test_trace_replay_and_tampering(tmp_path):
    sc = scenario("faulty_shadow")
    report, trace = run_scenario(sc, 3)
    path = tmp_path / "run.trace"
    write_trace(path, sc, 3, trace, report)
    assert report_bytes(replay(path)) == report_bytes(report)

    lines = path.read_text().splitlines()
    row = json.loads(lines[5])
    row["digest"] = "0" * 16
    lines[5] = json.dumps(row)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ReplayDivergence):
        replay(path)


def test_invalid_scenarios():
    with pytest.raises(InvalidScenario):
        scenario("shadow_basic", model_kind="Sideways")
    with pytest.raises(InvalidScenario):
        scenario("shadow_basic", index={"mode": "sometimes"})
    with pytest.raises(InvalidScenario):
        scenario("shadow_basic", requests={"users": ["ghost"]})
    with pytest.raises(InvalidScenario):
        scenario("shadow_basic", trainer={"coverage": 1.5})


# -- the checker must catch broken components ----------------------------------


def test_indexing_only_the_latest_version_breaks_two_version_safety(monkeypatch):
    original = Indexer._build_document

    def latest_only(self, item, wanted):
        return original(self, item, {t: vs[-1:] for t, vs in wanted.items()})

    monkeypatch.setattr(Indexer, "_build_document", latest_only)
    result = sweep(scenario("incremental_churn"), range(3))
    assert result["violations"]["two_version_safety"] > 0


def test_serving_that_picks_latest_breaks_pass_through(monkeypatch):
    def resolve_latest(self, req, type_id):
        latest = self.eo.get_latest_version(type_id)
        vec = self.eo.get_entity_embedding(type_id, latest, user_key(self.eo.model_kind(type_id), req)) if latest else None
        response = UserEmbedding(latest, vec) if vec is not None else None
        return response, build_query(req, type_id, response, self.publisher_rules.get(req.publisher_id))

    monkeypatch.setattr(ServingLayer, "resolve", resolve_latest)
    result = sweep(scenario("shadow_basic"), range(3))
    assert result["violations"]["version_pass_through"] > 0


def test_poll_that_moves_in_use_breaks_trigger_exclusivity(monkeypatch):
    original = EmbeddingsOrchestrator.poll

    def greedy_poll(self, type_id):
        latest = original(self, type_id)
        st = self._state(type_id)
        if latest is not None and st.in_use != latest:
            st.in_use = latest
            self.state_epoch += 1
        return latest

    monkeypatch.setattr(EmbeddingsOrchestrator, "poll", greedy_poll)
    result = sweep(scenario("shadow_basic"), range(2))
    assert result["violations"]["trigger_exclusivity"] > 0
    assert not result["ok"]


# -- CLI ------------------------------------------------------------------------------


def test_cli_run_replay_sweep(tmp_path, capsys):
    sc = str(SCENARIOS / "fixtures_tiny.json")
    trace, out1, out2 = tmp_path / "t.trace", tmp_path / "a.json", tmp_path / "b.json"
    assert cli.main(["run", "--scenario", sc, "--seed", "5", "--trace", str(trace), "--report", str(out1)]) == 0
    assert cli.main(["replay", "--trace", str(trace), "--report", str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    assert cli.main(["sweep", "--scenario", sc, "--seeds", "0..4"]) == 0
    agg = json.loads(capsys.readouterr().out)
    assert agg["seeds"] == 5 and agg["seed_range"] == [0, 4]
    assert cli.main(["oracle-check", "--instances", "20"]) == 0


def test_cli_exit_codes(tmp_path, monkeypatch, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["run", "--scenario", str(bad)]) == 2
    assert "InvalidScenario" in capsys.readouterr().err

    original = EmbeddingsOrchestrator.poll

    def greedy_poll(self, type_id):
        latest = original(self, type_id)
        st = self._state(type_id)
        if latest is not None:
            st.in_use = latest
            self.state_epoch += 1
        return latest

    monkeypatch.setattr(EmbeddingsOrchestrator, "poll", greedy_poll)
    assert cli.main(["run", "--scenario", str(SCENARIOS / "fixtures_tiny.json"), "--seed", "1"]) == 1


def test_simulation_reports_are_canonical():
    report = Simulation(scenario("fixtures_tiny"), 2).run()
    text = report_bytes(report).decode()
    assert text == json.dumps(json.loads(text), sort_keys=True, separators=(",", ":")) + "\n"
