import json

import numpy as np
import pytest

from scenemotion import io as sio
from scenemotion.cli import exit_code_for, main
from scenemotion.exceptions import NoMatch, Unreachable
from scenemotion.metrics import evaluate
from scenemotion.scene import load_scene

TOY = {
    "name": "toy_room",
    "world_aabb": {"min": [0, 0, 0], "max": [4, 3, 3]},
    "start": [0.6, 0.6],
    "objects": [
        {"id": 1, "label": "stool", "center": [3.0, 1.5, 0.25], "half_extents": [0.3, 0.3, 0.25], "yaw": 0.0},
        {"id": 2, "label": "shelf", "center": [1.0, 2.7, 0.9], "half_extents": [0.6, 0.2, 0.9], "yaw": 0.0},
    ],
}

FAST = "[schedule]\nn_steps = 20\n[planner]\nn_frames = 60\n[checker]\nsemantics = false\n"


@pytest.fixture
def toy(tmp_path):
    p = tmp_path / "toy.json"
    p.write_text(json.dumps(TOY))
    return p


@pytest.fixture
def fast_cfg(tmp_path):
    p = tmp_path / "fast.toml"
    p.write_text(FAST)
    return p


class TestCompile:
    def test_couch(self, couch_room_path, tmp_path, capsys):
        out = tmp_path / "aux.json"
        assert main(["compile", "--scene", couch_room_path, "--query", "sit on the couch", "--out", str(out),
                     "--ascii"]) == 0
        doc = sio.read_json(out, "auxiliary")
        assert doc["target_label"] == "couch"
        rows = doc["road_map"]["rows"]
        # rows are stored south first; the couch spans y 3.8..4.6, x 2..4
        assert all("T" not in r for r in rows[:15]) and "T" in rows[15]
        assert rows[16].index("T") == 8 and rows[16].rindex("T") == 15
        printed = capsys.readouterr().out
        assert set(printed) <= set(".#T\n")
        assert (tmp_path / "aux.roadmap.txt").read_text() == printed

    def test_missing_file(self, tmp_path, capsys):
        code = main(["compile", "--scene", str(tmp_path / "nope.json"), "--query", "x", "--out", str(tmp_path / "a.json")])
        assert code == 3
        assert "error" in capsys.readouterr().err

    def test_no_match(self, couch_room_path, tmp_path):
        assert main(["compile", "--scene", couch_room_path, "--query", "the piano", "--out", str(tmp_path / "a.json")]) == 2
        assert not (tmp_path / "a.json").exists()

    def test_bare_ply(self, tmp_path):
        ply = tmp_path / "s.ply"
        ply.write_text("ply\n")
        assert main(["compile", "--scene", str(ply), "--query", "x", "--out", str(tmp_path / "a.json")]) == 3

    def test_llm_locator_replay(self, couch_room_path, tmp_path):
        from scenemotion.llm import MockClient, RecordingClient
        from scenemotion.scene import LLMLocator

        rec = RecordingClient(MockClient(['{"target_id": 2}']))
        LLMLocator(rec).locate(load_scene(couch_room_path), "the screen")
        transcript = tmp_path / "t.json"
        rec.save(transcript)
        out = tmp_path / "a.json"
        assert main(["compile", "--scene", couch_room_path, "--query", "the screen", "--out", str(out),
                     "--locator", "llm", "--replay", str(transcript)]) == 0
        assert sio.read_json(out)["target_id"] == 2

    def test_llm_locator_without_client(self, couch_room_path, tmp_path, monkeypatch):
        monkeypatch.delenv("SCENEMOTION_LLM_URL", raising=False)
        assert main(["compile", "--scene", couch_room_path, "--query", "couch", "--out", str(tmp_path / "a.json"),
                     "--locator", "llm"]) == 7


class TestRun:
    def test_deterministic_and_passes(self, toy, fast_cfg, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / f"{name}.json"
            code = main(["run", "--scene", str(toy), "--text", "sit on the stool", "--out", str(out),
                         "--config", str(fast_cfg), "--seed", "3", "--guidance", str(tmp_path / f"{name}.g.json")])
            assert code == 0
            outs.append(out)
        assert outs[0].read_bytes() == outs[1].read_bytes()
        assert (tmp_path / "a.positions.csv").read_bytes() == (tmp_path / "b.positions.csv").read_bytes()
        report = json.loads((tmp_path / "a.report.json").read_text())
        assert report["iterations"] in (0, 1)
        assert set(report["checks"]) >= {"in_bounds", "collision_ok", "goal_ok", "guidance_ok", "contact_ok"}
        m = sio.read_motion(outs[0])
        assert m.n_frames == 60
        seat = load_scene(toy).get(1).box
        assert evaluate(m, load_scene(toy).field(), seat).body_to_goal <= 0.5

    def test_unreachable(self, tmp_path, fast_cfg):
        doc = json.loads(json.dumps(TOY))
        # a ring of walls around the stool
        doc["objects"] += [
            {"id": 3, "label": "wall", "center": [3.0, 0.85, 0.5], "half_extents": [0.9, 0.05, 0.5]},
            {"id": 4, "label": "wall", "center": [3.0, 2.15, 0.5], "half_extents": [0.9, 0.05, 0.5]},
            {"id": 5, "label": "wall", "center": [2.15, 1.5, 0.5], "half_extents": [0.05, 0.7, 0.5]},
            {"id": 6, "label": "wall", "center": [3.85, 1.5, 0.5], "half_extents": [0.05, 0.7, 0.5]},
        ]
        scene = tmp_path / "walled.json"
        scene.write_text(json.dumps(doc))
        out = tmp_path / "m.json"
        assert main(["run", "--scene", str(scene), "--text", "sit on the stool", "--out", str(out),
                     "--config", str(fast_cfg)]) == 5
        assert not out.exists()

    def test_unknown_action(self, toy, fast_cfg, tmp_path):
        out = tmp_path / "m.json"
        assert main(["run", "--scene", str(toy), "--text", "juggle the stool", "--out", str(out),
                     "--config", str(fast_cfg)]) == 6
        assert not out.exists()

    def test_bad_config(self, toy, tmp_path):
        cfg = tmp_path / "bad.toml"
        cfg.write_text("[guidance]\nlambda = 2\n")
        assert main(["run", "--scene", str(toy), "--text", "sit on the stool", "--out", str(tmp_path / "m.json"),
                     "--config", str(cfg)]) == 8

    def test_llm_planner_needs_client(self, toy, tmp_path, monkeypatch):
        monkeypatch.delenv("SCENEMOTION_LLM_URL", raising=False)
        cfg = tmp_path / "llm.toml"
        cfg.write_text('[planner]\nkind = "llm"\n')
        assert main(["run", "--scene", str(toy), "--text", "sit on the stool", "--out", str(tmp_path / "m.json"),
                     "--config", str(cfg)]) == 7


class TestEval:
    def _write(self, folder, skel, roots):
        folder.mkdir()
        from scenemotion.body import MotionSequence
        from scenemotion.diffusion import rest_prior_mean

        for i, r in enumerate(roots):
            x = rest_prior_mean(skel, 4, 0.9)
            x[:, :3] = r
            sio.write_motion(folder / f"m{i}.json", MotionSequence.from_array(x, skel.n_joints))

    def test_three_motions(self, toy, tmp_path, skel):
        folder = tmp_path / "motions"
        # the last one stands inside the shelf
        self._write(folder, skel, [(0.6, 0.6, 0.9), (2.4, 1.5, 0.9), (1.0, 2.7, 0.9)])
        (folder / "junk.json").write_text("{not json")
        out = tmp_path / "eval.json"
        assert main(["eval", "--motions", str(folder), "--scene", str(toy), "--out", str(out),
                     "--query", "stool", "--jobs", "2"]) == 0
        doc = sio.read_json(out, "eval")
        assert [r["name"] for r in doc["motions"]] == ["m0", "m1", "m2"]
        scene = load_scene(toy)
        oracle = evaluate(sio.read_motion(folder / "m2.json"), scene.field(), scene.get(1).box)
        assert doc["motions"][2]["non_collision"] == pytest.approx(oracle.non_collision)
        assert oracle.non_collision < 1.0
        rows = out.with_suffix(".csv").read_text().splitlines()
        assert len(rows) == 5 and rows[-1].startswith("aggregate")
        assert doc["aggregate"]["non_collision"] == pytest.approx(np.mean([r["non_collision"] for r in doc["motions"]]))

    def test_empty_dir(self, toy, tmp_path):
        (tmp_path / "empty").mkdir()
        assert main(["eval", "--motions", str(tmp_path / "empty"), "--scene", str(toy),
                     "--out", str(tmp_path / "e.json")]) == 3


def test_exit_code_table():
    assert exit_code_for(NoMatch("x")) == 2
    assert exit_code_for(Unreachable("x")) == 5
    assert exit_code_for(FileNotFoundError("x")) == 3
    assert exit_code_for(RuntimeError("x")) == 1
