import json
import os

import numpy as np
import numpy.testing as npt
import pytest

from scenemotion import io as sio
from scenemotion.body import MotionSequence
from scenemotion.config import Config, config_from_dict, load_config
from scenemotion.exceptions import ConfigError, SchemaError


def motion(skel, n=3):
    rng = np.random.default_rng(0)
    return MotionSequence.from_array(rng.normal(0, 0.2, (n, skel.pose_dim)), skel.n_joints, 20.0, skel.name)


class TestMotionFiles:
    def test_round_trip(self, tmp_path, skel):
        m = motion(skel)
        path, csv_path = sio.write_motion(tmp_path / "m.json", m)
        again = sio.read_motion(path)
        npt.assert_array_equal(again.to_array(), m.to_array())
        lines = csv_path.read_text().splitlines()
        assert lines[0] == "frame,joint,x,y,z"
        assert len(lines) == 1 + 3 * skel.n_joints
        assert lines[1].startswith("0,pelvis,")

    def test_schema_rejects_extra_keys(self, tmp_path, skel):
        doc = sio.motion_to_dict(motion(skel))
        doc["extra"] = 1
        with pytest.raises(SchemaError):
            sio.motion_from_dict(doc)

    def test_ragged_frames(self, skel):
        doc = sio.motion_to_dict(motion(skel))
        doc["frames"][1]["rotations"] = doc["frames"][1]["rotations"][:-1]
        with pytest.raises(SchemaError):
            sio.motion_from_dict(doc)

    def test_atomic_write_leaves_old_file_on_failure(self, tmp_path, monkeypatch):
        target = tmp_path / "out.json"
        target.write_text("old")

        def boom(src, dst):
            raise OSError("disk full")

        monkeypatch.setattr(os, "replace", boom)
        with pytest.raises(OSError):
            sio.atomic_write(target, "new")
        assert target.read_text() == "old"
        assert [p.name for p in tmp_path.iterdir()] == ["out.json"]

    def test_unknown_schema(self):
        with pytest.raises(KeyError):
            sio.load_schema("nope")

    def test_scene_schema(self, couch_room_path):
        doc = json.loads(open(couch_room_path).read())
        sio.validate(doc, "scene")
        del doc["objects"][0]["label"]
        with pytest.raises(SchemaError):
            sio.validate(doc, "scene")


class TestConfig:
    def test_defaults(self):
        c = Config()
        assert (c.lam, c.eta, c.max_iters, c.n_steps) == (2.0, 0.5, 1, 100)

    def test_toml(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text('seed = 3\nmax_iters = 2\n[guidance]\nlam = 1\n[planner]\nkind = "rule"\nstart = [1, 2]\n'
                     '[prior]\nkind = "rest"\nsigma = 0.5\n')
        c = load_config(p)
        assert (c.seed, c.max_iters, c.lam, c.start, c.prior_kind, c.prior_sigma) == (3, 2, 1.0, (1.0, 2.0), "rest", 0.5)
        assert isinstance(c.lam, float)

    @pytest.mark.parametrize("doc", [
        {"bogus": 1},
        {"guidance": {"lambda": 2}},
        {"nope": {"x": 1}},
        {"seed": -1},
        {"seed": 1.5},
        {"guidance": {"eta": -0.1}},
        {"schedule": {"beta_start": 0.5, "beta_end": 0.1}},
        {"planner": {"kind": "magic"}},
        {"planner": {"start": [1]}},
        {"checker": {"semantics": "yes"}},
        {"scene": {"cell": 0}},
    ])
    def test_rejects(self, doc):
        with pytest.raises(ConfigError):
            config_from_dict(doc)

    def test_bad_toml(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("seed = = 3")
        with pytest.raises(ConfigError):
            load_config(p)
