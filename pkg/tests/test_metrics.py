import json

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given
from hypothesis import strategies as st

from scenemotion.body import MotionSequence, SkeletonDef, fk
from scenemotion.diffusion import rest_prior_mean
from scenemotion.geometry import OrientedBox, SceneField, box_sdf, scene_sdf
from scenemotion.metrics import (
    EvalResult,
    aggregate,
    body_points,
    body_to_goal,
    contact,
    evaluate,
    non_collision,
    report_csv,
    report_json,
)


def stick(radius=0.5):
    return SkeletonDef(("root", "tip"), [-1, 0], [[0, 0, 0], [0, 0, 2.0]], [radius, radius], "stick")


def still(skel, n=1, root=(0.0, 0.0, 0.0)):
    x = rest_prior_mean(skel, n)
    x[:, :3] = root
    return MotionSequence.from_array(x, skel.n_joints, 20.0, skel.name)


class TestBodyToGoal:
    def test_inside_is_zero(self, skel):
        m = still(skel, 3, (1.0, 1.0, 0.9))
        assert body_to_goal(m, OrientedBox([1, 1, 0.9], [0.2, 0.2, 0.2]), skel) == 0.0

    def test_fixture_071(self, skel):
        m = still(skel, 2, (0.0, 0.0, 0.9))
        pos = fk(m.to_array(), skel)
        face = pos[..., 0].max() + 0.71
        box = OrientedBox([face + 0.5, 0.0, 1.0], [0.5, 5.0, 5.0])
        assert body_to_goal(m, box, skel) == pytest.approx(0.71, abs=1e-12)

    @given(st.floats(0.0, 3.0))
    def test_static_distance(self, d):
        sk = SkeletonDef(("root",), [-1], [[0, 0, 0]], [0.1])
        m = still(sk, 1, (0.0, 0.0, 1.0))
        box = OrientedBox([d + 0.5, 0.0, 1.0], [0.5, 0.5, 0.5])
        assert body_to_goal(m, box, sk) == pytest.approx(d, abs=1e-12)

    @given(st.floats(-1.0, 1.0), st.floats(-1.0, 1.0), st.floats(-3.0, 3.0))
    def test_zero_iff_some_joint_inside(self, x, y, yaw):
        sk = stick()
        m = still(sk, 1, (x, y, 0.0))
        box = OrientedBox([0.0, 0.0, 0.5], [0.4, 0.2, 0.5], yaw)
        inside = np.any(box_sdf(fk(m.to_array(), sk).reshape(-1, 3), box) <= 0)
        assert (body_to_goal(m, box, sk) == 0.0) == inside


class TestNonCollision:
    def test_free_space(self, skel):
        m = still(skel, 3, (0.0, 0.0, 0.9))
        field = SceneField([OrientedBox([5, 5, 0.5], [0.3, 0.3, 0.5])])
        assert non_collision(m, field, skel) == 1.0
        assert non_collision(m, SceneField(), skel) == 1.0

    def test_half_straddle(self):
        sk = stick()
        # samples at z = 0, 2/3, 4/3, 2; the box swallows the lower two rings
        field = SceneField([OrientedBox([0.0, 0.0, 0.0], [3.0, 3.0, 1.0])])
        m = still(sk)
        assert non_collision(m, field, sk) == 0.5
        pts = body_points(m, sk).reshape(-1, 3)
        assert np.mean(scene_sdf(pts, field) >= 0) == 0.5

    def test_grazing_counts_as_free(self):
        sk = stick()
        # the +x samples sit exactly on the box face
        field = SceneField([OrientedBox([1.0, 0.0, 1.0], [0.5, 3.0, 3.0])])
        m = still(sk)
        assert np.min(np.abs(scene_sdf(body_points(m, sk).reshape(-1, 3), field))) == 0.0
        assert non_collision(m, field, sk) == 1.0

    @given(st.floats(0.0, 1.5), st.floats(0.0, 0.5))
    def test_monotone_in_box_size(self, h, grow):
        sk = stick()
        m = still(sk, 1, (0.2, 0.1, 0.0))
        small = SceneField([OrientedBox([0.6, 0.0, 1.0], [h + 0.01, 0.4, 0.8])])
        big = SceneField([OrientedBox([0.6, 0.0, 1.0], [h + 0.01 + grow, 0.4 + grow, 0.8 + grow])])
        assert non_collision(m, big, sk) <= non_collision(m, small, sk)


class TestContact:
    def test_threshold_fixtures(self):
        sk = stick()
        m = still(sk)
        for gap, expect in ((0.049, True), (0.051, False)):
            box = OrientedBox([0.5 + gap + 0.5, 0.0, 1.0], [0.5, 3.0, 3.0])
            assert contact(m, box, sk) is expect

    def test_resting_seat(self):
        sk = stick(0.1)
        m = still(sk, 2, (0.0, 0.0, 0.42))
        seat = OrientedBox([0.0, 0.0, 0.2], [0.5, 0.5, 0.2])
        assert contact(m, seat, sk)

    def test_far(self, skel):
        m = still(skel, 2, (0.0, 0.0, 0.9))
        assert not contact(m, OrientedBox([5, 0, 0.5], [0.5, 0.5, 0.5]), skel)


class TestRigidInvariance:
    @given(st.floats(-20, 20), st.floats(-20, 20), st.floats(-2, 2))
    def test_translate_together(self, dx, dy, dz):
        sk = stick(0.2)
        rng = np.random.default_rng(0)
        x = rest_prior_mean(sk, 4)
        x[:, :3] = rng.normal(0, 0.3, (4, 3))
        x[:, 3:] = rng.normal(0, 0.4, (4, 6))
        m = MotionSequence.from_array(x, 2, 20.0)
        box = OrientedBox([0.3, 0.0, 0.8], [0.3, 0.5, 0.8], 0.4)
        field = SceneField([box], check_bounds=False)
        off = np.array([dx, dy, dz])
        a = evaluate(m, field, box, sk)
        b = evaluate(m.translated(off), field.translated(off), box.translated(off), sk)
        assert b.body_to_goal == pytest.approx(a.body_to_goal, abs=1e-9)
        assert b.non_collision == pytest.approx(a.non_collision, abs=1e-9)
        assert b.contact == a.contact


class TestReports:
    def test_eval_result_validation(self):
        with pytest.raises(ValueError):
            EvalResult(0.1, 1.5, 0.0)
        with pytest.raises(ValueError):
            EvalResult(-0.1, 0.5, 0.0)

    def test_json_and_csv(self, skel):
        box = OrientedBox([1.0, 0.0, 0.5], [0.3, 0.3, 0.5])
        field = SceneField([box])
        results = [evaluate(still(skel, 2, (x, 0.0, 0.9)), field, box, skel, name=f"m{i}")
                   for i, x in enumerate((0.0, 1.0))]
        doc = json.loads(report_json(results))
        assert [r["name"] for r in doc["motions"]] == ["m0", "m1"]
        assert doc["aggregate"] == aggregate(results)
        lines = report_csv(results).splitlines()
        assert lines[0] == "name,body_to_goal,non_collision,contact"
        assert len(lines) == 4 and lines[-1].startswith("aggregate,")
        npt.assert_allclose(doc["aggregate"]["contact"], np.mean([r.contact for r in results]))
        with pytest.raises(ValueError):
            aggregate([])
