import numpy as np
import pytest

from scenemotion.body import MotionSequence, fk
from scenemotion.checker import (
    MANDATORY,
    CheckReport,
    CheckResult,
    RetryLog,
    Thresholds,
    check,
    guidance_rmse,
    motion_summary,
    run_with_retry,
    semantic_verdict,
)
from scenemotion.diffusion import rest_prior_mean
from scenemotion.exceptions import LlmFailure, ParseFailure
from scenemotion.geometry import OrientedBox
from scenemotion.llm import MockClient
from scenemotion.metrics import non_collision
from scenemotion.planner import GuidanceSpec
from scenemotion.scene import Scene, SceneObject, compile_scene


@pytest.fixture
def setup(skel):
    scene = Scene([SceneObject(1, "crate", OrientedBox([1.8, 1.0, 0.3], [0.3, 0.3, 0.3])),
                   SceneObject(2, "wall", OrientedBox([3.5, 2.0, 1.0], [0.1, 2.0, 1.0]))],
                  [0, 0, 0], [4, 4, 3])
    aux = compile_scene(scene, "crate")
    x = rest_prior_mean(skel, 6, 0.9)
    x[:, 0] = np.linspace(0.5, 1.0, 6)
    x[:, 1] = 1.0
    motion = MotionSequence.from_array(x, skel.n_joints)
    g = GuidanceSpec.empty(6, skel.n_joints)
    g.positions[:] = fk(x, skel)
    g.mask[:, 0] = True
    return scene, aux, motion, g


class TestCheck:
    def test_all_pass(self, setup, skel):
        scene, aux, motion, g = setup
        rep = check(motion, scene, aux, g, skel=skel)
        assert rep.passed, rep.summary()
        assert set(MANDATORY) <= set(rep.checks)
        assert "semantics_ok" not in rep.checks
        assert rep.checks["guidance_ok"].value == pytest.approx(0.0, abs=1e-12)

    def test_out_of_room(self, setup, skel):
        scene, aux, motion, g = setup
        far = motion.translated([100.0, 0.0, 0.0])
        rep = check(far, scene, aux, g, skel=skel)
        assert rep.checks["in_bounds"].passed is False
        assert not rep.passed and "in_bounds" in rep.failures()

    def test_frame_inside_wall(self, setup, skel):
        scene, aux, motion, g = setup
        x = motion.to_array()
        x[3, 0] = 3.4 + 0.3 - 0.12             # front of the body 0.3 m past the wall face
        bad = MotionSequence.from_array(x, skel.n_joints)
        rep = check(bad, scene, aux, g, skel=skel)
        nc = non_collision(bad, scene.field(), skel)
        assert nc < 0.99
        assert rep.checks["collision_ok"].passed is False
        assert rep.checks["collision_ok"].value == pytest.approx(nc)

    def test_goal_and_guidance_thresholds(self, setup, skel):
        scene, aux, motion, g = setup
        th = Thresholds(goal=0.1, guidance_rmse=0.0)
        g2 = GuidanceSpec(g.positions + [0.0, 0.0, 0.2], g.mask)
        rep = check(motion, scene, aux, g2, th, skel=skel)
        assert rep.checks["goal_ok"].passed is False
        assert rep.checks["guidance_ok"].passed is False
        assert guidance_rmse(motion, g2, skel) == pytest.approx(0.2)

    def test_contact_gate(self, setup, skel):
        scene, aux, motion, g = setup
        rep = check(motion, scene, aux, g, skel=skel, require_contact=True)
        assert rep.checks["contact_ok"].passed is False

    def test_pure_and_idempotent(self, setup, skel):
        scene, aux, motion, g = setup
        a = check(motion, scene, aux, g, skel=skel)
        b = check(motion, scene, aux, g, skel=skel)
        assert a.to_json() == b.to_json() and a.passed and b.passed

    def test_semantics_verdict(self, setup, skel):
        scene, aux, motion, g = setup
        client = MockClient(['```json\n{"verdict": "no", "reason": "never touches the crate"}\n```'])
        rep = check(motion, scene, aux, g, client=client, text="touch the crate", skel=skel)
        assert rep.checks["semantics_ok"].passed is False
        assert "pelvis trajectory" in client.requests[0].messages[1][1]

    def test_llm_failure_skips_semantics(self, setup, skel):
        scene, aux, motion, g = setup
        client = MockClient([LlmFailure("down")] * 3)
        rep = check(motion, scene, aux, g, client=client, text="walk", skel=skel)
        assert rep.checks["semantics_ok"].passed is None
        assert rep.passed

    def test_bad_verdict(self):
        with pytest.raises(ParseFailure):
            semantic_verdict(MockClient(['{"verdict": "maybe"}']), "walk", "summary")

    def test_summary_text(self, setup, skel):
        scene, _, motion, _ = setup
        text = motion_summary(motion, scene.field(), skel)
        assert "closest body-to-obstacle distance" in text and "left_knee" in text

    def test_missing_mandatory_fails(self):
        assert not CheckReport({"in_bounds": CheckResult(True, 1.0, 0.0)}).passed


def fake_report(ok):
    return CheckReport({n: CheckResult(ok, 0.0, 0.0) for n in MANDATORY})


class TestRetryLoop:
    def test_first_pass(self):
        log = RetryLog()
        cand, rep, used = run_with_retry(lambda a, fb: a, lambda c: fake_report(True), 1, log_to=log)
        assert used == 0 and rep.passed and log.generations == 1 and log.replans == 0

    def test_no_retries(self):
        log = RetryLog()
        _, rep, used = run_with_retry(lambda a, fb: a, lambda c: fake_report(False), 0, log_to=log)
        assert used == 0 and not rep.passed and log.generations == 1

    def test_seeded_recovery(self):
        feedbacks = []

        def generate(attempt, feedback):
            feedbacks.append(feedback)
            return 7 + attempt                 # the "seed"

        _, rep, used = run_with_retry(generate, lambda seed: fake_report(seed == 8), 3,
                                      replan=lambda a, r: f"attempt {a} failed")
        assert used == 1 and rep.passed
        assert feedbacks == [None, "attempt 0 failed"]

    @pytest.mark.parametrize("max_iters", [0, 1, 2, 5])
    def test_bound(self, max_iters):
        log = RetryLog()
        cand, rep, used = run_with_retry(lambda a, fb: a, lambda c: fake_report(False), max_iters, log_to=log)
        assert log.replans == used == max_iters == cand
        assert log.generations == max_iters + 1 and len(log.reports) == max_iters + 1

    def test_invalid_max_iters(self):
        for bad in (-1, 1.5, True):
            with pytest.raises(ValueError):
                run_with_retry(lambda a, fb: a, lambda c: fake_report(True), bad)
