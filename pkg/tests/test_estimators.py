import pytest
from sklearn.base import clone

from scenemotion.diffusion import GuidedMotionSampler
from scenemotion.planner import LLMPlanner, RuleBasedPlanner
from scenemotion.scene import SceneCompiler


@pytest.mark.parametrize("est, param, value", [
    (SceneCompiler(), "cell_size", 0.5),
    (GuidedMotionSampler(), "eta", 0.0),
    (RuleBasedPlanner(), "speed", 1.0),
    (LLMPlanner(), "reprompts", 1),
])
def test_params_round_trip(est, param, value):
    params = est.get_params()
    assert param in params
    c = clone(est).set_params(**{param: value})
    assert c.get_params()[param] == value
    assert est.get_params()[param] == params[param]
    assert repr(c).startswith(type(est).__name__)
