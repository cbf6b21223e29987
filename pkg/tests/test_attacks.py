import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from avlt.attacks import (
    AttackConfig, AttackResult, CwConfig, Theorem2Warning, attack_cw, attack_densecap, attack_vqa,
    attack_with_restarts, best_result, check_theorem2, cw_objective, delta_from_pixels, eval_xi,
    pixels_from_delta,
)
from avlt.errors import ConfigurationError, InvalidArgumentError
from avlt.metrics import rmse
from avlt.targets.captions import Caption
from avlt.targets.scenes import Question
from avlt.victims.densecap import DenseCapVictim, decode_dense_captions
from avlt.victims.vqa import VqaVictim

Q = Question.from_text("what shape is the object at the center", "shape")
FAST = AttackConfig(maxitr=120, restarts=1)


def _image(seed=0):
    return np.random.default_rng(seed).uniform(20, 235, size=(32, 32, 3))


def _result(success, p):
    return AttackResult(np.zeros((32, 32, 3)), success, p, 60, 1.0)


def test_eval_xi_hand_example():
    cfg = AttackConfig()
    b = eval_xi([0.7, 0.1, 0.1, 0.1], 1, 0, 25.0, cfg)
    assert b.term1 == pytest.approx(-math.log(0.1), abs=1e-12)
    assert b.term2 == pytest.approx(math.log(4) + math.log(0.7), abs=1e-12)
    assert b.term3 == pytest.approx(70.0)
    assert b.total == pytest.approx(73.332, abs=1e-3)


def test_eval_xi_trivial_cases():
    cfg = AttackConfig()
    assert eval_xi([0.5, 0.5], 0, 0, 3.0, cfg).term2 == 0
    assert eval_xi([0.5, 0.5], 1, 0, 0.0, cfg).term3 == 0
    # zero probability hits the floor instead of producing inf
    assert eval_xi([1.0, 0.0], 1, 0, 0.0, cfg).term1 == pytest.approx(-math.log(1e-12))
    with pytest.raises(InvalidArgumentError):
        eval_xi([0.5, 0.5], 2, 0, 0.0, cfg)
    with pytest.raises(InvalidArgumentError):
        eval_xi([0.5, 0.5], 0, 0, -1.0, cfg)


def test_suppression_factor_on_random_vectors():
    rng = np.random.default_rng(0)
    for k in (2, 4, 17, 100):
        logits = rng.normal(scale=rng.uniform(0.1, 10, size=(2500, 1)), size=(2500, k))
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        factor = math.log(k) + np.log(p.max(axis=1))
        assert np.all(factor >= 0)


@given(st.lists(st.floats(1e-6, 1.0), min_size=2, max_size=20))
def test_term2_nonnegative(raw):
    p = np.array(raw) / sum(raw)
    pred = int(np.argmax(p))
    target = (pred + 1) % len(p)
    assert eval_xi(p, target, pred, 0.0, AttackConfig()).term2 >= -1e-12


@pytest.mark.parametrize("loss,expected", [(5.0, True), (18.0, False), (0.0, True)])
def test_bound_condition_examples(loss, expected):
    assert check_theorem2(AttackConfig(tau=3.0), loss) is expected
    with pytest.raises(InvalidArgumentError):
        check_theorem2(AttackConfig(), -1.0)


def test_config_validation():
    for bad in (dict(bound=2, slack=2), dict(lambda2=0), dict(maxitr=50), dict(restarts=0),
                dict(optimizer="lbfgs"), dict(distance_mode="l1")):
        with pytest.raises(ConfigurationError):
            AttackConfig(**bad).validate()
    with pytest.raises(ConfigurationError):
        CwConfig(lam=0).validate()


def test_best_result_ordering():
    assert best_result([_result(False, 0.9), _result(True, 0.2), _result(False, 0.1)]).adversarial_probability == 0.2
    assert best_result([_result(True, 0.6), _result(True, 0.8)]).adversarial_probability == 0.8
    assert best_result([_result(False, 0.3), _result(False, 0.4)]).adversarial_probability == 0.4


@pytest.fixture(scope="module")
def victim():
    return VqaVictim.init("attentive", seed=7)


def test_attack_vqa_single_run_contract(victim):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", Theorem2Warning)
        x = _image()
        r = attack_vqa(victim, x, Q, 5, FAST, seed=3)
    assert np.all((r.image >= 0) & (r.image <= 255))
    probs = victim.forward(r.image, Q).probs[0]
    assert r.adversarial_probability == pytest.approx(probs[5], abs=1e-12)
    assert r.final_rmse == pytest.approx(rmse(r.image, x))
    if r.success:
        assert r.iterations_used > 50 and r.final_rmse <= FAST.bound
    # the last trace entry is the objective at the returned image
    last = r.trace[-1]
    redo = eval_xi(probs, 5, last.y_pred, r.final_rmse, FAST)
    assert redo.total == pytest.approx(last.total, abs=1e-9)
    assert last.y_pred == r.prediction


def test_attack_determinism(victim):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", Theorem2Warning)
        a = attack_with_restarts(victim, _image(1), Q, 2, AttackConfig(maxitr=80, restarts=2), seed=11)
        b = attack_with_restarts(victim, _image(1), Q, 2, AttackConfig(maxitr=80, restarts=2), seed=11)
    np.testing.assert_array_equal(a.image, b.image)


def test_attack_rejects_bad_inputs(victim):
    with pytest.raises(InvalidArgumentError):
        attack_vqa(victim, _image(), Q, 17, FAST)
    with pytest.raises(InvalidArgumentError):
        attack_vqa(victim, np.zeros((8, 8, 3)), Q, 1, FAST)
    with pytest.raises(ConfigurationError):
        attack_vqa(victim, _image(), Q, 1, AttackConfig(slack=30))


def test_bound_warning_is_emitted(victim):
    with pytest.warns(Theorem2Warning):
        attack_vqa(victim, _image(), Q, 1, AttackConfig(maxitr=60, lambda2=0.1))


def test_early_return_on_easy_target(victim):
    x = _image(2)
    pred = int(np.argmax(victim.forward(x, Q).logits[0]))
    r = attack_vqa(victim, x, Q, pred, FAST, seed=0)
    # already predicted: the run must still wait past the minimum iteration count
    assert r.success and r.iterations_used == 51


# --- CW -------------------------------------------------------------------------------

def test_tanh_mapping():
    x = np.array([0.0, 1.0, 127.5, 254.0, 255.0])
    back = pixels_from_delta(delta_from_pixels(x))
    np.testing.assert_allclose(back[1:4], x[1:4], atol=1e-9)
    assert np.all((back >= 0) & (back <= 255))


def test_cw_objective_zero_margin_when_target_predicted(victim):
    x = _image(3)
    logits = victim.forward(x, Q).logits[0]
    pred = int(np.argmax(logits))
    value, _, _, _, y_pred, d = cw_objective(victim, delta_from_pixels(x), x, victim.bag(Q), pred, 0.1)
    assert y_pred == pred and value == pytest.approx(0.1 * d)


def test_cw_box_and_fields(victim):
    r = attack_cw(victim, _image(4), Q, 6, CwConfig(maxitr=120), seed=1)
    assert np.array_equal(np.clip(r.image, 0, 255), r.image)
    assert r.adversarial_probability == pytest.approx(victim.forward(r.image, Q).probs[0, 6], abs=1e-12)
    if r.success:
        assert r.iterations_used > 50 and r.final_rmse <= 20


# --- captions -------------------------------------------------------------------------

def test_caption_attack_descends():
    m = DenseCapVictim.init(seed=3)
    target = Caption.from_text("a red circle")
    r = attack_densecap(m, _image(5), target, AttackConfig(maxitr=100, restarts=1), seed=2)
    assert r.trace[-1] <= r.trace[0]
    assert len(r.captions) == 5
    decoded = [c.text for _, c in decode_dense_captions(m, r.image)]
    assert decoded == r.captions
    assert r.success == (decoded[0] == target.text and r.final_rmse <= 20)
    assert 0 <= r.adversarial_probability <= 1


def test_caption_plain_distance_mode():
    m = DenseCapVictim.init(seed=3)
    cfg = AttackConfig(maxitr=60, restarts=1, distance_mode="plain")
    r = attack_densecap(m, _image(5), Caption.from_text("a blue square"), cfg, seed=0)
    assert r.iterations_used >= 1
