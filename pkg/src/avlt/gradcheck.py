"""Finite-difference audit of every analytic image gradient the attacks rely on."""
from __future__ import annotations

import numpy as np

from avlt.attacks import AttackConfig, cw_objective, xi_log_prob_objective
from avlt.diffcore import derive_rng
from avlt.metrics import rmse, rmse_grad
from avlt.targets.captions import Caption, caption_pool
from avlt.targets.scenes import (
    ANSWERS, CorpusConfig, Question, all_question_texts, render_scene, sample_scene,
)
from avlt.victims.densecap import DenseCapVictim, densecap_teacher_loss
from avlt.victims.vqa import VqaVictim, vqa_loss_grad

REL_TOL = 1e-4
STEP = 1e-3  # pixel (or tanh-space) units


def rel_error(a: float, b: float, floor: float = 1e-7) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def _probe(f, grad, x, coords, h=STEP):
    errs = []
    for c in coords:
        e = np.zeros_like(x)
        e[c] = h
        numeric = (f(x + e) - f(x - e)) / (2 * h)
        errs.append(rel_error(float(grad[c]), numeric))
    return errs


def _random_case(rng, k: int, bound: float):
    spec = sample_scene(rng, int(rng.integers(1 << 30)), CorpusConfig())
    x0 = render_scene(spec)
    # keep away from the clip boundaries so the probes stay inside the box
    x0 = np.clip(x0, 2.0, 253.0)
    scale = rng.choice([0.3, 1.3]) * bound
    x = np.clip(x0 + rng.uniform(-scale, scale, size=x0.shape), 1.0, 254.0)
    texts = sorted(all_question_texts().items())
    text, cat = texts[int(rng.integers(len(texts)))]
    return x0, x, Question.from_text(text, cat), int(rng.integers(k))


def _coords(rng, shape, n):
    flat = rng.choice(int(np.prod(shape)), size=n, replace=False)
    return [np.unravel_index(int(i), shape) for i in flat]


def audit_xi(model: VqaVictim, probes: int, seed: int, cfg: AttackConfig | None = None, per_case: int = 10):
    """The full three-term objective with the prediction held at its value at x."""
    cfg = cfg or AttackConfig()
    tau = cfg.tau_for(model.K)
    rng = derive_rng(seed, 61)
    errs = []
    while len(errs) < probes:
        x0, x, q, target = _random_case(rng, model.K, cfg.bound)
        y_pred = int(np.argmax(model.forward(x, q).logits[0]))
        obj = xi_log_prob_objective(target, y_pred, cfg, tau)

        def f(img):
            v, _ = vqa_loss_grad(model, img, q, obj)
            return v + cfg.lambda2 * max(0.0, rmse(img, x0) - cfg.bound + cfg.slack)

        _, g = vqa_loss_grad(model, x, q, obj)
        d = rmse(x, x0)
        if d - cfg.bound + cfg.slack > 0:
            g = g + cfg.lambda2 * rmse_grad(x, x0, d)
        errs += _probe(f, g, x, _coords(rng, x.shape, per_case))
    return errs[:probes]


def audit_cw(model: VqaVictim, probes: int, seed: int, lam: float = 0.1, per_case: int = 10):
    """CW loss in tanh space; cases where the margin is inactive probe the distance term alone."""
    rng = derive_rng(seed, 62)
    errs = []
    while len(errs) < probes:
        x0, x, q, target = _random_case(rng, model.K, 20.0)
        delta = np.arctanh(2 * x / 255.0 - 1)
        bags = model.bag(q)
        _, g, *_ = cw_objective(model, delta, x0, bags, target, lam)

        def f(dl):
            return cw_objective(model, dl, x0, bags, target, lam)[0]

        errs += _probe(f, g, delta, _coords(rng, delta.shape, per_case), h=1e-5)
    return errs[:probes]


def audit_caption(model: DenseCapVictim, probes: int, seed: int, per_case: int = 10):
    rng = derive_rng(seed, 63)
    pool = caption_pool()
    errs = []
    while len(errs) < probes:
        _, x, _, _ = _random_case(rng, len(ANSWERS), 20.0)
        target = Caption.from_text(pool[int(rng.integers(len(pool)))])
        _, g = densecap_teacher_loss(model, x, target)
        errs += _probe(lambda img: densecap_teacher_loss(model, img, target)[0], g, x,
                       _coords(rng, x.shape, per_case))
    return errs[:probes]


def audit_all(models: dict, probes: int = 100, seed: int = 0) -> dict:
    """`models` maps monolithic/attentive/captioner to a model, or None for a seeded fresh init."""
    checks = {}
    for variant in ("monolithic", "attentive"):
        m = models.get(variant) or VqaVictim.init(variant, seed)
        checks[f"{variant}/xi"] = audit_xi(m, probes, seed)
        checks[f"{variant}/cw"] = audit_cw(m, probes, seed)
    cap = models.get("captioner") or DenseCapVictim.init(seed)
    checks["captioner/teacher"] = audit_caption(cap, probes, seed)
    report = {"tolerance": REL_TOL, "checks": {}}
    for name, errs in checks.items():
        worst = float(max(errs))
        report["checks"][name] = {"probes": len(errs), "max_rel_error": worst, "pass": worst <= REL_TOL}
    report["pass"] = all(c["pass"] for c in report["checks"].values())
    return report
