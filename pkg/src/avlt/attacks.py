"""Targeted attacks: the bounded three-term objective, its CW baseline, and the caption attack."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from avlt.diffcore import (
    OPTIMIZERS, OptimizerState, as_image, clip_pixels, derive_rng, optimizer_step, random_start,
)
from avlt.errors import ConfigurationError, InvalidArgumentError
from avlt.metrics import rmse, rmse_grad
from avlt.victims.common import LOG_FLOOR
from avlt.victims.densecap import MAX_LEN, target_arrays, ids_to_caption
from avlt.victims.vqa import VqaVictim, floored_log_probs

NUM_ANSWERS = 17


class Theorem2Warning(UserWarning):
    """The distance penalty is not provably strong enough to keep the optimum inside the bound."""


@dataclass
class AttackConfig:
    bound: float = 20.0
    slack: float = 2.0
    lambda1: float = 1.0
    lambda2: float = 10.0
    tau: float | None = None  # None -> ln K of the victim
    lr: float = 1.0
    maxitr: int = 1000
    min_iter: int = 50
    restarts: int = 3
    optimizer: str = "adam"
    # caption attack only: "bounded" uses the ReLU penalty, "plain" adds distance_weight * d
    distance_mode: str = "bounded"
    distance_weight: float = 0.1

    def validate(self) -> "AttackConfig":
        if not self.bound > self.slack > 0:
            raise ConfigurationError(f"need bound > slack > 0, got B={self.bound}, eps={self.slack}")
        if min(self.lambda1, self.lambda2, self.lr) <= 0:
            raise ConfigurationError("lambda1, lambda2 and lr must be positive")
        if self.maxitr <= self.min_iter:
            raise ConfigurationError("maxitr must exceed min_iter")
        if self.restarts < 1:
            raise ConfigurationError("restarts must be at least 1")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.distance_mode not in ("bounded", "plain"):
            raise ConfigurationError(f"unknown distance mode {self.distance_mode!r}")
        if self.tau is not None and self.tau <= 0:
            raise ConfigurationError("tau must be positive")
        return self

    def tau_for(self, k: int) -> float:
        return math.log(k) if self.tau is None else self.tau


@dataclass
class CwConfig:
    lam: float = 0.1
    lr: float = 0.01
    maxitr: int = 1000
    min_iter: int = 50
    restarts: int = 3
    bound: float = 20.0
    optimizer: str = "adam"

    def validate(self) -> "CwConfig":
        if self.lam <= 0:
            raise ConfigurationError("lambda must be positive")
        if self.lr <= 0 or self.maxitr <= self.min_iter or self.restarts < 1:
            raise ConfigurationError("invalid CW schedule")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        return self


@dataclass
class ObjectiveBreakdown:
    term1: float
    term2: float
    term3: float
    y_pred: int

    @property
    def total(self) -> float:
        return self.term1 + self.term2 + self.term3


@dataclass
class AttackResult:
    image: np.ndarray
    success: bool
    adversarial_probability: float
    iterations_used: int
    final_rmse: float
    prediction: int | None = None
    target: int | None = None
    theorem2_ok: bool | None = None
    trace: list = field(default_factory=list)
    captions: list | None = None

    def record(self) -> dict:
        """JSON-friendly summary without the image and trace."""
        out = {
            "success": bool(self.success),
            "adversarial_probability": float(self.adversarial_probability),
            "iterations_used": int(self.iterations_used),
            "final_rmse": float(self.final_rmse),
            "prediction": self.prediction,
            "target": self.target,
            "theorem2_ok": self.theorem2_ok,
        }
        if self.captions is not None:
            out["captions"] = list(self.captions)
        return out


# --- the bounded objective ------------------------------------------------------

def eval_xi(probs, y_target: int, y_pred: int, d: float, cfg: AttackConfig) -> ObjectiveBreakdown:
    probs = np.asarray(probs, dtype=np.float64)
    k = probs.shape[0]
    if not (0 <= y_target < k and 0 <= y_pred < k):
        raise InvalidArgumentError("answer index out of range")
    if d < 0:
        raise InvalidArgumentError("distance must be non-negative")
    logp = np.maximum(np.log(np.maximum(probs, 1e-300)), LOG_FLOOR)
    return _breakdown(logp, y_target, y_pred, d, cfg, cfg.tau_for(k))


def _breakdown(logp, y_target, y_pred, d, cfg, tau) -> ObjectiveBreakdown:
    term1 = -float(logp[y_target])
    term2 = cfg.lambda1 * (tau + float(logp[y_pred])) if y_target != y_pred else 0.0
    term3 = cfg.lambda2 * max(0.0, d - cfg.bound + cfg.slack)
    return ObjectiveBreakdown(term1, term2, term3, int(y_pred))


def xi_log_prob_objective(y_target: int, y_pred: int, cfg: AttackConfig, tau: float):
    """First two terms as a function of log probabilities (the third depends on pixels only)."""

    def objective(log_probs):
        logp, mask = floored_log_probs(log_probs)
        grad = np.zeros_like(logp)
        value = -logp[y_target]
        grad[y_target] -= mask[y_target]
        if y_target != y_pred:
            value += cfg.lambda1 * (tau + logp[y_pred])
            grad[y_pred] += cfg.lambda1 * mask[y_pred]
        return float(value), grad
    return objective


def check_theorem2(cfg: AttackConfig, loss_at_source: float, k: int = NUM_ANSWERS) -> bool:
    """True when lambda2 * eps exceeds the objective value attainable at the source image."""
    if loss_at_source < 0:
        raise InvalidArgumentError("loss must be non-negative")
    return cfg.lambda2 * cfg.slack > loss_at_source + cfg.lambda1 * cfg.tau_for(k)


def _theorem2_for(model, x, q, y_target, cfg) -> bool:
    logp, _ = floored_log_probs(model.forward(x, q).log_probs[0])
    ok = check_theorem2(cfg, -float(logp[y_target]), model.K)
    if not ok:
        warnings.warn(
            f"lambda2*eps={cfg.lambda2 * cfg.slack} does not dominate the source loss; "
            "the bound is not guaranteed for this target",
            Theorem2Warning,
            stacklevel=3,
        )
    return ok


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else derive_rng(seed)


def attack_vqa(model: VqaVictim, x: np.ndarray, q, y_target: int, cfg: AttackConfig | None = None,
               seed=0, record_trace: bool = True) -> AttackResult:
    """One run of the iterative targeted attack from a uniform random start.

    Returns as soon as the prediction equals the target after more than `min_iter`
    iterations while the image is within the distance bound; otherwise the iterate
    after `maxitr` updates.
    """
    cfg = (cfg or AttackConfig()).validate()
    if not 0 <= y_target < model.K:
        raise InvalidArgumentError(f"target {y_target} out of range")
    x0 = as_image(x)
    tau = cfg.tau_for(model.K)
    theorem2_ok = _theorem2_for(model, x0, q, y_target, cfg)
    bags = model.bag(q)
    state = OptimizerState(kind=cfg.optimizer)
    xi = random_start(x0, cfg.bound, _rng(seed))
    trace = []

    def evaluate(img):
        fw = model.forward_batch(img[None], bags)
        return fw, fw.log_probs[0]

    for i in range(1, cfg.maxitr + 1):
        fw, logp = evaluate(xi)
        y_pred = int(np.argmax(fw.logits[0]))
        d = rmse(xi, x0)
        if y_pred == y_target and i > cfg.min_iter and d <= cfg.bound:
            return _vqa_result(xi, logp, y_pred, y_target, d, i, cfg, tau, theorem2_ok, trace, record_trace)
        objective = xi_log_prob_objective(y_target, y_pred, cfg, tau)
        value, dlogp = objective(logp)
        if record_trace:
            trace.append(_breakdown(floored_log_probs(logp)[0], y_target, y_pred, d, cfg, tau))
        dlogits = dlogp - np.exp(logp) * dlogp.sum()
        grad, _ = model.backward_batch(fw, bags, dlogits[None])
        grad = grad[0]
        if d - cfg.bound + cfg.slack > 0:
            grad = grad + cfg.lambda2 * rmse_grad(xi, x0, d)
        xi = clip_pixels(optimizer_step(state, xi, grad, cfg.lr))

    fw, logp = evaluate(xi)
    y_pred = int(np.argmax(fw.logits[0]))
    return _vqa_result(xi, logp, y_pred, y_target, rmse(xi, x0), cfg.maxitr, cfg, tau, theorem2_ok,
                       trace, record_trace)


def _vqa_result(img, logp, y_pred, y_target, d, iters, cfg, tau, theorem2_ok, trace, record_trace):
    if record_trace:
        trace.append(_breakdown(floored_log_probs(logp)[0], y_target, y_pred, d, cfg, tau))
    return AttackResult(
        image=img,
        success=bool(y_pred == y_target and d <= cfg.bound),
        adversarial_probability=float(np.exp(logp[y_target])),
        iterations_used=iters,
        final_rmse=d,
        prediction=y_pred,
        target=int(y_target),
        theorem2_ok=theorem2_ok,
        trace=trace,
    )


def best_result(results: list[AttackResult]) -> AttackResult:
    """Any success beats any failure; ties go to the higher target probability, then the earlier run."""
    best = results[0]
    for r in results[1:]:
        if (r.success, r.adversarial_probability) > (best.success, best.adversarial_probability):
            best = r
    return best


def attack_with_restarts(model, x, q, y_target, cfg: AttackConfig | None = None, seed=0,
                         attack=None, **kwargs) -> AttackResult:
    cfg = (cfg or AttackConfig()).validate()
    attack = attack or attack_vqa
    runs = [attack(model, x, q, y_target, cfg, seed=derive_rng(seed, r), **kwargs) for r in range(cfg.restarts)]
    return best_result(runs)


# --- CW baseline ----------------------------------------------------------------

TANH_EDGE = 1 - 1e-6


def pixels_from_delta(delta: np.ndarray) -> np.ndarray:
    return 255.0 * (np.tanh(delta) + 1.0) / 2.0


def delta_from_pixels(x: np.ndarray) -> np.ndarray:
    return np.arctanh(np.clip(2.0 * x / 255.0 - 1.0, -TANH_EDGE, TANH_EDGE))


def cw_objective(model, delta, x0, bags, y_target, lam):
    """ReLU(log p[pred] - log p[target]) + lam * rmse, and its gradient in delta space."""
    x = pixels_from_delta(delta)
    fw = model.forward_batch(x[None], bags)
    logp, mask = floored_log_probs(fw.log_probs[0])
    y_pred = int(np.argmax(fw.logits[0]))
    d = rmse(x, x0)
    margin = logp[y_pred] - logp[y_target]
    value = max(0.0, margin) + lam * d
    dlogp = np.zeros_like(logp)
    if margin > 0:
        dlogp[y_pred] += mask[y_pred]
        dlogp[y_target] -= mask[y_target]
    dlogits = dlogp - np.exp(fw.log_probs[0]) * dlogp.sum()
    gx, _ = model.backward_batch(fw, bags, dlogits[None])
    gx = gx[0] + lam * rmse_grad(x, x0, d)
    gdelta = gx * 127.5 * (1.0 - np.tanh(delta) ** 2)
    return float(value), gdelta, x, fw, y_pred, d


def attack_cw(model: VqaVictim, x: np.ndarray, q, y_target: int, cfg: CwConfig | None = None,
              seed=0, record_trace: bool = True) -> AttackResult:
    """CW-style baseline optimised over tanh-space variables, same stopping rule as `attack_vqa`."""
    cfg = (cfg or CwConfig()).validate()
    if not 0 <= y_target < model.K:
        raise InvalidArgumentError(f"target {y_target} out of range")
    x0 = as_image(x)
    bags = model.bag(q)
    state = OptimizerState(kind=cfg.optimizer)
    delta = delta_from_pixels(random_start(x0, cfg.bound, _rng(seed)))
    trace = []
    for i in range(1, cfg.maxitr + 1):
        value, gdelta, xi, fw, y_pred, d = cw_objective(model, delta, x0, bags, y_target, cfg.lam)
        if y_pred == y_target and i > cfg.min_iter and d <= cfg.bound:
            return _cw_result(xi, fw, y_pred, y_target, d, i, trace)
        if record_trace:
            trace.append(value)
        delta = optimizer_step(state, delta, gdelta, cfg.lr)
    xi = pixels_from_delta(delta)
    fw = model.forward_batch(xi[None], bags)
    y_pred = int(np.argmax(fw.logits[0]))
    d = rmse(xi, x0)
    return _cw_result(xi, fw, y_pred, y_target, d, cfg.maxitr, trace, cfg.bound)


def _cw_result(xi, fw, y_pred, y_target, d, iters, trace, bound=None):
    ok = y_pred == y_target and (bound is None or d <= bound)
    return AttackResult(
        image=xi,
        success=bool(ok),
        adversarial_probability=float(fw.probs[0, y_target]),
        iterations_used=iters,
        final_rmse=d,
        prediction=y_pred,
        target=int(y_target),
        trace=trace,
    )


# --- caption attack -------------------------------------------------------------

def _caption_objective(model, img, x0, ids, mask, cfg: AttackConfig):
    """Teacher-forced target loss over all regions plus the distance term, with pixel gradient."""
    loss, cache = model.teacher_forward(img[None], ids, mask)
    grad, _ = model.teacher_backward(cache)
    grad = grad[0]
    d = rmse(img, x0)
    if cfg.distance_mode == "bounded":
        excess = d - cfg.bound + cfg.slack
        value = loss + cfg.lambda2 * max(0.0, excess)
        if excess > 0:
            grad = grad + cfg.lambda2 * rmse_grad(img, x0, d)
    else:
        value = loss + cfg.distance_weight * d
        grad = grad + cfg.distance_weight * rmse_grad(img, x0, d)
    # log-probability of the target under the top-ranked region alone
    first = cache[7]
    rows = ids.reshape(-1, ids.shape[-1])[0]
    top1_logp = sum(float(first[t][0, rows[t]]) for t in range(len(rows)))
    return value, grad, d, top1_logp


def attack_densecap(model, x: np.ndarray, target, cfg: AttackConfig | None = None, seed=0,
                    record_trace: bool = True) -> AttackResult:
    """Push every fixed region's caption towards `target`; success is judged on the top-ranked region."""
    cfg = (cfg or AttackConfig()).validate()
    if len(target.token_ids) > MAX_LEN:
        raise InvalidArgumentError("target caption too long")
    x0 = as_image(x)
    ids, mask = target_arrays(target)
    want = np.array(target.token_ids)
    state = OptimizerState(kind=cfg.optimizer)
    xi = random_start(x0, cfg.bound, _rng(seed))
    trace = []
    iters = cfg.maxitr
    for i in range(1, cfg.maxitr + 1):
        decoded = model.decode(xi[None])[0]
        hit = np.array_equal(decoded[0, : len(want)], want)
        value, grad, d, top1 = _caption_objective(model, xi, x0, ids, mask, cfg)
        if hit and i > cfg.min_iter and d <= cfg.bound:
            iters = i
            break
        if record_trace:
            trace.append(value)
        xi = clip_pixels(optimizer_step(state, xi, grad, cfg.lr))
    else:
        decoded = model.decode(xi[None])[0]
        hit = np.array_equal(decoded[0, : len(want)], want)
        value, _, d, top1 = _caption_objective(model, xi, x0, ids, mask, cfg)
    if record_trace:
        trace.append(value)
    return AttackResult(
        image=xi,
        success=bool(hit and d <= cfg.bound),
        adversarial_probability=float(np.exp(top1)),
        iterations_used=iters,
        final_rmse=d,
        trace=trace,
        captions=[ids_to_caption(row).text for row in decoded],
    )


def densecap_with_restarts(model, x, target, cfg: AttackConfig | None = None, seed=0, **kwargs) -> AttackResult:
    cfg = (cfg or AttackConfig()).validate()
    runs = [attack_densecap(model, x, target, cfg, seed=derive_rng(seed, r), **kwargs) for r in range(cfg.restarts)]
    return best_result(runs)
