"""Two toy VQA classifiers with exact image gradients.

Monolithic: mean-pooled patch features, gated by the question vector, then a
two-layer perceptron. Attentive: the pooling is a question-conditioned softmax
over the 16 patches, and the attention map is exposed.

Both add a question-only answer prior (a linear map of the question's bag of
words) to the image logits; it is also trained on its own, so answers that never
occur for a question type end up strongly suppressed whatever the image shows.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from avlt.diffcore import ParamStore, ParamOptimizer, derive_rng
from avlt.errors import InvalidArgumentError, NumericalError, TrainingError
from avlt.targets.scenes import ANSWERS, QUESTION_VOCAB, Question, question_bag
from avlt.victims.common import (
    FEATURE_DIM, LOG_FLOOR, N_PATCHES, encode_patches, encoder_backward, init_encoder,
    log_softmax, softmax, to_patches,
)

VARIANTS = ("monolithic", "attentive")
HIDDEN = 64
ATTN_HIDDEN = 32

# objective(log_probs) -> (value, d value / d log_probs)
Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]


@dataclass
class VqaForward:
    patches: np.ndarray
    feats: np.ndarray
    q: np.ndarray
    attn_hidden: np.ndarray | None
    alpha: np.ndarray | None
    pooled: np.ndarray
    gated: np.ndarray
    hidden: np.ndarray
    prior: np.ndarray
    logits: np.ndarray

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits)

    @property
    def log_probs(self) -> np.ndarray:
        return log_softmax(self.logits)


class VqaVictim:
    def __init__(self, variant: str, params: ParamStore):
        if variant not in VARIANTS:
            raise InvalidArgumentError(f"unknown variant {variant!r}")
        self.variant = variant
        self.params = params
        self.answer_vocab = ANSWERS
        self.question_vocab = QUESTION_VOCAB

    @property
    def K(self) -> int:
        return len(self.answer_vocab)

    @classmethod
    def init(cls, variant: str, seed: int = 0, zero: bool = False) -> "VqaVictim":
        rng = derive_rng(seed, 11)
        p: dict[str, np.ndarray] = {}
        init_encoder(rng, p)
        p["q.emb"] = rng.normal(0, 1.0, size=(len(QUESTION_VOCAB), FEATURE_DIM))
        if variant == "attentive":
            p["att.Wf"] = rng.normal(0, 1 / np.sqrt(FEATURE_DIM), size=(FEATURE_DIM, ATTN_HIDDEN))
            p["att.Wq"] = rng.normal(0, 1 / np.sqrt(FEATURE_DIM), size=(FEATURE_DIM, ATTN_HIDDEN))
            p["att.b"] = np.zeros(ATTN_HIDDEN)
            p["att.v"] = rng.normal(0, 1 / np.sqrt(ATTN_HIDDEN), size=ATTN_HIDDEN)
        p["head.W1"] = rng.normal(0, 1 / np.sqrt(FEATURE_DIM), size=(FEATURE_DIM, HIDDEN))
        p["head.b1"] = np.zeros(HIDDEN)
        p["head.W2"] = rng.normal(0, 1 / np.sqrt(HIDDEN), size=(HIDDEN, len(ANSWERS)))
        p["head.b2"] = np.zeros(len(ANSWERS))
        p["prior.U"] = np.zeros((len(QUESTION_VOCAB), len(ANSWERS)))
        if zero:
            p = {k: np.zeros_like(v) for k, v in p.items()}
        return cls(variant, ParamStore(p))

    # --- batched core -------------------------------------------------------

    def forward_batch(self, images: np.ndarray, bags: np.ndarray) -> VqaForward:
        P = self.params
        patches = to_patches(images)
        feats = encode_patches(P, patches)
        q = bags @ P["q.emb"]
        attn_hidden = alpha = None
        if self.variant == "monolithic":
            pooled = feats.mean(axis=1)
        else:
            attn_hidden = np.tanh(feats @ P["att.Wf"] + (q @ P["att.Wq"])[:, None, :] + P["att.b"])
            alpha = softmax(attn_hidden @ P["att.v"], axis=1)
            pooled = np.einsum("np,npd->nd", alpha, feats)
        gated = pooled * q
        hidden = np.tanh(gated @ P["head.W1"] + P["head.b1"])
        prior = bags @ P["prior.U"]
        logits = hidden @ P["head.W2"] + P["head.b2"] + prior
        if not np.all(np.isfinite(logits)):
            raise NumericalError("non-finite logits")
        return VqaForward(patches, feats, q, attn_hidden, alpha, pooled, gated, hidden, prior, logits)

    def backward_batch(self, fw: VqaForward, bags: np.ndarray, dlogits: np.ndarray,
                       param_grads: bool = False, dprior: np.ndarray | None = None):
        """Returns (d pixels, param grads or None).

        `dprior` is an extra gradient on the prior logits alone (its own training loss).
        """
        P = self.params
        grads = {} if param_grads else None
        dhidden = dlogits @ P["head.W2"].T
        dhpre = dhidden * (1 - fw.hidden**2)
        dgated = dhpre @ P["head.W1"].T
        dpooled = dgated * fw.q
        dq = dgated * fw.pooled
        if self.variant == "monolithic":
            dfeats = np.broadcast_to(dpooled[:, None, :] / N_PATCHES, fw.feats.shape).copy()
        else:
            alpha = fw.alpha
            dfeats = alpha[:, :, None] * dpooled[:, None, :]
            dalpha = np.einsum("npd,nd->np", fw.feats, dpooled)
            dscore = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
            da = dscore[:, :, None] * P["att.v"]
            dapre = da * (1 - fw.attn_hidden**2)
            dfeats += dapre @ P["att.Wf"].T
            dapre_sum = dapre.sum(axis=1)
            dq += dapre_sum @ P["att.Wq"].T
            if grads is not None:
                grads["att.v"] = np.einsum("npa,np->a", fw.attn_hidden, dscore)
                grads["att.Wf"] = np.einsum("npd,npa->da", fw.feats, dapre)
                grads["att.Wq"] = fw.q.T @ dapre_sum
                grads["att.b"] = dapre_sum.sum(axis=0)
        if grads is not None:
            grads["head.W2"] = fw.hidden.T @ dlogits
            grads["head.b2"] = dlogits.sum(axis=0)
            grads["head.W1"] = fw.gated.T @ dhpre
            grads["head.b1"] = dhpre.sum(axis=0)
            grads["q.emb"] = bags.T @ dq
            grads["prior.U"] = bags.T @ (dlogits if dprior is None else dlogits + dprior)
        dimages = encoder_backward(P, fw.patches, fw.feats, dfeats, grads)
        return dimages, grads

    # --- single example -----------------------------------------------------

    def bag(self, q: Question) -> np.ndarray:
        for t in q.token_ids:
            if not 0 <= t < len(self.question_vocab):
                raise InvalidArgumentError(f"question token {t} out of range")
        return question_bag(q)[None, :]

    def forward(self, x: np.ndarray, q: Question) -> VqaForward:
        return self.forward_batch(np.asarray(x, dtype=np.float64)[None], self.bag(q))


def forward_vqa(model: VqaVictim, x: np.ndarray, q: Question):
    """(probabilities over the K answers, attention map or None)."""
    fw = model.forward(x, q)
    attn = None if fw.alpha is None else fw.alpha[0].reshape(4, 4)
    return fw.probs[0], attn


def predict_answer(model: VqaVictim, x: np.ndarray, q: Question) -> int:
    return int(np.argmax(model.forward(x, q).logits[0]))


def floored_log_probs(log_probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """log p clamped at log(1e-12); second value is the pass-through mask for gradients."""
    mask = log_probs > LOG_FLOOR
    return np.where(mask, log_probs, LOG_FLOOR), mask.astype(np.float64)


def vqa_loss_grad(model: VqaVictim, x: np.ndarray, q: Question, objective: Objective):
    """Value of objective(log probs) at x and its exact gradient with respect to the pixels."""
    bags = model.bag(q)
    fw = model.forward_batch(np.asarray(x, dtype=np.float64)[None], bags)
    logp = fw.log_probs[0]
    value, dlogp = objective(logp)
    if not np.isfinite(value):
        raise NumericalError("objective is not finite")
    probs = np.exp(logp)
    dlogits = dlogp - probs * dlogp.sum()
    dx, _ = model.backward_batch(fw, bags, dlogits[None])
    return float(value), dx[0]


@dataclass
class VqaTrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 3e-3
    target_accuracy: float = 0.95
    noise: float = 20.0  # uniform pixel noise amplitude used as augmentation
    weight_decay: float = 1e-2
    # None -> DEFAULT_DECAY[variant]; names missing from the variant are skipped
    decay_params: tuple[str, ...] | None = None


# L2 on the answer head (and the attention weights) keeps features out of tanh/softmax
# saturation, which otherwise leaves margin-based attacks without a usable gradient
DEFAULT_DECAY = {
    "monolithic": ("head.W2",),
    "attentive": ("head.W1", "head.W2", "att.Wf", "att.Wq", "att.v"),
}


def evaluate_vqa(model: VqaVictim, images, bags, answers, batch: int = 512) -> float:
    correct = 0
    for i in range(0, len(answers), batch):
        fw = model.forward_batch(images[i : i + batch], bags[i : i + batch])
        correct += int((fw.logits.argmax(axis=1) == answers[i : i + batch]).sum())
    return correct / len(answers)


def train_vqa(corpus, variant: str, hyper: VqaTrainConfig | None = None, seed: int = 0,
              log: Callable[[str], None] | None = None, history: list | None = None) -> VqaVictim:
    """Minibatch Adam on cross-entropy; raises TrainingError below the target accuracy."""
    hyper = hyper or VqaTrainConfig()
    model = VqaVictim.init(variant, seed)
    decay = DEFAULT_DECAY[variant] if hyper.decay_params is None else hyper.decay_params
    opt = ParamOptimizer(model.params, kind="adam", lr=hyper.lr)
    X, Bg, Y = corpus.arrays("train")
    Xv, Bv, Yv = corpus.arrays("val")
    rng = derive_rng(seed, 12)
    n = len(Y)
    acc = 0.0
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        total = 0.0
        for i in range(0, n, hyper.batch_size):
            idx = order[i : i + hyper.batch_size]
            xb = X[idx]
            if hyper.noise > 0:
                xb = np.clip(xb + rng.uniform(-hyper.noise, hyper.noise, size=xb.shape), 0, 255)
            fw = model.forward_batch(xb, Bg[idx])
            probs = fw.probs
            total += float(-np.log(probs[np.arange(len(idx)), Y[idx]] + 1e-300).sum())
            rows = np.arange(len(idx))
            dlogits = probs.copy()
            dlogits[rows, Y[idx]] -= 1
            dprior = softmax(fw.prior)
            dprior[rows, Y[idx]] -= 1
            _, grads = model.backward_batch(fw, Bg[idx], dlogits / len(idx), param_grads=True,
                                            dprior=dprior / len(idx))
            if hyper.weight_decay:
                for k in decay:
                    if k in grads:
                        grads[k] = grads[k] + hyper.weight_decay * model.params[k]
            opt.step(grads)
        acc = evaluate_vqa(model, Xv, Bv, Yv)
        if history is not None:
            history.append((total / n, acc))
        if log:
            log(f"[{variant}] epoch {epoch + 1}: loss {total / n:.4f} val acc {acc:.4f}")
    if acc < hyper.target_accuracy:
        raise TrainingError(f"{variant} VQA victim below {hyper.target_accuracy}", acc)
    return model
