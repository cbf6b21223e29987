"""Fixed-region dense captioner: shared patch encoder, region pooling, tanh RNN decoder."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from avlt.diffcore import IMAGE_SHAPE, ParamOptimizer, ParamStore, derive_rng
from avlt.errors import InvalidArgumentError, NumericalError, TrainingError
from avlt.targets.captions import CAPTION_VOCAB, END_ID, MAX_LEN, Caption
from avlt.victims.common import (
    FEATURE_DIM, GRID, PATCH, encode_patches, encoder_backward, init_encoder, log_softmax,
    to_patches,
)

HIDDEN = 64
V = len(CAPTION_VOCAB)
START_ID = V  # input-only token


@dataclass(frozen=True)
class RegionSpec:
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (0 <= self.x0 < self.x1 <= IMAGE_SHAPE[1] and 0 <= self.y0 < self.y1 <= IMAGE_SHAPE[0]):
            raise InvalidArgumentError(f"invalid region {self}")

    def pooling_row(self) -> np.ndarray:
        """Averaging weights over the 4x4 patch grid for patches inside the region."""
        w = np.zeros((GRID, GRID))
        w[self.y0 // PATCH : self.y1 // PATCH, self.x0 // PATCH : self.x1 // PATCH] = 1
        return (w / w.sum()).reshape(-1)


# fixed confidence order: quadrants, then the whole frame
REGIONS = (
    RegionSpec(0, 0, 16, 16),
    RegionSpec(16, 0, 32, 16),
    RegionSpec(0, 16, 16, 32),
    RegionSpec(16, 16, 32, 32),
    RegionSpec(0, 0, 32, 32),
)
POOL = np.stack([r.pooling_row() for r in REGIONS])  # (5, 16)


class DenseCapVictim:
    def __init__(self, params: ParamStore):
        self.params = params
        self.regions = REGIONS
        self.vocab = CAPTION_VOCAB
        self.max_len = MAX_LEN

    @classmethod
    def init(cls, seed: int = 0, zero: bool = False) -> "DenseCapVictim":
        rng = derive_rng(seed, 21)
        p: dict[str, np.ndarray] = {}
        init_encoder(rng, p)
        p["dec.Wr0"] = rng.normal(0, 1 / np.sqrt(FEATURE_DIM), size=(FEATURE_DIM, HIDDEN))
        p["dec.b0"] = np.zeros(HIDDEN)
        p["dec.Wr"] = rng.normal(0, 1 / np.sqrt(FEATURE_DIM), size=(FEATURE_DIM, HIDDEN))
        p["dec.Wh"] = rng.normal(0, 1 / np.sqrt(HIDDEN), size=(HIDDEN, HIDDEN))
        p["dec.emb"] = rng.normal(0, 0.5, size=(V + 1, HIDDEN))
        p["dec.bh"] = np.zeros(HIDDEN)
        p["dec.Wo"] = rng.normal(0, 1 / np.sqrt(HIDDEN), size=(HIDDEN, V))
        p["dec.bo"] = np.zeros(V)
        if zero:
            p = {k: np.zeros_like(v) for k, v in p.items()}
        return cls(ParamStore(p))

    # --- encoder ------------------------------------------------------------

    def encode(self, images: np.ndarray):
        patches = to_patches(images)
        feats = encode_patches(self.params, patches)
        regions = np.einsum("rp,npd->nrd", POOL, feats)
        return patches, feats, regions

    # --- teacher forcing ----------------------------------------------------

    def teacher_forward(self, images, targets, mask):
        """targets/mask: (n, 5, T). Returns (summed loss, cache)."""
        P = self.params
        patches, feats, regions = self.encode(images)
        n, R, T = targets.shape
        r = regions.reshape(n * R, FEATURE_DIM)
        y = targets.reshape(n * R, T)
        m = mask.reshape(n * R, T)
        inputs = np.concatenate([np.full((n * R, 1), START_ID), y[:, :-1]], axis=1)
        ctx = r @ P["dec.Wr"] + P["dec.bh"]
        hs = [np.tanh(r @ P["dec.Wr0"] + P["dec.b0"])]
        logps = []
        loss = 0.0
        rows = np.arange(n * R)
        for t in range(T):
            h = np.tanh(hs[-1] @ P["dec.Wh"] + P["dec.emb"][inputs[:, t]] + ctx)
            hs.append(h)
            lp = log_softmax(h @ P["dec.Wo"] + P["dec.bo"])
            logps.append(lp)
            loss -= float((lp[rows, y[:, t]] * m[:, t]).sum())
        if not np.isfinite(loss):
            raise NumericalError("non-finite caption loss")
        cache = (patches, feats, r, y, m, inputs, hs, logps, n, R, T)
        return loss, cache

    def teacher_backward(self, cache, param_grads: bool = False, scale: float = 1.0):
        P = self.params
        patches, feats, r, y, m, inputs, hs, logps, n, R, T = cache
        B = n * R
        rows = np.arange(B)
        g = {k: np.zeros_like(v) for k, v in P.items()} if param_grads else None
        dh_next = np.zeros((B, HIDDEN))
        dctx = np.zeros((B, HIDDEN))
        for t in reversed(range(T)):
            dlogits = np.exp(logps[t])
            dlogits[rows, y[:, t]] -= 1
            dlogits *= m[:, t : t + 1] * scale
            h, h_prev = hs[t + 1], hs[t]
            dh = dlogits @ P["dec.Wo"].T + dh_next
            dpre = dh * (1 - h**2)
            dctx += dpre
            dh_next = dpre @ P["dec.Wh"].T
            if g is not None:
                g["dec.Wo"] += h.T @ dlogits
                g["dec.bo"] += dlogits.sum(axis=0)
                g["dec.Wh"] += h_prev.T @ dpre
                np.add.at(g["dec.emb"], inputs[:, t], dpre)
        dpre0 = dh_next * (1 - hs[0] ** 2)
        dr = dctx @ P["dec.Wr"].T + dpre0 @ P["dec.Wr0"].T
        if g is not None:
            g["dec.Wr"] = r.T @ dctx
            g["dec.bh"] = dctx.sum(axis=0)
            g["dec.Wr0"] = r.T @ dpre0
            g["dec.b0"] = dpre0.sum(axis=0)
        dregions = dr.reshape(n, R, FEATURE_DIM)
        dfeats = np.einsum("rp,nrd->npd", POOL, dregions)
        dimages = encoder_backward(P, patches, feats, dfeats, g)
        return dimages, g

    # --- greedy decoding ----------------------------------------------------

    def decode(self, images: np.ndarray) -> np.ndarray:
        """Greedy token ids (n, 5, MAX_LEN), END-padded after termination."""
        P = self.params
        _, _, regions = self.encode(images)
        n = images.shape[0]
        r = regions.reshape(n * len(REGIONS), FEATURE_DIM)
        ctx = r @ P["dec.Wr"] + P["dec.bh"]
        h = np.tanh(r @ P["dec.Wr0"] + P["dec.b0"])
        tok = np.full(len(r), START_ID)
        done = np.zeros(len(r), dtype=bool)
        out = np.full((len(r), MAX_LEN), END_ID)
        for t in range(MAX_LEN):
            h = np.tanh(h @ P["dec.Wh"] + P["dec.emb"][tok] + ctx)
            tok = (h @ P["dec.Wo"] + P["dec.bo"]).argmax(axis=1)
            out[~done, t] = tok[~done]
            done |= tok == END_ID
        return out.reshape(n, len(REGIONS), MAX_LEN)


def ids_to_caption(ids) -> Caption:
    ids = list(ids)
    if END_ID in ids:
        ids = ids[: ids.index(END_ID) + 1]
    return Caption(tuple(int(i) for i in ids))


def decode_dense_captions(model: DenseCapVictim, x: np.ndarray) -> list[tuple[RegionSpec, Caption]]:
    ids = model.decode(np.asarray(x, dtype=np.float64)[None])[0]
    return [(region, ids_to_caption(row)) for region, row in zip(model.regions, ids)]


def target_arrays(target: Caption):
    ids = np.array(target.token_ids)
    t = np.tile(ids, (1, len(REGIONS), 1))
    return t, np.ones_like(t, dtype=np.float64)


def densecap_teacher_loss(model: DenseCapVictim, x: np.ndarray, target: Caption):
    """Teacher-forced cross-entropy of `target` summed over every region, with its pixel gradient."""
    if len(target.token_ids) > MAX_LEN:
        raise InvalidArgumentError("target caption too long")
    ids, mask = target_arrays(target)
    loss, cache = model.teacher_forward(np.asarray(x, dtype=np.float64)[None], ids, mask)
    dx, _ = model.teacher_backward(cache)
    return loss, dx[0]


@dataclass
class CaptionTrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 3e-3
    target_accuracy: float = 0.90
    noise: float = 20.0
    weight_decay: float = 0.0
    decay_params: tuple[str, ...] = ("dec.Wo",)


def caption_exact_rate(model: DenseCapVictim, images, ids, mask, batch: int = 256) -> float:
    hits = total = 0
    for i in range(0, len(images), batch):
        pred = model.decode(images[i : i + batch])
        want = np.where(mask[i : i + batch] > 0, ids[i : i + batch], END_ID)
        hits += int(np.all(pred == want, axis=2).sum())
        total += pred.shape[0] * pred.shape[1]
    return hits / total


def train_captioner(corpus, hyper: CaptionTrainConfig | None = None, seed: int = 0,
                    log: Callable[[str], None] | None = None, history: list | None = None) -> DenseCapVictim:
    hyper = hyper or CaptionTrainConfig()
    model = DenseCapVictim.init(seed)
    opt = ParamOptimizer(model.params, kind="adam", lr=hyper.lr)
    X, Y, M = corpus.arrays("train")
    Xv, Yv, Mv = corpus.arrays("val")
    rng = derive_rng(seed, 22)
    acc = 0.0
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(X))
        total = 0.0
        for i in range(0, len(X), hyper.batch_size):
            idx = order[i : i + hyper.batch_size]
            xb = X[idx]
            if hyper.noise > 0:
                xb = np.clip(xb + rng.uniform(-hyper.noise, hyper.noise, size=xb.shape), 0, 255)
            loss, cache = model.teacher_forward(xb, Y[idx], M[idx])
            total += loss
            _, grads = model.teacher_backward(cache, param_grads=True, scale=1.0 / len(idx))
            if hyper.weight_decay:
                for k in hyper.decay_params:
                    grads[k] = grads[k] + hyper.weight_decay * model.params[k]
            opt.step(grads)
        acc = caption_exact_rate(model, Xv, Yv, Mv)
        if history is not None:
            history.append((total / len(X), acc))
        if log:
            log(f"[captioner] epoch {epoch + 1}: loss {total / len(X):.4f} val exact {acc:.4f}")
    if acc < hyper.target_accuracy:
        raise TrainingError(f"captioner below {hyper.target_accuracy}", acc)
    return model
