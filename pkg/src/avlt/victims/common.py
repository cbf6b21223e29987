"""Pieces shared by the VQA and caption victims: patch encoder and softmax helpers."""
from __future__ import annotations

import numpy as np

from avlt.diffcore import PIXEL_MAX

GRID = 4
PATCH = 8
N_PATCHES = GRID * GRID
PATCH_DIM = PATCH * PATCH * 3
FEATURE_DIM = 32

LOG_FLOOR = np.log(1e-12)


def to_patches(images: np.ndarray) -> np.ndarray:
    """(n, 32, 32, 3) pixels -> (n, 16, 192) centred patch vectors, row-major over the grid."""
    n = images.shape[0]
    u = images / PIXEL_MAX - 0.5
    return u.reshape(n, GRID, PATCH, GRID, PATCH, 3).transpose(0, 1, 3, 2, 4, 5).reshape(n, N_PATCHES, PATCH_DIM)


def from_patches(dpatches: np.ndarray) -> np.ndarray:
    """Adjoint of `to_patches` (without the offset): pulls patch gradients back to pixels."""
    n = dpatches.shape[0]
    d = dpatches.reshape(n, GRID, GRID, PATCH, PATCH, 3).transpose(0, 1, 3, 2, 4, 5)
    return d.reshape(n, GRID * PATCH, GRID * PATCH, 3) / PIXEL_MAX


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    s = z - z.max(axis=axis, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def argmax_lowest(v: np.ndarray) -> int:
    # np.argmax already returns the first maximal index
    return int(np.argmax(v))


def encode_patches(params, patches: np.ndarray, prefix: str = "enc") -> np.ndarray:
    pre = patches @ params[f"{prefix}.W"] + params[f"{prefix}.b"] + params[f"{prefix}.pos"]
    return np.tanh(pre)


def encoder_backward(params, patches, feats, dfeats, grads: dict | None, prefix: str = "enc") -> np.ndarray:
    """Backprop through tanh(patches @ W + b + pos); fills `grads` if given, returns d(pixels)."""
    dpre = dfeats * (1 - feats**2)
    if grads is not None:
        grads[f"{prefix}.W"] = np.einsum("npi,npd->id", patches, dpre)
        grads[f"{prefix}.b"] = dpre.sum(axis=(0, 1))
        grads[f"{prefix}.pos"] = dpre.sum(axis=0)
    return from_patches(dpre @ params[f"{prefix}.W"].T)


def init_encoder(rng: np.random.Generator, store: dict, prefix: str = "enc", dim: int = FEATURE_DIM) -> None:
    store[f"{prefix}.W"] = rng.normal(0, 1 / np.sqrt(PATCH_DIM), size=(PATCH_DIM, dim)) * 3
    store[f"{prefix}.b"] = np.zeros(dim)
    store[f"{prefix}.pos"] = rng.normal(0, 0.5, size=(N_PATCHES, dim))
