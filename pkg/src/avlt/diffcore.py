"""Numerical core: pixel tensors, parameter storage, update rules, gradient oracle.

Images are float64 arrays of shape (32, 32, 3) holding intensities in [0, 255].
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from avlt.errors import InvalidArgumentError, NumericalError

IMAGE_SHAPE = (32, 32, 3)
PIXEL_MAX = 255.0

OPTIMIZERS = ("sgd", "rmsprop", "adam")


def as_image(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != IMAGE_SHAPE:
        raise InvalidArgumentError(f"expected an image of shape {IMAGE_SHAPE}, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericalError("image contains non-finite values")
    return x


def clip_pixels(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, PIXEL_MAX)


def derive_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for (seed, stream...), stable under reordering of work."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, stream)]))


def random_start(x: np.ndarray, bound: float, seed: int | np.random.Generator) -> np.ndarray:
    """Perturb every pixel by U[-bound, bound] noise, then clip to the valid range."""
    if bound <= 0:
        raise InvalidArgumentError(f"bound must be positive, got {bound}")
    rng = seed if isinstance(seed, np.random.Generator) else derive_rng(seed)
    delta = rng.uniform(-bound, bound, size=np.shape(x))
    return clip_pixels(np.asarray(x, dtype=np.float64) + delta)


@dataclass
class OptimizerState:
    kind: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    decay: float = 0.9
    floor: float = 1e-8
    step_count: int = 0
    first_moment: np.ndarray | None = None
    second_moment: np.ndarray | None = None

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in OPTIMIZERS:
            raise InvalidArgumentError(f"unknown optimizer {self.kind!r}")


def optimizer_step(state: OptimizerState, variable: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    """Return the updated variable; moments and step count in `state` advance in place."""
    variable = np.asarray(variable, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != variable.shape:
        raise InvalidArgumentError(f"grad shape {grad.shape} != variable shape {variable.shape}")
    if lr <= 0:
        raise InvalidArgumentError(f"learning rate must be positive, got {lr}")
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite gradient")

    state.step_count += 1
    if state.kind == "sgd":
        return variable - lr * grad

    if state.second_moment is None:
        state.second_moment = np.zeros_like(variable)
    if state.kind == "rmsprop":
        state.second_moment = state.decay * state.second_moment + (1 - state.decay) * grad**2
        return variable - lr * grad / (np.sqrt(state.second_moment) + state.floor)

    if state.first_moment is None:
        state.first_moment = np.zeros_like(variable)
    t = state.step_count
    state.first_moment = state.beta1 * state.first_moment + (1 - state.beta1) * grad
    state.second_moment = state.beta2 * state.second_moment + (1 - state.beta2) * grad**2
    m_hat = state.first_moment / (1 - state.beta1**t)
    v_hat = state.second_moment / (1 - state.beta2**t)
    return variable - lr * m_hat / (np.sqrt(v_hat) + state.floor)


def finite_diff_grad(objective: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient, one coordinate at a time."""
    if h <= 0:
        raise InvalidArgumentError(f"step must be positive, got {h}")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(objective(x))
        flat[i] = orig - h
        fm = float(objective(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"objective not finite at probe {i}")
        gflat[i] = (fp - fm) / (2 * h)
    return grad


class ParamStore:
    """Named float64 arrays whose shapes are frozen at construction."""

    def __init__(self, arrays: dict[str, np.ndarray] | None = None):
        self._arrays: dict[str, np.ndarray] = {}
        for name, value in (arrays or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> None:
        if name in self._arrays:
            raise InvalidArgumentError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NumericalError(f"parameter {name!r} has non-finite values")
        self._arrays[name] = value

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, value) -> None:
        if name not in self._arrays:
            raise InvalidArgumentError(f"unknown parameter {name!r}")
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._arrays[name].shape:
            raise InvalidArgumentError(f"shape change for {name!r}: {self._arrays[name].shape} -> {value.shape}")
        self._arrays[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def items(self):
        return self._arrays.items()

    def names(self) -> list[str]:
        return list(self._arrays)

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self._arrays.items()})

    def zeros_like(self) -> "ParamStore":
        return ParamStore({k: np.zeros_like(v) for k, v in self._arrays.items()})


@dataclass
class ParamOptimizer:
    """Applies `optimizer_step` to every array of a ParamStore."""

    params: ParamStore
    kind: str = "adam"
    lr: float = 1e-2
    states: dict[str, OptimizerState] = field(default_factory=dict)

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            state = self.states.setdefault(name, OptimizerState(kind=self.kind))
            self.params[name] = optimizer_step(state, self.params[name], g, self.lr)
