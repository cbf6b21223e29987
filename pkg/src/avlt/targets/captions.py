"""Caption grammar for the fixed-region captioner.

Quadrant captions list the colours of the objects whose footprint reaches into the
quadrant; the full-frame caption counts the objects.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from avlt.diffcore import derive_rng
from avlt.errors import InvalidArgumentError
from avlt.targets.scenes import COLORS, CorpusConfig, SceneSpec, render_scene, sample_scene, scene_seed

END = "<end>"
CAPTION_VOCAB = (
    END, "a", "red", "green", "blue", "yellow", "shape", "shapes", "and", "empty", "gray",
    "region", "scene", "with", "one", "two", "three", "object", "objects", "circle",
    "square", "triangle", "picture", "of", "the",
)
CAPTION_INDEX = {w: i for i, w in enumerate(CAPTION_VOCAB)}
END_ID = CAPTION_INDEX[END]
MAX_LEN = 6

REGION_NAMES = ("top-left", "top-right", "bottom-left", "bottom-right", "full")
# which quadrants each object position reaches into
POSITION_QUADRANTS = {
    "top": (0, 1),
    "bottom": (2, 3),
    "left": (0, 2),
    "right": (1, 3),
    "center": (0, 1, 2, 3),
}
NUMBER_WORDS = ("one", "two", "three")


@dataclass(frozen=True)
class Caption:
    token_ids: tuple[int, ...]

    def __post_init__(self):
        ids = self.token_ids
        if not 1 <= len(ids) <= MAX_LEN:
            raise InvalidArgumentError(f"caption length {len(ids)} outside 1..{MAX_LEN}")
        if any(not 0 <= t < len(CAPTION_VOCAB) for t in ids):
            raise InvalidArgumentError("caption token out of range")
        if END_ID in ids[:-1]:
            raise InvalidArgumentError("end token may only appear last")

    @classmethod
    def from_text(cls, text: str, terminate: bool = True) -> "Caption":
        words = text.split()
        try:
            ids = [CAPTION_INDEX[w] for w in words]
        except KeyError as e:
            raise InvalidArgumentError(f"unknown caption word {e.args[0]!r}") from None
        if terminate:
            ids.append(END_ID)
        return cls(tuple(ids))

    @property
    def text(self) -> str:
        return " ".join(CAPTION_VOCAB[t] for t in self.token_ids if t != END_ID)


def quadrant_caption(colors: list[str]) -> str:
    colors = [c for c in COLORS if c in colors]
    if not colors:
        return "empty gray region"
    if len(colors) == 1:
        return f"a {colors[0]} shape"
    if len(colors) == 2:
        return f"{colors[0]} and {colors[1]} shapes"
    return f"{colors[0]} {colors[1]} and {colors[2]} shapes"


def region_captions(spec: SceneSpec) -> list[str]:
    per_quadrant: list[list[str]] = [[], [], [], []]
    for obj in spec.objects:
        for qd in POSITION_QUADRANTS[obj.position]:
            per_quadrant[qd].append(obj.color)
    n = len(spec.objects)
    full = f"a scene with {NUMBER_WORDS[n - 1]} object{'s' if n > 1 else ''}"
    return [quadrant_caption(c) for c in per_quadrant] + [full]


def caption_pool() -> list[str]:
    """Every caption the grammar can produce, in a fixed order."""
    pool = ["empty gray region"]
    pool += [f"a {c} shape" for c in COLORS]
    for i in range(len(COLORS)):
        for j in range(i + 1, len(COLORS)):
            pool.append(f"{COLORS[i]} and {COLORS[j]} shapes")
    for drop in reversed(range(len(COLORS))):
        kept = [c for k, c in enumerate(COLORS) if k != drop]
        pool.append(f"{kept[0]} {kept[1]} and {kept[2]} shapes")
    pool += ["a scene with one object", "a scene with two objects", "a scene with three objects"]
    return pool


@dataclass
class CaptionCorpus:
    train: list[SceneSpec]
    val: list[SceneSpec]
    seed: int

    def arrays(self, split: str):
        """(images (n,32,32,3), target ids (n,5,MAX_LEN), mask (n,5,MAX_LEN))."""
        scenes = getattr(self, split)
        images = np.stack([render_scene(s) for s in scenes])
        ids = np.zeros((len(scenes), 5, MAX_LEN), dtype=np.int64)
        mask = np.zeros((len(scenes), 5, MAX_LEN))
        for i, s in enumerate(scenes):
            for r, text in enumerate(region_captions(s)):
                c = Caption.from_text(text).token_ids
                ids[i, r, : len(c)] = c
                mask[i, r, : len(c)] = 1
        return images, ids, mask


def generate_caption_corpus(n_train: int, n_val: int, seed: int, cfg: CorpusConfig | None = None) -> CaptionCorpus:
    if n_train <= 0 or n_val <= 0:
        raise InvalidArgumentError("split sizes must be positive")
    cfg = cfg or CorpusConfig()
    out = []
    for offset, n in ((0, n_train), (n_train, n_val)):
        out.append([sample_scene(derive_rng(seed, 2, i), scene_seed(seed, i), cfg) for i in range(offset, offset + n)])
    return CaptionCorpus(out[0], out[1], seed)
