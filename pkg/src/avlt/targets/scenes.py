"""Synthetic shape scenes, their question templates, and the labeled corpus."""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np

from avlt.diffcore import IMAGE_SHAPE, derive_rng
from avlt.errors import InvalidArgumentError

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
POSITIONS = ("left", "right", "top", "bottom", "center")
CATEGORIES = ("color", "shape", "count", "existence", "position")

PALETTE = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
}
BACKGROUND = 128
NOISE = 5

# (row, col) centres in pixel units; objects are at most 9 px wide so they never overlap
CENTRES = {
    "left": (15.5, 4.5),
    "right": (15.5, 26.5),
    "top": (4.5, 15.5),
    "bottom": (26.5, 15.5),
    "center": (15.5, 15.5),
}

ANSWERS = COLORS + SHAPES + ("1", "2", "3") + ("yes", "no") + POSITIONS
ANSWER_INDEX = {a: i for i, a in enumerate(ANSWERS)}
ANSWER_CATEGORY = (
    ["color"] * len(COLORS) + ["shape"] * len(SHAPES) + ["count"] * 3 + ["existence"] * 2 + ["position"] * len(POSITIONS)
)
CATEGORY_ANSWERS = {c: tuple(i for i, ac in enumerate(ANSWER_CATEGORY) if ac == c) for c in CATEGORIES}

QUESTION_VOCAB = (
    "what", "color", "is", "the", "object", "at", "shape", "how", "many", "are", "there",
    "objects", "where", "a",
    *COLORS, *SHAPES, *(s + "s" for s in SHAPES), *POSITIONS,
)
QUESTION_INDEX = {w: i for i, w in enumerate(QUESTION_VOCAB)}


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    position: str


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[SceneObject, ...]
    seed: int

    def __post_init__(self):
        if not 1 <= len(self.objects) <= 3:
            raise InvalidArgumentError(f"scene needs 1-3 objects, got {len(self.objects)}")
        positions = [o.position for o in self.objects]
        if len(set(positions)) != len(positions):
            raise InvalidArgumentError("object positions must be distinct")
        for o in self.objects:
            if o.shape not in SHAPES or o.color not in COLORS or o.position not in POSITIONS:
                raise InvalidArgumentError(f"invalid object {o}")

    def to_json(self) -> dict:
        return {"objects": [asdict(o) for o in self.objects], "seed": self.seed}

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        return cls(tuple(SceneObject(**o) for o in d["objects"]), int(d["seed"]))


@dataclass(frozen=True)
class Question:
    token_ids: tuple[int, ...]
    template_category: str

    def __post_init__(self):
        if not self.token_ids:
            raise InvalidArgumentError("question must be non-empty")
        if self.template_category not in CATEGORIES:
            raise InvalidArgumentError(f"unknown category {self.template_category!r}")

    @classmethod
    def from_text(cls, text: str, category: str) -> "Question":
        try:
            ids = tuple(QUESTION_INDEX[w] for w in text.split())
        except KeyError as e:
            raise InvalidArgumentError(f"unknown question word {e.args[0]!r}") from None
        return cls(ids, category)

    @property
    def text(self) -> str:
        return " ".join(QUESTION_VOCAB[i] for i in self.token_ids)


def _shape_mask(shape: str, cy: float, cx: float) -> np.ndarray:
    rows, cols = np.mgrid[0 : IMAGE_SHAPE[0], 0 : IMAGE_SHAPE[1]]
    dy, dx = rows - cy, cols - cx
    if shape == "circle":
        return dy**2 + dx**2 <= 4.3**2
    if shape == "square":
        return (np.abs(dy) <= 3.5) & (np.abs(dx) <= 3.5)
    # upward triangle, apex at the top
    return (dy >= -4.5) & (dy <= 4.5) & (np.abs(dx) <= (dy + 4.5) / 2 + 0.01)


def render_scene(spec: SceneSpec) -> np.ndarray:
    img = np.full(IMAGE_SHAPE, float(BACKGROUND))
    for obj in spec.objects:
        mask = _shape_mask(obj.shape, *CENTRES[obj.position])
        img[mask] = PALETTE[obj.color]
    noise = derive_rng(spec.seed, 7).integers(-NOISE, NOISE + 1, size=IMAGE_SHAPE)
    return np.clip(img + noise, 0, 255)


# --- question templates -------------------------------------------------------
# Each template returns the list of (question text, answer) pairs valid for a scene.

def _by_position(spec):
    return {o.position: o for o in spec.objects}


def _unique_shapes(spec):
    shapes = [o.shape for o in spec.objects]
    return {o.shape: o for o in spec.objects if shapes.count(o.shape) == 1}


def _color_questions(spec):
    out = [(f"what color is the object at the {p}", o.color) for p, o in _by_position(spec).items()]
    out += [(f"what color is the {s}", o.color) for s, o in _unique_shapes(spec).items()]
    return out


def _shape_questions(spec):
    out = [(f"what shape is the {o.color} object", o.shape) for o in spec.objects]
    out += [(f"what shape is at the {o.position}", o.shape) for o in spec.objects]
    return out


def _count_questions(spec):
    shapes = [o.shape for o in spec.objects]
    out = [(f"how many {s}s are there", str(shapes.count(s))) for s in sorted(set(shapes))]
    out.append(("how many objects are there", str(len(shapes))))
    return out


def _position_questions(spec):
    out = [(f"where is the {o.color} object", o.position) for o in spec.objects]
    out += [(f"where is the {s}", o.position) for s, o in _unique_shapes(spec).items()]
    return out


TEMPLATES: dict[str, Callable] = {
    "color": _color_questions,
    "shape": _shape_questions,
    "count": _count_questions,
    "position": _position_questions,
}


def all_question_texts() -> dict[str, str]:
    """Every question string the templates can produce, mapped to its category."""
    out = {}
    for p in POSITIONS:
        out[f"what color is the object at the {p}"] = "color"
        out[f"what shape is at the {p}"] = "shape"
    for s in SHAPES:
        out[f"what color is the {s}"] = "color"
        out[f"how many {s}s are there"] = "count"
        out[f"where is the {s}"] = "position"
    for c in COLORS:
        out[f"what shape is the {c} object"] = "shape"
        out[f"where is the {c} object"] = "position"
        for s in SHAPES:
            out[f"is there a {c} {s}"] = "existence"
    out["how many objects are there"] = "count"
    return out


def answer_for(spec: SceneSpec, text: str) -> str | None:
    """Ground-truth answer to `text` on `spec`, or None if the question does not apply."""
    if text.startswith("is there a "):
        _, _, _, color, shape = text.split()
        return "yes" if any(o.color == color and o.shape == shape for o in spec.objects) else "no"
    for fn in TEMPLATES.values():
        for q, a in fn(spec):
            if q == text:
                return a
    return None


@dataclass
class CorpusConfig:
    """Sampling skew for scenes and questions; the skew is what plants a language prior."""

    object_count_probs: tuple[float, ...] = (0.3, 0.4, 0.3)
    shape_probs: tuple[float, ...] = (0.5, 0.3, 0.2)
    color_probs: tuple[float, ...] = (0.4, 0.3, 0.2, 0.1)
    position_probs: tuple[float, ...] = (0.3, 0.25, 0.2, 0.15, 0.1)
    category_probs: tuple[float, ...] = (0.2, 0.2, 0.2, 0.2, 0.2)
    existence_yes: float = 0.7


def sample_scene(rng: np.random.Generator, seed: int, cfg: CorpusConfig) -> SceneSpec:
    n = int(rng.choice([1, 2, 3], p=cfg.object_count_probs))
    colors = rng.choice(len(COLORS), size=n, replace=False, p=cfg.color_probs)
    positions = rng.choice(len(POSITIONS), size=n, replace=False, p=cfg.position_probs)
    shapes = rng.choice(len(SHAPES), size=n, p=cfg.shape_probs)
    objs = tuple(
        SceneObject(SHAPES[s], COLORS[c], POSITIONS[p]) for s, c, p in zip(shapes, colors, positions)
    )
    return SceneSpec(objs, seed)


def sample_question(rng: np.random.Generator, spec: SceneSpec, cfg: CorpusConfig) -> tuple[str, str, str]:
    category = CATEGORIES[int(rng.choice(len(CATEGORIES), p=cfg.category_probs))]
    if category == "existence":
        present = {(o.color, o.shape) for o in spec.objects}
        if rng.random() < cfg.existence_yes:
            color, shape = sorted(present)[int(rng.integers(len(present)))]
        else:
            absent = sorted({(c, s) for c in COLORS for s in SHAPES} - present)
            color, shape = absent[int(rng.integers(len(absent)))]
        text = f"is there a {color} {shape}"
        return text, category, "yes" if (color, shape) in present else "no"
    options = TEMPLATES[category](spec)
    text, answer = options[int(rng.integers(len(options)))]
    return text, category, answer


@dataclass
class Sample:
    scene: SceneSpec
    question: Question
    answer: int

    @property
    def image(self) -> np.ndarray:
        return render_scene(self.scene)


@dataclass
class Corpus:
    train: list[Sample]
    val: list[Sample]
    seed: int
    config: CorpusConfig = field(default_factory=CorpusConfig)

    def arrays(self, split: str):
        """Stacked (images, question bags, answers) for a split."""
        samples = getattr(self, split)
        images = np.stack([s.image for s in samples])
        bags = np.stack([question_bag(s.question) for s in samples])
        answers = np.array([s.answer for s in samples])
        return images, bags, answers


def question_bag(q: Question) -> np.ndarray:
    bag = np.zeros(len(QUESTION_VOCAB))
    for t in q.token_ids:
        if not 0 <= t < len(QUESTION_VOCAB):
            raise InvalidArgumentError(f"question token {t} out of range")
        bag[t] += 1
    return bag


def scene_seed(corpus_seed: int, index: int) -> int:
    return int(corpus_seed) * 1_000_000 + index


def generate_dataset(n_train: int, n_val: int, seed: int, cfg: CorpusConfig | None = None) -> Corpus:
    if n_train <= 0 or n_val <= 0:
        raise InvalidArgumentError("split sizes must be positive")
    cfg = cfg or CorpusConfig()
    splits = []
    for offset, n in ((0, n_train), (n_train, n_val)):
        samples = []
        for i in range(offset, offset + n):
            rng = derive_rng(seed, 1, i)
            spec = sample_scene(rng, scene_seed(seed, i), cfg)
            text, cat, answer = sample_question(rng, spec, cfg)
            samples.append(Sample(spec, Question.from_text(text, cat), ANSWER_INDEX[answer]))
        splits.append(samples)
    return Corpus(splits[0], splits[1], seed, cfg)


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 dump, row-major RGB, max value 255."""
    data = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    h, w, _ = data.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6":
        raise InvalidArgumentError("not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise InvalidArgumentError("only max value 255 is supported")
    pixels = np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8)
    return pixels.reshape(h, w, 3).astype(np.float64)
