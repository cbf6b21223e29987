"""Attack target sets, the answer-frequency probe, and the prior/transfer statistics."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from avlt.diffcore import derive_rng
from avlt.errors import ConstructionError, InvalidArgumentError
from avlt.metrics import spearman
from avlt.targets.captions import Caption, caption_pool, region_captions
from avlt.targets.scenes import (
    ANSWER_CATEGORY, ANSWERS, CATEGORIES, CATEGORY_ANSWERS, Corpus, Question, SceneSpec,
    render_scene,
)

KINDS = ("PopularQA", "RareQA", "Gold", "NonSense", "ScaleImage", "CaptionA")
P_QUESTIONS = 20
N_SOURCE_IMAGES = 5
ANSWERS_PER_QUESTION = 3
MIN_ANSWER_COUNT = 3
GOLD_SIZE = 100
NONSENSE_PER_CATEGORY = 4
PROBE_SIZE = 500


@dataclass(frozen=True)
class QATriple:
    image_id: int
    scene: SceneSpec
    question: Question
    target: int
    kind: str

    def __post_init__(self):
        if not 0 <= self.target < len(ANSWERS):
            raise InvalidArgumentError(f"target {self.target} out of range")

    @property
    def image(self) -> np.ndarray:
        return render_scene(self.scene)

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "scene": self.scene.to_json(),
            "question": self.question.text,
            "category": self.question.template_category,
            "target": self.target,
            "target_text": ANSWERS[self.target],
            "kind": self.kind,
        }

    @classmethod
    def from_json(cls, d: dict) -> "QATriple":
        return cls(int(d["image_id"]), SceneSpec.from_json(d["scene"]),
                   Question.from_text(d["question"], d["category"]), int(d["target"]), d["kind"])


@dataclass(frozen=True)
class CaptionPair:
    image_id: int
    scene: SceneSpec
    target: Caption
    kind: str = "CaptionA"

    @property
    def image(self) -> np.ndarray:
        return render_scene(self.scene)

    def to_json(self) -> dict:
        return {"image_id": self.image_id, "scene": self.scene.to_json(),
                "target_caption": self.target.text, "kind": self.kind}

    @classmethod
    def from_json(cls, d: dict) -> "CaptionPair":
        return cls(int(d["image_id"]), SceneSpec.from_json(d["scene"]),
                   Caption.from_text(d["target_caption"]), d.get("kind", "CaptionA"))


@dataclass(frozen=True)
class TargetSet:
    kind: str
    triples: tuple

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgumentError(f"unknown target set kind {self.kind!r}")

    def __len__(self):
        return len(self.triples)

    def to_json(self) -> dict:
        return {"kind": self.kind, "triples": [t.to_json() for t in self.triples]}

    @classmethod
    def from_json(cls, d: dict) -> "TargetSet":
        item = CaptionPair if d["kind"] == "CaptionA" else QATriple
        return cls(d["kind"], tuple(item.from_json(t) for t in d["triples"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "TargetSet":
        return cls.from_json(json.loads(Path(path).read_text()))


# --- question/answer statistics ---------------------------------------------------

def qa_counts(corpus: Corpus) -> dict[tuple[str, str], Counter]:
    """(question text, category) -> Counter of answer indices over the training split."""
    out: dict[tuple[str, str], Counter] = {}
    for s in corpus.train:
        key = (s.question.text, s.question.template_category)
        out.setdefault(key, Counter())[s.answer] += 1
    return out


def eligible_questions(corpus: Corpus) -> list[tuple[tuple[str, str], int, list[tuple[int, int]]]]:
    """Questions with at least 3 answers that each occur at least 3 times.

    Returns (question key, question count, [(answer, count)...]) sorted by descending
    question count, ties broken by question text.
    """
    rows = []
    for key, counter in qa_counts(corpus).items():
        kept = [(a, c) for a, c in counter.items() if c >= MIN_ANSWER_COUNT]
        if len(kept) >= ANSWERS_PER_QUESTION:
            kept.sort(key=lambda ac: (-ac[1], ac[0]))
            rows.append((key, sum(counter.values()), kept))
    rows.sort(key=lambda r: (-r[1], r[0]))
    return rows


def _source_images(corpus: Corpus, n: int, seed: int, stream: int):
    idx = derive_rng(seed, stream).choice(len(corpus.val), size=n, replace=False)
    return [(int(i), corpus.val[int(i)].scene) for i in sorted(idx)]


def _popular_or_rare(kind: str, corpus: Corpus, seed: int) -> TargetSet:
    rows = eligible_questions(corpus)
    if kind == "PopularQA":
        chosen = [(key, kept[:ANSWERS_PER_QUESTION]) for key, _, kept in rows[:P_QUESTIONS]]
    else:
        chosen = [(key, kept[::-1][:ANSWERS_PER_QUESTION]) for key, _, kept in rows[::-1][:P_QUESTIONS]]
    images = _source_images(corpus, N_SOURCE_IMAGES, seed, 31)
    triples = []
    for (text, cat), answers in chosen:
        q = Question.from_text(text, cat)
        for a, _ in answers:
            for image_id, scene in images:
                triples.append(QATriple(image_id, scene, q, int(a), kind))
    return TargetSet(kind, tuple(triples))


def _gold(corpus: Corpus, victims, seed: int) -> TargetSet:
    if not victims:
        raise InvalidArgumentError("Gold construction needs at least one victim")
    from avlt.victims.vqa import predict_answer

    rng = derive_rng(seed, 32)
    order = rng.permutation(len(corpus.val))
    triples = []
    for i in order:
        s = corpus.val[int(i)]
        x = s.image
        if all(predict_answer(m, x, s.question) == s.answer for m in victims):
            choices = [a for a in CATEGORY_ANSWERS[s.question.template_category] if a != s.answer]
            target = int(choices[int(rng.integers(len(choices)))])
            triples.append(QATriple(int(i), s.scene, s.question, target, "Gold"))
            if len(triples) == GOLD_SIZE:
                return TargetSet("Gold", tuple(triples))
    raise ConstructionError(f"only {len(triples)} of {GOLD_SIZE} Gold triples found", len(triples))


def _nonsense(corpus: Corpus, seed: int) -> TargetSet:
    rng = derive_rng(seed, 33)
    by_cat: dict[str, list[str]] = {c: [] for c in CATEGORIES}
    counts = Counter((s.question.text, s.question.template_category) for s in corpus.train)
    for (text, cat), _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])):
        if len(by_cat[cat]) < NONSENSE_PER_CATEGORY:
            by_cat[cat].append(text)
    images = _source_images(corpus, N_SOURCE_IMAGES, seed, 34)
    triples = []
    for cat in CATEGORIES:
        if len(by_cat[cat]) < NONSENSE_PER_CATEGORY:
            raise ConstructionError(f"only {len(by_cat[cat])} {cat} questions in the corpus", len(by_cat[cat]))
        others = [a for a in range(len(ANSWERS)) if ANSWER_CATEGORY[a] != cat]
        for text in by_cat[cat]:
            q = Question.from_text(text, cat)
            for image_id, scene in images:
                target = int(others[int(rng.integers(len(others)))])
                triples.append(QATriple(image_id, scene, q, target, "NonSense"))
    return TargetSet("NonSense", tuple(triples))


def _scale_image(corpus: Corpus, seed: int, n_images: int) -> TargetSet:
    """Five popular and five rare question-answer pairs across many source images."""
    rows = eligible_questions(corpus)
    popular = [(key, kept[0][0]) for key, _, kept in rows[:5]]
    rare = [(key, kept[-1][0]) for key, _, kept in rows[::-1][:5]]
    images = _source_images(corpus, n_images, seed, 36)
    triples = []
    for (text, cat), a in popular + rare:
        q = Question.from_text(text, cat)
        for image_id, scene in images:
            triples.append(QATriple(image_id, scene, q, int(a), "ScaleImage"))
    return TargetSet("ScaleImage", tuple(triples))


def build_target_set(kind: str, corpus: Corpus, victims=(), seed: int = 0, n_images: int = 20) -> TargetSet:
    if kind in ("PopularQA", "RareQA"):
        return _popular_or_rare(kind, corpus, seed)
    if kind == "Gold":
        return _gold(corpus, list(victims), seed)
    if kind == "NonSense":
        return _nonsense(corpus, seed)
    if kind == "ScaleImage":
        return _scale_image(corpus, seed, n_images)
    raise InvalidArgumentError(f"unknown target set kind {kind!r}")


def build_caption_targets(scenes: list[SceneSpec], n_captions: int = 5, n_images: int = 40,
                          seed: int = 0) -> TargetSet:
    """Target captions drawn from the grammar, each paired with source scenes whose
    top-ranked region does not already carry that caption."""
    rng = derive_rng(seed, 37)
    pool = caption_pool()
    picks = rng.choice(len(pool), size=n_captions, replace=False)
    pairs = []
    for p in sorted(picks):
        target = pool[int(p)]
        order = rng.permutation(len(scenes))
        chosen = [int(i) for i in order if region_captions(scenes[int(i)])[0] != target][:n_images]
        if len(chosen) < n_images:
            raise ConstructionError(f"only {len(chosen)} source scenes for {target!r}", len(chosen))
        pairs += [CaptionPair(i, scenes[i], Caption.from_text(target)) for i in sorted(chosen)]
    return TargetSet("CaptionA", tuple(pairs))


# --- answer frequency and the prior correlation -------------------------------------

@dataclass(frozen=True)
class FrequencyTable:
    question: Question
    counts: tuple[int, ...]

    @property
    def total(self) -> int:
        return sum(self.counts)

    @property
    def frequencies(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=np.float64) / self.total


def answer_frequency(model, images: np.ndarray, question: Question, batch: int = 256) -> FrequencyTable:
    """How often the model gives each answer to `question` over a fixed probe set."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or len(images) == 0:
        raise InvalidArgumentError("probe set must be a non-empty stack of images")
    bag = model.bag(question)
    counts = np.zeros(model.K, dtype=np.int64)
    for i in range(0, len(images), batch):
        chunk = images[i : i + batch]
        preds = model.forward_batch(chunk, np.repeat(bag, len(chunk), axis=0)).logits.argmax(axis=1)
        counts += np.bincount(preds, minlength=model.K)
    return FrequencyTable(question, tuple(int(c) for c in counts))


def prior_correlation(freq: FrequencyTable | np.ndarray, adv_probs) -> float:
    f = freq.frequencies if isinstance(freq, FrequencyTable) else np.asarray(freq, dtype=np.float64)
    p = np.asarray(adv_probs, dtype=np.float64)
    if f.shape != p.shape:
        raise InvalidArgumentError("frequency table and probabilities cover different answer sets")
    if len(f) < 3:
        raise InvalidArgumentError("need at least 3 answers for a rank correlation")
    return spearman(f, p)


# --- transfer ------------------------------------------------------------------------

def transfer_counts(results_on_a, model_b) -> tuple[int, int]:
    """(transferred, successes on A) for a list of (triple, AttackResult) pairs."""
    from avlt.victims.vqa import predict_answer

    wins = [(t, r) for t, r in results_on_a if r.success]
    moved = sum(predict_answer(model_b, r.image, t.question) == t.target for t, r in wins)
    return int(moved), len(wins)


def transfer_rate(results_on_a, model_b) -> float:
    moved, wins = transfer_counts(results_on_a, model_b)
    if wins == 0:
        raise InvalidArgumentError("no successful attacks on the source model")
    return moved / wins
