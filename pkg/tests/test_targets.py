import json
from collections import Counter

import numpy as np
import pytest

from avlt.attacks import AttackResult
from avlt.errors import ConstructionError, InvalidArgumentError
from avlt.targets.captions import (
    Caption, caption_pool, generate_caption_corpus, region_captions,
)
from avlt.targets.scenes import (
    ANSWER_CATEGORY, ANSWERS, CATEGORY_ANSWERS, Question, SceneObject, SceneSpec,
    answer_for, generate_dataset, read_ppm, render_scene, write_ppm,
)
from avlt.targets.targetsets import (
    FrequencyTable, QATriple, TargetSet, answer_frequency, build_caption_targets, build_target_set,
    eligible_questions, prior_correlation, qa_counts, transfer_counts, transfer_rate,
)
from avlt.victims.vqa import VqaVictim, predict_answer


@pytest.fixture(scope="module")
def corpus():
    return generate_dataset(3000, 2500, seed=5)


def _scene(*objs, seed=1):
    return SceneSpec(tuple(SceneObject(*o) for o in objs), seed)


# --- scenes -------------------------------------------------------------------------

def test_render_examples():
    spec = _scene(("circle", "red", "center"))
    a, b = render_scene(spec), render_scene(spec)
    np.testing.assert_array_equal(a, b)
    assert np.all(np.abs(a[16, 16] - (255, 0, 0)) <= 5)
    assert np.all(np.abs(a[0, 0] - 128) <= 5)
    assert a.min() >= 0 and a.max() <= 255


def test_scene_validation():
    with pytest.raises(InvalidArgumentError):
        _scene(("circle", "red", "left"), ("square", "blue", "left"))
    with pytest.raises(InvalidArgumentError):
        SceneSpec((), 0)
    with pytest.raises(InvalidArgumentError):
        _scene(("hexagon", "red", "left"))


def test_answers_follow_scene():
    spec = _scene(("circle", "red", "left"), ("square", "blue", "right"))
    assert answer_for(spec, "what color is the object at the left") == "red"
    assert answer_for(spec, "how many objects are there") == "2"
    assert answer_for(spec, "is there a blue square") == "yes"
    assert answer_for(spec, "is there a red square") == "no"


def test_ppm_roundtrip(tmp_path):
    img = render_scene(_scene(("triangle", "yellow", "top")))
    p = tmp_path / "x.ppm"
    write_ppm(p, img)
    np.testing.assert_array_equal(read_ppm(p), np.rint(img))


def test_corpus_properties(corpus):
    train_seeds = {s.scene.seed for s in corpus.train}
    val_seeds = {s.scene.seed for s in corpus.val}
    assert not train_seeds & val_seeds
    for s in corpus.train[:500]:
        assert ANSWER_CATEGORY[s.answer] == s.question.template_category
        assert ANSWERS[s.answer] == answer_for(s.scene, s.question.text)
    existence = [ANSWERS[s.answer] for s in corpus.train if s.question.template_category == "existence"]
    assert 0.6 <= existence.count("yes") / len(existence) <= 0.8


def test_corpus_deterministic():
    a, b = generate_dataset(50, 10, seed=2), generate_dataset(50, 10, seed=2)
    assert [s.scene for s in a.train] == [s.scene for s in b.train]
    assert [s.answer for s in a.val] == [s.answer for s in b.val]


# --- target sets -------------------------------------------------------------------

def test_rare_answers_excluded(corpus):
    counts = qa_counts(corpus)
    for key, _, kept in eligible_questions(corpus):
        assert len(kept) >= 3
        assert all(counts[key][a] >= 3 for a, _ in kept)
    for kind in ("PopularQA", "RareQA"):
        ts = build_target_set(kind, corpus, seed=0)
        for t in ts.triples:
            assert counts[(t.question.text, t.question.template_category)][t.target] >= 3


def test_popular_and_rare_shape(corpus):
    pop = build_target_set("PopularQA", corpus, seed=0)
    rare = build_target_set("RareQA", corpus, seed=0)
    for ts in (pop, rare):
        assert len({t.image_id for t in ts.triples}) == 5
        assert len(ts) == min(20, len(eligible_questions(corpus))) * 3 * 5
        for t in ts.triples:
            assert ANSWER_CATEGORY[t.target] == t.question.template_category
    counts = qa_counts(corpus)
    top = max(counts[(t.question.text, t.question.template_category)][t.target] for t in rare.triples)
    assert top <= max(counts[(t.question.text, t.question.template_category)][t.target] for t in pop.triples)


def test_nonsense_is_cross_category(corpus):
    ts = build_target_set("NonSense", corpus, seed=0)
    assert len(ts) == 100
    assert all(ANSWER_CATEGORY[t.target] != t.question.template_category for t in ts.triples)


def test_gold_with_constant_victim(corpus):
    m = VqaVictim.init("monolithic", zero=True)  # always answers index 0
    ts = build_target_set("Gold", corpus, [m], seed=0)
    assert len(ts) == 100
    for t in ts.triples:
        s = corpus.val[t.image_id]
        assert predict_answer(m, t.image, t.question) == s.answer
        assert t.target != s.answer and t.target in CATEGORY_ANSWERS[t.question.template_category]
    small = generate_dataset(100, 200, seed=1)
    with pytest.raises(ConstructionError) as e:
        build_target_set("Gold", small, [m], seed=0)
    assert e.value.found < 100
    with pytest.raises(InvalidArgumentError):
        build_target_set("Gold", small, [], seed=0)


def test_target_set_json_roundtrip(tmp_path, corpus):
    ts = build_target_set("ScaleImage", corpus, seed=3, n_images=4)
    assert len(ts) == 10 * 4
    p = tmp_path / "t.json"
    ts.save(p)
    assert TargetSet.load(p) == ts
    with pytest.raises(InvalidArgumentError):
        TargetSet("Bogus", ())


def test_target_sets_deterministic(corpus):
    assert build_target_set("NonSense", corpus, seed=4) == build_target_set("NonSense", corpus, seed=4)
    with pytest.raises(InvalidArgumentError):
        build_target_set("Unknown", corpus)


# --- captions -----------------------------------------------------------------------

def test_caption_grammar():
    spec = _scene(("circle", "red", "left"), ("square", "blue", "top"))
    caps = region_captions(spec)
    assert len(caps) == 5 and caps[-1] == "a scene with two objects"
    pool = set(caption_pool())
    assert all(c in pool for c in caps)
    for text in pool:
        c = Caption.from_text(text)
        assert c.text == text and len(c.token_ids) <= 6


def test_caption_targets():
    cc = generate_caption_corpus(10, 400, seed=0)
    ts = build_caption_targets(cc.val, n_captions=5, n_images=40, seed=0)
    assert len(ts) == 200
    assert len({p.target for p in ts.triples}) == 5
    for p in ts.triples:
        assert region_captions(p.scene)[0] != p.target.text
    assert TargetSet.from_json(json.loads(json.dumps(ts.to_json()))) == ts


# --- frequency, prior, transfer -----------------------------------------------------

def test_answer_frequency_sums_to_probe_size(corpus):
    m = VqaVictim.init("attentive", seed=1)
    images = np.stack([s.image for s in corpus.val[:300]])
    q = Question.from_text("what color is the object at the left", "color")
    f = answer_frequency(m, images, q, batch=64)
    assert f.total == 300 and len(f.counts) == m.K
    preds = Counter(predict_answer(m, x, q) for x in images)
    assert all(f.counts[a] == preds.get(a, 0) for a in range(m.K))
    with pytest.raises(InvalidArgumentError):
        answer_frequency(m, images[:0], q)


def test_prior_correlation():
    q = Question.from_text("how many objects are there", "count")
    f = FrequencyTable(q, (5, 3, 1, 1))
    assert prior_correlation(f, [0.9, 0.5, 0.1, 0.2]) > 0.9
    with pytest.raises(InvalidArgumentError):
        prior_correlation(f, [0.1, 0.2])
    with pytest.raises(InvalidArgumentError):
        prior_correlation(np.array([0.5, 0.5]), [0.1, 0.2])


def test_transfer_rate():
    m = VqaVictim.init("monolithic", zero=True)  # answers 0 everywhere
    q = Question.from_text("what color is the object at the left", "color")
    scene = _scene(("circle", "red", "left"))
    img = render_scene(scene)

    def res(success):
        return AttackResult(img, success, 0.9, 60, 1.0)

    pairs = [(QATriple(0, scene, q, 0, "Gold"), res(True)),
             (QATriple(0, scene, q, 1, "Gold"), res(True)),
             (QATriple(0, scene, q, 2, "Gold"), res(False))]
    assert transfer_counts(pairs, m) == (1, 2)
    assert transfer_rate(pairs, m) == 0.5
    with pytest.raises(InvalidArgumentError):
        transfer_rate(pairs[2:], m)
