import numpy as np
import pytest

from avlt.attacks import AttackConfig
from avlt.campaign import caption_records, run_campaign, summarize, triple_seed
from avlt.errors import InvalidArgumentError
from avlt.targets.captions import generate_caption_corpus
from avlt.targets.scenes import generate_dataset
from avlt.targets.targetsets import TargetSet, build_caption_targets, build_target_set
from avlt.victims.densecap import DenseCapVictim
from avlt.victims.vqa import VqaVictim

CFG = AttackConfig(maxitr=60, restarts=1)


@pytest.fixture(scope="module")
def small_set():
    ts = build_target_set("NonSense", generate_dataset(400, 100, seed=1), seed=0)
    return TargetSet(ts.kind, ts.triples[:6])


def test_triple_seed_is_positional():
    assert triple_seed(0, 3) == triple_seed(0, 3)
    assert len({triple_seed(0, i) for i in range(100)}) == 100


def test_worker_count_does_not_change_results(small_set):
    m = VqaVictim.init("monolithic", seed=0)
    a = run_campaign(m, small_set, "ours", CFG, seed=2, workers=1)
    b = run_campaign(m, small_set, "ours", CFG, seed=2, workers=2)
    assert [e.index for e in b] == list(range(6))
    assert [e.record() for e in a] == [e.record() for e in b]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.result.image, y.result.image)


def test_unknown_attack(small_set):
    with pytest.raises(InvalidArgumentError):
        run_campaign(VqaVictim.init("monolithic"), small_set, "fgsm")


def test_caption_records():
    ts = build_caption_targets(generate_caption_corpus(10, 60, seed=0).val, n_captions=2, n_images=2, seed=0)
    entries = run_campaign(DenseCapVictim.init(seed=0), ts, "caption", CFG, seed=0)
    rows = caption_records(entries)
    assert len(rows) == 4
    for r in rows:
        assert {"exact@1", "exact@5", "meteor0.15@5", "failed"} <= set(r)
        assert r["exact@1"] in (0.0, 1.0)
    s = summarize(entries, caption=True)
    assert 0 <= s.success_rate <= 1 and len(s.cdf) == 4
