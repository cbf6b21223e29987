"""Run attacks over target sets, plus the prior and transfer studies built on top."""
from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from avlt.attacks import (
    AttackConfig, AttackResult, CwConfig, Theorem2Warning, attack_cw, attack_with_restarts,
    densecap_with_restarts,
)
from avlt.errors import InvalidArgumentError
from avlt.metrics import CampaignSummary, MatchConfig, topk_caption_accuracy
from avlt.targets.targetsets import TargetSet, answer_frequency, prior_correlation, transfer_counts

ATTACKS = ("ours", "cw", "caption")


def triple_seed(seed: int, index: int) -> int:
    """Per-triple seed; depends on the triple's position only, never on scheduling."""
    return int(np.random.SeedSequence([int(seed), 101, int(index)]).generate_state(1)[0])


@dataclass
class CampaignEntry:
    index: int
    triple: object
    result: AttackResult

    def record(self) -> dict:
        out = {"index": self.index, **self.triple.to_json(), **self.result.record()}
        out.pop("scene", None)
        return out


# worker-process globals, set once per process by the pool initializer
_WORKER: dict = {}


def _init_worker(model, attack, cfg, seed):
    _WORKER.update(model=model, attack=attack, cfg=cfg, seed=seed)


def _run_one(item):
    index, triple = item
    model, attack, cfg = _WORKER["model"], _WORKER["attack"], _WORKER["cfg"]
    seed = triple_seed(_WORKER["seed"], index)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", Theorem2Warning)
        if attack == "caption":
            result = densecap_with_restarts(model, triple.image, triple.target, cfg, seed=seed,
                                            record_trace=False)
        else:
            fn = attack_cw if attack == "cw" else None
            result = attack_with_restarts(model, triple.image, triple.question, triple.target, cfg,
                                          seed=seed, attack=fn, record_trace=False)
    return index, result


def run_campaign(model, targets: TargetSet, attack: str = "ours", cfg=None, seed: int = 0,
                 workers: int = 1) -> list[CampaignEntry]:
    """Attack every triple; results come back sorted by triple index whatever the worker count."""
    if attack not in ATTACKS:
        raise InvalidArgumentError(f"unknown attack {attack!r}")
    if cfg is None:
        cfg = CwConfig() if attack == "cw" else AttackConfig()
    cfg.validate()
    items = list(enumerate(targets.triples))
    if workers <= 1:
        _init_worker(model, attack, cfg, seed)
        out = [_run_one(it) for it in items]
    else:
        with ProcessPoolExecutor(workers, initializer=_init_worker,
                                 initargs=(model, attack, cfg, seed)) as pool:
            out = list(pool.map(_run_one, items, chunksize=max(1, len(items) // (4 * workers))))
    out.sort(key=lambda ir: ir[0])
    return [CampaignEntry(i, targets.triples[i], r) for i, r in out]


def caption_records(entries: list[CampaignEntry], omegas=(0.15, 0.20, 0.25)) -> list[dict]:
    """Adds per-run top-K accuracies (exact match and METEOR > omega) and the failure flag."""
    rows = []
    for e in entries:
        rec = e.record()
        target = e.triple.target.text
        caps = e.result.captions
        for k in range(1, len(caps) + 1):
            rec[f"exact@{k}"] = topk_caption_accuracy(target, caps, k, MatchConfig("exact"))[0]
            for w in omegas:
                rec[f"meteor{w:.2f}@{k}"] = topk_caption_accuracy(target, caps, k, MatchConfig("meteor", w))[0]
        rec["failed"] = topk_caption_accuracy(target, caps, len(caps), MatchConfig("meteor", 0.15))[1]
        rows.append(rec)
    return rows


def summarize(entries: list[CampaignEntry], caption: bool = False) -> CampaignSummary:
    records = caption_records(entries) if caption else [e.record() for e in entries]
    return CampaignSummary.from_records(records)


# --- studies ---------------------------------------------------------------------------

@dataclass
class PriorStudy:
    question: str
    frequencies: list[float]
    adversarial_probabilities: list[float]
    rho: float


def prior_study(model, probe_images, question, sources, cfg: AttackConfig | None = None,
                seed: int = 0) -> PriorStudy:
    """Answer frequency versus mean adversarial probability over every answer, for one question."""
    cfg = cfg or AttackConfig()
    freq = answer_frequency(model, probe_images, question)
    probs = np.zeros(model.K)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", Theorem2Warning)
        for a in range(model.K):
            for j, x in enumerate(sources):
                r = attack_with_restarts(model, x, question, a, cfg, seed=triple_seed(seed, a * len(sources) + j),
                                         record_trace=False)
                probs[a] += r.adversarial_probability / len(sources)
    rho = prior_correlation(freq, probs)
    return PriorStudy(question.text, [float(f) for f in freq.frequencies], [float(p) for p in probs], rho)


def transfer_study(entries_a: list[CampaignEntry], model_b) -> dict:
    moved, wins = transfer_counts([(e.triple, e.result) for e in entries_a], model_b)
    return {"transferred": moved, "successes_on_source": wins, "attempts": len(entries_a),
            "rate": moved / wins if wins else None}
