"""Command-line entry point: ``avlt <subcommand> --config cfg.json``.

Exit codes: 0 success, 1 configuration/usage error, 2 runtime or numerical error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from avlt import __version__
from avlt.attacks import AttackConfig, CwConfig
from avlt.errors import AvltError, ConfigurationError, InvalidArgumentError
from avlt.metrics import CampaignSummary

log = logging.getLogger("avlt")

TARGET_KINDS = {"popular": "PopularQA", "rare": "RareQA", "gold": "Gold", "nonsense": "NonSense",
                "scale": "ScaleImage"}
VICTIMS = ("monolithic", "attentive")


# --- configuration --------------------------------------------------------------------

@dataclass
class CorpusSizes:
    vqa_train: int = 30000
    vqa_val: int = 2000
    cap_train: int = 6000
    cap_val: int = 500


@dataclass
class ExperimentConfig:
    seed: int = 0
    corpus: CorpusSizes = field(default_factory=CorpusSizes)
    vqa_train: dict = field(default_factory=dict)  # overrides for VqaTrainConfig
    cap_train: dict = field(default_factory=dict)  # overrides for CaptionTrainConfig
    attack: AttackConfig = field(default_factory=AttackConfig)
    cw: CwConfig = field(default_factory=CwConfig)
    targets: list = field(default_factory=lambda: ["popular", "rare", "gold", "nonsense"])
    caption_targets: int = 5
    caption_images: int = 40
    prior_question: str = "what color is the object at the left"
    prior_category: str = "color"
    prior_sources: int = 5
    prior_probe: int = 500
    prior_seeds: list = field(default_factory=lambda: [0, 1, 2])
    out_dir: str = "runs/default"
    workers: int = 1

    def validate(self) -> "ExperimentConfig":
        if not isinstance(self.seed, int):
            raise ConfigurationError("seed must be an integer")
        self.attack.validate()
        self.cw.validate()
        for t in self.targets:
            if t not in TARGET_KINDS:
                raise ConfigurationError(f"unknown target set {t!r}")
        if self.workers < 1:
            raise ConfigurationError("workers must be at least 1")
        for name in ("vqa_train", "vqa_val", "cap_train", "cap_val"):
            if getattr(self.corpus, name) <= 0:
                raise ConfigurationError(f"corpus.{name} must be positive")
        self.vqa_hyper()
        self.cap_hyper()
        return self

    def vqa_hyper(self):
        from avlt.victims.vqa import VqaTrainConfig

        return _build(VqaTrainConfig, self.vqa_train, "vqa_train")

    def cap_hyper(self):
        from avlt.victims.densecap import CaptionTrainConfig

        return _build(CaptionTrainConfig, self.cap_train, "cap_train")


def _build(cls, values: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigurationError(f"unknown keys in {where}: {sorted(unknown)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigurationError(f"{where}: {e}") from None


def config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    if "seed" not in d:
        raise ConfigurationError("config must set a seed")
    nested = {"corpus": CorpusSizes, "attack": AttackConfig, "cw": CwConfig}
    kwargs = {}
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    for k, v in d.items():
        kwargs[k] = _build(nested[k], v, k) if k in nested else v
    return ExperimentConfig(**kwargs)


def load_config(path: str | None) -> tuple[ExperimentConfig, str]:
    """Parse the config file (or defaults) and apply the AVLT_SEED override; returns (cfg, hash)."""
    if path is None:
        raw = json.dumps({"seed": 0}).encode()
    else:
        try:
            raw = Path(path).read_bytes()
        except OSError as e:
            raise ConfigurationError(f"cannot read config: {e}") from None
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"config is not valid JSON: {e}") from None
    if not isinstance(data, dict):
        raise ConfigurationError("config must be a JSON object")
    if "AVLT_SEED" in os.environ:
        try:
            data["seed"] = int(os.environ["AVLT_SEED"])
        except ValueError:
            raise ConfigurationError("AVLT_SEED must be an integer") from None
    cfg = config_from_dict(data).validate()
    return cfg, hashlib.sha256(raw).hexdigest()


# --- file helpers ---------------------------------------------------------------------

def atomic_write(path: Path, data: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data.encode() if isinstance(data, str) else data)
    os.replace(tmp, path)


def dump_json(path: Path, obj) -> None:
    atomic_write(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


@dataclass
class RunManifest:
    config_hash: str
    seed: int = 0
    version: str = __version__
    outputs: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    @classmethod
    def load_or_new(cls, out: Path, config_hash: str, seed: int) -> "RunManifest":
        path = out / "manifest.json"
        if path.exists():
            d = json.loads(path.read_text())
            if d.get("config_hash") == config_hash and d.get("seed") == seed:
                return cls(**d)
        return cls(config_hash, seed)

    def add(self, stage: str, paths, seconds: float, out: Path) -> None:
        self.outputs[stage] = sorted(str(Path(p).relative_to(out)) for p in paths)
        self.timings[stage] = round(seconds, 3)

    def write(self, out: Path) -> None:
        dump_json(out / "manifest.json", asdict(self))


# --- stages ---------------------------------------------------------------------------

class Context:
    def __init__(self, cfg: ExperimentConfig, config_hash: str):
        self.cfg = cfg
        self.hash = config_hash
        self.out = Path(cfg.out_dir)
        self.manifest = RunManifest.load_or_new(self.out, config_hash, cfg.seed)

    # paths
    @property
    def data_dir(self):
        return self.out / "data"

    def model_path(self, name):
        return self.out / "models" / f"{name}.avlt"

    def corpus(self):
        from avlt.targets.scenes import generate_dataset

        c = self.cfg.corpus
        return generate_dataset(c.vqa_train, c.vqa_val, self.cfg.seed)

    def caption_corpus(self):
        from avlt.targets.captions import generate_caption_corpus

        c = self.cfg.corpus
        return generate_caption_corpus(c.cap_train, c.cap_val, self.cfg.seed + 1)

    def load_victim(self, name):
        from avlt.victims.checkpoint import load_model

        path = self.model_path(name)
        if not path.exists():
            raise ConfigurationError(f"missing checkpoint {path}; run the training command first")
        return load_model(path)


def cmd_gen_data(ctx: Context, args) -> list[Path]:
    from avlt.targets.scenes import write_ppm

    corpus = ctx.corpus()
    cc = ctx.caption_corpus()
    written = []
    for name, samples in (("vqa_train", corpus.train), ("vqa_val", corpus.val)):
        rows = [{"scene": s.scene.to_json(), "question": s.question.text,
                 "category": s.question.template_category, "answer": int(s.answer)} for s in samples]
        p = ctx.data_dir / f"{name}.json"
        dump_json(p, rows)
        written.append(p)
    for name, scenes in (("cap_train", cc.train), ("cap_val", cc.val)):
        p = ctx.data_dir / f"{name}.json"
        dump_json(p, [s.to_json() for s in scenes])
        written.append(p)
    for i, s in enumerate(corpus.val[:5]):
        p = ctx.data_dir / "preview" / f"val_{i}.ppm"
        p.parent.mkdir(parents=True, exist_ok=True)
        write_ppm(p, s.image)
        written.append(p)
    print(f"wrote {len(corpus.train)}+{len(corpus.val)} VQA samples and "
          f"{len(cc.train)}+{len(cc.val)} caption scenes to {ctx.data_dir}")
    return written


def cmd_train_vqa(ctx: Context, args) -> list[Path]:
    from avlt.victims.checkpoint import save_model
    from avlt.victims.vqa import evaluate_vqa, train_vqa

    corpus = ctx.corpus()
    written = []
    for v in _victims(args):
        model = train_vqa(corpus, v, ctx.cfg.vqa_hyper(), seed=ctx.cfg.seed, log=log.info)
        acc = evaluate_vqa(model, *corpus.arrays("val"))
        p = ctx.model_path(v)
        p.parent.mkdir(parents=True, exist_ok=True)
        save_model(p, model)
        written.append(p)
        print(f"{v}: validation accuracy {acc:.4f} -> {p}")
    return written


def cmd_train_cap(ctx: Context, args) -> list[Path]:
    from avlt.victims.checkpoint import save_model
    from avlt.victims.densecap import caption_exact_rate, train_captioner

    cc = ctx.caption_corpus()
    model = train_captioner(cc, ctx.cfg.cap_hyper(), seed=ctx.cfg.seed, log=log.info)
    acc = caption_exact_rate(model, *cc.arrays("val"))
    p = ctx.model_path("captioner")
    p.parent.mkdir(parents=True, exist_ok=True)
    save_model(p, model)
    print(f"captioner: validation exact-match {acc:.4f} -> {p}")
    return [p]


def _victims(args):
    return VICTIMS if getattr(args, "victim", "both") == "both" else (args.victim,)


def target_set(ctx: Context, kind_flag: str):
    from avlt.targets.targetsets import TargetSet, build_target_set

    kind = TARGET_KINDS[kind_flag]
    path = ctx.out / "targets" / f"{kind_flag}.json"
    if path.exists():
        return TargetSet.load(path), path
    victims = [ctx.load_victim(v) for v in VICTIMS] if kind == "Gold" else ()
    ts = build_target_set(kind, ctx.corpus(), victims, seed=ctx.cfg.seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    ts.save(path)
    return ts, path


def _save_campaign(res_dir: Path, entries, records) -> list[Path]:
    p_rec = res_dir / "per_triple.json"
    dump_json(p_rec, records)
    p_img = res_dir / "adversarial.npy"
    buf = io.BytesIO()
    np.save(buf, np.stack([e.result.image for e in entries]))
    atomic_write(p_img, buf.getvalue())
    return [p_rec, p_img]


def cmd_attack_vqa(ctx: Context, args) -> list[Path]:
    from avlt.campaign import run_campaign

    ts, ts_path = target_set(ctx, args.targets)
    cfg = ctx.cfg.cw if args.attack == "cw" else ctx.cfg.attack
    written = [ts_path]
    for v in _victims(args):
        model = ctx.load_victim(v)
        entries = run_campaign(model, ts, args.attack, cfg, seed=ctx.cfg.seed, workers=ctx.cfg.workers)
        res_dir = ctx.out / "results" / f"{args.attack}-{args.targets}-{v}"
        records = [e.record() for e in entries]
        written += _save_campaign(res_dir, entries, records)
        s = CampaignSummary.from_records(records)
        print(f"{args.attack} on {v} / {args.targets}: success {s.success_rate:.3f} "
              f"mean p {s.mean_probability:.3f} median p {s.median_probability:.3f}")
    return written


def cmd_attack_cap(ctx: Context, args) -> list[Path]:
    from avlt.campaign import caption_records, run_campaign
    from avlt.targets.targetsets import TargetSet, build_caption_targets

    path = ctx.out / "targets" / "caption.json"
    if path.exists():
        ts = TargetSet.load(path)
    else:
        ts = build_caption_targets(ctx.caption_corpus().val, ctx.cfg.caption_targets,
                                   ctx.cfg.caption_images, seed=ctx.cfg.seed)
        path.parent.mkdir(parents=True, exist_ok=True)
        ts.save(path)
    model = ctx.load_victim("captioner")
    entries = run_campaign(model, ts, "caption", ctx.cfg.attack, seed=ctx.cfg.seed, workers=ctx.cfg.workers)
    res_dir = ctx.out / "results" / "caption"
    records = caption_records(entries)
    written = [path] + _save_campaign(res_dir, entries, records)
    top1 = np.mean([r["exact@1"] for r in records])
    failed = np.mean([r["failed"] for r in records])
    print(f"caption attack: top-1 exact {top1:.3f}, top-5 METEOR>0.15 failures {failed:.3f}")
    return written


def emit_report(summary: CampaignSummary, out_dir: Path, config_hash: str) -> list[Path]:
    """summary.json, cdf.csv and per_triple.json for one campaign."""
    out_dir = Path(out_dir)
    body = {
        "n": len(summary.records),
        "success_rate": summary.success_rate,
        "mean_adversarial_probability": summary.mean_probability,
        "median_adversarial_probability": summary.median_probability,
        "config_hash": config_hash,
    }
    if summary.records and "exact@1" in summary.records[0]:
        keys = [k for k in summary.records[0] if "@" in k]
        body["topk_accuracy"] = {k: float(np.mean([r[k] for r in summary.records])) for k in keys}
        body["failure_rate"] = float(np.mean([r["failed"] for r in summary.records]))
    paths = [out_dir / "summary.json", out_dir / "cdf.csv", out_dir / "per_triple.json"]
    dump_json(paths[0], body)
    atomic_write(paths[1], csv_text(["value", "cumulative_fraction"], [(repr(v), repr(f)) for v, f in summary.cdf]))
    dump_json(paths[2], summary.records)
    return paths


def cmd_eval(ctx: Context, args) -> list[Path]:
    root = Path(args.results) if args.results else ctx.out / "results"
    dirs = sorted(p.parent for p in root.glob("*/per_triple.json")) if root.is_dir() else []
    if not dirs:
        raise ConfigurationError(f"no campaign results under {root}")
    written = []
    print(f"{'campaign':32s} {'n':>5s} {'success':>8s} {'mean p':>8s} {'median p':>9s}")
    for d in dirs:
        records = json.loads((d / "per_triple.json").read_text())
        if not records:
            raise ConfigurationError(f"{d} holds no records")
        s = CampaignSummary.from_records(records)
        written += emit_report(s, d, ctx.hash)
        print(f"{d.name:32s} {len(records):5d} {s.success_rate:8.3f} {s.mean_probability:8.3f} "
              f"{s.median_probability:9.3f}")
        if "exact@1" in records[0]:
            for metric in ["exact"] + [f"meteor{w:.2f}" for w in (0.15, 0.20, 0.25)]:
                accs = [np.mean([r[f"{metric}@{k}"] for r in records]) for k in range(1, 6)]
                print(f"    Acc {metric:11s} K=1..5: " + " ".join(f"{a:.3f}" for a in accs))
    return written


def cmd_prior(ctx: Context, args) -> list[Path]:
    from avlt.campaign import prior_study
    from avlt.targets.scenes import ANSWERS, Question
    from scipy.stats import rankdata

    corpus = ctx.corpus()
    q = Question.from_text(ctx.cfg.prior_question, ctx.cfg.prior_category)
    probe = np.stack([s.image for s in corpus.val[: ctx.cfg.prior_probe]])
    out = ctx.out / "prior"
    written = []
    rhos = {}
    for v in _victims(args):
        model = ctx.load_victim(v)
        rhos[v] = {}
        for seed in ctx.cfg.prior_seeds:
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), 41]))
            pick = rng.choice(len(corpus.val), size=ctx.cfg.prior_sources, replace=False)
            sources = [corpus.val[int(i)].image for i in sorted(pick)]
            study = prior_study(model, probe, q, sources, ctx.cfg.attack, seed=int(seed))
            rhos[v][str(seed)] = study.rho
            fr, pr = rankdata(study.frequencies), rankdata(study.adversarial_probabilities)
            rows = [(ANSWERS[a], repr(study.frequencies[a]), repr(study.adversarial_probabilities[a]),
                     fr[a], pr[a]) for a in range(len(ANSWERS))]
            p = out / v / f"seed{seed}" / "freq_vs_prob.csv"
            atomic_write(p, csv_text(["answer", "frequency", "adversarial_probability", "frequency_rank",
                                      "probability_rank"], rows))
            written.append(p)
            print(f"{v} seed {seed}: spearman rho = {study.rho:.4f}")
    p = out / "summary.json"
    dump_json(p, {"question": q.text, "rho": rhos, "config_hash": ctx.hash})
    return written + [p]


def cmd_transfer(ctx: Context, args) -> list[Path]:
    from avlt.campaign import run_campaign, transfer_study

    ts, ts_path = target_set(ctx, args.targets)
    models = {v: ctx.load_victim(v) for v in VICTIMS}
    report = {"targets": args.targets, "config_hash": ctx.hash, "directions": {}}
    for a, b in ((VICTIMS[0], VICTIMS[1]), (VICTIMS[1], VICTIMS[0])):
        entries = run_campaign(models[a], ts, "ours", ctx.cfg.attack, seed=ctx.cfg.seed, workers=ctx.cfg.workers)
        r = transfer_study(entries, models[b])
        report["directions"][f"{a}->{b}"] = r
        rate = "n/a" if r["rate"] is None else f"{r['rate']:.3f}"
        print(f"{a} -> {b}: {r['transferred']}/{r['successes_on_source']} transferred (rate {rate}; "
              f"{r['attempts']} attacks)")
    p = ctx.out / "transfer" / "summary.json"
    dump_json(p, report)
    return [ts_path, p]


def cmd_gradcheck(ctx: Context, args) -> list[Path]:
    from avlt.gradcheck import audit_all

    models = {}
    for name in VICTIMS + ("captioner",):
        path = ctx.model_path(name)
        models[name] = None
        if path.exists():
            from avlt.victims.checkpoint import load_model

            models[name] = load_model(path)
    report = audit_all(models, probes=args.probes, seed=ctx.cfg.seed)
    p = ctx.out / "gradcheck.json"
    dump_json(p, report)
    for name, entry in report["checks"].items():
        print(f"{name:28s} probes {entry['probes']:4d} max rel err {entry['max_rel_error']:.2e} "
              f"{'pass' if entry['pass'] else 'FAIL'}")
    if not report["pass"]:
        raise AvltError("gradient audit failed")
    return [p]


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-vqa": cmd_train_vqa,
    "train-cap": cmd_train_cap,
    "attack-vqa": cmd_attack_vqa,
    "attack-cap": cmd_attack_cap,
    "eval": cmd_eval,
    "prior": cmd_prior,
    "transfer": cmd_transfer,
    "gradcheck": cmd_gradcheck,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigurationError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="avlt", description="Targeted attacks on toy vision-and-language victims.")
    parser.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="experiment config (JSON)")
        if name in ("train-vqa", "attack-vqa", "prior"):
            p.add_argument("--victim", choices=VICTIMS + ("both",), default="both")
        if name == "attack-vqa":
            p.add_argument("--attack", choices=("ours", "cw"), default="ours")
        if name in ("attack-vqa", "transfer"):
            p.add_argument("--targets", choices=sorted(TARGET_KINDS), default="gold")
        if name == "eval":
            p.add_argument("--results", default=None, help="results root (default <out_dir>/results)")
        if name == "gradcheck":
            p.add_argument("--probes", type=int, default=100)
    return parser


def run_command(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s")
        cfg, digest = load_config(args.config)
        ctx = Context(cfg, digest)
        t0 = time.perf_counter()
        written = COMMANDS[args.command](ctx, args)
        ctx.manifest.add(args.command, written, time.perf_counter() - t0, ctx.out)
        ctx.manifest.write(ctx.out)
        return 0
    except (ConfigurationError, InvalidArgumentError) as e:
        print(f"avlt: error: {e}", file=sys.stderr)
        return 1
    except (AvltError, ArithmeticError, OSError) as e:
        print(f"avlt: failed: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
