"""Command-line entry point: ``sluadv {generate,split,train,eval,compare,report}``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
Outputs land under ``--out``; without it, under ``$SLUADV_OUT`` (or ``runs/``)
in a per-command subdirectory.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import torch

from . import __version__
from .corpus import (Corpus, CorpusError, GrammarConfig, SplitSpec, build_multilingual_split, build_vocab,
                     dump_json, filter_language, generate_synthetic_parallel, grammar_stats, holdout_split,
                     project_monolingual, read_corpus, read_parallel, write_corpus, write_parallel)
from .evaluation import ComparisonConfig, ComparisonReport, ExperimentData, averaged, evaluate_model, run_comparison
from .model import InventoryError, ModelConfig, build_model, load_model
from .training import TrainConfig, train_model

log = logging.getLogger("sluadv")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
VARIANTS = ("standard-mono", "standard-multi", "adversarial")


class ConfigError(Exception):
    """Invalid flags or configuration; maps to exit code 2."""


# -- configuration -------------------------------------------------------------

def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{where}.{unknown[0]}: unknown field")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


@dataclass
class RunConfig:
    experiment: str = "experiment"
    corpus_dir: str | None = None
    out: str | None = None
    variant: str = "standard-multi"
    # synthetic corpus used by ``compare`` when no corpus_dir is given
    synthetic: dict = field(default_factory=lambda: {"groups": 600, "langs": ["L1", "L2"], "seed": 7})
    holdout: dict = field(default_factory=lambda: {"dev_frac": 0.1, "test_frac": 0.1, "seed": 7})
    split: dict = field(default_factory=lambda: {"fractions": {"L1": 0.5, "L2": 0.5}, "seed": 0})
    seeds: list = field(default_factory=lambda: [0])
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    min_token_freq: int = 1
    dtype: str = "float32"
    workers: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        train = _build(TrainConfig, d.pop("train", {}), "train")
        model = _build(ModelConfig, d.pop("model", {}), "model")
        cfg = _build(cls, d, "config")
        cfg.train, cfg.model = train, model
        cfg.validate()
        return cfg

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant: must be one of {', '.join(VARIANTS)}, got {self.variant!r}")
        if self.corpus_dir is not None and not Path(self.corpus_dir).is_dir():
            raise ConfigError(f"corpus_dir: {self.corpus_dir} does not exist")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype: must be float32 or float64, got {self.dtype!r}")
        if self.workers < 1:
            raise ConfigError("workers: must be >= 1")
        if not self.seeds or not all(isinstance(s, int) for s in self.seeds):
            raise ConfigError("seeds: expected a nonempty list of integers")
        try:
            self.split_spec()
        except CorpusError as e:
            raise ConfigError(f"split.fractions: {e}") from None

    def split_spec(self) -> SplitSpec:
        return SplitSpec(dict(self.split.get("fractions", {})), int(self.split.get("seed", 0)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        return d


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path}: invalid JSON ({e})") from None
    return RunConfig.from_dict(raw)


def _out_dir(args, cfg: RunConfig | None = None) -> Path:
    if args.out:
        out = Path(args.out)
    elif os.environ.get("SLUADV_OUT"):
        out = Path(os.environ["SLUADV_OUT"]) / args.command
    elif cfg is not None and cfg.out:
        out = Path(cfg.out)
    else:
        out = Path("runs") / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_langs(text: str) -> list[str]:
    langs = [l.strip() for l in text.split(",") if l.strip()]
    if len(set(langs)) != len(langs):
        raise ConfigError(f"--langs: duplicate language in {text!r}")
    return langs


def _parse_fractions(text: str) -> dict[str, float]:
    out = {}
    for part in text.split(","):
        lang, sep, value = part.partition("=")
        if not sep:
            raise ConfigError(f"--fractions: expected LANG=FRACTION, got {part!r}")
        try:
            out[lang.strip()] = float(value)
        except ValueError:
            raise ConfigError(f"--fractions: {value!r} is not a number") from None
    return out


def _parse_seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds: expected comma-separated integers, got {text!r}") from None


def _manifest(out: Path, command: str, **payload):
    dump_json({"command": command, "version": __version__, **payload}, out / "manifest.json")


# -- commands ------------------------------------------------------------------

def cmd_generate(args) -> int:
    if args.groups < 1:
        raise ConfigError("--groups: must be >= 1")
    langs = _parse_langs(args.langs)
    cfg_raw = json.loads(Path(args.config).read_text()) if args.config else {}
    grammar = _build(GrammarConfig, cfg_raw.get("grammar", {}), "grammar")
    try:
        p = generate_synthetic_parallel(args.groups, langs, args.seed, grammar)
    except CorpusError as e:
        raise ConfigError(str(e)) from None
    out = _out_dir(args)
    paths = write_parallel(p, out)
    _manifest(out, "generate", seed=args.seed, groups=args.groups, languages=langs,
              grammar=asdict(grammar), files=[x.name for x in paths], stats=grammar_stats(p))
    print(f"wrote {len(paths)} corpus files with {args.groups} groups to {out}")
    return EXIT_OK


def _write_split(p, D: Corpus, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    write_corpus(D, out / "mixed.txt")
    counts = {"mixed": len(D)}
    for lang in p.languages:
        Dl, dl = project_monolingual(p, D, lang), filter_language(D, lang)
        write_corpus(Dl, out / f"D_{lang}.txt")
        write_corpus(dl, out / f"d_{lang}.txt")
        counts[f"D_{lang}"], counts[f"d_{lang}"] = len(Dl), len(dl)
    return counts


def cmd_split(args) -> int:
    fractions = _parse_fractions(args.fractions)
    try:
        spec = SplitSpec(fractions, args.seed)
    except CorpusError as e:
        raise ConfigError(f"--fractions: {e}") from None
    p = read_parallel(args.corpus)
    missing = sorted(set(fractions) - set(p.languages))
    if missing:
        raise ConfigError(f"--fractions: languages {missing} are not in {args.corpus}")
    out = _out_dir(args)
    train, dev, test = holdout_split(p, args.dev_frac, args.test_frac, args.seed)
    counts = {"train": _write_split(train, build_multilingual_split(train, spec), out)}
    if len(dev.groups):
        dev_spec = SplitSpec(fractions, args.seed + 7919)
        counts["dev"] = _write_split(dev, build_multilingual_split(dev, dev_spec), out / "dev")
    if len(test.groups):
        write_parallel(test, out / "test")
        counts["test"] = {lang: len(test.groups) for lang in test.languages}
    _manifest(out, "split", seed=args.seed, fractions=fractions, dev_frac=args.dev_frac,
              test_frac=args.test_frac, corpus=str(args.corpus), counts=counts)
    print(json.dumps(counts["train"], sort_keys=True))
    return EXIT_OK


def _train_config(args, cfg: RunConfig) -> TrainConfig:
    overrides = {k: v for k, v in (("K", args.epochs), ("batch_size", args.batch_size), ("seed", args.seed),
                                   ("patience", args.patience), ("noam_scale", args.noam_scale)) if v is not None}
    try:
        return TrainConfig(**{**cfg.train.to_dict(), **overrides})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"train: {e}") from None


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    variant = args.variant or cfg.variant
    if variant not in VARIANTS:
        raise ConfigError(f"--variant: must be one of {', '.join(VARIANTS)}")
    tcfg = _train_config(args, cfg)
    train, dev = read_corpus(args.train), read_corpus(args.dev)
    if len(train) == 0 or len(dev) == 0:
        raise ConfigError("--train/--dev: corpora must be nonempty")
    langs = train.languages
    if variant == "adversarial" and len(langs) < 2:
        raise ConfigError(f"--variant adversarial needs at least two training languages, got {list(langs)}")
    if variant == "standard-mono" and len(langs) != 1:
        raise ConfigError(f"--variant standard-mono needs a single-language corpus, got {list(langs)}")
    vocab = build_vocab(train, cfg.min_token_freq, label_corpora=[dev])
    torch.manual_seed(tcfg.seed)
    model = build_model(variant, vocab, cfg.model)
    out = _out_dir(args, cfg)
    t0 = time.time()
    model, train_log = train_model(model, train, dev, tcfg, out)
    train_log.write(out / "trainlog.jsonl")
    _manifest(out, "train", variant=variant, seed=tcfg.seed, train=str(args.train), dev=str(args.dev),
              train_config=tcfg.to_dict(), model_config=asdict(cfg.model), epochs=len(train_log.records),
              seconds=round(time.time() - t0, 1))
    print(f"trained {variant} for {len(train_log.records)} epochs; checkpoint at {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, meta = load_model(args.checkpoint)
    results = {}
    for path in args.test:
        test = read_corpus(path)
        try:
            results.update(evaluate_model(model, test))
        except InventoryError as e:
            raise InventoryError(f"label inventory mismatch between {args.checkpoint} and {path}: {e}") from None
    payload = {lang: m.to_dict() for lang, m in results.items()}
    payload["avg"] = averaged(results).to_dict()
    out = _out_dir(args)
    dump_json(payload, out / "metrics.json")
    for lang, m in payload.items():
        print(f"{lang}\tSemER {100 * m['semer']:.2f}\tSF F1 {100 * m['slot_f1']:.2f}\t"
              f"IC acc {100 * m['ic_accuracy']:.2f}")
    return EXIT_OK


def experiment_data(cfg: RunConfig) -> ExperimentData:
    if cfg.corpus_dir:
        p = read_parallel(cfg.corpus_dir)
    else:
        syn = cfg.synthetic
        grammar = _build(GrammarConfig, syn.get("grammar", {}), "synthetic.grammar")
        p = generate_synthetic_parallel(int(syn["groups"]), list(syn["langs"]), int(syn["seed"]), grammar)
    h = cfg.holdout
    tr, dv, te = holdout_split(p, float(h["dev_frac"]), float(h["test_frac"]), int(h["seed"]))
    spec = cfg.split_spec()
    missing = sorted(set(spec.fractions) - set(p.languages))
    if missing:
        raise ConfigError(f"split.fractions: languages {missing} are not in the corpus")
    return ExperimentData(tr, dv, {l: te.monolingual(l) for l in spec.fractions}, spec)


def cmd_compare(args) -> int:
    cfg = load_config(args.config)
    if args.seeds:
        cfg.seeds = _parse_seeds(args.seeds)
    if args.workers:
        cfg.workers = args.workers
    cfg.validate()
    data = experiment_data(cfg)
    langs = list(cfg.split_spec().fractions)
    ccfg = ComparisonConfig(train=cfg.train, model=cfg.model, min_token_freq=cfg.min_token_freq,
                            dtype=cfg.dtype, workers=cfg.workers)
    out = _out_dir(args, cfg)
    t0 = time.time()
    report = run_comparison(data, langs, ccfg, cfg.seeds, meta={"experiment": cfg.experiment})
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.md").write_text(report.to_markdown(), encoding="utf-8")
    # wall-clock lives in the manifest so the report stays byte-reproducible
    _manifest(out, "compare", config=cfg.to_dict(), seconds=round(time.time() - t0, 1))
    print(report.to_markdown())
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        report = ComparisonReport.from_json(Path(args.input).read_text(encoding="utf-8"))
    except (json.JSONDecodeError, TypeError) as e:
        raise ConfigError(f"--input: not a comparison report ({e})") from None
    md = report.to_markdown()
    if args.out:
        out = _out_dir(args)
        (out / "report.md").write_text(md, encoding="utf-8")
    print(md)
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sluadv", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic parallel corpus")
    g.add_argument("--groups", type=int, required=True)
    g.add_argument("--langs", default="L1,L2")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config", help="JSON with an optional 'grammar' object")
    g.add_argument("--out")
    g.set_defaults(fn=cmd_generate)

    s = sub.add_parser("split", help="build a mixed multilingual corpus and its projections")
    s.add_argument("--corpus", required=True, help="directory with one <lang>.txt per language")
    s.add_argument("--fractions", required=True, help="e.g. L1=0.5,L2=0.5")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dev-frac", type=float, default=0.0)
    s.add_argument("--test-frac", type=float, default=0.0)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_split)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--train", required=True, help="training corpus file")
    t.add_argument("--dev", required=True, help="dev corpus file")
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int, help="epoch cap K")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--noam-scale", type=float)
    t.add_argument("--out")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on test corpora")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--test", required=True, nargs="+")
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("compare", help="run the Naive/Ideal/Multi-lang/Lang.-adv comparison")
    c.add_argument("--config")
    c.add_argument("--seeds", help="comma-separated, overrides the config")
    c.add_argument("--workers", type=int)
    c.add_argument("--out")
    c.set_defaults(fn=cmd_compare)

    r = sub.add_parser("report", help="render a report.json as markdown")
    r.add_argument("--input", required=True)
    r.add_argument("--out")
    r.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"sluadv {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (InventoryError, CorpusError, RuntimeError, ValueError, OSError) as e:
        print(f"sluadv {args.command}: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
