"""Slot F1, intent accuracy, semantic error rate and the baseline comparison."""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from .corpus import (Corpus, ParallelCorpus, SplitSpec, Utterance, build_multilingual_split, build_vocab,
                     filter_language, project_monolingual)
from .model import ModelConfig, batches, build_model, encode_corpus
from .training import TrainConfig, train_model

log = logging.getLogger(__name__)

_TAG = re.compile(r"^(O|([BI])-(\S+))$")

SEMER_MATCHING = ("chunks matched as (label, span text): exact matches first, then same-text/"
                  "different-label pairs count as substitutions, leftovers as deletions/insertions")


@dataclass(frozen=True, order=True)
class Chunk:
    label: str
    start: int
    end: int


def _split_tag(tag):
    m = _TAG.match(tag)
    if not m:
        raise ValueError(f"malformed BIO tag {tag!r}")
    return ("O", None) if m.group(1) == "O" else (m.group(2), m.group(3))


def extract_chunks(tags) -> set[Chunk]:
    """Chunks under the CoNLL convention: a stray ``I-x`` opens a new chunk."""
    chunks = set()
    label, start = None, None
    for i, tag in enumerate(tags):
        kind, name = _split_tag(tag)
        begins = kind == "B" or (kind == "I" and name != label)
        if label is not None and (kind == "O" or begins):
            chunks.add(Chunk(label, start, i - 1))
            label = None
        if begins:
            label, start = name, i
    if label is not None:
        chunks.add(Chunk(label, start, len(tags) - 1))
    return chunks


def slot_f1(refs, hyps):
    """Micro precision/recall/F1 over exact (label, span) matches; 0/0 counts as 0."""
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} reference vs {len(hyps)} hypothesis chunk sets")
    tp = sum(len(set(r) & set(h)) for r, h in zip(refs, hyps))
    n_ref = sum(len(r) for r in refs)
    n_hyp = sum(len(h) for h in hyps)
    p = tp / n_hyp if n_hyp else 0.0
    r = tp / n_ref if n_ref else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def intent_accuracy(refs, hyps) -> float:
    if len(refs) != len(hyps):
        raise ValueError("reference and hypothesis lists differ in length")
    if not refs:
        raise ValueError("no intents to score")
    return sum(a == b for a, b in zip(refs, hyps)) / len(refs)


@dataclass
class SemerCounts:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    intent_errors: int = 0
    ref_slots: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions + self.intent_errors

    def __add__(self, other: "SemerCounts") -> "SemerCounts":
        return SemerCounts(*(a + b for a, b in zip(asdict(self).values(), asdict(other).values())))


def semer(counts) -> float:
    """Corpus-level rate: total errors over total (reference slots + 1)."""
    counts = list(counts)
    denom = sum(c.ref_slots + 1 for c in counts)
    return sum(c.errors for c in counts) / denom if denom else 0.0


def semer_utterance(ref: Utterance, hyp_intent: str, hyp_tags) -> SemerCounts:
    if len(hyp_tags) != len(ref.tokens):
        raise ValueError(f"utterance {ref.id!r}: {len(hyp_tags)} tags for {len(ref.tokens)} tokens")

    def realize(tags):
        return Counter((c.label, " ".join(ref.tokens[c.start:c.end + 1])) for c in extract_chunks(tags))

    ref_c, hyp_c = realize(ref.slots), realize(hyp_tags)
    n_ref = sum(ref_c.values())
    exact = ref_c & hyp_c
    ref_c -= exact
    hyp_c -= exact
    subs = 0
    for (label, text), n in sorted(ref_c.items()):
        for key in sorted(k for k in hyp_c if k[1] == text and k[0] != label):
            take = min(n, hyp_c[key])
            if take:
                subs += take
                n -= take
                hyp_c[key] -= take
                ref_c[(label, text)] -= take
            if not n:
                break
    return SemerCounts(
        substitutions=subs,
        deletions=sum(ref_c.values()),
        insertions=sum(hyp_c.values()),
        intent_errors=int(hyp_intent != ref.intent),
        ref_slots=n_ref,
    )


@dataclass
class LanguageMetrics:
    language: str
    semer: float
    slot_f1: float
    ic_accuracy: float
    n_utterances: int

    def to_dict(self):
        return asdict(self)


def score_predictions(refs: list[Utterance], intents, tags, language="") -> LanguageMetrics:
    counts = [semer_utterance(u, i, t) for u, i, t in zip(refs, intents, tags)]
    _, _, f1 = slot_f1([extract_chunks(u.slots) for u in refs], [extract_chunks(t) for t in tags])
    return LanguageMetrics(language, semer(counts), f1,
                           intent_accuracy([u.intent for u in refs], list(intents)), len(refs))


def predict_corpus(model, test: Corpus, batch_size=128):
    """Eval-mode intents (argmax) and Viterbi slot tags for every utterance."""
    items = encode_corpus(test, model.vocab)
    model.eval()
    intents, tags = [], []
    for batch in batches(items, batch_size):
        ids, paths = model.predict(batch)
        intents += [model.vocab.id_to_intent[i] for i in ids]
        tags += [[model.vocab.id_to_slot[s] for s in p] for p in paths]
    return intents, tags


def evaluate_model(model, test: Corpus) -> dict[str, LanguageMetrics]:
    intents, tags = predict_corpus(model, test)
    by_lang: dict[str, list[int]] = {}
    for i, u in enumerate(test):
        by_lang.setdefault(u.language, []).append(i)
    return {
        lang: score_predictions([test.utterances[i] for i in idx], [intents[i] for i in idx],
                                [tags[i] for i in idx], lang)
        for lang, idx in sorted(by_lang.items())
    }


def averaged(metrics: dict[str, LanguageMetrics]) -> LanguageMetrics:
    """Unweighted mean over languages."""
    if not metrics:
        raise ValueError("no languages to average")
    rows = list(metrics.values())
    mean = lambda k: float(np.mean([getattr(r, k) for r in rows]))
    return LanguageMetrics("avg", mean("semer"), mean("slot_f1"), mean("ic_accuracy"),
                           sum(r.n_utterances for r in rows))


def relative_change(base: float, new: float) -> float:
    return (new - base) / base * 100.0


# -- comparison ----------------------------------------------------------------

MODELS = ("Naive", "Ideal", "Multi-lang", "Lang.-adv")
METRICS = ("semer", "slot_f1", "ic_accuracy")


@dataclass
class ExperimentData:
    """Parallel train/dev pools, the mixed sets drawn from them, and per-language tests."""

    train_parallel: ParallelCorpus
    dev_parallel: ParallelCorpus
    tests: dict[str, Corpus]
    split: SplitSpec

    def mixed(self, seed_offset: int = 0):
        spec = replace(self.split, seed=self.split.seed + seed_offset)
        dev_spec = replace(spec, seed=spec.seed + 7919)
        return build_multilingual_split(self.train_parallel, spec), build_multilingual_split(self.dev_parallel, dev_spec)


@dataclass
class CellResult:
    model: str
    language: str | None
    seed: int
    metrics: dict[str, LanguageMetrics]
    epochs: int


@dataclass
class ComparisonReport:
    languages: list[str]
    seeds: list[int]
    # rows[model][language or "avg"][metric] -> {"mean", "min", "max"}
    rows: dict = field(default_factory=dict)
    per_seed: dict = field(default_factory=dict)
    relative: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ComparisonReport":
        return cls(**json.loads(text))

    def avg_semer(self, model: str) -> list[float]:
        """Per-seed averaged SemER of one model, in seed order."""
        return [self.per_seed[model][str(s)]["avg"]["semer"] for s in self.seeds]

    def to_markdown(self) -> str:
        cols = self.languages + ["avg"]
        head = "| Target | Model | SemER | SF F1 | IC acc. |"
        lines = [f"### {self.meta.get('experiment', 'comparison')}", "", head, "|---|---|---|---|---|"]
        for lang in cols:
            for model in MODELS:
                if model not in self.rows:
                    continue
                cell = self.rows[model][lang]
                vals = []
                for m in METRICS:
                    c = cell[m]
                    txt = f"{100 * c['mean']:.2f}"
                    if len(self.seeds) > 1:
                        txt += f" [{100 * c['min']:.2f}, {100 * c['max']:.2f}]"
                    vals.append(txt)
                target = "Avg." if lang == "avg" else lang
                lines.append(f"| {target} | {model} | " + " | ".join(vals) + " |")
        if self.relative:
            lines += ["", "Relative change of averaged metrics vs Naive (%):", "",
                      "| Model | SemER | SF F1 | IC acc. |", "|---|---|---|---|"]
            for model, rel in self.relative.items():
                lines.append(f"| {model} | " + " | ".join(f"{rel[m]:+.2f}" for m in METRICS) + " |")
        lines += ["", f"Seeds: {', '.join(map(str, self.seeds))}. Scores x100. "
                  f"SemER matching: {self.meta.get('semer_matching', SEMER_MATCHING)}.", ""]
        return "\n".join(lines)


@dataclass
class ComparisonConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    min_token_freq: int = 1
    dtype: str = "float32"
    models: tuple = MODELS
    workers: int = 1


def _cell_jobs(data: ExperimentData, langs, seeds, models):
    for seed in seeds:
        for model in models:
            if model in ("Naive", "Ideal"):
                for lang in langs:
                    yield model, lang, seed
            else:
                yield model, None, seed


def _cell_data(data: ExperimentData, model: str, lang, seed: int):
    D, D_dev = data.mixed(seed)
    if model == "Naive":
        return filter_language(D, lang), filter_language(D_dev, lang), {lang: data.tests[lang]}
    if model == "Ideal":
        return (project_monolingual(data.train_parallel, D, lang),
                project_monolingual(data.dev_parallel, D_dev, lang), {lang: data.tests[lang]})
    return D, D_dev, data.tests


def run_cell(data: ExperimentData, model: str, lang, seed: int, cfg: ComparisonConfig) -> CellResult:
    torch.set_num_threads(1)
    train, dev, tests = _cell_data(data, model, lang, seed)
    if len(train) == 0:
        raise RuntimeError(f"{model}/{lang}/seed {seed}: empty training set")
    # labels (never tokens) come from every pool so that test labels are in the closed inventory
    label_src = [pool.monolingual(l) for pool in (data.train_parallel, data.dev_parallel)
                 for l in pool.languages] + list(data.tests.values())
    vocab = build_vocab(train, cfg.min_token_freq, label_corpora=label_src)
    dtype = torch.float64 if cfg.dtype == "float64" else torch.float32
    torch.manual_seed(seed)
    variant = "adversarial" if model == "Lang.-adv" else "standard"
    net = build_model(variant, vocab, cfg.model, torch.float64).to(dtype)
    tcfg = replace(cfg.train, seed=seed)
    try:
        net, train_log = train_model(net, train, dev, tcfg)
    except Exception as e:
        raise RuntimeError(f"training cell {model}/{lang or 'all'}/seed {seed} failed: {e}") from e
    metrics = {}
    for l, test in tests.items():
        metrics.update(evaluate_model(net, test))
    log.info("cell %s/%s seed %d: %s", model, lang or "all", seed,
             {k: round(v.semer * 100, 2) for k, v in metrics.items()})
    return CellResult(model, lang, seed, metrics, len(train_log.records))


def _run_cell_star(args):
    return run_cell(*args)


def _summary(values):
    return {"mean": float(np.mean(values)), "min": float(np.min(values)), "max": float(np.max(values))}


def assemble_report(cells: list[CellResult], langs, seeds, meta=None) -> ComparisonReport:
    per_seed: dict = {}
    for c in cells:
        slot = per_seed.setdefault(c.model, {}).setdefault(str(c.seed), {})
        for lang, m in c.metrics.items():
            if c.language is None or lang == c.language:
                slot[lang] = m
    rows, flat = {}, {}
    for model in [m for m in MODELS if m in per_seed]:
        flat[model] = {}
        for seed in seeds:
            entry = per_seed[model][str(seed)]
            missing = set(langs) - set(entry)
            if missing:
                raise RuntimeError(f"{model} seed {seed}: no scores for {sorted(missing)}")
            langs_only = {l: entry[l] for l in langs}
            flat[model][str(seed)] = {l: m.to_dict() for l, m in langs_only.items()}
            flat[model][str(seed)]["avg"] = averaged(langs_only).to_dict()
        rows[model] = {
            col: {m: _summary([flat[model][str(s)][col][m] for s in seeds]) for m in METRICS}
            for col in list(langs) + ["avg"]
        }
    relative = {}
    if "Naive" in rows:
        for model in rows:
            if model != "Naive":
                relative[model] = {m: relative_change(rows["Naive"]["avg"][m]["mean"], rows[model]["avg"][m]["mean"])
                                   for m in METRICS}
    meta = {"semer_matching": SEMER_MATCHING, "averaging": "unweighted over languages", **(meta or {})}
    return ComparisonReport(list(langs), list(seeds), rows, flat, relative, meta)


def run_comparison(data: ExperimentData, langs, cfg: ComparisonConfig, seeds=(0,), meta=None) -> ComparisonReport:
    """Train and score Naive, Ideal, Multi-lang and Lang.-adv models for every seed."""
    jobs = list(_cell_jobs(data, langs, seeds, cfg.models))
    args = [(data, m, l, s, cfg) for m, l, s in jobs]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            cells = list(pool.map(_run_cell_star, args))
    else:
        cells = [run_cell(*a) for a in args]
    meta = {"models": list(cfg.models), "train_config": cfg.train.to_dict(),
            "model_config": asdict(cfg.model), "min_token_freq": cfg.min_token_freq,
            "dtype": cfg.dtype, "split": {"fractions": data.split.fractions, "seed": data.split.seed},
            "epochs": {f"{c.model}/{c.language or 'all'}/{c.seed}": c.epochs for c in cells},
            **(meta or {})}
    return assemble_report(cells, list(langs), list(seeds), meta)
