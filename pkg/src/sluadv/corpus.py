"""Annotated utterances, corpus files, vocabularies and multilingual splits."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, UNK = "<pad>", "<unk>"
PAD_ID, UNK_ID = 0, 1

_TAG_RE = re.compile(r"^(O|[BI]-\S+)$")


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Utterance:
    id: str
    language: str
    intent: str
    tokens: tuple[str, ...]
    slots: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "slots", tuple(self.slots))
        if not self.tokens:
            raise CorpusError(f"utterance {self.id!r} has no tokens")
        if len(self.tokens) != len(self.slots):
            raise CorpusError(
                f"utterance {self.id!r}: {len(self.tokens)} tokens but {len(self.slots)} slot tags"
            )
        for tag in self.slots:
            if not _TAG_RE.match(tag):
                raise CorpusError(f"utterance {self.id!r}: invalid BIO tag {tag!r}")


@dataclass(frozen=True)
class Corpus:
    utterances: tuple[Utterance, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "utterances", tuple(self.utterances))
        seen = set()
        for u in self.utterances:
            key = (u.id, u.language)
            if key in seen:
                raise CorpusError(f"duplicate utterance id {u.id!r} in language {u.language!r}")
            seen.add(key)

    @property
    def languages(self) -> set[str]:
        return {u.language for u in self.utterances}

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)


@dataclass
class ParallelCorpus:
    """Translations grouped by utterance id: ``groups[id][lang] -> Utterance``."""

    groups: dict[str, dict[str, Utterance]] = field(default_factory=dict)
    languages: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.languages and self.groups:
            first = next(iter(self.groups.values()))
            self.languages = tuple(first)
        for gid, group in self.groups.items():
            if set(group) != set(self.languages):
                raise CorpusError(f"group {gid!r} languages {sorted(group)} != {sorted(self.languages)}")
            if len({u.intent for u in group.values()}) != 1:
                raise CorpusError(f"group {gid!r} has inconsistent intents across languages")

    @property
    def ids(self) -> list[str]:
        return list(self.groups)

    def monolingual(self, lang: str) -> Corpus:
        return Corpus(tuple(g[lang] for g in self.groups.values()))

    def subset(self, ids) -> "ParallelCorpus":
        return ParallelCorpus({i: self.groups[i] for i in ids}, self.languages)

    @classmethod
    def from_corpora(cls, corpora: dict[str, Corpus]) -> "ParallelCorpus":
        groups: dict[str, dict[str, Utterance]] = {}
        for lang, corpus in corpora.items():
            for u in corpus:
                if u.language != lang:
                    raise CorpusError(f"utterance {u.id!r} tagged {u.language!r} in {lang!r} file")
                groups.setdefault(u.id, {})[lang] = u
        return cls(groups, tuple(corpora))


@dataclass
class Vocabulary:
    token_to_id: dict[str, int]
    intent_to_id: dict[str, int]
    slot_to_id: dict[str, int]
    language_to_id: dict[str, int]

    def __post_init__(self):
        for name in ("token_to_id", "intent_to_id", "slot_to_id", "language_to_id"):
            mapping = getattr(self, name)
            if sorted(mapping.values()) != list(range(len(mapping))):
                raise CorpusError(f"{name} ids are not contiguous from 0")
        self.id_to_intent = {i: s for s, i in self.intent_to_id.items()}
        self.id_to_slot = {i: s for s, i in self.slot_to_id.items()}
        self.id_to_language = {i: s for s, i in self.language_to_id.items()}

    def token_id(self, token: str) -> int:
        return self.token_to_id.get(normalize(token), UNK_ID)

    def to_dict(self) -> dict:
        return {
            "token_to_id": self.token_to_id,
            "intent_to_id": self.intent_to_id,
            "slot_to_id": self.slot_to_id,
            "language_to_id": self.language_to_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(**{k: dict(d[k]) for k in ("token_to_id", "intent_to_id", "slot_to_id", "language_to_id")})


@dataclass(frozen=True)
class SplitSpec:
    fractions: dict[str, float]
    seed: int = 0

    def __post_init__(self):
        total = sum(self.fractions.values())
        if abs(total - 1.0) > 1e-9:
            raise CorpusError(f"split fractions sum to {total}, expected 1.0")
        for lang, f in self.fractions.items():
            if not 0.0 <= f <= 1.0:
                raise CorpusError(f"fraction for {lang!r} outside [0, 1]: {f}")


def normalize(token: str) -> str:
    return token.lower()


# -- file format ---------------------------------------------------------------

_HEADERS = ("id", "lang", "intent")


def parse_corpus_file(text: str) -> Corpus:
    utterances = []
    block: list[tuple[int, str]] = []

    def flush():
        if not block:
            return
        start = block[0][0]
        header = {}
        for (lineno, line), key in zip(block[:3], _HEADERS):
            prefix = f"# {key}:"
            if not line.startswith(prefix):
                raise CorpusError(f"line {lineno}: expected header {prefix!r}, got {line!r}")
            header[key] = line[len(prefix):].strip()
        if len(block) < 3:
            raise CorpusError(f"line {start}: incomplete header")
        tokens, slots = [], []
        for lineno, line in block[3:]:
            parts = line.split("\t")
            if len(parts) != 2:
                raise CorpusError(f"line {lineno}: expected '<token>\\t<tag>', got {line!r}")
            tok, tag = parts
            if not _TAG_RE.match(tag):
                raise CorpusError(f"line {lineno}: invalid BIO tag {tag!r}")
            tokens.append(tok)
            slots.append(tag)
        try:
            utterances.append(Utterance(header["id"], header["lang"], header["intent"], tokens, slots))
        except CorpusError as e:
            raise CorpusError(f"line {start}: {e}") from None
        block.clear()

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r")
        if line.strip() == "":
            flush()
        else:
            block.append((lineno, line))
    flush()
    try:
        return Corpus(tuple(utterances))
    except CorpusError as e:
        raise CorpusError(f"corpus: {e}") from None


def serialize_corpus(c: Corpus) -> str:
    blocks = []
    for u in c:
        lines = [f"# id: {u.id}", f"# lang: {u.language}", f"# intent: {u.intent}"]
        lines += [f"{t}\t{s}" for t, s in zip(u.tokens, u.slots)]
        blocks.append("\n".join(lines) + "\n")
    return "\n".join(blocks)


def read_corpus(path) -> Corpus:
    return parse_corpus_file(Path(path).read_text(encoding="utf-8"))


def write_corpus(c: Corpus, path) -> None:
    Path(path).write_text(serialize_corpus(c), encoding="utf-8")


def read_parallel(directory) -> ParallelCorpus:
    """Load a directory holding one ``<lang>.txt`` corpus file per language."""
    directory = Path(directory)
    files = sorted(directory.glob("*.txt"))
    if not files:
        raise CorpusError(f"no corpus files in {directory}")
    return ParallelCorpus.from_corpora({f.stem: read_corpus(f) for f in files})


def write_parallel(p: ParallelCorpus, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for lang in p.languages:
        path = directory / f"{lang}.txt"
        write_corpus(p.monolingual(lang), path)
        paths.append(path)
    return paths


# -- vocabulary ----------------------------------------------------------------

def build_vocab(c: Corpus, min_token_freq: int = 1, label_corpora=()) -> Vocabulary:
    """Token vocabulary from ``c``; label inventories from ``c`` plus ``label_corpora``.

    Tokens rarer than ``min_token_freq`` are left out and encode as UNK.
    """
    if min_token_freq < 1:
        raise CorpusError("min_token_freq must be >= 1")
    if len(c) == 0:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    counts = Counter(normalize(t) for u in c for t in u.tokens)
    tokens = {PAD: PAD_ID, UNK: UNK_ID}
    for tok, n in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])):
        if n >= min_token_freq:
            tokens[tok] = len(tokens)

    sources = [c, *label_corpora]
    intents = sorted({u.intent for src in sources for u in src})
    slots = sorted({s for src in sources for u in src for s in u.slots} | {"O"})
    slots.remove("O")
    languages = sorted({u.language for src in sources for u in src})
    return Vocabulary(
        token_to_id=tokens,
        intent_to_id={s: i for i, s in enumerate(intents)},
        slot_to_id={s: i for i, s in enumerate(["O", *slots])},
        language_to_id={s: i for i, s in enumerate(languages)},
    )


# -- dataset constructions -----------------------------------------------------

def project_monolingual(p: ParallelCorpus, mixed: Corpus, lang: str) -> Corpus:
    """The same utterances as ``mixed``, each replaced by its ``lang`` translation."""
    out = []
    for u in mixed:
        group = p.groups.get(u.id)
        if group is None or lang not in group:
            raise CorpusError(f"no {lang!r} translation for utterance id {u.id!r}")
        out.append(group[lang])
    return Corpus(tuple(out))


def filter_language(mixed: Corpus, lang: str) -> Corpus:
    return Corpus(tuple(u for u in mixed if u.language == lang))


def split_sizes(n: int, fractions: dict[str, float]) -> dict[str, int]:
    """Round-half-up block sizes; the last language takes the remainder."""
    langs = list(fractions)
    sizes = {}
    for lang in langs[:-1]:
        sizes[lang] = int(np.floor(fractions[lang] * n + 0.5))
    rest = n - sum(sizes.values())
    if rest < 0:
        raise CorpusError(f"split of {n} ids overflows: {sizes}")
    sizes[langs[-1]] = rest
    return sizes


def build_multilingual_split(p: ParallelCorpus, spec: SplitSpec) -> Corpus:
    missing = set(spec.fractions) - set(p.languages)
    if missing:
        raise CorpusError(f"split languages not in parallel corpus: {sorted(missing)}")
    ids = p.ids
    order = np.random.default_rng(spec.seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    assigned, start = {}, 0
    for lang, size in split_sizes(len(ids), spec.fractions).items():
        assigned.update((i, lang) for i in shuffled[start:start + size])
        start += size
    return Corpus(tuple(p.groups[i][assigned[i]] for i in ids))


def holdout_split(p: ParallelCorpus, dev_frac: float, test_frac: float, seed: int):
    """Partition group ids into train/dev/test parallel corpora."""
    n = len(p.groups)
    n_dev = int(np.floor(dev_frac * n + 0.5))
    n_test = int(np.floor(test_frac * n + 0.5))
    ids = p.ids
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    test = sorted(shuffled[:n_test], key=ids.index)
    dev = sorted(shuffled[n_test:n_test + n_dev], key=ids.index)
    train = sorted(shuffled[n_test + n_dev:], key=ids.index)
    return p.subset(train), p.subset(dev), p.subset(test)


# -- synthetic parallel data ---------------------------------------------------

INTENT_NAMES = ("flight", "airfare", "ground_service", "airline", "city", "abbreviation")
SLOT_NAMES = ("city_name", "airport_code", "depart_date", "depart_time", "airline_name", "fare_class")

_ONSETS = "b c d f g h j k l m n p r s t v w z ch sh th tr br kl".split()
_VOWELS = "a e i o u ai ou ei".split()


@dataclass
class GrammarConfig:
    n_intents: int = 3
    n_slot_types: int = 4
    values_per_type: int = 100
    shared_value_frac: float = 0.8
    openers_per_intent: int = 3
    two_token_value_frac: float = 0.3


def _pseudo_word(rng, used: set, syllables: tuple[int, int] = (2, 3)) -> str:
    while True:
        n = int(rng.integers(syllables[0], syllables[1] + 1))
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(n))
        if w not in used:
            used.add(w)
            return w


def _grammar(langs, grammar_seed, gc: GrammarConfig):
    rng = np.random.default_rng([grammar_seed, 0x5105])
    used: set[str] = set()
    intents = list(INTENT_NAMES[: gc.n_intents])
    types = list(SLOT_NAMES[: gc.n_slot_types])

    # Slot roles pair up types that share a surface position, so the type is
    # only recoverable from the value itself.
    roles = [types[i:i + 2] for i in range(0, len(types), 2)]

    values = {}
    for t in types:
        concepts = []
        for _ in range(gc.values_per_type):
            length = 2 if rng.random() < gc.two_token_value_frac else 1
            if rng.random() < gc.shared_value_frac:
                surface = tuple(_pseudo_word(rng, used) for _ in range(length))
                concepts.append({lang: surface for lang in langs})
            else:
                concepts.append({lang: tuple(_pseudo_word(rng, used) for _ in range(length)) for lang in langs})
        values[t] = concepts

    def phrase(n):
        return {lang: tuple(_pseudo_word(rng, used, (1, 2)) for _ in range(n)) for lang in langs}

    templates = {}
    for k, intent in enumerate(intents):
        openers = [phrase(int(rng.integers(2, 4))) for _ in range(gc.openers_per_intent)]
        slot_roles = [k % len(roles), (k + 1) % len(roles)] if len(roles) > 1 else [0, 0]
        templates[intent] = {"openers": openers, "roles": slot_roles, "connector": phrase(1), "closer": phrase(1)}

    orders = {}
    for i, lang in enumerate(langs):
        base = [0, 1, 2, 3, 4]
        orders[lang] = base if i == 0 else list(np.random.default_rng([grammar_seed, 0x0DE, i]).permutation(5))
    return intents, types, roles, values, templates, orders


def generate_synthetic_parallel(
    n_groups: int, langs, grammar_seed: int, grammar: GrammarConfig | None = None
) -> ParallelCorpus:
    """Parallel pseudo-language SLU corpus with shared semantics.

    Each language has its own function words and segment order; a fraction of
    slot values have identical surface forms across languages.
    """
    langs = list(langs)
    if n_groups < 1:
        raise CorpusError("n_groups must be >= 1")
    if len(langs) < 2 or len(set(langs)) != len(langs):
        raise CorpusError("need at least two distinct languages")
    gc = grammar or GrammarConfig()
    intents, types, roles, values, templates, orders = _grammar(langs, grammar_seed, gc)
    rng = np.random.default_rng([grammar_seed, 0xDA7A])

    groups = {}
    width = len(str(n_groups - 1))
    for g in range(n_groups):
        intent = intents[int(rng.integers(len(intents)))]
        tpl = templates[intent]
        opener = tpl["openers"][int(rng.integers(len(tpl["openers"])))]
        two_slots = rng.random() < 0.6
        fills = []
        for role in tpl["roles"][: 2 if two_slots else 1]:
            t = roles[role][int(rng.integers(len(roles[role])))]
            fills.append((t, values[t][int(rng.integers(len(values[t])))]))

        gid = f"{g:0{width}d}"
        group = {}
        for lang in langs:
            chunks = [
                [(w, ("B-" if j == 0 else "I-") + t) for j, w in enumerate(concept[lang])]
                for t, concept in fills
            ]
            segments = [
                [(w, "O") for w in opener[lang]],
                chunks[0],
                [(w, "O") for w in tpl["connector"][lang]],
                chunks[1] if len(chunks) > 1 else [],
                [(w, "O") for w in tpl["closer"][lang]],
            ]
            ordered = [tok for k in orders[lang] for tok in segments[k]]
            group[lang] = Utterance(gid, lang, intent, [w for w, _ in ordered], [s for _, s in ordered])
        groups[gid] = group
    return ParallelCorpus(groups, tuple(langs))


def grammar_stats(p: ParallelCorpus) -> dict:
    intents = Counter()
    slots = Counter()
    lengths = []
    for lang in p.languages:
        for u in p.monolingual(lang):
            intents[u.intent] += 1
            slots.update(s[2:] for s in u.slots if s.startswith("B-"))
            lengths.append(len(u.tokens))
    return {
        "n_groups": len(p.groups),
        "languages": list(p.languages),
        "intents": dict(sorted(intents.items())),
        "slot_types": dict(sorted(slots.items())),
        "max_length": max(lengths) if lengths else 0,
        "mean_length": float(np.mean(lengths)) if lengths else 0.0,
    }


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
