from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from sluadv.corpus import (PAD, UNK, Corpus, CorpusError, GrammarConfig, ParallelCorpus, SplitSpec, Utterance,
                           build_multilingual_split, build_vocab, filter_language, generate_synthetic_parallel,
                           holdout_split, parse_corpus_file, project_monolingual, read_parallel,
                           serialize_corpus, split_sizes, write_parallel)
from sluadv.evaluation import extract_chunks


def utt(i, lang, tokens, slots=None, intent="city"):
    return Utterance(str(i), lang, intent, tokens, slots or ["O"] * len(tokens))


def parallel(n, langs=("EN", "DE")):
    return ParallelCorpus({str(i): {l: utt(i, l, [f"w{i}{l}"]) for l in langs} for i in range(n)}, tuple(langs))


def test_parse_example_block():
    text = "# id: 7\n# lang: EN\n# intent: city\nwhere\tO\nis\tO\nMCO\tB-airport_code\n"
    (u,) = parse_corpus_file(text).utterances
    assert u.tokens == ("where", "is", "MCO")
    assert u.slots == ("O", "O", "B-airport_code")
    assert (u.id, u.language, u.intent) == ("7", "EN", "city")


def test_parse_empty():
    assert len(parse_corpus_file("")) == 0


def test_parse_arity_mismatch_names_line():
    text = "# id: 1\n# lang: EN\n# intent: x\na\tO\nb\tO\nc\n"
    with pytest.raises(CorpusError, match="line 6"):
        parse_corpus_file(text)


@pytest.mark.parametrize("text, where", [
    ("# id: 1\n# intent: x\n# lang: EN\na\tO\n", "line 2"),
    ("# id: 1\n# lang: EN\n# intent: x\na\tX-foo\n", "line 4"),
    ("# id: 1\n# lang: EN\n", "line 1"),
])
def test_parse_errors(text, where):
    with pytest.raises(CorpusError, match=where):
        parse_corpus_file(text)


def test_serialize_basic():
    assert serialize_corpus(Corpus()) == ""
    c = Corpus((utt(1, "EN", ["a", "b"], ["B-x", "I-x"]), utt(1, "DE", ["c"])))
    text = serialize_corpus(c)
    assert text.count("# id:") == 2
    assert text.index("# lang: EN") < text.index("# lang: DE")
    assert parse_corpus_file(text) == c


_word = st.text(alphabet="abcdefghijKLMNO0123_.é", min_size=1, max_size=6)
_tag = st.one_of(st.just("O"), st.builds(lambda p, n: f"{p}-{n}", st.sampled_from("BI"), st.sampled_from(["x", "y_z"])))


@st.composite
def corpora(draw):
    n = draw(st.integers(0, 5))
    out = []
    for i in range(n):
        length = draw(st.integers(1, 5))
        out.append(Utterance(draw(_word) + str(i), draw(st.sampled_from(["EN", "DE"])), draw(_word),
                             draw(st.lists(_word, min_size=length, max_size=length)),
                             draw(st.lists(_tag, min_size=length, max_size=length))))
    return Corpus(tuple(out))


@given(corpora())
def test_round_trip(c):
    assert parse_corpus_file(serialize_corpus(c)) == c


def test_utterance_invariants():
    with pytest.raises(CorpusError):
        utt(1, "EN", [])
    with pytest.raises(CorpusError):
        Utterance("1", "EN", "x", ["a"], ["O", "O"])
    with pytest.raises(CorpusError):
        Utterance("1", "EN", "x", ["a"], ["B_x"])
    with pytest.raises(CorpusError, match="duplicate"):
        Corpus((utt(1, "EN", ["a"]), utt(1, "EN", ["b"])))


def test_build_vocab_frequency_threshold():
    c = Corpus((utt(1, "EN", ["a", "a", "b"]),))
    assert set(build_vocab(c, 2).token_to_id) == {PAD, UNK, "a"}
    assert set(build_vocab(c, 1).token_to_id) == {PAD, UNK, "a", "b"}


def test_build_vocab_labels():
    c = Corpus((utt(1, "EN", ["a"], intent="city"), utt(2, "EN", ["b"], ["B-x"], intent="flight")))
    v = build_vocab(c, 5)
    assert len(v.intent_to_id) == 2
    assert v.slot_to_id["O"] == 0 and "B-x" in v.slot_to_id
    assert v.token_id("zzz") == 1
    with pytest.raises(CorpusError):
        build_vocab(Corpus(), 1)
    with pytest.raises(CorpusError):
        build_vocab(c, 0)


def test_project_and_filter():
    p = parallel(3)
    mixed = Corpus((p.groups["0"]["EN"], p.groups["1"]["DE"]))
    de = project_monolingual(p, mixed, "DE")
    assert [(u.id, u.language) for u in de] == [("0", "DE"), ("1", "DE")]
    all_de = p.monolingual("DE")
    assert project_monolingual(p, all_de, "DE") == all_de
    with pytest.raises(CorpusError, match="'9'"):
        project_monolingual(p, Corpus((utt(9, "EN", ["q"]),)), "DE")
    assert len(filter_language(mixed, "EN")) == 1
    assert len(filter_language(mixed, "ES")) == 0
    en = p.monolingual("EN")
    assert filter_language(en, "EN") == en


def test_filter_balanced_corpus():
    p = parallel(100)
    mixed = build_multilingual_split(p, SplitSpec({"EN": 0.5, "DE": 0.5}, seed=3))
    assert len(filter_language(mixed, "EN")) == 50


def test_split_sizes_from_paper_counts():
    assert split_sizes(4488, {"EN": 1 / 3, "DE": 1 / 3, "ES": 1 / 3}) == {"EN": 1496, "DE": 1496, "ES": 1496}
    assert split_sizes(4488, {"EN": 0.5, "DE": 0.33, "ES": 0.17}) == {"EN": 2244, "DE": 1481, "ES": 763}


def test_split_degenerate_and_errors():
    p = parallel(10)
    assert build_multilingual_split(p, SplitSpec({"EN": 1.0})) == p.monolingual("EN")
    with pytest.raises(CorpusError):
        SplitSpec({"EN": 0.5, "DE": 0.4})
    with pytest.raises(CorpusError):
        build_multilingual_split(p, SplitSpec({"JA": 1.0}))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.floats(0, 1), st.integers(0, 2 ** 32 - 1))
def test_split_partition(n, f, seed):
    p = parallel(n, ("EN", "DE", "ES"))
    spec = SplitSpec({"EN": f, "DE": (1 - f) / 2, "ES": 1 - f - (1 - f) / 2}, seed)
    D = build_multilingual_split(p, spec)
    assert sorted(u.id for u in D) == sorted(p.ids)
    sizes = split_sizes(n, spec.fractions)
    for lang in p.languages:
        d = filter_language(D, lang)
        assert len(d) == sizes[lang]
        Dl = project_monolingual(p, D, lang)
        assert len(Dl) == len(D) and all(u.language == lang for u in Dl)
    assert sum(len(filter_language(D, l)) for l in p.languages) == len(D)


def test_generator_contract():
    p = generate_synthetic_parallel(1, ["L1", "L2"], 0)
    (group,) = p.groups.values()
    a, b = group["L1"], group["L2"]
    assert a.intent == b.intent
    assert Counter(s for s in a.slots if s != "O") == Counter(s for s in b.slots if s != "O")


def test_generator_deterministic():
    a = generate_synthetic_parallel(50, ["L1", "L2"], 11)
    b = generate_synthetic_parallel(50, ["L1", "L2"], 11)
    c = generate_synthetic_parallel(50, ["L1", "L2"], 12)
    assert a.groups == b.groups
    assert a.groups != c.groups


def test_generator_label_inventory():
    p = generate_synthetic_parallel(600, ["L1", "L2", "L3"], 5, GrammarConfig(n_intents=3, n_slot_types=4))
    intents = {u.intent for g in p.groups.values() for u in g.values()}
    labels = {c.label for g in p.groups.values() for u in g.values() for c in extract_chunks(u.slots)}
    assert len(intents) == 3
    assert len(labels) <= 4
    for g in p.groups.values():
        chunk_labels = [Counter(c.label for c in extract_chunks(u.slots)) for u in g.values()]
        assert all(x == chunk_labels[0] for x in chunk_labels)


def test_generator_lexicons():
    p = generate_synthetic_parallel(300, ["L1", "L2"], 3)
    func = {l: {t for u in p.monolingual(l) for t, s in zip(u.tokens, u.slots) if s == "O"} for l in p.languages}
    vals = {l: {t for u in p.monolingual(l) for t, s in zip(u.tokens, u.slots) if s != "O"} for l in p.languages}
    assert not func["L1"] & func["L2"]
    shared = vals["L1"] & vals["L2"]
    assert shared and shared != vals["L1"]


def test_generator_rejects_bad_args():
    with pytest.raises(CorpusError):
        generate_synthetic_parallel(0, ["L1", "L2"], 0)
    with pytest.raises(CorpusError):
        generate_synthetic_parallel(3, ["L1"], 0)


def test_parallel_directory_round_trip(tmp_path):
    p = generate_synthetic_parallel(20, ["L1", "L2"], 1)
    write_parallel(p, tmp_path)
    q = read_parallel(tmp_path)
    assert q.groups == p.groups and set(q.languages) == {"L1", "L2"}


def test_holdout_split_partitions_ids():
    p = parallel(100)
    tr, dv, te = holdout_split(p, 0.1, 0.1, 0)
    assert (len(tr.groups), len(dv.groups), len(te.groups)) == (80, 10, 10)
    assert set(tr.ids) | set(dv.ids) | set(te.ids) == set(p.ids)
