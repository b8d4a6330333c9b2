import json

import numpy as np
import pytest

from divdec.corpus import (
    EOS,
    DASchema,
    Dataset,
    DialogueAct,
    Instance,
    MeaningRepresentation,
    ReferenceIndex,
    Vocab,
    default_grammar,
    encode_mr,
    generate_corpus,
    load_dataset,
    parse_grammar,
    references_for,
    save_dataset,
)
from divdec.errors import ConfigError, ParseError, SchemaError

TINY_GRAMMAR = """
act hello
template (hi|hey) there .
template good (morning|evening) .
template greetings .

act name
slot rest-name
template it is called [rest-name] .
template the name is [rest-name] .
template (we|i) suggest [rest-name] .

act close
template (bye|goodbye) .
template see you .
template farewell .
"""


def mr_of(*acts):
    return MeaningRepresentation(tuple(acts))


# -- grammar -------------------------------------------------------------------


def test_default_grammar_minimums(grammar):
    assert len(grammar.acts) >= 3
    assert len(grammar.attributes()) >= 8
    for act in grammar.acts:
        assert len(act.templates) >= 3
    assert len(Vocab.from_grammar(grammar)) <= 300


def test_grammar_zero_templates_is_config_error():
    with pytest.raises(ConfigError, match="no templates"):
        parse_grammar("act lonely\n")


def test_grammar_placeholder_must_appear_once():
    bad = "act a\nslot x\ntemplate hello there .\n"
    with pytest.raises(ConfigError, match="exactly once"):
        parse_grammar(bad)


def test_grammar_parse_errors_carry_line_numbers():
    with pytest.raises(ParseError, match="line 1"):
        parse_grammar("bogus directive\n")
    with pytest.raises(ParseError, match="line 2"):
        parse_grammar("act a\ntemplate broken (a|b\n")


def test_template_alternation_expansion():
    g = parse_grammar(TINY_GRAMMAR)
    hello = g.acts[0]
    surfaces = {tuple(r) for t in hello.templates for r in t.all_realizations()}
    assert ("hi", "there", ".") in surfaces
    assert ("good", "evening", ".") in surfaces
    assert ("greetings", ".") in surfaces


# -- generation ----------------------------------------------------------------


def test_generate_zero_sizes():
    g = parse_grammar(TINY_GRAMMAR)
    train, val, test = generate_corpus(g, seed=1, sizes=(0, 0, 0))
    assert len(train) == len(val) == len(test) == 0


def test_generate_deterministic(tmp_path):
    g = parse_grammar(TINY_GRAMMAR)
    a = generate_corpus(g, seed=9, sizes=(50, 10, 10))
    b = generate_corpus(g, seed=9, sizes=(50, 10, 10))
    for ds_a, ds_b, name in zip(a, b, ("train", "val", "test")):
        pa, pb = tmp_path / f"a_{name}", tmp_path / f"b_{name}"
        save_dataset(ds_a, pa)
        save_dataset(ds_b, pb)
        assert pa.read_bytes() == pb.read_bytes()


def test_generate_references_end_with_eos():
    g = parse_grammar(TINY_GRAMMAR)
    train, _, _ = generate_corpus(g, seed=2, sizes=(30, 0, 0))
    for inst in train.instances:
        assert inst.ref[-1] == EOS


def test_default_corpus_reference_diversity(grammar):
    train, _, _ = generate_corpus(grammar, seed=7, sizes=(3000, 300, 300))
    groups = train.by_mr()
    mean_refs = np.mean([len({i.ref for i in v}) for v in groups.values()])
    assert mean_refs >= 2.0


# -- encoding ------------------------------------------------------------------


def test_encode_single_slotless_act(grammar):
    schema = DASchema.from_grammar(grammar)
    vec = encode_mr(mr_of(DialogueAct("welcome")), schema)
    assert vec.sum() == 1.0
    assert vec[schema.index[("welcome",)]] == 1.0


def test_encode_union_is_elementwise_max(grammar):
    schema = DASchema.from_grammar(grammar)
    a = mr_of(DialogueAct("welcome"))
    b = mr_of(DialogueAct("inform-name", (("rest-name", "[rest-name]"),)))
    both = mr_of(a.acts[0], b.acts[0])
    np.testing.assert_array_equal(
        encode_mr(both, schema), np.maximum(encode_mr(a, schema), encode_mr(b, schema))
    )


def test_encode_positions_match_schema_file(grammar, tmp_path):
    schema = DASchema.from_grammar(grammar)
    schema.save(tmp_path / "schema.json")
    loaded = DASchema.load(tmp_path / "schema.json")
    mr = mr_of(
        DialogueAct("inform-name", (("rest-name", "[rest-name]"),)),
        DialogueAct("request-food", (("food", "?"),)),
    )
    vec = encode_mr(mr, loaded)
    expected = {
        loaded.index[("inform-name",)],
        loaded.index[("inform-name", "rest-name")],
        loaded.index[("request-food",)],
        loaded.index[("request-food", "food")],
    }
    assert {int(i) for i in np.flatnonzero(vec)} == expected


def test_encode_unknown_act_raises(grammar):
    schema = DASchema.from_grammar(grammar)
    with pytest.raises(SchemaError):
        encode_mr(mr_of(DialogueAct("nope")), schema)
    with pytest.raises(SchemaError):
        encode_mr(mr_of(DialogueAct("welcome", (("food", "x"),))), schema)


def test_encode_permutation_invariant(grammar):
    from itertools import permutations

    schema = DASchema.from_grammar(grammar)
    acts = [
        DialogueAct("welcome"),
        DialogueAct("inform-name", (("rest-name", "[rest-name]"),)),
        DialogueAct("bye"),
    ]
    base = encode_mr(mr_of(*acts), schema)
    for order in permutations(range(3)):
        shuffled = encode_mr(mr_of(*(acts[i] for i in order)), schema)
        np.testing.assert_array_equal(base, shuffled)


# -- vocab ----------------------------------------------------------------------


def test_vocab_bijection_and_reserved(tmp_path, grammar):
    vocab = Vocab.from_grammar(grammar)
    assert vocab.bos_id == 0 and vocab.eos_id == 1 and vocab.unk_id == 2
    for tok in ("[rest-name]", "welcome", "."):
        assert vocab.token(vocab.id(tok)) == tok
    assert vocab.id("never-seen-token") == vocab.unk_id
    vocab.save(tmp_path / "v.txt")
    loaded = Vocab.load(tmp_path / "v.txt")
    assert loaded.tokens() == vocab.tokens()
    assert loaded.placeholder_ids() == vocab.placeholder_ids()


# -- dataset IO -------------------------------------------------------------------


def test_dataset_roundtrip(tmp_path):
    g = parse_grammar(TINY_GRAMMAR)
    train, _, _ = generate_corpus(g, seed=3, sizes=(25, 0, 0))
    path = tmp_path / "ds.jsonl"
    save_dataset(train, path)
    loaded = load_dataset(path, split="train")
    assert len(loaded) == len(train)
    for a, b in zip(loaded.instances, train.instances):
        assert a.ref == b.ref
        assert a.mr.key() == b.mr.key()


def test_load_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert len(load_dataset(path)) == 0


def test_load_malformed_line_reports_number(tmp_path):
    path = tmp_path / "bad.jsonl"
    rec = {"mr": [{"act": "hello", "slots": []}], "ref": "hi there ."}
    path.write_text(json.dumps(rec) + "\n{not json\n")
    with pytest.raises(ParseError, match="line 2"):
        load_dataset(path)


FIXTURE5 = [
    {"mr": [{"act": "hello", "slots": []}], "ref": "hi there ."},
    {"mr": [{"act": "name", "slots": [{"attr": "rest-name", "value": "[rest-name]"}]}],
     "ref": "it is called [rest-name] ."},
    {"mr": [{"act": "hello", "slots": []}, {"act": "close", "slots": []}],
     "ref": "greetings . bye ."},
    {"mr": [{"act": "close", "slots": []}], "ref": "see you ."},
    {"mr": [{"act": "hello", "slots": []}], "ref": "good morning ."},
]


def test_fixture_file_known_values(tmp_path):
    path = tmp_path / "fix.jsonl"
    path.write_text("\n".join(json.dumps(r) for r in FIXTURE5) + "\n")
    ds = load_dataset(path)
    assert len(ds) == 5
    assert ds.instances[0].ref == ("hi", "there", ".", EOS)
    assert ds.instances[1].mr.acts[0].slots == (("rest-name", "[rest-name]"),)
    assert ds.instances[2].mr.acts[1].act == "close"
    assert ds.instances[1].mr.required_placeholders() == ("[rest-name]",)


# -- reference index -----------------------------------------------------------------


def build_fixture_dataset():
    insts = []
    for rec in FIXTURE5:
        mr = MeaningRepresentation.from_obj(rec["mr"])
        insts.append(Instance(mr, tuple(rec["ref"].split()) + (EOS,)))
    return Dataset(insts, split="train")


def test_index_superset_guarantee():
    ds = build_fixture_dataset()
    index = ReferenceIndex.build(ds)
    mr = ds.instances[0].mr  # plain [hello]
    lookup = references_for(mr, index)
    own = {i.ref for i in ds.instances if i.mr.key() == mr.key()}
    assert own <= set(lookup.refs)


def test_index_union_matches_linear_scan():
    ds = build_fixture_dataset()
    index = ReferenceIndex.build(ds)
    mr = MeaningRepresentation.from_obj(
        [{"act": "hello", "slots": []}, {"act": "close", "slots": []}]
    )
    lookup = references_for(mr, index)
    keys = set(mr.decomposition_keys())
    expected = {
        inst.ref
        for inst in ds.instances
        if keys & set(inst.mr.decomposition_keys())
    }
    assert set(lookup.refs) == expected
    assert lookup.missing_keys == ()


def test_missing_key_is_flagged_not_fatal():
    ds = build_fixture_dataset()
    index = ReferenceIndex.build(ds)
    mr = MeaningRepresentation.from_obj(
        [{"act": "hello", "slots": []}, {"act": "unseen-act", "slots": []}]
    )
    lookup = references_for(mr, index)
    assert ("unseen-act",) in lookup.missing_keys
    assert lookup.refs  # hello references still returned


def test_cap_subsample_is_deterministic_and_keeps_own_refs(grammar):
    train, _, _ = generate_corpus(grammar, seed=5, sizes=(400, 0, 0))
    index = ReferenceIndex.build(train)
    mr = train.instances[0].mr
    full = references_for(mr, index, cap=10**9, seed=1)
    capped_a = references_for(mr, index, cap=20, seed=1)
    capped_b = references_for(mr, index, cap=20, seed=1)
    assert len(full.refs) > 20 and len(capped_a.refs) == 20 and capped_a.capped
    assert capped_a.refs == capped_b.refs
    own = set(index.by_mr[mr.key()])
    if len(own) <= 20:
        assert own <= set(capped_a.refs)
