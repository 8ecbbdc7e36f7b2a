import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualsub.text import (
    EOB,
    EOL,
    SPECIALS,
    TOY_LEXICON,
    TOY_WORDS,
    Triplet,
    Vocab,
    add_target_tag,
    concat_sample,
    generate_toy_corpus,
    join_group,
    learn_bpe,
    learn_merges,
    make_synthetic_triparallel,
    parse_blocks,
    read_triparallel,
    remove_disfluencies,
    strip_segment_tags,
    strip_target_tag,
    toy_triplet,
    write_triparallel,
)

CLASSIC = {"low": 5, "lower": 2, "newest": 6, "widest": 3}
# merge sequence traced by hand: pair counts are recomputed after every merge,
# ties go to the lexicographically smallest pair
CLASSIC_MERGES = [
    ("e", "s"), ("es", "t</w>"), ("l", "o"), ("e", "w"), ("ew", "est</w>"), ("n", "ewest</w>"),
    ("lo", "w</w>"), ("d", "est</w>"), ("i", "dest</w>"), ("w", "idest</w>"), ("e", "r</w>"),
    ("lo", "w"), ("low", "er</w>"),
]


def classic_corpus():
    return [w for w, n in CLASSIC.items() for _ in range(n)]


def test_classic_merge_trace():
    assert learn_merges(CLASSIC, 13) == CLASSIC_MERGES
    assert learn_merges(CLASSIC, 100) == CLASSIC_MERGES


def test_classic_segmentation_of_lower():
    vocab = learn_bpe(classic_corpus(), 10)
    assert vocab.merges == CLASSIC_MERGES[:10]
    assert vocab.tokenize("lower") == ["lo@@", "w@@", "e@@", "r"]
    assert vocab.tokenize("newest lowest") == ["newest", "lo@@", "w@@", "est"]


def test_single_characters_have_no_merges():
    assert learn_merges({"a": 3, "b": 1, "c": 2}, 5) == []


def test_frequency_argmax_first():
    assert learn_merges({"aaab": 10}, 1) == [("a", "a")]


def test_negative_merges_rejected():
    with pytest.raises(ValueError):
        learn_bpe(["a b"], -1)
    with pytest.raises(ValueError):
        learn_bpe(["   "], 3)


def test_specials_and_tags_are_atomic():
    vocab = learn_bpe(["hello [eob] world [eol] again"], 20)
    assert vocab.tokens[: len(SPECIALS)] == list(SPECIALS)
    assert vocab.encode("[eob]") == [vocab.index["[eob]"]]
    assert vocab.encode("<2cap> hello")[0] == vocab.tag_id("caption")
    assert vocab.decode(vocab.encode("hello [eob]")) == "hello [eob]"


def test_unknown_characters_map_to_unk():
    vocab = learn_bpe(["abc"], 0)
    assert vocab.encode("ax") == [vocab.index["a@@"], vocab.unk_id]


def test_vocab_save_load(tmp_path):
    vocab = learn_bpe([t.caption for t in generate_toy_corpus(30, np.random.default_rng(0))], 200)
    vocab.save(tmp_path / "v.txt")
    again = Vocab.load(tmp_path / "v.txt")
    assert again.tokens == vocab.tokens and again.merges == vocab.merges and again.hash == vocab.hash
    (tmp_path / "bad.txt").write_text("nonsense\n")
    with pytest.raises(ValueError):
        Vocab.load(tmp_path / "bad.txt")


def test_bpe_deterministic():
    corpus = [t.subtitle for t in generate_toy_corpus(40, np.random.default_rng(3))]
    assert learn_bpe(corpus, 150).merges == learn_bpe(corpus, 150).merges


@settings(max_examples=60, deadline=None)
@given(st.lists(st.text(alphabet="abcdéf .,:!?'[]", min_size=0, max_size=30), min_size=1, max_size=5))
def test_roundtrip_on_whitespace_normalised_text(lines):
    vocab = learn_bpe(lines + ["abc"], 40)
    for line in lines:
        normal = " ".join(line.split())
        assert vocab.decode(vocab.encode(line)) == normal


def test_target_tags():
    assert add_target_tag([], "caption") == ["<2cap>"]
    tagged = add_target_tag(["a", "b"], "subtitle")
    assert tagged == ["<2sub>", "a", "b"]
    assert strip_target_tag(tagged) == ["a", "b"]
    with pytest.raises(ValueError):
        add_target_tag(tagged, "caption")


def test_parse_blocks_semantics():
    s = parse_blocks("a b [eol] c [eob] d [eob]")
    assert s.blocks == [["a b", "c"], ["d"]] and s.well_formed
    assert s.serialize() == "a b [eol] c [eob] d [eob]"


def test_parse_blocks_table1_style_caption():
    caption = "Always write down your values [eob] objectives and key results [eol] to your team. [eob]"
    s = parse_blocks(caption)
    assert s.n_blocks == 2 and len(s.blocks[1]) == 2


def test_parse_blocks_malformed_tail():
    s = parse_blocks("a [eob] b c")
    assert not s.well_formed and s.blocks == [["a"], ["b c"]]
    assert parse_blocks("").n_blocks == 0


@settings(max_examples=80, deadline=None)
@given(st.lists(st.lists(st.lists(st.sampled_from(["x", "yy", "z."]), min_size=1, max_size=3),
                         min_size=1, max_size=3), min_size=1, max_size=4))
def test_serialize_parse_roundtrip(blocks):
    text = " ".join(f" {EOL} ".join(" ".join(line) for line in block) + f" {EOB}" for block in blocks)
    assert parse_blocks(text).serialize() == text


def test_concat_sample_degenerate_sigma():
    groups = concat_sample(list(range(7)), np.random.default_rng(0), sigma=0.0)
    assert [len(g) for g in groups] == [2, 2, 2, 1]


def test_concat_sample_mean_and_conservation():
    sents = [f"s{i} w" for i in range(10000)]
    groups = concat_sample(sents, np.random.default_rng(0))
    sizes = [len(g) for g in groups]
    assert 1.8 <= np.mean(sizes) <= 2.2
    assert min(sizes) >= 1 and max(sizes) <= 5
    assert [s for g in groups for s in g] == sents
    joined = [join_group(g) for g in groups]
    assert sum(len(j.split()) for j in joined) == 2 * len(sents)
    with pytest.raises(ValueError):
        concat_sample([], np.random.default_rng(0))


def test_synthetic_triparallel_with_oracle_models():
    data = generate_toy_corpus(6, np.random.default_rng(0))
    by_src = {t.transcript: t for t in data}
    out, skipped = make_synthetic_triparallel(
        data, lambda x: by_src[x].caption, lambda x: by_src[x].subtitle)
    assert skipped == 0 and len(out) == 12
    assert out == [t for t in data for _ in range(2)]


def test_synthetic_replaces_one_side_each():
    data = generate_toy_corpus(3, np.random.default_rng(0))
    out, _ = make_synthetic_triparallel(data, lambda x: "CAP", lambda x: "SUB")
    assert out[0] == Triplet(data[0].transcript, "CAP", data[0].subtitle)
    assert out[1] == Triplet(data[0].transcript, data[0].caption, "SUB")
    assert [t.transcript for t in out[::2]] == [t.transcript for t in data]


def test_synthetic_skips_failures():
    data = generate_toy_corpus(3, np.random.default_rng(0))

    def flaky(x):
        if x == data[1].transcript:
            raise ValueError("decode failed")
        return "ok"

    out, skipped = make_synthetic_triparallel(data, flaky, flaky)
    assert skipped == 1 and len(out) == 4


def test_toy_vocabulary_and_lexicon():
    assert len(TOY_WORDS) == 50 == len(set(TOY_WORDS))
    assert len(set(TOY_LEXICON.values())) == 50


def test_toy_rule_application_without_fillers():
    words = ["we", "see", "people"]
    t = toy_triplet(words, words)
    assert t.caption == "We see people. [eob]"
    assert t.subtitle == "Nous voir gens. [eob]"


def test_toy_line_and_block_rule():
    words = TOY_WORDS[:13]
    t = toy_triplet(words, words)
    blocks = parse_blocks(t.caption).blocks
    assert [len(b) for b in blocks] == [2, 1]
    assert all(len(line.split()) <= 6 for b in blocks for line in b)


def test_toy_corpus_properties():
    data = generate_toy_corpus(300, np.random.default_rng(5))
    for t in data:
        assert parse_blocks(t.caption).n_blocks == parse_blocks(t.subtitle).n_blocks
        assert t.caption.endswith("[eob]") and t.subtitle.endswith("[eob]")
        assert "[e" not in t.transcript
        plain = re.sub(r"[.]", "", strip_segment_tags(t.caption)).lower()
        assert " ".join(plain.split()) == remove_disfluencies(t.transcript)
    assert any("uh" in t.transcript.split() or "um" in t.transcript.split() for t in data)
    assert generate_toy_corpus(5, np.random.default_rng(9)) == generate_toy_corpus(5, np.random.default_rng(9))


def test_triparallel_files(tmp_path):
    data = generate_toy_corpus(4, np.random.default_rng(0))
    write_triparallel(tmp_path / "c", data)
    assert (tmp_path / "c.caption").read_text().count("\n") == 4
    assert read_triparallel(tmp_path / "c") == data
    (tmp_path / "c.subtitle").write_text("only one\n")
    with pytest.raises(ValueError):
        read_triparallel(tmp_path / "c")
