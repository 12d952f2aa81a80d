import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shared_ape.corpus import (AlignmentError, Corpus, CorpusFormatError, Origin, Triplet, epoch_order,
                               load_parallel_files, load_split, oversample_and_merge, write_parallel_files)


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


@pytest.fixture
def split(tmp_path):
    write(tmp_path / "d.src", "the cat\na dog runs\nhello\n")
    write(tmp_path / "d.mt", "die Katze\nein Hund lauft\nhallo\n")
    write(tmp_path / "d.pe", "die Katze\nein Hund läuft\nhallo\n")
    return tmp_path / "d"


def corpus_of(n, origin=Origin.OFFICIAL, name="c"):
    return Corpus(tuple(Triplet((f"s{i}",), (f"m{i}",), (f"p{i}",), origin) for i in range(n)), name)


def test_load_three_lines(split):
    corpus = load_split(split)
    assert len(corpus) == 3
    assert corpus[1].src == ("a", "dog", "runs")
    assert corpus[1].pe == ("ein", "Hund", "läuft")
    assert all(t.origin is Origin.OFFICIAL for t in corpus)


def test_load_without_trailing_newline(tmp_path):
    for side in ("src", "mt", "pe"):
        write(tmp_path / f"x.{side}", "a b\nc")
    assert len(load_split(tmp_path / "x")) == 2


def test_alignment_error_names_file(split):
    write(split.with_suffix(".pe"), "die Katze\nein Hund\n")
    with pytest.raises(AlignmentError, match=r"d\.pe"):
        load_split(split)


def test_alignment_error_names_first_divergent_file(split):
    write(split.with_suffix(".mt"), "x\n")
    write(split.with_suffix(".pe"), "x\n")
    with pytest.raises(AlignmentError, match=r"d\.mt"):
        load_split(split)


def test_empty_line_cites_line_number(split):
    write(split.with_suffix(".mt"), "die Katze\n\nhallo\n")
    with pytest.raises(CorpusFormatError, match=r"d\.mt:2"):
        load_split(split)


def test_double_space_rejected(split):
    write(split.with_suffix(".src"), "the  cat\na dog runs\nhello\n")
    with pytest.raises(CorpusFormatError, match="single spaces"):
        load_split(split)


def test_tab_rejected(split):
    write(split.with_suffix(".src"), "the\tcat\na dog runs\nhello\n")
    with pytest.raises(CorpusFormatError, match=":1"):
        load_split(split)


def test_origin_is_recorded(split):
    corpus = load_parallel_files(f"{split}.src", f"{split}.mt", f"{split}.pe", Origin.ARTIFICIAL)
    assert {t.origin for t in corpus} == {Origin.ARTIFICIAL}


def test_triplet_invariants():
    with pytest.raises(CorpusFormatError):
        Triplet((), ("a",), ("b",))
    with pytest.raises(CorpusFormatError):
        Triplet(("a\tb",), ("a",), ("b",))
    assert Triplet.from_strings("a b", "c", "d").src == ("a", "b")


def test_round_trip_byte_for_byte(split, tmp_path):
    corpus = load_split(split)
    out = tmp_path / "copy"
    write_parallel_files(corpus, out)
    for side in ("src", "mt", "pe"):
        assert (tmp_path / f"copy.{side}").read_bytes() == split.with_suffix(f".{side}").read_bytes()


tok = st.text(alphabet=st.characters(blacklist_categories=("Cs", "Zs", "Zl", "Zp", "Cc")), min_size=1, max_size=5)
sent = st.lists(tok, min_size=1, max_size=5)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(sent, sent, sent), min_size=1, max_size=5))
def test_round_trip_property(tmp_path_factory, rows):
    corpus = Corpus(tuple(Triplet(tuple(a), tuple(b), tuple(c)) for a, b, c in rows))
    prefix = tmp_path_factory.mktemp("rt") / "x"
    write_parallel_files(corpus, prefix)
    back = load_split(prefix)
    assert back.triplets == corpus.triplets


def test_oversample_examples():
    assert len(oversample_and_merge(corpus_of(2), corpus_of(1, Origin.ARTIFICIAL), 3)) == 7
    official = corpus_of(4)
    same = oversample_and_merge(official, corpus_of(0), 1)
    assert same.triplets == official.triplets


def test_oversample_full_scale():
    # 23K official triplets resampled 10 times plus 500K artificial ones
    official = corpus_of(23000)
    artificial = corpus_of(500000, Origin.ARTIFICIAL)
    merged = oversample_and_merge(official, artificial, 10)
    assert len(merged) == 730000


def test_oversample_shares_references_and_tags():
    official, artificial = corpus_of(2), corpus_of(3, Origin.ARTIFICIAL)
    merged = oversample_and_merge(official, artificial, 4)
    assert merged[0] is merged[2] is official[0]
    assert sum(t.origin is Origin.OFFICIAL for t in merged) == 8
    assert sum(t.origin is Origin.ARTIFICIAL for t in merged) == 3


@pytest.mark.parametrize("factor", [0, -1, 1.5])
def test_oversample_bad_factor(factor):
    with pytest.raises(ValueError):
        oversample_and_merge(corpus_of(1), corpus_of(0), factor)


@given(st.integers(0, 20), st.integers(1, 5), st.integers(0, 20))
def test_oversample_length_law(n_off, factor, n_art):
    assert len(oversample_and_merge(corpus_of(n_off), corpus_of(n_art), factor)) == n_off * factor + n_art


def test_epoch_order_examples():
    assert list(epoch_order(corpus_of(1), 123)) == [0]
    a, b = epoch_order(corpus_of(5), 7), epoch_order(corpus_of(5), 7)
    np.testing.assert_array_equal(a, b)
    assert sorted(a.tolist()) == [0, 1, 2, 3, 4]


@given(st.integers(1, 200), st.integers(0, 2 ** 32 - 1))
def test_epoch_order_bijection(n, seed):
    order = epoch_order(range(n), seed)
    assert sorted(order.tolist()) == list(range(n))


def test_epoch_order_empty():
    with pytest.raises(ValueError):
        epoch_order(corpus_of(0), 0)
