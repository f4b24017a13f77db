from hypothesis import given
from hypothesis import strategies as st

from kformer.text import SPECIALS, Vocabulary, tokenize


def test_tokenize_lowercases_and_splits():
    assert tokenize("Hello, World! x2-y") == ["hello", "world", "x2", "y"]
    assert tokenize("  ") == []


def test_specials_take_first_ids():
    v = Vocabulary(["b", "a", "b"])
    assert v.itos[:4] == list(SPECIALS)
    assert (v.cls_id, v.sep_id) == (2, 3)
    assert v.itos[4:] == ["b", "a"]


def test_unknown_words_map_to_unk():
    v = Vocabulary.from_texts(["red fox"])
    assert v.decode(v.encode("red cat")) == ["red", "[UNK]"]


@given(st.lists(st.text(alphabet="abcxyz ", max_size=20), max_size=5))
def test_from_texts_is_order_independent(texts):
    a, b = Vocabulary.from_texts(texts), Vocabulary.from_texts(list(reversed(texts)))
    assert a.itos == b.itos
    for t in texts:
        assert a.decode(a.encode(t)) == tokenize(t)
