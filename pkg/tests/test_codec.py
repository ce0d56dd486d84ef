import random
import warnings

import pytest
from hypothesis import given, strategies as st

from conftest import random_page
from textlayout.codec import (ALPHABET, EncodingError, GlobalSequence, MalformedSequenceError,
                              UnterminatedWordWarning, Vocabulary, WordBox, compression_ratio,
                              decode_sequence, encode_document, flattened_length, reading_order,
                              sequence_from_text, sequence_to_text)
from textlayout.geometry import BBox


def test_tokenize_single_and_round_trip(vocab):
    assert vocab.tokenize_word("a") == [vocab.id("a")]
    ids = vocab.tokenize_word("cat")
    assert len(ids) == 3
    assert vocab.detokenize(ids) == "cat"


def test_out_of_alphabet(vocab):
    with pytest.raises(EncodingError):
        vocab.tokenize_word("héllo")


@given(st.text(alphabet=ALPHABET, min_size=1, max_size=30))
def test_tokenize_length_property(word):
    vocab = Vocabulary()
    ids = vocab.tokenize_word(word)
    assert len(ids) == len(word)
    assert vocab.detokenize(ids) == word


def test_vocabulary_manifest_round_trip(vocab):
    text = vocab.to_text()
    assert Vocabulary.from_text(text) == vocab
    assert text.count("\t[LOC]\n") == 1
    assert len(vocab) == len(set(vocab.token(i) for i in range(len(vocab))))


def test_encode_single_word(vocab):
    seq = encode_document([WordBox("hi", BBox(0, 0, 100, 100))], vocab)
    assert seq.tokens == [vocab.id("h"), vocab.id("i"), vocab.loc]
    assert seq.loc_targets == {2: (0, 0, 100, 100)}


def test_encode_two_words_has_two_locs(vocab):
    seq = encode_document([WordBox("a", BBox(0, 0, 1, 1)), WordBox("bc", BBox(2, 2, 3, 3))], vocab)
    assert seq.tokens.count(vocab.loc) == 2
    assert len(seq.loc_targets) == 2


def test_encode_empty(vocab):
    with pytest.raises(EncodingError):
        encode_document([], vocab)


def test_decode_examples(vocab):
    seq = GlobalSequence([vocab.id("h"), vocab.id("i"), vocab.loc], {2: (0, 0, 100, 100)})
    assert decode_sequence(seq, vocab) == [WordBox("hi", BBox(0, 0, 100, 100))]
    with pytest.raises(MalformedSequenceError):
        decode_sequence(GlobalSequence([vocab.loc], {0: (0, 0, 1, 1)}), vocab)


def test_decode_reports_unterminated_word(vocab):
    seq = GlobalSequence([vocab.id("h"), vocab.loc, vocab.id("x")], {1: (0, 0, 1, 1)})
    diags = []
    words = decode_sequence(seq, vocab, diags)
    assert [w.word for w in words] == ["h"]
    assert diags and diags[0]["kind"] == "unterminated-word" and diags[0]["text"] == "x"
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        decode_sequence(seq, vocab)
    assert any(issubclass(w.category, UnterminatedWordWarning) for w in caught)


def test_decode_rejects_stray_special(vocab):
    with pytest.raises(MalformedSequenceError):
        decode_sequence(GlobalSequence([vocab.bos]), vocab)


def test_round_trip_random_pages(vocab):
    rng = random.Random(20)
    for _ in range(200):
        page = random_page(rng)
        seq = encode_document(page, vocab)
        assert decode_sequence(seq, vocab) == page
        seq.validate(vocab)


def test_token_count_and_compression_ratio(vocab):
    rng = random.Random(21)
    for _ in range(100):
        page = random_page(rng)
        seq = encode_document(page, vocab)
        assert len(seq) == sum(len(w.word) + 1 for w in page)
        assert compression_ratio(page, vocab) == len(seq) / flattened_length(page, vocab)


def test_compression_ratio_examples(vocab):
    box = BBox(0, 0, 1, 1)
    assert compression_ratio([WordBox("ab", box), WordBox("cd", box)], vocab) == 0.5
    assert compression_ratio([WordBox("abcdefgh", box)], vocab) == 0.75
    # mean length 1.77 tokens/word (77 two-char and 23 one-char words) lands on ~0.48
    words = [WordBox("ab", box)] * 77 + [WordBox("a", box)] * 23
    assert compression_ratio(words, vocab) == pytest.approx(0.48, abs=5e-4)


def test_no_coordinates_in_token_stream(vocab):
    page = random_page(random.Random(22), 10)
    seq = encode_document(page, vocab)
    assert all(vocab.is_char(t) or t == vocab.loc for t in seq.tokens)
    assert set(seq.loc_targets) == {i for i, t in enumerate(seq.tokens) if t == vocab.loc}


def test_text_format_round_trip(vocab):
    page = random_page(random.Random(23), 6)
    seq = encode_document(page, vocab)
    text = sequence_to_text(seq, vocab)
    assert text.splitlines()[len(page[0].word)] == "[LOC]\t" + " ".join(map(str, page[0].box.astuple()))
    back = sequence_from_text(text, vocab)
    assert back.tokens == seq.tokens and back.loc_targets == seq.loc_targets


def test_reading_order_row_major():
    h = 50
    words = [WordBox("c", BBox(10, 100, 40, 100 + h)), WordBox("b", BBox(500, 0, 540, h)),
             WordBox("a", BBox(10, 2, 40, 2 + h))]
    assert [w.word for w in reading_order(words)] == ["a", "b", "c"]
