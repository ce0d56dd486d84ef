import random
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from textlayout.codec import GlobalSequence, Vocabulary
from textlayout.segmenter import (ContinuityError, Mode, SegmentConfig, SegmentConfigError, dump_segments,
                                  next_prefix, reassemble, split, truncate, tuple_entry)

VOCAB = Vocabulary()
CHARS = [VOCAB.id(c) for c in "abcdefghij"]


def make_seq(n: int, rng: random.Random) -> GlobalSequence:
    """Random sequence of characters and [LOC]s with distinct coordinates."""
    tokens, locs = [], {}
    for i in range(n):
        if i > 0 and tokens[-1] != VOCAB.loc and rng.random() < 0.3:
            tokens.append(VOCAB.loc)
            x, y = rng.randint(0, 500), rng.randint(0, 500)
            locs[i] = (x, y, x + rng.randint(0, 500), y + rng.randint(0, 500))
        else:
            tokens.append(rng.choice(CHARS))
    return GlobalSequence(tokens, locs)


def numbered(n: int) -> GlobalSequence:
    # token k-1 stands for "token k" of the hand simulation; ids are only compared
    return GlobalSequence([1000 + k for k in range(1, n + 1)])


def ids(entries):
    return [t - 1000 for t, _ in entries]


def test_config_validation():
    with pytest.raises(SegmentConfigError):
        SegmentConfig(M=3)
    with pytest.raises(SegmentConfigError):
        SegmentConfig(M=10, alpha_p=0.25)
    with pytest.raises(SegmentConfigError):
        SegmentConfig(M=8, alpha_p=1.0)
    assert SegmentConfig(1024, 0.25).prefix_len == 256


def test_single_segment_with_eos_overflow():
    segs = split(numbered(8), SegmentConfig(8, 0.25), VOCAB)
    assert len(segs) == 1
    assert segs[0].mode is Mode.BEGINNING and segs[0].prefix == []
    assert ids(segs[0].targets[:-1]) == list(range(1, 9))
    assert segs[0].targets[-1] == (VOCAB.eos, None)
    assert len(segs[0].targets) == 9


def test_hand_simulation_len20_m8():
    cfg = SegmentConfig(8, 0.25)
    segs = split(numbered(20), cfg, VOCAB)
    assert len(segs) == cfg.num_segments(20) == 3
    assert ids(segs[0].targets) == list(range(1, 9))
    assert ids(segs[1].prefix) == [7, 8]
    assert ids(segs[1].targets) == list(range(9, 15))
    assert ids(segs[2].prefix) == [13, 14]
    assert ids(segs[2].targets[:-1]) == list(range(15, 21))
    assert segs[2].targets[-1][0] == VOCAB.eos
    assert segs[1].mode_token == VOCAB.cont and segs[0].mode_token == VOCAB.bos


def test_loss_mask_layout():
    segs = split(numbered(20), SegmentConfig(8, 0.25), VOCAB)
    mask = segs[1].loss_mask
    assert mask[:3] == [False, False, False]
    assert all(mask[3:])
    assert sum(sum(s.loss_mask) for s in segs) == 21


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 200), st.sampled_from([8, 16, 64]), st.integers(0, 10 ** 6))
def test_reassemble_inverts_split(n, M, seed):
    rng = random.Random(seed)
    seq = make_seq(n, rng)
    cfg = SegmentConfig(M, 0.25)
    segs = split(seq, cfg, VOCAB)
    assert len(segs) == cfg.num_segments(n)
    back = reassemble(segs, VOCAB)
    assert back.tokens == seq.tokens and back.loc_targets == seq.loc_targets
    # nothing dropped or duplicated
    flat = [t for s in segs for t, _ in s.targets]
    assert flat[-1] == VOCAB.eos and flat[:-1] == seq.tokens
    assert Counter(flat[:-1]) == Counter(seq.tokens)
    assert sum(sum(s.loss_mask) for s in segs) == n + 1
    for prev, cur in zip(segs, segs[1:]):
        assert [tuple_entry(e) for e in cur.prefix] == [tuple_entry(e) for e in prev.targets[-cfg.prefix_len:]]
        assert len(cur.prefix) == cfg.prefix_len
        assert len(cur.targets) <= cfg.stride + 1
    assert len(segs[0].targets) <= M + 1


def test_single_segment_reassemble():
    segs = split(numbered(5), SegmentConfig(8, 0.25), VOCAB)
    assert ids(reassemble(segs, VOCAB).entries()) == [1, 2, 3, 4, 5]


def test_tampered_prefix_detected():
    segs = split(numbered(20), SegmentConfig(8, 0.25), VOCAB)
    segs[1].prefix[0] = (999, None)
    with pytest.raises(ContinuityError):
        reassemble(segs, VOCAB)


def test_prefix_carries_coordinates():
    seq = GlobalSequence(CHARS[:7] + [VOCAB.loc] + CHARS[:4], {7: (1, 2, 3, 4)})
    segs = split(seq, SegmentConfig(8, 0.25), VOCAB)
    assert segs[1].prefix == [(CHARS[6], None), (VOCAB.loc, (1, 2, 3, 4))]


def test_next_prefix_window():
    segs = split(numbered(20), SegmentConfig(8, 0.25), VOCAB)
    assert ids(next_prefix(segs[0], SegmentConfig(8, 0.25))) == [7, 8]


def test_next_prefix_requires_targets():
    from textlayout.segmenter import Segment
    with pytest.raises(ValueError):
        next_prefix(Segment(Mode.BEGINNING, VOCAB.bos, [], []), SegmentConfig(8, 0.25))


def test_truncate_drops_tail():
    segs = truncate(numbered(20), SegmentConfig(8, 0.25), VOCAB)
    assert len(segs) == 1 and ids(segs[0].targets[:-1]) == list(range(1, 9))


def test_dump_format():
    seq = GlobalSequence(CHARS[:7] + [VOCAB.loc] + CHARS[:4], {7: (1, 2, 3, 4)})
    lines = dump_segments(split(seq, SegmentConfig(8, 0.25), VOCAB), VOCAB).splitlines()
    assert lines[0].startswith("BEGIN||a b c d e f g [LOC]@1,2,3,4")
    assert lines[1].startswith("CONT|g [LOC]@1,2,3,4|a b c d [EOS]")


def test_boundary_is_next_segments_first_target():
    segs = split(numbered(20), SegmentConfig(8, 0.25), VOCAB)
    assert [s.boundary[0] - 1000 if s.boundary else None for s in segs] == [9, 15, None]
    assert split(numbered(8), SegmentConfig(8, 0.25), VOCAB)[0].boundary is None
