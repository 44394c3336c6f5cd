import numpy as np
import pytest

from avacade.audio import AudioFeatureSeq, featurize
from avacade.conditioning import (
    N_TEXT_BUCKETS,
    Conditioning,
    TokenSeq,
    embed_text,
    make_conditioning,
    project_audio,
    text_bucket,
)
from avacade.errors import InvalidInput
from avacade.voice import synthetic_voice


def test_embed_text_deterministic_and_bucketed():
    a = embed_text("a calm speaker nods")
    b = embed_text("a calm speaker nods")
    assert np.array_equal(a.tokens, b.tokens)
    assert len(a) == 4
    # Same word, same vector, wherever it appears.
    c = embed_text("nods nods")
    assert np.array_equal(c.tokens[0], c.tokens[1])
    assert 0 <= text_bucket("nods") < N_TEXT_BUCKETS
    # Case and punctuation do not change the tokens.
    assert np.array_equal(embed_text("Hello, World!").tokens, embed_text("hello world").tokens)


def test_empty_text_gets_one_zero_token():
    e = embed_text("")
    assert len(e) == 1
    assert np.array_equal(e.tokens, np.zeros((1, 64)))
    assert np.array_equal(embed_text("?!").tokens, e.tokens)


def test_project_audio_shape_and_determinism():
    feats = featurize(synthetic_voice(1, 1.0))
    tok = project_audio(feats)
    assert tok.shape == (len(feats), 64)
    assert np.array_equal(tok, project_audio(feats))
    assert not np.array_equal(tok[0], tok[1])


def test_identity_limits():
    streams = [(f"id{i}", np.zeros((4, 64))) for i in range(5)]
    with pytest.raises(InvalidInput):
        make_conditioning("x", audio=streams)
    with pytest.raises(InvalidInput):
        make_conditioning("x", audio=[("a", np.zeros((4, 64))), ("a", np.zeros((4, 64)))])
    ok = make_conditioning("x", audio=streams[:4])
    assert ok.identities() == ["id0", "id1", "id2", "id3"]


def test_reference_lookup():
    seq = TokenSeq(np.ones((2, 64)), np.zeros((2, 3)))
    cond = make_conditioning("x", references=[("alice", seq)])
    assert cond.reference_for("alice") is seq
    assert cond.reference_for("bob") is None


def test_token_seq_validation():
    with pytest.raises(InvalidInput):
        TokenSeq(np.zeros(5), np.zeros((5, 3)))
    with pytest.raises(InvalidInput):
        TokenSeq(np.zeros((5, 8)), np.zeros((4, 3)))
