import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from afvoice.errors import CorruptCode, InsufficientData, InvalidConfig, InvalidSignal, ShapeMismatch
from afvoice.rvq import (
    CodebookSet,
    ResidualVectorQuantizer,
    cumulative_embeddings,
    kmeans,
    nearest,
    rvq_decode,
    rvq_encode,
    train_codebooks,
)


def brute_force_rvq(x, codewords):
    """Greedy RVQ with explicit Python loops over every codeword."""
    residual = [float(v) for v in x]
    code = []
    for book in codewords:
        best, best_d = 0, float("inf")
        for j, c in enumerate(book):
            d = sum((r - float(cv)) ** 2 for r, cv in zip(residual, c))
            if d < best_d:
                best, best_d = j, d
        code.append(best)
        residual = [r - float(cv) for r, cv in zip(residual, book[best])]
    return code


def test_encode_matches_loop_oracle():
    rng = np.random.default_rng(3)
    books = CodebookSet(rng.standard_normal((3, 16, 4)))
    x = rng.standard_normal((40, 4))
    got = rvq_encode(x, books)
    expected = [brute_force_rvq(v, books.codewords) for v in x]
    np.testing.assert_array_equal(got, expected)


def test_single_vector_and_batch_agree(toy_books):
    x = np.random.default_rng(0).standard_normal((5, 24))
    batch = rvq_encode(x, toy_books)
    for i in range(5):
        np.testing.assert_array_equal(rvq_encode(x[i], toy_books), batch[i])


def test_nearest_breaks_ties_low():
    centers = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 5.0]])
    assert nearest(np.zeros((1, 2)), centers)[0] == 0


def test_codeword_encodes_to_itself_at_level_zero(toy_books):
    for j in range(toy_books.entries):
        assert rvq_encode(toy_books.codewords[0, j], toy_books)[0] == j


def test_decode_sums_codewords(toy_books):
    code = np.arange(8) * 3
    expected = sum(toy_books.codewords[l, code[l]].astype(np.float64) for l in range(8))
    np.testing.assert_allclose(rvq_decode(code, toy_books), expected, rtol=1e-6)
    np.testing.assert_allclose(rvq_decode(code, toy_books, 1), toy_books.codewords[0, 0])


def test_cumulative_embeddings_match_partial_decodes(toy_books):
    code = np.random.default_rng(1).integers(0, 64, (3, 8))
    cum = cumulative_embeddings(code, toy_books)
    for l in range(8):
        np.testing.assert_allclose(cum[:, l], rvq_decode(code, toy_books, l + 1), atol=1e-5)


def test_committed_levels_are_kept(toy_books):
    x = np.random.default_rng(2).standard_normal(24)
    prefix = np.array([5, 9, 1])
    code = rvq_encode(x, toy_books, committed=prefix)
    np.testing.assert_array_equal(code[:3], prefix)
    # remaining levels are greedy on what the prefix leaves over
    rest = x - rvq_decode(prefix, CodebookSet(toy_books.codewords[:3]))
    tail = rvq_encode(rest, CodebookSet(toy_books.codewords[3:]))
    np.testing.assert_array_equal(code[3:], tail)


def test_encode_decode_errors(toy_books):
    with pytest.raises(ShapeMismatch):
        rvq_encode(np.zeros(5), toy_books)
    with pytest.raises(InvalidSignal):
        rvq_encode(np.full(24, np.nan), toy_books)
    with pytest.raises(CorruptCode):
        rvq_decode(np.full(8, 64), toy_books)
    with pytest.raises(CorruptCode):
        rvq_decode(np.zeros(9, int), toy_books)
    with pytest.raises(InvalidConfig):
        rvq_decode(np.zeros(8, int), toy_books, 0)
    with pytest.raises(ShapeMismatch):
        CodebookSet(np.zeros((4, 4)))


def test_kmeans_history_non_increasing_and_recovers_clusters():
    rng = np.random.default_rng(0)
    centres = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    x = np.concatenate([c + 0.1 * rng.standard_normal((50, 2)) for c in centres])
    found, history = kmeans(x, 3, 20, np.random.default_rng(1))
    assert all(b <= a + 1e-12 for a, b in zip(history, history[1:]))
    dists = np.linalg.norm(found[:, None] - centres[None], axis=-1).min(axis=0)
    assert np.all(dists < 0.1)


def test_train_codebooks_needs_enough_data():
    with pytest.raises(InsufficientData):
        train_codebooks(np.zeros((10, 3)), 2, 16)


def test_trained_codebooks_have_distinct_entries(toy_books):
    for book in toy_books.codewords:
        assert len(np.unique(book, axis=0)) == book.shape[0]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_decode_error_never_exceeds_input_norm(toy_books, seed):
    x = np.random.default_rng(seed).standard_normal(24)
    err = np.sum((x - rvq_decode(rvq_encode(x, toy_books), toy_books)) ** 2)
    assert err <= np.sum(x**2) + 1e-6


def test_codebook_file_round_trip(tmp_path, toy_books):
    toy_books.save(tmp_path / "b.afcb")
    back = CodebookSet.load(tmp_path / "b.afcb")
    np.testing.assert_array_equal(back.codewords, toy_books.codewords)


def test_estimator_api():
    X = np.random.default_rng(0).standard_normal((300, 6))
    q = ResidualVectorQuantizer(n_levels=3, n_codes=8, n_iter=10, random_state=2)
    assert q.get_params() == {"n_levels": 3, "n_codes": 8, "n_iter": 10, "random_state": 2}
    codes = q.fit(X).transform(X)
    assert codes.shape == (300, 3) and q.n_features_in_ == 6
    assert q.inverse_transform(codes).shape == (300, 6)
    assert q.score(X) > -np.mean(X**2)
    twin = clone(q).fit(X)
    np.testing.assert_array_equal(twin.codebooks_.codewords, q.codebooks_.codewords)
    again = ResidualVectorQuantizer.from_codebooks(q.codebooks_)
    np.testing.assert_array_equal(again.transform(X), codes)
