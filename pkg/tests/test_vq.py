import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morphgen.autodiff import Parameter, Tape, Tensor, ops
from morphgen.errors import ShapeError
from morphgen.vq import Codebook, CodebookLibrary, nearest_entries, quantize, vq_losses


def book_of(entries):
    b = Codebook(len(entries), len(entries[0]))
    b.entries.data = np.asarray(entries, dtype=np.float32)
    return b


def brute_force_nearest(rows, entries):
    out = []
    for r in rows.astype(np.float64):
        best, best_d = 0, np.inf
        for j, e in enumerate(entries.astype(np.float64)):
            d = float(((r - e) ** 2).sum())
            if d < best_d:
                best, best_d = j, d
        out.append(best)
    return np.array(out)


def test_nearer_prototype():
    res = quantize(np.array([[0.2, 0.1]]), book_of([[0, 0], [1, 1]]))
    assert res.indices.tolist() == [0]
    assert res.quantized.data.tolist() == [[0.0, 0.0]]


def test_equidistant_tie_goes_to_lowest_index():
    entries = np.zeros((8, 2), dtype=np.float32)
    entries[:] = 5.0
    entries[3] = [1.0, 0.0]
    entries[7] = [-1.0, 0.0]
    res = quantize(np.array([[0.0, 0.0], [0.0, 0.5]]), book_of(entries))
    assert res.indices.tolist() == [3, 3]


def test_exact_duplicate_entries_tie_to_lowest():
    rng = np.random.default_rng(4)
    base = rng.standard_normal((16, 4)).astype(np.float32)
    entries = np.concatenate([base, base])
    rows = base + 1e-3 * rng.standard_normal(base.shape).astype(np.float32)
    assert np.all(nearest_entries(rows, entries) < 16)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_matches_exhaustive_oracle(seed):
    rng = np.random.default_rng(seed)
    rows = rng.standard_normal((1000, 16)).astype(np.float32)
    entries = rng.standard_normal((64, 16)).astype(np.float32)
    assert np.array_equal(quantize(rows, book_of(entries)).indices, brute_force_nearest(rows, entries))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 8))
def test_quantized_is_a_codebook_entry_and_distance_is_minimal(seed, dim):
    rng = np.random.default_rng(seed)
    rows = rng.integers(-2, 3, (40, dim)).astype(np.float32)
    entries = rng.integers(-2, 3, (12, dim)).astype(np.float32)
    res = quantize(rows, book_of(entries))
    assert np.array_equal(res.indices, brute_force_nearest(rows, entries))
    d_all = np.sqrt(((rows[:, None, :] - entries[None]) ** 2).sum(-1))
    np.testing.assert_allclose(res.distances, d_all.min(1), rtol=1e-6)


def test_usage_counts_accumulate():
    b = book_of([[0, 0], [1, 1]])
    quantize(np.array([[0.1, 0.0], [0.9, 1.0], [1.0, 1.0]]), b)
    assert b.usage_counts.tolist() == [1, 2]


def test_dimension_mismatch():
    with pytest.raises(ShapeError):
        quantize(np.zeros((3, 5)), book_of([[0, 0]]))


def test_losses_zero_when_equal():
    z = Tensor(np.ones((4, 3)))
    out = vq_losses(z, z)
    assert float(out["commitment_loss"].data) == 0.0
    assert float(out["codebook_loss"].data) == 0.0


def test_commitment_example_one_channel_populated():
    z = [Tensor(np.array([[0.0, 0.0]])), Tensor(np.array([[0.5, 0.5]]))]
    q = [Tensor(np.array([[1.0, 1.0]])), Tensor(np.array([[0.5, 0.5]]))]
    out = vq_losses(z, q, commitment_weight=0.25)
    assert float(out["commitment_loss"].data) == pytest.approx(0.25)


def test_stop_gradient_placement():
    book = book_of([[1.0, 1.0], [3.0, 3.0]])
    enc = Parameter(np.array([[0.0, 0.2]]), name="enc")
    for key, enc_nonzero in (("commitment_loss", True), ("codebook_loss", False)):
        enc.grad = book.entries.grad = None
        with Tape() as tape:
            res = quantize(enc, book, count=False)
            loss = vq_losses(enc, res.selected)[key]
            tape.backward(loss, params=[enc, book.entries])
        assert np.any(enc.grad != 0) == enc_nonzero
        assert np.any(book.entries.grad != 0) != enc_nonzero


def test_straight_through_copies_gradient():
    book = book_of([[1.0, 1.0], [3.0, 3.0]])
    enc = Parameter(np.array([[0.0, 0.2], [2.9, 3.2]]), name="enc")
    with Tape() as tape:
        res = quantize(enc, book, count=False)
        loss = ops.sum(ops.mul(res.quantized, Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))))
        tape.backward(loss, params=[enc])
    assert res.quantized.data.tolist() == [[1.0, 1.0], [3.0, 3.0]]
    assert enc.grad.tolist() == [[1.0, 2.0], [3.0, 4.0]]


def test_library_has_independent_books():
    lib = CodebookLibrary.create(size=8, dim=4, seed=0)
    assert lib.cytoplasm.entries.shape == (8, 4)
    assert not np.array_equal(lib.cytoplasm.entries.data, lib.nucleus.entries.data)


def test_dead_entries_are_revived():
    rng = np.random.default_rng(0)
    b = book_of(np.zeros((4, 2)))
    for _ in range(3):
        b.mark_step([0])
    assert b.revive_dead(np.ones((5, 2)), rng, dead_after=3) == 3
    assert np.all(b.entries.data[1:] == 1.0) and np.all(b.entries.data[0] == 0.0)
