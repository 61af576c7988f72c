import numpy as np
import pytest

from xlstm_fer.module import parameter
from xlstm_fer.patch import PatchEmbed, PatchSequence, embed, patchify, unpatchify
from xlstm_fer.tensor import Tensor


def test_full_size_geometry():
    seq = patchify(np.zeros((224, 224, 3)), 16)
    assert seq.tokens.shape == (196, 768)
    assert (seq.grid_rows, seq.grid_cols) == (14, 14)


def test_unit_patch_is_row_major_pixels():
    img = np.array([[1.0, 2.0], [3.0, 4.0]])[..., None]
    np.testing.assert_array_equal(patchify(img, 1).tokens.data, [[1], [2], [3], [4]])


def test_indivisible_image_rejected_naming_both_values():
    with pytest.raises(ValueError, match=r"10x10.*16"):
        patchify(np.zeros((10, 10, 1)), 16)


def test_token_layout():
    img = np.arange(4 * 6 * 2, dtype=float).reshape(4, 6, 2)
    seq = patchify(img, 2)
    assert (seq.grid_rows, seq.grid_cols) == (2, 3)
    # token r*cols + c is the row-major flattening of its block
    for r in range(2):
        for c in range(3):
            block = img[2 * r:2 * r + 2, 2 * c:2 * c + 2].reshape(-1)
            np.testing.assert_array_equal(seq.tokens.data[r * 3 + c], block)


@pytest.mark.parametrize("shape,p", [((8, 8, 1), 4), ((2, 12, 6, 3), 3), ((5, 16, 16, 1), 16)])
def test_unpatchify_is_bit_exact(rng, shape, p):
    img = rng.standard_normal(shape)
    back = unpatchify(patchify(img, p), p, shape[-1])
    assert back.shape == img.shape
    assert np.array_equal(back, img)


def test_identity_projection_and_zero_pos():
    seq = patchify(np.random.default_rng(0).standard_normal((8, 8, 1)), 4)
    out = embed(seq, Tensor(np.eye(16)), Tensor(np.zeros((4, 16))))
    assert np.array_equal(out.tokens.data, seq.tokens.data)


def test_zero_patches_give_pos(rng):
    seq = PatchSequence(Tensor(np.zeros((4, 12))), 2, 2)
    q = rng.standard_normal((4, 5))
    out = embed(seq, Tensor(rng.standard_normal((12, 5))), Tensor(q))
    assert np.array_equal(out.tokens.data, q)


def test_embed_matches_oracle(rng):
    img = rng.standard_normal((3, 12, 8, 2))
    pe = PatchEmbed((12, 8), 2, 4, 7, rng)
    pe.projection.data = rng.standard_normal(pe.projection.shape)
    pe.pos.data = rng.standard_normal(pe.pos.shape)
    out = pe(img).tokens.data
    for b in range(3):
        for r in range(3):
            for c in range(2):
                flat = img[b, 4 * r:4 * r + 4, 4 * c:4 * c + 4].reshape(-1)
                expect = flat @ pe.projection.data + pe.pos.data[r * 2 + c]
                assert np.max(np.abs(out[b, r * 2 + c] - expect)) < 1e-12


def test_grid_mismatch_rejected(rng):
    seq = patchify(np.zeros((8, 8, 1)), 4)
    with pytest.raises(ValueError, match="grid"):
        embed(seq, Tensor(np.zeros((16, 3))), Tensor(np.zeros((9, 3))))
    pe = PatchEmbed((8, 8), 1, 4, 3, rng)
    with pytest.raises(ValueError, match="grid"):
        pe(np.zeros((12, 8, 1)))


def test_patch_permutation_moves_tokens(rng):
    # swapping two image patches swaps the corresponding patch vectors
    img = rng.standard_normal((8, 8, 1))
    swapped = img.copy()
    swapped[:4, :4], swapped[4:, 4:] = img[4:, 4:], img[:4, :4]
    a, b = patchify(img, 4).tokens.data, patchify(swapped, 4).tokens.data
    np.testing.assert_array_equal(a[[3, 1, 2, 0]], b)


def test_embed_gradients_flow(rng):
    from xlstm_fer import tensor as T
    pe = PatchEmbed((4, 4), 1, 2, 3, rng)
    T.backward(T.reduce_sum(pe(rng.standard_normal((4, 4, 1))).tokens))
    np.testing.assert_allclose(pe.pos.grad, np.ones((4, 3)))
    assert pe.projection.grad.shape == (4, 3)
