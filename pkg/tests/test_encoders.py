import numpy as np
import pytest

from skipfuse import tensor as T
from skipfuse.config import ModelConfig, base_profile
from skipfuse.encoders import TextEncoder, VisualEncoder, patchify
from skipfuse.tensor import Tensor
from skipfuse.vocab import CLS, PAD

from conftest import block_ref as _block_ref


def _cfg(**kw):
    base = dict(d_model=16, n_heads=2, n_visual_layers=1, n_text_layers=1, image_size=16,
                patch_size=8, max_text_len=8, vocab_size=20)
    base.update(kw)
    return ModelConfig(**base)


def test_visual_shapes_toy():
    enc = VisualEncoder(_cfg(), np.random.default_rng(0))
    assert enc(np.zeros((3, 16, 16))).embeddings.shape == (5, 16)


def test_visual_shapes_base_size():
    cfg = base_profile(n_visual_layers=0)
    enc = VisualEncoder(cfg, np.random.default_rng(0))
    assert enc(np.zeros((3, 256, 256))).embeddings.shape == (257, 768)


def test_wrong_resolution():
    enc = VisualEncoder(_cfg(), np.random.default_rng(0))
    with pytest.raises(T.ShapeError):
        enc(np.zeros((3, 24, 24)))


def test_zero_image_gives_positional_rows():
    enc = VisualEncoder(_cfg(n_visual_layers=0), np.random.default_rng(0))
    out = enc(np.zeros((3, 16, 16))).embeddings.data
    np.testing.assert_allclose(out[1:], enc.pos.data[1:])
    np.testing.assert_allclose(out[0], enc.cls.data[0] + enc.pos.data[0])


def test_zero_layers_equal_patch_embed():
    enc = VisualEncoder(_cfg(n_visual_layers=0), np.random.default_rng(0))
    img = np.random.default_rng(1).normal(size=(3, 16, 16))
    np.testing.assert_array_equal(enc(img).embeddings.data, enc.patch_embed(img).embeddings.data)


def test_patchify_row_major_order():
    img = np.arange(16, dtype=float).reshape(1, 4, 4)
    patches = patchify(img, 2)
    np.testing.assert_array_equal(patches[0], [0, 1, 4, 5])
    np.testing.assert_array_equal(patches[1], [2, 3, 6, 7])
    np.testing.assert_array_equal(patches[2], [8, 9, 12, 13])


def test_patch_permutation_permutes_projections():
    enc = VisualEncoder(_cfg(n_visual_layers=0), np.random.default_rng(0))
    rng = np.random.default_rng(2)
    img = rng.normal(size=(3, 16, 16))
    swapped = img.copy()
    swapped[:, :8, :8], swapped[:, 8:, 8:] = img[:, 8:, 8:], img[:, :8, :8]
    a = enc(img).embeddings.data - enc.pos.data
    b = enc(swapped).embeddings.data - enc.pos.data
    np.testing.assert_allclose(b[[0, 4, 2, 3, 1]], a, atol=1e-6)


def test_visual_block_matches_reference(f64):
    enc = VisualEncoder(_cfg(), np.random.default_rng(3))
    img = np.random.default_rng(4).normal(size=(3, 16, 16))
    x = enc.patch_embed(img).embeddings.data
    np.testing.assert_allclose(enc(img).embeddings.data, _block_ref(x, enc.blocks[0]), atol=1e-10)


def test_text_block_matches_reference_with_padding(f64):
    enc = TextEncoder(_cfg(), np.random.default_rng(3))
    ids = [5, 9, 7, PAD, PAD]
    full = [CLS] + ids
    x = enc.tok.data[full] + enc.pos.data[: len(full)]
    valid = np.array(full) != PAD
    out = enc(ids)
    np.testing.assert_array_equal(out.attention_mask, valid)
    np.testing.assert_allclose(out.embeddings.data, _block_ref(x, enc.blocks[0], valid), atol=1e-10)


def test_pad_extension_leaves_real_rows_unchanged(f64):
    enc = TextEncoder(_cfg(n_text_layers=2), np.random.default_rng(0))
    short = enc([5, 6, 7]).embeddings.data
    long = enc([5, 6, 7, PAD, PAD, PAD]).embeddings.data
    np.testing.assert_allclose(long[:4], short, atol=1e-12)


@pytest.mark.parametrize("ids", [list(range(4, 13)), [4, 99], [-1]])
def test_text_contract_errors(ids):
    enc = TextEncoder(_cfg(), np.random.default_rng(0))
    with pytest.raises(T.ContractError):
        enc(ids)


def test_encoders_deterministic_per_seed():
    img = np.random.default_rng(1).normal(size=(3, 16, 16))
    a = VisualEncoder(_cfg(), np.random.default_rng(5))(img).embeddings.data
    b = VisualEncoder(_cfg(), np.random.default_rng(5))(img).embeddings.data
    c = VisualEncoder(_cfg(), np.random.default_rng(6))(img).embeddings.data
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, c)


def test_gradients_reach_every_text_parameter(f64):
    enc = TextEncoder(_cfg(), np.random.default_rng(0))
    out = enc([4, 5, 6, 7]).embeddings
    T.backward(T.sum_all(T.mul(out, np.random.default_rng(1).normal(size=out.shape))))
    for name, p in enc.named_parameters():
        if name.endswith("attn.bk"):
            continue
        assert p.grad is not None and np.abs(p.grad).max() > 0, name


def test_gradients_reach_patch_projection(f64):
    enc = VisualEncoder(_cfg(), np.random.default_rng(0))
    out = enc(np.random.default_rng(1).normal(size=(3, 16, 16))).embeddings
    T.backward(T.sum_all(T.mul(out, np.random.default_rng(2).normal(size=out.shape))))
    assert np.abs(enc.patch_proj_w.grad).max() > 0
    assert np.abs(enc.cls.grad).max() > 0
