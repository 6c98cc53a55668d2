import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusionqa.images import Image
from fusionqa.model import MultimodalTransformer
from fusionqa.tensor import Rng, backward, tsum
from fusionqa.vision import encode_image, patchify

from conftest import make_tiny_config


def test_patchify_224_16():
    img = Image(np.zeros((224, 224, 3), dtype=np.float32))
    patches = patchify(img, 16)
    assert patches.shape == (196, 768)


def test_patchify_32_8():
    img = Image(np.zeros((32, 32, 3), dtype=np.float32))
    assert patchify(img, 8).shape == (16, 192)


def test_patchify_constant_image_identical_rows():
    img = Image(np.full((16, 16, 3), 0.25, dtype=np.float32))
    patches = patchify(img, 8)
    assert np.all(patches == patches[0])


def test_patchify_layout_row_major_channel_last():
    # pixel (0, 0) occupies the first 3 entries of patch 0; pixel (0, 1)
    # the next 3; patch order runs across the top row of the grid first
    px = np.arange(8 * 8 * 3, dtype=np.float32).reshape(8, 8, 3)
    img = Image(px / px.max())
    patches = patchify(img, 4)
    assert patches.shape == (4, 48)
    np.testing.assert_array_equal(patches[0][:3], img.pixels[0, 0])
    np.testing.assert_array_equal(patches[0][3:6], img.pixels[0, 1])
    np.testing.assert_array_equal(patches[1][:3], img.pixels[0, 4])
    np.testing.assert_array_equal(patches[2][:3], img.pixels[4, 0])


def test_patchify_indivisible_rejected():
    img = Image(np.zeros((30, 32, 3), dtype=np.float32))
    with pytest.raises(ValueError, match="30x32.*8x8"):
        patchify(img, 8)


@given(grid_h=st.integers(1, 4), grid_w=st.integers(1, 4), p=st.sampled_from([2, 4, 8]))
@settings(max_examples=40, deadline=None)
def test_patchify_shape_contract(grid_h, grid_w, p):
    img = Image(np.zeros((grid_h * p, grid_w * p, 3), dtype=np.float32))
    patches = patchify(img, p)
    assert patches.shape == (grid_h * grid_w, p * p * 3)


class TestEncodeImage:
    def test_output_shape(self, tiny_model, scene_image_16):
        out = encode_image(tiny_model, scene_image_16)
        cfg = tiny_model.config.vision
        assert out.shape == (cfg.n_patches, cfg.hidden_size)

    def test_eval_determinism(self, tiny_model, scene_image_16):
        a = encode_image(tiny_model, scene_image_16).data
        b = encode_image(tiny_model, scene_image_16).data
        np.testing.assert_array_equal(a, b)

    def test_positional_sensitivity(self, tiny_model):
        # constant image except two swapped patches: outputs differ at those
        # positions because position embeddings break the symmetry
        base = np.full((16, 16, 3), 0.5, dtype=np.float32)
        variant = base.copy()
        variant[:8, :8, :] = 0.9
        swapped = base.copy()
        swapped[:8, 8:, :] = 0.9
        out_a = encode_image(tiny_model, Image(variant)).data
        out_b = encode_image(tiny_model, Image(swapped)).data
        assert not np.allclose(out_a, out_b)

    def test_zeroed_blocks_reduce_to_embedding_plus_positions(self, tiny_vocab, scene_image_16):
        cfg = make_tiny_config(tiny_vocab.size)
        model = MultimodalTransformer.build(cfg, Rng(3))
        for name, p in model.params.items():
            if ".attn." in name or ".mlp." in name:
                p.data[:] = 0.0
        out = encode_image(model, scene_image_16).data

        patches = patchify(scene_image_16, cfg.vision.patch_size)
        emb = patches @ model.params["vision.patch_proj.weight"].data \
            + model.params["vision.patch_proj.bias"].data \
            + model.params["vision.pos_emb"].data
        mu = emb.mean(-1, keepdims=True)
        var = ((emb - mu) ** 2).mean(-1, keepdims=True)
        expected = (emb - mu) / np.sqrt(var + 1e-5) \
            * model.params["vision.final_norm.gamma"].data \
            + model.params["vision.final_norm.beta"].data
        np.testing.assert_allclose(out, expected, rtol=1e-5, atol=1e-6)

    def test_gradient_flow_respects_freezing(self, fresh_tiny_model, scene_image_16):
        model = fresh_tiny_model
        model.set_trainable(("vision.",))
        out = encode_image(model, scene_image_16)
        backward(tsum(out))
        assert model.params["vision.patch_proj.weight"].grad is not None
        assert model.params["vision.pos_emb"].grad is not None

        model.zero_grads()
        model.set_trainable(("lm.",))
        out = encode_image(model, scene_image_16)
        backward(tsum(out))
        assert model.params["vision.patch_proj.weight"].grad is None
        assert model.params["vision.pos_emb"].grad is None

    def test_wrong_image_size_rejected(self, tiny_model, scene_image_32):
        with pytest.raises(ValueError, match="patches"):
            encode_image(tiny_model, scene_image_32)
