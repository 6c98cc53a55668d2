import numpy as np
import pytest

from fusionqa.config import LmConfig, ModelConfig, VisionConfig
from fusionqa.model import MultimodalTransformer
from fusionqa.synthetic import SceneSpec, render_scene
from fusionqa.tensor import Rng
from fusionqa.tokenizer import Vocab

TINY_LINES = [
    "the capital of balor is venta",
    "the animal of balor is fox",
    "the stone of rimek is opal",
    "what is the capital of balor?",
    "what color is the shape in the photo of rimek?",
    "a photo of rimek",
    "a red square",
    "the image shows a blue circle in the top left",
    "answer the question using the given contexts:",
    "red green blue yellow purple orange",
    "describe the image",
]


@pytest.fixture(scope="session")
def tiny_vocab():
    return Vocab.build(TINY_LINES, 220)


def make_tiny_config(vocab_size, d=32, heads=2, layers=1, image_size=16, patch=8,
                     max_len=128, dropout=0.0):
    return ModelConfig(
        vision=VisionConfig(patch_size=patch, hidden_size=d, n_layers=layers,
                            n_heads=heads, image_size=image_size),
        lm=LmConfig(hidden_size=d, n_enc_layers=layers, n_dec_layers=layers,
                    n_heads=heads, vocab_size=vocab_size, max_len=max_len,
                    dropout_rate=dropout),
    )


@pytest.fixture(scope="session")
def tiny_model(tiny_vocab):
    cfg = make_tiny_config(tiny_vocab.size)
    return MultimodalTransformer.build(cfg, Rng(7))


@pytest.fixture()
def fresh_tiny_model(tiny_vocab):
    cfg = make_tiny_config(tiny_vocab.size)
    return MultimodalTransformer.build(cfg, Rng(7))


@pytest.fixture(scope="session")
def scene_image_16():
    img = render_scene(SceneSpec("red", "square", "top left"))
    from fusionqa.images import Image

    return Image(img.pixels[:16, :16, :])


@pytest.fixture(scope="session")
def scene_image_32():
    return render_scene(SceneSpec("blue", "circle", "bottom right"))
