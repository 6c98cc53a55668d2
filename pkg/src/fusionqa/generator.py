"""Generative answering: teacher-forced cross-entropy and greedy decoding."""

from __future__ import annotations

import numpy as np

from fusionqa.config import GenerationConfig
from fusionqa.model import EncoderStates, decode_step, decoder_logits, encode_multimodal
from fusionqa.tensor import Tensor, cross_entropy_logits
from fusionqa.tokenizer import PAD_ID, assemble_qa_input


def qa_loss(model, enc: EncoderStates, target_ids, train=False, rng=None) -> Tensor:
    """Mean negative log-likelihood of the target sequence under teacher
    forcing (decoder input is the target shifted right behind a pad start
    token); pad positions in the target are excluded from the average."""
    target_ids = np.asarray(target_ids, dtype=np.int64)
    if target_ids.size == 0:
        raise ValueError("qa_loss: empty target")
    dec_input = np.concatenate([[PAD_ID], target_ids[:-1]])
    logits = decoder_logits(model, enc, dec_input, train=train, rng=rng)
    mask = (target_ids != PAD_ID).astype(np.float64)
    return cross_entropy_logits(logits, target_ids, mask)


def generate_ids(model, enc: EncoderStates, cfg: GenerationConfig) -> list[int]:
    """Greedy decode until eos or the length limit; ties take the lowest id."""
    prefix = [PAD_ID]
    out = []
    for _ in range(cfg.max_new_tokens):
        logits = decode_step(model, enc, prefix)
        nxt = int(np.argmax(logits.data))
        if nxt == cfg.eos_id:
            break
        out.append(nxt)
        prefix.append(nxt)
    return out


def generate(model, vocab, question: str, contexts, cfg: GenerationConfig,
             max_len: int, image_loader=None, prompt=None) -> str:
    """Answer a question from ordered contexts (descending reranker score)."""
    from fusionqa.tensor import no_grad

    seq = assemble_qa_input(
        vocab, question, list(contexts), model.config.n_img_tokens, max_len, prompt=prompt
    )
    image_docs = [d for d in contexts if d.modality == "image"]
    images = []
    if seq.image_spans:
        if image_loader is None:
            raise ValueError("contexts include images but no image loader given")
        images = [image_loader(d) for d in image_docs[: len(seq.image_spans)]]
    with no_grad():
        enc = encode_multimodal(model, seq, images, train=False)
        ids = generate_ids(model, enc, cfg)
    return vocab.decode(ids)
