"""Cross-encoder relevance scoring and relative-threshold + top-k selection.

Each (question, document) pair runs through the backbone encoder alone; the
hidden state at the prepended <cls> position feeds a two-layer scoring head.
Raw logits are sigmoid-normalized, candidates below tau times the best score
are dropped, and at most k survivors are kept (ties to the lower index).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fusionqa.config import SelectionConfig
from fusionqa.documents import Document
from fusionqa.tensor import (
    Rng,
    Tensor,
    add,
    bce_with_logits,
    concat,
    dropout,
    matmul,
    reshape,
    sigmoid_np,
    slice_,
    tanh,
    transpose,
)
from fusionqa.tokenizer import assemble_reranker_input
from fusionqa.model import encode_multimodal


@dataclass
class RetrievedSet:
    """Normalized per-candidate scores and the selected candidate indices,
    in descending-score order (ties resolved toward the lower index)."""

    scores: np.ndarray
    selected: list[int]


def classifier_head(model, h: Tensor, train=False, rng=None) -> Tensor:
    """Scalar relevance logit from the <cls> hidden state (1, d)."""
    p = model.params
    rate = model.config.head_dropout
    h = dropout(h, rate, rng=rng, train=train)
    z = tanh(add(matmul(h, transpose(p["cls_head.w1"], (1, 0))), p["cls_head.b1"]))
    z = dropout(z, rate, rng=rng, train=train)
    y = add(matmul(z, transpose(p["cls_head.w2"], (1, 0))), p["cls_head.b2"])
    return reshape(y, ())


def score(model, vocab, question: str, doc: Document, max_len: int,
          image_loader=None, train=False, rng=None) -> Tensor:
    """Relevance logit for one (question, document) pair; scalar Tensor."""
    seq = assemble_reranker_input(vocab, question, doc, model.config.n_img_tokens, max_len)
    images = []
    if seq.image_spans:
        if image_loader is None:
            raise ValueError(f"document {doc.id} is an image but no image loader given")
        images = [image_loader(doc)]
    enc = encode_multimodal(model, seq, images, train=train, rng=rng)
    h = slice_(enc.states, (slice(0, 1),))
    return classifier_head(model, h, train=train, rng=rng)


def select_contexts(logits, cfg: SelectionConfig) -> RetrievedSet:
    """Sigmoid-normalize, keep scores >= tau * max, then truncate to top-k."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.size == 0:
        raise ValueError("select_contexts: need a non-empty 1-D candidate list")
    scores = sigmoid_np(logits)
    cutoff = cfg.tau * scores.max()
    order = np.lexsort((np.arange(len(scores)), -scores))
    selected = [int(i) for i in order if scores[i] >= cutoff][: cfg.k]
    return RetrievedSet(scores=scores, selected=selected)


def reranker_loss(logits, labels) -> Tensor:
    """Mean binary cross-entropy over a candidate batch, from raw logits.

    ``logits`` may be a (N,) Tensor or a list of scalar Tensors straight from
    ``score``.
    """
    if isinstance(logits, (list, tuple)):
        logits = concat([reshape(t, (1,)) for t in logits], axis=0)
    labels = np.asarray(labels, dtype=np.float64)
    if logits.shape != labels.shape:
        raise ValueError(
            f"reranker_loss: {logits.shape} logits vs {labels.shape} labels"
        )
    return bce_with_logits(logits, labels)


def build_training_batch(pool: list[Document], batch_size: int, rng: Rng):
    """All supporting documents plus sampled distractors, deterministically.

    Returns (documents, labels). Raises when the pool has no positive.
    """
    positives = [d for d in pool if d.label == "supporting"]
    distractors = [d for d in pool if d.label != "supporting"]
    if not positives:
        raise ValueError("training pool contains no supporting document")
    n_dist = min(len(distractors), max(0, batch_size - len(positives)))
    chosen = []
    if n_dist:
        idx = sorted(rng.sample_indices(len(distractors), n_dist).tolist())
        chosen = [distractors[i] for i in idx]
    docs = positives + chosen
    labels = np.array([1.0] * len(positives) + [0.0] * len(chosen))
    return docs, labels
