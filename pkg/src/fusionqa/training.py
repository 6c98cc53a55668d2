"""Optimization and the staged training procedures.

AdamW with decoupled weight decay and a no-warmup cosine schedule drives
every procedure. The vision encoder gets layer-wise learning-rate decay
(top layer fastest; patch projection and positional embeddings join the
bottom group). Freezing is total: a frozen tensor receives no gradient,
holds no optimizer state, and is bit-identical after training.

Stages: (1) vision encoder alone on caption pairs, (2) vision encoder and
language model jointly on richer captions, (3) language model alone on
visual question-answer triples. Fine-tuning (reranker head or answer
generator) always keeps the vision encoder frozen.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from fusionqa.config import FinetuneConfig, StageConfig
from fusionqa.documents import Document, QaInstance
from fusionqa.generator import qa_loss
from fusionqa.images import Image
from fusionqa.model import MultimodalTransformer, encode_multimodal
from fusionqa.reranker import build_training_batch, reranker_loss, score
from fusionqa.tensor import Rng, Tensor, backward, scale
from fusionqa.tokenizer import assemble_qa_input


def llrd_rates(base_lr: float, factor: float, n_layers: int) -> list[float]:
    """Per-layer learning rates, bottom (index 0) to top: base * factor^depth."""
    if not 0.0 < factor <= 1.0:
        raise ValueError(f"llrd factor must lie in (0, 1], got {factor}")
    if n_layers < 1:
        raise ValueError("llrd needs at least one layer")
    return [base_lr * factor ** (n_layers - 1 - i) for i in range(n_layers)]


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine decay from base_lr to zero, no warmup."""
    if total_steps <= 0:
        raise ValueError("cosine_lr: total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"cosine_lr: step {step} outside [0, {total_steps}]")
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))


_NO_DECAY_LEAVES = ("gamma", "beta")


def decay_allowed(name: str) -> bool:
    """Weight decay applies to weight matrices only: not biases, not
    layer-norm affine parameters, not embedding tables."""
    leaf = name.rsplit(".", 1)[-1]
    if leaf in _NO_DECAY_LEAVES or leaf.startswith("b"):
        return False
    if name == "lm.embed" or leaf == "pos_emb":
        return False
    return True


@dataclass
class ParamGroup:
    names: list[str]
    tensors: list[Tensor]
    base_lr: float
    weight_decay: float


def vision_param_groups(model, base_lr: float, factor: float, weight_decay: float) -> list[ParamGroup]:
    """LLRD groups partitioning the vision encoder exactly once."""
    n_layers = model.config.vision.n_layers
    rates = llrd_rates(base_lr, factor, n_layers)
    buckets = {i: [] for i in range(n_layers)}
    for name in model.params:
        if not name.startswith("vision."):
            continue
        if name.startswith("vision.layer"):
            layer = int(name.split(".")[1][len("layer"):])
            buckets[layer].append(name)
        elif name.startswith(("vision.patch_proj", "vision.pos_emb")):
            buckets[0].append(name)
        else:  # final norm rides with the top layer
            buckets[n_layers - 1].append(name)
    groups = []
    for i in range(n_layers):
        names = sorted(buckets[i])
        groups.append(ParamGroup(names, [model.params[n] for n in names], rates[i], weight_decay))
    return groups


def lm_param_group(model, base_lr: float, weight_decay: float,
                   include_cls_head=False) -> ParamGroup:
    names = sorted(
        n for n in model.params
        if n.startswith("lm.") or (include_cls_head and n.startswith("cls_head."))
    )
    return ParamGroup(names, [model.params[n] for n in names], base_lr, weight_decay)


class AdamW:
    """Bias-corrected Adam with decoupled (multiplicative) weight decay.

    Only trainable tensors get state; tensors whose grad is None in a step
    are skipped entirely.
    """

    def __init__(self, groups: list[ParamGroup], beta1=0.9, beta2=0.999, eps=1e-8):
        self.groups = [g for g in groups if g.tensors]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.moments = {}
        for g in self.groups:
            for name, p in zip(g.names, g.tensors):
                if p.requires_grad:
                    self.moments[name] = (
                        np.zeros_like(p.data),
                        np.zeros_like(p.data),
                    )

    def step(self, lr_factor: float = 1.0):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for g in self.groups:
            lr = g.base_lr * lr_factor
            for name, p in zip(g.names, g.tensors):
                if not p.requires_grad or p.grad is None:
                    continue
                grad = p.grad.astype(p.data.dtype, copy=False)
                m, v = self.moments[name]
                if g.weight_decay and decay_allowed(name):
                    p.data *= 1.0 - lr * g.weight_decay
                m *= self.beta1
                m += (1.0 - self.beta1) * grad
                v *= self.beta2
                v += (1.0 - self.beta2) * grad * grad
                p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def clip_global_norm(model, max_norm: float = 1.0) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    sq = 0.0
    grads = [p.grad for p in model.params.values() if p.grad is not None]
    for g in grads:
        sq += float((g.astype(np.float64) ** 2).sum())
    norm = math.sqrt(sq)
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for g in grads:
            g *= factor
    return norm


def tensor_checksums(model, prefix: str = "") -> dict[str, str]:
    """Content digests for freezing verification."""
    out = {}
    for name, p in model.params.items():
        if name.startswith(prefix):
            h = hashlib.blake2b(digest_size=16)
            h.update(str(p.shape).encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
            out[name] = h.hexdigest()
    return out


def clone_model(model) -> MultimodalTransformer:
    params = {
        n: Tensor(p.data.copy(), requires_grad=p.requires_grad, dtype=p.data.dtype)
        for n, p in model.params.items()
    }
    return MultimodalTransformer(model.config, params)


@dataclass
class PretrainSample:
    """One pretraining record: an image, a textual prompt, a target string.
    kind is 'caption' for stages 1-2 and 'vqa' for stage 3."""

    image: Image
    prompt: str
    target: str
    kind: str


_STAGE_KIND = {1: "caption", 2: "caption", 3: "vqa"}
_STAGE_PREFIXES = {"VE": ("vision.",), "VE+LM": ("vision.", "lm."), "LM": ("lm.",)}


def _image_doc() -> Document:
    return Document(id="_pretrain_image", modality="image", image_path="<memory>")


def _pretrain_loss(model, vocab, sample: PretrainSample, rng):
    # vqa samples share the answer generator's instruction prompt so the
    # stage-3 skills transfer to fine-tuning unchanged
    instruction = None if sample.kind == "vqa" else ""
    seq = assemble_qa_input(
        vocab, sample.prompt, [_image_doc()], model.config.n_img_tokens,
        model.config.lm.max_len, prompt=instruction,
    )
    enc = encode_multimodal(model, seq, [sample.image], train=True, rng=rng)
    target = vocab.encode(sample.target).ids
    return qa_loss(model, enc, target, train=True, rng=rng)


def _stage_optimizer(model, stage: StageConfig) -> AdamW:
    groups = []
    if stage.ve_lr is not None:
        groups.extend(
            vision_param_groups(model, stage.ve_lr, stage.ve_llrd_factor, stage.weight_decay)
        )
    if stage.lm_lr is not None:
        groups.append(lm_param_group(model, stage.lm_lr, stage.weight_decay))
    return AdamW(groups)


def run_pretrain_stage(model, vocab, stage: StageConfig, corpus: list[PretrainSample],
                       rng: Rng) -> list[tuple[int, float, float]]:
    """Train one stage in place; returns the (step, lr, loss) trace.

    Only the stage's trainable component changes; everything else is frozen
    and stays bit-identical.
    """
    expected_kind = _STAGE_KIND[stage.stage]
    for s in corpus:
        if s.kind != expected_kind:
            raise ValueError(
                f"stage {stage.stage} expects {expected_kind!r} samples, got {s.kind!r}"
            )
    if not corpus:
        raise ValueError("pretraining corpus is empty")

    model.set_trainable(_STAGE_PREFIXES[stage.trainable])
    opt = _stage_optimizer(model, stage)
    batch = max(1, stage.global_batch)
    n_batches = math.ceil(len(corpus) / batch)
    total_steps = stage.epochs * n_batches
    primary_lr = stage.lm_lr if stage.lm_lr is not None else stage.ve_lr

    trace = []
    step_idx = 0
    for epoch in range(stage.epochs):
        order = rng.child(f"stage{stage.stage}/epoch{epoch}").permutation(len(corpus))
        for b in range(n_batches):
            members = order[b * batch:(b + 1) * batch]
            step_rng = rng.child(f"stage{stage.stage}/step{step_idx}")
            model.zero_grads()
            batch_loss = 0.0
            for j, sample_idx in enumerate(members):
                loss = _pretrain_loss(model, vocab, corpus[int(sample_idx)],
                                      step_rng.child(f"s{j}"))
                batch_loss += loss.item()
                backward(scale(loss, 1.0 / len(members)))
            clip_global_norm(model)
            factor = cosine_lr(step_idx, total_steps, 1.0)
            opt.step(factor)
            trace.append((step_idx, primary_lr * factor, batch_loss / len(members)))
            step_idx += 1
    return trace


def finetune_reranker(model, vocab, dataset: list[QaInstance], cfg: FinetuneConfig,
                      rng: Rng, image_loader=None) -> list[tuple[int, float, float]]:
    """Fine-tune the relevance scorer; vision encoder stays frozen."""
    if cfg.task != "reranker":
        raise ValueError(f"expected a reranker config, got task {cfg.task!r}")
    model.set_trainable(("lm.", "cls_head."))
    opt = AdamW([lm_param_group(model, cfg.lr, cfg.weight_decay, include_cls_head=True)])
    max_len = model.config.lm.max_len
    total_steps = cfg.epochs * len(dataset)

    trace = []
    step_idx = 0
    for epoch in range(cfg.epochs):
        order = rng.child(f"rr/epoch{epoch}").permutation(len(dataset))
        for qi in order:
            inst = dataset[int(qi)]
            step_rng = rng.child(f"rr/step{step_idx}")
            docs, labels = build_training_batch(inst.pool, cfg.global_batch,
                                                step_rng.child("batch"))
            logits = [
                score(model, vocab, inst.question, d, max_len,
                      image_loader=image_loader, train=True, rng=step_rng.child(f"d{j}"))
                for j, d in enumerate(docs)
            ]
            loss = reranker_loss(logits, labels)
            model.zero_grads()
            backward(loss)
            clip_global_norm(model)
            opt.step(cosine_lr(step_idx, total_steps, 1.0))
            trace.append((step_idx, cfg.lr * cosine_lr(step_idx, total_steps, 1.0), loss.item()))
            step_idx += 1
    return trace


def _qa_train_contexts(inst: QaInstance, extra_distractors: int, rng: Rng) -> list[Document]:
    """Gold supporting documents first, then a few sampled distractors, to
    mirror what the reranker hands the generator at inference time."""
    gold = [d for d in inst.pool if d.id in set(inst.gold_ids)]
    rest = [d for d in inst.pool if d.id not in set(inst.gold_ids)]
    n = min(extra_distractors, len(rest))
    extra = []
    if n:
        idx = sorted(rng.sample_indices(len(rest), n).tolist())
        extra = [rest[i] for i in idx]
    return gold + extra


def finetune_qa(model, vocab, dataset: list[QaInstance], cfg: FinetuneConfig,
                rng: Rng, image_loader=None, extra_distractors: int = 0
                ) -> list[tuple[int, float, float]]:
    """Fine-tune the generator on gold contexts; vision encoder stays frozen."""
    if cfg.task != "qa":
        raise ValueError(f"expected a qa config, got task {cfg.task!r}")
    model.set_trainable(("lm.",))
    opt = AdamW([lm_param_group(model, cfg.lr, cfg.weight_decay)])
    max_len = model.config.lm.max_len
    batch = max(1, cfg.global_batch)
    n_batches = math.ceil(len(dataset) / batch)
    total_steps = cfg.epochs * n_batches

    trace = []
    step_idx = 0
    for epoch in range(cfg.epochs):
        order = rng.child(f"qa/epoch{epoch}").permutation(len(dataset))
        for b in range(n_batches):
            members = order[b * batch:(b + 1) * batch]
            step_rng = rng.child(f"qa/step{step_idx}")
            model.zero_grads()
            batch_loss = 0.0
            for j, di in enumerate(members):
                inst = dataset[int(di)]
                ex_rng = step_rng.child(f"x{j}")
                contexts = _qa_train_contexts(inst, extra_distractors, ex_rng.child("ctx"))
                seq = assemble_qa_input(vocab, inst.question, contexts,
                                        model.config.n_img_tokens, max_len)
                image_docs = [d for d in contexts if d.modality == "image"]
                if seq.image_spans and image_loader is None:
                    raise ValueError("dataset contains images but no image loader given")
                images = [image_loader(d) for d in image_docs[: len(seq.image_spans)]]
                enc = encode_multimodal(model, seq, images, train=True, rng=ex_rng)
                target = vocab.encode(inst.answers[0]).ids
                loss = qa_loss(model, enc, target, train=True, rng=ex_rng)
                batch_loss += loss.item()
                backward(scale(loss, 1.0 / len(members)))
            clip_global_norm(model)
            factor = cosine_lr(step_idx, total_steps, 1.0)
            opt.step(factor)
            trace.append((step_idx, cfg.lr * factor, batch_loss / len(members)))
            step_idx += 1
    return trace


def write_trace_csv(trace, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("step,lr,loss\n")
        for step, lr, loss in trace:
            fh.write(f"{step},{lr:.10g},{loss:.10g}\n")
