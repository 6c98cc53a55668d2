"""Procedural corpora: rendered scenes, caption/VQA pretraining data, and
entity-relation QA instances with mixed-modality candidate pools.

Scenes are one colored shape on a 2x2 cell grid, so captions and VQA answers
are verifiable from pixels alone. The QA world is a set of invented entities
with per-relation facts; each question's supporting document literally
contains the answer, distractors come from other entities, and train/eval
splits share vocabulary but never a (entity, relation) fact.
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass

import numpy as np

from fusionqa.documents import Document, QaInstance, TableDoc
from fusionqa.images import Image, load_image_ppm, save_image_ppm
from fusionqa.tensor import Rng
from fusionqa.training import PretrainSample

COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.15),
    "blue": (0.15, 0.25, 0.9),
    "yellow": (0.9, 0.85, 0.1),
    "purple": (0.6, 0.15, 0.8),
    "orange": (0.95, 0.55, 0.1),
}
SHAPES = ("square", "circle", "triangle", "cross")
POSITIONS = ("top left", "top right", "bottom left", "bottom right")
SIZES = ("large", "small")
_POS_CELL = {"top left": (0, 0), "top right": (0, 1),
             "bottom left": (1, 0), "bottom right": (1, 1)}

IMAGE_SIZE = 32
_CELL = IMAGE_SIZE // 2
_BACKGROUND = 0.12


@dataclass(frozen=True)
class SceneSpec:
    color: str
    shape: str
    position: str
    size: str = "large"


def all_scene_specs() -> list[SceneSpec]:
    return [
        SceneSpec(c, s, p, z)
        for c in COLORS for s in SHAPES for p in POSITIONS for z in SIZES
    ]


def _shape_mask(shape: str, n: int) -> np.ndarray:
    rr, cc = np.mgrid[0:n, 0:n]
    margin = max(1, n // 5)
    if shape == "square":
        return (rr >= margin) & (rr < n - margin) & (cc >= margin) & (cc < n - margin)
    if shape == "circle":
        return (rr - (n - 1) / 2) ** 2 + (cc - (n - 1) / 2) ** 2 <= (n / 2 - 2) ** 2
    if shape == "triangle":
        return (rr >= margin) & (rr < n - margin) \
            & (np.abs(cc - (n - 1) / 2) <= (rr - margin) * 0.62)
    if shape == "cross":
        arm = max(1, n // 8)
        mid_lo, mid_hi = n // 2 - arm, n // 2 + arm
        bar = (rr >= mid_lo) & (rr < mid_hi)
        col = (cc >= mid_lo) & (cc < mid_hi)
        edge = max(1, n // 8)
        return (bar & (cc >= edge) & (cc < n - edge)) | (col & (rr >= edge) & (rr < n - edge))
    raise ValueError(f"unknown shape {shape!r}")


def render_scene(spec: SceneSpec) -> Image:
    px = np.full((IMAGE_SIZE, IMAGE_SIZE, 3), _BACKGROUND, dtype=np.float32)
    r0, c0 = (_POS_CELL[spec.position][0] * _CELL, _POS_CELL[spec.position][1] * _CELL)
    box = _CELL if spec.size == "large" else _CELL // 2
    offset = 0 if spec.size == "large" else _CELL // 4
    mask = _shape_mask(spec.shape, box)
    for ch, val in enumerate(COLORS[spec.color]):
        cell = px[r0 + offset:r0 + offset + box, c0 + offset:c0 + offset + box, ch]
        cell[mask] = val
    return Image(px)


_CAPTION_PROMPTS = (
    "describe the image",
    "give a short description of the picture",
    "what does the image show",
)


def brief_caption(spec: SceneSpec) -> str:
    return f"a {spec.color} {spec.shape}"


def rich_caption(spec: SceneSpec) -> str:
    return (f"the image shows a {spec.size} {spec.color} {spec.shape} "
            f"in the {spec.position}")


def vqa_pair(spec: SceneSpec, rng: Rng) -> tuple[str, str]:
    kind = int(rng.integers(0, 4))
    if kind == 0:
        return f"what color is the {spec.shape}?", spec.color
    if kind == 1:
        return "what shape is in the image?", spec.shape
    if kind == 2:
        return f"where is the {spec.color} {spec.shape}?", spec.position
    return f"how big is the {spec.shape}?", spec.size


ENTITY_RELATIONS = ("capital", "animal", "stone")
_VALUE_POOLS = {
    "capital": ("velora", "tarsin", "quoma", "bruneth", "ismara", "koldan",
                "pyrelis", "santre", "ulvira", "mentero", "galvas", "norwyn",
                "arineth", "borlat", "cindra", "drovna", "elsted", "fornell",
                "gresham", "harwick", "istvan", "jelko", "kemris", "lovat"),
    "animal": ("fox", "owl", "bear", "wolf", "crane", "otter", "lynx", "hare",
               "heron", "badger", "marten", "stoat", "raven", "ibex", "vole", "swift"),
    "stone": ("opal", "jade", "ruby", "onyx", "agate", "topaz", "beryl", "flint",
              "garnet", "zircon", "spinel", "pyrite", "coral", "amber", "quartz", "slate"),
}

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _make_names(n: int, rng: Rng, syllables: int = 3) -> list[str]:
    names = []
    seen = set()
    while len(names) < n:
        name = "".join(
            _CONSONANTS[int(rng.integers(0, len(_CONSONANTS)))]
            + _VOWELS[int(rng.integers(0, len(_VOWELS)))]
            for _ in range(syllables)
        )
        if name not in seen:
            seen.add(name)
            names.append(name)
    return names


@dataclass
class World:
    entities: list[str]
    facts: dict  # entity -> {relation: value}
    scenes_of: dict  # entity -> two scene indices into all_scene_specs()


def generate_world(rng: Rng, n_entities: int = 100) -> World:
    """Entities with per-relation facts and two photos each. Photo answers
    depend on which photo an instance attaches, so entity identity alone
    never determines them."""
    entities = _make_names(n_entities, rng.child("names"))
    facts = {}
    scenes_of = {}
    pick = rng.child("facts")
    specs = all_scene_specs()
    primary = pick.permutation(len(specs))  # distinct first scene per entity
    for i, e in enumerate(entities):
        facts[e] = {
            rel: pool[int(pick.integers(0, len(pool)))]
            for rel, pool in _VALUE_POOLS.items()
        }
        first = int(primary[i % len(specs)])
        second = int(pick.integers(0, len(specs) - 1))
        if second >= first:
            second += 1
        scenes_of[e] = (first, second)
    return World(entities, facts, scenes_of)


def fact_sentence(entity: str, relation: str, value: str) -> str:
    return f"the {relation} of {entity} is {value}"


def fact_table(entity: str, relation: str, value: str) -> TableDoc:
    return TableDoc(header=["name", relation], rows=[[entity, value]])


def _scene_path(idx: int) -> str:
    return os.path.join("images", f"scene_{idx:03d}.ppm")


def fact_is_table(entity: str, relation: str) -> bool:
    """Stable fact -> modality assignment: about a quarter of the textual
    facts live in tables, fixed for the lifetime of the world."""
    return zlib.crc32(f"{entity}/{relation}".encode()) % 4 == 0


def photo_document(world: World, entity: str, which: int) -> Document:
    scene = world.scenes_of[entity][which]
    return Document(
        id=f"img_{entity}_{which}", modality="image",
        image_path=_scene_path(scene),
        snippet=f"a photo of {entity}", label=None,
    )


def entity_documents(world: World, entity: str, which_photo: int = 0) -> list[Document]:
    """The per-entity document set: a text or table doc per relation plus one
    of the entity's photos."""
    docs = []
    for rel in ENTITY_RELATIONS:
        value = world.facts[entity][rel]
        if fact_is_table(entity, rel):
            docs.append(Document(
                id=f"tab_{entity}_{rel}", modality="table",
                table=fact_table(entity, rel, value), label=None,
            ))
        else:
            docs.append(Document(
                id=f"txt_{entity}_{rel}", modality="text",
                text=fact_sentence(entity, rel, value), label=None,
            ))
    docs.append(photo_document(world, entity, which_photo))
    return docs


IMAGE_RELATIONS = ("photo_color", "photo_shape")


def question_keys(world: World) -> list[tuple[str, str]]:
    """(entity, relation) for every askable fact; photo_* facts are grounded
    in the entity's image."""
    keys = []
    for e in world.entities:
        keys.extend((e, rel) for rel in ENTITY_RELATIONS)
        keys.extend((e, rel) for rel in IMAGE_RELATIONS)
    return keys


def _copy_doc(doc: Document, label: str) -> Document:
    return Document(id=doc.id, modality=doc.modality, text=doc.text,
                    table=doc.table, image_path=doc.image_path,
                    snippet=doc.snippet, label=label)


def build_instance(world: World, qid: str, entity: str, relation: str,
                   rng: Rng, n_distractors: int = 9,
                   answer_style: str = "short", which_photo: int = None) -> QaInstance:
    """One question with its supporting document and same-world distractors
    drawn from other entities only. Photo questions attach one of the
    entity's photos (chosen by ``which_photo`` or the rng); the answer is
    read from that photo's scene."""
    specs = all_scene_specs()
    if relation in IMAGE_RELATIONS:
        if which_photo is None:
            which_photo = int(rng.child("photo").integers(0, 2))
        support = photo_document(world, entity, which_photo)
        spec = specs[world.scenes_of[entity][which_photo]]
        attr = relation.split("_")[1]
        question = f"what {attr} is the thing in the photo of {entity}?"
        value = spec.color if attr == "color" else spec.shape
    else:
        own_docs = entity_documents(world, entity)
        question = f"what is the {relation} of {entity}?"
        value = world.facts[entity][relation]
        support = own_docs[ENTITY_RELATIONS.index(relation)]
    if answer_style == "sentence":
        answer = (f"the {relation.split('_')[1]} in the photo of {entity} is {value}"
                  if relation in IMAGE_RELATIONS
                  else fact_sentence(entity, relation, value))
    else:
        answer = value

    others = [e for e in world.entities if e != entity]
    pick = rng.child("distractors")
    pool = [_copy_doc(support, "supporting")]
    chosen_entities = pick.sample_indices(len(others), min(n_distractors, len(others)))
    for j in np.asarray(chosen_entities).tolist():
        other = others[int(j)]
        other_docs = entity_documents(world, other,
                                      which_photo=int(pick.integers(0, 2)))
        doc = other_docs[int(pick.integers(0, len(other_docs)))]
        pool.append(_copy_doc(doc, "distractor"))
    order = rng.child("order").permutation(len(pool))
    pool = [pool[int(i)] for i in order]
    inst = QaInstance(qid=qid, question=question, pool=pool,
                      answers=[answer], gold_ids=[support.id])
    inst.validate()
    return inst


def corpus_text_lines(world: World) -> list[str]:
    """Every sentence the synthetic world can produce; vocabulary fodder."""
    from fusionqa.config import QA_PROMPT
    from fusionqa.tokenizer import serialize_table

    lines = [QA_PROMPT]
    lines.extend(_CAPTION_PROMPTS)
    for spec in all_scene_specs():
        lines.append(brief_caption(spec))
        lines.append(rich_caption(spec))
        lines.append(f"what color is the {spec.shape}?")
        lines.append("what shape is in the image?")
        lines.append(f"where is the {spec.color} {spec.shape}?")
        lines.append(f"how big is the {spec.shape}?")
    for e in world.entities:
        lines.append(f"a photo of {e}")
        lines.append(f"what color is the thing in the photo of {e}?")
        lines.append(f"what shape is the thing in the photo of {e}?")
        for rel in ENTITY_RELATIONS:
            value = world.facts[e][rel]
            lines.append(fact_sentence(e, rel, value))
            lines.append(serialize_table(fact_table(e, rel, value)))
            lines.append(f"what is the {rel} of {e}?")
    for pool in _VALUE_POOLS.values():
        lines.extend(pool)
    return lines


def caption_samples(n: int, rng: Rng, rich: bool) -> list[tuple[int, str, str]]:
    """(scene index, prompt, target) triples for stages 1 and 2."""
    specs = all_scene_specs()
    out = []
    for i in range(n):
        idx = int(rng.integers(0, len(specs)))
        prompt = _CAPTION_PROMPTS[int(rng.integers(0, len(_CAPTION_PROMPTS)))]
        target = rich_caption(specs[idx]) if rich else brief_caption(specs[idx])
        out.append((idx, prompt, target))
    return out


def vqa_samples(n: int, rng: Rng) -> list[tuple[int, str, str]]:
    specs = all_scene_specs()
    out = []
    for i in range(n):
        idx = int(rng.integers(0, len(specs)))
        q, a = vqa_pair(specs[idx], rng.child(f"q{i}"))
        out.append((idx, q, a))
    return out


def _doc_to_json(doc: Document) -> dict:
    rec = {"id": doc.id, "modality": doc.modality}
    if doc.text is not None:
        rec["text"] = doc.text
    if doc.table is not None:
        rec["table"] = {"header": doc.table.header, "rows": doc.table.rows}
    if doc.image_path is not None:
        rec["image"] = doc.image_path
    if doc.snippet is not None:
        rec["snippet"] = doc.snippet
    if doc.label is not None:
        rec["label"] = doc.label
    return rec


def instance_to_json(inst: QaInstance) -> dict:
    return {
        "qid": inst.qid,
        "question": inst.question,
        "answers": inst.answers,
        "gold_ids": inst.gold_ids,
        "pool": [_doc_to_json(d) for d in inst.pool],
    }


def generate_corpora(outdir, seed: int, n_entities: int = 100,
                     n_captions: int = 500, n_vqa: int = 500,
                     n_train: int = 300, n_heldout: int = 100,
                     n_distractors: int = 9, vocab_size: int = 600,
                     answer_style: str = "short",
                     photo_variants: int = 1) -> dict:
    """Write scene images, pretraining corpora, QA splits, and the vocab file.

    Everything is a pure function of the seed; rerunning overwrites with
    byte-identical content.
    """
    from fusionqa.tokenizer import Vocab

    rng = Rng(seed)
    os.makedirs(os.path.join(outdir, "images"), exist_ok=True)

    specs = all_scene_specs()
    for idx, spec in enumerate(specs):
        save_image_ppm(render_scene(spec), os.path.join(outdir, _scene_path(idx)))

    world = generate_world(rng.child("world"), n_entities=n_entities)

    def write_pretrain(name, samples, kind):
        with open(os.path.join(outdir, name), "w", encoding="utf-8", newline="\n") as fh:
            for idx, prompt, target in samples:
                rec = {"image": _scene_path(idx), "prompt": prompt,
                       "target": target, "kind": kind}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    write_pretrain("pretrain_stage1.jsonl",
                   caption_samples(n_captions, rng.child("cap1"), rich=False), "caption")
    write_pretrain("pretrain_stage2.jsonl",
                   caption_samples(n_captions, rng.child("cap2"), rich=True), "caption")
    write_pretrain("pretrain_stage3.jsonl",
                   vqa_samples(n_vqa, rng.child("vqa")), "vqa")

    keys = question_keys(world)
    order = rng.child("split").permutation(len(keys))
    n_total = n_train + n_heldout
    if n_total > len(keys):
        raise ValueError(
            f"asked for {n_total} questions but the world only has {len(keys)} facts"
        )
    chosen = [keys[int(i)] for i in order[:n_total]]

    def write_instances(name, selection, offset, variants):
        n_written = 0
        with open(os.path.join(outdir, name), "w", encoding="utf-8", newline="\n") as fh:
            for j, (entity, relation) in enumerate(selection):
                photo_picks = [None]
                if relation in IMAGE_RELATIONS and variants > 1:
                    # both photos of the entity: the same question text gets
                    # scene-dependent answers, so pixels must be read
                    photo_picks = list(range(min(variants, 2)))
                for v, which in enumerate(photo_picks):
                    inst = build_instance(
                        world, qid=f"q{offset + j:04d}v{v}", entity=entity,
                        relation=relation, rng=rng.child(f"inst/{offset + j}/{v}"),
                        n_distractors=n_distractors, answer_style=answer_style,
                        which_photo=which,
                    )
                    fh.write(json.dumps(instance_to_json(inst), sort_keys=True) + "\n")
                    n_written += 1
        return n_written

    n_train_written = write_instances("qa_train.jsonl", chosen[:n_train], 0,
                                      photo_variants)
    write_instances("qa_heldout.jsonl", chosen[n_train:], n_train, 1)

    vocab = Vocab.build(corpus_text_lines(world), vocab_size)
    vocab.save(os.path.join(outdir, "vocab.txt"))

    return {
        "outdir": str(outdir),
        "n_scenes": len(specs),
        "n_captions": n_captions,
        "n_vqa": n_vqa,
        "n_train": n_train,
        "n_train_instances": n_train_written,
        "n_heldout": n_heldout,
        "vocab_size": vocab.size,
        "answer_style": answer_style,
    }


def load_pretrain_corpus(path) -> list[PretrainSample]:
    """Read a pretraining JSONL; image paths resolve relative to the file."""
    base = os.path.dirname(os.path.abspath(path))
    cache = {}
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                img_path = os.path.join(base, rec["image"])
                if img_path not in cache:
                    cache[img_path] = load_image_ppm(img_path)
                samples.append(PretrainSample(
                    image=cache[img_path], prompt=rec["prompt"],
                    target=rec["target"], kind=rec["kind"],
                ))
            except (KeyError, ValueError, OSError) as exc:
                raise ValueError(f"{path}:{lineno}: bad pretraining record: {exc}") from exc
    return samples
