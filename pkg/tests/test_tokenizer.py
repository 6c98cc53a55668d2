import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusionqa.documents import Document, TableDoc
from fusionqa.tokenizer import (
    CLS_ID,
    EOS_ID,
    IMG_ID,
    PAD_ID,
    UNK_ID,
    TokenSequence,
    Vocab,
    assemble_qa_input,
    assemble_reranker_input,
    serialize_table,
)


class TestBuildVocab:
    def test_toy_corpus_contains_expected_merge(self):
        # greedy BPE by hand on {"aa aa ab"}: pairs ('a','a') and (' ','a')
        # tie at count 2, space sorts first, then ' aa', ' ab', and finally
        # 'aa' all get merged before pairs run out.
        vocab = Vocab.build(["aa aa ab"], 300)
        assert b"aa" in vocab.tokens
        assert b" a" in vocab.tokens

    def test_reserved_ids(self):
        vocab = Vocab.build(["anything"], 300)
        assert vocab.render(PAD_ID) == "<pad>"
        assert vocab.render(EOS_ID) == "</s>"
        assert vocab.render(UNK_ID) == "<unk>"
        assert vocab.render(CLS_ID) == "<cls>"
        assert vocab.render(IMG_ID) == "<img>"

    def test_deterministic_build_and_file(self, tmp_path):
        lines = ["the cat sat", "the cat ran", "a dog sat"]
        a, b = Vocab.build(lines, 280), Vocab.build(lines, 280)
        pa, pb = tmp_path / "a.txt", tmp_path / "b.txt"
        a.save(pa)
        b.save(pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError, match="empty corpus"):
            Vocab.build(["", "   "], 300)

    def test_target_size_below_alphabet_rejected(self):
        with pytest.raises(ValueError, match="target_size"):
            Vocab.build(["abcdefgh"], 6)

    def test_save_load_round_trip(self, tmp_path, tiny_vocab):
        path = tmp_path / "vocab.txt"
        tiny_vocab.save(path)
        loaded = Vocab.load(path)
        assert loaded.tokens == tiny_vocab.tokens
        loaded.save(tmp_path / "again.txt")
        assert (tmp_path / "again.txt").read_bytes() == path.read_bytes()


class TestEncodeDecode:
    def test_empty_text_is_eos_only(self, tiny_vocab):
        seq = tiny_vocab.encode("")
        assert seq.ids.tolist() == [EOS_ID]

    def test_round_trip(self, tiny_vocab):
        assert tiny_vocab.decode(tiny_vocab.encode("the capital of balor").ids) \
            == "the capital of balor"

    def test_round_trip_whitespace_normalized(self, tiny_vocab):
        out = tiny_vocab.decode(tiny_vocab.encode("  red   square ").ids)
        assert out == "red square"

    def test_never_emits_cls_or_img(self, tiny_vocab):
        ids = tiny_vocab.encode("a photo of rimek <cls> <img>").ids
        assert CLS_ID not in ids and IMG_ID not in ids

    def test_unknown_bytes_map_to_unk(self, tiny_vocab):
        ids = tiny_vocab.token_ids("baloré")  # e-acute not in corpus bytes
        assert UNK_ID in ids

    @given(st.lists(st.sampled_from(
        ["red", "blue", "photo", "balor", "capital", "the", "of"]),
        min_size=1, max_size=8))
    @settings(max_examples=60, deadline=None)
    def test_round_trip_property(self, words):
        vocab = _CORPUS_VOCAB
        text = " ".join(words)
        assert vocab.decode(vocab.encode(text).ids) == text


_CORPUS_VOCAB = Vocab.build(
    ["red blue photo balor capital the of"], 300
)


class TestSerializeTable:
    def test_single_row(self):
        t = TableDoc(header=["city", "pop"], rows=[["Oslo", "700k"]])
        assert serialize_table(t) == "city: Oslo | pop: 700k"

    def test_empty_rows(self):
        assert serialize_table(TableDoc(header=["a"], rows=[])) == ""

    def test_two_rows_joined(self):
        t = TableDoc(header=["x"], rows=[["1"], ["2"]])
        assert serialize_table(t) == "x: 1 ; x: 2"

    def test_arity_mismatch(self):
        t = TableDoc(header=["a", "b"], rows=[["only one"]])
        with pytest.raises(ValueError, match="row 0"):
            serialize_table(t)


def _text_doc(text="the capital of balor is venta"):
    return Document(id="d0", modality="text", text=text)


def _image_doc(snippet="a photo of rimek"):
    return Document(id="d1", modality="image", image_path="x.ppm", snippet=snippet)


class TestAssembleReranker:
    def test_text_layout(self, tiny_vocab):
        seq = assemble_reranker_input(tiny_vocab, "what is the capital of balor?",
                                      _text_doc(), 4, 128)
        ids = seq.ids.tolist()
        assert ids[0] == CLS_ID
        assert ids.count(EOS_ID) == 2
        assert ids[-1] == EOS_ID
        assert seq.image_spans == []

    def test_image_doc_span(self, tiny_vocab):
        seq = assemble_reranker_input(tiny_vocab, "what color?", _image_doc(), 16, 128)
        assert len(seq.image_spans) == 1
        start, length = seq.image_spans[0]
        assert length == 16
        assert all(i == IMG_ID for i in seq.ids[start:start + length])
        seq.validate(128)

    def test_overlong_doc_truncated_to_max(self, tiny_vocab):
        long_doc = _text_doc("balor " * 300)
        seq = assemble_reranker_input(tiny_vocab, "what is the capital of balor?",
                                      long_doc, 4, 64)
        assert len(seq) == 64
        assert seq.ids[-1] == EOS_ID
        # question survives intact at the front
        q = tiny_vocab.token_ids("what is the capital of balor?")
        assert seq.ids[1:1 + len(q)].tolist() == q

    def test_question_too_long_rejected(self, tiny_vocab):
        with pytest.raises(ValueError, match="question"):
            assemble_reranker_input(tiny_vocab, "balor " * 100, _text_doc(), 4, 32)

    def test_whole_span_truncation(self, tiny_vocab):
        # max_len chosen so the cut would land inside the image run
        q = "what color is the shape in the photo of rimek?"
        head_len = 1 + len(tiny_vocab.token_ids(q)) + 1
        seq = assemble_reranker_input(tiny_vocab, q, _image_doc(), 16,
                                      head_len + 8 + 1)
        assert seq.image_spans == []  # dropped whole, not split
        assert not np.any(seq.ids == IMG_ID)

    def test_empty_doc_rejected(self, tiny_vocab):
        with pytest.raises(ValueError, match="empty"):
            assemble_reranker_input(tiny_vocab, "q", _text_doc(""), 4, 64)


class TestAssembleQa:
    def test_zero_contexts(self, tiny_vocab):
        seq = assemble_qa_input(tiny_vocab, "what is the capital of balor?", [], 4, 128)
        assert seq.ids[-1] == EOS_ID
        assert seq.ids.tolist().count(EOS_ID) == 1
        assert CLS_ID not in seq.ids

    def test_two_image_contexts_disjoint_spans(self, tiny_vocab):
        docs = [_image_doc("a photo of rimek"), _image_doc("a photo of balor")]
        seq = assemble_qa_input(tiny_vocab, "what color?", docs, 8, 256)
        assert len(seq.image_spans) == 2
        (s1, l1), (s2, l2) = seq.image_spans
        assert s1 + l1 <= s2
        seq.validate(256)

    def test_context_order_preserved(self, tiny_vocab):
        d1 = _text_doc("the capital of balor is venta")
        d2 = _text_doc("the stone of rimek is opal")
        seq12 = assemble_qa_input(tiny_vocab, "q", [d1, d2], 4, 256)
        seq21 = assemble_qa_input(tiny_vocab, "q", [d2, d1], 4, 256)
        assert seq12.ids.tolist() != seq21.ids.tolist()
        a = tiny_vocab.token_ids("the capital of balor is venta")
        joined = seq12.ids.tolist()
        first_pos = _find_sub(joined, a)
        b = tiny_vocab.token_ids("the stone of rimek is opal")
        second_pos = _find_sub(joined, b)
        assert first_pos < second_pos

    def test_custom_prompt_plumbed(self, tiny_vocab):
        seq = assemble_qa_input(tiny_vocab, "what?", [], 4, 128, prompt="describe the image")
        lead = tiny_vocab.token_ids("describe the image what?")
        assert seq.ids[: len(lead)].tolist() == lead


def _find_sub(haystack, needle):
    for i in range(len(haystack) - len(needle) + 1):
        if haystack[i:i + len(needle)] == needle:
            return i
    raise AssertionError("subsequence not found")


@st.composite
def random_documents(draw):
    modality = draw(st.sampled_from(["text", "table", "image"]))
    if modality == "text":
        words = draw(st.lists(st.sampled_from(["red", "blue", "photo", "of", "balor"]),
                              min_size=1, max_size=40))
        return Document(id="d", modality="text", text=" ".join(words))
    if modality == "table":
        ncols = draw(st.integers(1, 3))
        nrows = draw(st.integers(1, 4))
        header = [f"h{i}" for i in range(ncols)]
        rows = [[draw(st.sampled_from(["red", "blue", "balor"])) for _ in range(ncols)]
                for _ in range(nrows)]
        return Document(id="d", modality="table", table=TableDoc(header, rows))
    snippet = draw(st.one_of(st.none(), st.just("a photo of balor")))
    return Document(id="d", modality="image", image_path="x.ppm", snippet=snippet)


class TestFuzzInvariants:
    @given(doc=random_documents(), n_img=st.integers(1, 24),
           max_len=st.integers(24, 96))
    @settings(max_examples=120, deadline=None)
    def test_reranker_sequences_always_valid(self, doc, n_img, max_len):
        vocab = _CORPUS_VOCAB
        try:
            seq = assemble_reranker_input(vocab, "photo of balor", doc, n_img, max_len)
        except ValueError:
            return  # question-too-long style rejections are fine
        seq.validate(max_len)
        assert seq.ids[0] == CLS_ID
        # spans kept whole or dropped whole
        for start, length in seq.image_spans:
            assert length == n_img

    @given(docs=st.lists(random_documents(), min_size=0, max_size=4),
           n_img=st.integers(1, 12), max_len=st.integers(32, 128))
    @settings(max_examples=120, deadline=None)
    def test_qa_sequences_always_valid(self, docs, n_img, max_len):
        vocab = _CORPUS_VOCAB
        try:
            seq = assemble_qa_input(vocab, "photo of balor", docs, n_img, max_len)
        except ValueError:
            return
        seq.validate(max_len)
        for start, length in seq.image_spans:
            assert length == n_img


class TestTokenSequenceValidation:
    def test_span_over_non_img_rejected(self):
        seq = TokenSequence(np.array([CLS_ID, 5, 6]), image_spans=[(1, 2)])
        with pytest.raises(ValueError, match="non-placeholder"):
            seq.validate()

    def test_overlapping_spans_rejected(self):
        seq = TokenSequence(np.array([IMG_ID] * 6), image_spans=[(0, 4), (2, 2)])
        with pytest.raises(ValueError, match="overlap"):
            seq.validate()
