"""Vocabulary, encoding, and embedding-table tests."""

from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capfuse.errors import ConfigError, ParseError
from capfuse.lm import LmTrainConfig, new_lm, train_lm_in_place
from capfuse.numerics import Rng
from capfuse.vocab import (
    BOS_ID,
    EOS_ID,
    LEARNED_EMBED_DIM,
    PAD_ID,
    UNK_ID,
    EmbeddingTable,
    Vocabulary,
    build_vocab,
    embed,
    load_pretrained_vectors,
    new_learned_table,
    tokenize,
)


class TestBuildVocab:
    def test_frequency_then_lexicographic(self):
        v = build_vocab(["a a b"], 10)
        assert len(v) == 6
        assert v.id("a") == 4 and v.id("b") == 5

    def test_top_k_matches_counting_oracle(self):
        rng = Rng(31)
        tokens = []
        for i in range(100):
            tokens.extend([f"w{i:03d}"] * (1 + rng.randint(30)))
        rng.shuffle(tokens)
        corpus = [" ".join(tokens[i : i + 7]) for i in range(0, len(tokens), 7)]
        v = build_vocab(corpus, 50)
        assert len(v) == 54
        counts = Counter(t for line in corpus for t in line.split())
        oracle = {t for t, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:50]}
        assert set(v.id_to_token[4:]) == oracle

    def test_tie_break_keeps_lexicographically_first(self):
        v = build_vocab(["x y", "y x"], 1)
        assert v.id_to_token[4:] == ["x"]

    def test_empty_corpus_gives_reserved_only(self):
        v = build_vocab([], 10)
        assert len(v) == 4
        assert v.id_to_token == ["<pad>", "<bos>", "<eos>", "<unk>"]

    def test_order_independent(self):
        lines = ["c c a", "b b b a", "a c"]
        v1 = build_vocab(lines, 10)
        v2 = build_vocab(list(reversed(lines)), 10)
        assert v1 == v2

    def test_reserved_surface_forms_not_duplicated(self):
        v = build_vocab(["<unk> q <unk>"], 10)
        assert v.id_to_token.count("<unk>") == 1
        assert v.id("q") == 4


class TestEncodeDecode:
    def test_round_trip_known_tokens(self):
        v = build_vocab(["the cat sat"], 10)
        toks = ["the", "cat", "sat"]
        assert v.decode(v.encode(toks)) == toks

    def test_unknown_maps_to_unk(self):
        v = build_vocab(["a"], 10)
        assert v.encode(["zzz"]) == [UNK_ID]

    def test_bounds_layout(self):
        v = build_vocab(["a"], 10)
        assert v.encode(["a"], add_bounds=True) == [BOS_ID, v.id("a"), EOS_ID]
        assert (PAD_ID, BOS_ID, EOS_ID, UNK_ID) == (0, 1, 2, 3)

    @settings(max_examples=60, deadline=None)
    @given(
        st.lists(
            st.text(alphabet="abcdefg", min_size=1, max_size=4), min_size=0, max_size=12
        )
    )
    def test_round_trip_replaces_exactly_oov(self, tokens):
        v = build_vocab(["aa ab b c d"], 10)
        out = v.decode(v.encode(tokens))
        assert len(out) == len(tokens)
        for before, after in zip(tokens, out):
            if before in v.token_to_id:
                assert after == before
            else:
                assert after == "<unk>"

    def test_decode_strip_specials_keeps_unk(self):
        v = build_vocab(["a"], 10)
        ids = [BOS_ID, v.id("a"), UNK_ID, EOS_ID, PAD_ID]
        assert v.decode(ids, strip_specials=True) == ["a", "<unk>"]

    def test_tokenize_lowercases(self):
        assert tokenize("The Cat  SAT .") == ["the", "cat", "sat", "."]


class TestPretrainedVectors:
    def _write(self, path, rows):
        with open(path, "w", encoding="utf-8") as fh:
            for word, vec in rows:
                fh.write(word + " " + " ".join(repr(float(x)) for x in vec) + "\n")

    def test_file_rows_pass_through_exactly(self, tmp_path):
        rng = Rng(8)
        rows = [(w, rng.uniform(-3, 3, (300,))) for w in ("alpha", "beta", "gamma")]
        path = tmp_path / "vec.txt"
        self._write(path, rows)
        v = build_vocab(["alpha beta delta"], 10)
        table = load_pretrained_vectors(path, v, Rng(1))
        assert table.d_e == 300
        assert np.array_equal(table.table[v.id("alpha")], rows[0][1])
        assert np.array_equal(table.table[v.id("beta")], rows[1][1])

    def test_coverage_matches_line_scan_oracle(self, tmp_path):
        rng = Rng(9)
        words = [f"w{i}" for i in range(20)]
        rows = [(w, rng.uniform(-1, 1, (300,))) for w in words[:7]]
        path = tmp_path / "vec.txt"
        self._write(path, rows)
        vocab = build_vocab([" ".join(words)], 50)
        table = load_pretrained_vectors(path, vocab, Rng(2))
        file_words = {line.split()[0] for line in open(path, encoding="utf-8")}
        covered = [t for t in vocab.id_to_token if t in file_words]
        assert len(covered) == 7
        by_word = dict(rows)
        for token_id, token in enumerate(vocab.id_to_token):
            if token in file_words:
                assert np.array_equal(table.table[token_id], by_word[token])
            else:
                row = table.table[token_id]
                assert np.all(row >= -0.08) and np.all(row < 0.08)

    def test_missing_rows_reproducible_per_seed(self, tmp_path):
        path = tmp_path / "vec.txt"
        self._write(path, [("only", np.arange(4.0))])
        vocab = build_vocab(["only other"], 10)
        t1 = load_pretrained_vectors(path, vocab, Rng(77))
        t2 = load_pretrained_vectors(path, vocab, Rng(77))
        t3 = load_pretrained_vectors(path, vocab, Rng(78))
        assert t1.table.tobytes() == t2.table.tobytes()
        assert t1.table.tobytes() != t3.table.tobytes()

    def test_inconsistent_width_reports_line(self, tmp_path):
        path = tmp_path / "vec.txt"
        path.write_text("a 1.0 2.0\nb 1.0 2.0 3.0\n")
        with pytest.raises(ParseError, match="line 2"):
            load_pretrained_vectors(path, build_vocab(["a b"], 10), Rng(1))

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "vec.txt"
        path.write_text("")
        with pytest.raises(ParseError):
            load_pretrained_vectors(path, build_vocab(["a"], 10), Rng(1))


def _one_lm_step(table: EmbeddingTable) -> None:
    """Run one SGD training step of a tiny LM that uses `table`."""
    vocab = build_vocab(["a b"], 10)
    model = new_lm(vocab, hidden_size=5, embed_dim=table.d_e, rng=Rng(3), embedding=table)
    config = LmTrainConfig(epochs=1, lr=0.5, hidden_size=5, embed_dim=table.d_e)
    train_lm_in_place(model, ["a b"], config, Rng(4))


class TestEmbeddingModes:
    def test_embed_returns_loaded_row(self, tmp_path):
        vocab = build_vocab(["a b"], 10)
        table = new_learned_table(len(vocab), 6, Rng(5))
        row = embed(table, vocab.id("a"))
        assert np.array_equal(row, table.table[vocab.id("a")])
        row[:] = 0.0  # returned vector is a copy
        assert not np.array_equal(row, table.table[vocab.id("a")])

    def test_frozen_table_bitwise_constant_after_training(self):
        vocab = build_vocab(["a b"], 10)
        table = EmbeddingTable(Rng(6).uniform(-1, 1, (len(vocab), 6)), "pretrained-frozen")
        before = table.table.tobytes()
        _one_lm_step(table)
        assert table.table.tobytes() == before

    def test_finetuned_table_changes(self):
        vocab = build_vocab(["a b"], 10)
        table = EmbeddingTable(Rng(6).uniform(-1, 1, (len(vocab), 6)), "pretrained-finetune")
        before = table.table.copy()
        _one_lm_step(table)
        assert not np.array_equal(table.table[vocab.id("a")], before[vocab.id("a")])

    def test_embed_bounds(self):
        table = new_learned_table(5, 3, Rng(1))
        with pytest.raises(IndexError):
            embed(table, 5)

    def test_learned_default_width_is_500(self):
        assert LEARNED_EMBED_DIM == 500

    def test_unknown_mode_rejected(self):
        with pytest.raises(ConfigError):
            EmbeddingTable(np.zeros((4, 2)), "mystery")
