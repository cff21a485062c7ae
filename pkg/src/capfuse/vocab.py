"""Vocabulary construction, token encoding, and word-embedding tables.

Three embedding modes are supported: a learned table trained from scratch
(the one-hot-to-dense projection), a pretrained table loaded from a text
vector file and kept frozen, and the same pretrained table fine-tuned
during training.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ParseError
from .numerics import INIT_SCALE, Rng

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

EMBEDDING_MODES = ("learned-onehot", "pretrained-frozen", "pretrained-finetune")

# Default width of a learned embedding; pretrained modes take the file width.
LEARNED_EMBED_DIM = 500


def tokenize(line: str) -> list[str]:
    """Lowercase + whitespace split. Punctuation is pre-separated upstream."""
    return line.lower().split()


class Vocabulary:
    """Bidirectional token/id table with four reserved leading ids.

    Ids are contiguous from 0; ids 0..3 are <pad>, <bos>, <eos>, <unk>.
    Lookup of any unknown token yields the <unk> id.
    """

    def __init__(self, tokens: Sequence[str]):
        self.id_to_token: list[str] = list(RESERVED_TOKENS)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(RESERVED_TOKENS)}
        for tok in tokens:
            if tok in self.token_to_id:
                raise ConfigError(f"duplicate vocabulary token {tok!r}")
            self.token_to_id[tok] = len(self.id_to_token)
            self.id_to_token.append(tok)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.id_to_token):
            raise IndexError(f"token id {token_id} out of range (|V|={len(self)})")
        return self.id_to_token[token_id]

    def encode(self, tokens: Sequence[str], add_bounds: bool = False) -> list[int]:
        ids = [self.id(t) for t in tokens]
        if add_bounds:
            return [BOS_ID] + ids + [EOS_ID]
        return ids

    def decode(self, ids: Sequence[int], strip_specials: bool = False) -> list[str]:
        toks = [self.token(i) for i in ids]
        if strip_specials:
            drop = {RESERVED_TOKENS[PAD_ID], RESERVED_TOKENS[BOS_ID], RESERVED_TOKENS[EOS_ID]}
            toks = [t for t in toks if t not in drop]
        return toks


def build_vocab(corpus: Iterable[str], max_size: int) -> Vocabulary:
    """Keep the max_size most frequent tokens, ties broken lexicographically.

    Reserved tokens are always present on top of max_size. Corpus tokens that
    collide with a reserved surface form are not double-added. An empty
    corpus yields the reserved-only vocabulary.
    """
    if max_size < 1:
        raise ConfigError(f"max_size must be >= 1, got {max_size}")
    counts: Counter[str] = Counter()
    for sentence in corpus:
        counts.update(tokenize(sentence))
    for reserved in RESERVED_TOKENS:
        counts.pop(reserved, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary([tok for tok, _ in ranked[:max_size]])


@dataclass
class EmbeddingTable:
    """|V| x d_e row-per-token table.

    In pretrained-frozen mode the table receives no gradient updates and is
    bitwise constant across training.
    """

    table: np.ndarray
    mode: str

    def __post_init__(self):
        if self.mode not in EMBEDDING_MODES:
            raise ConfigError(f"unknown embedding mode {self.mode!r}")
        self.table = np.asarray(self.table, dtype=np.float64)
        if self.table.ndim != 2:
            raise ConfigError(f"embedding table must be 2-d, got shape {self.table.shape}")

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]

    @property
    def d_e(self) -> int:
        return self.table.shape[1]

    @property
    def trainable(self) -> bool:
        return self.mode != "pretrained-frozen"


def new_learned_table(vocab_size: int, d_e: int, rng: Rng) -> EmbeddingTable:
    return EmbeddingTable(rng.init_weights((vocab_size, d_e)), "learned-onehot")


def embed(table: EmbeddingTable, token_id: int) -> np.ndarray:
    """Row token_id as a fresh vector."""
    if not 0 <= token_id < table.vocab_size:
        raise IndexError(
            f"token id {token_id} out of range for table with {table.vocab_size} rows"
        )
    return table.table[token_id].copy()


def load_pretrained_vectors(
    path, vocab: Vocabulary, rng: Rng, mode: str = "pretrained-frozen"
) -> EmbeddingTable:
    """Build a table from a `word v1 ... vd` text file.

    Rows for vocabulary words found in the file carry the file values
    exactly; every other row (reserved tokens included) is drawn uniform
    over [-INIT_SCALE, INIT_SCALE) in id order, so coverage gaps are
    reproducible under the same seed. Width is inferred from the first line.
    """
    if mode == "learned-onehot":
        raise ConfigError("a loaded vector table cannot be in learned-onehot mode")
    vectors: dict[str, np.ndarray] = {}
    d_e = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            word, values = parts[0], parts[1:]
            if d_e is None:
                d_e = len(values)
                if d_e == 0:
                    raise ParseError(f"{path}: line {lineno}: no vector values")
            if len(values) != d_e:
                raise ParseError(
                    f"{path}: line {lineno}: expected {d_e} values, got {len(values)}"
                )
            try:
                vec = np.array([float(v) for v in values], dtype=np.float64)
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
            if word in vocab.token_to_id:
                vectors[word] = vec
    if d_e is None:
        raise ParseError(f"{path}: empty vector file")
    table = np.empty((len(vocab), d_e), dtype=np.float64)
    for token_id, token in enumerate(vocab.id_to_token):
        if token in vectors:
            table[token_id] = vectors[token]
        else:
            table[token_id] = rng.uniform(-INIT_SCALE, INIT_SCALE, (d_e,))
    return EmbeddingTable(table, mode)
