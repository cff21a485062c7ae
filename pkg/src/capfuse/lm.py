"""Single-layer LSTM language model: next-word training and perplexity.

The trained model serves three roles downstream: it seeds the captioner's
language layer at initialization (weight transplant), interpolates with the
captioner's per-step distribution during decoding, and contributes its
hidden state to the concatenation head. In the latter two roles its weights
stay frozen.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError
from .lstm import LstmParams, LstmState, cell_forward, new_lstm_params, sequence_bptt, zero_state
from .numerics import Rng, sgd_step, softmax
from .vocab import EmbeddingTable, Vocabulary, build_vocab, new_learned_table, tokenize

logger = logging.getLogger(__name__)


@dataclass
class LmModel:
    embedding: EmbeddingTable
    lstm: LstmParams
    out_W: np.ndarray
    out_b: np.ndarray
    vocab: Vocabulary

    @property
    def hidden_size(self) -> int:
        return self.lstm.hidden_size

    @property
    def embed_dim(self) -> int:
        return self.embedding.d_e


@dataclass
class LmTrainConfig:
    epochs: int
    lr: float
    clip_norm: float = 5.0
    hidden_size: int = 256
    embed_dim: int = 500
    lr_decay: float = 0.5
    lr_decay_every: int = 0
    max_vocab: int = 10_000
    start_epoch: int = 0


def new_lm(
    vocab: Vocabulary,
    hidden_size: int,
    embed_dim: int,
    rng: Rng,
    embedding: EmbeddingTable | None = None,
) -> LmModel:
    if embedding is None:
        embedding = new_learned_table(len(vocab), embed_dim, rng.child("embedding"))
    elif embedding.vocab_size != len(vocab):
        raise ConfigError(
            f"embedding rows ({embedding.vocab_size}) do not match |V|={len(vocab)}"
        )
    lstm = new_lstm_params(embedding.d_e, hidden_size, rng.child("lstm"))
    out_rng = rng.child("out")
    out_W = out_rng.init_weights((len(vocab), hidden_size))
    out_b = out_rng.init_weights((len(vocab),))
    return LmModel(embedding, lstm, out_W, out_b, vocab)


def lm_trainable_params(model: LmModel) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    if model.embedding.trainable:
        params["embedding"] = model.embedding.table
    params["lstm.W_x"] = model.lstm.W_x
    params["lstm.W_h"] = model.lstm.W_h
    params["lstm.b"] = model.lstm.b
    params["out_W"] = model.out_W
    params["out_b"] = model.out_b
    return params


def _epoch_lr(base: float, epoch: int, decay: float, every: int) -> float:
    if every <= 0:
        return base
    return base * decay ** (epoch // every)


def train_lm(
    corpus: Sequence[str],
    config: LmTrainConfig,
    rng: Rng,
    vocab: Vocabulary | None = None,
) -> LmModel:
    """SGD over <bos> w1..wN <eos> next-word prediction, one sentence at a time.

    Deterministic for a given seed: initialization and the per-epoch corpus
    shuffles are derived from child streams of rng, keyed by epoch index, so
    a run resumed at epoch k replays the uninterrupted schedule. Train
    perplexity is logged per epoch.
    """
    sentences = [s for s in corpus]
    if not sentences:
        raise ConfigError("empty language-model corpus")
    if vocab is None:
        vocab = build_vocab(sentences, config.max_vocab)
    model = new_lm(vocab, config.hidden_size, config.embed_dim, rng.child("init"))
    train_lm_in_place(model, sentences, config, rng)
    return model


def train_lm_in_place(
    model: LmModel, sentences: Sequence[str], config: LmTrainConfig, rng: Rng
) -> list[float]:
    """Run the epoch loop on an existing model; returns per-epoch perplexity."""
    history: list[float] = []
    encoded = [model.vocab.encode(tokenize(s), add_bounds=True) for s in sentences]
    for epoch in range(config.start_epoch, config.start_epoch + config.epochs):
        order = list(range(len(encoded)))
        rng.child(f"lm-epoch-{epoch}").shuffle(order)
        lr = _epoch_lr(config.lr, epoch, config.lr_decay, config.lr_decay_every)
        total_loss = 0.0
        total_tokens = 0
        for idx in order:
            ids = encoded[idx]
            inputs = model.embedding.table[ids[:-1]]
            targets = ids[1:]
            loss, grads, d_inputs = sequence_bptt(
                inputs, targets, model.lstm, (model.out_W, model.out_b)
            )
            gradmap = {
                "lstm.W_x": grads["W_x"],
                "lstm.W_h": grads["W_h"],
                "lstm.b": grads["b"],
                "out_W": grads["head_W"],
                "out_b": grads["head_b"],
            }
            if model.embedding.trainable:
                table_grad = np.zeros_like(model.embedding.table)
                np.add.at(table_grad, ids[:-1], d_inputs)
                gradmap["embedding"] = table_grad
            sgd_step(lm_trainable_params(model), gradmap, lr, config.clip_norm)
            total_loss += loss
            total_tokens += len(targets)
        ppl = math.exp(total_loss / total_tokens)
        history.append(ppl)
        logger.info("lm epoch %d: lr %.4g train perplexity %.4f", epoch, lr, ppl)
    return history


def lm_step(
    model: LmModel, prev_token: int, state: LstmState
) -> tuple[np.ndarray, LstmState]:
    """One recurrence step: p(. | history), new state.

    All recurrence is carried by the passed state; the model itself is
    read-only, so concurrent callers each own their own state.
    """
    if not 0 <= prev_token < len(model.vocab):
        raise IndexError(f"token id {prev_token} out of range (|V|={len(model.vocab)})")
    x = model.embedding.table[prev_token]
    new_state, _ = cell_forward(x, state, model.lstm)
    dist = softmax(model.out_W @ new_state.h + model.out_b)
    return dist, new_state


def perplexity(model: LmModel, corpus: Iterable[str]) -> float:
    """exp(mean per-token -ln p); targets include <eos> but never <bos>."""
    total = 0.0
    count = 0
    for sentence in corpus:
        ids = model.vocab.encode(tokenize(sentence), add_bounds=True)
        state = zero_state(model.hidden_size)
        for prev, target in zip(ids[:-1], ids[1:]):
            dist, state = lm_step(model, prev, state)
            total += -math.log(float(dist[target]))
            count += 1
    if count == 0:
        raise ConfigError("perplexity over an empty corpus")
    return math.exp(total / count)


def unigram_perplexity(corpus: Iterable[str]) -> float:
    """exp of the entropy of the corpus's own token distribution.

    Tokens are counted the way perplexity targets are (sentence tokens plus
    one <eos> each). This is the best any context-free unigram model can
    score on the corpus, a useful floor for judging the LSTM.
    """
    counts: Counter[str] = Counter()
    for sentence in corpus:
        counts.update(tokenize(sentence))
        counts["<eos>"] += 1
    total = sum(counts.values())
    if total == 0:
        raise ConfigError("unigram perplexity over an empty corpus")
    entropy = -sum((c / total) * math.log(c / total) for c in counts.values())
    return math.exp(entropy)
