"""Sentence generation: greedy and beam search with ensembling in the loop.

Each step builds the next-token distribution per model (fusion applied per
that model's configuration), averages across models with the given weights,
and masks <pad>/<bos> out of the candidate set. Hypothesis scores
accumulate the log of the unmasked fused probability of each chosen token,
so a finished hypothesis's score equals score_caption on its sequence.
Scoring uses summed log-probabilities with no length normalization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .captioner import CaptionerModel, CaptionPair, FrameSequence, StepState
from .captioner import init_step_state, step_distribution
from .errors import ConfigError
from .numerics import LOG_EPS
from .vocab import BOS_ID, EOS_ID, PAD_ID


@dataclass
class Hypothesis:
    token_ids: list[int]
    log_prob: float
    states: list[StepState]
    finished: bool = False
    truncated: bool = False


def ensemble_next_distribution(
    dists: list[np.ndarray], weights: list[float]
) -> np.ndarray:
    """Elementwise weighted average of probability vectors."""
    if len(dists) != len(weights):
        raise ConfigError(f"{len(dists)} distributions but {len(weights)} weights")
    if not dists:
        raise ConfigError("empty distribution list")
    length = dists[0].shape[0]
    if any(d.shape != (length,) for d in dists):
        raise ConfigError("ensemble distributions differ in length")
    if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
        raise ConfigError(f"weights must be nonnegative and sum to 1, got {weights}")
    out = np.zeros(length)
    for d, w in zip(dists, weights):
        out += w * d
    return out


def _check_models(models: list[CaptionerModel], weights: list[float] | None):
    if not models:
        raise ConfigError("empty model list")
    for m in models[1:]:
        if m.vocab != models[0].vocab:
            raise ConfigError("ensemble members must share one vocabulary")
    if weights is None:
        weights = [1.0 / len(models)] * len(models)
    if len(weights) != len(models):
        raise ConfigError(f"{len(models)} models but {len(weights)} weights")
    if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
        raise ConfigError(f"weights must be nonnegative and sum to 1, got {weights}")
    return weights


def _ensemble_step(
    models: list[CaptionerModel],
    weights: list[float],
    prev_id: int,
    states: list[StepState],
) -> tuple[np.ndarray, list[StepState]]:
    dists = []
    new_states = []
    for model, st in zip(models, states):
        dist, st2 = step_distribution(model, prev_id, st)
        dists.append(dist)
        new_states.append(st2)
    return ensemble_next_distribution(dists, weights), new_states


def beam_search(
    models: list[CaptionerModel],
    weights: list[float] | None,
    frames: FrameSequence,
    beam: int,
    max_len: int,
) -> list[CaptionPair]:
    """Standard beam search over summed log-probabilities.

    Finished hypotheses retire when <eos> is selected; anything still alive
    at max_len retires truncated. Returns up to `beam` results, best first,
    with deterministic tie-breaks by token id.
    """
    if beam < 1:
        raise ConfigError(f"beam width must be >= 1, got {beam}")
    if max_len < 1:
        raise ConfigError(f"max_len must be >= 1, got {max_len}")
    weights = _check_models(models, weights)
    root = Hypothesis(
        token_ids=[],
        log_prob=0.0,
        states=[init_step_state(m, frames) for m in models],
    )
    live = [root]
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        candidates = []  # (neg score, token id, hyp order, hyp, new states)
        for order, hyp in enumerate(live):
            prev = hyp.token_ids[-1] if hyp.token_ids else BOS_ID
            dist, new_states = _ensemble_step(models, weights, prev, hyp.states)
            for tok in range(dist.shape[0]):
                if tok in (PAD_ID, BOS_ID):
                    continue
                score = hyp.log_prob + math.log(float(dist[tok]) + LOG_EPS)
                candidates.append((-score, tok, order, hyp, new_states))
        candidates.sort(key=lambda c: (c[0], c[1], c[2]))
        live = []
        for neg_score, tok, _, hyp, new_states in candidates[:beam]:
            ext = Hypothesis(
                token_ids=hyp.token_ids + [tok],
                log_prob=-neg_score,
                states=new_states,
                finished=tok == EOS_ID,
            )
            (finished if ext.finished else live).append(ext)
        if not live:
            break
    for hyp in live:
        hyp.truncated = True
        finished.append(hyp)
    finished.sort(key=lambda hy: (-hy.log_prob, hy.token_ids))
    return [
        CaptionPair(frames.clip_id, hy.token_ids, log_prob=hy.log_prob, truncated=hy.truncated)
        for hy in finished[:beam]
    ]


def greedy_decode(
    models: list[CaptionerModel],
    weights: list[float] | None,
    frames: FrameSequence,
    max_len: int,
) -> CaptionPair:
    """Argmax of the masked, renormalized fused distribution at every step."""
    if max_len < 1:
        raise ConfigError(f"max_len must be >= 1, got {max_len}")
    weights = _check_models(models, weights)
    states = [init_step_state(m, frames) for m in models]
    ids: list[int] = []
    log_prob = 0.0
    prev = BOS_ID
    for _ in range(max_len):
        dist, states = _ensemble_step(models, weights, prev, states)
        masked = dist.copy()
        masked[PAD_ID] = 0.0
        masked[BOS_ID] = 0.0
        masked /= masked.sum()
        tok = int(np.argmax(masked))
        ids.append(tok)
        log_prob += math.log(float(dist[tok]) + LOG_EPS)
        prev = tok
        if tok == EOS_ID:
            return CaptionPair(frames.clip_id, ids, log_prob=log_prob)
    return CaptionPair(frames.clip_id, ids, log_prob=log_prob, truncated=True)
