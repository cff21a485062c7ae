"""Knowledge injection from a text-trained LM into the captioner.

Three mechanisms:

* early fusion: transplant the LM's embedding and recurrent weights into
  the captioner's language layer before fine-tuning on paired data;
* late fusion: convex per-step interpolation
  alpha * p_vm + (1 - alpha) * p_lm of the two next-word distributions;
* deep fusion: concatenate the decoder and LM hidden states and project the
  pair to vocabulary logits, training everything except the LM itself.

Plus grid tuning of the late-fusion alpha on validation likelihood.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .captioner import (
    CaptionerModel,
    CaptionPair,
    FrameSequence,
    clone_with_fusion,
    init_step_state,
    new_captioner,
    step_proposal,
)
from .errors import ConfigError, ShapeError
from .lm import LmModel, lm_step
from .lstm import zero_state
from .numerics import LOG_EPS, Rng, affine, softmax
from .vocab import BOS_ID, EmbeddingTable

logger = logging.getLogger(__name__)


@dataclass
class FusionConfig:
    """Serialized fusion choice; alpha accompanies late mode only."""

    mode: str = "none"
    alpha: float | None = None

    def __post_init__(self):
        if self.mode not in ("none", "early", "late", "deep"):
            raise ConfigError(f"unknown fusion mode {self.mode!r}")
        if self.mode == "late":
            if self.alpha is None or not 0.0 <= self.alpha <= 1.0:
                raise ConfigError(f"late fusion needs alpha in [0, 1], got {self.alpha}")
        elif self.alpha is not None:
            raise ConfigError(f"alpha is only meaningful in late mode, got mode {self.mode!r}")


def late_fuse(p_vm: np.ndarray, p_lm: np.ndarray, alpha: float) -> np.ndarray:
    """alpha * p_vm + (1 - alpha) * p_lm, elementwise over a shared vocabulary."""
    p_vm = np.asarray(p_vm, dtype=np.float64)
    p_lm = np.asarray(p_lm, dtype=np.float64)
    if p_vm.shape != p_lm.shape:
        raise ShapeError(
            f"late_fuse distributions differ in length: {p_vm.shape} vs {p_lm.shape}"
        )
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * p_vm + (1.0 - alpha) * p_lm


def deep_fuse_distribution(
    h_vm: np.ndarray, h_lm: np.ndarray, W: np.ndarray, b: np.ndarray
) -> np.ndarray:
    """softmax(W [h_vm ; h_lm] + b): the concatenation head's distribution."""
    h_vm = np.asarray(h_vm, dtype=np.float64)
    h_lm = np.asarray(h_lm, dtype=np.float64)
    if h_vm.ndim != 1 or h_lm.ndim != 1:
        raise ShapeError(
            f"hidden states must be vectors, got {h_vm.shape} and {h_lm.shape}"
        )
    return softmax(affine(W, np.concatenate([h_vm, h_lm]), b))


def init_early_fusion(
    lm: LmModel,
    feat_dim: int,
    frame_proj_size: int,
    rng: Rng,
    hidden_size: int | None = None,
    embed_dim: int | None = None,
    regressor_dim: int | None = None,
    target_vectors: np.ndarray | None = None,
) -> CaptionerModel:
    """Captioner starting point with the LM transplanted into the language layer.

    The embedding table is a copy of the LM's; layer 2's recurrent matrix,
    bias, and the input columns that multiply the word embedding are copies
    of the LM's single layer. Everything else (layer 1, the frame
    projection, the output head, layer 2's columns over the layer-1 hidden
    slice) is fresh random init from rng. The result trains as a plain
    captioner afterwards.
    """
    if hidden_size is not None and hidden_size != lm.hidden_size:
        raise ConfigError(
            f"captioner hidden size {hidden_size} != LM hidden size {lm.hidden_size}"
        )
    if embed_dim is not None and embed_dim != lm.embed_dim:
        raise ConfigError(
            f"captioner embedding width {embed_dim} != LM embedding width {lm.embed_dim}"
        )
    h = lm.hidden_size
    model = new_captioner(
        vocab=lm.vocab,
        feat_dim=feat_dim,
        frame_proj_size=frame_proj_size,
        hidden_size=h,
        embedding=EmbeddingTable(lm.embedding.table.copy(), "learned-onehot"),
        rng=rng,
        fusion_mode="none",
        regressor_dim=regressor_dim,
        target_vectors=target_vectors,
    )
    model.layer2.W_x[:, h:] = lm.lstm.W_x
    model.layer2.W_h[:] = lm.lstm.W_h
    model.layer2.b[:] = lm.lstm.b
    return model


def fused_validation_nll(
    model: CaptionerModel,
    lm: LmModel,
    pairs: list[tuple[FrameSequence, CaptionPair]],
    alpha: float,
) -> float:
    """Mean per-token -ln of the interpolated probability of reference captions."""
    if model.fusion_mode == "late":
        raise ConfigError("tune over the base proposal, not an already late-fused model")
    total = 0.0
    count = 0
    for frames, caption in pairs:
        st = init_step_state(model, frames)
        lm_state = zero_state(lm.hidden_size)
        prev = BOS_ID
        for y in caption.token_ids:
            p_vm, st = step_proposal(model, prev, st)
            p_lm, lm_state = lm_step(lm, prev, lm_state)
            fused = late_fuse(p_vm, p_lm, alpha)
            total += -np.log(float(fused[y]) + LOG_EPS)
            count += 1
            prev = y
    return total / count


def tune_alpha(
    model: CaptionerModel,
    lm: LmModel,
    validation: list[tuple[FrameSequence, CaptionPair]],
    grid: list[float],
) -> float:
    """Grid value minimizing fused validation NLL; ties go to larger alpha.

    The grid must contain 1.0, which makes tuned late fusion never worse
    than the plain model on this objective.
    """
    if not validation:
        raise ConfigError("empty validation set for alpha tuning")
    if not grid:
        raise ConfigError("empty alpha grid")
    if any(not 0.0 <= a <= 1.0 for a in grid):
        raise ConfigError(f"alpha grid values must lie in [0, 1]: {grid}")
    if 1.0 not in grid:
        raise ConfigError("alpha grid must include 1.0")
    best_alpha = None
    best_nll = None
    for alpha in sorted(grid):
        nll = fused_validation_nll(model, lm, validation, alpha)
        logger.info("alpha %.3f: validation NLL %.6f", alpha, nll)
        if best_nll is None or nll <= best_nll:
            best_alpha, best_nll = alpha, nll
    return best_alpha


__all__ = [
    "FusionConfig",
    "late_fuse",
    "deep_fuse_distribution",
    "init_early_fusion",
    "fused_validation_nll",
    "tune_alpha",
    "clone_with_fusion",
]
