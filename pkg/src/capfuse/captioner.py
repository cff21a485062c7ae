"""Two-layer LSTM encoder/decoder over frame features, and its training loop.

Layer 1 consumes projected frame features for T encode steps, then a zero
"pad frame" for every decode step. Layer 2 consumes [h1_t ; word vector],
where the word slot is zero while encoding and the embedded previous word
while decoding (teacher forcing during training). The per-step output head
projects either the decoder hidden state alone or, in deep-fusion mode, its
concatenation with a frozen language model's hidden state.

Training minimizes summed per-step cross-entropy plus an optional squared
Euclidean regression from the decoder state onto the target word's
pretrained vector. That regression is a loss signal only: its output feeds
nothing downstream.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .lm import LmModel, lm_step
from .lstm import (
    LstmParams,
    LstmState,
    cell_forward,
    layer_backward,
    layer_forward,
    new_lstm_params,
    zero_state,
)
from .numerics import LOG_EPS, Rng, cross_entropy, sgd_step, softmax
from .vocab import BOS_ID, EOS_ID, EmbeddingTable, Vocabulary

logger = logging.getLogger(__name__)

FUSION_MODES = ("none", "late", "deep")


@dataclass
class FrameSequence:
    """Ordered frame-feature vectors for one clip; features are opaque inputs."""

    clip_id: str
    frames: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ShapeError(
                f"frames must be a (T, D) array with T >= 1, got {self.frames.shape}"
            )

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class CaptionPair:
    """Token-id sequence for one clip. Training captions end in <eos>;
    decoded captions may instead carry truncated=True when cut at max_len."""

    clip_id: str
    token_ids: list[int]
    log_prob: float | None = None
    truncated: bool = False

    def __post_init__(self):
        if not self.token_ids:
            raise ConfigError(f"empty caption for clip {self.clip_id!r}")


@dataclass
class CaptionerModel:
    vocab: Vocabulary
    frame_W: np.ndarray  # (d_in, feat_dim)
    frame_b: np.ndarray  # (d_in,)
    layer1: LstmParams  # input d_in, hidden h
    layer2: LstmParams  # input h + d_e, hidden h
    embedding: EmbeddingTable
    out_W: np.ndarray  # (|V|, h) or (|V|, h + h_lm) under deep fusion
    out_b: np.ndarray  # (|V|,)
    fusion_mode: str = "none"
    alpha: float | None = None  # late fusion mixing weight
    lm: LmModel | None = None
    reg_W: np.ndarray | None = None  # (d_w, h) embedding-regression head
    reg_b: np.ndarray | None = None
    target_vectors: np.ndarray | None = None  # (|V|, d_w) regression targets

    @property
    def feat_dim(self) -> int:
        return self.frame_W.shape[1]

    @property
    def frame_proj_size(self) -> int:
        return self.frame_W.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.layer1.hidden_size

    @property
    def embed_dim(self) -> int:
        return self.embedding.d_e


def new_captioner(
    vocab: Vocabulary,
    feat_dim: int,
    frame_proj_size: int,
    hidden_size: int,
    embedding: EmbeddingTable,
    rng: Rng,
    fusion_mode: str = "none",
    alpha: float | None = None,
    lm: LmModel | None = None,
    regressor_dim: int | None = None,
    target_vectors: np.ndarray | None = None,
) -> CaptionerModel:
    if fusion_mode not in FUSION_MODES:
        raise ConfigError(f"unknown fusion mode {fusion_mode!r}")
    if fusion_mode != "none":
        if lm is None:
            raise ConfigError(f"fusion mode {fusion_mode!r} requires an attached language model")
        if lm.vocab != vocab:
            raise ConfigError("captioner and language model must share one vocabulary")
    if fusion_mode == "late":
        if alpha is None or not 0.0 <= alpha <= 1.0:
            raise ConfigError(f"late fusion needs alpha in [0, 1], got {alpha}")
    if embedding.vocab_size != len(vocab):
        raise ConfigError(
            f"embedding rows ({embedding.vocab_size}) do not match |V|={len(vocab)}"
        )
    h = hidden_size
    frame_rng = rng.child("frame")
    frame_W = frame_rng.init_weights((frame_proj_size, feat_dim))
    frame_b = frame_rng.init_weights((frame_proj_size,))
    layer1 = new_lstm_params(frame_proj_size, h, rng.child("layer1"))
    layer2 = new_lstm_params(h + embedding.d_e, h, rng.child("layer2"))
    out_width = h + (lm.hidden_size if fusion_mode == "deep" else 0)
    out_rng = rng.child("out")
    out_W = out_rng.init_weights((len(vocab), out_width))
    out_b = out_rng.init_weights((len(vocab),))
    reg_W = reg_b = None
    if regressor_dim is not None:
        reg_rng = rng.child("regressor")
        reg_W = reg_rng.init_weights((regressor_dim, h))
        reg_b = reg_rng.init_weights((regressor_dim,))
    if target_vectors is not None:
        target_vectors = np.asarray(target_vectors, dtype=np.float64)
        if target_vectors.shape[0] != len(vocab):
            raise ConfigError(
                f"target vector rows ({target_vectors.shape[0]}) do not match |V|={len(vocab)}"
            )
    return CaptionerModel(
        vocab=vocab,
        frame_W=frame_W,
        frame_b=frame_b,
        layer1=layer1,
        layer2=layer2,
        embedding=embedding,
        out_W=out_W,
        out_b=out_b,
        fusion_mode=fusion_mode,
        alpha=alpha,
        lm=lm,
        reg_W=reg_W,
        reg_b=reg_b,
        target_vectors=target_vectors,
    )


def trainable_params(model: CaptionerModel) -> dict[str, np.ndarray]:
    """Every tensor updated by SGD, in fixed order.

    The attached language model and a frozen embedding table are excluded by
    construction, which is what keeps them bitwise constant under training.
    """
    params = {
        "frame_W": model.frame_W,
        "frame_b": model.frame_b,
        "layer1.W_x": model.layer1.W_x,
        "layer1.W_h": model.layer1.W_h,
        "layer1.b": model.layer1.b,
        "layer2.W_x": model.layer2.W_x,
        "layer2.W_h": model.layer2.W_h,
        "layer2.b": model.layer2.b,
    }
    if model.embedding.trainable:
        params["embedding"] = model.embedding.table
    params["out_W"] = model.out_W
    params["out_b"] = model.out_b
    if model.reg_W is not None:
        params["reg_W"] = model.reg_W
        params["reg_b"] = model.reg_b
    return params


def _frame_inputs(model: CaptionerModel, frames: FrameSequence, decode_steps: int) -> np.ndarray:
    """Layer-1 inputs: projected frames, then the projected zero pad frame."""
    if frames.feat_dim != model.feat_dim:
        raise ShapeError(
            f"frame width {frames.feat_dim} does not match model feat_dim {model.feat_dim}"
        )
    U = np.empty((frames.length + decode_steps, model.frame_proj_size))
    for t in range(frames.length):
        U[t] = model.frame_W @ frames.frames[t] + model.frame_b
    if decode_steps:
        U[frames.length :] = model.frame_W @ np.zeros(model.feat_dim) + model.frame_b
    return U


def _encode_with_caches(model: CaptionerModel, frames: FrameSequence):
    h = model.hidden_size
    U = _frame_inputs(model, frames, 0)
    H1, caches1 = layer_forward(U, model.layer1)
    Z = np.zeros((frames.length, h + model.embed_dim))
    Z[:, :h] = H1
    H2, caches2 = layer_forward(Z, model.layer2)
    s1 = LstmState(H1[-1], caches1[-1].c)
    s2 = LstmState(H2[-1], caches2[-1].c)
    return s1, s2, H1, caches1, caches2


def encode(
    model: CaptionerModel, frames: FrameSequence
) -> tuple[LstmState, LstmState, np.ndarray]:
    """Run the T encode steps; returns final layer states and all layer-1 hiddens."""
    s1, s2, h1_seq, _, _ = _encode_with_caches(model, frames)
    return s1, s2, h1_seq


@dataclass
class StepState:
    """Recurrent bundle carried between decode steps (one per caller)."""

    s1: LstmState
    s2: LstmState
    lm_state: LstmState | None = None


def init_step_state(model: CaptionerModel, frames: FrameSequence) -> StepState:
    s1, s2, _ = encode(model, frames)
    lm_state = zero_state(model.lm.hidden_size) if model.fusion_mode != "none" else None
    return StepState(s1, s2, lm_state)


def step_proposal(
    model: CaptionerModel, prev_id: int, st: StepState
) -> tuple[np.ndarray, StepState]:
    """One decode step of the model's own distribution (no late interpolation).

    In deep mode the attached LM advances here because its hidden state is
    part of the output head input; in late mode the LM is advanced by
    step_distribution instead.
    """
    zero_frame = np.zeros(model.feat_dim)
    u = model.frame_W @ zero_frame + model.frame_b
    s1, _ = cell_forward(u, st.s1, model.layer1)
    z = np.concatenate([s1.h, model.embedding.table[prev_id]])
    s2, _ = cell_forward(z, st.s2, model.layer2)
    lm_state = st.lm_state
    if model.fusion_mode == "deep":
        _, lm_state = lm_step(model.lm, prev_id, lm_state)
        hcat = np.concatenate([s2.h, lm_state.h])
    else:
        hcat = s2.h
    dist = softmax(model.out_W @ hcat + model.out_b)
    return dist, StepState(s1, s2, lm_state)


def step_distribution(
    model: CaptionerModel, prev_id: int, st: StepState
) -> tuple[np.ndarray, StepState]:
    """One decode step with the model's fusion configuration applied."""
    dist, st = step_proposal(model, prev_id, st)
    if model.fusion_mode == "late":
        p_lm, lm_state = lm_step(model.lm, prev_id, st.lm_state)
        dist = model.alpha * dist + (1.0 - model.alpha) * p_lm
        st = StepState(st.s1, st.s2, lm_state)
    return dist, st


def _check_training_caption(model: CaptionerModel, caption: CaptionPair) -> None:
    ids = caption.token_ids
    if ids[-1] != EOS_ID:
        raise ConfigError(f"caption for clip {caption.clip_id!r} does not end in <eos>")
    if any(not 0 <= i < len(model.vocab) for i in ids):
        raise ConfigError(f"caption for clip {caption.clip_id!r} has out-of-range token ids")


def caption_loss_and_grads(
    model: CaptionerModel,
    frames: FrameSequence,
    caption: CaptionPair,
    lambda_emb: float = 0.0,
    target_vectors: np.ndarray | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Teacher-forced loss and exact gradients through both layers and the encoder.

    Per decode step: cross-entropy of the (optionally deep-fused) softmax
    against the target word, plus lambda_emb times the squared distance
    between the regressed vector and the target word's pretrained vector.
    Losses are summed over steps. Late fusion never enters the training
    objective; it is a generation-time rescoring.
    """
    _check_training_caption(model, caption)
    ids = caption.token_ids
    if lambda_emb > 0:
        if target_vectors is None:
            target_vectors = model.target_vectors
        if target_vectors is None:
            raise ConfigError("lambda_emb > 0 but no target vectors supplied")
        if model.reg_W is None:
            raise ConfigError("lambda_emb > 0 but the model has no regression head")

    h = model.hidden_size
    T = frames.length
    N = len(ids)
    S = T + N
    prev_ids = [BOS_ID] + ids[:-1]

    # Layer 1 over the whole span, then layer 2; the layers only interact
    # through layer 1's hidden outputs, so full-layer passes compute the
    # same values as the interleaved per-step decode path.
    U = _frame_inputs(model, frames, N)
    H1, caches1 = layer_forward(U, model.layer1)
    Z = np.zeros((S, h + model.embed_dim))
    Z[:, :h] = H1
    for j in range(N):
        Z[T + j, h:] = model.embedding.table[prev_ids[j]]
    H2, caches2 = layer_forward(Z, model.layer2)

    lm_state = zero_state(model.lm.hidden_size) if model.fusion_mode == "deep" else None
    out_width = model.out_W.shape[1]
    hcats = np.empty((N, out_width))
    dLogits = np.empty((N, len(model.vocab)))
    residuals = np.empty((N, model.reg_W.shape[0])) if lambda_emb > 0 else None
    loss = 0.0
    for j in range(N):
        h2 = H2[T + j]
        if model.fusion_mode == "deep":
            _, lm_state = lm_step(model.lm, prev_ids[j], lm_state)
            hcat = np.concatenate([h2, lm_state.h])
        else:
            hcat = h2
        hcats[j] = hcat
        dist = softmax(model.out_W @ hcat + model.out_b)
        y = ids[j]
        loss += cross_entropy(dist, y)
        p_y = float(dist[y])
        scale = p_y / (p_y + LOG_EPS)
        dlogits = scale * dist
        dlogits[y] -= scale
        dLogits[j] = dlogits
        if lambda_emb > 0:
            r = model.reg_W @ h2 + model.reg_b
            resid = r - target_vectors[y]
            loss += lambda_emb * float(resid @ resid)
            residuals[j] = resid

    grads = {name: np.zeros_like(p) for name, p in trainable_params(model).items()}
    grads["out_W"] = dLogits.T @ hcats
    grads["out_b"] = dLogits.sum(axis=0)
    dHcat = dLogits @ model.out_W
    dH2 = np.zeros((S, h))
    dH2[T:] = dHcat[:, :h]
    if lambda_emb > 0:
        dR = (2.0 * lambda_emb) * residuals
        grads["reg_W"] = dR.T @ H2[T:]
        grads["reg_b"] = dR.sum(axis=0)
        dH2[T:] += dR @ model.reg_W

    g2, dZ = layer_backward(dH2, caches2, model.layer2)
    grads["layer2.W_x"] = g2["W_x"]
    grads["layer2.W_h"] = g2["W_h"]
    grads["layer2.b"] = g2["b"]
    if model.embedding.trainable:
        np.add.at(grads["embedding"], prev_ids, dZ[T:, h:])

    g1, dU = layer_backward(dZ[:, :h], caches1, model.layer1)
    grads["layer1.W_x"] = g1["W_x"]
    grads["layer1.W_h"] = g1["W_h"]
    grads["layer1.b"] = g1["b"]
    grads["frame_W"] = dU[:T].T @ frames.frames
    grads["frame_b"] = dU.sum(axis=0)
    return loss, grads


def score_caption(model: CaptionerModel, frames: FrameSequence, caption: CaptionPair) -> float:
    """Sum of per-step ln p(y_t | y_<t, x) along the model's decode path.

    The model's fusion configuration applies, so for fusion modes none and
    deep this equals -caption_loss_and_grads(..., lambda_emb=0) exactly.
    """
    _check_training_caption(model, caption)
    st = init_step_state(model, frames)
    prev = BOS_ID
    total = 0.0
    for y in caption.token_ids:
        dist, st = step_distribution(model, prev, st)
        total += -cross_entropy(dist, y)
        prev = y
    return total


@dataclass
class CaptionerTrainConfig:
    epochs: int
    lr: float
    clip_norm: float = 5.0
    lr_decay: float = 0.5
    lr_decay_every: int = 0
    lambda_emb: float = 0.0
    start_epoch: int = 0


def train_captioner(
    dataset: list[tuple[FrameSequence, CaptionPair]],
    config: CaptionerTrainConfig,
    model: CaptionerModel,
    rng: Rng,
) -> CaptionerModel:
    """Per-pair SGD over the shuffled dataset, deterministic given the seed.

    `model` is the starting point: a fresh new_captioner() or an
    early-fusion transplant. Attached LM weights and frozen embeddings are
    never updated. Shuffles come from child streams keyed by epoch index so
    a resumed run replays the uninterrupted schedule.
    """
    if not dataset:
        raise ConfigError("empty captioner training set")
    if model.fusion_mode != "none" and model.lm is None:
        raise ConfigError(f"fusion mode {model.fusion_mode!r} requires an attached LM")
    if config.lambda_emb > 0 and model.target_vectors is None:
        raise ConfigError("lambda_emb > 0 but the model carries no target vectors")
    params = trainable_params(model)
    for epoch in range(config.start_epoch, config.start_epoch + config.epochs):
        order = list(range(len(dataset)))
        rng.child(f"cap-epoch-{epoch}").shuffle(order)
        lr = config.lr
        if config.lr_decay_every > 0:
            lr = config.lr * config.lr_decay ** (epoch // config.lr_decay_every)
        total_loss = 0.0
        total_tokens = 0
        for idx in order:
            frames, caption = dataset[idx]
            loss, grads = caption_loss_and_grads(
                model, frames, caption, lambda_emb=config.lambda_emb
            )
            sgd_step(params, grads, lr, config.clip_norm)
            total_loss += loss
            total_tokens += len(caption.token_ids)
        logger.info(
            "captioner epoch %d: lr %.4g mean pair loss %.4f per-token loss %.4f",
            epoch,
            lr,
            total_loss / len(dataset),
            total_loss / total_tokens,
        )
    return model


def clone_with_fusion(
    model: CaptionerModel, mode: str, lm: LmModel | None, alpha: float | None
) -> CaptionerModel:
    """Shallow copy with a different generation-time fusion configuration.

    Only valid transitions that keep the output head shape are allowed:
    a deep model stays deep, and late fusion can be layered onto a plain
    model. Arrays are shared, not copied.
    """
    if model.fusion_mode == "deep" and mode != "deep":
        raise ConfigError("a deep-fusion head cannot be reconfigured away from deep mode")
    if mode == "deep" and model.fusion_mode != "deep":
        raise ConfigError("deep fusion requires a model trained with the concatenation head")
    if mode != "none":
        if lm is None:
            raise ConfigError(f"fusion mode {mode!r} requires a language model")
        if lm.vocab != model.vocab:
            raise ConfigError("fusion LM must share the captioner vocabulary")
    if mode == "late" and (alpha is None or not 0.0 <= alpha <= 1.0):
        raise ConfigError(f"late fusion needs alpha in [0, 1], got {alpha}")
    return dataclasses.replace(model, fusion_mode=mode, lm=lm, alpha=alpha)
