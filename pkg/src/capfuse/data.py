"""Persistence and the seeded synthetic world.

The synthetic world stands in for real video corpora at desk scale: each
clip is a latent (subject, verb, object) triple, its frames are noisy
concatenated one-hot blocks for the triple, and its captions are template
realizations with synonym substitution. A larger unpaired text corpus from
the same grammar (always covering the synonyms) plays the external-text
role, and a generated vector file in the standard `word v1 ... vd` layout
plays the pretrained-embedding role, with synonyms placed close together.

File formats owned here:

* feature file: binary, magic "VFEA1", little-endian; u32 clip count; per
  clip u16 id length + UTF-8 id, u32 T, u32 D, then T*D float32 values;
* caption file: UTF-8 TSV `clip_id<TAB>space-tokenized sentence`, multiple
  lines per clip allowed;
* checkpoint: magic "VCKPT1", a sorted-keys JSON manifest naming every
  tensor with shape and element offset, a float64 little-endian blob, and
  a trailing whole-file SHA-256 checksum.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .captioner import CaptionerModel, CaptionPair, FrameSequence
from .errors import (
    ConfigError,
    CorruptionError,
    FormatError,
    ParseError,
    UnsupportedVersionError,
    ValidationError,
)
from .lm import LmModel
from .lstm import LstmParams
from .numerics import Rng
from .vocab import EOS_ID, EmbeddingTable, Vocabulary, tokenize

FEATURE_MAGIC = b"VFEA1"
CHECKPOINT_MAGIC = b"VCKPT1\n"
CHECKPOINT_VERSION = 1

# Word banks: (base, synonym) per slot, all surface forms distinct.
_SUBJECT_BANK = [
    ("cat", "kitten"), ("dog", "puppy"), ("bird", "sparrow"), ("horse", "pony"),
    ("monkey", "ape"), ("rabbit", "bunny"), ("turtle", "tortoise"), ("panda", "bear"),
    ("fox", "vixen"), ("sheep", "lamb"), ("tiger", "leopard"), ("mouse", "rodent"),
]
_VERB_BANK = [
    ("eats", "devours"), ("pushes", "shoves"), ("watches", "observes"),
    ("carries", "hauls"), ("chases", "pursues"), ("paints", "decorates"),
    ("lifts", "raises"), ("drops", "releases"), ("touches", "taps"),
    ("kicks", "boots"), ("holds", "grips"), ("throws", "tosses"),
]
_OBJECT_BANK = [
    ("ball", "sphere"), ("box", "crate"), ("apple", "fruit"), ("book", "novel"),
    ("chair", "seat"), ("stick", "branch"), ("stone", "rock"), ("cup", "mug"),
    ("hat", "cap"), ("drum", "bongo"), ("rope", "cord"), ("cake", "pastry"),
]
_TEMPLATES = [
    ["the", "{s}", "{v}", "the", "{o}", "."],
    ["a", "{s}", "{v}", "a", "{o}", "."],
    ["there", "is", "a", "{s}", "that", "{v}", "the", "{o}", "."],
    ["you", "can", "see", "the", "{s}", "as", "it", "{v}", "the", "{o}", "."],
    ["the", "{s}", "quietly", "{v}", "the", "{o}", "."],
]
_SLOTS = ("{s}", "{v}", "{o}")


@dataclass
class SyntheticWorldConfig:
    n_subjects: int = 6
    n_verbs: int = 5
    n_objects: int = 6
    frames_per_clip: int = 8
    noise_sigma: float = 0.1
    n_templates: int = 2
    synonym_rate: float = 0.3
    train_clips: int = 400
    val_clips: int = 50
    test_clips: int = 50
    lm_sentences: int = 5000
    captions_per_clip: int = 3
    split_by: str = "triple"  # "triple": held-out triples; "clip": new clips of seen triples
    embed_dim: int = 16
    seed: int = 1

    @property
    def feat_dim(self) -> int:
        return self.n_subjects + self.n_verbs + self.n_objects

    def validate(self) -> None:
        counts = {
            "n_subjects": (self.n_subjects, len(_SUBJECT_BANK)),
            "n_verbs": (self.n_verbs, len(_VERB_BANK)),
            "n_objects": (self.n_objects, len(_OBJECT_BANK)),
        }
        for name, (value, bank) in counts.items():
            if not 1 <= value <= bank:
                raise ConfigError(f"{name} must be in 1..{bank}, got {value}")
        if not 1 <= self.n_templates <= len(_TEMPLATES):
            raise ConfigError(f"n_templates must be in 1..{len(_TEMPLATES)}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0.0 <= self.synonym_rate <= 1.0:
            raise ConfigError(f"synonym_rate must lie in [0, 1], got {self.synonym_rate}")
        for name in ("frames_per_clip", "train_clips", "captions_per_clip", "embed_dim",
                     "lm_sentences"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.val_clips < 0 or self.test_clips < 0:
            raise ConfigError("split sizes must be >= 0")
        if self.split_by not in ("triple", "clip"):
            raise ConfigError(f"split_by must be 'triple' or 'clip', got {self.split_by!r}")
        if self.split_by == "triple":
            n_triples = self.n_subjects * self.n_verbs * self.n_objects
            if n_triples < 3:
                raise ConfigError(
                    f"held-out-triple splits need at least 3 triples, world has {n_triples}"
                )


@dataclass
class WorldPaths:
    root: Path
    features: dict = field(default_factory=dict)  # split -> Path
    captions: dict = field(default_factory=dict)  # split -> Path
    lm_corpus: Path = None
    vectors: Path = None
    manifest: Path = None


def world_paths(out_dir) -> WorldPaths:
    root = Path(out_dir)
    return WorldPaths(
        root=root,
        features={s: root / f"{s}.feat" for s in ("train", "val", "test")},
        captions={s: root / f"{s}.tsv" for s in ("train", "val", "test")},
        lm_corpus=root / "lm_corpus.txt",
        vectors=root / "vectors.txt",
        manifest=root / "world.json",
    )


def _active_banks(cfg: SyntheticWorldConfig):
    return (
        _SUBJECT_BANK[: cfg.n_subjects],
        _VERB_BANK[: cfg.n_verbs],
        _OBJECT_BANK[: cfg.n_objects],
    )


def _function_words(cfg: SyntheticWorldConfig) -> list[str]:
    seen: list[str] = []
    for template in _TEMPLATES[: cfg.n_templates]:
        for tok in template:
            if tok not in _SLOTS and tok not in seen:
                seen.append(tok)
    return seen


def _realize(triple, template, banks, synonym_rate: float, rng: Rng) -> list[str]:
    subjects, verbs, objects = banks
    words = {
        "{s}": subjects[triple[0]],
        "{v}": verbs[triple[1]],
        "{o}": objects[triple[2]],
    }
    out = []
    for tok in template:
        if tok in _SLOTS:
            base, synonym = words[tok]
            out.append(synonym if rng.random() < synonym_rate else base)
        else:
            out.append(tok)
    return out


def grammar_unigram_stats(cfg: SyntheticWorldConfig) -> dict:
    """Exact token distribution of the grammar and its unigram perplexity.

    Computed in closed form from the generator's own sampling probabilities
    (uniform templates, uniform slot fillers, independent synonym draws),
    with <eos> counted once per sentence the way perplexity targets are.
    The perplexity exp(H) is the floor for any context-free unigram model
    on grammar text.
    """
    banks = _active_banks(cfg)
    templates = _TEMPLATES[: cfg.n_templates]
    w_template = 1.0 / len(templates)
    expected: dict[str, float] = {}

    def add(token: str, amount: float) -> None:
        expected[token] = expected.get(token, 0.0) + amount

    expected_len = 0.0
    for template in templates:
        expected_len += w_template * (len(template) + 1)  # + <eos>
        for tok in template:
            if tok in _SLOTS:
                bank = banks[_SLOTS.index(tok)]
                p_word = w_template / len(bank)
                for base, synonym in bank:
                    add(base, p_word * (1.0 - cfg.synonym_rate))
                    if cfg.synonym_rate > 0:
                        add(synonym, p_word * cfg.synonym_rate)
            else:
                add(tok, w_template)
        add("<eos>", w_template)
    probs = {tok: count / expected_len for tok, count in expected.items() if count > 0}
    entropy = -sum(p * math.log(p) for p in probs.values())
    return {
        "probs": probs,
        "entropy_nats": entropy,
        "perplexity": math.exp(entropy),
    }


def _assign_triples(cfg: SyntheticWorldConfig, rng: Rng):
    """Per-split triple pools and per-clip triples, per the split policy."""
    triples = [
        (s, v, o)
        for s in range(cfg.n_subjects)
        for v in range(cfg.n_verbs)
        for o in range(cfg.n_objects)
    ]
    sizes = {"train": cfg.train_clips, "val": cfg.val_clips, "test": cfg.test_clips}
    pools: dict[str, list] = {}
    if cfg.split_by == "triple":
        order = list(triples)
        rng.child("triple-split").shuffle(order)
        n = len(order)
        n_val = max(1, round(0.15 * n))
        n_test = max(1, round(0.15 * n))
        n_train = n - n_val - n_test
        if n_train < 1:
            raise ConfigError(f"triple space of size {n} too small for disjoint splits")
        pools["train"] = order[:n_train]
        pools["val"] = order[n_train : n_train + n_val]
        pools["test"] = order[n_train + n_val :]
        clip_triples = {}
        for split in ("train", "val", "test"):
            pick = rng.child(f"clips-{split}")
            clip_triples[split] = [
                pools[split][pick.randint(len(pools[split]))] for _ in range(sizes[split])
            ]
    else:
        pools["train"] = triples
        pick = rng.child("clips-train")
        train = [triples[pick.randint(len(triples))] for _ in range(sizes["train"])]
        seen: list = []
        for t in train:
            if t not in seen:
                seen.append(t)
        pools["val"] = pools["test"] = seen
        clip_triples = {"train": train}
        for split in ("val", "test"):
            pick = rng.child(f"clips-{split}")
            clip_triples[split] = [seen[pick.randint(len(seen))] for _ in range(sizes[split])]
    for split, size in sizes.items():
        if size > 0 and not pools[split]:
            raise ConfigError(f"no triples available for split {split!r}")
    return pools, clip_triples


def generate_synthetic_world(cfg: SyntheticWorldConfig, out_dir) -> WorldPaths:
    """Write the full world under out_dir, byte-for-byte deterministic per seed."""
    cfg.validate()
    banks = _active_banks(cfg)
    paths = world_paths(out_dir)
    paths.root.mkdir(parents=True, exist_ok=True)
    rng = Rng(cfg.seed).child("world")
    pools, clip_triples = _assign_triples(cfg, rng)
    templates = _TEMPLATES[: cfg.n_templates]

    clips_meta = []
    for split in ("train", "val", "test"):
        ids = [f"{split}{i:04d}" for i in range(len(clip_triples[split]))]
        feat_rng = rng.child(f"features-{split}")
        sequences = []
        for clip_id, triple in zip(ids, clip_triples[split]):
            base = np.zeros(cfg.feat_dim)
            base[triple[0]] = 1.0
            base[cfg.n_subjects + triple[1]] = 1.0
            base[cfg.n_subjects + cfg.n_verbs + triple[2]] = 1.0
            noise = feat_rng.normal((cfg.frames_per_clip, cfg.feat_dim), sigma=1.0)
            frames = base + cfg.noise_sigma * noise
            sequences.append(FrameSequence(clip_id, frames))
            clips_meta.append(
                {"id": clip_id, "split": split,
                 "subject": triple[0], "verb": triple[1], "object": triple[2]}
            )
        write_feature_file(paths.features[split], sequences)

        cap_rng = rng.child(f"captions-{split}")
        rows = []
        for clip_id, triple in zip(ids, clip_triples[split]):
            for _ in range(cfg.captions_per_clip):
                template = templates[cap_rng.randint(len(templates))]
                rows.append((clip_id, _realize(triple, template, banks, cfg.synonym_rate, cap_rng)))
        write_caption_file(paths.captions[split], rows)

    lm_rng = rng.child("lm-corpus")
    all_triples = [
        (s, v, o)
        for s in range(cfg.n_subjects)
        for v in range(cfg.n_verbs)
        for o in range(cfg.n_objects)
    ]
    # The unpaired corpus samples the full triple space, so it is strictly
    # richer than the caption splits (and covers the synonym inventory).
    with open(paths.lm_corpus, "w", encoding="utf-8") as fh:
        for _ in range(cfg.lm_sentences):
            triple = all_triples[lm_rng.randint(len(all_triples))]
            template = templates[lm_rng.randint(len(templates))]
            fh.write(" ".join(_realize(triple, template, banks, cfg.synonym_rate, lm_rng)) + "\n")

    vec_rng = rng.child("vectors")
    vector_rows = []
    synonyms = {}
    for bank in banks:
        for base, synonym in bank:
            base_vec = vec_rng.normal((cfg.embed_dim,), sigma=0.5)
            vector_rows.append((base, base_vec))
            if cfg.synonym_rate > 0:
                offset = vec_rng.normal((cfg.embed_dim,), sigma=0.05)
                vector_rows.append((synonym, base_vec + offset))
                synonyms[base] = synonym
    for word in _function_words(cfg):
        vector_rows.append((word, vec_rng.normal((cfg.embed_dim,), sigma=0.5)))
    write_vectors_file(paths.vectors, vector_rows)

    content_words = [base for bank in banks for base, _ in bank]
    manifest = {
        "config": asdict(cfg),
        "clips": clips_meta,
        "triple_pools": {split: sorted(set(map(tuple, pool))) for split, pool in pools.items()},
        "vocabulary": {
            "content_words": content_words,
            "synonyms": synonyms,
            "function_words": _function_words(cfg),
        },
        "unigram": grammar_unigram_stats(cfg),
        "files": {
            "features": {s: p.name for s, p in paths.features.items()},
            "captions": {s: p.name for s, p in paths.captions.items()},
            "lm_corpus": paths.lm_corpus.name,
            "vectors": paths.vectors.name,
        },
    }
    with open(paths.manifest, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths


# ---------------------------------------------------------------------------
# Feature files
# ---------------------------------------------------------------------------


def write_feature_file(path, clips: list[FrameSequence]) -> None:
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<I", len(clips)))
        for clip in clips:
            ident = clip.clip_id.encode("utf-8")
            if len(ident) > 0xFFFF:
                raise ConfigError(f"clip id too long: {clip.clip_id!r}")
            fh.write(struct.pack("<H", len(ident)))
            fh.write(ident)
            T, D = clip.frames.shape
            fh.write(struct.pack("<II", T, D))
            fh.write(np.ascontiguousarray(clip.frames, dtype="<f4").tobytes())


def load_feature_file(path) -> list[FrameSequence]:
    """Exact float32 round-trip of what write_feature_file produced."""
    with open(path, "rb") as fh:
        data = fh.read()
    offset = 0

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(data):
            raise FormatError(f"{path}: truncated feature file at byte {offset}")
        chunk = data[offset : offset + n]
        offset += n
        return chunk

    if take(len(FEATURE_MAGIC)) != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad feature-file magic")
    (count,) = struct.unpack("<I", take(4))
    clips = []
    for _ in range(count):
        (id_len,) = struct.unpack("<H", take(2))
        clip_id = take(id_len).decode("utf-8")
        T, D = struct.unpack("<II", take(8))
        if T < 1 or D < 1:
            raise FormatError(f"{path}: clip {clip_id!r} has empty shape ({T}, {D})")
        raw = take(4 * T * D)
        frames = np.frombuffer(raw, dtype="<f4").reshape(T, D).astype(np.float64)
        clips.append(FrameSequence(clip_id, frames))
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes at byte {offset}")
    return clips


# ---------------------------------------------------------------------------
# Caption and vector files
# ---------------------------------------------------------------------------


def write_caption_file(path, rows: list[tuple[str, list[str]]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for clip_id, tokens in rows:
            fh.write(f"{clip_id}\t{' '.join(tokens)}\n")


def read_caption_file(path) -> list[tuple[str, list[str]]]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise ParseError(f"{path}: line {lineno}: expected clip_id<TAB>sentence")
            clip_id, sentence = line.split("\t", 1)
            rows.append((clip_id, tokenize(sentence)))
    return rows


def write_vectors_file(path, rows: list[tuple[str, np.ndarray]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for word, vec in rows:
            fh.write(word + " " + " ".join(repr(float(v)) for v in vec) + "\n")


def load_caption_dataset(
    captions_path, features_path, vocab: Vocabulary
) -> list[tuple[FrameSequence, CaptionPair]]:
    """Aligned (frames, caption) pairs; one pair per caption line."""
    sequences = load_feature_file(features_path)
    by_id: dict[str, FrameSequence] = {}
    for seq in sequences:
        if seq.clip_id in by_id:
            raise ValidationError(f"duplicate clip id {seq.clip_id!r} in {features_path}")
        by_id[seq.clip_id] = seq
    rows = read_caption_file(captions_path)
    missing = sorted({cid for cid, _ in rows if cid not in by_id})
    if missing:
        raise ValidationError(
            f"captions reference clip ids with no features: {', '.join(missing)}"
        )
    pairs = []
    for clip_id, tokens in rows:
        ids = vocab.encode(tokens) + [EOS_ID]
        pairs.append((by_id[clip_id], CaptionPair(clip_id, ids)))
    return pairs


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _lm_tensors(model: LmModel, prefix: str = "") -> dict[str, np.ndarray]:
    return {
        f"{prefix}embedding": model.embedding.table,
        f"{prefix}lstm.W_x": model.lstm.W_x,
        f"{prefix}lstm.W_h": model.lstm.W_h,
        f"{prefix}lstm.b": model.lstm.b,
        f"{prefix}out_W": model.out_W,
        f"{prefix}out_b": model.out_b,
    }


def _captioner_tensors(model: CaptionerModel) -> dict[str, np.ndarray]:
    tensors = {
        "frame_W": model.frame_W,
        "frame_b": model.frame_b,
        "layer1.W_x": model.layer1.W_x,
        "layer1.W_h": model.layer1.W_h,
        "layer1.b": model.layer1.b,
        "layer2.W_x": model.layer2.W_x,
        "layer2.W_h": model.layer2.W_h,
        "layer2.b": model.layer2.b,
        "embedding": model.embedding.table,
        "out_W": model.out_W,
        "out_b": model.out_b,
    }
    if model.reg_W is not None:
        tensors["reg_W"] = model.reg_W
        tensors["reg_b"] = model.reg_b
    if model.target_vectors is not None:
        tensors["target_vectors"] = model.target_vectors
    if model.lm is not None:
        tensors.update(_lm_tensors(model.lm, prefix="lm."))
    return tensors


def named_tensors(model) -> dict[str, np.ndarray]:
    """Every parameter tensor exactly once, keyed by manifest name."""
    if isinstance(model, LmModel):
        return _lm_tensors(model)
    if isinstance(model, CaptionerModel):
        return _captioner_tensors(model)
    raise ConfigError(f"cannot serialize object of type {type(model).__name__}")


def _manifest_for(model) -> dict:
    if isinstance(model, LmModel):
        return {
            "kind": "lm",
            "embedding_mode": model.embedding.mode,
            "dims": {
                "hidden_size": model.hidden_size,
                "embed_dim": model.embed_dim,
                "vocab_size": len(model.vocab),
            },
        }
    dims = {
        "feat_dim": model.feat_dim,
        "frame_proj_size": model.frame_proj_size,
        "hidden_size": model.hidden_size,
        "embed_dim": model.embed_dim,
        "vocab_size": len(model.vocab),
        "regressor_dim": None if model.reg_W is None else int(model.reg_W.shape[0]),
        "target_dim": None if model.target_vectors is None else int(model.target_vectors.shape[1]),
        "lm_hidden_size": None if model.lm is None else model.lm.hidden_size,
        "lm_embed_dim": None if model.lm is None else model.lm.embed_dim,
    }
    return {
        "kind": "captioner",
        "embedding_mode": model.embedding.mode,
        "lm_embedding_mode": None if model.lm is None else model.lm.embedding.mode,
        "fusion": {"mode": model.fusion_mode, "alpha": model.alpha},
        "dims": dims,
    }


def save_checkpoint(model, path) -> None:
    """Byte-stable serialization: save(load(save(m))) is identical."""
    tensors = named_tensors(model)
    index = []
    blob_parts = []
    offset = 0
    for name, tensor in tensors.items():
        arr = np.ascontiguousarray(tensor, dtype="<f8")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob_parts.append(arr.tobytes())
        offset += arr.size
    manifest = _manifest_for(model)
    manifest["format_version"] = CHECKPOINT_VERSION
    manifest["vocab"] = model.vocab.id_to_token[4:]
    manifest["tensors"] = index
    mjson = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = (
        CHECKPOINT_MAGIC
        + str(len(mjson)).encode("ascii")
        + b"\n"
        + mjson
        + b"\n"
        + b"".join(blob_parts)
    )
    digest = hashlib.sha256(payload).hexdigest().encode("ascii")
    with open(path, "wb") as fh:
        fh.write(payload + digest)


def _expected_shapes(manifest: dict) -> dict[str, tuple]:
    dims = manifest["dims"]
    V = dims["vocab_size"]
    if manifest["kind"] == "lm":
        h, d = dims["hidden_size"], dims["embed_dim"]
        return {
            "embedding": (V, d),
            "lstm.W_x": (4 * h, d),
            "lstm.W_h": (4 * h, h),
            "lstm.b": (4 * h,),
            "out_W": (V, h),
            "out_b": (V,),
        }
    F, P, h, d = dims["feat_dim"], dims["frame_proj_size"], dims["hidden_size"], dims["embed_dim"]
    out_width = h
    if manifest["fusion"]["mode"] == "deep":
        out_width = h + dims["lm_hidden_size"]
    shapes = {
        "frame_W": (P, F),
        "frame_b": (P,),
        "layer1.W_x": (4 * h, P),
        "layer1.W_h": (4 * h, h),
        "layer1.b": (4 * h,),
        "layer2.W_x": (4 * h, h + d),
        "layer2.W_h": (4 * h, h),
        "layer2.b": (4 * h,),
        "embedding": (V, d),
        "out_W": (V, out_width),
        "out_b": (V,),
    }
    if dims["regressor_dim"] is not None:
        shapes["reg_W"] = (dims["regressor_dim"], h)
        shapes["reg_b"] = (dims["regressor_dim"],)
    if dims["target_dim"] is not None:
        shapes["target_vectors"] = (V, dims["target_dim"])
    if dims["lm_hidden_size"] is not None:
        lh, ld = dims["lm_hidden_size"], dims["lm_embed_dim"]
        shapes.update(
            {
                "lm.embedding": (V, ld),
                "lm.lstm.W_x": (4 * lh, ld),
                "lm.lstm.W_h": (4 * lh, lh),
                "lm.lstm.b": (4 * lh,),
                "lm.out_W": (V, lh),
                "lm.out_b": (V,),
            }
        )
    return shapes


def load_checkpoint(path):
    """Load, verify checksum, version and every shape; rebuild the model."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(CHECKPOINT_MAGIC) + 64:
        raise FormatError(f"{path}: file too short to be a checkpoint")
    payload, digest = raw[:-64], raw[-64:]
    if hashlib.sha256(payload).hexdigest().encode("ascii") != digest:
        raise CorruptionError(f"{path}: checksum mismatch")
    if not payload.startswith(CHECKPOINT_MAGIC):
        raise FormatError(f"{path}: bad checkpoint magic")
    rest = payload[len(CHECKPOINT_MAGIC):]
    try:
        header_end = rest.index(b"\n")
        mlen = int(rest[:header_end].decode("ascii"))
    except (ValueError, UnicodeDecodeError):
        raise FormatError(f"{path}: unreadable manifest length") from None
    manifest_bytes = rest[header_end + 1 : header_end + 1 + mlen]
    if len(manifest_bytes) != mlen or rest[header_end + 1 + mlen : header_end + 2 + mlen] != b"\n":
        raise FormatError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(manifest_bytes.decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: manifest is not valid JSON: {exc}") from None
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(
            f"{path}: format version {manifest.get('format_version')!r}, "
            f"this build reads version {CHECKPOINT_VERSION}"
        )
    blob = rest[header_end + 2 + mlen :]

    vocab = Vocabulary(manifest["vocab"])
    if len(vocab) != manifest["dims"]["vocab_size"]:
        raise CorruptionError(f"{path}: vocabulary size disagrees with dims")
    expected = _expected_shapes(manifest)
    index = {entry["name"]: entry for entry in manifest["tensors"]}
    if set(index) != set(expected):
        raise CorruptionError(
            f"{path}: tensor names {sorted(set(index) ^ set(expected))} unaccounted for"
        )
    total = sum(int(np.prod(e["shape"])) for e in index.values())
    if len(blob) != 8 * total:
        raise CorruptionError(f"{path}: blob holds {len(blob)} bytes, expected {8 * total}")
    tensors: dict[str, np.ndarray] = {}
    for name, entry in index.items():
        shape = tuple(entry["shape"])
        if shape != expected[name]:
            raise CorruptionError(
                f"{path}: tensor {name!r} has shape {shape}, expected {expected[name]}"
            )
        n = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=8 * entry["offset"])
        tensors[name] = arr.reshape(shape).astype(np.float64).copy()
        if not np.all(np.isfinite(tensors[name])):
            raise CorruptionError(f"{path}: tensor {name!r} contains non-finite values")

    if manifest["kind"] == "lm":
        return LmModel(
            embedding=EmbeddingTable(tensors["embedding"], manifest["embedding_mode"]),
            lstm=LstmParams(tensors["lstm.W_x"], tensors["lstm.W_h"], tensors["lstm.b"]),
            out_W=tensors["out_W"],
            out_b=tensors["out_b"],
            vocab=vocab,
        )
    lm = None
    if manifest["dims"]["lm_hidden_size"] is not None:
        lm = LmModel(
            embedding=EmbeddingTable(tensors["lm.embedding"], manifest["lm_embedding_mode"]),
            lstm=LstmParams(
                tensors["lm.lstm.W_x"], tensors["lm.lstm.W_h"], tensors["lm.lstm.b"]
            ),
            out_W=tensors["lm.out_W"],
            out_b=tensors["lm.out_b"],
            vocab=vocab,
        )
    return CaptionerModel(
        vocab=vocab,
        frame_W=tensors["frame_W"],
        frame_b=tensors["frame_b"],
        layer1=LstmParams(tensors["layer1.W_x"], tensors["layer1.W_h"], tensors["layer1.b"]),
        layer2=LstmParams(tensors["layer2.W_x"], tensors["layer2.W_h"], tensors["layer2.b"]),
        embedding=EmbeddingTable(tensors["embedding"], manifest["embedding_mode"]),
        out_W=tensors["out_W"],
        out_b=tensors["out_b"],
        fusion_mode=manifest["fusion"]["mode"],
        alpha=manifest["fusion"]["alpha"],
        lm=lm,
        reg_W=tensors.get("reg_W"),
        reg_b=tensors.get("reg_b"),
        target_vectors=tensors.get("target_vectors"),
    )
