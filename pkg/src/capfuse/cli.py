"""Operator surface: gen-data | train-lm | train-captioner | decode | eval | tune-alpha.

Exit codes: 0 success, 1 runtime or data error (diagnostic on stderr),
2 usage error. Progress goes to stderr; results go to stdout or files.
Every command echoes its resolved config into the run directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path

from .captioner import (
    CaptionerModel,
    CaptionerTrainConfig,
    clone_with_fusion,
    new_captioner,
    train_captioner,
)
from .config import (
    EMBEDDING_CHOICES,
    FUSION_CHOICES,
    RunConfig,
    echo_config,
    load_config_file,
    resolve_config,
)
from .data import (
    load_caption_dataset,
    load_checkpoint,
    load_feature_file,
    read_caption_file,
    save_checkpoint,
    world_paths,
    write_caption_file,
    generate_synthetic_world,
)
from .decoding import beam_search
from .errors import CapfuseError, ConfigError, ValidationError
from .fusion import init_early_fusion, tune_alpha
from .lm import LmModel, LmTrainConfig, perplexity, train_lm
from .metrics import EvalPair, bleu4_report
from .numerics import Rng
from .vocab import build_vocab, load_pretrained_vectors, new_learned_table

logger = logging.getLogger(__name__)

_OVERRIDE_KEYS = (
    "seed", "run_dir", "hidden_size", "frame_proj_size", "embed_dim",
    "lm_hidden_size", "lm_embed_dim", "vocab_size", "epochs", "lr",
    "lm_epochs", "lm_lr", "clip_norm", "lr_decay", "lr_decay_every",
    "fusion", "alpha", "embeddings", "predict_embeddings", "lambda_emb",
    "beam", "max_len",
)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config file")
    common.add_argument("--out", help="run directory (default: run_dir from config)")
    common.add_argument("--seed", type=int)
    common.add_argument("--hidden-size", type=int, dest="hidden_size")
    common.add_argument("--frame-proj-size", type=int, dest="frame_proj_size")
    common.add_argument("--embed-dim", type=int, dest="embed_dim")
    common.add_argument("--lm-hidden-size", type=int, dest="lm_hidden_size")
    common.add_argument("--lm-embed-dim", type=int, dest="lm_embed_dim")
    common.add_argument("--vocab-size", type=int, dest="vocab_size")
    common.add_argument("--epochs", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--lm-epochs", type=int, dest="lm_epochs")
    common.add_argument("--lm-lr", type=float, dest="lm_lr")
    common.add_argument("--clip-norm", type=float, dest="clip_norm")
    common.add_argument("--lr-decay", type=float, dest="lr_decay")
    common.add_argument("--lr-decay-every", type=int, dest="lr_decay_every")
    common.add_argument("--fusion", choices=FUSION_CHOICES)
    common.add_argument("--alpha", type=float)
    common.add_argument("--embeddings", choices=EMBEDDING_CHOICES)
    common.add_argument(
        "--predict-embeddings", action="store_true", default=None, dest="predict_embeddings",
        help="add the pretrained-vector regression loss",
    )
    common.add_argument("--lambda-emb", type=float, dest="lambda_emb")
    common.add_argument("--beam", type=int)
    common.add_argument("--max-len", type=int, dest="max_len")

    parser = argparse.ArgumentParser(
        prog="capfuse",
        description="LSTM video captioning with language-model fusion, desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic world")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-lm", parents=[common], help="train the language model")
    p.add_argument("--data", required=True, help="world directory from gen-data")
    p.set_defaults(func=cmd_train_lm)

    p = sub.add_parser("train-captioner", parents=[common], help="train the captioner")
    p.add_argument("--data", required=True, help="world directory from gen-data")
    p.add_argument("--lm", help="LM checkpoint for early/late/deep fusion")
    p.add_argument("--vectors", help="pretrained vector file (default: the world's)")
    p.set_defaults(func=cmd_train_captioner)

    p = sub.add_parser("decode", parents=[common], help="generate captions")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--ckpt", help="captioner checkpoint")
    p.add_argument("--ensemble", help="ckpt1,ckpt2,...[:w1,w2,...]")
    p.add_argument("--lm", help="LM checkpoint for decode-time late fusion")
    p.add_argument("--fusion-config", dest="fusion_config", help="fusion.json from tune-alpha")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", parents=[common], help="score captions with corpus BLEU@4")
    p.add_argument("--candidates", required=True, help="decode output TSV")
    p.add_argument("--references", required=True, help="reference TSV (multi-line per clip)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tune-alpha", parents=[common], help="grid-tune late-fusion alpha")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p.add_argument("--ckpt", required=True, help="captioner checkpoint")
    p.add_argument("--lm", required=True, help="LM checkpoint")
    p.set_defaults(func=cmd_tune_alpha)
    return parser


def _resolve(args: argparse.Namespace) -> tuple[RunConfig, Path]:
    file_cfg = load_config_file(args.config) if args.config else None
    overrides = {key: getattr(args, key, None) for key in _OVERRIDE_KEYS}
    cfg = resolve_config(file_cfg, overrides)
    out = Path(args.out) if args.out else Path(cfg.run_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out, args.command)
    return cfg, out


def _union_vocab(paths, cfg: RunConfig):
    """One shared vocabulary over the LM text and the training captions."""
    with open(paths.lm_corpus, "r", encoding="utf-8") as fh:
        sentences = [line.rstrip("\n") for line in fh if line.strip()]
    lm_sentences = list(sentences)
    for _, tokens in read_caption_file(paths.captions["train"]):
        sentences.append(" ".join(tokens))
    return build_vocab(sentences, cfg.vocab_size), lm_sentences


def cmd_gen_data(args, cfg: RunConfig, out: Path) -> int:
    paths = generate_synthetic_world(cfg.world, out / "data")
    logger.info("synthetic world written under %s", paths.root)
    return 0


def cmd_train_lm(args, cfg: RunConfig, out: Path) -> int:
    paths = world_paths(args.data)
    vocab, lm_sentences = _union_vocab(paths, cfg)
    train_config = LmTrainConfig(
        epochs=cfg.lm_epochs,
        lr=cfg.lm_lr,
        clip_norm=cfg.clip_norm,
        hidden_size=cfg.lm_hidden_size,
        embed_dim=cfg.lm_embed_dim if cfg.lm_embed_dim else cfg.embed_dim,
        lr_decay=cfg.lr_decay,
        lr_decay_every=cfg.lr_decay_every,
        max_vocab=cfg.vocab_size,
    )
    model = train_lm(lm_sentences, train_config, Rng(cfg.seed).child("train-lm"), vocab=vocab)
    with open(paths.captions["val"], "r", encoding="utf-8") as fh:
        val_sentences = [line.split("\t", 1)[1].strip() for line in fh if "\t" in line]
    if val_sentences:
        logger.info("lm validation perplexity %.4f", perplexity(model, val_sentences))
    ckpt = out / "lm.ckpt"
    save_checkpoint(model, ckpt)
    logger.info("language model saved to %s", ckpt)
    return 0


def _load_lm_checkpoint(path) -> LmModel:
    model = load_checkpoint(path)
    if not isinstance(model, LmModel):
        raise ConfigError(f"{path} is not a language-model checkpoint")
    return model


def cmd_train_captioner(args, cfg: RunConfig, out: Path) -> int:
    paths = world_paths(args.data)
    vocab, _ = _union_vocab(paths, cfg)
    pairs = load_caption_dataset(paths.captions["train"], paths.features["train"], vocab)
    feat_dim = pairs[0][0].feat_dim
    d_in = cfg.frame_proj_size if cfg.frame_proj_size else cfg.hidden_size
    rng = Rng(cfg.seed).child("train-captioner")

    lm = _load_lm_checkpoint(args.lm) if args.lm else None
    if cfg.fusion != "none":
        if lm is None:
            raise ConfigError(f"--fusion={cfg.fusion} requires --lm")
        if lm.vocab != vocab:
            raise ConfigError(
                "LM checkpoint vocabulary does not match the union vocabulary; "
                "re-train the LM on this world"
            )

    vectors_path = args.vectors if args.vectors else paths.vectors
    lambda_emb = cfg.lambda_emb if cfg.predict_embeddings else 0.0
    target_vectors = None
    regressor_dim = None
    if cfg.predict_embeddings:
        target_table = load_pretrained_vectors(vectors_path, vocab, rng.child("targets"))
        target_vectors = target_table.table
        regressor_dim = target_table.d_e

    if cfg.fusion == "early":
        if cfg.embeddings != "learned":
            raise ConfigError(
                "early fusion transplants the LM embedding; use --embeddings=learned"
            )
        model = init_early_fusion(
            lm,
            feat_dim=feat_dim,
            frame_proj_size=d_in,
            rng=rng.child("model"),
            hidden_size=cfg.hidden_size,
            regressor_dim=regressor_dim,
            target_vectors=target_vectors,
        )
    else:
        if cfg.embeddings == "learned":
            table = new_learned_table(len(vocab), cfg.embed_dim, rng.child("embedding"))
        else:
            mode = {
                "pretrained-frozen": "pretrained-frozen",
                "pretrained-finetune": "pretrained-finetune",
            }[cfg.embeddings]
            table = load_pretrained_vectors(vectors_path, vocab, rng.child("embedding"), mode)
        model = new_captioner(
            vocab=vocab,
            feat_dim=feat_dim,
            frame_proj_size=d_in,
            hidden_size=cfg.hidden_size,
            embedding=table,
            rng=rng.child("model"),
            fusion_mode=cfg.fusion if cfg.fusion in ("late", "deep") else "none",
            alpha=cfg.alpha if cfg.fusion == "late" else None,
            lm=lm if cfg.fusion in ("late", "deep") else None,
            regressor_dim=regressor_dim,
            target_vectors=target_vectors,
        )

    train_config = CaptionerTrainConfig(
        epochs=cfg.epochs,
        lr=cfg.lr,
        clip_norm=cfg.clip_norm,
        lr_decay=cfg.lr_decay,
        lr_decay_every=cfg.lr_decay_every,
        lambda_emb=lambda_emb,
    )
    train_captioner(pairs, train_config, model, rng)
    ckpt = out / "captioner.ckpt"
    save_checkpoint(model, ckpt)
    logger.info("captioner saved to %s", ckpt)
    return 0


def _parse_ensemble(spec: str) -> tuple[list[str], list[float] | None]:
    weights = None
    if ":" in spec:
        spec, weight_part = spec.split(":", 1)
        try:
            weights = [float(w) for w in weight_part.split(",")]
        except ValueError:
            raise ConfigError(f"bad ensemble weights {weight_part!r}") from None
    ckpts = [p for p in spec.split(",") if p]
    if not ckpts:
        raise ConfigError("empty ensemble checkpoint list")
    return ckpts, weights


def cmd_decode(args, cfg: RunConfig, out: Path) -> int:
    if bool(args.ckpt) == bool(args.ensemble):
        raise ConfigError("decode needs exactly one of --ckpt or --ensemble")
    ckpts, weights = (
        _parse_ensemble(args.ensemble) if args.ensemble else ([args.ckpt], None)
    )
    models: list[CaptionerModel] = []
    for path in ckpts:
        model = load_checkpoint(path)
        if not isinstance(model, CaptionerModel):
            raise ConfigError(f"{path} is not a captioner checkpoint")
        models.append(model)

    alpha = None
    if args.fusion_config:
        with open(args.fusion_config, "r", encoding="utf-8") as fh:
            fusion_file = json.load(fh)
        if fusion_file.get("mode") != "late":
            raise ConfigError(f"{args.fusion_config}: expected a late-fusion config")
        alpha = fusion_file.get("alpha")
    if args.alpha is not None:
        alpha = args.alpha
    if alpha is not None:
        if any(m.fusion_mode == "deep" for m in models):
            raise ConfigError(
                "late-fusion overrides do not apply to deep-fusion checkpoints"
            )
        lm = _load_lm_checkpoint(args.lm) if args.lm else None
        models = [
            clone_with_fusion(m, "late", lm if lm is not None else m.lm, alpha)
            for m in models
        ]

    paths = world_paths(args.data)
    clips = load_feature_file(paths.features[args.split])
    rows = []
    for clip in clips:
        best = beam_search(models, weights, clip, cfg.beam, cfg.max_len)[0]
        tokens = models[0].vocab.decode(best.token_ids, strip_specials=True)
        rows.append((clip.clip_id, tokens))
    out_path = out / f"captions_{args.split}.tsv"
    write_caption_file(out_path, rows)
    logger.info("captions written to %s", out_path)
    return 0


def cmd_eval(args, cfg: RunConfig, out: Path) -> int:
    candidates = read_caption_file(args.candidates)
    references = read_caption_file(args.references)
    refs_by_id: dict[str, list[list[str]]] = defaultdict(list)
    for clip_id, tokens in references:
        refs_by_id[clip_id].append(tokens)
    missing = sorted({cid for cid, _ in candidates if cid not in refs_by_id})
    if missing:
        raise ValidationError(f"no references for clips: {', '.join(missing)}")
    pairs = [
        EvalPair(clip_id, tokens, refs_by_id[clip_id]) for clip_id, tokens in candidates
    ]
    result = bleu4_report(pairs)
    print(result.format_report())
    report_path = out / "bleu.json"
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(result.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    logger.info("metric record written to %s", report_path)
    return 0


def cmd_tune_alpha(args, cfg: RunConfig, out: Path) -> int:
    model = load_checkpoint(args.ckpt)
    if not isinstance(model, CaptionerModel):
        raise ConfigError(f"{args.ckpt} is not a captioner checkpoint")
    lm = _load_lm_checkpoint(args.lm)
    if lm.vocab != model.vocab:
        raise ConfigError("LM and captioner checkpoints use different vocabularies")
    base = model if model.fusion_mode != "late" else clone_with_fusion(model, "none", None, None)
    paths = world_paths(args.data)
    pairs = load_caption_dataset(
        paths.captions[args.split], paths.features[args.split], model.vocab
    )
    alpha = tune_alpha(base, lm, pairs, cfg.alpha_grid)
    fusion_path = out / "fusion.json"
    with open(fusion_path, "w", encoding="utf-8") as fh:
        json.dump({"mode": "late", "alpha": alpha}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps({"mode": "late", "alpha": alpha}))
    logger.info("fusion config written to %s", fusion_path)
    return 0


def run(argv=None) -> int:
    """Entry point returning the exit code instead of raising SystemExit."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code
        return 0 if code is None else int(code)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(message)s")
    try:
        cfg, out = _resolve(args)
        result = args.func(args, cfg, out)
        return 0 if result is None else result
    except (CapfuseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
