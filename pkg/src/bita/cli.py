"""Command-line entry point: ``bita <subcommand> [flags]``.

Exit status is 0 on success, 1 on a usage error and 2 on a runtime error.
Every run logs its configuration hash and seed to stderr.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import autodiff as ad
from .bench import bench_mixer, rows_to_csv, subquadratic_ratio
from .checkpoint import Checkpoint, CheckpointError
from .config import RunConfig, load_config, parse_config
from .data import SyntheticSpec, generate_synthetic_dataset, load_manifest, save_manifest
from .decoding import caption_image
from .evaluate import evaluate_captions, format_report
from .model import BitaModel, count_params
from .spectral import MixerKind
from .train import TrainingDiverged, finetune, model_from_checkpoint, run_stage1, run_stage2
from .vocab import build_vocab

log = logging.getLogger("bita.cli")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _config(path) -> RunConfig:
    return load_config(path) if path else parse_config("")


def _log_run(digest: str, seed) -> None:
    log.info("config %s seed %s", digest, seed)


def _args_digest(args: argparse.Namespace) -> str:
    text = json.dumps({k: str(v) for k, v in sorted(vars(args).items()) if k != "func"})
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _load_pairs(manifests):
    pairs = []
    for m in manifests:
        pairs.extend(load_manifest(m))
    seen = set()
    for p in pairs:
        if p.id in seen:
            raise ValueError(f"duplicate pair id {p.id!r} across manifests")
        seen.add(p.id)
    return pairs


# ------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> int:
    _log_run(_args_digest(args), args.seed)
    spec = SyntheticSpec(captions_per_image=args.captions)
    pairs = generate_synthetic_dataset(spec, args.n, args.seed, id_prefix=args.prefix)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_manifest(out, pairs)
    print(f"wrote {len(pairs)} pairs to {out}")
    return 0


def _train_common(args):
    cfg = _config(args.config)
    _log_run(cfg.digest(), cfg.seed)
    return cfg, _load_pairs(args.manifest)


def _finish(result, out) -> int:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result.checkpoint.save(out)
    first, last = result.epoch_losses[0], result.epoch_losses[-1]
    print(f"{result.checkpoint.meta['stage']}: {len(result.step_losses)} steps, "
          f"epoch loss {first:.4f} -> {last:.4f}; saved {out}")
    return 0


def cmd_stage1(args) -> int:
    cfg, pairs = _train_common(args)
    if args.from_checkpoint:
        raise UsageError("pretrain-stage1 starts from fresh weights; --from-checkpoint is not accepted")
    return _finish(run_stage1(cfg, pairs), args.out)


def cmd_stage2(args) -> int:
    if bool(args.from_checkpoint) == bool(args.from_scratch):
        raise UsageError("pretrain-stage2 needs exactly one of --from-checkpoint or --from-scratch")
    cfg, pairs = _train_common(args)
    ckpt = Checkpoint.load(args.from_checkpoint) if args.from_checkpoint else None
    vocab = build_vocab(c for p in pairs for c in p.captions) if args.from_scratch else None
    return _finish(run_stage2(cfg, pairs, ckpt, from_scratch=args.from_scratch, vocab=vocab), args.out)


def cmd_finetune(args) -> int:
    if not args.from_checkpoint:
        raise UsageError("finetune needs --from-checkpoint")
    cfg, pairs = _train_common(args)
    return _finish(finetune(cfg, pairs, Checkpoint.load(args.from_checkpoint)), args.out)


def _load_model(path):
    ckpt = Checkpoint.load(path)
    model, vocab = model_from_checkpoint(ckpt, ("s2", "ft"))
    _log_run(hashlib.sha256(json.dumps(ckpt.meta.get("run", {}), sort_keys=True).encode())
             .hexdigest()[:16], model.config.seed)
    return model, vocab


def cmd_caption(args) -> int:
    model, vocab = _load_model(args.ckpt)
    pairs = {p.id: p for p in _load_pairs(args.manifest)}
    if args.image not in pairs:
        raise ValueError(f"image id {args.image!r} not found in the manifest")
    caps = caption_image(model, pairs[args.image].image, vocab, args.beam, args.max_len)
    for rank, c in enumerate(caps, start=1):
        print(f"{rank}\t{c.score:.4f}\t{c.text}")
    return 0


def cmd_evaluate(args) -> int:
    model, vocab = _load_model(args.ckpt)
    pairs = _load_pairs(args.manifest)
    report = format_report(evaluate_captions(model, vocab, pairs, args.beam, args.max_len)["metrics"])
    if args.json_out:
        Path(args.json_out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.json_out).write_text(report)
    sys.stdout.write(report)
    return 0


def cmd_bench(args) -> int:
    _log_run(_args_digest(args), 0)
    try:
        seq_lens = [int(s) for s in args.seq_lens.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seq-lens must be comma-separated integers, got {args.seq_lens!r}") from None
    rows = bench_mixer(seq_lens, args.hidden, args.reps, args.batch)
    text = rows_to_csv(rows)
    if args.csv_out:
        Path(args.csv_out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.csv_out).write_text(text)
    sys.stdout.write(text)
    ratio = subquadratic_ratio(args.hidden, args.reps, args.batch)
    verdict = "subquadratic" if ratio < 8 else "NOT subquadratic"
    log.info("fourier_mix time(1024)/time(256) = %.2f (%s; quadratic predicts >= 16)", ratio, verdict)
    return 0


def cmd_count(args) -> int:
    cfg = _config(args.config)
    model_cfg = cfg.model.with_(mixer=MixerKind.parse(args.mixer)) if args.mixer else cfg.model
    _log_run(cfg.digest(), model_cfg.seed)
    counts = count_params(BitaModel(model_cfg), trainable_only=args.trainable_only)
    print(json.dumps(counts, indent=2))
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bita", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("gen-data", help="write a synthetic shapes-and-colours manifest")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--captions", type=int, default=5, help="captions per image")
    p.add_argument("--prefix", default="syn", help="pair id prefix")
    p.set_defaults(func=cmd_gen_data)

    for name, func, help_text in (
        ("pretrain-stage1", cmd_stage1, "contrastive alignment of the IFT"),
        ("pretrain-stage2", cmd_stage2, "prefix language modeling through the frozen LM"),
        ("finetune", cmd_finetune, "fine-tune a stage-2 checkpoint"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config")
        p.add_argument("--manifest", action="append", required=True,
                       help="training manifest; repeat for joint training on several sets")
        p.add_argument("--out", required=True)
        p.add_argument("--from-checkpoint")
        p.add_argument("--from-scratch", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("caption", help="beam-search captions for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", action="append", required=True)
    p.add_argument("--image", required=True, help="pair id within the manifest")
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--max-len", type=int, default=22)
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("evaluate", help="BLEU/ROUGE-L/CIDEr of generated captions")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", action="append", required=True)
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--max-len", type=int, default=22)
    p.add_argument("--json-out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench-mixer", help="time Fourier vs self-attention token mixing")
    p.add_argument("--seq-lens", default="64,256,1024")
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--csv-out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("count-params", help="exact parameter counts per component")
    p.add_argument("--config")
    p.add_argument("--mixer", help="fourier or self-attn (overrides the config)")
    p.add_argument("--trainable-only", action="store_true")
    p.set_defaults(func=cmd_count)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    # run metadata is always reported; training progress only with -v
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(name)s: %(message)s"))
    pkg_log = logging.getLogger("bita")
    saved_level = pkg_log.level
    pkg_log.addHandler(handler)
    pkg_log.setLevel(logging.INFO)
    handler.addFilter(lambda record: args.verbose or record.name == log.name)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"bita {args.command}: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, CheckpointError, ad.ShapeError, ad.ContractError,
            TrainingDiverged, IndexError, KeyError) as exc:
        print(f"bita {args.command}: error: {exc}", file=sys.stderr)
        return 2
    finally:
        pkg_log.removeHandler(handler)
        pkg_log.setLevel(saved_level)


if __name__ == "__main__":
    sys.exit(main())
