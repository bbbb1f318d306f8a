"""Command-line entry point: ``lgmsnet <command> [flags]``."""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import asdict
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import analysis, io
from .checks import check_model, check_ops
from .counting import REFERENCE_GFLOPS, REFERENCE_PARAMS, count_params_flops
from .data import load_dataset, save_dataset, split_samples, synth_dataset
from .model import ConfigError, ModelConfig, ParamStore, init_params
from .tensor import Rng
from .train import Hyper, NonFiniteLoss, evaluate, predict, stack, train_loop

log = logging.getLogger("lgmsnet")

COMMANDS = ("train", "eval", "predict", "profile", "gradcheck", "analyze", "make-synthetic")
HYPER_FIELDS = {"lr", "epochs", "batch", "seed", "momentum", "weight_decay", "augment", "max_steps"}
CHECKPOINT = "checkpoint.lgck"


class CliError(Exception):
    """Reported as one ``error:`` line on stderr."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"usage: {message}")


# ---------------------------------------------------------------------------
# configuration


def load_config(path: str | None) -> tuple[ModelConfig, dict]:
    """ModelConfig plus hyperparameter overrides from a JSON file.

    The file is either a bare ModelConfig document or an object with
    ``model`` and/or ``hyper`` sections.
    """
    if path is None:
        return ModelConfig(), {}
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file {p} does not exist")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"config file {p} is not valid JSON: {exc.msg} at line {exc.lineno}") from None
    if not isinstance(doc, dict):
        raise CliError(f"config file {p} must hold a JSON object")
    if set(doc) <= {"model", "hyper"} and doc:
        hyper = doc.get("hyper", {})
        unknown = set(hyper) - HYPER_FIELDS
        if unknown:
            raise ConfigError(f"hyper.{sorted(unknown)[0]}", "unknown hyperparameter")
        return ModelConfig.from_dict(doc.get("model", {})), dict(hyper)
    return ModelConfig.from_dict(doc), {}


def resolve_hyper(args, overrides: dict) -> Hyper:
    h = Hyper(**overrides)
    for name in ("lr", "epochs", "batch", "seed"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(h, name, v)
    if args.command == "train" and args.max_steps is not None:
        h.max_steps = args.max_steps
    if h.lr < 0 or not math.isfinite(h.lr):
        raise ConfigError("hyper.lr", f"learning rate must be finite and non-negative, got {h.lr}")
    if h.epochs < 1:
        raise ConfigError("hyper.epochs", "must be positive")
    if h.batch < 1:
        raise ConfigError("hyper.batch", "must be positive")
    return h


def _config_for_checkpoint(args) -> ModelConfig:
    if not Path(args.checkpoint).is_file():
        raise CliError(f"checkpoint {args.checkpoint} does not exist")
    if args.config is not None:
        return load_config(args.config)[0]
    sidecar = Path(args.checkpoint).parent / "config.json"
    if sidecar.is_file():
        return ModelConfig.from_json(sidecar.read_text())
    raise CliError(f"no --config given and no config.json next to {args.checkpoint}")


def load_store(path: str, cfg: ModelConfig) -> ParamStore:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"checkpoint {p} does not exist")
    store = init_params(cfg, 0)
    try:
        store.load_state((n, t.data) for n, t in io.load_checkpoint(p))
    except (KeyError, ValueError) as exc:
        raise CliError(f"checkpoint {p} does not match the config: {exc}") from None
    return store


def _samples(args, cfg: ModelConfig):
    if args.data is not None:
        if not Path(args.data).is_dir():
            raise CliError(f"dataset directory {args.data} does not exist")
        samples = load_dataset(args.data, args.size)
    else:
        samples = synth_dataset(args.n, args.size or 64, Rng(args.seed or 0), cfg.input_channels)
    if samples[0].image.shape[0] != cfg.input_channels:
        raise CliError(f"data has {samples[0].image.shape[0]} channels, config expects {cfg.input_channels}")
    return samples


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg, overrides = load_config(args.config)
    cfg.validate()
    hyper = resolve_hyper(args, overrides)
    samples = _samples(args, cfg)
    train, val = split_samples(samples, args.val_fraction, Rng(hyper.seed))
    out = _out_dir(args)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    _write_json(out / "hyper.json", asdict(hyper))
    try:
        state, trace = train_loop(cfg, train, val, hyper)
    except NonFiniteLoss as exc:
        raise CliError(f"non-finite loss at step {exc.step}") from None
    io.save_checkpoint(out / CHECKPOINT, state.best.state())
    io.save_checkpoint(out / "last.lgck", state.params.state())
    (out / "trace.csv").write_text("epoch,split,loss,iou,f1\n" + "".join(r.csv() + "\n" for r in trace))
    print(json.dumps({"best_epoch": state.best_epoch, "best_val_iou": state.best_iou, "steps": state.step}))
    return 0


def cmd_eval(args) -> int:
    cfg = _config_for_checkpoint(args)
    store = load_store(args.checkpoint, cfg)
    report = evaluate(cfg, store, _samples(args, cfg), args.batch or 8)
    doc = report.to_dict()
    text = json.dumps(doc, sort_keys=True)
    if args.out is not None:
        _write_json(_out_dir(args) / "metrics.json", doc)
    print(text)
    return 0


def cmd_predict(args) -> int:
    cfg = _config_for_checkpoint(args)
    store = load_store(args.checkpoint, cfg)
    samples = _samples(args, cfg)
    out = _out_dir(args)
    batch = args.batch or 8
    for start in range(0, len(samples), batch):
        chunk = samples[start : start + batch]
        masks = predict(cfg, store, stack(chunk)[0])
        for s, m in zip(chunk, masks):
            io.write_image(out / f"{s.id}.pred.pgm", m)
    print(json.dumps({"written": len(samples), "out": str(out)}))
    return 0


def cmd_profile(args) -> int:
    cfg, _ = load_config(args.config)
    size = args.size or 256
    rep = count_params_flops(cfg, (size, size))
    doc = rep.to_dict()
    doc["reference"] = {
        "params": REFERENCE_PARAMS,
        "gflops": REFERENCE_GFLOPS,
        "resolution": [256, 256],
        "params_ratio": rep.total_params / REFERENCE_PARAMS,
    }
    if args.out is not None:
        _write_json(_out_dir(args) / "profile.json", doc)
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    seed = args.seed or 0
    ok = True
    lines = ["op,max_rel_err,pass"]
    for name, rep in check_ops(seed):
        lines.append(f"{name},{rep.worst:.3e},{str(rep.passed).lower()}")
        ok &= rep.passed
    if not args.ops_only:
        m = check_model(seed)
        lines.append(f"lgmsnet+seg_loss,{m.report.worst:.3e},{str(m.passed).lower()}")
        ok &= m.passed
    print("\n".join(lines))
    return 0 if ok else 1


def cmd_analyze(args) -> int:
    cfg = _config_for_checkpoint(args) if args.checkpoint else load_config(args.config)[0]
    store = load_store(args.checkpoint, cfg) if args.checkpoint else init_params(cfg, Rng(args.seed or 0))
    samples = sorted(_samples(args, cfg), key=lambda s: s.id)
    out = _out_dir(args)
    red = analysis.redundancy_report(cfg, store, samples, args.layer, args.tau)
    (out / "redundancy.csv").write_text("sample_id,layer,count\n" + "".join(r + "\n" for r in red.csv_rows()))
    dens = analysis.fg_scale_density([s.mask for s in samples], [s.id for s in samples])
    (out / "scale.csv").write_text("sample_id,ratio\n" + "".join(r + "\n" for r in dens.csv_rows()))
    rows, skipped = [], 0
    for s in samples:
        feat = analysis.stage_activation(cfg, store, s.image, args.layer)
        try:
            rows.append(f"{s.id},{analysis.fg_bg_singular_ratio(feat, s.mask):.6f}")
        except ValueError as exc:
            skipped += 1
            log.warning("%s: %s", s.id, exc)
    (out / "fgbg.csv").write_text("sample_id,ratio_normalized\n" + "".join(r + "\n" for r in rows))
    if args.export:
        analysis.export_features(cfg, store, samples[0], args.layer, out / "features")
    print(json.dumps({"layer": args.layer, "mean_redundancy": red.mean, "fgbg_skipped": skipped}))
    return 0


def cmd_make_synthetic(args) -> int:
    if args.n < 1:
        raise CliError("--n must be positive")
    samples = synth_dataset(args.n, args.size or 64, Rng(args.seed or 0), args.channels)
    save_dataset(samples, _out_dir(args))
    print(json.dumps({"written": len(samples), "out": args.out}))
    return 0


HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "profile": cmd_profile,
    "gradcheck": cmd_gradcheck,
    "analyze": cmd_analyze,
    "make-synthetic": cmd_make_synthetic,
}


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lgmsnet", description="Lightweight multi-scale segmentation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, *, data=False, ckpt=None, out_required=False, hyper=False):
        sp.add_argument("--config", help="model config JSON (bare ModelConfig or {model, hyper})")
        sp.add_argument("--seed", type=int, help="random seed (default 0)")
        sp.add_argument("--size", type=int, help="image extent in pixels")
        sp.add_argument("--out", required=out_required, help="output directory")
        if data:
            sp.add_argument("--data", help="dataset directory of <id>.img.pgm|ppm / <id>.mask.pgm pairs")
            sp.add_argument("--n", type=int, default=100, help="synthetic sample count when --data is absent")
        if ckpt is not None:
            sp.add_argument("--checkpoint", required=ckpt, help="LGCK checkpoint path")
        if hyper:
            sp.add_argument("--lr", type=float, help="initial learning rate")
            sp.add_argument("--epochs", type=int, help="training epochs")
        if hyper or data:
            sp.add_argument("--batch", type=int, help="batch size")

    sp = sub.add_parser("train", help="train a model and write checkpoint, trace and config")
    common(sp, data=True, out_required=True, hyper=True)
    sp.add_argument("--val-fraction", type=float, default=0.2, help="held-out fraction (default 0.2)")
    sp.add_argument("--max-steps", type=int, help="stop after this many optimizer steps")

    sp = sub.add_parser("eval", help="pooled IoU/F1 of a checkpoint on a dataset")
    common(sp, data=True, ckpt=True)

    sp = sub.add_parser("predict", help="write predicted mask PGMs")
    common(sp, data=True, ckpt=True, out_required=True)

    sp = sub.add_parser("profile", help="parameter and FLOP counts per block")
    common(sp)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    sp.add_argument("--seed", type=int, help="random seed (default 0)")
    sp.add_argument("--ops-only", action="store_true", help="skip the full-network check")

    sp = sub.add_parser("analyze", help="redundancy, scale and fg/bg spectral reports as CSV")
    common(sp, data=True, ckpt=False, out_required=True)
    sp.add_argument("--layer", default="enc4", choices=analysis.STAGES, help="stage to analyze (default enc4)")
    sp.add_argument("--tau", type=float, default=analysis.DEFAULT_TAU, help="relative singular value threshold")
    sp.add_argument("--export", action="store_true", help="also export the first sample's activation")

    sp = sub.add_parser("make-synthetic", help="write a synthetic dataset directory")
    sp.add_argument("--n", type=int, default=100, help="sample count")
    sp.add_argument("--size", type=int, help="image extent (default 64)")
    sp.add_argument("--seed", type=int, help="random seed (default 0)")
    sp.add_argument("--channels", type=int, default=1, choices=(1, 3), help="image channels")
    sp.add_argument("--out", required=True, help="output directory")
    return p


def _threads() -> int | None:
    raw = os.environ.get("LGMS_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"LGMS_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise CliError("LGMS_THREADS must be non-negative")
    return n or None


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        with threadpool_limits(limits=_threads()):
            return HANDLERS[args.command](args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
    except (ValueError, FileNotFoundError, io.FormatError) as exc:
        print(f"error: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
