"""``fusion`` command line: train, enhance, eval, gradcheck, ablate.

Exit codes: 0 success, 1 command ran but failed its check, 2 usage or
configuration error, 3 numerical (NaN) abort.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import imageio
from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint
from .gradcheck import finite_diff_check
from .metrics import MetricReport, evaluate_image, psnr, ssim
from .model import (ABLATION_LABELS, ABLATION_PRESETS, WIDTH_PRESETS, FusionModel, NumericalError,
                    count_parameters)
from .synthetic import make_pairs
from .training import EARLY_STOP_METRIC, AdamConfig, NaNAbort, TrainConfig, train

log = logging.getLogger("fusion")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NAN = 0, 1, 2, 3


class UsageError(Exception):
    pass


def default_seed() -> int:
    raw = os.environ.get("FUSION_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"FUSION_SEED must be an integer, got {raw!r}") from None


# -- run configuration ---------------------------------------------------------

@dataclass
class RunConfig:
    preset: str = "tiny"
    ablation: str = "full"
    seed: int = 0
    epochs: int = 10
    batch_size: int = 4
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    patience: int = 5
    synthetic: int = 0
    image_size: int = 64
    val_fraction: float = 0.2
    data_dir: Optional[str] = None
    checkpoint: Optional[str] = None
    out_dir: str = "runs"
    resize: Optional[int] = None

    def validate(self) -> None:
        if self.preset not in WIDTH_PRESETS:
            raise UsageError(f"unknown preset {self.preset!r}; choose from {', '.join(WIDTH_PRESETS)}")
        if self.ablation not in ABLATION_PRESETS:
            raise UsageError(f"unknown ablation {self.ablation!r}; choose from {', '.join(ABLATION_PRESETS)}")
        for key in ("epochs", "batch_size", "patience", "image_size"):
            if getattr(self, key) < 1:
                raise UsageError(f"{key} must be >= 1, got {getattr(self, key)}")
        if self.image_size < 11:
            raise UsageError("image_size must be >= 11 (SSIM window)")
        if self.lr < 0 or not math.isfinite(self.lr):
            raise UsageError(f"lr must be a finite non-negative number, got {self.lr}")
        for key in ("beta1", "beta2"):
            if not 0 <= getattr(self, key) < 1:
                raise UsageError(f"{key} must lie in [0, 1), got {getattr(self, key)}")
        if not 0 < self.val_fraction < 1:
            raise UsageError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if self.resize is not None and self.resize < 11:
            raise UsageError("resize must be >= 11")
        if self.synthetic < 0:
            raise UsageError("synthetic must be >= 0")
        if (self.synthetic > 0) == (self.data_dir is not None):
            raise UsageError("give exactly one data source: --synthetic N or --data-dir DIR")
        if self.data_dir is not None:
            d = Path(self.data_dir)
            for sub in ("degraded", "clean"):
                if not (d / sub).is_dir():
                    raise UsageError(f"data directory {d} has no '{sub}' subdirectory")
        out = Path(self.out_dir)
        if out.exists() and not out.is_dir():
            raise UsageError(f"output path {out} exists and is not a directory")
        if self.checkpoint is not None and not Path(self.checkpoint).resolve().parent.is_dir():
            raise UsageError(f"checkpoint directory {Path(self.checkpoint).parent} does not exist")

    def echo(self) -> str:
        lr = np.format_float_scientific(self.lr, trim="-", exp_digits=1)
        return (f"preset={self.preset} ablation={self.ablation} seed={self.seed} epochs={self.epochs} "
                f"lr={lr} beta1={self.beta1} beta2={self.beta2} batch={self.batch_size} "
                f"patience={self.patience} early_stop={EARLY_STOP_METRIC}")


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    if raw.lower() in ("", "none") and "Optional" in str(kind):
        return None
    try:
        if "int" in str(kind):
            return int(raw)
        if "float" in str(kind):
            return float(raw)
    except ValueError:
        raise UsageError(f"config key {key}: cannot parse {raw!r}") from None
    return raw


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment.  Unknown keys are errors."""
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file {p} not found")
    out = {}
    for n, line in enumerate(p.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{p}:{n}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELD_TYPES:
            raise UsageError(f"{p}:{n}: unknown config key {key!r}")
        out[key] = _coerce(key, val)
    return out


def build_config(args: argparse.Namespace) -> RunConfig:
    values = {"seed": default_seed()}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for key in _FIELD_TYPES:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


# -- data ---------------------------------------------------------------------

def load_pairs(cfg: RunConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    if cfg.synthetic:
        return make_pairs(cfg.synthetic, cfg.seed, cfg.image_size)
    root = Path(cfg.data_dir)
    degraded = {p.name: p for p in imageio.list_pngs(root / "degraded")}
    clean = {p.name: p for p in imageio.list_pngs(root / "clean")}
    unmatched = sorted(set(degraded) ^ set(clean))
    if unmatched:
        raise UsageError(f"unpaired files in {root}: {', '.join(unmatched)}")
    if not degraded:
        raise UsageError(f"no PNG pairs in {root}")
    pairs = []
    for name in sorted(degraded):
        x = imageio.resize(imageio.decode(degraded[name]), cfg.resize)
        y = imageio.resize(imageio.decode(clean[name]), cfg.resize)
        pairs.append((x, y))
    return pairs


def split(pairs, val_fraction: float):
    """Last ceil(n * val_fraction) pairs validate; a single pair serves both roles."""
    if len(pairs) == 1:
        return pairs, pairs
    n_val = min(len(pairs) - 1, max(1, math.ceil(len(pairs) * val_fraction)))
    return pairs[:-n_val], pairs[-n_val:]


# -- commands -----------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = build_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Path(cfg.checkpoint) if cfg.checkpoint else out / "checkpoint.fusn"
    print(cfg.echo())
    train_pairs, val_pairs = split(load_pairs(cfg), cfg.val_fraction)
    model = FusionModel(cfg.preset, cfg.ablation, seed=cfg.seed)
    tcfg = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, patience=cfg.patience, seed=cfg.seed,
                       adam=AdamConfig(cfg.lr, cfg.beta1, cfg.beta2), checkpoint=ckpt,
                       history=out / "history.txt")
    try:
        result = train(model, train_pairs, val_pairs, tcfg, on_epoch=lambda r: print(r.line()))
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NAN
    total, _ = count_parameters(model)
    print(f"parameters={total}")
    if result.aborted:
        print(f"numerical abort: {result.aborted}; last good checkpoint kept at {ckpt}", file=sys.stderr)
        return EXIT_NAN
    print(f"best {EARLY_STOP_METRIC}={result.best_val_l1:.6f} best_val_psnr={result.best_val_psnr:.4f} dB")
    print(f"checkpoint={ckpt}")
    return EXIT_OK


def cmd_enhance(args) -> int:
    ckpt, src, out = Path(args.checkpoint), Path(args.input), Path(args.out_dir)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint {ckpt} not found")
    if not src.exists():
        raise UsageError(f"input {src} not found")
    if out.exists() and not out.is_dir():
        raise UsageError(f"output path {out} exists and is not a directory")
    if args.resize is not None and args.resize < 8:
        raise UsageError("resize must be >= 8")
    try:
        model, _ = load_checkpoint(ckpt)
    except CheckpointError as exc:
        raise UsageError(f"cannot load checkpoint: {exc}") from None
    files = imageio.list_pngs(src) if src.is_dir() else [src]
    if not files:
        raise UsageError(f"no PNG files in {src}")
    out.mkdir(parents=True, exist_ok=True)
    ok = 0
    for f in files:
        try:
            img = imageio.resize(imageio.decode(f), args.resize)
        except Exception as exc:  # PIL raises a zoo of types for bad files
            log.warning("skipping %s: %s", f, exc)
            continue
        try:
            with T.no_grad():
                enhanced = model(img).data
        except NumericalError as exc:
            print(f"numerical abort on {f}: {exc}", file=sys.stderr)
            return EXIT_NAN
        except ValueError as exc:
            log.warning("skipping %s: %s", f, exc)
            continue
        imageio.encode(enhanced, out / f.name)
        ok += 1
    print(f"enhanced {ok}/{len(files)} images into {out}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_eval(args) -> int:
    enhanced = Path(args.enhanced)
    if not enhanced.is_dir():
        raise UsageError(f"{enhanced} is not a directory")
    files = imageio.list_pngs(enhanced)
    if not files:
        raise UsageError(f"no PNG files in {enhanced}")
    refs = None
    if args.reference is not None:
        rdir = Path(args.reference)
        if not rdir.is_dir():
            raise UsageError(f"{rdir} is not a directory")
        refs = {p.name: p for p in imageio.list_pngs(rdir)}
        unmatched = sorted({f.name for f in files} ^ set(refs))
        if unmatched:
            raise UsageError("unmatched filenames:\n  " + "\n  ".join(unmatched))
    report = MetricReport()
    for f in files:
        img = imageio.decode(f)
        ref = imageio.decode(refs[f.name]) if refs is not None else None
        try:
            report.records.append(evaluate_image(f.name, img, ref))
        except ValueError as exc:
            raise UsageError(f"{f.name}: {exc}") from None
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(report.to_csv())
        (out / "summary.txt").write_text(report.summary())
    else:
        sys.stdout.write(report.to_csv() + "\n")  # blank line separates CSV from summary
    sys.stdout.write(report.summary())
    return EXIT_OK


def _corrupt_hook(target: Optional[str]):
    if not target:
        return None

    def hook(name, grad):
        if name == target:
            return grad + 1e-2 * (1.0 + np.abs(grad))
        return grad
    return hook


def cmd_gradcheck(args) -> int:
    seed = default_seed() if args.seed is None else args.seed
    if args.preset not in WIDTH_PRESETS or args.ablation not in ABLATION_PRESETS:
        raise UsageError(f"unknown preset/ablation {args.preset!r}/{args.ablation!r}")
    model = FusionModel(args.preset, args.ablation, seed=seed)
    names = [n for n, _ in model.named_parameters()]
    if args.corrupt_grad and args.corrupt_grad not in names:
        raise UsageError(f"--corrupt-grad: no parameter named {args.corrupt_grad!r}")
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, size=(3, 8, 8))
    target = T.Tensor(rng.uniform(0.0, 1.0, size=(3, 8, 8)))

    def l1(m, inp):
        return T.mean(T.abs_(m(inp) - target))

    report = finite_diff_check(model, x, l1, h=1e-5, tol=args.tol, seed=seed,
                               grad_hook=_corrupt_hook(args.corrupt_grad))
    print(f"preset={args.preset} ablation={args.ablation} seed={seed} input=3x8x8 loss=L1")
    print(report.format())
    if not report.passed:
        print("failing parameters: " + ", ".join(report.failures), file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


@dataclass
class AblationRow:
    preset: str
    label: str
    params: int
    train_loss: float
    val_psnr: float
    val_ssim: float
    error: Optional[str] = None


def run_ablation(cfg: RunConfig, presets: Sequence[str] = tuple(ABLATION_PRESETS)) -> list[AblationRow]:
    pairs = load_pairs(cfg)
    train_pairs, val_pairs = split(pairs, cfg.val_fraction)
    rows = []
    for name in presets:
        log.info("ablation %s: seed %d", name, cfg.seed)
        try:
            model = FusionModel(cfg.preset, name, seed=cfg.seed)
            total, _ = count_parameters(model)
            tcfg = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, patience=cfg.patience,
                               seed=cfg.seed, adam=AdamConfig(cfg.lr, cfg.beta1, cfg.beta2))
            res = train(model, train_pairs, val_pairs, tcfg)
            if res.aborted:
                raise NaNAbort(res.aborted)
            with T.no_grad():
                outs = [model(x).data for x, _ in val_pairs]
            rows.append(AblationRow(
                name, ABLATION_LABELS[name], total, res.history[-1].train_loss,
                float(np.mean([psnr(o, y) for o, (_, y) in zip(outs, val_pairs)])),
                float(np.mean([ssim(o, y) for o, (_, y) in zip(outs, val_pairs)]))))
        except (ArithmeticError, ValueError) as exc:
            log.error("ablation %s failed: %s", name, exc)
            rows.append(AblationRow(name, ABLATION_LABELS[name], 0, math.nan, math.nan, math.nan, str(exc)))
    return rows


def format_ablation(rows: Sequence[AblationRow], seed: int) -> str:
    lines = [f"# seed={seed} (identical for every row)",
             f"{'preset':<16} {'configuration':<28} {'params':>8} {'train_loss':>11} {'val_psnr':>9} {'val_ssim':>9}"]
    for r in rows:
        if r.error:
            lines.append(f"{r.preset:<16} {r.label:<28} FAILED: {r.error}")
        else:
            lines.append(f"{r.preset:<16} {r.label:<28} {r.params:>8d} {r.train_loss:>11.6f} "
                         f"{r.val_psnr:>9.4f} {r.val_ssim:>9.6f}")
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    cfg = build_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    print(cfg.echo())
    rows = run_ablation(cfg)
    table = format_ablation(rows, cfg.seed)
    (out / "ablation.txt").write_text(table)
    sys.stdout.write(table)
    return EXIT_FAIL if any(r.error for r in rows) else EXIT_OK


# -- parser -------------------------------------------------------------------

def _run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value file; flags override it")
    p.add_argument("--preset", choices=sorted(WIDTH_PRESETS))
    p.add_argument("--ablation", choices=list(ABLATION_PRESETS))
    p.add_argument("--seed", type=int, help="default: $FUSION_SEED or 0")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int, help="default 4")
    p.add_argument("--lr", type=float, help="default 2e-4")
    p.add_argument("--beta1", type=float, help="default 0.5")
    p.add_argument("--beta2", type=float, help="default 0.999")
    p.add_argument("--patience", type=int)
    p.add_argument("--synthetic", type=int, metavar="N", help="generate N synthetic pairs")
    p.add_argument("--image-size", dest="image_size", type=int, help="synthetic image side (default 64)")
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--data-dir", dest="data_dir", help="directory with degraded/ and clean/ PNGs")
    p.add_argument("--checkpoint")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--resize", type=int, metavar="S", help="bilinear resize to SxS (off by default)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fusion", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _run_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance PNG images with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="PNG file or directory")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--resize", type=int, metavar="S")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("eval", help="compute image-quality metrics")
    p.add_argument("--enhanced", required=True, help="directory of PNGs to score")
    p.add_argument("--reference", help="directory of ground-truth PNGs with matching names")
    p.add_argument("--out-dir", dest="out_dir", help="write metrics.csv and summary.txt here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    p.add_argument("--preset", default="tiny", choices=sorted(WIDTH_PRESETS))
    p.add_argument("--ablation", default="full", choices=list(ABLATION_PRESETS))
    p.add_argument("--seed", type=int)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--corrupt-grad", dest="corrupt_grad", help=argparse.SUPPRESS)  # fault-injection hook
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and compare all nine ablation presets")
    _run_options(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
