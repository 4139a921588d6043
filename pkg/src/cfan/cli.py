"""Command-line entry point: ``cfan <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
import tempfile
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import (ManifestError, SynthConfig, from_uint8, generate_synthetic, hfi_lfi_transform,
                   load_dataset, read_pnm, to_uint8, write_pnm)
from .experiments import eval_run
from .spectral import build_templates, make_filter
from .train import (CheckpointError, DivergenceError, TrainConfig, load_checkpoint, load_config,
                    parse_config, save_checkpoint, train_loop)

log = logging.getLogger("cfan")


class CLIError(Exception):
    pass


@contextmanager
def staged(*targets):
    """Yield same-named paths in a scratch directory; move them into place only on success."""
    targets = [Path(t) for t in targets]
    for t in targets:
        t.parent.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=".cfan-", dir=targets[0].parent))
    try:
        temps = [scratch / f"{i}_{t.name}" for i, t in enumerate(targets)]
        yield temps
        for tmp, target in zip(temps, targets):
            if tmp.exists():
                shutil.move(str(tmp), str(target))
    finally:
        shutil.rmtree(scratch, ignore_errors=True)


def _write_text(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


# -- subcommands ---------------------------------------------------------------


def cmd_synth(args) -> None:
    cfg = SynthConfig(image_size=args.image_size, n_classes=args.n_classes, n_known=args.n_known,
                      n_train=args.n_train, n_val=args.n_val, n_test=args.n_test, seed=args.seed)
    manifest = generate_synthetic(cfg, args.out)
    print(f"wrote {len(manifest.entries)} images to {args.out} (known classes {manifest.known_classes})")


def _train_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.set:
        lines = cfg.to_text().splitlines() + [s.replace("=", " = ", 1) for s in args.set]
        cfg = parse_config("\n".join(lines))
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
    return cfg


def cmd_train(args) -> None:
    from .plotting import plot_training

    cfg = _train_config(args)
    data = load_dataset(args.data)
    n_known = len(data.known_classes)
    if cfg.model.classes != n_known:
        log.info("classes set to %d from the dataset", n_known)
        cfg = replace(cfg, model=replace(cfg.model, classes=n_known))
    resume = load_checkpoint(args.resume) if args.resume else None
    x, y, _ = data.arrays("train", known=True)
    if x.shape[-1] != cfg.model.image_size:
        raise CLIError(f"config image_size {cfg.model.image_size} does not match data ({x.shape[-1]})")
    print("# learning rate and epochs are desk-scale defaults unless set in the config", file=sys.stderr)
    result = train_loop(cfg, x, y, resume=resume)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".csv")
    with staged(out, log_path, log_path.with_suffix(".png")) as (ckpt_tmp, log_tmp, fig_tmp):
        save_checkpoint(ckpt_tmp, result.model, result.optimizer, result.rng, result.epoch, cfg.to_text())
        _write_text(log_tmp, result.log_csv())
        plot_training(result.log, fig_tmp)
    last = result.log[-1] if result.log else {"loss": float("nan"), "train_acc": float("nan")}
    print(f"epoch {result.epoch}: loss {last['loss']:.4f} train_acc {last['train_acc']:.3f} -> {out}")


def cmd_eval(args) -> None:
    from .plotting import plot_curves

    ckpt = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    views = [v.strip() for v in args.views.split(",") if v.strip()]
    bad = [v for v in views if v not in ("test", "HFI", "LFI")]
    if bad:
        raise CLIError(f"unknown view(s) {bad}; choose from test, HFI, LFI")
    reports = eval_run(ckpt.model, data, views, args.cutoff)
    out = Path(args.out)
    targets = []
    for view in reports:
        base = out if view == "test" else out.with_name(f"{out.stem}_{view}{out.suffix}")
        targets += [base, base.with_name(base.stem + "_roc.png"), base.with_name(base.stem + "_oscr.png")]
    with staged(*targets) as temps:
        for i, report in enumerate(reports.values()):
            csv_tmp, roc_tmp, oscr_tmp = temps[3 * i:3 * i + 3]
            _write_text(csv_tmp, report.to_csv())
            prefix = csv_tmp.with_suffix("")
            for path in plot_curves(report, prefix):
                path.replace(roc_tmp if path.name.endswith("_roc.png") else oscr_tmp)
    for view, report in reports.items():
        m = report.metrics()
        print(view + ": " + " ".join(f"{k}={'n/a' if v is None else f'{v:.4f}'}" for k, v in m.items()))


def _parse_p(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise CLIError(f"--p expects comma-separated numbers, got {text!r}") from None


def cmd_filters(args) -> None:
    from .plotting import plot_mask

    h = args.height or args.size
    w = args.width or args.size
    bank = build_templates(h, w, args.nt)
    if args.mode == "template":
        if not 1 <= args.index <= args.nt:
            raise CLIError(f"--index must lie in [1, {args.nt}]")
        masks = bank.masks[args.index - 1][None]
        stem = f"template_{h}x{w}_nt{args.nt}_i{args.index}"
    else:
        masks = make_filter(args.mode, _parse_p(args.p), bank)
        stem = f"{args.mode}_{h}x{w}_nt{args.nt}_p{args.p.replace(',', '-')}"
    out = Path(args.out_dir)
    targets = []
    for c in range(len(masks)):
        name = stem if len(masks) == 1 else f"{stem}_c{c}"
        targets += [out / f"{name}.pgm", out / f"{name}.csv", out / f"{name}.png"]
    with staged(*targets) as temps:
        for c, mask in enumerate(masks):
            pgm, csv, png = temps[3 * c:3 * c + 3]
            write_pnm(pgm, np.rint(np.clip(mask, 0, 1) * 255).astype(np.uint8))
            _write_text(csv, "\n".join(",".join(repr(float(v)) for v in row) for row in mask) + "\n")
            plot_mask(mask, png, stem)
    for c, mask in enumerate(masks):
        print(f"mask {c}: min {mask.min():.6f} max {mask.max():.6f} mean {mask.mean():.6f}")


def cmd_hfi_lfi(args) -> None:
    pixels = read_pnm(args.input)
    gray = pixels.ndim == 2
    image = from_uint8(pixels)
    out = np.clip(hfi_lfi_transform(image, args.cutoff, args.kind), 0.0, 1.0)
    result = to_uint8(out)
    with staged(args.out) as (tmp,):
        write_pnm(tmp, result[..., 0] if gray else result)
    print(f"{args.kind} at cutoff {args.cutoff} -> {args.out}")


def cmd_gradcheck(args) -> None:
    from .gradcheck import run_suite

    results = run_suite(trials=args.trials, seed=args.seed, include_model=not args.no_model)
    lines = ["check,rel_err,tolerance,passed"]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:24s} {r.error:.3e} (< {r.tolerance:g})")
        lines.append(f"{r.name},{r.error!r},{r.tolerance!r},{int(r.passed)}")
    if args.out:
        with staged(args.out) as (tmp,):
            _write_text(tmp, "\n".join(lines) + "\n")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise CLIError(f"{len(failed)} gradient check(s) failed: {', '.join(failed)}")


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cfan", description="Frequency-varying open-set recognition toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic mixed-cue dataset")
    s.add_argument("--out", required=True, help="output directory (replaced atomically)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--image-size", type=int, default=64)
    s.add_argument("--n-classes", type=int, default=10)
    s.add_argument("--n-known", type=int, default=6)
    s.add_argument("--n-train", type=int, default=200, help="train images per known class")
    s.add_argument("--n-val", type=int, default=20, help="validation images per known class")
    s.add_argument("--n-test", type=int, default=50, help="test images per class")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model and write a checkpoint plus log")
    t.add_argument("--data", required=True, help="dataset directory or manifest")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--log", help="training log CSV (default: next to the checkpoint)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint and write the report CSV")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="report CSV; figures are written next to it")
    e.add_argument("--views", default="test", help="comma list of test, HFI, LFI")
    e.add_argument("--cutoff", type=float, default=0.25, help="HFI/LFI cutoff")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("filters", help="emit assembled masks or templates as P5 graymaps and CSV")
    f.add_argument("--size", type=int, default=64)
    f.add_argument("--height", type=int)
    f.add_argument("--width", type=int)
    f.add_argument("--nt", type=int, default=20)
    f.add_argument("--p", default="1", help="shape parameter(s), comma separated for several channels")
    f.add_argument("--mode", choices=("high", "low", "template"), default="high")
    f.add_argument("--index", type=int, default=1, help="template index for --mode template")
    f.add_argument("--out-dir", default=".")
    f.set_defaults(func=cmd_filters)

    h = sub.add_parser("hfi-lfi", help="high- or low-frequency version of a P5/P6 image")
    h.add_argument("--input", required=True)
    h.add_argument("--out", required=True)
    h.add_argument("--cutoff", type=float, default=0.25)
    h.add_argument("--kind", choices=("HFI", "LFI"), default="LFI")
    h.set_defaults(func=cmd_hfi_lfi)

    g = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    g.add_argument("--trials", type=int, default=3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--no-model", action="store_true", help="skip the whole-model check")
    g.add_argument("--out", help="optional CSV of results")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CLIError, OSError, ValueError, KeyError, CheckpointError, ManifestError,
            DivergenceError, FloatingPointError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"cfan {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
