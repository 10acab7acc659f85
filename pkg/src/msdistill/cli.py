"""Command-line entry point: ``msdistill {gen-data,pretrain,gradcheck,probe}``.

Exit codes: 0 success, 1 invalid input, configuration or a failed gradient
check, 2 numerical abort during pretraining.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import RunConfig, dump_config, load_config
from .errors import MsDistillError, NumericalAbort, ValidationError
from .gradcheck import COMPONENTS, THRESHOLD, run_gradcheck
from .model import StudentModel, save_model
from .probe import probe_model
from .raster import DatasetManifest, SynthConfig, generate_synthetic_dataset
from .teachers import FrozenTeacher, default_frozen_encoder
from .trainer import train


def build_frozen_teacher(cfg: RunConfig) -> FrozenTeacher:
    t = cfg.teacher
    width = cfg.train.heads.bottleneck_opt
    if t.variant == "random":
        enc = default_frozen_encoder(cfg.train.encoder, width, t.depth or None)
        return FrozenTeacher.random(enc, t.seed)
    if t.variant == "stub":
        return FrozenTeacher.stub(default_frozen_encoder(cfg.train.encoder, width, t.depth or None))
    if t.variant == "file":
        if not t.path:
            raise ValidationError("teacher.variant = file needs teacher.path")
        return FrozenTeacher.load(t.path)
    raise ValidationError(f"unknown teacher.variant {t.variant!r}; use random, file or stub")


def _load_data(path: str) -> DatasetManifest:
    if not path:
        raise ValidationError("no dataset given; pass --data or set data.path")
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"dataset {p} does not exist")
    return DatasetManifest.load(p)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    synth = SynthConfig()
    if args.nonoptical_fraction is not None:
        synth.nonoptical_fraction = args.nonoptical_fraction
    data = generate_synthetic_dataset(args.items, args.channels, args.size, args.size, args.classes, args.seed, synth)
    manifest = data.save(args.out)
    print(f"wrote {len(data)} items ({data.channels} channels, {args.size}x{args.size}, {args.classes} classes)")
    print(f"manifest and channel statistics: {manifest}")
    return 0


def cmd_pretrain(args) -> int:
    overrides = list(args.set or [])
    if args.data is not None:
        overrides.append(f"data.path={args.data}")
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    cfg = load_config(args.config, overrides)
    cfg.train.validate()
    data = _load_data(cfg.data.path)
    frozen = build_frozen_teacher(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.txt").write_text(dump_config(cfg), encoding="utf-8")
    try:
        res = train(cfg.train, data, frozen, out_dir=out, resume=args.resume)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}; diagnostics in {exc.dump_path}", file=sys.stderr)
        return 2
    last = res.history[-1] if res.history else {}
    print(f"finished {res.steps} steps in {res.wall_seconds:.1f} s; final total loss {last.get('total', float('nan')):.6f}")
    print(f"metrics: {res.metrics_path}")
    print(f"checkpoint: {res.checkpoint_path}")
    return 0


def cmd_gradcheck(args) -> int:
    comps = COMPONENTS if args.component == "all" else (args.component,)
    results = run_gradcheck(comps, seed=args.seed, break_cholesky=args.break_cholesky_backward)
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        ok &= r.passed
        print(f"{r.component:6s} max_rel_error {r.max_rel_error:.3e} coords {r.n_coords:4d} {r.seconds:6.2f}s {status}")
    print(f"threshold {THRESHOLD:.0e}: {'all passed' if ok else 'FAILED'}")
    return 0 if ok else 1


def cmd_probe(args) -> int:
    cfg = load_config(args.config, list(args.set or []))
    data = _load_data(args.data or cfg.data.path)
    fraction = cfg.data.probe_train_fraction if args.train_fraction is None else args.train_fraction
    if args.random_init:
        model = StudentModel.create(cfg.train.encoder, cfg.train.heads, seed=args.seed)
        source = "random-init"
    else:
        ckpt = Path(args.checkpoint)
        if not ckpt.exists():
            raise ValidationError(f"checkpoint {ckpt} does not exist")
        model = ckpt
        source = str(ckpt)
    report = probe_model(model, data, args.branch, fraction, args.seed, args.cls, args.epochs, args.lr)
    text = f"source {source}\nbranch {args.branch}\nfeatures {'cls' if args.cls else 'pooled-patch'}\n" + report.to_text()
    if args.report:
        out = Path(args.report)
    elif args.random_init:
        out = Path(f"probe_random_init_{args.branch}.txt")
    else:
        out = Path(args.checkpoint).with_name(f"probe_{args.branch}.txt")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")
    print(f"{args.branch} probe accuracy {report.accuracy:.4f} (train {report.train_accuracy:.4f}); report {out}")
    return 0


def cmd_init_model(args) -> int:
    """Write a randomly initialized student checkpoint (handy as a probe baseline)."""
    cfg = load_config(args.config, list(args.set or []))
    model = StudentModel.create(cfg.train.encoder, cfg.train.heads, seed=args.seed)
    path = save_model(args.out, model, {"seed": args.seed})
    print(f"wrote {model.n_parameters()} parameters to {path}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="msdistill", description="Dual-teacher multispectral self-distillation at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic multispectral dataset")
    g.add_argument("--out", required=True, help="output directory (MSR files + manifest.json)")
    g.add_argument("--items", type=int, default=512, help="number of images (default 512)")
    g.add_argument("--channels", type=int, default=10, help="spectral channels, at least 3 (default 10)")
    g.add_argument("--size", type=int, default=32, help="height and width in pixels (default 32)")
    g.add_argument("--classes", type=int, default=4, help="number of classes (default 4)")
    g.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    g.add_argument("--nonoptical-fraction", type=float, default=None,
                   help="share of class-signature energy in channels >= 3; 1 puts it all outside RGB")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("pretrain", help="run pretraining")
    t.add_argument("--config", default=None, help="flat 'section.key = value' config file")
    t.add_argument("--data", default=None, help="dataset directory or manifest (sets data.path)")
    t.add_argument("--out", required=True, help="run directory for metrics, checkpoints and resolved config")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable (e.g. loss.gamma=0)")
    t.add_argument("--seed", type=int, default=None, help="sets train.seed")
    t.add_argument("--resume", default=None, help="training checkpoint to continue from")
    t.set_defaults(func=cmd_pretrain)

    c = sub.add_parser("gradcheck", help="finite-difference check of every loss component at float64")
    c.add_argument("--component", choices=COMPONENTS + ("all",), default="all", help="component to check (default all)")
    c.add_argument("--break-cholesky-backward", action="store_true", help="inject a wrong Cholesky backward (negative control)")
    c.add_argument("--seed", type=int, default=0, help="micro-batch and coordinate sampling seed (default 0)")
    c.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("probe", help="linear probe on frozen student features")
    src = r.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", help="student or training checkpoint")
    src.add_argument("--random-init", action="store_true", help="probe a freshly initialized student instead")
    r.add_argument("--config", default=None, help="config file (architecture for --random-init, data.* keys)")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
    r.add_argument("--data", default=None, help="dataset directory or manifest (default data.path)")
    r.add_argument("--branch", choices=("ms", "optical"), default="ms", help="input branch (default ms)")
    r.add_argument("--cls", action="store_true", help="use the class token instead of pooled patch tokens")
    r.add_argument("--train-fraction", type=float, default=None,
                   help="stratified train share (default data.probe_train_fraction, 0.5)")
    r.add_argument("--epochs", type=int, default=200, help="gradient-descent epochs (default 200)")
    r.add_argument("--lr", type=float, default=0.1, help="probe learning rate (default 0.1)")
    r.add_argument("--seed", type=int, default=0, help="split seed, and init seed for --random-init (default 0)")
    r.add_argument("--report", default=None, help="report path (default beside the checkpoint)")
    r.set_defaults(func=cmd_probe)

    i = sub.add_parser("init-model", help="write a randomly initialized student checkpoint")
    i.add_argument("--config", default=None, help="architecture config")
    i.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
    i.add_argument("--out", required=True, help="checkpoint path")
    i.add_argument("--seed", type=int, default=0, help="initialization seed (default 0)")
    i.set_defaults(func=cmd_init_model)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}; diagnostics in {exc.dump_path}", file=sys.stderr)
        return 2
    except (MsDistillError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
