"""Command-line entry point: ``stvnet <command> ...``.

Every command also takes ``--config FILE``: a JSON object whose keys are
the long flag names (dashes or underscores).  Flags given on the command
line override the file.  ``STVNET_THREADS`` caps the BLAS thread pool
(default 1, the reproducible reference mode).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .errors import FormatError, SpecError
from .gradsuite import MODULES, run_checks
from .harness import build_samples, run_cv, sample_arrays, sweep_gates, write_report, write_sweep_csv
from .networks import ARCHS, NetworkSpec, binarize, load_checkpoint, predict, save_checkpoint
from .phantom import (
    PhantomConfig,
    generate_dataset,
    read_dataset,
    read_header,
    read_mask_series,
    read_study,
    shape_arg,
    study_dirs,
    write_dataset,
    write_segmentation,
)
from .quantification import quantify_masks, write_quant_csv
from .training import TrainConfig, train, write_log

log = logging.getLogger("stvnet")

THREADS_ENV = "STVNET_THREADS"


def _pair(text: str) -> tuple[float, float]:
    a, b = (float(v) for v in text.split(","))
    return a, b


def _add_training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--arch", choices=ARCHS, default="stvnet")
    p.add_argument("--gates", type=int, default=2, help="window length T (vnet uses 1)")
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--base-channels", type=int, default=8)
    p.add_argument("--l1-weight", type=float, default=1e-5)
    p.add_argument("--l1-mode", choices=("weighted", "literal"), default="weighted")
    p.add_argument("--activation-mode", choices=("literal", "conventional"), default="literal")
    p.add_argument("--no-augment", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stvnet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    parser.commands = {}

    def command(name, help):
        p = parser.commands[name] = sub.add_parser(name, help=help)
        p.add_argument("--config", help="JSON file with default flag values")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = command("phantom", "generate a synthetic gated dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=20)
    p.add_argument("--shape", type=shape_arg, default=(32, 32, 12), help="HxWxD")
    p.add_argument("--gates", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ef-range", type=_pair, default=(0.30, 0.65), help="a,b")
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--background", type=float, default=0.2, help="activity outside the myocardium")
    p.add_argument("--spacing", type=float, default=6.4, help="voxel size in mm")
    p.add_argument("--wall-frac", type=_pair, default=None, help="a,b of the x semi-axis")

    p = command("train", "train one network on every subject of a dataset")
    _add_training(p)
    p.add_argument("--structure", choices=("epi", "endo"), default="epi")

    p = command("crossval", "subject-level k-fold cross-validation")
    _add_training(p)
    p.add_argument("--structure", choices=("epi", "endo", "both"), default="both")
    p.add_argument("--folds", type=int, default=5)

    p = command("segment", "predict masks with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = command("quantify", "EDV, ESV and RVEF from mask files")
    p.add_argument("--masks", required=True, help="directory of subject directories")
    p.add_argument("--out", required=True, help="CSV file")
    p.add_argument("--structure", choices=("endo", "epi"), default="endo")

    p = command("gradcheck", "compare tape gradients with finite differences")
    p.add_argument("--module", choices=("all",) + MODULES, default="all")
    p.add_argument("--seeds", type=int, default=10)

    p = command("sweep-gates", "cross-validate every window length T in a range")
    _add_training(p)
    p.add_argument("--structure", choices=("epi", "endo", "both"), default="endo")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--tmin", type=int, default=1)
    p.add_argument("--tmax", type=int, default=8)
    return parser


def _config_path(argv: list[str]) -> tuple[str | None, str | None]:
    """``(command, config file)`` picked out of ``argv`` before full parsing."""
    command = next((a for a in argv if not a.startswith("-")), None)
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return command, argv[i + 1]
        if a.startswith("--config="):
            return command, a.split("=", 1)[1]
    return command, None


def parse_args(argv=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    command, path = _config_path(argv)
    if path and command in parser.commands:
        try:
            cfg = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            parser.error(f"cannot read config {path}: {exc}")
        if not isinstance(cfg, dict):
            parser.error("config file must hold a JSON object")
        # file values become defaults; anything on the command line wins
        sub = parser.commands[command]
        actions = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, value in cfg.items():
            dest = key.replace("-", "_")
            if dest not in actions or dest in ("help", "config"):
                parser.error(f"config key {key!r} is not a {command} option")
            action = actions[dest]
            if action.type is not None and isinstance(value, str):
                value = action.type(value)
            elif isinstance(value, list):
                value = tuple(value)
            defaults[dest] = value
            action.required = False
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


@contextmanager
def _threads():
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise SpecError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    with threadpool_limits(limits=max(1, n)):
        yield


def _structures(name: str) -> tuple[str, ...]:
    return ("epi", "endo") if name == "both" else (name,)


def _window(args) -> int:
    return 1 if args.arch == "vnet" else args.gates


def _train_config(args, **kw) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size,
        l1_weight=args.l1_weight, l1_mode=args.l1_mode, window_T=_window(args), seed=args.seed,
        augment=not args.no_augment, **kw)


def _net_spec(args, studies, structure="epi") -> NetworkSpec:
    return NetworkSpec(arch=args.arch, base_channels=args.base_channels, window_T=_window(args),
                       input_shape=studies[0].shape, structure=structure,
                       activation_mode=args.activation_mode)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, default=list))


def cmd_phantom(args) -> int:
    kw = {} if args.wall_frac is None else {"wall_frac": args.wall_frac}
    cfg = PhantomConfig(shape=args.shape, gates=args.gates, subjects=args.subjects, seed=args.seed,
                        ef_range=args.ef_range, noise=args.noise, background=args.background,
                        spacing_mm=args.spacing, **kw)
    studies = generate_dataset(cfg)
    out = write_dataset(studies, args.out)
    _write_json(out / "phantom.json", cfg.to_dict())
    efs = [s.analytic_ef for s in studies]
    print(f"wrote {len(studies)} subjects to {out} (RVEF {min(efs):.3f}..{max(efs):.3f})")
    return 0


def cmd_train(args) -> int:
    studies = read_dataset(args.data)
    spec = _net_spec(args, studies, args.structure)
    cfg = _train_config(args)
    data = sample_arrays(studies, build_samples(studies, args.structure, spec.window_T))
    result = train(data, spec, cfg,
                   on_epoch=lambda r: log.info("epoch %d loss %.5f dsc %.4f", r.epoch, r.loss, r.dsc))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.net, out / "model.ckpt")
    write_log(result.log, out / "log.csv")
    _write_json(out / "config.json", {"spec": spec.to_dict(), "train": cfg.to_dict()})
    last = result.log[-1]
    print(f"trained {spec.arch} ({args.structure}) for {last.epoch} epochs; "
          f"final loss {last.loss:.5f}, train DSC {last.dsc:.4f}; model at {out / 'model.ckpt'}")
    return 0


def cmd_crossval(args) -> int:
    studies = read_dataset(args.data)
    spec = _net_spec(args, studies)
    cfg = _train_config(args, folds=args.folds)
    report = run_cv(studies, spec, cfg, _structures(args.structure))
    out = Path(args.out)
    files = write_report(report, out)
    _write_json(out / "config.json", {"spec": spec.to_dict(), "train": cfg.to_dict()})
    for st, sc, m, s in report.aggregate():
        print(f"{spec.arch} {st} {sc}: {m:.4f} ± {s:.4f}")
    if report.rvef_agreement is not None:
        a = report.rvef_agreement
        print(f"RVEF agreement: MAE {a.mae:.4f} RMSE {a.rmse:.4f} PCC {a.pcc:.4f}")
    print(f"tables in {out}: {', '.join(sorted(files.values()))}")
    return 0


def cmd_segment(args) -> int:
    net = load_checkpoint(args.model)
    spec = net.spec
    n = 0
    for d in study_dirs(args.data):
        study = read_study(d)
        if study.shape != spec.input_shape:
            raise SpecError(f"{study.id}: volume shape {study.shape} differs from the model's {spec.input_shape}")
        samples = build_samples([study], spec.structure, spec.window_T)
        prob = predict(net, sample_arrays([study], samples).windows)
        header = read_header(d)
        header.update(arch=spec.arch, structure=spec.structure)
        write_segmentation(args.out, header, spec.structure, binarize(prob), prob.astype(np.float32))
        n += 1
    print(f"segmented {spec.structure} for {n} subjects into {args.out}")
    return 0


def cmd_quantify(args) -> int:
    rows = []
    for d in study_dirs(args.masks):
        header, masks = read_mask_series(d, args.structure)
        r = quantify_masks(masks, float(header["spacing_mm"]))
        rows.append((header["id"], header.get("arch", "truth"), r))
    if not rows:
        raise FormatError("no subject directories found", args.masks)
    write_quant_csv(rows, args.out)
    for sid, arch, r in rows:
        print(f"{sid} {arch}: EDV {r.edv:.2f} ml (gate {r.edv_gate}), ESV {r.esv:.2f} ml "
              f"(gate {r.esv_gate}), RVEF {r.rvef:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    modules = MODULES if args.module == "all" else (args.module,)
    results = run_checks(modules, seeds=args.seeds, report=lambda r: print(
        f"{'PASS' if r.passed else 'FAIL'} {r.module:9s} {r.name:30s} max rel err {r.worst:.3e} "
        f"(tol {r.tol:.0e}, {r.seconds:.1f}s)", flush=True))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_sweep(args) -> int:
    if args.arch == "vnet" and (args.tmin, args.tmax) != (1, 1):
        raise SpecError("vnet reads a single gate; sweep it with --tmin 1 --tmax 1")
    if not 1 <= args.tmin <= args.tmax:
        raise SpecError(f"need 1 <= tmin <= tmax, got {args.tmin}..{args.tmax}")
    studies = read_dataset(args.data)
    spec = _net_spec(args, studies)
    cfg = _train_config(args, folds=args.folds)
    rows = sweep_gates(studies, spec, cfg, range(args.tmin, args.tmax + 1), _structures(args.structure))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(rows, out / "sweep.csv")
    for arch, t, st, sc, m, s in rows:
        if sc == "dsc":
            print(f"{arch} T={t} {st} DSC {m:.4f} ± {s:.4f}")
    print(f"curve data in {out / 'sweep.csv'}")
    return 0


COMMANDS = {
    "phantom": cmd_phantom, "train": cmd_train, "crossval": cmd_crossval, "segment": cmd_segment,
    "quantify": cmd_quantify, "gradcheck": cmd_gradcheck, "sweep-gates": cmd_sweep,
}


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _threads():
            return COMMANDS[args.command](args)
    except (SpecError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
