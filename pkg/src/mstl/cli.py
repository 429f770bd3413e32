"""Command-line entry point.

    mstl synth  --spec spec.json --out data.stds [--seed N]
    mstl train  --plan multistage_cbce --out-dir runs/a [--seed N]
    mstl eval   --checkpoint runs/a/classifier.ckpt --dataset test.stds --report m.json
    mstl ablate --plans plans/ --seeds 10 --report ablation.json [--ensembles]
    mstl cam    --checkpoint c.ckpt --dataset test.stds --index 3 --layer conv2 --out cam.pgm
    mstl report --input ablation.json

Exit codes: 0 success, 1 data or runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import DatasetFormatError, SpecError, SynthSpec, builtin_dataset, load_dataset, save_dataset, synth_generate
from .metrics import MetricsReport, confusion_matrix, metrics_report, render_confusion
from .model import CheckpointError, Network, grad_cam, load_checkpoint, write_pgm
from .pipeline import AblationReport, AblationRow, PlanError, ablate, bundled_plan, bundled_plan_names, load_plan, run_plan


class CommandError(Exception):
    """A data or runtime failure reported with exit code 1."""


def _write_json(path: str | Path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path: str | Path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as e:
        raise CommandError(f"cannot read {path}: {e.strerror}") from e
    except json.JSONDecodeError as e:
        raise CommandError(f"{path} is not valid JSON: {e}") from e


def _dataset(ref: str, seed: int):
    if ref.startswith("synth-"):
        return builtin_dataset(ref, seed)
    try:
        return load_dataset(ref)
    except OSError as e:
        raise CommandError(f"cannot read dataset {ref}: {e.strerror}") from e


def _network(path: str) -> Network:
    try:
        ckpt = load_checkpoint(path)
    except OSError as e:
        raise CommandError(f"cannot read checkpoint {path}: {e.strerror}") from e
    return ckpt.to_network()


def _check_compatible(net: Network, ds) -> None:
    if net.num_classes != ds.num_classes:
        raise CommandError(f"class count mismatch: checkpoint has {net.num_classes} classes, "
                           f"dataset has {ds.num_classes}")
    first = next(l for l in net.layers if l.kind == "conv")
    if first.in_channels != ds.image_shape[0]:
        raise CommandError(f"channel mismatch: checkpoint expects {first.in_channels} input channels, "
                           f"dataset has {ds.image_shape[0]}")


def cmd_synth(args) -> int:
    raw = _read_json(args.spec)
    if not isinstance(raw, dict):
        raise SpecError("spec", "must be a JSON object")
    if args.seed is not None:
        raw = {**raw, "seed": args.seed}
    spec = SynthSpec.from_dict(raw)
    ds = synth_generate(spec)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples to {args.out}")
    print("class counts:", json.dumps(ds.class_counts()))
    return 0


def _plan(ref: str):
    path = Path(ref)
    if path.exists():
        return load_plan(path)
    name = path.stem if path.suffix == ".json" else ref
    if name in bundled_plan_names():
        return bundled_plan(name)
    raise CommandError(f"plan {ref} not found (bundled plans: {', '.join(bundled_plan_names())})")


def cmd_train(args) -> int:
    plan = _plan(args.plan)
    result = run_plan(plan, seed=args.seed or 0, out_dir=args.out_dir)
    for r in result.records:
        print(f"{r.stage}: best epoch {r.best_epoch}, val loss {r.best_val_loss:.4f}")
    m = result.metrics
    kappa = "undefined" if m.kappa is None else f"{m.kappa:.4f}"
    print(f"{plan.name} on {plan.evaluation}: accuracy {m.accuracy:.4f}, kappa {kappa}")
    return 0


def cmd_eval(args) -> int:
    net = _network(args.checkpoint)
    ds = _dataset(args.dataset, args.seed or 0)
    _check_compatible(net, ds)
    preds = net.predict(ds.images).argmax(axis=1)
    report = metrics_report(confusion_matrix(ds.labels, preds, ds.num_classes))
    _write_json(args.report, report.to_dict())
    print(_render_metrics(report))
    return 0


def _render_metrics(m: MetricsReport) -> str:
    kappa = "undefined" if m.kappa is None else f"{m.kappa:.4f}"
    return f"accuracy {m.accuracy:.4f}  kappa {kappa}\n" + render_confusion(np.array(m.confusion))


def cmd_ablate(args) -> int:
    plan_dir = Path(args.plans)
    if not plan_dir.is_dir():
        raise CommandError(f"plan directory {plan_dir} does not exist")
    files = sorted(plan_dir.glob("*.json"))
    if not files:
        raise CommandError(f"no plan files (*.json) in {plan_dir}")
    if args.seeds < 1:
        raise CommandError(f"--seeds must be at least 1, got {args.seeds}")
    plans = {}
    for f in files:
        plan = load_plan(f)
        if plan.name in plans:
            raise CommandError(f"duplicate plan name {plan.name!r} in {f}")
        plans[plan.name] = plan
    start = args.seed or 0
    report = ablate(plans, seeds=range(start, start + args.seeds), ensembles=args.ensembles)
    _write_json(args.report, report.to_dict())
    table = report.render()
    Path(args.report).with_suffix(".txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_cam(args) -> int:
    net = _network(args.checkpoint)
    ds = _dataset(args.dataset, args.seed or 0)
    _check_compatible(net, ds)
    if not 0 <= args.index < len(ds):
        raise CommandError(f"index {args.index} out of range for {len(ds)} samples")
    convs = [l.name for l in net.layers if l.kind == "conv"]
    if args.layer not in convs:
        raise CommandError(f"layer {args.layer!r} is not a conv layer; valid layers: {', '.join(convs)}")
    image, label = ds[args.index]
    predicted = int(net.predict(image[None]).argmax(axis=1)[0])
    cam = grad_cam(net, image, predicted, args.layer)
    write_pgm(cam, args.out)
    print(f"sample {args.index}: label {label}, predicted {predicted}; "
          f"{cam.shape[1]}x{cam.shape[0]} saliency written to {args.out}")
    return 0


def cmd_report(args) -> int:
    raw = _read_json(args.input)
    if isinstance(raw, dict) and "rows" in raw:
        rows = [AblationRow(**r) for r in raw["rows"]]
        text = AblationReport(rows, raw.get("seeds", [])).render()
    elif isinstance(raw, dict) and "confusion" in raw:
        text = _render_metrics(MetricsReport.from_dict(raw))
    else:
        raise CommandError(f"{args.input} is neither a metrics report nor an ablation report")
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mstl", description="Staged transfer learning on synthetic grading data.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log stage progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, fn, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        p.add_argument("--seed", type=int, default=None, help="run seed (default 0)")
        p.set_defaults(fn=fn)
        return p

    p = add("synth", cmd_synth, "generate a synthetic dataset from a spec")
    p.add_argument("--spec", required=True, help="SynthSpec JSON file")
    p.add_argument("--out", required=True, help="dataset file to write")

    p = add("train", cmd_train, "run a stage plan")
    p.add_argument("--plan", required=True, help="plan JSON file or bundled plan name")
    p.add_argument("--out-dir", required=True)

    p = add("eval", cmd_eval, "score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="dataset file or builtin synth-* name")
    p.add_argument("--report", required=True, help="metrics JSON to write")

    p = add("ablate", cmd_ablate, "compare plans over several seeds")
    p.add_argument("--plans", required=True, help="directory of plan JSON files")
    p.add_argument("--seeds", type=int, required=True, help="number of seeds, starting at --seed")
    p.add_argument("--report", required=True, help="ablation JSON to write; the table goes next to it as .txt")
    p.add_argument("--ensembles", action="store_true", help="add the parallel-ensemble variants")

    p = add("cam", cmd_cam, "export a Grad-CAM saliency map as PGM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--layer", required=True, help="conv layer name")
    p.add_argument("--out", required=True)

    p = add("report", cmd_report, "render a metrics or ablation JSON as text")
    p.add_argument("--input", required=True)
    p.add_argument("--out", help="also write the text here")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except SpecError as e:
        print(f"error: invalid spec: {e}", file=sys.stderr)
    except (CommandError, PlanError, CheckpointError, DatasetFormatError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
