"""Command-line entry point.

Subcommands: synth, project-scar, train, infer, evaluate, ablate, pipeline.
Exit status is 0 on success, 2 on usage errors and 1 on runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import dataset, metrics
from .features import channel_layout
from .mesh import extract_hybrid_input, load_labels, load_mesh_sequence, save_labeled_surface, save_labels
from .network import NetworkConfig, load_checkpoint, read_header
from .scar import ProjectionConfig, label_fraction, load_scar_csv, scar_labels
from .synth import SynthConfig, generate, split, write_dataset
from .training import (LossConfig, TrainConfig, fit_motion_threshold, infer_case,
                       motion_threshold_predict, prepare_case, train)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("motion2infarct")


class UsageError(Exception):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, exc):
        super().__init__(f"stage {stage} failed: {exc}")
        self.stage = stage


# -- config ------------------------------------------------------------------

FEATURE_KEYS = ("motion", "thickness")


def read_config(path) -> dict:
    """Flat key/value TOML document."""
    if path is None:
        return {}
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    nested = [k for k, v in doc.items() if isinstance(v, dict)]
    if nested:
        raise UsageError(f"{path}: config must be flat, found tables {nested}")
    return doc


def split_config(doc: dict):
    """Distribute flat keys over (NetworkConfig, LossConfig, TrainConfig, feature flags)."""
    targets = {"network": NetworkConfig, "loss": LossConfig, "train": TrainConfig}
    parts = {k: {} for k in targets}
    feats = {"motion": True, "thickness": True}
    for key, value in doc.items():
        if key in FEATURE_KEYS:
            feats[key] = bool(value)
            continue
        owner = [name for name, cls in targets.items() if key in {f.name for f in fields(cls)}]
        if not owner:
            raise UsageError(f"unknown config key {key!r}")
        parts[owner[0]][key] = value
    net = parts["network"]
    net.setdefault("input_channels", 3 + 3 * feats["motion"] + feats["thickness"])
    return NetworkConfig(**net), LossConfig(**parts["loss"]), TrainConfig(**parts["train"]), feats


# -- helpers ------------------------------------------------------------------

def _prepare(data_dir, names, feats):
    out = []
    for name in names:
        mesh, labels = dataset.load_case(data_dir, name)
        out.append(prepare_case(mesh, labels, motion=feats["motion"], thickness=feats["thickness"], name=name))
    return out


def _evaluate(state, cases, threshold=0.5):
    rows = [(infer_case(state, c, threshold)[0], c.labels, c.ed_positions) for c in cases]
    return metrics.evaluate_dataset(rows, names=[c.name for c in cases])


def _write_json(path, doc):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


# -- commands -----------------------------------------------------------------

def cmd_synth(args):
    doc = read_config(args.config)
    if args.seed is not None:
        doc["rng_seed"] = args.seed
    if args.n_cases is not None:
        doc["n_cases"] = args.n_cases
    known = {f.name for f in fields(SynthConfig)}
    bad = sorted(set(doc) - known)
    if bad:
        raise UsageError(f"unknown synth config keys {bad}")
    cfg = SynthConfig(**doc)
    fractions = tuple(float(x) for x in args.split.split(","))
    cases = generate(cfg)
    parts = split(len(cases), fractions, seed=cfg.rng_seed)
    write_dataset(cases, args.out, parts)
    print(f"wrote {len(cases)} cases to {args.out} "
          f"(train {len(parts['train'])}, val {len(parts['val'])}, test {len(parts['test'])})")


def cmd_project_scar(args):
    mesh = load_mesh_sequence(args.mesh)
    hybrid = extract_hybrid_input(mesh)
    points = load_scar_csv(args.points)
    cfg = ProjectionConfig(sigma_z=args.sigma, samples_per_voxel=args.samples,
                           k_vertices=args.k, rng_seed=args.seed)
    labels = scar_labels(points, mesh, hybrid, cfg)
    save_labels(labels, args.out, vertex_ids=hybrid.endo_vertices)
    print(f"{len(points)} scar points -> {int(labels.labels.sum())} of {labels.domain_size} "
          f"endocardial vertices labelled ({100 * label_fraction(labels):.1f}%)")


def cmd_train(args):
    net_cfg, loss_cfg, train_cfg, feats = split_config(read_config(args.config))
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    if args.epochs is not None:
        train_cfg = replace(train_cfg, epochs=args.epochs)
    parts = dataset.load_split(args.split)
    tr = _prepare(args.data, parts["train"], feats)
    va = _prepare(args.data, parts["val"], feats)
    net_cfg = replace(net_cfg, input_channels=tr[0].features.n_channels)
    result = train(tr, net_cfg, loss_cfg, train_cfg, val_cases=va, out_dir=args.out, resume=args.resume)
    resolved = {**net_cfg.to_dict(), **asdict(loss_cfg), **asdict(train_cfg), **feats}
    _write_json(os.path.join(args.out, "resolved_config.json"), resolved)
    last = result.log[-1] if result.log else {}
    print(f"trained {len(result.log)} epochs; best epoch {result.best_epoch}; "
          f"last loss {last.get('train_loss', float('nan')):.4f}")


def _infer_one(model_path, manifest, feats, threshold):
    state, _, header = load_checkpoint(model_path)
    want = channel_layout(feats["motion"], feats["thickness"])
    have = tuple(header["channel_layout"])
    if have and have != want:
        raise ValueError(f"checkpoint channel layout {list(have)} does not match requested "
                         f"features {list(want)}; pass matching --no-motion/--no-thickness flags")
    mesh = load_mesh_sequence(manifest)
    t0 = time.perf_counter()
    case = prepare_case(mesh, motion=feats["motion"], thickness=feats["thickness"])
    labels, _ = infer_case(state, case, threshold)
    return mesh, case, labels, time.perf_counter() - t0


def cmd_infer(args):
    feats = {"motion": not args.no_motion, "thickness": not args.no_thickness}
    mesh, _, labels, dt = _infer_one(args.model, args.mesh, feats, args.threshold)
    hybrid = extract_hybrid_input(mesh)
    save_labels(labels, args.out, vertex_ids=hybrid.endo_vertices)
    if args.surface:
        save_labeled_surface(mesh, mesh.ed_phase, labels, args.surface, hybrid)
    print(f"{args.mesh}: {int(labels.labels.sum())}/{labels.domain_size} vertices labelled "
          f"in {dt:.2f} s")


def cmd_evaluate(args):
    names = sorted(n[:-5] if n.endswith(".json") else n for n in os.listdir(args.pred)
                   if n.endswith(".json") or os.path.isdir(os.path.join(args.pred, n)))
    rows, used = [], []
    for name in names:
        try:
            pred_file = dataset.labels_path(args.pred, name)
        except FileNotFoundError:
            continue
        pred = load_labels(pred_file)
        gt = load_labels(dataset.labels_path(args.gt, name))
        mesh = load_mesh_sequence(os.path.join(args.mesh, name, "manifest.json"))
        hybrid = extract_hybrid_input(mesh)
        rows.append((pred, gt, mesh.positions[mesh.ed_phase, hybrid.endo_vertices]))
        used.append(name)
    report = metrics.evaluate_dataset(rows, names=used)
    with open(args.out, "w") as fh:
        fh.write(report.to_json())
    print(f"{len(used)} cases: {report.summary()}")


@dataclass(frozen=True)
class Variant:
    name: str
    motion: bool = True
    thickness: bool = True
    use_temporal_attention: bool = True


DEFAULT_VARIANTS = {
    "full": Variant("full"),
    "no_temporal_attention": Variant("no_temporal_attention", use_temporal_attention=False),
    "no_motion": Variant("no_motion", motion=False),
    "no_thickness": Variant("no_thickness", thickness=False),
}


def format_table(rows) -> str:
    head = f"{'Method':<24}" + "".join(f"{m:>18}" for m in ("Dice", "Recall", "ASD (mm)", "G Dice"))
    lines = [head, "-" * len(head)]
    for row in rows:
        if "error" in row:
            lines.append(f"{row['variant']:<24}  failed: {row['error']}")
            continue
        cells = "".join(f"{row[k]:>10.3f} ± {row['std'][k]:<5.3f}" for k in metrics.METRICS)
        lines.append(f"{row['variant']:<24}{cells}")
    return "\n".join(lines)


def run_ablation(data_dir, parts, variants, base_doc, out_dir, train_fn=train):
    """Train and test each variant with identical seeds and splits."""
    rows = []
    for var in variants:
        try:
            net_cfg, loss_cfg, train_cfg, _ = split_config(base_doc)
            feats = {"motion": var.motion, "thickness": var.thickness}
            tr = _prepare(data_dir, parts["train"], feats)
            va = _prepare(data_dir, parts["val"], feats)
            te = _prepare(data_dir, parts["test"], feats)
            net_cfg = replace(net_cfg, input_channels=tr[0].features.n_channels,
                              use_temporal_attention=var.use_temporal_attention)
            vdir = os.path.join(out_dir, var.name) if out_dir else None
            result = train_fn(tr, net_cfg, loss_cfg, train_cfg, val_cases=va, out_dir=vdir)
            report = _evaluate(result.best_state, te)
            rows.append({"variant": var.name, **{k: getattr(report, k) for k in metrics.METRICS},
                         "std": report.std, "asd_excluded": report.asd_excluded,
                         "n_test": report.n_cases})
        except Exception as exc:  # recorded per variant; the table is still emitted
            log.exception("variant %s failed", var.name)
            rows.append({"variant": var.name, "error": str(exc)})
    return rows


def threshold_baseline(data_dir, parts):
    feats = {"motion": True, "thickness": True}
    tr = _prepare(data_dir, parts["train"], feats)
    te = _prepare(data_dir, parts["test"], feats)
    thr = fit_motion_threshold(tr)
    rows = [(motion_threshold_predict(c, thr), c.labels, c.ed_positions) for c in te]
    report = metrics.evaluate_dataset(rows, names=[c.name for c in te])
    return {"variant": "motion_threshold_baseline", "threshold": thr,
            **{k: getattr(report, k) for k in metrics.METRICS}, "std": report.std}


def cmd_ablate(args):
    doc = read_config(args.config)
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.epochs is not None:
        doc["epochs"] = args.epochs
    names = [n.strip() for n in args.variants.split(",") if n.strip()]
    if len(set(names)) != len(names):
        raise UsageError("variant names must be unique")
    unknown = [n for n in names if n not in DEFAULT_VARIANTS]
    if unknown:
        raise UsageError(f"unknown variants {unknown}; choose from {list(DEFAULT_VARIANTS)}")
    parts = dataset.load_split(args.split)
    rows = run_ablation(args.data, parts, [DEFAULT_VARIANTS[n] for n in names], doc, args.out)
    baseline = threshold_baseline(args.data, parts)
    os.makedirs(args.out, exist_ok=True)

    def clean(x):
        if isinstance(x, float) and math.isnan(x):
            return None
        if isinstance(x, dict):
            return {k: clean(v) for k, v in x.items()}
        return x
    _write_json(os.path.join(args.out, "table.json"),
                {"rows": [clean(r) for r in rows], "baseline": clean(baseline)})
    text = format_table(rows) + "\n\n" + format_table([baseline])
    with open(os.path.join(args.out, "table.txt"), "w") as fh:
        fh.write(text + "\n")
    print(text)
    if any("error" in r for r in rows):
        return 1
    return 0


def cmd_pipeline(args):
    feats = {"motion": not args.no_motion, "thickness": not args.no_thickness}
    os.makedirs(args.out, exist_ok=True)
    try:
        mesh = load_mesh_sequence(args.mesh)
        hybrid = extract_hybrid_input(mesh)
    except Exception as exc:
        raise StageError("load_mesh", exc) from exc
    gt = None
    if args.scar:
        try:
            points = load_scar_csv(args.scar)
            cfg = ProjectionConfig(sigma_z=args.sigma, samples_per_voxel=args.samples,
                                   k_vertices=args.k, rng_seed=args.seed)
            gt = scar_labels(points, mesh, hybrid, cfg)
            save_labels(gt, os.path.join(args.out, "gt_labels.json"), vertex_ids=hybrid.endo_vertices)
        except Exception as exc:
            raise StageError("scar_projection", exc) from exc
    try:
        _, case, pred, dt = _infer_one(args.model, args.mesh, feats, args.threshold)
        save_labels(pred, os.path.join(args.out, "pred_labels.json"), vertex_ids=hybrid.endo_vertices)
    except Exception as exc:
        raise StageError("inference", exc) from exc
    if gt is not None:
        try:
            report = metrics.evaluate_dataset([(pred, gt, case.ed_positions)], names=["case"])
            with open(os.path.join(args.out, "report.json"), "w") as fh:
                fh.write(report.to_json())
            print(report.summary())
        except Exception as exc:
            raise StageError("evaluation", exc) from exc
    try:
        save_labeled_surface(mesh, mesh.ed_phase, pred, os.path.join(args.out, "pred_surface.vtk"), hybrid)
        if gt is not None:
            save_labeled_surface(mesh, mesh.ed_phase, gt, os.path.join(args.out, "gt_surface.vtk"), hybrid)
    except Exception as exc:
        raise StageError("surface_export", exc) from exc
    print(f"pipeline done in {dt:.2f} s inference; outputs in {args.out}")


# -- parser -------------------------------------------------------------------

def _add_feature_flags(p):
    p.add_argument("--no-motion", action="store_true", help="model was trained without the motion channel")
    p.add_argument("--no-thickness", action="store_true", help="model was trained without the thickness channel")


def _add_projection_flags(p):
    p.add_argument("--sigma", type=float, default=3.0, help="Z sampling std in mm (default 3)")
    p.add_argument("--samples", type=int, default=10, help="extra samples per scar point (default 10)")
    p.add_argument("--k", type=int, default=5, help="nearest endocardial vertices per point (default 5)")
    p.add_argument("--seed", type=int, default=0, help="RNG seed for Z sampling (default 0)")


def build_parser():
    parser = argparse.ArgumentParser(prog="motion2infarct", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labelled dataset")
    p.add_argument("--config", help="flat TOML with SynthConfig fields")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, help="override rng_seed")
    p.add_argument("--n-cases", type=int, help="override n_cases")
    p.add_argument("--split", default=f"{40 / 52!r},{4 / 52!r},{8 / 52!r}",
                   help="train,val,test fractions (default 40/4/8 of 52)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("project-scar", help="label endocardial vertices from scar points")
    p.add_argument("--mesh", required=True, help="mesh manifest.json")
    p.add_argument("--points", required=True, help="CSV with x_mm,y_mm,z_mm[,slice_id]")
    p.add_argument("--out", required=True, help="output labels JSON")
    _add_projection_flags(p)
    p.set_defaults(func=cmd_project_scar)

    p = sub.add_parser("train", help="train the segmentation network")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", required=True, help="split JSON with train/val/test case names")
    p.add_argument("--config", help="flat TOML with network/loss/train fields and motion/thickness flags")
    p.add_argument("--out", required=True, help="run directory (checkpoints, metrics.jsonl, config)")
    p.add_argument("--seed", type=int, help="override the training seed")
    p.add_argument("--epochs", type=int, help="override the epoch count")
    p.add_argument("--resume", action="store_true", help="continue from <out>/last.ckpt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict infarct labels for one mesh")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--mesh", required=True, help="mesh manifest.json")
    p.add_argument("--out", required=True, help="output labels JSON")
    p.add_argument("--threshold", type=float, default=0.5, help="probability threshold (default 0.5)")
    p.add_argument("--surface", help="also write a labelled VTK surface here")
    _add_feature_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="score predicted labels against ground truth")
    p.add_argument("--pred", required=True, help="directory of <case>.json or <case>/labels.json")
    p.add_argument("--gt", required=True, help="directory of <case>.json or <case>/labels.json")
    p.add_argument("--mesh", required=True, help="directory of <case>/manifest.json")
    p.add_argument("--out", required=True, help="report JSON")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and compare model variants")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", required=True, help="split JSON")
    p.add_argument("--config", help="flat TOML shared by all variants")
    p.add_argument("--out", required=True, help="output directory for runs and table.{json,txt}")
    p.add_argument("--variants", default=",".join(DEFAULT_VARIANTS),
                   help="comma-separated subset of " + ",".join(DEFAULT_VARIANTS))
    p.add_argument("--seed", type=int, help="override the training seed")
    p.add_argument("--epochs", type=int, help="override the epoch count")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("pipeline", help="scar projection, inference, evaluation and export in one go")
    p.add_argument("--mesh", required=True, help="mesh manifest.json")
    p.add_argument("--scar", help="scar CSV; enables ground truth and evaluation")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threshold", type=float, default=0.5, help="probability threshold (default 0.5)")
    _add_projection_flags(p)
    _add_feature_flags(p)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        if args.verbose:
            log.exception("command failed")
        return 1


if __name__ == "__main__":
    sys.exit(main())
