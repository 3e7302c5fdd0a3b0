"""consensus-fuse command line.

Subcommands: synth, fuse, eval, validate, sc, impute. Every run writes the
resolved configuration to ``<out>/config.json``; passing that file back with
``--config`` reproduces the run. Failures print ``error: <category>: <message>``
on stderr and exit with status 2.
"""
from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .core import DatasetManifest, SliceEntry, load_dataset, load_mask, write_mask
from .errors import ConsensusError
from .evaluation import (METRIC_COLUMNS, fsl_validate, metric_report, paired_t_test,
                         write_metrics_csv)
from .forest import ForestConfig
from .fusion import FusionConfig
from .pipeline import METHODS, FeatureStore, impute, rois_of, run_method, score
from .synthgen import SHAPES, SynthSpec, generate_benchmark

log = logging.getLogger("consensus_fuse")

SEED_ENV = "CONSENSUS_FUSE_SEED"

FOREST_DEFAULTS = {"trees": 50, "depth": 20, "min_samples": 5, "candidates": 14,
                   "thresholds": 10, "alpha": 1.0, "max_samples": 20000}
DEFAULTS = {
    "synth": {"n": 30, "size": 128, "shape": None, "sigma": 0.1, "experts": 3,
              "missing": 0.0, "disp_min": 10.0, "disp_max": 20.0},
    "fuse": {"method": "gcme", "lam": 0.06, "sigma_mrf": "auto", "tie": 0,
             "sc_mapping": "reliability", **FOREST_DEFAULTS},
    "eval": {"gt": "gt", "names": None},
    "validate": {"folds": 5, "lam": 0.06, **FOREST_DEFAULTS},
    "sc": dict(FOREST_DEFAULTS),
    "impute": dict(FOREST_DEFAULTS),
}
# keys that never enter the snapshot comparison for reproducibility
_RUNTIME_KEYS = ("threads", "config", "verbose")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        sys.stderr.write(f"error: usage: {message}\n")
        sys.exit(2)


def _forest_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("forest")
    g.add_argument("--trees", type=int, help="trees per forest (default 50)")
    g.add_argument("--depth", type=int, help="maximum tree depth (default 20)")
    g.add_argument("--min-samples", type=int, help="smallest node that may split (default 5)")
    g.add_argument("--candidates", type=int, help="candidate features per node (default 14)")
    g.add_argument("--thresholds", type=int, help="thresholds per candidate feature (default 10)")
    g.add_argument("--alpha", type=float, help="weight of the labeled gain in the SSL objective (default 1.0)")
    g.add_argument("--max-samples", type=int,
                   help="cap on bootstrap rows per tree, 0 for none (default 20000)")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help=f"global seed (fallback: ${SEED_ENV}, then 0)")
    common.add_argument("--threads", type=int, help="worker threads (default: available cores)")
    common.add_argument("--config", help="JSON file of option values; flags take precedence")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="consensus-fuse", description="Consensus segmentation from multiple expert masks.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic benchmark")
    p.add_argument("--n", type=int, help="number of cases (default 30)")
    p.add_argument("--size", type=int, help="image side in pixels (default 128)")
    p.add_argument("--shape", choices=SHAPES, help="object shape (default: random per case)")
    p.add_argument("--sigma", type=float, help="intensity noise sd (default 0.1)")
    p.add_argument("--experts", type=int, help="simulated experts (default 3)")
    p.add_argument("--missing", type=float, help="fraction of cases with one mask withheld (default 0)")
    p.add_argument("--disp-min", type=float, help="smallest boundary displacement, px (default 10)")
    p.add_argument("--disp-max", type=float, help="largest boundary displacement, px (default 20)")

    p = sub.add_parser("fuse", parents=[common], help="consensus masks for a dataset")
    p.add_argument("--manifest", help="dataset manifest.json")
    p.add_argument("--method", choices=METHODS, help="fusion method (default gcme)")
    p.add_argument("--lambda", dest="lam", type=float, help="smoothness weight (default 0.06)")
    p.add_argument("--sigma", dest="sigma_mrf", help="contrast scale or 'auto' (default auto)")
    p.add_argument("--tie", type=int, choices=(0, 1), help="label for majority ties (default 0)")
    p.add_argument("--sc-mapping", choices=("reliability", "literal"),
                   help="how SC turns into a vote weight (default reliability)")
    _forest_flags(p)

    p = sub.add_parser("eval", parents=[common], help="score consensus masks against a reference")
    p.add_argument("--manifest", help="dataset manifest.json")
    p.add_argument("--consensus", nargs="+", help="output directories of fuse runs")
    p.add_argument("--names", nargs="+", help="method labels (default: from each run's report)")
    p.add_argument("--gt", help="'gt' for the manifest ground truth or a directory of <case>.pgm masks")

    p = sub.add_parser("validate", parents=[common], help="train-on-consensus cross-validation")
    p.add_argument("--manifest", help="dataset manifest.json")
    p.add_argument("--consensus", help="output directory of a fuse run")
    p.add_argument("--folds", type=int, help="number of folds (default 5)")
    p.add_argument("--lambda", dest="lam", type=float, help="smoothness weight (default 0.06)")
    _forest_flags(p)

    p = sub.add_parser("sc", parents=[common], help="self-consistency report only")
    p.add_argument("--manifest", help="dataset manifest.json")
    _forest_flags(p)

    p = sub.add_parser("impute", parents=[common], help="fill missing masks only")
    p.add_argument("--manifest", help="dataset manifest.json")
    _forest_flags(p)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Defaults < config file < explicit flags; seed falls back to the environment."""
    cfg = dict(DEFAULTS[args.command])
    cfg["seed"] = None
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConsensusError(f"{args.config}: no such file", "missing-file") from None
        except json.JSONDecodeError as exc:
            raise ConsensusError(f"{args.config}: {exc}", "invalid-config") from None
        if doc.get("command", args.command) != args.command:
            raise ConsensusError(f"config is for '{doc['command']}', not '{args.command}'", "invalid-config")
        cfg.update({k: v for k, v in doc.items() if k not in ("command", "version")})
    for k, v in vars(args).items():
        if v is not None and k not in ("command", "config"):
            cfg[k] = v
    if cfg.get("seed") is None:
        env = os.environ.get(SEED_ENV)
        try:
            cfg["seed"] = int(env) if env not in (None, "") else 0
        except ValueError:
            raise ConsensusError(f"{SEED_ENV}={env!r} is not an integer", "invalid-config") from None
    if cfg["seed"] < 0:
        raise ConsensusError("seed must be non-negative", "invalid-config")
    if not cfg.get("out"):
        raise ConsensusError("--out is required", "invalid-config")
    if cfg.get("threads") is None:
        cfg["threads"] = os.cpu_count() or 1
    cfg["command"] = args.command
    return cfg


def forest_config(cfg: dict) -> ForestConfig:
    ms = cfg.get("max_samples")
    return ForestConfig(n_trees=cfg["trees"], max_depth=cfg["depth"], min_samples=cfg["min_samples"],
                        n_candidates=cfg["candidates"], n_thresholds=cfg["thresholds"],
                        alpha=cfg["alpha"], max_samples=ms if ms else None)


def write_snapshot(cfg: dict, out: Path) -> None:
    snap = {k: v for k, v in cfg.items() if k not in _RUNTIME_KEYS}
    snap["version"] = __version__
    (out / "config.json").write_text(json.dumps(snap, indent=2, sort_keys=True) + "\n")


def _need(cfg: dict, *keys) -> None:
    for k in keys:
        if not cfg.get(k):
            raise ConsensusError(f"--{k} is required", "invalid-config")


def _case_names(ann) -> list[str]:
    return [s.name or f"slice_{k:04d}" for k, s in enumerate(ann.slices)]


def _dump(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2) + "\n")


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_synth(cfg: dict, out: Path) -> None:
    spec = SynthSpec(size=cfg["size"], shape=cfg["shape"], sigma=cfg["sigma"], n_experts=cfg["experts"],
                     displacement=(cfg["disp_min"], cfg["disp_max"]))
    manifest = generate_benchmark(cfg["n"], spec, cfg["missing"], cfg["seed"], out)
    n_missing = sum(m is None for s in manifest.slices for m in s.masks)
    print(f"wrote {len(manifest.slices)} cases ({n_missing} withheld masks) to {out}")


def cmd_fuse(cfg: dict, out: Path) -> None:
    _need(cfg, "manifest")
    ann = load_dataset(cfg["manifest"])
    sigma = cfg["sigma_mrf"]
    fcfg = FusionConfig(lam=cfg["lam"], sigma=sigma if sigma == "auto" else float(sigma),
                        tie_label=cfg["tie"], sc_mapping=cfg["sc_mapping"])
    res = run_method(ann, cfg["method"], fcfg, forest_config(cfg), cfg["seed"], n_jobs=cfg["threads"])
    cdir = out / "consensus"
    cdir.mkdir(exist_ok=True)
    names = _case_names(ann)
    for name, mask in zip(names, res.consensus):
        write_mask(mask, cdir / f"{name}.pgm")
    report = {"method": cfg["method"], "cases": names}
    if res.fusion is not None:
        report.update(res.fusion.report())
        report["experts"] = list(ann.experts)
        _dump(out / "sc.json", res.sc.to_json())
    _dump(out / "report.json", report)
    print(f"{cfg['method']}: wrote {len(names)} consensus masks to {cdir}")


def _load_consensus(directory: Path, names: list[str]) -> list[np.ndarray]:
    base = directory / "consensus" if (directory / "consensus").is_dir() else directory
    return [load_mask(base / f"{n}.pgm") for n in names]


def cmd_eval(cfg: dict, out: Path) -> None:
    _need(cfg, "manifest", "consensus")
    ann = load_dataset(cfg["manifest"])
    names = _case_names(ann)
    dirs = [Path(d) for d in cfg["consensus"]]
    labels = cfg.get("names") or []
    if labels and len(labels) != len(dirs):
        raise ConsensusError("--names must match --consensus in length", "invalid-config")
    methods = []
    for i, d in enumerate(dirs):
        if labels:
            methods.append(labels[i])
            continue
        rep = d / "report.json"
        methods.append(json.loads(rep.read_text())["method"] if rep.exists() else d.name)
    if len(set(methods)) != len(methods):
        methods = [f"{m}#{i}" for i, m in enumerate(methods)]

    if cfg["gt"] == "gt":
        refs = []
        for s in ann.slices:
            if s.gt is None:
                raise ConsensusError(f"{s.name}: manifest has no ground-truth mask", "missing-file")
            refs.append(s.gt)
    else:
        refs = _load_consensus(Path(cfg["gt"]), names)

    rows = []
    per_method = {}
    for m, d in zip(methods, dirs):
        masks = _load_consensus(d, names)
        reps = [metric_report(a, g) for a, g in zip(masks, refs)]
        per_method[m] = reps
        rows += [{"case_id": n, "method": m, **r.row()} for n, r in zip(names, reps)]
    write_metrics_csv(rows, out / "metrics.csv")

    summary = {"n_cases": len(names), "reference": cfg["gt"], "methods": {}, "pairwise": []}
    for m, reps in per_method.items():
        entry = {}
        for key in ("dice", "hd", "f", "s", "b"):
            v = np.array([r.row()[key] for r in reps], dtype=np.float64)
            ok = np.isfinite(v)
            entry[key] = {"mean": float(v[ok].mean()) if ok.any() else None,
                          "sd": float(v[ok].std(ddof=1)) if ok.sum() > 1 else None,
                          "n": int(ok.sum())}
        summary["methods"][m] = entry
    for a, b in itertools.combinations(methods, 2):
        for key in ("dice", "hd"):
            x = np.array([r.row()[key] for r in per_method[a]])
            y = np.array([r.row()[key] for r in per_method[b]])
            ok = np.isfinite(x) & np.isfinite(y)
            if ok.sum() < 2:
                continue
            t = paired_t_test(x[ok], y[ok])
            summary["pairwise"].append({"a": a, "b": b, "metric": key, "p": t.p, "t": t.t,
                                        "df": t.df, "degenerate": t.degenerate})
    _dump(out / "summary.json", summary)
    for m in methods:
        e = summary["methods"][m]
        print(f"{m:12s} dice {e['dice']['mean']:.4f}  hd {e['hd']['mean'] if e['hd']['mean'] is not None else float('nan'):.3f}")


def cmd_validate(cfg: dict, out: Path) -> None:
    _need(cfg, "manifest", "consensus")
    ann = load_dataset(cfg["manifest"])
    names = _case_names(ann)
    consensus = _load_consensus(Path(cfg["consensus"]), names)
    store = FeatureStore(ann)
    rois = rois_of(ann)
    folds = fsl_validate(ann, consensus, folds=cfg["folds"], config=forest_config(cfg), lam=cfg["lam"],
                         seed=cfg["seed"], rois=rois, features=store.matrices(rois), n_jobs=cfg["threads"])
    rows = [r for f in folds for r in f.rows()]
    cols = ["fold", *METRIC_COLUMNS[:1], *METRIC_COLUMNS[2:]]
    with open(out / "folds.csv", "w", newline="") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(str(r[c]) if not isinstance(r[c], float) else f"{r[c]:.10g}" for c in cols) + "\n")
    summary = {"folds": [{"fold": f.fold, "cases": f.test_cases, "mean_dice": f.mean_dice} for f in folds],
               "mean_dice": float(np.mean([f.mean_dice for f in folds]))}
    _dump(out / "summary.json", summary)
    print(f"{len(folds)} folds, mean dice {summary['mean_dice']:.4f}")


def cmd_sc(cfg: dict, out: Path) -> None:
    _need(cfg, "manifest")
    ann = load_dataset(cfg["manifest"])
    store = FeatureStore(ann)
    fc = forest_config(cfg)
    if ann.missing_flags().any():
        ann = impute(ann, fc, cfg["seed"], store, cfg["threads"])
    rep = score(ann, fc, cfg["seed"], store, cfg["threads"])
    _dump(out / "sc.json", rep.to_json())
    for e, s in zip(rep.experts, rep.sc):
        print(f"{e}: {s:.4f}")


def cmd_impute(cfg: dict, out: Path) -> None:
    _need(cfg, "manifest")
    src = Path(cfg["manifest"])
    manifest = DatasetManifest.load(src)
    ann = load_dataset(src)
    store = FeatureStore(ann)
    filled = impute(ann, forest_config(cfg), cfg["seed"], store, cfg["threads"])
    base = src.parent.resolve()
    entries = []
    for entry, before, after in zip(manifest.slices, ann.slices, filled.slices):
        masks = []
        for r, (m0, m1) in enumerate(zip(before.masks, after.masks)):
            if m0 is None:
                rel = f"imputed/{entry.name}/{ann.experts[r]}.pgm"
                (out / rel).parent.mkdir(parents=True, exist_ok=True)
                write_mask(m1, out / rel)
                masks.append(rel)
            else:
                masks.append(os.path.relpath(base / entry.masks[r], out.resolve()))
        rel = lambda p: None if p is None else os.path.relpath(base / p, out.resolve())  # noqa: E731
        entries.append(SliceEntry(rel(entry.image), masks, entry.name, rel(entry.gt),
                                  {k: rel(v) for k, v in entry.withheld.items()}))
    DatasetManifest(manifest.dataset, manifest.seed, manifest.experts, entries).save(out / "manifest.json")
    print(f"imputed {int(ann.missing_flags().sum())} masks; manifest at {out / 'manifest.json'}")


COMMANDS = {"synth": cmd_synth, "fuse": cmd_fuse, "eval": cmd_eval, "validate": cmd_validate,
            "sc": cmd_sc, "impute": cmd_impute}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore")
    try:
        cfg = resolve(args)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        write_snapshot(cfg, out)
        COMMANDS[args.command](cfg, out)
    except ConsensusError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 2
    except (KeyError, TypeError, ValueError) as exc:
        print(f"error: invalid-config: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
