"""Command-line entry point: ``topomicro <command> [options]``.

Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import hpo, nn, stats
from . import pipeline as pl
from .descriptors import TARGETS, read_descriptor_csv
from .errors import FitFailed, GenerationFailed, GridFormatError, InvalidArgument
from .topology import PiConfig

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("topomicro")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------ config

DEFAULT_CONFIG = {
    "seed": 0,
    "generator": {"n": 200, "dims": 64, "voxel_size": None},
    "pi": {"C": 10.0, "sigma": 1e-2, "gamma": 1, "resolution": 32},
    "ninden": nn.NindenConfig().to_json(),
    "train": nn.TrainConfig().to_json(),
    "hpo": {"n1": 50, "n2": 50, "target": "l_tpb_active"},
}


def load_config(path) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        for key, val in user.items():
            if isinstance(val, dict) and isinstance(cfg.get(key), dict):
                cfg[key].update(val)
            else:
                cfg[key] = val
    return cfg


def _override(section: dict, **kw) -> None:
    for k, v in kw.items():
        if v is not None:
            section[k] = v


def _pi(cfg: dict) -> PiConfig:
    p = cfg["pi"]
    return PiConfig(p["C"], p["gamma"], p["sigma"], p["resolution"])


# ---------------------------------------------------------------- commands

def cmd_generate(args, cfg) -> int:
    _override(cfg["generator"], n=args.n, dims=args.dims, voxel_size=args.voxel_size)
    if args.seed is not None:
        cfg["seed"] = args.seed
    g = cfg["generator"]
    chash = pl.config_hash({"generator": g, "seed": cfg["seed"]})
    pl.generate_dataset(args.out, g["n"], g["dims"], g["voxel_size"], cfg["seed"], args.jobs, chash)
    print(f"wrote {g['n']} grids to {args.out} (config {chash})")
    return EXIT_OK


def cmd_characterize(args, cfg) -> int:
    chash = pl.config_hash({"characterize": {"axis": args.axis}})
    failures = pl.characterize_dataset(args.input, args.out, args.axis, args.jobs, chash)
    for sid, err in failures:
        log.warning("skipped %s: %s", sid, err)
    print(f"wrote {args.out}; {len(failures)} sample(s) skipped")
    return EXIT_DATA if failures else EXIT_OK


def cmd_featurize(args, cfg) -> int:
    _override(cfg["pi"], C=args.C, sigma=args.sigma, gamma=args.gamma, resolution=args.res)
    if args.seed is not None:
        cfg["seed"] = args.seed
    pi = _pi(cfg)
    split_path = Path(args.split) if args.split else Path(args.out).parent / "split.json"
    chash = pl.config_hash({"pi": cfg["pi"], "seed": cfg["seed"]})
    meta = pl.featurize_dataset(args.input, args.out, pi, split_path, cfg["seed"], args.jobs, chash)
    print(f"wrote {len(meta['ids'])} feature files to {args.out} (config {chash})")
    return EXIT_OK


def _train_cfgs(args, cfg):
    if args.max_epochs is not None:
        cfg["train"]["max_epochs"] = args.max_epochs
    return nn.NindenConfig.from_json(cfg["ninden"]), nn.TrainConfig.from_json(cfg["train"])


def _check_target(target: str) -> None:
    if target not in TARGETS:
        raise UsageError(f"unknown target {target!r}; choose from {', '.join(TARGETS)}")


def cmd_train(args, cfg) -> int:
    _check_target(args.target)
    net, tr = _train_cfgs(args, cfg)
    seed = cfg["seed"] if args.seed is None else args.seed
    data, meta = pl.load_target(args.work, args.target, args.drop_phase)
    chash = pl.config_hash({"ninden": net.to_json(), "train": tr.to_json(), "seed": seed,
                            "target": args.target, "drop_phase": args.drop_phase,
                            "features": meta.get("config_hash", "")})
    name = args.target + (f"-without-{args.drop_phase}" if args.drop_phase else "")
    out = Path(args.work) / "runs" / name
    extra = {"target": args.target, "config_hash": chash, "pi": meta["pi"], "pi_ranges": meta["ranges"],
             "drop_phase": args.drop_phase}
    rows = pl.fit_runs(data, net, tr, args.runs, seed, out, extra)
    for i, r in enumerate(rows):
        print(f"run {i}: test r2={r.r2:.4f} pearson={r.pearson:.4f}")
    return EXIT_OK


def cmd_evaluate(args, cfg) -> int:
    _check_target(args.target)
    name = args.target + (f"-without-{args.drop_phase}" if args.drop_phase else "")
    run_dirs = sorted((Path(args.work) / "runs" / name).glob("run_*"))
    if not run_dirs:
        raise FileNotFoundError(f"no checkpoints for {name} under {args.work}/runs")
    data, _ = pl.load_target(args.work, args.target, args.drop_phase)
    rows, hashes = [], set()
    for d in run_dirs:
        params, manifest = nn.load_checkpoint(d)
        hashes.add(manifest.get("config_hash", ""))
        pred = nn.predict(params, data.x[data.split.test])
        rows.append(stats.metrics(pred, data.scaled[data.split.test]))
    out = args.out or str(Path(args.work) / f"metrics_{name}.csv")
    pl.write_metrics_csv(out, name, rows, ",".join(sorted(hashes)))
    agg = stats.aggregate(rows)
    print(" ".join(f"{m}={agg[m][0]:.4g}±{agg[m][1]:.2g}" for m in stats.METRICS))
    return EXIT_OK


def cmd_hpo(args, cfg) -> int:
    h = cfg["hpo"]
    _override(h, n1=args.n1, n2=args.n2, target=args.target)
    _check_target(h["target"])
    seed = cfg["seed"] if args.seed is None else args.seed
    net, tr = _train_cfgs(args, cfg)
    work = Path(args.work)
    ids, sp = pl.load_split(work / "split.json")
    diags = [pl.load_diagrams(work / "features" / "diagrams" / f"{sid}.npz") for sid in ids]
    desc = read_descriptor_csv(work / "descriptors.csv")
    values = np.array([getattr(desc[sid], h["target"]) for sid in ids])
    objective = pl.make_objective(diags, values, sp, _pi(cfg), net, tr)
    log_path = args.log or str(work / "hpo_trials.jsonl")
    result = hpo.run_hpo(objective, pl.stage1_space(), pl.stage2_space(), h["n1"], h["n2"], seed, log_path)
    chash = pl.config_hash({"hpo": h, "seed": seed, "ninden": net.to_json(), "train": tr.to_json()})
    out = args.out or str(work / "hpo_best.json")
    Path(out).write_text(json.dumps({"config_hash": chash, "best": result.best,
                                     "best_objective": result.best_objective}, indent=1))
    print(f"best validation mse {result.best_objective:.4g} -> {out}")
    return EXIT_OK if result.best else EXIT_NUMERIC


def cmd_ablate(args, cfg) -> int:
    _check_target(args.target)
    if args.drop_phase not in pl.PHASE_NAMES:
        raise UsageError(f"--drop-phase must be one of {', '.join(pl.PHASE_NAMES)}")
    net, tr = _train_cfgs(args, cfg)
    seed = cfg["seed"] if args.seed is None else args.seed
    full, meta = pl.load_target(args.work, args.target)
    variant, _ = pl.load_target(args.work, args.target, args.drop_phase)
    chash = pl.config_hash({"ninden": net.to_json(), "train": tr.to_json(), "seed": seed,
                            "target": args.target, "drop_phase": args.drop_phase,
                            "features": meta.get("config_hash", ""), "runs": args.runs})
    full_rows = pl.fit_runs(full, net, tr, args.runs, seed)
    var_rows = pl.fit_runs(variant, net, tr, args.runs, seed)
    report = stats.ablation_compare(pl.runs_to_columns(full_rows), pl.runs_to_columns(var_rows))
    out = args.out or str(Path(args.work) / f"ablation_{args.target}_without_{args.drop_phase}.csv")
    pl.write_ablation_csv(out, f"without_{args.drop_phase}", args.target, report, chash)
    print(f"input channels {variant.x.shape[1]}; report -> {out}")
    for r in report:
        print(f"{r.metric}: p={r.p_value:.3g} {r.tier or '-'} delta_mu={r.delta_mu:.4g}")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="topomicro", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON config; command-line flags override it")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="synthesize microstructure grids")
    g.add_argument("--n", type=int)
    g.add_argument("--dims", type=int)
    g.add_argument("--voxel-size", type=float, help="micrometres (default 7.14 / dims)")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.add_argument("--jobs", type=int, default=1)
    g.set_defaults(func=cmd_generate)

    c = sub.add_parser("characterize", help="compute descriptors to CSV")
    c.add_argument("--in", dest="input", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--axis", choices=("x", "y", "z"), default="z")
    c.add_argument("--jobs", type=int, default=1)
    c.set_defaults(func=cmd_characterize)

    f = sub.add_parser("featurize", help="persistence images per sample")
    f.add_argument("--in", dest="input", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--C", type=float)
    f.add_argument("--sigma", type=float)
    f.add_argument("--gamma", type=int)
    f.add_argument("--res", type=int)
    f.add_argument("--split", help="split JSON (created if missing; default next to --out)")
    f.add_argument("--seed", type=int)
    f.add_argument("--jobs", type=int, default=1)
    f.set_defaults(func=cmd_featurize)

    for name, func, hlp in (("train", cmd_train, "train models for one target"),
                            ("evaluate", cmd_evaluate, "score checkpoints on the test split")):
        t = sub.add_parser(name, help=hlp)
        t.add_argument("--work", required=True, help="directory holding features/, descriptors.csv, split.json")
        t.add_argument("--target", required=True)
        t.add_argument("--drop-phase")
        t.add_argument("--seed", type=int)
        if name == "train":
            t.add_argument("--runs", type=int, default=1)
            t.add_argument("--max-epochs", type=int)
        else:
            t.add_argument("--out")
        t.set_defaults(func=func)

    h = sub.add_parser("hpo", help="two-stage hyperparameter search")
    h.add_argument("--work", required=True)
    h.add_argument("--target")
    h.add_argument("--n1", type=int)
    h.add_argument("--n2", type=int)
    h.add_argument("--seed", type=int)
    h.add_argument("--max-epochs", type=int)
    h.add_argument("--log", help="JSON-lines trial log (resumed if present)")
    h.add_argument("--out")
    h.set_defaults(func=cmd_hpo)

    a = sub.add_parser("ablate", help="retrain without one phase and compare")
    a.add_argument("--work", required=True)
    a.add_argument("--target", required=True)
    a.add_argument("--drop-phase", required=True)
    a.add_argument("--runs", type=int, default=10)
    a.add_argument("--seed", type=int)
    a.add_argument("--max-epochs", type=int)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (UsageError, InvalidArgument) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, GridFormatError, FitFailed, GenerationFailed, KeyError,
            json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ArithmeticError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
