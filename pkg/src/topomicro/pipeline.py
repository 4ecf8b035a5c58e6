"""Dataset-level orchestration behind the command-line interface.

Work-directory layout::

    grids/       sample_XXXX.mstr + manifest.json
    descriptors.csv
    features/    sample_XXXX.pif, diagrams/sample_XXXX.npz, features.json
    split.json
    runs/<target>[-without-<phase>]/run_XX/   checkpoints
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import features as fx
from . import nn, stats
from .descriptors import TARGETS, characterize, read_descriptor_csv, write_descriptor_csv
from .errors import GridFormatError, InvalidArgument
from .grid import PHASES, GeneratorConfig, PhaseLabel, crop_interior, generate_microstructure, read_grid, write_grid
from .topology import CHANNELS, PersistenceDiagram, PiConfig, fit_channel_ranges, grid_diagrams, images_from_diagrams

log = logging.getLogger(__name__)

# the simulated domain is generated larger and its centre kept (10 -> 7.14)
DOMAIN_CROP = 7.14 / 10.0
DOMAIN_LENGTH_UM = 7.14
PHASE_NAMES = {"ni": PhaseLabel.NI, "ysz": PhaseLabel.YSZ, "pore": PhaseLabel.PORE}


def config_hash(obj) -> str:
    """Stable digest of the canonical JSON form of ``obj``."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- generate

def sample_generator_config(seed: int) -> GeneratorConfig:
    """Per-sample morphology parameters drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    ni = rng.uniform(0.25, 0.40)
    ysz = rng.uniform(0.25, 0.40)
    fractions = {PhaseLabel.NI: ni, PhaseLabel.YSZ: ysz, PhaseLabel.PORE: 1.0 - ni - ysz}
    return GeneratorConfig(fractions, float(rng.uniform(2.5, 6.0)), int(rng.integers(1, 5)),
                           int(rng.integers(2**63)))


def crop_margin(dims: int) -> int:
    return int(round(dims * (1.0 / DOMAIN_CROP - 1.0) / 2.0))


def _generate_one(args):
    path, cfg_json, dims, voxel_size = args
    cfg = GeneratorConfig.from_json(cfg_json)
    margin = crop_margin(dims)
    g = generate_microstructure(cfg, dims + 2 * margin, voxel_size)
    write_grid(path, crop_interior(g, margin))
    return path


def sample_ids(n: int) -> list[str]:
    return [f"sample_{i:04d}" for i in range(n)]


def generate_dataset(out_dir, n: int, dims: int, voxel_size: float | None = None, seed: int = 0,
                     jobs: int = 1, chash: str = "") -> dict:
    if n < 1 or dims < 2:
        raise InvalidArgument("need n >= 1 and dims >= 2")
    voxel_size = DOMAIN_LENGTH_UM / dims if voxel_size is None else float(voxel_size)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [int(s.generate_state(1, np.uint64)[0]) for s in np.random.SeedSequence(seed).spawn(n)]
    samples, tasks = [], []
    for sid, s in zip(sample_ids(n), seeds):
        cfg = sample_generator_config(s)
        path = out / f"{sid}.mstr"
        samples.append({"id": sid, "file": path.name, "seed": s, "generator": cfg.to_json()})
        tasks.append((str(path), cfg.to_json(), dims, voxel_size))
    _map(_generate_one, tasks, jobs)
    manifest = {"config_hash": chash, "n": n, "dims": dims, "voxel_size": voxel_size,
                "crop_margin": crop_margin(dims), "seed": seed, "samples": samples}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def list_grids(grid_dir) -> list[tuple[str, Path]]:
    d = Path(grid_dir)
    mf = d / "manifest.json"
    if mf.exists():
        return [(s["id"], d / s["file"]) for s in json.loads(mf.read_text())["samples"]]
    return [(p.stem, p) for p in sorted(d.glob("*.mstr"))]


# ------------------------------------------------------------ characterize

def _characterize_one(args):
    sid, path, axis = args
    try:
        g = read_grid(path)
    except (OSError, GridFormatError) as exc:
        return sid, None, str(exc)
    return sid, characterize(g, axis), ""


def characterize_dataset(grid_dir, out_csv, axis="z", jobs: int = 1, chash: str = ""):
    """Returns the list of (sample_id, error) for unreadable grids."""
    results = _map(_characterize_one, [(sid, str(p), axis) for sid, p in list_grids(grid_dir)], jobs)
    rows = [(sid, dv) for sid, dv, _ in results if dv is not None]
    failures = [(sid, err) for sid, dv, err in results if dv is None]
    write_descriptor_csv(out_csv, rows, chash)
    return failures


# ----------------------------------------------------------------- diagrams

def _diagram_key(key) -> str:
    phase, k = key
    return f"{phase.name.lower()}_{k}"


def save_diagrams(path, diags: dict) -> None:
    np.savez(path, **{_diagram_key(key): diags[key].pairs for key in CHANNELS})


def load_diagrams(path) -> dict:
    with np.load(path) as z:
        return {key: PersistenceDiagram(key[1], z[_diagram_key(key)]) for key in CHANNELS}


def write_diagram_csv(path, ids: list[str], diagram_sets: list[dict]) -> None:
    with open(path, "w") as fh:
        fh.write("sample_id,phase,k,birth,death\n")
        for sid, diags in zip(ids, diagram_sets):
            for phase, k in CHANNELS:
                for b, d in diags[(phase, k)].pairs:
                    fh.write(f"{sid},{phase.name.lower()},{k},{float(b)!r},{float(d)!r}\n")


def _diagrams_one(args):
    sid, grid_path, cache_path = args
    if Path(cache_path).exists():
        return sid, ""
    try:
        g = read_grid(grid_path)
    except (OSError, GridFormatError) as exc:
        return sid, str(exc)
    save_diagrams(cache_path, grid_diagrams(g))
    return sid, ""


def compute_diagrams(grid_dir, cache_dir, jobs: int = 1) -> tuple[list[str], list]:
    """Persistence diagrams (in micrometres) for every grid, cached as npz."""
    cache = Path(cache_dir)
    cache.mkdir(parents=True, exist_ok=True)
    grids = list_grids(grid_dir)
    res = _map(_diagrams_one, [(sid, str(p), str(cache / f"{sid}.npz")) for sid, p in grids], jobs)
    ok = [sid for sid, err in res if not err]
    return ok, [(sid, err) for sid, err in res if err]


# ----------------------------------------------------------------- features

def write_feature_file(path, sample_id: str, images: np.ndarray, chash: str = "",
                       pi: PiConfig | None = None, ranges=None) -> None:
    """One JSON header line, then the images as raw little-endian float64."""
    head = {"sample_id": sample_id, "shape": list(images.shape), "dtype": "<f8", "config_hash": chash}
    if pi is not None:
        head["pi"] = pi.to_json()
    if ranges is not None:
        head["ranges"] = np.asarray(ranges).tolist()
    with open(path, "wb") as fh:
        fh.write(json.dumps(head, sort_keys=True).encode() + b"\n")
        fh.write(np.ascontiguousarray(images, dtype="<f8").tobytes())


def read_feature_file(path) -> tuple[dict, np.ndarray]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    head = json.loads(raw[:nl])
    arr = np.frombuffer(raw[nl + 1:], dtype=head["dtype"]).reshape(head["shape"])
    return head, arr.astype(np.float64)


def make_split(n: int, seed: int) -> fx.SplitIndex:
    return fx.split(n, seed=seed)


def save_split(path, ids: list[str], sp: fx.SplitIndex, seed: int) -> None:
    d = sp.to_json()
    d.update({"ids": ids, "seed": seed, "rule": "floor(0.65 n), floor(0.15 n), remainder"})
    Path(path).write_text(json.dumps(d))


def load_split(path) -> tuple[list[str], fx.SplitIndex]:
    d = json.loads(Path(path).read_text())
    return d["ids"], fx.SplitIndex.from_json(d)


def images_for(diagram_sets: list[dict], train_idx, pi: PiConfig) -> tuple[np.ndarray, np.ndarray]:
    """(n, 9, res, res) images with ranges fit on ``train_idx`` only."""
    ranges = fit_channel_ranges([diagram_sets[i] for i in train_idx], pi.sigma)
    return np.stack([images_from_diagrams(d, pi, ranges) for d in diagram_sets]), ranges


def featurize_dataset(grid_dir, out_dir, pi: PiConfig, split_path, seed: int = 0, jobs: int = 1,
                      chash: str = "") -> dict:
    out = Path(out_dir)
    ids, failed = compute_diagrams(grid_dir, out / "diagrams", jobs)
    if failed:
        log.warning("skipped %d unreadable grids", len(failed))
    split_path = Path(split_path)
    if split_path.exists():
        split_ids, sp = load_split(split_path)
        if split_ids != ids:
            raise InvalidArgument("existing split does not match the dataset")
    else:
        sp = make_split(len(ids), seed)
        save_split(split_path, ids, sp, seed)
    diags = [load_diagrams(out / "diagrams" / f"{sid}.npz") for sid in ids]
    images, ranges = images_for(diags, sp.train, pi)
    for sid, img in zip(ids, images):
        write_feature_file(out / f"{sid}.pif", sid, img, chash, pi, ranges)
    write_diagram_csv(out / "diagrams.csv", ids, diags)
    meta = {"config_hash": chash, "pi": pi.to_json(), "ranges": ranges.tolist(),
            "channels": [_diagram_key(k) for k in CHANNELS], "ids": ids,
            "range_fit": "training split only"}
    (out / "features.json").write_text(json.dumps(meta, indent=1))
    return meta


def load_features(feature_dir) -> tuple[list[str], np.ndarray, dict]:
    d = Path(feature_dir)
    meta = json.loads((d / "features.json").read_text())
    x = np.stack([read_feature_file(d / f"{sid}.pif")[1] for sid in meta["ids"]])
    return meta["ids"], x, meta


# ----------------------------------------------------------------- training

def channel_keep(drop_phase: str | None) -> list[int]:
    if drop_phase is None:
        return list(range(len(CHANNELS)))
    if drop_phase not in PHASE_NAMES:
        raise InvalidArgument(f"unknown phase {drop_phase!r}; expected one of {sorted(PHASE_NAMES)}")
    gone = PHASE_NAMES[drop_phase]
    return [c for c, (phase, _) in enumerate(CHANNELS) if phase != gone]


@dataclass
class TargetData:
    """One attribute's modelling data: samples with an undefined target are
    dropped from every split."""

    x: np.ndarray
    raw: np.ndarray
    scaled: np.ndarray
    split: fx.SplitIndex
    transform: fx.TransformParams


def target_data(x: np.ndarray, values: np.ndarray, sp: fx.SplitIndex, keep=None) -> TargetData:
    values = np.asarray(values, dtype=np.float64)
    ok = np.isfinite(values)
    remap = -np.ones(len(values), dtype=np.int64)
    remap[ok] = np.arange(ok.sum())
    sub = fx.SplitIndex(*(remap[idx[ok[idx]]] for idx in (sp.train, sp.val, sp.test)))
    if len(sub.train) < 3 or len(sub.val) < 1 or len(sub.test) < 2:
        raise InvalidArgument("too few samples with a defined target")
    raw = values[ok]
    params = fx.fit_transform(raw[sub.train])
    feats = x[ok] if keep is None else x[ok][:, keep]
    return TargetData(feats, raw, fx.apply(raw, params), sub, params)


def load_target(work_dir, target: str, drop_phase: str | None = None) -> tuple[TargetData, dict]:
    if target not in TARGETS:
        raise InvalidArgument(f"unknown target {target!r}; expected one of {TARGETS}")
    work = Path(work_dir)
    ids, x, meta = load_features(work / "features")
    desc = read_descriptor_csv(work / "descriptors.csv")
    missing = [sid for sid in ids if sid not in desc]
    if missing:
        raise InvalidArgument(f"{len(missing)} samples lack descriptors")
    values = np.array([getattr(desc[sid], target) for sid in ids])
    split_ids, sp = load_split(work / "split.json")
    if split_ids != ids:
        raise InvalidArgument("split does not match features")
    return target_data(x, values, sp, channel_keep(drop_phase)), meta


def model_config(base: nn.NindenConfig, n_channels: int, resolution: int) -> nn.NindenConfig:
    d = base.to_json()
    d.update(n_groups=n_channels // 3, channels_per_group=3, resolution=resolution)
    return nn.NindenConfig.from_json(d)


def fit_runs(data: TargetData, cfg: nn.NindenConfig, tcfg: nn.TrainConfig, runs: int,
             seed: int, out_dir=None, extra: dict | None = None) -> list[stats.MetricsRow]:
    """Train ``runs`` models (seeds seed, seed+1, ...) and score each on the
    test split in scaled target space."""
    res = data.x.shape[-1] if data.x.ndim == 4 else math.isqrt(data.x.shape[-1])
    cfg = model_config(cfg, data.x.shape[1], res)
    rows = []
    for r in range(runs):
        t = nn.TrainConfig(**{**tcfg.to_json(), "seed": seed + r})
        params, hist = nn.train(cfg, t, (data.x, data.scaled), data.split)
        pred = nn.predict(params, data.x[data.split.test])
        row = stats.metrics(pred, data.scaled[data.split.test])
        rows.append(row)
        if out_dir is not None:
            manifest = {"seed": t.seed, "train": t.to_json(), "transform": data.transform.to_json(),
                        "best_epoch": hist.best_epoch, "history": hist.to_json(),
                        "test_metrics": row.as_dict()}
            manifest.update(extra or {})
            nn.save_checkpoint(Path(out_dir) / f"run_{r:02d}", params, manifest)
    return rows


def write_metrics_csv(path, target: str, rows: list[stats.MetricsRow], chash: str = "") -> None:
    agg = stats.aggregate(rows)
    cols = ["target", "runs"] + [f"{m}_{s}" for m in stats.METRICS for s in ("mean", "std")]
    vals = [target, str(len(rows))] + [repr(v) for m in stats.METRICS for v in agg[m]]
    with open(path, "w") as fh:
        if chash:
            fh.write(f"# config_hash: {chash}\n")
        fh.write(",".join(cols) + "\n" + ",".join(vals) + "\n")


def write_ablation_csv(path, variant: str, target: str, report: list[stats.ComparisonRow],
                       chash: str = "") -> None:
    cols = ["variant", "target", "metric", "p_value", "significance", "delta_mu", "cohens_d",
            "ci_low", "ci_high"]
    with open(path, "w") as fh:
        if chash:
            fh.write(f"# config_hash: {chash}\n")
        fh.write(f"# {stats.SIGN_CONVENTION}\n")
        fh.write(",".join(cols) + "\n")
        for r in report:
            fh.write(",".join([variant, target, r.metric, repr(r.p_value), r.tier, repr(r.delta_mu),
                               repr(r.cohens_d), repr(r.ci_low), repr(r.ci_high)]) + "\n")


def runs_to_columns(rows: list[stats.MetricsRow]) -> dict:
    return {m: np.array([getattr(r, m) for r in rows]) for m in stats.METRICS}


# ---------------------------------------------------------------------- hpo

# network widths in the search spaces are log2 of the first layer width;
# later layers of the same branch halve it
def stage1_space() -> dict:
    from . import hpo
    return {
        "C": hpo.uniform(0.5, 40.0),
        "sigma": hpo.loguniform(1e-3, 5e-2),
        "gamma": hpo.integer(1, 6),
        "encoding_log2": hpo.integer(4, 7),
        "lr0": hpo.uniform(1e-3, 1e-2),
        "head_log2": hpo.integer(5, 10),
        "dropout_main": hpo.uniform(0.1, 0.4),
        "pi_log2": hpo.integer(7, 9),
        "dropout_pi": hpo.uniform(0.1, 0.4),
        "phase_log2": hpo.integer(7, 10),
        "weight_decay": hpo.uniform(1e-2, 1.0),
    }


def stage2_space() -> dict:
    from . import hpo
    return {
        "activation": hpo.categorical(("selu", "gelu", "mish")),
        "encoding_log2": hpo.integer(3, 6),
        "lr0": hpo.uniform(1e-3, 1e-2),
        "dropout_main": hpo.uniform(0.2, 0.4),
        "dropout_pi": hpo.uniform(0.2, 0.4),
        "Tmult": hpo.integer(1, 5),
        "weight_decay": hpo.uniform(0.1, 1.0),
    }


def _halving(log2_width: int, n: int) -> tuple:
    return tuple(max(1, 2 ** (int(log2_width) - i)) for i in range(n))


def configs_from_assignment(a: dict, base_pi: PiConfig, base_net: nn.NindenConfig,
                            base_train: nn.TrainConfig):
    """Translate an HPO assignment into (PiConfig, NindenConfig, TrainConfig);
    names absent from ``a`` keep their base value."""
    pi = PiConfig(a.get("C", base_pi.C), a.get("gamma", base_pi.gamma), a.get("sigma", base_pi.sigma),
                  base_pi.resolution)
    net = base_net.to_json()
    if "encoding_log2" in a:
        net["encoding_length"] = 2 ** int(a["encoding_log2"])
    if "pi_log2" in a:
        net["pi_branch_widths"] = list(_halving(a["pi_log2"], len(base_net.pi_branch_widths)))
    if "phase_log2" in a:
        net["phase_branch_widths"] = list(_halving(a["phase_log2"], len(base_net.phase_branch_widths)))
    if "head_log2" in a:
        net["head_widths"] = list(_halving(a["head_log2"], 3))
    for k in ("activation", "dropout_main", "dropout_pi"):
        if k in a:
            net[k] = a[k]
    tr = base_train.to_json()
    for k in ("lr0", "weight_decay", "Tmult"):
        if k in a:
            tr[k] = a[k]
    return pi, nn.NindenConfig.from_json(net), nn.TrainConfig.from_json(tr)


def make_objective(diagram_sets: list[dict], values: np.ndarray, sp: fx.SplitIndex,
                   base_pi: PiConfig, base_net: nn.NindenConfig, base_train: nn.TrainConfig):
    """Validation MSE (scaled targets) of one model trained on ``values``."""

    def objective(a: dict, seed: int) -> float:
        pi, net, tr = configs_from_assignment(a, base_pi, base_net, base_train)
        x, _ = images_for(diagram_sets, sp.train, pi)
        data = target_data(x, values, sp)
        cfg = model_config(net, x.shape[1], pi.resolution)
        _, hist = nn.train(cfg, nn.TrainConfig(**{**tr.to_json(), "seed": seed}),
                           (data.x, data.scaled), data.split)
        return hist.best_val_loss

    return objective
