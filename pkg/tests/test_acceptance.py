"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that is printed in the pytest terminal
summary (see conftest.py). The end-to-end criterion builds a 200-sample
dataset; set TOPOMICRO_ACCEPTANCE_CACHE to a directory to keep and reuse
that build (stage timings are stored next to it and still count toward the
runtime budget).
"""
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import brute_metrics, brute_welch, dense_diffusion_tau, gauss_legendre_pixel
from topomicro import cli, hpo, nn
from topomicro import pipeline as pl
from topomicro.descriptors import (
    characterize,
    extract_surface,
    extract_tpb,
    percolation,
    read_descriptor_csv,
    segment_lengths,
    solve_diffusion,
    tortuosity_factor,
    tpb_length_density,
)
from topomicro.errors import UndefinedDescriptor
from topomicro.grid import PhaseGrid, PhaseLabel, phase_mask
from topomicro.stats import (
    ablation_compare,
    cohens_d,
    compare,
    mean_diff_ci,
    metrics,
    pearson,
    significance_tier,
    welch_t,
)
from topomicro.topology import (
    PersistenceDiagram,
    PiConfig,
    brute_force_persistence,
    build_complex,
    compute_persistence,
    diagrams_for_mask,
    persistence_image,
    pixel_edges,
    signed_distance_filtration,
    weight,
)

criterion = pytest.mark.criterion


def _multiset(d):
    return sorted(map(tuple, d.pairs.tolist()))


# ------------------------------------------------------------------ 1

@criterion(1, "persistence equals brute-force oracle on 100 masks up to 6^3, < 2 min")
def test_criterion_01_persistence_oracle(record):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(100):
        shape = tuple(int(s) for s in rng.integers(1, 7, 3))
        m = rng.random(shape) < rng.uniform(0.2, 0.8)
        c = build_complex(signed_distance_filtration(m))
        for fast, slow in zip(compute_persistence(c), brute_force_persistence(c, max_cells=13 ** 3)):
            mismatches += _multiset(fast) != _multiset(slow)
    elapsed = time.perf_counter() - t0
    record(f"{mismatches} mismatching diagrams, {elapsed:.1f} s")
    assert mismatches == 0 and elapsed < 120


# ------------------------------------------------------------------ 2

@criterion(2, "known topology: blob, ring, hollow shell")
def test_criterion_02_known_topology(record):
    blob = np.zeros((7, 7, 7), bool)
    blob[1:6, 1:6, 1:6] = True
    ring = np.zeros((3, 5, 5), bool)
    ring[1, 1:4, 1:4] = True
    ring[1, 2, 2] = False
    shell = np.zeros((7, 7, 7), bool)
    shell[1:6, 1:6, 1:6] = True
    shell[2:5, 2:5, 2:5] = False
    _, b1, b2 = diagrams_for_mask(blob)
    _, r1, _ = diagrams_for_mask(ring)
    _, _, s2 = diagrams_for_mask(shell)
    record(f"blob H1={len(b1)} H2={len(b2)}; ring H1={len(r1)}; shell H2={len(s2)}")
    assert ring.sum() == 8
    assert len(b1) == 0 and len(b2) == 0
    assert len(r1) == 1 and r1.pairs[0, 0] < 0 < r1.pairs[0, 1]
    assert len(s2) == 1


# ------------------------------------------------------------------ 3

@criterion(3, "persistence-image pixels match quadrature within 1e-6; interior mass equals weight")
def test_criterion_03_pi_quadrature(record):
    rng = np.random.default_rng(103)
    worst = 0.0
    for _ in range(20):
        sigma = rng.uniform(0.02, 0.2)
        cfg = PiConfig(C=rng.uniform(0.5, 40), gamma=int(rng.integers(1, 7)), sigma=sigma)
        b, p = rng.uniform(-1.1, 1.1), rng.uniform(0.01, 1.1)
        img = persistence_image(PersistenceDiagram(0, [(b, b + p)]), cfg)
        ref = gauss_legendre_pixel((b, p), sigma, weight(b, p, cfg.C, cfg.gamma), *pixel_edges(cfg))
        worst = max(worst, float(np.max(np.abs(img - ref))))
    cfg = PiConfig(C=7.0, gamma=2, sigma=0.01)
    mass_err = abs(persistence_image(PersistenceDiagram(1, [(-0.2, 0.4)]), cfg).sum()
                   - weight(-0.2, 0.6, 7.0, 2))
    record(f"max pixel error {worst:.2e}, mass error {mass_err:.2e}")
    assert worst <= 1e-6 and mass_err <= 1e-6


# ------------------------------------------------------------------ 4

@criterion(4, "tortuosity: cube and channel 1 +- 1e-3, 8^3 conduit vs dense solve 1e-6, undefined flagged")
def test_criterion_04_tortuosity(record):
    cube = np.ones((8, 8, 8), bool)
    channel = np.zeros((10, 8, 8), bool)
    channel[:, 3:5, 3:5] = True
    conduit = np.zeros((8, 8, 8), bool)
    conduit[:, 1:3, 1:3] = True
    conduit[4, 1:7, 1:3] = True
    conduit[4:, 5:7, 1:3] = True
    conduit[0:4, 5:7, 5:7] = True  # dead-end pocket attached to the inlet
    tau_cube = tortuosity_factor(cube)
    tau_channel = tortuosity_factor(channel)
    tau_conduit = solve_diffusion(conduit, "z", rtol=1e-12).tau
    ref = dense_diffusion_tau(conduit, 0)
    blocked = np.ones((8, 8, 8), bool)
    blocked[4] = False
    try:
        tortuosity_factor(blocked)
        raised = False
    except UndefinedDescriptor:
        raised = True
    grid = np.full((8, 8, 8), PhaseLabel.YSZ, np.uint8)
    grid[blocked] = PhaseLabel.PORE
    row = characterize(PhaseGrid(grid, 0.1))
    record(f"cube {tau_cube:.6f}, channel {tau_channel:.6f}, conduit {tau_conduit:.9f} vs {ref:.9f}, "
           f"blocked raises={raised}, csv value {row.tau_pore}")
    assert abs(tau_cube - 1) <= 1e-3 and abs(tau_channel - 1) <= 1e-3
    assert abs(tau_conduit - ref) <= 1e-6
    assert raised and math.isnan(row.tau_pore) and "tau_pore" in row.undefined()


# ------------------------------------------------------------------ 5

@criterion(5, "TPB four-column fixture: density 1/(4a^2) before and after smoothing, active = total")
def test_criterion_05_tpb_fixture(record):
    a = 0.25
    data = np.empty((6, 2, 2), np.uint8)
    data[:, 0, :] = PhaseLabel.NI
    data[:, 1, 0] = PhaseLabel.YSZ
    data[:, 1, 1] = PhaseLabel.PORE
    g = PhaseGrid(data, a)
    maps = {ph: percolation(phase_mask(g, ph)) for ph in PhaseLabel}
    tpb = extract_tpb(g, maps)
    mesh = extract_surface(g)
    raw = float(segment_lengths(mesh, tpb, mesh.positions).sum() / (data.size * a ** 3))
    total, active = tpb_length_density(g)
    expect = 1 / (4 * a * a)
    record(f"raw {raw}, smoothed {total}, active {active}, expected {expect}")
    assert raw == expect and abs(total - expect) <= 1e-12 * expect and active == total


# ------------------------------------------------------------------ 6

@criterion(6, "finite-difference gradient checks for every layer type, rel < 1e-4, < 1 min")
def test_criterion_06_gradients(record):
    t0 = time.perf_counter()
    worst = {}
    for act in nn.ACTIVATIONS:
        cfg = nn.NindenConfig(activation=act, pi_branch_widths=(3,), phase_branch_widths=(3,),
                              head_widths=(4, 3, 2), encoding_length=2, dropout_pi=0.25,
                              dropout_main=0.25, resolution=2)
        p = nn.init(cfg, 7)
        rng = np.random.default_rng(1)
        x = rng.normal(size=(4, 9, 4))
        for k in p.weights:
            if not k.endswith(".W"):
                p.weights[k] = p.weights[k] + rng.normal(0, 0.3, p.weights[k].shape)
        y = nn.forward(p, x, True, np.random.default_rng(11)) + 0.1 * rng.normal(size=4)
        _, grads = nn.loss_and_gradients(p, x, y, np.random.default_rng(11))

        def loss_at(w, i, v):
            old = w[i]
            w[i] = v
            out = nn.loss_and_gradients(p, x, y, np.random.default_rng(11))[0]
            w[i] = old
            return out

        h = 1e-5
        for name, w in p.weights.items():
            kind = name.rsplit(".", 1)[1] if not name.startswith("out") else "out." + name[-1]
            for i in np.ndindex(w.shape):
                v = w[i]
                d1 = loss_at(w, i, v + h) - loss_at(w, i, v - h)
                d2 = loss_at(w, i, v + 2 * h) - loss_at(w, i, v - 2 * h)
                num = (8 * d1 - d2) / (12 * h)
                err = abs(grads[name][i] - num) / max(abs(grads[name][i]), abs(num), 1e-6)
                key = f"{act}:{kind}"
                worst[key] = max(worst.get(key, 0.0), err)
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    record(f"worst {worst[top]:.1e} ({top}) over {len(worst)} layer kinds, {elapsed:.1f} s")
    assert worst[top] < 1e-4 and elapsed < 60


# ------------------------------------------------------------------ 7

@criterion(7, "metrics, Welch p, Cohen's d, CI match brute force on 100 pairs (1e-9 / 1e-6)")
def test_criterion_07_statistics(record):
    from scipy import stats as sps
    rng = np.random.default_rng(107)
    worst_m = worst_p = worst_d = worst_ci = 0.0
    for _ in range(100):
        n = int(rng.integers(4, 30))
        truth = rng.normal(size=n)
        pred = truth + rng.normal(scale=rng.uniform(0.1, 2), size=n)
        got = metrics(pred, truth).as_dict()
        for k, v in brute_metrics(pred, truth).items():
            worst_m = max(worst_m, abs(got[k] - v))
        a, b = pred, truth
        ref = brute_welch(a, b)
        _, _, p = welch_t(a, b)
        worst_p = max(worst_p, abs(p - 2 * sps.t.sf(abs(ref["t"]), ref["df"])))
        worst_d = max(worst_d, abs(cohens_d(a, b) - ref["d"]))
        half = sps.t.ppf(0.975, ref["df"]) * ref["se"]
        lo, hi = mean_diff_ci(a, b)
        worst_ci = max(worst_ci, abs(lo - ref["diff"] + half), abs(hi - ref["diff"] - half))
    record(f"metrics {worst_m:.1e}, p {worst_p:.1e}, d {worst_d:.1e}, CI {worst_ci:.1e}")
    assert worst_m <= 1e-9 and worst_d <= 1e-9
    assert worst_p <= 1e-6 and worst_ci <= 1e-6


# ------------------------------------------------------------------ 8

E2E_SEED = 2024
E2E_TARGETS = ("d_ni", "tau_pore")
E2E_SEEDS = (0, 1, 2)


def _stage(work: Path, timing: dict, name: str, done: Path, argv):
    if name in timing and done.exists():
        return
    t0 = time.perf_counter()
    code = cli.main(argv)
    timing[name] = time.perf_counter() - t0
    assert code == 0, f"{name} exited with {code}"
    (work / "timing.json").write_text(json.dumps(timing, indent=1))


@criterion(8, "desk-scale end-to-end: 200 x 64^3, R2 >= 0.5 and r >= 0.7 for one target, "
              "Pearson(l_tpb, l_tpb_active) > 0.5, < 60 min")
def test_criterion_08_end_to_end(record, tmp_path):
    cache = os.environ.get("TOPOMICRO_ACCEPTANCE_CACHE")
    work = Path(cache) if cache else tmp_path / "e2e"
    work.mkdir(parents=True, exist_ok=True)
    timing_path = work / "timing.json"
    timing = json.loads(timing_path.read_text()) if timing_path.exists() else {}
    _stage(work, timing, "generate", work / "grids" / "manifest.json",
           ["generate", "--n", "200", "--dims", "64", "--seed", str(E2E_SEED), "--out", str(work / "grids")])
    _stage(work, timing, "characterize", work / "descriptors.csv",
           ["characterize", "--in", str(work / "grids"), "--out", str(work / "descriptors.csv")])
    _stage(work, timing, "featurize", work / "features" / "features.json",
           ["featurize", "--in", str(work / "grids"), "--out", str(work / "features"),
            "--seed", str(E2E_SEED)])

    t0 = time.perf_counter()
    results = {}
    for target in E2E_TARGETS:
        data, _ = pl.load_target(work, target)
        rows = pl.fit_runs(data, nn.NindenConfig(), nn.TrainConfig(), len(E2E_SEEDS), E2E_SEEDS[0])
        results[target] = (float(np.mean([r.r2 for r in rows])), float(np.mean([r.pearson for r in rows])))
    timing["train"] = time.perf_counter() - t0
    timing_path.write_text(json.dumps(timing, indent=1))

    desc = read_descriptor_csv(work / "descriptors.csv")
    tpb = np.array([(r.l_tpb, r.l_tpb_active) for r in desc.values()])
    tpb = tpb[np.all(np.isfinite(tpb), axis=1)]
    r_tpb = pearson(tpb[:, 0], tpb[:, 1])
    total = sum(timing.values())
    summary = ", ".join(f"{t}: R2 {r2:.3f} r {r:.3f}" for t, (r2, r) in results.items())
    record(f"{summary}; Pearson(l_tpb, l_tpb_active) {r_tpb:.3f}; runtime {total / 60:.1f} min "
           f"({', '.join(f'{k} {v / 60:.1f}' for k, v in timing.items())})")
    assert any(r2 >= 0.5 and r >= 0.7 for r2, r in results.values())
    assert r_tpb > 0.5
    assert total < 3600


# ------------------------------------------------------------------ 9

@criterion(9, "TPE on the 1-D quadratic: within 0.05 in >= 9/10 seeds, median best <= random")
def test_criterion_09_hpo(record):
    space = {"x": hpo.uniform(0.0, 1.0)}

    def f(p):
        return (p["x"] - 0.3) ** 2

    hits, tpe_best, rnd_best = 0, [], []
    for seed in range(10):
        t = hpo.minimize(f, space, 50, seed, "tpe")
        r = hpo.minimize(f, space, 50, seed, "random")
        hits += abs(t.best["x"] - 0.3) <= 0.05
        tpe_best.append(t.best_objective)
        rnd_best.append(r.best_objective)
    record(f"{hits}/10 within 0.05; median best TPE {np.median(tpe_best):.2e} vs random {np.median(rnd_best):.2e}")
    assert hits >= 9 and np.median(tpe_best) <= np.median(rnd_best)


# ------------------------------------------------------------------ 10

def _shift_for_p(base_a, base_b, target_p):
    """Mean shift of ``base_b`` at which the Welch p-value equals target_p."""
    lo, hi = 0.0, 50.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if welch_t(base_a, base_b + mid)[2] > target_p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@criterion(10, "ablation: 6 input channels per dropped phase, pipeline completes, tiers exact at thresholds")
def test_criterion_10_ablation(record, tmp_path):
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps({
        "ninden": {"pi_branch_widths": [8], "phase_branch_widths": [8], "head_widths": [8, 4, 4],
                   "encoding_length": 4},
        "pi": {"resolution": 8, "sigma": 0.05}, "train": {"max_epochs": 3, "batch_size": 8}}))
    assert cli.main(["generate", "--n", "20", "--dims", "16", "--seed", "3", "--out", str(tmp_path / "grids")]) == 0
    assert cli.main(["characterize", "--in", str(tmp_path / "grids"), "--out", str(tmp_path / "descriptors.csv")]) == 0
    assert cli.main(["--config", str(cfg), "featurize", "--in", str(tmp_path / "grids"),
                     "--out", str(tmp_path / "features")]) == 0
    channels = {}
    for phase in ("ni", "ysz", "pore"):
        data, _ = pl.load_target(tmp_path, "d_ysz", phase)
        channels[phase] = data.x.shape[1]
        out = tmp_path / f"abl_{phase}.csv"
        assert cli.main(["--config", str(cfg), "ablate", "--work", str(tmp_path), "--target", "d_ysz",
                         "--drop-phase", phase, "--runs", "2", "--out", str(out)]) == 0
        assert out.exists()

    rng = np.random.default_rng(110)
    a = rng.normal(0, 1, 10)
    b = rng.normal(0, 1, 10)
    tiers_ok = True
    for thr, inside, outside in ((0.10, "*", ""), (0.05, "**", "*"), (0.01, "***", "**")):
        s = _shift_for_p(a, b, thr)
        p_in = welch_t(a, b + s * (1 + 1e-6))[2]
        p_out = welch_t(a, b + s * (1 - 1e-6))[2]
        tiers_ok &= significance_tier(p_in) == inside and p_in <= thr
        tiers_ok &= significance_tier(p_out) == outside and p_out > thr
        tiers_ok &= significance_tier(thr) == inside
    gap = compare(rng.normal(0, 1, 10), rng.normal(3, 1, 10), "mse").tier
    same = [r.tier for r in ablation_compare({"mse": list(a)}, {"mse": list(a)})]
    record(f"channels {channels}; threshold tiers {'exact' if tiers_ok else 'WRONG'}; "
           f"3-sigma gap tier {gap!r}; identical tier {same}")
    assert set(channels.values()) == {6}
    assert tiers_ok and gap == "***" and same == [""]
