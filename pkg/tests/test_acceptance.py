"""Acceptance criteria 1-10, each reported as one PASS/FAIL line.

The training criteria (3-6, 10) run the tiny profile on one CPU core and
share pretrained sources and target runs through module-scoped fixtures;
expect roughly 40 minutes for the whole module.
"""
import contextlib
import io
import shutil
import statistics
import time

import numpy as np
import pytest

from conftest import record_acceptance
from transmem import autodiff as ad
from transmem.cells import CellState, convlstm_step, init_layer, layer_params, tmu_step
from transmem.checkpoint import Checkpoint, file_digest
from transmem.cli import main as cli_main
from transmem.datasets import gen_moving_glyphs, write_dataset
from transmem.experiments import (blob_splits, evaluate_result, gate_means, glyph_splits, pretrain_source,
                                  train_target)
from transmem.metrics import csi_from_counts, frame_mse, ssim
from transmem.network import NetworkConfig, forward_sequence, init_params, run_source_models
from transmem.objective import final_loss
from transmem.profiles import TINY
from transmem.train import SourceModel

SEEDS = (0, 1, 2)
BETAS = (1e-3, 1e-2, 1e-1, 1.0)
TARGET_ARIDITY = 0.8
SOURCE_ARIDITY = 0.2


# -- 1. gradient correctness -------------------------------------------------------------

def test_c01_gradient_check():
    net = NetworkConfig(num_layers=2, channels=8, filter_size=3, subscale_factor=2, input_len=2, predict_len=2,
                        frame_height=16, frame_width=16, num_sources=2)
    frames = gen_moving_glyphs(0, 2, 2, size=16, seq_len=4, input_len=2).frames
    src_cfg = net.replace(num_sources=0)
    bank = run_source_models(frames, [(src_cfg, init_params(src_cfg, np.random.default_rng(s))) for s in (1, 2)],
                             net)
    r = np.random.default_rng(0)
    params = init_params(net, r)
    # move zero-initialized tensors off their special values so every term is exercised
    for k in params:
        if k.endswith(("w_ci", "w_cf", "w_co", ".b", "gate_b", "ln_shift")):
            params[k] = r.normal(scale=0.2, size=params[k].shape)
        elif k.endswith("ln_gain"):
            params[k] = 1 + r.normal(scale=0.2, size=params[k].shape)

    def loss(p):
        out = forward_sequence(frames, p, net)
        return final_loss(out.predictions, frames, out.records, bank, 0.1)[0]

    t0 = time.perf_counter()
    errors = ad.gradient_errors(loss, params, step=1e-5)
    elapsed = time.perf_counter() - t0
    assert set(errors) == set(params)
    worst_name, (worst, _) = max(errors.items(), key=lambda kv: kv[1][0])
    worst_elem = max(e[1] for e in errors.values())
    coords = sum(v.size for v in params.values())
    ok = worst < 1e-4 and elapsed < 300
    record_acceptance(1, ok, f"{len(errors)} tensors / {coords} coords, worst tensor rel err {worst:.2e} "
                             f"({worst_name}), worst single coord {worst_elem:.2e}, {elapsed:.0f}s")
    assert ok


# -- 2. degeneracy -------------------------------------------------------------------------

def test_c02_no_sources_reproduces_convlstm():
    mismatches = 0
    for i in range(100):
        r = np.random.default_rng(1000 + i)
        b, cin, c = (int(v) for v in r.integers(1, 4, size=3))
        k = int(r.choice([1, 3, 5]))
        h, w = (int(v) for v in r.integers(2, 7, size=2))
        p = init_layer(r, "l", cin, c, k, (h, w))
        for name in p:
            p[name] = r.normal(scale=0.5, size=p[name].shape)
        lp = layer_params(p, "l")
        x = ad.constant(r.normal(size=(b, cin, h, w)))
        prev = CellState(ad.constant(r.normal(size=(b, c, h, w))), ad.constant(r.normal(size=(b, c, h, w))))
        a, ref = tmu_step(x, prev, lp).state, convlstm_step(x, prev, lp)
        if (a.hidden.value.tobytes() != ref.hidden.value.tobytes()
                or a.memory.value.tobytes() != ref.memory.value.tobytes()):
            mismatches += 1
    seq_mismatches = 0
    net = NetworkConfig(num_layers=2, channels=4, filter_size=3, subscale_factor=2, input_len=3, predict_len=3,
                        frame_height=8, frame_width=8)
    for i in range(10):
        params = init_params(net, np.random.default_rng(i))
        frames = np.random.default_rng(50 + i).uniform(size=(2, 6, 1, 8, 8))
        a = forward_sequence(frames, params, net, cell="tmu").predicted_frames()
        b = forward_sequence(frames, params, net, cell="convlstm").predicted_frames()
        seq_mismatches += a.tobytes() != b.tobytes()
    ok = mismatches == 0 and seq_mismatches == 0
    record_acceptance(2, ok, f"bitwise mismatches: {mismatches}/100 random cell steps, "
                             f"{seq_mismatches}/10 unrolled sequences")
    assert ok


# -- shared tiny-profile runs ----------------------------------------------------------------

@pytest.fixture(scope="module")
def glyph_world(tmp_path_factory):
    """Tiny-profile glyph splits and the two pretrained sources, saved to disk."""
    d = tmp_path_factory.mktemp("glyphs")
    t0 = time.perf_counter()
    splits = {n: glyph_splits(TINY, n, 100 + n) for n in (1, 2, 3)}
    sources, paths = {}, {}
    for n in (1, 2):
        src, res = pretrain_source(TINY, splits[n], 10 + n, f"glyphs{n}")
        paths[n] = d / f"glyphs{n}.tmuc"
        res.checkpoint.save(paths[n])
        sources[n] = SourceModel.from_checkpoint(Checkpoint.load(paths[n]), f"glyphs{n}")
    digests = {n: file_digest(p) for n, p in paths.items()}
    return {"splits": splits, "sources": sources, "paths": paths, "digests": digests,
            "source_time": time.perf_counter() - t0}


@pytest.fixture(scope="module")
def glyph_runs(glyph_world):
    """Test MSE per (mode, seed) on the 3-glyph target, plus timings."""
    target = glyph_world["splits"][3]
    src = glyph_world["sources"]
    plans = {"scratch": [], "transfer": [src[1], src[2]], "finetune-g1": [src[1]], "finetune-g2": [src[2]]}
    mse, times, records = {}, {}, {}
    for seed in SEEDS:
        for name, sources in plans.items():
            t0 = time.perf_counter()
            res = train_target(TINY, target, name.split("-")[0], seed, sources)
            times[name, seed] = time.perf_counter() - t0
            mse[name, seed] = evaluate_result(res, target).mse
            records[name, seed] = res.records
    return {"mse": mse, "times": times, "records": records}


def _median(runs, name):
    return statistics.median(runs["mse"][name, s] for s in SEEDS)


def _per_seed(runs, name):
    return ", ".join(f"{runs['mse'][name, s]:.0f}" for s in SEEDS)


# -- 3. transfer beats scratch -------------------------------------------------------------

@pytest.mark.slow
def test_c03_transfer_beats_scratch(glyph_world, glyph_runs):
    scratch, transfer = _median(glyph_runs, "scratch"), _median(glyph_runs, "transfer")
    margin = 1 - transfer / scratch
    runtime = glyph_world["source_time"] + sum(glyph_runs["times"][n, s] for n in ("scratch", "transfer")
                                               for s in SEEDS)
    ok = margin >= 0.03 and runtime < 1800
    record_acceptance(3, ok, f"median test MSE transfer {transfer:.0f} vs scratch {scratch:.0f} "
                             f"(margin {margin:+.1%}, need >= 3%); transfer [{_per_seed(glyph_runs, 'transfer')}] "
                             f"scratch [{_per_seed(glyph_runs, 'scratch')}]; protocol runtime {runtime / 60:.1f} min")
    assert ok


# -- 4. transfer vs finetune ----------------------------------------------------------------

@pytest.mark.slow
def test_c04_transfer_not_worse_than_finetune(glyph_runs):
    transfer = _median(glyph_runs, "transfer")
    ft = {n: _median(glyph_runs, n) for n in ("finetune-g1", "finetune-g2")}
    ok = all(transfer <= 1.01 * v for v in ft.values())
    record_acceptance(4, ok, f"median test MSE transfer {transfer:.0f} vs finetune from 1-glyph "
                             f"{ft['finetune-g1']:.0f} / from 2-glyph {ft['finetune-g2']:.0f} (1% tie allowance)")
    assert ok


# -- 5. gate ordering ------------------------------------------------------------------------

@pytest.mark.slow
def test_c05_gate_ordering(glyph_world):
    wet = blob_splits(TINY, SOURCE_ARIDITY, 201)
    arid = blob_splits(TINY, TARGET_ARIDITY, 202)
    blob_src, _ = pretrain_source(TINY, wet, 21, "blobs")
    glyph_src = glyph_world["sources"][1]
    res = train_target(TINY, arid, "transfer", 0, [blob_src, glyph_src])
    means = gate_means(res, arid.test.frames)
    ok = means[0] > means[1]
    record_acceptance(5, ok, f"mean transfer gate on arid blob target: blob source {means[0]:.3f}, "
                             f"glyph source {means[1]:.3f}")
    assert ok


# -- 6. beta robustness ----------------------------------------------------------------------

@pytest.mark.slow
def test_c06_beta_robustness(glyph_world, glyph_runs):
    target = glyph_world["splits"][3]
    src = glyph_world["sources"]
    mse = {}
    for beta in BETAS:
        if beta == 0.1:
            mse[beta] = glyph_runs["mse"]["transfer", 0]
        else:
            mse[beta] = evaluate_result(train_target(TINY, target, "transfer", 0, [src[1], src[2]], beta=beta),
                                        target).mse
    best, worst = min(mse.values()), max(mse.values())
    spread = worst / best - 1
    ok = spread < 0.25 and mse[0.1] <= 1.10 * best
    listing = ", ".join(f"{b:g}: {v:.0f}" for b, v in mse.items())
    record_acceptance(6, ok, f"test MSE by beta {{{listing}}}; spread {spread:.1%} (< 25%), "
                             f"beta=0.1 is {mse[0.1] / best - 1:+.1%} from best (<= 10%)")
    assert ok


# -- 7. frozen sources -----------------------------------------------------------------------

@pytest.mark.slow
def test_c07_sources_unchanged(glyph_world, glyph_runs, tmp_path):
    # one more transfer run through the command line, reading the files directly
    target = glyph_world["splits"][3]
    write_dataset(tmp_path / "t.tmud", target.train.subset(0.05))
    paths = glyph_world["paths"]
    with contextlib.redirect_stdout(io.StringIO()):
        rc = cli_main(["train", "--tiny", "--mode", "transfer", "--source", str(paths[1]), "--source", str(paths[2]),
                       "--dataset", str(tmp_path / "t.tmud"), "--iters", "5", "--out", str(tmp_path / "x.tmuc")])
    after = {n: file_digest(p) for n, p in paths.items()}
    runs = len(SEEDS) + 1
    ok = rc == 0 and after == glyph_world["digests"]
    record_acceptance(7, ok, f"SHA-256 of both source checkpoints identical after {runs} transfer runs "
                             f"(cli exit {rc})")
    assert ok


# -- 8. determinism --------------------------------------------------------------------------

def _cli(argv):
    out = io.StringIO()
    with contextlib.redirect_stdout(out):
        rc = cli_main([str(a) for a in argv])
    return rc, out.getvalue()


def test_c08_commands_are_deterministic(tmp_path):
    net = ["--layers", 2, "--channels", 4, "--filter-size", 3, "--subscale", 2]
    data = ["--size", 8, "--input-len", 3, "--predict-len", 3]

    def session(d):
        if d.exists():
            shutil.rmtree(d)
        d.mkdir()
        steps = [
            ["gen-data", "--num-glyphs", 1, "--count", 12, "--seed", 4, "--out", d / "g1.tmud", *data],
            ["gen-data", "--num-glyphs", 3, "--count", 12, "--seed", 5, "--out", d / "g3.tmud", *data],
            ["gen-data", "--num-glyphs", 3, "--count", 6, "--seed", 5, "--split", "val", "--out", d / "g3v.tmud",
             *data],
            ["gen-data", "--generator", "blobs", "--count", 6, "--seed", 6, "--out", d / "b.tmud", *data],
            ["pretrain", "--dataset", d / "g1.tmud", "--iters", 6, "--val-every", 3, "--val-dataset", d / "g3v.tmud",
             "--out", d / "s.tmuc", *net],
            ["train", "--mode", "scratch", "--dataset", d / "g3.tmud", "--iters", 4, "--out", d / "sc.tmuc", *net],
            ["train", "--mode", "finetune", "--source", d / "s.tmuc", "--dataset", d / "g3.tmud", "--iters", 4,
             "--out", d / "ft.tmuc", *net],
            ["train", "--mode", "transfer", "--source", d / "s.tmuc", "--dataset", d / "g3.tmud", "--iters", 6,
             "--val-every", 3, "--val-dataset", d / "g3v.tmud", "--out", d / "tr.tmuc", *net],
            ["evaluate", "--checkpoint", d / "tr.tmuc", "--dataset", d / "g3v.tmud", "--csi-threshold", 0.286,
             "--out", d / "eval.txt", "--csv", d / "eval.csv"],
            ["inspect-gates", "--checkpoint", d / "tr.tmuc", "--dataset", d / "g3v.tmud", "--per-layer"],
            ["info", "--checkpoint", d / "tr.tmuc", "--dataset", d / "g3.tmud"],
        ]
        outputs = []
        for argv in steps:
            rc, text = _cli(argv)
            assert rc == 0, argv
            outputs.append(text.replace(str(d), "<dir>"))
        files = {p.name: p.read_bytes() for p in sorted(d.iterdir())}
        return outputs, files

    # identical flags means identical paths, so both sessions use the same directory
    out_a, files_a = session(tmp_path / "run")
    out_b, files_b = session(tmp_path / "run")
    differing = sorted(n for n in files_a if files_a[n] != files_b.get(n))
    ok = not differing and out_a == out_b and len(files_a) == 14
    record_acceptance(8, ok, f"11 commands run twice: {len(files_a)} output files (datasets, checkpoints, "
                             f"metric logs, reports) and stdout bitwise identical; differing: {differing or 'none'}")
    assert ok


# -- 9. metric oracles ---------------------------------------------------------------------

def test_c09_metric_oracles():
    r = np.random.default_rng(9)
    x = r.uniform(size=(2, 3, 1, 16, 16))
    checks = {
        "CSI(5,3,2)=0.5": csi_from_counts(5, 3, 2) == 0.5,
        "SSIM(x,x)=1": abs(ssim(x, x) - 1.0) < 1e-12,
        "MSE(x,x)=0": frame_mse(x, x)[1] == 0.0,
    }
    violations = 0
    for h, m, f in r.integers(0, 10_000, size=(1000, 3)):
        base = csi_from_counts(h, m, f)
        more_hits = csi_from_counts(h + 1, m, f)
        more_fa = csi_from_counts(h, m, f + 1)
        if np.isnan(base):
            violations += not (more_hits == 1.0 and more_fa == 0.0)
        else:
            violations += not (more_hits >= base and more_fa <= base)
    checks["CSI monotone on 1000 random counts"] = violations == 0
    ok = all(checks.values())
    record_acceptance(9, ok, "; ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in checks.items()))
    assert ok


# -- 10. distillation sanity ----------------------------------------------------------------

@pytest.mark.slow
def test_c10_distillation_decreases(glyph_runs):
    recs = glyph_runs["records"]["transfer", 0]
    distill = {r["iter"]: r["distill"] for r in recs if "distill" in r}
    d10, d1000 = distill[10], distill[1000]
    drop = 1 - d1000 / d10
    ok = drop >= 0.5
    record_acceptance(10, ok, f"sum of per-layer distillation loss: iter 10 {d10:.1f} -> iter 1000 {d1000:.1f} "
                              f"({drop:.1%} drop, need >= 50%)")
    assert ok
