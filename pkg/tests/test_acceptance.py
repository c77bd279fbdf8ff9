"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line with what it measured.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines inline; they
are also repeated in the terminal summary.
"""
import itertools
import time

import numpy as np

from conftest import ACCEPTANCE_LINES
from oracles import (gmm_experiment, gradient_relative_errors, median_consensus_oracle, point_mass_experiment,
                     random_batch, repeated_panorama, seam_trial, small_net, unique_panorama)
from panoscan.config import parse_config
from panoscan.exceptions import (DuplicateNameError, ElementCountError, HeaderError, MagicError, NonFiniteError,
                                 VersionError)
from panoscan.formats import read_feature_array, read_tensors, write_feature_file, write_tensors
from panoscan.fusion import (PanoramaCanvas, TileBlock, build_ramp_mask, edge_overlaps, frame_statistic,
                             median_consensus)
from panoscan.metrics import FallbackExtractor, gsd, partition_patches
from panoscan.pipeline import TileMemoryTracker, run_generate
from panoscan.rope import RopeParams, attention_logits, global_coords
from panoscan.trajectory import ScanConfig, coverage_report, plan, plan_snake


def verdict(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_01_scanpe_shift_invariance():
    params = RopeParams()
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 33))
        q, k = rng.normal(size=(2, n, params.head_dim))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        k /= np.linalg.norm(k, axis=1, keepdims=True)
        anchor = rng.integers(0, 4096, size=2)
        coords = global_coords(int(rng.integers(0, 64)), anchor, 4, 8)[:n]
        shift = rng.integers(-4096, 4097, size=3).astype(float)
        worst = max(worst, float(np.max(np.abs(attention_logits(q, k, coords, params)
                                               - attention_logits(q, k, coords + shift, params)))))
    elapsed = time.perf_counter() - start
    verdict(1, "ScanPE relative invariance", worst < 1e-6 and elapsed < 5,
            f"max logit change {worst:.2e} (< 1e-6) over 100 sets in {elapsed:.2f}s (< 5s)")


def test_02_snake_coverage():
    start = time.perf_counter()
    failures = []
    for rows, cols in itertools.product(range(1, 7), repeat=2):
        step = 3
        traj = plan_snake(ScanConfig(step, step, step, rows * cols, mode="snake", snake_grid=(rows, cols)))
        visited = [(h // step, w // step) for h, w in traj.anchors]
        counts = {}
        for cell in visited:
            counts[cell] = counts.get(cell, 0) + 1
        expected = set(itertools.product(range(rows), range(cols)))
        if set(counts) != expected or any(c != 1 for c in counts.values()):
            failures.append((rows, cols))
        report = coverage_report(traj, (rows * step, cols * step))
        if report.min_multiplicity != 1 or report.max_multiplicity != 1:
            failures.append((rows, cols, "cells"))
    elapsed = time.perf_counter() - start
    verdict(2, "snake coverage", not failures and elapsed < 1,
            f"36 grids up to 6x6, {len(failures)} failures, {elapsed:.3f}s (< 1s)")


def test_03_gradient_check():
    start = time.perf_counter()
    net = small_net(seed=11)
    coords = global_coords(3, (5, 9), 2, 2)
    errors = gradient_relative_errors(net, random_batch(np.random.default_rng(12)), coords, step=1e-4)
    worst = max(errors.values())
    elapsed = time.perf_counter() - start
    verdict(3, "flow-matching gradient check", net.n_params <= 500 and worst < 1e-3 and elapsed < 60,
            f"{net.n_params} params, max relative error {worst:.2e} (< 1e-3), {elapsed:.1f}s (< 60s)")


def test_04_toy_convergence():
    start = time.perf_counter()
    initial, final = gmm_experiment(seed=0, n_iter=500)
    mu, mean = point_mass_experiment(seed=0, n_iter=500)
    err = float(np.max(np.abs(mean - mu)))
    elapsed = time.perf_counter() - start
    ratio = final / initial
    verdict(4, "toy convergence", ratio < 0.5 and err < 0.15 and elapsed < 300,
            f"loss ratio {ratio:.3f} (< 0.5), point-mass error {err:.3f} (< 0.15), {elapsed:.1f}s (< 300s)")


def random_trajectory(rng):
    length = int(rng.integers(4, 17))
    stride = int(rng.integers(1, length + 1))
    if rng.uniform() < 0.5:
        rows, cols = (int(x) for x in rng.integers(1, 5, size=2))
        cfg = ScanConfig(length, stride, stride, rows * cols, mode="snake", snake_grid=(rows, cols))
    else:
        cfg = ScanConfig(length, stride, stride, int(rng.integers(1, 9)), linear_direction=(0, 1))
    return plan(cfg)


def fuse_in_order(tiles, anchors, overlaps, extent, order):
    canvas = PanoramaCanvas(extent, tiles[0].shape[2])
    for i in order:
        canvas.accumulate(tiles[i], build_ramp_mask(tiles[i].shape, overlaps[i]), anchors[i])
    return canvas.finalize()


def test_05_partition_of_unity():
    rng = np.random.default_rng(505)
    const_err = perm_err = 0.0
    for _ in range(100):
        traj = random_trajectory(rng)
        fp = traj.config.footprint
        extent = traj.reach()
        overlaps = edge_overlaps(traj.anchors, fp)
        v = float(rng.uniform(-3, 3))
        tiles = [np.full(fp + (3,), v) for _ in traj.anchors]
        pano, uncovered = fuse_in_order(tiles, traj.anchors, overlaps, extent, range(len(tiles)))
        const_err = max(const_err, float(np.max(np.abs(pano[~uncovered] - v))))
        noisy = [rng.uniform(size=fp + (3,)) for _ in traj.anchors]
        forward, _ = fuse_in_order(noisy, traj.anchors, overlaps, extent, range(len(tiles)))
        shuffled, _ = fuse_in_order(noisy, traj.anchors, overlaps, extent, rng.permutation(len(tiles)))
        perm_err = max(perm_err, float(np.max(np.abs(forward - shuffled))))
    verdict(5, "fusion partition of unity", const_err < 1e-6 and perm_err < 1e-6,
            f"constant error {const_err:.1e}, permutation error {perm_err:.1e} over 100 trajectories (< 1e-6)")


def test_06_mcs_oracle():
    rng = np.random.default_rng(606)
    mismatches = ties = 0
    for i in range(1000):
        n = int(rng.integers(1, 10))
        # a coarse value set forces ties in half the blocks
        if i % 2:
            values = rng.integers(0, 4, size=n) / 4
        else:
            values = rng.normal(size=n)
        frames = [np.full((2, 3, 3), v) + rng.normal(0, 1e-3, size=(2, 3, 3)) * (i % 2 == 0) for v in values]
        idx, _ = median_consensus(TileBlock(i, frames, (0, 0)))
        # the oracle judges selection on the same per-frame statistics
        stats = [frame_statistic(f) for f in frames]
        ties += len(set(stats)) < n
        mismatches += idx != median_consensus_oracle(stats)
    verdict(6, "MCS oracle equivalence", mismatches == 0 and ties > 0,
            f"{1000 - mismatches}/1000 blocks match the brute-force oracle ({ties} blocks with ties)")


def test_07_seam_quality():
    results = [seam_trial(seed) for seed in range(50)]
    wins = sum(fused < hard for fused, hard in results)
    worst = max(fused / hard for fused, hard in results)
    verdict(7, "seam quality", wins == 50,
            f"ramp beats hard cut in {wins}/50 trials (worst fused/hard jump ratio {worst:.3f})")


def test_08_gsd_ordering():
    start = time.perf_counter()
    extractor = FallbackExtractor()
    wins = 0
    for seed in range(50):
        rep = gsd(partition_patches(repeated_panorama(seed)), extractor)
        uni = gsd(partition_patches(unique_panorama(seed)), extractor)
        wins += rep.semantic > uni.semantic and rep.perceptual < uni.perceptual
    elapsed = time.perf_counter() - start
    verdict(8, "GSD ordering", wins >= 49 and elapsed < 30,
            f"repetition scores worse in {wins}/50 seeds (>= 49), {elapsed:.2f}s (< 30s)")


def test_09_patch_protocol():
    pano = np.random.default_rng(909).uniform(size=(64, 512, 3)).astype(np.float32)
    grid = partition_patches(pano)
    square = all(p.shape[:2] == (64, 64) for p in grid.patches)
    exact = grid.reassemble().tobytes() == pano.tobytes()
    verdict(9, "patch protocol", len(grid) == 8 and square and exact,
            f"{len(grid)} patches of {grid.side}x{grid.side}, bitwise reassembly {exact}")


def test_10_end_to_end(tmp_path):
    cfg = parse_config(overrides={"canvas.width": "4096", "canvas.height": "512", "io.seed": "10"})
    start = time.perf_counter()
    run_generate(cfg, tmp_path / "a")
    elapsed = time.perf_counter() - start
    run_generate(cfg, tmp_path / "b")
    identical = (tmp_path / "a" / "panorama.sstf").read_bytes() == (tmp_path / "b" / "panorama.sstf").read_bytes()
    peaks = {}
    for width in (2048, 4096, 8192):
        wide = parse_config(overrides={"canvas.width": str(width), "canvas.height": "512"})
        tracker = TileMemoryTracker()
        run_generate(wide, tracker=tracker)
        peaks[wide["scan.n_steps"]] = tracker.peak
    flat = len(set(peaks.values())) == 1
    verdict(10, "end-to-end determinism and scale", elapsed < 120 and identical and flat,
            f"4096x512 in {elapsed:.1f}s (< 120s), bitwise identical {identical}, "
            f"peak tile bytes by N {peaks}")


def test_11_format_round_trips(tmp_path):
    rng = np.random.default_rng(1111)
    arrays = {f"a{i}": rng.normal(size=tuple(rng.integers(1, 5, size=i))).astype(np.float32) for i in range(5)}
    write_tensors(tmp_path / "x.sstf", arrays)
    back = read_tensors(tmp_path / "x.sstf")
    sstf_ok = list(back) == list(arrays) and all(back[k].tobytes() == arrays[k].tobytes()
                                                 and back[k].shape == arrays[k].shape for k in arrays)
    feats = rng.normal(size=(3, 4, 4)).astype(np.float32)
    write_feature_file(tmp_path / "f.ssft", feats)
    ssft_back = read_feature_array(tmp_path / "f.ssft")
    ssft_ok = ssft_back.tobytes() == feats.tobytes() and ssft_back.shape == feats.shape

    good_sstf = (tmp_path / "x.sstf").read_bytes()
    good_ssft = (tmp_path / "f.ssft").read_bytes()
    dup = bytearray(good_sstf)
    dup[15:17] = b"a0"  # second name "a1" -> "a0"
    nan_ssft = good_ssft[:-4] + np.float32(np.nan).tobytes()
    cases = [
        (read_tensors, b"ABCD" + good_sstf[4:], MagicError),
        (read_tensors, good_sstf[:4] + b"\x07" + good_sstf[5:], VersionError),
        (read_tensors, good_sstf[:9], HeaderError),
        (read_tensors, good_sstf[:-4], ElementCountError),
        (read_tensors, bytes(dup), DuplicateNameError),
        (read_feature_array, b"ABCD" + good_ssft[4:], MagicError),
        (read_feature_array, good_ssft[:4] + b"\x07" + good_ssft[5:], VersionError),
        (read_feature_array, good_ssft[:-8], ElementCountError),
        (read_feature_array, nan_ssft, NonFiniteError),
    ]
    named = 0
    for reader, payload, error in cases:
        path = tmp_path / "bad.bin"
        path.write_bytes(payload)
        try:
            reader(path)
        except error:
            named += 1
        except Exception:
            pass
    verdict(11, "format round-trips", sstf_ok and ssft_ok and named == len(cases),
            f"SSTF bitwise {sstf_ok}, SSFT bitwise {ssft_ok}, {named}/{len(cases)} malformed files raise the named error")
