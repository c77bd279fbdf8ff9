import json

import numpy as np
import pytest

from panoscan import cli
from panoscan.config import parse_config
from panoscan.enhance import bilinear_upscale
from panoscan.exceptions import DivergenceError, EnhancerError, FeatureIOError, UsageError
from panoscan.formats import read_tensors, write_tensors
from panoscan.pipeline import TileMemoryTracker, compute_metrics, run_fuse, run_generate, run_metrics
from panoscan.sources import ProceduralSource

SMALL = {"canvas.short": "32", "canvas.aspect": "8:1"}
CLEAN_GRADIENT = {"source.pattern": "gradient", "source.jitter": "0", "source.outlier_prob": "0"}


def config(**extra):
    return parse_config(overrides={**SMALL, **extra})


def test_gradient_fuses_to_global_field():
    cfg = parse_config(overrides={**SMALL, **CLEAN_GRADIENT})
    result = run_generate(cfg)
    src = ProceduralSource(cfg.base_extent, "gradient", 3)
    hh, ww = np.meshgrid(np.arange(32), np.arange(256), indexing="ij")
    assert not result.uncovered.any()
    np.testing.assert_allclose(result.panorama, src.field(hh, ww), atol=1e-6)


def test_gradient_with_upscaler_matches_upscaled_field():
    cfg = parse_config(overrides={**SMALL, **CLEAN_GRADIENT, "canvas.short": "64", "enhancer.kind": "upscale",
                                  "enhancer.scale": "2"})
    assert cfg.base_extent == (32, 256)
    result = run_generate(cfg)
    src = ProceduralSource(cfg.base_extent, "gradient", 3)
    hh, ww = np.meshgrid(np.arange(32), np.arange(256), indexing="ij")
    np.testing.assert_allclose(result.panorama, bilinear_upscale(src.field(hh, ww), 2), atol=1e-6)


def test_single_window_is_the_tile():
    cfg = parse_config(overrides={"canvas.short": "16", "canvas.aspect": "1:1"})
    assert cfg["scan.n_steps"] == 1
    result = run_generate(cfg)
    src = ProceduralSource(cfg.base_extent, "texture", 3, 3, cfg["source.jitter"], cfg["source.outlier_prob"], 0)
    frames = src.block(1, (0, 0), (16, 16))
    tile = frames[result.manifest[0].selected].astype(np.float32)
    assert result.panorama.tobytes() == tile.tobytes()


def test_outputs_are_deterministic(tmp_path):
    cfg = config(**{"io.save_tiles": "true"})
    run_generate(cfg, tmp_path / "a")
    run_generate(cfg, tmp_path / "b")
    for name in ("panorama.sstf", "panorama.ppm", "uncovered.pgm", "seams.csv", "trajectory.txt",
                 "partition.txt", "config.txt", "tiles/block_0001.sstf"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    a, b = ((tmp_path / d / "manifest.txt").read_text().splitlines() for d in "ab")
    assert [l for l in a if not l.startswith("created")] == [l for l in b if not l.startswith("created")]


def test_seed_changes_output():
    assert not np.array_equal(run_generate(config()).panorama, run_generate(config(**{"io.seed": "1"})).panorama)


def test_manifest_lists_every_saved_tile(tmp_path):
    cfg = config(**{"io.save_tiles": "true", "tap.block_size": "3"})
    result = run_generate(cfg, tmp_path)
    saved = {name for path in (tmp_path / "tiles").glob("*.sstf") for name in read_tensors(path)}
    lines = [l for l in (tmp_path / "manifest.txt").read_text().splitlines() if l.startswith("tile ")]
    assert len(saved) == len(lines) == len(result.trajectory)
    for line in lines:
        fields = dict(part.split("=", 1) for part in line.split()[1:])
        assert f"tile_{int(fields['t']):04d}" in saved
        assert {"anchor", "window", "block", "mcs", "primary"} <= set(fields)
        assert int(fields["block"]) == result.partition.block_of(int(fields["t"]))


def test_peak_tile_memory_is_one_block():
    peaks = {}
    for aspect in ("4:1", "8:1", "16:1"):
        tracker = TileMemoryTracker()
        cfg = parse_config(overrides={"canvas.short": "32", "canvas.aspect": aspect})
        run_generate(cfg, tracker=tracker)
        peaks[aspect] = tracker.peak
        assert tracker.current == 0
    assert len(set(peaks.values())) == 1
    block = 4 * 3 * 32 * 32 * 3 * 8
    assert peaks["8:1"] == block


def test_fuse_reproduces_generate(tmp_path):
    cfg = config(**{"io.save_tiles": "true", "enhancer.kind": "upscale", "enhancer.scale": "2",
                    "canvas.short": "64"})
    result = run_generate(cfg, tmp_path / "gen")
    pano, uncovered = run_fuse(cfg, tmp_path / "gen" / "tiles", tmp_path / "fused")
    assert pano.tobytes() == result.panorama.tobytes()
    assert (tmp_path / "fused" / "panorama.sstf").read_bytes() == (tmp_path / "gen" / "panorama.sstf").read_bytes()


def test_fuse_missing_tiles(tmp_path):
    cfg = config(**{"io.save_tiles": "true"})
    run_generate(cfg, tmp_path)
    tiles = tmp_path / "tiles"
    first = tiles / "block_0001.sstf"
    arrays = read_tensors(first)
    arrays.pop(next(iter(arrays)))
    write_tensors(first, arrays)
    with pytest.raises(UsageError, match="missing"):
        run_fuse(cfg, tiles)


def test_enhancer_shape_mismatch():
    class Shrinker:
        scale = 1

        def transform(self, tiles):
            return [t[1:] for t in tiles]

    with pytest.raises(EnhancerError):
        run_generate(config(), enhancer=Shrinker())


def test_metrics_on_constant_and_wide(tmp_path):
    report = compute_metrics(np.full((32, 256, 3), 0.4, dtype=np.float32), config())
    assert report.values["Style-L"] == 0.0
    assert report.values["GSD-semantic"] == pytest.approx(1.0)
    assert report.extras["patches"] == 8
    run_generate(config(), tmp_path)
    report = run_metrics(tmp_path / "panorama.sstf", config(), tmp_path)
    payload = json.loads((tmp_path / "metrics.json").read_text())
    assert payload["patches"] == 8 and payload["FID"] is None
    assert (tmp_path / "metrics.csv").read_text() == report.to_csv()


def test_metrics_reads_ppm(tmp_path):
    run_generate(config(), tmp_path)
    report = run_metrics(tmp_path / "panorama.ppm", config())
    assert report.extras["patches"] == 8


def test_single_patch_leaves_metrics_empty(caplog):
    report = compute_metrics(np.zeros((16, 16, 3)), config())
    assert report.values["Style-L"] is None and report.values["GSD-semantic"] is None
    assert "not computed" in caplog.text


def test_external_backend_missing_directory(tmp_path):
    cfg = config(**{"metrics.extractor": "external", "metrics.features_dir": str(tmp_path / "nope")})
    with pytest.raises(FeatureIOError):
        compute_metrics(np.zeros((32, 256, 3)), cfg)


def test_external_scores_merged(tmp_path):
    scores = tmp_path / "scores.json"
    scores.write_text(json.dumps({"FID": 214.7, "CLIP": 30.0}))
    report = compute_metrics(np.zeros((32, 256, 3)), config(**{"metrics.external_scores": str(scores)}))
    assert report.values["FID"] == 214.7 and report.values["KID"] is None


def test_flow_source_runs(tmp_path):
    cfg = config(**{"source.kind": "flow", "flow.iterations": "5", "flow.sample_steps": "2"})
    result = run_generate(cfg, tmp_path)
    assert np.all(np.isfinite(result.panorama))
    assert (tmp_path / "loss_curve.csv").read_text().splitlines()[0] == "iter,loss"
    assert "W_q" in read_tensors(tmp_path / "checkpoint.sstf")


# command line


def run_cli(*args):
    return cli.main(list(args))


def test_cli_generate_inspect_metrics(tmp_path, capsys):
    out = tmp_path / "out"
    common = ["--set", "canvas.short=32", "--seed", "2"]
    assert run_cli("generate", "--out-dir", str(out), *common) == 0
    assert (out / "panorama.sstf").is_file()
    assert "seed = 2" in (out / "manifest.txt").read_text()
    assert run_cli("inspect", *common) == 0
    assert "# coverage" in capsys.readouterr().out
    assert run_cli("metrics", str(out / "panorama.sstf"), "--out-dir", str(out), *common) == 0
    assert (out / "metrics.csv").is_file()


def test_cli_flags_map_to_keys(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("[io]\nseed = 5\n[scan]\nmode = linear\n")
    args = cli.build_parser().parse_args(["generate", "--config", str(path), "--mode", "snake", "--aspect", "2:1",
                                          "--enhancer", "upscale:2", "--features-dir", "feats"])
    cfg = cli.config_from_args(args)
    assert cfg["scan.mode"] == "snake" and cfg["io.seed"] == 5 and cfg["canvas.aspect"] == "2:1"
    assert cfg["enhancer.kind"] == "upscale" and cfg.scale == 2.0 and cfg["metrics.features_dir"] == "feats"


def test_cli_fuse(tmp_path):
    common = ["--set", "canvas.short=32"]
    assert run_cli("generate", "--out-dir", str(tmp_path / "g"), "--set", "io.save_tiles=true", *common) == 0
    assert run_cli("fuse", "--tiles-dir", str(tmp_path / "g" / "tiles"), "--out-dir", str(tmp_path / "f"),
                   *common) == 0
    assert (tmp_path / "f" / "panorama.sstf").read_bytes() == (tmp_path / "g" / "panorama.sstf").read_bytes()


@pytest.mark.parametrize("args, code", [
    (["inspect", "--set", "scan.spatial_stride=9999"], 2),
    (["inspect", "--set", "no.such=1"], 2),
    (["inspect", "--enhancer", "sharpen"], 2),
    (["fuse"], 2),
    (["fuse", "--tiles-dir", "/nonexistent"], 3),
    (["metrics", "/nonexistent/p.sstf"], 3),
    (["inspect", "--config", "/nonexistent/c.txt"], 3),
])
def test_cli_exit_codes(args, code):
    assert run_cli(*args) == code


def test_cli_bad_file_and_external_features(tmp_path):
    bad = tmp_path / "p.sstf"
    bad.write_bytes(b"nope")
    assert run_cli("metrics", str(bad)) == 3
    run_cli("generate", "--out-dir", str(tmp_path), "--set", "canvas.short=32")
    assert run_cli("metrics", str(tmp_path / "panorama.sstf"), "--set", "canvas.short=32", "--set",
                   "metrics.extractor=external", "--features-dir", str(tmp_path / "none")) == 3


def test_cli_divergence_exit_code(monkeypatch):
    def diverge(*args, **kwargs):
        raise DivergenceError("sampler state became non-finite")

    monkeypatch.setattr(cli, "run_generate", diverge)
    assert run_cli("generate", "--set", "canvas.short=32") == 4
