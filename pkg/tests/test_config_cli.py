import csv
import json
import shutil
from importlib.resources import files
from pathlib import Path

import numpy as np
import pytest

from facepuppet.cli import EXIT_OK, EXIT_USAGE, main, moved_fiducials
from facepuppet.config import PipelineConfig, build_config, read_config_file, write_config
from facepuppet.core import FiducialSet, ValidationError, IngestError, load_fiducials, load_depth_mesh, \
    save_depth_mesh, save_image
from facepuppet.denoise import DenoiseParams
from facepuppet.flow import DENSE_WARP_PARAMS, FlowParams
from facepuppet.synthetic import write_dataset
from facepuppet.texture import AlignParams, BlendParams

GOLDEN = Path(__file__).parent / "golden" / "puppet_digest.txt"


def demo_dir() -> Path:
    return Path(str(files("facepuppet") / "data" / "demo"))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    return write_dataset(tmp_path_factory.mktemp("data"), width=64, height=80, n_photos=8, n_frames=3, seed=5)


def run_cli(*argv):
    return main([str(a) for a in argv])


def manifest(out) -> dict:
    return json.loads((Path(out) / "manifest.json").read_text())


# -- configuration -----------------------------------------------------------

def test_default_parameters_snapshot():
    c = PipelineConfig()
    assert c.tps_lambda == 10.0
    assert (c.blend_alpha, c.beta, c.tau) == (1.0, 20.0, 1.0)
    assert c.sigma == 10.0
    assert (c.tv_weight, c.huber_eps) == (1.0, 0.05)
    assert (c.flow_alpha, c.flow_ratio, c.flow_min_width, c.flow_outer, c.flow_inner, c.flow_sor) == \
        (0.02, 0.85, 20, 4, 1, 40)
    assert c.rank == 4
    assert c.dense_alpha == 0.3
    f = FlowParams()
    assert (f.alpha, f.ratio, f.min_width, f.outer_iters, f.inner_iters, f.sor_iters) == (0.02, 0.85, 20, 4, 1, 40)
    assert DENSE_WARP_PARAMS.alpha == 0.3
    b = BlendParams()
    assert (b.sigma, b.alpha, b.beta, b.tau) == (10.0, 1.0, 20.0, 1.0)
    d = DenoiseParams()
    assert (d.tv_weight, d.huber_eps) == (1.0, 0.05)
    a = AlignParams()
    assert (a.tps_lambda, a.rank, a.flow.alpha) == (10.0, 4, 0.3)
    # the derived parameter objects carry the same values
    assert c.flow_params() == f and c.blend_params() == b and c.align_params() == a
    assert c.denoise_params() == d


def test_precedence_cli_over_file_over_defaults(tmp_path):
    cfg = tmp_path / "run.txt"
    cfg.write_text("# experiment\nsigma = 8\ntau = 2.5   # inline comment\npuppet = photos\nsubvertex = no\n")
    values = read_config_file(cfg)
    assert values["puppet"] == str(tmp_path / "photos")
    c = build_config(values, {"sigma": 12.0, "tau": None})
    assert c.sigma == 12.0 and c.tau == 2.5 and c.beta == 20.0 and c.subvertex is False


def test_config_file_errors(tmp_path):
    bad = tmp_path / "a.txt"
    bad.write_text("nonsense = 1\n")
    with pytest.raises(ValidationError, match="unknown key"):
        read_config_file(bad)
    bad.write_text("sigma = ten\n")
    with pytest.raises(ValidationError, match="not a number"):
        read_config_file(bad)
    bad.write_text("just a line\n")
    with pytest.raises(ValidationError):
        read_config_file(bad)
    with pytest.raises(IngestError):
        read_config_file(tmp_path / "missing.txt")


@pytest.mark.parametrize("kw", [dict(sigma=0.0), dict(texture_mode="video"), dict(threads=0), dict(tv_weight=-1.0),
                                dict(flow_ratio=1.5), dict(levels=-1)])
def test_out_of_range_knobs(kw):
    with pytest.raises(ValidationError):
        build_config({}, kw)


def test_write_config_round_trip(tmp_path):
    c = build_config({}, {"sigma": 7.5, "puppet": "/data/p", "baselines": True})
    write_config(c, tmp_path / "c.txt")
    assert build_config(read_config_file(tmp_path / "c.txt")) == c


def test_moved_fiducials_follow_canonical_axes():
    pts = np.tile([[10.0, 20.0]], (49, 1))
    disp = np.zeros((40, 30, 3))
    disp[..., 0], disp[..., 1] = 2.0, 3.0  # +x right, +y up
    out = moved_fiducials(FiducialSet(pts), disp)
    np.testing.assert_allclose(out.points[0], [12.0, 17.0])


# -- command line ---------------------------------------------------------------

def test_missing_directory_is_usage_error(tmp_path, capsys):
    code = run_cli("average", "--puppet", tmp_path / "nope", "--out", tmp_path / "o")
    assert code == EXIT_USAGE
    assert "not a directory" in capsys.readouterr().err
    assert manifest(tmp_path / "o")["status"] == "failed"


def test_missing_out_is_usage_error(tmp_path):
    assert run_cli("average", "--puppet", tmp_path) == EXIT_USAGE


def test_bad_flag_value_is_usage_error(tmp_path):
    assert run_cli("average", "--sigma", "abc", "--out", tmp_path) == EXIT_USAGE


def test_empty_collection_exits_nonzero(tmp_path):
    (tmp_path / "photos").mkdir()
    assert run_cli("average", "--puppet", tmp_path / "photos", "--out", tmp_path / "o") != EXIT_OK


def test_average_with_sigma_override(dataset, tmp_path):
    out = tmp_path / "avg"
    assert run_cli("average", "--config", dataset / "config.txt", "--out", out, "--sigma", 12) == EXIT_OK
    m = manifest(out)
    assert m["status"] == "ok" and m["config"]["sigma"] == 12.0 and m["knobs"]["sigma"] == 12.0
    for name in ["average.png", "average_fiducials.csv"] + [f"stage_{k}.png" for k in "abcd"]:
        assert (out / name).is_file() and name in m["outputs"]
    assert set(m["timings_s"]) == {"ingest", "average"}
    assert load_fiducials(out / "average_fiducials.csv").points.shape == (49, 2)


def test_texture_with_baselines(dataset, tmp_path):
    out = tmp_path / "tex"
    target = sorted((dataset / "puppet").glob("*.csv"))[0]
    assert run_cli("texture", "--config", dataset / "config.txt", "--target", target, "--out", out,
                   "--baselines", "--debug-weights") == EXIT_OK
    for name in ("texture.png", "baseline_ii.png", "baseline_iii.png", "baseline_iv.png", "weights.npz"):
        assert (out / name).is_file()
    with np.load(out / "weights.npz") as w:
        assert w["level_0"].shape[0] == len(w["ids"]) == 8


def test_texture_reference_hold_out(dataset, tmp_path):
    ref = sorted((dataset / "puppet").glob("*.png"))[3]
    out = tmp_path / "ref"
    assert run_cli("texture", "--config", dataset / "config.txt", "--reference", ref, "--hold-out",
                   "--out", out) == EXIT_OK
    assert f"held out reference {ref.stem}" in (out / "diagnostics.txt").read_text()


def test_reference_without_landmarks(dataset, tmp_path):
    ref = tmp_path / "lonely.png"
    shutil.copy(sorted((dataset / "puppet").glob("*.png"))[0], ref)
    code = run_cli("texture", "--config", dataset / "config.txt", "--reference", ref, "--out", tmp_path / "o")
    assert code == EXIT_USAGE


def test_texture_needs_a_target(dataset, tmp_path):
    assert run_cli("texture", "--config", dataset / "config.txt", "--out", tmp_path / "o") == EXIT_USAGE


def test_transfer_writes_meshes_and_timing(dataset, tmp_path):
    out = tmp_path / "tr"
    assert run_cli("transfer", "--config", dataset / "config.txt", "--out", out, "--threads", 2) == EXIT_OK
    frames = sorted(p.stem for p in (dataset / "frames").glob("*.pfmesh"))
    for name in frames:
        assert (out / "meshes" / f"{name}.pfmesh").is_file() and (out / "meshes" / f"{name}.obj").is_file()
    with open(out / "timing.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["frame"] for r in rows] == frames
    assert {"transfer_ms", "denoise_ms", "denoise_share"} <= set(rows[0])
    # a saved correspondence can be reused
    out2 = tmp_path / "tr2"
    assert run_cli("transfer", "--frames", dataset / "frames", "--puppet-mesh", dataset / "puppet_mesh.pfmesh",
                   "--correspondence", out / "correspondence", "--out", out2) == EXIT_OK
    for name in frames:  # the stored fields are float32, so agreement is to float32 resolution
        a = load_depth_mesh(out2 / "meshes" / f"{name}.pfmesh")
        b = load_depth_mesh(out / "meshes" / f"{name}.pfmesh")
        assert np.array_equal(a.valid, b.valid)
        np.testing.assert_allclose(a.vertices, b.vertices, atol=1e-4)


def test_zero_length_sequence(dataset, tmp_path):
    (tmp_path / "frames").mkdir()
    code = run_cli("transfer", "--config", dataset / "config.txt", "--frames", tmp_path / "frames",
                   "--out", tmp_path / "o")
    assert code != EXIT_OK
    assert "no *.pfmesh frames" in manifest(tmp_path / "o")["error"]


def test_frame_grid_mismatch(dataset, tmp_path):
    fr = tmp_path / "frames"
    shutil.copytree(dataset / "frames", fr)
    m = load_depth_mesh(next(fr.glob("*.pfmesh")))
    save_depth_mesh(type(m)(m.vertices[:-2], m.valid[:-2]), fr / "zz_odd.pfmesh")
    code = run_cli("transfer", "--config", dataset / "config.txt", "--frames", fr, "--out", tmp_path / "o")
    assert code == EXIT_USAGE and "zz_odd" in manifest(tmp_path / "o")["error"]


def test_puppet_per_frame_mode(dataset, tmp_path):
    out = tmp_path / "pp"
    assert run_cli("puppet", "--config", dataset / "config.txt", "--out", out, "--texture-mode", "per-frame",
                   "--no-preview") == EXIT_OK
    frames = sorted(p.stem for p in (dataset / "frames").glob("*.pfmesh"))
    for name in frames:
        for suffix in (".obj", ".pfmesh", "_texture.png", "_fiducials.csv"):
            assert (out / "frames" / f"{name}{suffix}").is_file()
    assert not (out / "preview").exists()
    assert "texture_ms" in (out / "timing.csv").read_text()


def test_flow_subcommand(tmp_path, rng):
    from conftest import pink_noise
    from facepuppet.core import FaceImage, load_warp_field

    img = pink_noise(48, 56, rng, channels=3)
    save_image(FaceImage(img), tmp_path / "a.png")
    save_image(FaceImage(np.roll(img, 2, axis=1)), tmp_path / "b.png")
    assert run_cli("flow", tmp_path / "a.png", tmp_path / "b.png", "--out", tmp_path / "o") == EXIT_OK
    f = load_warp_field(tmp_path / "o" / "flow.pfmesh").displacement
    assert abs(np.median(f[10:-10, 10:-10, 0]) + 2.0) < 0.2
    assert (tmp_path / "o" / "flow.png").is_file()


def test_flow_size_mismatch(tmp_path, rng):
    from facepuppet.core import FaceImage

    save_image(FaceImage(rng.uniform(size=(40, 40, 3))), tmp_path / "a.png")
    save_image(FaceImage(rng.uniform(size=(40, 44, 3))), tmp_path / "b.png")
    assert run_cli("flow", tmp_path / "a.png", tmp_path / "b.png", "--out", tmp_path / "o") == EXIT_USAGE


def test_puppet_golden_digest_any_thread_count(tmp_path):
    golden = GOLDEN.read_text().strip()
    cfg = demo_dir() / "config.txt"
    digests = []
    for threads in (1, 3):
        out = tmp_path / f"t{threads}"
        assert run_cli("puppet", "--config", cfg, "--out", out, "--threads", threads) == EXIT_OK
        digests.append(manifest(out)["digest"])
    assert digests == [golden, golden]
    # timings stay out of the digest but are recorded
    assert "transfer" in manifest(tmp_path / "t1")["timings_s"]
