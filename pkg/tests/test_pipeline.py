"""End-to-end tests for the command implementations and the CLI entry point.

Verifies that:
1. fit -> train writes grid states, a fit report, a checkpoint and a training record.
2. Sampling is reproducible for a fixed seed and writes trajectories on request.
3. The end frames of a DDIM interpolation reproduce `sample` with the same seeds.
4. Completion, evaluation and export write their artifacts; eval of a set against
   itself gives full coverage and zero MMD.
5. main() maps pipeline errors to exit code 1 and success to 0.
"""

from __future__ import annotations

import json
import shutil

import numpy as np
import pytest

from tetdiff.__main__ import build_parser, main, overrides_from_args
from tetdiff.errors import DimensionError, ParameterError
from tetdiff.meshops import save_obj
from tetdiff.models import CameraSpec
from tetdiff.pipeline import (
    load_model,
    run_complete,
    run_eval,
    run_export,
    run_fit,
    run_interpolate,
    run_sample,
    run_train,
)
from tetdiff.scoremodel import load_checkpoint
from tetdiff.settings import Settings, parse_config
from tetdiff.shapes import box_mesh, icosphere, random_primitive
from tetdiff.tetgrid import load_state

# ---------------------------------------------------------------------------
# Fixtures
# ---------------------------------------------------------------------------

TINY = [
    "grid.resolution=4",
    "fit.iterations=5",
    "fit.samples=256",
    "diffusion.T=50",
    "diffusion.steps=5",
    "diffusion.unfreeze_t=10",
    "train.steps=3",
    "train.batch_size=2",
    "train.widths=4",
    "train.time_dim=4",
    "train.log_every=1",
    "metrics.points=64",
]


def _make_config(out_dir, *extra: str):
    return parse_config(overrides=[*TINY, f"paths.out_dir={out_dir}", *extra])


def _cli_tiny() -> list[str]:
    args = []
    for item in TINY:
        args += ["--set", item]
    return args


def _read_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in path.read_text().splitlines()]


@pytest.fixture(scope="module")
def settings():
    return Settings(threads=1, config=None)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("meshes")
    save_obj(box_mesh((0.8, 0.5, 0.6)), path / "box.obj")
    save_obj(icosphere(0.7, subdivisions=2), path / "sphere.obj")
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, data_dir, settings):
    """A tiny fitted dataset and checkpoint shared by the sampling tests."""
    out = tmp_path_factory.mktemp("run")
    config = _make_config(out)
    outcomes = run_fit(config, settings, data_dir)
    record = run_train(config, settings)
    return out, outcomes, record


# ---------------------------------------------------------------------------
# fit / train
# ---------------------------------------------------------------------------


def test_fit_writes_states_and_report(trained):
    out, outcomes, _ = trained
    assert [o.record.mesh_id for o in outcomes] == ["box", "sphere"]
    assert all(o.record.error is None for o in outcomes)
    resolution, state = load_state(out / "dataset" / "box.tetg")
    assert resolution == 4
    assert state.normalized
    rows = _read_jsonl(out / "dataset" / "fit_report.jsonl")
    assert [r["mesh_id"] for r in rows] == ["box", "sphere"]


def test_train_writes_checkpoint_and_record(trained):
    out, _, record = trained
    assert record.steps == 3
    assert len(record.trace) == 3
    net, state = load_checkpoint(out / "model.mdck")
    assert net.arch.lattice == 9
    assert net.arch.T == 50
    assert state.step == 3
    assert _read_jsonl(out / "train_record.jsonl")[0]["steps"] == 3


def test_resume_continues_optimizer(tmp_path, trained, settings):
    out, _, _ = trained
    config = _make_config(tmp_path)
    run_train(config, settings, out / "dataset")
    run_train(config, settings, out / "dataset", resume=True)
    _, state = load_checkpoint(tmp_path / "model.mdck")
    assert state.step == 6


def test_train_needs_dataset(tmp_path, settings):
    with pytest.raises(ParameterError):
        run_train(_make_config(tmp_path), settings, tmp_path)


# ---------------------------------------------------------------------------
# sample / interpolate
# ---------------------------------------------------------------------------


def test_sampling_is_reproducible(trained, settings):
    out, _, _ = trained
    config = _make_config(out, "seed=11")
    records = run_sample(config, settings, count=2, trajectory=(50, 1))
    assert [r.seed for r in records] == [11, 12]
    assert all(r.error is None for r in records)

    samples = out / "samples"
    first = (samples / "sample_000.tetg").read_bytes()
    assert first != (samples / "sample_001.tetg").read_bytes()
    assert (samples / "sample_000.obj").is_file()
    assert len(_read_jsonl(samples / "samples.jsonl")) == 2

    index = _read_jsonl(samples / "trajectory" / "sample_000" / "index.jsonl")
    assert [row["t"] for row in index] == [50, 1]

    run_sample(config, settings, count=1)
    assert (samples / "sample_000.tetg").read_bytes() == first


def test_sampled_states_respect_bounds(trained, settings):
    out, _, _ = trained
    config = _make_config(out, "seed=2")
    run_sample(config, settings, count=1, raw=True)
    resolution, state = load_state(out / "samples" / "sample_000.tetg")
    grid_delta = 0.75 * 2.0 / resolution
    assert state.normalized
    assert np.all(np.abs(state.sdf) == 1.0)
    assert np.abs(state.deformation).max() <= grid_delta * (1 + 1e-6)


def test_interpolation_endpoints_match_ddim_samples(trained, settings):
    out, _, _ = trained
    config = _make_config(out, "diffusion.sampler=ddim", "seed=7")
    run_sample(config, settings, count=2)
    records = run_interpolate(config, settings, 7, 8, frames=3)
    assert [r.sample_id for r in records] == ["frame_000", "frame_001", "frame_002"]
    interp, samples = out / "interpolate", out / "samples"
    assert (interp / "frame_000.tetg").read_bytes() == (samples / "sample_000.tetg").read_bytes()
    assert (interp / "frame_002.tetg").read_bytes() == (samples / "sample_001.tetg").read_bytes()
    assert len(_read_jsonl(interp / "frames.jsonl")) == 3


def test_sampling_preconditions(tmp_path, trained, settings):
    out, _, _ = trained
    with pytest.raises(ParameterError):
        run_sample(_make_config(tmp_path), settings)
    with pytest.raises(ParameterError):
        run_sample(_make_config(out), settings, count=0)
    with pytest.raises(ParameterError):
        run_interpolate(_make_config(out), settings, 1, 2, frames=1)
    with pytest.raises(DimensionError):
        load_model(_make_config(out, "grid.resolution=3"))


@pytest.mark.slow
def test_refined_sampling(trained, settings):
    out, _, _ = trained
    config = _make_config(out, "diffusion.refine=true", "seed=5")
    records = run_sample(config, settings, count=2)
    assert all(r.error is None for r in records)
    _, state = load_state(out / "samples" / "sample_000.tetg")
    assert state.normalized


# ---------------------------------------------------------------------------
# complete / eval / export
# ---------------------------------------------------------------------------


def test_complete_from_depth_view(trained, data_dir, settings):
    out, _, _ = trained
    camera = CameraSpec(position=(0.0, 0.5, 3.0), focal=16.0, width=16, height=16)
    record = run_complete(_make_config(out), settings, data_dir / "box.obj", camera)
    assert record.sample_id == "box_completed"
    assert (out / "complete" / "box.dpth").is_file()
    assert (out / "complete" / "box_completed.tetg").is_file()
    assert (out / "complete" / "box_completed.obj").is_file()


def test_eval_against_itself(tmp_path, data_dir, settings):
    config = _make_config(tmp_path)
    report = run_eval(config, settings, data_dir, data_dir, retrieve=True, dump_clouds=True)
    assert report.cov_cd == 1.0
    assert report.mmd_cd == 0.0
    assert report.generated == report.reference == 2
    neighbors = _read_jsonl(tmp_path / "eval" / "neighbors.jsonl")
    assert [(n["query"], n["nearest"]) for n in neighbors] == [("box", "box"), ("sphere", "sphere")]
    assert len((tmp_path / "eval" / "clouds" / "gen" / "box.xyz").read_text().splitlines()) == 64


def test_eval_skips_unreadable_meshes(tmp_path, data_dir, settings):
    mixed = tmp_path / "mixed"
    shutil.copytree(data_dir, mixed)
    (mixed / "broken.obj").write_text("v 0 0 0\nf 1 2 3\n")
    report = run_eval(_make_config(tmp_path), settings, mixed, data_dir)
    assert report.generated == 2


def test_export_fitted_state(trained, tmp_path):
    out, _, _ = trained
    mesh = run_export(_make_config(out), out / "dataset" / "sphere.tetg", tmp_path / "s.obj")
    assert mesh.num_faces > 0
    assert (tmp_path / "s.obj").is_file()
    with pytest.raises(ParameterError):
        run_export(_make_config(out), tmp_path / "absent.tetg")


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


def test_flags_become_overrides():
    args = build_parser().parse_args(
        ["sample", "--sampler", "ddim", "--steps", "4", "--refine", "--seed", "3",
         "--set", "grid.resolution=6"]
    )
    assert overrides_from_args(args) == [
        "seed=3",
        "diffusion.sampler=ddim",
        "diffusion.steps=4",
        "diffusion.refine=true",
        "grid.resolution=6",
    ]
    args = build_parser().parse_args(["interpolate", "1", "2", "--steps", "7"])
    assert args.steps == 7
    assert overrides_from_args(args) == []


def test_main_exit_codes(trained, tmp_path, monkeypatch):
    out, _, _ = trained
    monkeypatch.chdir(tmp_path)
    state = str(out / "dataset" / "box.tetg")
    assert main(["export", state, "--output", str(tmp_path / "b.obj"), *_cli_tiny()]) == 0
    assert (tmp_path / "b.obj").is_file()
    assert main(["sample", "--out", str(tmp_path), *_cli_tiny()]) == 1
    assert main(["export", state, "--set", "grid.colour=red"]) == 1


@pytest.mark.slow
def test_end_to_end_smoke(tmp_path, settings):
    """Fit 16 random primitives at R=8, train, sample 20 shapes and evaluate them."""
    meshes = tmp_path / "meshes"
    meshes.mkdir()
    rng = np.random.default_rng(0)
    for i in range(16):
        kind, mesh = random_primitive(rng)
        save_obj(mesh, meshes / f"{i:02d}_{kind}.obj")

    config = parse_config(
        overrides=[
            f"paths.out_dir={tmp_path / 'run'}",
            "fit.iterations=200",
            "train.steps=2000",
            "train.log_every=200",
            "metrics.points=512",
        ]
    )
    outcomes = run_fit(config, settings, meshes)
    assert all(o.record.error is None for o in outcomes)

    record = run_train(config, settings)
    assert np.mean(record.trace[-100:]) <= 0.5 * np.mean(record.trace[:100])

    samples = run_sample(config, settings, count=20)
    good = [r for r in samples if r.error is None and r.faces > 0 and r.watertight]
    assert len(good) >= 18

    report = run_eval(config, settings, tmp_path / "run" / "samples", meshes)
    assert report.nna_cd < 0.95
