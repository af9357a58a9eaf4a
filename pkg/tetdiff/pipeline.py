"""Command implementations: fit -> train -> sample / complete / interpolate -> eval, export."""

from __future__ import annotations

import json
import logging
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from pydantic import BaseModel

from tetdiff.diffusion import (
    SDF_CHANNEL,
    DiffusionTensor,
    NoiseSchedule,
    conditional_sample,
    ddim_sample,
    ddpm_sample,
    draw_latent,
    finalize,
    make_schedule,
    refine_deformations,
    slerp,
)
from tetdiff.errors import BatchError, DimensionError, ParameterError, TetDiffError
from tetdiff.fitting import FitOutcome, fit_dataset, fit_singleview
from tetdiff.formatter import (
    format_fit_summary,
    format_metrics_table,
    format_neighbors,
    format_sample_summary,
)
from tetdiff.marching import extract_mesh
from tetdiff.meshops import (
    TriMesh,
    denormalize_mesh,
    laplacian_smooth,
    load_obj,
    normalize_mesh,
    raycast_depth,
    remove_small_components,
    sample_surface,
    save_depth,
    save_obj,
    save_points,
    topology_check,
)
from tetdiff.metrics import ShapeSet, evaluate, nearest_neighbor
from tetdiff.models import (
    CameraSpec,
    Config,
    MetricsReport,
    NeighborRecord,
    NetArch,
    PostprocessConfig,
    SampleRecord,
    TrainRecord,
)
from tetdiff.optim import Adam
from tetdiff.scoremodel import DenoiserNet, load_checkpoint, save_checkpoint, train
from tetdiff.settings import Settings
from tetdiff.tetgrid import (
    DATA_CHANNELS,
    CubicEmbedding,
    GridState,
    TetGrid,
    build_bcc_grid,
    embed_to_cubic,
    extract_from_cubic,
    lattice_mask,
    load_state,
    save_state,
)

logger = logging.getLogger(__name__)

NORMALIZE_BOUND = 0.9


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def make_grid(config: Config, resolution: int | None = None) -> TetGrid:
    g = config.grid
    return build_bcc_grid(resolution or g.resolution, g.extent, g.deform_multiplier)


def write_records(path: Path, records: Sequence[BaseModel]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for r in records:
            f.write(r.model_dump_json() + "\n")


def _obj_files(directory: Path) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ParameterError(f"input directory not found: {directory}")
    files = sorted(directory.glob("*.obj"))
    if not files:
        raise ParameterError(f"no .obj files in {directory}")
    return files


def postprocess(mesh: TriMesh, cfg: PostprocessConfig) -> TriMesh:
    """Drop small floating components, then Laplacian-smooth."""
    mesh = remove_small_components(mesh, cfg.component_fraction)
    return laplacian_smooth(mesh, cfg.smooth_lambda, cfg.smooth_steps)


def load_model(config: Config) -> tuple[DenoiserNet, TetGrid, NoiseSchedule]:
    path = config.paths.checkpoint_path
    if not path.is_file():
        raise ParameterError(f"checkpoint not found: {path}")
    net, _ = load_checkpoint(path)
    grid = make_grid(config)
    if net.arch.lattice not in (None, grid.lattice_size):
        raise DimensionError(
            f"checkpoint was trained on lattice {net.arch.lattice}, "
            f"grid resolution {grid.resolution} needs {grid.lattice_size}"
        )
    d = config.diffusion
    if net.arch.T != d.T:
        logger.warning("Checkpoint was trained with T=%d, sampling with T=%d", net.arch.T, d.T)
    return net, grid, make_schedule(d.T, d.beta_start, d.beta_end)


def _map_items(fn: Callable[[int], BaseModel], count: int, workers: int) -> list:
    with ThreadPoolExecutor(max_workers=max(workers, 1)) as pool:
        return list(pool.map(fn, range(count)))


def _raise_if_all_failed(records: Sequence[SampleRecord], what: str) -> None:
    failures = {r.sample_id: r.error for r in records if r.error}
    if records and len(failures) == len(records):
        raise BatchError(f"all {len(records)} {what} failed", failures)


# ---------------------------------------------------------------------------
# fit / train
# ---------------------------------------------------------------------------


def run_fit(
    config: Config, settings: Settings, input_dir: Path | None = None
) -> list[FitOutcome]:
    files = _obj_files(input_dir or config.paths.data_dir)
    out_dir = config.paths.dataset_dir
    grid = make_grid(config)
    logger.info("Fitting %d meshes at R=%d into %s", len(files), grid.resolution, out_dir)
    outcomes = fit_dataset(
        [(f.stem, f) for f in files], grid, config.fit, out_dir,
        normalize=True, workers=settings.threads,
    )
    write_records(out_dir / "fit_report.jsonl", [o.record for o in outcomes])
    for o in outcomes:
        print(format_fit_summary(o.record))
    return outcomes


def load_dataset(directory: Path, resolution: int) -> list[GridState]:
    files = sorted(Path(directory).glob("*.tetg"))
    if not files:
        raise ParameterError(f"no .tetg files in {directory}")
    states = []
    for f in files:
        r, state = load_state(f)
        if r != resolution:
            raise DimensionError(f"{f} has resolution {r}, config expects {resolution}")
        states.append(state)
    return states


def run_train(
    config: Config,
    settings: Settings,
    dataset_dir: Path | None = None,
    resume: bool = False,
) -> TrainRecord:
    grid = make_grid(config)
    states = load_dataset(dataset_dir or config.paths.dataset_dir, grid.resolution)
    tc, d = config.train, config.diffusion
    sched = make_schedule(d.T, d.beta_start, d.beta_end)
    path = config.paths.checkpoint_path

    optimizer = None
    if resume and path.is_file():
        net, state = load_checkpoint(path)
        optimizer = Adam(tc.learning_rate, tc.beta1, tc.beta2, state=state)
        logger.info("Resuming from %s at optimizer step %d", path, state.step)
    else:
        arch = NetArch(
            widths=tc.widths, kernel=tc.kernel, time_dim=tc.time_dim,
            T=d.T, lattice=grid.lattice_size,
        )
        net = DenoiserNet(arch, seed=tc.seed)

    logger.info("Training on %d states for %d steps", len(states), tc.steps)
    trace, optimizer = train(net, states, grid, sched, tc, optimizer)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, net, optimizer)

    record = TrainRecord(
        steps=tc.steps,
        initial_loss=trace[0] if trace else None,
        final_loss=trace[-1] if trace else None,
        trace=trace,
    )
    write_records(config.paths.out_dir / "train_record.jsonl", [record])
    logger.info("Saved checkpoint to %s", path)
    return record


# ---------------------------------------------------------------------------
# sample / interpolate / complete
# ---------------------------------------------------------------------------


def _trajectory_writer(
    grid: TetGrid, directory: Path, timesteps: Sequence[int]
) -> Callable[[int, np.ndarray], None] | None:
    wanted = set(timesteps)
    if not wanted:
        return None
    directory.mkdir(parents=True, exist_ok=True)
    index = directory / "index.jsonl"
    index.write_text("")

    def on_step(t: int, x0_hat: np.ndarray) -> None:
        if t not in wanted:
            return
        emb = CubicEmbedding(x0_hat, lattice_mask(grid.resolution), grid.vertex_sites)
        path = directory / f"t{t}.tetg"
        save_state(path, extract_from_cubic(emb, grid), grid.resolution)
        with open(index, "a") as f:
            f.write(json.dumps({"t": t, "file": path.name}) + "\n")

    return on_step


def _sign_channel(x0: np.ndarray, mask: np.ndarray) -> np.ndarray:
    x = x0.copy()
    x[SDF_CHANNEL] = np.where(x[SDF_CHANNEL] >= 0, 1.0, -1.0) * mask
    return x


def _emit(
    config: Config,
    grid: TetGrid,
    x0: np.ndarray,
    out_dir: Path,
    sample_id: str,
    seed: int,
    raw: bool,
) -> SampleRecord:
    state = finalize(x0, grid)
    save_state(out_dir / f"{sample_id}.tetg", state, grid.resolution)
    mesh = extract_mesh(grid, state)
    if not raw:
        mesh = postprocess(mesh, config.postprocess)
    out = out_dir / f"{sample_id}.obj"
    save_obj(mesh, out)
    topo = topology_check(mesh)
    return SampleRecord(
        sample_id=sample_id, seed=seed, output=str(out),
        faces=mesh.num_faces, watertight=topo.watertight,
    )


def run_sample(
    config: Config,
    settings: Settings,
    count: int = 1,
    raw: bool = False,
    trajectory: Sequence[int] = (),
) -> list[SampleRecord]:
    """Sample `count` states; sample k uses seed config.seed + k."""
    if count < 1:
        raise ParameterError(f"count must be >= 1, got {count}")
    net, grid, sched = load_model(config)
    d = config.diffusion
    out_dir = config.paths.out_dir / "samples"
    out_dir.mkdir(parents=True, exist_ok=True)
    mask = lattice_mask(grid.resolution)
    shape = (DATA_CHANNELS, *mask.shape)

    def one(k: int) -> SampleRecord:
        seed = config.seed + k
        sample_id = f"sample_{k:03d}"
        try:
            rng = np.random.default_rng(seed)
            on_step = _trajectory_writer(grid, out_dir / "trajectory" / sample_id, trajectory)
            if d.sampler == "ddim":
                latent = draw_latent(rng, shape, mask)
                x0 = ddim_sample(net, sched, latent, d.steps, d.spacing, mask, on_step, d.clip_x0)
            else:
                x0 = ddpm_sample(net, sched, shape, rng, mask, on_step)
            if d.refine:
                x0 = refine_deformations(
                    net, sched, _sign_channel(x0, mask), np.random.default_rng((seed, 1)), mask
                )
            record = _emit(config, grid, x0, out_dir, sample_id, seed, raw)
        except TetDiffError as exc:
            logger.exception("Sample %s failed", sample_id)
            return SampleRecord(sample_id=sample_id, seed=seed, error=str(exc))
        logger.info("Sampled %s: %d faces", sample_id, record.faces)
        return record

    records = _map_items(one, count, settings.threads)
    write_records(out_dir / "samples.jsonl", records)
    for r in records:
        print(format_sample_summary(r))
    _raise_if_all_failed(records, "samples")
    return records


def run_interpolate(
    config: Config,
    settings: Settings,
    seed_a: int,
    seed_b: int,
    frames: int = 5,
    raw: bool = False,
) -> list[SampleRecord]:
    """DDIM decodes of slerp-interpolated latents; the end frames match `sample` under DDIM."""
    if frames < 2:
        raise ParameterError(f"need at least 2 frames, got {frames}")
    net, grid, sched = load_model(config)
    d = config.diffusion
    out_dir = config.paths.out_dir / "interpolate"
    out_dir.mkdir(parents=True, exist_ok=True)
    mask = lattice_mask(grid.resolution)
    shape = (DATA_CHANNELS, *mask.shape)
    za = draw_latent(np.random.default_rng(seed_a), shape, mask)
    zb = draw_latent(np.random.default_rng(seed_b), shape, mask)

    def one(i: int) -> SampleRecord:
        u = i / (frames - 1)
        # refinement noise follows the nearer endpoint
        seed = seed_a if u <= 0.5 else seed_b
        sample_id = f"frame_{i:03d}"
        try:
            x0 = ddim_sample(net, sched, slerp(za, zb, u), d.steps, d.spacing, mask,
                             clip_x0=d.clip_x0)
            if d.refine:
                x0 = refine_deformations(
                    net, sched, _sign_channel(x0, mask), np.random.default_rng((seed, 1)), mask
                )
            return _emit(config, grid, x0, out_dir, sample_id, seed, raw)
        except TetDiffError as exc:
            logger.exception("Frame %s failed", sample_id)
            return SampleRecord(sample_id=sample_id, seed=seed, error=str(exc))

    records = _map_items(one, frames, settings.threads)
    write_records(out_dir / "frames.jsonl", records)
    _raise_if_all_failed(records, "frames")
    return records


def run_complete(
    config: Config,
    settings: Settings,
    mesh_path: Path,
    camera: CameraSpec,
    raw: bool = False,
) -> SampleRecord:
    """Complete a shape from one depth view of `mesh_path`.

    The camera is placed in the normalized frame of the input mesh; the output mesh is
    returned in the input's coordinates.
    """
    net, grid, sched = load_model(config)
    out_dir = config.paths.out_dir / "complete"
    out_dir.mkdir(parents=True, exist_ok=True)
    mesh, scale, center = normalize_mesh(load_obj(mesh_path), NORMALIZE_BOUND)

    view = raycast_depth(mesh, camera)
    save_depth(view, out_dir / f"{mesh_path.stem}.dpth")
    state, known = fit_singleview(grid, view, config.fit)

    observed = DiffusionTensor.from_embedding(embed_to_cubic(grid, state))
    site_known = np.zeros(observed.mask.shape, dtype=bool)
    i, j, k = grid.vertex_sites[known].T
    site_known[i, j, k] = True
    known_mask = np.broadcast_to(site_known, observed.values.shape)
    logger.info("Completing %s with %d of %d vertices known",
                mesh_path.stem, int(known.sum()), grid.num_vertices)

    rng = np.random.default_rng(config.seed)
    x0 = conditional_sample(
        net, sched, observed.values, known_mask, config.diffusion.unfreeze_t, rng, observed.mask
    )
    state = finalize(x0, grid)
    sample_id = f"{mesh_path.stem}_completed"
    save_state(out_dir / f"{sample_id}.tetg", state, grid.resolution)
    result = extract_mesh(grid, state)
    if not raw:
        result = postprocess(result, config.postprocess)
    result = denormalize_mesh(result, scale, center)
    out = out_dir / f"{sample_id}.obj"
    save_obj(result, out)
    topo = topology_check(result)
    record = SampleRecord(
        sample_id=sample_id, seed=config.seed, output=str(out),
        faces=result.num_faces, watertight=topo.watertight,
    )
    print(format_sample_summary(record))
    return record


# ---------------------------------------------------------------------------
# eval / export
# ---------------------------------------------------------------------------


def _load_shape_set(directory: Path, points: int, seed: int) -> ShapeSet:
    """Surface samples of every OBJ in `directory`; file i is sampled with seed + i."""
    clouds, ids, failures = [], [], {}
    files = _obj_files(directory)
    for i, f in enumerate(files):
        try:
            clouds.append(sample_surface(load_obj(f), points, seed + i))
            ids.append(f.stem)
        except (TetDiffError, OSError) as exc:
            logger.exception("Skipping %s", f)
            failures[f.stem] = str(exc)
    if not clouds:
        raise BatchError(f"no usable meshes in {directory}", failures)
    return ShapeSet(tuple(clouds), tuple(ids))


def run_eval(
    config: Config,
    settings: Settings,
    gen_dir: Path,
    ref_dir: Path,
    retrieve: bool = False,
    dump_clouds: bool = False,
) -> MetricsReport:
    m = config.metrics
    gen = _load_shape_set(gen_dir, m.points, config.seed)
    ref = _load_shape_set(ref_dir, m.points, config.seed)
    logger.info("Evaluating %d generated against %d reference shapes", len(gen), len(ref))
    report = evaluate(gen, ref, m, seed=config.seed, workers=settings.threads)

    out_dir = config.paths.out_dir / "eval"
    write_records(out_dir / "metrics.jsonl", [report])
    print(format_metrics_table(report))

    if retrieve:
        neighbors = []
        for query_id, cloud in zip(gen.ids, gen.clouds, strict=True):
            index, distance = nearest_neighbor(cloud, ref)
            neighbors.append(
                NeighborRecord(query=query_id, nearest=ref.ids[index], index=index,
                               distance=distance)
            )
        write_records(out_dir / "neighbors.jsonl", neighbors)
        print(format_neighbors(neighbors))

    if dump_clouds:
        for name, shapes in (("gen", gen), ("ref", ref)):
            cloud_dir = out_dir / "clouds" / name
            cloud_dir.mkdir(parents=True, exist_ok=True)
            for shape_id, cloud in zip(shapes.ids, shapes.clouds, strict=True):
                save_points(cloud, cloud_dir / f"{shape_id}.xyz")
    return report


def run_export(
    config: Config, tetg_path: Path, out_path: Path | None = None, raw: bool = False
) -> TriMesh:
    """Extract the mesh of a stored state; post-processing matches `sample`."""
    if not Path(tetg_path).is_file():
        raise ParameterError(f"state file not found: {tetg_path}")
    resolution, state = load_state(tetg_path)
    grid = make_grid(config, resolution)
    mesh = extract_mesh(grid, state)
    if not raw:
        mesh = postprocess(mesh, config.postprocess)
    out_path = out_path or Path(tetg_path).with_suffix(".obj")
    save_obj(mesh, out_path)
    logger.info("Exported %s -> %s (%d faces)", tetg_path, out_path, mesh.num_faces)
    return mesh
