"""
Command-line orchestration: simulated-dataset construction, model building, the
registration-and-completion pipeline and the method benchmark.

The default pipeline is RANSIP for the initial rigid alignment, BCPD for the non-rigid
refinement and GP regression for completion. Each target is processed independently and
writes its own files under ``<out>/<target name>/``; a failed target is recorded in the
report and does not stop the others.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Annotated, Any, Callable

import numpy as np
import pandas as pd
import typer

from shapereg import config as cfg
from shapereg.completion import (
    CompletionParams,
    GpShapeModel,
    PartialObservation,
    PcaShapeModel,
    build_gp_model,
    build_pca_model,
    gp_complete,
    mean_shape_completion,
    ppca_complete,
    to_model_frame,
)
from shapereg.corruption import CorruptionConfig, RegionSpec, corrupt
from shapereg.error import CompletionError, ConfigError, RegistrationError, ShapeRegError
from shapereg.formats import (
    load_model,
    read_cloud,
    read_correspondences,
    read_ground_truth,
    read_json,
    save_model,
    write_cloud,
    write_correspondences,
    write_deformation_data,
    write_ground_truth,
    write_json,
    write_table,
)
from shapereg.geometry import (
    NONE,
    CorrespondenceMap,
    PointCloud,
    RigidTransform,
    apply_transform,
    estimate_normals,
)
from shapereg.metrics import (
    SCORE_COLUMNS,
    reconstruction_error,
    score_registration,
    summarize_scores,
)
from shapereg.nonrigid import BcpdParams, CpdParams, bcpd, cpd_nonrigid, cpd_rigid
from shapereg.rigid import IcpParams, RansipParams, RigidResult, classify_points, icp, ransip
from shapereg.shape_stats import deformation_stats, gpa, mean_shape, most_different_shape
from shapereg.utils import child_seeds, round_half_up, setup_logging

logger = logging.getLogger(__spec__.name)

STAGE1_METHODS = ('none', 'icp', 'ransip', 'cpd_rigid')
STAGE2_METHODS = ('none', 'cpd', 'bcpd')
CLOUD_SUFFIXES = ('.ply', '.obj', '.csv')
MANIFEST = 'manifest.json'


# --------------------
# Configuration
# --------------------


@dataclass(frozen=True)
class TargetSpec:
    name: str
    path: Path
    ground_truth: Path | None = None
    clean: Path | None = None


@dataclass(frozen=True)
class ModelParams:
    holdout: float = 0.1
    pca_components: int = 10
    gp_rank: int = 50
    gaussian_sigma: float | None = None
    gaussian_amplitude: float = 1.0
    gpa_max_iterations: int = 100
    gpa_tol: float = 1e-9
    gpa_scale: bool = False

    def __post_init__(self):
        if not 0 <= self.holdout < 1:
            raise ValueError('holdout must be in [0, 1)')
        if self.pca_components < 1 or self.gp_rank < 1:
            raise ValueError('pca_components and gp_rank must be >= 1')


@dataclass(frozen=True)
class StageParams:
    """Parameters of every registration method, whichever the run uses."""

    normals_k: int = 12
    icp: IcpParams = field(default_factory=IcpParams)
    ransip: RansipParams = field(default_factory=RansipParams)
    cpd: CpdParams = field(default_factory=CpdParams)
    bcpd: BcpdParams = field(default_factory=BcpdParams)

    @classmethod
    def from_dict(cls, data: dict) -> 'StageParams':
        corr = data['correspondence']
        return cls(
            normals_k=int(data['normals']['k']),
            icp=cfg.build(IcpParams, data['icp']),
            ransip=cfg.build(RansipParams, data['ransip']),
            cpd=cfg.build(CpdParams, data['cpd'] | corr),
            bcpd=cfg.build(BcpdParams, data['bcpd'] | corr),
        )


@dataclass(frozen=True, eq=False)
class PipelineConfig:
    template: Path
    targets: tuple[TargetSpec, ...]
    out_dir: Path
    seed: int = 0
    workers: int = 1
    stage1: str = 'ransip'
    stage2: str = 'bcpd'
    completion: CompletionParams = field(default_factory=CompletionParams)
    method_matrix: tuple[tuple[str, str], ...] = ()
    stages: StageParams = field(default_factory=StageParams)

    def __post_init__(self):
        _check_stages(self.stage1, self.stage2)
        for stage1, stage2 in self.method_matrix:
            _check_stages(stage1, stage2)
        if self.workers < 1:
            raise ConfigError('workers must be >= 1')
        if not Path(self.template).is_file():
            raise ConfigError(f'Template not found: {self.template}')
        for target in self.targets:
            if not target.path.is_file():
                raise ConfigError(f'Target not found: {target.path}')
        if self.completion.method != 'deformed_template' and self.completion.model_dir is None:
            raise ConfigError(f'Completion {self.completion.method!r} needs completion.model_dir')

    @classmethod
    def from_dict(
        cls,
        data: dict,
        seed: int | None = None,
        workers: int | None = None,
        out_dir: str | Path | None = None,
        **section_overrides,
    ) -> 'PipelineConfig':
        """
        Build from a merged config mapping. Explicit arguments win over the file, which wins
        over the environment.
        """
        section = data['pipeline'] | {k: v for k, v in section_overrides.items() if v is not None}
        if section.get('template') is None:
            raise ConfigError('pipeline.template is required')
        if section.get('dataset_dir') is not None:
            targets = targets_from_dir(section['dataset_dir'])
        else:
            paths = [Path(p) for p in section.get('targets') or ()]
            targets = tuple(TargetSpec(p.stem, p) for p in paths)
        return cls(
            template=Path(section['template']),
            targets=targets,
            out_dir=Path(_first(out_dir, cfg.OUT_DIR)),
            seed=int(_first(seed, section.get('seed'), cfg.SEED)),
            workers=int(_first(workers, section.get('workers'), cfg.WORKERS)),
            stage1=section['stage1'],
            stage2=section['stage2'],
            completion=cfg.build(CompletionParams, data['completion']),
            method_matrix=tuple(tuple(p) for p in section.get('method_matrix') or ()),
            stages=StageParams.from_dict(data),
        )


def _first(*values):
    return next(v for v in values if v is not None)


def _check_stages(stage1: str, stage2: str):
    if stage1 not in STAGE1_METHODS:
        raise ConfigError(f'Unknown stage 1 method {stage1!r}, expected one of {STAGE1_METHODS}')
    if stage2 not in STAGE2_METHODS:
        raise ConfigError(f'Unknown stage 2 method {stage2!r}, expected one of {STAGE2_METHODS}')


def cloud_files(directory: str | Path) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in CLOUD_SUFFIXES)


def targets_from_dir(directory: str | Path) -> tuple[TargetSpec, ...]:
    """Targets of a simulated dataset (from its manifest) or every cloud in a directory."""
    directory = Path(directory)
    if (directory / MANIFEST).is_file():
        manifest = read_json(directory / MANIFEST)
        return tuple(
            TargetSpec(
                s['name'],
                directory / s['target'],
                directory / s['ground_truth'],
                Path(s['source']),
            )
            for s in manifest['samples']
            if s['status'] == 'ok'
        )
    return tuple(TargetSpec(p.stem, p) for p in cloud_files(directory))


# --------------------
# Per-target stages
# --------------------


def run_stage1(
    method: str, template: PointCloud, target: PointCloud, params: StageParams, seed: int
) -> RigidResult | None:
    match method:
        case 'none':
            return None
        case 'icp':
            return icp(template, target, params.icp)
        case 'ransip':
            if target.normals is None:
                target = estimate_normals(target, params.normals_k)
            return ransip(template, target, replace(params.ransip, seed=seed))
        case 'cpd_rigid':
            return cpd_rigid(template, target, params.cpd)
    raise ConfigError(f'Unknown stage 1 method {method!r}')


def _lift(corr: CorrespondenceMap, kept: np.ndarray, target_count: int, extra_outliers):
    """Re-index a map computed on ``target.subset(kept)`` onto the full target."""
    assigned = corr.assignments != NONE
    lifted = np.where(assigned, kept[np.where(assigned, corr.assignments, 0)], NONE)
    outliers = np.union1d(np.asarray(extra_outliers, dtype=np.intp), kept[corr.outlier_targets])
    outliers = np.setdiff1d(outliers, lifted[lifted != NONE])
    return CorrespondenceMap(lifted, outliers, corr.threshold_used, target_count, corr.distances)


def run_stage2(
    method: str,
    template: PointCloud,
    target: PointCloud,
    stage1: RigidResult | None,
    params: StageParams,
) -> tuple[PointCloud, CorrespondenceMap, str]:
    """
    Refine ``template`` (already rigidly aligned) against the stage-1 inliers of ``target``.
    Returns the deformed template, correspondences over the full target and a status.
    """
    if stage1 is None:
        kept, dropped = np.arange(len(target)), np.zeros(0, dtype=np.intp)
    else:
        kept, dropped, _ = classify_points(stage1, target)

    if method == 'none':
        if stage1 is None:
            raise RegistrationError('stage 2 "none" needs a stage 1 method')
        return template, stage1.correspondences, 'rigid only'
    if len(kept) == 0:
        raise RegistrationError('no inliers left for refinement')

    inliers = target.subset(kept)
    if method == 'cpd':
        result = cpd_nonrigid(template, inliers, params.cpd)
    else:
        result = bcpd(template, inliers, params.bcpd)
    corr = _lift(result.correspondences, kept, len(target), dropped)
    return result.deformed_template, corr, result.status


def load_models(model_dir: str | Path) -> dict[str, PcaShapeModel | GpShapeModel]:
    model_dir = Path(model_dir)
    return {kind: load_model(model_dir / f'{kind}.sfm') for kind in ('pca', 'gp')
            if (model_dir / f'{kind}.sfm').is_file()}


def complete_shape(
    method: str,
    corr: CorrespondenceMap,
    target: PointCloud,
    models: dict,
    params: CompletionParams,
    deformed: PointCloud | None = None,
) -> PointCloud:
    """
    Completed shape in the scan frame. Model-based methods fit the model mean onto the
    observed points, complete in the model frame and map the result back.
    """
    if method == 'deformed_template':
        if deformed is None:
            raise CompletionError('deformed_template completion needs a registration result')
        return deformed
    kind = 'gp' if method == 'gp' else 'pca'
    if kind not in models:
        raise CompletionError(f'No {kind} model available for completion {method!r}')
    model = models[kind]
    mean = model.mean_shape.points
    if len(mean) != corr.template_count:
        raise CompletionError(
            f'Model has {len(mean)} points, the template {corr.template_count}'
        )
    pairs = corr.pairs
    obs = PartialObservation(pairs[:, 0], target.points[pairs[:, 1]], params.observation_noise)
    local, tf = to_model_frame(mean, obs)
    match method:
        case 'mean':
            points = mean_shape_completion(model)
        case 'ppca':
            points = ppca_complete(model, local).points
        case 'gp':
            points = gp_complete(model, local, params.exact).points
        case _:
            raise ConfigError(f'Unknown completion method {method!r}')
    return PointCloud(tf.apply_points(points))


def _score(spec: TargetSpec, template: PointCloud, corr: CorrespondenceMap, completed):
    if spec.ground_truth is None or spec.clean is None:
        return {}
    gt = read_ground_truth(spec.ground_truth)
    clean = read_cloud(spec.clean)
    if not len(clean) == len(template) == gt.original_count:
        logger.warning(f'{spec.name}: template is not corresponded with the clean shape')
        return {}
    row = score_registration(corr, gt, template, clean).to_dict()
    if completed is not None:
        row['reconstruction_error'] = reconstruction_error(completed, clean)
    return row


def process_target(
    spec: TargetSpec,
    template: PointCloud,
    conf: PipelineConfig,
    seed: int,
    stage1: str,
    stage2: str,
    completion: str | None,
    models: dict,
    out_dir: Path,
) -> dict:
    """Run both registration stages and the completion for one target, writing its files."""
    out = out_dir / spec.name
    out.mkdir(parents=True, exist_ok=True)
    target = read_cloud(spec.path)
    row: dict[str, Any] = {'name': spec.name, 'seed': seed}

    rigid = run_stage1(stage1, template, target, conf.stages, seed)
    transform = RigidTransform.identity() if rigid is None else rigid.transform
    aligned = apply_transform(template, transform)
    if rigid is not None:
        inliers, outliers, missing = classify_points(rigid, target)
        row |= {'stage1_cost': rigid.cost, 'stage1_trials': rigid.trials_run}
        write_json(
            {
                'method': stage1,
                'transform': transform.as_matrix().tolist(),
                'cost': rigid.cost,
                'trials_run': rigid.trials_run,
                'inliers': len(inliers),
                'outliers': len(outliers),
                'missing': len(missing),
            },
            out / 'stage1.json',
        )

    deformed, corr, status = run_stage2(stage2, aligned, target, rigid, conf.stages)
    write_correspondences(corr, out / 'correspondences.csv', out / 'outliers.csv')
    row |= {
        'stage2_status': status,
        'assigned': int(np.sum(corr.assignments != NONE)),
        'missing': len(corr.missing),
        'outliers': len(corr.outlier_targets),
    }

    completed = None
    if completion is not None:
        completed = complete_shape(completion, corr, target, models, conf.completion, deformed)
        write_cloud(completed, out / 'completed.ply')

    scores = _score(spec, template, corr, completed)
    if scores:
        write_json(scores, out / 'scores.json')
    logger.info(f'{spec.name}: done ({status})')
    return row | scores


def _run_all(
    jobs: list[tuple[str, Callable[[], dict]]], workers: int
) -> list[tuple[str, dict | Exception]]:
    """
    Run jobs on a thread pool. Returns (name, row) pairs in job order, with the exception in
    place of the row for a failed job.
    """

    def run_one(job):
        name, fn = job
        try:
            return name, fn()
        except Exception as e:
            logger.exception(f'Target {name} failed')
            return name, e

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_one, jobs))


def _report_rows(results) -> list[dict]:
    rows = []
    for name, row_or_exc in results:
        if isinstance(row_or_exc, Exception):
            rows.append({'name': name, 'status': 'failed', 'error': str(row_or_exc)})
        else:
            rows.append({'name': name, 'status': 'ok', 'error': ''} | row_or_exc)
    return rows


def _load_template(conf: PipelineConfig, stages: set[str]) -> PointCloud:
    template = read_cloud(conf.template)
    if 'ransip' in stages and template.normals is None:
        template = estimate_normals(template, conf.stages.normals_k)
    return template


def run_pipeline(conf: PipelineConfig) -> dict:
    """
    Register and complete every target. Writes ``report.csv`` (one row per target, with its
    status) and ``report.json``; returns the JSON summary.
    """
    conf.out_dir.mkdir(parents=True, exist_ok=True)
    template = _load_template(conf, {conf.stage1})
    models = load_models(conf.completion.model_dir) if conf.completion.model_dir else {}
    seeds = child_seeds(conf.seed, len(conf.targets))
    jobs = [
        (
            spec.name,
            lambda spec=spec, seed=seed: process_target(
                spec, template, conf, seed, conf.stage1, conf.stage2,
                conf.completion.method, models, conf.out_dir,
            ),
        )
        for spec, seed in zip(conf.targets, seeds)
    ]
    rows = _report_rows(_run_all(jobs, conf.workers))
    write_table(pd.DataFrame(rows), conf.out_dir / 'report.csv')

    failed = sum(r['status'] == 'failed' for r in rows)
    summary = {
        'targets': len(rows),
        'succeeded': len(rows) - failed,
        'failed': failed,
        'stage1': conf.stage1,
        'stage2': conf.stage2,
        'completion': conf.completion.method,
        'seed': conf.seed,
    }
    write_json(summary, conf.out_dir / 'report.json')
    logger.info(f'pipeline: {summary["succeeded"]}/{len(rows)} targets succeeded')
    return summary


def run_benchmark(conf: PipelineConfig) -> pd.DataFrame:
    """
    Score every (stage 1, stage 2) pair of ``method_matrix`` on every target. Writes the
    per-target scores, a table of mean scores with one row per method and a JSON summary;
    returns the mean-score table.
    """
    if not conf.method_matrix:
        raise ConfigError('benchmark needs pipeline.method_matrix')
    missing_truth = [t.name for t in conf.targets if t.ground_truth is None or t.clean is None]
    if missing_truth:
        raise ConfigError(f'No ground truth for targets {missing_truth}')

    conf.out_dir.mkdir(parents=True, exist_ok=True)
    template = _load_template(conf, {s1 for s1, _ in conf.method_matrix})
    seeds = child_seeds(conf.seed, len(conf.targets))
    rows = []
    for stage1, stage2 in conf.method_matrix:
        method = f'{stage1}+{stage2}'
        method_dir = conf.out_dir / method
        jobs = [
            (
                spec.name,
                lambda spec=spec, seed=seed, s1=stage1, s2=stage2, d=method_dir: process_target(
                    spec, template, conf, seed, s1, s2, None, {}, d
                ),
            )
            for spec, seed in zip(conf.targets, seeds)
        ]
        rows += [{'method': method} | r for r in _report_rows(_run_all(jobs, conf.workers))]

    scores = pd.DataFrame(rows)
    for col in SCORE_COLUMNS:
        if col not in scores:
            scores[col] = np.nan
    scores[SCORE_COLUMNS] = scores[SCORE_COLUMNS].astype(float)
    write_table(scores, conf.out_dir / 'benchmark_scores.csv')

    methods = [f'{a}+{b}' for a, b in conf.method_matrix]
    means = (
        scores.groupby('method', sort=False)[SCORE_COLUMNS].mean().reindex(methods).reset_index()
    )
    write_table(means, conf.out_dir / 'benchmark_summary.csv')
    write_json(
        summarize_scores(scores[['method', *SCORE_COLUMNS]]), conf.out_dir / 'benchmark.json'
    )
    return means


# --------------------
# Datasets and models
# --------------------


def make_simulated_dataset(
    clean_dir: str | Path, corruption: CorruptionConfig, out_dir: str | Path
) -> dict:
    """
    Corrupt every clean shape in ``clean_dir``. Sample ``i`` uses child seed ``i`` of
    ``corruption.seed``. Writes ``<name>.ply``, ``<name>.truth.parquet`` and a manifest; a
    file that cannot be read or corrupted gets an error entry instead.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = cloud_files(clean_dir)
    seeds = child_seeds(corruption.seed, len(files))
    samples = []
    for path, seed in zip(files, seeds):
        entry = {'name': path.stem, 'source': str(path.resolve()), 'seed': seed}
        try:
            clean = read_cloud(path)
            corrupted, truth = corrupt(clean, replace(corruption, seed=seed))
            write_cloud(corrupted.with_labels(None), out_dir / f'{path.stem}.ply')
            write_ground_truth(truth, out_dir / f'{path.stem}.truth.parquet')
        except (ShapeRegError, OSError) as e:
            logger.error(f'Failed to corrupt {path}: {e}')
            samples.append(entry | {'status': 'error', 'error': str(e)})
            continue
        samples.append(
            entry
            | {
                'status': 'ok',
                'target': f'{path.stem}.ply',
                'ground_truth': f'{path.stem}.truth.parquet',
                'original_count': truth.original_count,
                'corrupted_count': truth.corrupted_count,
                'removed': len(truth.removed_indices),
                'outliers': len(truth.outlier_indices),
            }
        )
    manifest = {'master_seed': corruption.seed, 'corruption': corruption.to_dict(),
                'samples': samples}
    write_json(manifest, out_dir / MANIFEST)
    logger.info(f'simulated {sum(s["status"] == "ok" for s in samples)}/{len(files)} samples')
    return manifest


def split_holdout(names: list[str], holdout: float, seed: int) -> tuple[list[str], list[str]]:
    """(train, test) name lists; the test set is round(holdout * n) names drawn with ``seed``."""
    n_test = round_half_up(holdout * len(names))
    test = set(np.random.default_rng(seed).choice(len(names), n_test, replace=False).tolist())
    return (
        [n for i, n in enumerate(names) if i not in test],
        [n for i, n in enumerate(names) if i in test],
    )


def build_models(
    clean_dir: str | Path, params: ModelParams, out_dir: str | Path, seed: int = 0
) -> dict:
    """
    GPA-align the training part of a corresponded dataset and build the PCA and GP models
    from it. Writes ``pca.sfm``, ``gp.sfm`` (with JSON sidecars), the mean shape as
    ``mean_shape.ply`` and the train/test split as ``split.json``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = cloud_files(clean_dir)
    train, test = split_holdout([p.stem for p in files], params.holdout, seed)
    if len(train) < 2:
        raise CompletionError(f'too few shapes to build models: {len(train)} in the training set')
    by_name = {p.stem: p for p in files}
    dataset = gpa(
        [read_cloud(by_name[n]) for n in train],
        params.gpa_max_iterations,
        params.gpa_tol,
        params.gpa_scale,
    )
    mean = mean_shape(dataset)

    components = min(params.pca_components, len(train) - 1)
    if components < params.pca_components:
        logger.warning(f'pca_components reduced to {components} for {len(train)} shapes')
    pca = build_pca_model(dataset.shapes, components)
    sigma = params.gaussian_sigma or 0.1 * mean.diameter
    gp = build_gp_model(dataset.shapes, mean, sigma, params.gaussian_amplitude, params.gp_rank)

    save_model(pca, out_dir / 'pca.sfm', train=train)
    save_model(gp, out_dir / 'gp.sfm', train=train)
    write_cloud(mean, out_dir / 'mean_shape.ply')
    split = {'seed': seed, 'holdout': params.holdout, 'train': train, 'test': test,
             'gpa_status': dataset.status, 'gpa_iterations': dataset.iterations_used}
    write_json(split, out_dir / 'split.json')
    logger.info(f'models built from {len(train)} shapes, {len(test)} held out')
    return split


def dataset_stats(dataset_dir: str | Path, params: ModelParams, out_dir: str | Path) -> dict:
    """GPA, deformation plot data and the most different shape of a corresponded dataset."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = cloud_files(dataset_dir)
    dataset = gpa([read_cloud(p) for p in files], params.gpa_max_iterations, params.gpa_tol,
                  params.gpa_scale)
    per_shape, per_point = deformation_stats(dataset)
    names = [p.stem for p in files]
    write_deformation_data(per_shape, per_point, mean_shape(dataset), out_dir, names)
    stats = {
        'shapes': len(files),
        'gpa_status': dataset.status,
        'gpa_iterations': dataset.iterations_used,
        'mean_deformation': float(per_shape.mean()),
        'most_different_shape': names[most_different_shape(dataset)],
    }
    write_json(stats, out_dir / 'stats.json')
    return stats


# --------------------
# CLI commands
# --------------------


@dataclass
class Settings:
    config: dict
    seed: int | None
    workers: int | None
    out: Path | None

    @property
    def out_dir(self) -> Path:
        return Path(_first(self.out, cfg.OUT_DIR))

    @property
    def master_seed(self) -> int:
        return int(_first(self.seed, self.config['pipeline'].get('seed'), cfg.SEED))


app = typer.Typer(help='Registration and completion of 3D point clouds', no_args_is_help=True)


@app.callback()
def main(
    ctx: typer.Context,
    config: Annotated[Path | None, typer.Option(help='YAML config file')] = None,
    seed: Annotated[int | None, typer.Option(help='Master seed')] = None,
    workers: Annotated[int | None, typer.Option(help='Parallel targets')] = None,
    out: Annotated[Path | None, typer.Option(help='Output directory')] = None,
):
    setup_logging()
    ctx.obj = Settings(cfg.load_config(config), seed, workers, out)


def _settings(ctx: typer.Context) -> Settings:
    return ctx.obj


def _pipeline_config(ctx: typer.Context, **section) -> PipelineConfig:
    s = _settings(ctx)
    return PipelineConfig.from_dict(s.config, s.seed, s.workers, s.out_dir, **section)


def _prepare_out(ctx: typer.Context) -> Path:
    out = _settings(ctx).out_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


@app.command()
def crop(source: Path, region: Path, output: Path):
    """Cut the points inside a region (YAML region file) out of a cloud."""
    spec = RegionSpec.from_dict(cfg.load_yaml(region), base_dir=region.parent)
    cloud = read_cloud(source)
    selected = spec.select(cloud)
    if selected.size == 0:
        raise ConfigError('region selects no points')
    write_cloud(cloud.subset(selected), output)
    logger.info(f'Cropped {len(selected)}/{len(cloud)} points to {output}')


@app.command()
def simulate(ctx: typer.Context, clean_dir: Path):
    """Build a simulated dataset from a directory of clean corresponded shapes."""
    s = _settings(ctx)
    data = dict(s.config['corruption'])
    data['seed'] = _first(s.seed, data.get('seed'), cfg.SEED)
    corruption = cfg.build(CorruptionConfig, data)
    make_simulated_dataset(clean_dir, corruption, s.out_dir)


@app.command()
def register(
    ctx: typer.Context,
    template: Path,
    target: Path,
    method: str = 'ransip',
):
    """Initial rigid registration of the template onto one target."""
    stages = StageParams.from_dict(_settings(ctx).config)
    out = _prepare_out(ctx)
    tmpl, tgt = read_cloud(template), read_cloud(target)
    if method == 'ransip' and tmpl.normals is None:
        tmpl = estimate_normals(tmpl, stages.normals_k)
    result = run_stage1(method, tmpl, tgt, stages, _settings(ctx).master_seed)
    if result is None:
        raise ConfigError('register needs a rigid method')
    write_cloud(apply_transform(tmpl, result.transform), out / 'registered.ply')
    write_correspondences(
        result.correspondences, out / 'correspondences.csv', out / 'outliers.csv'
    )
    write_json({'method': method, 'transform': result.transform.as_matrix().tolist(),
                'cost': result.cost, 'trials_run': result.trials_run}, out / 'stage1.json')


@app.command()
def refine(ctx: typer.Context, template: Path, target: Path, method: str = 'bcpd'):
    """Non-rigid refinement of an already aligned template onto one target."""
    stages = StageParams.from_dict(_settings(ctx).config)
    out = _prepare_out(ctx)
    tmpl, tgt = read_cloud(template), read_cloud(target)
    if method == 'cpd':
        result = cpd_nonrigid(tmpl, tgt, stages.cpd)
    elif method == 'bcpd':
        result = bcpd(tmpl, tgt, stages.bcpd)
    else:
        raise ConfigError(f'Unknown refinement method {method!r}')
    write_cloud(result.deformed_template, out / 'deformed.ply')
    write_correspondences(
        result.correspondences, out / 'correspondences.csv', out / 'outliers.csv'
    )
    write_json({'method': method, 'status': result.status, 'iterations': result.iterations,
                'sigma2': result.sigma2_final}, out / 'stage2.json')


@app.command()
def complete(
    ctx: typer.Context,
    correspondences: Path,
    target: Path,
    model_dir: Path,
    method: str = 'gp',
):
    """Complete a shape from a correspondence file and the target it refers to."""
    s = _settings(ctx)
    params = cfg.build(CompletionParams, s.config['completion'], method=method,
                       model_dir=str(model_dir))
    tgt = read_cloud(target)
    outliers = correspondences.with_name('outliers.csv')
    corr = read_correspondences(
        correspondences, len(tgt), outliers_path=outliers if outliers.is_file() else None
    )
    models = load_models(model_dir)
    if method == 'deformed_template':
        raise ConfigError('deformed_template completion comes from the refine command')
    completed = complete_shape(method, corr, tgt, models, params)
    write_cloud(completed, _prepare_out(ctx) / 'completed.ply')


@app.command()
def pipeline(
    ctx: typer.Context,
    template: Annotated[Path | None, typer.Option()] = None,
    dataset_dir: Annotated[Path | None, typer.Option()] = None,
):
    """Run the full pipeline over the configured targets."""
    conf = _pipeline_config(
        ctx,
        template=None if template is None else str(template),
        dataset_dir=None if dataset_dir is None else str(dataset_dir),
    )
    summary = run_pipeline(conf)
    if summary['targets'] and summary['succeeded'] == 0:
        raise typer.Exit(1)


@app.command()
def benchmark(
    ctx: typer.Context,
    template: Annotated[Path | None, typer.Option()] = None,
    dataset_dir: Annotated[Path | None, typer.Option()] = None,
):
    """Score every configured (stage 1, stage 2) method pair."""
    conf = _pipeline_config(
        ctx,
        template=None if template is None else str(template),
        dataset_dir=None if dataset_dir is None else str(dataset_dir),
    )
    means = run_benchmark(conf)
    typer.echo(means.to_string(index=False))


@app.command('build-models')
def build_models_command(ctx: typer.Context, clean_dir: Path):
    """Build PCA and GP shape models from a corresponded dataset."""
    s = _settings(ctx)
    params = cfg.build(ModelParams, s.config['models'])
    build_models(clean_dir, params, s.out_dir, s.master_seed)


@app.command()
def stats(ctx: typer.Context, dataset_dir: Path):
    """GPA and deformation statistics of a corresponded dataset."""
    s = _settings(ctx)
    result = dataset_stats(dataset_dir, cfg.build(ModelParams, s.config['models']), s.out_dir)
    typer.echo(f'most different shape: {result["most_different_shape"]}')


if __name__ == '__main__':
    app()
