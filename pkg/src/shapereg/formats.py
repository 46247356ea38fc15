"""
File formats: point clouds (PLY, OBJ, CSV), correspondence and score tables, corruption
ground truth, deformation plot data and shape-model containers.

Tables are RFC-4180 CSV (CRLF line endings) written by pandas. Shape models are stored as
an ``SFMODEL1`` container of float64 matrices plus a JSON sidecar for everything else::

    b'SFMODEL1'
    uint32 matrix count                  (little-endian)
    (uint64 rows, uint64 cols) per matrix
    row-major float64 data per matrix, in the same order
"""

import json
import logging
from pathlib import Path

import numpy as np
import pandas as pd
from plyfile import PlyData, PlyElement, PlyParseError

from shapereg.completion import GpShapeModel, PcaShapeModel
from shapereg.corruption import CorruptionGroundTruth
from shapereg.error import FormatError
from shapereg.geometry import NONE, CorrespondenceMap, PointCloud

logger = logging.getLogger(__spec__.name)

MAGIC = b'SFMODEL1'
LINE_TERMINATOR = '\r\n'
XYZ = ['x', 'y', 'z']
NORMALS = ['nx', 'ny', 'nz']
CORRESPONDENCE_COLUMNS = ['template_index', 'target_index', 'distance']


# --------------------
# Point clouds
# --------------------


def read_ply(path: str | Path) -> PointCloud:
    try:
        ply = PlyData.read(str(path))
        vertex = ply['vertex']
    except (OSError, KeyError, ValueError, PlyParseError) as e:
        raise FormatError(f'Cannot read PLY file {path}: {e}') from e
    names = set(vertex.data.dtype.names)
    if not set(XYZ) <= names:
        raise FormatError(f'PLY file {path} has no x/y/z vertex properties')
    points = np.column_stack([vertex[c].astype(np.float64) for c in XYZ])
    normals = None
    if set(NORMALS) <= names:
        normals = np.column_stack([vertex[c].astype(np.float64) for c in NORMALS])
    return PointCloud(points, normals)


def write_ply(
    cloud: PointCloud,
    path: str | Path,
    text: bool = True,
    scalars: dict[str, np.ndarray] | None = None,
) -> None:
    """
    Write ``cloud`` as float64 vertices, with normals when known and one float64 property per
    entry of ``scalars`` (per-point fields such as a deformation map).
    """
    scalars = scalars or {}
    columns = list(XYZ)
    values = [cloud.points]
    if cloud.normals is not None:
        columns += NORMALS
        values.append(cloud.normals)
    for name, field in scalars.items():
        field = np.asarray(field, dtype=np.float64).reshape(-1)
        if len(field) != len(cloud):
            raise FormatError(
                f'Scalar field {name!r} has {len(field)} values, expected {len(cloud)}'
            )
        columns.append(name)
        values.append(field[:, None])

    data = np.empty(len(cloud), dtype=[(c, 'f8') for c in columns])
    for name, column in zip(columns, np.hstack(values).T):
        data[name] = column
    element = PlyElement.describe(data, 'vertex')
    PlyData([element], text=text, byte_order='<').write(str(path))


def read_obj(path: str | Path) -> PointCloud:
    """Vertices and vertex normals of an OBJ file; faces and everything else are ignored."""
    points, normals = [], []
    try:
        with open(path) as f:
            for line in f:
                parts = line.split()
                if not parts:
                    continue
                if parts[0] == 'v':
                    points.append([float(v) for v in parts[1:4]])
                elif parts[0] == 'vn':
                    normals.append([float(v) for v in parts[1:4]])
    except (OSError, ValueError) as e:
        raise FormatError(f'Cannot read OBJ file {path}: {e}') from e
    if normals and len(normals) != len(points):
        logger.warning(f'{path}: {len(normals)} normals for {len(points)} vertices, ignored')
        normals = []
    normals = np.asarray(normals, dtype=np.float64)
    if len(normals):
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(np.asarray(points, dtype=np.float64).reshape(-1, 3),
                      normals if len(normals) else None)


def write_obj(cloud: PointCloud, path: str | Path) -> None:
    with open(path, 'w') as f:
        for x, y, z in cloud.points:
            f.write(f'v {float(x)!r} {float(y)!r} {float(z)!r}\n')
        if cloud.normals is not None:
            for x, y, z in cloud.normals:
                f.write(f'vn {float(x)!r} {float(y)!r} {float(z)!r}\n')


def read_csv_cloud(path: str | Path) -> PointCloud:
    try:
        df = pd.read_csv(path, float_precision='round_trip')
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise FormatError(f'Cannot read CSV file {path}: {e}') from e
    if list(df.columns[:3]) != XYZ:
        raise FormatError(f'CSV file {path} must start with an x,y,z header')
    normals = df[NORMALS].to_numpy(np.float64) if set(NORMALS) <= set(df.columns) else None
    return PointCloud(df[XYZ].to_numpy(np.float64), normals)


def write_csv_cloud(cloud: PointCloud, path: str | Path) -> None:
    df = pd.DataFrame(cloud.points, columns=XYZ)
    if cloud.normals is not None:
        df[NORMALS] = cloud.normals
    df.to_csv(path, index=False, lineterminator=LINE_TERMINATOR)


_READERS = {'.ply': read_ply, '.obj': read_obj, '.csv': read_csv_cloud}
_WRITERS = {'.ply': write_ply, '.obj': write_obj, '.csv': write_csv_cloud}


def read_cloud(path: str | Path) -> PointCloud:
    suffix = Path(path).suffix.lower()
    if suffix not in _READERS:
        raise FormatError(f'Unsupported point cloud format: {path}')
    return _READERS[suffix](path)


def write_cloud(cloud: PointCloud, path: str | Path) -> None:
    suffix = Path(path).suffix.lower()
    if suffix not in _WRITERS:
        raise FormatError(f'Unsupported point cloud format: {path}')
    _WRITERS[suffix](cloud, path)


# --------------------
# Tables
# --------------------


def write_table(df: pd.DataFrame, path: str | Path) -> None:
    df.to_csv(path, index=False, lineterminator=LINE_TERMINATOR)


def write_json(data: dict, path: str | Path) -> None:
    with open(path, 'w') as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write('\n')


def read_json(path: str | Path) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f'Cannot read JSON file {path}: {e}') from e


def correspondence_table(corr: CorrespondenceMap) -> pd.DataFrame:
    """
    One row per template point: ``template_index,target_index,distance``, with target -1
    and an empty distance for a missing point.
    """
    m = corr.template_count
    assigned = corr.assignments != NONE
    distances = corr.distances if corr.distances is not None else np.full(m, np.nan)
    return pd.DataFrame({
        'template_index': np.arange(m),
        'target_index': np.where(assigned, corr.assignments, -1),
        'distance': np.where(assigned, distances, np.nan),
    })


def write_correspondences(
    corr: CorrespondenceMap, path: str | Path, outliers_path: str | Path | None = None
) -> None:
    """Write the correspondence table, and the outlier target indices if ``outliers_path``."""
    write_table(correspondence_table(corr), path)
    if outliers_path is not None:
        write_table(pd.DataFrame({'target_index': corr.outlier_targets}), outliers_path)


def read_correspondences(
    path: str | Path,
    target_count: int,
    threshold_used: float = float('nan'),
    outliers_path: str | Path | None = None,
) -> CorrespondenceMap:
    try:
        df = pd.read_csv(path, float_precision='round_trip')
        outliers = np.zeros(0, dtype=np.intp)
        if outliers_path is not None:
            outliers = pd.read_csv(outliers_path)['target_index'].to_numpy(np.intp)
    except (OSError, KeyError, pd.errors.ParserError, ValueError) as e:
        raise FormatError(f'Cannot read correspondence file {path}: {e}') from e
    if list(df.columns) != CORRESPONDENCE_COLUMNS:
        raise FormatError(f'{path} must have the columns {",".join(CORRESPONDENCE_COLUMNS)}')
    df = df.sort_values('template_index')
    targets = df['target_index'].to_numpy(np.intp)
    assignments = np.where(targets == -1, NONE, targets)
    return CorrespondenceMap(
        assignments, outliers, threshold_used, target_count, df['distance'].to_numpy(np.float64)
    )


# --------------------
# Corruption ground truth
# --------------------


def ground_truth_table(gt: CorruptionGroundTruth) -> pd.DataFrame:
    """
    One row per clean point (``corrupted_index`` NONE when removed) and one per injected
    outlier (``original_index`` NONE). dx/dy/dz is the noise added to a kept point, ox/oy/oz
    the position of an outlier.
    """
    kept = gt.kept_indices
    outliers = gt.outlier_indices
    corrupted = gt.true_target_index()
    noise = np.full((gt.original_count, 3), np.nan)
    noise[gt.kept_original_index[kept]] = gt.noise_displacements[kept]
    clean_rows = pd.DataFrame({
        'original_index': np.arange(gt.original_count),
        'corrupted_index': corrupted,
        'dx': noise[:, 0], 'dy': noise[:, 1], 'dz': noise[:, 2],
        'ox': np.nan, 'oy': np.nan, 'oz': np.nan,
    })
    pos = gt.outlier_positions[outliers]
    outlier_rows = pd.DataFrame({
        'original_index': np.full(len(outliers), NONE),
        'corrupted_index': outliers,
        'dx': np.nan, 'dy': np.nan, 'dz': np.nan,
        'ox': pos[:, 0], 'oy': pos[:, 1], 'oz': pos[:, 2],
    })
    return pd.concat([clean_rows, outlier_rows], ignore_index=True)


def write_ground_truth(gt: CorruptionGroundTruth, path: str | Path) -> None:
    ground_truth_table(gt).to_parquet(path, index=False)


def read_ground_truth(path: str | Path) -> CorruptionGroundTruth:
    try:
        df = pd.read_parquet(path)
    except (OSError, ValueError) as e:
        raise FormatError(f'Cannot read ground truth {path}: {e}') from e
    original = df['original_index'].to_numpy(np.intp)
    corrupted = df['corrupted_index'].to_numpy(np.intp)
    clean = original != NONE
    present = corrupted != NONE
    count = int(corrupted[present].max()) + 1 if present.any() else 0

    kept_original = np.full(count, NONE, dtype=np.intp)
    kept_original[corrupted[present]] = original[present]
    noise = np.full((count, 3), np.nan)
    noise[corrupted[present]] = df.loc[present, ['dx', 'dy', 'dz']].to_numpy()
    positions = np.full((count, 3), np.nan)
    positions[corrupted[present]] = df.loc[present, ['ox', 'oy', 'oz']].to_numpy()
    removed = np.sort(original[clean & ~present])
    return CorruptionGroundTruth(kept_original, removed, noise, positions, int(clean.sum()))


# --------------------
# Deformation plot data
# --------------------


def write_deformation_data(
    per_shape: np.ndarray,
    per_point: np.ndarray,
    mean: PointCloud,
    out_dir: str | Path,
    names: list[str] | None = None,
) -> None:
    """Per-shape and per-point deformation CSVs, and the mean shape coloured by deformation."""
    out_dir = Path(out_dir)
    shapes = pd.DataFrame({'shape_index': np.arange(len(per_shape)),
                           'mean_deformation': per_shape})
    if names is not None:
        shapes.insert(1, 'name', names)
    write_table(shapes, out_dir / 'deformation_per_shape.csv')
    write_table(
        pd.DataFrame({'point_index': np.arange(len(per_point)), 'mean_deformation': per_point}),
        out_dir / 'deformation_per_point.csv',
    )
    write_ply(mean, out_dir / 'deformation_map.ply', scalars={'deformation': per_point})


# --------------------
# Shape model containers
# --------------------


def write_matrices(path: str | Path, matrices: list[np.ndarray]) -> None:
    arrays = [np.atleast_2d(np.asarray(m, dtype='<f8')) for m in matrices]
    with open(path, 'wb') as f:
        f.write(MAGIC)
        f.write(np.array([len(arrays)], dtype='<u4').tobytes())
        f.write(np.array([a.shape for a in arrays], dtype='<u8').reshape(-1).tobytes())
        for a in arrays:
            f.write(np.ascontiguousarray(a).tobytes())


def read_matrices(path: str | Path) -> list[np.ndarray]:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f'Cannot read model container {path}: {e}') from e
    if raw[:8] != MAGIC:
        raise FormatError(f'{path} is not an SFMODEL1 container')
    try:
        count = int(np.frombuffer(raw, '<u4', 1, 8)[0])
        dims = np.frombuffer(raw, '<u8', 2 * count, 12).reshape(count, 2)
        offset = 12 + 16 * count
        out = []
        for rows, cols in dims:
            size = int(rows * cols)
            block = np.frombuffer(raw, '<f8', size, offset)
            out.append(block.reshape(int(rows), int(cols)).copy())
            offset += 8 * size
    except ValueError as e:
        raise FormatError(f'Truncated model container {path}') from e
    if offset != len(raw):
        raise FormatError(f'Trailing bytes in model container {path}')
    return out


def _sidecar(path: Path) -> Path:
    return path.with_suffix('.json')


def save_model(model: PcaShapeModel | GpShapeModel, path: str | Path, **extra) -> None:
    """Write ``model`` to ``path`` (container) and its ``.json`` sidecar."""
    path = Path(path)
    if isinstance(model, PcaShapeModel):
        matrices = [model.mean[None, :], model.components, model.eigenvalues[None, :]]
        meta = {'kind': 'pca', 'noise_sigma2': model.noise_sigma2,
                'point_count': model.point_count}
    else:
        matrices = [
            model.reference.points,
            model.mean_deformation,
            model.eigenvalues[None, :],
            model.eigenfunctions,
            model.sample_factor,
        ]
        meta = {'kind': 'gp', 'gaussian_sigma': model.gaussian_sigma,
                'gaussian_amplitude': model.gaussian_amplitude}
    meta['matrices'] = [list(np.atleast_2d(m).shape) for m in matrices]
    write_matrices(path, matrices)
    write_json(meta | extra, _sidecar(path))


def load_model(path: str | Path) -> PcaShapeModel | GpShapeModel:
    path = Path(path)
    meta = read_json(_sidecar(path))
    matrices = read_matrices(path)
    if meta.get('kind') == 'pca':
        mean, comps, evals = matrices
        return PcaShapeModel(mean[0], comps, evals[0], meta['noise_sigma2'], meta['point_count'])
    if meta.get('kind') == 'gp':
        ref, mean, evals, funcs, factor = matrices
        return GpShapeModel(
            PointCloud(ref), mean, evals[0], funcs, meta['gaussian_sigma'],
            meta['gaussian_amplitude'], factor,
        )
    raise FormatError(f'Unknown model kind in {_sidecar(path)}: {meta.get("kind")!r}')
