import numpy as np
import pandas as pd
import pytest
from shapes import blob_points

from shapereg.completion import build_gp_model, build_pca_model
from shapereg.corruption import CorruptionConfig, RegionSpec, corrupt
from shapereg.error import FormatError
from shapereg.formats import (
    CORRESPONDENCE_COLUMNS,
    MAGIC,
    correspondence_table,
    load_model,
    read_cloud,
    read_correspondences,
    read_ground_truth,
    read_json,
    read_matrices,
    read_ply,
    save_model,
    write_cloud,
    write_correspondences,
    write_deformation_data,
    write_ground_truth,
    write_json,
    write_matrices,
    write_ply,
)
from shapereg.geometry import NONE, CorrespondenceMap, PointCloud, estimate_normals


@pytest.fixture
def oriented():
    return estimate_normals(PointCloud(blob_points(80)))


# ---------------------------------------------------------------------------
# Point clouds
# ---------------------------------------------------------------------------


class TestPointClouds:
    @pytest.mark.parametrize('suffix', ['.ply', '.obj', '.csv'])
    def test_round_trip(self, tmp_path, oriented, suffix):
        path = tmp_path / f'cloud{suffix}'
        write_cloud(oriented, path)
        loaded = read_cloud(path)
        assert np.array_equal(loaded.points, oriented.points)
        assert np.allclose(loaded.normals, oriented.normals, atol=1e-12, equal_nan=True)

    def test_binary_ply(self, tmp_path, oriented):
        write_ply(oriented, tmp_path / 'cloud.ply', text=False)
        assert np.array_equal(read_ply(tmp_path / 'cloud.ply').points, oriented.points)

    def test_without_normals(self, tmp_path, blob):
        write_cloud(blob, tmp_path / 'cloud.ply')
        assert read_cloud(tmp_path / 'cloud.ply').normals is None

    def test_ply_scalars(self, tmp_path, blob):
        from plyfile import PlyData

        values = np.arange(len(blob), dtype=np.float64)
        write_ply(blob, tmp_path / 'map.ply', scalars={'deformation': values})
        vertex = PlyData.read(str(tmp_path / 'map.ply'))['vertex']
        assert np.array_equal(vertex['deformation'], values)

    def test_ply_scalar_length_checked(self, tmp_path, blob):
        with pytest.raises(FormatError, match='deformation'):
            write_ply(blob, tmp_path / 'map.ply', scalars={'deformation': np.zeros(3)})

    def test_csv_uses_crlf(self, tmp_path, blob):
        write_cloud(blob, tmp_path / 'cloud.csv')
        raw = (tmp_path / 'cloud.csv').read_bytes()
        assert raw.startswith(b'x,y,z\r\n')

    def test_csv_header_checked(self, tmp_path):
        (tmp_path / 'bad.csv').write_text('a,b,c\n1,2,3\n')
        with pytest.raises(FormatError, match='x,y,z'):
            read_cloud(tmp_path / 'bad.csv')

    def test_obj_ignores_faces(self, tmp_path):
        (tmp_path / 'tri.obj').write_text('v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n')
        cloud = read_cloud(tmp_path / 'tri.obj')
        assert cloud.points.tolist() == [[0, 0, 0], [1, 0, 0], [0, 1, 0]]

    def test_obj_lines_are_plain_numbers(self, tmp_path, oriented):
        write_cloud(oriented, tmp_path / 'cloud.obj')
        for line in (tmp_path / 'cloud.obj').read_text().splitlines():
            tag, *values = line.split()
            assert tag in ('v', 'vn')
            assert len(values) == 3
            assert np.all(np.isfinite([float(v) for v in values]) | (np.array(values) == 'nan'))

    def test_unsupported_suffix(self, tmp_path, blob):
        with pytest.raises(FormatError, match='Unsupported point cloud format'):
            write_cloud(blob, tmp_path / 'cloud.stl')
        with pytest.raises(FormatError, match='Unsupported point cloud format'):
            read_cloud(tmp_path / 'cloud.xyz')

    def test_unreadable_ply(self, tmp_path):
        (tmp_path / 'broken.ply').write_text('not a ply file')
        with pytest.raises(FormatError):
            read_ply(tmp_path / 'broken.ply')


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------


class TestCorrespondences:
    @pytest.fixture
    def corr(self):
        return CorrespondenceMap(
            np.array([2, NONE, 0, 2]), np.array([4]), 0.5, 6, np.array([0.1, np.nan, 0.3, 0.2])
        )

    def test_table_layout(self, corr):
        df = correspondence_table(corr)
        assert list(df.columns) == CORRESPONDENCE_COLUMNS
        assert df['template_index'].tolist() == [0, 1, 2, 3]
        assert df['target_index'].tolist() == [2, -1, 0, 2]
        assert pd.isna(df.loc[1, 'distance'])

    def test_missing_written_as_minus_one(self, tmp_path, corr):
        write_correspondences(corr, tmp_path / 'corr.csv')
        lines = (tmp_path / 'corr.csv').read_text().splitlines()
        assert lines[0] == 'template_index,target_index,distance'
        assert lines[2].startswith('1,-1,')
        assert len(lines) == 5

    def test_round_trip(self, tmp_path, corr):
        write_correspondences(corr, tmp_path / 'corr.csv', tmp_path / 'outliers.csv')
        loaded = read_correspondences(
            tmp_path / 'corr.csv', 6, 0.5, outliers_path=tmp_path / 'outliers.csv'
        )
        assert np.array_equal(loaded.assignments, corr.assignments)
        assert np.array_equal(loaded.outlier_targets, corr.outlier_targets)
        assert np.allclose(loaded.distances, corr.distances, equal_nan=True)
        assert loaded.threshold_used == 0.5

    def test_rejects_other_columns(self, tmp_path):
        (tmp_path / 'corr.csv').write_text('template_index,target_index,status\n0,1,assigned\n')
        with pytest.raises(FormatError):
            read_correspondences(tmp_path / 'corr.csv', 3)

    def test_json_round_trip(self, tmp_path):
        data = {'b': [1, 2], 'a': {'nested': None}}
        write_json(data, tmp_path / 'x.json')
        assert read_json(tmp_path / 'x.json') == data
        text = (tmp_path / 'x.json').read_text()
        assert text.index('"a"') < text.index('"b"')

    def test_bad_json(self, tmp_path):
        (tmp_path / 'x.json').write_text('{')
        with pytest.raises(FormatError):
            read_json(tmp_path / 'x.json')


def test_ground_truth_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    cloud = PointCloud(rng.uniform(0, 100, size=(300, 3)))
    config = CorruptionConfig(
        uniform_missing_ratio=0.1,
        structured_missing_ratio=0.5,
        missing_region=RegionSpec('sphere', center=(50.0, 50.0, 50.0), radius=25.0),
        uniform_outlier_ratio=0.1,
        seed=9,
    )
    _, gt = corrupt(cloud, config)
    write_ground_truth(gt, tmp_path / 'truth.parquet')
    loaded = read_ground_truth(tmp_path / 'truth.parquet')
    assert np.array_equal(loaded.kept_original_index, gt.kept_original_index)
    assert np.array_equal(np.sort(loaded.removed_indices), np.sort(gt.removed_indices))
    assert np.allclose(loaded.noise_displacements, gt.noise_displacements, equal_nan=True)
    assert np.allclose(loaded.outlier_positions, gt.outlier_positions, equal_nan=True)
    assert loaded.original_count == 300


def test_deformation_data(tmp_path, blob):
    per_point = np.linspace(0, 1, len(blob))
    write_deformation_data(np.array([0.5, 1.5]), per_point, blob, tmp_path, names=['a', 'b'])
    shapes = pd.read_csv(tmp_path / 'deformation_per_shape.csv')
    assert shapes.columns.tolist() == ['shape_index', 'name', 'mean_deformation']
    assert shapes['name'].tolist() == ['a', 'b']
    points = pd.read_csv(tmp_path / 'deformation_per_point.csv')
    assert np.allclose(points['mean_deformation'], per_point)
    assert np.array_equal(read_ply(tmp_path / 'deformation_map.ply').points, blob.points)


# ---------------------------------------------------------------------------
# Model containers
# ---------------------------------------------------------------------------


class TestMatrices:
    def test_layout(self, tmp_path):
        write_matrices(tmp_path / 'm.sfm', [np.arange(6.0).reshape(2, 3), np.ones((1, 1))])
        raw = (tmp_path / 'm.sfm').read_bytes()
        assert raw[:8] == MAGIC
        assert np.frombuffer(raw, '<u4', 1, 8)[0] == 2
        assert np.frombuffer(raw, '<u8', 4, 12).tolist() == [2, 3, 1, 1]
        assert len(raw) == 12 + 32 + 8 * 7

    def test_round_trip(self, tmp_path):
        mats = [np.random.default_rng(0).normal(size=(4, 5)), np.eye(3)]
        write_matrices(tmp_path / 'm.sfm', mats)
        loaded = read_matrices(tmp_path / 'm.sfm')
        assert all(np.array_equal(a, b) for a, b in zip(loaded, mats))

    def test_bad_magic(self, tmp_path):
        (tmp_path / 'm.sfm').write_bytes(b'NOTMODEL' + bytes(8))
        with pytest.raises(FormatError, match='not an SFMODEL1 container'):
            read_matrices(tmp_path / 'm.sfm')

    def test_truncated(self, tmp_path):
        write_matrices(tmp_path / 'm.sfm', [np.ones((3, 3))])
        raw = (tmp_path / 'm.sfm').read_bytes()
        (tmp_path / 'm.sfm').write_bytes(raw[:-8])
        with pytest.raises(FormatError, match='Truncated'):
            read_matrices(tmp_path / 'm.sfm')

    def test_trailing_bytes(self, tmp_path):
        write_matrices(tmp_path / 'm.sfm', [np.ones((2, 2))])
        with open(tmp_path / 'm.sfm', 'ab') as f:
            f.write(b'\0')
        with pytest.raises(FormatError, match='Trailing bytes'):
            read_matrices(tmp_path / 'm.sfm')


class TestSaveModel:
    def test_pca(self, tmp_path, shapes):
        model = build_pca_model(shapes, 4)
        save_model(model, tmp_path / 'pca.sfm', shape_names=['s0'])
        loaded = load_model(tmp_path / 'pca.sfm')
        assert np.array_equal(loaded.mean, model.mean)
        assert np.array_equal(loaded.components, model.components)
        assert np.array_equal(loaded.eigenvalues, model.eigenvalues)
        assert loaded.noise_sigma2 == model.noise_sigma2
        meta = read_json(tmp_path / 'pca.json')
        assert meta['kind'] == 'pca'
        assert meta['shape_names'] == ['s0']

    def test_gp(self, tmp_path, shapes):
        model = build_gp_model(shapes, shapes[0], 6.0, 1.0, rank=10)
        save_model(model, tmp_path / 'gp.sfm')
        loaded = load_model(tmp_path / 'gp.sfm')
        assert np.array_equal(loaded.reference.points, model.reference.points)
        assert np.array_equal(loaded.eigenfunctions, model.eigenfunctions)
        assert np.array_equal(loaded.sample_factor, model.sample_factor)
        assert loaded.gaussian_sigma == 6.0

    def test_unknown_kind(self, tmp_path):
        write_matrices(tmp_path / 'm.sfm', [np.ones((1, 1))])
        write_json({'kind': 'mesh'}, tmp_path / 'm.json')
        with pytest.raises(FormatError, match='Unknown model kind'):
            load_model(tmp_path / 'm.sfm')
