import numpy as np
import pytest

from craniopy.errors import GraphError
from craniopy.graph import build_graph, extract_patch, knn_edges, node_features
from craniopy.models import FeatureMatrix, Landmark, PatchConfig


def knn_oracle(points, k):
    """Exhaustive distances; (distance, index) ordering."""
    edges = []
    for i in range(len(points)):
        candidates = []
        for j in range(len(points)):
            if j != i:
                d = float(np.sum((points[i] - points[j]) ** 2))
                candidates.append((d, j))
        candidates.sort()
        edges.extend((i, j) for _, j in candidates[:k])
    return edges


class TestExtractPatch:
    def test_interior(self):
        patch = extract_patch(np.ones((10, 10)), Landmark(5, 5, 1), 2)
        np.testing.assert_array_equal(patch, np.ones((4, 4)))

    def test_corner_is_zero_padded(self):
        patch = extract_patch(np.ones((10, 10)), Landmark(0, 0, 1), 2)
        expected = np.zeros((4, 4))
        expected[2:, 2:] = 1.0
        np.testing.assert_array_equal(patch, expected)

    @pytest.mark.parametrize("x, y", [(3, 3), (7, 1), (9, 9)])
    def test_constant_image_inside(self, x, y):
        image = np.full((20, 20), 2.5)
        patch = extract_patch(image, Landmark(x + 5, y + 5, 1), 3)
        assert np.all(patch == 2.5)

    def test_rows_follow_y(self):
        image = np.zeros((10, 10))
        image[7, 2] = 1.0  # row y=7, column x=2
        patch = extract_patch(image, Landmark(2, 7, 1), 1)
        assert patch[1, 1] == 1.0 and patch.sum() == 1.0

    def test_invisible_landmark(self):
        with pytest.raises(GraphError):
            extract_patch(np.ones((10, 10)), Landmark(5, 5, 0), 2)


class TestKnnEdges:
    def test_collinear(self):
        edges = knn_edges(np.array([[0, 0], [1, 0], [3, 0]]), 1)
        assert {tuple(e) for e in edges} == {(0, 1), (1, 0), (2, 1)}

    def test_complete_digraph(self, rng):
        points = rng.uniform(size=(6, 2))
        edges = knn_edges(points, 5)
        assert len(edges) == 30
        assert {tuple(e) for e in edges} == {(i, j) for i in range(6) for j in range(6) if i != j}

    def test_tie_goes_to_lower_index(self):
        # nodes 1 and 2 are equidistant from node 0
        edges = knn_edges(np.array([[0, 0], [1, 0], [-1, 0]]), 1)
        assert tuple(edges[0]) == (0, 1)

    def test_matches_oracle_on_random_sets(self, rng):
        for trial in range(200):
            n = int(rng.integers(2, 13))
            k = int(rng.integers(1, n))
            # small integer grid produces many exact ties
            points = rng.integers(0, 4, size=(n, 2)).astype(np.float64) if trial % 2 else rng.uniform(size=(n, 2))
            assert [tuple(e) for e in knn_edges(points, k)] == knn_oracle(points, k)

    def test_out_degree_and_no_self_loops(self, rng):
        edges = knn_edges(rng.uniform(size=(9, 2)), 3)
        assert np.all(np.bincount(edges[:, 0]) == 3)
        assert np.all(edges[:, 0] != edges[:, 1])

    def test_translation_and_scale_invariance(self, rng):
        points = rng.integers(0, 50, size=(10, 2)).astype(np.float64)
        edges = knn_edges(points, 3)
        np.testing.assert_array_equal(knn_edges(points + np.array([17.0, -5.0]), 3), edges)
        np.testing.assert_array_equal(knn_edges(points * 4.0, 3), edges)

    @pytest.mark.parametrize("k", [0, 3])
    def test_k_out_of_range(self, k):
        with pytest.raises(GraphError):
            knn_edges(np.zeros((3, 2)), k)


class TestBuildGraph:
    def _landmarks(self, n, invisible=()):
        return [Landmark(10.0 * i + 5, 20.0 + i, 0 if i in invisible else 1) for i in range(n)]

    def test_supplied_features(self, rng):
        features = FeatureMatrix.from_array(rng.standard_normal((3, 4)))
        graph = build_graph(self._landmarks(3), PatchConfig(8, 4), 1, patch_features=features, image_size=(100, 100))
        assert graph.X.shape == (3, 6)
        assert len(graph.edges) == 3
        np.testing.assert_allclose(graph.X[:, 2:], features.values)

    def test_invisible_landmark_keeps_coordinates(self, rng):
        features = FeatureMatrix.from_array(rng.standard_normal((4, 4)))
        landmarks = self._landmarks(4, invisible={2})
        graph = build_graph(landmarks, PatchConfig(8, 4), 2, patch_features=features, normalize_coords=False)
        np.testing.assert_array_equal(graph.X[2, 2:], np.zeros(4))
        np.testing.assert_array_equal(graph.X[2, :2], [landmarks[2].x, landmarks[2].y])

    def test_s2f_front_shape(self, rng):
        features = FeatureMatrix.from_array(rng.standard_normal((18, 128)))
        landmarks = [Landmark(float(x), float(y), 1) for x, y in rng.uniform(0, 640, size=(18, 2))]
        graph = build_graph(landmarks, PatchConfig(32, 128), 4, patch_features=features, image_size=(640, 640))
        assert graph.X.shape == (18, 130)
        assert len(graph.edges) == 72

    def test_coordinates_normalised_by_image_size(self, rng):
        features = FeatureMatrix.from_array(rng.standard_normal((3, 2)))
        landmarks = self._landmarks(3)
        graph = build_graph(landmarks, PatchConfig(8, 2), 1, patch_features=features, image_size=(200, 50))
        np.testing.assert_allclose(graph.X[:, 0], [lm.x / 200 for lm in landmarks])
        np.testing.assert_allclose(graph.X[:, 1], [lm.y / 50 for lm in landmarks])

    def test_row_mismatch(self, rng):
        features = FeatureMatrix.from_array(rng.standard_normal((2, 4)))
        with pytest.raises(GraphError, match="rows"):
            build_graph(self._landmarks(3), PatchConfig(8, 4), 1, patch_features=features, image_size=(100, 100))

    def test_image_features(self):
        image = np.arange(64 * 64, dtype=np.float64).reshape(64, 64)
        landmarks = self._landmarks(4, invisible={1})
        feats = node_features(landmarks, image, None, PatchConfig(4, 6))
        assert feats.shape == (4, 6)
        np.testing.assert_array_equal(feats[1], np.zeros(6))
        np.testing.assert_allclose(np.linalg.norm(feats[[0, 2, 3]], axis=1), 1.0)
