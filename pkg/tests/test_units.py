import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from valtiming.audio import FeatureSequence, Waveform, extract_mfcc
from valtiming.encoder import feature_length
from valtiming.units import (
    KMeansModel,
    UnitError,
    UnitSequence,
    align_units,
    assign_units,
    fit_kmeans,
)


def plain_lloyd(points, init, iters=1000):
    """Textbook Lloyd iteration, written independently of fit_kmeans."""
    centroids = np.array(init, dtype=float)
    for _ in range(iters):
        labels = np.array([min(range(len(centroids)), key=lambda c: np.sum((p - centroids[c]) ** 2)) for p in points])
        new = np.array([points[labels == c].mean(axis=0) for c in range(len(centroids))])
        if np.allclose(new, centroids, atol=0, rtol=0):
            break
        centroids = new
    return centroids


def two_blobs(seed=0, n=60):
    rng = np.random.default_rng(seed)
    a = rng.normal([0.0, 0.0], 0.3, size=(n, 2))
    b = rng.normal([8.0, 5.0], 0.3, size=(n, 2))
    return np.concatenate([a, b])


def test_single_cluster_is_mean():
    x = np.random.default_rng(0).standard_normal((50, 3))
    model = fit_kmeans(x, K=1, seed=1)
    np.testing.assert_allclose(model.centroids[0], x.mean(axis=0), atol=1e-12)
    assert (assign_units(model, FeatureSequence(x)).units == 0).all()


def test_one_point_per_cluster_has_zero_inertia():
    x = np.random.default_rng(1).standard_normal((12, 4))
    model = fit_kmeans(x, K=12, seed=3)
    assert model.inertia == 0.0


def test_two_blobs_match_lloyd_oracle():
    x = two_blobs()
    model = fit_kmeans(x, K=2, seed=42)
    oracle = plain_lloyd(x, [x[0], x[-1]])
    ours = model.centroids[np.argsort(model.centroids[:, 0])]
    theirs = oracle[np.argsort(oracle[:, 0])]
    np.testing.assert_allclose(ours, theirs, atol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_inertia_never_increases(seed):
    x = np.random.default_rng(seed).standard_normal((400, 5))
    model = fit_kmeans(x, K=8, seed=seed)
    hist = np.array(model.history)
    assert len(hist) >= 2
    assert np.all(np.diff(hist) <= 1e-12 * hist[:-1])
    assert model.inertia >= 0


def test_fit_is_deterministic():
    x = np.random.default_rng(5).standard_normal((300, 3))
    a = fit_kmeans(x, K=6, seed=9)
    b = fit_kmeans(x, K=6, seed=9)
    assert a.centroids.tobytes() == b.centroids.tobytes()


def test_too_few_frames():
    with pytest.raises(UnitError):
        fit_kmeans(np.zeros((3, 2)), K=4)


def test_empty_cluster_reseeded():
    # duplicated points force collapsing seeds; every centroid must stay finite
    x = np.concatenate([np.zeros((20, 2)), np.ones((20, 2)), [[5.0, 5.0]]])
    model = fit_kmeans(x, K=3, seed=0)
    assert np.isfinite(model.centroids).all()
    assert model.inertia == pytest.approx(0.0)


def test_subsampling_cap():
    x = np.random.default_rng(2).standard_normal((500, 2))
    model = fit_kmeans(x, K=3, seed=0, max_frames=100)
    assert model.K == 3


def test_assign_exact_centroid():
    centroids = np.arange(15, dtype=float).reshape(5, 3)
    model = KMeansModel(centroids)
    assert assign_units(model, FeatureSequence(centroids[3:4])).units.tolist() == [3]


def test_assign_tie_goes_to_lowest_index():
    centroids = np.array([[10.0, 10.0], [1.0, 0.0], [20.0, 20.0], [30.0, 30.0], [-1.0, 0.0]])
    model = KMeansModel(centroids)
    assert assign_units(model, FeatureSequence([[0.0, 0.0]])).units.tolist() == [1]


def test_assign_matches_brute_force():
    rng = np.random.default_rng(7)
    model = KMeansModel(rng.standard_normal((9, 4)))
    frames = rng.standard_normal((200, 4))
    brute = [int(np.argmin([np.sum((f - c) ** 2) for c in model.centroids])) for f in frames]
    assert assign_units(model, FeatureSequence(frames)).units.tolist() == brute


def test_centroids_as_frames_map_to_identity():
    model = KMeansModel(np.random.default_rng(8).standard_normal((10, 3)))
    assert assign_units(model, FeatureSequence(model.centroids)).units.tolist() == list(range(10))


def test_assign_dimension_mismatch():
    with pytest.raises(UnitError):
        assign_units(KMeansModel(np.zeros((2, 3))), FeatureSequence(np.zeros((4, 2))))


def test_align_identity():
    u = UnitSequence(np.arange(7))
    assert align_units(u, 7).units.tolist() == list(range(7))


def test_align_downsample_by_two():
    assert align_units(UnitSequence(np.arange(10)), 5).units.tolist() == [0, 2, 4, 6, 8]


def test_align_identity_at_one_second():
    w = Waveform(np.random.default_rng(0).standard_normal(16000) * 0.1)
    mfcc = extract_mfcc(w)
    model = fit_kmeans(mfcc.frames, K=5, seed=0)
    units = assign_units(model, mfcc)
    target = feature_length(16000)
    assert target == len(units) == 98
    assert np.array_equal(align_units(units, target).units, units.units)


@settings(max_examples=60, deadline=None)
@given(T=st.integers(1, 60), target=st.integers(1, 120), K=st.integers(1, 9), seed=st.integers(0, 1000))
def test_align_properties(T, target, K, seed):
    u = UnitSequence(np.random.default_rng(seed).integers(0, K, T))
    out = align_units(u, target)
    assert len(out) == target
    assert out.units.max() < K
    assert out.units[0] == u.units[0]


def test_align_rejects_empty():
    with pytest.raises(UnitError):
        align_units(UnitSequence(np.array([], dtype=int)), 3)


def test_kmeans_file_round_trip(tmp_path):
    model = KMeansModel(np.random.default_rng(4).standard_normal((6, 13)), inertia=3.5)
    model.save(tmp_path / "k.bin")
    blob = (tmp_path / "k.bin").read_bytes()
    assert blob[:4] == b"VTKM"
    back = KMeansModel.load(tmp_path / "k.bin")
    assert back.centroids.tobytes() == model.centroids.tobytes()
    assert back.inertia == 3.5


def test_kmeans_file_rejects_bad_magic(tmp_path):
    (tmp_path / "k.bin").write_bytes(b"XXXX" + b"\0" * 40)
    with pytest.raises(UnitError):
        KMeansModel.load(tmp_path / "k.bin")
