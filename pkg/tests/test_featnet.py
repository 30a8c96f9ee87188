import numpy as np
import pytest

from conftest import directional_fd, rng_for
from faceadv.errors import ContractError
from faceadv.featnet import ARCHITECTURES, DiversityConfig, EnsembleSpec, FeatureExtractor, \
    apply_diversity, diversity_pullback, ensemble_distance, feature_distance_with_grad, \
    load_extractor_spec, sample_crop_offsets, save_extractor_spec


@pytest.fixture(scope="module")
def model_a():
    return FeatureExtractor("A", seed=11, input_size=(32, 32))


def random_image(seed, size=32):
    return rng_for(seed).uniform(0.05, 0.95, size=(size, size, 3))


# ---------------------------------------------------------------------------
# construction


def test_known_architectures_build():
    for arch in ARCHITECTURES:
        net = FeatureExtractor(arch, seed=1, input_size=(16, 16))
        assert net.model_id == f"{arch}-1"


def test_unknown_architecture_rejected():
    with pytest.raises(ContractError):
        FeatureExtractor("Z", seed=1)


def test_input_size_must_cover_stride_chain():
    # D has four stride-2 layers, so 8x8 inputs collapse past empty
    with pytest.raises(ContractError):
        FeatureExtractor("D", seed=1, input_size=(8, 8))


def test_same_seed_same_weights():
    a = FeatureExtractor("B", seed=3, input_size=(16, 16))
    b = FeatureExtractor("B", seed=3, input_size=(16, 16))
    x = random_image(0, 16)
    np.testing.assert_array_equal(a.embed(x), b.embed(x))


def test_different_seed_different_weights():
    a = FeatureExtractor("B", seed=3, input_size=(16, 16))
    b = FeatureExtractor("B", seed=4, input_size=(16, 16))
    x = random_image(0, 16)
    assert not np.array_equal(a.embed(x), b.embed(x))


def test_embedding_shape_and_finite(model_a):
    e = model_a.embed(random_image(1))
    assert e.shape == (128,)
    assert np.all(np.isfinite(e))


def test_query_count_increments(model_a):
    net = FeatureExtractor("A", seed=99, input_size=(16, 16))
    assert net.query_count == 0
    net.embed(random_image(2, 16))
    net.embed(random_image(3, 16))
    assert net.query_count == 2


def test_wrong_input_size_rejected(model_a):
    with pytest.raises(ContractError):
        model_a.embed(random_image(1, 16))


def test_spec_round_trip(tmp_path, model_a):
    path = tmp_path / "spec.json"
    save_extractor_spec(model_a, path)
    net = load_extractor_spec(path)
    x = random_image(4)
    np.testing.assert_array_equal(net.embed(x), model_a.embed(x))


def test_spec_missing_field_rejected(tmp_path, model_a):
    import json
    path = tmp_path / "spec.json"
    save_extractor_spec(model_a, path)
    data = json.loads(path.read_text())
    del data["seed"]
    path.write_text(json.dumps(data))
    with pytest.raises(ContractError):
        load_extractor_spec(path)


# ---------------------------------------------------------------------------
# photometric behavior and gradients


def test_instance_norm_damps_global_brightness_shift(model_a):
    x = random_image(5)
    base = model_a.embed(x)
    shifted = model_a.embed(np.clip(x + 0.1, 0.0, 1.0))
    scaled = model_a.embed(np.clip(x * 1.1, 0.0, 1.0))
    # normalization keeps embeddings close under exposure changes compared
    # with an unrelated image
    other = model_a.embed(random_image(6))
    d_shift = np.linalg.norm(base - shifted)
    d_scale = np.linalg.norm(base - scaled)
    d_other = np.linalg.norm(base - other)
    assert d_shift < 0.5 * d_other
    assert d_scale < 0.5 * d_other


def test_input_gradient_matches_finite_differences_all_architectures():
    for arch in ("A", "B", "C", "D"):
        net = FeatureExtractor(arch, seed=7, input_size=(16, 16))
        rng = rng_for(ord(arch))
        x = rng.uniform(0.1, 0.9, size=(16, 16, 3))
        w = rng.normal(size=128)

        def scalar(z):
            return float(w @ net.embed(z))

        grad = net.input_gradient(x, w)
        worst = 0.0
        for k in range(5):
            v = rng.normal(size=x.shape)
            numeric = directional_fd(scalar, x, v, h=1e-6)
            analytic = float((grad * v).sum())
            scale = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / scale)
        assert worst < 1e-4, f"architecture {arch}: {worst}"


# ---------------------------------------------------------------------------
# distances


def test_l2_distance_value_and_gradient():
    rng = rng_for(8)
    for _ in range(20):
        r = rng.normal(size=16)
        q = rng.normal(size=16)
        d, grad = feature_distance_with_grad(r, q, "l2")
        assert d == pytest.approx(float(np.linalg.norm(q - r)), rel=1e-12)
        v = rng.normal(size=16)
        numeric = directional_fd(lambda z: float(np.linalg.norm(z - r)), q, v)
        assert float(grad @ v) == pytest.approx(numeric, rel=1e-5)


def test_l2_distance_zero_at_same_embedding():
    e = rng_for(9).normal(size=32)
    d, grad = feature_distance_with_grad(e, e.copy(), "l2")
    assert d == 0.0
    assert np.all(grad == 0.0)


def test_cosine_distance_value_and_gradient():
    rng = rng_for(10)
    for _ in range(20):
        r = rng.normal(size=16)
        q = rng.normal(size=16)
        d, grad = feature_distance_with_grad(r, q, "cosine")
        assert 0.0 <= d <= 2.0

        def scalar(z):
            return 1.0 - float(z @ r) / (np.linalg.norm(z) * np.linalg.norm(r))

        v = rng.normal(size=16)
        numeric = directional_fd(scalar, q, v)
        assert float(grad @ v) == pytest.approx(numeric, rel=1e-4, abs=1e-8)


def test_cosine_antiparallel_is_two():
    e = rng_for(11).normal(size=16)
    d, _ = feature_distance_with_grad(e, -e, "cosine")
    assert d == pytest.approx(2.0, rel=1e-12)


def test_cosine_rejects_zero_embedding():
    with pytest.raises(ContractError):
        feature_distance_with_grad(np.zeros(16), np.ones(16), "cosine")
    with pytest.raises(ContractError):
        feature_distance_with_grad(np.ones(16), np.zeros(16), "cosine")


def test_distance_rejects_mismatched_lengths():
    with pytest.raises(ContractError):
        feature_distance_with_grad(np.ones(16), np.ones(8), "l2")


def test_unknown_metric_rejected():
    with pytest.raises(ContractError):
        feature_distance_with_grad(np.ones(16), np.ones(16), "linf")


# ---------------------------------------------------------------------------
# ensembles


def test_ensemble_weights_must_be_convex(model_a):
    b = FeatureExtractor("B", seed=2, input_size=(32, 32))
    with pytest.raises(ContractError):
        EnsembleSpec(members=(model_a, b), weights=(0.8, 0.8))
    with pytest.raises(ContractError):
        EnsembleSpec(members=(model_a, b), weights=(1.2, -0.2))


def test_ensemble_equal_splits_weights(model_a):
    b = FeatureExtractor("B", seed=2, input_size=(32, 32))
    spec = EnsembleSpec.equal((model_a, b))
    assert spec.weights == (0.5, 0.5)
    assert spec.model_ids == ("A-11", "B-2")


def test_ensemble_distance_is_weighted_sum(model_a):
    b = FeatureExtractor("B", seed=2, input_size=(32, 32))
    x = random_image(15)
    target = random_image(16)
    spec = EnsembleSpec(members=(model_a, b), weights=(0.3, 0.7))
    d, grad = ensemble_distance(spec, x, target, "l2")
    da, ga = ensemble_distance(EnsembleSpec(members=(model_a,), weights=(1.0,)), x, target, "l2")
    db, gb = ensemble_distance(EnsembleSpec(members=(b,), weights=(1.0,)), x, target, "l2")
    assert d == pytest.approx(0.3 * da + 0.7 * db, rel=1e-12)
    np.testing.assert_allclose(grad, 0.3 * ga + 0.7 * gb, rtol=1e-10, atol=1e-14)


def test_ensemble_distance_gradient_matches_finite_differences(model_a):
    b = FeatureExtractor("B", seed=2, input_size=(32, 32))
    spec = EnsembleSpec.equal((model_a, b))
    rng = rng_for(23)
    x = random_image(18)
    target = random_image(24)
    _, grad = ensemble_distance(spec, x, target, "l2")
    for _ in range(5):
        v = rng.normal(size=x.shape)
        numeric = directional_fd(lambda z: ensemble_distance(spec, z, target, "l2")[0], x, v)
        analytic = float((grad * v).sum())
        assert analytic == pytest.approx(numeric, rel=1e-4)


# ---------------------------------------------------------------------------
# input diversity


def test_diversity_config_bounds():
    DiversityConfig(max_crop_fraction=0.0)
    DiversityConfig(max_crop_fraction=0.49)
    with pytest.raises(ContractError):
        DiversityConfig(max_crop_fraction=0.5)
    with pytest.raises(ContractError):
        DiversityConfig(max_crop_fraction=-0.1)


def test_sample_crop_offsets_within_budget():
    cfg = DiversityConfig(max_crop_fraction=0.07)
    rng = rng_for(19)
    seen_nonzero = False
    for _ in range(100):
        offsets = sample_crop_offsets((32, 32), cfg, rng)
        for v in offsets:
            assert 0 <= v <= int(0.07 * 32)
        seen_nonzero = seen_nonzero or any(v > 0 for v in offsets)
    assert seen_nonzero


def test_sample_crop_offsets_disabled_gives_zeros():
    cfg = DiversityConfig(enabled=False, max_crop_fraction=0.07)
    assert sample_crop_offsets((32, 32), cfg, rng_for(20)) == (0, 0, 0, 0)


def test_apply_diversity_zero_offsets_identity():
    x = random_image(20)
    np.testing.assert_array_equal(apply_diversity(x, (0, 0, 0, 0)), x)


def test_apply_diversity_preserves_shape():
    x = random_image(21)
    out = apply_diversity(x, (1, 2, 0, 1))
    assert out.shape == x.shape
    assert np.all(np.isfinite(out))


def test_diversity_pullback_is_exact_adjoint():
    # <A x, y> == <x, A^T y> for the resize operator and its pullback
    rng = rng_for(22)
    shape = (32, 32, 3)
    for trial in range(20):
        offsets = tuple(int(v) for v in rng.integers(0, 3, size=4))
        x = rng.normal(size=shape)
        y = rng.normal(size=shape)
        lhs = float((apply_diversity(x, offsets) * y).sum())
        rhs = float((x * diversity_pullback(y, offsets, shape)).sum())
        assert lhs == pytest.approx(rhs, rel=1e-10)


def test_diversity_pullback_zero_outside_crop():
    y = np.ones((16, 16, 3))
    back = diversity_pullback(y, (2, 3, 1, 2), (16, 16, 3))
    assert np.all(back[:2] == 0.0)
    assert np.all(back[-3:] == 0.0)
    assert np.all(back[:, :1] == 0.0)
    assert np.all(back[:, -2:] == 0.0)
