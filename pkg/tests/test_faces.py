import numpy as np

from faceadv.faces import attack_pairs, eyeglass_mask, identity_photos, synth_face


def test_synth_face_shape_and_range():
    img = synth_face(3)
    assert img.shape == (64, 64, 3)
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_synth_face_custom_size():
    assert synth_face(3, size=112).shape == (112, 112, 3)


def test_synth_face_deterministic():
    a = synth_face(9, photo_seed=4)
    b = synth_face(9, photo_seed=4)
    np.testing.assert_array_equal(a, b)


def test_synth_face_identity_changes_image():
    a = synth_face(1)
    b = synth_face(2)
    assert np.abs(a - b).max() > 0.01


def test_synth_face_photo_seed_jitters_same_identity():
    a = synth_face(1, photo_seed=10)
    b = synth_face(1, photo_seed=11)
    assert not np.array_equal(a, b)
    # jitters are small relative to switching identity
    assert np.abs(a - b).mean() < np.abs(a - synth_face(2, photo_seed=10)).mean() * 3


def test_canonical_face_has_dark_pupils_and_highlight():
    img = synth_face(5)
    assert img.min() == 0.0
    assert img.max() == 1.0


def test_identity_photos_count_and_canonical_first():
    photos = identity_photos(7, n_photos=4)
    assert len(photos) == 4
    np.testing.assert_array_equal(photos[0], synth_face(7))


def test_identity_photos_are_distinct():
    photos = identity_photos(7, n_photos=3)
    assert not np.array_equal(photos[1], photos[2])


def test_attack_pairs_distinct_identities():
    pairs = attack_pairs(n_pairs=6, master_seed=0)
    assert len(pairs) == 6
    for source, target in pairs:
        assert source.shape == target.shape == (64, 64, 3)
        assert not np.array_equal(source, target)


def test_attack_pairs_seeded():
    a = attack_pairs(n_pairs=3, master_seed=5)
    b = attack_pairs(n_pairs=3, master_seed=5)
    for (s1, t1), (s2, t2) in zip(a, b):
        np.testing.assert_array_equal(s1, s2)
        np.testing.assert_array_equal(t1, t2)


def test_attack_pairs_respects_size():
    pairs = attack_pairs(n_pairs=2, master_seed=1, size=32)
    assert pairs[0][0].shape == (32, 32, 3)


def test_attack_pairs_zero_count_gives_empty_list():
    assert attack_pairs(n_pairs=0, master_seed=0) == []


def test_eyeglass_mask_shape_and_values():
    mask = eyeglass_mask(64)
    assert mask.shape == (64, 64)
    assert set(np.unique(mask)) <= {0.0, 1.0}


def test_eyeglass_mask_covers_eye_region_only():
    mask = eyeglass_mask(64)
    frac = mask.mean()
    assert 0.02 < frac < 0.35
    # everything sits in the upper half of the face
    assert mask[44:, :].sum() == 0.0


def test_eyeglass_mask_symmetric_lenses():
    mask = eyeglass_mask(64)
    np.testing.assert_array_equal(mask, mask[:, ::-1])
