import math

import numpy as np
import pytest

import voxmae


def test_volume_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    a = rng.random((4, 5, 6), dtype=np.float32)
    path = tmp_path / "v.tvol"
    voxmae.write_volume(path, a, (0.5, 1.0, 2.0))
    b, spacing, unit = voxmae.read_volume(path)
    assert b.shape == (4, 5, 6)
    np.testing.assert_array_equal(a, b)
    assert spacing == pytest.approx([0.5, 1.0, 2.0])
    assert unit == "normalized"


def test_missing_volume_raises_oserror(tmp_path):
    with pytest.raises(OSError):
        voxmae.read_volume(tmp_path / "absent.tvol")


def test_resample_and_normalize():
    a = np.full((8, 8, 8), 200.0, dtype=np.float32)
    r = voxmae.resample(a, (4, 6, 10))
    assert r.shape == (10, 6, 4)
    np.testing.assert_allclose(r, 200.0)
    n = voxmae.clip_normalize(np.array([[[-2000.0, -1200.0, 0.0, 600.0, 900.0]]], dtype=np.float32))
    np.testing.assert_allclose(n.ravel(), [0.0, 0.0, 0.6, 0.9, 1.0], rtol=1e-6)


def test_patch_roundtrip_is_exact():
    a = np.random.default_rng(1).random((16, 16, 16), dtype=np.float32)
    tokens = voxmae.patchify(a, 8)
    assert tokens.shape == (8, 512)
    np.testing.assert_array_equal(voxmae.roundtrip_patches(a, 8), a)


def test_random_mask_is_a_permutation():
    shuffle, restore, n_visible = voxmae.random_mask(64, 0.75, 7)
    assert n_visible == 16
    assert sorted(shuffle) == list(range(64))
    assert [shuffle[restore[i]] for i in range(64)] == list(range(64))


def test_synthetic_masks_match_labels():
    vols, labels, masks = voxmae.synthetic(n=6, dims=(16, 16, 16), seed=2, radius_lo=2, radius_hi=3)
    assert len(vols) == len(labels) == len(masks) == 6
    for y, m in zip(labels, masks):
        assert (m.sum() > 0) == bool(y)


def test_metrics():
    assert voxmae.auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)
    with pytest.raises(ArithmeticError):
        voxmae.auroc([0.1, 0.2], [1, 1])
    agg = voxmae.aggregate_seeds([0.9, 0.9, 0.9])
    assert agg["mean"] == pytest.approx(0.9)
    assert agg["std"] == 0.0
    t, df, p = voxmae.t_test([1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 4.0])
    assert p == pytest.approx(1.0)
    assert voxmae.bonferroni([0.01, 0.04], 3) == pytest.approx([0.03, 0.12])
    assert voxmae.binary_entropy(0.5) == pytest.approx(math.log(2))


def test_ledger_and_parameter_count():
    kwh, kg = voxmae.energy_ledger()
    assert kwh == pytest.approx(720.0)
    assert kg == pytest.approx(288.0)
    tiny = voxmae.count_parameters(patch_size=8, input_dims=(32, 32, 32), embed_dim=48, depth=2, heads=4,
                                   decoder_dim=24, decoder_depth=1, decoder_heads=2)
    assert 0 < tiny < voxmae.count_parameters(include_decoder=True, patch_size=8, input_dims=(32, 32, 32),
                                              embed_dim=48, depth=2, heads=4, decoder_dim=24,
                                              decoder_depth=1, decoder_heads=2)
    with pytest.raises(ValueError):
        voxmae.count_parameters(embed_dims=4)


def test_cli_in_process(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[synth]\ndims = 16\nn_volumes = 6\nlesion_radius_lo = 2\nlesion_radius_hi = 3\n")
    code, out, err = voxmae.cli(["synth", "--config", str(cfg), "--out", str(tmp_path / "s")])
    assert code == 0, err
    assert (tmp_path / "s" / "manifest.tsv").exists()
    code, _, _ = voxmae.cli(["no-such-command"])
    assert code == 2
