import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sarfusion.data_model import Manifest, read_sample
from sarfusion.synthgen import (
    SynthConfig,
    default_signatures,
    generate_dataset,
    generate_layers,
    generate_random_field,
    generate_sample,
)

LOC = (12.5, 41.9)


def lag1(f):
    f = f.astype(np.float64)
    a = np.corrcoef(f[:, :-1].ravel(), f[:, 1:].ravel())[0, 1]
    b = np.corrcoef(f[:-1].ravel(), f[1:].ravel())[0, 1]
    return (a + b) / 2


def test_field_deterministic_and_standardized():
    a = generate_random_field(3, 64, 4.0)
    b = generate_random_field(3, 64, 4.0)
    assert a.dtype == np.float32 and a.tobytes() == b.tobytes()
    assert abs(a.mean()) < 1e-6 and abs(a.std() - 1) < 1e-5
    assert not np.array_equal(a, generate_random_field(4, 64, 4.0))


def test_field_white_noise_limit():
    assert abs(lag1(generate_random_field(0, 256, 0.3))) < 0.1


def test_field_smooth():
    assert lag1(generate_random_field(0, 256, 16.0)) > 0.9


def test_field_rejects_tiny():
    with pytest.raises(ValueError):
        generate_random_field(0, 4, 1.0)


def test_config_validation():
    with pytest.raises(ValueError, match="0.05 apart"):
        SynthConfig(n_classes=2, class_signatures=np.full((2, 14), 0.5))
    with pytest.raises(ValueError):
        SynthConfig(n_classes=251)
    with pytest.raises(ValueError):
        SynthConfig(field_smoothness=0)
    sig = default_signatures(5)
    d = np.linalg.norm(sig[:, None] - sig[None], axis=-1) + np.eye(5) * 9
    assert d.min() >= 0.05


def test_no_cloud_bound():
    cfg = SynthConfig(patch_size=64, cloud_fraction=0.0)
    for i in range(4):
        s = generate_sample(cfg, i, LOC)
        assert s.s2.max() <= cfg.class_signatures[:, :12].max() + 5 * 0.05


def test_speckle_vanishes():
    cfg = SynthConfig(patch_size=64, speckle_looks=10**6)
    lay = generate_layers(cfg, 0, LOC)
    for c in np.unique(lay.true_classes):
        m = lay.true_classes == c
        assert lay.sample.s1[:, m].var(axis=1).max() < 1e-4


def test_speckle_moments():
    cfg = SynthConfig(patch_size=128, speckle_looks=4, label_noise=0.0)
    lay = generate_layers(cfg, 1, LOC)
    ratio = lay.sample.s1 / cfg.class_signatures[lay.true_classes - 1].transpose(2, 0, 1)[12:]
    assert abs(ratio.mean() - 1) < 0.01
    assert abs(ratio.var() - 0.25) < 0.01


def test_marginal_quantiles_match_between_indices():
    cfg = SynthConfig()
    a, b = generate_sample(cfg, 0, LOC), generate_sample(cfg, 1, LOC)
    assert not np.array_equal(a.lc, b.lc)
    fa = np.bincount(a.lc.ravel(), minlength=6)[1:] / a.lc.size
    fb = np.bincount(b.lc.ravel(), minlength=6)[1:] / b.lc.size
    np.testing.assert_allclose(fa, fb, atol=0.02)


def test_clouds_leave_sar_alone():
    clear = SynthConfig(patch_size=32, cloud_fraction=0.0)
    cloudy = SynthConfig(patch_size=32, cloud_fraction=0.9)
    a, b = generate_sample(clear, 2, LOC), generate_sample(cloudy, 2, LOC)
    assert np.array_equal(a.s1, b.s1)
    assert not np.array_equal(a.s2, b.s2)


def test_cloud_fraction_calibrated():
    cfg = SynthConfig(patch_size=32, cloud_fraction=0.3)
    cov = np.mean([(generate_layers(cfg, i, LOC).cloud_opacity > 0).mean() for i in range(400)])
    assert abs(cov - 0.3) < 0.05


def test_signatures_recovered_on_clear_pixels():
    cfg = SynthConfig(patch_size=128, cloud_fraction=0.3, regional_strength=0.0)
    sums = np.zeros((5, 14))
    counts = np.zeros(5)
    for i in range(6):
        lay = generate_layers(cfg, i, LOC)
        clear = lay.cloud_opacity == 0
        x = lay.sample.stacked().astype(np.float64)
        for c in range(1, 6):
            m = clear & (lay.true_classes == c)
            sums[c - 1] += x[:, m].sum(axis=1)
            counts[c - 1] += m.sum()
    seen = counts > 2000
    assert seen.all()
    means = sums[seen] / counts[seen, None]
    np.testing.assert_allclose(means, cfg.class_signatures[seen], atol=0.02)


def test_label_noise_rate_and_neighbors():
    cfg = SynthConfig(patch_size=128, label_noise=0.1)
    lay = generate_layers(cfg, 0, LOC)
    lc, true = lay.sample.lc.astype(int), lay.true_classes.astype(int)
    changed = lc != true
    assert abs(changed.mean() - 0.1) < 0.01
    assert np.all(np.abs(lc - true)[changed] == 1)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), index=st.integers(0, 10**6),
       n_classes=st.integers(1, 8), noise=st.floats(0, 1))
def test_labels_in_range(seed, index, n_classes, noise):
    cfg = SynthConfig(seed=seed, patch_size=16, n_classes=n_classes, label_noise=noise)
    s = generate_sample(cfg, index, LOC)
    assert s.lc.min() >= 1 and s.lc.max() <= n_classes
    s.validate()


def test_dates_within_three_days():
    from datetime import date

    cfg = SynthConfig(patch_size=16)
    gaps = {abs((date.fromisoformat(s.s2_date) - date.fromisoformat(s.s1_date)).days)
            for s in (generate_sample(cfg, i, LOC) for i in range(60))}
    assert max(gaps) <= 3 and len(gaps) > 1


def test_dataset_ids_labels_and_determinism(tmp_path):
    cfg = SynthConfig(seed=9, n_samples=8, patch_size=16)
    locs = np.column_stack([np.linspace(-100, 100, 8), np.linspace(-40, 40, 8)])
    m = generate_dataset(cfg, locs, tmp_path / "a")
    generate_dataset(cfg, locs, tmp_path / "b")
    assert len(set(m.sample_ids)) == 8 and m.created_seed == 9
    loaded = Manifest.load(tmp_path / "a")
    assert all(e.has_label for e in loaded.entries)
    for sid in m.sample_ids:
        assert (tmp_path / "a" / sid / "LC.u8").exists()
        for f in ("S2.f32", "S1.f32", "LC.u8"):
            assert (tmp_path / "a" / sid / f).read_bytes() == (tmp_path / "b" / sid / f).read_bytes()


def test_dataset_location_count(tmp_path):
    with pytest.raises(ValueError, match="n_samples"):
        generate_dataset(SynthConfig(n_samples=3, patch_size=16), [(0, 0)], tmp_path)


def test_unlabeled_dataset(tmp_path):
    cfg = SynthConfig(n_samples=2, patch_size=16, labeled=False)
    m = generate_dataset(cfg, [(0, 0), (1, 1)], tmp_path)
    assert read_sample(tmp_path, m.sample_ids[0]).lc is None


def test_regional_signal():
    # nearby patches share class proportions, antipodes do not
    cfg = SynthConfig(patch_size=64, label_noise=0.0)

    def frac(i, loc):
        return np.bincount(generate_sample(cfg, i, loc).lc.ravel(), minlength=6)[1:] / 64**2

    near = np.abs(frac(0, (10, 20)) - frac(1, (10.3, 20.2))).sum()
    far = np.abs(frac(0, (10, 20)) - frac(1, (-170, -20))).sum()
    assert near < 0.05 < far
