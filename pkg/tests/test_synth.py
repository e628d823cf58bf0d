import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rockgpt.errors import ConfigurationError, GeometryError
from rockgpt.io import read_rvox
from rockgpt.morphology import fit_correlation_length, two_point_correlation
from rockgpt.pipeline import load_manifest
from rockgpt.synth import (ClassSpec, SynthSpec, gaussian_field, gaussian_kernel, make_dataset, make_volume,
                           threshold_to_porosity)


def mean_length(v):
    return np.mean([fit_correlation_length(two_point_correlation(v, a)).length for a in range(3)])


def test_kernel_normalized_and_truncated():
    k = gaussian_kernel(1.5)
    assert len(k) == 2 * 6 + 1
    assert k.sum() == pytest.approx(1.0, abs=1e-15)
    assert np.array_equal(k, k[::-1])


def test_tiny_sigma_gives_standardized_white_noise():
    spec = SynthSpec((6, 5, 4), 0.05, 0.3, seed=3)
    rng = np.random.Generator(np.random.PCG64(3))
    raw = rng.standard_normal((6, 5, 4))
    np.testing.assert_allclose(gaussian_field(spec), (raw - raw.mean()) / raw.std(), atol=1e-12)


def test_field_standardized_and_deterministic():
    spec = SynthSpec((16, 16, 16), 2.0, 0.3, seed=1)
    f = gaussian_field(spec)
    assert abs(f.mean()) < 1e-12 and f.std() == pytest.approx(1.0, abs=1e-12)
    assert np.array_equal(f, gaussian_field(spec))
    assert not np.array_equal(f, gaussian_field(SynthSpec((16, 16, 16), 2.0, 0.3, seed=2)))


def test_field_autocorrelation_decays():
    s = 2
    f = gaussian_field(SynthSpec((32, 32, 32), s, 0.3, seed=0))
    near = np.mean(f * np.roll(f, s, 0))
    far = np.mean(f * np.roll(f, 4 * s, 0))
    assert near > far


def test_field_geometry_and_spec_errors():
    with pytest.raises(GeometryError):
        gaussian_field(SynthSpec((8, 32, 32), 2.5, 0.3))
    with pytest.raises(ConfigurationError):
        SynthSpec(sigma=0.0)
    with pytest.raises(ConfigurationError):
        SynthSpec(porosity=1.0)
    with pytest.raises(ConfigurationError):
        threshold_to_porosity(np.zeros(3), 0.0)


def test_threshold_canonical():
    assert threshold_to_porosity(np.array([0.1, 0.7]), 0.5).tolist() == [0, 1]
    assert threshold_to_porosity(np.arange(27.0).reshape(3, 3, 3), 1 / 27).sum() == 1
    # ties go to the earlier voxel in raster order
    assert threshold_to_porosity(np.zeros(4), 0.5).tolist() == [1, 1, 0, 0]


@given(seed=st.integers(0, 2**32 - 1), phi=st.floats(0.01, 0.99), n=st.integers(1, 200))
@settings(max_examples=60)
def test_threshold_porosity_exact(seed, phi, n):
    field = np.random.default_rng(seed).standard_normal(n)
    out = threshold_to_porosity(field, phi)
    assert out.sum() == int(np.floor(phi * n + 0.5))
    if 0 < out.sum() < n:
        assert field[out == 1].min() >= field[out == 0].max()


def test_fitted_length_increases_with_sigma():
    means = [np.mean([mean_length(make_volume(SynthSpec((32, 32, 32), s, 0.3, seed)).data) for seed in range(10)])
             for s in (1.0, 1.75, 2.5)]
    assert means[0] < means[1] < means[2]


def test_two_class_lengths_separate(tmp_path):
    classes = [ClassSpec("fine", 1.0, 20, shape=(24, 24, 24)), ClassSpec("coarse", 2.5, 20, shape=(24, 24, 24))]
    man = make_dataset(classes, 0, tmp_path)
    lams = {0: [], 1: []}
    for e in man["volumes"]:
        lams[e["label"]].append(mean_length(read_rvox(tmp_path / e["path"]).data))
    a, b = np.array(lams[0]), np.array(lams[1])
    pooled_se = np.sqrt(a.var(ddof=1) / len(a) + b.var(ddof=1) / len(b))
    assert b.mean() - a.mean() > 3 * pooled_se


def test_dataset_manifest_and_porosity_range(tmp_path):
    man = make_dataset([ClassSpec("a", 1.0, 4, (0.2, 0.3), (16, 8, 8)), ClassSpec("b", 2.0, 3, shape=(16, 8, 8))],
                       5, tmp_path, test_fraction=0.25)
    on_disk = json.loads((tmp_path / "manifest.json").read_text())
    assert on_disk == man
    assert man["rng"] == "PCG64" and man["classes"] == ["a", "b"]
    assert [e["label"] for e in man["volumes"]] == [0] * 4 + [1] * 3
    for e in man["volumes"]:
        n = 16 * 8 * 8
        assert e["porosity"] == np.floor(e["target_porosity"] * n + 0.5) / n
    assert all(0.2 <= e["target_porosity"] < 0.3 for e in man["volumes"][:4])


def test_dataset_byte_identical_rerun(tmp_path):
    classes = [ClassSpec("a", 1.0, 2, shape=(16, 8, 8)), ClassSpec("b", 2.0, 2, shape=(16, 8, 8))]
    make_dataset(classes, 9, tmp_path / "one")
    make_dataset(classes, 9, tmp_path / "two")
    names = sorted(p.name for p in (tmp_path / "one").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "two").iterdir())
    for n in names:
        assert (tmp_path / "one" / n).read_bytes() == (tmp_path / "two" / n).read_bytes()


def test_empty_dataset_is_valid(tmp_path):
    man = make_dataset([ClassSpec("a", 1.0, 0), ClassSpec("b", 2.0, 0)], 0, tmp_path)
    assert man["volumes"] == []
    assert load_manifest(tmp_path / "manifest.json")["volumes"] == []
