import hashlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pupet import artifacts, datatype as dt, ingest
from pupet.models import Generator, OffsetMechanism, identity_generator

SCHEMA = dt.DatasetSchema.build(
    [{"name": "a", "kind": "numeric"}, {"name": "b", "kind": "numeric"},
     {"name": "c", "kind": "categorical", "vocabulary": ["x", "y", "z"]}],
    {"name": "p", "classes": ["0", "1"]}, {"name": "u", "classes": ["0", "1"]})


def batch(n=40, width=5, seed=0):
    rng = np.random.default_rng(seed)
    return dt.RecordBatch(rng.normal(size=(n, width)), rng.integers(0, 2, n), rng.integers(0, 2, n))


def gen_hash(gen: Generator) -> str:
    h = hashlib.sha256()
    for p in gen.parameters():
        h.update(p.data.tobytes())
    return h.hexdigest()


def test_zero_encoder_maps_to_origin(tmp_path):
    gen = Generator.build(5, 2, 2, np.random.default_rng(0), latent_dim=2, hidden=(8,))
    for p in gen.encoder.parameters():
        p.data[...] = 0.0
    rows = artifacts.export_latents(gen, batch(), tmp_path / "z.csv")
    assert np.all(rows[:, :2] == 0.0)
    np.testing.assert_array_equal(artifacts.read_latents(tmp_path / "z.csv"), rows)


def test_latent_rows_equal_batch_size_and_labels():
    b = batch(n=37)
    gen = Generator.build(5, 2, 2, np.random.default_rng(1), latent_dim=2, hidden=(8,))
    rows = artifacts.export_latents(gen, b)
    assert rows.shape == (37, 3)
    np.testing.assert_array_equal(rows[:, 2], b.xp)


@pytest.mark.parametrize("d", [1, 3, 8])
def test_latent_export_needs_d2(d):
    gen = Generator.build(5, 2, 2, np.random.default_rng(0), latent_dim=d, hidden=(8,))
    with pytest.raises(ValueError, match="latent_dim == 2"):
        artifacts.export_latents(gen, batch())


def test_probe_separates_separable_latents():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 2, 400)
    z = rng.normal(size=(400, 2)) * 0.3 + labels[:, None] * 3.0
    rows = np.column_stack([z, labels])
    assert artifacts.latent_probe_accuracy(rows[:300], rows[300:]) > 0.97
    shuffled = np.column_stack([z, rng.permutation(labels)])
    assert artifacts.latent_probe_accuracy(shuffled[:300], shuffled[300:]) < 0.65


def test_identity_distortion_is_zero_spike():
    gen = identity_generator(5, 2, 2)
    s = artifacts.export_distortion(gen, batch(), SCHEMA, bins=10)
    assert s.columns == ["a", "b"]
    assert np.all(s.diffs == 0.0)
    for counts, m in zip(s.counts, s.moments):
        assert sorted(counts)[-1] == 40 and sum(counts) == 40  # all mass in one bin
        assert m == (0.0, 0.0, 0.0)


def test_offset_distortion_moments():
    s = artifacts.export_distortion(OffsetMechanism(0.3), batch(), SCHEMA)
    for mean, var, _ in s.moments:
        assert mean == pytest.approx(0.3, abs=1e-12)
        assert var == pytest.approx(0.0, abs=1e-20)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=2, max_size=60))
def test_moments_match_recompute(values):
    v = np.array(values)
    mean, var, skew = artifacts.moments(v)
    n = len(values)
    m = sum(values) / n
    c2 = sum((x - m) ** 2 for x in values) / n
    c3 = sum((x - m) ** 3 for x in values) / n
    assert mean == pytest.approx(m, rel=1e-9, abs=1e-9)
    assert var == pytest.approx(c2, rel=1e-7, abs=1e-9)
    if c2 > 1e-6:
        assert skew == pytest.approx(c3 / c2 ** 1.5, rel=1e-6, abs=1e-6)


def test_histogram_counts_and_files(tmp_path):
    rng = np.random.default_rng(3)
    gen = Generator.build(5, 2, 2, rng, latent_dim=3, hidden=(8,), blocks=SCHEMA.categorical_blocks)
    s = artifacts.export_distortion(gen, batch(n=50), SCHEMA, bins=7, rng=rng)
    assert all(sum(c) == 50 and len(e) == 8 for c, e in zip(s.counts, s.edges))
    artifacts.write_distortion(s, tmp_path)
    lines = (tmp_path / "distortion_hist.csv").read_text().splitlines()
    assert lines[0] == "feature,bin,left,right,count" and len(lines) == 1 + 2 * 7
    moments = (tmp_path / "distortion_moments.csv").read_text().splitlines()
    assert float(moments[1].split(",")[1]) == s.moments[0][0]


def test_csv_numbers_use_decimal_point(tmp_path):
    artifacts.write_distortion(artifacts.export_distortion(OffsetMechanism(0.25), batch(), SCHEMA), tmp_path)
    lines = (tmp_path / "distortion_moments.csv").read_text().splitlines()
    assert lines[0] == "feature,mean,variance,skew"
    for line in lines[1:]:
        name, *nums = line.split(",")
        assert len(nums) == 3  # a comma decimal separator would split fields
        assert all(float(v) == float(v) for v in nums)
        assert float(nums[0]) == pytest.approx(0.25, abs=1e-12)


def test_samples_clamped_and_round_trip(tmp_path):
    schema = ingest.image_schema("mnist", 16)
    rng = np.random.default_rng(0)
    b = dt.RecordBatch(rng.uniform(-0.2, 1.2, (9, 16)), rng.integers(0, 2, 9), rng.integers(0, 2, 9))
    gen = Generator.build(16, 2, 2, rng, latent_dim=3, hidden=(8,), output="sigmoid")
    orig, priv = artifacts.export_samples(gen, b, schema, tmp_path / "s.csv", rng)
    assert orig.shape == priv.shape == (9, 16)
    assert orig.min() >= 0.0 and orig.max() <= 1.0 and priv.min() >= 0.0 and priv.max() <= 1.0
    o2, p2 = artifacts.read_samples(tmp_path / "s.csv")
    np.testing.assert_array_equal(o2, orig)
    np.testing.assert_array_equal(p2, priv)


def test_samples_need_image_schema():
    with pytest.raises(ValueError, match="image schema"):
        artifacts.export_samples(identity_generator(5, 2, 2), batch(), SCHEMA)


def test_exports_do_not_touch_the_model(tmp_path):
    rng = np.random.default_rng(0)
    gen = Generator.build(5, 2, 2, rng, latent_dim=2, hidden=(8,), blocks=SCHEMA.categorical_blocks)
    before = gen_hash(gen)
    artifacts.export_latents(gen, batch(), tmp_path / "z.csv")
    artifacts.write_distortion(artifacts.export_distortion(gen, batch(), SCHEMA, rng=rng), tmp_path)
    assert gen_hash(gen) == before
