import numpy as np
import pytest

from qtstream.datagen import (
    ChangeSpec,
    CsvLaw,
    GaussianLaw,
    MeanShift,
    RandomShift,
    StreamSpec,
    UniformLaw,
    gaussian_change_mean_shift,
    generate_array,
    generate_stream,
    ingest_csv,
    load_spec,
    spec_from_dict,
)
from qtstream.errors import CsvParseError, StreamExhaustedError, ZeroVarianceError


def gaussian_skl(m0, m1, cov):
    # symmetric KL between equal-covariance Gaussians, straight from the
    # definition via the precision matrix
    v = np.asarray(m1) - np.asarray(m0)
    return float(v @ np.linalg.solve(cov, v))


class TestMeanShift:
    def test_identity_covariance_magnitude(self):
        m1 = gaussian_change_mean_shift(np.zeros(2), np.eye(2), 1.0, 0)
        assert np.linalg.norm(m1) == pytest.approx(1.0, rel=1e-12)
        m4 = gaussian_change_mean_shift(np.zeros(2), np.eye(2), 4.0, 0)
        assert np.linalg.norm(m4) == pytest.approx(2.0, rel=1e-12)

    def test_exact_divergence_random_triples(self):
        rng = np.random.default_rng(0)
        for trial in range(100):
            d = int(rng.integers(1, 9))
            mean = rng.standard_normal(d)
            a = rng.standard_normal((d, d))
            cov = a @ a.T + d * np.eye(d)
            target = float(rng.uniform(0.05, 10.0))
            m1 = gaussian_change_mean_shift(mean, cov, target, trial)
            assert gaussian_skl(mean, m1, cov) == pytest.approx(target, rel=1e-9)

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            gaussian_change_mean_shift(np.zeros(2), np.eye(2), 0.0, 0)
        with pytest.raises(ValueError):
            gaussian_change_mean_shift(np.zeros(2), np.eye(2), -1.0, 0)
        with pytest.raises(ValueError):
            gaussian_change_mean_shift(np.zeros(2), -np.eye(2), 1.0, 0)  # not SPD


class TestLaws:
    def test_gaussian_moments(self):
        cov = np.array([[2.0, 0.5], [0.5, 1.0]])
        law = GaussianLaw(np.array([1.0, -1.0]), cov)
        xs = law.sample(200_000, np.random.default_rng(1))
        assert np.allclose(xs.mean(axis=0), [1.0, -1.0], atol=0.02)
        assert np.allclose(np.cov(xs, rowvar=False), cov, atol=0.03)

    def test_uniform_box(self):
        law = UniformLaw(np.array([0.0, -1.0]), np.array([1.0, 1.0]))
        xs = law.sample(10_000, np.random.default_rng(2))
        assert xs.min(axis=0) == pytest.approx([0.0, -1.0], abs=0.01)
        assert xs.max(axis=0) == pytest.approx([1.0, 1.0], abs=0.01)
        with pytest.raises(ValueError):
            UniformLaw(np.array([0.0]), np.array([0.0]))

    def test_csv_law_without_replacement(self):
        data = np.arange(20, dtype=float).reshape(10, 2)
        law = CsvLaw(data=data, sampling_seed=0)
        a = law.sample(4, np.random.default_rng(0))
        b = law.sample(6, np.random.default_rng(0))
        seen = np.concatenate([a, b])
        assert len(np.unique(seen[:, 0])) == 10  # all rows, no repeats
        with pytest.raises(StreamExhaustedError):
            law.sample(1, np.random.default_rng(0))
        law.reset()
        again = law.sample(4, np.random.default_rng(0))
        assert np.array_equal(a, again)


class TestStreamSpec:
    def base_spec(self, **over):
        kw = dict(
            d=2,
            phi0=GaussianLaw(np.zeros(2), np.eye(2)),
            length=100,
            seed=7,
        )
        kw.update(over)
        return StreamSpec(**kw)

    def test_identical_specs_identical_bytes(self):
        spec = self.base_spec(change=ChangeSpec(tau=50, transform=MeanShift(1.0)))
        a = generate_array(spec)
        b = generate_array(self.base_spec(change=ChangeSpec(tau=50, transform=MeanShift(1.0))))
        assert np.array_equal(a, b)
        assert a.shape == (100, 2)

    def test_iterator_matches_array(self):
        spec = self.base_spec()
        assert np.array_equal(np.array(list(generate_stream(spec))), generate_array(spec))

    def test_prefix_unchanged_by_change_point(self):
        plain = generate_array(self.base_spec())
        changed = generate_array(
            self.base_spec(change=ChangeSpec(tau=50, transform=MeanShift(4.0)))
        )
        assert np.array_equal(plain[:49], changed[:49])
        assert not np.array_equal(plain[49:], changed[49:])

    def test_tau_one_shifts_everything(self):
        spec = self.base_spec(change=ChangeSpec(tau=1, transform=MeanShift(9.0)))
        xs = generate_array(spec)
        # |shift| = 3 for identity covariance; the sample mean moves with it
        assert np.linalg.norm(xs.mean(axis=0)) > 1.5

    def test_post_change_marginal_moves(self):
        # many independent streams: the one-sample marginal at tau jumps
        shifts = []
        for seed in range(500):
            spec = self.base_spec(
                seed=seed, change=ChangeSpec(tau=50, transform=MeanShift(9.0))
            )
            xs = generate_array(spec)
            shifts.append(np.linalg.norm(xs[49]) - np.linalg.norm(xs[48]))
        # E|x_tau| ~ 3 vs E|x_{tau-1}| ~ 1.25 in d=2
        assert np.mean(shifts) > 1.0

    def test_explicit_phi1(self):
        phi1 = GaussianLaw(np.full(2, 10.0), np.eye(2))
        spec = self.base_spec(change=ChangeSpec(tau=50, phi1=phi1))
        xs = generate_array(spec)
        assert np.all(xs[49:].mean(axis=0) > 5)

    def test_validation(self):
        with pytest.raises(ValueError):
            self.base_spec(change=ChangeSpec(tau=100, transform=MeanShift(1.0)))
        with pytest.raises(ValueError):
            ChangeSpec(tau=0, transform=MeanShift(1.0))
        with pytest.raises(ValueError):
            ChangeSpec(tau=5)  # neither phi1 nor transform
        with pytest.raises(ValueError):
            ChangeSpec(tau=5, phi1=GaussianLaw(np.zeros(2), np.eye(2)),
                       transform=MeanShift(1.0))
        with pytest.raises(ValueError):
            self.base_spec(d=3)  # phi0 dimension mismatch

    def test_mean_shift_requires_gaussian(self):
        spec_kw = dict(
            d=2,
            phi0=UniformLaw(np.zeros(2), np.ones(2)),
            length=100,
            seed=0,
            change=ChangeSpec(tau=10, transform=MeanShift(1.0)),
        )
        with pytest.raises(ValueError, match="Gaussian"):
            generate_array(StreamSpec(**spec_kw))

    def test_random_shift_on_gaussian(self):
        spec = self.base_spec(change=ChangeSpec(tau=50, transform=RandomShift(scale=2.0)))
        a = generate_array(spec)
        b = generate_array(spec)
        assert np.array_equal(a, b)
        assert a.shape == (100, 2)

    def test_csv_stream_disjoint_segments(self):
        data = np.random.default_rng(3).standard_normal((50, 2))
        law = CsvLaw(data=data, sampling_seed=5)
        spec = StreamSpec(d=2, phi0=law, length=30, seed=1)
        xs = generate_array(spec)
        # repeated generation resets the cursor: identical output
        assert np.array_equal(xs, generate_array(spec))


class TestIngestion:
    def write(self, tmp_path, text, name="data.csv"):
        p = tmp_path / name
        p.write_text(text)
        return p

    def test_header_autodetected(self, tmp_path):
        p = self.write(tmp_path, "a,b\n1,2\n3,4\n5,6\n")
        ds = ingest_csv(p, standardize=False, jitter_sigma=0)
        assert ds.data.shape == (3, 2)
        assert ds.data[0, 0] == 1.0

    def test_headerless(self, tmp_path):
        p = self.write(tmp_path, "1,2\n3,4\n")
        assert ingest_csv(p, standardize=False, jitter_sigma=0).n_rows == 2

    def test_standardization(self, tmp_path):
        rng = np.random.default_rng(4)
        raw = rng.standard_normal((200, 3)) * [5, 1, 0.1] + [10, -3, 0]
        p = self.write(tmp_path, "\n".join(",".join(map(str, r)) for r in raw))
        ds = ingest_csv(p, standardize=True, jitter_sigma=0)
        assert np.allclose(ds.data.mean(axis=0), 0, atol=1e-9)
        assert np.allclose(ds.data.std(axis=0), 1, atol=1e-9)

    def test_zero_variance_column(self, tmp_path):
        p = self.write(tmp_path, "1,7\n2,7\n3,7\n")
        with pytest.raises(ZeroVarianceError, match="column 1"):
            ingest_csv(p, standardize=True)

    def test_parse_error_coordinates(self, tmp_path):
        p = self.write(tmp_path, "1,2\n3,oops\n")
        with pytest.raises(CsvParseError) as exc:
            ingest_csv(p)
        assert exc.value.row == 1 and exc.value.col == 1

    def test_ragged_rows(self, tmp_path):
        p = self.write(tmp_path, "1,2\n3,4,5\n")
        with pytest.raises(CsvParseError):
            ingest_csv(p)

    def test_empty_file(self, tmp_path):
        p = self.write(tmp_path, "")
        with pytest.raises(CsvParseError):
            ingest_csv(p)

    def test_jitter_breaks_ties(self, tmp_path):
        rows = "\n".join("1,2" if i % 2 else "3,4" for i in range(40))
        p = self.write(tmp_path, rows)
        ds = ingest_csv(p, standardize=True)  # default jitter
        # every coordinate distinct after jitter
        assert len(np.unique(ds.data[:, 0])) == 40
        from qtstream.partition import build_partition
        build_partition(ds.data, np.full(4, 0.25), 0)  # no DegenerateCutError

    def test_split_disjoint_and_complete(self, tmp_path):
        rng = np.random.default_rng(5)
        raw = rng.standard_normal((30, 2))
        p = self.write(tmp_path, "\n".join(",".join(map(str, r)) for r in raw))
        ds = ingest_csv(p)
        tr, te = ds.split(10, seed=0)
        assert len(set(tr) & set(te)) == 0
        assert len(set(tr) | set(te)) == 30
        with pytest.raises(ValueError):
            ds.split(30, seed=0)

    def test_train_and_stream(self, tmp_path):
        rng = np.random.default_rng(6)
        raw = rng.standard_normal((30, 2))
        p = self.write(tmp_path, "\n".join(",".join(map(str, r)) for r in raw))
        ds = ingest_csv(p)
        train, law = ds.train_and_stream(10, seed=0)
        stream = law.sample(20, np.random.default_rng(0))
        # training rows never appear in the stream
        assert not any(np.allclose(s, t) for s in stream for t in train)


class TestSpecSerialization:
    def test_roundtrip_through_dict(self):
        spec = StreamSpec(
            d=2,
            phi0=GaussianLaw(np.zeros(2), np.eye(2)),
            length=50,
            seed=3,
            change=ChangeSpec(tau=20, transform=MeanShift(2.0)),
        )
        again = spec_from_dict(spec.to_dict())
        assert np.array_equal(generate_array(spec), generate_array(again))

    def test_load_spec_from_file(self, tmp_path):
        import json

        doc = {
            "d": 1,
            "phi0": {"type": "uniform", "low": [0.0], "high": [1.0]},
            "length": 10,
            "seed": 0,
        }
        p = tmp_path / "spec.json"
        p.write_text(json.dumps(doc))
        assert generate_array(load_spec(p)).shape == (10, 1)

    def test_unknown_kinds_rejected(self):
        with pytest.raises(ValueError):
            spec_from_dict({"d": 1, "phi0": {"type": "cauchy"}, "length": 5, "seed": 0})
