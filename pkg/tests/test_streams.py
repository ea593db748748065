import math

import numpy as np
import pytest

from zerosiam.models import SENTINEL_LABEL, AdaptiveModel
from zerosiam.streams import (
    AdditiveGaussian,
    Compose,
    ConfigError,
    EmptySubsetError,
    FeatureScale,
    MeanShift,
    Mixture,
    NoShift,
    PureNoise,
    SourceTask,
    StreamSpec,
    export_dataset,
    generate_source,
    imbalanced_labels,
    import_dataset,
    label_counts,
    make_stream,
    pure_noise_prefix,
    sample_task,
    shifted_pool,
)

TASK = SourceTask(n_classes=3, input_dim=4, separation=6.0, n_train=300, seed=2)


@pytest.fixture(scope="module")
def pool():
    return sample_task(TASK, 600, seed=9)


def test_balanced_classes():
    data = generate_source(TASK)
    np.testing.assert_array_equal(label_counts(data.y, 3), [100, 100, 100])


def test_same_seed_same_bytes():
    a, b = generate_source(TASK), generate_source(TASK)
    assert a.x.tobytes() == b.x.tobytes() and a.y.tobytes() == b.y.tobytes()


def test_zero_sigma_collapses_to_means():
    task = SourceTask(n_classes=3, input_dim=4, noise_sigma=0.0, n_train=30)
    data = generate_source(task)
    np.testing.assert_array_equal(data.x, task.class_means()[data.y])


@pytest.mark.parametrize("layout", ["simplex", "circle"])
def test_class_means_separated(layout):
    task = SourceTask(n_classes=5, input_dim=6, separation=4.0, layout=layout)
    m = task.class_means()
    d = np.linalg.norm(m[:, None] - m[None], axis=-1)[~np.eye(5, dtype=bool)]
    assert d.min() == pytest.approx(4.0)


def test_separation_invariant_enforced():
    with pytest.raises(ConfigError):
        SourceTask(n_classes=3, input_dim=4, noise_sigma=2.0, separation=6.0).validate()


def test_simplex_needs_enough_dims():
    with pytest.raises(ConfigError):
        SourceTask(n_classes=5, input_dim=3).validate()


def test_class_ordered_is_non_decreasing(pool):
    s = make_stream(StreamSpec(ordering="class_ordered", n_samples=300, batch_size=16), pool)
    assert np.all(np.diff(s.y) >= 0)
    assert set(s.y.tolist()) == {0, 1, 2}


def test_rho_one_counts_within_three_sigma(pool):
    n, C = 3000, 3
    s = make_stream(StreamSpec(ordering="imbalanced", rho=1.0, n_samples=n, seed=4), pool)
    counts = label_counts(s.y, C)
    sd = math.sqrt(n * (1 / C) * (1 - 1 / C))
    assert np.all(np.abs(counts - n / C) <= 3 * sd)


def test_rho_inf_matches_class_ordered():
    rng_a, rng_b = np.random.default_rng(0), np.random.default_rng(0)
    labels = imbalanced_labels(90, 3, math.inf, rng_a)
    assert np.all(np.diff(labels) >= 0)
    np.testing.assert_array_equal(label_counts(labels, 3), [30, 30, 30])
    assert imbalanced_labels(90, 3, math.inf, rng_b).tobytes() == labels.tobytes()


def test_phase_dominance_monotone_in_rho():
    n, C = 10_000, 4
    fracs = []
    for rho in (1.0, 5.0, 1000.0, math.inf):
        labels = imbalanced_labels(n, C, rho, np.random.default_rng(1))
        bounds = np.linspace(0, n, C + 1).round().astype(int)
        phase = [label_counts(labels[a:b], C).max() / (b - a) for a, b in zip(bounds[:-1], bounds[1:])]
        fracs.append(np.mean(phase))
    assert all(b >= a for a, b in zip(fracs, fracs[1:]))
    assert fracs[-1] == 1.0


def test_blind_spot_needs_reference(pool):
    with pytest.raises(ConfigError):
        make_stream(StreamSpec(blind_spot=True), pool)


class PerfectModel:
    def __init__(self, pool):
        self.lookup = {x.tobytes(): y for x, y in zip(pool.x, pool.y)}

    def predict(self, x):
        return np.array([self.lookup[r.tobytes()] for r in x])


def test_blind_spot_empty_subset(pool):
    with pytest.raises(EmptySubsetError):
        make_stream(StreamSpec(blind_spot=True), pool, ref_model=PerfectModel(pool))


def test_blind_spot_keeps_only_mistakes(pool):
    ref = AdaptiveModel(4, 3, seed=0)  # untrained: plenty of mistakes
    s = make_stream(StreamSpec(blind_spot=True, n_samples=200), pool, ref_model=ref)
    assert np.all(ref.predict(s.x) != s.y)


def test_noise_prefix_zero_is_identity(pool):
    s = make_stream(StreamSpec(n_samples=64), pool)
    assert pure_noise_prefix(s, 0) is s


def test_noise_prefix_sentinels(pool):
    s = make_stream(StreamSpec(n_samples=64, batch_size=16), pool)
    p = pure_noise_prefix(s, 3, sigma=1.0, seed=0)
    assert len(p) == len(s) + 3
    assert np.all(p.y[:48] == SENTINEL_LABEL)
    np.testing.assert_array_equal(p.y[48:], s.y)
    np.testing.assert_array_equal(label_counts(p.y, 3), label_counts(s.y, 3))


def test_pure_noise_inside_compose(pool):
    shift = Compose((AdditiveGaussian(0.5), PureNoise(2)))
    s = make_stream(StreamSpec(shift=shift, n_samples=64, batch_size=16), pool)
    clean = make_stream(StreamSpec(shift=Compose((AdditiveGaussian(0.5),)), n_samples=64, batch_size=16), pool)
    assert len(s) == len(clean) + 2
    assert s.x[32:].tobytes() == clean.x.tobytes()


def test_stream_determinism(pool):
    spec = StreamSpec(shift=AdditiveGaussian(1.0), ordering="imbalanced", rho=10.0, n_samples=500, seed=7)
    a, b = make_stream(spec, pool), make_stream(spec, pool)
    assert a.x.tobytes() == b.x.tobytes() and a.y.tobytes() == b.y.tobytes()


def test_ordering_never_alters_features(pool):
    s = make_stream(StreamSpec(ordering="imbalanced", rho=5.0, n_samples=400), pool)
    rows = {r.tobytes(): y for r, y in zip(pool.x, pool.y)}
    assert all(rows[r.tobytes()] == y for r, y in zip(s.x, s.y))


def test_shift_never_alters_labels(pool):
    base = make_stream(StreamSpec(n_samples=300, seed=1), pool)
    # deterministic shifts leave the ordering draw untouched
    for shift in (MeanShift((1.0, 0.0, -1.0, 2.0)), FeatureScale(0.5)):
        s = make_stream(StreamSpec(shift=shift, n_samples=300, seed=1), pool)
        np.testing.assert_array_equal(s.y, base.y)
    scaled = make_stream(StreamSpec(shift=FeatureScale(0.5), n_samples=300, seed=1), pool)
    np.testing.assert_allclose(scaled.x, 0.5 * base.x)
    noisy = shifted_pool(StreamSpec(shift=AdditiveGaussian(2.0)), pool)
    np.testing.assert_array_equal(noisy.y, pool.y)
    assert not np.allclose(noisy.x, pool.x)


def test_mixture_segments(pool):
    mix = Mixture((NoShift(), FeatureScale(2.0), FeatureScale(-1.0)), (1 / 3, 1 / 3, 1 / 3))
    s = make_stream(StreamSpec(shift=mix, n_samples=300), pool)
    assert len(s.y) == 300


def test_mixture_proportions_validated():
    with pytest.raises(ConfigError):
        Mixture((NoShift(), FeatureScale(2.0)), (0.5, 0.4))


def test_mean_shift_dimension_checked(pool):
    with pytest.raises(ConfigError):
        make_stream(StreamSpec(shift=MeanShift((1.0,))), pool)


def test_bad_ordering_rejected(pool):
    with pytest.raises(ConfigError):
        make_stream(StreamSpec(ordering="sorted"), pool)
    with pytest.raises(ConfigError):
        make_stream(StreamSpec(ordering="imbalanced", rho=0.5), pool)


def test_streams_are_read_only(pool):
    s = make_stream(StreamSpec(n_samples=64), pool)
    with pytest.raises(ValueError):
        s.x[0, 0] = 1.0


def test_export_import_round_trip(tmp_path, pool):
    s = pure_noise_prefix(make_stream(StreamSpec(n_samples=40, batch_size=8), pool), 1)
    path = tmp_path / "stream.txt"
    export_dataset(s, path)
    back = import_dataset(path)
    assert back.x.tobytes() == s.x.tobytes() and back.y.tobytes() == s.y.tobytes()
    assert back.n_classes == 3
    assert path.read_text().splitlines()[:2] == ["dim,classes", "4,3"]


def test_import_rejects_ragged_rows(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("dim,classes\n2,2\n0.1,0.2,1\n0.3,1\n")
    with pytest.raises(ConfigError):
        import_dataset(path)
