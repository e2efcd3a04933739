import hashlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from replaycl.data import (
    BenchmarkSpec,
    CsvSchema,
    MissionSpec,
    ScenarioRole,
    TabularDataset,
    generate_benchmark,
    load_benchmark_spec,
    load_csv,
    normalize_apply,
    normalize_fit,
    normalize_fit_apply,
    pca_fit,
    pca_project,
    save_csv,
    smote_balance,
    stratified_time_split,
)
from replaycl.errors import InvalidInput, ParseError

from oracles import centroid_accuracy


def ds(x, y=None, **kw):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.zeros(len(x), dtype=int) if y is None else y
    return TabularDataset(x, y, **kw)


# --------------------------------------------------------------- dataset type


def test_dataset_rejects_nan_and_negative_labels():
    with pytest.raises(InvalidInput):
        ds([[np.nan]])
    with pytest.raises(InvalidInput):
        ds([[1.0]], [-1])
    with pytest.raises(InvalidInput):
        TabularDataset(np.zeros((2, 2)), np.zeros(3, dtype=int))


def test_mission_spec_needs_classes_and_round_trips():
    with pytest.raises(InvalidInput):
        MissionSpec(0, 0, frozenset(), ScenarioRole.NewTask)
    m = MissionSpec(1, 2, {4, 3}, ScenarioRole.NewClasses)
    assert MissionSpec.from_json(m.to_json()) == m


# -------------------------------------------------------------- normalization


def test_normalize_endpoints():
    out, state = normalize_fit_apply(ds([2.0, 4.0, 6.0]))
    np.testing.assert_allclose(out.features[:, 0], [0.0, 0.5, 1.0])
    assert state.minimum[0] == 2.0 and state.maximum[0] == 6.0


def test_normalize_constant_column_maps_to_zero():
    out, _ = normalize_fit_apply(ds([5.0, 5.0, 5.0]))
    assert np.all(out.features == 0.0)


def test_normalize_does_not_clip_at_apply_time():
    state = normalize_fit(ds([0.0, 1.0]))
    assert normalize_apply(state, ds([2.0])).features[0, 0] == 2.0


def test_normalize_empty_raises():
    with pytest.raises(InvalidInput):
        normalize_fit(TabularDataset(np.zeros((0, 2)), np.zeros(0, dtype=int)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 20), st.integers(1, 4)),
              elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_normalize_range_and_idempotence(x):
    out, _ = normalize_fit_apply(ds(x))
    assert np.all(out.features >= 0.0) and np.all(out.features <= 1.0)
    again, _ = normalize_fit_apply(out)
    # constant columns are 0 in both; everything else already spans [0, 1]
    span = out.features.max(axis=0) - out.features.min(axis=0)
    full = span == 1.0
    np.testing.assert_allclose(again.features[:, full], out.features[:, full], atol=1e-12)


# ------------------------------------------------------------------------ PCA


def test_pca_perfect_correlation_direction():
    t = np.linspace(-3, 3, 50)
    proj = pca_fit(ds(np.stack([t, t], axis=1)), 1)
    c = proj.components[0]
    assert abs(abs(c @ np.array([1, 1]) / np.sqrt(2)) - 1.0) < 1e-12


def test_pca_isotropic_eigenvalues():
    x = np.random.default_rng(0).standard_normal((10_000, 2))
    proj = pca_fit(ds(x), 2, standardize=False)
    assert np.all((proj.explained_eigenvalues > 0.9) & (proj.explained_eigenvalues < 1.1))


def test_pca_full_rank_reconstruction_and_projection_identities():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((40, 5)) @ rng.standard_normal((5, 5)) * 7 + 3
    data = ds(x)
    proj = pca_fit(data, 5)
    z = pca_project(proj, data).features
    np.testing.assert_allclose(proj.inverse_transform(z), x, atol=1e-8)
    assert np.allclose(proj.transform(proj.mean[None]), 0.0)
    # a step along the first component in standardized units lands on (c, 0, ...)
    step = proj.mean + 2.5 * proj.components[0] * proj.scale
    np.testing.assert_allclose(proj.transform(step[None])[0], [2.5, 0, 0, 0, 0], atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e4))
def test_pca_orthonormal_and_sorted_for_any_scale(seed, scale):
    x = np.random.default_rng(seed).standard_normal((30, 4)) * scale
    proj = pca_fit(x, 3)
    np.testing.assert_allclose(proj.components @ proj.components.T, np.eye(3), atol=1e-8)
    assert np.all(np.diff(proj.explained_eigenvalues) <= 1e-12)


def test_pca_range_errors():
    data = ds(np.zeros((3, 2)))
    with pytest.raises(InvalidInput):
        pca_fit(data, 3)
    proj = pca_fit(ds(np.random.default_rng(0).standard_normal((5, 2))), 1)
    with pytest.raises(InvalidInput):
        pca_project(proj, ds(np.zeros((2, 3))))


# ---------------------------------------------------------------------- SMOTE


def test_smote_balanced_input_unchanged():
    x = np.random.default_rng(0).standard_normal((20, 3))
    data = ds(x, np.repeat([0, 1], 10))
    out = smote_balance(data, seed=3)
    assert out.equals(data)


def test_smote_counts():
    x = np.random.default_rng(0).standard_normal((14, 3))
    out = smote_balance(ds(x, np.array([0] * 10 + [1] * 4)), seed=0)
    assert np.bincount(out.labels).tolist() == [10, 10]
    assert len(out) - 14 == 6


def test_smote_two_point_class_is_collinear():
    p, q = np.array([1.0, 2.0, 0.0]), np.array([4.0, -1.0, 2.0])
    x = np.vstack([np.random.default_rng(0).standard_normal((8, 3)), p, q])
    out = smote_balance(ds(x, np.array([0] * 8 + [1, 1])), seed=5)
    synth = out.features[10:]
    assert len(synth) == 6
    for r in synth:
        assert np.linalg.norm(np.cross(r - p, q - p)) < 1e-9
        t = (r - p) @ (q - p) / ((q - p) @ (q - p))
        assert -1e-12 <= t <= 1 + 1e-12


def test_smote_singleton_minority_raises():
    with pytest.raises(InvalidInput):
        smote_balance(ds(np.zeros((4, 1)), np.array([0, 0, 0, 1])))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(2, 12), min_size=2, max_size=4), st.integers(0, 1000))
def test_smote_rows_are_same_class_convex_combinations(sizes, seed):
    rng = np.random.default_rng(seed)
    labels = np.concatenate([np.full(n, c) for c, n in enumerate(sizes)])
    x = rng.standard_normal((len(labels), 2))
    out = smote_balance(ds(x, labels), k_neighbors=3, seed=seed)
    assert len(set(np.bincount(out.labels).tolist())) == 1
    for r, c in zip(out.features[len(x):], out.labels[len(x):]):
        pts = x[labels == c]
        # some pair (a, b) of same-class rows has r on its segment
        ok = False
        for a in pts:
            for b in pts:
                d = b - a
                if d @ d == 0:
                    continue
                t = (r - a) @ d / (d @ d)
                if -1e-9 <= t <= 1 + 1e-9 and np.linalg.norm(a + t * d - r) < 1e-9:
                    ok = True
                    break
            if ok:
                break
        assert ok


# ---------------------------------------------------------------------- split


def test_split_ten_rows_by_floor_rule():
    data = ds(np.arange(10.0), entity=np.zeros(10, dtype=int))
    s = stratified_time_split(data)
    assert s.train.features[:, 0].tolist() == list(range(7))
    assert s.validation.features[:, 0].tolist() == [7]
    assert s.test.features[:, 0].tolist() == [8, 9]


def test_split_hundred_rows_and_two_entities():
    s = stratified_time_split(ds(np.arange(100.0)))
    assert (len(s.train), len(s.validation), len(s.test)) == (70, 10, 20)
    two = ds(np.arange(20.0), entity=np.repeat([0, 1], 10))
    s = stratified_time_split(two)
    for split, n in ((s.train, 7), (s.validation, 1), (s.test, 2)):
        assert np.bincount(split.entity).tolist() == [n, n]


def test_split_small_entity_raises():
    with pytest.raises(InvalidInput):
        stratified_time_split(ds(np.arange(5.0), entity=np.array([0, 0, 0, 1, 1])))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(3, 40), min_size=1, max_size=5))
def test_split_partitions_exactly_in_time_order(sizes):
    entity = np.concatenate([np.full(n, e) for e, n in enumerate(sizes)])
    data = ds(np.arange(len(entity), dtype=float), entity=entity)
    s = stratified_time_split(data)
    for e, n in enumerate(sizes):
        parts = [p.features[p.entity == e, 0] for p in (s.train, s.validation, s.test)]
        assert sum(len(p) for p in parts) == n
        merged = np.concatenate(parts)
        assert np.all(np.diff(merged) > 0)
        assert len(parts[1]) == int(np.floor(0.1 * n + 1e-9))
        assert len(parts[2]) == int(np.floor(0.2 * n + 1e-9))


# ------------------------------------------------------------------ benchmark


def _digest(missions):
    h = hashlib.sha256()
    for m, s in missions:
        h.update(repr(m.to_json()).encode())
        for part in (s.train, s.validation, s.test):
            h.update(part.features.tobytes())
            h.update(part.labels.tobytes())
    return h.hexdigest()


def test_benchmark_deterministic():
    spec = BenchmarkSpec("class", 6, (2, 2), 50, 6.0, seed=4)
    assert _digest(generate_benchmark(spec)) == _digest(generate_benchmark(spec))
    assert _digest(generate_benchmark(spec, seed=5)) != _digest(generate_benchmark(spec))


def test_benchmark_degenerate_specs_raise():
    for kw in ({"dims": 0}, {"classes": ()}, {"classes": (0,)}):
        args = {"scenario": "class", "dims": 4, "classes": (2,), "instances_per_class": 30, "mean_gap": 6.0, **kw}
        with pytest.raises(InvalidInput):
            BenchmarkSpec(**args)


def test_domain_shift_zero_keeps_means():
    spec = BenchmarkSpec("domain", 5, (3, 3), 2000, 6.0, shift=0.0, seed=2)
    (m1, s1), (m2, s2) = generate_benchmark(spec)
    assert m1.class_ids == m2.class_ids
    for c in range(3):
        a = s1.train.features[s1.train.labels == c].mean(axis=0)
        b = s2.train.features[s2.train.labels == c].mean(axis=0)
        assert np.linalg.norm(a - b) < 0.2


def test_domain_shift_translates_means():
    spec = BenchmarkSpec("domain", 5, (3, 3), 500, 6.0, shift=8.0, seed=2)
    (_, s1), (_, s2) = generate_benchmark(spec)
    d = s2.train.features.mean(axis=0) - s1.train.features.mean(axis=0)
    assert abs(np.linalg.norm(d) - 8.0) < 0.5


def test_scenario_label_spaces():
    cls = generate_benchmark(BenchmarkSpec("class", 8, (3, 2), 30, 6.0))
    assert [sorted(m.class_ids) for m, _ in cls] == [[0, 1, 2], [3, 4]]
    assert {m.task_id for m, _ in cls} == {0}
    task = generate_benchmark(BenchmarkSpec("task", 8, (3, 2), 30, 6.0))
    assert [sorted(m.class_ids) for m, _ in task] == [[0, 1, 2], [0, 1]]
    assert [m.task_id for m, _ in task] == [0, 1]


@pytest.mark.parametrize("scenario,classes", [("domain", (3, 3)), ("class", (3, 2)), ("task", (3, 3))])
def test_separated_benchmark_centroid_oracle(scenario, classes):
    spec = BenchmarkSpec(scenario, 20, classes, 1000, 6.0, shift=10.0, seed=0, task_overlap=1.0)
    for _, s in generate_benchmark(spec):
        acc = centroid_accuracy(s.train.features, s.train.labels, s.test.features, s.test.labels)
        assert acc >= 0.99


def test_benchmark_spec_json_strict(tmp_path):
    spec = BenchmarkSpec("task", 4, (2, 2), 30, 6.0, seed=9)
    assert BenchmarkSpec.from_json(spec.to_json()) == spec
    with pytest.raises(InvalidInput):
        BenchmarkSpec.from_json({**spec.to_json(), "colour": 1})
    p = tmp_path / "b.json"
    p.write_text('{"scenario": "class", "dims": 3, "classes": [2], "instances_per_class": 15, "mean_gap": 4}')
    assert load_benchmark_spec(p).classes == (2,)


# ------------------------------------------------------------------------ CSV


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    data = TabularDataset(rng.standard_normal((3, 2)) * 1e3, np.array([0, 2, 1]), ("a", "b"),
                          np.array([0, 0, 1]), np.array([1, 1, 1]))
    save_csv(data, tmp_path / "d.csv")
    back = load_csv(tmp_path / "d.csv")
    assert back.equals(data, atol=1e-9)
    assert back.feature_names == ("a", "b")


def test_csv_errors(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ParseError):
        load_csv(p)
    p.write_text("a,label\n1,0\n2\n")
    with pytest.raises(ParseError) as err:
        load_csv(p)
    assert err.value.row == 3
    p.write_text("a,label\n1,0\nzz,1\n")
    with pytest.raises(ParseError) as err:
        load_csv(p)
    assert (err.value.row, err.value.col) == (3, 1)
    p.write_text("a,label\n1,5\n")
    with pytest.raises(ParseError):
        load_csv(p, CsvSchema(num_classes=3))


def test_csv_header_only_is_empty(tmp_path):
    p = tmp_path / "h.csv"
    p.write_text("a,b,label\n")
    data = load_csv(p)
    assert len(data) == 0 and data.n_features == 2
