"""Tabular datasets, preprocessing and the synthetic mission benchmark.

Rows are pre-windowed instances; an optional ``entity`` column groups the rows
of one source (a patient, a device) in time order.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidInput, NumericalError, ParseError


@dataclass(frozen=True, eq=False)
class TabularDataset:
    features: np.ndarray
    labels: np.ndarray
    feature_names: tuple[str, ...] | None = None
    entity: np.ndarray | None = None
    mission: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim == 1 and x.size == 0:
            x = x.reshape(0, 0)
        if x.ndim != 2:
            raise InvalidInput(f"features must be 2-D, got shape {x.shape}")
        y = np.asarray(self.labels)
        if y.size == 0:
            y = y.astype(np.int64).reshape(0)
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise InvalidInput("labels must be a vector with one entry per row")
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise InvalidInput("labels must be integers")
        y = y.astype(np.int64)
        if not np.all(np.isfinite(x)):
            raise InvalidInput("features contain NaN or Inf")
        if y.size and y.min() < 0:
            raise InvalidInput("labels must be non-negative class ids")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        if self.feature_names is not None:
            names = tuple(str(n) for n in self.feature_names)
            if len(names) != x.shape[1]:
                raise InvalidInput("feature_names length must equal the feature count")
            object.__setattr__(self, "feature_names", names)
        for name in ("entity", "mission"):
            col = getattr(self, name)
            if col is not None:
                col = np.asarray(col, dtype=np.int64).reshape(-1)
                if col.shape[0] != x.shape[0]:
                    raise InvalidInput(f"{name} column length must equal the row count")
                object.__setattr__(self, name, col)

    def __len__(self):
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, index) -> "TabularDataset":
        index = np.asarray(index)
        return TabularDataset(
            self.features[index],
            self.labels[index],
            self.feature_names,
            None if self.entity is None else self.entity[index],
            None if self.mission is None else self.mission[index],
        )

    def with_features(self, features, feature_names=None) -> "TabularDataset":
        return TabularDataset(features, self.labels, feature_names, self.entity, self.mission)

    def with_labels(self, labels) -> "TabularDataset":
        return TabularDataset(self.features, labels, self.feature_names, self.entity, self.mission)

    def equals(self, other: "TabularDataset", atol: float = 0.0) -> bool:
        if self.features.shape != other.features.shape:
            return False
        if not np.array_equal(self.labels, other.labels):
            return False
        for a, b in ((self.entity, other.entity), (self.mission, other.mission)):
            if (a is None) != (b is None) or (a is not None and not np.array_equal(a, b)):
                return False
        return bool(np.allclose(self.features, other.features, rtol=0.0, atol=atol))


def concat_datasets(parts: Sequence[TabularDataset]) -> TabularDataset:
    parts = [p for p in parts]
    if not parts:
        raise InvalidInput("nothing to concatenate")
    width = parts[0].n_features
    if any(p.n_features != width for p in parts):
        raise InvalidInput("datasets differ in feature count")

    def _col(name):
        cols = [getattr(p, name) for p in parts]
        if all(c is None for c in cols):
            return None
        return np.concatenate([c if c is not None else np.full(len(p), -1) for c, p in zip(cols, parts)])

    return TabularDataset(
        np.concatenate([p.features for p in parts]).reshape(-1, width),
        np.concatenate([p.labels for p in parts]),
        parts[0].feature_names,
        _col("entity"),
        _col("mission"),
    )


class ScenarioRole(str, enum.Enum):
    DomainShift = "DomainShift"
    NewClasses = "NewClasses"
    NewTask = "NewTask"


@dataclass(frozen=True)
class MissionSpec:
    mission_id: int
    task_id: int
    class_ids: frozenset
    scenario_role: ScenarioRole
    # class counted as negative when binarizing for F1; belongs to the task
    healthy_class: int | None = 0

    def __post_init__(self):
        object.__setattr__(self, "class_ids", frozenset(int(c) for c in self.class_ids))
        object.__setattr__(self, "scenario_role", ScenarioRole(self.scenario_role))
        if not self.class_ids:
            raise InvalidInput("a mission needs at least one class")

    def to_json(self) -> dict:
        return {
            "mission_id": self.mission_id,
            "task_id": self.task_id,
            "class_ids": sorted(self.class_ids),
            "scenario_role": self.scenario_role.value,
            "healthy_class": self.healthy_class,
        }

    @classmethod
    def from_json(cls, d: dict) -> "MissionSpec":
        return cls(d["mission_id"], d["task_id"], frozenset(d["class_ids"]),
                   ScenarioRole(d["scenario_role"]), d.get("healthy_class", 0))


@dataclass(frozen=True)
class SplitDataset:
    train: TabularDataset
    validation: TabularDataset
    test: TabularDataset
    split_fractions: tuple[float, float, float] = (0.70, 0.10, 0.20)

    def __post_init__(self):
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise InvalidInput("split fractions must sum to 1")

    def map(self, fn) -> "SplitDataset":
        return SplitDataset(fn(self.train), fn(self.validation), fn(self.test), self.split_fractions)


# ---------------------------------------------------------------- normalization


@dataclass(frozen=True)
class NormalizationState:
    minimum: np.ndarray
    maximum: np.ndarray

    def apply(self, data: TabularDataset) -> TabularDataset:
        return normalize_apply(self, data)


def normalize_fit(data: TabularDataset) -> NormalizationState:
    if len(data) == 0:
        raise InvalidInput("cannot fit normalization on an empty dataset")
    return NormalizationState(data.features.min(axis=0), data.features.max(axis=0))


def normalize_apply(state: NormalizationState, data: TabularDataset) -> TabularDataset:
    """Min-max scale with a fitted state. Out-of-range values are not clipped;
    features that were constant at fit time map to 0."""
    if data.n_features != state.minimum.shape[0]:
        raise InvalidInput("feature count differs from the normalization state")
    span = state.maximum - state.minimum
    constant = span <= 0
    safe = np.where(constant, 1.0, span)
    out = (data.features - state.minimum) / safe
    out[:, constant] = 0.0
    return data.with_features(out, data.feature_names)


def normalize_fit_apply(data: TabularDataset) -> tuple[TabularDataset, NormalizationState]:
    state = normalize_fit(data)
    return normalize_apply(state, data), state


# ------------------------------------------------------------------------ PCA


@dataclass(frozen=True)
class PcaProjection:
    """``components`` rows are orthonormal directions in standardized space.

    ``scale`` holds the per-feature standard deviation used for standardizing
    (1 for zero-variance features and when fitted with ``standardize=False``).
    """

    mean: np.ndarray
    components: np.ndarray
    explained_eigenvalues: np.ndarray
    scale: np.ndarray

    @property
    def n_input(self) -> int:
        return self.mean.shape[0]

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_input:
            raise InvalidInput(f"expected {self.n_input} columns, got shape {x.shape}")
        return ((x - self.mean) / self.scale) @ self.components.T

    def inverse_transform(self, z: np.ndarray) -> np.ndarray:
        return self.mean + (np.asarray(z) @ self.components) * self.scale


def pca_fit(data: TabularDataset | np.ndarray, k: int, standardize: bool = True) -> PcaProjection:
    x = data.features if isinstance(data, TabularDataset) else np.asarray(data, dtype=np.float64)
    n, d = x.shape
    if not 1 <= k <= d or k > n:
        raise InvalidInput(f"k={k} out of range for {n} rows x {d} features")
    mean = x.mean(axis=0)
    centered = x - mean
    scale = np.ones(d)
    if standardize:
        std = x.std(axis=0, ddof=1) if n > 1 else np.zeros(d)
        scale = np.where(std > 0, std, 1.0)
        centered = centered / scale
    cov = centered.T @ centered / max(n - 1, 1)
    try:
        eigvals, eigvecs = np.linalg.eigh(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"covariance eigendecomposition failed: {exc}") from exc
    order = np.argsort(-eigvals, kind="stable")[:k]
    comps = eigvecs[:, order].T.copy()
    # deterministic sign: largest-magnitude entry positive
    pivot = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(k), pivot])
    comps *= np.where(signs == 0, 1.0, signs)[:, None]
    return PcaProjection(mean, comps, np.clip(eigvals[order], 0.0, None), scale)


def pca_project(proj: PcaProjection, data: TabularDataset) -> TabularDataset:
    if data.n_features != proj.n_input:
        raise InvalidInput(f"data has {data.n_features} features, projection expects {proj.n_input}")
    return data.with_features(proj.transform(data.features))


# ---------------------------------------------------------------------- SMOTE


def smote_balance(data: TabularDataset, k_neighbors: int = 5, seed: int = 0) -> TabularDataset:
    """Oversample every class up to the largest class count.

    Each synthetic row is ``A + u * (B - A)`` with ``A`` a random row of the
    class, ``B`` one of its ``k_neighbors`` nearest same-class rows (Euclidean,
    ties broken by row index) and ``u ~ U(0, 1)``. Synthetic rows are appended
    after the original rows, class by class, with entity -1.
    """
    if len(data) == 0:
        return data
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(data.labels, return_counts=True)
    target = counts.max()
    parts = [data]
    for cls, n_c in zip(classes, counts):
        need = int(target - n_c)
        if need == 0:
            continue
        if n_c < 2:
            raise InvalidInput(f"class {cls} has {n_c} instance; SMOTE needs at least 2")
        idx = np.flatnonzero(data.labels == cls)
        xc = data.features[idx]
        sq = np.sum(xc**2, axis=1)
        dist = sq[:, None] + sq[None, :] - 2.0 * xc @ xc.T
        np.fill_diagonal(dist, np.inf)
        k = min(k_neighbors, n_c - 1)
        neighbors = np.argsort(dist, axis=1, kind="stable")[:, :k]
        a = rng.integers(n_c, size=need)
        b = neighbors[a, rng.integers(k, size=need)]
        u = rng.random(need)[:, None]
        synth = xc[a] + u * (xc[b] - xc[a])
        parts.append(TabularDataset(
            synth,
            np.full(need, cls),
            data.feature_names,
            None if data.entity is None else np.full(need, -1),
            None if data.mission is None else data.mission[idx[a]],
        ))
    return concat_datasets(parts)


# ---------------------------------------------------------------------- split


def _split_counts(n: int, fractions) -> tuple[int, int, int]:
    n_val = math.floor(fractions[1] * n + 1e-9)
    n_te = math.floor(fractions[2] * n + 1e-9)
    return n - n_val - n_te, n_val, n_te


def stratified_time_split(data: TabularDataset, fractions=(0.70, 0.10, 0.20)) -> SplitDataset:
    """Per entity, the first rows go to train, the next to validation and the
    last to test. Validation and test get ``floor(f * n)`` rows each; train
    takes the remainder. Without an entity column the whole dataset is one
    entity."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise InvalidInput(f"fractions must be three positive numbers summing to 1, got {fractions}")
    entity = data.entity if data.entity is not None else np.zeros(len(data), dtype=np.int64)
    _, first = np.unique(entity, return_index=True)
    buckets: tuple[list, list, list] = ([], [], [])
    for ent in entity[np.sort(first)]:
        rows = np.flatnonzero(entity == ent)
        if rows.size < 3:
            raise InvalidInput(f"entity {ent} has {rows.size} rows; at least 3 are needed")
        n_tr, n_val, _ = _split_counts(rows.size, fractions)
        buckets[0].append(rows[:n_tr])
        buckets[1].append(rows[n_tr:n_tr + n_val])
        buckets[2].append(rows[n_tr + n_val:])
    train, val, test = (data.subset(np.concatenate(b)) for b in buckets)
    return SplitDataset(train, val, test, fractions)


# ------------------------------------------------------------------ benchmark


_SCENARIOS = {"domain": ScenarioRole.DomainShift, "class": ScenarioRole.NewClasses, "task": ScenarioRole.NewTask}


@dataclass(frozen=True)
class BenchmarkSpec:
    """Parameters of a synthetic mission sequence.

    ``classes`` lists the class count of every mission. Each class is a
    mixture of ``components_per_class`` Gaussians with isotropic std
    ``sigma`` whose centers scatter by ``component_spread * sigma`` around the
    class mean. Class means are pairwise ``mean_gap * sigma`` apart. Domain
    missions after the first translate all class means together by
    ``shift * sigma``, partly along the class-0 axis (so a boundary fitted to
    the new domain alone cuts through the old one) and partly along a random
    direction orthogonal to every class mean. Task missions after the first
    draw every class around all first-task class means scaled by
    ``task_overlap``, so directions that separated the first task become
    nuisance variance for the later ones.
    """

    scenario: str
    dims: int
    classes: tuple[int, ...]
    instances_per_class: int
    mean_gap: float
    shift: float = 0.0
    seed: int = 0
    sigma: float = 1.0
    entities_per_class: int = 5
    components_per_class: int = 1
    component_spread: float = 0.0
    task_overlap: float = 0.0

    def __post_init__(self):
        classes = (self.classes,) if isinstance(self.classes, int) else tuple(int(c) for c in self.classes)
        object.__setattr__(self, "classes", classes)
        if self.scenario not in _SCENARIOS:
            raise InvalidInput(f"scenario must be one of {sorted(_SCENARIOS)}, got {self.scenario!r}")
        if self.dims < 1:
            raise InvalidInput("dims must be at least 1")
        if not classes or any(c < 1 for c in classes):
            raise InvalidInput("every mission needs at least one class")
        if self.scenario == "domain" and len(set(classes)) != 1:
            raise InvalidInput("domain missions must share the same class count")
        if self.instances_per_class < 3 * self.entities_per_class or self.entities_per_class < 1:
            raise InvalidInput("instances_per_class must give every entity at least 3 rows")
        if self.components_per_class < 1 or self.sigma <= 0 or self.mean_gap < 0:
            raise InvalidInput("invalid mixture parameters")
        if self.task_overlap < 0:
            raise InvalidInput("task_overlap must be non-negative")
        if self.n_means > 2 * self.dims:
            raise InvalidInput(f"{self.n_means} class means do not fit in {self.dims} dims (limit 2*dims)")

    @property
    def n_means(self) -> int:
        return self.classes[0] if self.scenario == "domain" else sum(self.classes)

    def to_json(self) -> dict:
        return {
            "scenario": self.scenario,
            "dims": self.dims,
            "classes": list(self.classes),
            "instances_per_class": self.instances_per_class,
            "mean_gap": self.mean_gap,
            "shift": self.shift,
            "seed": self.seed,
            "sigma": self.sigma,
            "entities_per_class": self.entities_per_class,
            "components_per_class": self.components_per_class,
            "component_spread": self.component_spread,
            "task_overlap": self.task_overlap,
        }

    @classmethod
    def from_json(cls, d: dict) -> "BenchmarkSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvalidInput(f"unknown benchmark fields: {sorted(unknown)}")
        missing = {"scenario", "dims", "classes", "instances_per_class", "mean_gap"} - set(d)
        if missing:
            raise InvalidInput(f"missing benchmark fields: {sorted(missing)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidInput(str(exc)) from exc


def _class_directions(rng: np.random.Generator, dims: int, count: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((dims, dims)))
    dirs = np.concatenate([q.T, -q.T])
    return dirs[:count]


def _shift_direction(rng, means) -> np.ndarray:
    """Unit vector halfway between the axis from class 0 to the centroid of
    the other classes and a random direction orthogonal to every class mean."""
    dims = means.shape[1]
    axis = means[1:].mean(axis=0) - means[0] if len(means) > 1 else np.zeros(dims)
    norm = np.linalg.norm(axis)
    axis = axis / norm if norm > 0 else axis
    ortho = rng.standard_normal(dims)
    if len(means) < dims:
        basis, _ = np.linalg.qr(means.T)
        ortho -= basis @ (basis.T @ ortho)
    ortho /= np.linalg.norm(ortho)
    w = axis + ortho
    return w / np.linalg.norm(w)


def _sample_class(rng, mean, spec: BenchmarkSpec, centers) -> np.ndarray:
    comp = rng.integers(len(centers), size=spec.instances_per_class)
    noise = rng.standard_normal((spec.instances_per_class, spec.dims)) * spec.sigma
    return mean + centers[comp] + noise


def generate_benchmark(spec: BenchmarkSpec, seed: int | None = None) -> list[tuple[MissionSpec, SplitDataset]]:
    """Build the mission sequence described by ``spec``; a pure function of
    ``(spec, seed)``. ``seed`` defaults to ``spec.seed``."""
    seed = spec.seed if seed is None else seed
    root = np.random.SeedSequence(seed)
    geo_seq, *mission_seqs = root.spawn(1 + len(spec.classes))
    geo = np.random.default_rng(geo_seq)
    radius = spec.mean_gap * spec.sigma / math.sqrt(2.0)
    means = _class_directions(geo, spec.dims, spec.n_means) * radius
    n_classes_total = spec.n_means
    centers = geo.standard_normal((n_classes_total, spec.components_per_class, spec.dims))
    centers *= spec.component_spread * spec.sigma
    role = _SCENARIOS[spec.scenario]
    out = []
    offset = 0
    entity_base = 0
    per_entity = spec.instances_per_class // spec.entities_per_class
    for m, (n_cls, seq) in enumerate(zip(spec.classes, mission_seqs)):
        rng = np.random.default_rng(seq)
        if role is ScenarioRole.DomainShift:
            slots = list(range(n_cls))
            labels = list(range(n_cls))
            task_id = 0
            translate = np.zeros((n_cls, spec.dims))
            if m > 0:
                translate[:] = _shift_direction(rng, means[:n_cls]) * spec.shift * spec.sigma
        else:
            slots = list(range(offset, offset + n_cls))
            labels = slots if role is ScenarioRole.NewClasses else list(range(n_cls))
            task_id = 0 if role is ScenarioRole.NewClasses else m
            translate = np.zeros((n_cls, spec.dims))
        offset += n_cls
        xs, ys, ents = [], [], []
        for j, (slot, label) in enumerate(zip(slots, labels)):
            comps = centers[slot]
            if role is ScenarioRole.NewTask and m > 0 and spec.task_overlap:
                first = means[: spec.classes[0]] * spec.task_overlap
                comps = (comps[:, None, :] + first[None, :, :]).reshape(-1, spec.dims)
            x = _sample_class(rng, means[slot] + translate[j], spec, comps)
            xs.append(x)
            ys.append(np.full(len(x), label))
            ent = entity_base + np.minimum(np.arange(len(x)) // per_entity, spec.entities_per_class - 1)
            ents.append(ent)
            entity_base += spec.entities_per_class
        data = TabularDataset(
            np.concatenate(xs), np.concatenate(ys),
            tuple(f"f{i}" for i in range(spec.dims)),
            np.concatenate(ents), np.full(sum(len(x) for x in xs), m),
        )
        mission = MissionSpec(m, task_id, frozenset(labels), role, healthy_class=0)
        out.append((mission, stratified_time_split(data)))
    return out


# ------------------------------------------------------------------------ CSV


@dataclass(frozen=True)
class CsvSchema:
    label_column: str = "label"
    num_classes: int | None = None
    optional_columns: tuple[str, ...] = field(default=("entity", "mission"))


def save_csv(data: TabularDataset, path) -> None:
    names = list(data.feature_names) if data.feature_names else [f"f{i}" for i in range(data.n_features)]
    header = names + ["label"]
    extra = [c for c in ("entity", "mission") if getattr(data, c) is not None]
    header += extra
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(data)):
            row = [format(v, ".17g") for v in data.features[i]]
            row.append(str(int(data.labels[i])))
            row += [str(int(getattr(data, c)[i])) for c in extra]
            w.writerow(row)


def load_csv(path, schema: CsvSchema | None = None) -> TabularDataset:
    schema = schema or CsvSchema()
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("missing header row", row=1)
    header = [h.strip() for h in rows[0]]
    if schema.label_column not in header:
        raise ParseError(f"no {schema.label_column!r} column in header", row=1)
    label_col = header.index(schema.label_column)
    special = {schema.label_column, *schema.optional_columns}
    feat_cols = [i for i, h in enumerate(header) if h not in special]
    opt_cols = {c: header.index(c) for c in schema.optional_columns if c in header}
    feats, labels = [], []
    extras: dict[str, list] = {c: [] for c in opt_cols}
    for r, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} cells, got {len(row)}", row=r)
        vals = []
        for c in feat_cols:
            try:
                vals.append(float(row[c]))
            except ValueError:
                raise ParseError(f"non-numeric cell {row[c]!r}", row=r, col=c + 1) from None
        try:
            lab = int(row[label_col])
        except ValueError:
            raise ParseError(f"label {row[label_col]!r} is not an integer", row=r, col=label_col + 1) from None
        if lab < 0 or (schema.num_classes is not None and lab >= schema.num_classes):
            raise ParseError(f"unknown label {lab}", row=r, col=label_col + 1)
        for name, c in opt_cols.items():
            try:
                extras[name].append(int(row[c]))
            except ValueError:
                raise ParseError(f"{name} cell {row[c]!r} is not an integer", row=r, col=c + 1) from None
        feats.append(vals)
        labels.append(lab)
    x = np.array(feats, dtype=np.float64).reshape(len(feats), len(feat_cols))
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(x))[0]
        raise ParseError("non-finite value", row=int(bad[0]) + 2, col=feat_cols[bad[1]] + 1)
    return TabularDataset(
        x, np.array(labels, dtype=np.int64), tuple(header[c] for c in feat_cols),
        np.array(extras["entity"]) if "entity" in extras else None,
        np.array(extras["mission"]) if "mission" in extras else None,
    )


def load_benchmark_spec(path) -> BenchmarkSpec:
    with open(path, encoding="utf-8") as fh:
        return BenchmarkSpec.from_json(json.load(fh))
