"""Replay sources for past missions and balanced mini-batch composition.

A past mission is replayed either from preserved real rows (the top-loss
fraction of each class) or from a fitted density model whose samples are
labeled by a snapshot of the network taken right after that mission.
Labels stored or produced here are head-local indices.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .density import (
    GmmModel,
    KdeModel,
    density_from_dict,
    density_to_dict,
    gmm_select_and_fit,
    kde_select_and_fit,
    ks_two_sample,
)
from .errors import FormatError, InvalidInput, InvalidState
from .nn import LossLedger, MultiHeadMlp, TaggedBatch, load_checkpoint, save_checkpoint

SOURCE_FORMAT = "replaycl-source"
SOURCE_VERSION = 1
MAX_PROBE = 2048


@dataclass(frozen=True)
class PreservationConfig:
    percentile: float = 70.0

    def __post_init__(self):
        if not 0 < self.percentile < 100:
            raise InvalidInput(f"percentile must lie strictly between 0 and 100, got {self.percentile}")


# ----------------------------------------------------------- data preservation


def nearest_rank(values, percentile: float) -> float:
    """Value at 0-based index ``ceil(p/100 * n) - 1`` of the ascending sort."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise InvalidInput("percentile of an empty set")
    rank = math.ceil(percentile * v.size / 100.0 - 1e-9)
    return float(v[min(max(rank - 1, 0), v.size - 1)])


def preserve_indices(ledger: LossLedger, y_train, epochs: int | None = None, percentile: float = 70.0,
                     classes: Sequence[int] | None = None) -> np.ndarray:
    """Row indices kept by data preservation, class by class in ``classes``
    order and in original order within a class."""
    y = np.asarray(y_train, dtype=np.int64)
    if ledger.accumulated_loss.shape[0] != y.shape[0]:
        raise InvalidInput("ledger length differs from the training set size")
    epochs = ledger.epochs_recorded if epochs is None else epochs
    if epochs < 1:
        raise InvalidInput("at least one recorded epoch is required")
    PreservationConfig(percentile)
    avg = ledger.accumulated_loss / epochs
    classes = sorted(set(y.tolist())) if classes is None else [int(c) for c in classes]
    stray = set(y.tolist()) - set(classes)
    if stray:
        raise InvalidInput(f"labels {sorted(stray)} are not among the given classes")
    keep = []
    for cls in classes:
        idx = np.flatnonzero(y == cls)
        if idx.size == 0:
            continue
        threshold = nearest_rank(avg[idx], percentile)
        keep.append(idx[avg[idx] >= threshold])
    return np.concatenate(keep) if keep else np.zeros(0, dtype=np.int64)


def preserve_data(ledger: LossLedger, x_train, y_train, epochs: int | None = None, percentile: float = 70.0,
                  classes: Sequence[int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Keep, per class, the rows whose average training loss reaches that
    class's ``percentile``-th nearest-rank threshold."""
    idx = preserve_indices(ledger, y_train, epochs, percentile, classes)
    return np.asarray(x_train)[idx], np.asarray(y_train, dtype=np.int64)[idx]


# ------------------------------------------------------------- replay sources


@dataclass(frozen=True, eq=False)
class PreservedSource:
    mission_id: int
    head: int
    rows: np.ndarray
    labels: np.ndarray

    kind = "preserved"

    def __post_init__(self):
        object.__setattr__(self, "rows", np.asarray(self.rows, dtype=np.float64))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        if self.rows.shape[0] != self.labels.shape[0]:
            raise InvalidInput("preserved rows and labels differ in length")

    @property
    def nbytes(self) -> int:
        return int(self.rows.nbytes + self.labels.nbytes)


@dataclass(frozen=True, eq=False)
class GenerativeSource:
    mission_id: int
    head: int
    density: GmmModel | KdeModel
    snapshot: MultiHeadMlp | None
    class_count: int
    method: str
    ks_statistics: dict = field(default_factory=dict)

    kind = "generative"

    def __post_init__(self):
        if self.snapshot is not None:
            if self.head not in self.snapshot.heads:
                raise InvalidInput(f"snapshot has no head {self.head}")
            if self.snapshot.head_width(self.head) < self.class_count:
                raise InvalidInput("snapshot head is narrower than the source's class count")

    @property
    def ks_statistic(self) -> float | None:
        return self.ks_statistics.get(self.method)


ReplaySource = Union[PreservedSource, GenerativeSource]


def choose_density(statistic_gmm: float, statistic_kde: float) -> str:
    """Lower aggregate KS statistic wins; ties go to the GMM."""
    return "kde" if statistic_kde < statistic_gmm else "gmm"


def build_sdg_source(x_train, x_val, snapshot: MultiHeadMlp, head: int, mission_id: int = 0,
                     c_max: int = 50, h_max: float = 0.5, method: str = "auto", seed=0,
                     probe_size: int | None = None) -> GenerativeSource:
    """Fit the density model(s) for one finished mission.

    ``method`` is ``"gmm"``, ``"kde"`` or ``"auto"``; ``auto`` fits both,
    draws a probe of ``min(n_train, 2048)`` rows from each, and keeps the one
    with the lower aggregate KS statistic against the training rows.
    ``snapshot`` is copied.
    """
    if method not in ("auto", "gmm", "kde"):
        raise InvalidInput(f"unknown SDG method {method!r}")
    x_train = np.asarray(x_train, dtype=np.float64)
    x_val = np.asarray(x_val, dtype=np.float64)
    if len(x_train) == 0 or len(x_val) == 0:
        raise InvalidInput("SDG needs non-empty training and validation data")
    probe = min(len(x_train), MAX_PROBE) if probe_size is None else probe_size
    seq = np.random.SeedSequence(seed if isinstance(seed, int) else int(seed))
    fit_seed, gmm_probe_seed, kde_probe_seed = (s.generate_state(1)[0] for s in seq.spawn(3))
    fitted, stats = {}, {}
    if method in ("auto", "gmm"):
        fitted["gmm"] = gmm_select_and_fit(x_train, x_val, c_max=c_max, seed=int(fit_seed))
        stats["gmm"] = ks_two_sample(x_train, fitted["gmm"].sample(probe, int(gmm_probe_seed))).aggregate
    if method in ("auto", "kde"):
        fitted["kde"] = kde_select_and_fit(x_train, x_val, h_max=h_max)
        stats["kde"] = ks_two_sample(x_train, fitted["kde"].sample(probe, int(kde_probe_seed))).aggregate
    chosen = choose_density(stats["gmm"], stats["kde"]) if method == "auto" else method
    snap = snapshot.copy()
    snap.optimizer_state = None
    return GenerativeSource(mission_id, head, fitted[chosen], snap, snap.head_width(head), chosen, stats)


def generate_replay(source: GenerativeSource, count: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``count`` rows from the source density and label them with the
    snapshot's head, restricted to the classes the head had at snapshot time."""
    if not isinstance(source, GenerativeSource):
        raise InvalidInput("generate_replay needs a generative source")
    if source.snapshot is None:
        raise InvalidState("generative source has no label-model snapshot")
    if count < 0:
        raise InvalidInput("count must be non-negative")
    x = source.density.sample(count, seed)
    if count == 0:
        return x, np.zeros(0, dtype=np.int64)
    logits = source.snapshot.logits(x, source.head)[:, :source.class_count]
    return x, np.argmax(logits, axis=1).astype(np.int64)


# --------------------------------------------------------- batch composition


class _CyclingStream:
    """Draws rows without replacement, reshuffling when exhausted."""

    def __init__(self, x, labels, rng):
        self.x, self.labels, self.rng = x, labels, rng
        self.order = rng.permutation(len(labels))
        self.pos = 0

    def take(self, k):
        n = len(self.labels)
        if n == 0:
            raise InvalidState("cannot replay from an empty source")
        picks = []
        while k > 0:
            if self.pos == n:
                self.order = self.rng.permutation(n)
                self.pos = 0
            step = min(k, n - self.pos)
            picks.append(self.order[self.pos:self.pos + step])
            self.pos += step
            k -= step
        idx = np.concatenate(picks) if picks else np.zeros(0, dtype=np.int64)
        return self.x[idx], self.labels[idx]


class _FreshStream:
    def __init__(self, source, rng):
        self.source, self.rng = source, rng

    def take(self, k):
        return generate_replay(self.source, k, int(self.rng.integers(2**63)))


class BalancedBatcher:
    """Epoch-wise provider of balanced, head-tagged mini-batches.

    With ``n`` missions (current plus sources), every batch holds
    ``B // n`` rows per replayed mission and the current mission supplies the
    rest. Current rows are drawn without replacement; an epoch ends when they
    are exhausted (the last batch may be short on current rows). Preserved
    sources cycle through reshuffled permutations. Generative sources sample
    fresh rows for every batch, or, when ``synthetic_pool`` gives a size for
    a mission id, draw from a pool of that many rows regenerated each epoch.
    """

    def __init__(self, x, labels, head: int, mission_id: int, sources: Sequence[ReplaySource],
                 batch_size: int, synthetic_pool: dict[int, int] | None = None):
        self.x = np.asarray(x, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.head, self.mission_id = int(head), int(mission_id)
        self.sources = list(sources)
        n = 1 + len(self.sources)
        if batch_size < n:
            raise InvalidInput(f"batch size {batch_size} is smaller than the {n} missions to balance")
        self.per_mission = batch_size // n
        self.current_take = batch_size - self.per_mission * len(self.sources)
        self.synthetic_pool = dict(synthetic_pool or {})

    def _streams(self, rng):
        streams = []
        for src in self.sources:
            if isinstance(src, PreservedSource):
                streams.append(_CyclingStream(src.rows, src.labels, rng))
            elif src.mission_id in self.synthetic_pool:
                x, y = generate_replay(src, self.synthetic_pool[src.mission_id], int(rng.integers(2**63)))
                streams.append(_CyclingStream(x, y, rng))
            else:
                streams.append(_FreshStream(src, rng))
        return streams

    def __call__(self, epoch: int, rng: np.random.Generator):
        streams = self._streams(rng)
        order = rng.permutation(len(self.labels))
        for start in range(0, len(order), self.current_take):
            yield self._batch(order[start:start + self.current_take], streams)

    def _batch(self, idx, streams) -> TaggedBatch:
        parts = [TaggedBatch.single(self.x[idx], self.labels[idx], self.head, self.mission_id, idx)]
        for src, stream in zip(self.sources, streams):
            xs, ys = stream.take(self.per_mission)
            parts.append(TaggedBatch.single(xs, ys, src.head, src.mission_id))
        return TaggedBatch.concat(parts)


def compose_balanced_batch(current_x, current_labels, sources: Sequence[ReplaySource], batch_size: int, seed,
                           head: int = 0, mission_id: int = 0) -> TaggedBatch:
    """A single balanced batch: ``B // n`` rows per replayed mission and the
    remainder from the current mission."""
    batcher = BalancedBatcher(current_x, current_labels, head, mission_id, sources, batch_size)
    rng = np.random.default_rng(seed)
    streams = batcher._streams(rng)
    idx = rng.permutation(len(batcher.labels))[:batcher.current_take]
    return batcher._batch(idx, streams)


# ---------------------------------------------------------------- persistence


def _file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_source(source: ReplaySource, path, snapshot_path=None) -> None:
    """Write a versioned JSON source file. Generative sources also write the
    label-model snapshot checkpoint (default: next to ``path``) and store its
    relative path and SHA-256."""
    path = Path(path)
    d = {"format": SOURCE_FORMAT, "version": SOURCE_VERSION, "kind": source.kind,
         "mission_id": source.mission_id, "head": source.head}
    if isinstance(source, PreservedSource):
        d["rows"] = source.rows.tolist()
        d["labels"] = source.labels.tolist()
        d["width"] = int(source.rows.shape[1]) if source.rows.ndim == 2 else 0
    else:
        d["density"] = density_to_dict(source.density)
        d["class_count"] = source.class_count
        d["method"] = source.method
        d["ks_statistics"] = source.ks_statistics
        if source.snapshot is not None:
            snap = Path(snapshot_path) if snapshot_path else path.with_name(path.stem + ".snapshot.json")
            save_checkpoint(source.snapshot, snap)
            d["snapshot"] = {"path": snap.name if snap.parent == path.parent else str(snap),
                             "sha256": _file_sha256(snap)}
    path.write_text(json.dumps(d), encoding="utf-8")


def load_source(path) -> ReplaySource:
    path = Path(path)
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
        if d.get("format") != SOURCE_FORMAT or d.get("version") != SOURCE_VERSION:
            raise FormatError(f"unsupported replay source file {d.get('format')!r} v{d.get('version')!r}")
        if d["kind"] == "preserved":
            rows = np.array(d["rows"], dtype=np.float64).reshape(len(d["labels"]), int(d["width"]))
            return PreservedSource(int(d["mission_id"]), int(d["head"]), rows, np.array(d["labels"], dtype=np.int64))
        if d["kind"] != "generative":
            raise FormatError(f"unknown source kind {d['kind']!r}")
        snapshot = None
        if "snapshot" in d:
            snap = path.parent / d["snapshot"]["path"]
            if _file_sha256(snap) != d["snapshot"]["sha256"]:
                raise FormatError(f"snapshot {snap} does not match its recorded hash")
            snapshot = load_checkpoint(snap)
        return GenerativeSource(int(d["mission_id"]), int(d["head"]), density_from_dict(d["density"]), snapshot,
                                int(d["class_count"]), d["method"], dict(d.get("ks_statistics", {})))
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError, OSError) as exc:
        raise FormatError(f"corrupt replay source {path}: {exc}") from exc
