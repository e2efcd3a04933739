"""Domain-, class- and task-incremental runners, baselines and CL metrics."""

from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data import MissionSpec, ScenarioRole, SplitDataset, TabularDataset
from .errors import InvalidInput
from .nn import MultiHeadMlp, TrainConfig, plain_batches, train_mission
from .replay import (
    BalancedBatcher,
    GenerativeSource,
    PreservationConfig,
    PreservedSource,
    build_sdg_source,
    preserve_data,
)

log = logging.getLogger(__name__)

HIDDEN = (256, 128, 128)
CSV_COLUMNS = ("scenario", "strategy", "seed", "status", "M1_acc", "M2_acc", "M3_acc",
               "acc_avg", "f1_avg", "bwt", "ks_statistic", "buffer_mb")
BYTES_PER_MB = 1_000_000


class Scenario(str, enum.Enum):
    domain = "domain"
    class_ = "class"
    task = "task"

    @property
    def role(self) -> ScenarioRole:
        return {"domain": ScenarioRole.DomainShift, "class": ScenarioRole.NewClasses,
                "task": ScenarioRole.NewTask}[self.value]


class StrategyId(str, enum.Enum):
    Baseline = "Baseline"
    NaiveFineTune = "NaiveFineTune"
    DoctorDP = "DoctorDP"
    DoctorSdgGmm = "DoctorSdgGmm"
    DoctorSdgKde = "DoctorSdgKde"
    DoctorSdgAuto = "DoctorSdgAuto"
    JointTraining = "JointTraining"

    @property
    def sdg_method(self) -> str | None:
        return {"DoctorSdgGmm": "gmm", "DoctorSdgKde": "kde", "DoctorSdgAuto": "auto"}.get(self.value)


@dataclass
class ScenarioConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    preservation: PreservationConfig = field(default_factory=PreservationConfig)
    c_max: int = 50
    h_max: float = 0.5
    # synthetic pool per replayed mission, as a fraction of its real training size
    synthetic_fraction: float = 1.0
    hidden: tuple[int, ...] = HIDDEN

    def validate(self) -> "ScenarioConfig":
        self.train.validate()
        if not 0 < self.synthetic_fraction <= 1:
            raise InvalidInput("synthetic_fraction must lie in (0, 1]")
        if self.c_max < 1 or self.h_max < 0.05:
            raise InvalidInput("c_max must be >= 1 and h_max >= 0.05")
        return self


# -------------------------------------------------------------------- metrics


class AccuracyMatrix:
    """``a[n][q]``: test accuracy on mission ``n`` after learning missions
    ``0..q`` (0-based). Entries with ``n > q`` stay undefined; a diagonal
    entry cannot be overwritten once set. ``None`` marks a mission that was
    evaluated but has no head to answer with."""

    def __init__(self, n_missions: int):
        self.n = n_missions
        self._a = np.full((n_missions, n_missions), np.nan)
        self._absent = np.zeros((n_missions, n_missions), dtype=bool)

    def set(self, n: int, q: int, value: float | None) -> None:
        if n > q:
            raise InvalidInput("accuracy is only defined for n <= q")
        if n == q and (not math.isnan(self._a[n, q]) or self._absent[n, q]):
            raise InvalidInput(f"diagonal entry a[{n}][{n}] is already set")
        if value is None:
            self._absent[n, q] = True
            return
        if not 0.0 <= value <= 1.0:
            raise InvalidInput("accuracy must lie in [0, 1]")
        self._a[n, q] = value

    def get(self, n: int, q: int) -> float | None:
        v = self._a[n, q]
        return None if math.isnan(v) else float(v)

    def row(self, q: int) -> list[float | None]:
        return [self.get(n, q) for n in range(q + 1)]

    def to_list(self) -> list[list[float | None]]:
        return [[self.get(n, q) for q in range(self.n)] for n in range(self.n)]

    @classmethod
    def from_list(cls, rows: Sequence[Sequence[float | None]]) -> "AccuracyMatrix":
        m = cls(len(rows))
        for n, row in enumerate(rows):
            for q, v in enumerate(row):
                if v is not None and n <= q:
                    m._a[n, q] = v
        return m


def compute_bwt(m: AccuracyMatrix, q: int) -> float:
    """Backward transfer after learning ``q`` missions (1-based ``q``)."""
    if q < 2:
        raise InvalidInput("BWT needs at least two learned missions")
    diffs = []
    for n in range(q - 1):
        late, early = m.get(n, q - 1), m.get(n, n)
        if late is None or early is None:
            raise InvalidInput(f"accuracy entries for mission {n + 1} are missing")
        diffs.append(late - early)
    return float(sum(diffs) / (q - 1))


def evaluate(model: MultiHeadMlp, head: int, test: TabularDataset, class_offset: int = 0) -> tuple[float, np.ndarray]:
    """Argmax accuracy and confusion counts (rows: true, cols: predicted).

    Labels are shifted by ``class_offset`` to head-local indices. A label at
    or beyond the head width can never be predicted and counts as an error;
    the confusion matrix is widened to hold it.
    """
    if len(test) == 0:
        raise InvalidInput("empty test set")
    local = test.labels - class_offset
    if local.min() < 0:
        raise InvalidInput("label below the class offset")
    pred = model.predict(test.features, head)
    size = max(model.head_width(head), int(local.max()) + 1)
    conf = np.zeros((size, size), dtype=np.int64)
    np.add.at(conf, (local, pred), 1)
    return float(np.trace(conf) / len(local)), conf


def f1_binary(conf: np.ndarray, healthy) -> float:
    """F1 with every non-healthy class treated as positive; 1.0 when there
    are neither positives nor predicted positives."""
    healthy = {healthy} if isinstance(healthy, (int, np.integer)) else set(healthy)
    neg = np.array([i in healthy for i in range(conf.shape[0])])
    tp = conf[~neg][:, ~neg].sum()
    fp = conf[neg][:, ~neg].sum()
    fn = conf[~neg][:, neg].sum()
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else float(2 * tp / denom)


def compute_avg_f1(confusions: Sequence[np.ndarray], healthy_class_ids: Sequence) -> float:
    if len(confusions) != len(healthy_class_ids) or not confusions:
        raise InvalidInput("need one healthy-class designation per confusion matrix")
    return float(np.mean([f1_binary(c, h) for c, h in zip(confusions, healthy_class_ids)]))


def multi_disease_inference(model: MultiHeadMlp, row) -> dict[int, tuple[int, np.ndarray]]:
    """Every head's prediction for one input row from a single trunk pass."""
    probs = model.forward_all(np.asarray(row, dtype=np.float64).reshape(1, -1))
    return {t: (int(np.argmax(p[0])), p[0]) for t, p in probs.items()}


# --------------------------------------------------------------------- report


@dataclass
class ExperimentReport:
    scenario: str
    strategy: str
    seed: int
    per_mission_acc: list
    acc_avg: float
    f1_avg: float
    bwt: float | None
    buffer_bytes: int
    ks_statistic: float | None
    accuracy_matrix: list
    ks_statistics: list = field(default_factory=list)
    wall_time: float = 0.0
    status: str = "ok"
    model: MultiHeadMlp | None = field(default=None, repr=False, compare=False)
    # head -> global class id of every output neuron
    class_ids: dict = field(default_factory=dict, repr=False, compare=False)

    def to_json(self) -> dict:
        return {
            "scenario": self.scenario, "strategy": self.strategy, "seed": self.seed,
            "status": self.status, "per_mission_acc": self.per_mission_acc, "acc_avg": self.acc_avg,
            "f1_avg": self.f1_avg, "bwt": self.bwt, "buffer_bytes": self.buffer_bytes,
            "ks_statistic": self.ks_statistic, "ks_statistics": self.ks_statistics,
            "accuracy_matrix": self.accuracy_matrix, "wall_time": self.wall_time,
        }

    def csv_row(self) -> dict:
        accs = list(self.per_mission_acc) + [None] * 3
        row = {
            "scenario": self.scenario, "strategy": self.strategy, "seed": self.seed, "status": self.status,
            "M1_acc": accs[0], "M2_acc": accs[1], "M3_acc": accs[2],
            "acc_avg": self.acc_avg, "f1_avg": self.f1_avg, "bwt": self.bwt,
            "ks_statistic": self.ks_statistic, "buffer_mb": self.buffer_bytes / BYTES_PER_MB,
        }
        return {k: _fmt(v) for k, v in row.items()}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".6f")
    return str(v)


# --------------------------------------------------------------------- runner


class _ClassMap:
    """Global class id -> head-local index, appended in arrival order."""

    def __init__(self):
        self.classes: dict[int, list[int]] = {}

    def local(self, head: int, labels: np.ndarray) -> np.ndarray:
        known = self.classes.get(head, [])
        lut = {c: i for i, c in enumerate(known)}
        # unknown classes land past the head width, where they are never predicted
        return np.array([lut.get(int(c), len(known)) for c in labels], dtype=np.int64)


def _mapped(ds: TabularDataset, labels: np.ndarray) -> TabularDataset:
    return TabularDataset(ds.features, labels)


def _check_missions(scenario: Scenario, missions) -> None:
    if not missions:
        raise InvalidInput("no missions given")
    seen_tasks = set()
    for spec, split in missions:
        if spec.scenario_role is not scenario.role:
            raise InvalidInput(f"mission {spec.mission_id} has role {spec.scenario_role.value}, "
                               f"scenario {scenario.value} needs {scenario.role.value}")
        if scenario is Scenario.task and spec.task_id in seen_tasks:
            raise InvalidInput(f"task {spec.task_id} appears twice in a task-incremental run")
        if scenario is not Scenario.task and spec.task_id != missions[0][0].task_id:
            raise InvalidInput("domain/class-incremental missions must share one task")
        seen_tasks.add(spec.task_id)
    width = missions[0][1].train.n_features
    if any(split.train.n_features != width for _, split in missions):
        raise InvalidInput("missions differ in feature width")


def run_scenario(scenario, missions: Sequence[tuple[MissionSpec, SplitDataset]], strategy,
                 config: ScenarioConfig | None = None) -> ExperimentReport:
    """Learn ``missions`` in order with ``strategy`` and fill the accuracy
    matrix after every mission. The returned report carries the final model."""
    scenario, strategy = Scenario(scenario), StrategyId(strategy)
    config = (config or ScenarioConfig()).validate()
    _check_missions(scenario, missions)
    started = time.perf_counter()
    seed = int(config.train.seed)
    q_total = len(missions)
    width = missions[0][1].train.n_features
    model = MultiHeadMlp((width, *config.hidden), seed=seed)
    cmap = _ClassMap()
    sources: list = []
    acc = AccuracyMatrix(q_total)
    final_conf: dict[int, np.ndarray | None] = {}

    for q, (spec, split) in enumerate(missions):
        train_now = not (strategy is StrategyId.Baseline and q > 0)
        if train_now:
            _expand(model, cmap, scenario, spec)
            head = spec.task_id
            y_tr = cmap.local(head, split.train.labels)
            x_tr = split.train.features
            y_val = cmap.local(head, split.validation.labels)
            if sources:
                pool = {s.mission_id: max(1, round(config.synthetic_fraction * s.train_size))
                        for s in sources if isinstance(s.source, GenerativeSource)}
                batches = BalancedBatcher(x_tr, y_tr, head, q, [s.source for s in sources],
                                          config.train.batch_size, pool)
                config.train.validate(1 + len(sources))
            else:
                batches = plain_batches(x_tr, y_tr, head, q, config.train.batch_size)
            model, ledger = train_mission(model, x_tr, y_tr, config.train, head, q, batches,
                                          validation=(split.validation.features, y_val))
            if q < q_total - 1:
                src = _build_source(strategy, config, model, spec, split, x_tr, y_tr, ledger, q)
                if src is not None:
                    sources.append(_Tracked(src, len(y_tr)))
        for n in range(q + 1):
            n_spec, n_split = missions[n]
            if n_spec.task_id not in model.heads:
                acc.set(n, q, None)
                final_conf[n] = None
                continue
            labels = cmap.local(n_spec.task_id, n_split.test.labels)
            a, conf = evaluate(model, n_spec.task_id, _mapped(n_split.test, labels))
            acc.set(n, q, a)
            final_conf[n] = conf
        log.info("%s/%s seed %d after mission %d: %s", scenario.value, strategy.value, seed, q + 1,
                 ["-" if v is None else round(v, 3) for v in acc.row(q)])

    last = q_total - 1
    row = acc.row(last)
    present = [n for n in range(q_total) if row[n] is not None]
    confs, healthy = [], []
    for n in present:
        n_spec = missions[n][0]
        known = cmap.classes.get(n_spec.task_id, [])
        h = n_spec.healthy_class
        healthy.append({known.index(h)} if h in known else set())
        confs.append(final_conf[n])
    bwt = None
    if q_total >= 2 and strategy is not StrategyId.Baseline:
        bwt = compute_bwt(acc, q_total)
    ks = [s.source.ks_statistic for s in sources if isinstance(s.source, GenerativeSource)]
    buffer = sum(s.source.nbytes for s in sources if isinstance(s.source, PreservedSource))
    return ExperimentReport(
        scenario=scenario.value, strategy=strategy.value, seed=seed, per_mission_acc=row,
        acc_avg=float(np.mean([row[n] for n in present])),
        f1_avg=compute_avg_f1(confs, healthy),
        bwt=bwt, buffer_bytes=int(buffer),
        ks_statistic=float(np.mean(ks)) if ks else None,
        accuracy_matrix=acc.to_list(), ks_statistics=[float(k) for k in ks],
        wall_time=time.perf_counter() - started, model=model,
        class_ids={h: list(c) for h, c in cmap.classes.items()},
    )


@dataclass
class _Tracked:
    source: object
    train_size: int

    @property
    def mission_id(self):
        return self.source.mission_id


def _expand(model: MultiHeadMlp, cmap: _ClassMap, scenario: Scenario, spec: MissionSpec) -> None:
    head = spec.task_id
    incoming = sorted(spec.class_ids)
    if head not in model.heads:
        if model.heads and scenario is not Scenario.task:
            raise InvalidInput("only task-incremental runs may add heads")
        model.add_head(head, len(incoming))
        cmap.classes[head] = incoming
        return
    new = [c for c in incoming if c not in cmap.classes[head]]
    if not new:
        return
    if scenario is not Scenario.class_:
        raise InvalidInput(f"mission {spec.mission_id} introduces classes {new} outside a class-incremental run")
    model.add_output_neurons(head, len(new))
    cmap.classes[head] += new


def _build_source(strategy, config, model, spec, split, x_tr, y_tr, ledger, q):
    head = spec.task_id
    if strategy is StrategyId.DoctorDP:
        x_p, y_p = preserve_data(ledger, x_tr, y_tr, percentile=config.preservation.percentile)
        return PreservedSource(q, head, x_p, y_p)
    if strategy is StrategyId.JointTraining:
        return PreservedSource(q, head, x_tr.copy(), y_tr.copy())
    if strategy.sdg_method is not None:
        sdg_seed = int(np.random.SeedSequence([int(config.train.seed), q, 11]).generate_state(1)[0])
        src = build_sdg_source(x_tr, split.validation.features, model, head, q, c_max=config.c_max,
                               h_max=config.h_max, method=strategy.sdg_method, seed=sdg_seed)
        log.info("mission %d SDG: %s chosen, KS %s", q + 1, src.method,
                 {k: round(v, 4) for k, v in src.ks_statistics.items()})
        return src
    return None


def run_seeds(scenario, missions, strategy, config: ScenarioConfig, seeds: Iterable[int]) -> list[ExperimentReport]:
    out = []
    for s in seeds:
        cfg = ScenarioConfig(
            TrainConfig(config.train.learning_rate, config.train.momentum, config.train.batch_size,
                        config.train.epochs, int(s)),
            config.preservation, config.c_max, config.h_max, config.synthetic_fraction, config.hidden,
        )
        out.append(run_scenario(scenario, missions, strategy, cfg))
    return out


def mean_report(reports: Sequence[ExperimentReport]) -> dict:
    """Seed-averaged metrics."""

    def avg(values):
        values = [v for v in values if v is not None]
        return float(np.mean(values)) if values else None

    q = max(len(r.per_mission_acc) for r in reports)
    return {
        "per_mission_acc": [avg([r.per_mission_acc[n] for r in reports]) for n in range(q)],
        "acc_avg": avg([r.acc_avg for r in reports]),
        "f1_avg": avg([r.f1_avg for r in reports]),
        "bwt": avg([r.bwt for r in reports]),
        "diag": [avg([r.accuracy_matrix[n][n] for r in reports]) for n in range(q)],
    }
