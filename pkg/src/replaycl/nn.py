"""Multi-headed MLP with hand-written backprop and SGD with momentum.

Parameter order (used by gradients, momentum buffers and checkpoints): trunk
layers first, ``W`` then ``b`` per layer, followed by every head in insertion
order, again ``W`` then ``b``. ``W`` has shape ``(out, in)``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .errors import FormatError, InvalidInput, NumericalError

log = logging.getLogger(__name__)

DEFAULT_TRUNK = (155, 256, 128, 128)
PROB_CLAMP = 1e-12
CHECKPOINT_FORMAT = "replaycl-mlp"
CHECKPOINT_VERSION = 1


def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int, rows: int | None = None) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out if rows is None else rows, fan_in))


class MultiHeadMlp:
    """Shared ReLU trunk with one softmax head per task.

    Expansion methods mutate the model in place and return it.
    """

    def __init__(self, trunk_dims=DEFAULT_TRUNK, heads: dict[int, int] | None = None, seed: int = 0):
        trunk_dims = tuple(int(d) for d in trunk_dims)
        if len(trunk_dims) < 2 or any(d < 1 for d in trunk_dims):
            raise InvalidInput(f"invalid trunk dims {trunk_dims}")
        self.trunk_dims = trunk_dims
        self.rng_seed = int(seed)
        self.expansions = 0
        rng = np.random.default_rng(np.random.SeedSequence([self.rng_seed, 0]))
        self.trunk: list[tuple[np.ndarray, np.ndarray]] = []
        for fan_in, fan_out in zip(trunk_dims[:-1], trunk_dims[1:]):
            self.trunk.append((_glorot(rng, fan_out, fan_in), np.zeros(fan_out)))
        self.heads: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self.optimizer_state: list[np.ndarray] | None = None
        for task_id, classes in (heads or {}).items():
            self.add_head(task_id, classes)

    # -- structure

    @property
    def input_width(self) -> int:
        return self.trunk_dims[0]

    @property
    def feature_width(self) -> int:
        return self.trunk_dims[-1]

    def head_width(self, head: int) -> int:
        self._check_head(head)
        return self.heads[head][0].shape[0]

    @property
    def head_classes(self) -> dict[int, int]:
        return {t: w.shape[0] for t, (w, _) in self.heads.items()}

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in self.trunk:
            out += [w, b]
        for w, b in self.heads.values():
            out += [w, b]
        return out

    def set_parameters(self, params: list[np.ndarray]) -> None:
        expected = self.parameters()
        if len(params) != len(expected) or any(p.shape != e.shape for p, e in zip(params, expected)):
            raise InvalidInput("parameter list does not match the model layout")
        it = iter(params)
        self.trunk = [(next(it), next(it)) for _ in self.trunk]
        self.heads = {t: (next(it), next(it)) for t in self.heads}

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def forward_flops(self) -> int:
        """Static cost of one row through the trunk and every head: 2 FLOPs
        per multiply-accumulate, biases and activations not counted."""
        weights = [w for w, _ in self.trunk] + [w for w, _ in self.heads.values()]
        return 2 * int(sum(w.size for w in weights))

    def copy(self) -> "MultiHeadMlp":
        clone = MultiHeadMlp.__new__(MultiHeadMlp)
        clone.trunk_dims = self.trunk_dims
        clone.rng_seed = self.rng_seed
        clone.expansions = self.expansions
        clone.trunk = [(w.copy(), b.copy()) for w, b in self.trunk]
        clone.heads = {t: (w.copy(), b.copy()) for t, (w, b) in self.heads.items()}
        clone.optimizer_state = None if self.optimizer_state is None else [v.copy() for v in self.optimizer_state]
        return clone

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(repr((self.trunk_dims, list(self.head_classes.items()))).encode())
        for p in self.parameters():
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()

    def _check_head(self, head):
        if head not in self.heads:
            raise InvalidInput(f"unknown head {head!r}; model has {list(self.heads)}")

    def _expansion_rng(self) -> np.random.Generator:
        self.expansions += 1
        return np.random.default_rng(np.random.SeedSequence([self.rng_seed, self.expansions]))

    def add_head(self, task_id: int, classes: int) -> "MultiHeadMlp":
        task_id = int(task_id)
        if task_id in self.heads:
            raise InvalidInput(f"head {task_id} already exists")
        if classes < 1:
            raise InvalidInput("a head needs at least one class")
        rng = self._expansion_rng()
        self.heads[task_id] = (_glorot(rng, classes, self.feature_width), np.zeros(classes))
        self.optimizer_state = None
        return self

    def add_output_neurons(self, head: int, new_classes: int) -> "MultiHeadMlp":
        self._check_head(head)
        if new_classes < 0:
            raise InvalidInput("new_classes must be non-negative")
        if new_classes == 0:
            return self
        w, b = self.heads[head]
        rng = self._expansion_rng()
        fresh = _glorot(rng, w.shape[0] + new_classes, self.feature_width, rows=new_classes)
        self.heads[head] = (np.vstack([w, fresh]), np.concatenate([b, np.zeros(new_classes)]))
        self.optimizer_state = None
        return self

    # -- inference

    def _check_batch(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_width:
            raise InvalidInput(f"batch width {x.shape[-1]} != trunk input width {self.input_width}")
        return x

    def features(self, x) -> np.ndarray:
        a = self._check_batch(x)
        for w, b in self.trunk:
            a = np.maximum(a @ w.T + b, 0.0)
        return a

    def logits(self, x, head: int) -> np.ndarray:
        self._check_head(head)
        w, b = self.heads[head]
        return self.features(x) @ w.T + b

    def forward(self, x, head: int) -> np.ndarray:
        self._check_head(head)
        return softmax(self.logits(x, head))

    def predict(self, x, head: int) -> np.ndarray:
        return np.argmax(self.logits(x, head), axis=1)

    def forward_all(self, x) -> dict[int, np.ndarray]:
        """One trunk pass, every head's probabilities."""
        h = self.features(x)
        return {t: softmax(h @ w.T + b) for t, (w, b) in self.heads.items()}


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(model: MultiHeadMlp, batch, head: int) -> np.ndarray:
    return model.forward(batch, head)


def add_head(model: MultiHeadMlp, task_id: int, classes: int) -> MultiHeadMlp:
    return model.add_head(task_id, classes)


def add_output_neurons(model: MultiHeadMlp, head: int, new_classes: int) -> MultiHeadMlp:
    return model.add_output_neurons(head, new_classes)


def cross_entropy(probs: np.ndarray, labels, clamp: float = PROB_CLAMP) -> tuple[float, np.ndarray]:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise InvalidInput("label outside the head's class range")
    per_sample = -np.log(np.maximum(probs[np.arange(len(labels)), labels], clamp))
    mean = float(per_sample.mean()) if per_sample.size else 0.0
    return mean, per_sample


# ------------------------------------------------------------------- training


@dataclass
class TrainConfig:
    learning_rate: float = 0.005
    momentum: float = 0.9
    batch_size: int = 128
    epochs: int = 300
    seed: int = 0

    def validate(self, n_missions: int = 1) -> "TrainConfig":
        if not self.learning_rate > 0:
            raise InvalidInput("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise InvalidInput("momentum must lie in [0, 1)")
        if self.epochs < 0:
            raise InvalidInput("epochs must be non-negative")
        if self.batch_size < max(1, n_missions):
            raise InvalidInput(f"batch_size {self.batch_size} smaller than the {n_missions} replayed missions")
        return self


@dataclass
class TaggedBatch:
    """Mini-batch rows routed to heads. ``labels`` are head-local indices;
    ``source_index`` is the row index in the current mission's training set,
    or -1 for replayed rows."""

    x: np.ndarray
    labels: np.ndarray
    head: np.ndarray
    mission: np.ndarray
    source_index: np.ndarray

    def __len__(self):
        return self.x.shape[0]

    @classmethod
    def single(cls, x, labels, head: int, mission: int = 0, source_index=None) -> "TaggedBatch":
        n = len(labels)
        x = np.asarray(x, dtype=np.float64)
        return cls(
            x.reshape(n, x.shape[-1] if x.ndim == 2 else -1),
            np.asarray(labels, dtype=np.int64),
            np.full(n, head, dtype=np.int64),
            np.full(n, mission, dtype=np.int64),
            np.full(n, -1, dtype=np.int64) if source_index is None else np.asarray(source_index, dtype=np.int64),
        )

    @classmethod
    def concat(cls, parts: list["TaggedBatch"]) -> "TaggedBatch":
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in ("x", "labels", "head", "mission", "source_index")))


def loss_and_gradients(model: MultiHeadMlp, batch: TaggedBatch) -> tuple[float, np.ndarray, list[np.ndarray]]:
    """Total loss (sum over heads of the head's mean cross-entropy), per-sample
    losses in batch order, and gradients aligned with ``model.parameters()``."""
    x = model._check_batch(batch.x)
    unrouted = ~np.isin(batch.head, list(model.heads))
    if unrouted.any():
        raise InvalidInput(f"batch routes rows to unknown heads {sorted(set(batch.head[unrouted]))}")
    acts = [x]
    pre = []
    for w, b in model.trunk:
        z = acts[-1] @ w.T + b
        pre.append(z)
        acts.append(np.maximum(z, 0.0))
    h = acts[-1]
    d_h = np.zeros_like(h)
    per_sample = np.zeros(len(batch))
    total = 0.0
    head_grads = []
    for task_id, (w, b) in model.heads.items():
        mask = batch.head == task_id
        n_h = int(mask.sum())
        if n_h == 0:
            head_grads += [np.zeros_like(w), np.zeros_like(b)]
            continue
        hs = h[mask]
        probs = softmax(hs @ w.T + b)
        mean, losses = cross_entropy(probs, batch.labels[mask])
        per_sample[mask] = losses
        total += mean
        d_logits = probs
        d_logits[np.arange(n_h), batch.labels[mask]] -= 1.0
        d_logits /= n_h
        head_grads += [d_logits.T @ hs, d_logits.sum(axis=0)]
        d_h[mask] += d_logits @ w
    trunk_grads = []
    d_a = d_h
    for layer in range(len(model.trunk) - 1, -1, -1):
        w, _ = model.trunk[layer]
        d_z = d_a * (pre[layer] > 0)
        trunk_grads = [d_z.T @ acts[layer], d_z.sum(axis=0)] + trunk_grads
        if layer:
            d_a = d_z @ w
    return total, per_sample, trunk_grads + head_grads


def train_step(model: MultiHeadMlp, batch: TaggedBatch, config: TrainConfig) -> tuple[float, np.ndarray]:
    """One SGD-momentum update: ``v <- mu*v - lr*grad``, ``theta <- theta + v``.
    Returns the pre-update loss and per-sample losses."""
    if len(batch) == 0:
        return 0.0, np.zeros(0)
    loss, per_sample, grads = loss_and_gradients(model, batch)
    if not all(np.all(np.isfinite(g)) for g in grads) or not math.isfinite(loss):
        raise NumericalError("non-finite gradient or loss; aborting")
    params = model.parameters()
    if model.optimizer_state is None or any(v.shape != p.shape for v, p in zip(model.optimizer_state, params)):
        model.optimizer_state = [np.zeros_like(p) for p in params]
    new_params = []
    for p, v, g in zip(params, model.optimizer_state, grads):
        v *= config.momentum
        v -= config.learning_rate * g
        new_params.append(p + v)
    model.set_parameters(new_params)
    return loss, per_sample


@dataclass
class LossLedger:
    accumulated_loss: np.ndarray
    epochs_recorded: int = 0

    @classmethod
    def zeros(cls, n: int) -> "LossLedger":
        return cls(np.zeros(n), 0)

    def average(self) -> np.ndarray:
        if self.epochs_recorded == 0:
            raise InvalidInput("no epochs recorded")
        return self.accumulated_loss / self.epochs_recorded


BatchProvider = Callable[[int, np.random.Generator], Iterable[TaggedBatch]]


def plain_batches(x: np.ndarray, labels: np.ndarray, head: int, mission_id: int, batch_size: int) -> BatchProvider:
    """Shuffled mini-batches of the current mission alone; the last short
    batch is kept."""
    n = len(labels)

    def provider(epoch, rng):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            yield TaggedBatch.single(x[idx], labels[idx], head, mission_id, idx)

    return provider


def train_mission(
    model: MultiHeadMlp,
    x_train: np.ndarray,
    y_train: np.ndarray,
    config: TrainConfig,
    head: int,
    mission_id: int = 0,
    batches: BatchProvider | None = None,
    validation: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[MultiHeadMlp, LossLedger]:
    """Train one mission for ``config.epochs`` epochs.

    ``y_train`` holds head-local labels. ``batches`` yields one epoch of
    :class:`TaggedBatch` per call; it defaults to plain shuffling of the
    current data. Losses of current-mission rows (``source_index >= 0``) are
    accumulated in the returned ledger; replayed rows are not. Momentum
    buffers are reset at the start.
    """
    config.validate()
    x_train = np.asarray(x_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.int64)
    ledger = LossLedger.zeros(len(y_train))
    if batches is None:
        batches = plain_batches(x_train, y_train, head, mission_id, config.batch_size)
    model.optimizer_state = None
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), int(mission_id), 7]))
    for epoch in range(config.epochs):
        seen = 0
        for batch in batches(epoch, rng):
            _, per_sample = train_step(model, batch, config)
            cur = batch.source_index >= 0
            np.add.at(ledger.accumulated_loss, batch.source_index[cur], per_sample[cur])
            seen += int(cur.sum())
        ledger.epochs_recorded += 1
        if log.isEnabledFor(logging.DEBUG) and (epoch + 1) % 10 == 0:
            msg = f"mission {mission_id} epoch {epoch + 1}: mean loss {ledger.accumulated_loss.sum() / max(seen, 1) / ledger.epochs_recorded:.4f}"
            if validation is not None and len(validation[1]):
                acc = float(np.mean(model.predict(validation[0], head) == validation[1]))
                msg += f", val acc {acc:.3f}"
            log.debug(msg)
    return model, ledger


# ---------------------------------------------------------------- checkpoints


def checkpoint_dict(model: MultiHeadMlp, include_momentum: bool = False) -> dict:
    d = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "trunk_dims": list(model.trunk_dims),
        "heads": {str(t): c for t, c in model.head_classes.items()},
        "head_order": list(model.heads),
        "rng_seed": model.rng_seed,
        "expansions": model.expansions,
        "parameters": [p.ravel().tolist() for p in model.parameters()],
    }
    if include_momentum and model.optimizer_state is not None:
        d["momentum"] = [v.ravel().tolist() for v in model.optimizer_state]
    return d


def model_from_dict(d: dict) -> MultiHeadMlp:
    try:
        if d.get("format") != CHECKPOINT_FORMAT:
            raise FormatError(f"not a model checkpoint (format={d.get('format')!r})")
        if d.get("version") != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {d.get('version')!r}")
        model = MultiHeadMlp.__new__(MultiHeadMlp)
        model.trunk_dims = tuple(int(v) for v in d["trunk_dims"])
        model.rng_seed = int(d["rng_seed"])
        model.expansions = int(d["expansions"])
        order = [int(t) for t in d["head_order"]]
        widths = {int(t): int(c) for t, c in d["heads"].items()}
        shapes = []
        for fan_in, fan_out in zip(model.trunk_dims[:-1], model.trunk_dims[1:]):
            shapes += [(fan_out, fan_in), (fan_out,)]
        for t in order:
            shapes += [(widths[t], model.trunk_dims[-1]), (widths[t],)]
        flat = d["parameters"]
        if len(flat) != len(shapes):
            raise FormatError("parameter array count does not match the layout")
        arrays = []
        for values, shape in zip(flat, shapes):
            a = np.array(values, dtype=np.float64)
            if a.size != int(np.prod(shape)):
                raise FormatError(f"parameter array of size {a.size} does not fit shape {shape}")
            arrays.append(a.reshape(shape))
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"corrupt checkpoint: {exc}") from exc
    it = iter(arrays)
    model.trunk = [(next(it), next(it)) for _ in model.trunk_dims[1:]]
    model.heads = {t: (next(it), next(it)) for t in order}
    model.optimizer_state = None
    if "momentum" in d:
        model.optimizer_state = [np.array(v, dtype=np.float64).reshape(p.shape) for v, p in zip(d["momentum"], arrays)]
    if not all(np.all(np.isfinite(p)) for p in arrays):
        raise FormatError("checkpoint contains non-finite parameters")
    return model


def save_checkpoint(model: MultiHeadMlp, path, include_momentum: bool = False) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint_dict(model, include_momentum), fh)


def load_checkpoint(path) -> MultiHeadMlp:
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint {path}: {exc}") from exc
    if not isinstance(d, dict):
        raise FormatError("checkpoint root must be an object")
    return model_from_dict(d)
