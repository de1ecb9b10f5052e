"""Weakly supervised triplet training: tuple mining, hinge loss, SGD.

A training example is a tuple (q, {p_i}, {n_j}): a query image, the
geotagged images within the positive radius, and hard negatives drawn
from beyond the negative radius. The loss is the weak-supervision
hinge over squared Euclidean distances between unit descriptors,

    L = sum_j max(0, min_i d2(q, p_i) + margin - d2(q, n_j)),

so only the best positive and the violating negatives carry gradient.
Mining ranks candidates with a descriptor cache refreshed once per
epoch; the in-graph distances always use the current weights.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from .netvlad import descriptor_graph
from .rng import lane_rng
from .tensor import Tensor, amin_first, no_grad, relu, tsum

__all__ = [
    "NumericalError",
    "TripletTuple",
    "TripletLossConfig",
    "SgdConfig",
    "EpochStats",
    "calibrate_batchnorm",
    "triplet_loss",
    "mine_tuple",
    "sgd_step",
    "SgdOptimizer",
    "Trainer",
    "train_epoch",
]


def calibrate_batchnorm(model, batches, passes: int = 3):
    """Settle BatchNorm running statistics on real data before use.

    A freshly built model still carries the mean 0 / variance 1
    initial estimates, so inference-mode activations are effectively
    un-normalized and disagree with what any training-mode forward
    produces. Running a few gradient-free training-mode passes over
    ``batches`` (a sequence of NCHW arrays, reused ``passes`` times)
    folds real statistics into the exponential estimates and brings
    the two modes into agreement. Returns the model.
    """
    for _ in range(passes):
        for batch in batches:
            with no_grad():
                model(Tensor(batch), training=True)
    return model


class NumericalError(RuntimeError):
    """Loss or gradients left the realm of finite numbers."""


@dataclass(frozen=True)
class TripletTuple:
    """A query with its potential positives and chosen hard negatives."""

    query_id: str
    positive_ids: tuple
    negative_ids: tuple

    def __post_init__(self):
        if not self.positive_ids or not self.negative_ids:
            raise ValueError(f"{self.query_id}: positive and negative sets must be non-empty")
        pos, neg = set(self.positive_ids), set(self.negative_ids)
        if self.query_id in pos or self.query_id in neg or pos & neg:
            raise ValueError(f"{self.query_id}: tuple sets must be disjoint and exclude the query")


@dataclass
class TripletLossConfig:
    """Margin, tuple sizes, and the mining radii in meters."""

    margin: float = 0.1
    negatives_per_tuple: int = 10
    positive_radius_m: float = 10.0
    negative_radius_m: float = 25.0
    candidate_pool: int = 100

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.negative_radius_m <= self.positive_radius_m:
            raise ValueError("negative radius must exceed positive radius")
        if self.negatives_per_tuple < 1 or self.candidate_pool < self.negatives_per_tuple:
            raise ValueError("candidate pool must cover negatives_per_tuple")


@dataclass
class SgdConfig:
    """Plain SGD with momentum and decoupled-from-nothing weight decay."""

    learning_rate: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-3
    batch_size: int = 4

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


def triplet_loss(pos_d2, neg_d2, margin: float = 0.1) -> Tensor:
    """Hinge loss over squared distances; differentiable in both lists.

    The minimum over positives takes the first index on exact ties;
    a hinge sitting exactly at zero contributes no gradient.
    """
    pos = pos_d2 if isinstance(pos_d2, Tensor) else Tensor(np.asarray(pos_d2, dtype=np.float64))
    neg = neg_d2 if isinstance(neg_d2, Tensor) else Tensor(np.asarray(neg_d2, dtype=np.float64))
    if pos.size == 0 or neg.size == 0:
        raise ValueError("positive and negative distance lists must be non-empty")
    if np.any(pos.data < 0) or np.any(neg.data < 0):
        raise ValueError("squared distances must be non-negative")
    best = amin_first(pos)
    return tsum(relu(best + margin - neg))


def mine_tuple(query, records, descriptors, cfg: TripletLossConfig, rng) -> TripletTuple:
    """Build a training tuple for ``query`` or return None to skip.

    Positives are every other record within the positive radius,
    ordered easiest-first by cached descriptor distance (ties by id).
    Negatives are drawn as a seeded sample of up to ``candidate_pool``
    records beyond the negative radius, keeping the
    ``negatives_per_tuple`` hardest under the same cached metric.
    """
    qx, qy = query.x_m, query.y_m
    q_desc = descriptors[query.id]

    def d2(other_id):
        diff = descriptors[other_id] - q_desc
        return float(np.dot(diff, diff))

    positives, negatives = [], []
    for r in records:
        if r.id == query.id:
            continue
        dist = math.hypot(r.x_m - qx, r.y_m - qy)
        if dist <= cfg.positive_radius_m:
            positives.append(r.id)
        elif dist > cfg.negative_radius_m:
            negatives.append(r.id)
    if not positives or not negatives:
        return None

    positives.sort(key=lambda i: (d2(i), i))
    if len(negatives) > cfg.candidate_pool:
        picked = rng.choice(len(negatives), size=cfg.candidate_pool, replace=False)
        candidates = [negatives[i] for i in sorted(picked)]
    else:
        candidates = negatives
    candidates.sort(key=lambda i: (d2(i), i))
    hardest = tuple(candidates[: cfg.negatives_per_tuple])
    return TripletTuple(query_id=query.id, positive_ids=tuple(positives), negative_ids=hardest)


def sgd_step(param: np.ndarray, grad: np.ndarray, buffer: np.ndarray, cfg: SgdConfig):
    """One momentum-SGD update; returns (new_param, new_buffer)."""
    param = np.asarray(param)
    grad = np.asarray(grad)
    buffer = np.asarray(buffer)
    if not (param.shape == grad.shape == buffer.shape):
        raise ValueError(f"shape mismatch: {param.shape} vs {grad.shape} vs {buffer.shape}")
    g = grad + cfg.weight_decay * param
    v = cfg.momentum * buffer + g
    return param - cfg.learning_rate * v, v


class SgdOptimizer:
    """Applies sgd_step across named parameters, holding the buffers."""

    def __init__(self, named_params, cfg: SgdConfig):
        self.cfg = cfg
        self.params = list(named_params)
        self.buffers = {name: np.zeros_like(t.data) for name, t in self.params}

    def zero_grad(self):
        for _, tensor in self.params:
            tensor.grad = None

    def step(self):
        for name, tensor in self.params:
            if tensor.grad is None:
                continue
            if not np.all(np.isfinite(tensor.grad)):
                raise NumericalError(f"non-finite gradient in {name}")
            new_param, new_buffer = sgd_step(tensor.data, tensor.grad, self.buffers[name], self.cfg)
            tensor.data = new_param.astype(tensor.data.dtype)
            self.buffers[name] = new_buffer.astype(tensor.data.dtype)

    def state_arrays(self) -> dict:
        return {f"opt.{name}": buf for name, buf in self.buffers.items()}

    def load_state_arrays(self, arrays: dict):
        for name in self.buffers:
            key = f"opt.{name}"
            if key in arrays:
                self.buffers[name] = np.asarray(arrays[key], dtype=self.buffers[name].dtype).copy()


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_loss: float
    tuples_used: int
    batches: int


class Trainer:
    """Epoch loop: cache descriptors, mine, batch tuples, update.

    ``records`` is the geotagged training pool; every record takes a
    turn as the query while the rest supply positives and negatives.
    Images come from ``root``/record.image resized to ``size_hw``. A
    checkpoint (weights, running statistics, VLAD parameters, momentum
    buffers) lands in ``out_dir`` after every epoch when it is set.
    """

    def __init__(
        self,
        model,
        vlad,
        records,
        root,
        size_hw,
        loss_cfg: TripletLossConfig = None,
        sgd_cfg: SgdConfig = None,
        seed: int = 0,
        out_dir=None,
        log=None,
        extract_batch: int = 32,
        max_tuples_per_epoch: int = None,
    ):
        from .images import load_image_chw  # local import keeps module load light

        self.model = model
        self.vlad = vlad
        self.records = sorted(records, key=lambda r: r.id)
        if not self.records:
            raise ValueError("training pool is empty")
        self.root = Path(root)
        self.size_hw = tuple(size_hw)
        self.loss_cfg = loss_cfg or TripletLossConfig()
        self.sgd_cfg = sgd_cfg or SgdConfig()
        self.seed = seed
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.log = log if log is not None else sys.stderr
        self.extract_batch = extract_batch
        self.max_tuples_per_epoch = max_tuples_per_epoch
        self._load_image = load_image_chw

        named = list(model.named_parameters()) + list(vlad.named_parameters())
        self.optimizer = SgdOptimizer(named, self.sgd_cfg)
        self._by_id = {r.id: r for r in self.records}
        self._images = {}  # id -> CHW float32, loaded once

    def _image(self, record_id: str) -> np.ndarray:
        if record_id not in self._images:
            record = self._by_id[record_id]
            self._images[record_id] = self._load_image(self.root / record.image, self.size_hw)
        return self._images[record_id]

    def descriptor_cache(self) -> dict:
        """Inference-mode descriptors for every record, id-keyed."""
        cache = {}
        ids = [r.id for r in self.records]
        with no_grad():
            for start in range(0, len(ids), self.extract_batch):
                chunk = ids[start : start + self.extract_batch]
                batch = np.stack([self._image(i) for i in chunk])
                rows = descriptor_graph(Tensor(batch), self.model, self.vlad, training=False).data
                for row_id, row in zip(chunk, rows):
                    cache[row_id] = row.astype(np.float32)
        return cache

    def _batch_loss(self, tuples) -> Tensor:
        """Mean per-tuple loss over one batched training forward.

        The forward keeps BatchNorm in inference mode: the batch is a
        handful of tuples whose images mostly share a place, so batch
        statistics would cancel the very signature being learned, and
        the loss would no longer measure the descriptors retrieval
        sees. With frozen statistics the objective and the evaluation
        share one descriptor function; gamma and beta still receive
        gradients through the affine transform.
        """
        ids, segments = [], []
        for t in tuples:
            start = len(ids)
            ids.append(t.query_id)
            ids.extend(t.positive_ids)
            ids.extend(t.negative_ids)
            segments.append((start, len(t.positive_ids), len(t.negative_ids)))
        batch = np.stack([self._image(i) for i in ids])
        desc = descriptor_graph(Tensor(batch), self.model, self.vlad, training=False)

        total = None
        for start, n_pos, n_neg in segments:
            q = desc[start]
            pos = desc[start + 1 : start + 1 + n_pos]
            neg = desc[start + 1 + n_pos : start + 1 + n_pos + n_neg]
            pos_d2 = tsum((pos - q) ** 2, axis=1)
            neg_d2 = tsum((neg - q) ** 2, axis=1)
            loss = triplet_loss(pos_d2, neg_d2, self.loss_cfg.margin)
            total = loss if total is None else total + loss
        return total * (1.0 / len(tuples))

    def train_epoch(self, epoch: int) -> EpochStats:
        cache = self.descriptor_cache()
        shuffle_rng = lane_rng(self.seed, f"epoch.{epoch}.shuffle")
        mine_rng = lane_rng(self.seed, f"epoch.{epoch}.mine")
        order = [self.records[i] for i in shuffle_rng.permutation(len(self.records))]

        tuples = []
        for query in order:
            mined = mine_tuple(query, self.records, cache, self.loss_cfg, mine_rng)
            if mined is not None:
                tuples.append(mined)
            if self.max_tuples_per_epoch and len(tuples) >= self.max_tuples_per_epoch:
                break
        if not tuples:
            raise ValueError("no minable tuples in the training pool")

        losses = []
        batch_size = self.sgd_cfg.batch_size
        for b, start in enumerate(range(0, len(tuples), batch_size)):
            chunk = tuples[start : start + batch_size]
            self.optimizer.zero_grad()
            loss = self._batch_loss(chunk)
            value = float(loss.item())
            if not math.isfinite(value):
                raise NumericalError(f"epoch {epoch} batch {b}: loss is {value}")
            loss.backward()
            self.optimizer.step()
            losses.append(value)
            print(f"epoch {epoch} batch {b} loss {value:.4f} tuples {len(chunk)}", file=self.log)

        stats = EpochStats(
            epoch=epoch,
            mean_loss=float(np.mean(losses)),
            tuples_used=len(tuples),
            batches=len(losses),
        )
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            checkpoint.save_arrays(self.out_dir / f"epoch_{epoch:03d}.gdnv", self.state_arrays())
        return stats

    def state_arrays(self) -> dict:
        arrays = dict(self.model.state_arrays())
        arrays.update(self.vlad.state_arrays())
        arrays.update(self.optimizer.state_arrays())
        return arrays

    def fit(self, epochs: int, target_loss: float = None):
        """Run up to ``epochs`` epochs, stopping early once the mean
        epoch loss reaches ``target_loss``. Returns all EpochStats."""
        history = []
        for epoch in range(epochs):
            stats = self.train_epoch(epoch)
            history.append(stats)
            if target_loss is not None and stats.mean_loss <= target_loss:
                break
        return history


def train_epoch(trainer: Trainer, epoch: int) -> EpochStats:
    """Run one epoch of ``trainer`` (operation-style entry point)."""
    return trainer.train_epoch(epoch)
