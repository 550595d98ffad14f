"""Training loop: per-batch preference sampling, scalarized loss, and
adaptive-moment (or plain SGD) updates on the manual gradients."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod
from .model import Batch, Gradients, Hyperparams, ModelParams, PARAM_FIELDS
from .objectives import DirichletParams, LossConfig, sample_preference
from .sessions import Dataset


class TrainError(RuntimeError):
    pass


@dataclass
class TrainOptions:
    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    update_position_decay: bool = False
    dirichlet_beta: tuple[float, float] = (0.5, 0.5)
    epsilon_clip: float = 1e-4


def build_examples(dataset: Dataset, max_prefix_len: int) -> Batch | None:
    """Expand sessions into padded next-item examples.

    Position t of a session yields (prefix = clicks up to t, target =
    click t+1, label = target's order flag). Prefixes keep only the most
    recent ``max_prefix_len`` items. Returns None when no session is long
    enough to yield an example.
    """
    prefix_rows: list[np.ndarray] = []
    lengths: list[int] = []
    targets: list[int] = []
    orders: list[int] = []
    for s in dataset.sessions:
        items = [item for item, _ in s.pairs]
        flags = [o for _, o in s.pairs]
        for t in range(1, len(items)):
            lo = max(0, t - max_prefix_len)
            prefix_rows.append(np.asarray(items[lo:t], dtype=np.int64))
            lengths.append(t - lo)
            targets.append(items[t])
            orders.append(flags[t])
    if not targets:
        return None
    n = len(targets)
    width = max(lengths)
    prefixes = np.full((n, width), -1, dtype=np.int64)
    for i, row in enumerate(prefix_rows):
        prefixes[i, : len(row)] = row
    return Batch(
        prefixes=prefixes,
        lengths=np.asarray(lengths, dtype=np.int64),
        targets=np.asarray(targets, dtype=np.int64),
        orders=np.asarray(orders, dtype=np.float64),
    )


class AdamState:
    def __init__(self, params: ModelParams):
        self.m = {k: np.zeros_like(np.asarray(getattr(params, k))) for k in PARAM_FIELDS}
        self.v = {k: np.zeros_like(np.asarray(getattr(params, k))) for k in PARAM_FIELDS}
        self.t = 0


def _apply_update(params: ModelParams, grads: Gradients, opt: TrainOptions,
                  adam: AdamState | None) -> None:
    skip_decay = not opt.update_position_decay
    if opt.optimizer == "adam":
        adam.t += 1
        bc1 = 1.0 - opt.adam_beta1 ** adam.t
        bc2 = 1.0 - opt.adam_beta2 ** adam.t
        for name in PARAM_FIELDS:
            if name == "position_decay" and skip_decay:
                continue
            g = np.asarray(getattr(grads, name))
            adam.m[name] = opt.adam_beta1 * adam.m[name] + (1 - opt.adam_beta1) * g
            adam.v[name] = opt.adam_beta2 * adam.v[name] + (1 - opt.adam_beta2) * g * g
            step = opt.learning_rate * (adam.m[name] / bc1) / (np.sqrt(adam.v[name] / bc2) + opt.adam_eps)
            setattr(params, name, np.asarray(getattr(params, name)) - step)
    else:
        for name in PARAM_FIELDS:
            if name == "position_decay" and skip_decay:
                continue
            g = np.asarray(getattr(grads, name))
            setattr(params, name, np.asarray(getattr(params, name)) - opt.learning_rate * g)
    if opt.update_position_decay:
        setattr(params, "position_decay", np.clip(params.position_decay, 1e-3, 1.0))


def train(params: ModelParams, hp: Hyperparams, train_set: Dataset | Batch,
          loss_cfg: LossConfig, opt: TrainOptions, seed: int,
          start_epoch: int = 0) -> tuple[ModelParams, list[dict]]:
    """Train for ``opt.epochs`` epochs; returns updated params and the
    per-epoch mean loss breakdown log.

    A fresh preference vector is drawn per batch (the Monte Carlo estimate
    of the expectation over preferences). Deterministic given the seed.
    """
    if isinstance(train_set, Dataset):
        examples = build_examples(train_set, hp.max_prefix_len)
        if examples is None:
            raise TrainError("train set yields no next-item examples")
    else:
        examples = train_set
    params = copy.deepcopy(params)
    if opt.epochs == 0:
        return params, []
    rng = np.random.default_rng(seed)
    dirichlet = DirichletParams(beta=tuple(opt.dirichlet_beta))
    adam = AdamState(params) if opt.optimizer == "adam" else None
    n = len(examples)
    log: list[dict] = []
    for epoch_idx in range(opt.epochs):
        order = rng.permutation(n)
        sums = {"l_click": 0.0, "l_order": 0.0, "l_distortion": 0.0, "l_reg": 0.0, "scalarized": 0.0}
        n_batches = 0
        for lo in range(0, n, opt.batch_size):
            sel = order[lo : lo + opt.batch_size]
            batch = Batch(
                prefixes=examples.prefixes[sel],
                lengths=examples.lengths[sel],
                targets=examples.targets[sel],
                orders=examples.orders[sel],
            )
            pi = sample_preference(dirichlet, rng, opt.epsilon_clip)
            try:
                breakdown, grads = model_mod.backward(params, batch, pi, loss_cfg, rng=rng)
            except model_mod.ModelError as exc:
                raise TrainError(
                    f"training diverged at epoch {start_epoch + epoch_idx + 1}, "
                    f"batch {n_batches + 1}: {exc}"
                ) from exc
            _apply_update(params, grads, opt, adam)
            for key in sums:
                sums[key] += getattr(breakdown, key)
            n_batches += 1
        record = {
            "epoch": start_epoch + epoch_idx + 1,
            "l_click": sums["l_click"] / n_batches,
            "l_order": sums["l_order"] / n_batches,
            "l_reg": sums["l_reg"] / n_batches,
            "scalarized": sums["scalarized"] / n_batches,
        }
        if loss_cfg.use_distortion:
            record["l_distortion"] = sums["l_distortion"] / n_batches
        log.append(record)
    return params, log
