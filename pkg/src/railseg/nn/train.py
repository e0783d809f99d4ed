"""Mini-batch Adam training and patch-covering inference."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ..pointcloud import PointCloud, make_rng
from .checkpoint import Checkpoint
from .network import SegNetwork, loss_ce

log = logging.getLogger(__name__)

BETA1, BETA2, EPS = 0.9, 0.999, 1e-8


@dataclass
class TrainReport:
    wall_time_s: float
    epoch_losses: list[float] = field(default_factory=list)
    epochs: int = 0

    def to_dict(self) -> dict:
        return {"wall_time_s": self.wall_time_s, "epoch_losses": self.epoch_losses,
                "epochs": self.epochs}


def _load_patches(source) -> list[PointCloud]:
    if hasattr(source, "load_patches"):
        return source.load_patches()
    return list(source)


def batch_gradient(net: SegNetwork, geoms, labels, batch) -> tuple[float, dict]:
    """Mean loss over the patches in ``batch`` and its gradient.

    Per-patch gradients are summed in the order given by ``batch``.
    """
    grads = {k: np.zeros_like(v) for k, v in net.params.items()}
    total = 0.0
    for i in batch:
        logits, state = net.forward_geom(geoms[i], keep_cache=True)
        loss, dlogits = loss_ce(logits, labels[i])
        total += loss
        net.backward_geom(geoms[i], state, dlogits / len(batch), grads)
    return total / len(batch), grads


def adam_step(ckpt: Checkpoint, grads: dict, lr: float) -> None:
    ckpt.adam_step += 1
    t = ckpt.adam_step
    c1, c2 = 1.0 - BETA1**t, 1.0 - BETA2**t
    for k, g in grads.items():
        m, v = ckpt.adam_m[k], ckpt.adam_v[k]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        ckpt.params[k] -= (lr * (m / c1) / (np.sqrt(v / c2) + EPS)).astype(m.dtype)


def train(net: SegNetwork, manifest, epochs: int, lr: float = 1e-3, batch_size: int = 4,
          seed: int = 0) -> tuple[Checkpoint, TrainReport]:
    """Train a copy of ``net`` on the patches of ``manifest``.

    ``manifest`` is a :class:`~railseg.pipeline.DatasetManifest` or any
    iterable of patch clouds. Patch order is reshuffled every epoch from
    ``(seed, epoch)``. Index structures are built once per patch, and that
    time counts toward the reported wall time.
    """
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    t0 = time.perf_counter()
    patches = _load_patches(manifest)
    if not patches:
        raise ValueError("no training patches")
    ckpt = Checkpoint.from_network(net, seed, patches[0].schema)
    report = TrainReport(0.0)
    if epochs == 0:
        report.wall_time_s = time.perf_counter() - t0
        return ckpt, report
    work = SegNetwork(net.config, ckpt.params)
    geoms = [work.geometry(p.positions) for p in patches]
    labels = [p.labels for p in patches]
    for epoch in range(epochs):
        order = make_rng(seed, 5, epoch).permutation(len(patches))
        losses = []
        for s in range(0, len(order), batch_size):
            batch = order[s:s + batch_size]
            loss, grads = batch_gradient(work, geoms, labels, batch)
            adam_step(ckpt, grads, lr)
            losses.extend([loss] * len(batch))
        report.epoch_losses.append(float(np.mean(losses)))
        ckpt.epoch += 1
        log.debug("epoch %d loss %.4f", epoch, report.epoch_losses[-1])
    report.epochs = epochs
    report.wall_time_s = time.perf_counter() - t0
    return ckpt, report


def predict_logits(ckpt: Checkpoint, cloud: PointCloud, patch_size: int, seed: int) -> np.ndarray:
    """Average logits of overlapping kNN patches until every point is covered."""
    n = cloud.n
    if n == 0:
        raise ValueError("cannot predict on an empty cloud")
    net = ckpt.network()
    pos = cloud.positions.astype(np.float64)
    rng = make_rng(seed, 9)
    C = ckpt.config.num_classes
    acc = np.zeros((n, C))
    hits = np.zeros(n)
    if n <= patch_size:
        idx = np.concatenate([np.arange(n), rng.integers(0, n, size=patch_size - n)])
        logits = net.forward(pos[idx])
        np.add.at(acc, idx, logits)
        np.add.at(hits, idx, 1)
        return acc / hits[:, None]
    tree = cKDTree(pos)
    covered = np.zeros(n, dtype=bool)
    while not covered.all():
        free = np.flatnonzero(~covered)
        s = free[rng.integers(len(free))]
        _, idx = tree.query(pos[s], k=patch_size)
        logits = net.forward(pos[idx])
        acc[idx] += logits
        hits[idx] += 1
        covered[idx] = True
    return acc / hits[:, None]


def predict(ckpt: Checkpoint, cloud: PointCloud, patch_size: int, seed: int = 0) -> np.ndarray:
    return predict_logits(ckpt, cloud, patch_size, seed).argmax(axis=1)
