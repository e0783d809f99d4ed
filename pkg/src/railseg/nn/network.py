"""Hierarchical point segmentation network with hand-written gradients.

The forward pass is split in two stages. :meth:`SegNetwork.geometry` runs
every index-producing step (FPS, ball query, neighbor interpolation) on the
patch coordinates; those depend only on positions, so training computes them
once per patch. :meth:`SegNetwork.forward_geom` then runs the learnable
layers on a precomputed :class:`Geometry`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ..pointcloud import make_rng
from .kernels import ball_query, fps, idw_matrix, lexmin_index


@dataclass(frozen=True)
class SAConfig:
    radius: float
    nsample: int
    mlp_widths: tuple[int, ...]
    stride: int = 4
    npoint: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "mlp_widths", tuple(int(w) for w in self.mlp_widths))
        if not self.radius > 0:
            raise ValueError("radius must be > 0")
        if self.nsample < 1 or self.stride < 1:
            raise ValueError("nsample and stride must be >= 1")
        if self.npoint is not None and self.npoint < 1:
            raise ValueError("npoint must be >= 1")
        if not self.mlp_widths:
            raise ValueError("mlp_widths must be non-empty")

    def centers_for(self, n_in: int) -> int:
        if self.npoint is not None:
            return self.npoint
        return max(1, n_in // self.stride)


@dataclass(frozen=True)
class NetConfig:
    sa_levels: tuple[SAConfig, ...] = (
        SAConfig(0.1, 32, (32, 32, 64)),
        SAConfig(0.4, 32, (64, 64, 128)),
    )
    fp_levels: tuple[tuple[int, ...], ...] = ((128, 64), (64, 32))
    head_hidden: tuple[int, ...] = (32,)
    num_classes: int = 3
    idw_k: int = 3

    def __post_init__(self):
        object.__setattr__(self, "sa_levels", tuple(self.sa_levels))
        object.__setattr__(self, "fp_levels", tuple(tuple(int(w) for w in f) for f in self.fp_levels))
        object.__setattr__(self, "head_hidden", tuple(int(w) for w in self.head_hidden))
        if len(self.fp_levels) != len(self.sa_levels):
            raise ValueError("need one feature-propagation level per set-abstraction level")
        if any(not f for f in self.fp_levels):
            raise ValueError("feature-propagation widths must be non-empty")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    @property
    def head_widths(self) -> tuple[int, ...]:
        return self.head_hidden + (self.num_classes,)

    def to_dict(self) -> dict:
        return {
            "sa_levels": [
                {"radius": s.radius, "nsample": s.nsample, "mlp_widths": list(s.mlp_widths),
                 "stride": s.stride, "npoint": s.npoint}
                for s in self.sa_levels
            ],
            "fp_levels": [list(f) for f in self.fp_levels],
            "head_hidden": list(self.head_hidden),
            "num_classes": self.num_classes,
            "idw_k": self.idw_k,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(
            sa_levels=tuple(SAConfig(**s) for s in d["sa_levels"]),
            fp_levels=tuple(tuple(f) for f in d["fp_levels"]),
            head_hidden=tuple(d["head_hidden"]),
            num_classes=d["num_classes"],
            idw_k=d["idw_k"],
        )

    def layer_shapes(self) -> list[tuple[str, int, int, bool]]:
        """(prefix, fan_in, fan_out, relu) for every dense layer, in order."""
        layers = []
        dims = [0]
        for i, sa in enumerate(self.sa_levels):
            fin = 3 + dims[-1]
            for j, w in enumerate(sa.mlp_widths):
                layers.append((f"sa{i}.{j}", fin, w, True))
                fin = w
            dims.append(fin)
        coarse = dims[-1]
        L = len(self.sa_levels)
        for i, widths in enumerate(self.fp_levels):
            # the finest level has no learned skip features; it gets point offsets
            fin = coarse + (dims[L - 1 - i] if i < L - 1 else 3)
            for j, w in enumerate(widths):
                layers.append((f"fp{i}.{j}", fin, w, True))
                fin = w
            coarse = fin
        fin = coarse
        for j, w in enumerate(self.head_widths):
            layers.append((f"head.{j}", fin, w, j < len(self.head_widths) - 1))
            fin = w
        return layers

    def min_points(self) -> int:
        """Smallest patch the configuration accepts."""
        n = 1
        for _ in range(100000):
            ok, m = True, n
            for sa in self.sa_levels:
                c = sa.centers_for(m)
                if c > m:
                    ok = False
                    break
                m = c
            if ok and m >= self.idw_k:
                return n
            n += 1
        raise ValueError("no feasible patch size")


@dataclass
class Geometry:
    """Index structures of one patch; independent of network parameters."""

    n: int
    # per SA level: relative grouped coordinates (m, nsample, 3) and gather matrix
    rel: list[np.ndarray] = field(default_factory=list)
    groups: list[np.ndarray] = field(default_factory=list)
    gather: list[sp.csr_matrix] = field(default_factory=list)
    # per FP level (coarse to fine): interpolation operator (n_fine, n_coarse)
    interp: list[sp.csr_matrix] = field(default_factory=list)
    level_sizes: list[int] = field(default_factory=list)
    # each input point minus its interpolated first-level position, over the first radius
    offsets: np.ndarray | None = None

    def astype(self, dtype) -> "Geometry":
        return Geometry(
            self.n,
            [r.astype(dtype) for r in self.rel],
            self.groups,
            self.gather,
            [m.astype(dtype) for m in self.interp],
            self.level_sizes,
            None if self.offsets is None else self.offsets.astype(dtype),
        )


def compute_geometry(config: NetConfig, positions: np.ndarray) -> Geometry:
    p = np.asarray(positions, dtype=np.float64)
    n = len(p)
    if n < config.min_points():
        raise ValueError(f"patch of {n} points is below the network minimum {config.min_points()}")
    geom = Geometry(n=n, level_sizes=[n])
    level_pos = [p]
    cur = p
    for sa in config.sa_levels:
        m = sa.centers_for(len(cur))
        if m > len(cur):
            raise ValueError(f"level needs {m} centers but has only {len(cur)} points")
        centers = cur[fps(cur, m, lexmin_index(cur))]
        groups = ball_query(centers, cur, sa.radius, sa.nsample)
        geom.rel.append((cur[groups] - centers[:, None, :]) / sa.radius)
        geom.groups.append(groups)
        rows = np.arange(groups.size)
        geom.gather.append(
            sp.csr_matrix((np.ones(groups.size), (rows, groups.ravel())), shape=(groups.size, len(cur)))
        )
        level_pos.append(centers)
        geom.level_sizes.append(m)
        cur = centers
    L = len(config.sa_levels)
    for i in range(L):
        fine, coarse = level_pos[L - 1 - i], level_pos[L - i]
        geom.interp.append(idw_matrix(fine, coarse, min(config.idw_k, len(coarse))))
    geom.offsets = (p - geom.interp[-1] @ level_pos[1]) / config.sa_levels[0].radius
    return geom


def _relu_layer(x, w, b, relu):
    z = x @ w
    z += b
    if relu:
        np.maximum(z, 0, out=z)
    return z


class SegNetwork:
    """Parameters plus forward/backward over patches.

    ``params`` maps ``"<layer>.w"`` / ``"<layer>.b"`` to arrays, ordered as
    :meth:`NetConfig.layer_shapes` lists the layers.
    """

    def __init__(self, config: NetConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self.layers = config.layer_shapes()
        for name, fin, fout, _ in self.layers:
            if params[name + ".w"].shape != (fin, fout) or params[name + ".b"].shape != (fout,):
                raise ValueError(f"parameter shape mismatch in layer {name}")

    @classmethod
    def init(cls, config: NetConfig, seed: int, dtype=np.float32) -> "SegNetwork":
        """Glorot-uniform weights, zero biases."""
        rng = make_rng(seed, 11)
        params = {}
        for name, fin, fout, _ in config.layer_shapes():
            lim = math.sqrt(6.0 / (fin + fout))
            params[name + ".w"] = rng.uniform(-lim, lim, size=(fin, fout)).astype(dtype)
            params[name + ".b"] = np.zeros(fout, dtype=dtype)
        return cls(config, params)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def copy(self) -> "SegNetwork":
        return SegNetwork(self.config, {k: v.copy() for k, v in self.params.items()})

    def geometry(self, positions: np.ndarray) -> Geometry:
        return compute_geometry(self.config, positions).astype(self.dtype)

    def forward(self, positions: np.ndarray) -> np.ndarray:
        return self.forward_geom(self.geometry(positions))[0]

    def _mlp(self, prefix: str, x: np.ndarray, cache: list | None):
        for name, _, _, relu in self.layers:
            if not name.startswith(prefix + "."):
                continue
            y = _relu_layer(x, self.params[name + ".w"], self.params[name + ".b"], relu)
            if cache is not None:
                cache.append((name, x, y if relu else None))
            x = y
        return x

    @property
    def stages(self) -> list[str]:
        L = len(self.config.sa_levels)
        return [f"sa{i}" for i in range(L)] + [f"fp{i}" for i in range(L)] + ["head"]

    def forward_geom(self, geom: Geometry, keep_cache: bool = False,
                     reuse: dict | None = None, start: str | None = None):
        """Logits (n, C) and the forward state.

        With ``reuse`` (a state from an earlier call on the same geometry) and
        ``start`` (a stage name such as ``"fp0"``), stages before ``start`` are
        taken from ``reuse`` instead of being recomputed. Only a state built
        with ``keep_cache=True`` supports :meth:`backward_geom`.
        """
        first = self.stages.index(start) if start is not None else 0
        if first and reuse is None:
            raise ValueError("resuming a forward pass needs a previous state")
        cache: list | None = [] if keep_cache else None
        L = len(geom.rel)
        feats = [None] + (list(reuse["feats"][1:]) if first else [None] * L)
        pool_idx = list(reuse["pool_idx"]) if first else [None] * L
        fp_out = list(reuse["fp_out"]) if first else [None] * L
        for i in range(min(first, L), L):
            rel = geom.rel[i]
            m, ns, _ = rel.shape
            x = rel.reshape(m * ns, 3)
            if feats[i] is not None:
                x = np.concatenate([x, feats[i][geom.groups[i].ravel()]], axis=1)
            h = self._mlp(f"sa{i}", x, cache).reshape(m, ns, -1)
            if keep_cache:
                am = h.argmax(axis=1)
                pool_idx[i] = am
                feats[i + 1] = np.take_along_axis(h, am[:, None, :], axis=1)[:, 0, :]
            else:
                feats[i + 1] = h.max(axis=1)
        for i in range(max(first - L, 0), L):
            coarse = feats[L] if i == 0 else fp_out[i - 1]
            x = geom.interp[i] @ coarse
            skip = feats[L - 1 - i] if i < L - 1 else geom.offsets
            x = np.concatenate([x, skip], axis=1)
            fp_out[i] = self._mlp(f"fp{i}", x, cache)
        logits = self._mlp("head", fp_out[L - 1], cache)
        if not np.all(np.isfinite(logits)):
            raise FloatingPointError("non-finite logits")
        state = {"cache": cache, "pool_idx": pool_idx, "feats": feats, "fp_out": fp_out}
        return logits, state

    def _mlp_backward(self, prefix, dy, cache, grads):
        entries = [e for e in cache if e[0].startswith(prefix + ".")]
        for name, x, y in reversed(entries):
            if y is not None:
                dy = dy * (y > 0)
            grads[name + ".w"] += x.T @ dy
            grads[name + ".b"] += dy.sum(axis=0)
            dy = dy @ self.params[name + ".w"].T
        return dy

    def backward_geom(self, geom: Geometry, state: dict, dlogits: np.ndarray, grads: dict | None = None):
        """Accumulate parameter gradients of sum(dlogits * logits) into ``grads``."""
        if grads is None:
            grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        cache, pool_idx, feats = state["cache"], state["pool_idx"], state["feats"]
        L = len(geom.rel)
        dfeat = [None] * (L + 1)
        dx = self._mlp_backward("head", dlogits.astype(self.dtype, copy=False), cache, grads)
        for i in reversed(range(L)):
            dx = self._mlp_backward(f"fp{i}", dx, cache, grads)
            lvl = L - 1 - i
            if lvl > 0:
                d_skip = dx[:, dx.shape[1] - feats[lvl].shape[1]:]
                dfeat[lvl] = d_skip if dfeat[lvl] is None else dfeat[lvl] + d_skip
                dx = dx[:, : dx.shape[1] - feats[lvl].shape[1]]
            else:
                dx = dx[:, :-3]
            dx = np.asarray(geom.interp[i].T @ dx)
        dfeat[L] = dx if dfeat[L] is None else dfeat[L] + dx
        for i in reversed(range(L)):
            m, ns, _ = geom.rel[i].shape
            df = dfeat[i + 1]
            dh = np.zeros((m, ns, df.shape[1]), dtype=df.dtype)
            np.put_along_axis(dh, pool_idx[i][:, None, :], df[:, None, :], axis=1)
            dxin = self._mlp_backward(f"sa{i}", dh.reshape(m * ns, -1), cache, grads)
            if feats[i] is not None:
                dprev = np.asarray(geom.gather[i].T @ dxin[:, 3:]).astype(self.dtype, copy=False)
                dfeat[i] = dprev if dfeat[i] is None else dfeat[i] + dprev
        return grads


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_ce(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n, C = logits.shape
    if len(labels) != n:
        raise ValueError("logits and labels differ in length")
    if n and (labels.min() < 0 or labels.max() >= C):
        raise ValueError("label out of range")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsum - z[np.arange(n), labels]))
    grad = np.exp(z - logsum[:, None])
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def backward(net: SegNetwork, positions: np.ndarray, labels: np.ndarray) -> tuple[float, dict]:
    """Loss and exact parameter gradients for one patch."""
    geom = net.geometry(positions)
    logits, state = net.forward_geom(geom, keep_cache=True)
    loss, dlogits = loss_ce(logits, labels)
    return loss, net.backward_geom(geom, state, dlogits)
