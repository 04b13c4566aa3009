"""CNN embedding of beat-synchronized CQT patches, trained with a triplet loss.

The network is a small numpy implementation (valid 2-D convolutions, ReLU,
2x2 max pooling, dense layers) with hand-written backpropagation. Arrays are
(channels, time, batch, frequency) internally.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ArchMismatch, ChecksumMismatch, EmptyDataset, NonFiniteLoss, ShapeMismatch
from .features import FeatureStore, Patch
from .sampling import SamplingParams, biased_side, sample_triplets

log = logging.getLogger(__name__)

_MAGIC = "segbed-model"


@dataclass(frozen=True)
class ArchConfig:
    input_shape: tuple = (128, 72)  # (Q time rows, K frequency bins)
    conv_channels: tuple = (16, 32, 64, 64)
    kernel: tuple = (6, 4)  # (time, frequency)
    pool: tuple = (True, True, True, True)  # 2x2 max pool after each conv
    dense_units: tuple = (128,)
    D: int = 128

    def __post_init__(self):
        for name in ("input_shape", "conv_channels", "kernel", "dense_units"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        pool = self.pool
        if isinstance(pool, (bool, np.bool_)):
            pool = (bool(pool),) * len(self.conv_channels)
        pool = tuple(bool(v) for v in pool)
        if len(pool) != len(self.conv_channels):
            raise ValueError("pool needs one flag per conv layer")
        object.__setattr__(self, "pool", pool)
        self.conv_output_shapes()

    def conv_output_shapes(self) -> list[tuple[int, int, int]]:
        """(H, W, C) after each conv block (post pooling)."""
        h, w = self.input_shape
        kh, kw = self.kernel
        shapes = []
        for c, pool in zip(self.conv_channels, self.pool):
            h, w = h - kh + 1, w - kw + 1
            if pool:
                h, w = h // 2, w // 2
            if h < 1 or w < 1:
                raise ValueError(f"architecture collapses spatially for input {self.input_shape}")
            shapes.append((h, w, c))
        return shapes

    def flat_size(self) -> int:
        if not self.conv_channels:
            return self.input_shape[0] * self.input_shape[1]
        h, w, c = self.conv_output_shapes()[-1]
        return h * w * c

    def param_shapes(self) -> list[tuple[str, tuple]]:
        kh, kw = self.kernel
        out = []
        c_in = 1
        for j, c in enumerate(self.conv_channels):
            out += [(f"conv{j}.W", (c, c_in, kh, kw)), (f"conv{j}.b", (c,))]
            c_in = c
        n_in = self.flat_size()
        for j, u in enumerate(self.dense_units):
            out += [(f"dense{j}.W", (n_in, u)), (f"dense{j}.b", (u,))]
            n_in = u
        out += [("out.W", (n_in, self.D)), ("out.b", (self.D,))]
        return out


@dataclass
class EmbeddingModel:
    arch: ArchConfig
    params: list  # arrays in ArchConfig.param_shapes() order

    def __post_init__(self):
        shapes = self.arch.param_shapes()
        if len(shapes) != len(self.params):
            raise ArchMismatch(f"expected {len(shapes)} parameter arrays, got {len(self.params)}")
        for (name, shape), p in zip(shapes, self.params):
            if tuple(p.shape) != shape:
                raise ArchMismatch(f"{name}: expected {shape}, got {p.shape}")

    @property
    def dtype(self):
        return self.params[0].dtype

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.arch.param_shapes()]

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(self.arch, [p.copy() for p in self.params])

    def astype(self, dtype) -> "EmbeddingModel":
        return EmbeddingModel(self.arch, [p.astype(dtype) for p in self.params])


def init_model(arch: ArchConfig, seed: int = 0, dtype=np.float32) -> EmbeddingModel:
    """He-uniform weights for ReLU layers, Glorot-uniform for the linear output, zero biases."""
    rng = np.random.default_rng(seed)
    params = []
    for name, shape in arch.param_shapes():
        if name.endswith(".b"):
            params.append(np.zeros(shape, dtype=dtype))
            continue
        fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
        if name.startswith("out"):
            limit = np.sqrt(6.0 / (fan_in + shape[-1]))
        else:
            limit = np.sqrt(6.0 / fan_in)
        params.append(rng.uniform(-limit, limit, size=shape).astype(dtype))
    return EmbeddingModel(arch, params)


# --- layers ----------------------------------------------------------------
# Activations are laid out (C, H, N, W): channels, time, batch, frequency.
# Every im2row copy is then a run of contiguous frequency bins and the
# convolution is a single GEMM producing channel-major output.


def _im2row(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    c, h, n, w = x.shape
    ho, wo = h - kh + 1, w - kw + 1
    rows = np.empty((c, kh, kw, ho, n, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            rows[:, i, j] = x[:, i : i + ho, :, j : j + wo]
    return rows.reshape(c * kh * kw, ho * n * wo)


def conv2d(x: np.ndarray, W: np.ndarray, b: np.ndarray):
    """Valid cross-correlation with stride 1; ``W`` is (c_out, c_in, kh, kw).

    Returns the output and the im2row matrix needed by the backward pass.
    """
    c_out, c_in, kh, kw = W.shape
    _, h, n, w = x.shape
    rows = _im2row(x, kh, kw)
    out = W.reshape(c_out, -1) @ rows
    out += b[:, None]
    return out.reshape(c_out, h - kh + 1, n, w - kw + 1), rows


def conv2d_backward(x_shape, rows, W, dz, need_dx=True):
    c_out, c_in, kh, kw = W.shape
    _, h, n, w = x_shape
    ho, wo = h - kh + 1, w - kw + 1
    dz2 = dz.reshape(c_out, -1)
    dW = (dz2 @ rows.T).reshape(W.shape)
    db = dz2.sum(axis=1)
    if not need_dx:
        return None, dW, db
    drows = (W.reshape(c_out, -1).T @ dz2).reshape(c_in, kh, kw, ho, n, wo)
    dx = np.zeros(x_shape, dtype=dz.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, i : i + ho, :, j : j + wo] += drows[:, i, j]
    return dx, dW, db


_POOL_OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))


def maxpool2(x: np.ndarray):
    """2x2 max pooling over time and frequency (odd trailing rows/cols dropped).

    Returns the pooled array and the winning position 0..3 per window (first
    maximum in row-major order).
    """
    c, h, n, w = x.shape
    ho, wo = h // 2, w // 2
    q = [x[:, di : 2 * ho : 2, :, dj : 2 * wo : 2] for di, dj in _POOL_OFFSETS]
    out = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
    arg = np.full(out.shape, 3, dtype=np.uint8)
    for k in (2, 1, 0):
        arg[q[k] == out] = k
    return out, arg


def maxpool2_backward(dy: np.ndarray, arg: np.ndarray, in_shape) -> np.ndarray:
    c, h, n, w = in_shape
    ho, wo = h // 2, w // 2
    dx = np.zeros(in_shape, dtype=dy.dtype)
    for k, (di, dj) in enumerate(_POOL_OFFSETS):
        dx[:, di : 2 * ho : 2, :, dj : 2 * wo : 2] = np.where(arg == k, dy, 0)
    return dx


# --- network ---------------------------------------------------------------


def _as_batch(model: EmbeddingModel, x) -> np.ndarray:
    if isinstance(x, Patch):
        x = x.values
    x = np.asarray(x, dtype=model.dtype)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != model.arch.input_shape:
        raise ShapeMismatch(f"input shape {x.shape} does not match {model.arch.input_shape}")
    return x


def _forward(model: EmbeddingModel, x: np.ndarray, keep: bool):
    arch, params = model.arch, model.params
    h = np.ascontiguousarray(x.transpose(1, 0, 2))[None]  # (1, Q, N, K)
    cache = []
    k = 0
    for pool in arch.pool:
        W, b = params[k], params[k + 1]
        k += 2
        z, rows = conv2d(h, W, b)
        a = np.maximum(z, 0)
        if pool:
            p, arg = maxpool2(a)
        else:
            p, arg = a, None
        if keep:
            cache.append((h.shape, rows, z > 0, arg, a.shape))
        del rows
        h = p
    conv_shape = h.shape
    h = h.transpose(2, 0, 1, 3).reshape(x.shape[0], -1)  # (N, C*H*W)
    dense = []
    for _ in arch.dense_units:
        W, b = params[k], params[k + 1]
        k += 2
        z = h @ W + b
        if keep:
            dense.append((h, z > 0))
        h = np.maximum(z, 0)
    W, b = params[k], params[k + 1]
    out = h @ W + b
    return out, (cache, conv_shape, dense, h)


def forward(model: EmbeddingModel, x, chunk: int = 64) -> np.ndarray:
    """Embed one patch (returns a D-vector) or a stack of patches (N x D)."""
    single = isinstance(x, Patch) or np.ndim(x) == 2
    x = _as_batch(model, x)
    out = np.concatenate(
        [_forward(model, x[s : s + chunk], keep=False)[0] for s in range(0, len(x), chunk)]
    )
    return out[0] if single else out


def backward(model: EmbeddingModel, state, d_out: np.ndarray) -> list:
    """Parameter gradients given dLoss/dOutput."""
    cache, conv_shape, dense, h_last = state
    params = model.params
    grads = [None] * len(params)
    k = len(params) - 2
    grads[k] = h_last.T @ d_out
    grads[k + 1] = d_out.sum(axis=0)
    dh = d_out @ params[k].T
    for h_in, mask in reversed(dense):
        k -= 2
        dz = dh * mask
        grads[k] = h_in.T @ dz
        grads[k + 1] = dz.sum(axis=0)
        dh = dz @ params[k].T
    c, hh, n, w = conv_shape
    dh = np.ascontiguousarray(dh.reshape(n, c, hh, w).transpose(1, 2, 0, 3))
    for j in range(len(cache) - 1, -1, -1):
        in_shape, rows, mask, arg, a_shape = cache[j]
        k -= 2
        if arg is not None:
            dh = maxpool2_backward(dh, arg, a_shape)
        dz = dh * mask
        dh, grads[k], grads[k + 1] = conv2d_backward(in_shape, rows, params[k], dz, need_dx=j > 0)
    return grads


# --- loss and optimization -------------------------------------------------


def triplet_loss(emb_a, emb_p, emb_n, margin: float) -> float:
    """Sum over the batch of ``[|a-p|^2 - |a-n|^2 + margin]_+``."""
    a, p, n = (np.atleast_2d(np.asarray(e, dtype=np.float64)) for e in (emb_a, emb_p, emb_n))
    if not a.shape == p.shape == n.shape:
        raise ShapeMismatch(f"embedding shapes differ: {a.shape}, {p.shape}, {n.shape}")
    if margin <= 0:
        raise ValueError("margin must be positive")
    d_ap = ((a - p) ** 2).sum(axis=1)
    d_an = ((a - n) ** 2).sum(axis=1)
    return float(np.maximum(d_ap - d_an + margin, 0.0).sum())


def triplet_loss_grad(a, p, n, margin):
    """Loss and its gradients with respect to a, p and n (same dtype as inputs)."""
    d_ap = ((a - p) ** 2).sum(axis=1)
    d_an = ((a - n) ** 2).sum(axis=1)
    hinge = d_ap - d_an + margin
    active = (hinge > 0).astype(a.dtype)[:, None]
    loss = float(np.maximum(hinge, 0).astype(np.float64).sum())
    ga = 2 * (n - p) * active
    gp = -2 * (a - p) * active
    gn = 2 * (a - n) * active
    return loss, ga, gp, gn


@dataclass
class TripletBatch:
    anchors: np.ndarray  # C x Q x K
    positives: np.ndarray
    negatives: np.ndarray
    meta: list = field(default_factory=list)  # (track_id, i_a, i_p, i_n) per triplet

    def __post_init__(self):
        if not self.anchors.shape == self.positives.shape == self.negatives.shape:
            raise ShapeMismatch("anchor/positive/negative stacks differ in shape")

    @property
    def C(self) -> int:
        return self.anchors.shape[0]


def loss_and_grads(model: EmbeddingModel, batch: TripletBatch, margin: float):
    C = batch.C
    x = _as_batch(model, np.concatenate([batch.anchors, batch.positives, batch.negatives]))
    out, state = _forward(model, x, keep=True)
    loss, ga, gp, gn = triplet_loss_grad(out[:C], out[C : 2 * C], out[2 * C :], margin)
    grads = backward(model, state, np.concatenate([ga, gp, gn]))
    return loss, grads


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.1
    batches_per_epoch: int = 256
    epochs: int = 240
    tracks_per_batch: int = 6
    triplets_per_track: int = 16
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    normalize_patches: bool = False

    def validate(self) -> None:
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.epochs < 1 or self.batches_per_epoch < 1:
            raise ValueError("epochs and batches_per_epoch must be >= 1")


class Adam:
    def __init__(self, params: Sequence[np.ndarray], lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    @classmethod
    def from_config(cls, params, cfg: TrainConfig) -> "Adam":
        return cls(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)

    def step(self, params: list, grads: list) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr = np.sqrt(1 - b2**self.t) / (1 - b1**self.t)
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (self.lr * corr * m / (np.sqrt(v) + self.eps)).astype(p.dtype)


def grad_step(model: EmbeddingModel, batch: TripletBatch, config: TrainConfig, opt: Adam) -> float:
    """Backpropagate the triplet loss and apply one Adam update in place.

    Returns the loss before the update.
    """
    loss, grads = loss_and_grads(model, batch, config.margin)
    if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
        bad = [n for n, g in zip(model.names, grads) if not np.all(np.isfinite(g))]
        raise NonFiniteLoss(f"loss={loss}; non-finite gradients in {bad or 'none'}")
    opt.step(model.params, grads)
    return loss


def _normalize(patches: np.ndarray) -> np.ndarray:
    # peak normalization of magnitudes, i.e. subtract the max in the log domain
    return patches - patches.max(axis=(1, 2), keepdims=True)


def make_batch(
    stores: Sequence[FeatureStore],
    rng: np.random.Generator,
    cfg: TrainConfig,
    params: SamplingParams,
    sampler: str = "unbiased",
) -> TripletBatch:
    """Sample ``tracks_per_batch`` tracks and ``triplets_per_track`` triplets from each."""
    replace = len(stores) < cfg.tracks_per_batch
    chosen = rng.choice(len(stores), size=cfg.tracks_per_batch, replace=replace)
    a, p, n, meta = [], [], [], []
    for t in chosen:
        store = stores[int(t)]
        sides_fn = (lambda i, s=store: biased_side(s, i)) if sampler == "biased" else None
        trip = sample_triplets(store.L, params, rng, cfg.triplets_per_track, sides_fn)
        a.append(store.patches(trip[:, 0]))
        p.append(store.patches(trip[:, 1]))
        n.append(store.patches(trip[:, 2]))
        meta += [(store.track_id, *map(int, row)) for row in trip]
    stacks = [np.concatenate(s) for s in (a, p, n)]
    if cfg.normalize_patches:
        stacks = [_normalize(s) for s in stacks]
    return TripletBatch(*stacks, meta=meta)


def train(
    stores: Sequence[FeatureStore],
    sampler: str = "unbiased",
    train_cfg: TrainConfig = TrainConfig(),
    arch_cfg: ArchConfig = ArchConfig(),
    sampling: SamplingParams = SamplingParams(),
    loss_log: Optional[Path] = None,
    triplet_log: Optional[Path] = None,
    model: Optional[EmbeddingModel] = None,
) -> EmbeddingModel:
    """Train an embedding from scratch on a corpus of feature stores.

    Every mini-batch draws fresh triplets. All randomness derives from
    ``train_cfg.seed``. Per-epoch mean loss goes to ``loss_log`` as CSV
    (epoch, mean_loss, wall_sec); sampled indices go to ``triplet_log``.
    """
    stores = list(stores)
    if not stores:
        raise EmptyDataset("no feature stores to train on")
    if sampler not in ("unbiased", "biased"):
        raise ValueError(f"unknown sampler {sampler!r}")
    train_cfg.validate()
    for s in stores:
        if (s.config.Q, s.config.K) != arch_cfg.input_shape:
            raise ShapeMismatch(
                f"{s.track_id}: patches are {(s.config.Q, s.config.K)}, arch expects {arch_cfg.input_shape}"
            )
    if len(stores) < train_cfg.tracks_per_batch:
        log.warning(
            "only %d tracks for %d per batch; sampling tracks with replacement",
            len(stores),
            train_cfg.tracks_per_batch,
        )
    rng = np.random.default_rng(train_cfg.seed)
    if model is None:
        model = init_model(arch_cfg, seed=int(rng.integers(2**31)))
    opt = Adam.from_config(model.params, train_cfg)

    loss_fh = trip_fh = None
    try:
        if loss_log is not None:
            loss_fh = open(loss_log, "w", newline="")
            loss_w = csv.writer(loss_fh)
            loss_w.writerow(["epoch", "mean_loss", "wall_sec"])
        if triplet_log is not None:
            trip_fh = open(triplet_log, "w", newline="")
            trip_w = csv.writer(trip_fh)
            trip_w.writerow(["step", "sampler", "track_id", "i_a", "i_p", "i_n"])
        start = time.perf_counter()
        step = 0
        for epoch in range(1, train_cfg.epochs + 1):
            total = 0.0
            for _ in range(train_cfg.batches_per_epoch):
                batch = make_batch(stores, rng, train_cfg, sampling, sampler)
                if trip_fh is not None:
                    trip_w.writerows([step, sampler, *m] for m in batch.meta)
                total += grad_step(model, batch, train_cfg, opt)
                step += 1
            mean = total / train_cfg.batches_per_epoch
            wall = time.perf_counter() - start
            log.info("epoch %d/%d mean loss %.6f (%.1fs)", epoch, train_cfg.epochs, mean, wall)
            if loss_fh is not None:
                loss_w.writerow([epoch, repr(mean), f"{wall:.3f}"])
                loss_fh.flush()
    finally:
        for fh in (loss_fh, trip_fh):
            if fh is not None:
                fh.close()
    return model


@dataclass(frozen=True)
class EmbeddingSequence:
    vectors: np.ndarray  # L x D
    track_id: str


def embed_track(
    model: EmbeddingModel, store: FeatureStore, batch_size: int = 64, normalize_patches: bool = False
) -> EmbeddingSequence:
    """Embedding at every beat of a track."""
    if (store.config.Q, store.config.K) != model.arch.input_shape:
        raise ShapeMismatch(
            f"store patches {(store.config.Q, store.config.K)} vs arch {model.arch.input_shape}"
        )
    out = []
    for s in range(0, store.L, batch_size):
        x = store.patches(np.arange(s, min(store.L, s + batch_size)))
        if normalize_patches:
            x = _normalize(x)
        out.append(forward(model, x))
    return EmbeddingSequence(np.concatenate(out).astype(np.float64), store.track_id)


# --- checkpoints -----------------------------------------------------------


def save_model(model: EmbeddingModel, path: str | Path) -> None:
    """One JSON header line followed by a little-endian float32 blob."""
    blobs, layers, offset = [], [], 0
    for (name, shape), p in zip(model.arch.param_shapes(), model.params):
        b = np.ascontiguousarray(p, dtype="<f4").tobytes()
        layers.append({"name": name, "shape": list(shape), "offset": offset, "nbytes": len(b)})
        blobs.append(b)
        offset += len(b)
    blob = b"".join(blobs)
    header = {
        "format": _MAGIC,
        "version": 1,
        "arch": asdict(model.arch),
        "dtype": "<f4",
        "layers": layers,
        "blob_bytes": len(blob),
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(blob)


def load_model(path: str | Path) -> EmbeddingModel:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    try:
        header = json.loads(raw[:nl])
        if header.get("format") != _MAGIC:
            raise ValueError("not a segbed model file")
        arch = ArchConfig(**header["arch"])
        layers = header["layers"]
    except (ValueError, KeyError, TypeError) as exc:
        raise ArchMismatch(f"{path}: unreadable header ({exc})") from exc
    expected = arch.param_shapes()
    if len(layers) != len(expected):
        raise ArchMismatch(f"{path}: {len(layers)} layers declared, arch has {len(expected)}")
    for (name, shape), lay in zip(expected, layers):
        if lay["name"] != name or tuple(lay["shape"]) != shape or lay["nbytes"] != 4 * int(np.prod(shape)):
            raise ArchMismatch(f"{path}: layer {lay['name']} {lay['shape']} does not match {name} {shape}")
    if sum(lay["nbytes"] for lay in layers) != header["blob_bytes"]:
        raise ArchMismatch(f"{path}: declared blob size disagrees with layer sizes")
    blob = raw[nl + 1 :]
    if len(blob) != header["blob_bytes"] or hashlib.sha256(blob).hexdigest() != header["sha256"]:
        raise ChecksumMismatch(f"{path}: weight blob is truncated or corrupted")
    params = [
        np.frombuffer(blob, dtype="<f4", count=lay["nbytes"] // 4, offset=lay["offset"])
        .reshape(shape)
        .astype(np.float32)
        for (_, shape), lay in zip(expected, layers)
    ]
    return EmbeddingModel(arch, params)
