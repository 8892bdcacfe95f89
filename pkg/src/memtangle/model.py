"""Multi-offset decoders with hand-written reverse mode.

Two models map a signal to the embeddings of the current and the two
previous stimuli:

* straightforward: three independent MLPs on ``F_t``;
* disentangled: one shared trunk applied to ``F_{t-1}`` and ``F_t``, each
  output split into a ``before`` half and a ``now`` half. ``now_t`` feeds the
  k=0 head, ``before_t`` feeds both the k=1 and k=2 heads, and an InfoNCE
  term pulls ``before_t`` toward ``now_{t-1}`` against five within-sample
  negative pairs.

Layers compute ``x @ W + b``; hidden layers use ReLU, the last layer is
linear. Parameters are addressed by dotted names (``trunk.W0``,
``head1.b0``, ``mlp2.W1``) in declaration order, which is also the
checkpoint order.
"""
from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import WindowSample
from .errors import (
    BadMagicError,
    ConfigError,
    DegenerateInputError,
    DimensionMismatchError,
    NumericError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from .rng import Pcg32

MAX_K = 2
N_OFFSETS = MAX_K + 1
CKPT_MAGIC = b"MDMW"
CKPT_VERSION = 1

# (x, y) index pairs into (b_t, n_t, b_prev, n_prev); entry 0 is the positive pair.
B_T, N_T, B_PREV, N_PREV = range(4)
PAIRS = (
    (B_T, N_PREV),
    (N_T, B_T),
    (N_PREV, B_PREV),
    (N_T, N_PREV),
    (B_T, B_PREV),
    (N_T, B_PREV),
)


# -- parameters -------------------------------------------------------------


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("MlpParams needs one bias per weight matrix and at least one layer")
        for i in range(1, len(self.weights)):
            if self.weights[i - 1].shape[1] != self.weights[i].shape[0]:
                raise ValueError(f"layer {i} input width does not chain with layer {i - 1}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def named(self, prefix: str):
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}.W{i}", w
            yield f"{prefix}.b{i}", b


@dataclass
class EncoderParams:
    trunk: MlpParams

    def __post_init__(self):
        if self.trunk.out_dim % 2:
            raise ValueError(f"trunk output width must be even, got {self.trunk.out_dim}")

    @property
    def d_h(self) -> int:
        return self.trunk.out_dim // 2


@dataclass
class Heads:
    heads: tuple[MlpParams, MlpParams, MlpParams]


@dataclass
class DisentangledModel:
    encoder: EncoderParams
    heads: Heads
    method = "dis"

    def named_params(self):
        yield from self.encoder.trunk.named("trunk")
        for i, h in enumerate(self.heads.heads):
            yield from h.named(f"head{i}")


@dataclass
class StraightforwardModel:
    mlps: tuple[MlpParams, MlpParams, MlpParams]
    method = "sf"

    def named_params(self):
        for i, m in enumerate(self.mlps):
            yield from m.named(f"mlp{i}")


Model = DisentangledModel | StraightforwardModel


def param_dict(model: Model) -> dict[str, np.ndarray]:
    return dict(model.named_params())


def _he_mlp(rng: Pcg32, dims: Sequence[int], dtype, out_gain: float = 1.0) -> MlpParams:
    """He-normal weights, zero biases; ``out_gain`` rescales the last layer.

    Draws are taken even when ``out_gain`` is 0 so the stream position (and
    every other layer) does not depend on it.
    """
    ws, bs = [], []
    n_layers = len(dims) - 1
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        w = rng.normal(fan_in * fan_out).reshape(fan_in, fan_out) * np.sqrt(2.0 / fan_in)
        if i == n_layers - 1:
            w = w * out_gain
        ws.append(w.astype(dtype))
        bs.append(np.zeros(fan_out, dtype=dtype))
    return MlpParams(ws, bs)


def init_disentangled(
    d_f: int, d_c: int, hidden: Sequence[int], d_h: int, seed: int, dtype=np.float32, out_gain: float = 1.0
):
    rng = Pcg32.stream(seed, "init")
    trunk = _he_mlp(rng, [d_f, *hidden, 2 * d_h], dtype)
    heads = tuple(_he_mlp(rng, [d_h, d_c], dtype, out_gain) for _ in range(N_OFFSETS))
    return DisentangledModel(EncoderParams(trunk), Heads(heads))


def init_straightforward(d_f: int, d_c: int, hidden: Sequence[int], seed: int, dtype=np.float32, out_gain: float = 1.0):
    rng = Pcg32.stream(seed, "init")
    return StraightforwardModel(tuple(_he_mlp(rng, [d_f, *hidden, d_c], dtype, out_gain) for _ in range(N_OFFSETS)))


# -- MLP forward / backward -------------------------------------------------


def _mlp_fwd(p: MlpParams, X: np.ndarray):
    inputs = []
    masks = []
    a = X
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        inputs.append(a)
        z = a @ w + b
        if i < last:
            mask = z > 0
            masks.append(mask)
            a = z * mask
        else:
            a = z
    return a, (inputs, masks)


def _mlp_bwd(p: MlpParams, cache, d_out: np.ndarray, need_input_grad: bool = True):
    inputs, masks = cache
    grads_w = [None] * len(p.weights)
    grads_b = [None] * len(p.weights)
    d = d_out
    for i in range(len(p.weights) - 1, -1, -1):
        grads_w[i] = inputs[i].T @ d
        grads_b[i] = d.sum(axis=0)
        if i > 0 or need_input_grad:
            d = d @ p.weights[i].T
            if i > 0:
                d = d * masks[i - 1]
    return grads_w, grads_b, (d if need_input_grad else None)


def mlp_forward(p: MlpParams, x) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-1] != p.in_dim:
        raise DimensionMismatchError(f"input width {x.shape[-1]} != first layer input {p.in_dim}")
    out, _ = _mlp_fwd(p, x)
    return out


# -- losses -----------------------------------------------------------------


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.sqrt(a @ a)
    nb = np.sqrt(b @ b)
    if na == 0 or nb == 0:
        raise DegenerateInputError("cosine_sim: zero-norm input")
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


def loss_mse(preds, targets) -> float:
    if len(preds) != N_OFFSETS or len(targets) != N_OFFSETS:
        raise ValueError(f"expected {N_OFFSETS} predictions and targets")
    total = 0.0
    for p, c in zip(preds, targets):
        p = np.asarray(p, dtype=np.float64)
        c = np.asarray(c, dtype=np.float64)
        if p.shape != c.shape:
            raise DimensionMismatchError(f"prediction length {p.shape} != target length {c.shape}")
        total += float(np.mean((p - c) ** 2))
    return total


def _logsumexp(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True)))[..., 0]


def infonce_from_sims(sims, tau: float) -> np.ndarray:
    """InfoNCE from the six pair similarities (positive first), along the last axis."""
    logits = np.asarray(sims, dtype=np.float64) / tau
    return _logsumexp(logits) - logits[..., 0]


def _infonce_batch(comps: Sequence[np.ndarray], tau: float, need_grad: bool):
    """Per-sample InfoNCE over the six pairs; optionally d(loss_i)/d(component)."""
    norms = [np.sqrt(np.einsum("ij,ij->i", c, c)) for c in comps]
    for name, n in zip(("before_t", "now_t", "before_prev", "now_prev"), norms):
        if np.any(n == 0):
            raise DegenerateInputError(f"InfoNCE: zero-norm {name} component")
    sims = np.stack(
        [np.einsum("ij,ij->i", comps[x], comps[y]) / (norms[x] * norms[y]) for x, y in PAIRS], axis=1
    )
    logits = sims / tau
    loss = infonce_from_sims(sims, tau)
    if not need_grad:
        return loss, None
    soft = np.exp(logits - _logsumexp(logits)[:, None])
    soft[:, 0] -= 1.0
    d_sims = soft / tau
    grads = [np.zeros_like(c) for c in comps]
    for j, (x, y) in enumerate(PAIRS):
        g = d_sims[:, j : j + 1]
        s = sims[:, j : j + 1]
        inv = 1.0 / (norms[x] * norms[y])[:, None]
        grads[x] += g * (comps[y] * inv - s * comps[x] / (norms[x] ** 2)[:, None])
        grads[y] += g * (comps[x] * inv - s * comps[y] / (norms[y] ** 2)[:, None])
    return loss, grads


def loss_infonce(b_t, n_t, b_prev, n_prev, tau: float) -> float:
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    comps = [np.asarray(v, dtype=np.float64)[None, :] for v in (b_t, n_t, b_prev, n_prev)]
    loss, _ = _infonce_batch(comps, tau, need_grad=False)
    return float(loss[0])


@dataclass
class ForwardResult:
    b_prev: np.ndarray
    n_prev: np.ndarray
    b_t: np.ndarray
    n_t: np.ndarray
    preds: tuple[np.ndarray, np.ndarray, np.ndarray]  # [P_t, P_{t-1}, P_{t-2}]


def forward_disentangled(enc: EncoderParams, heads: Heads, f_prev, f_t) -> ForwardResult:
    f_prev = np.asarray(f_prev)
    f_t = np.asarray(f_t)
    for name, f in (("f_prev", f_prev), ("f_t", f_t)):
        if f.shape[-1] != enc.trunk.in_dim:
            raise DimensionMismatchError(f"{name} length {f.shape[-1]} != d_f={enc.trunk.in_dim}")
    d_h = enc.d_h
    h_prev = mlp_forward(enc.trunk, f_prev)
    h_t = mlp_forward(enc.trunk, f_t)
    b_t, n_t = h_t[..., :d_h], h_t[..., d_h:]
    preds = (
        mlp_forward(heads.heads[0], n_t),
        mlp_forward(heads.heads[1], b_t),
        mlp_forward(heads.heads[2], b_t),
    )
    return ForwardResult(h_prev[..., :d_h], h_prev[..., d_h:], b_t, n_t, preds)


@dataclass
class LossReport:
    mse: float
    infonce: float
    total: float
    per_offset: list[float]


def total_loss(results: Sequence[ForwardResult], targets: Sequence[Sequence[np.ndarray]], cfg: "TrainConfig") -> LossReport:
    """Mean over samples of ``mse + alpha * infonce``."""
    if len(results) != len(targets) or not results:
        raise ValueError("need one target triple per forward result")
    mses, nces, per = [], [], np.zeros(N_OFFSETS)
    for res, tgt in zip(results, targets):
        for i in range(N_OFFSETS):
            per[i] += float(np.mean((np.asarray(res.preds[i], np.float64) - np.asarray(tgt[i], np.float64)) ** 2))
        mses.append(loss_mse(res.preds, tgt))
        nces.append(loss_infonce(res.b_t, res.n_t, res.b_prev, res.n_prev, cfg.tau))
    mse = float(np.mean(mses))
    nce = float(np.mean(nces))
    return LossReport(mse=mse, infonce=nce, total=mse + cfg.alpha * nce, per_offset=list(per / len(results)))


# -- training configuration -------------------------------------------------


@dataclass
class TrainConfig:
    alpha: float = 0.01
    tau: float = 0.07
    lr: float = 1e-5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    d_h: int = 512
    hidden: list[int] = field(default_factory=lambda: [1024])
    dtype: str = "float32"
    # scale on the He init of each output layer; targets are unit-norm, so
    # small values keep the initial predictions near the target scale
    out_gain: float = 1.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be non-negative, got {self.alpha}")
        for name in ("epochs", "batch_size", "d_h"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError(f"lr and weight_decay must be non-negative, got lr={self.lr}, weight_decay={self.weight_decay}")
        if self.out_gain < 0:
            raise ConfigError(f"out_gain must be non-negative, got {self.out_gain}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        self.hidden = [int(h) for h in self.hidden]
        if any(h <= 0 for h in self.hidden):
            raise ConfigError(f"hidden sizes must be positive, got {self.hidden}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown TrainConfig field(s): {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(f"invalid TrainConfig: {exc}") from None


# -- batched loss + gradients ------------------------------------------------


@dataclass
class Batch:
    x_t: np.ndarray  # (B, d_f)
    x_prev: np.ndarray  # (B, d_f)
    y: np.ndarray  # (B, 3, d_c)

    def __len__(self) -> int:
        return self.x_t.shape[0]


def batch_from_windows(windows: Sequence[WindowSample], dtype=np.float32) -> Batch:
    if not windows:
        raise ValueError("empty batch")
    return Batch(
        np.stack([w.fmri_t for w in windows]).astype(dtype),
        np.stack([w.fmri_prev for w in windows]).astype(dtype),
        np.stack([w.target_embeddings for w in windows]).astype(dtype),
    )


def _take(batch: Batch, idx) -> Batch:
    return Batch(batch.x_t[idx], batch.x_prev[idx], batch.y[idx])


def _mse_terms(preds, y, need_grad):
    B, _, d_c = y.shape
    per, grads = [], []
    for i, p in enumerate(preds):
        diff = p - y[:, i]
        per.append(np.mean(diff.astype(np.float64) ** 2, axis=1))
        if need_grad:
            grads.append(diff * (2.0 / (d_c * B)))
    return per, grads


def loss_and_grads(model: Model, batch: Batch, cfg: TrainConfig, need_grad: bool = True, use_infonce: bool = True):
    """Batch-mean loss report and (optionally) gradients keyed by parameter name.

    ``use_infonce=False`` drops the contrastive term from the gradient (it is
    still evaluated for the report on the disentangled model).
    """
    B = len(batch)
    grads: dict[str, np.ndarray] = {}
    if isinstance(model, StraightforwardModel):
        outs = [_mlp_fwd(m, batch.x_t) for m in model.mlps]
        per, d_preds = _mse_terms([o for o, _ in outs], batch.y, need_grad)
        if need_grad:
            for i, (m, (_, cache)) in enumerate(zip(model.mlps, outs)):
                gw, gb, _ = _mlp_bwd(m, cache, d_preds[i], need_input_grad=False)
                for j in range(len(gw)):
                    grads[f"mlp{i}.W{j}"] = gw[j]
                    grads[f"mlp{i}.b{j}"] = gb[j]
        nce = np.zeros(B)
        alpha = 0.0
    else:
        trunk = model.encoder.trunk
        d_h = model.encoder.d_h
        h_t, cache_t = _mlp_fwd(trunk, batch.x_t)
        h_p, cache_p = _mlp_fwd(trunk, batch.x_prev)
        comps = [h_t[:, :d_h], h_t[:, d_h:], h_p[:, :d_h], h_p[:, d_h:]]
        heads = model.heads.heads
        outs = [_mlp_fwd(heads[0], comps[N_T]), _mlp_fwd(heads[1], comps[B_T]), _mlp_fwd(heads[2], comps[B_T])]
        per, d_preds = _mse_terms([o for o, _ in outs], batch.y, need_grad)
        grad_nce = need_grad and use_infonce and cfg.alpha != 0.0
        nce, d_comps = _infonce_batch(comps, cfg.tau, grad_nce)
        alpha = cfg.alpha
        if need_grad:
            d_in = []
            for i, (head, (_, cache)) in enumerate(zip(heads, outs)):
                gw, gb, dx = _mlp_bwd(head, cache, d_preds[i])
                d_in.append(dx)
                for j in range(len(gw)):
                    grads[f"head{i}.W{j}"] = gw[j]
                    grads[f"head{i}.b{j}"] = gb[j]
            d_b_t = d_in[1] + d_in[2]
            d_n_t = d_in[0]
            if grad_nce:
                scale = alpha / B
                d_b_t = d_b_t + scale * d_comps[B_T]
                d_n_t = d_n_t + scale * d_comps[N_T]
            d_h_t = np.concatenate([d_b_t, d_n_t], axis=1).astype(h_t.dtype, copy=False)
            gw, gb, _ = _mlp_bwd(trunk, cache_t, d_h_t, need_input_grad=False)
            if grad_nce:
                d_h_p = (np.concatenate([d_comps[B_PREV], d_comps[N_PREV]], axis=1) * (alpha / B)).astype(h_p.dtype)
                gw_p, gb_p, _ = _mlp_bwd(trunk, cache_p, d_h_p, need_input_grad=False)
                gw = [a + b for a, b in zip(gw, gw_p)]
                gb = [a + b for a, b in zip(gb, gb_p)]
            for j in range(len(gw)):
                grads[f"trunk.W{j}"] = gw[j]
                grads[f"trunk.b{j}"] = gb[j]
    per_offset = [float(p.mean()) for p in per]
    mse = float(np.sum(per, axis=0).mean())
    infonce = float(np.mean(nce))
    report = LossReport(mse=mse, infonce=infonce, total=mse + alpha * infonce, per_offset=per_offset)
    if need_grad:
        for name, g in grads.items():
            if not math.isfinite(float(g.sum())):
                raise NumericError(f"non-finite gradient for {name}")
    return report, (grads if need_grad else None)


def backward(model: Model, batch: Batch, cfg: TrainConfig) -> dict[str, np.ndarray]:
    return loss_and_grads(model, batch, cfg)[1]


def grad_check(model: Model, batch: Batch, cfg: TrainConfig, h: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    Perturbs every entry of every parameter; meant for small float64 nets.
    """
    _, analytic = loss_and_grads(model, batch, cfg)
    worst = 0.0
    for name, p in model.named_params():
        flat = p.reshape(-1)
        g_a = analytic[name].reshape(-1)
        for i in range(flat.shape[0]):
            orig = flat[i]
            flat[i] = orig + h
            plus = loss_and_grads(model, batch, cfg, need_grad=False)[0].total
            flat[i] = orig - h
            minus = loss_and_grads(model, batch, cfg, need_grad=False)[0].total
            flat[i] = orig
            g_n = (plus - minus) / (2 * h)
            err = abs(g_a[i] - g_n) / max(1e-8, abs(g_a[i]) + abs(g_n))
            worst = max(worst, float(err))
    return worst


# -- AdamW ------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def adam_init(params: dict[str, np.ndarray]) -> AdamState:
    return AdamState({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def _is_bias(name: str) -> bool:
    return name.rsplit(".", 1)[-1].startswith("b")


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, cfg: TrainConfig, step_index: int) -> None:
    """In-place AdamW update; biases are exempt from weight decay.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)
    """
    if step_index < 1:
        raise ValueError("step_index starts at 1")
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**step_index
    c2 = 1.0 - b2**step_index
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionMismatchError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m[name]
        v = state.v[name]
        tmp = np.multiply(g, 1.0 - b1)
        m *= b1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - b2
        v *= b2
        v += tmp
        np.sqrt(v, out=tmp)
        tmp *= 1.0 / np.sqrt(c2)
        tmp += cfg.eps
        np.divide(m, tmp, out=tmp)
        tmp *= cfg.lr / c1
        if cfg.weight_decay and not _is_bias(name):
            p *= 1.0 - cfg.lr * cfg.weight_decay
        p -= tmp
        if not math.isfinite(float(p.sum())):
            raise NumericError(f"non-finite update for {name} at step {step_index}")
    state.step = step_index


# -- training ---------------------------------------------------------------


@dataclass
class TraceRow:
    epoch: int
    split: str
    mse: float
    infonce: float
    total: float


def _evaluate(model, batch: Batch, cfg: TrainConfig, chunk: int = 256) -> LossReport:
    n = len(batch)
    sums = np.zeros(3 + N_OFFSETS)
    for start in range(0, n, chunk):
        sub = _take(batch, slice(start, start + chunk))
        rep, _ = loss_and_grads(model, sub, cfg, need_grad=False)
        w = len(sub)
        sums += w * np.array([rep.mse, rep.infonce, 0.0, *rep.per_offset])
    mse, nce = sums[0] / n, sums[1] / n
    alpha = cfg.alpha if isinstance(model, DisentangledModel) else 0.0
    return LossReport(mse=float(mse), infonce=float(nce), total=float(mse + alpha * nce), per_offset=list(sums[3:] / n))


def _train(model, train: Batch, cfg: TrainConfig, val: Batch | None, use_infonce: bool = True):
    if len(train) == 0:
        raise ValueError("empty training set")
    params = param_dict(model)
    state = adam_init(params)
    order_rng = Pcg32.stream(cfg.seed, "schedule")
    trace: list[TraceRow] = []

    def record(epoch, split, rep):
        trace.append(TraceRow(epoch, split, rep.mse, rep.infonce, rep.total))

    record(0, "train", _evaluate(model, train, cfg))
    if val is not None:
        record(0, "val", _evaluate(model, val, cfg))
    n = len(train)
    bs = min(cfg.batch_size, n)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        perm = order_rng.permutation(n)
        sums = np.zeros(2)
        count = 0
        for start in range(0, n - bs + 1, bs):
            sub = _take(train, perm[start : start + bs])
            rep, grads = loss_and_grads(model, sub, cfg, use_infonce=use_infonce)
            step += 1
            adamw_step(params, grads, state, cfg, step)
            sums += [rep.mse, rep.infonce]
            count += 1
        mse, nce = sums / count
        alpha = cfg.alpha if isinstance(model, DisentangledModel) else 0.0
        trace.append(TraceRow(epoch, "train", float(mse), float(nce), float(mse + alpha * nce)))
        if val is not None:
            record(epoch, "val", _evaluate(model, val, cfg))
    return model, trace


def train_straightforward(train: Sequence[WindowSample] | Batch, cfg: TrainConfig, val=None):
    batch = train if isinstance(train, Batch) else batch_from_windows(train, cfg.np_dtype)
    vb = None if val is None else (val if isinstance(val, Batch) else batch_from_windows(val, cfg.np_dtype))
    d_f = batch.x_t.shape[1]
    d_c = batch.y.shape[2]
    model = init_straightforward(d_f, d_c, cfg.hidden, cfg.seed, cfg.np_dtype, cfg.out_gain)
    return _train(model, batch, cfg, vb)


def train_disentangled(train: Sequence[WindowSample] | Batch, cfg: TrainConfig, val=None, use_infonce: bool = True):
    batch = train if isinstance(train, Batch) else batch_from_windows(train, cfg.np_dtype)
    vb = None if val is None else (val if isinstance(val, Batch) else batch_from_windows(val, cfg.np_dtype))
    d_f = batch.x_t.shape[1]
    d_c = batch.y.shape[2]
    model = init_disentangled(d_f, d_c, cfg.hidden, cfg.d_h, cfg.seed, cfg.np_dtype, cfg.out_gain)
    return _train(model, batch, cfg, vb, use_infonce=use_infonce)


def predict(model: Model, batch: Batch, chunk: int = 512) -> np.ndarray:
    """Predictions shaped (B, 3, d_c), offsets ordered [t, t-1, t-2]."""
    outs = []
    for start in range(0, len(batch), chunk):
        xt = batch.x_t[start : start + chunk]
        if isinstance(model, StraightforwardModel):
            outs.append(np.stack([_mlp_fwd(m, xt)[0] for m in model.mlps], axis=1))
        else:
            h, _ = _mlp_fwd(model.encoder.trunk, xt)
            d_h = model.encoder.d_h
            b, n = h[:, :d_h], h[:, d_h:]
            heads = model.heads.heads
            outs.append(np.stack([_mlp_fwd(heads[0], n)[0], _mlp_fwd(heads[1], b)[0], _mlp_fwd(heads[2], b)[0]], axis=1))
    return np.concatenate(outs)


def offset_mse(model: Model, batch: Batch) -> list[float]:
    """Mean per-sample MSE at each offset k = 0, 1, 2."""
    pred = predict(model, batch).astype(np.float64)
    return [float(np.mean((pred[:, i] - batch.y[:, i]) ** 2)) for i in range(N_OFFSETS)]


def write_trace(trace: Sequence[TraceRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "split", "mse", "infonce", "total"])
        for row in trace:
            w.writerow([row.epoch, row.split, f"{row.mse:.9g}", f"{row.infonce:.9g}", f"{row.total:.9g}"])


# -- checkpoints ------------------------------------------------------------


def architecture(model: Model) -> dict:
    if isinstance(model, DisentangledModel):
        trunk = model.encoder.trunk
        return {
            "method": "dis",
            "d_f": trunk.in_dim,
            "d_c": model.heads.heads[0].out_dim,
            "hidden": [w.shape[1] for w in trunk.weights[:-1]],
            "d_h": model.encoder.d_h,
        }
    m = model.mlps[0]
    return {"method": "sf", "d_f": m.in_dim, "d_c": m.out_dim, "hidden": [w.shape[1] for w in m.weights[:-1]]}


def save_checkpoint(model: Model, path: str | Path, extra: dict | None = None) -> None:
    named = list(model.named_params())
    header = {
        "architecture": architecture(model),
        "params": [[name, list(p.shape)] for name, p in named],
        **(extra or {}),
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(raw)))
        fh.write(raw)
        for _, p in named:
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
    tmp.replace(path)


def load_checkpoint(path: str | Path, dtype=np.float32) -> tuple[Model, dict]:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise BadMagicError(f"bad checkpoint magic {data[:4]!r}")
    if len(data) < 12:
        raise TruncatedPayloadError("checkpoint header truncated")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version} not supported")
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    pos = 12 + hlen
    arrays = {}
    for name, shape in header["params"]:
        size = int(np.prod(shape)) * 4
        if pos + size > len(data):
            raise TruncatedPayloadError(f"checkpoint truncated in {name}")
        arrays[name] = np.frombuffer(data[pos : pos + size], dtype="<f4").reshape(shape).astype(dtype)
        pos += size
    arch = header["architecture"]
    n_layers = len(arch["hidden"]) + 1

    def mlp(prefix, layers=n_layers):
        return MlpParams([arrays[f"{prefix}.W{i}"] for i in range(layers)], [arrays[f"{prefix}.b{i}"] for i in range(layers)])

    if arch["method"] == "dis":
        model: Model = DisentangledModel(EncoderParams(mlp("trunk")), Heads(tuple(mlp(f"head{i}", 1) for i in range(N_OFFSETS))))
    else:
        model = StraightforwardModel(tuple(mlp(f"mlp{i}") for i in range(N_OFFSETS)))
    return model, header


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
