"""Unsupervised task-adaptive pre-training of the frame encoder.

Samples are viewed as T frames of f features each. Training masks a fraction
of frames, runs the context network on the corrupted sequence, and pushes the
masked-position context vectors to (a) match the codebook embedding of the
original frame against in-batch negatives and (b) predict the original
frame's code id. Codebook parameters stay frozen, so targets carry no
gradient and the objective stays finite-difference checkable.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, asdict

import numpy as np

from .dataset import Dataset
from .numerics import (
    AdamState,
    DenseNet,
    adam_step,
    log_softmax,
    softmax,
)


@dataclass
class TaptConfig:
    frames: int = 8           # T: frames per sample
    code_dim: int = 16        # h: context / codeword dimension
    codebook_size: int = 32   # V
    hidden: int = 64          # context-network hidden width
    mask_fraction: float = 0.15
    temperature: float = 0.1
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-4
    seed: int = 0

    def validate(self) -> None:
        if self.frames < 2:
            raise ValueError("frames must be >= 2")
        if self.codebook_size < 2:
            raise ValueError("codebook_size must be >= 2")
        if not 0.0 < self.mask_fraction <= 1.0:
            raise ValueError("mask_fraction must lie in (0, 1]")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")


def mask_count(frames: int, fraction: float = 0.15) -> int:
    """Number of masked frames: round-half-up, never below one."""
    return max(1, int(math.floor(fraction * frames + 0.5)))


def make_mask(
    frames: int, fraction: float = 0.15, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Sorted masked-frame indices, drawn uniformly without replacement."""
    if frames < 2:
        raise ValueError("frames must be >= 2")
    rng = rng if rng is not None else np.random.default_rng()
    count = mask_count(frames, fraction)
    return np.sort(rng.choice(frames, size=count, replace=False))


class Codebook:
    """Fixed random projection into code space plus V unit-norm codewords."""

    def __init__(self, projection: np.ndarray, codewords: np.ndarray):
        projection = np.asarray(projection, dtype=np.float64)
        codewords = np.asarray(codewords, dtype=np.float64)
        if projection.ndim != 2 or codewords.ndim != 2:
            raise ValueError("projection and codewords must be 2-D")
        if projection.shape[1] != codewords.shape[1]:
            raise ValueError("code dimension mismatch between projection and codewords")
        if codewords.shape[0] < 2:
            raise ValueError("codebook needs at least 2 codewords")
        # pairwise-distinct codewords; random init satisfies this a.s.
        diffs = codewords[:, None, :] - codewords[None, :, :]
        dist = np.sqrt((diffs**2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        if dist.min() == 0.0:
            raise ValueError("codewords must be pairwise distinct")
        self.projection = projection
        self.codewords = codewords

    @classmethod
    def create(cls, frame_dim: int, code_dim: int, size: int, rng) -> "Codebook":
        projection = rng.standard_normal((frame_dim, code_dim)) / math.sqrt(frame_dim)
        raw = rng.standard_normal((size, code_dim))
        codewords = raw / np.linalg.norm(raw, axis=1, keepdims=True)
        return cls(projection, codewords)

    @property
    def size(self) -> int:
        return self.codewords.shape[0]

    def quantize(self, frame: np.ndarray) -> tuple[int, np.ndarray]:
        """Nearest codeword (Euclidean) of the projected frame; ties pick the lowest id."""
        ids, z = self.quantize_batch(np.asarray(frame, dtype=np.float64)[None, :])
        return int(ids[0]), z[0]

    def quantize_batch(self, frames: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        projected = frames @ self.projection
        d2 = ((projected[:, None, :] - self.codewords[None, :, :]) ** 2).sum(-1)
        ids = np.argmin(d2, axis=1)  # argmin resolves ties at the lowest index
        return ids, self.codewords[ids]


class EncoderModel:
    """Context network + codebook + reconstruction head over frame sequences."""

    def __init__(
        self,
        context_net: DenseNet,
        recon_head: DenseNet,
        codebook: Codebook,
        frames: int,
        frame_dim: int,
        code_dim: int,
    ):
        if context_net.in_dim != frames * frame_dim:
            raise ValueError("context network input must be frames * frame_dim wide")
        if context_net.out_dim != frames * code_dim:
            raise ValueError("context network output must be frames * code_dim wide")
        if recon_head.in_dim != code_dim or recon_head.out_dim != codebook.size:
            raise ValueError("reconstruction head must map code_dim -> codebook size")
        self.context_net = context_net
        self.recon_head = recon_head
        self.codebook = codebook
        self.frames = frames
        self.frame_dim = frame_dim
        self.code_dim = code_dim

    @classmethod
    def create(cls, feature_dim: int, cfg: TaptConfig, seed: int | None = None) -> "EncoderModel":
        cfg.validate()
        if feature_dim % cfg.frames != 0:
            raise ValueError(
                f"feature_dim {feature_dim} not divisible by frames {cfg.frames}"
            )
        frame_dim = feature_dim // cfg.frames
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        context = DenseNet.create(
            [feature_dim, cfg.hidden, cfg.frames * cfg.code_dim], ["tanh", "identity"], rng
        )
        head = DenseNet.create([cfg.code_dim, cfg.codebook_size], ["identity"], rng)
        codebook = Codebook.create(frame_dim, cfg.code_dim, cfg.codebook_size, rng)
        return cls(context, head, codebook, cfg.frames, frame_dim, cfg.code_dim)

    def params(self) -> list[np.ndarray]:
        return self.context_net.params() + self.recon_head.params()

    def set_params(self, arrays: list[np.ndarray]) -> None:
        split = 2 * len(self.context_net.layers)
        self.context_net.set_params(arrays[:split])
        self.recon_head.set_params(arrays[split:])

    def copy(self) -> "EncoderModel":
        return EncoderModel(
            self.context_net.copy(),
            self.recon_head.copy(),
            Codebook(self.codebook.projection.copy(), self.codebook.codewords.copy()),
            self.frames,
            self.frame_dim,
            self.code_dim,
        )

    def context_vectors(self, x: np.ndarray) -> np.ndarray:
        """(n, T*f) -> (n, T, h) context representations."""
        out = self.context_net.forward_batch(x)
        return out.reshape(x.shape[0], self.frames, self.code_dim)


def quantize(codebook: Codebook, frame: np.ndarray) -> tuple[int, np.ndarray]:
    """Code id and codeword of the nearest codebook entry for one frame."""
    return codebook.quantize(frame)


def corrupt(x: np.ndarray, masks: list[np.ndarray], frames: int, frame_dim: int) -> np.ndarray:
    """Zero out the masked frames of each flattened sample."""
    out = x.copy().reshape(x.shape[0], frames, frame_dim)
    for row, mask in enumerate(masks):
        out[row, mask, :] = 0.0
    return out.reshape(x.shape)


def _cosine_rows(zc: np.ndarray, zq: np.ndarray):
    nc = np.linalg.norm(zc, axis=1)
    nq = np.linalg.norm(zq, axis=1)
    if (nc == 0.0).any() or (nq == 0.0).any():
        raise ValueError("cosine similarity undefined for zero-norm vector")
    un = zc / nc[:, None]
    vn = zq / nq[:, None]
    return un @ vn.T, un, vn, nc


def contrastive_loss(zc: np.ndarray, zq: np.ndarray, temperature: float = 0.1) -> float:
    """Sum of -log softmax(sim/temp) over positive pairs, negatives in-batch.

    zc and zq are matched by row; every other row of zq serves as a negative
    for each context vector.
    """
    loss, _ = contrastive_loss_grad(zc, zq, temperature)
    return loss


def contrastive_loss_grad(
    zc: np.ndarray, zq: np.ndarray, temperature: float = 0.1
) -> tuple[float, np.ndarray]:
    """Contrastive loss plus its gradient w.r.t. the context vectors."""
    zc = np.asarray(zc, dtype=np.float64)
    zq = np.asarray(zq, dtype=np.float64)
    if zc.shape != zq.shape or zc.ndim != 2 or zc.shape[0] < 1:
        raise ValueError("contrastive loss expects matching (n, h) stacks")
    sims, un, vn, nc = _cosine_rows(zc, zq)
    scaled = sims / temperature
    shifted = scaled - scaled.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + scaled.max(axis=1)
    loss = float((lse - np.diag(scaled)).sum())

    probs = np.exp(scaled - lse[:, None])
    coeff = (probs - np.eye(zc.shape[0])) / temperature  # dL/dsims
    # d sims_ij / d zc_i = (vn_j - sims_ij * un_i) / ||zc_i||
    grad = (coeff @ vn - (coeff * sims).sum(axis=1, keepdims=True) * un) / nc[:, None]
    return loss, grad


def reconstruction_loss(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean negative log-probability of the true code id at each masked position."""
    loss, _ = reconstruction_loss_grad(logits, targets)
    return loss


def reconstruction_loss_grad(
    logits: np.ndarray, targets: np.ndarray
) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.ndim != 1 or logits.shape[0] != targets.shape[0]:
        raise ValueError("reconstruction loss expects (n, V) logits and n targets")
    if logits.shape[0] < 1:
        raise ValueError("at least one masked position required")
    v = logits.shape[1]
    if (targets < 0).any() or (targets >= v).any():
        raise ValueError(f"target code id outside [0, {v})")
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = float(-logp[np.arange(n), targets].mean())
    grad = softmax(logits)
    grad[np.arange(n), targets] -= 1.0
    return loss, grad / n


def tapt_batch_loss(
    encoder: EncoderModel,
    x: np.ndarray,
    masks: list[np.ndarray],
    temperature: float = 0.1,
):
    """Combined contrastive + reconstruction loss and parameter gradients.

    Targets come from the uncorrupted frames through the frozen codebook, so
    the gradient flows only through the context network and the head.
    """
    t, f, h = encoder.frames, encoder.frame_dim, encoder.code_dim
    corrupted = corrupt(x, masks, t, f)
    flat_ctx, cache = encoder.context_net.forward_cache(corrupted)
    ctx = flat_ctx.reshape(x.shape[0], t, h)

    rows = np.concatenate([np.full(m.size, i) for i, m in enumerate(masks)])
    cols = np.concatenate(masks)
    zc = ctx[rows, cols]
    original_frames = x.reshape(x.shape[0], t, f)[rows, cols]
    code_ids, zq = encoder.codebook.quantize_batch(original_frames)

    cl, d_zc = contrastive_loss_grad(zc, zq, temperature)
    logits, head_cache = encoder.recon_head.forward_cache(zc)
    rl, d_logits = reconstruction_loss_grad(logits, code_ids)
    d_zc_head, head_grads = encoder.recon_head.backward(head_cache, d_logits)

    d_ctx = np.zeros_like(ctx)
    np.add.at(d_ctx, (rows, cols), d_zc + d_zc_head)
    _, ctx_grads = encoder.context_net.backward(
        cache, d_ctx.reshape(x.shape[0], t * h)
    )
    return cl + rl, ctx_grads + head_grads, (cl, rl)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")


def tapt_train(
    encoder: EncoderModel, pool: Dataset, cfg: TaptConfig
) -> tuple[EncoderModel, list[float]]:
    """Pre-train the encoder on an unlabeled pool; returns it with the loss trace.

    Masks are re-sampled every epoch; per-seed runs are bit-reproducible.
    """
    cfg.validate()
    x = pool.feature_matrix()
    if x.shape[1] != encoder.frames * encoder.frame_dim:
        raise ValueError("pool feature width does not match the encoder")
    rng = np.random.default_rng(cfg.seed)
    params = encoder.params()
    state = AdamState.for_params(params, lr=cfg.lr)
    trace: list[float] = []
    n = x.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        batch_losses = []
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            masks = [
                make_mask(encoder.frames, cfg.mask_fraction, rng) for _ in idx
            ]
            loss, grads, _ = tapt_batch_loss(
                encoder, x[idx], masks, cfg.temperature
            )
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, bi, loss)
            adam_step(params, grads, state)
            batch_losses.append(loss)
        trace.append(float(np.mean(batch_losses)))
    return encoder, trace


CHECKPOINT_FORMAT = "altune-encoder"
CHECKPOINT_VERSION = 1


def save_encoder(encoder: EncoderModel, cfg: TaptConfig, path) -> None:
    """Write a JSON checkpoint: config echo plus every parameter array."""
    arrays = {
        "codebook.projection": encoder.codebook.projection,
        "codebook.codewords": encoder.codebook.codewords,
    }
    for i, layer in enumerate(encoder.context_net.layers):
        arrays[f"context.{i}.w"] = layer.w
        arrays[f"context.{i}.b"] = layer.b
        arrays[f"context.{i}.activation"] = layer.activation
    for i, layer in enumerate(encoder.recon_head.layers):
        arrays[f"head.{i}.w"] = layer.w
        arrays[f"head.{i}.b"] = layer.b
        arrays[f"head.{i}.activation"] = layer.activation
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(cfg),
        "frames": encoder.frames,
        "frame_dim": encoder.frame_dim,
        "code_dim": encoder.code_dim,
        "arrays": {
            k: (v if isinstance(v, str) else [list(map(float, row)) for row in np.atleast_2d(v)])
            for k, v in arrays.items()
        },
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
    os.replace(tmp, path)


def load_encoder(path) -> tuple[EncoderModel, TaptConfig]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an encoder checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version")
    cfg = TaptConfig(**payload["config"])
    arrays = payload["arrays"]

    def layers_for(prefix: str, flatten_bias: bool):
        from .numerics import Layer

        out = []
        i = 0
        while f"{prefix}.{i}.w" in arrays:
            w = np.array(arrays[f"{prefix}.{i}.w"], dtype=np.float64)
            b = np.array(arrays[f"{prefix}.{i}.b"], dtype=np.float64).reshape(-1)
            out.append(Layer(w, b, arrays[f"{prefix}.{i}.activation"]))
            i += 1
        return out

    context = DenseNet(layers_for("context", True))
    head = DenseNet(layers_for("head", True))
    codebook = Codebook(
        np.array(arrays["codebook.projection"], dtype=np.float64),
        np.array(arrays["codebook.codewords"], dtype=np.float64),
    )
    encoder = EncoderModel(
        context,
        head,
        codebook,
        payload["frames"],
        payload["frame_dim"],
        payload["code_dim"],
    )
    return encoder, cfg
