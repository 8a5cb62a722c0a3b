"""Bidirectional hard-negative ranking loss, AdamW, and the train loop.

The loss follows the max-of-hinges recipe: for every matched pair only the
hardest in-batch negative contributes, in both directions.  Batches pair
each image with exactly one of its captions (rotating across epochs), so a
batch never contains two captions of the same image and the hardest
negative is always a true negative.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autograd as ag
from . import model as model_mod
from .autograd import Tensor
from .config import DimConfig, ModelConfig
from .errors import ConfigError, TrainingError


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings; defaults follow the full-scale operating point.

    Desk-scale runs usually override batch_size down to 32.
    """

    margin: float = 0.2
    lr: float = 5e-4
    weight_decay: float = 1e-4
    batch_size: int = 256
    epochs: int = 25
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def triplet_loss(sim: Tensor, margin: float) -> Tensor:
    """Sum of bidirectional hinge losses with hardest in-batch negatives.

    sim is the (B, B) similarity matrix whose diagonal holds the matched
    pairs.  B must be at least 2; otherwise there is no negative to rank
    against.
    """
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ConfigError("similarity matrix must be square, got %r" % (sim.shape,))
    if sim.shape[0] < 2:
        raise ConfigError("triplet loss needs a batch of >= 2 pairs")
    pos = ag.diag(sim)
    hardest_caption = ag.offdiag_max(sim, axis=1)   # per image
    hardest_image = ag.offdiag_max(sim, axis=0)     # per caption
    return (ag.relu(hardest_caption - pos + margin).sum()
            + ag.relu(hardest_image - pos + margin).sum())


# ---------------------------------------------------------------------------
# AdamW


class AdamWState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self):
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adamw_step(named: dict[str, Tensor], state: AdamWState, cfg: TrainConfig) -> None:
    """One decoupled-weight-decay Adam update over named parameters.

    Parameters with no accumulated gradient are still decayed.  A NaN or
    Inf gradient aborts with the parameter path in the message.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in named.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise TrainingError("non-finite gradient in %s" % (name,))
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        p.data = p.data - cfg.lr * update - cfg.lr * cfg.weight_decay * p.data


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    params: model_mod.ModelParams
    loss_curve: list          # per-epoch mean loss per pair
    epochs_run: int
    elapsed_s: float
    stopped_early: bool = False
    config: dict = field(default_factory=dict)


def _caption_lookup(texts) -> list[list[int]]:
    caps: dict[int, list[int]] = {}
    for s, img in enumerate(texts.image_index):
        caps.setdefault(int(img), []).append(s)
    return caps


def train(bundles, texts, dims: DimConfig, model_cfg: ModelConfig,
          cfg: TrainConfig, mode: str = "region",
          epoch_callback=None) -> TrainResult:
    """Train a joint embedding on prepared features.

    Deterministic given (seed, configs, dataset): the sampler is a seeded
    permutation per epoch, and each image contributes the caption indexed
    by epoch modulo its caption count.  ``epoch_callback(epoch, mean_loss,
    params)`` may return True to stop early.
    """
    if cfg.batch_size < 2:
        raise ConfigError("batch_size must be >= 2 for in-batch negatives")
    if cfg.epochs < 1:
        raise ConfigError("epochs must be >= 1")
    model_cfg.validate(dims)
    n_images = len(bundles)
    if n_images < 2:
        raise ConfigError("training needs at least 2 images")
    caps = _caption_lookup(texts)
    missing = [i for i in range(n_images) if not caps.get(i)]
    if missing:
        raise ConfigError("images without captions: %r" % (missing[:5],))

    params = model_mod.init_params(model_cfg, dims, cfg.seed)
    named = params.named()
    prepped = [model_mod.prepare_image(b, dims, model_cfg, mode) for b in bundles]
    txts = model_mod.prepare_text(texts)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(3)[1])
    state = AdamWState()

    t0 = time.perf_counter()
    loss_curve = []
    stopped = False
    epochs_run = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_images)
        total_loss = 0.0
        total_pairs = 0
        for lo in range(0, n_images, cfg.batch_size):
            batch = order[lo:lo + cfg.batch_size]
            if batch.shape[0] < 2:
                continue  # a single leftover pair has no in-batch negative
            img_embs = [model_mod.visual_forward(prepped[i], params, model_cfg)
                        for i in batch]
            txt_embs = []
            for i in batch:
                c = caps[int(i)]
                txt_embs.append(model_mod.text_forward(
                    txts[c[epoch % len(c)]], params, model_cfg))
            sim = ag.matmul(ag.stack(img_embs), ag.transpose(ag.stack(txt_embs)))
            loss = triplet_loss(sim, cfg.margin)
            params.zero_grad()
            loss.backward()
            adamw_step(named, state, cfg)
            total_loss += float(loss.data)
            total_pairs += int(batch.shape[0])
        mean_loss = total_loss / max(total_pairs, 1)
        loss_curve.append(mean_loss)
        epochs_run = epoch + 1
        if epoch_callback is not None and epoch_callback(epoch, mean_loss, params):
            stopped = True
            break
    return TrainResult(params=params, loss_curve=loss_curve,
                       epochs_run=epochs_run,
                       elapsed_s=time.perf_counter() - t0,
                       stopped_early=stopped,
                       config={"train": cfg.to_dict(),
                               "model": model_cfg.to_dict(),
                               "mode": mode})
