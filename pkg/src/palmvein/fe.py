"""Siamese feature extractor (FE).

The trunk's early stages run two rectangular convolutions in parallel -- one
tall, one wide, capturing vein strokes in both orientations -- and
channel-concatenate the branches. Later stages are plain 3x3 convs. An
adaptive average pool fixes the spatial grid regardless of input size, and a
single fully-connected head projects the flattened map to a unit-norm
embedding.

The trunk can be pretrained as an autoencoder: a mirror decoder (upsample +
conv per pooled stage) reconstructs the multi-channel input under MSE, then
is discarded and only the trunk weights kept.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .optim import Adam
from .tensor import (
    ParamSet,
    Tensor,
    adaptive_avg_pool2d,
    backward,
    clamp01,
    concat_channels,
    conv2d,
    conv_params,
    dropout,
    l2_normalize,
    linear,
    linear_params,
    maxpool2,
    mse_loss,
    relu,
    upsample2_nearest,
)


@dataclass(frozen=True)
class StageSpec:
    """One trunk stage: 1 kernel shape (plain conv) or 2 (parallel branches,
    channel-concatenated). out_channels is the stage's total output width."""

    kernels: tuple[tuple[int, int], ...]
    out_channels: int
    pool: bool

    def __post_init__(self):
        if len(self.kernels) not in (1, 2):
            raise ConfigError(f"stage must have 1 or 2 kernels, got {len(self.kernels)}")
        if len(self.kernels) == 2 and self.out_channels % 2 != 0:
            raise ConfigError(
                f"parallel stage needs even out_channels, got {self.out_channels}")
        for k in self.kernels:
            if len(k) != 2 or k[0] < 1 or k[1] < 1:
                raise ConfigError(f"bad kernel shape {k}")
        if self.out_channels < 1:
            raise ConfigError(f"out_channels must be >= 1, got {self.out_channels}")


def standard_stages(schedule: tuple[int, ...]) -> tuple[StageSpec, ...]:
    """The six-stage trunk: three parallel rectangular stages with pooling,
    one pooled 3x3 stage, then two unpooled 3x3 stages."""
    if len(schedule) != 6:
        raise ConfigError(f"channel schedule needs 6 entries, got {len(schedule)}")
    return (
        StageSpec(((9, 3), (3, 9)), schedule[0], pool=True),
        StageSpec(((7, 3), (3, 7)), schedule[1], pool=True),
        StageSpec(((5, 3), (3, 5)), schedule[2], pool=True),
        StageSpec(((3, 3),), schedule[3], pool=True),
        StageSpec(((3, 3),), schedule[4], pool=False),
        StageSpec(((3, 3),), schedule[5], pool=False),
    )


@dataclass(frozen=True)
class FEConfig:
    input_size: int = 64
    input_channels: int = 3
    stages: tuple[StageSpec, ...] = standard_stages((8, 16, 32, 64, 64, 64))
    pool_grid: int = 4
    embedding_dim: int = 128
    dropout_rate: float = 0.0

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("need at least one stage")
        pools = sum(1 for s in self.stages if s.pool)
        if self.input_size >> pools < 1:
            raise ConfigError(
                f"input_size {self.input_size} too small for {pools} pool stages")
        if self.pool_grid < 1:
            raise ConfigError(f"pool_grid must be >= 1, got {self.pool_grid}")
        if self.embedding_dim < 1:
            raise ConfigError(f"embedding_dim must be >= 1, got {self.embedding_dim}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0,1), got {self.dropout_rate}")

    @staticmethod
    def desk() -> "FEConfig":
        return FEConfig()

    @staticmethod
    def fullscale() -> "FEConfig":
        """Full-scale preset: 150x150 input, 7x7x512 trunk interface."""
        return FEConfig(input_size=150,
                        stages=standard_stages((64, 128, 256, 512, 512, 512)),
                        pool_grid=7)

    @property
    def trunk_channels(self) -> int:
        return self.stages[-1].out_channels

    @property
    def flat_dim(self) -> int:
        return self.trunk_channels * self.pool_grid * self.pool_grid


@dataclass
class FEModel:
    config: FEConfig
    trunk: ParamSet
    head: ParamSet

    @property
    def params(self) -> ParamSet:
        return ParamSet.union(("trunk", self.trunk), ("head", self.head))


def build_fe(config: FEConfig, seed: int = 0) -> FEModel:
    rng = np.random.default_rng([seed, 0xFE])
    trunk = ParamSet()
    c_in = config.input_channels
    for i, stage in enumerate(config.stages):
        c_branch = stage.out_channels // len(stage.kernels)
        for b, (kh, kw) in enumerate(stage.kernels):
            w, bias = conv_params(rng, c_branch, c_in, kh, kw)
            trunk.add(f"stage{i}.branch{b}.w", w)
            trunk.add(f"stage{i}.branch{b}.b", bias)
        c_in = stage.out_channels
    head = ParamSet()
    w, b = linear_params(rng, config.embedding_dim, config.flat_dim)
    head.add("fc.w", w)
    head.add("fc.b", b)
    return FEModel(config=config, trunk=trunk, head=head)


def trunk_apply(model: FEModel, x: Tensor) -> Tensor:
    """Conv stages only: [N,C,H,W] -> final feature map (no pooling to grid)."""
    cfg = model.config
    if x.shape[-3] != cfg.input_channels:
        raise DimensionError(
            f"input has {x.shape[-3]} channels, config expects {cfg.input_channels}")
    if x.shape[-2] != cfg.input_size or x.shape[-1] != cfg.input_size:
        raise DimensionError(
            f"spatial dims {x.shape[-2:]} do not match config size {cfg.input_size}")
    for i, stage in enumerate(cfg.stages):
        branches = []
        for b in range(len(stage.kernels)):
            w = model.trunk[f"stage{i}.branch{b}.w"]
            bias = model.trunk[f"stage{i}.branch{b}.b"]
            branches.append(relu(conv2d(x, w, bias, "same")))
        x = branches[0] if len(branches) == 1 else concat_channels(*branches)
        if stage.pool:
            x = maxpool2(x)
    return x


def fe_apply(model: FEModel, x: Tensor, training: bool = False,
             rng: np.random.Generator | None = None) -> Tensor:
    """Full forward: [N,C,H,W] -> [N,embedding_dim] unit-norm embeddings."""
    cfg = model.config
    feat = trunk_apply(model, x)
    feat = adaptive_avg_pool2d(feat, cfg.pool_grid)
    flat = feat.flatten_from(feat.ndim - 3)
    if training and cfg.dropout_rate > 0.0:
        if rng is None:
            raise ContractError("dropout during training requires an rng")
        flat = dropout(flat, cfg.dropout_rate, rng, training=True)
    return l2_normalize(linear(flat, model.head["fc.w"], model.head["fc.b"]))


def embed(model: FEModel, mci: np.ndarray) -> np.ndarray:
    """Embed one [3,H,W] multi-channel image to a unit 128-vector."""
    arr = np.asarray(mci, dtype=np.float32)
    if arr.ndim != 3:
        raise DimensionError(f"embed expects [C,H,W], got {arr.ndim} dims")
    return fe_apply(model, Tensor(arr[None])).data[0]


def embed_batch(model: FEModel, mcis: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Embed [N,3,H,W] in chunks; returns [N,embedding_dim] float32."""
    arr = np.asarray(mcis, dtype=np.float32)
    if arr.ndim != 4:
        raise DimensionError(f"embed_batch expects [N,C,H,W], got {arr.ndim} dims")
    outs = [fe_apply(model, Tensor(arr[s:s + batch_size])).data
            for s in range(0, arr.shape[0], batch_size)]
    return np.concatenate(outs, axis=0)


def set_trainable(model: FEModel, trunk: bool, head: bool) -> None:
    """Freeze/unfreeze the parameter groups; frozen tensors get no gradients."""
    model.trunk.set_requires_grad(trunk)
    model.head.set_requires_grad(head)


# ---------------------------------------------------------------------------
# Autoencoder pretraining
# ---------------------------------------------------------------------------


@dataclass
class AEHyper:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0


def build_mirror_decoder(config: FEConfig, seed: int = 0) -> ParamSet:
    """Decoder mirroring the trunk: per encoder stage in reverse, upsample
    (if that stage pooled) then a 3x3 conv back to the stage's input width."""
    rng = np.random.default_rng([seed, 0xDEC])
    dec = ParamSet()
    c_in = config.input_channels
    widths = []
    for stage in config.stages:
        widths.append((c_in, stage.out_channels))
        c_in = stage.out_channels
    for i, (c_from, c_to) in enumerate(reversed(widths)):
        w, b = conv_params(rng, c_from, c_to, 3, 3)
        dec.add(f"dec{i}.w", w)
        dec.add(f"dec{i}.b", b)
    return dec


def decoder_apply(config: FEConfig, dec: ParamSet, feat: Tensor) -> Tensor:
    n_stages = len(config.stages)
    x = feat
    for i, stage in enumerate(reversed(config.stages)):
        if stage.pool:
            x = upsample2_nearest(x)
        y = conv2d(x, dec[f"dec{i}.w"], dec[f"dec{i}.b"], "same")
        x = clamp01(y) if i == n_stages - 1 else relu(y)
    return x


def pretrain_autoencoder(model: FEModel, images: np.ndarray | list,
                         hyper: AEHyper | None = None) -> tuple[ParamSet, list[float]]:
    """Train trunk+mirror-decoder to reconstruct the inputs; discard decoder.

    `images` is [N,3,H,W] (or a list of [3,H,W]). Returns the trained trunk
    ParamSet (the model's own, updated in place) and the per-epoch loss log.
    """
    if hyper is None:
        hyper = AEHyper()
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images]) \
        if isinstance(images, list) else np.asarray(images, dtype=np.float32)
    if arr.ndim != 4 or arr.shape[0] < 1:
        raise ContractError("pretraining requires at least one [3,H,W] image")
    cfg = model.config
    if arr.shape[1] != cfg.input_channels or arr.shape[2] != cfg.input_size:
        raise DimensionError(
            f"images {arr.shape[1:]} do not match config "
            f"({cfg.input_channels},{cfg.input_size},{cfg.input_size})")

    dec = build_mirror_decoder(cfg, seed=hyper.seed)
    joint = ParamSet.union(("trunk", model.trunk), ("dec", dec))
    was_trainable = [t.requires_grad for t in model.trunk.tensors()]
    model.trunk.set_requires_grad(True)
    opt = Adam(joint, lr=hyper.lr)
    rng = np.random.default_rng([hyper.seed, 0xAE])
    n = arr.shape[0]
    bs = min(hyper.batch_size, n)
    log = []
    try:
        for _ in range(hyper.epochs):
            order = rng.permutation(n)
            losses = []
            for start in range(0, n, bs):
                sel = order[start:start + bs]
                batch = Tensor(arr[sel])
                opt.zero_grad()
                recon = decoder_apply(cfg, dec, trunk_apply(model, batch))
                loss = mse_loss(recon, batch)
                backward(loss)
                opt.step()
                losses.append(loss.item())
            log.append(float(np.mean(losses)))
            if not np.isfinite(log[-1]):
                raise ContractError(f"autoencoder diverged: epoch loss {log[-1]}")
    finally:
        for t, flag in zip(model.trunk.tensors(), was_trainable):
            t.requires_grad = flag
    return model.trunk, log


def reconstruction_mse(model: FEModel, dec: ParamSet, images: np.ndarray) -> float:
    """Mean reconstruction error of the current autoencoder on `images`."""
    arr = np.asarray(images, dtype=np.float32)
    recon = decoder_apply(model.config, dec, trunk_apply(model, Tensor(arr)))
    return float(((recon.data - arr) ** 2).mean())
