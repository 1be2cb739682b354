"""Encoder / decoder / classifier network built from masked layers."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError
from .masked import MaskedLinear, TaskRegistry, checkpoint_bytes, read_checkpoint, restore_layers
from .tensor import (
    Tensor,
    add,
    cross_entropy_loss,
    kl_standard_normal,
    mse_loss,
    per_instance_mse,
    relu,
    reparameterize,
    scale,
)

VARIANTS = ("ae", "vae")


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    class_count: int
    hidden_dims: tuple[int, ...] = (128, 64)
    latent_dim: int = 32
    variant: str = "ae"
    kl_weight: float = 0.001

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, self.class_count, self.latent_dim, *self.hidden_dims)
        if any(int(d) <= 0 for d in dims):
            raise ConfigError(f"all model dimensions must be positive: {dims}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.kl_weight < 0:
            raise ConfigError("kl_weight must be non-negative")

    @property
    def decoder_dims(self) -> tuple[int, ...]:
        return tuple(reversed(self.hidden_dims))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{**d, "hidden_dims": tuple(d.get("hidden_dims", (128, 64)))})

    @classmethod
    def for_images(cls, class_count: int, variant: str = "ae", **kw) -> "ModelConfig":
        """784 -> 256 -> 128 -> 64 layout for flattened 28x28 inputs."""
        return cls(input_dim=784, class_count=class_count, hidden_dims=(256, 128), latent_dim=64, variant=variant, **kw)


@dataclass
class ForwardResult:
    input: Tensor
    reconstruction: Tensor
    logits: Tensor
    latent: Tensor
    mu: Tensor | None = None
    log_var: Tensor | None = None
    per_instance_rec_loss: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass
class LossBreakdown:
    total: Tensor
    rec: float
    cls: float
    kl: float = 0.0

    def as_dict(self) -> dict:
        return {"loss": self.total.item(), "rec": self.rec, "cls": self.cls, "kl": self.kl}


class HybridModel:
    def __init__(self, config: ModelConfig, dtype=np.float32, total_tasks_planned: int | None = None):
        self.config = config
        self.dtype = np.dtype(dtype)
        c = config
        widths = (c.input_dim, *c.hidden_dims)
        self.encoder = [MaskedLinear(i, o, f"enc.{n}", dtype) for n, (i, o) in enumerate(zip(widths[:-1], widths[1:]))]
        self.to_mu = MaskedLinear(widths[-1], c.latent_dim, "enc.mu", dtype)
        self.to_log_var = MaskedLinear(widths[-1], c.latent_dim, "enc.log_var", dtype) if c.variant == "vae" else None
        dwidths = (c.latent_dim, *c.decoder_dims, c.input_dim)
        self.decoder = [MaskedLinear(i, o, f"dec.{n}", dtype) for n, (i, o) in enumerate(zip(dwidths[:-1], dwidths[1:]))]
        self.classifier = MaskedLinear(c.latent_dim, c.class_count, "cls", dtype)
        self.registry = TaskRegistry(self.layers, total_tasks_planned)

    @property
    def layers(self) -> list[MaskedLinear]:
        extra = [self.to_log_var] if self.to_log_var is not None else []
        return [*self.encoder, self.to_mu, *extra, *self.decoder, self.classifier]

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def decoder_only_parameters(self) -> list[Tensor]:
        return [p for layer in self.decoder for p in layer.parameters()]

    def classifier_only_parameters(self) -> list[Tensor]:
        return self.classifier.parameters()

    def forward(self, x, k: int | None, training: bool = False, noise=None) -> ForwardResult:
        """Run the network at visibility ``k``.

        VAE training samples the latent with ``noise`` (standard normal,
        shape ``[n, latent_dim]``); evaluation uses the mean.
        """
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=self.dtype)
        if x.data.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise ShapeError(f"expected input of width {self.config.input_dim}, got shape {x.shape}")
        h = x
        for layer in self.encoder:
            h = relu(layer.forward_visible(h, k, training))
        mu = self.to_mu.forward_visible(h, k, training)
        log_var = None
        z = mu
        if self.to_log_var is not None:
            log_var = self.to_log_var.forward_visible(h, k, training)
            if training:
                if noise is None:
                    raise ValueError("VAE training forward requires injected noise")
                z = reparameterize(mu, log_var, noise)
        h = z
        for layer in self.decoder[:-1]:
            h = relu(layer.forward_visible(h, k, training))
        x_hat = self.decoder[-1].forward_visible(h, k, training)
        logits = self.classifier.forward_visible(z, k, training)
        return ForwardResult(
            input=x,
            reconstruction=x_hat,
            logits=logits,
            latent=z,
            mu=mu if log_var is not None else None,
            log_var=log_var,
            per_instance_rec_loss=per_instance_mse(x, x_hat),
        )

    def training_loss(self, result: ForwardResult, labels) -> LossBreakdown:
        """Reconstruction MSE + cross-entropy (+ weighted KL for the VAE)."""
        labels = np.asarray(labels)
        if labels.size and (labels.min() < 0 or labels.max() >= self.config.class_count):
            raise ValueError(f"label outside [0, {self.config.class_count})")
        rec = mse_loss(result.input, result.reconstruction)
        cls = cross_entropy_loss(result.logits, labels)
        total = add(rec, cls)
        kl_val = 0.0
        if self.config.variant == "vae":
            kl = kl_standard_normal(result.mu, result.log_var)
            kl_val = kl.item()
            total = add(total, scale(kl, self.config.kl_weight))
        return LossBreakdown(total, rec.item(), cls.item(), kl_val)

    def astype(self, dtype) -> "HybridModel":
        """Deep copy with every parameter cast to ``dtype``."""
        other = copy.deepcopy(self)
        other.dtype = np.dtype(dtype)
        for layer in other.layers:
            for p in layer.parameters():
                p.data = p.data.astype(dtype)
            layer.bias_snapshots = [s.astype(dtype) for s in layer.bias_snapshots]
        return other

    # -- persistence ---------------------------------------------------------

    def checkpoint_bytes(self, extra: dict | None = None) -> bytes:
        meta = {"model_config": self.config.to_dict(), **(extra or {})}
        return checkpoint_bytes(self.registry, meta)

    def save(self, path, extra: dict | None = None) -> None:
        Path(path).write_bytes(self.checkpoint_bytes(extra))

    @classmethod
    def load(cls, path) -> tuple["HybridModel", dict]:
        with open(path, "rb") as fp:
            meta, reg, layers = read_checkpoint(fp)
        model = cls(ModelConfig.from_dict(meta["model_config"]))
        restore_layers(model.registry, reg, layers)
        return model, meta
