"""Desk-scale denoiser zoo: trainable residual CNNs plus a total-variation baseline.

The residual CNNs are plain conv+ReLU stacks (3x3 kernels, unit stride, zero
padding, no batch norm) that predict the noise field; denoising subtracts the
prediction and clips to [0, 1]. Training and inference run on CPU through
torch; all randomness is seeded, weights are stored as a flat little-endian
float32 vector, and the [0, 1] output clip is treated as identity on the
backward pass.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import (
    ChecksumError,
    ModelFormatError,
    ParameterError,
    TrainingError,
    UnsupportedOperationError,
)
from .imagecore import Image, NoiseField, derive_seed, rng_from_seed

__all__ = [
    "DenoiserSpec",
    "TrainConfig",
    "TrainedDenoiser",
    "train",
    "tv_denoise",
    "classical_denoiser",
    "save_model",
    "load_model",
    "ZOO_SPECS",
    "default_train_config",
]

_FORMAT_VERSION = 1
_MAGIC = b"DPGDMODL"

_torch_ready = False


def _torch_setup() -> None:
    """Pin thread count once per process; keeps CPU runs reproducible."""
    global _torch_ready
    if not _torch_ready:
        torch.set_num_threads(min(4, torch.get_num_threads()))
        _torch_ready = True


@dataclass(frozen=True)
class DenoiserSpec:
    """Architecture hyperparameters. 3x3 kernels, unit stride, zero padding."""

    kind: str  # "residual-cnn" | "tv-classical"
    depth: int = 7
    width: int = 32
    blind: bool = False
    in_channels: int = 1
    tv_weight: float = 0.12  # tv-classical fidelity weight (hyperparameter, not learned)
    tv_iters: int = 60

    def __post_init__(self):
        if self.kind not in ("residual-cnn", "tv-classical"):
            raise ParameterError(f"unknown denoiser kind {self.kind!r}")
        if self.kind == "residual-cnn":
            if self.depth < 3:
                raise ParameterError(f"depth must be >= 3, got {self.depth}")
            if self.width < 8:
                raise ParameterError(f"width must be >= 8, got {self.width}")
        if self.in_channels not in (1, 3):
            raise ParameterError(f"in_channels must be 1 or 3, got {self.in_channels}")

    def n_params(self) -> int:
        if self.kind == "tv-classical":
            return 0
        c, w, d = self.in_channels, self.width, self.depth
        first = c * w * 9 + w
        middle = (d - 2) * (w * w * 9 + w)
        last = w * c * 9 + c
        return first + middle + last

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "depth": self.depth,
            "width": self.width,
            "blind": self.blind,
            "in_channels": self.in_channels,
            "tv_weight": self.tv_weight,
            "tv_iters": self.tv_iters,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DenoiserSpec":
        return cls(**doc)

    def digest(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_json(), sort_keys=True).encode()
        ).hexdigest()


def _build_network(spec: DenoiserSpec, dtype: torch.dtype) -> nn.Sequential:
    layers: list[nn.Module] = [
        nn.Conv2d(spec.in_channels, spec.width, 3, padding=1),
        nn.ReLU(),
    ]
    for _ in range(spec.depth - 2):
        layers += [nn.Conv2d(spec.width, spec.width, 3, padding=1), nn.ReLU()]
    layers.append(nn.Conv2d(spec.width, spec.in_channels, 3, padding=1))
    return nn.Sequential(*layers).to(dtype)


def _flatten_weights(net: nn.Module) -> np.ndarray:
    """Parameters in module declaration order, each flattened C-order."""
    chunks = [p.detach().cpu().numpy().astype(np.float32).ravel() for p in net.parameters()]
    return np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.float32)


def _load_weights(net: nn.Module, flat: np.ndarray) -> None:
    offset = 0
    with torch.no_grad():
        for p in net.parameters():
            count = p.numel()
            block = flat[offset : offset + count].reshape(p.shape).copy()
            p.copy_(torch.from_numpy(block).to(p.dtype))
            offset += count
    if offset != flat.size:
        raise ModelFormatError(
            f"weight vector length {flat.size} does not match architecture ({offset})"
        )


_TORCH_DTYPES = {np.dtype(np.float32): torch.float32, np.dtype(np.float64): torch.float64}


@dataclass
class TrainedDenoiser:
    """Immutable trained denoiser: spec + flat weight vector + provenance.

    ``denoise`` and ``input_gradient`` are pure given their inputs and safe to
    call concurrently. ``dtype`` selects the compute precision (float32 for
    throughput, float64 for gradient verification); weights are float32 either
    way.
    """

    spec: DenoiserSpec
    weights: np.ndarray
    train_sigma: float | tuple[float, float] | None = None
    train_seed: int | None = None
    provenance: str = ""
    model_id: str = ""
    metadata: dict = field(default_factory=dict)
    _nets: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float32).ravel()
        if self.weights.size != self.spec.n_params():
            raise ModelFormatError(
                f"weight vector length {self.weights.size} != spec count {self.spec.n_params()}"
            )
        self.weights.setflags(write=False)

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_nets"] = {}
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)

    def _net(self, dtype: np.dtype) -> nn.Sequential:
        key = np.dtype(dtype)
        if key not in self._nets:
            _torch_setup()
            net = _build_network(self.spec, _TORCH_DTYPES[key])
            _load_weights(net, self.weights)
            net.eval()
            for p in net.parameters():
                p.requires_grad_(False)
            self._nets[key] = net
        return self._nets[key]

    def _check_input(self, x: Image) -> None:
        if x.channels != self.spec.in_channels:
            raise ParameterError(
                f"model expects {self.spec.in_channels} channel(s), image has {x.channels}"
            )

    def _to_tensor(self, img: Image, dtype) -> torch.Tensor:
        arr = img.pixels.transpose(2, 0, 1)[None].copy()  # NCHW, writable
        return torch.from_numpy(arr).to(_TORCH_DTYPES[np.dtype(dtype)])

    def predicted_noise(self, x: Image, dtype=np.float32) -> NoiseField:
        """Raw network output: the noise field the model would subtract."""
        if self.spec.kind != "residual-cnn":
            raise UnsupportedOperationError("classical denoiser has no noise predictor")
        self._check_input(x)
        with torch.no_grad():
            out = self._net(dtype)(self._to_tensor(x, dtype))
        return NoiseField(out[0].numpy().astype(np.float64).transpose(1, 2, 0))

    def denoise(self, x: Image, dtype=np.float32) -> Image:
        """clip(x - predicted_noise(x), 0, 1) for CNNs; TV solution otherwise."""
        self._check_input(x)
        if self.spec.kind == "tv-classical":
            return tv_denoise(x, self.spec.tv_weight, self.spec.tv_iters)
        pred = self.predicted_noise(x, dtype=dtype)
        out = np.clip(x.pixels - pred.values, 0.0, 1.0)
        return Image(out, id=f"{self.model_id}({x.id})")

    def denoise_many(self, images: list[Image], dtype=np.float32, chunk: int = 16) -> list[Image]:
        """Batched denoise for same-shape images (sweeps, transfer tables)."""
        if self.spec.kind == "tv-classical":
            return [self.denoise(im) for im in images]
        for im in images:
            self._check_input(im)
        net = self._net(dtype)
        out: list[Image] = []
        td = _TORCH_DTYPES[np.dtype(dtype)]
        for start in range(0, len(images), chunk):
            block = images[start : start + chunk]
            arr = np.stack([im.pixels.transpose(2, 0, 1) for im in block])
            xb = torch.from_numpy(arr).to(td)
            with torch.no_grad():
                pred = net(xb)
            den = np.clip(arr - pred.numpy(), 0.0, 1.0)
            out.extend(
                Image(den[k].astype(np.float64).transpose(1, 2, 0),
                      id=f"{self.model_id}({block[k].id})")
                for k in range(len(block))
            )
        return out

    def input_gradient(self, x: Image, y: Image, dtype=np.float32) -> NoiseField:
        """Gradient of J(D(x), y) = ||D(x) - y||_2^2 with respect to x.

        Exact reverse-mode differentiation; the output clip is
        straight-through on the backward pass.
        """
        if self.spec.kind != "residual-cnn":
            raise UnsupportedOperationError("tv-classical exposes no input gradient")
        self._check_input(x)
        if x.pixels.shape != y.pixels.shape:
            raise ParameterError("x and y shapes differ")
        net = self._net(dtype)
        xt = self._to_tensor(x, dtype).requires_grad_(True)
        yt = self._to_tensor(y, dtype)
        denoised = xt - net(xt)
        clipped = denoised + (denoised.clamp(0.0, 1.0) - denoised).detach()
        loss = ((clipped - yt) ** 2).sum()
        (grad,) = torch.autograd.grad(loss, xt)
        return NoiseField(grad[0].numpy().astype(np.float64).transpose(1, 2, 0))

    def loss_value(self, x: Image, y: Image, dtype=np.float32) -> float:
        """J(D(x), y) = ||D(x) - y||_2^2 (sum over pixels and channels)."""
        out = self.denoise(x, dtype=dtype)
        return float(np.sum((out.pixels - y.pixels) ** 2))


@dataclass(frozen=True)
class TrainConfig:
    """Deterministic training recipe for the residual CNNs.

    ``sigma`` is a single 0-255 level for non-blind specs or a (low, high)
    range for blind specs; noisy inputs are synthesized on the fly each batch
    and the loss is the MSE between the network output and the injected
    noise field.
    """

    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    lr_decay_factor: float = 0.5
    lr_decay_every: int = 10
    sigma: float | tuple[float, float] = 25.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ParameterError("epochs and batch_size must be positive")
        if self.lr_decay_every < 1:
            raise ParameterError("lr_decay_every must be positive")

    def sigma_is_range(self) -> bool:
        return isinstance(self.sigma, (tuple, list))

    def to_json(self) -> dict:
        doc = {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "lr_decay_factor": self.lr_decay_factor,
            "lr_decay_every": self.lr_decay_every,
            "sigma": list(self.sigma) if self.sigma_is_range() else self.sigma,
            "seed": self.seed,
        }
        return doc


def _batch_sigmas(cfg: TrainConfig, rng: np.random.Generator, count: int) -> np.ndarray:
    if cfg.sigma_is_range():
        lo, hi = cfg.sigma
        return rng.uniform(lo, hi, size=count)
    return np.full(count, float(cfg.sigma))


def train(
    spec: DenoiserSpec,
    data: list[Image],
    cfg: TrainConfig,
    model_id: str = "",
    provenance: str = "",
    input_hook=None,
    log_every: int = 0,
) -> TrainedDenoiser:
    """Train a residual CNN to predict the injected noise field.

    Deterministic given (data order, cfg.seed): weight init comes from the
    torch generator, batch order and noise draws from Philox streams derived
    per epoch/batch. ``input_hook(epoch, batch, indices, noisy, targets)``
    may replace batch inputs/targets (used for adversarial training); with no
    hook the loop reduces to plain Gaussian training.
    """
    if spec.kind != "residual-cnn":
        raise ParameterError("only residual-cnn specs are trainable")
    if spec.blind and not cfg.sigma_is_range():
        raise ParameterError("blind specs require a (low, high) sigma range")
    if not spec.blind and cfg.sigma_is_range():
        raise ParameterError("non-blind specs require a single sigma")
    if not data:
        raise ParameterError("no training patches")
    for p in data:
        if p.channels != spec.in_channels:
            raise ParameterError("patch channel count does not match spec")

    _torch_setup()
    clean = np.stack([p.pixels.transpose(2, 0, 1) for p in data]).astype(np.float32)
    n_patches = clean.shape[0]

    torch.manual_seed(derive_seed(cfg.seed, "init"))
    net = _build_network(spec, torch.float32)
    net.train()
    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)

    epoch_losses: list[float] = []
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = rng_from_seed(derive_seed(cfg.seed, f"order/{epoch}")).permutation(n_patches)
        batch_losses: list[float] = []
        for b, start in enumerate(range(0, n_patches, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            batch_clean = clean[idx]
            rng = rng_from_seed(derive_seed(cfg.seed, f"noise/{epoch}/{b}"))
            sigmas = _batch_sigmas(cfg, rng, len(idx)) / 255.0
            noise = rng.normal(0.0, 1.0, size=batch_clean.shape) * sigmas[:, None, None, None]
            noise = noise.astype(np.float32)
            noisy = np.clip(batch_clean + noise, 0.0, 1.0)
            targets = noise
            if input_hook is not None:
                noisy, targets = input_hook(epoch, b, idx, noisy, targets)

            xb = torch.from_numpy(noisy)
            tb = torch.from_numpy(targets)
            optimizer.zero_grad()
            loss = ((net(xb) - tb) ** 2).mean()
            value = float(loss.detach())
            if not np.isfinite(value):
                raise TrainingError(f"loss diverged at epoch {epoch}", epoch=epoch)
            loss.backward()
            optimizer.step()
            batch_losses.append(value)
        tail = batch_losses[-100:]
        epoch_losses.append(float(np.mean(tail)))
        if log_every and (epoch + 1) % log_every == 0:
            print(f"[train {model_id or spec.kind}] epoch {epoch + 1}/{cfg.epochs} "
                  f"loss {epoch_losses[-1]:.6f} lr {lr:.2e}", flush=True)

    net.eval()
    return TrainedDenoiser(
        spec=spec,
        weights=_flatten_weights(net),
        train_sigma=tuple(cfg.sigma) if cfg.sigma_is_range() else float(cfg.sigma),
        train_seed=cfg.seed,
        provenance=provenance,
        model_id=model_id or f"{spec.kind}-d{spec.depth}w{spec.width}",
        metadata={"epoch_losses": epoch_losses, "train_config": cfg.to_json()},
    )


# ---------------------------------------------------------------------------
# Total-variation baseline (dual projection)
# ---------------------------------------------------------------------------


def _grad2d(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gy = np.zeros_like(u)
    gx = np.zeros_like(u)
    gy[:-1, :] = u[1:, :] - u[:-1, :]
    gx[:, :-1] = u[:, 1:] - u[:, :-1]
    return gy, gx


def _div2d(py: np.ndarray, px: np.ndarray) -> np.ndarray:
    div = np.zeros_like(py)
    div[0, :] = py[0, :]
    div[1:-1, :] = py[1:-1, :] - py[:-2, :]
    div[-1, :] = -py[-2, :]
    div[:, 0] += px[:, 0]
    div[:, 1:-1] += px[:, 1:-1] - px[:, :-2]
    div[:, -1] += -px[:, -2]
    return div


def tv_denoise(x: Image, weight: float, iters: int = 60) -> Image:
    """Minimize ||u - x||^2 + weight * TV(u) by dual projection, per channel.

    Fixed iteration count with step 0.25; the dual variable p is projected
    onto the unit ball each sweep and the primal recovered as
    u = x - (weight/2) * div(p).
    """
    if weight <= 0:
        raise ParameterError(f"weight must be > 0, got {weight}")
    if iters < 1:
        raise ParameterError(f"iters must be >= 1, got {iters}")
    lam = weight / 2.0  # spec objective -> classical ||u-x||^2/(2 lam) + TV form
    tau = 0.25
    out = np.empty_like(x.pixels)
    for c in range(x.channels):
        f = x.pixels[:, :, c]
        py = np.zeros_like(f)
        px = np.zeros_like(f)
        for _ in range(iters):
            gy, gx = _grad2d(_div2d(py, px) - f / lam)
            norm = np.sqrt(gy**2 + gx**2)
            denom = 1.0 + tau * norm
            py = (py + tau * gy) / denom
            px = (px + tau * gx) / denom
        out[:, :, c] = f - lam * _div2d(py, px)
    return Image(np.clip(out, 0.0, 1.0), id=f"tv({x.id})")


def classical_denoiser(weight: float = 0.12, iters: int = 60, in_channels: int = 1) -> TrainedDenoiser:
    """Zoo entry for the parameter-free TV baseline."""
    spec = DenoiserSpec(
        kind="tv-classical", depth=0, width=0, blind=False,
        in_channels=in_channels, tv_weight=weight, tv_iters=iters,
    )
    # depth/width floors only apply to residual CNNs
    return TrainedDenoiser(spec=spec, weights=np.zeros(0, dtype=np.float32), model_id="tv-classical")


# ---------------------------------------------------------------------------
# Model container: JSON header + float32 LE payload + SHA-256 checksum
# ---------------------------------------------------------------------------


def save_model(d: TrainedDenoiser, path) -> None:
    payload = d.weights.astype("<f4").tobytes()
    header = {
        "format_version": _FORMAT_VERSION,
        "spec": d.spec.to_json(),
        "spec_digest": d.spec.digest(),
        "train_sigma": list(d.train_sigma) if isinstance(d.train_sigma, tuple) else d.train_sigma,
        "train_seed": d.train_seed,
        "provenance": d.provenance,
        "model_id": d.model_id,
        "metadata": d.metadata,
        "weight_count": int(d.weights.size),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with Path(path).open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_model(path) -> TrainedDenoiser:
    raw = Path(path).read_bytes()
    if len(raw) < len(_MAGIC) + 4 or raw[: len(_MAGIC)] != _MAGIC:
        raise ModelFormatError(f"{path}: not a model container")
    (hlen,) = struct.unpack("<I", raw[len(_MAGIC) : len(_MAGIC) + 4])
    start = len(_MAGIC) + 4
    try:
        header = json.loads(raw[start : start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: corrupt header ({exc})") from exc
    if header.get("format_version") != _FORMAT_VERSION:
        raise ModelFormatError(
            f"{path}: container version {header.get('format_version')} != {_FORMAT_VERSION}"
        )
    spec = DenoiserSpec.from_json(header["spec"])
    if header.get("spec_digest") != spec.digest():
        raise ModelFormatError(f"{path}: spec digest mismatch")
    payload = raw[start + hlen :]
    expected = header["weight_count"] * 4
    if len(payload) != expected:
        raise ChecksumError(f"{path}: payload truncated ({len(payload)} of {expected} bytes)")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise ChecksumError(f"{path}: payload checksum mismatch")
    weights = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    sigma = header["train_sigma"]
    if isinstance(sigma, list):
        sigma = tuple(sigma)
    return TrainedDenoiser(
        spec=spec,
        weights=weights,
        train_sigma=sigma,
        train_seed=header["train_seed"],
        provenance=header["provenance"],
        model_id=header["model_id"],
        metadata=header.get("metadata", {}),
    )


# ---------------------------------------------------------------------------
# Zoo presets
# ---------------------------------------------------------------------------

ZOO_SPECS = {
    "dncnn-lite": DenoiserSpec(kind="residual-cnn", depth=7, width=32, blind=False),
    "dncnn-lite-b-arch": DenoiserSpec(kind="residual-cnn", depth=9, width=48, blind=False),
    "blind-lite": DenoiserSpec(kind="residual-cnn", depth=7, width=32, blind=True),
}

_ZOO_TRAIN = {
    "dncnn-lite": dict(epochs=30, sigma=25.0),
    "dncnn-lite-b-arch": dict(epochs=18, sigma=25.0),
    "blind-lite": dict(epochs=30, sigma=(0.0, 55.0)),
}


def default_train_config(name: str, seed: int) -> TrainConfig:
    """Training recipe for a named zoo member, seeded from a master seed."""
    if name not in _ZOO_TRAIN:
        raise ParameterError(f"unknown zoo model {name!r}")
    params = _ZOO_TRAIN[name]
    return TrainConfig(seed=derive_seed(seed, f"train/{name}"), **params)
