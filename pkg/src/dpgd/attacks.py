"""Attack engine: signed-gradient ascent on a denoiser's reconstruction error.

Four entry points:

* ``denoising_pgd`` — uniform random start inside the l-inf ball around the
  noisy image, then T signed-gradient steps, each followed by a [0, 1] range
  clip and a projection back onto the l-inf ball.
* ``l2_denoising_pgd`` — Gaussian jitter at each iteration start, signed
  steps, and projection of the *total* noise (x' - y) onto an L2 ball
  centered at the clean image, which keeps the composed noise close to the
  Gaussian the denoiser was trained for.
* ``attack_on_clean`` — the same l-inf iteration but accumulating on the
  clean image itself (no Gaussian noise), used to show the attack needs the
  noise to bite.
* ``matched_gaussian_control`` — a pure Gaussian observation at an
  adversarial sample's exact empirical noise level, isolating attack
  structure from noise-level shift.

The ascent objective is J(D(x'), y) = ||D(x') - y||_2^2 (squared norm; its
sign field equals the plain norm's wherever both exist). sign(0) = 0, so
pixels with vanishing gradient are left alone.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .denoisers import TrainedDenoiser
from .errors import AttackError, ParameterError
from .imagecore import Image, NoiseField, derive_seed, load_image, rng_from_seed, save_image

__all__ = [
    "AttackConfig",
    "AdversarialSample",
    "denoising_pgd",
    "l2_denoising_pgd",
    "attack_on_clean",
    "matched_gaussian_control",
    "save_sample",
    "load_sample",
]

_SLACK = 1e-6


@dataclass(frozen=True)
class AttackConfig:
    """Attack hyperparameters; ``alpha`` defaults to epsilon/steps.

    ``gaussian_std`` is the per-iteration jitter level of the L2 variant
    (default alpha/2); set ``gaussian_once`` to apply it only before the
    first step instead of every step.
    """

    epsilon: float
    steps: int = 5
    alpha: float | None = None
    init: str = "uniform-ball"  # "uniform-ball" | "gaussian"
    projection: str = "linf-ball"  # "linf-ball" | "l2-noise-ball"
    l2_radius: float | None = None
    basis: str = "noisy-image"  # "noisy-image" | "clean-image"
    seed: int = 0
    gaussian_std: float | None = None
    gaussian_once: bool = False

    def __post_init__(self):
        if self.epsilon < 0:
            raise ParameterError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise ParameterError(f"steps must be >= 1, got {self.steps}")
        if self.alpha is not None and self.alpha > self.epsilon + _SLACK:
            raise ParameterError("alpha must not exceed epsilon")
        if self.init not in ("uniform-ball", "gaussian"):
            raise ParameterError(f"unknown init {self.init!r}")
        if self.projection not in ("linf-ball", "l2-noise-ball"):
            raise ParameterError(f"unknown projection {self.projection!r}")
        if self.basis not in ("noisy-image", "clean-image"):
            raise ParameterError(f"unknown basis {self.basis!r}")
        if self.projection == "l2-noise-ball" and (
            self.l2_radius is None or self.l2_radius <= 0
        ):
            raise ParameterError("l2-noise-ball projection requires l2_radius > 0")

    @property
    def step_size(self) -> float:
        return self.alpha if self.alpha is not None else self.epsilon / self.steps

    def to_json(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "steps": self.steps,
            "alpha": self.alpha,
            "init": self.init,
            "projection": self.projection,
            "l2_radius": self.l2_radius,
            "basis": self.basis,
            "seed": self.seed,
            "gaussian_std": self.gaussian_std,
            "gaussian_once": self.gaussian_once,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "AttackConfig":
        return cls(**doc)


@dataclass(frozen=True)
class AdversarialSample:
    """An attacked image x', its perturbation v = x' - x, and provenance."""

    x_prime: Image
    v: NoiseField
    source_model_id: str
    config: AttackConfig
    base: tuple[Image, NoiseField, Image]  # (x, n, y)
    extra: dict = field(default_factory=dict)

    @property
    def x(self) -> Image:
        return self.base[0]

    @property
    def n(self) -> NoiseField:
        return self.base[1]

    @property
    def y(self) -> Image:
        return self.base[2]

    def perturbation_linf(self) -> float:
        return self.v.linf_norm()

    def total_noise(self) -> NoiseField:
        """x' - y: the composed noise the denoiser actually sees."""
        return NoiseField(self.x_prime.pixels - self.y.pixels)


def _finite_or_raise(grad: np.ndarray, step: int) -> None:
    if not np.isfinite(grad).all():
        raise AttackError(f"non-finite gradient at attack step {step}")


def _grad_sign(d: TrainedDenoiser, x_arr: np.ndarray, y: Image, step: int, dtype) -> np.ndarray:
    grad = d.input_gradient(Image(x_arr), y, dtype=dtype).values
    _finite_or_raise(grad, step)
    return np.sign(grad)


def _pgd_linf(
    d: TrainedDenoiser,
    x: Image,
    y: Image,
    cfg: AttackConfig,
    dtype,
    trace: bool,
) -> tuple[np.ndarray, list[float]]:
    """Shared l-inf ascent loop; returns final pixels and per-iterate bounds."""
    eps = cfg.epsilon
    alpha = cfg.step_size
    base = x.pixels
    bounds: list[float] = []
    if eps == 0.0:
        return base.copy(), bounds
    rng = rng_from_seed(cfg.seed)
    cur = np.clip(base + rng.uniform(-eps, eps, size=base.shape), 0.0, 1.0)
    for t in range(cfg.steps):
        sign = _grad_sign(d, cur, y, t, dtype)
        cur = np.clip(cur + alpha * sign, 0.0, 1.0)
        cur = np.clip(cur, base - eps, base + eps)
        if trace:
            bounds.append(float(np.max(np.abs(cur - base))))
    return cur, bounds


def denoising_pgd(
    d: TrainedDenoiser,
    x: Image,
    y: Image,
    cfg: AttackConfig,
    dtype=np.float32,
    trace: bool = False,
) -> AdversarialSample:
    """PGD on the reconstruction error inside the l-inf ball around ``x``.

    x0' = clip(x + U(-eps, eps)); then T times:
    x' <- project_linf(clip_01(x' + alpha * sign(grad J(D(x'), y)))).
    """
    if cfg.projection != "linf-ball":
        raise ParameterError("denoising_pgd requires linf-ball projection")
    if cfg.basis != "noisy-image":
        raise ParameterError("denoising_pgd operates on the noisy-image basis")
    n = NoiseField(x.pixels - y.pixels)
    final, bounds = _pgd_linf(d, x, y, cfg, dtype, trace)
    extra = {"trace_linf": bounds} if trace else {}
    return AdversarialSample(
        x_prime=Image(final, id=f"{x.id}~adv"),
        v=NoiseField(final - x.pixels),
        source_model_id=d.model_id,
        config=cfg,
        base=(x, n, y),
        extra=extra,
    )


def l2_denoising_pgd(
    d: TrainedDenoiser,
    x: Image,
    y: Image,
    cfg: AttackConfig,
    dtype=np.float32,
    trace: bool = False,
) -> AdversarialSample:
    """Distribution-preserving variant: Gaussian jitter + total-noise L2 ball.

    alpha = eps/T; each iteration adds Gaussian jitter to the iterate, takes
    a signed-gradient step, projects the total noise x' - y back onto the L2
    ball of the configured radius around the clean image, then clips to the
    image range.
    """
    if cfg.projection != "l2-noise-ball":
        raise ParameterError("l2_denoising_pgd requires l2-noise-ball projection")
    radius = float(cfg.l2_radius)
    alpha = cfg.step_size
    std = cfg.gaussian_std if cfg.gaussian_std is not None else alpha / 2.0
    rng = rng_from_seed(cfg.seed)
    base = x.pixels
    cur = base.copy()
    bounds: list[float] = []
    n = NoiseField(base - y.pixels)
    for t in range(cfg.steps):
        if std > 0 and (t == 0 or not cfg.gaussian_once):
            cur = cur + rng.normal(0.0, std, size=cur.shape)
        if alpha > 0:
            cur = cur + alpha * _grad_sign(d, np.clip(cur, 0.0, 1.0), y, t, dtype)
        delta = cur - y.pixels
        norm = float(np.linalg.norm(delta.ravel()))
        if norm > radius:
            delta = delta * (radius / norm)
        cur = np.clip(y.pixels + delta, 0.0, 1.0)
        if trace:
            bounds.append(float(np.linalg.norm((cur - y.pixels).ravel())))
    extra = {"trace_l2": bounds} if trace else {}
    return AdversarialSample(
        x_prime=Image(cur, id=f"{x.id}~l2adv"),
        v=NoiseField(cur - base),
        source_model_id=d.model_id,
        config=cfg,
        base=(x, n, y),
        extra=extra,
    )


def attack_on_clean(
    d: TrainedDenoiser,
    y: Image,
    cfg: AttackConfig,
    dtype=np.float32,
    trace: bool = False,
) -> AdversarialSample:
    """l-inf attack accumulating directly on the clean image (x = y).

    Reproduces the negative result that perturbations built without a
    Gaussian noise carrier have little adversarial effect; the sample's
    ``extra["perturbation_std"]`` reports std(v) for matched comparisons.
    """
    if cfg.basis != "clean-image":
        raise ParameterError("attack_on_clean requires clean-image basis")
    if cfg.projection != "linf-ball":
        raise ParameterError("attack_on_clean requires linf-ball projection")
    linf_cfg = replace(cfg, basis="noisy-image")
    final, bounds = _pgd_linf(d, y, y, linf_cfg, dtype, trace)
    v = final - y.pixels
    extra = {"perturbation_std": float(np.std(v))}
    if trace:
        extra["trace_linf"] = bounds
    return AdversarialSample(
        x_prime=Image(final, id=f"{y.id}~cleanadv"),
        v=NoiseField(v),
        source_model_id=d.model_id,
        config=cfg,
        base=(y, NoiseField(np.zeros_like(y.pixels)), y),
        extra=extra,
    )


def matched_gaussian_control(x_prime: Image, y: Image, seed: int) -> Image:
    """Pure Gaussian observation at the sample's empirical noise level.

    Measures sigma_hat = std(x_prime - y) and returns clip(y + N(0,
    sigma_hat^2)). Lets experiments ask whether a metric drop is explained
    by the slight noise-level shift alone.
    """
    if x_prime.pixels.shape != y.pixels.shape:
        raise ParameterError("x_prime and y shapes differ")
    sigma_hat = float(np.std(x_prime.pixels - y.pixels))
    rng = rng_from_seed(seed)
    noise = rng.normal(0.0, sigma_hat, size=y.pixels.shape)
    return Image(np.clip(y.pixels + noise, 0.0, 1.0), id=f"{y.id}~ctrl")


# ---------------------------------------------------------------------------
# Persistence: x' image + exact float32 perturbation + JSON sidecar
# ---------------------------------------------------------------------------


def _array_digest(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def save_sample(sample: AdversarialSample, directory, stem: str, metrics: dict | None = None) -> None:
    """Write <stem>.png (16-bit x'), <stem>_v.npy (float32 v), <stem>.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_image(sample.x_prime, directory / f"{stem}.png", bit_depth=16)
    np.save(directory / f"{stem}_v.npy", sample.v.values.astype(np.float32))
    sidecar = {
        "config": sample.config.to_json(),
        "source_model_id": sample.source_model_id,
        "base_digests": {
            "x": _array_digest(sample.x.pixels),
            "n": _array_digest(sample.n.values),
            "y": _array_digest(sample.y.pixels),
        },
        "image_id": sample.y.id,
        "extra": sample.extra,
        "metrics": metrics or {},
    }
    (directory / f"{stem}.json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_sample(directory, stem: str) -> dict:
    """Load the persisted triple; the PNG is 16-bit quantized, v is exact."""
    directory = Path(directory)
    sidecar = json.loads((directory / f"{stem}.json").read_text())
    x_prime = load_image(directory / f"{stem}.png")
    v = NoiseField(np.load(directory / f"{stem}_v.npy").astype(np.float64))
    return {"x_prime": x_prime, "v": v, "sidecar": sidecar}
