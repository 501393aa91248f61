"""Texture randomization scaffolding.

The style-transfer network is external to this package. What is modeled here
is the style-embedding draw ``z = alpha * N(mu, Sigma) + (1 - alpha) * P(c)``,
the bitmask compositing of a stylized foreground over the original
background, and the per-sample choice between the plain and the
texture-randomized dataset. A procedural stylizer stands in for the network so
the compositing path can run offline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Protocol

import numpy as np

from .errors import InvalidCovarianceError, InvalidInputError, ShapeError

EMBEDDING_DIM = 100
DEFAULT_ALPHA = 0.25
SYMMETRY_TOL = 1e-9
PSD_TOL = 1e-9

SYNTHETIC = "synthetic"
TEXTURE_RANDOMIZED = "texture_randomized"


@dataclass(frozen=True)
class StyleSamplerConfig:
    mu: np.ndarray
    sigma: np.ndarray
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        sigma = np.asarray(self.sigma, dtype=float)
        d = mu.shape[0] if mu.ndim == 1 else -1
        if mu.ndim != 1 or sigma.shape != (d, d):
            raise ShapeError(f"mu must be (d,) and sigma (d, d); got {mu.shape} and {sigma.shape}")
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidInputError(f"alpha must lie in [0, 1], got {self.alpha}")
        if np.max(np.abs(sigma - sigma.T), initial=0.0) > SYMMETRY_TOL:
            raise InvalidCovarianceError("covariance is not symmetric")
        for name, a in (("mu", mu), ("sigma", sigma)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @cached_property
    def factor(self) -> np.ndarray:
        """``L`` with ``L @ L.T == sigma``.

        Cholesky when ``sigma`` is positive definite; otherwise the
        eigendecomposition with eigenvalues down to ``-PSD_TOL`` clipped to 0.
        """
        try:
            return np.linalg.cholesky(self.sigma)
        except np.linalg.LinAlgError:
            w, V = np.linalg.eigh(self.sigma)
            if w.min() < -PSD_TOL:
                raise InvalidCovarianceError(f"covariance has eigenvalue {w.min():.3g} < -{PSD_TOL}")
            return V * np.sqrt(np.clip(w, 0.0, None))


def sample_embedding(config: StyleSamplerConfig, content, seed: int) -> np.ndarray:
    """Style embedding for one content image; deterministic in ``seed``."""
    pc = np.asarray(content, dtype=float)
    if pc.shape != (config.dim,):
        raise ShapeError(f"content embedding must have shape ({config.dim},), got {pc.shape}")
    eps = np.random.default_rng(seed).standard_normal(config.dim)
    a = config.alpha
    return a * (config.mu + config.factor @ eps) + (1.0 - a) * pc


def composite(stylized, original, mask) -> np.ndarray:
    """Stylized pixels where ``mask`` is 1, original pixels elsewhere."""
    s = np.asarray(stylized)
    o = np.asarray(original)
    m = np.asarray(mask)
    if s.shape != o.shape or m.shape != o.shape[: m.ndim] or m.ndim not in (2, o.ndim):
        raise ShapeError(f"shape mismatch: stylized {s.shape}, original {o.shape}, mask {m.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise InvalidInputError("mask values must be 0 or 1")
    mb = m.astype(bool)
    if mb.ndim < o.ndim:
        mb = mb.reshape(mb.shape + (1,) * (o.ndim - mb.ndim))
    return np.where(mb, s, o).astype(o.dtype)


def mix_choice(p_tr: float, seed: int, index: int) -> str:
    """Which dataset sample ``index`` is drawn from under mixing probability ``p_tr``.

    The uniform draw comes from a PCG64 stream keyed on ``(seed, index)``,
    so the choice is reproducible and independent of iteration order.
    """
    if not 0.0 <= p_tr <= 1.0:
        raise InvalidInputError(f"p_TR must lie in [0, 1], got {p_tr}")
    u = np.random.default_rng([seed, index]).random()
    return TEXTURE_RANDOMIZED if u < p_tr else SYNTHETIC


# ---------------------------------------------------------------------------
# Stylizers
# ---------------------------------------------------------------------------


class Stylizer(Protocol):
    def __call__(self, image: np.ndarray, seed: int) -> np.ndarray: ...


@dataclass(frozen=True)
class ValueNoiseStylizer:
    """Multiplies the image by smooth random value noise.

    A coarse grid of uniform values is bilinearly upsampled to the image
    size; ``strength`` sets the modulation depth around 1.
    """

    cells: int = 8
    strength: float = 0.8

    def noise(self, shape, seed: int) -> np.ndarray:
        H, W = shape
        rng = np.random.default_rng(seed)
        grid = rng.uniform(-1.0, 1.0, size=(self.cells + 1, self.cells + 1))
        ys = np.linspace(0, self.cells, H)
        xs = np.linspace(0, self.cells, W)
        y0 = np.minimum(ys.astype(int), self.cells - 1)
        x0 = np.minimum(xs.astype(int), self.cells - 1)
        fy = (ys - y0)[:, None]
        fx = (xs - x0)[None, :]
        g00 = grid[y0][:, x0]
        g01 = grid[y0][:, x0 + 1]
        g10 = grid[y0 + 1][:, x0]
        g11 = grid[y0 + 1][:, x0 + 1]
        return (g00 * (1 - fx) + g01 * fx) * (1 - fy) + (g10 * (1 - fx) + g11 * fx) * fy

    def __call__(self, image, seed: int) -> np.ndarray:
        img = np.asarray(image)
        n = self.noise(img.shape[:2], seed)
        if img.ndim == 3:
            n = n[..., None]
        out = img.astype(float) * (1.0 + self.strength * n) + 40.0 * self.strength * n
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def stylize(image, mask, seed: int, stylizer: Stylizer | None = None) -> np.ndarray:
    """Stylize the masked foreground and paste it over the untouched background."""
    stylizer = ValueNoiseStylizer() if stylizer is None else stylizer
    return composite(stylizer(image, seed), image, mask)


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def synthetic_embedding_stats(dim: int = EMBEDDING_DIM, seed: int = 0, rank: int | None = None):
    """A random ``(mu, sigma)`` pair with ``sigma`` symmetric PSD.

    ``rank < dim`` yields a singular covariance.
    """
    rng = np.random.default_rng(seed)
    r = dim if rank is None else rank
    A = rng.normal(size=(dim, r)) / np.sqrt(r)
    sigma = A @ A.T
    sigma = 0.5 * (sigma + sigma.T)
    return rng.normal(size=dim), sigma


def save_embedding_stats(path: str | Path, mu, sigma) -> None:
    Path(path).write_text(json.dumps({"mu": np.asarray(mu).tolist(), "sigma": np.asarray(sigma).tolist()}))


def load_embedding_stats(path: str | Path, alpha: float = DEFAULT_ALPHA) -> StyleSamplerConfig:
    """Read ``{"mu": [d], "sigma": [[d] * d]}``; ``.npz`` files with the same keys also work."""
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as f:
            return StyleSamplerConfig(f["mu"], f["sigma"], alpha)
    d = json.loads(path.read_text())
    try:
        return StyleSamplerConfig(np.array(d["mu"], float), np.array(d["sigma"], float), alpha)
    except KeyError as e:
        raise InvalidInputError(f"embedding statistics file lacks {e}") from e


def load_mask(path: str | Path) -> np.ndarray:
    """Binary mask from an image file; any non-zero pixel counts as foreground."""
    from PIL import Image

    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 0).astype(np.uint8)


def save_mask(path: str | Path, mask) -> None:
    """Write a 1-bit-per-pixel PNG."""
    from PIL import Image

    m = np.asarray(mask).astype(bool)
    Image.fromarray(m).convert("1").save(path)
