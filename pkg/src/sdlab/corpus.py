"""Synthetic class-conditional corpora for both data regimes.

The point regime is a set of 2-D Gaussian mixtures with known parameters, so
every downstream quantity has an analytic reference. The image regime is a
bank of 16x16 single-channel shapes, one per class, with small jitter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigurationError, ValidationError


@dataclass(frozen=True)
class GaussianMixture:
    """Finite Gaussian mixture with full covariances.

    weights: (K,) summing to 1, means: (K, d), covs: (K, d, d) positive
    definite. Exposes exact sampling, log density, and score.
    """

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.asarray(self.means, dtype=np.float64)
        cov = np.asarray(self.covs, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covs", cov)
        if w.ndim != 1 or mu.ndim != 2 or cov.ndim != 3:
            raise ValidationError("expected weights (K,), means (K,d), covs (K,d,d)")
        if not (w.shape[0] == mu.shape[0] == cov.shape[0]):
            raise ValidationError("component counts disagree")
        if cov.shape[1:] != (mu.shape[1], mu.shape[1]):
            raise ValidationError("covariance shape does not match mean dimension")
        if abs(w.sum() - 1.0) > 1e-9 or (w <= 0).any():
            raise ValidationError("weights must be positive and sum to 1")
        # Cholesky doubles as the positive-definiteness check.
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValidationError("covariances must be positive definite") from None
        object.__setattr__(self, "_chol", chol)
        object.__setattr__(self, "_prec", np.linalg.inv(cov))
        logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
        object.__setattr__(self, "_logdet", logdet)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def num_components(self) -> int:
        return self.weights.shape[0]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw n exact samples, shape (n, d)."""
        ks = rng.choice(self.num_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        return self.means[ks] + np.einsum("kij,kj->ki", self._chol[ks], z)

    def _component_logpdfs(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        diff = x[:, None, :] - self.means[None, :, :]  # (B, K, d)
        maha = np.einsum("bki,kij,bkj->bk", diff, self._prec, diff)
        d = self.dim
        return -0.5 * (maha + self._logdet[None, :] + d * np.log(2.0 * np.pi))

    def log_density(self, x: np.ndarray) -> np.ndarray:
        """Log p(x) for a batch, shape (B,)."""
        comp = self._component_logpdfs(x) + np.log(self.weights)[None, :]
        return logsumexp(comp, axis=1)

    def score(self, x: np.ndarray) -> np.ndarray:
        """Gradient of log density, shape (B, d)."""
        x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
        comp = self._component_logpdfs(x2) + np.log(self.weights)[None, :]
        resp = np.exp(comp - logsumexp(comp, axis=1, keepdims=True))  # (B, K)
        diff = self.means[None, :, :] - x2[:, None, :]  # (B, K, d)
        per_comp = np.einsum("kij,bkj->bki", self._prec, diff)
        out = np.einsum("bk,bki->bi", resp, per_comp)
        return out if np.asarray(x).ndim == 2 else out[0]

    def diffused(self, a: float, s: float) -> "GaussianMixture":
        """Mixture of x_t = a * x + s * eps when x follows this mixture."""
        eye = np.eye(self.dim)
        return GaussianMixture(
            weights=self.weights,
            means=a * self.means,
            covs=a * a * self.covs + s * s * eye[None, :, :],
        )

    @staticmethod
    def merge(mixtures: list["GaussianMixture"], priors=None) -> "GaussianMixture":
        """Flatten several mixtures into one, weighting by priors (uniform default)."""
        if not mixtures:
            raise ValidationError("cannot merge an empty list of mixtures")
        if priors is None:
            priors = np.full(len(mixtures), 1.0 / len(mixtures))
        priors = np.asarray(priors, dtype=np.float64)
        weights = np.concatenate([p * m.weights for p, m in zip(priors, mixtures)])
        means = np.concatenate([m.means for m in mixtures])
        covs = np.concatenate([m.covs for m in mixtures])
        return GaussianMixture(weights=weights, means=means, covs=covs)


def isotropic_gaussian(mean, std: float) -> GaussianMixture:
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    d = mean.shape[0]
    return GaussianMixture(
        weights=np.array([1.0]),
        means=mean[None, :],
        covs=(std * std * np.eye(d))[None, :, :],
    )


class PointCorpus:
    """Class-conditional 2-D Gaussian mixtures with analytic parameters."""

    regime = "point"
    data_shape = (2,)

    def __init__(self, class_mixtures: dict[int, GaussianMixture]):
        if not class_mixtures:
            raise ValidationError("corpus needs at least one class")
        self._mixtures = dict(sorted(class_mixtures.items()))
        self.class_ids = list(self._mixtures.keys())

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    def mixture(self, class_id: int) -> GaussianMixture:
        if class_id not in self._mixtures:
            raise ValidationError(f"class {class_id} not in corpus {self.class_ids}")
        return self._mixtures[class_id]

    def marginal(self) -> GaussianMixture:
        """Class-marginalized mixture under a uniform class prior."""
        return GaussianMixture.merge([self._mixtures[c] for c in self.class_ids])

    def target_mean(self, class_id: int) -> np.ndarray:
        mix = self.mixture(class_id)
        return np.einsum("k,ki->i", mix.weights, mix.means)

    def target_std(self, class_id: int) -> float:
        """Root mean per-axis variance about the class mean."""
        mix = self.mixture(class_id)
        mean = self.target_mean(class_id)
        diff = mix.means - mean[None, :]
        second = np.einsum("k,kij->ij", mix.weights, mix.covs + diff[:, :, None] * diff[:, None, :])
        return float(np.sqrt(np.trace(second) / mix.dim))

    def sample(self, n: int, rng: np.random.Generator, class_ids=None):
        """Draw (x, ids): x float32 (n, 2), ids int64 (n,)."""
        if class_ids is None:
            ids = rng.integers(0, self.num_classes, size=n)
            ids = np.asarray(self.class_ids, dtype=np.int64)[ids]
        else:
            ids = np.full(n, class_ids, dtype=np.int64) if np.isscalar(class_ids) \
                else np.asarray(class_ids, dtype=np.int64)
        x = np.empty((n, 2), dtype=np.float64)
        for cid in np.unique(ids):
            mask = ids == cid
            x[mask] = self.mixture(int(cid)).sample(int(mask.sum()), rng)
        return x.astype(np.float32), ids


def default_point_corpus(num_classes: int = 8, radius: float = 4.0, std: float = 0.5,
                         class_ids=None) -> PointCorpus:
    """Single-Gaussian classes arranged on a circle.

    class_ids selects a subset of the default layout (geometry unchanged), so
    a one-class corpus keeps the same mean and spread as in the full corpus.
    """
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    mixtures = {
        i: isotropic_gaussian([radius * np.cos(a), radius * np.sin(a)], std)
        for i, a in enumerate(angles)
    }
    if class_ids is not None:
        missing = [c for c in class_ids if c not in mixtures]
        if missing:
            raise ValidationError(f"class ids {missing} outside 0..{num_classes - 1}")
        mixtures = {c: mixtures[c] for c in class_ids}
    return PointCorpus(mixtures)


IMAGE_SIZE = 16
_SHAPE_NAMES = ("disk", "frame", "plus", "cross", "hstripes", "vstripes", "triangle", "ring")


def _shape_mask(name: str) -> np.ndarray:
    lin = np.linspace(-1.0, 1.0, IMAGE_SIZE)
    yy, xx = np.meshgrid(lin, lin, indexing="ij")
    rr = np.sqrt(xx * xx + yy * yy)
    if name == "disk":
        return rr <= 0.62
    if name == "frame":
        edge = np.maximum(np.abs(xx), np.abs(yy))
        return (edge >= 0.45) & (edge <= 0.8)
    if name == "plus":
        return (np.abs(xx) <= 0.2) | (np.abs(yy) <= 0.2)
    if name == "cross":
        return (np.abs(xx - yy) <= 0.28) | (np.abs(xx + yy) <= 0.28)
    if name == "hstripes":
        rows = np.arange(IMAGE_SIZE)[:, None] // 2 % 2 == 0
        return np.broadcast_to(rows, (IMAGE_SIZE, IMAGE_SIZE))
    if name == "vstripes":
        cols = np.arange(IMAGE_SIZE)[None, :] // 2 % 2 == 0
        return np.broadcast_to(cols, (IMAGE_SIZE, IMAGE_SIZE))
    if name == "triangle":
        return (yy >= -0.55) & (np.abs(xx) <= 0.55 * (0.85 - yy))
    if name == "ring":
        return (rr >= 0.42) & (rr <= 0.72)
    raise ValidationError(f"unknown shape {name!r}")


class ImageCorpus:
    """16x16 single-channel shapes in [-1, 1], one shape per class.

    Samples get an integer wrap-around shift of up to max_shift pixels plus
    mild Gaussian pixel noise, which is the whole within-class variation.
    """

    regime = "image"
    data_shape = (1, IMAGE_SIZE, IMAGE_SIZE)

    def __init__(self, class_ids=None, max_shift: int = 1, pixel_noise: float = 0.05):
        all_ids = list(range(len(_SHAPE_NAMES)))
        if class_ids is None:
            class_ids = all_ids
        missing = [c for c in class_ids if c not in all_ids]
        if missing:
            raise ValidationError(f"class ids {missing} outside 0..{len(all_ids) - 1}")
        self.class_ids = sorted(class_ids)
        self.max_shift = int(max_shift)
        self.pixel_noise = float(pixel_noise)
        self._templates = {
            c: np.where(_shape_mask(_SHAPE_NAMES[c]), 1.0, -1.0).astype(np.float32)
            for c in self.class_ids
        }

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    def template(self, class_id: int) -> np.ndarray:
        if class_id not in self._templates:
            raise ValidationError(f"class {class_id} not in corpus {self.class_ids}")
        return self._templates[class_id].copy()

    def sample(self, n: int, rng: np.random.Generator, class_ids=None):
        """Draw (x, ids): x float32 (n, 1, 16, 16), ids int64 (n,)."""
        if class_ids is None:
            ids = np.asarray(self.class_ids, dtype=np.int64)[
                rng.integers(0, self.num_classes, size=n)
            ]
        else:
            ids = np.full(n, class_ids, dtype=np.int64) if np.isscalar(class_ids) \
                else np.asarray(class_ids, dtype=np.int64)
        x = np.empty((n, 1, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
        for i, cid in enumerate(ids):
            img = self.template(int(cid))
            if self.max_shift > 0:
                dy, dx = rng.integers(-self.max_shift, self.max_shift + 1, size=2)
                img = np.roll(img, (int(dy), int(dx)), axis=(0, 1))
            x[i, 0] = img
        if self.pixel_noise > 0:
            x += rng.standard_normal(x.shape).astype(np.float32) * self.pixel_noise
        return x, ids


def build_corpus(regime: str, class_ids=None):
    """Construct the default corpus for a regime, optionally a class subset."""
    if regime == "point":
        return default_point_corpus(class_ids=class_ids)
    if regime == "image":
        return ImageCorpus(class_ids=class_ids)
    raise ConfigurationError(f"unknown regime {regime!r}, expected 'point' or 'image'")
