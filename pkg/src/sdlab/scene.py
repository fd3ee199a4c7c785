"""Optimizable representations and the render map.

A scene is either a bank of free particles (prompt-specific optimization,
one condition per particle) or a conditional generator that maps a class
embedding, optionally with a latent, to a sample (prompt-amortized). Render
keeps the output differentiable with respect to the scene parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .denoiser import Condition
from .errors import ConfigurationError, ValidationError

GENERATOR_KINDS = ("direct_mlp", "hypernet")


@dataclass(frozen=True)
class RenderSpec:
    """Render mode plus augmentation ranges.

    mode 'identity' returns the representation as-is. mode 'augmented'
    applies a random similarity transform (points: rotate/scale/translate;
    images: wrap-around pixel shifts). All-zero ranges reduce to identity.
    """

    mode: str = "identity"
    rotate: float = 0.0
    scale: float = 0.0
    translate: float = 0.0
    max_shift: int = 0

    def __post_init__(self):
        if self.mode not in ("identity", "augmented"):
            raise ConfigurationError(f"render mode {self.mode!r} not 'identity' or 'augmented'")
        if min(self.rotate, self.scale, self.translate) < 0 or self.max_shift < 0:
            raise ValidationError("augmentation ranges must be non-negative")


class ParticleScene(nn.Module):
    """Free sample bank, one condition per particle."""

    kind = "particles"

    def __init__(self, conds: list[Condition], data_shape, init_std: float = 2.0,
                 rng: np.random.Generator | None = None):
        super().__init__()
        if not conds:
            raise ValidationError("a particle scene needs at least one condition")
        rng = rng or np.random.default_rng(0)
        self.conds = list(conds)
        self.data_shape = tuple(data_shape)
        init = rng.standard_normal((len(conds),) + self.data_shape) * init_std
        self.particles = nn.Parameter(torch.as_tensor(init, dtype=torch.float32))

    @property
    def num_particles(self) -> int:
        return len(self.conds)


class _HyperDecoder:
    """Sliced view of a flat weight vector as a 2-layer MLP decoder."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        self.in_dim, self.hidden, self.out_dim = in_dim, hidden, out_dim
        self.w1 = in_dim * hidden
        self.b1 = hidden
        self.w2 = hidden * out_dim
        self.b2 = out_dim
        self.total = self.w1 + self.b1 + self.w2 + self.b2

    def split(self, flat: torch.Tensor):
        """flat: (B, total) -> per-sample weight tensors."""
        i = 0
        w1 = flat[:, i:i + self.w1].reshape(-1, self.in_dim, self.hidden); i += self.w1
        b1 = flat[:, i:i + self.b1]; i += self.b1
        w2 = flat[:, i:i + self.w2].reshape(-1, self.hidden, self.out_dim); i += self.w2
        b2 = flat[:, i:i + self.b2]
        return w1, b1, w2, b2

    def apply(self, flat: torch.Tensor, inputs: torch.Tensor) -> torch.Tensor:
        """inputs: (B, N, in_dim) or (N, in_dim) shared -> (B, N, out_dim)."""
        w1, b1, w2, b2 = self.split(flat)
        if inputs.ndim == 2:
            inputs = inputs[None].expand(flat.shape[0], -1, -1)
        h = torch.nn.functional.silu(torch.bmm(inputs, w1) + b1[:, None, :])
        return torch.bmm(h, w2) + b2[:, None, :]


class ConditionalGenerator(nn.Module):
    """Embedding-to-sample generator, direct or hypernetwork-parameterized.

    direct_mlp feeds the embedding (plus optional latent) through an MLP.
    hypernet has a trunk that emits the full weight set of a small decoder,
    which is then applied to a fixed coordinate grid (images) or a learned
    seed vector (points). Spectral normalization on the trunk's linear
    layers can be toggled to tame large-scale gradients.
    """

    def __init__(self, kind: str, embed_dim: int, data_shape, noise_dim: int = 0,
                 hidden: int = 128, decoder_hidden: int = 32, spectral_norm: bool = False):
        super().__init__()
        if kind not in GENERATOR_KINDS:
            raise ConfigurationError(f"generator kind {kind!r} not in {GENERATOR_KINDS}")
        if noise_dim < 0:
            raise ValidationError(f"noise_dim must be >= 0, got {noise_dim}")
        self.kind = kind
        self.embed_dim = int(embed_dim)
        self.data_shape = tuple(data_shape)
        self.noise_dim = int(noise_dim)
        out_dim = int(np.prod(self.data_shape))
        in_dim = self.embed_dim + self.noise_dim

        def maybe_sn(layer):
            return nn.utils.spectral_norm(layer) if spectral_norm else layer

        if kind == "direct_mlp":
            self.net = nn.Sequential(
                maybe_sn(nn.Linear(in_dim, hidden)), nn.SiLU(),
                maybe_sn(nn.Linear(hidden, 2 * hidden)), nn.SiLU(),
                maybe_sn(nn.Linear(2 * hidden, out_dim)),
            )
        else:
            if len(self.data_shape) == 3:
                # Fixed normalized coordinate grid, one decoder eval per pixel.
                h, w = self.data_shape[1], self.data_shape[2]
                ys, xs = torch.meshgrid(
                    torch.linspace(-1.0, 1.0, h), torch.linspace(-1.0, 1.0, w),
                    indexing="ij",
                )
                grid = torch.stack([ys.reshape(-1), xs.reshape(-1)], dim=-1)
                self.register_buffer("decoder_input", grid)  # (h*w, 2)
                self.decoder = _HyperDecoder(2, decoder_hidden, self.data_shape[0])
            else:
                self.seed = nn.Parameter(torch.randn(8) * 0.1)
                self.decoder = _HyperDecoder(8, decoder_hidden, out_dim)
            self.trunk = nn.Sequential(
                maybe_sn(nn.Linear(in_dim, hidden)), nn.SiLU(),
                maybe_sn(nn.Linear(hidden, self.decoder.total)),
            )

    def decoder_weights(self, embedding: torch.Tensor, latent=None) -> torch.Tensor:
        """Flat decoder weight vectors for a batch of embeddings (hypernet only)."""
        if self.kind != "hypernet":
            raise ConfigurationError("decoder_weights is only defined for hypernet generators")
        z = self._cat_latent(embedding, latent)
        return self.trunk(z)

    def _cat_latent(self, embedding: torch.Tensor, latent) -> torch.Tensor:
        if embedding.ndim != 2 or embedding.shape[1] != self.embed_dim:
            raise ValidationError(
                f"embedding must be (B, {self.embed_dim}), got {tuple(embedding.shape)}"
            )
        if self.noise_dim == 0:
            if latent is not None:
                raise ValidationError("generator was built without a latent input")
            return embedding
        if latent is None:
            raise ValidationError(f"generator expects a latent of width {self.noise_dim}")
        if latent.shape != (embedding.shape[0], self.noise_dim):
            raise ValidationError(
                f"latent must be ({embedding.shape[0]}, {self.noise_dim}), got {tuple(latent.shape)}"
            )
        return torch.cat([embedding, latent], dim=-1)

    def forward(self, embedding: torch.Tensor, latent=None) -> torch.Tensor:
        batch = embedding.shape[0]
        if self.kind == "direct_mlp":
            flat = self.net(self._cat_latent(embedding, latent))
            return flat.reshape((batch,) + self.data_shape)
        flat = self.decoder_weights(embedding, latent)
        if len(self.data_shape) == 3:
            out = self.decoder.apply(flat, self.decoder_input)      # (B, h*w, c)
            c, h, w = self.data_shape
            return out.permute(0, 2, 1).reshape(batch, c, h, w)
        out = self.decoder.apply(flat, self.seed[None, :])          # (B, 1, out)
        return out.reshape((batch,) + self.data_shape)


def hypernet_forward(generator: ConditionalGenerator, embedding: torch.Tensor,
                     latent=None) -> torch.Tensor:
    """Produce decoder weights and run the decoder in one call."""
    if generator.kind != "hypernet":
        raise ConfigurationError("hypernet_forward needs a hypernet generator")
    return generator(embedding, latent)


def _augment_points(x: torch.Tensor, spec: RenderSpec, rng: np.random.Generator) -> torch.Tensor:
    batch = x.shape[0]
    theta = rng.uniform(-spec.rotate, spec.rotate, size=batch)
    scale = 1.0 + rng.uniform(-spec.scale, spec.scale, size=batch)
    shift = rng.uniform(-spec.translate, spec.translate, size=(batch, 2))
    cos = torch.as_tensor(np.cos(theta) * scale, dtype=x.dtype)
    sin = torch.as_tensor(np.sin(theta) * scale, dtype=x.dtype)
    rot = torch.stack([torch.stack([cos, -sin], -1), torch.stack([sin, cos], -1)], -2)
    return torch.einsum("bij,bj->bi", rot, x) + torch.as_tensor(shift, dtype=x.dtype)


def _augment_images(x: torch.Tensor, spec: RenderSpec, rng: np.random.Generator) -> torch.Tensor:
    if spec.max_shift == 0:
        return x
    out = []
    shifts = rng.integers(-spec.max_shift, spec.max_shift + 1, size=(x.shape[0], 2))
    for i in range(x.shape[0]):
        out.append(torch.roll(x[i], (int(shifts[i, 0]), int(shifts[i, 1])), dims=(-2, -1)))
    return torch.stack(out)


def render(scene, conds=None, *, index=None, latent=None,
           spec: RenderSpec = RenderSpec(), rng: np.random.Generator | None = None):
    """Differentiable map from scene parameters to a rendered batch.

    For particle scenes, pass `index` (int or index array) to select
    particles; conds defaults to the particles' own conditions. For
    generators, conds must carry embeddings. Returns (rendered, conds).
    """
    if isinstance(scene, ParticleScene):
        if index is None:
            x = scene.particles
            used = list(scene.conds)
        else:
            idx = np.atleast_1d(np.asarray(index, dtype=np.int64))
            if idx.min() < 0 or idx.max() >= scene.num_particles:
                raise ValidationError(f"particle index outside 0..{scene.num_particles - 1}")
            x = scene.particles[torch.as_tensor(idx)]
            used = [scene.conds[i] for i in idx]
    elif isinstance(scene, ConditionalGenerator):
        if conds is None:
            raise ValidationError("generator rendering needs conditions")
        used = list(conds)
        emb = []
        for c in used:
            if c.embedding is None:
                raise ValidationError("generator conditions must carry embeddings")
            emb.append(np.asarray(c.embedding, dtype=np.float32))
        embedding = torch.as_tensor(np.stack(emb))
        x = scene(embedding, latent)
    else:
        raise ConfigurationError(f"cannot render {type(scene).__name__}")

    if spec.mode == "augmented":
        if rng is None:
            raise ValidationError("augmented rendering needs an rng")
        if len(scene.data_shape) == 1:
            x = _augment_points(x, spec, rng)
        else:
            x = _augment_images(x, spec, rng)
    return x, used
