"""Conditional noise predictors: trained toy networks and analytic oracles.

Both kinds expose the same predict_noise(x_t, t, cond) surface, so the
distillation objectives and the analysis tooling do not care whether the
score comes from a trained network or from a closed-form Gaussian mixture.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .corpus import GaussianMixture, PointCorpus
from .errors import ConfigurationError, NumericalAbort, ValidationError
from .schedule import NoiseSchedule, build_schedule, diffuse, gather_coeffs

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Condition:
    """Class label standing in for a text prompt.

    is_null marks the unconditional token; its class_id is the reserved -1.
    embedding optionally caches the model-side encoding of the label.
    """

    class_id: int
    is_null: bool = False
    embedding: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.is_null and self.class_id != -1:
            raise ValidationError("null conditions must use the reserved class_id -1")

    @staticmethod
    def null() -> "Condition":
        return Condition(class_id=-1, is_null=True)


def null_like(cond):
    """Unconditional counterpart with the same batch structure as cond."""
    if isinstance(cond, (list, tuple)):
        return [Condition.null() for _ in cond]
    return Condition.null()


@dataclass(frozen=True)
class GuidanceSpec:
    """Classifier-free guidance scale."""

    scale: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.scale) or self.scale < 0:
            raise ValidationError(f"guidance scale must be finite and >= 0, got {self.scale}")


def cfg_combine(eps_cond, eps_uncond, guidance):
    """eps_uncond + s * (eps_cond - eps_uncond), exact at s in {0, 1}."""
    scale = guidance.scale if isinstance(guidance, GuidanceSpec) else float(guidance)
    if scale < 0 or not np.isfinite(scale):
        raise ValidationError(f"guidance scale must be finite and >= 0, got {scale}")
    if tuple(eps_cond.shape) != tuple(eps_uncond.shape):
        raise ValidationError("conditional and unconditional predictions differ in shape")
    if scale == 1.0:
        return eps_cond
    if scale == 0.0:
        return eps_uncond
    return eps_uncond + scale * (eps_cond - eps_uncond)


def convert_v_to_eps(v, x_t, t, schedule: NoiseSchedule):
    """Map a velocity prediction to a noise prediction: eps = sigma*x_t + alpha*v."""
    if tuple(v.shape) != tuple(x_t.shape):
        raise ValidationError("v and x_t must share a shape")
    a, s = gather_coeffs(schedule, t, x_t)
    return s * x_t + a * v


def convert_eps_to_v(eps, x_t, t, schedule: NoiseSchedule):
    """Inverse of convert_v_to_eps: v = (eps - sigma*x_t) / alpha."""
    if tuple(eps.shape) != tuple(x_t.shape):
        raise ValidationError("eps and x_t must share a shape")
    a, s = gather_coeffs(schedule, t, x_t)
    return (eps - s * x_t) / a


def _normalize_cond_ids(cond, batch: int) -> np.ndarray:
    """Flatten Condition | int | sequence into an int64 id array of length batch.

    Null conditions map to -1 here; models translate -1 to their own
    embedding row for the unconditional token.
    """
    def one(c):
        if isinstance(c, Condition):
            return -1 if c.is_null else int(c.class_id)
        return int(c)

    if isinstance(cond, (list, tuple, np.ndarray)):
        ids = np.asarray([one(c) for c in cond], dtype=np.int64)
    else:
        ids = np.full(batch, one(cond), dtype=np.int64)
    if ids.shape[0] != batch:
        raise ValidationError(f"{ids.shape[0]} conditions for a batch of {batch}")
    return ids


def predict_noise(model, x_t, t, cond):
    """Noise prediction in epsilon convention, regardless of model internals."""
    return model.predict_noise(x_t, t, cond)


# ---------------------------------------------------------------------------
# Analytic oracles


@dataclass(frozen=True)
class GaussianMixtureOracle:
    """Exact noise predictor for one known mixture under a known schedule."""

    mixture: GaussianMixture
    schedule: NoiseSchedule


def oracle_noise(oracle: GaussianMixtureOracle, x_t: np.ndarray, t: int) -> np.ndarray:
    """Optimal eps prediction -sigma_t * grad log p_t(x_t), computed exactly.

    The diffused density p_t is itself a Gaussian mixture, so the score is
    closed form. x_t may be a single point (d,) or a batch (B, d).
    """
    a, s = gather_coeffs(oracle.schedule, int(t), np.zeros(1))
    assert s > 0.0, "sigma_t must be positive for a well-posed score"
    noised = oracle.mixture.diffused(a, s)
    return -s * noised.score(np.asarray(x_t, dtype=np.float64))


class OracleDenoiser:
    """Drop-in conditional predictor backed by exact mixture scores.

    The null condition uses the class-marginal mixture, so classifier-free
    guidance behaves exactly as it would for an ideal model.
    """

    prediction_type = "epsilon"

    def __init__(self, schedule: NoiseSchedule, corpus: PointCorpus):
        self.schedule = schedule
        self.class_ids = list(corpus.class_ids)
        self._oracles = {
            cid: GaussianMixtureOracle(corpus.mixture(cid), schedule)
            for cid in self.class_ids
        }
        self._null_oracle = GaussianMixtureOracle(corpus.marginal(), schedule)
        self.data_shape = tuple(corpus.data_shape)
        self.num_classes = corpus.num_classes

    @property
    def schedule_fingerprint(self) -> str:
        return self.schedule.fingerprint

    def _oracle_for(self, cid: int) -> GaussianMixtureOracle:
        if cid == -1:
            return self._null_oracle
        if cid not in self._oracles:
            raise ValidationError(f"condition {cid} outside oracle vocabulary {self.class_ids}")
        return self._oracles[cid]

    def predict_noise(self, x_t, t, cond):
        is_torch = isinstance(x_t, torch.Tensor)
        x = x_t.detach().cpu().numpy() if is_torch else np.asarray(x_t)
        unbatched = x.ndim == len(self.data_shape)
        xb = x[None] if unbatched else x
        if xb.shape[1:] != self.data_shape:
            raise ValidationError(f"sample shape {xb.shape[1:]} != {self.data_shape}")
        batch = xb.shape[0]
        ids = _normalize_cond_ids(cond, batch)
        ts = np.full(batch, int(t), dtype=np.int64) if np.isscalar(t) or np.asarray(t).ndim == 0 \
            else np.asarray(t, dtype=np.int64)
        if ts.shape[0] != batch:
            raise ValidationError(f"{ts.shape[0]} timesteps for a batch of {batch}")
        out = np.empty_like(xb, dtype=np.float64)
        for cid in np.unique(ids):
            oracle = self._oracle_for(int(cid))
            sel = np.flatnonzero(ids == cid)
            for tv in np.unique(ts[sel]):
                idx = sel[ts[sel] == tv]
                out[idx] = oracle_noise(oracle, xb[idx], int(tv))
        if unbatched:
            out = out[0]
        if is_torch:
            return torch.as_tensor(out, dtype=x_t.dtype, device=x_t.device)
        return out.astype(x.dtype, copy=False)


# ---------------------------------------------------------------------------
# Trained denoisers


@dataclass(frozen=True)
class DenoiserArch:
    """Architecture knobs for the toy denoisers.

    kind 'point_mlp' is a residual MLP over R^2; 'image_conv' is a small
    conv encoder-decoder over 1x16x16 grids. prediction_type selects the
    training target ('epsilon' or 'velocity').
    """

    kind: str = "point_mlp"
    hidden: int = 128
    depth: int = 3
    cond_dim: int = 16
    time_dim: int = 64
    prediction_type: str = "epsilon"

    def __post_init__(self):
        if self.kind not in ("point_mlp", "image_conv"):
            raise ConfigurationError(f"unknown denoiser kind {self.kind!r}")
        if self.prediction_type not in ("epsilon", "velocity"):
            raise ConfigurationError(
                f"prediction_type must be 'epsilon' or 'velocity', got {self.prediction_type!r}"
            )


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos features of an integer timestep, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1)
    )
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class _ResidualBlock(nn.Module):
    def __init__(self, hidden: int):
        super().__init__()
        self.lin1 = nn.Linear(hidden, hidden)
        self.lin2 = nn.Linear(hidden, hidden)

    def forward(self, h, emb):
        z = torch.nn.functional.silu(self.lin1(h + emb))
        return h + self.lin2(z)


class _PointCore(nn.Module):
    def __init__(self, arch: DenoiserArch, data_dim: int):
        super().__init__()
        self.in_proj = nn.Linear(data_dim, arch.hidden)
        self.emb_proj = nn.Linear(arch.time_dim + arch.cond_dim, arch.hidden)
        self.blocks = nn.ModuleList(_ResidualBlock(arch.hidden) for _ in range(arch.depth))
        self.head = nn.Linear(arch.hidden, data_dim)
        # Learned data-passthrough gate; the optimal predictor is close to
        # sigma_t * x_t at large t, which this makes cheap to represent.
        self.gate = nn.Linear(arch.time_dim, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        nn.init.zeros_(self.gate.weight)
        nn.init.zeros_(self.gate.bias)

    def forward(self, x, t_feat, c_feat):
        emb = self.emb_proj(torch.cat([t_feat, c_feat], dim=-1))
        h = self.in_proj(x)
        for block in self.blocks:
            h = block(h, emb)
        return self.head(h) + self.gate(t_feat) * x


class _FilmConv(nn.Module):
    def __init__(self, c_in: int, c_out: int, emb_dim: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm = nn.GroupNorm(min(8, c_out), c_out)
        self.film = nn.Linear(emb_dim, 2 * c_out)

    def forward(self, h, emb):
        h = self.norm(self.conv(h))
        scale, shift = self.film(emb).chunk(2, dim=-1)
        h = h * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]
        return torch.nn.functional.silu(h)


class _ImageCore(nn.Module):
    def __init__(self, arch: DenoiserArch, channels: int):
        super().__init__()
        c = max(arch.hidden // 4, 16)
        emb = arch.time_dim + arch.cond_dim
        self.stem = nn.Conv2d(channels, c, 3, padding=1)
        self.enc1 = _FilmConv(c, c, emb)
        self.down1 = nn.Conv2d(c, 2 * c, 4, stride=2, padding=1)     # 16 -> 8
        self.enc2 = _FilmConv(2 * c, 2 * c, emb)
        self.down2 = nn.Conv2d(2 * c, 4 * c, 4, stride=2, padding=1)  # 8 -> 4
        self.mid1 = _FilmConv(4 * c, 4 * c, emb)
        self.mid2 = _FilmConv(4 * c, 4 * c, emb)
        self.up1 = nn.ConvTranspose2d(4 * c, 2 * c, 4, stride=2, padding=1)  # 4 -> 8
        self.dec1 = _FilmConv(4 * c, 2 * c, emb)
        self.up2 = nn.ConvTranspose2d(2 * c, c, 4, stride=2, padding=1)      # 8 -> 16
        self.dec2 = _FilmConv(2 * c, c, emb)
        self.head = nn.Conv2d(c, channels, 3, padding=1)
        self.gate = nn.Linear(arch.time_dim, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        nn.init.zeros_(self.gate.weight)
        nn.init.zeros_(self.gate.bias)

    def forward(self, x, t_feat, c_feat):
        emb = torch.cat([t_feat, c_feat], dim=-1)
        h1 = self.enc1(self.stem(x), emb)
        h2 = self.enc2(self.down1(h1), emb)
        h = self.mid2(self.mid1(self.down2(h2), emb), emb)
        h = self.dec1(torch.cat([self.up1(h), h2], dim=1), emb)
        h = self.dec2(torch.cat([self.up2(h), h1], dim=1), emb)
        out = self.head(h)
        return out + self.gate(t_feat)[:, :, None, None] * x


class Denoiser(nn.Module):
    """Trained conditional noise predictor tied to one schedule.

    Carries its class vocabulary plus one extra embedding row for the
    unconditional token, and the schedule it was trained against.
    """

    def __init__(self, arch: DenoiserArch, class_ids, schedule: NoiseSchedule,
                 data_shape=None):
        super().__init__()
        self.arch = arch
        self.class_ids = [int(c) for c in class_ids]
        if len(set(self.class_ids)) != len(self.class_ids):
            raise ValidationError("duplicate class ids in vocabulary")
        self.schedule = schedule
        if data_shape is None:
            data_shape = (2,) if arch.kind == "point_mlp" else (1, 16, 16)
        self.data_shape = tuple(data_shape)
        self._row_of = {cid: i for i, cid in enumerate(self.class_ids)}
        self.embedding = nn.Embedding(len(self.class_ids) + 1, arch.cond_dim)
        self.time_mlp = nn.Sequential(
            nn.Linear(arch.time_dim, arch.time_dim), nn.SiLU(),
            nn.Linear(arch.time_dim, arch.time_dim),
        )
        if arch.kind == "point_mlp":
            self.core = _PointCore(arch, self.data_shape[0])
        else:
            self.core = _ImageCore(arch, self.data_shape[0])

    @property
    def prediction_type(self) -> str:
        return self.arch.prediction_type

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    @property
    def schedule_fingerprint(self) -> str:
        return self.schedule.fingerprint

    def rows_from_ids(self, ids: np.ndarray) -> torch.Tensor:
        """Map raw class ids (-1 for null) to embedding rows."""
        rows = np.empty(ids.shape[0], dtype=np.int64)
        null_row = len(self.class_ids)
        for i, cid in enumerate(ids):
            if cid == -1:
                rows[i] = null_row
            else:
                row = self._row_of.get(int(cid))
                if row is None:
                    raise ValidationError(
                        f"condition {int(cid)} outside trained vocabulary {self.class_ids}"
                    )
                rows[i] = row
        return torch.as_tensor(rows)

    def embed_ids(self, ids) -> torch.Tensor:
        """Frozen class embeddings for generator conditioning, shape (B, cond_dim)."""
        ids = np.atleast_1d(np.asarray(ids, dtype=np.int64))
        with torch.no_grad():
            return self.embedding(self.rows_from_ids(ids)).detach().clone()

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond_rows: torch.Tensor) -> torch.Tensor:
        t_feat = self.time_mlp(sinusoidal_embedding(t, self.arch.time_dim))
        c_feat = self.embedding(cond_rows)
        return self.core(x, t_feat, c_feat)

    def predict_noise(self, x_t, t, cond, param_override=None):
        """Epsilon prediction for numpy or torch input, batched or single.

        param_override swaps in alternative parameter tensors via a
        functional call; the adapter machinery uses this to evaluate the
        base network with perturbed weights without mutating it.
        """
        is_torch = isinstance(x_t, torch.Tensor)
        x = x_t if is_torch else torch.as_tensor(np.asarray(x_t), dtype=torch.float32)
        unbatched = x.ndim == len(self.data_shape)
        xb = x[None] if unbatched else x
        if tuple(xb.shape[1:]) != self.data_shape:
            raise ValidationError(f"sample shape {tuple(xb.shape[1:])} != {self.data_shape}")
        batch = xb.shape[0]
        ids = _normalize_cond_ids(cond, batch)
        rows = self.rows_from_ids(ids)
        if np.isscalar(t) or np.asarray(t).ndim == 0:
            t_idx = np.full(batch, int(t), dtype=np.int64)
        else:
            t_idx = np.asarray(t, dtype=np.int64)
            if t_idx.shape[0] != batch:
                raise ValidationError(f"{t_idx.shape[0]} timesteps for a batch of {batch}")
        if t_idx.min() < 0 or t_idx.max() >= self.schedule.total_steps:
            raise ValidationError("timestep outside the schedule")
        t_tensor = torch.as_tensor(t_idx)
        xb32 = xb.to(torch.float32)
        if param_override is None:
            raw = self.forward(xb32, t_tensor, rows)
        else:
            raw = torch.func.functional_call(self, param_override, (xb32, t_tensor, rows))
        if self.prediction_type == "velocity":
            raw = convert_v_to_eps(raw, xb32, t_idx, self.schedule)
        if unbatched:
            raw = raw[0]
        if not is_torch:
            return raw.detach().numpy().astype(np.asarray(x_t).dtype, copy=False)
        return raw.to(x_t.dtype)


@dataclass(frozen=True)
class DenoiserTrainConfig:
    steps: int = 4000
    batch_size: int = 256
    lr: float = 1e-3
    cond_dropout: float = 0.1

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValidationError("steps and batch_size must be positive")
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ValidationError(f"cond_dropout must be in [0, 1), got {self.cond_dropout}")


def train_denoiser(corpus, schedule: NoiseSchedule, arch: DenoiserArch,
                   train_cfg: DenoiserTrainConfig, rng: np.random.Generator) -> Denoiser:
    """Train a conditional denoiser on a synthetic corpus.

    Timesteps cover the full schedule, a cond_dropout fraction of labels is
    replaced by the null token so guidance has an unconditional branch, and
    a non-finite loss aborts with the last finite parameter state attached.
    """
    seed = int(rng.integers(2**31 - 1))
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = Denoiser(arch, class_ids=corpus.class_ids, schedule=schedule,
                         data_shape=corpus.data_shape)
        noise_gen = torch.Generator().manual_seed(seed + 1)
        opt = torch.optim.Adam(model.parameters(), lr=train_cfg.lr)
        last_finite = {k: v.detach().clone() for k, v in model.state_dict().items()}
        total = schedule.total_steps
        for step in range(train_cfg.steps):
            x_np, ids = corpus.sample(train_cfg.batch_size, rng)
            if train_cfg.cond_dropout > 0:
                drop = rng.random(train_cfg.batch_size) < train_cfg.cond_dropout
                ids = np.where(drop, -1, ids)
            x = torch.from_numpy(x_np)
            t = rng.integers(0, total, size=train_cfg.batch_size)
            eps = torch.randn(x.shape, generator=noise_gen)
            x_t = diffuse(schedule, x, eps, t)
            if arch.prediction_type == "epsilon":
                target = eps
            else:
                a, s = gather_coeffs(schedule, t, x)
                target = a * eps - s * x
            pred = model(x_t.to(torch.float32), torch.as_tensor(t), model.rows_from_ids(ids))
            loss = torch.nn.functional.mse_loss(pred, target.to(torch.float32))
            if not torch.isfinite(loss):
                raise NumericalAbort(
                    f"denoiser training loss became non-finite at step {step}",
                    last_state=last_finite, step=step,
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            if step % 50 == 0:
                last_finite = {k: v.detach().clone() for k, v in model.state_dict().items()}
    model.eval()
    return model


def save_denoiser(model: Denoiser, path) -> None:
    """Persist a versioned checkpoint with vocabulary and schedule identity."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "arch": {
            "kind": model.arch.kind,
            "hidden": model.arch.hidden,
            "depth": model.arch.depth,
            "cond_dim": model.arch.cond_dim,
            "time_dim": model.arch.time_dim,
            "prediction_type": model.arch.prediction_type,
        },
        "class_ids": model.class_ids,
        "data_shape": list(model.data_shape),
        "schedule": {
            "total_steps": model.schedule.total_steps,
            "beta_family": model.schedule.family,
        },
        "schedule_fingerprint": model.schedule_fingerprint,
        "state_dict": model.state_dict(),
    }
    torch.save(payload, path)


def load_denoiser(path) -> Denoiser:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ConfigurationError(
            f"checkpoint format {version!r} unsupported, expected {CHECKPOINT_VERSION}"
        )
    schedule = build_schedule(**payload["schedule"])
    if schedule.fingerprint != payload["schedule_fingerprint"]:
        raise ConfigurationError("checkpoint schedule fingerprint does not match its stored parameters")
    model = Denoiser(DenoiserArch(**payload["arch"]), payload["class_ids"], schedule,
                     data_shape=tuple(payload["data_shape"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model
