"""Score-distillation gradient fields and the VSD adapter machinery.

Each objective turns one (x, t, eps) draw into a constant coefficient field
c so that optimizing the surrogate <c, x> pushes the representation with
gradient c * dx/dtheta. The four variants differ only in what they subtract
from the guided noise prediction:

  SDS: the injected noise eps
  CSD: the unconditional prediction (guidance fixed at the implicit s-1 form)
  VSD: a fine-tuned low-rank adapter's prediction
  ASD: the frozen model's own prediction at a shifted, noisier timestep
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np
import torch
from torch import nn

from .denoiser import (Denoiser, GuidanceSpec, cfg_combine, null_like, predict_noise)
from .errors import ConfigurationError, NumericalAbort, ValidationError
from .schedule import (NoiseSchedule, ShiftPolicy, TimestepRange, diffuse,
                       gather_coeffs, sample_shift)

OBJECTIVE_KINDS = ("SDS", "CSD", "VSD", "ASD")

DEFAULT_GUIDANCE = {"SDS": 100.0, "CSD": 1.0, "VSD": 7.5, "ASD": 7.5}


@dataclass(frozen=True)
class GradientField:
    """Constant coefficient of the surrogate inner product, plus diagnostics."""

    coefficient: torch.Tensor
    norm: float
    diagnostics: dict = dataclass_field(default_factory=dict)


def _field(coef: torch.Tensor, diagnostics: dict) -> GradientField:
    coef = coef.detach()
    if not torch.isfinite(coef).all():
        # numeric blow-up, not a caller mistake; surfaces as an abort record
        raise NumericalAbort("gradient coefficient contains non-finite values",
                             last_state=diagnostics)
    return GradientField(
        coefficient=coef,
        norm=float(torch.linalg.vector_norm(coef)),
        diagnostics=diagnostics,
    )


def omega_weight(name: str, schedule: NoiseSchedule, t, like):
    """Timestep weighting: 'one' is constant, 'sigma_sq' is sigma_t^2."""
    if name == "one":
        return 1.0
    if name == "sigma_sq":
        _, s = gather_coeffs(schedule, t, like)
        return s * s
    raise ConfigurationError(f"unknown weight_fn {name!r}, expected 'one' or 'sigma_sq'")


def _as_tensor_pair(x, eps):
    x = torch.as_tensor(np.asarray(x), dtype=torch.float32) if not isinstance(x, torch.Tensor) else x
    eps = torch.as_tensor(np.asarray(eps), dtype=x.dtype) if not isinstance(eps, torch.Tensor) else eps
    if tuple(x.shape) != tuple(eps.shape):
        raise ValidationError(f"x shape {tuple(x.shape)} != eps shape {tuple(eps.shape)}")
    return x.detach(), eps.detach()


def _mean_t(t) -> float:
    return float(t) if np.isscalar(t) or np.asarray(t).ndim == 0 else float(np.mean(t))


def grad_sds(model, schedule: NoiseSchedule, x, t, eps, cond,
             guidance: GuidanceSpec = GuidanceSpec(100.0), weight_fn: str = "one") -> GradientField:
    """Coefficient omega(t) * (guided prediction - injected noise)."""
    x, eps = _as_tensor_pair(x, eps)
    with torch.no_grad():
        x_t = diffuse(schedule, x, eps, t)
        e_cond = predict_noise(model, x_t, t, cond)
        e_uncond = predict_noise(model, x_t, t, null_like(cond))
        guided = cfg_combine(e_cond, e_uncond, guidance)
        w = omega_weight(weight_fn, schedule, t, x)
        coef = w * (guided - eps)
    return _field(coef, {
        "objective": "SDS", "t": _mean_t(t), "dt": 0.0,
        "term1_norm": float(torch.linalg.vector_norm(guided)),
        "term2_norm": float(torch.linalg.vector_norm(eps)),
    })


def grad_csd(model, schedule: NoiseSchedule, x, t, eps, cond,
             weight_fn: str = "one") -> GradientField:
    """Coefficient omega(t) * (conditional - unconditional prediction).

    This is the classifier component alone; the injected noise cancels out.
    """
    x, eps = _as_tensor_pair(x, eps)
    with torch.no_grad():
        x_t = diffuse(schedule, x, eps, t)
        e_cond = predict_noise(model, x_t, t, cond)
        e_uncond = predict_noise(model, x_t, t, null_like(cond))
        w = omega_weight(weight_fn, schedule, t, x)
        coef = w * (e_cond - e_uncond)
    return _field(coef, {
        "objective": "CSD", "t": _mean_t(t), "dt": 0.0,
        "term1_norm": float(torch.linalg.vector_norm(e_cond)),
        "term2_norm": float(torch.linalg.vector_norm(e_uncond)),
    })


def grad_vsd(model, adapter, schedule: NoiseSchedule, x, t, eps, cond,
             guidance: GuidanceSpec = GuidanceSpec(7.5), weight_fn: str = "one") -> GradientField:
    """Coefficient omega(t) * (guided base prediction - adapter prediction)."""
    if adapter.schedule_fingerprint != getattr(model, "schedule_fingerprint", None):
        raise ConfigurationError("adapter and base model were built against different schedules")
    x, eps = _as_tensor_pair(x, eps)
    with torch.no_grad():
        x_t = diffuse(schedule, x, eps, t)
        e_cond = predict_noise(model, x_t, t, cond)
        e_uncond = predict_noise(model, x_t, t, null_like(cond))
        guided = cfg_combine(e_cond, e_uncond, guidance)
        e_adapter = adapter.predict_noise(x_t, t, cond)
        w = omega_weight(weight_fn, schedule, t, x)
        coef = w * (guided - e_adapter)
    return _field(coef, {
        "objective": "VSD", "t": _mean_t(t), "dt": 0.0,
        "term1_norm": float(torch.linalg.vector_norm(guided)),
        "term2_norm": float(torch.linalg.vector_norm(e_adapter)),
    })


def grad_asd(model, schedule: NoiseSchedule, x, t, eps, cond,
             guidance: GuidanceSpec = GuidanceSpec(7.5), *,
             shift: ShiftPolicy, trange: TimestepRange, rng: np.random.Generator,
             guidance_second: GuidanceSpec = GuidanceSpec(1.0),
             weight_fn: str = "one") -> GradientField:
    """Coefficient omega(t) * (guided prediction at t - prediction at t + dt).

    The same clean sample and the same injected noise are diffused to both
    timesteps; only the schedule coefficients differ between the two terms.
    """
    x, eps = _as_tensor_pair(x, eps)
    dt = sample_shift(shift, t, trange, rng, schedule.total_steps)
    t_shift = t + dt
    with torch.no_grad():
        x_t = diffuse(schedule, x, eps, t)
        x_ts = diffuse(schedule, x, eps, t_shift)
        e_cond = predict_noise(model, x_t, t, cond)
        e_uncond = predict_noise(model, x_t, t, null_like(cond))
        guided = cfg_combine(e_cond, e_uncond, guidance)
        second = predict_noise(model, x_ts, t_shift, cond)
        if guidance_second.scale != 1.0:
            second_uncond = predict_noise(model, x_ts, t_shift, null_like(cond))
            second = cfg_combine(second, second_uncond, guidance_second)
        w = omega_weight(weight_fn, schedule, t, x)
        coef = w * (guided - second)
    return _field(coef, {
        "objective": "ASD", "t": _mean_t(t), "dt": _mean_t(dt),
        "term1_norm": float(torch.linalg.vector_norm(guided)),
        "term2_norm": float(torch.linalg.vector_norm(second)),
    })


def apply_gradient_field(field: GradientField, x: torch.Tensor) -> torch.Tensor:
    """Surrogate scalar <coefficient, x> whose x-gradient is the coefficient."""
    if not isinstance(x, torch.Tensor):
        raise ValidationError("apply_gradient_field needs a torch tensor with grad lineage")
    if tuple(field.coefficient.shape) != tuple(x.shape):
        raise ValidationError(
            f"coefficient shape {tuple(field.coefficient.shape)} != x shape {tuple(x.shape)}"
        )
    return (field.coefficient * x).sum()


# ---------------------------------------------------------------------------
# VSD adapter


class VsdAdapter(nn.Module):
    """Additive low-rank perturbation of the base model's linear layers.

    Deltas start at exactly zero, so a fresh adapter reproduces the base
    model bit for bit. Only the low-rank factors train; the base is frozen.
    """

    def __init__(self, base: Denoiser, rank: int = 4, lr: float = 1e-3,
                 init_scale: float = 0.01):
        super().__init__()
        if rank < 1:
            raise ValidationError(f"rank must be >= 1, got {rank}")
        self.base = base
        self.rank = rank
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.lora_a = nn.ParameterDict()
        self.lora_b = nn.ParameterDict()
        self._target_names = []
        for name, module in base.named_modules():
            if isinstance(module, nn.Linear):
                wname = f"{name}.weight"
                key = wname.replace(".", "__")
                out_dim, in_dim = module.weight.shape
                r = min(rank, out_dim, in_dim)
                self.lora_a[key] = nn.Parameter(torch.randn(r, in_dim) * init_scale)
                self.lora_b[key] = nn.Parameter(torch.zeros(out_dim, r))
                self._target_names.append(wname)
        if not self._target_names:
            raise ConfigurationError("base model has no linear layers to adapt")
        self.optimizer = torch.optim.Adam(
            list(self.lora_a.parameters()) + list(self.lora_b.parameters()), lr=lr
        )

    @property
    def prediction_type(self) -> str:
        return self.base.prediction_type

    @property
    def schedule_fingerprint(self) -> str:
        return self.base.schedule_fingerprint

    @property
    def data_shape(self):
        return self.base.data_shape

    def delta_norm(self) -> float:
        """Total L2 norm of the weight perturbations; zero right after init."""
        total = 0.0
        with torch.no_grad():
            for wname in self._target_names:
                key = wname.replace(".", "__")
                total += float((self.lora_b[key] @ self.lora_a[key]).pow(2).sum())
        return total ** 0.5

    def _overrides(self) -> dict:
        params = dict(self.base.named_parameters())
        out = {}
        for wname in self._target_names:
            key = wname.replace(".", "__")
            out[wname] = params[wname].detach() + self.lora_b[key] @ self.lora_a[key]
        return out

    def predict_noise(self, x_t, t, cond):
        return self.base.predict_noise(x_t, t, cond, param_override=self._overrides())


def vsd_adapter_step(adapter: VsdAdapter, schedule: NoiseSchedule, rendered_batch,
                     conds, trange: TimestepRange, rng: np.random.Generator):
    """One denoising-objective step of the adapter on the current renders.

    Returns the scalar loss before the update, or None for an empty batch.
    The rendered batch is treated as data: no gradients flow back into it.
    """
    if rendered_batch is None or len(rendered_batch) == 0:
        return None
    if adapter.schedule_fingerprint != schedule.fingerprint:
        raise ConfigurationError("adapter schedule does not match the configured schedule")
    x = rendered_batch.detach() if isinstance(rendered_batch, torch.Tensor) \
        else torch.as_tensor(np.asarray(rendered_batch), dtype=torch.float32)
    x = x.to(torch.float32)
    batch = x.shape[0]
    t = rng.integers(trange.t_min, trange.t_max + 1, size=batch)
    eps = torch.as_tensor(rng.standard_normal(tuple(x.shape)), dtype=torch.float32)
    x_t = diffuse(schedule, x, eps, t)
    pred = adapter.predict_noise(x_t, t, conds)
    loss = torch.nn.functional.mse_loss(pred, eps)
    if not torch.isfinite(loss):
        raise ValidationError("adapter loss became non-finite")
    adapter.optimizer.zero_grad()
    loss.backward()
    adapter.optimizer.step()
    return float(loss.detach())


@dataclass(frozen=True)
class DistillationObjective:
    """Named objective with its guidance scales, shift policy and weighting."""

    kind: str
    guidance_main: GuidanceSpec
    guidance_second: GuidanceSpec = GuidanceSpec(1.0)
    shift: ShiftPolicy | None = None
    weight_fn: str = "one"

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS:
            raise ConfigurationError(f"objective kind {self.kind!r} not in {OBJECTIVE_KINDS}")
        if self.kind == "ASD" and self.shift is None:
            raise ConfigurationError("ASD needs a shift policy")
        if self.weight_fn not in ("one", "sigma_sq"):
            raise ConfigurationError(f"unknown weight_fn {self.weight_fn!r}")


def objective_gradient(objective: DistillationObjective, model, schedule: NoiseSchedule,
                       x, t, eps, cond, *, trange: TimestepRange,
                       rng: np.random.Generator, adapter: VsdAdapter | None = None) -> GradientField:
    """Dispatch one draw through the configured objective."""
    if objective.kind == "SDS":
        return grad_sds(model, schedule, x, t, eps, cond,
                        guidance=objective.guidance_main, weight_fn=objective.weight_fn)
    if objective.kind == "CSD":
        return grad_csd(model, schedule, x, t, eps, cond, weight_fn=objective.weight_fn)
    if objective.kind == "VSD":
        if adapter is None:
            raise ConfigurationError("VSD needs an adapter instance")
        return grad_vsd(model, adapter, schedule, x, t, eps, cond,
                        guidance=objective.guidance_main, weight_fn=objective.weight_fn)
    return grad_asd(model, schedule, x, t, eps, cond,
                    guidance=objective.guidance_main, shift=objective.shift,
                    trange=trange, rng=rng, guidance_second=objective.guidance_second,
                    weight_fn=objective.weight_fn)
