"""Pipeline configuration: JSON in/out with an exhaustive schema.

Unknown keys are rejected everywhere; silently ignored hyperparameter typos
are the main reproducibility hazard this guards against.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .adapter import DsgaConfig
from .lora import LoraConfig
from .losses import LossHyper, LossWeights
from .prompts import PromptConfig

__all__ = ["ValidationError", "BackboneProfile", "PipelineConfig"]


class ValidationError(ValueError):
    """Raised for malformed or out-of-contract configuration values."""


@dataclass
class BackboneProfile:
    """Frozen-model bookkeeping used by the parameter audit."""

    layers: int = 12
    embed_dim: int = 768
    params_frozen: int = 91_000_000

    def __post_init__(self) -> None:
        if self.layers < 0 or self.embed_dim < 1 or self.params_frozen < 1:
            raise ValidationError(f"invalid backbone profile: {self}")


@dataclass
class PipelineConfig:
    dsga: DsgaConfig = field(default_factory=lambda: DsgaConfig(embed_dim=768))
    lora: LoraConfig = field(default_factory=LoraConfig)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    loss_hyper: LossHyper = field(default_factory=LossHyper)
    backbone: BackboneProfile = field(default_factory=BackboneProfile)

    def to_dict(self) -> dict:
        d = self.dsga
        return {
            "dsga": {
                "embed_dim": d.embed_dim,
                "reduction_ratio": d.reduction_ratio,
                "k_max": d.k_max,
                "decay_exponent": d.decay_exponent,
                "dropout_prob": d.dropout_prob,
                "mode": d.mode,
                "seed": d.seed,
            },
            "lora": {
                "rank": self.lora.rank,
                "targets": list(self.lora.targets),
                "num_layers": self.lora.num_layers,
                "alpha": self.lora.alpha,
            },
            "prompt": {
                "grid_size": self.prompt.grid_size,
                "saliency_threshold": self.prompt.saliency_threshold,
                "n_min": self.prompt.n_min,
                "n_max": self.prompt.n_max,
            },
            "loss": {
                "weights": list(self.loss_weights.lams),
                "ema_beta": self.loss_weights.ema_beta,
                "ema_enabled": self.loss_weights.ema_enabled,
                "focal_gamma": self.loss_hyper.focal_gamma,
                "focal_alpha": self.loss_hyper.focal_alpha,
                "dice_smooth": self.loss_hyper.dice_smooth,
            },
            "backbone": {
                "layers": self.backbone.layers,
                "embed_dim": self.backbone.embed_dim,
                "params_frozen": self.backbone.params_frozen,
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        if not isinstance(data, dict):
            raise ValidationError(f"config root must be an object, got {type(data).__name__}")
        base = cls()
        sections = dict(data)
        try:
            dsga_cfg = _merge("dsga", sections.pop("dsga", {}), base.dsga, DsgaConfig)
            lora_cfg = _merge("lora", sections.pop("lora", {}), base.lora, LoraConfig)
            prompt_cfg = _merge(
                "prompt", sections.pop("prompt", {}), base.prompt, PromptConfig
            )
            loss_weights, loss_hyper = _parse_loss(sections.pop("loss", {}))
            backbone = _merge(
                "backbone", sections.pop("backbone", {}), base.backbone, BackboneProfile
            )
        except ValueError as exc:
            raise ValidationError(str(exc)) from exc
        if sections:
            raise ValidationError(f"unknown config sections: {sorted(sections)}")
        return cls(
            dsga=dsga_cfg,
            lora=lora_cfg,
            prompt=prompt_cfg,
            loss_weights=loss_weights,
            loss_hyper=loss_hyper,
            backbone=backbone,
        )


def _merge(section: str, data: dict, defaults, cls):
    if not isinstance(data, dict):
        raise ValidationError(f"section {section!r} must be an object")
    fields = {k: getattr(defaults, k) for k in defaults.__dataclass_fields__}
    extra = set(data) - set(fields)
    if extra:
        raise ValidationError(f"unknown keys in section {section!r}: {sorted(extra)}")
    fields.update(data)
    if "targets" in fields and isinstance(fields["targets"], list):
        fields["targets"] = tuple(fields["targets"])
    return cls(**fields)


def _parse_loss(data: dict):
    if not isinstance(data, dict):
        raise ValidationError("section 'loss' must be an object")
    data = dict(data)
    weights = data.pop("weights", [1.0, 1.0, 1.0])
    if not (isinstance(weights, (list, tuple)) and len(weights) == 3):
        raise ValidationError(f"loss.weights must be a 3-element list, got {weights!r}")
    lw = LossWeights(
        lam1=float(weights[0]),
        lam2=float(weights[1]),
        lam3=float(weights[2]),
        ema_beta=float(data.pop("ema_beta", 0.9)),
        ema_enabled=bool(data.pop("ema_enabled", False)),
    )
    hyper = LossHyper(
        focal_gamma=float(data.pop("focal_gamma", 2.0)),
        focal_alpha=float(data.pop("focal_alpha", 0.25)),
        dice_smooth=float(data.pop("dice_smooth", 1.0)),
    )
    if data:
        raise ValidationError(f"unknown keys in section 'loss': {sorted(data)}")
    return lw, hyper
