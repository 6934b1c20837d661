"""Two-stage generator cascade with auto-context.

Stage 1 emits continuous maps (linear head), which are min-max normalized per
sample, concatenated to the source channels, and consumed by stage 2 (sigmoid
head). Both stages train end-to-end: the loss at the stage-2 output
back-propagates into stage 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from .networks import NetworkSpec, SegGenerator, build_generator
from .networks import parameter_count as _generator_parameter_count
from .weights import WeightArchive


@dataclass(frozen=True)
class CascadeSpec:
    """Specs of the two stages; stage 2 consumes source channels + 1 context map."""

    stage1: NetworkSpec
    stage2: NetworkSpec

    def __post_init__(self):
        if self.stage1.final_activation != "linear":
            raise ValueError("stage 1 must use a linear head to emit continuous maps")
        if self.stage2.final_activation != "sigmoid":
            raise ValueError("stage 2 must use a sigmoid head")
        if self.stage2.in_channels != self.stage1.in_channels + 1:
            raise ValueError(
                "stage 2 must consume stage-1 input channels plus the context map "
                f"({self.stage1.in_channels} + 1 != {self.stage2.in_channels})"
            )

    @classmethod
    def create(cls, encoder: str, pretrained: bool = False, in_channels: int = 3,
               width_multiplier: float = 1) -> "CascadeSpec":
        return cls(
            stage1=NetworkSpec(encoder, pretrained, "linear", in_channels, width_multiplier),
            stage2=NetworkSpec(encoder, pretrained, "sigmoid", in_channels + 1, width_multiplier),
        )


def normalize_stage1(maps: torch.Tensor) -> torch.Tensor:
    """Min-max scale each sample's map to [0, 1]; constant maps become zeros.

    Idempotent, differentiable, and independent of the rest of the batch.
    Raises on NaN input.
    """
    if torch.isnan(maps).any():
        raise ValueError("stage-1 maps contain NaN")
    dims = tuple(range(1, maps.ndim))
    lo = maps.amin(dim=dims, keepdim=True)
    hi = maps.amax(dim=dims, keepdim=True)
    span = hi - lo
    safe = torch.where(span > 0, span, torch.ones_like(span))
    return torch.where(span > 0, (maps - lo) / safe, torch.zeros_like(maps))


class GeneratorCascade(nn.Module):
    """Auto-context pair of generators; forward returns both stage outputs."""

    def __init__(self, spec: CascadeSpec, seed: int = 0):
        super().__init__()
        self.spec = spec
        self.stage1 = build_generator(spec.stage1, seed=seed)
        self.stage2 = build_generator(spec.stage2, seed=seed + 1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        maps = self.stage1(x)
        context = normalize_stage1(maps)
        probs = self.stage2(torch.cat([x, context], dim=1))
        return maps, probs

    def segment(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward(x)[1]


def build_cascade(spec: CascadeSpec, seed: int = 0) -> GeneratorCascade:
    return GeneratorCascade(spec, seed=seed)


def cascade_forward(cascade: GeneratorCascade, batch: torch.Tensor):
    """Run the cascade, returning (stage1_maps, stage2_probs) for inspection."""
    return cascade(batch)


def end_to_end_parameters(cascade: GeneratorCascade) -> list[nn.Parameter]:
    """The union of stage-1 and stage-2 parameters as one trainable set."""
    return list(cascade.stage1.parameters()) + list(cascade.stage2.parameters())


def parameter_count(spec: NetworkSpec | CascadeSpec) -> int:
    if isinstance(spec, CascadeSpec):
        return _generator_parameter_count(spec.stage1) + _generator_parameter_count(spec.stage2)
    return _generator_parameter_count(spec)


def _spec_to_dict(spec: NetworkSpec) -> dict:
    return {
        "encoder": spec.encoder,
        "pretrained": spec.pretrained,
        "final_activation": spec.final_activation,
        "in_channels": spec.in_channels,
        "width_multiplier": float(spec.width_multiplier),
    }


def _spec_from_dict(d: dict) -> NetworkSpec:
    return NetworkSpec(
        encoder=d["encoder"],
        pretrained=d["pretrained"],
        final_activation=d["final_activation"],
        in_channels=d["in_channels"],
        width_multiplier=d["width_multiplier"],
    )


def save_checkpoint(out_dir, model, extra: dict | None = None,
                    discriminator=None) -> Path:
    """Persist a generator or cascade as WeightArchives plus a manifest.

    Layout: ``manifest.json`` naming the spec(s), ``stage1.warch`` (and
    ``stage2.warch`` for cascades, ``discriminator.warch`` when present).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest: dict = dict(extra or {})
    if isinstance(model, GeneratorCascade):
        manifest["kind"] = "cascade"
        manifest["stage1"] = _spec_to_dict(model.spec.stage1)
        manifest["stage2"] = _spec_to_dict(model.spec.stage2)
        WeightArchive.from_state_dict(model.stage1.state_dict()).save(out_dir / "stage1.warch")
        WeightArchive.from_state_dict(model.stage2.state_dict()).save(out_dir / "stage2.warch")
    else:
        manifest["kind"] = "generator"
        manifest["stage1"] = _spec_to_dict(model.spec)
        WeightArchive.from_state_dict(model.state_dict()).save(out_dir / "stage1.warch")
    if discriminator is not None:
        manifest["discriminator_in_channels"] = discriminator.in_channels
        WeightArchive.from_state_dict(discriminator.state_dict()).save(
            out_dir / "discriminator.warch"
        )
    tmp = out_dir / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    tmp.replace(out_dir / "manifest.json")
    return out_dir


def load_checkpoint(ckpt_dir):
    """Rebuild the model saved by save_checkpoint; returns (model, manifest)."""
    ckpt_dir = Path(ckpt_dir)
    manifest = json.loads((ckpt_dir / "manifest.json").read_text())
    if manifest["kind"] == "cascade":
        spec = CascadeSpec(_spec_from_dict(manifest["stage1"]), _spec_from_dict(manifest["stage2"]))
        model: nn.Module = GeneratorCascade(spec)
        model.stage1.load_state_dict(WeightArchive.load(ckpt_dir / "stage1.warch").to_state_dict())
        model.stage2.load_state_dict(WeightArchive.load(ckpt_dir / "stage2.warch").to_state_dict())
    else:
        model = SegGenerator(_spec_from_dict(manifest["stage1"]))
        model.load_state_dict(WeightArchive.load(ckpt_dir / "stage1.warch").to_state_dict())
    return model, manifest
