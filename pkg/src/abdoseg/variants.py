"""Named model variants and their deterministic spec construction.

The registered names follow the convention used throughout the score tables:
``v16``/``v19`` pick the VGG-shaped encoder, a ``p`` prefix marks a
pre-trained encoder, the ``11`` suffix marks the two-stage cascade, and the
``cg`` prefix enables the conditional-adversarial discriminator during
training. Plain ``unet`` is the 32-channel baseline encoder-decoder.
"""

from __future__ import annotations

from dataclasses import dataclass

from .cascade import CascadeSpec
from .cascade import parameter_count as _parameter_count
from .networks import NetworkSpec


@dataclass(frozen=True)
class VariantInfo:
    name: str
    encoder: str
    pretrained: bool
    cascaded: bool
    adversarial: bool


VARIANTS: dict[str, VariantInfo] = {
    v.name: v
    for v in [
        VariantInfo("unet", "basic32", False, False, False),
        VariantInfo("unet11", "basic32", False, True, False),
        VariantInfo("v16unet", "vgg16", False, False, False),
        VariantInfo("v16punet", "vgg16", True, False, False),
        VariantInfo("v19unet", "vgg19", False, False, False),
        VariantInfo("v19punet", "vgg19", True, False, False),
        VariantInfo("v16punet11", "vgg16", True, True, False),
        VariantInfo("v19punet11", "vgg19", True, True, False),
        VariantInfo("cgv16punet11", "vgg16", True, True, True),
        VariantInfo("cgv19punet11", "vgg19", True, True, True),
    ]
}


def make_specs(name: str, in_channels: int = 3, width_multiplier: float = 1,
               with_pretrained: bool | None = None) -> tuple[NetworkSpec | CascadeSpec, bool]:
    """Build the model spec and adversarial flag for a variant name.

    with_pretrained=None keeps the variant's canonical flag; passing False
    builds the same architecture with random initialization (used when no
    weight archive is supplied or at reduced width, where archives cannot
    apply).
    """
    if name not in VARIANTS:
        raise KeyError(f"unknown variant {name!r}; known: {sorted(VARIANTS)}")
    info = VARIANTS[name]
    pretrained = info.pretrained if with_pretrained is None else with_pretrained
    if float(width_multiplier) != 1:
        pretrained = False
    if info.cascaded:
        spec: NetworkSpec | CascadeSpec = CascadeSpec.create(
            info.encoder, pretrained, in_channels, width_multiplier
        )
    else:
        spec = NetworkSpec(info.encoder, pretrained, "sigmoid", in_channels, width_multiplier)
    return spec, info.adversarial


def parameter_count_by_name(name: str) -> int | None:
    """Full-width parameter count of a registered variant; None if unknown."""
    if name not in VARIANTS:
        return None
    spec, _ = make_specs(name, with_pretrained=False)
    return _parameter_count(spec)
