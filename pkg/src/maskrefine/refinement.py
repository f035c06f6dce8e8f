"""Top-down refinement modules.

A refinement stage takes a mask encoding ``M`` and bottom-up features
``F`` at the same resolution, reduces ``F`` to skip features ``S`` with two
3x3 convs, merges ``concat(M, S)`` with a 3x3 conv and upsamples the result
by two. Stacking one stage per pooling layer restores the input resolution.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import engine as E
from .engine import Tensor
from .layers import Conv

SKIP_HIDDEN = 64


@dataclass
class ChannelSchedule:
    k_m: list[int]
    k_s: list[int]
    variant: str = "halving"

    def __post_init__(self):
        if len(self.k_m) != len(self.k_s):
            raise ValueError("k_m and k_s must have one entry per stage")
        if any(k < 1 for k in self.k_m + self.k_s):
            raise ValueError("channel widths must be >= 1")

    @property
    def n(self) -> int:
        return len(self.k_m)

    def to_dict(self) -> dict:
        return {"k_m": list(self.k_m), "k_s": list(self.k_s), "variant": self.variant}


def make_schedule(k: int, variant: str, n: int) -> ChannelSchedule:
    """``constant``: every stage uses ``k``; ``halving``: k, k/2, k/4, ..."""
    if n < 0 or k < 1:
        raise ValueError("need k >= 1 and n >= 0")
    if variant == "constant":
        widths = [k] * n
    elif variant == "halving":
        if n and k % (2 ** (n - 1)):
            raise ValueError(f"halving schedule needs k divisible by {2 ** (n - 1)}, got {k}")
        widths = [k // 2 ** i for i in range(n)]
    else:
        raise ValueError(f"unknown schedule variant {variant!r}")
    return ChannelSchedule(k_m=list(widths), k_s=list(widths), variant=variant)


@dataclass
class RefinementModule:
    """Parameters of one stage: skip convs ``k_f -> 64 -> k_s`` and the merge conv.

    ``last`` marks the final stage, whose merge conv emits mask logits and
    therefore skips the ReLU.
    """

    stage: int
    skip_a: Conv
    skip_b: Conv
    merge: Conv
    k_m: int
    last: bool = False

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        stage: int,
        k_f: int,
        k_m: int,
        k_s: int,
        k_out: int,
        last: bool = False,
        skip_hidden: int = SKIP_HIDDEN,
        init: str = "he",
    ) -> RefinementModule:
        return cls(
            stage=stage,
            skip_a=Conv.init(rng, k_f, skip_hidden, init=init),
            skip_b=Conv.init(rng, skip_hidden, k_s, init=init),
            merge=Conv.init(rng, k_m + k_s, k_out, init=init),
            k_m=k_m,
            last=last,
        )

    def __post_init__(self):
        if self.merge.in_channels != self.k_m + self.skip_b.out_channels:
            raise ValueError(
                f"stage {self.stage}: merge conv takes {self.merge.in_channels} channels, "
                f"expected k_m + k_s = {self.k_m} + {self.skip_b.out_channels}"
            )
        if self.skip_a.out_channels != self.skip_b.in_channels:
            raise ValueError(f"stage {self.stage}: skip convs do not chain")

    @property
    def k_s(self) -> int:
        return self.skip_b.out_channels

    @property
    def k_f(self) -> int:
        return self.skip_a.in_channels

    @property
    def k_out(self) -> int:
        return self.merge.out_channels

    def params(self, prefix: str | None = None) -> dict[str, Tensor]:
        prefix = prefix or f"refine.{self.stage}"
        out = {}
        out.update(self.skip_a.params(f"{prefix}.skip_a"))
        out.update(self.skip_b.params(f"{prefix}.skip_b"))
        out.update(self.merge.params(f"{prefix}.merge"))
        return out


@dataclass
class RefactoredRefinementModule:
    """Same stage with the merge conv split into a mask-path and a skip-path conv.

    ``mask_conv`` may be ``None``: the stage then has no top-down conv and
    only produces a prediction from its skip features.
    """

    stage: int
    skip_a: Conv
    skip_b: Conv
    mask_conv: Conv | None
    skip_merge: Conv
    last: bool = False

    def params(self, prefix: str | None = None) -> dict[str, Tensor]:
        prefix = prefix or f"refine.{self.stage}"
        out = {}
        out.update(self.skip_a.params(f"{prefix}.skip_a"))
        out.update(self.skip_b.params(f"{prefix}.skip_b"))
        if self.mask_conv is not None:
            out.update(self.mask_conv.params(f"{prefix}.mask"))
        out.update(self.skip_merge.params(f"{prefix}.skip_merge"))
        return out


def split_merge(module: RefinementModule) -> RefactoredRefinementModule:
    """Refactored twin of ``module``: merge kernel split along input channels.

    The bias goes to the mask-path conv; the skip-path conv gets zero bias.
    """
    k_m = module.k_m
    w = module.merge.weight.data
    mk = module.merge
    mask_conv = Conv(Tensor(w[:, :k_m].copy(), True), Tensor(mk.bias.data.copy(), True), mk.pad, mk.pad_mode)
    skip_merge = Conv(Tensor(w[:, k_m:].copy(), True), Tensor(np.zeros_like(mk.bias.data), True), mk.pad, mk.pad_mode)
    return RefactoredRefinementModule(module.stage, module.skip_a, module.skip_b, mask_conv, skip_merge, module.last)


def fuse_merge(module: RefactoredRefinementModule) -> RefinementModule:
    """Inverse of :func:`split_merge`."""
    if module.mask_conv is None:
        raise ValueError("a stage without a mask-path conv has no merged form")
    mc, sc = module.mask_conv, module.skip_merge
    merge = Conv(
        Tensor(np.concatenate([mc.weight.data, sc.weight.data], axis=1), True),
        Tensor(mc.bias.data + sc.bias.data, True),
        mc.pad,
        mc.pad_mode,
    )
    return RefinementModule(module.stage, module.skip_a, module.skip_b, merge, mc.in_channels, module.last)


def make_skip(features: Tensor, module: RefinementModule | RefactoredRefinementModule) -> Tensor:
    if features.shape[1] != module.skip_a.in_channels:
        raise ValueError(
            f"stage {module.stage}: features have {features.shape[1]} channels, "
            f"skip conv expects {module.skip_a.in_channels}"
        )
    return E.relu(module.skip_b(E.relu(module.skip_a(features))))


def _check_pair(mask: Tensor, skip: Tensor) -> None:
    if mask.shape[0] != skip.shape[0] or mask.shape[2:] != skip.shape[2:]:
        raise ValueError(f"mask encoding {mask.shape} and skip features {skip.shape} disagree on batch/spatial dims")


def refine(mask: Tensor, skip: Tensor, module: RefinementModule) -> Tensor:
    _check_pair(mask, skip)
    merged = module.merge(E.concat_channels(mask, skip))
    if not module.last:
        merged = E.relu(merged)
    return E.bilinear_up2(merged)


def refine_refactored(mask: Tensor, skip: Tensor, module: RefactoredRefinementModule) -> Tensor:
    _check_pair(mask, skip)
    merged = module.skip_merge(skip)
    if module.mask_conv is not None:
        merged = E.add(module.mask_conv(mask), merged)
    if not module.last:
        merged = E.relu(merged)
    return E.bilinear_up2(merged)


def _check_stack(m1: Tensor, features: Sequence[Tensor], modules: Sequence) -> None:
    if len(features) != len(modules):
        raise ValueError(f"{len(features)} feature maps for {len(modules)} refinement modules")
    side = m1.shape[-1]
    for i, f in enumerate(features):
        if f.shape[-1] != side * 2 ** i or f.shape[0] != m1.shape[0]:
            raise ValueError(
                f"feature {i} has shape {f.shape}; expected side {side * 2 ** i} (deepest first)"
            )


def stack_logits(m1: Tensor, features: Sequence[Tensor], modules: Sequence[RefinementModule]) -> Tensor:
    """Run every stage; features are ordered deepest (lowest resolution) first."""
    _check_stack(m1, features, modules)
    m = m1
    for f, module in zip(features, modules):
        m = refine(m, make_skip(f, module), module)
    return m


def stack_refine(m1: Tensor, features: Sequence[Tensor], modules: Sequence[RefinementModule]) -> Tensor:
    return E.sigmoid(stack_logits(m1, features, modules))


def no_horizontal_logits(m1: Tensor, features: Sequence[Tensor], modules: Sequence[RefinementModule]) -> Tensor:
    """Mask-path convs only: every stage sees all-zero skip features."""
    _check_stack(m1, features, modules)
    m = m1
    for f, module in zip(features, modules):
        n, _, h, w = f.shape
        m = refine(m, Tensor(np.zeros((n, module.k_s, h, w))), module)
    return m


def ablation_no_horizontal(m1: Tensor, features: Sequence[Tensor], modules: Sequence[RefinementModule]) -> Tensor:
    return E.sigmoid(no_horizontal_logits(m1, features, modules))


def skip_only_logits(
    m1: Tensor, features: Sequence[Tensor], modules: Sequence[RefactoredRefinementModule]
) -> Tensor:
    """Independent per-stage predictions, upsampled to full size and averaged.

    ``m1`` is a single-channel prediction; each stage contributes
    ``skip_merge(S_i)`` with no top-down conv, as in a plain skip network.
    """
    _check_stack(m1, features, modules)
    if m1.shape[1] != 1:
        raise ValueError("skip-only ablation needs a single-channel M1")
    side = m1.shape[-1] * 2 ** len(modules)
    total = E.upsample_to(m1, side)
    for f, module in zip(features, modules):
        if module.mask_conv is not None or module.skip_merge.out_channels != 1:
            raise ValueError("skip-only stages have no mask conv and a single output channel")
        total = E.add(total, E.upsample_to(module.skip_merge(make_skip(f, module)), side))
    return E.scale(total, 1.0 / (len(modules) + 1))


def ablation_skip_only(
    m1: Tensor, features: Sequence[Tensor], modules: Sequence[RefactoredRefinementModule]
) -> Tensor:
    return E.sigmoid(skip_only_logits(m1, features, modules))


def build_stack(
    rng: np.random.Generator,
    schedule: ChannelSchedule,
    feature_channels: Sequence[int],
    variant: str = "full",
    init: str = "he",
) -> list:
    """Modules for every stage, deepest first.

    ``feature_channels[i]`` is the channel count of the i-th feature map in
    the same deepest-first order.
    """
    n = schedule.n
    if len(feature_channels) != n:
        raise ValueError(f"schedule has {n} stages but {len(feature_channels)} feature maps were given")
    modules: list = []
    for i in range(n):
        last = i == n - 1
        if variant == "skip_only":
            modules.append(
                RefactoredRefinementModule(
                    stage=i + 1,
                    skip_a=Conv.init(rng, feature_channels[i], SKIP_HIDDEN, init=init),
                    skip_b=Conv.init(rng, SKIP_HIDDEN, 1, init=init),
                    mask_conv=None,
                    skip_merge=Conv.init(rng, 1, 1, init=init),
                    last=last,
                )
            )
            continue
        k_out = 1 if last else schedule.k_m[i + 1]
        modules.append(
            RefinementModule.init(rng, i + 1, feature_channels[i], schedule.k_m[i], schedule.k_s[i], k_out, last=last, init=init)
        )
    return modules


def stack_params(modules: Sequence) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for module in modules:
        out.update(module.params())
    return out


@dataclass
class Refiner:
    """A refinement stack plus how to run it (``full``, ``no_horizontal`` or ``skip_only``)."""

    modules: list
    variant: str = "full"
    schedule: ChannelSchedule | None = None
    extra: dict = field(default_factory=dict)

    def logits(self, m1: Tensor, features: Sequence[Tensor]) -> Tensor:
        if self.variant == "full":
            return stack_logits(m1, features, self.modules)
        if self.variant == "no_horizontal":
            return no_horizontal_logits(m1, features, self.modules)
        if self.variant == "skip_only":
            return skip_only_logits(m1, features, self.modules)
        raise ValueError(f"unknown refinement variant {self.variant!r}")

    def __call__(self, m1: Tensor, features: Sequence[Tensor]) -> Tensor:
        return E.sigmoid(self.logits(m1, features))

    def params(self) -> dict[str, Tensor]:
        return stack_params(self.modules)
