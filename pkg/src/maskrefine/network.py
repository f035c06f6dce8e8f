"""Trunk, heads A/B/C, the combined model and sliding-window proposals."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import engine as E
from .engine import Tensor
from .layers import Conv, Dense
from .refinement import ChannelSchedule, Refiner, build_stack, make_schedule

HEAD_VARIANTS = ("A", "B", "C")
REFINE_VARIANTS = ("full", "no_horizontal", "skip_only")


@dataclass
class TrunkConfig:
    W: int = 64
    P: int = 3
    D: int = 6
    F: int = 64
    base_width: int = 8
    max_width: int = 64
    in_channels: int = 1
    pad_mode: str = "reflective"
    input_offset: float = 0.5

    def __post_init__(self):
        if self.P < 1:
            raise ValueError("need at least one pooling stage")
        if self.W % 2 ** self.P:
            raise ValueError(f"W={self.W} is not divisible by 2^P={2 ** self.P}")
        if self.D < self.P + 2:
            raise ValueError(f"D={self.D} too small: need one 3x3 conv per resolution level plus the 1x1 reduction")

    @property
    def stride(self) -> int:
        return 2 ** self.P

    @property
    def S(self) -> int:
        """Stride density: distinct window alignments per patch side."""
        return self.W // self.stride

    @property
    def final_side(self) -> int:
        return self.W // self.stride

    def widths(self) -> list[int]:
        return [min(self.base_width * 2 ** level, self.max_width) for level in range(self.P + 1)]

    def convs_per_level(self) -> list[int]:
        counts = [1] * (self.P + 1)
        extra = self.D - (self.P + 2)
        level = self.P
        while extra > 0:
            counts[level] += 1
            extra -= 1
            level = level - 1 if level > 0 else self.P
        return counts

    def plan(self) -> list[tuple]:
        """Layer plan: ``("conv", cin, cout, k)``, ``("tap", level)`` and ``("pool",)`` entries."""
        plan: list[tuple] = []
        cin = self.in_channels
        widths = self.widths()
        for level, n in enumerate(self.convs_per_level()):
            for _ in range(n):
                plan.append(("conv", cin, widths[level], 3))
                cin = widths[level]
            if level < self.P:
                if level >= 1:
                    plan.append(("tap", level))
                plan.append(("pool",))
        plan.append(("conv", cin, self.F, 1))
        return plan

    def feature_channels(self) -> list[int]:
        """Channels of the refinement features, deepest first."""
        widths = self.widths()
        return [self.F] + [widths[level] for level in range(self.P - 1, 0, -1)]


@dataclass
class HeadConfig:
    variant: str = "C"
    reduce: int = 16
    vector: int = 128
    score_hidden: int = 256

    def __post_init__(self):
        if self.variant not in HEAD_VARIANTS:
            raise ValueError(f"head variant must be one of {HEAD_VARIANTS}, got {self.variant!r}")


@dataclass
class ModelConfig:
    trunk: TrunkConfig = field(default_factory=TrunkConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    k: int = 16
    schedule: str = "halving"
    refine_variant: str = "full"
    seed: int = 0
    init: str = "he"

    def __post_init__(self):
        if isinstance(self.trunk, dict):
            self.trunk = TrunkConfig(**self.trunk)
        if isinstance(self.head, dict):
            self.head = HeadConfig(**self.head)
        if self.refine_variant not in REFINE_VARIANTS:
            raise ValueError(f"refine_variant must be one of {REFINE_VARIANTS}")

    def channel_schedule(self) -> ChannelSchedule:
        if self.refine_variant == "skip_only":
            return ChannelSchedule([1] * self.trunk.P, [1] * self.trunk.P, "constant")
        return make_schedule(self.k, self.schedule, self.trunk.P)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class InferenceConfig:
    top_n: int = 10
    min_object_size: int = 16
    score_threshold: float = 0.0
    batch_size: int = 64

    def __post_init__(self):
        if self.top_n < 1:
            raise ValueError("top_n must be >= 1")


class Trunk:
    def __init__(self, cfg: TrunkConfig, rng: np.random.Generator, init: str = "he"):
        self.cfg = cfg
        self.plan = cfg.plan()
        self.convs = [
            Conv.init(rng, cin, cout, k, pad_mode=cfg.pad_mode, init=init)
            for kind, *rest in self.plan if kind == "conv"
            for cin, cout, k in [rest]
        ]

    def __call__(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Final trunk map and the refinement features, deepest first."""
        taps: list[Tensor] = []
        convs = iter(self.convs)
        if self.cfg.input_offset:
            x = E.shift(x, -self.cfg.input_offset)
        for step in self.plan:
            if step[0] == "conv":
                x = E.relu(next(convs)(x))
            elif step[0] == "tap":
                taps.append(x)
            else:
                x = E.maxpool2(x)
        return x, [x] + taps[::-1]

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, conv in enumerate(self.convs):
            out.update(conv.params(f"trunk.{i}"))
        return out


class HeadOutput(NamedTuple):
    vector: Tensor
    coarse_logits: Tensor  # (N, 1, S, S)
    score_logit: Tensor  # (N, 1)


class Head:
    """Mask branch shared by all variants; the score branch differs.

    A: score has its own 1x1 reduction and hidden layer.
    B: score reuses the mask branch's reduced map.
    C: score is a linear map of the low-rank vector that produces the mask.
    """

    def __init__(self, cfg: HeadConfig, trunk: TrunkConfig, rng: np.random.Generator, init: str = "he"):
        self.cfg = cfg
        side = trunk.final_side
        self.side = side
        flat = cfg.reduce * side * side
        self.layers: dict[str, Conv | Dense] = {
            "mask_reduce": Conv.init(rng, trunk.F, cfg.reduce, k=1, init=init),
            "mask_vector": Dense.init(rng, flat, cfg.vector, init),
            "coarse": Dense.init(rng, cfg.vector, side * side, init),
        }
        if cfg.variant == "A":
            self.layers["score_reduce"] = Conv.init(rng, trunk.F, cfg.reduce, k=1, init=init)
        if cfg.variant == "C":
            self.layers["score_out"] = Dense.init(rng, cfg.vector, 1, init)
        else:
            self.layers["score_hidden"] = Dense.init(rng, flat, cfg.score_hidden, init)
            self.layers["score_out"] = Dense.init(rng, cfg.score_hidden, 1, init)

    def __call__(self, trunk_out: Tensor) -> HeadOutput:
        L = self.layers
        n = trunk_out.shape[0]
        reduced = E.reshape(E.relu(L["mask_reduce"](trunk_out)), (n, -1))
        vector = L["mask_vector"](reduced)
        coarse = E.reshape(L["coarse"](vector), (n, 1, self.side, self.side))
        if self.cfg.variant == "C":
            score = L["score_out"](vector)
        else:
            if self.cfg.variant == "A":
                score_in = E.reshape(E.relu(L["score_reduce"](trunk_out)), (n, -1))
            else:
                score_in = reduced
            score = L["score_out"](E.relu(L["score_hidden"](score_in)))
        return HeadOutput(vector, coarse, score)

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, layer in self.layers.items():
            out.update(layer.params(f"head.{name}"))
        return out

    def score_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params().items() if ".score_" in k}


def forward_head(head: Head, trunk_out: Tensor) -> HeadOutput:
    return head(trunk_out)


class FeedforwardOutput(NamedTuple):
    m1: Tensor
    score_logit: Tensor
    features: list[Tensor]
    coarse_logits: Tensor
    vector: Tensor


class Model:
    """Trunk + head, optionally followed by a refinement stack.

    Without refinement the model is in ``feedforward_only`` mode and
    produces the coarse mask. :meth:`add_refinement` attaches the linear
    layer that emits the mask encoding ``M1`` and the refinement modules;
    the coarse layer stays in place so both outputs remain available.
    """

    def __init__(self, cfg: ModelConfig, refined: bool = False):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 1])
        self.trunk = Trunk(cfg.trunk, rng, cfg.init)
        self.head = Head(cfg.head, cfg.trunk, rng, cfg.init)
        self.encode: Dense | None = None
        self.refiner: Refiner | None = None
        if refined:
            self.add_refinement()

    @property
    def mode(self) -> str:
        return "refined" if self.refiner is not None else "feedforward_only"

    @property
    def W(self) -> int:
        return self.cfg.trunk.W

    def add_refinement(self) -> None:
        rng = np.random.default_rng([self.cfg.seed, 2])
        schedule = self.cfg.channel_schedule()
        if schedule.n != self.cfg.trunk.P:
            raise ValueError("refinement needs one stage per pooling layer")
        side = self.cfg.trunk.final_side
        self.encode = Dense.init(rng, self.cfg.head.vector, schedule.k_m[0] * side * side, self.cfg.init)
        modules = build_stack(rng, schedule, self.cfg.trunk.feature_channels(), self.cfg.refine_variant, self.cfg.init)
        self.refiner = Refiner(modules, self.cfg.refine_variant, schedule)

    # parameters ---------------------------------------------------------

    def feedforward_params(self) -> dict[str, Tensor]:
        return {**self.trunk.params(), **self.head.params()}

    def refinement_params(self) -> dict[str, Tensor]:
        if self.refiner is None:
            return {}
        return {**self.encode.params("refine.encode"), **self.refiner.params()}

    def params(self) -> dict[str, Tensor]:
        return {**self.feedforward_params(), **self.refinement_params()}

    def param_count(self, group: str = "all") -> int:
        source = {"all": self.params, "head": self.head.params, "score": self.head.score_params}[group]()
        return int(sum(t.size for t in source.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params().items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.params()
        missing = [k for k in params if k not in state]
        unexpected = [k for k in state if k not in params]
        if strict and (missing or unexpected):
            raise KeyError(f"checkpoint mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for k, t in params.items():
            if k in state:
                if tuple(state[k].shape) != t.shape:
                    raise ValueError(f"{k}: shape {state[k].shape} != {t.shape}")
                t.data = np.array(state[k], dtype=np.float64)

    def set_trainable(self, names: Sequence[str] | None) -> None:
        """Only ``names`` require gradients (all parameters if None)."""
        keep = None if names is None else set(names)
        for k, t in self.params().items():
            t.requires_grad = keep is None or k in keep

    # forward passes -----------------------------------------------------

    def _check_patch(self, patch: Tensor) -> None:
        if patch.ndim != 4 or patch.shape[2:] != (self.W, self.W) or patch.shape[1] != self.cfg.trunk.in_channels:
            raise ValueError(
                f"expected patches of shape (N, {self.cfg.trunk.in_channels}, {self.W}, {self.W}), got {patch.shape}"
            )

    def forward_feedforward(self, patch: Tensor) -> FeedforwardOutput:
        self._check_patch(patch)
        final, features = self.trunk(patch)
        out = self.head(final)
        m1 = out.coarse_logits
        if self.encode is not None:
            n = patch.shape[0]
            side = self.cfg.trunk.final_side
            m1 = E.reshape(self.encode(out.vector), (n, -1, side, side))
        return FeedforwardOutput(m1, out.score_logit, features, out.coarse_logits, out.vector)

    def coarse_mask(self, ff: FeedforwardOutput) -> Tensor:
        """Coarse prediction upsampled from trunk resolution to the patch size."""
        return E.sigmoid(E.upsample_to(ff.coarse_logits, self.W))

    def refined_mask(self, ff: FeedforwardOutput) -> Tensor:
        if self.refiner is None:
            raise ValueError("model has no refinement stage")
        return self.refiner(ff.m1, ff.features)

    def forward_refined(self, patch: Tensor) -> tuple[Tensor, Tensor]:
        if self.refiner is None:
            raise ValueError("forward_refined needs a model in refined mode")
        ff = self.forward_feedforward(patch)
        return self.refined_mask(ff), E.sigmoid(ff.score_logit)

    def forward_coarse(self, patch: Tensor) -> tuple[Tensor, Tensor]:
        ff = self.forward_feedforward(patch)
        return self.coarse_mask(ff), E.sigmoid(ff.score_logit)


def build_trunk(cfg: TrunkConfig, seed: int) -> Trunk:
    return Trunk(cfg, np.random.default_rng([seed, 1]))


# ---------------------------------------------------------------- proposals


@dataclass
class Proposal:
    y: int
    x: int
    score: float
    mask: np.ndarray  # (W, W) continuous probabilities

    def to_canvas(self, shape: tuple[int, int], threshold: float = 0.2) -> np.ndarray:
        out = np.zeros(shape, dtype=bool)
        w = self.mask.shape[0]
        out[self.y:self.y + w, self.x:self.x + w] = self.mask >= threshold
        return out


@dataclass
class ProposalSet:
    proposals: list[Proposal]
    windows: int = 0

    def __post_init__(self):
        scores = [p.score for p in self.proposals]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError("proposals must be ordered by non-increasing score")

    def __len__(self) -> int:
        return len(self.proposals)

    def __iter__(self):
        return iter(self.proposals)

    def records(self) -> list[dict]:
        return [{"x": p.x, "y": p.y, "score": p.score} for p in self.proposals]


def window_origins(height: int, width: int, size: int, stride: int) -> list[tuple[int, int]]:
    if height < size or width < size:
        raise ValueError(f"image {height}x{width} is smaller than the {size}x{size} window")
    ys = range(0, height - size + 1, stride)
    xs = range(0, width - size + 1, stride)
    return [(y, x) for y in ys for x in xs]


def _as_chw(image) -> np.ndarray:
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"image must be (H, W) or (C, H, W), got shape {arr.shape}")
    return arr


def propose(
    model: Model,
    image,
    stride: int | None = None,
    infer: InferenceConfig | None = None,
    mode: str = "refined",
) -> ProposalSet:
    """Score every window, then produce masks for the ``top_n`` best in one batch.

    Ties in score keep window order (row-major origins).
    """
    infer = infer or InferenceConfig()
    stride = stride or model.cfg.trunk.stride
    img = _as_chw(image)
    W = model.W
    origins = window_origins(img.shape[1], img.shape[2], W, stride)
    windows = np.stack([img[:, y:y + W, x:x + W] for y, x in origins])

    with E.no_grad():
        scores = np.empty(len(origins))
        cached: list[FeedforwardOutput] = []
        for start in range(0, len(origins), infer.batch_size):
            ff = model.forward_feedforward(Tensor(windows[start:start + infer.batch_size]))
            scores[start:start + len(ff.score_logit.data)] = E.sigmoid(ff.score_logit).data[:, 0]
            cached.append(ff)
        order = np.argsort(-scores, kind="stable")
        order = order[scores[order] >= infer.score_threshold][: infer.top_n]
        if len(order) == 0:
            return ProposalSet([], len(origins))
        top = _gather(cached, order, infer.batch_size)
        if mode == "refined":
            masks = model.refined_mask(top).data[:, 0]
        elif mode == "coarse":
            masks = model.coarse_mask(top).data[:, 0]
        else:
            raise ValueError(f"mode must be 'coarse' or 'refined', got {mode!r}")
    props = [Proposal(origins[i][0], origins[i][1], float(scores[i]), masks[j]) for j, i in enumerate(order)]
    return ProposalSet(props, len(origins))


def _gather(cached: list[FeedforwardOutput], index: np.ndarray, batch: int) -> FeedforwardOutput:
    def pick(getter):
        full = np.concatenate([getter(ff) for ff in cached])
        return Tensor(full[index])

    n_feat = len(cached[0].features)
    return FeedforwardOutput(
        m1=pick(lambda f: f.m1.data),
        score_logit=pick(lambda f: f.score_logit.data),
        features=[pick(lambda f, i=i: f.features[i].data) for i in range(n_feat)],
        coarse_logits=pick(lambda f: f.coarse_logits.data),
        vector=pick(lambda f: f.vector.data),
    )
