"""Numerical self-checks: finite-difference gradients, merge-split
equivalence, and head timing/parameter benchmarks."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import engine as E
from .engine import Tensor
from .layers import Conv
from .network import HeadConfig, Model, ModelConfig, TrunkConfig
from .refinement import (
    RefinementModule,
    build_stack,
    make_schedule,
    make_skip,
    refine,
    refine_refactored,
    split_merge,
    stack_logits,
)

GRAD_TOL = 1e-4


@dataclass
class GradResult:
    op: str
    config: str
    error: float

    @property
    def ok(self) -> bool:
        return self.error <= GRAD_TOL


def _probe(rng: np.random.Generator, shape) -> Tensor:
    """Fixed random weights that turn any output into a scalar."""
    return Tensor(rng.normal(size=shape))


def _weighted_sum(out: Tensor, w: Tensor) -> Tensor:
    return E.tsum(E.mul(out, w))


def _randomize(params: dict[str, Tensor], rng: np.random.Generator, scale: float = 0.5) -> None:
    for t in params.values():
        t.data = rng.normal(scale=scale, size=t.shape)


def _cases(rng: np.random.Generator) -> list[tuple[str, str, Callable[[Tensor], Tensor], np.ndarray]]:
    """One random instance of every differentiable op: (op, config, f, x)."""
    cases = []

    def add_case(op: str, config: str, fn: Callable[[Tensor], Tensor], x: np.ndarray) -> None:
        out_shape = fn(Tensor(x)).shape
        w = _probe(rng, out_shape)
        cases.append((op, config, lambda t, fn=fn, w=w: _weighted_sum(fn(t), w), x))

    n = int(rng.integers(1, 3))
    c = int(rng.integers(1, 4))
    s = int(rng.choice([2, 4, 6]))
    x = rng.normal(size=(n, c, s, s))
    other = Tensor(rng.normal(size=x.shape))
    add_case("add", f"{x.shape}", lambda t: E.add(t, other), x)
    add_case("mul", f"{x.shape}", lambda t: E.mul(t, other), x)
    k = float(rng.normal())
    add_case("scale", f"c={k:.3f}", lambda t: E.scale(t, k), x)
    add_case("shift", f"c={k:.3f}", lambda t: E.shift(t, k), x)
    add_case("relu", f"{x.shape}", E.relu, x)
    add_case("sigmoid", f"{x.shape}", E.sigmoid, x * 3)
    cases.append(("sum", f"{x.shape}", E.tsum, x))
    cases.append(("mean", f"{x.shape}", E.mean, x))
    add_case("reshape", f"{x.shape}", lambda t: E.reshape(t, (n, -1)), x)

    d_in, d_out = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    lw = Tensor(rng.normal(size=(d_out, d_in)))
    lb = Tensor(rng.normal(size=d_out))
    xin = rng.normal(size=(n, d_in))
    add_case("linear", f"{d_in}->{d_out}", lambda t: E.linear(t, lw, lb), xin)
    add_case("linear.weight", f"{d_in}->{d_out}", lambda t: E.linear(Tensor(xin), t, lb), lw.data.copy())

    kk = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    mode = str(rng.choice(["zero", "reflective"]))
    cout = int(rng.integers(1, 4))
    cw = Tensor(rng.normal(size=(cout, c, kk, kk)))
    cb = Tensor(rng.normal(size=cout))
    pad = kk // 2
    cx = rng.normal(size=(n, c, s + 2, s + 2))
    cfg = f"k={kk} stride={stride} pad={pad} {mode} in={cx.shape}"
    add_case("conv2d", cfg, lambda t: E.conv2d(t, cw, cb, stride, pad, mode), cx)
    add_case("conv2d.weight", cfg, lambda t: E.conv2d(Tensor(cx), t, cb, stride, pad, mode), cw.data.copy())
    add_case("conv2d.bias", cfg, lambda t: E.conv2d(Tensor(cx), cw, t, stride, pad, mode), cb.data.copy())

    add_case("maxpool2", f"{x.shape}", E.maxpool2, x)
    add_case("bilinear_up2", f"{x.shape}", E.bilinear_up2, x)
    add_case("upsample_to", f"{x.shape}->{4 * s}", lambda t: E.upsample_to(t, 4 * s), x)
    y = rng.normal(size=(n, int(rng.integers(1, 4)), s, s))
    add_case("concat_channels", f"{x.shape}+{y.shape}", lambda t: E.concat_channels(t, Tensor(y)), x)
    target = (rng.random(x.shape) > 0.5).astype(float)
    weight = (rng.random(x.shape) > 0.3).astype(float)
    cases.append(("bce_loss", f"{x.shape}", lambda t: E.bce_loss(E.sigmoid(t), target, weight), x))
    cases.append(("bce_with_logits", f"{x.shape}", lambda t: E.bce_with_logits(t, target, weight), x))
    return cases


def _module_case(rng: np.random.Generator):
    """Single refinement stage: gradient w.r.t. mask encoding, features and merge weights."""
    k_m, k_s, k_f = (int(v) for v in rng.integers(1, 4, size=3))
    side = int(rng.choice([2, 4]))
    n = int(rng.integers(1, 3))
    last = bool(rng.integers(0, 2))
    module = RefinementModule.init(rng, 1, k_f, k_m, k_s, 1 if last else int(rng.integers(1, 4)), last=last, skip_hidden=4)
    _randomize(module.params(), rng)
    m = rng.normal(size=(n, k_m, side, side))
    f = rng.normal(size=(n, k_f, side, side))
    out_shape = (n, module.k_out, 2 * side, 2 * side)
    w = _probe(rng, out_shape)
    cfg = f"k_m={k_m} k_s={k_s} k_f={k_f} side={side} last={last}"

    def via_m(t):
        return _weighted_sum(refine(t, make_skip(Tensor(f), module), module), w)

    def via_f(t):
        return _weighted_sum(refine(Tensor(m), make_skip(t, module), module), w)

    def via_merge(t):
        merge = Conv(t, module.merge.bias, module.merge.pad, module.merge.pad_mode)
        twin = RefinementModule(module.stage, module.skip_a, module.skip_b, merge, module.k_m, module.last)
        return _weighted_sum(refine(Tensor(m), make_skip(Tensor(f), twin), twin), w)

    merge_w = module.merge.weight.data.copy()
    return [
        ("refine.mask", cfg, via_m, m),
        ("refine.features", cfg, via_f, f),
        ("refine.merge_weight", cfg, via_merge, merge_w),
    ]


def _stack_case(rng: np.random.Generator, stages: int = 3):
    """Full stack: gradient w.r.t. M1 and the deepest and shallowest features."""
    k = int(rng.choice([4, 8]))
    variant = str(rng.choice(["constant", "halving"]))
    schedule = make_schedule(k, variant, stages)
    n = int(rng.integers(1, 3))
    side = int(rng.choice([1, 2]))
    feat_ch = [int(v) for v in rng.integers(1, 4, size=stages)]
    modules = build_stack(rng, schedule, feat_ch)
    for mod in modules:
        _randomize(mod.params(), rng)
    m1 = rng.normal(size=(n, schedule.k_m[0], side, side))
    feats = [rng.normal(size=(n, ch, side * 2 ** i, side * 2 ** i)) for i, ch in enumerate(feat_ch)]
    w = _probe(rng, (n, 1, side * 2 ** stages, side * 2 ** stages))
    cfg = f"{variant} k={k} side={side} feature_channels={feat_ch}"

    def with_feature(i):
        def f(t):
            fs = [Tensor(v) for v in feats]
            fs[i] = t
            return _weighted_sum(stack_logits(Tensor(m1), fs, modules), w)
        return f

    return [
        ("stack.m1", cfg, lambda t: _weighted_sum(stack_logits(t, [Tensor(v) for v in feats], modules), w), m1),
        ("stack.feature0", cfg, with_feature(0), feats[0]),
        (f"stack.feature{stages - 1}", cfg, with_feature(stages - 1), feats[-1]),
    ]


def gradcheck_suite(configs: int = 20, seed: int = 0, h: float = 1e-5) -> list[GradResult]:
    rng = np.random.default_rng(seed)
    results = []
    for _ in range(configs):
        cases = _cases(rng) + _module_case(rng) + _stack_case(rng)
        for op, cfg, fn, x in cases:
            results.append(GradResult(op, cfg, E.grad_check(fn, x, h)))
    return results


def summarize_gradcheck(results: Sequence[GradResult]) -> dict[str, dict]:
    out: dict[str, dict] = {}
    for r in results:
        entry = out.setdefault(r.op, {"configs": 0, "max_error": 0.0})
        entry["configs"] += 1
        entry["max_error"] = max(entry["max_error"], r.error)
    return out


# ---------------------------------------------------------------- equivalence


@dataclass
class EquivResult:
    trials: int
    max_forward: float
    max_grad: float


def _grads(out: Tensor, w: Tensor, leaves: Sequence[Tensor]) -> list[np.ndarray]:
    for t in leaves:
        t.zero_grad()
    E.backward(_weighted_sum(out, w))
    return [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in leaves]


def equivalence_trials(trials: int = 100, seed: int = 0) -> EquivResult:
    """Merged-conv stage vs. its split twin on random parameters and inputs.

    Compares outputs and gradients w.r.t. mask encoding, features, skip
    convs and (re-assembled) merge kernel and bias.
    """
    rng = np.random.default_rng(seed)
    worst_f = worst_g = 0.0
    for _ in range(trials):
        k_m, k_s, k_f = (int(v) for v in rng.integers(1, 9, size=3))
        side = int(rng.choice([2, 4, 8]))
        n = int(rng.integers(1, 4))
        last = bool(rng.integers(0, 2))
        module = RefinementModule.init(rng, 1, k_f, k_m, k_s, 1 if last else int(rng.integers(1, 9)), last=last, skip_hidden=8)
        _randomize(module.params(), rng)
        twin = split_merge(module)
        m = Tensor(rng.normal(size=(n, k_m, side, side)), requires_grad=True)
        f = Tensor(rng.normal(size=(n, k_f, side, side)), requires_grad=True)
        w = _probe(rng, (n, module.k_out, 2 * side, 2 * side))

        out_a = refine(m, make_skip(f, module), module)
        leaves_a = [m, f, *(module.skip_a.weight, module.skip_b.weight, module.merge.weight, module.merge.bias)]
        grads_a = _grads(out_a, w, leaves_a)

        m2 = Tensor(m.data.copy(), requires_grad=True)
        f2 = Tensor(f.data.copy(), requires_grad=True)
        out_b = refine_refactored(m2, make_skip(f2, twin), twin)
        leaves_b = [m2, f2, twin.skip_a.weight, twin.skip_b.weight, twin.mask_conv.weight, twin.skip_merge.weight,
                    twin.mask_conv.bias, twin.skip_merge.bias]
        gb = _grads(out_b, w, leaves_b)
        grads_b = gb[:4] + [np.concatenate([gb[4], gb[5]], axis=1), gb[6]]
        worst_f = max(worst_f, float(np.max(np.abs(out_a.data - out_b.data))))
        for ga, gbb in zip(grads_a, grads_b):
            worst_g = max(worst_g, float(np.max(np.abs(ga - gbb))))
        # the skip-path bias of the twin must see the same gradient as the merged bias
        worst_g = max(worst_g, float(np.max(np.abs(gb[7] - grads_a[-1]))))
    return EquivResult(trials, worst_f, worst_g)


# ---------------------------------------------------------------- benchmarks


@dataclass
class HeadBench:
    variant: str
    params: int
    seconds: float


def bench_heads(
    variants: Sequence[str] = ("A", "B", "C"),
    trunk: TrunkConfig | None = None,
    batch: int = 256,
    repeats: int = 15,
    seed: int = 0,
) -> list[HeadBench]:
    """Head parameter count and forward time (best of ``repeats``) on a fixed trunk output.

    Variants are timed interleaved so slow drifts in machine load hit all of them alike.
    """
    trunk = trunk or TrunkConfig()
    models = {v: Model(ModelConfig(trunk=trunk, head=HeadConfig(v), seed=seed)) for v in variants}
    rng = np.random.default_rng(seed)
    feats = Tensor(np.abs(rng.normal(size=(batch, trunk.F, trunk.final_side, trunk.final_side))))
    best = {v: np.inf for v in variants}
    with E.no_grad():
        for v in variants:
            models[v].head(feats)
        for _ in range(repeats):
            for v in variants:
                t0 = time.perf_counter()
                models[v].head(feats)
                best[v] = min(best[v], time.perf_counter() - t0)
    return [HeadBench(v, models[v].param_count("head"), best[v]) for v in variants]
