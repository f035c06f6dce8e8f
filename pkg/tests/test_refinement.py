import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import maskrefine.engine as E
from maskrefine.engine import Tensor
from maskrefine.layers import Conv
from maskrefine.refinement import (
    ChannelSchedule,
    RefinementModule,
    Refiner,
    ablation_no_horizontal,
    ablation_skip_only,
    build_stack,
    fuse_merge,
    make_schedule,
    make_skip,
    no_horizontal_logits,
    refine,
    refine_refactored,
    split_merge,
    stack_logits,
    stack_params,
    stack_refine,
)
from oracles import conv_oracle


def _module(rng, k_f=3, k_m=4, k_s=2, k_out=5, last=False, hidden=6):
    return RefinementModule.init(rng, 1, k_f, k_m, k_s, k_out, last=last, skip_hidden=hidden)


def _zero_biases(module):
    for conv in (module.skip_a, module.skip_b, module.merge):
        conv.bias.data[:] = 0.0


def _stack(rng, k=8, n=3, f_channels=(6, 5, 4), variant="full", schedule="halving"):
    sched = make_schedule(1 if variant == "skip_only" else k, "constant" if variant == "skip_only" else schedule, n)
    return sched, build_stack(rng, sched, list(f_channels[:n]), variant=variant)


def _features(rng, side, channels, batch=2):
    return [Tensor(rng.normal(size=(batch, c, side * 2 ** i, side * 2 ** i))) for i, c in enumerate(channels)]


class TestSchedule:
    def test_halving(self):
        assert make_schedule(32, "halving", 4).k_m == [32, 16, 8, 4]

    def test_constant(self):
        s = make_schedule(8, "constant", 3)
        assert s.k_m == [8, 8, 8] and s.k_s == [8, 8, 8]

    def test_halving_divisibility(self):
        with pytest.raises(ValueError):
            make_schedule(4, "halving", 4)

    def test_empty(self):
        assert make_schedule(16, "halving", 0).n == 0

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            make_schedule(8, "doubling", 2)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            ChannelSchedule([4, 2], [4])

    @given(e=st.integers(0, 6), n=st.integers(1, 5))
    def test_halving_exact(self, e, n):
        k = 2 ** (n - 1) * (e + 1)
        s = make_schedule(k, "halving", n)
        assert all(s.k_m[i] * 2 ** i == k for i in range(n))
        assert s.k_m == s.k_s


class TestMakeSkip:
    def test_zero_in_zero_out(self, rng):
        m = _module(rng)
        _zero_biases(m)
        s = make_skip(Tensor(np.zeros((1, 3, 5, 5))), m)
        assert s.shape == (1, 2, 5, 5)
        assert not s.data.any()

    @pytest.mark.parametrize("h,w", [(3, 3), (4, 7), (9, 5)])
    def test_shape_preserved(self, rng, h, w):
        assert make_skip(Tensor(rng.normal(size=(2, 3, h, w))), _module(rng)).shape == (2, 2, h, w)

    def test_matches_conv_oracle(self, rng):
        m = _module(rng)
        x = rng.normal(size=(2, 3, 5, 6))
        hidden = np.maximum(conv_oracle(x, m.skip_a.weight.data, m.skip_a.bias.data, 1, 1, "reflective"), 0)
        expected = np.maximum(conv_oracle(hidden, m.skip_b.weight.data, m.skip_b.bias.data, 1, 1, "reflective"), 0)
        np.testing.assert_allclose(make_skip(Tensor(x), m).data, expected, rtol=0, atol=1e-12)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ValueError):
            make_skip(Tensor(np.zeros((1, 4, 5, 5))), _module(rng))


class TestRefine:
    def test_doubles_resolution(self, rng):
        m = _module(rng, k_m=4)
        out = refine(Tensor(rng.normal(size=(1, 4, 10, 10))), Tensor(rng.normal(size=(1, 2, 10, 10))), m)
        assert out.shape == (1, 5, 20, 20)

    def test_zero_in_zero_out(self, rng):
        m = _module(rng)
        _zero_biases(m)
        out = refine(Tensor(np.zeros((1, 4, 4, 4))), Tensor(np.zeros((1, 2, 4, 4))), m)
        assert not out.data.any()

    def test_spatial_mismatch(self, rng):
        with pytest.raises(ValueError):
            refine(Tensor(np.zeros((1, 4, 4, 4))), Tensor(np.zeros((1, 2, 5, 5))), _module(rng))

    def test_non_last_is_nonnegative(self, rng):
        out = refine(Tensor(rng.normal(size=(1, 4, 4, 4))), Tensor(rng.normal(size=(1, 2, 4, 4))), _module(rng))
        assert (out.data >= 0).all()

    def test_last_emits_signed_logits(self, rng):
        m = _module(rng, k_out=1, last=True)
        out = refine(Tensor(rng.normal(size=(2, 4, 6, 6))), Tensor(rng.normal(size=(2, 2, 6, 6))), m)
        assert (out.data < 0).any() and (out.data > 0).any()


class TestRefactored:
    @pytest.mark.parametrize("last", [False, True])
    def test_equivalence(self, rng, last):
        m = _module(rng, last=last)
        r = split_merge(m)
        mask, skip = rng.normal(size=(2, 4, 5, 5)), rng.normal(size=(2, 2, 5, 5))
        a = refine(Tensor(mask), Tensor(skip), m).data
        b = refine_refactored(Tensor(mask), Tensor(skip), r).data
        assert np.abs(a - b).max() <= 1e-9

    def test_gradient_equivalence(self, rng):
        m = _module(rng)
        r = split_merge(m)
        mask0, skip0 = rng.normal(size=(1, 4, 4, 4)), rng.normal(size=(1, 2, 4, 4))
        probe = Tensor(rng.normal(size=(1, 5, 8, 8)))
        grads = []
        for fn, mod in ((refine, m), (refine_refactored, r)):
            mask, skip = Tensor(mask0, True), Tensor(skip0, True)
            E.backward(E.tsum(E.mul(fn(mask, skip, mod), probe)))
            grads.append((mask.grad, skip.grad))
        assert np.abs(grads[0][0] - grads[1][0]).max() <= 1e-8
        assert np.abs(grads[0][1] - grads[1][1]).max() <= 1e-8

    def test_split_kernel_layout(self, rng):
        m = _module(rng, k_m=4, k_s=2)
        r = split_merge(m)
        np.testing.assert_array_equal(np.concatenate([r.mask_conv.weight.data, r.skip_merge.weight.data], 1),
                                      m.merge.weight.data)

    def test_round_trip(self, rng):
        m = _module(rng)
        back = fuse_merge(split_merge(m))
        np.testing.assert_array_equal(back.merge.weight.data, m.merge.weight.data)
        np.testing.assert_array_equal(back.merge.bias.data, m.merge.bias.data)
        assert back.k_m == m.k_m

    def test_zero_skip_depends_only_on_mask(self, rng):
        r = split_merge(_module(rng))
        mask = Tensor(rng.normal(size=(1, 4, 4, 4)))
        zero = Tensor(np.zeros((1, 2, 4, 4)))
        direct = E.bilinear_up2(E.relu(E.add(r.mask_conv(mask), r.skip_merge(zero))))
        np.testing.assert_array_equal(refine_refactored(mask, zero, r).data, direct.data)
        r.skip_merge.weight.data[:] = 0.0
        other = Tensor(rng.normal(size=(1, 2, 4, 4)))
        np.testing.assert_allclose(refine_refactored(mask, other, r).data, refine_refactored(mask, zero, r).data)

    def test_zero_mask_branch_depends_only_on_skip(self, rng):
        r = split_merge(_module(rng))
        r.mask_conv.weight.data[:] = 0.0
        skip = Tensor(rng.normal(size=(1, 2, 4, 4)))
        a = refine_refactored(Tensor(rng.normal(size=(1, 4, 4, 4))), skip, r).data
        b = refine_refactored(Tensor(rng.normal(size=(1, 4, 4, 4))), skip, r).data
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-14)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2 ** 31 - 1), k_m=st.integers(1, 4), k_s=st.integers(1, 4), side=st.integers(2, 6))
    def test_equivalence_property(self, seed, k_m, k_s, side):
        r = np.random.default_rng(seed)
        m = _module(r, k_f=2, k_m=k_m, k_s=k_s, k_out=3, hidden=3)
        mask, skip = Tensor(r.normal(size=(1, k_m, side, side))), Tensor(r.normal(size=(1, k_s, side, side)))
        assert np.abs(refine(mask, skip, m).data - refine_refactored(mask, skip, split_merge(m)).data).max() <= 1e-9


class TestStack:
    @pytest.mark.parametrize("side,n", [(8, 3), (10, 4), (4, 1)])
    def test_resolution_recursion(self, rng, side, n):
        sched, modules = _stack(rng, k=8, n=n, f_channels=(3, 3, 3, 3))
        feats = _features(rng, side, [3] * n)
        m = Tensor(rng.normal(size=(2, 8, side, side)))
        for i, (f, module) in enumerate(zip(feats, modules)):
            m = refine(m, make_skip(f, module), module)
            assert m.shape[-1] == side * 2 ** (i + 1)
        out = stack_refine(Tensor(rng.normal(size=(2, 8, side, side))), feats, modules)
        assert out.shape == (2, 1, side * 2 ** n, side * 2 ** n)
        assert ((out.data > 0) & (out.data < 1)).all()

    def test_empty_stack_is_sigmoid(self, rng):
        m1 = Tensor(rng.normal(size=(1, 1, 4, 4)))
        np.testing.assert_array_equal(stack_refine(m1, [], []).data, E.sigmoid(m1).data)

    def test_wrong_feature_order(self, rng):
        _, modules = _stack(rng, k=8, n=3, f_channels=(3, 3, 3))
        feats = _features(rng, 4, [3, 3, 3])[::-1]
        with pytest.raises(ValueError):
            stack_logits(Tensor(np.zeros((2, 8, 4, 4))), feats, modules)

    def test_feature_count(self, rng):
        _, modules = _stack(rng, k=8, n=3, f_channels=(3, 3, 3))
        with pytest.raises(ValueError):
            stack_logits(Tensor(np.zeros((2, 8, 4, 4))), _features(rng, 4, [3, 3]), modules)

    def test_build_rejects_channel_count(self, rng):
        with pytest.raises(ValueError):
            build_stack(rng, make_schedule(8, "halving", 3), [3, 3])

    def test_channel_bookkeeping(self, rng):
        sched, modules = _stack(rng, k=16, n=3, f_channels=(5, 4, 3))
        for i, m in enumerate(modules):
            assert m.merge.in_channels == sched.k_m[i] + sched.k_s[i]
            assert m.k_f == (5, 4, 3)[i]
        assert modules[-1].k_out == 1 and modules[-1].last
        assert not any(m.last for m in modules[:-1])

    def test_bad_merge_width_rejected(self, rng):
        with pytest.raises(ValueError):
            RefinementModule(1, Conv.init(rng, 3, 4), Conv.init(rng, 4, 2), Conv.init(rng, 5, 3), k_m=4)

    def test_parameter_independence(self, rng):
        _, modules = _stack(rng, k=8, n=3, f_channels=(3, 3, 3))
        params = stack_params(modules)
        assert len(params) == 3 * 6
        assert len({id(p) for p in params.values()}) == len(params)
        assert len({id(p.data) for p in params.values()}) == len(params)
        assert set(params) >= {"refine.1.merge.weight", "refine.3.skip_a.bias"}

    def test_stage_gradients_are_separate(self, rng):
        _, modules = _stack(rng, k=8, n=3, f_channels=(3, 3, 3))
        feats = _features(rng, 2, [3, 3, 3], batch=1)
        E.backward(E.tsum(stack_logits(Tensor(rng.normal(size=(1, 8, 2, 2))), feats, modules)))
        for m in modules:
            assert m.merge.weight.grad is not None and m.merge.weight.grad.shape == m.merge.weight.shape

    def test_full_stack_gradcheck(self, rng):
        _, modules = _stack(rng, k=4, n=3, f_channels=(2, 2, 2))
        feats = _features(rng, 2, [2, 2, 2], batch=1)
        assert E.grad_check(lambda m: E.tsum(stack_logits(m, feats, modules)), rng.normal(size=(1, 4, 2, 2))) <= 1e-4


class TestAblations:
    def test_no_horizontal_is_zeroed_skip(self, rng):
        _, modules = _stack(rng, k=8, n=3, f_channels=(3, 3, 3))
        feats = _features(rng, 2, [3, 3, 3])
        m1 = Tensor(rng.normal(size=(2, 8, 2, 2)))
        m = m1
        for f, module in zip(feats, modules):
            n, _, h, w = f.shape
            m = refine(m, Tensor(np.zeros((n, module.k_s, h, w))), module)
        np.testing.assert_array_equal(no_horizontal_logits(m1, feats, modules).data, m.data)

    def test_no_horizontal_ignores_features(self, rng):
        _, modules = _stack(rng, k=8, n=3, f_channels=(3, 3, 3))
        m1 = Tensor(rng.normal(size=(1, 8, 2, 2)))
        a = ablation_no_horizontal(m1, _features(rng, 2, [3, 3, 3], 1), modules).data
        b = ablation_no_horizontal(m1, _features(rng, 2, [3, 3, 3], 1), modules).data
        np.testing.assert_array_equal(a, b)

    def test_skip_only_uniform(self, rng):
        _, modules = _stack(rng, n=3, f_channels=(3, 3, 3), variant="skip_only")
        feats = [Tensor(np.full((1, 3, 2 * 2 ** i, 2 * 2 ** i), 0.3)) for i in range(3)]
        # uniform features leave reflective-padded convs uniform everywhere
        out = ablation_skip_only(Tensor(np.full((1, 1, 2, 2), -0.2)), feats, modules).data
        np.testing.assert_allclose(out, out.flat[0], rtol=0, atol=1e-13)

    def test_skip_only_has_no_mask_conv(self, rng):
        _, modules = _stack(rng, n=3, f_channels=(3, 3, 3), variant="skip_only")
        assert all(m.mask_conv is None and m.skip_merge.out_channels == 1 for m in modules)

    def test_skip_only_requires_single_channel(self, rng):
        _, modules = _stack(rng, n=2, f_channels=(3, 3), variant="skip_only")
        with pytest.raises(ValueError):
            ablation_skip_only(Tensor(np.zeros((1, 2, 2, 2))), _features(rng, 2, [3, 3], 1), modules)

    @pytest.mark.parametrize("variant", ["full", "no_horizontal", "skip_only"])
    def test_output_size(self, rng, variant):
        sched, modules = _stack(rng, k=8, n=3, f_channels=(3, 3, 3), variant=variant)
        refiner = Refiner(modules, variant, sched)
        k = 1 if variant == "skip_only" else 8
        out = refiner(Tensor(rng.normal(size=(2, k, 4, 4))), _features(rng, 4, [3, 3, 3]))
        assert out.shape == (2, 1, 32, 32)

    def test_unknown_variant(self, rng):
        _, modules = _stack(rng, k=8, n=1, f_channels=(3,))
        with pytest.raises(ValueError):
            Refiner(modules, "mystery").logits(Tensor(np.zeros((1, 8, 2, 2))), _features(rng, 2, [3], 1))
