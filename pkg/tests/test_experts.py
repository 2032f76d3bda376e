import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from luve.backbone import DiffusionSchedule, DiT, DiTConfig, TokenGrid, sample, tokenize
from luve.errors import ConfigError, ContractError
from luve.experts import (
    HFE,
    LFE,
    T_SWITCH,
    DualExperts,
    ExpertHooks,
    ExpertRouterConfig,
    ExpertTrainConfig,
    FrequencyFilter,
    LoRAAdapter,
    band_mask,
    hfe_ffn,
    high_pass,
    interval_sampler,
    lfe_attention,
    low_pass,
    route,
    train_expert,
)
from luve.numerics import Tensor, XorShiftRNG, backward, param_finite_diff_check
from luve.numerics import tensor as T


def grid_of(frames, rows, cols, d=4):
    return TokenGrid(frames, rows, cols, 2, d)


def field(grid, rng, d=4):
    return rng.normal((grid.count, d))


def naive_low_pass(x2d, cutoff):
    """Band-limit one ``h x w`` field using an explicit double-sum DFT and its inverse."""
    h, w = x2d.shape
    ky = np.array([k if k <= h // 2 else k - h for k in range(h)])
    kx = np.array([k if k <= w // 2 else k - w for k in range(w)])
    yy, xx = np.mgrid[0:h, 0:w]
    out = np.zeros((h, w), dtype=complex)
    for u in range(h):
        for v in range(w):
            ry = abs(ky[u]) / (h // 2) if h > 1 else 0.0
            rx = abs(kx[v]) / (w // 2) if w > 1 else 0.0
            if max(ry, rx) > cutoff:
                continue
            coeff = np.sum(x2d * np.exp(-2j * np.pi * (u * yy / h + v * xx / w)))
            out += coeff * np.exp(2j * np.pi * (u * yy / h + v * xx / w)) / (h * w)
    return out.real


def checkerboard(grid, d=1):
    r, c = np.mgrid[0:grid.rows, 0:grid.cols]
    board = ((-1.0) ** (r + c))[None, :, :, None]
    return np.broadcast_to(board, (grid.frames, grid.rows, grid.cols, d)).reshape(grid.count, d).copy()


class TestFilters:
    def test_constant_field_passes_low(self):
        g = grid_of(2, 4, 6)
        x = np.full((g.count, 4), 3.25)
        for cutoff in (0.1, 0.25, 1.0):
            assert np.allclose(low_pass(x, g, cutoff), x, atol=1e-12)
            assert np.abs(high_pass(x, g, cutoff)).max() < 1e-12

    def test_full_band_identity(self, rng):
        g = grid_of(2, 8, 8)
        x = field(g, rng)
        assert np.abs(low_pass(x, g, 1.0) - x).max() < 1e-5

    def test_checkerboard_is_nyquist(self):
        g = grid_of(1, 8, 8)
        x = checkerboard(g)
        assert np.abs(low_pass(x, g, 0.25)).max() < 1e-5
        assert np.abs(high_pass(x, g, 0.25) - x).max() < 1e-5

    def test_matches_naive_dft_oracle(self, rng):
        g = grid_of(2, 6, 8, d=3)
        x = field(g, rng, 3)
        out = low_pass(x, g, 0.5).reshape(2, 6, 8, 3)
        xs = x.reshape(2, 6, 8, 3)
        for f in range(2):
            for c in range(3):
                assert np.allclose(out[f, :, :, c], naive_low_pass(xs[f, :, :, c], 0.5), atol=1e-10)

    def test_frames_filtered_independently(self, rng):
        g = grid_of(3, 4, 4)
        x = field(g, rng)
        per = 16
        single = grid_of(1, 4, 4)
        full = low_pass(x, g, 0.5)
        for f in range(3):
            assert np.allclose(full[f * per:(f + 1) * per], low_pass(x[f * per:(f + 1) * per], single, 0.5))

    @given(st.integers(1, 3), st.integers(1, 8), st.integers(1, 8), st.sampled_from([0.1, 0.25, 0.5, 1.0]),
           st.integers(0, 2**31))
    @settings(max_examples=40, deadline=None)
    def test_idempotent(self, frames, rows, cols, cutoff, seed):
        g = grid_of(frames, rows, cols)
        x = XorShiftRNG(seed).normal((g.count, 4))
        once = low_pass(x, g, cutoff)
        assert np.abs(low_pass(once, g, cutoff) - once).max() < 1e-5

    @given(st.integers(1, 3), st.integers(1, 8), st.integers(1, 8), st.sampled_from([0.25, 0.5]),
           st.integers(0, 2**31))
    @settings(max_examples=40, deadline=None)
    def test_high_is_identity_minus_low_bit_exact(self, frames, rows, cols, cutoff, seed):
        g = grid_of(frames, rows, cols)
        x = XorShiftRNG(seed).normal((g.count, 4))
        assert np.array_equal(high_pass(x, g, cutoff), x - low_pass(x, g, cutoff))

    def test_complementarity_within_one_ulp(self, rng):
        g = grid_of(2, 8, 8)
        for _ in range(20):
            x = field(g, rng)
            s = low_pass(x, g) + high_pass(x, g)
            assert np.all(np.abs(s - x) <= np.spacing(np.maximum(np.abs(x), np.abs(low_pass(x, g)))))

    def test_missing_grid(self, rng):
        with pytest.raises(ContractError):
            low_pass(rng.normal((8, 4)), None)
        with pytest.raises(ContractError):
            low_pass(rng.normal((7, 4)), grid_of(1, 2, 4))

    def test_filter_config(self):
        with pytest.raises(ConfigError):
            FrequencyFilter("band")
        with pytest.raises(ConfigError):
            FrequencyFilter("low", 0.0)
        assert FrequencyFilter("high", 0.5).cutoff == 0.5

    def test_mask_shape_and_dc(self):
        m = band_mask(8, 8, 0.25)
        assert m[0, 0] and m.sum() == 9  # |f| <= 1 on each axis

    def test_dtype_preserved(self, rng):
        g = grid_of(1, 4, 4)
        x = field(g, rng).astype(np.float32)
        assert low_pass(x, g).dtype == np.float32

    def test_tensor_gradient_is_self_adjoint(self, rng):
        g = grid_of(2, 4, 4)
        x = Tensor(field(g, rng), requires_grad=True)
        w = field(g, rng)
        backward(T.tsum(low_pass(x, g, 0.5) * Tensor(w)))
        assert np.allclose(x.grad, low_pass(w, g, 0.5), atol=1e-12)


class TestLoRA:
    def test_zero_init(self, rng):
        a = LoRAAdapter(16, rank=4, rng=rng, dtype=np.float64)
        assert not a.up.data.any() and a.down.shape == (4, 16) and a.up.shape == (16, 4)
        assert not a(Tensor(rng.normal((5, 16)))).data.any()

    def test_formula(self, rng):
        a = LoRAAdapter(6, rank=2, alpha=3.0, rng=rng, dtype=np.float64)
        a.up.data = rng.normal((6, 2))
        x = rng.normal((4, 6))
        assert np.allclose(a(Tensor(x)).data, 3.0 * x @ a.down.data.T @ a.up.data.T)

    @pytest.mark.parametrize("kw", [{"rank": 0}, {"rank": 17}, {"site": "conv"}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            LoRAAdapter(16, **kw)


@pytest.fixture
def host():
    model = DiT(DiTConfig(width=16, depth=2, heads=2, ffn_mult=2, time_dim=16, dtype="float64",
                          zero_init_output=False))
    for p in model.parameters():
        if not p.data.any():
            p.data = XorShiftRNG(9).normal(p.shape) * 0.1
    return model


class TestExpertBranches:
    def _input(self, rng):
        _, grid = tokenize(np.zeros((2, 4, 4, 16)), 2)
        return Tensor(rng.normal((grid.count, 16))), grid

    def test_zero_b_bit_identical(self, host, rng):
        x, grid = self._input(rng)
        block = host.blocks[0]
        lora_a = LoRAAdapter(16, site="attention", rng=rng, dtype=np.float64)
        lora_f = LoRAAdapter(16, site="ffn", rng=rng, dtype=np.float64)
        assert np.array_equal(lfe_attention(block, x, lora_a, grid).data, block.attn(x).data)
        assert np.array_equal(hfe_ffn(block, x, lora_f, grid).data, block.ffn(x).data)

    def test_constant_input_reaches_lfe_unchanged(self, host, rng):
        _, grid = self._input(rng)
        x = Tensor(np.tile(rng.normal(16), (grid.count, 1)))
        lora = LoRAAdapter(16, site="attention", rng=rng, dtype=np.float64)
        lora.up.data = rng.normal((16, 4))
        out = lfe_attention(host.blocks[0], x, lora, grid)
        assert np.allclose(out.data, host.blocks[0].attn(x).data + lora(x).data, atol=1e-12)

    def test_constant_input_silences_hfe(self, host, rng):
        _, grid = self._input(rng)
        x = Tensor(np.tile(rng.normal(16), (grid.count, 1)))
        lora = LoRAAdapter(16, site="ffn", rng=rng, dtype=np.float64)
        lora.up.data = rng.normal((16, 4))
        out = hfe_ffn(host.blocks[0], x, lora, grid)
        assert np.allclose(out.data, host.blocks[0].ffn(x).data, atol=1e-10)

    def test_wrong_site(self, host, rng):
        x, grid = self._input(rng)
        with pytest.raises(ContractError):
            lfe_attention(host.blocks[0], x, LoRAAdapter(16, site="ffn"), grid)
        with pytest.raises(ContractError):
            hfe_ffn(host.blocks[0], x, LoRAAdapter(16, site="attention"), grid)

    @pytest.mark.parametrize("kind", [LFE, HFE])
    def test_adapter_gradients(self, host, rng, kind):
        x, grid = self._input(rng)
        site = "attention" if kind == LFE else "ffn"
        lora = LoRAAdapter(16, site=site, rng=rng, dtype=np.float64)
        lora.up.data = rng.normal((16, 4)) * 0.3
        branch = lfe_attention if kind == LFE else hfe_ffn
        w = Tensor(rng.normal((grid.count, 16)))
        loss = lambda: T.tsum(branch(host.blocks[0], x, lora, grid) * w)
        assert param_finite_diff_check(loss, lora.down) < 1e-4
        assert param_finite_diff_check(loss, lora.up) < 1e-4

    def test_host_gradient_is_exactly_zero(self, host, rng):
        z0, eps = rng.normal((2, 4, 4, 16)), rng.normal((2, 4, 4, 16))
        experts = DualExperts(16, 2, dtype=np.float64)
        for a in experts.lfe + experts.hfe:
            a.up.data = rng.normal(a.up.shape) * 0.1
        host.freeze()
        for kind, t in ((LFE, 0.8), (HFE, 0.2)):
            hooks = ExpertHooks(experts, force=kind)
            from luve.backbone import fm_train_step
            for p in experts.parameters():
                p.grad = None
            backward(fm_train_step(host, z0, eps, t, 0, hooks))
            assert all(p.grad is None or not p.grad.any() for p in host.parameters())
            trained = experts.parameters_of(kind)
            assert all(p.grad is not None and np.all(np.isfinite(p.grad)) for p in trained)
            assert any(np.abs(p.grad).max() > 0 for p in trained)


class TestRouting:
    @pytest.mark.parametrize("t, expected", [(1.0, LFE), (0.0, HFE), (0.417, LFE), (0.4169999, HFE)])
    def test_examples(self, t, expected):
        assert route(t) == frozenset({expected})

    @given(st.floats(0, 1))
    def test_exactly_one(self, t):
        assert len(route(t)) == 1

    @pytest.mark.parametrize("value", [0.0, 1.0, -0.1])
    def test_invalid_switch(self, value):
        with pytest.raises(ConfigError):
            ExpertRouterConfig(value)

    def test_default_switch(self):
        assert ExpertRouterConfig().t_switch == T_SWITCH == 0.417

    def test_schedule_counts(self):
        ts = DiffusionSchedule(50).timesteps[:-1]
        lfe = sum(LFE in route(float(t)) for t in ts)
        assert (lfe, 50 - lfe) == (30, 20)


class TestIntervalTraining:
    def test_lfe_sampler_never_below_switch(self):
        draws = interval_sampler(LFE, T_SWITCH)(XorShiftRNG(0), 10_000)
        assert draws.min() >= T_SWITCH and draws.max() <= 1.0

    def test_hfe_sampler_below_switch(self):
        draws = interval_sampler(HFE, T_SWITCH)(XorShiftRNG(0), 10_000)
        assert draws.min() >= 0.0 and draws.max() < T_SWITCH

    @pytest.mark.parametrize("t_switch", [0.0, 1.0])
    def test_empty_interval(self, t_switch):
        with pytest.raises(ConfigError):
            interval_sampler(LFE, t_switch)

    @pytest.fixture
    def small_backbone(self):
        return DiT(DiTConfig(width=16, depth=2, heads=2, ffn_mult=2, time_dim=16, zero_init_output=False))

    def test_zero_iterations_leave_adapters_zero(self, small_backbone, lmg_data):
        experts = DualExperts(16, 2)
        train_expert(LFE, small_backbone, experts, lmg_data, ExpertTrainConfig(iterations=0))
        assert experts.is_zero()
        hooks = ExpertHooks(experts)
        a = sample(small_backbone, DiffusionSchedule(6), 1, 0, (4, 4, 4, 16), hooks=hooks)
        b = sample(small_backbone, DiffusionSchedule(6), 1, 0, (4, 4, 4, 16))
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("kind", [LFE, HFE])
    def test_only_chosen_expert_changes(self, small_backbone, lmg_data, kind):
        experts = DualExperts(16, 2)
        host_before = small_backbone.state_dict()
        result = train_expert(kind, small_backbone, experts, lmg_data,
                              ExpertTrainConfig(iterations=40, lr=1e-2, batch=2))
        other = HFE if kind == LFE else LFE
        assert all(not a.up.data.any() for a in experts.adapters(other))
        assert any(a.up.data.any() for a in experts.adapters(kind))
        for k, v in small_backbone.state_dict().items():
            assert np.array_equal(v, host_before[k])
        assert result.heldout_after < result.heldout_before
