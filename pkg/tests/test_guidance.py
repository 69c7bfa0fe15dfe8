import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from glyphdiff.glyphs import synth_script
from glyphdiff.guidance import (GuidanceParams, GuidanceSession, cfg_combine,
                                dynamic_ndg, guided_eps, ndcfg_combine)
from glyphdiff.model import GlyphDenoiser, ModelConfig
from glyphdiff.raster import GlyphLayout, TextLine, empty_condition, rasterize


def test_cfg_combine_examples():
    a = np.full((3, 3), 0.5)
    b = np.full((3, 3), 2.0)
    assert np.array_equal(cfg_combine(a, b, 0.0), a)
    assert np.allclose(cfg_combine(a, b, 1.0), b)
    assert np.allclose(cfg_combine(a, b, 7.5), 0.5 + 7.5 * 1.5)
    with pytest.raises(ValueError):
        cfg_combine(a, np.zeros((2, 2)), 1.0)


def test_ndcfg_combine_examples():
    v = np.full((2, 2), 1.3)
    assert np.allclose(ndcfg_combine(v, v, v, 7.5, 5.0), v)
    a = np.full((2, 2), 1.0)
    b = np.full((2, 2), 0.5)
    c = np.full((2, 2), 2.0)
    assert np.allclose(ndcfg_combine(a, b, c, 3.0, 2.0), 1.0 + 2 * 0.5 + 3 * 1.0)
    with pytest.raises(ValueError):
        ndcfg_combine(a, b, np.zeros((3, 3)), 1.0, 1.0)


def test_ndcfg_zero_ndg_reduces_to_cfg_exactly():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a, b, c = rng.standard_normal((3, 4, 4))
        out = ndcfg_combine(a, b, c, 7.5, 0.0)
        ref = cfg_combine(a, c, 7.5)
        assert np.abs(out - ref).max() < 1e-6


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.0, 10.0), st.floats(0.0, 10.0),
       st.floats(-4.0, 4.0))
def test_ndcfg_affine_in_each_argument(seed, w_cfg, w_ndg, scale):
    """Linearity: scaling any eps argument scales its contribution linearly."""
    rng = np.random.default_rng(seed)
    a, b, c, da, db, dc = rng.standard_normal((6, 8))
    base = ndcfg_combine(a, b, c, w_cfg, w_ndg)
    # affine: f(a + s*da) - f(a) is linear in s
    for args, delta in (((da, 0, 0), da), ((0, db, 0), db), ((0, 0, dc), dc)):
        f1 = ndcfg_combine(a + scale * args[0], b + scale * args[1],
                           c + scale * args[2], w_cfg, w_ndg)
        f2 = ndcfg_combine(a + 2 * scale * args[0], b + 2 * scale * args[1],
                           c + 2 * scale * args[2], w_cfg, w_ndg)
        assert np.abs((f2 - f1) - (f1 - base)).max() < 1e-8 * (1 + np.abs(f1).max())


def test_dynamic_ndg_boundaries_and_monotonicity():
    p = GuidanceParams(omega_cfg=7.5, omega_ndg=5.0, A=3.0, alpha2=3.0, T=200)
    assert dynamic_ndg(200, p) == 5.0
    assert dynamic_ndg(0, p) == 8.0
    assert dynamic_ndg(100, p) == 7.625
    grid = [dynamic_ndg(t, p) for t in np.linspace(0, 200, 1000)]
    assert all(a >= b - 1e-12 for a, b in zip(grid, grid[1:]))  # non-increasing in t
    with pytest.raises(ValueError):
        dynamic_ndg(-1, p)
    with pytest.raises(ValueError):
        dynamic_ndg(201, p)


def test_guidance_params_validation():
    with pytest.raises(ValueError):
        GuidanceParams(omega_cfg=-1)
    with pytest.raises(ValueError):
        GuidanceParams(alpha2=0.0)


@pytest.fixture(scope="module")
def tiny():
    torch.manual_seed(0)
    model = GlyphDenoiser(ModelConfig(widths=(8, 16, 32), d_text=16, d_time=16, d_cond=32))
    model.eval()
    script = synth_script(3, 4, (1, 2))
    layout = GlyphLayout(lines=[TextLine(script.alphabet[:2], (2, 6, 16, 8), 8)])
    cond = rasterize(layout, script, 24, 24)
    return model, cond


def test_session_three_calls_and_cached_null(tiny):
    model, cond = tiny
    p = GuidanceParams(T=50)
    session = GuidanceSession(model, p, ["x"], [cond], ndg=True)
    z = torch.randn(1, 3, 24, 24)
    model.eps_calls = 0
    for t in (40, 30, 20):
        session.eps(z, t)
    assert model.eps_calls == 9  # exactly 3 per step, none for re-encoding z_null


def test_empty_condition_reduces_to_prompt_cfg(tiny):
    model, _ = tiny
    p = GuidanceParams(omega_cfg=4.0, omega_ndg=6.0, T=50)
    e = empty_condition(24, 24)
    s_nd = GuidanceSession(model, p, ["x"], [e], ndg=True)
    s_cfg = GuidanceSession(model, p, ["x"], [e], ndg=False)
    z = torch.randn(1, 3, 24, 24)
    a = s_nd.eps(z, 25)
    b = s_cfg.eps(z, 25)
    assert float((a - b).abs().max()) == 0.0  # glyph term is exactly zero


def test_omega_cfg_one_ndg_zero_is_pure_conditional(tiny):
    model, cond = tiny
    p = GuidanceParams(omega_cfg=1.0, omega_ndg=0.0, T=50)
    session = GuidanceSession(model, p, ["x"], [cond], ndg=True)
    z = torch.randn(1, 3, 24, 24)
    out = session.eps(z, 10)
    with torch.no_grad():
        want = model.predict_eps(z, 10, session.c_text, session.z_img)
    assert float((out - want).abs().max()) < 1e-6


def test_guided_eps_function_wrapper(tiny):
    model, cond = tiny
    p = GuidanceParams(T=50)
    z = torch.randn(1, 3, 24, 24)
    a = guided_eps(z, 20, "x", [cond], model, p, use_dynamic=True)
    session = GuidanceSession(model, p, ["x"], [cond], ndg=True, use_dynamic=True)
    b = guided_eps(z, 20, "x", [cond], model, p, session=session)
    assert torch.equal(a, b)


def test_dynamic_constant_when_A_zero(tiny):
    model, cond = tiny
    p = GuidanceParams(omega_ndg=5.0, A=0.0, T=50)
    s = GuidanceSession(model, p, ["x"], [cond], ndg=True, use_dynamic=True)
    for t in (0, 10, 25, 50):
        assert s.omega_ndg_at(t) == 5.0
