import math

import pytest
import torch

from lvcodec.transforms import (GDN, AnalysisTransform, SynthesisTransform, gdn, igdn,
                                motion_transforms, mv_analysis, mv_synthesis, res_analysis,
                                res_synthesis, residual_transforms, zero_biases)
from oracles import gradient_rel_error


def _params(c, beta=1.0, gamma=0.0, dtype=torch.float64):
    return torch.full((c,), beta, dtype=dtype), torch.full((c, c), gamma, dtype=dtype)


def test_gdn_identity_when_gamma_zero():
    x = torch.randn(2, 4, 5, 5, dtype=torch.float64)
    beta, gamma = _params(4)
    assert torch.allclose(gdn(x, beta, gamma), x)
    assert torch.allclose(igdn(x, beta, gamma), x)


def test_gdn_scalar_values():
    x = torch.full((1, 1, 1, 1), 2.0, dtype=torch.float64)
    beta, gamma = _params(1, 1.0, 1.0)
    assert gdn(x, beta, gamma).item() == pytest.approx(2 / math.sqrt(5), abs=1e-12)
    assert igdn(x, beta, gamma).item() == pytest.approx(2 * math.sqrt(5), abs=1e-12)
    assert gdn(x, beta, gamma).item() == pytest.approx(0.8944, abs=1e-4)
    assert igdn(x, beta, gamma).item() == pytest.approx(4.4721, abs=1e-4)


def test_gdn_zero_input():
    g = torch.Generator().manual_seed(0)
    beta = torch.rand(3, generator=g, dtype=torch.float64) + 0.1
    gamma = torch.rand(3, 3, generator=g, dtype=torch.float64)
    x = torch.zeros(1, 3, 4, 4, dtype=torch.float64)
    assert torch.count_nonzero(gdn(x, beta, gamma)) == 0
    assert torch.count_nonzero(igdn(x, beta, gamma)) == 0


def test_gdn_channel_mismatch():
    beta, gamma = _params(3)
    with pytest.raises(ValueError):
        gdn(torch.rand(1, 4, 2, 2, dtype=torch.float64), beta, gamma)


def test_gdn_cross_channel_formula():
    # per-location oracle written out with explicit loops
    g = torch.Generator().manual_seed(3)
    x = torch.randn(1, 3, 2, 2, generator=g, dtype=torch.float64)
    beta = torch.rand(3, generator=g, dtype=torch.float64) + 0.5
    gamma = torch.rand(3, 3, generator=g, dtype=torch.float64)
    out = gdn(x, beta, gamma)
    for i in range(3):
        for r in range(2):
            for c in range(2):
                norm = beta[i] + sum(gamma[i, j] * x[0, j, r, c] ** 2 for j in range(3))
                assert out[0, i, r, c].item() == pytest.approx((x[0, i, r, c] / norm.sqrt()).item())


@pytest.mark.parametrize("fn", [gdn, igdn])
def test_gdn_gradients(fn):
    g = torch.Generator().manual_seed(1)
    for trial in range(10):
        x = torch.randn(1, 3, 3, 3, generator=g, dtype=torch.float64)
        beta = torch.rand(3, generator=g, dtype=torch.float64) + 0.2
        gamma = torch.rand(3, 3, generator=g, dtype=torch.float64)
        w = torch.randn(1, 3, 3, 3, generator=g, dtype=torch.float64)
        assert gradient_rel_error(lambda t: (fn(t, beta, gamma) * w).sum(), x) < 1e-4
        assert gradient_rel_error(lambda b: (fn(x, b, gamma) * w).sum(), beta) < 1e-4
        assert gradient_rel_error(lambda m: (fn(x, beta, m) * w).sum(), gamma) < 1e-4


def test_gdn_layer_reparameterization_bounds():
    layer = GDN(4)
    assert torch.allclose(layer.beta, torch.ones(4))
    assert torch.allclose(layer.gamma, 0.1 * torch.eye(4))
    with torch.no_grad():
        layer.beta_param.fill_(0.0)
        layer.gamma_param.fill_(-3.0)
    assert (layer.beta >= 1e-6).all()
    assert (layer.gamma >= 0).all()


@pytest.mark.parametrize("hw,latent", [((64, 64), (4, 4)), ((256, 192), (16, 12))])
def test_motion_transform_shapes(hw, latent):
    enc, dec = motion_transforms()
    with torch.no_grad():
        m = mv_analysis(torch.randn(1, 2, *hw), enc)
        assert m.shape == (1, 128, *latent)
        assert mv_synthesis(m, dec).shape == (1, 2, *hw)


def test_residual_transform_shapes():
    enc, dec = residual_transforms()
    with torch.no_grad():
        y = res_analysis(torch.randn(1, 3, 64, 64), enc)
        assert y.shape == (1, 128, 4, 4)
        assert res_synthesis(y, dec).shape == (1, 3, 64, 64)


def test_kernel_sizes():
    assert motion_transforms()[0].kernel_size == 3
    assert motion_transforms()[1].kernel_size == 3
    assert residual_transforms()[0].kernel_size == 5
    assert residual_transforms()[1].kernel_size == 5


def test_layer_layout():
    enc, dec = motion_transforms()
    kinds = [type(m).__name__ for m in enc.net]
    assert kinds == ["Conv2d", "GDN", "Conv2d", "GDN", "Conv2d", "GDN", "Conv2d"]
    assert [m.inverse for m in dec.net if isinstance(m, GDN)] == [True, True, True]
    assert isinstance(dec.net[-1], torch.nn.ConvTranspose2d) and dec.net[-1].out_channels == 2
    assert residual_transforms()[1].net[-1].out_channels == 3
    assert all(m.out_channels == 128 for m in enc.net if isinstance(m, torch.nn.Conv2d))


def test_zero_input_zero_bias_gives_zero():
    for enc, dec in (motion_transforms(), residual_transforms()):
        zero_biases(enc)
        zero_biases(dec)
        with torch.no_grad():
            lat = enc(torch.zeros(1, enc.in_channels, 32, 32))
            assert torch.count_nonzero(lat) == 0
            assert torch.count_nonzero(dec(torch.zeros(1, 128, 2, 2))) == 0


def test_transform_errors():
    enc, dec = motion_transforms()
    with pytest.raises(ValueError):
        enc(torch.zeros(1, 2, 40, 64))
    with pytest.raises(ValueError):
        enc(torch.zeros(1, 3, 64, 64))
    with pytest.raises(ValueError):
        dec(torch.zeros(1, 64, 4, 4))


def test_outputs_finite_for_bounded_inputs():
    torch.manual_seed(0)
    for enc, dec in (motion_transforms(), residual_transforms()):
        x = (torch.rand(1, enc.in_channels, 64, 64) * 20) - 10
        with torch.no_grad():
            lat = enc(x)
            assert torch.isfinite(lat).all()
            assert torch.isfinite(dec(lat)).all()
