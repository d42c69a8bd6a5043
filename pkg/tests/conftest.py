import numpy as np
import pytest
import torch

from lvcodec.bottleneck import FactorizedPrior, likelihood, quantize


def fit_prior(channels: int = 16, steps: int = 400, seed: int = 0) -> FactorizedPrior:
    """Fit a factorized prior to noisy Laplacian samples with per-channel scales."""
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    prior = FactorizedPrior(channels)
    scales = torch.linspace(0.2, 6.0, channels).view(1, channels, 1, 1)
    opt = torch.optim.Adam(prior.parameters(), lr=1e-2)
    for _ in range(steps):
        u = torch.rand(4, channels, 16, 16, generator=g) - 0.5
        lap = -scales * torch.sign(u) * torch.log1p(-2 * u.abs())
        lap = lap + torch.rand(lap.shape, generator=g) * 0.6
        y = quantize(lap, "train", g)
        loss = -torch.log2(likelihood(y, prior)).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    return prior.eval()


def sample_from_prior(prior: FactorizedPrior, shape, rng: np.random.Generator, span: int = 200):
    """Draw integer symbols per channel from the prior's exact bin probabilities."""
    c, h, w = shape
    grid = torch.arange(-span, span + 1, dtype=torch.float32)
    with torch.no_grad():
        p = likelihood(grid.view(1, 1, 1, -1).expand(1, c, 1, grid.numel()).contiguous(), prior)
    p = p[0, :, 0].double().numpy()
    out = np.empty((c, h * w), dtype=np.int64)
    for ch in range(c):
        probs = p[ch] / p[ch].sum()
        out[ch] = rng.choice(grid.numpy().astype(np.int64), size=h * w, p=probs)
    return out.reshape(c, h, w)


@pytest.fixture(scope="session")
def trained_prior():
    return fit_prior()


# one summary line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = {}


def record_criterion(number: int, passed: bool, detail: str) -> str:
    line = f"CRITERION {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
