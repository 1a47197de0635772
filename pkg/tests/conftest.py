import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def tiny_models():
    """An untrained 16^3 stage-1 model and two briefly trained latent DDPMs."""
    from morphgen.diffusion import DdpmConfig, train_ddpm
    from morphgen.vqgan import VQGAN, VqganConfig

    vq = VQGAN(VqganConfig(cube=16, n_z=4, codebook_size=32, widths=(4, 4, 8), disc_widths=(4, 4, 4), seed=1))
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (6, 2, 16, 16, 16)).astype(np.float32)
    z = vq.encode_batch(x).data
    for c, book in enumerate(vq.codebooks):
        book.init_from(vq.channel_rows(z, c), rng)
    cfg = dict(T=10, beta_start=1e-3, beta_end=0.2, base=4, steps=2)
    a = train_ddpm(z[:3], DdpmConfig(**cfg, seed=1, label="a"), progress_every=0)
    b = train_ddpm(z[3:], DdpmConfig(**cfg, seed=2, label="b"), progress_every=0)
    return vq, a, b, x


def pytest_terminal_summary(terminalreporter):
    support = sys.modules.get("acceptance_support")
    if support is None or not support.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in support.summary_lines():
        terminalreporter.write_line(line)
