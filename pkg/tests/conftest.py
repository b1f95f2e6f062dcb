import numpy as np
import pytest

from stdiffusion import autodiff as ad
from stdiffusion.events import Dataset, EventSequence, SpaceSpec
from stdiffusion.model import ModelConfig, STPPModel
from stdiffusion.train import batch_loss


def random_sequences(rng, n=2, max_len=4, dim=2, discrete=False, n_loc=4):
    seqs = []
    for sid in range(n):
        L = int(rng.integers(1, max_len + 1))
        t = np.sort(rng.uniform(0, 3, L))
        sp = rng.integers(0, n_loc, L) if discrete else rng.uniform(-2, 2, (L, dim))
        seqs.append(EventSequence(t, sp, 0.0, 3.0, sid))
    return seqs


def max_param_grad_error(model: STPPModel, seqs, seed: int = 0, step: float = 1e-5) -> float:
    """Largest grad_check error over every parameter tensor of the full training loss.

    For discrete space the diffusion target is a detached copy of the location
    embedding, so the finite differences hold that copy fixed as well.
    """
    worst = 0.0
    if model.space.is_discrete:
        table = model.diffusion_table()
        model.clean_space = lambda tg: table[tg.space]
    owners = [model.encoder.params, model.denoiser.params]
    for owner in owners:
        for name in list(owner):
            original = owner[name]

            def fn(x, owner=owner, name=name):
                owner[name] = x
                try:
                    return batch_loss(model, seqs, np.random.default_rng(seed))
                finally:
                    owner[name] = original

            worst = max(worst, ad.grad_check(fn, original.data, step))
    model.__dict__.pop("clean_space", None)
    return worst


def point_mass_dataset(n_seqs=40, length=6, tau=1.0, loc=(0.0, 0.0), rng=None):
    rng = np.random.default_rng(rng)
    seqs = []
    for sid in range(n_seqs):
        t = tau * np.arange(1, length + 1)
        seqs.append(EventSequence(t, np.tile(loc, (length, 1)), 0.0, float(t[-1]), sid))
    return Dataset(SpaceSpec.continuous(len(loc)), seqs[: n_seqs - 4], seqs[n_seqs - 4 : n_seqs - 2], seqs[n_seqs - 2 :])


@pytest.fixture
def tiny_config():
    return ModelConfig(hidden=4, branch_layers=3, K=10)


# acceptance results, printed once at the end of the session
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
