"""Ground-truth point-process generators.

All generators take a seed (or a ``numpy.random.Generator``) and are
deterministic given it. Hawkes processes use Ogata thinning with the
intensity just after the current time as the dominating rate, which is
exact for sums of decaying exponential kernels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .events import Dataset, EventSequence, SpaceSpec


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


@dataclass(frozen=True)
class HawkesParams:
    mu: float
    excitations: tuple[tuple[float, float], ...]  # (weight a_j, decay b_j)
    horizon: float

    def __post_init__(self):
        object.__setattr__(self, "excitations", tuple((float(a), float(b)) for a, b in self.excitations))
        if not (self.mu > 0 and math.isfinite(self.mu)):
            raise ValueError(f"base rate must be positive and finite, got {self.mu}")
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise ValueError(f"horizon must be positive and finite, got {self.horizon}")
        for a, b in self.excitations:
            if a < 0 or b <= 0:
                raise ValueError(f"kernel term ({a}, {b}) needs a >= 0, b > 0")

    @property
    def branching_ratio(self) -> float:
        return sum(a / b for a, b in self.excitations)

    @property
    def weights(self) -> np.ndarray:
        return np.array([a for a, _ in self.excitations])

    @property
    def decays(self) -> np.ndarray:
        return np.array([b for _, b in self.excitations])

    def intensity(self, t: float, history) -> float:
        h = np.asarray(history, dtype=np.float64)
        h = h[h < t]
        lam = self.mu
        for a, b in self.excitations:
            lam += a * np.exp(-b * (t - h)).sum()
        return float(lam)

    def compensator(self, times, start: float = 0.0) -> np.ndarray:
        """Integrated intensity from ``start`` up to each time in ``times`` (sorted history)."""
        times = np.asarray(times, dtype=np.float64)
        out = self.mu * (times - start)
        for a, b in self.excitations:
            # recursive form of sum_{t_j < t_i} (a/b)(1 - exp(-b (t_i - t_j)))
            acc = 0.0  # sum_{j < i} exp(-b (t_i - t_j))
            prev = None
            comp = np.empty_like(times)
            n_before = 0
            for i, t in enumerate(times):
                if prev is not None:
                    acc = (acc + 1.0) * math.exp(-b * (t - prev))
                comp[i] = (a / b) * (n_before - acc)
                prev = t
                n_before += 1
            out += comp
        return out


# Appendix-style Synthetic-Independent temporal process; supercritical (ratio 1.4),
# so it is only simulated on bounded windows.
SYNTHETIC_HAWKES = HawkesParams(0.2, ((0.2, 0.2), (4.0, 10.0)), 10.0)


@dataclass(frozen=True)
class GmmSpatialParams:
    weights: tuple[float, ...]
    means: tuple[tuple[float, ...], ...]
    covs: tuple  # each a DxD nested tuple

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        if not (len(self.weights) == len(self.means) == len(self.covs)):
            raise ValueError("weights, means and covariances differ in length")
        dim = len(self.means[0])
        for c in self.covs:
            c = np.asarray(c, dtype=np.float64)
            if c.shape != (dim, dim) or not np.allclose(c, c.T):
                raise ValueError("covariances must be symmetric DxD")
            if np.linalg.eigvalsh(c).min() <= 0:
                raise ValueError("covariances must be positive definite")

    @property
    def dim(self) -> int:
        return len(self.means[0])

    @classmethod
    def bivariate(cls, mu1, mu2, sigma1, sigma2, rho) -> "GmmSpatialParams":
        if not abs(rho) < 1:
            raise ValueError("|rho| must be < 1")
        c = rho * sigma1 * sigma2
        return cls((1.0,), ((mu1, mu2),), (((sigma1**2, c), (c, sigma2**2)),))

    def sample(self, rng: np.random.Generator, n: int, components=None) -> np.ndarray:
        if components is None:
            components = rng.choice(len(self.weights), size=n, p=np.asarray(self.weights))
        components = np.asarray(components, dtype=np.int64)
        chol = np.stack([np.linalg.cholesky(np.asarray(c, dtype=np.float64)) for c in self.covs])
        means = np.asarray(self.means, dtype=np.float64)
        z = rng.standard_normal((n, self.dim))
        return means[components] + np.einsum("nij,nj->ni", chol[components], z)


SYNTHETIC_GAUSSIAN = GmmSpatialParams.bivariate(4.0, 7.0, math.sqrt(2.0), 2.0, math.sqrt(2.0) / 4)

DEFAULT_GMM = GmmSpatialParams(
    (1 / 3, 1 / 3, 1 / 3),
    ((-3.0, 0.0), (3.0, 0.0), (0.0, 4.0)),
    (((0.5, 0.0), (0.0, 0.5)),) * 3,
)
DEFAULT_GMM_HAWKES = HawkesParams(0.5, ((0.8, 1.0),), 30.0)


# ---------------------------------------------------------------------------
# temporal generators


def simulate_poisson(rate: float, horizon: float, seed=None) -> np.ndarray:
    """Event times of a homogeneous Poisson process on [0, horizon]."""
    if not (rate > 0 and horizon > 0):
        raise ValueError("rate and horizon must be positive")
    rng = _rng(seed)
    n = rng.poisson(rate * horizon)
    return np.sort(rng.uniform(0.0, horizon, size=n))


class ThinningBoundError(AssertionError):
    pass


def _hawkes_thinning(params: HawkesParams, rng, on_accept=None, max_events: int | None = None):
    """Ogata thinning; ``on_accept(t, state)`` may pick a mark for each accepted event."""
    a, b = params.weights, params.decays
    state = np.zeros(len(a))  # sum of a_j exp(-b_j (t - t_i)) per kernel term
    t = 0.0
    times, marks = [], []
    while True:
        bound = params.mu + state.sum()
        w = rng.exponential(1.0 / bound)
        state = state * np.exp(-b * w)
        t += w
        if t > params.horizon:
            break
        lam = params.mu + state.sum()
        if lam > bound * (1 + 1e-12):
            raise ThinningBoundError(f"intensity {lam} exceeds thinning bound {bound} at t={t}")
        if rng.uniform() * bound <= lam:
            times.append(t)
            if on_accept is not None:
                marks.append(on_accept(t, state))
            state = state + a
            if max_events is not None and len(times) >= max_events:
                break
    return np.asarray(times), marks


def simulate_hawkes(params: HawkesParams, seed=None, allow_explosive: bool = False,
                    max_events: int | None = None) -> np.ndarray:
    """Hawkes event times on [0, horizon] by Ogata thinning.

    Supercritical kernels (branching ratio >= 1) are refused unless
    ``allow_explosive``; the finite horizon keeps them well defined.
    """
    if params.branching_ratio >= 1 and not allow_explosive:
        raise ValueError(
            f"branching ratio {params.branching_ratio:.3f} >= 1; pass allow_explosive=True "
            "to simulate on the bounded horizon anyway"
        )
    times, _ = _hawkes_thinning(params, _rng(seed), max_events=max_events)
    return times


def simulate_self_correcting(mu: float, alpha: float, horizon: float, seed=None) -> np.ndarray:
    """Intensity exp(mu t - alpha N(t)), sampled exactly by inverting the compensator."""
    if not (mu > 0 and alpha > 0 and horizon > 0):
        raise ValueError("mu, alpha and horizon must be positive")
    rng = _rng(seed)
    t, n = 0.0, 0
    times = []
    while True:
        # integral_t^{t+w} exp(mu u - alpha n) du = E  =>  solve for w
        e = rng.exponential()
        x = math.exp(mu * t) + mu * e * math.exp(alpha * n)
        t_next = math.log(x) / mu
        if t_next > horizon:
            break
        t = t_next
        n += 1
        times.append(t)
    return np.asarray(times)


def expected_hawkes_count(params: HawkesParams) -> float:
    """E[N(T)] for a Hawkes process started empty, from the linear ODE of its mean intensity.

    m(t) = mu + sum_j y_j(t),  y_j' = -b_j y_j + a_j m(t),  y_j(0) = 0.
    """
    from scipy.linalg import expm

    a, b = params.weights, params.decays
    n = len(a)
    # state = (y_1..y_n, N); N' = m = mu + sum y; augmented with constant 1
    A = np.zeros((n + 2, n + 2))
    for j in range(n):
        A[j, :n] = a[j]
        A[j, j] -= b[j]
        A[j, n + 1] = a[j] * params.mu
    A[n, :n] = 1.0
    A[n, n + 1] = params.mu
    x0 = np.zeros(n + 2)
    x0[-1] = 1.0
    return float((expm(A * params.horizon) @ x0)[n])


# ---------------------------------------------------------------------------
# spatio-temporal generators


def simulate_hawkes_gmm(hawkes: HawkesParams, spatial: GmmSpatialParams, seed=None,
                        mark_persistence: float = 0.0, allow_explosive: bool = False) -> EventSequence:
    """Hawkes times with Gaussian-mixture locations.

    Each event belongs to a mixture component. With ``mark_persistence`` p,
    the events triggered by a parent stay in the parent's component with
    probability p and otherwise pick a component by the mixture weights;
    background events always use the weights. This is the multivariate
    Hawkes process whose total intensity equals ``hawkes`` exactly, and
    p = 0 gives independent locations.
    """
    if not 0.0 <= mark_persistence <= 1.0:
        raise ValueError("mark_persistence must lie in [0, 1]")
    if hawkes.branching_ratio >= 1 and not allow_explosive:
        raise ValueError(f"branching ratio {hawkes.branching_ratio:.3f} >= 1")
    rng = _rng(seed)
    n_comp = len(spatial.weights)
    w = np.asarray(spatial.weights, dtype=np.float64)
    a, b = hawkes.weights, hawkes.decays
    # per-component excitation mass, decayed alongside the Ogata state
    comp_state = np.zeros((n_comp, len(a)))
    last_t = [0.0]

    def pick(t, state):
        nonlocal comp_state
        comp_state = comp_state * np.exp(-b * (t - last_t[0]))
        last_t[0] = t
        excite = comp_state.sum(axis=1)
        lam_c = hawkes.mu * w + (1 - mark_persistence) * excite.sum() * w + mark_persistence * excite
        c = int(rng.choice(n_comp, p=lam_c / lam_c.sum()))
        comp_state[c] += a
        return c

    times, comps = _hawkes_thinning(hawkes, rng, on_accept=pick)
    if len(times) == 0:
        return None
    locs = spatial.sample(rng, len(times), components=comps)
    return EventSequence(times, locs, 0.0, hawkes.horizon)


def _collect(make, n_seqs: int, rng: np.random.Generator, start_id: int = 0) -> list[EventSequence]:
    seqs = []
    sid = start_id
    while len(seqs) < n_seqs:
        s = make(rng, sid)
        if s is not None:
            seqs.append(s)
            sid += 1
    return seqs


@dataclass
class IndependentConfig:
    n_train: int = 1000
    n_val: int = 100
    n_test: int = 100
    window: float = 10.0
    hawkes: HawkesParams = field(default_factory=lambda: SYNTHETIC_HAWKES)
    spatial: GmmSpatialParams = field(default_factory=lambda: SYNTHETIC_GAUSSIAN)
    max_events: int | None = 500


def simulate_independent(seed=None, config: IndependentConfig | None = None) -> Dataset:
    """Hawkes times and independent 2-d Gaussian locations, from separate random streams."""
    cfg = config or IndependentConfig()
    hp = HawkesParams(cfg.hawkes.mu, cfg.hawkes.excitations, cfg.window)
    seed_seq = np.random.SeedSequence(seed)
    t_seed, s_seed = seed_seq.spawn(2)
    t_rng, s_rng = np.random.default_rng(t_seed), np.random.default_rng(s_seed)

    def make(_, sid):
        times, _m = _hawkes_thinning(hp, t_rng, max_events=cfg.max_events)
        if len(times) == 0:
            return None
        locs = cfg.spatial.sample(s_rng, len(times))
        end = float(times[-1]) if len(times) == cfg.max_events else cfg.window
        return EventSequence(times, locs, 0.0, end, sid)

    total = cfg.n_train + cfg.n_val + cfg.n_test
    seqs = _collect(make, total, t_rng)
    return Dataset(
        SpaceSpec.continuous(cfg.spatial.dim),
        seqs[: cfg.n_train],
        seqs[cfg.n_train : cfg.n_train + cfg.n_val],
        seqs[cfg.n_train + cfg.n_val :],
    )


@dataclass
class GmmConfig:
    n_train: int = 200
    n_val: int = 30
    n_test: int = 30
    hawkes: HawkesParams = field(default_factory=lambda: DEFAULT_GMM_HAWKES)
    spatial: GmmSpatialParams = field(default_factory=lambda: DEFAULT_GMM)
    mark_persistence: float = 0.9


def simulate_gmm_dataset(seed=None, config: GmmConfig | None = None) -> Dataset:
    cfg = config or GmmConfig()
    rng = _rng(seed)

    def make(r, sid):
        s = simulate_hawkes_gmm(cfg.hawkes, cfg.spatial, r, cfg.mark_persistence)
        return None if s is None else EventSequence(s.times, s.space, 0.0, cfg.hawkes.horizon, sid)

    total = cfg.n_train + cfg.n_val + cfg.n_test
    seqs = _collect(make, total, rng)
    return Dataset(
        SpaceSpec.continuous(cfg.spatial.dim),
        seqs[: cfg.n_train],
        seqs[cfg.n_train : cfg.n_train + cfg.n_val],
        seqs[cfg.n_train + cfg.n_val :],
    )


def simulate_cycle(n_locations: int = 5, n_seqs: int = 200, length: int = 20, seed=None,
                   rate: float = 1.0) -> Dataset:
    """Discrete toy: Poisson times, locations walking the cycle 0, 1, ..., N-1, 0, ..."""
    rng = _rng(seed)
    seqs = []
    for sid in range(n_seqs):
        times = np.cumsum(rng.exponential(1.0 / rate, size=length))
        start = int(rng.integers(n_locations))
        locs = (start + np.arange(length)) % n_locations
        seqs.append(EventSequence(times, locs.astype(np.int64), 0.0, float(times[-1]), sid))
    n_val = max(1, n_seqs // 10)
    return Dataset(
        SpaceSpec.discrete(n_locations),
        seqs[: n_seqs - 2 * n_val],
        seqs[n_seqs - 2 * n_val : n_seqs - n_val],
        seqs[n_seqs - n_val :],
    )


def time_rescaled_intervals(params: HawkesParams, times, start: float = 0.0) -> np.ndarray:
    """Compensator increments; i.i.d. Exp(1) when ``times`` follow ``params``."""
    comp = params.compensator(times, start)
    return np.diff(comp, prepend=0.0)
