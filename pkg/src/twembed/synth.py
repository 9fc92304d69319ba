"""Synthetic ROI time-series with class-dependent community dynamics.

Each region follows the latent signal of the community it currently belongs
to, plus white noise. Two regimes are available:

``static``
    communities are fixed contiguous blocks for the whole recording.
``rotating``
    the block boundaries slide around the ring of regions as time passes,
    so which regions co-fluctuate changes from window to window.

Every subject also gets a handful of private region pairs driven by a shared
signal of their own, which makes individual subjects identifiable.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .connectome import TimeSeriesMatrix
from .errors import ValidationError

REGIMES = ("static", "rotating")


@dataclass(frozen=True)
class RegimeSpec:
    """Per-class generative settings.

    ``kinds[c]`` is the regime of class ``c``. ``rotation`` is the number of
    ring positions the block boundaries travel over the whole series.
    """

    kinds: tuple = ("static", "rotating")
    n_blocks: int = 2
    coupling: float = 1.0
    noise: float = 0.7
    smoothness: float = 0.9
    rotation: float | None = None  # default: R / n_blocks, i.e. one full block hand-over
    private_pairs: int = 3
    private_coupling: float = 1.2

    def __post_init__(self):
        if len(self.kinds) != 2:
            raise ValidationError("exactly two classes are supported")
        for k in self.kinds:
            if k not in REGIMES:
                raise ValidationError(f"unknown regime {k!r}; choose from {REGIMES}")
        if self.n_blocks < 1:
            raise ValidationError("n_blocks must be >= 1")
        if not 0.0 <= self.smoothness < 1.0:
            raise ValidationError("smoothness must lie in [0, 1)")

    @property
    def degenerate(self) -> bool:
        return self.kinds[0] == self.kinds[1]


@dataclass
class SyntheticCorpus:
    subjects: list  # TimeSeriesMatrix
    labels: list
    sites: list
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.subjects)

    def __iter__(self):
        return iter(zip(self.subjects, self.labels, self.sites))


def _ar1(rng, n_steps, n_series, phi):
    eps = rng.standard_normal((n_steps, n_series))
    out = np.empty_like(eps)
    out[0] = eps[0]
    scale = np.sqrt(1.0 - phi * phi)
    for t in range(1, n_steps):
        out[t] = phi * out[t - 1] + scale * eps[t]
    return out


def _membership(kind, R, T, n_blocks, rotation, phase):
    """(T, R) community index of every region at every time point."""
    ring = np.arange(R)
    if kind == "static":
        shift = np.zeros(T)
    else:
        shift = phase + rotation * np.arange(T) / T
    pos = (ring[None, :] + np.floor(shift)[:, None].astype(np.int64)) % R
    return (pos * n_blocks) // R


def generate_subject(rng, kind, R, T, regimes: RegimeSpec) -> np.ndarray:
    rotation = regimes.rotation if regimes.rotation is not None else R / regimes.n_blocks
    phase = rng.uniform(0, R / regimes.n_blocks) if kind == "rotating" else 0.0
    member = _membership(kind, R, T, regimes.n_blocks, rotation, phase)
    latent = _ar1(rng, T, regimes.n_blocks, regimes.smoothness)
    x = regimes.coupling * np.take_along_axis(latent, member, axis=1)
    if regimes.private_pairs:
        private = _ar1(rng, T, regimes.private_pairs, regimes.smoothness)
        for p in range(regimes.private_pairs):
            a, b = rng.choice(R, size=2, replace=False)
            x[:, a] += regimes.private_coupling * private[:, p]
            x[:, b] += regimes.private_coupling * private[:, p]
    x += regimes.noise * rng.standard_normal((T, R))
    return x


def generate_synthetic_corpus(
    n_subjects: int = 40,
    R: int = 20,
    T: int = 200,
    regimes: RegimeSpec = RegimeSpec(),
    seed: int = 0,
    n_sites: int = 4,
) -> SyntheticCorpus:
    """Deterministic two-class corpus; labels alternate so both classes appear.

    Subject ``i`` gets label ``i % 2`` and site ``site{(i // 2) % n_sites}``,
    so each site holds both classes whenever it has at least two subjects.
    """
    if n_subjects < 2:
        raise ValidationError("n_subjects must be >= 2 so both labels are represented")
    if R < 2 * regimes.n_blocks or T < 2:
        raise ValidationError("R must allow at least two regions per block and T >= 2")
    if n_sites < 1:
        raise ValidationError("n_sites must be >= 1")
    subjects, labels, sites = [], [], []
    for i in range(n_subjects):
        label = i % 2
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        values = generate_subject(rng, regimes.kinds[label], R, T, regimes)
        subjects.append(TimeSeriesMatrix(f"sub{i:04d}", values))
        labels.append(label)
        sites.append(f"site{(i // 2) % n_sites}")
    meta = {
        "seed": seed,
        "n_subjects": n_subjects,
        "R": R,
        "T": T,
        "regimes": asdict(regimes),
        "degenerate": regimes.degenerate,
    }
    return SyntheticCorpus(subjects, labels, sites, meta)
