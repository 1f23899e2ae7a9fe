"""Synthetic IV designs with known structural functions.

Main design (confounder ``u``):

    zbar ~ Unif[-3, 3]^k,  z = h(zbar),  u ~ N(0, 1),
    x = zbar_1 + u + e_x,  y = (f0(x) + u + e_y - mu) / sigma,

with ``e_x, e_y ~ N(0, 0.1^2)``. ``h`` is the identity (``k = D = 2``) or
a fixed random tanh network from ``k = D/2`` latent inputs to ``D``
observed instruments. ``mu``/``sigma`` come from a large pilot sample.

Demand design: price ``p`` is confounded with demand noise through ``v``;
``c`` is the instrument and ``(t, s)`` are exogenous covariates.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._rng import child_rng, child_seed
from .kernels import KernelSpec, draw_gp_sample, median_heuristic, rff_feature_map

DESIGNS = ("identity", "nn", "demand")
NOISE_SD = 0.1
NN_WIDTH = 64
GP_TRUTH_FEATURES = 256  # 1-d draws; QMC features make this ample and keep the 1e5-row pilot cheap


@dataclass(frozen=True)
class ScenarioConfig:
    design: str = "identity"
    D: int = 2
    f0: str = "gp"
    n1: int = 500
    n2: int = 500
    n_test: int = 200
    seed: int = 0
    rho: float = 0.5
    psi: str = "quartic"
    pilot_size: int = 100_000

    def __post_init__(self):
        if self.design not in DESIGNS:
            raise ValueError(f"unknown design {self.design!r}; choose from {DESIGNS}")
        if min(self.n1, self.n2, self.n_test, self.pilot_size) < 1:
            raise ValueError("sample sizes must be >= 1")
        if self.design == "identity" and self.D != 2:
            raise ValueError("identity design has D = 2")
        if self.design == "nn" and (self.D < 2 or self.D % 2):
            raise ValueError("nn design needs an even D >= 2")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must lie in [0, 1)")
        if self.psi not in PSI_VARIANTS:
            raise ValueError(f"unknown psi variant {self.psi!r}")
        if self.design != "demand" and self.f0 not in F0_NAMES:
            raise ValueError(f"unknown f0 {self.f0!r}; choose from {F0_NAMES}")

    def replace(self, **changes):
        return ScenarioConfig(**{**asdict(self), **changes})

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# -- structural functions ----------------------------------------------------

def _step(x):
    return np.where(np.asarray(x) >= 0, 1.0, -1.0)


_FIXED_F0 = {
    "abs": np.abs,
    "sin": np.sin,
    "linear": lambda x: np.asarray(x, dtype=float) * 1.0,
    "step": _step,
}
F0_NAMES = tuple(_FIXED_F0) + ("gp",)


def f0_registry(name, seed=0, kernel=None):
    """Structural function by name; ``gp`` draws one RFF sample of ``GP(0, kernel)``."""
    if name in _FIXED_F0:
        return _FIXED_F0[name]
    if name == "gp":
        kernel = kernel or KernelSpec("rbf", 1.0, 1.0)
        fmap = rff_feature_map(kernel, GP_TRUTH_FEATURES, seed=child_seed(seed, 1), input_dim=1)
        sample = draw_gp_sample(fmap, seed=child_seed(seed, 2))
        return lambda x: sample(np.reshape(np.asarray(x, dtype=float), (-1, 1))).reshape(np.shape(x))
    raise ValueError(f"unknown f0 {name!r}; choose from {F0_NAMES}")


class StandardizedTruth:
    """``x -> (f0(x) - mu) / sigma``."""

    def __init__(self, f0, mu, sigma):
        self.f0, self.mu, self.sigma = f0, mu, sigma

    def __call__(self, x):
        return (self.f0(np.asarray(x, dtype=float)) - self.mu) / self.sigma


# -- NN instrument -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NNInstrument:
    """Fixed tanh network ``D/2 -> 64 -> 64 -> D`` with N(0, 1/fan_in) weights."""

    weights: tuple

    @classmethod
    def random(cls, D, seed):
        rng = child_rng(seed, 5)
        dims = [D // 2, NN_WIDTH, NN_WIDTH, D]
        return cls(tuple(rng.standard_normal((a, b)) / np.sqrt(a) for a, b in zip(dims[:-1], dims[1:])))

    def __call__(self, zbar):
        h = zbar
        for W in self.weights[:-1]:
            h = np.tanh(h @ W)
        return h @ self.weights[-1]


# -- datasets ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class IVDataset:
    stage1: tuple  # (z, x, y)
    stage2: tuple
    test_x: np.ndarray
    f0_std: object
    mu: float
    sigma: float
    config: ScenarioConfig
    truth_kernel: KernelSpec | None = None  # prior of f0_std when f0 ~ GP
    x_median: float = float("nan")

    @property
    def test_truth(self):
        return self.f0_std(self.test_x)

    def export_csv(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        D = self.stage1[0].shape[1]
        header = [f"z_{k + 1}" for k in range(D)] + ["x", "y"]
        for name, (z, x, y) in (("stage1", self.stage1), ("stage2", self.stage2)):
            _write_rows(out / f"{name}.csv", header, np.column_stack([z, x, y]))
        _write_rows(out / "test.csv", ["x", "f0_std"], np.column_stack([self.test_x, self.test_truth]))
        manifest = {"config": self.config.to_dict(), "mu": self.mu, "sigma": self.sigma,
                    "x_median": self.x_median,
                    "truth_kernel": self.truth_kernel.to_dict() if self.truth_kernel else None,
                    "files": ["stage1.csv", "stage2.csv", "test.csv"]}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
        return out


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows([[repr(float(v)) for v in row] for row in rows])


def read_stage_csv(path):
    """Load ``(z, x, y)`` from a CSV with columns ``z_1..z_D, x, y``."""
    with open(path) as fh:
        header = next(csv.reader(fh))
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    zcols = [i for i, h in enumerate(header) if h.startswith("z_")]
    if not zcols or "x" not in header or "y" not in header:
        raise ValueError(f"{path}: expected columns z_1..z_D, x, y")
    return data[:, zcols], data[:, header.index("x")], data[:, header.index("y")]


def _draw_main(rng, n, cfg, h, f0):
    k = 2 if cfg.design == "identity" else cfg.D // 2
    zbar = rng.uniform(-3.0, 3.0, size=(n, k))
    u = rng.standard_normal(n)
    x = zbar[:, 0] + u + NOISE_SD * rng.standard_normal(n)
    y_raw = f0(x) + u + NOISE_SD * rng.standard_normal(n)
    z = zbar if h is None else h(zbar)
    return z, x, y_raw


def generate_main(config):
    """Stage-1/stage-2 samples, a fresh test set of treatments and the standardised truth."""
    cfg = config
    if cfg.design == "demand":
        raise ValueError("use generate_demand for the demand design")
    h = NNInstrument.random(cfg.D, cfg.seed) if cfg.design == "nn" else None
    pilot_rng = child_rng(cfg.seed, 1)

    # The GP truth needs its bandwidth (median treatment distance) before the pilot responses.
    x_probe = pilot_rng.uniform(-3, 3, 2000) + pilot_rng.standard_normal(2000) \
        + NOISE_SD * pilot_rng.standard_normal(2000)
    x_median = median_heuristic(x_probe)
    truth_kernel = KernelSpec("rbf", x_median, 1.0)
    f0 = f0_registry(cfg.f0, child_seed(cfg.seed, 6), truth_kernel)

    _, _, y_pilot = _draw_main(pilot_rng, cfg.pilot_size, cfg.replace(design="identity", D=2), None, f0)
    mu, sigma = float(y_pilot.mean()), float(y_pilot.std())

    def stage(key, n):
        z, x, y_raw = _draw_main(child_rng(cfg.seed, key), n, cfg, h, f0)
        return z, x, (y_raw - mu) / sigma

    test_rng = child_rng(cfg.seed, 4)
    test_x = test_rng.uniform(-3, 3, cfg.n_test) + test_rng.standard_normal(cfg.n_test) \
        + NOISE_SD * test_rng.standard_normal(cfg.n_test)
    return IVDataset(
        stage1=stage(2, cfg.n1),
        stage2=stage(3, cfg.n2),
        test_x=test_x,
        f0_std=StandardizedTruth(f0, mu, sigma),
        mu=mu,
        sigma=sigma,
        config=cfg,
        truth_kernel=truth_kernel.replace(variance=1.0 / sigma**2) if cfg.f0 == "gp" else None,
        x_median=x_median,
    )


# -- demand design -----------------------------------------------------------

def _psi_quartic(t):
    t = np.asarray(t, dtype=float)
    return 2.0 * ((t - 5.0) ** 4 / 600.0 + np.exp(-4.0 * (t - 5.0) ** 2) + t / 10.0 - 1.0)


def _psi_quadratic(t):
    t = np.asarray(t, dtype=float)
    return 2.0 * ((t - 5.0) ** 2 / 600.0 + np.exp(-4.0 * (t - 5.0) ** 2) + t / 10.0 - 1.0)


PSI_VARIANTS = {"quartic": _psi_quartic, "quadratic": _psi_quadratic}


def demand_psi(t, variant="quartic"):
    return PSI_VARIANTS[variant](t)


def demand_f0(p, t, s, variant="quartic"):
    return 100.0 + (10.0 + p) * s * demand_psi(t, variant) - 2.0 * p


@dataclass(frozen=True, eq=False)
class ExoDataset:
    """Splits are dicts with keys ``c`` (instrument), ``t``, ``s`` (covariates), ``p`` (treatment), ``y``."""

    stage1: dict
    stage2: dict
    test: dict  # c absent; y holds the structural truth
    config: ScenarioConfig
    extras: dict = field(default_factory=dict)

    def f0(self, p, t, s):
        return demand_f0(p, t, s, self.config.psi)

    def psi(self, t):
        return demand_psi(t, self.config.psi)

    @staticmethod
    def covariates(split):
        return np.column_stack([split["t"], split["s"]])

    def export_csv(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cols = ["c", "t", "s", "p", "y"]
        for name in ("stage1", "stage2"):
            split = getattr(self, name)
            _write_rows(out / f"{name}.csv", cols, np.column_stack([split[c] for c in cols]))
        _write_rows(out / "test.csv", ["p", "t", "s", "f0"],
                    np.column_stack([self.test[c] for c in ("p", "t", "s", "y")]))
        (out / "manifest.json").write_text(json.dumps({"config": self.config.to_dict(),
                                                       "files": ["stage1.csv", "stage2.csv", "test.csv"]},
                                                      indent=2))
        return out


def _draw_demand(rng, n, rho, variant):
    s = rng.integers(1, 8, size=n).astype(float)
    t = rng.uniform(0.0, 10.0, size=n)
    c = rng.standard_normal(n)
    v = rng.standard_normal(n)
    p = 25.0 + (c + 3.0) * demand_psi(t, variant) + v
    u = rho * v + np.sqrt(1.0 - rho**2) * rng.standard_normal(n)
    return {"c": c, "t": t, "s": s, "p": p, "y": demand_f0(p, t, s, variant) + u, "u": u, "v": v}


def generate_demand(config):
    """Demand design with ``n1``/``n2`` observational rows and ``n_test`` fresh truth points."""
    cfg = config
    strip = ("u", "v")
    s1 = _draw_demand(child_rng(cfg.seed, 2), cfg.n1, cfg.rho, cfg.psi)
    s2 = _draw_demand(child_rng(cfg.seed, 3), cfg.n2, cfg.rho, cfg.psi)
    te = _draw_demand(child_rng(cfg.seed, 4), cfg.n_test, cfg.rho, cfg.psi)
    test = {k: te[k] for k in ("t", "s", "p")}
    test["y"] = demand_f0(test["p"], test["t"], test["s"], cfg.psi)
    return ExoDataset(
        stage1={k: v for k, v in s1.items() if k not in strip},
        stage2={k: v for k, v in s2.items() if k not in strip},
        test=test,
        config=cfg,
        extras={"u1": s1["u"], "v1": s1["v"]},
    )


def generate(config):
    return generate_demand(config) if config.design == "demand" else generate_main(config)
