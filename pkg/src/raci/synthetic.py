"""Process-informed synthetic benchmark.

Daily methane-like production follows a multiplicative response model::

    y_t = m_g0 * f_pH * f_MST(T_t, W_t) * f_RX(W_t) * f_SOM(SOM_month(t)) + noise

with a Q10 temperature term scaled by moisture, a logistic redox switch, a
Michaelis-Menten substrate limit and a Gaussian pH bell. Soil moisture ``W``
follows a daily bucket model and substrate ``SOM`` a monthly exponential
moving average of NPP.

Meteorological drivers vary smoothly in space (shared latitudinal seasonal
cycle plus Gaussian-smoothed anomalies), while regime conditioners follow a
mosaic layout so distant sites can share a regime and neighbors can differ.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import CalendarSpec, Dataset, SiteMeta, SiteYearSample
from .rng import stream


class GeneratorConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RegimeParams:
    m_g0: float = 1.0
    ph: float = 6.2
    ph_opt: float = 6.2
    sigma_ph: float = 1.5
    q10: float = 2.0
    t_ref: float = 10.0
    w_thr: float = 0.5
    kappa: float = 10.0
    k_s: float = 1.0
    som_decay: float = 0.8
    npp_scale: float = 1.0

    def __post_init__(self):
        if not self.m_g0 > 0:
            raise ValueError("m_g0 must be positive")
        if not self.sigma_ph > 0:
            raise ValueError("sigma_ph must be positive")
        if not 0.0 < self.som_decay < 1.0:
            raise ValueError("som_decay must lie in (0, 1)")
        if not 0.0 <= self.w_thr <= 1.0:
            raise ValueError("w_thr must lie in [0, 1]")
        if not 3.0 <= self.ph <= 9.0:
            raise ValueError("ph must lie in [3, 9]")


def response_functions(temp, moisture, som, regime: RegimeParams):
    """The four unitless response factors ``(f_mst, f_rx, f_som, f_ph)``.

    Inputs may be scalars or broadcastable arrays.
    """
    temp = np.asarray(temp, dtype=np.float64)
    moisture = np.asarray(moisture, dtype=np.float64)
    som = np.asarray(som, dtype=np.float64)
    if not (np.isfinite(temp).all() and np.isfinite(moisture).all() and np.isfinite(som).all()):
        raise ValueError("response inputs must be finite")
    if (moisture < 0).any() or (moisture > 1).any():
        raise ValueError("moisture must lie in [0, 1]")
    if (som < 0).any():
        raise ValueError("substrate must be non-negative")
    f_mst = regime.q10 ** ((temp - regime.t_ref) / 10.0) * moisture
    f_rx = 1.0 / (1.0 + np.exp(-regime.kappa * (moisture - regime.w_thr)))
    f_som = som / (som + regime.k_s)
    f_ph = np.exp(-((regime.ph - regime.ph_opt) ** 2) / (2.0 * regime.sigma_ph ** 2))
    return f_mst, f_rx, f_som, f_ph


def bucket_moisture(precip: np.ndarray, a: float = 0.1, b: float = 0.05, w0: float = 0.5) -> np.ndarray:
    w = np.empty(len(precip))
    prev = w0
    for t, p in enumerate(precip):
        prev = min(max(prev + a * p - b, 0.0), 1.0)
        w[t] = prev
    return w


def substrate_pool(npp: np.ndarray, decay: float, som0: Optional[float] = None) -> np.ndarray:
    som = np.empty(len(npp))
    prev = float(np.mean(npp)) if som0 is None else som0
    for m, v in enumerate(npp):
        prev = decay * prev + (1.0 - decay) * v
        som[m] = prev
    return som


def simulate_site_year(temperature: np.ndarray, precip: np.ndarray, npp: np.ndarray,
                       regime: RegimeParams, calendar: CalendarSpec,
                       rng: Optional[np.random.Generator] = None, noise_std: float = 0.0,
                       bucket_a: float = 0.1, bucket_b: float = 0.05, w0: float = 0.5,
                       som0: Optional[float] = None):
    """Daily flux for one site-year.

    Returns ``(y, latent)`` where ``latent`` holds the moisture (daily) and
    substrate (monthly) trajectories. ``som0`` defaults to the year's mean NPP.
    """
    temperature = np.asarray(temperature, dtype=np.float64)
    precip = np.asarray(precip, dtype=np.float64)
    npp = np.asarray(npp, dtype=np.float64)
    n = calendar.days_per_year
    if temperature.shape != (n,) or precip.shape != (n,):
        raise ValueError(f"daily drivers must have length {n}")
    if npp.shape != (12,):
        raise ValueError("npp must have 12 monthly values")
    w = bucket_moisture(precip, bucket_a, bucket_b, w0)
    som = substrate_pool(npp, regime.som_decay, som0)
    f_mst, f_rx, f_som, f_ph = response_functions(temperature, w, som[calendar.day_to_month], regime)
    y = regime.m_g0 * f_ph * f_mst * f_rx * f_som
    if noise_std > 0:
        if rng is None:
            raise ValueError("noise_std > 0 needs an rng")
        y = y + rng.normal(0.0, noise_std, size=n)
    return y, {"moisture": w, "substrate": som}


# ---------------------------------------------------------------------------
# benchmark builder
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GeneratorConfig:
    rows: int = 8
    cols: int = 8
    lat0: float = 30.0
    lon0: float = -100.0
    dlat: float = 2.0
    dlon: float = 2.0
    n_regimes: int = 2
    regime_layout: str = "checkerboard"  # or "voronoi"
    first_year: int = 2000
    last_year: int = 2007
    train_years: Optional[Tuple[int, ...]] = None
    aux_year: Optional[int] = None
    test_years: Optional[Tuple[int, ...]] = None
    n_test_years: int = 2
    smoothness: float = 2.0
    noise_std: float = 0.05
    seed: int = 0
    days_per_year: int = 365
    month_lengths: Tuple[int, ...] = (31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31)
    # regime contrast
    m_g0_base: float = 1.0
    m_g0_ratio: float = 3.0
    ph_opt: float = 6.2
    ph_offset: float = -1.5
    npp_ratio: float = 1.0
    # process constants
    bucket_a: float = 0.1
    bucket_b: float = 0.05
    w_init: float = 0.5
    temp_anomaly_std: float = 3.0
    precip_scale: float = 4.0
    precip_threshold: float = 0.9
    npp_interannual_std: float = 0.2
    warming_per_year: float = 0.03

    @property
    def calendar(self) -> CalendarSpec:
        return CalendarSpec(self.days_per_year, tuple(self.month_lengths))

    @property
    def years(self) -> List[int]:
        return list(range(self.first_year, self.last_year + 1))

    def split_years(self) -> Tuple[Tuple[int, ...], int, Tuple[int, ...]]:
        years = self.years
        if self.train_years is None and self.aux_year is None and self.test_years is None:
            if len(years) < self.n_test_years + 2:
                raise GeneratorConfigError("need at least one train year, one auxiliary year and the test years")
            test = tuple(years[-self.n_test_years:]) if self.n_test_years else ()
            aux = years[-self.n_test_years - 1]
            train = tuple(years[: -self.n_test_years - 1])
        else:
            train = tuple(self.train_years or ())
            aux = self.aux_year
            test = tuple(self.test_years or ())
        if not train:
            raise GeneratorConfigError("no train years")
        if aux is None:
            raise GeneratorConfigError("exactly one auxiliary year is required")
        if aux in train or aux in test or set(train) & set(test):
            raise GeneratorConfigError("train/auxiliary/test years must be pairwise disjoint")
        if not set(train) | {aux} | set(test) <= set(years):
            raise GeneratorConfigError("split years outside the generated range")
        return train, aux, test

    def validate(self) -> None:
        if self.rows < 1 or self.cols < 1 or self.rows * self.cols < 2:
            raise GeneratorConfigError("grid needs at least two cells")
        if self.n_regimes < 1:
            raise GeneratorConfigError("n_regimes must be positive")
        if self.regime_layout not in ("checkerboard", "voronoi"):
            raise GeneratorConfigError(f"unknown layout {self.regime_layout!r}")
        if self.last_year < self.first_year:
            raise GeneratorConfigError("empty year range")
        self.split_years()
        self.calendar

    @property
    def n_sites(self) -> int:
        return self.rows * self.cols

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        for k in ("train_years", "test_years", "month_lengths"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


def site_id(row: int, col: int) -> str:
    return f"r{row:02d}c{col:02d}"


def regime_layout(cfg: GeneratorConfig) -> np.ndarray:
    """Regime id per grid cell (rows, cols)."""
    if cfg.n_regimes == 1:
        return np.zeros((cfg.rows, cfg.cols), dtype=int)
    rr, cc = np.meshgrid(np.arange(cfg.rows), np.arange(cfg.cols), indexing="ij")
    if cfg.regime_layout == "checkerboard":
        return (rr + cc) % cfg.n_regimes
    rng = stream(cfg.seed, "layout")
    n_seeds = max(2 * cfg.n_regimes, cfg.rows * cfg.cols // 6)
    seeds = rng.uniform([0, 0], [cfg.rows, cfg.cols], size=(n_seeds, 2))
    labels = np.arange(n_seeds) % cfg.n_regimes
    rng.shuffle(labels)
    d = (rr[..., None] + 0.5 - seeds[:, 0]) ** 2 + (cc[..., None] + 0.5 - seeds[:, 1]) ** 2
    return labels[d.argmin(axis=-1)]


def regime_table(cfg: GeneratorConfig) -> List[RegimeParams]:
    out = []
    for k in range(cfg.n_regimes):
        frac = k / (cfg.n_regimes - 1) if cfg.n_regimes > 1 else 0.0
        out.append(RegimeParams(
            m_g0=cfg.m_g0_base * cfg.m_g0_ratio ** frac,
            ph=cfg.ph_opt + cfg.ph_offset * frac,
            ph_opt=cfg.ph_opt,
            npp_scale=cfg.npp_ratio ** frac,
        ))
    return out


def site_regimes(cfg: GeneratorConfig) -> Dict[str, RegimeParams]:
    layout = regime_layout(cfg)
    table = regime_table(cfg)
    return {site_id(r, c): table[layout[r, c]] for r in range(cfg.rows) for c in range(cfg.cols)}


def _smooth_field(rng, shape, sigma: float) -> np.ndarray:
    """White noise (days, rows, cols) smoothed over the grid axes, unit variance per cell."""
    noise = rng.standard_normal(shape)
    if sigma > 0:
        noise = gaussian_filter(noise, sigma=(0, sigma, sigma), mode="nearest")
    sd = noise.std(axis=0, keepdims=True)
    return noise / np.where(sd > 0, sd, 1.0)


def _ar1(x: np.ndarray, phi: float) -> np.ndarray:
    out = np.empty_like(x)
    prev = np.zeros(x.shape[1:])
    scale = np.sqrt(1.0 - phi * phi)
    for t in range(x.shape[0]):
        prev = phi * prev + scale * x[t]
        out[t] = prev
    return out


def grid_drivers(cfg: GeneratorConfig, year: int) -> Tuple[np.ndarray, np.ndarray]:
    """Temperature and precipitation fields (days, rows, cols) for one year."""
    n = cfg.days_per_year
    rng = stream(cfg.seed, "drivers", year)
    lat = cfg.lat0 + cfg.dlat * np.arange(cfg.rows)
    lon_frac = np.arange(cfg.cols) / max(cfg.cols - 1, 1)
    t = np.arange(n)
    season = -np.cos(2.0 * np.pi * (t + 0.5) / n)  # coldest early in the year
    t_mean = 30.0 - 0.5 * np.abs(lat)
    t_amp = 0.25 * np.abs(lat)
    temp = t_mean[None, :, None] + t_amp[None, :, None] * season[:, None, None]
    temp = temp + cfg.warming_per_year * (year - cfg.first_year)
    temp = temp + cfg.temp_anomaly_std * _ar1(_smooth_field(rng, (n, cfg.rows, cfg.cols), cfg.smoothness), 0.7)
    temp = np.broadcast_to(temp, (n, cfg.rows, cfg.cols)).copy()

    wet = 0.6 * (lon_frac - 0.5)  # drier west, wetter east
    rain_season = 0.3 * np.sin(2.0 * np.pi * (t + 0.5) / n)
    latent = _ar1(_smooth_field(rng, (n, cfg.rows, cfg.cols), cfg.smoothness), 0.5)
    latent = latent + wet[None, None, :] + rain_season[:, None, None]
    precip = cfg.precip_scale * np.maximum(0.0, latent - cfg.precip_threshold)
    return temp, precip


def monthly_npp(regime: RegimeParams, rng: np.random.Generator, interannual_std: float) -> np.ndarray:
    m = np.arange(12)
    base = np.maximum(0.0, np.sin(2.0 * np.pi * (m - 3) / 12.0)) + 0.05
    factor = max(0.0, 1.0 + interannual_std * rng.standard_normal())
    return regime.npp_scale * base * factor


def build_benchmark(cfg: GeneratorConfig) -> Dataset:
    """Generate a full benchmark dataset; deterministic in ``cfg`` (including the seed)."""
    cfg.validate()
    cal = cfg.calendar
    layout = regime_layout(cfg)
    table = regime_table(cfg)
    train, aux, test = cfg.split_years()
    half = cfg.rows / 2.0

    sites: Dict[str, SiteMeta] = {}
    for r in range(cfg.rows):
        for c in range(cfg.cols):
            sid = site_id(r, c)
            sites[sid] = SiteMeta(sid, cfg.lat0 + cfg.dlat * r, cfg.lon0 + cfg.dlon * c,
                                  "south" if r < half else "north")

    samples = {}
    for year in cfg.years:
        temp, precip = grid_drivers(cfg, year)
        for r in range(cfg.rows):
            for c in range(cfg.cols):
                sid = site_id(r, c)
                k = int(layout[r, c])
                regime = table[k]
                npp = monthly_npp(regime, stream(cfg.seed, "npp", sid, year), cfg.npp_interannual_std)
                y, _ = simulate_site_year(
                    temp[:, r, c], precip[:, r, c], npp, regime, cal,
                    stream(cfg.seed, "noise", sid, year), cfg.noise_std,
                    cfg.bucket_a, cfg.bucket_b, cfg.w_init)
                onehot = np.zeros(cfg.n_regimes)
                onehot[k] = 1.0
                samples[(sid, year)] = SiteYearSample(
                    sid, year,
                    x_daily=np.stack([temp[:, r, c], precip[:, r, c]], axis=1),
                    x_monthly=npp[:, None],
                    x_yearly=np.array([(year - cfg.first_year) / 10.0]),
                    x_static=np.concatenate([[regime.ph], onehot]),
                    y=y, mask=np.ones(cal.days_per_year, dtype=bool),
                )
    splits = {
        "train": [k for k in samples if k[1] in train],
        "auxiliary": [k for k in samples if k[1] == aux],
        "test": [k for k in samples if k[1] in test],
    }
    names = {
        "daily": ("tair", "precip"),
        "monthly": ("npp",),
        "yearly": ("trend",),
        "static": ("ph",) + tuple(f"regime_{k}" for k in range(cfg.n_regimes)),
    }
    return Dataset(sites, samples, splits, cal, names)


def resimulate(sample: SiteYearSample, regime: RegimeParams, cfg: GeneratorConfig) -> np.ndarray:
    """Noise-free flux recomputed from a stored sample's drivers."""
    y, _ = simulate_site_year(sample.x_daily[:, 0], sample.x_daily[:, 1], sample.x_monthly[:, 0],
                              regime, cfg.calendar, None, 0.0, cfg.bucket_a, cfg.bucket_b, cfg.w_init)
    return y
