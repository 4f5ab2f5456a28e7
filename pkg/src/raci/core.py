"""Site-year data model, calendar arithmetic and dataset validation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

SPLITS = ("train", "auxiliary", "test")
BLOCKS = ("daily", "monthly", "yearly", "static")

Key = Tuple[str, int]


class DatasetError(ValueError):
    """Raised when a dataset cannot be used for the requested operation."""


@dataclass(frozen=True)
class SiteMeta:
    site_id: str
    lat: float
    lon: float
    region_tag: Optional[str] = None

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"site {self.site_id}: lat {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"site {self.site_id}: lon {self.lon} outside [-180, 180]")


DEFAULT_MONTH_LENGTHS = (31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31)


@dataclass(frozen=True)
class CalendarSpec:
    """Fixed no-leap calendar: ``days_per_year`` split into 12 contiguous months."""

    days_per_year: int = 365
    month_lengths: Tuple[int, ...] = DEFAULT_MONTH_LENGTHS

    def __post_init__(self):
        object.__setattr__(self, "month_lengths", tuple(int(m) for m in self.month_lengths))
        if len(self.month_lengths) != 12:
            raise ValueError("calendar needs exactly 12 months")
        if any(m <= 0 for m in self.month_lengths):
            raise ValueError("month lengths must be positive")
        if sum(self.month_lengths) != self.days_per_year:
            raise ValueError(
                f"month lengths sum to {sum(self.month_lengths)}, expected {self.days_per_year}"
            )

    @classmethod
    def uniform(cls, days_per_month: int) -> "CalendarSpec":
        return cls(12 * days_per_month, (days_per_month,) * 12)

    @property
    def month_starts(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.month_lengths)[:-1]]).astype(np.intp)

    @property
    def day_to_month(self) -> np.ndarray:
        return np.repeat(np.arange(12, dtype=np.intp), self.month_lengths)


def month_of_day(day: int, calendar: CalendarSpec) -> int:
    """Month index (0-based) that contains ``day``."""
    if not 0 <= day < calendar.days_per_year:
        raise IndexError(f"day {day} outside [0, {calendar.days_per_year})")
    return int(np.searchsorted(np.cumsum(calendar.month_lengths), day, side="right"))


@dataclass(frozen=True, eq=False)
class SiteYearSample:
    site_id: str
    year: int
    x_daily: np.ndarray
    x_monthly: np.ndarray
    x_yearly: np.ndarray
    x_static: np.ndarray
    y: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        for name in ("x_daily", "x_monthly", "x_yearly", "x_static", "y"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        m = np.array(self.mask, dtype=bool)
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)

    @property
    def key(self) -> Key:
        return (self.site_id, int(self.year))

    @property
    def x_regime(self) -> np.ndarray:
        return np.concatenate([self.x_yearly, self.x_static])

    def equals(self, other: "SiteYearSample") -> bool:
        if self.key != other.key:
            return False
        if not np.array_equal(self.mask, other.mask):
            return False
        return all(
            np.array_equal(getattr(self, f), getattr(other, f), equal_nan=True)
            for f in ("x_daily", "x_monthly", "x_yearly", "x_static", "y")
        )


@dataclass(frozen=True, eq=False)
class Dataset:
    sites: Dict[str, SiteMeta]
    samples: Dict[Key, SiteYearSample]
    splits: Dict[str, Tuple[Key, ...]]
    calendar: CalendarSpec = field(default_factory=CalendarSpec)
    feature_names: Dict[str, Tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        splits = {s: tuple(sorted((str(k[0]), int(k[1])) for k in self.splits.get(s, ()))) for s in SPLITS}
        object.__setattr__(self, "splits", splits)
        if not self.feature_names and self.samples:
            first = next(iter(self.samples.values()))
            dims = _block_dims(first)
            names = {b: tuple(f"{b}_{i}" for i in range(dims[b])) for b in BLOCKS}
            object.__setattr__(self, "feature_names", names)
        else:
            object.__setattr__(
                self, "feature_names", {b: tuple(self.feature_names.get(b, ())) for b in BLOCKS}
            )

    @property
    def dims(self) -> Dict[str, int]:
        return {b: len(self.feature_names[b]) for b in BLOCKS}

    def split_samples(self, split: str) -> List[SiteYearSample]:
        return [self.samples[k] for k in self.splits[split]]

    def years(self) -> List[int]:
        return sorted({k[1] for k in self.samples})

    def equals(self, other: "Dataset") -> bool:
        if self.sites != other.sites or self.calendar != other.calendar:
            return False
        if self.splits != other.splits or self.feature_names != other.feature_names:
            return False
        if set(self.samples) != set(other.samples):
            return False
        return all(self.samples[k].equals(other.samples[k]) for k in self.samples)


def _block_dims(sample: SiteYearSample) -> Dict[str, int]:
    return {
        "daily": sample.x_daily.shape[1] if sample.x_daily.ndim == 2 else -1,
        "monthly": sample.x_monthly.shape[1] if sample.x_monthly.ndim == 2 else -1,
        "yearly": sample.x_yearly.shape[0] if sample.x_yearly.ndim == 1 else -1,
        "static": sample.x_static.shape[0] if sample.x_static.ndim == 1 else -1,
    }


def validate_dataset(ds: Dataset) -> List[str]:
    """Return every invariant violation found in ``ds``; an empty list means valid.

    Each entry names the offending sample key (or split) and field.
    """
    out: List[str] = []
    cal = ds.calendar
    dims = ds.dims
    seen: Dict[Key, str] = {}
    for split in SPLITS:
        for key in ds.splits[split]:
            if key in seen and seen[key] != split:
                out.append(f"split overlap: {key} in both {seen[key]} and {split}")
            seen.setdefault(key, split)
            if key not in ds.samples:
                out.append(f"missing sample: {key} listed in {split} split")
    for key, s in sorted(ds.samples.items()):
        if s.site_id not in ds.sites:
            out.append(f"unknown site: {key} site_id")
        shapes = {
            "x_daily": (cal.days_per_year, dims["daily"]),
            "x_monthly": (12, dims["monthly"]),
            "x_yearly": (dims["yearly"],),
            "x_static": (dims["static"],),
            "y": (cal.days_per_year,),
        }
        for name, shape in shapes.items():
            arr = getattr(s, name)
            if arr.shape != shape:
                out.append(f"shape mismatch: {key} {name} has {arr.shape}, expected {shape}")
                continue
            if name == "y":
                bad = ~np.isfinite(arr) & s.mask if s.mask.shape == arr.shape else ~np.isfinite(arr)
                if bad.any():
                    out.append(f"non-finite: {key} y at {int(bad.sum())} observed positions")
            elif not np.isfinite(arr).all():
                out.append(f"non-finite: {key} {name}")
        if s.mask.shape != (cal.days_per_year,):
            out.append(f"mask/length mismatch: {key} mask has {s.mask.shape}")
    return out


def replicate_for_baseline(sample: SiteYearSample, calendar: CalendarSpec) -> np.ndarray:
    """Daily design matrix with coarse blocks repeated to daily resolution.

    Column order is daily, monthly, yearly, static (see ``baseline_feature_names``).
    """
    n = calendar.days_per_year
    monthly = sample.x_monthly[calendar.day_to_month]
    yearly = np.broadcast_to(sample.x_yearly, (n, sample.x_yearly.shape[0]))
    static = np.broadcast_to(sample.x_static, (n, sample.x_static.shape[0]))
    return np.concatenate([sample.x_daily, monthly, yearly, static], axis=1)


def baseline_feature_names(feature_names: Mapping[str, Sequence[str]]) -> List[str]:
    return [f"{b}:{n}" for b in BLOCKS for n in feature_names.get(b, ())]


def subset_sites(ds: Dataset, site_ids: Sequence[str]) -> Dataset:
    """Restrict ``ds`` to the given sites, keeping splits and calendar."""
    keep = set(site_ids)
    return Dataset(
        sites={k: v for k, v in ds.sites.items() if k in keep},
        samples={k: v for k, v in ds.samples.items() if k[0] in keep},
        splits={s: [k for k in ds.splits[s] if k[0] in keep] for s in SPLITS},
        calendar=ds.calendar,
        feature_names=ds.feature_names,
    )


def thin_observations(ds: Dataset, keep_fraction: float, rng: np.random.Generator,
                      splits: Sequence[str] = ("train",)) -> Dataset:
    """Mask out a random share of daily targets in the given splits (tower-style gaps)."""
    targets = {k for s in splits for k in ds.splits[s]}
    samples = {}
    for key in sorted(ds.samples):
        s = ds.samples[key]
        if key in targets:
            keep = rng.random(s.mask.shape[0]) < keep_fraction
            mask = s.mask & keep
            y = np.where(mask, s.y, 0.0)
            s = SiteYearSample(s.site_id, s.year, s.x_daily, s.x_monthly, s.x_yearly,
                               s.x_static, y, mask)
        samples[key] = s
    return Dataset(ds.sites, samples, ds.splits, ds.calendar, ds.feature_names)
