from __future__ import annotations

import numpy as np
import pytest

from raci.core import CalendarSpec, Dataset, SiteMeta, SiteYearSample
from raci.synthetic import GeneratorConfig, build_benchmark

TOY_CAL = CalendarSpec.uniform(2)


def make_sample(site, year, cal=TOY_CAL, d_daily=2, d_monthly=1, d_yearly=1, d_static=2, seed=0, y=None,
                mask=None):
    rng = np.random.default_rng(seed)
    n = cal.days_per_year
    return SiteYearSample(
        site, year,
        rng.normal(size=(n, d_daily)), rng.normal(size=(12, d_monthly)),
        rng.normal(size=d_yearly), rng.normal(size=d_static),
        rng.normal(size=n) if y is None else y,
        np.ones(n, dtype=bool) if mask is None else mask,
    )


def make_dataset(sites=("a", "b"), train=(2000, 2001), aux=(2002,), test=(2003,), cal=TOY_CAL):
    metas = {s: SiteMeta(s, 10.0 + i, 20.0 + i) for i, s in enumerate(sites)}
    samples = {}
    static = {s: np.random.default_rng(100 + i).normal(size=2) for i, s in enumerate(sites)}
    for i, s in enumerate(sites):
        for j, yr in enumerate((*train, *aux, *test)):
            base = make_sample(s, yr, cal, seed=31 * i + j)
            samples[(s, yr)] = SiteYearSample(s, yr, base.x_daily, base.x_monthly, base.x_yearly,
                                              static[s], base.y, base.mask)
    splits = {
        "train": [(s, y) for s in sites for y in train],
        "auxiliary": [(s, y) for s in sites for y in aux],
        "test": [(s, y) for s in sites for y in test],
    }
    return Dataset(metas, samples, splits, cal)


@pytest.fixture
def toy_dataset():
    return make_dataset()


@pytest.fixture(scope="session")
def small_benchmark():
    cfg = GeneratorConfig(rows=3, cols=3, first_year=2000, last_year=2004, n_test_years=1,
                          days_per_year=48, month_lengths=(4,) * 12, seed=3)
    return build_benchmark(cfg)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list = []


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2} {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
