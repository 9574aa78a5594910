"""Population configuration and profile sampling.

Attributes follow a chain: region -> occupation -> (income tier, age band).
Behavioural priors (daily intensity, amount scale, diurnal rhythm) are then
derived from the sampled attributes plus idiosyncratic noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import AccountRef, ConfigError, EntityProfile, MerchantProfile, Profile
from .rng import Streams

REGIONS = ("north", "south", "east", "west", "central", "coastal", "highland", "metro")
AGE_BANDS = ("18-24", "25-34", "35-44", "45-54", "55-64", "65+")
OCCUPATIONS = ("student", "retail", "manufacturing", "healthcare", "education",
               "finance", "technology", "public_sector", "self_employed", "retired")
INCOME_TIERS = ("very_low", "low", "middle", "upper_middle", "high")
BUSINESS_TYPES = ("grocery", "restaurant", "fuel", "pharmacy", "electronics", "apparel",
                  "utilities", "telecom", "travel", "entertainment", "online_retail",
                  "professional_services")

_REGION_WEIGHTS = (0.16, 0.14, 0.13, 0.12, 0.15, 0.10, 0.06, 0.14)
_OCCUPATION_BASE = (0.08, 0.14, 0.12, 0.09, 0.07, 0.06, 0.08, 0.10, 0.10, 0.16)
# multiplicative tilts of the base occupation mix per region
_OCCUPATION_TILT = {
    "metro": {"finance": 2.2, "technology": 2.0, "manufacturing": 0.5, "retired": 0.7},
    "central": {"public_sector": 1.6, "finance": 1.3},
    "highland": {"manufacturing": 1.5, "self_employed": 1.6, "technology": 0.4, "finance": 0.4},
    "coastal": {"retired": 1.5, "retail": 1.3},
    "north": {"manufacturing": 1.4},
    "south": {"self_employed": 1.3, "retail": 1.2},
    "east": {"student": 1.4, "education": 1.3},
    "west": {"healthcare": 1.3},
}
_INCOME_GIVEN_OCCUPATION = {
    "student": (0.55, 0.30, 0.12, 0.03, 0.00),
    "retail": (0.20, 0.45, 0.28, 0.06, 0.01),
    "manufacturing": (0.10, 0.35, 0.40, 0.12, 0.03),
    "healthcare": (0.03, 0.15, 0.42, 0.28, 0.12),
    "education": (0.03, 0.20, 0.50, 0.22, 0.05),
    "finance": (0.01, 0.06, 0.28, 0.35, 0.30),
    "technology": (0.01, 0.06, 0.30, 0.38, 0.25),
    "public_sector": (0.03, 0.20, 0.50, 0.22, 0.05),
    "self_employed": (0.12, 0.22, 0.30, 0.20, 0.16),
    "retired": (0.20, 0.35, 0.30, 0.11, 0.04),
}
_AGE_GIVEN_OCCUPATION = {
    "student": (0.80, 0.18, 0.02, 0.00, 0.00, 0.00),
    "retail": (0.28, 0.30, 0.18, 0.13, 0.09, 0.02),
    "manufacturing": (0.10, 0.26, 0.26, 0.22, 0.14, 0.02),
    "healthcare": (0.06, 0.28, 0.27, 0.22, 0.15, 0.02),
    "education": (0.04, 0.26, 0.28, 0.24, 0.16, 0.02),
    "finance": (0.06, 0.34, 0.28, 0.19, 0.11, 0.02),
    "technology": (0.10, 0.42, 0.28, 0.14, 0.05, 0.01),
    "public_sector": (0.04, 0.22, 0.28, 0.26, 0.18, 0.02),
    "self_employed": (0.04, 0.20, 0.27, 0.25, 0.17, 0.07),
    "retired": (0.00, 0.00, 0.00, 0.02, 0.18, 0.80),
}
_BUSINESS_WEIGHTS = (0.16, 0.15, 0.08, 0.06, 0.05, 0.08, 0.07, 0.05, 0.05, 0.07, 0.10, 0.08)

# per income tier: intensity multiplier and log offset of the typical amount
_TIER_INTENSITY = (0.6, 0.8, 1.0, 1.3, 1.7)
_TIER_AMOUNT = (0.7, 0.85, 1.0, 1.2, 1.45)
# hour of the main activity peak per age band
_AGE_PEAK_HOUR = (20, 19, 18, 17, 14, 11)


def _normalize(weights, what: str) -> dict:
    items = dict(weights)
    total = 0.0
    for k, w in items.items():
        if not (isinstance(w, (int, float)) and math.isfinite(w)) or w < 0:
            raise ConfigError(f"{what}: weight for {k!r} must be a finite non-negative number")
        total += w
    if total <= 0:
        raise ConfigError(f"{what}: weights must have a positive sum")
    return {k: w / total for k, w in items.items()}


def _default_occupation_given_region() -> dict:
    out = {}
    for region in REGIONS:
        tilt = _OCCUPATION_TILT.get(region, {})
        row = {occ: base * tilt.get(occ, 1.0) for occ, base in zip(OCCUPATIONS, _OCCUPATION_BASE)}
        out[region] = _normalize(row, f"occupation|{region}")
    return out


@dataclass
class PopulationConfig:
    n_persons: int = 4800
    n_merchants: int = 200
    n_banks: int = 30
    bank_zipf: float = 0.8
    regions: dict = field(default_factory=lambda: dict(zip(REGIONS, _REGION_WEIGHTS)))
    occupation_given_region: dict = field(default_factory=_default_occupation_given_region)
    income_given_occupation: dict = field(
        default_factory=lambda: {k: dict(zip(INCOME_TIERS, v)) for k, v in _INCOME_GIVEN_OCCUPATION.items()})
    age_given_occupation: dict = field(
        default_factory=lambda: {k: dict(zip(AGE_BANDS, v)) for k, v in _AGE_GIVEN_OCCUPATION.items()})
    business_types: dict = field(default_factory=lambda: dict(zip(BUSINESS_TYPES, _BUSINESS_WEIGHTS)))
    merchant_regions: dict | None = None
    # behavioural priors
    intensity_median: float = 0.0205
    intensity_sigma: float = 2.0
    intensity_cap: float = 20.0
    tier_intensity: dict = field(default_factory=lambda: dict(zip(INCOME_TIERS, _TIER_INTENSITY)))
    amount_median: float = 60.0
    amount_sigma: float = 0.2
    tier_amount: dict = field(default_factory=lambda: dict(zip(INCOME_TIERS, _TIER_AMOUNT)))
    dispersion_mean: float = 0.5
    dispersion_sd: float = 0.15
    exploration_alpha: float = 2.0
    exploration_beta: float = 18.0
    merchant_scale_shape: float = 0.52
    merchant_scale_cap: float = 500.0
    # operating scales are rescaled to sum to this, so the pull of merchants
    # relative to other counterparties does not grow with the merchant count
    merchant_attraction: float = 150.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("n_persons", "n_merchants"):
            if int(getattr(self, name)) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.n_banks < 1:
            raise ConfigError("n_banks must be >= 1")
        self.regions = _normalize(self.regions, "regions")
        self.business_types = _normalize(self.business_types, "business_types")
        if self.merchant_regions is not None:
            self.merchant_regions = _normalize(self.merchant_regions, "merchant_regions")
            _check_keys(self.merchant_regions, self.regions, "merchant_regions")
        self.occupation_given_region = _normalize_table(self.occupation_given_region, self.regions, "occupation")
        occupations = _column_keys(self.occupation_given_region)
        self.income_given_occupation = _normalize_table(self.income_given_occupation, occupations, "income_tier")
        self.age_given_occupation = _normalize_table(self.age_given_occupation, occupations, "age_band")
        tiers = _column_keys(self.income_given_occupation)
        for name in ("tier_intensity", "tier_amount"):
            table = getattr(self, name)
            missing = set(tiers) - set(table)
            if missing:
                raise ConfigError(f"{name} lacks tiers {sorted(missing)}")
            if any(v <= 0 for v in table.values()):
                raise ConfigError(f"{name} values must be > 0")
        if self.intensity_median < 0 or self.intensity_sigma < 0 or self.intensity_cap < 0:
            raise ConfigError("intensity prior must be non-negative")
        if self.amount_median <= 0 or self.dispersion_mean <= 0:
            raise ConfigError("amount prior must be positive")
        if self.merchant_scale_shape <= 0 or self.merchant_scale_cap < 1 or self.merchant_attraction <= 0:
            raise ConfigError("merchant scale prior invalid")

    @classmethod
    def from_mapping(cls, data: dict) -> "PopulationConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown population keys: {sorted(unknown)}")
        return cls(**data)

    def marginals(self) -> dict:
        """Implied marginal distribution of each person attribute."""
        occ: dict = {}
        for region, p_r in self.regions.items():
            for o, p in self.occupation_given_region[region].items():
                occ[o] = occ.get(o, 0.0) + p_r * p
        income: dict = {}
        age: dict = {}
        for o, p_o in occ.items():
            for t, p in self.income_given_occupation[o].items():
                income[t] = income.get(t, 0.0) + p_o * p
            for a, p in self.age_given_occupation[o].items():
                age[a] = age.get(a, 0.0) + p_o * p
        return {"region": dict(self.regions), "occupation": occ, "income_tier": income,
                "age_band": age, "business_type": dict(self.business_types)}


def _check_keys(table, expected, what):
    missing = set(expected) - set(table)
    if missing:
        raise ConfigError(f"{what} lacks rows for {sorted(missing)}")


def _normalize_table(table, row_keys, what) -> dict:
    _check_keys(table, row_keys, f"{what} table")
    out = {row: _normalize(table[row], f"{what}|{row}") for row in table}
    cols = None
    for row in out.values():
        if cols is None:
            cols = list(row)
        elif set(row) != set(cols):
            raise ConfigError(f"{what} table rows use different categories")
    return out


def _column_keys(table) -> tuple:
    first = next(iter(table.values()))
    return tuple(first)


def _categorical(rng: np.random.Generator, probs: dict, size: int) -> np.ndarray:
    keys = list(probs)
    p = np.array([probs[k] for k in keys], dtype=float)
    idx = rng.choice(len(keys), size=size, p=p / p.sum())
    return np.array(keys, dtype=object)[idx] if size else np.array([], dtype=object)


def _conditional(rng: np.random.Generator, table: dict, parents: np.ndarray) -> np.ndarray:
    out = np.empty(len(parents), dtype=object)
    u = rng.random(len(parents))
    for parent in table:
        mask = parents == parent
        if not mask.any():
            continue
        keys = list(table[parent])
        cdf = np.cumsum([table[parent][k] for k in keys])
        cdf[-1] = 1.0
        pick = np.searchsorted(cdf, u[mask], side="right")
        out[mask] = np.array(keys, dtype=object)[np.minimum(pick, len(keys) - 1)]
    return out


def diurnal_curve(peak_hour: float, sharpness: float = 1.6, secondary_hour: float = 12.0,
                  secondary_weight: float = 0.45, night_floor: float = 0.02) -> tuple:
    """Normalised 24-hour activity curve with a main and a midday bump."""
    hours = np.arange(24)

    def bump(center):
        return np.exp(sharpness * np.cos(2 * np.pi * (hours - center) / 24.0))

    curve = bump(peak_hour) + secondary_weight * bump(secondary_hour)
    curve = curve / curve.max() + night_floor
    # quiet hours 1-5
    curve[1:6] *= 0.25
    curve = curve / curve.sum()
    return tuple(float(v) for v in curve)


def _unique_account_ids(rng: np.random.Generator, n: int) -> list[str]:
    if n == 0:
        return []
    values = rng.choice(16**8, size=n, replace=False)
    return [f"{int(v):08X}" for v in values]


def sample_profiles(config: PopulationConfig, seed: int | Streams) -> dict[AccountRef, Profile]:
    """Persons first, then merchants; deterministic in ``(config, seed)``."""
    streams = seed if isinstance(seed, Streams) else Streams(seed)
    n_p, n_m = int(config.n_persons), int(config.n_merchants)
    rng = streams.get("population")

    ids = _unique_account_ids(rng, n_p + n_m)
    bank_w = 1.0 / np.arange(1, config.n_banks + 1) ** config.bank_zipf
    bank_ids = rng.choice(config.n_banks, size=n_p + n_m, p=bank_w / bank_w.sum())
    refs = [AccountRef(str(int(b)), a) for b, a in zip(bank_ids, ids)]

    regions = _categorical(rng, config.regions, n_p)
    occupations = _conditional(rng, config.occupation_given_region, regions)
    tiers = _conditional(rng, config.income_given_occupation, occupations)
    ages = _conditional(rng, config.age_given_occupation, occupations)

    noise_int = rng.standard_normal(n_p)
    noise_amt = rng.standard_normal(n_p)
    noise_disp = rng.standard_normal(n_p)
    peak_jitter = rng.normal(0.0, 1.5, n_p)
    explore = rng.beta(config.exploration_alpha, config.exploration_beta, n_p) if n_p else np.array([])

    profiles: dict[AccountRef, Profile] = {}
    for i in range(n_p):
        tier = tiers[i]
        intensity = min(config.intensity_cap,
                        config.intensity_median * config.tier_intensity[tier] * math.exp(config.intensity_sigma * noise_int[i]))
        scale = math.log(config.amount_median * config.tier_amount[tier]) + config.amount_sigma * noise_amt[i]
        disp = max(0.2, config.dispersion_mean + config.dispersion_sd * noise_disp[i])
        age_idx = AGE_BANDS.index(ages[i]) if ages[i] in AGE_BANDS else 2
        peak = _AGE_PEAK_HOUR[age_idx] + peak_jitter[i]
        profiles[refs[i]] = EntityProfile(
            account=refs[i], region=str(regions[i]), age_band=str(ages[i]),
            occupation=str(occupations[i]), income_tier=str(tier),
            base_daily_intensity=float(intensity), amount_scale=float(scale),
            amount_dispersion=float(disp), diurnal_profile=diurnal_curve(peak),
            exploration_rate=float(explore[i]),
        )

    m_regions = _categorical(rng, config.merchant_regions or config.regions, n_m)
    m_types = _categorical(rng, config.business_types, n_m)
    u = rng.random(n_m)
    # Pareto operating scale, capped
    scales = np.minimum((1.0 - u) ** (-1.0 / config.merchant_scale_shape), config.merchant_scale_cap)
    if n_m:
        scales = scales * (config.merchant_attraction / scales.sum())
    for j in range(n_m):
        ref = refs[n_p + j]
        profiles[ref] = MerchantProfile(account=ref, region=str(m_regions[j]),
                                        business_type=str(m_types[j]), operating_scale=float(scales[j]))
    return profiles
