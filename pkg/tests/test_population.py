import math

import numpy as np
import pytest

from amlsynth.model import ConfigError, EntityProfile, MerchantProfile
from amlsynth.population import PopulationConfig, diurnal_curve, sample_profiles


def total_variation(counts: dict, probs: dict) -> float:
    n = sum(counts.values())
    keys = set(counts) | set(probs)
    return 0.5 * sum(abs(counts.get(k, 0) / n - probs.get(k, 0.0)) for k in keys)


def test_empty_population():
    assert sample_profiles(PopulationConfig(n_persons=0, n_merchants=0), 1) == {}


def test_same_seed_same_profiles():
    cfg = PopulationConfig(n_persons=200, n_merchants=20)
    assert sample_profiles(cfg, 7) == sample_profiles(cfg, 7)
    assert sample_profiles(cfg, 7) != sample_profiles(cfg, 8)


def test_persons_then_merchants():
    profiles = sample_profiles(PopulationConfig(n_persons=30, n_merchants=5), 3)
    kinds = [type(p) for p in profiles.values()]
    assert kinds == [EntityProfile] * 30 + [MerchantProfile] * 5
    assert len({ref.key for ref in profiles}) == 35


def test_marginals_within_total_variation():
    cfg = PopulationConfig(n_persons=10_000, n_merchants=2_000)
    profiles = sample_profiles(cfg, 2024)
    persons = [p for p in profiles.values() if isinstance(p, EntityProfile)]
    merchants = [p for p in profiles.values() if isinstance(p, MerchantProfile)]
    target = cfg.marginals()
    for attr in ("region", "occupation", "income_tier", "age_band"):
        counts: dict = {}
        for p in persons:
            counts[getattr(p, attr)] = counts.get(getattr(p, attr), 0) + 1
        assert total_variation(counts, target[attr]) < 0.02, attr
    counts = {}
    for m in merchants:
        counts[m.business_type] = counts.get(m.business_type, 0) + 1
    assert total_variation(counts, target["business_type"]) < 0.04


def test_merchant_scales_sum_to_attraction():
    cfg = PopulationConfig(n_persons=10, n_merchants=50)
    profiles = sample_profiles(cfg, 5)
    total = sum(p.operating_scale for p in profiles.values() if isinstance(p, MerchantProfile))
    assert total == pytest.approx(cfg.merchant_attraction)


def test_intensity_capped_and_positive():
    cfg = PopulationConfig(n_persons=3000, n_merchants=0, intensity_cap=0.5)
    vals = [p.base_daily_intensity for p in sample_profiles(cfg, 9).values()]
    assert max(vals) <= 0.5 and min(vals) > 0


def test_diurnal_curve_is_distribution():
    for peak in (0.0, 11.5, 23.9):
        c = diurnal_curve(peak)
        assert len(c) == 24 and min(c) >= 0 and math.isclose(sum(c), 1.0, abs_tol=1e-12)


@pytest.mark.parametrize("bad", [dict(n_persons=-1), dict(n_banks=0), dict(intensity_median=-1.0),
                                 dict(regions={"north": 0.0})])
def test_invalid_config(bad):
    with pytest.raises(ConfigError):
        PopulationConfig(**bad)


def test_from_mapping_rejects_unknown():
    with pytest.raises(ConfigError):
        PopulationConfig.from_mapping({"n_people": 3})
    assert PopulationConfig.from_mapping({"n_persons": 3}).n_persons == 3


def test_region_conditioning_respected():
    # occupation only ever "student" in region north
    occ = PopulationConfig().occupation_given_region
    occ = {r: dict(v) for r, v in occ.items()}
    occ["north"] = {k: (1.0 if k == "student" else 0.0) for k in occ["north"]}
    cfg = PopulationConfig(n_persons=2000, n_merchants=0, occupation_given_region=occ)
    for p in sample_profiles(cfg, 4).values():
        if p.region == "north":
            assert p.occupation == "student"
    assert np.isclose(sum(cfg.occupation_given_region["north"].values()), 1.0)
