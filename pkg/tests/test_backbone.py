import math

import numpy as np
import pytest
from scipy import stats

from amlsynth.backbone import (
    AmountModel, BackboneConfig, InteractionState, MixtureWeights, Population, ScenarioConfig,
    ScenarioModifiers, generate_backbone, initial_scenario, sample_event_attributes, sample_initiators,
    select_counterparty, step_scenario, update_interaction_state,
)
from amlsynth.fidelity import fit_power_law
from amlsynth.model import AccountRef, ConfigError, EntityProfile, MerchantProfile, Transaction
from amlsynth.population import PopulationConfig, REGIONS
from amlsynth.rng import Streams

FLAT = tuple([1.0 / 24] * 24)


def person(k, region="north", intensity=0.5, scale=4.0, disp=0.5):
    ref = AccountRef("1", f"P{k}")
    return ref, EntityProfile(ref, region, "25-34", "retail", "middle", intensity, scale, disp, FLAT, 0.1)


def merchant(k, scale, region="north"):
    ref = AccountRef("9", f"M{k}")
    return ref, MerchantProfile(ref, region, "grocery", scale)


def neutral(regions=REGIONS):
    return initial_scenario(regions)


# ---------------------------------------------------------------------------------
# scenario controller


def test_scenario_identity_without_shocks():
    cfg = ScenarioConfig(shock_sd=0.0, region_shock_sd=0.0, weekend_multiplier=1.0)
    s = neutral()
    for day in range(10):
        s = step_scenario(day, s, cfg, np.random.default_rng(day))
        assert s.global_intensity_factor == 1.0
        assert s.region_mix == pytest.approx(neutral().region_mix)


def test_holiday_multiplier():
    cfg = ScenarioConfig(shock_sd=0.0, region_shock_sd=0.0, weekend_multiplier=1.0, holidays={0: 1.5})
    s = step_scenario(0, neutral(), cfg, np.random.default_rng(0))
    assert s.global_intensity_factor == 1.5
    # the walk runs on the pre-calendar level, so the next day is back to 1
    assert step_scenario(1, s, cfg, np.random.default_rng(1)).global_intensity_factor == 1.0


def test_factor_within_clamp_band_over_a_year():
    cfg = BackboneConfig(n_days=365, scenario=ScenarioConfig(shock_sd=0.2, shock_bound=0.5,
                                                              holidays={10: 3.0, 20: 0.1}))
    streams = Streams(5)
    s = neutral()
    for day in range(365):
        s = step_scenario(day, s, cfg, streams.get("scenario", day))
        assert cfg.scenario.min_factor <= s.global_intensity_factor <= cfg.scenario.max_factor
        assert math.isclose(sum(s.region_mix.values()), 1.0, abs_tol=1e-9)


def test_scenario_must_advance_one_day():
    with pytest.raises(ValueError):
        step_scenario(3, neutral(), ScenarioConfig(), np.random.default_rng(0))


def test_region_mix_off_simplex_rejected():
    with pytest.raises(ConfigError):
        ScenarioModifiers(0, 1.0, {"north": 0.7, "south": 0.7})


# ---------------------------------------------------------------------------------
# initiators


def test_zero_intensity_gives_no_initiators():
    profiles = dict([person(k, intensity=0.0) for k in range(5)])
    assert sample_initiators(0, profiles, neutral(), np.random.default_rng(0)) == []


def test_poisson_mean_per_window():
    ref, p = person(0, intensity=48.0)          # flat diurnal curve: 2 events per hour
    pop = Population({ref: p})
    rng = np.random.default_rng(1)
    total = 0
    for h in range(100_000):
        for _, c in sample_initiators(h % 24, pop, neutral(), rng):
            total += c
    assert abs(total / 100_000 - 2.0) < 0.02


def test_doubling_factor_doubles_volume():
    pop = Population(dict([person(k, intensity=0.3) for k in range(1000)]))
    base = neutral()
    double = ScenarioModifiers(0, 2.0, base.region_mix)
    n1 = sum(c for h in range(2000) for _, c in sample_initiators(h % 24, pop, base, np.random.default_rng(h)))
    n2 = sum(c for h in range(2000) for _, c in sample_initiators(h % 24, pop, double, np.random.default_rng(h)))
    assert abs(n2 / n1 - 2.0) / 2.0 < 0.02


def test_hour_outside_horizon():
    with pytest.raises(ValueError):
        sample_initiators(48, dict([person(0)]), neutral(), np.random.default_rng(0), horizon_hours=48)


# ---------------------------------------------------------------------------------
# counterparties


def test_memory_only_returns_remembered_partner():
    profiles = dict([person(0), person(1), person(2), merchant(0, 1.0)])
    a, b = AccountRef("1", "P0"), AccountRef("1", "P1")
    state = InteractionState(0.99, last_window=0)
    state.set_weight(a, b, 1.0)
    w = MixtureWeights(0.0, 1.0, 0.0, 0.0)
    pop = Population(profiles)
    rng = np.random.default_rng(3)
    picks = {select_counterparty(a, state, pop, neutral(), w, rng) for _ in range(500)}
    assert picks == {b}


def test_exploration_uniform_over_candidates():
    profiles = dict([person(k) for k in range(6)] + [merchant(k, 1.0 + k) for k in range(3)])
    init = AccountRef("1", "P0")
    pop = Population(profiles)
    w = MixtureWeights(0.0, 0.0, 0.0, 1.0)
    rng = np.random.default_rng(4)
    counts: dict = {}
    for _ in range(100_000):
        c = select_counterparty(init, None, pop, neutral(), w, rng)
        counts[c] = counts.get(c, 0) + 1
    assert init not in counts and len(counts) == 8
    assert stats.chisquare(list(counts.values())).pvalue > 0.01


def test_merchant_attraction_proportional_to_scale():
    profiles = dict([person(0), merchant(0, 3.0), merchant(1, 1.0)])
    pop = Population(profiles)
    w = MixtureWeights(0.0, 0.0, 1.0, 0.0)
    rng = np.random.default_rng(5)
    picks = [select_counterparty(AccountRef("1", "P0"), None, pop, neutral(), w, rng) for _ in range(100_000)]
    big = sum(1 for c in picks if c.account_id == "M0")
    ratio = big / (len(picks) - big)
    assert abs(ratio / 3.0 - 1.0) < 0.05


# ---------------------------------------------------------------------------------
# event attributes


def test_lognormal_body_moments():
    ref, p = person(0, scale=4.2, disp=0.6)
    other, q = person(1)
    pop = Population({ref: p, other: q})
    cfg = BackboneConfig(amount=AmountModel(p_tail=0.0))
    rng = np.random.default_rng(6)
    logs = np.log([sample_event_attributes(ref, other, 5, pop, rng, cfg).amount_paid for _ in range(100_000)])
    se = 0.6 / math.sqrt(len(logs))
    assert abs(logs.mean() - 4.2) < 5 * se
    assert abs(logs.std() / 0.6 - 1.0) < 0.01
    assert abs(stats.skew(logs)) < 0.05 and abs(stats.kurtosis(logs)) < 0.1


def test_event_attributes_deterministic():
    profiles = dict([person(0), merchant(0, 1.0)])
    a, m = list(profiles)
    t1 = sample_event_attributes(a, m, 30, profiles, Streams(1).get("e", 3))
    t2 = sample_event_attributes(a, m, 30, profiles, Streams(1).get("e", 3))
    assert t1 == t2
    cfg = BackboneConfig()
    assert cfg.origin + 30 * 3600 <= t1.timestamp < cfg.origin + 31 * 3600
    assert not t1.is_laundering


def test_self_pair_rejected():
    profiles = dict([person(0)])
    with pytest.raises(ValueError):
        sample_event_attributes(*[list(profiles)[0]] * 2, 0, profiles, np.random.default_rng(0))


def test_amount_tail_exponent():
    from amlsynth.backbone import _attribute_columns
    profiles = dict([person(0, scale=4.0), merchant(0, 1.0)])
    pop = Population(profiles)
    cfg = BackboneConfig(amount=AmountModel(p_tail=0.01, tail_alpha=2.9))
    U = np.random.default_rng(7).random((1_000_000, 8))
    _, amount, _ = _attribute_columns(U, np.zeros(len(U), dtype=np.int64), np.ones(len(U), dtype=np.int64),
                                      0, pop, cfg, cfg.origin)
    fit = fit_power_law(amount, "auto", compare=False)
    assert 2.6 <= fit.alpha <= 3.2


# ---------------------------------------------------------------------------------
# interaction state


def test_decay_one_window():
    s = InteractionState(0.9, last_window=0)
    s.set_weight("A", "B", 1.0)
    update_interaction_state(s, [], 1)
    assert s.weight("A", "B") == pytest.approx(0.9, rel=1e-12)


def test_first_interaction_weight_one():
    s = InteractionState(0.9)
    a, b = AccountRef("1", "A"), AccountRef("1", "B")
    tx = Transaction(0, a, b, 1.0, "USD", 1.0, "USD", "mobile")
    update_interaction_state(s, [tx], 0)
    assert s.weight(a, b) == 1.0


@pytest.mark.parametrize("gamma", [0.5, 0.9, 0.995])
def test_decay_closed_form(gamma):
    s = InteractionState(gamma, last_window=0)
    s.set_weight("A", "B", 2.5)
    for k in range(1, 101):
        update_interaction_state(s, [], k)
        assert s.weight("A", "B") == pytest.approx(2.5 * gamma ** k, rel=1e-9)


def test_decay_with_gaps_and_hotspots():
    s = InteractionState(0.8)
    update_interaction_state(s, [("A", "B"), ("A", "B")], 0, region_of=lambda c: "r1")
    update_interaction_state(s, [("A", "C")], 5, region_of=lambda c: "r2")
    assert s.weight("A", "B") == pytest.approx(2 * 0.8 ** 5)
    assert s.weight("A", "C") == 1.0
    assert s.hotspot("r1") == pytest.approx(2 * 0.8 ** 5)
    with pytest.raises(ValueError):
        update_interaction_state(s, [], 5)


# ---------------------------------------------------------------------------------
# full loop


def test_idle_single_person_empty_log():
    ref, p = person(0, intensity=0.0)
    log = generate_backbone(BackboneConfig(n_days=1), {ref: p}, 1)
    assert len(log) == 0


def test_backbone_deterministic_sorted_benign():
    pop = PopulationConfig(n_persons=300, n_merchants=20)
    a = generate_backbone(BackboneConfig(n_days=5), pop, 11)
    b = generate_backbone(BackboneConfig(n_days=5), pop, 11)
    c = generate_backbone(BackboneConfig(n_days=5), pop, 12)
    assert a.digest() == b.digest() != c.digest()
    assert a.is_time_sorted() and not a.is_laundering.any() and a.violations() == []
    assert a.timestamp.min() >= a.origin and a.timestamp.max() < a.horizon_end


def test_scenario_changes_volume_not_attributes():
    # low intensities: a person rarely has two events in one hour, so per-person
    # log order equals event order
    pop = PopulationConfig(n_persons=400, n_merchants=20, intensity_median=0.05, intensity_cap=0.4)
    quiet = BackboneConfig(n_days=10, receipt_boost=0.0,
                           scenario=ScenarioConfig(shock_sd=0.0, region_shock_sd=0.0, weekend_multiplier=1.0))
    busy = BackboneConfig(n_days=10, receipt_boost=0.0,
                          scenario=ScenarioConfig(shock_sd=0.0, region_shock_sd=0.0, weekend_multiplier=1.0,
                                                  holidays={d: 1.6 for d in range(10)}))
    a = generate_backbone(quiet, pop, 3)
    b = generate_backbone(busy, pop, 3)
    assert len(b) > 1.3 * len(a)
    checked = 0
    for k in np.unique(a.src):
        ha = (a.timestamp[a.src == k] - a.origin) // 3600
        hb = (b.timestamp[b.src == k] - b.origin) // 3600
        if len(np.unique(ha)) < len(ha) or len(np.unique(hb)) < len(hb):
            continue
        m = min(len(ha), len(hb))
        assert np.array_equal(a.amount_paid[a.src == k][:m], b.amount_paid[b.src == k][:m])
        checked += 1
    assert checked > 50


def test_heavy_tailed_participation():
    log = generate_backbone(BackboneConfig(n_days=30), PopulationConfig(n_persons=2400, n_merchants=100), 21)
    counts = np.bincount(np.concatenate([log.src, log.dst]))
    counts = counts[counts > 0]
    assert stats.skew(counts) > 2
    assert counts.max() / np.median(counts) > 10


def repeated_pair_share(log) -> float:
    key = log.src.astype(np.int64) * len(log.accounts) + log.dst
    return 1.0 - len(np.unique(key)) / len(key)


def test_memory_raises_repeated_partner_share():
    pop = PopulationConfig(n_persons=4800, n_merchants=200)
    with_memory = generate_backbone(BackboneConfig(n_days=30), pop, 1)
    w = MixtureWeights()
    rest = w.w_local + w.w_merchant + w.w_explore
    no_memory = BackboneConfig(n_days=30, weights=MixtureWeights(w.w_local / rest, 0.0, w.w_merchant / rest,
                                                                 w.w_explore / rest))
    without = generate_backbone(no_memory, pop, 1)
    assert repeated_pair_share(with_memory) - repeated_pair_share(without) >= 0.10


@pytest.mark.parametrize("bad", [dict(n_days=0), dict(gamma=1.0), dict(start="2023-13-01"),
                                 dict(person_formats={"gold": 1.0})])
def test_invalid_backbone_config(bad):
    with pytest.raises(ConfigError):
        BackboneConfig(**bad)


def test_mixture_weights_simplex():
    with pytest.raises(ConfigError):
        MixtureWeights(0.5, 0.5, 0.5, 0.0)
