"""Closed-loop agent-based generator of normal transactions.

Each hourly window runs four steps: draw initiators, pick a counterparty per
event, draw the event attributes, and fold the window back into the
interaction state.  A scenario controller rescales volume and regional mix
once per day.

Randomness is split so that macro knobs cannot perturb micro draws: event
counts come from a per-window stream, while everything about the k-th event
of a person (counterparty uniforms, timestamp offset, amount, format) comes
from that person's own stream in fixed-size blocks.
"""

from __future__ import annotations

import datetime as dt
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
from scipy.special import ndtri

from .model import (
    PAYMENT_FORMATS, SECONDS_PER_HOUR, AccountRef, ConfigError,
    EntityProfile, MerchantProfile, Transaction, TransactionLog,
)
from .population import REGIONS, PopulationConfig, sample_profiles
from .rng import Streams

log = logging.getLogger(__name__)

# uniforms consumed per event from the initiator's stream
EVENT_BLOCK = 8
_U_COMPONENT, _U_PICK, _U_PICK2, _U_TIME, _U_TAIL, _U_AMOUNT, _U_FORMAT = range(7)


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class MixtureWeights:
    w_local: float = 0.25
    w_memory: float = 0.35
    w_merchant: float = 0.30
    w_explore: float = 0.10

    def __post_init__(self):
        ws = self.as_tuple()
        if any(w < 0 for w in ws):
            raise ConfigError("mixture weights must be non-negative")
        if abs(sum(ws) - 1.0) > 1e-9:
            raise ConfigError(f"mixture weights must sum to 1, got {sum(ws)}")

    def as_tuple(self) -> tuple:
        return (self.w_local, self.w_memory, self.w_merchant, self.w_explore)


@dataclass
class AmountModel:
    p_tail: float = 0.01
    # density exponent of the tail, p(x) ~ x^-tail_alpha
    tail_alpha: float = 2.9
    tail_threshold: float = 40000.0
    amount_cap: float = 2.0e6

    def validate(self):
        if not 0 <= self.p_tail <= 1:
            raise ConfigError("p_tail must lie in [0, 1]")
        if self.tail_alpha <= 1:
            raise ConfigError("tail_alpha must exceed 1")
        if not 0 < self.tail_threshold < self.amount_cap:
            raise ConfigError("need 0 < tail_threshold < amount_cap")


@dataclass
class ScenarioConfig:
    shock_sd: float = 0.04
    shock_bound: float = 0.12
    min_factor: float = 0.6
    max_factor: float = 1.8
    weekend_multiplier: float = 0.85
    weekend_days: tuple = (5, 6)
    holidays: dict = field(default_factory=dict)
    region_shock_sd: float = 0.05
    region_shock_bound: float = 0.15
    region_reversion: float = 0.1

    def validate(self):
        if not 0 < self.min_factor <= 1.0 <= self.max_factor:
            raise ConfigError("clamp band must satisfy 0 < min_factor <= 1 <= max_factor")
        if self.shock_sd < 0 or self.shock_bound < 0 or self.region_shock_sd < 0:
            raise ConfigError("shock parameters must be non-negative")
        if not 0 <= self.region_reversion <= 1:
            raise ConfigError("region_reversion must lie in [0, 1]")
        self.holidays = {int(k): float(v) for k, v in self.holidays.items()}
        if any(v <= 0 for v in self.holidays.values()) or self.weekend_multiplier <= 0:
            raise ConfigError("calendar multipliers must be > 0")


_MERCHANT_FORMATS = {"mobile": 0.46, "card": 0.38, "transfer": 0.05, "cash": 0.09, "cheque": 0.02}
_PERSON_FORMATS = {"mobile": 0.56, "card": 0.02, "transfer": 0.31, "cash": 0.08, "cheque": 0.03}


@dataclass
class BackboneConfig:
    n_days: int = 30
    start: str = "2023-01-01"
    weights: MixtureWeights = field(default_factory=MixtureWeights)
    gamma: float = 0.995
    pool_size: int = 256
    region_ring: bool = True
    hotspot_gain: float = 0.5
    exploration_reference: float = 0.1
    # extra hourly initiation rate a person gains on receiving a payment;
    # it decays by receipt_decay per hour
    receipt_boost: float = 0.4
    receipt_decay: float = 0.7
    amount: AmountModel = field(default_factory=AmountModel)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    merchant_formats: dict = field(default_factory=lambda: dict(_MERCHANT_FORMATS))
    person_formats: dict = field(default_factory=lambda: dict(_PERSON_FORMATS))
    region_currency: dict | None = None
    fx_rates: dict = field(default_factory=dict)
    memory_prune_below: float = 1e-3
    prune_every_hours: int = 168

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.n_days < 1:
            raise ConfigError("horizon must be at least one day")
        if not 0 < self.gamma < 1:
            raise ConfigError("gamma must lie in (0, 1)")
        if self.pool_size < 1:
            raise ConfigError("pool_size must be >= 1")
        if self.hotspot_gain < 0 or self.exploration_reference <= 0:
            raise ConfigError("hotspot_gain must be >= 0 and exploration_reference > 0")
        self.amount.validate()
        self.scenario.validate()
        for name in ("merchant_formats", "person_formats"):
            table = getattr(self, name)
            if set(table) - set(PAYMENT_FORMATS):
                raise ConfigError(f"{name} has unknown formats")
            if any(v < 0 for v in table.values()) or sum(table.values()) <= 0:
                raise ConfigError(f"{name} must be a valid distribution")
        self.origin  # parses start

    @property
    def origin(self) -> int:
        try:
            day = dt.date.fromisoformat(str(self.start))
        except ValueError as exc:
            raise ConfigError(f"bad start date {self.start!r}") from exc
        return int(dt.datetime(day.year, day.month, day.day, tzinfo=dt.timezone.utc).timestamp())

    @property
    def origin_weekday(self) -> int:
        return dt.date.fromisoformat(str(self.start)).weekday()

    def fx_rate(self, pay: str, recv: str) -> float:
        if pay == recv:
            return 1.0
        if f"{pay}/{recv}" in self.fx_rates:
            return float(self.fx_rates[f"{pay}/{recv}"])
        if f"{recv}/{pay}" in self.fx_rates:
            return 1.0 / float(self.fx_rates[f"{recv}/{pay}"])
        raise ConfigError(f"no FX rate for {pay}/{recv}")


# ---------------------------------------------------------------------------------
# scenario controller


@dataclass(frozen=True)
class ScenarioModifiers:
    day: int
    global_intensity_factor: float
    region_mix: Mapping[str, float]
    # level before calendar multipliers; the random walk runs on this
    base_level: float = 1.0

    def __post_init__(self):
        if not self.global_intensity_factor > 0:
            raise ConfigError("global_intensity_factor must be > 0")
        total = math.fsum(self.region_mix.values())
        if any(w < 0 for w in self.region_mix.values()) or abs(total - 1.0) > 1e-9:
            raise ConfigError("region_mix must lie on the probability simplex")


def initial_scenario(regions: Iterable[str]) -> ScenarioModifiers:
    """State before day 0: neutral factor and a uniform regional mix."""
    regions = list(regions)
    return ScenarioModifiers(day=-1, global_intensity_factor=1.0,
                             region_mix={r: 1.0 / len(regions) for r in regions}, base_level=1.0)


def calendar_multiplier(day: int, cfg: ScenarioConfig, origin_weekday: int) -> float:
    m = 1.0
    if (origin_weekday + day) % 7 in cfg.weekend_days:
        m *= cfg.weekend_multiplier
    return m * cfg.holidays.get(day, 1.0)


def step_scenario(day: int, prev: ScenarioModifiers, config: BackboneConfig | ScenarioConfig,
                  rng: np.random.Generator, origin_weekday: int | None = None) -> ScenarioModifiers:
    if day != prev.day + 1:
        raise ValueError(f"scenario must advance one day at a time ({prev.day} -> {day})")
    if isinstance(config, BackboneConfig):
        cfg, weekday = config.scenario, config.origin_weekday
    else:
        cfg, weekday = config, 0
    if origin_weekday is not None:
        weekday = origin_weekday
    lo, hi = cfg.min_factor, cfg.max_factor

    eta = 0.0
    if cfg.shock_sd > 0:
        eta = float(np.clip(rng.normal(0.0, cfg.shock_sd), -cfg.shock_bound, cfg.shock_bound))
    base = min(max(prev.base_level * math.exp(eta), lo), hi)
    factor = min(max(base * calendar_multiplier(day, cfg, weekday), lo), hi)

    regions = list(prev.region_mix)
    mix = np.array([prev.region_mix[r] for r in regions], dtype=float)
    if cfg.region_shock_sd > 0 and len(regions) > 1:
        noise = np.clip(rng.normal(0.0, cfg.region_shock_sd, len(regions)),
                        -cfg.region_shock_bound, cfg.region_shock_bound)
        anchor = np.full(len(regions), 1.0 / len(regions))
        log_mix = (1 - cfg.region_reversion) * np.log(np.maximum(mix, 1e-300)) \
            + cfg.region_reversion * np.log(anchor) + noise
        mix = np.exp(log_mix - log_mix.max())
    mix = mix / mix.sum()
    return ScenarioModifiers(day=day, global_intensity_factor=factor,
                             region_mix=dict(zip(regions, mix.tolist())), base_level=base)


# ---------------------------------------------------------------------------------
# interaction state


class InteractionState:
    """Time-decayed partner memory and regional hotspots.

    Weights are stored on a shared exponential clock: the true weight of an
    entry is ``stored * gamma ** (last_window - ref)``.  Decaying every weight
    is then O(1), and sampling proportional to stored values within one
    initiator's partners is exact since the common factor cancels.
    """

    def __init__(self, gamma: float = 0.995, last_window: int = -1):
        if not 0 < gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        self.gamma = float(gamma)
        self.last_window = int(last_window)
        self._ref = int(last_window)
        self.memory: dict = {}
        self.hotspots: dict = {}

    def _clock(self) -> float:
        return self.gamma ** (self.last_window - self._ref)

    def weight(self, initiator, counterparty) -> float:
        return self.memory.get(initiator, {}).get(counterparty, 0.0) * self._clock()

    def partners(self, initiator) -> dict:
        clock = self._clock()
        return {c: w * clock for c, w in self.memory.get(initiator, {}).items()}

    def hotspot(self, region) -> float:
        return self.hotspots.get(region, 0.0) * self._clock()

    def hotspot_shares(self) -> dict:
        total = sum(self.hotspots.values())
        if total <= 0:
            return {}
        return {r: w / total for r, w in self.hotspots.items()}

    def set_weight(self, initiator, counterparty, weight: float) -> None:
        if weight < 0:
            raise ValueError("weights must be non-negative")
        self.memory.setdefault(initiator, {})[counterparty] = weight / self._clock()

    def _rebase(self, hour: int) -> None:
        factor = self.gamma ** (hour - self._ref)
        for partners in self.memory.values():
            for c in partners:
                partners[c] *= factor
        for r in self.hotspots:
            self.hotspots[r] *= factor
        self._ref = hour

    def prune(self, below: float) -> int:
        """Drop memory entries whose true weight fell under ``below``."""
        cutoff = below / self._clock()
        dropped = 0
        for i in list(self.memory):
            partners = self.memory[i]
            stale = [c for c, w in partners.items() if w < cutoff]
            for c in stale:
                del partners[c]
            dropped += len(stale)
            if not partners:
                del self.memory[i]
        return dropped


def update_interaction_state(state: InteractionState, window_transactions, hour: int,
                             gamma: float | None = None, region_of=None) -> InteractionState:
    """Decay by ``gamma ** (hour - last_window)`` and add +1 per observed pair.

    ``window_transactions`` yields ``Transaction`` objects or ``(initiator,
    counterparty)`` pairs.  ``region_of`` maps a counterparty to its region
    for hotspot updates.  The state is updated in place and returned.
    """
    if hour <= state.last_window:
        raise ValueError(f"hour {hour} does not advance past {state.last_window}")
    if gamma is not None and abs(gamma - state.gamma) > 0:
        # switch clocks: materialise weights under the old gamma first
        state._rebase(state.last_window)
        state.gamma = float(gamma)
    if state.last_window < 0 and not state.memory and not state.hotspots:
        state._ref = hour
    state.last_window = int(hour)
    if state.gamma ** -(hour - state._ref) > 1e200:
        state._rebase(hour)
    bump = state.gamma ** -(hour - state._ref)
    for item in window_transactions:
        if isinstance(item, Transaction):
            a, b = item.from_account, item.to_account
        else:
            a, b = item[0], item[1]
        partners = state.memory.setdefault(a, {})
        partners[b] = partners.get(b, 0.0) + bump
        if region_of is not None:
            r = region_of(b)
            state.hotspots[r] = state.hotspots.get(r, 0.0) + bump
    return state


# ---------------------------------------------------------------------------------
# population arrays


class Population:
    """Array view of a profile map used by the samplers."""

    def __init__(self, profiles: Mapping[AccountRef, object], pool_size: int = 256, region_ring: bool = True):
        self.profiles = profiles
        self.refs = list(profiles)
        self.index = {ref: i for i, ref in enumerate(self.refs)}
        n = len(self.refs)
        regions = list(REGIONS)
        for p in profiles.values():
            if p.region not in regions:
                regions.append(p.region)
        self.regions = regions
        region_code = {r: k for k, r in enumerate(regions)}
        self.region = np.array([region_code[p.region] for p in profiles.values()], dtype=np.int32)
        self.is_merchant = np.array([isinstance(p, MerchantProfile) for p in profiles.values()], dtype=bool)
        self.persons = np.flatnonzero(~self.is_merchant)
        self.merchants = np.flatnonzero(self.is_merchant)
        self.intensity = np.zeros(n)
        self.diurnal = np.zeros((n, 24))
        self.amount_scale = np.zeros(n)
        self.amount_dispersion = np.ones(n)
        self.exploration = np.zeros(n)
        self.operating_scale = np.zeros(n)
        for i, p in enumerate(profiles.values()):
            if isinstance(p, EntityProfile):
                self.intensity[i] = p.base_daily_intensity
                self.diurnal[i] = p.diurnal_profile
                self.amount_scale[i] = p.amount_scale
                self.amount_dispersion[i] = p.amount_dispersion
                self.exploration[i] = p.exploration_rate
            else:
                self.operating_scale[i] = p.operating_scale
        self.pool_size = int(pool_size)
        n_regions = len(regions)
        self.persons_by_region = [self.persons[self.region[self.persons] == r] for r in range(n_regions)]
        self.merchants_by_region = [self.merchants[self.region[self.merchants] == r] for r in range(n_regions)]
        # position of each person inside its region's person array
        self.region_pos = np.full(n, -1, dtype=np.int64)
        for arr in self.persons_by_region:
            self.region_pos[arr] = np.arange(len(arr))
        scales = self.operating_scale[self.merchants]
        self.merchant_scale_total = float(scales.sum())
        self.merchant_cdf = np.cumsum(scales) / scales.sum() if len(scales) else np.zeros(0)
        if region_ring and n_regions > 2:
            self.compatible = [sorted({r, (r - 1) % n_regions, (r + 1) % n_regions}) for r in range(n_regions)]
        else:
            self.compatible = [[r] for r in range(n_regions)]

    def __len__(self):
        return len(self.refs)


def _as_population(profiles, pool_size=256, region_ring=True) -> Population:
    if isinstance(profiles, Population):
        return profiles
    return Population(profiles, pool_size=pool_size, region_ring=region_ring)


# ---------------------------------------------------------------------------------
# step (i): initiators


def hourly_rates(hour: int, population: Population, scenario: ScenarioModifiers) -> np.ndarray:
    return population.intensity * population.diurnal[:, hour % 24] * scenario.global_intensity_factor


def sample_initiators(hour: int, profiles, scenario: ScenarioModifiers, rng: np.random.Generator,
                      horizon_hours: int | None = None) -> list[tuple[AccountRef, int]]:
    """Poisson event counts per person for one window; zero counts omitted."""
    if hour < 0 or (horizon_hours is not None and hour >= horizon_hours):
        raise ValueError(f"hour {hour} outside the horizon")
    pop = _as_population(profiles)
    counts = _initiator_counts(hour, pop, scenario, rng)
    return [(pop.refs[i], int(c)) for i, c in counts]


def _initiator_counts(hour, pop: Population, scenario, rng, extra=None) -> list[tuple[int, int]]:
    lam = hourly_rates(hour, pop, scenario)
    if extra is not None:
        lam = lam + extra
    lam = lam[pop.persons]
    counts = rng.poisson(lam)
    nz = np.flatnonzero(counts)
    return list(zip(pop.persons[nz].tolist(), counts[nz].tolist()))


# ---------------------------------------------------------------------------------
# step (ii): counterparties


def _pick_counterparty(i: int, u, pop: Population, state: InteractionState | None,
                       scenario: ScenarioModifiers, weights: tuple, hotspot_gain: float = 0.0,
                       hotspot_shares: dict | None = None) -> int:
    """Counterparty index for initiator ``i`` from three uniforms ``u``.

    Candidates: every merchant, a same-region person pool of size
    ``pool_size`` (resampled per event, so a pool member is a uniform
    same-region person) and remembered partners living outside the region.
    The four mixture terms are summed unnormalised, so a component is chosen
    with probability proportional to its total mass over the candidates:
    region weight per compatible candidate, decayed memory, raw operating
    scale, and the exploration weight itself.
    """
    u_comp, u_pick, u_pick2 = u
    own = int(pop.region[i])
    region_persons = pop.persons_by_region[own]
    n_region_others = len(region_persons) - (1 if pop.region_pos[i] >= 0 and not pop.is_merchant[i] else 0)
    pool = min(pop.pool_size, n_region_others)
    partners = state.memory.get(i) if state is not None else None
    if partners:
        mem_out = [c for c in partners if not pop.is_merchant[c] and pop.region[c] != own]
    else:
        mem_out = []
    n_merch = len(pop.merchants)
    n_cand = n_merch + pool + len(mem_out)
    if n_cand == 0:
        raise GenerationError(f"no counterparty candidates for {pop.refs[i]}")

    # local term: per compatible region, region weight x candidate count there
    mix = scenario.region_mix
    local_regions, local_mass = [], []
    for r in pop.compatible[own]:
        name = pop.regions[r]
        w = mix.get(name, 0.0)
        if hotspot_gain and hotspot_shares:
            w *= 1.0 + hotspot_gain * hotspot_shares.get(r, 0.0)
        cnt = len(pop.merchants_by_region[r]) + (pool if r == own else 0)
        if mem_out:
            cnt += sum(1 for c in mem_out if pop.region[c] == r)
        if w > 0 and cnt > 0:
            local_regions.append(r)
            local_mass.append(w * cnt)
    mem_total = sum(partners.values()) if partners else 0.0
    mem_mass = mem_total * state._clock() if partners else 0.0

    w_local, w_mem, w_merch, w_expl = weights
    avail = (
        w_local * sum(local_mass),
        w_mem * mem_mass,
        w_merch * pop.merchant_scale_total,
        w_expl,
    )
    total = sum(avail)
    if total <= 0:
        raise GenerationError("mixture has no usable component")
    target = u_comp * total
    comp, acc = 3, 0.0
    for k, w in enumerate(avail):
        acc += w
        if target < acc and w > 0:
            comp = k
            break

    if comp == 2:
        j = int(np.searchsorted(pop.merchant_cdf, u_pick, side="right"))
        return int(pop.merchants[min(j, n_merch - 1)])
    if comp == 1:
        items = list(partners.items())
        x = u_pick * mem_total
        acc = 0.0
        for c, w in items:
            acc += w
            if x < acc:
                return c
        return items[-1][0]
    if comp == 0:
        x = u_pick * sum(local_mass)
        acc, r = 0.0, local_regions[-1]
        for reg, m in zip(local_regions, local_mass):
            acc += m
            if x < acc:
                r = reg
                break
        members_m = pop.merchants_by_region[r]
        out_r = [c for c in mem_out if pop.region[c] == r]
        cnt = len(members_m) + (pool if r == own else 0) + len(out_r)
        k = min(int(u_pick2 * cnt), cnt - 1)
        return _candidate_at(k, members_m, pool if r == own else 0, out_r, i, pop, u_pick2 * cnt - k)
    k = min(int(u_pick * n_cand), n_cand - 1)
    return _candidate_at(k, pop.merchants, pool, mem_out, i, pop, u_pick2)


def _candidate_at(k, merchants, pool, extra, i, pop: Population, u_person) -> int:
    if k < len(merchants):
        return int(merchants[k])
    k -= len(merchants)
    if k < pool:
        return _uniform_region_person(i, pop, u_person)
    return int(extra[k - pool])


def _uniform_region_person(i: int, pop: Population, u: float) -> int:
    arr = pop.persons_by_region[int(pop.region[i])]
    pos = int(pop.region_pos[i]) if not pop.is_merchant[i] else -1
    n = len(arr) - (1 if pos >= 0 else 0)
    j = min(int(u * n), n - 1)
    if pos >= 0 and j >= pos:
        j += 1
    return int(arr[j])


def select_counterparty(initiator: AccountRef, state: InteractionState | None, profiles,
                        scenario: ScenarioModifiers, weights: MixtureWeights, rng: np.random.Generator,
                        hotspot_gain: float = 0.0) -> AccountRef:
    pop = _as_population(profiles)
    i = pop.index[initiator]
    u = rng.random(3)
    mem_state = _index_state(state, pop) if state is not None else None
    shares = _region_shares(mem_state, pop) if (mem_state is not None and hotspot_gain) else None
    j = _pick_counterparty(i, u, pop, mem_state, scenario, weights.as_tuple(), hotspot_gain, shares)
    return pop.refs[j]


def _index_state(state: InteractionState, pop: Population) -> InteractionState:
    """View of ``state`` keyed by population indices (no-op for index-keyed states)."""
    keys = list(state.memory)
    if not keys or isinstance(keys[0], (int, np.integer)):
        return state
    out = InteractionState(state.gamma, state.last_window)
    out._ref = state._ref
    for a, partners in state.memory.items():
        out.memory[pop.index[a]] = {pop.index[b]: w for b, w in partners.items()}
    out.hotspots = dict(state.hotspots)
    return out


def _region_shares(state: InteractionState | None, pop: Population) -> dict:
    if state is None:
        return {}
    shares = state.hotspot_shares()
    out = {}
    for r, s in shares.items():
        code = r if isinstance(r, (int, np.integer)) else (pop.regions.index(r) if r in pop.regions else None)
        if code is not None:
            out[int(code)] = s
    return out


# ---------------------------------------------------------------------------------
# step (iii): event attributes


def _attribute_columns(U: np.ndarray, initiators: np.ndarray, counterparties: np.ndarray, hour: int,
                       pop: Population, cfg: BackboneConfig, origin: int):
    """Timestamps, amounts and format codes for a batch of events (vectorised)."""
    am = cfg.amount
    ts = origin + hour * SECONDS_PER_HOUR + np.floor(U[:, _U_TIME] * SECONDS_PER_HOUR).astype(np.int64)
    u_amt = np.clip(U[:, _U_AMOUNT], 1e-12, 1 - 1e-12)
    body = np.exp(pop.amount_scale[initiators] + pop.amount_dispersion[initiators] * ndtri(u_amt))
    shape = am.tail_alpha - 1.0
    trunc = 1.0 - (am.tail_threshold / am.amount_cap) ** shape
    tail = am.tail_threshold * (1.0 - u_amt * trunc) ** (-1.0 / shape)
    amount = np.where(U[:, _U_TAIL] < am.p_tail, tail, body)
    amount = np.clip(np.round(amount, 2), 0.01, am.amount_cap)

    fmt = np.empty(len(U), dtype=np.int8)
    to_merchant = pop.is_merchant[counterparties]
    for mask, table in ((to_merchant, cfg.merchant_formats), (~to_merchant, cfg.person_formats)):
        if not mask.any():
            continue
        codes = np.array([PAYMENT_FORMATS.index(k) for k in table], dtype=np.int8)
        cdf = np.cumsum([table[k] for k in table], dtype=float)
        cdf /= cdf[-1]
        pick = np.minimum(np.searchsorted(cdf, U[mask, _U_FORMAT], side="right"), len(codes) - 1)
        fmt[mask] = codes[pick]
    return ts, amount, fmt


def sample_event_attributes(initiator: AccountRef, counterparty: AccountRef, hour: int, profiles,
                            rng: np.random.Generator, config: BackboneConfig | None = None) -> Transaction:
    if initiator == counterparty:
        raise ValueError("initiator and counterparty must differ")
    cfg = config or BackboneConfig()
    pop = _as_population(profiles)
    U = rng.random((1, EVENT_BLOCK))
    i, j = pop.index[initiator], pop.index[counterparty]
    ts, amount, fmt = _attribute_columns(U, np.array([i]), np.array([j]), hour, pop, cfg, cfg.origin)
    pay, recv, received = _currencies(cfg, pop, i, j, float(amount[0]))
    return Transaction(timestamp=int(ts[0]), from_account=initiator, to_account=counterparty,
                       amount_paid=float(amount[0]), payment_currency=pay, amount_received=received,
                       receiving_currency=recv, payment_format=PAYMENT_FORMATS[fmt[0]], is_laundering=False)


def _currencies(cfg: BackboneConfig, pop: Population, i: int, j: int, amount: float):
    if not cfg.region_currency:
        return "USD", "USD", amount
    pay = cfg.region_currency.get(pop.regions[pop.region[i]], "USD")
    recv = cfg.region_currency.get(pop.regions[pop.region[j]], "USD")
    if pay == recv:
        return pay, recv, amount
    return pay, recv, round(amount * cfg.fx_rate(pay, recv), 2)


# ---------------------------------------------------------------------------------
# the loop


class _EventStreams:
    """Lazily created per-person generators, handing out fixed-size uniform blocks."""

    def __init__(self, streams: Streams):
        self.streams = streams
        self._gens: dict[int, np.random.Generator] = {}

    def blocks(self, person: int, count: int) -> np.ndarray:
        g = self._gens.get(person)
        if g is None:
            g = self._gens[person] = self.streams.get("events", person)
        return g.random((count, EVENT_BLOCK))


@dataclass
class BackboneStats:
    events: int = 0
    skipped: int = 0
    pruned: int = 0
    scenarios: list = field(default_factory=list, repr=False)


def generate_backbone(config: BackboneConfig, population: PopulationConfig | Mapping,
                      seed: int | Streams, stats: BackboneStats | None = None) -> TransactionLog:
    """Run the hourly loop over ``config.n_days`` days; all labels are benign."""
    streams = seed if isinstance(seed, Streams) else Streams(seed)
    if isinstance(population, PopulationConfig):
        if population.n_persons < 1:
            raise ConfigError("need at least one person")
        profiles = sample_profiles(population, streams)
    else:
        profiles = dict(population)
    pop = Population(profiles, pool_size=config.pool_size, region_ring=config.region_ring)
    stats = stats if stats is not None else BackboneStats()
    origin = config.origin
    weights = config.weights.as_tuple()
    events = _EventStreams(streams)
    state = InteractionState(config.gamma)
    scenario = initial_scenario(pop.regions[: len(REGIONS)] if len(pop.regions) == len(REGIONS) else pop.regions)
    explore_scale = pop.exploration / config.exploration_reference
    boost = np.zeros(len(pop))

    chunks = []
    for day in range(config.n_days):
        scenario = step_scenario(day, scenario, config, streams.get("scenario", day))
        stats.scenarios.append(scenario)
        for h in range(24):
            hour = day * 24 + h
            counts = _initiator_counts(hour, pop, scenario, streams.get("counts", hour),
                                       boost if config.receipt_boost else None)
            if config.receipt_boost:
                boost *= config.receipt_decay
            if not counts:
                continue
            init_list, blocks = [], []
            for person, c in counts:
                blocks.append(events.blocks(person, c))
                init_list.extend([person] * c)
            U = np.concatenate(blocks)
            initiators = np.array(init_list, dtype=np.int64)
            shares = _region_shares(state, pop) if config.hotspot_gain else None
            cps = np.empty(len(initiators), dtype=np.int64)
            keep = np.ones(len(initiators), dtype=bool)
            for e, i in enumerate(init_list):
                w = weights
                if w[3]:
                    w = (w[0], w[1], w[2], w[3] * explore_scale[i])
                try:
                    cps[e] = _pick_counterparty(i, U[e, :3], pop, state, scenario, w,
                                                config.hotspot_gain, shares)
                except GenerationError:
                    keep[e] = False
            if not keep.all():
                stats.skipped += int((~keep).sum())
                U, initiators, cps = U[keep], initiators[keep], cps[keep]
            if len(initiators) == 0:
                continue
            ts, amount, fmt = _attribute_columns(U, initiators, cps, hour, pop, config, origin)
            order = np.argsort(ts, kind="stable")
            chunks.append((ts[order], initiators[order], cps[order], amount[order], fmt[order]))
            stats.events += len(order)
            if config.receipt_boost:
                rec = cps[order]
                rec = rec[~pop.is_merchant[rec]]
                np.add.at(boost, rec, config.receipt_boost)
            update_interaction_state(
                state, zip(initiators[order].tolist(), cps[order].tolist()), hour,
                region_of=lambda c: int(pop.region[c]))
            if config.prune_every_hours and hour % config.prune_every_hours == config.prune_every_hours - 1:
                stats.pruned += state.prune(config.memory_prune_below)
    if stats.skipped:
        log.warning("skipped %d events with no counterparty candidates", stats.skipped)

    if chunks:
        ts, src, dst, amount, fmt = (np.concatenate(col) for col in zip(*chunks))
    else:
        ts = src = dst = fmt = np.zeros(0, dtype=np.int64)
        amount = np.zeros(0)
    currencies, pay, recv, received = _currency_columns(config, pop, src, dst, amount)
    return TransactionLog(pop.refs, timestamp=ts, src=src, dst=dst, amount_paid=amount,
                          amount_received=received, payment_currency=pay, receiving_currency=recv,
                          payment_format=fmt, currencies=currencies, profiles=profiles,
                          origin=origin, n_days=config.n_days)


def _currency_columns(cfg: BackboneConfig, pop: Population, src, dst, amount):
    n = len(src)
    if not cfg.region_currency:
        return ("USD",), np.zeros(n, np.int16), np.zeros(n, np.int16), amount.copy()
    names = sorted(set(cfg.region_currency.values()) | {"USD"})
    code = {c: k for k, c in enumerate(names)}
    region_cur = np.array([code[cfg.region_currency.get(r, "USD")] for r in pop.regions], dtype=np.int16)
    pay = region_cur[pop.region[src]]
    recv = region_cur[pop.region[dst]]
    rates = np.ones((len(names), len(names)))
    for a in names:
        for b in names:
            if a != b and (f"{a}/{b}" in cfg.fx_rates or f"{b}/{a}" in cfg.fx_rates):
                rates[code[a], code[b]] = cfg.fx_rate(a, b)
    received = np.where(pay == recv, amount, np.round(amount * rates[pay, recv], 2))
    return tuple(names), pay, recv, received
