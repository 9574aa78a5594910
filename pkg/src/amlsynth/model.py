"""Domain types shared by every stage: accounts, profiles, transactions and the log."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping, Sequence, Union

import numpy as np

PAYMENT_FORMATS = ("mobile", "card", "transfer", "cash", "cheque")
DEFAULT_CURRENCY = "USD"
SECONDS_PER_HOUR = 3600
SECONDS_PER_DAY = 86400


class ValidationError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class AccountRef:
    bank_id: str
    account_id: str

    def __post_init__(self):
        if not isinstance(self.bank_id, str) or not self.bank_id:
            raise ValidationError("bank_id must be a non-empty string")
        if not isinstance(self.account_id, str) or not self.account_id:
            raise ValidationError("account_id must be a non-empty string")
        if ":" in self.bank_id:
            # keeps the bank:account key injective
            raise ValidationError("bank_id may not contain ':'")

    @property
    def key(self) -> str:
        return f"{self.bank_id}:{self.account_id}"

    def __str__(self) -> str:
        return self.key


def account_key(ref: AccountRef) -> str:
    """Canonical ``bank:account`` key of an account."""
    if not ref.bank_id or not ref.account_id:
        raise ValidationError("account reference fields must be non-empty")
    return f"{ref.bank_id}:{ref.account_id}"


def parse_account_key(key: str) -> AccountRef:
    bank, sep, account = key.partition(":")
    if not sep:
        raise ValidationError(f"not an account key: {key!r}")
    return AccountRef(bank, account)


@dataclass(frozen=True)
class EntityProfile:
    account: AccountRef
    region: str
    age_band: str
    occupation: str
    income_tier: str
    base_daily_intensity: float
    amount_scale: float
    amount_dispersion: float
    diurnal_profile: tuple
    exploration_rate: float

    kind = "person"

    def __post_init__(self):
        if len(self.diurnal_profile) != 24:
            raise ValidationError("diurnal_profile needs 24 hourly weights")
        if any(w < 0 for w in self.diurnal_profile):
            raise ValidationError("diurnal weights must be non-negative")
        if abs(math.fsum(self.diurnal_profile) - 1.0) > 1e-9:
            raise ValidationError("diurnal_profile must sum to 1")
        if not self.base_daily_intensity >= 0:
            raise ValidationError("base_daily_intensity must be >= 0")
        if not self.amount_dispersion > 0:
            raise ValidationError("amount_dispersion must be > 0")
        if not 0.0 <= self.exploration_rate <= 1.0:
            raise ValidationError("exploration_rate must lie in [0, 1]")


@dataclass(frozen=True)
class MerchantProfile:
    account: AccountRef
    region: str
    business_type: str
    operating_scale: float

    kind = "merchant"

    def __post_init__(self):
        if not self.operating_scale > 0:
            raise ValidationError("operating_scale must be > 0")


Profile = Union[EntityProfile, MerchantProfile]


@dataclass(frozen=True)
class Transaction:
    timestamp: int
    from_account: AccountRef
    to_account: AccountRef
    amount_paid: float
    payment_currency: str
    amount_received: float
    receiving_currency: str
    payment_format: str
    is_laundering: bool = False


@dataclass(frozen=True)
class Violation:
    code: str
    detail: str = ""


def validate_transaction(tx: Transaction) -> list[Violation]:
    """Every broken row-level invariant of ``tx``; empty when the row is valid."""
    out = []
    if not isinstance(tx.timestamp, (int, np.integer)) or tx.timestamp < 0:
        out.append(Violation("InvalidTimestamp", repr(tx.timestamp)))
    if not (tx.amount_paid >= 0) or not (tx.amount_received >= 0):
        out.append(Violation("NegativeAmount", f"{tx.amount_paid} / {tx.amount_received}"))
    if tx.from_account == tx.to_account:
        out.append(Violation("SelfTransaction", tx.from_account.key))
    if tx.payment_currency == tx.receiving_currency and tx.amount_paid != tx.amount_received:
        out.append(Violation("CurrencyAmountMismatch", f"{tx.amount_paid} != {tx.amount_received}"))
    if tx.payment_format not in PAYMENT_FORMATS:
        out.append(Violation("UnknownPaymentFormat", str(tx.payment_format)))
    return out


def _day_floor(ts: int) -> int:
    return int(ts) - int(ts) % SECONDS_PER_DAY


class TransactionLog:
    """Time-ordered transactions stored column-wise.

    Endpoints are integer indices into ``accounts``; ``profiles`` maps every
    account to its profile when the log comes from the generator (imported
    logs may carry no profiles).  ``origin`` is the epoch second of day 0 and
    ``n_days`` the horizon length.
    """

    _columns = (
        "timestamp", "src", "dst", "amount_paid", "amount_received",
        "payment_currency", "receiving_currency", "payment_format", "is_laundering",
    )
    _dtypes = {
        "timestamp": np.int64, "src": np.int32, "dst": np.int32,
        "amount_paid": np.float64, "amount_received": np.float64,
        "payment_currency": np.int16, "receiving_currency": np.int16,
        "payment_format": np.int8, "is_laundering": np.bool_,
    }

    def __init__(self, accounts: Sequence[AccountRef], *, timestamp, src, dst, amount_paid,
                 amount_received=None, payment_currency=None, receiving_currency=None,
                 payment_format=None, is_laundering=None, currencies=(DEFAULT_CURRENCY,),
                 profiles: Mapping[AccountRef, Profile] | None = None,
                 origin: int | None = None, n_days: int | None = None):
        self.accounts = tuple(accounts)
        self.currencies = tuple(currencies)
        n = len(timestamp)
        self.timestamp = np.asarray(timestamp, dtype=np.int64)
        self.src = np.asarray(src, dtype=np.int32)
        self.dst = np.asarray(dst, dtype=np.int32)
        self.amount_paid = np.asarray(amount_paid, dtype=np.float64)
        self.amount_received = (self.amount_paid.copy() if amount_received is None
                                else np.asarray(amount_received, dtype=np.float64))
        zeros16 = np.zeros(n, dtype=np.int16)
        self.payment_currency = zeros16 if payment_currency is None else np.asarray(payment_currency, dtype=np.int16)
        self.receiving_currency = (self.payment_currency.copy() if receiving_currency is None
                                   else np.asarray(receiving_currency, dtype=np.int16))
        self.payment_format = (np.zeros(n, dtype=np.int8) if payment_format is None
                               else np.asarray(payment_format, dtype=np.int8))
        self.is_laundering = (np.zeros(n, dtype=bool) if is_laundering is None
                              else np.asarray(is_laundering, dtype=bool))
        for name in self._columns:
            if len(getattr(self, name)) != n:
                raise ValidationError(f"column {name} has length {len(getattr(self, name))}, expected {n}")
        self.profiles = dict(profiles) if profiles else {}
        if origin is None:
            origin = _day_floor(self.timestamp[0]) if n else 0
        self.origin = int(origin)
        if n_days is None:
            n_days = int((self.timestamp.max() - self.origin) // SECONDS_PER_DAY) + 1 if n else 1
        self.n_days = int(n_days)
        self._index = None

    # construction -----------------------------------------------------------------

    @classmethod
    def empty(cls, accounts=(), profiles=None, origin=0, n_days=1, currencies=(DEFAULT_CURRENCY,)):
        return cls(accounts, timestamp=[], src=[], dst=[], amount_paid=[], profiles=profiles,
                   origin=origin, n_days=n_days, currencies=currencies)

    @classmethod
    def from_transactions(cls, transactions: Iterable[Transaction], profiles=None,
                          origin=None, n_days=None, accounts=None) -> "TransactionLog":
        txs = list(transactions)
        accounts = list(accounts) if accounts is not None else []
        if profiles:
            for ref in profiles:
                accounts.append(ref)
        index: dict[AccountRef, int] = {}
        for ref in accounts:
            index.setdefault(ref, len(index))
        currencies: dict[str, int] = {DEFAULT_CURRENCY: 0}
        cols = {name: [] for name in cls._columns}
        for tx in txs:
            for ref in (tx.from_account, tx.to_account):
                if ref not in index:
                    index[ref] = len(index)
            for cur in (tx.payment_currency, tx.receiving_currency):
                currencies.setdefault(cur, len(currencies))
            cols["timestamp"].append(int(tx.timestamp))
            cols["src"].append(index[tx.from_account])
            cols["dst"].append(index[tx.to_account])
            cols["amount_paid"].append(tx.amount_paid)
            cols["amount_received"].append(tx.amount_received)
            cols["payment_currency"].append(currencies[tx.payment_currency])
            cols["receiving_currency"].append(currencies[tx.receiving_currency])
            cols["payment_format"].append(PAYMENT_FORMATS.index(tx.payment_format))
            cols["is_laundering"].append(bool(tx.is_laundering))
        return cls(list(index), currencies=list(currencies), profiles=profiles,
                   origin=origin, n_days=n_days, **cols)

    def replace_columns(self, **columns) -> "TransactionLog":
        """New log sharing accounts/profiles/horizon, with the given columns swapped in."""
        cols = {name: getattr(self, name) for name in self._columns}
        cols.update(columns)
        out = TransactionLog(self.accounts, currencies=self.currencies, profiles=None,
                             origin=self.origin, n_days=self.n_days, **cols)
        out.profiles = self.profiles
        return out

    def take(self, rows) -> "TransactionLog":
        rows = np.asarray(rows)
        return self.replace_columns(**{name: getattr(self, name)[rows] for name in self._columns})

    def append_rows(self, **columns) -> "TransactionLog":
        """Append rows (given column-wise) and stably re-sort by timestamp.

        Existing rows keep their relative order and precede appended rows that
        share a timestamp.
        """
        n_new = len(columns["timestamp"])
        new = {}
        for name in self._columns:
            if name in columns:
                extra = np.asarray(columns[name], dtype=self._dtypes[name])
            elif name == "amount_received":
                extra = np.asarray(columns["amount_paid"], dtype=np.float64)
            elif name == "receiving_currency":
                extra = np.asarray(columns.get("payment_currency", np.zeros(n_new)), dtype=np.int16)
            else:
                extra = np.zeros(n_new, dtype=self._dtypes[name])
            new[name] = np.concatenate([getattr(self, name), extra])
        order = np.argsort(new["timestamp"], kind="stable")
        return self.replace_columns(**{k: v[order] for k, v in new.items()})

    # access -----------------------------------------------------------------------

    def __len__(self) -> int:
        return len(self.timestamp)

    def __getitem__(self, i: int) -> Transaction:
        i = int(i)
        return Transaction(
            timestamp=int(self.timestamp[i]),
            from_account=self.accounts[self.src[i]],
            to_account=self.accounts[self.dst[i]],
            amount_paid=float(self.amount_paid[i]),
            payment_currency=self.currencies[self.payment_currency[i]],
            amount_received=float(self.amount_received[i]),
            receiving_currency=self.currencies[self.receiving_currency[i]],
            payment_format=PAYMENT_FORMATS[self.payment_format[i]],
            is_laundering=bool(self.is_laundering[i]),
        )

    def __iter__(self) -> Iterator[Transaction]:
        for i in range(len(self)):
            yield self[i]

    @property
    def account_index(self) -> dict[AccountRef, int]:
        if self._index is None:
            self._index = {ref: i for i, ref in enumerate(self.accounts)}
        return self._index

    @property
    def horizon_end(self) -> int:
        return self.origin + self.n_days * SECONDS_PER_DAY

    def day_of(self) -> np.ndarray:
        return (self.timestamp - self.origin) // SECONDS_PER_DAY

    def active_accounts(self) -> np.ndarray:
        return np.unique(np.concatenate([self.src, self.dst]))

    def is_time_sorted(self) -> bool:
        return bool(np.all(np.diff(self.timestamp) >= 0))

    def violations(self) -> list[tuple[int, Violation]]:
        """Vectorised ``validate_transaction`` over all rows plus log-level checks."""
        out = []
        bad_amount = ~((self.amount_paid >= 0) & (self.amount_received >= 0))
        for i in np.flatnonzero(bad_amount):
            out.append((int(i), Violation("NegativeAmount")))
        for i in np.flatnonzero(self.src == self.dst):
            out.append((int(i), Violation("SelfTransaction")))
        mismatch = (self.payment_currency == self.receiving_currency) & (self.amount_paid != self.amount_received)
        for i in np.flatnonzero(mismatch):
            out.append((int(i), Violation("CurrencyAmountMismatch")))
        for i in np.flatnonzero((self.payment_format < 0) | (self.payment_format >= len(PAYMENT_FORMATS))):
            out.append((int(i), Violation("UnknownPaymentFormat")))
        for i in np.flatnonzero(self.timestamp < 0):
            out.append((int(i), Violation("InvalidTimestamp")))
        for i in np.flatnonzero(np.diff(self.timestamp) < 0):
            out.append((int(i) + 1, Violation("OutOfOrder")))
        if self.profiles:
            for a in self.active_accounts():
                if self.accounts[a] not in self.profiles:
                    out.append((-1, Violation("MissingProfile", self.accounts[a].key)))
        out.sort(key=lambda item: item[0])
        return out

    def digest(self) -> str:
        """SHA-256 over the transaction content (accounts resolved to keys)."""
        h = hashlib.sha256()
        h.update("\n".join(ref.key for ref in self.accounts).encode())
        h.update("|".join(self.currencies).encode())
        h.update(np.int64([self.origin, self.n_days]).tobytes())
        for name in self._columns:
            h.update(np.ascontiguousarray(getattr(self, name)).tobytes())
        return h.hexdigest()

    def same_transactions(self, other: "TransactionLog") -> bool:
        """Row-by-row equality of resolved transactions (account tables may differ)."""
        if len(self) != len(other):
            return False
        if not (np.array_equal(self.timestamp, other.timestamp)
                and np.array_equal(self.amount_paid, other.amount_paid)
                and np.array_equal(self.amount_received, other.amount_received)
                and np.array_equal(self.payment_format, other.payment_format)
                and np.array_equal(self.is_laundering, other.is_laundering)):
            return False
        mine = [self.accounts[i] for i in self.src] + [self.accounts[i] for i in self.dst]
        theirs = [other.accounts[i] for i in other.src] + [other.accounts[i] for i in other.dst]
        if mine != theirs:
            return False
        pc = [self.currencies[i] for i in self.payment_currency] + [self.currencies[i] for i in self.receiving_currency]
        oc = [other.currencies[i] for i in other.payment_currency] + [other.currencies[i] for i in other.receiving_currency]
        return pc == oc

    def __repr__(self) -> str:
        return (f"TransactionLog(n={len(self)}, accounts={len(self.accounts)}, "
                f"laundering={int(self.is_laundering.sum())}, n_days={self.n_days})")
