"""CSV reading and writing for transaction logs and account profiles.

Transactions use the eleven-column dataset layout with ISO-8601 UTC
timestamps; floats are written with ``repr`` so a round trip is exact.
"""

from __future__ import annotations

import csv
import hashlib
from typing import Mapping

import numpy as np

from .model import (
    AccountRef, EntityProfile, MerchantProfile, PAYMENT_FORMATS, SECONDS_PER_DAY, TransactionLog, ValidationError,
)

TRANSACTION_COLUMNS = (
    "Timestamp", "From Bank", "From Account", "To Bank", "To Account", "Amount Paid",
    "Payment Currency", "Amount Received", "Receiving Currency", "Payment Format", "is_laundering",
)

PROFILE_COLUMNS = (
    "bank", "account", "kind", "region", "age_band", "occupation", "income_tier",
    "base_daily_intensity", "amount_scale", "amount_dispersion", "exploration_rate",
    "business_type", "operating_scale", "diurnal_profile",
)


class CsvImportError(ValueError):
    """A malformed input row; ``line`` is 1-based and counts the header."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _iso(ts: np.ndarray) -> list[str]:
    return [s + "Z" for s in np.datetime_as_string(ts.astype("datetime64[s]"), unit="s").tolist()]


def _floats(values: np.ndarray) -> list[str]:
    return [repr(x) for x in values.tolist()]


def export_csv(log: TransactionLog, path) -> None:
    banks = [ref.bank_id for ref in log.accounts]
    accts = [ref.account_id for ref in log.accounts]
    cur = log.currencies
    cols = [
        _iso(log.timestamp),
        [banks[i] for i in log.src.tolist()], [accts[i] for i in log.src.tolist()],
        [banks[i] for i in log.dst.tolist()], [accts[i] for i in log.dst.tolist()],
        _floats(log.amount_paid), [cur[i] for i in log.payment_currency.tolist()],
        _floats(log.amount_received), [cur[i] for i in log.receiving_currency.tolist()],
        [PAYMENT_FORMATS[i] for i in log.payment_format.tolist()],
        ["1" if b else "0" for b in log.is_laundering.tolist()],
    ]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRANSACTION_COLUMNS)
        w.writerows(zip(*cols))


def _parse_times(values: list[str]) -> np.ndarray:
    stripped = []
    for k, s in enumerate(values):
        if not s.endswith("Z"):
            raise CsvImportError(f"timestamp {s!r} is not UTC ISO-8601", k + 2)
        stripped.append(s[:-1])
    try:
        return np.array(stripped, dtype="datetime64[s]").astype(np.int64)
    except ValueError:
        for k, s in enumerate(stripped):
            try:
                np.datetime64(s, "s")
            except ValueError:
                raise CsvImportError(f"bad timestamp {values[k]!r}", k + 2) from None
        raise


def import_csv(path, accounts=None, profiles: Mapping | None = None,
               origin: int | None = None, n_days: int | None = None) -> TransactionLog:
    """Read a log written by ``export_csv``.

    ``accounts`` (or the keys of ``profiles``) seed the account table so that
    account indices match the log that was exported; unseen accounts follow
    in order of first appearance.
    """
    index: dict[AccountRef, int] = {}
    for ref in (accounts if accounts is not None else (profiles or {})):
        index.setdefault(ref, len(index))
    currencies: dict[str, int] = {}
    times, src, dst, paid, recv, pay_cur, recv_cur, fmt, label = ([] for _ in range(9))
    fmt_code = {f: k for k, f in enumerate(PAYMENT_FORMATS)}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != TRANSACTION_COLUMNS:
            raise CsvImportError(f"unexpected header {header!r}", 1)
        for line, row in enumerate(reader, start=2):
            if len(row) != len(TRANSACTION_COLUMNS):
                raise CsvImportError(f"expected {len(TRANSACTION_COLUMNS)} fields, got {len(row)}", line)
            ts, fb, fa, tb, ta, ap, pc, ar, rc, pf, lab = row
            try:
                a, b = AccountRef(fb, fa), AccountRef(tb, ta)
                x, y = float(ap), float(ar)
            except (ValueError, ValidationError) as exc:
                raise CsvImportError(str(exc), line) from None
            if pf not in fmt_code:
                raise CsvImportError(f"unknown payment format {pf!r}", line)
            if lab not in ("0", "1"):
                raise CsvImportError(f"label must be 0 or 1, got {lab!r}", line)
            for ref in (a, b):
                if ref not in index:
                    index[ref] = len(index)
            for c in (pc, rc):
                if c not in currencies:
                    currencies[c] = len(currencies)
            times.append(ts)
            src.append(index[a])
            dst.append(index[b])
            paid.append(x)
            recv.append(y)
            pay_cur.append(currencies[pc])
            recv_cur.append(currencies[rc])
            fmt.append(fmt_code[pf])
            label.append(lab == "1")
    ts_arr = _parse_times(times)
    if len(ts_arr) > 1 and np.any(np.diff(ts_arr) < 0):
        bad = int(np.flatnonzero(np.diff(ts_arr) < 0)[0]) + 3
        raise CsvImportError("timestamps are not in non-decreasing order", bad)
    if origin is None and len(ts_arr):
        origin = int(ts_arr[0]) - int(ts_arr[0]) % SECONDS_PER_DAY
    if n_days is None and len(ts_arr):
        n_days = int((ts_arr[-1] - origin) // SECONDS_PER_DAY) + 1
    return TransactionLog(
        list(index), timestamp=ts_arr, src=src, dst=dst, amount_paid=paid, amount_received=recv,
        payment_currency=pay_cur, receiving_currency=recv_cur, payment_format=fmt, is_laundering=label,
        currencies=list(currencies) or ["USD"], profiles=profiles, origin=origin, n_days=n_days,
    )


# ---------------------------------------------------------------------------------
# profiles


def write_profiles(profiles: Mapping, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PROFILE_COLUMNS)
        for ref, p in profiles.items():
            if isinstance(p, EntityProfile):
                w.writerow([ref.bank_id, ref.account_id, "person", p.region, p.age_band, p.occupation,
                            p.income_tier, repr(p.base_daily_intensity), repr(p.amount_scale),
                            repr(p.amount_dispersion), repr(p.exploration_rate), "", "",
                            " ".join(repr(float(x)) for x in p.diurnal_profile)])
            else:
                w.writerow([ref.bank_id, ref.account_id, "merchant", p.region, "", "", "", "", "", "", "",
                            p.business_type, repr(p.operating_scale), ""])


def read_profiles(path) -> dict:
    out = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != PROFILE_COLUMNS:
            raise CsvImportError(f"unexpected profile header {header!r}", 1)
        for line, row in enumerate(reader, start=2):
            if len(row) != len(PROFILE_COLUMNS):
                raise CsvImportError("wrong field count", line)
            rec = dict(zip(PROFILE_COLUMNS, row))
            try:
                ref = AccountRef(rec["bank"], rec["account"])
                if rec["kind"] == "person":
                    out[ref] = EntityProfile(
                        ref, rec["region"], rec["age_band"], rec["occupation"], rec["income_tier"],
                        float(rec["base_daily_intensity"]), float(rec["amount_scale"]),
                        float(rec["amount_dispersion"]),
                        tuple(float(x) for x in rec["diurnal_profile"].split()),
                        float(rec["exploration_rate"]))
                elif rec["kind"] == "merchant":
                    out[ref] = MerchantProfile(ref, rec["region"], rec["business_type"], float(rec["operating_scale"]))
                else:
                    raise ValueError(f"unknown kind {rec['kind']!r}")
            except (ValueError, ValidationError) as exc:
                raise CsvImportError(str(exc), line) from None
    return out


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
