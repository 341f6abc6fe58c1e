"""Daily OHLCV ingestion, auditing, calendar covariates, splitting and scaling."""
from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FEATURES = ("open", "high", "low", "close", "volume")
CLOSE = FEATURES.index("close")
VOLUME = FEATURES.index("volume")
N_CALENDAR = 19
WEEKDAYS = ("mon", "tue", "wed", "thu", "fri", "sat", "sun")
MONTHS = ("jan", "feb", "mar", "apr", "may", "jun", "jul", "aug", "sep", "oct", "nov", "dec")

# lower-cased header -> canonical field
COLUMN_ALIASES = {
    "date": "date", "day": "date", "timestamp": "date", "time": "date", "datetime": "date",
    "open": "open", "open price": "open",
    "high": "high", "high price": "high",
    "low": "low", "low price": "low",
    "close": "close", "close price": "close", "closing price": "close",
    "volume": "volume", "vol": "volume", "volume usd": "volume",
}


class DataError(ValueError):
    """Malformed or inconsistent market data."""


@dataclass(frozen=True)
class OhlcvRecord:
    date: dt.date
    open: float
    high: float
    low: float
    close: float
    volume: float


@dataclass(frozen=True)
class OhlcvSeries:
    """Strictly date-ordered daily OHLCV records held column-wise."""

    dates: np.ndarray  # datetime64[D]
    values: np.ndarray  # (N, 5) in FEATURES order

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != len(FEATURES):
            raise DataError(f"expected (N, 5) values, got {self.values.shape}")
        if len(self.dates) != len(self.values):
            raise DataError("dates and values differ in length")
        if len(self.dates) > 1 and not (np.diff(self.dates).astype(int) > 0).all():
            raise DataError("dates must be strictly increasing")
        self.values.setflags(write=False)
        self.dates.setflags(write=False)

    def __len__(self) -> int:
        return len(self.dates)

    @property
    def close(self) -> np.ndarray:
        return self.values[:, CLOSE]

    @property
    def volume(self) -> np.ndarray:
        return self.values[:, VOLUME]

    def record(self, i: int) -> OhlcvRecord:
        d = self.dates[i].astype(dt.date)
        return OhlcvRecord(d, *map(float, self.values[i]))

    def records(self) -> list[OhlcvRecord]:
        return [self.record(i) for i in range(len(self))]

    def slice(self, start: int, stop: int) -> "OhlcvSeries":
        return OhlcvSeries(self.dates[start:stop].copy(), self.values[start:stop].copy())

    def index_of(self, date) -> int:
        i = int(np.searchsorted(self.dates, np.datetime64(date, "D")))
        if i >= len(self) or self.dates[i] != np.datetime64(date, "D"):
            raise KeyError(f"date {date} not in series")
        return i

    @classmethod
    def from_records(cls, records: Iterable[OhlcvRecord]) -> "OhlcvSeries":
        records = list(records)
        dates = np.array([np.datetime64(r.date, "D") for r in records], dtype="datetime64[D]")
        values = np.array([[r.open, r.high, r.low, r.close, r.volume] for r in records],
                          dtype=np.float64).reshape(-1, 5)
        return cls(dates, values)


def parse_date(text: str) -> dt.date:
    """ISO (``2014-10-01``, optionally with a time suffix) or day-first ``01/10/2014``."""
    s = text.strip()
    if "/" in s:
        day, month, year = s.split(" ")[0].split("/")
        return dt.date(int(year), int(month), int(day))
    return dt.date.fromisoformat(s[:10])


def _parse_number(text: str) -> float:
    s = text.strip().replace(",", "")
    if s == "" or s.lower() in {"null", "nan", "na", "none"}:
        raise ValueError("missing value")
    v = float(s)
    if not np.isfinite(v):
        raise ValueError("non-finite value")
    return v


def check_record(r: OhlcvRecord) -> None:
    if r.low > min(r.open, r.close):
        raise DataError(f"low {r.low} above min(open, close)")
    if r.high < max(r.open, r.close):
        raise DataError(f"high {r.high} below max(open, close)")
    if r.volume < 0:
        raise DataError(f"negative volume {r.volume}")


def load_ohlcv(path, check_bounds: bool = True) -> OhlcvSeries:
    """Read a daily OHLCV CSV (header names matched case-insensitively).

    Every failure names the 1-based line of the offending row.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: no records")
        columns: dict[str, int] = {}
        for j, name in enumerate(header):
            canon = COLUMN_ALIASES.get(name.strip().lower())
            if canon and canon not in columns:
                columns[canon] = j
        missing = [c for c in ("date",) + FEATURES if c not in columns]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")

        records: list[OhlcvRecord] = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                date = parse_date(row[columns["date"]])
                nums = [_parse_number(row[columns[c]]) for c in FEATURES]
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}: line {line_no}: {exc}") from None
            rec = OhlcvRecord(date, *nums)
            if records:
                prev = records[-1].date
                if date == prev:
                    raise DataError(f"{path}: line {line_no}: duplicate date {date}")
                if date < prev:
                    raise DataError(f"{path}: line {line_no}: date {date} not after {prev}")
            if check_bounds:
                try:
                    check_record(rec)
                except DataError as exc:
                    raise DataError(f"{path}: line {line_no}: {exc}") from None
            records.append(rec)
    if not records:
        raise DataError(f"{path}: no records")
    return OhlcvSeries.from_records(records)


def write_ohlcv(series: OhlcvSeries, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["Date", "Open", "High", "Low", "Close", "Volume"])
        for d, row in zip(series.dates, series.values):
            w.writerow([str(d), *[repr(float(v)) for v in row]])


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SplitBoundaries:
    n_train: int
    n_val: int
    n_test: int
    train_dates: tuple[dt.date, dt.date]
    val_dates: tuple[dt.date, dt.date]
    test_dates: tuple[dt.date, dt.date]

    @property
    def n(self) -> int:
        return self.n_train + self.n_val + self.n_test

    def ranges(self) -> dict[str, tuple[int, int]]:
        a, b = self.n_train, self.n_train + self.n_val
        return {"train": (0, a), "validation": (a, b), "test": (b, self.n)}

    def as_dict(self) -> dict:
        return {
            name: {"rows": stop - start, "first": str(dates[0]), "last": str(dates[1])}
            for (name, (start, stop)), dates in zip(
                self.ranges().items(), (self.train_dates, self.val_dates, self.test_dates))
        }


def chronological_split(series: OhlcvSeries, ratios: Sequence[float] = (0.8, 0.1, 0.1)) -> SplitBoundaries:
    """train = floor(r0*N), validation = floor(r1*N), test = remainder."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) <= 0:
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    n = len(series)
    # small epsilon guards against 0.8*10 = 7.999... style float truncation
    n_train = int(np.floor(ratios[0] * n + 1e-9))
    n_val = int(np.floor(ratios[1] * n + 1e-9))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise DataError(f"series of {n} rows too short for a three-way split")

    def span(a, b):
        return (series.dates[a].astype(dt.date), series.dates[b - 1].astype(dt.date))

    return SplitBoundaries(n_train, n_val, n_test, span(0, n_train),
                           span(n_train, n_train + n_val), span(n_train + n_val, n))


# ---------------------------------------------------------------------------
# scaling


@dataclass(frozen=True)
class MinMaxScaler:
    minimum: np.ndarray
    maximum: np.ndarray
    names: tuple[str, ...] = FEATURES

    @property
    def span(self) -> np.ndarray:
        return self.maximum - self.minimum

    def transform(self, rows: np.ndarray) -> np.ndarray:
        # no clipping: values beyond the train range map outside [0, 1]
        return (np.asarray(rows, dtype=np.float64) - self.minimum) / self.span

    def inverse(self, rows: np.ndarray) -> np.ndarray:
        return np.asarray(rows, dtype=np.float64) * self.span + self.minimum

    def inverse_feature(self, values: np.ndarray, j: int) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.span[j] + self.minimum[j]

    def transform_feature(self, values: np.ndarray, j: int) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.minimum[j]) / self.span[j]

    def to_dict(self) -> dict:
        return {"features": list(self.names), "min": self.minimum.tolist(), "max": self.maximum.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MinMaxScaler":
        return cls(np.array(d["min"], dtype=np.float64), np.array(d["max"], dtype=np.float64),
                   tuple(d["features"]))


def fit_minmax(train_rows: np.ndarray, names: Sequence[str] = FEATURES) -> MinMaxScaler:
    rows = np.asarray(train_rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 2:
        raise DataError("scaler needs at least 2 training rows")
    lo, hi = rows.min(axis=0), rows.max(axis=0)
    for j in np.flatnonzero(hi <= lo):
        raise DataError(f"feature '{names[j]}' is constant on the training split")
    return MinMaxScaler(lo, hi, tuple(names))


def apply_minmax(scaler: MinMaxScaler, rows: np.ndarray) -> np.ndarray:
    return scaler.transform(rows)


# ---------------------------------------------------------------------------
# outliers


@dataclass(frozen=True)
class OutlierReport:
    dates: np.ndarray
    values: np.ndarray
    z: np.ndarray
    threshold: float
    feature: str
    mean: float
    std: float

    @property
    def flagged(self) -> np.ndarray:
        return np.flatnonzero(np.abs(self.z) > self.threshold)

    @property
    def count(self) -> int:
        return int(self.flagged.size)

    @property
    def fraction(self) -> float:
        return self.count / len(self.z)

    def write_csv(self, path, flagged_only: bool = True, header_extra: dict | None = None) -> None:
        idx = self.flagged if flagged_only else np.arange(len(self.z))
        with Path(path).open("w", newline="") as fh:
            for k, v in (header_extra or {}).items():
                fh.write(f"# {k}={v}\n")
            fh.write(f"# threshold={self.threshold}\n# train_mean={self.mean!r}\n# train_std={self.std!r}\n")
            w = csv.writer(fh)
            w.writerow(["date", self.feature, "z"])
            for i in idx:
                w.writerow([str(self.dates[i]), repr(float(self.values[i])), repr(float(self.z[i]))])


def outlier_signal(series: OhlcvSeries, feature: str) -> tuple[np.ndarray, np.ndarray]:
    """(dates, values) of the series a Z-score is computed on."""
    if feature == "log_return":
        return series.dates[1:], np.diff(np.log(series.close))
    if feature not in FEATURES:
        raise ValueError(f"unknown outlier feature '{feature}'")
    return series.dates, series.values[:, FEATURES.index(feature)]


def zscore_outliers(series: OhlcvSeries, n_train: int, threshold: float = 3.0,
                    feature: str = "close", ddof: int = 0) -> OutlierReport:
    """Flag |z| > threshold over the full series using train-split mean/std.

    Nothing is removed; the report only lists candidates.
    """
    dates, values = outlier_signal(series, feature)
    train = values[: n_train - (1 if feature == "log_return" else 0)]
    std = float(np.std(train, ddof=ddof))
    if not std > 0:
        raise DataError(f"zero standard deviation of '{feature}' on the training split")
    mu = float(np.mean(train))
    return OutlierReport(dates, values, (values - mu) / std, threshold, feature, mu, std)


# ---------------------------------------------------------------------------
# calendar covariates


def calendar_covariates(dates) -> np.ndarray:
    """(N, 19) binary matrix: 7 day-of-week (Mon first) then 12 month indicators."""
    d = np.asarray(dates, dtype="datetime64[D]")
    weekday = (d.astype(np.int64) + 3) % 7  # 1970-01-01 was a Thursday
    month = d.astype("datetime64[M]").astype(np.int64) % 12
    out = np.zeros((len(d), N_CALENDAR))
    out[np.arange(len(d)), weekday] = 1.0
    out[np.arange(len(d)), 7 + month] = 1.0
    return out


def calendar_names() -> list[str]:
    return [f"dow_{w}" for w in WEEKDAYS] + [f"month_{m}" for m in MONTHS]


# ---------------------------------------------------------------------------
# windowing


def make_windows(rows: np.ndarray, lookback: int = 60, horizon: int = 1,
                 target_col: int = CLOSE) -> tuple[np.ndarray, np.ndarray]:
    """Sliding windows over one block: X[i] = rows[i:i+L], y[i] = rows[i+L+h-1, target]."""
    rows = np.asarray(rows, dtype=np.float64)
    n = len(rows) - lookback - horizon + 1
    if n < 1:
        raise DataError(f"{len(rows)} rows cannot form a {lookback}-step window with horizon {horizon}")
    X = np.lib.stride_tricks.sliding_window_view(rows, lookback, axis=0)[:n]
    X = np.ascontiguousarray(np.moveaxis(X, -1, 1))
    y = rows[lookback + horizon - 1: lookback + horizon - 1 + n, target_col].copy()
    return X, y


def windows_ending_before(rows: np.ndarray, targets: Sequence[int], lookback: int = 60) -> np.ndarray:
    """Windows rows[t-L:t] for each target row index t (history may cross splits)."""
    rows = np.asarray(rows, dtype=np.float64)
    targets = np.asarray(targets)
    if targets.size and targets.min() < lookback:
        raise DataError(f"target row {targets.min()} has fewer than {lookback} rows of history")
    return np.stack([rows[t - lookback:t] for t in targets]) if targets.size else np.empty((0, lookback, rows.shape[1]))


def tft_inputs(ohlcv_norm: np.ndarray, calendar: np.ndarray) -> np.ndarray:
    """Row t pairs OHLCV of day t with the calendar of day t+1.

    The last row of a window ending at the forecast origin therefore carries
    the forecast day's (known-ahead) calendar. ``calendar`` must have one more
    row than ``ohlcv_norm``.
    """
    if len(calendar) != len(ohlcv_norm) + 1:
        raise ValueError("calendar needs exactly one row beyond the OHLCV rows")
    return np.concatenate([ohlcv_norm, calendar[1:]], axis=1)


# ---------------------------------------------------------------------------
# access-ledgered dataset


@dataclass
class AccessLedger:
    """Append-only log of every split read, tagged with the pipeline stage."""

    entries: list[dict] = field(default_factory=list)

    def record(self, stage: str, split: str, rows: int) -> None:
        self.entries.append({"seq": len(self.entries), "stage": stage, "split": split, "rows": int(rows)})

    def reads(self, split: str, stage: str | None = None) -> list[dict]:
        return [e for e in self.entries if e["split"] == split and (stage is None or e["stage"] == stage)]

    def reads_outside(self, split: str, allowed_stages: Iterable[str]) -> list[dict]:
        allowed = set(allowed_stages)
        return [e for e in self.entries if e["split"] == split and e["stage"] not in allowed]

    def to_list(self) -> list[dict]:
        return [dict(e) for e in self.entries]


class LeakageError(RuntimeError):
    pass


EVALUATION_STAGES = ("evaluate",)


class SplitDataset:
    """Chronological train/validation/test views with a train-only scaler.

    Raw rows are kept private; every read goes through :meth:`rows` or
    :meth:`history_through`, which log to the access ledger. Normalisation of
    a split happens at read time, so preparing the dataset touches only train.
    """

    def __init__(self, series: OhlcvSeries, ratios: Sequence[float] = (0.8, 0.1, 0.1),
                 ledger: AccessLedger | None = None):
        self._series = series
        self.boundaries = chronological_split(series, ratios)
        self.ledger = ledger if ledger is not None else AccessLedger()
        a, b = self.boundaries.ranges()["train"]
        self.ledger.record("fit_scaler", "train", b - a)
        self.scaler = fit_minmax(series.values[a:b])

    @property
    def n(self) -> int:
        return len(self._series)

    def _range(self, split: str) -> tuple[int, int]:
        try:
            return self.boundaries.ranges()[split]
        except KeyError:
            raise ValueError(f"unknown split '{split}'") from None

    def raw_rows(self, split: str, stage: str) -> np.ndarray:
        a, b = self._range(split)
        self.ledger.record(stage, split, b - a)
        return self._series.values[a:b].copy()

    def rows(self, split: str, stage: str) -> np.ndarray:
        return self.scaler.transform(self.raw_rows(split, stage))

    def dates(self, split: str) -> np.ndarray:
        # dates are calendar facts, known ahead; not a market-data read
        a, b = self._range(split)
        return self._series.dates[a:b].copy()

    def history_through(self, split: str, stage: str) -> tuple[np.ndarray, np.ndarray, int]:
        """Normalized rows and dates from the series start through ``split``.

        Returns (rows, dates, offset) where ``offset`` is the index of the
        first row of ``split``. Each split touched is logged separately.
        """
        order = ("train", "validation", "test")
        upto = order.index(split)
        parts = [self.raw_rows(s, stage) for s in order[: upto + 1]]
        rows = self.scaler.transform(np.concatenate(parts))
        a, b = self._range(split)
        return rows, self._series.dates[:b].copy(), a

    def all_dates(self) -> np.ndarray:
        return self._series.dates.copy()

    def next_date(self) -> np.datetime64:
        return self._series.dates[-1] + np.timedelta64(1, "D")

    def assert_no_test_reads(self) -> None:
        bad = self.ledger.reads_outside("test", EVALUATION_STAGES)
        if bad:
            raise LeakageError(f"test split read outside evaluation: {bad}")


def normalized_table(series: OhlcvSeries, boundaries: SplitBoundaries, scaler: MinMaxScaler) -> list[list]:
    """Rows mirroring the 'after normalization' layout: date, split, scaled OHLVC."""
    labels = np.empty(len(series), dtype=object)
    for name, (a, b) in boundaries.ranges().items():
        labels[a:b] = name
    scaled = scaler.transform(series.values)
    order = [FEATURES.index(c) for c in ("open", "high", "low", "volume", "close")]
    return [[str(d), labels[i], *[float(scaled[i, j]) for j in order]] for i, d in enumerate(series.dates)]


def write_normalized_csv(series: OhlcvSeries, boundaries: SplitBoundaries, scaler: MinMaxScaler, path,
                         header_extra: dict | None = None) -> None:
    with Path(path).open("w", newline="") as fh:
        if header_extra:
            for k, v in header_extra.items():
                fh.write(f"# {k}={v}\n")
        w = csv.writer(fh)
        w.writerow(["Date", "Split", "Open minmax", "High minmax", "Low minmax", "Volume minmax", "Close minmax"])
        for row in normalized_table(series, boundaries, scaler):
            w.writerow([row[0], row[1], *[repr(v) for v in row[2:]]])
