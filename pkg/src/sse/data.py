"""Booking CSV ingestion, vocabularies, feature frames, folds and batches."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import date
from typing import Callable, Iterable, Sequence, TextIO

import numpy as np

logger = logging.getLogger(__name__)

COLUMNS = (
    "user_id", "checkin", "checkout", "city_id", "device_class",
    "affiliate_id", "booker_country", "hotel_country", "utrip_id",
)

# Column order of FeatureFrame.features; the second element names the
# vocabulary the column is encoded with, the third its embedding family.
FEATURES = (
    ("city", "city", "city"),
    ("hotel_country", "hotel_country", "categorical"),
    ("booker_country", "booker_country", "categorical"),
    ("next_booker_country", "booker_country", "categorical"),
    ("checkin_day", "day", "numerical"),
    ("checkin_month", "month", "numerical"),
    ("checkin_year", "year", "numerical"),
    ("next_checkin_day", "day", "numerical"),
    ("duration", "duration", "numerical"),
    ("next_duration", "duration", "numerical"),
    ("device_class", "device_class", "device"),
    ("transition_days", "transition", "numerical"),
    ("affiliate_id", "affiliate_id", "categorical"),
    ("next_affiliate_id", "affiliate_id", "categorical"),
)
FEATURE_NAMES = tuple(f[0] for f in FEATURES)
N_FEATURES = len(FEATURES)
UNKNOWN = 0


class SchemaError(ValueError):
    """The CSV header lacks required columns."""


class RowError(ValueError):
    """A CSV row could not be parsed."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SessionTooShort(ValueError):
    pass


@dataclass(frozen=True)
class Booking:
    user_id: str
    checkin: date
    checkout: date | None
    city_id: str
    hotel_country: str
    booker_country: str
    device_class: str
    affiliate_id: str
    utrip_id: str

    @property
    def duration(self) -> int | None:
        if self.checkout is None:
            return None
        return (self.checkout - self.checkin).days


@dataclass
class Session:
    utrip_id: str
    bookings: list[Booking]

    def __len__(self) -> int:
        return len(self.bookings)

    @property
    def cities(self) -> list[str]:
        return [b.city_id for b in self.bookings]


@dataclass
class ParseReport:
    rows: int = 0
    malformed: int = 0
    errors: list[str] = field(default_factory=list)


def _parse_date(text: str, line: int, column: str, optional: bool = False) -> date | None:
    text = text.strip()
    if not text and optional:
        return None
    try:
        return date.fromisoformat(text)
    except ValueError:
        raise RowError(line, f"unparseable {column} date {text!r}") from None


def load_sessions(source: str | os.PathLike | TextIO,
                  strict: bool = True) -> tuple[list[Session], ParseReport]:
    """Parse a booking CSV into sessions ordered by first appearance.

    With ``strict`` the first malformed row raises :class:`RowError`;
    otherwise malformed rows are skipped and counted in the report.
    Empty ``city_id``/``hotel_country``/``checkout`` are allowed so that
    concealed final bookings of a test file can be read.
    """
    if isinstance(source, (str, os.PathLike)):
        with open(source, newline="", encoding="utf-8") as fh:
            return load_sessions(fh, strict)

    reader = csv.DictReader(source)
    missing = [c for c in COLUMNS if c not in (reader.fieldnames or ())]
    if missing:
        raise SchemaError(f"missing required column(s): {', '.join(missing)}")

    report = ParseReport()
    groups: dict[str, list[Booking]] = defaultdict(list)
    for row in reader:
        report.rows += 1
        line = reader.line_num
        try:
            checkin = _parse_date(row["checkin"], line, "checkin")
            checkout = _parse_date(row["checkout"], line, "checkout", optional=True)
            if checkout is not None and checkout < checkin:
                raise RowError(line, f"checkout {checkout} precedes checkin {checkin}")
            utrip = row["utrip_id"].strip()
            if not utrip:
                raise RowError(line, "empty utrip_id")
        except RowError as err:
            if strict:
                raise
            report.malformed += 1
            report.errors.append(str(err))
            continue
        groups[utrip].append(Booking(
            user_id=row["user_id"].strip(),
            checkin=checkin,
            checkout=checkout,
            city_id=row["city_id"].strip(),
            hotel_country=row["hotel_country"].strip(),
            booker_country=row["booker_country"].strip(),
            device_class=row["device_class"].strip(),
            affiliate_id=row["affiliate_id"].strip(),
            utrip_id=utrip,
        ))
    if report.malformed:
        logger.warning("skipped %d malformed row(s)", report.malformed)
    # sorted() is stable: equal checkins keep file order.
    sessions = [Session(u, sorted(bs, key=lambda b: b.checkin)) for u, bs in groups.items()]
    return sessions, report


def parse_sessions(source, strict: bool = True) -> list[Session]:
    return load_sessions(source, strict)[0]


def write_sessions(sessions: Iterable[Session], dest: str | os.PathLike | TextIO) -> None:
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w", newline="", encoding="utf-8") as fh:
            write_sessions(sessions, fh)
        return
    writer = csv.writer(dest, lineterminator="\n")
    writer.writerow(COLUMNS)
    for s in sessions:
        for b in s.bookings:
            writer.writerow([
                b.user_id, b.checkin.isoformat(),
                b.checkout.isoformat() if b.checkout else "",
                b.city_id, b.device_class, b.affiliate_id,
                b.booker_country, b.hotel_country, b.utrip_id,
            ])


def sessions_to_csv(sessions: Iterable[Session]) -> str:
    buf = io.StringIO()
    write_sessions(sessions, buf)
    return buf.getvalue()


# --------------------------------------------------------------------------
# vocabulary

_CATEGORICAL = ("city", "hotel_country", "booker_country", "device_class", "affiliate_id", "year")
DEFAULT_CAPS = {"duration": 30, "transition": 30}


@dataclass
class Vocab:
    """Raw value -> dense index maps; index 0 is reserved for UNKNOWN.

    Day and month use fixed ranges; durations and transition days are
    clamped to ``[0, cap]`` and shifted by one so that 0 stays UNKNOWN.
    """

    maps: dict[str, dict[str, int]]
    caps: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_CAPS))

    def cardinality(self, vocab: str) -> int:
        if vocab in self.maps:
            return len(self.maps[vocab]) + 1
        if vocab == "day":
            return 32
        if vocab == "month":
            return 13
        if vocab in self.caps:
            return self.caps[vocab] + 2
        raise KeyError(vocab)

    def cardinalities(self) -> list[int]:
        return [self.cardinality(v) for _, v, _ in FEATURES]

    @property
    def n_cities(self) -> int:
        return self.cardinality("city")

    def index(self, vocab: str, raw) -> int:
        if vocab in self.maps:
            return self.maps[vocab].get(str(raw), UNKNOWN)
        if raw is None:
            return UNKNOWN
        if vocab == "day":
            return int(raw) if 1 <= raw <= 31 else UNKNOWN
        if vocab == "month":
            return int(raw) if 1 <= raw <= 12 else UNKNOWN
        return self.bucket(vocab, raw) + 1

    def bucket(self, vocab: str, value: int) -> int:
        """Clamp a day count into ``[0, cap]``."""
        return min(max(int(value), 0), self.caps[vocab])

    def cities(self) -> list[str]:
        """Raw city id per index (index 0 maps to the empty string)."""
        out = [""] * self.n_cities
        for raw, i in self.maps["city"].items():
            out[i] = raw
        return out

    def to_json(self) -> str:
        return json.dumps({"maps": self.maps, "caps": self.caps}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> Vocab:
        obj = json.loads(text)
        return cls({k: dict(v) for k, v in obj["maps"].items()}, dict(obj["caps"]))


def build_vocab(sessions: Sequence[Session], caps: dict[str, int] | None = None) -> Vocab:
    if not sessions:
        raise ValueError("cannot build a vocabulary from no sessions")
    values: dict[str, set[str]] = {k: set() for k in _CATEGORICAL}
    for s in sessions:
        for b in s.bookings:
            for key, raw in (("city", b.city_id), ("hotel_country", b.hotel_country),
                             ("booker_country", b.booker_country),
                             ("device_class", b.device_class),
                             ("affiliate_id", b.affiliate_id),
                             ("year", str(b.checkin.year))):
                if raw != "":
                    values[key].add(raw)
    maps = {k: {raw: i + 1 for i, raw in enumerate(sorted(v, key=_natural))}
            for k, v in values.items()}
    return Vocab(maps, dict(DEFAULT_CAPS, **(caps or {})))


def _natural(raw: str):
    return (0, int(raw), "") if raw.lstrip("-").isdigit() else (1, 0, raw)


# --------------------------------------------------------------------------
# features


@dataclass
class FeatureFrame:
    utrip_id: str
    features: np.ndarray  # (steps, 14) int64
    targets: np.ndarray  # (steps,) int64
    mask: np.ndarray  # (steps,) bool

    @property
    def steps(self) -> int:
        return self.features.shape[0]

    def __len__(self) -> int:
        return self.steps

    def prefix(self, t: int) -> FeatureFrame:
        return FeatureFrame(self.utrip_id, self.features[:t], self.targets[:t], self.mask[:t])


def featurize(session: Session, vocab: Vocab) -> FeatureFrame:
    """One row per prediction step: booking t plus next-booking context.

    The target of step t is the city of booking t+1.  For a test session
    whose last booking is the concealed query, the last target maps to
    UNKNOWN while the query's context columns are still used.
    """
    bs = session.bookings
    if len(bs) < 2:
        raise SessionTooShort(f"session {session.utrip_id!r} has {len(bs)} booking(s), need 2")
    steps = len(bs) - 1
    feats = np.zeros((steps, N_FEATURES), dtype=np.int64)
    targets = np.zeros(steps, dtype=np.int64)
    ix = vocab.index
    for t in range(steps):
        cur, nxt = bs[t], bs[t + 1]
        transition = (nxt.checkin - cur.checkout).days if cur.checkout else None
        feats[t] = (
            ix("city", cur.city_id),
            ix("hotel_country", cur.hotel_country),
            ix("booker_country", cur.booker_country),
            ix("booker_country", nxt.booker_country),
            ix("day", cur.checkin.day),
            ix("month", cur.checkin.month),
            ix("year", cur.checkin.year),
            ix("day", nxt.checkin.day),
            ix("duration", cur.duration),
            ix("duration", nxt.duration),
            ix("device_class", cur.device_class),
            ix("transition", transition),
            ix("affiliate_id", cur.affiliate_id),
            ix("affiliate_id", nxt.affiliate_id),
        )
        targets[t] = ix("city", nxt.city_id)
    return FeatureFrame(session.utrip_id, feats, targets, np.ones(steps, dtype=bool))


def featurize_all(sessions: Iterable[Session], vocab: Vocab) -> list[FeatureFrame]:
    """Featurize every session with at least one prediction step."""
    return [featurize(s, vocab) for s in sessions if len(s) >= 2]


# --------------------------------------------------------------------------
# folds and batches


def stratified_kfold(items: Sequence, k: int, seed: int,
                     length: Callable[[object], int] = len) -> list[list[int]]:
    """Split item indices into k folds with matching length distributions.

    Items are grouped by length; each group is shuffled and dealt
    round-robin, the dealing position carrying over between groups so fold
    sizes differ by at most one.
    """
    if k < 2:
        raise ValueError("need at least 2 folds")
    if k > len(items):
        raise ValueError(f"cannot split {len(items)} items into {k} folds")
    rng = np.random.default_rng(seed)
    groups: dict[int, list[int]] = defaultdict(list)
    for i, item in enumerate(items):
        groups[length(item)].append(i)
    folds: list[list[int]] = [[] for _ in range(k)]
    pos = 0
    for key in sorted(groups):
        members = groups[key]
        for j in rng.permutation(len(members)):
            folds[pos % k].append(members[j])
            pos += 1
    return [sorted(f) for f in folds]


@dataclass
class Batch:
    frames: list[FeatureFrame]
    features: np.ndarray  # (B, T, 14)
    targets: np.ndarray  # (B, T)
    mask: np.ndarray  # (B, T) bool

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def max_steps(self) -> int:
        return self.features.shape[1]

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    @classmethod
    def from_frames(cls, frames: Sequence[FeatureFrame]) -> Batch:
        if not frames:
            raise ValueError("empty batch")
        B, T = len(frames), max(f.steps for f in frames)
        feats = np.zeros((B, T, N_FEATURES), dtype=np.int64)
        targets = np.zeros((B, T), dtype=np.int64)
        mask = np.zeros((B, T), dtype=bool)
        for b, f in enumerate(frames):
            n = f.steps
            feats[b, :n] = f.features
            targets[b, :n] = f.targets
            mask[b, :n] = f.mask
        return cls(list(frames), feats, targets, mask)

    def final_step_mask(self) -> np.ndarray:
        """Mask keeping only each session's last valid step."""
        out = np.zeros_like(self.mask)
        out[np.arange(self.size), self.lengths - 1] = True
        return out


def make_batches(frames: Sequence[FeatureFrame], batch_size: int, sort_by_length: bool,
                 seed: int | None) -> list[Batch]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng(seed)
    if sort_by_length:
        order = sorted(range(len(frames)), key=lambda i: frames[i].steps)
        chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
        chunks = [chunks[i] for i in rng.permutation(len(chunks))]
    else:
        order = list(rng.permutation(len(frames)))
        chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    return [Batch.from_frames([frames[i] for i in c]) for c in chunks]


# --------------------------------------------------------------------------
# length statistics


@dataclass
class LengthReport:
    """Step-count histograms before and after prefix augmentation."""

    counts: dict[int, int]
    prefix_counts: dict[int, int]
    dropped: int  # sessions with no prediction step

    @property
    def total_sequences(self) -> int:
        return sum(self.counts.values())

    @property
    def total_prefixes(self) -> int:
        return sum(self.prefix_counts.values())

    @property
    def proportions(self) -> dict[int, float]:
        n = self.total_sequences
        return {t: c / n for t, c in self.counts.items()} if n else {}

    @property
    def prefix_proportions(self) -> dict[int, float]:
        n = self.total_prefixes
        return {t: c / n for t, c in self.prefix_counts.items()} if n else {}

    @property
    def augmentation_factor(self) -> float:
        return self.total_prefixes / self.total_sequences if self.total_sequences else 0.0

    def format(self, top: int = 10) -> str:
        def binned(props):
            rows = {t: props.get(t, 0.0) for t in range(1, top + 1)}
            rows[f">{top}"] = sum(p for t, p in props.items() if t > top)
            return rows

        seq, pre = binned(self.proportions), binned(self.prefix_proportions)
        lines = ["length,sequences,prefixes"]
        lines += [f"{t},{seq[t]:.3f},{pre[t]:.3f}" for t in seq]
        lines.append(f"total,{self.total_sequences},{self.total_prefixes}")
        return "\n".join(lines)


def length_distribution_report(sessions: Iterable[Session]) -> LengthReport:
    counts: Counter[int] = Counter()
    dropped = 0
    for s in sessions:
        steps = len(s) - 1  # last observation has no next booking
        if steps < 1:
            dropped += 1
        else:
            counts[steps] += 1
    prefix: Counter[int] = Counter()
    for steps, n in counts.items():
        for t in range(1, steps + 1):
            prefix[t] += n
    return LengthReport(dict(sorted(counts.items())), dict(sorted(prefix.items())), dropped)
