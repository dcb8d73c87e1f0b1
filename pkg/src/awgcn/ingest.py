"""Parsing raw profiles and dataset files into labelled call sequences."""

from __future__ import annotations

import csv
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import PurePath
from typing import IO, Iterable, Iterator, Mapping, Sequence

log = logging.getLogger(__name__)


class IngestError(ValueError):
    """Base class for parse failures. ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)


class MalformedHeader(IngestError):
    pass


class DanglingRecord(IngestError):
    pass


class OrphanParameter(IngestError):
    pass


class JsonlError(IngestError):
    pass


class RaggedRow(IngestError):
    """Row width differs from the header. ``line`` holds the 0-based data row index."""

    def __init__(self, message: str, row: int):
        self.row = row
        IngestError.__init__(self, f"row {row}: {message}")


class EmptySchema(IngestError):
    pass


class EmptyDataset(IngestError):
    pass


@dataclass(frozen=True)
class Call:
    name: str
    pars: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        name = self.name.strip()
        if not name:
            raise ValueError("call name is empty")
        object.__setattr__(self, "name", name)
        object.__setattr__(self, "pars", dict(self.pars))


@dataclass(frozen=True)
class CallSequence:
    hash: str
    label: str
    seq: tuple[Call, ...]
    # noise-augmented sequences are never trained on
    test_only: bool = False

    def __post_init__(self):
        object.__setattr__(self, "seq", tuple(self.seq))

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.seq]

    def __len__(self) -> int:
        return len(self.seq)

    @classmethod
    def from_names(cls, hash: str, label: str, names: Iterable[str], test_only: bool = False):
        return cls(hash, label, tuple(Call(n) for n in names), test_only)


class Vocabulary:
    """Ordered set of call names; position = one-hot index."""

    def __init__(self, tokens: Iterable[str]):
        self.tokens = tuple(sorted(set(tokens)))
        self._index = {t: i for i, t in enumerate(self.tokens)}

    def index(self, name: str) -> int:
        return self._index[name]

    def get(self, name: str, default=None):
        return self._index.get(name, default)

    def __contains__(self, name: object) -> bool:
        return name in self._index

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self) -> Iterator[str]:
        return iter(self.tokens)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __repr__(self) -> str:
        return f"Vocabulary({len(self.tokens)} tokens)"


@dataclass(frozen=True)
class Dataset:
    sequences: tuple[CallSequence, ...]
    vocabulary: Vocabulary
    label_set: tuple[str, ...]
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.sequences)

    def label_index(self, label: str) -> int:
        return self.label_set.index(label)


def build_dataset(seqs: Iterable[CallSequence]) -> Dataset:
    """Admit non-empty sequences and derive the sorted vocabulary and label set."""
    kept, dropped = [], 0
    for s in seqs:
        if len(s) == 0:
            dropped += 1
        else:
            kept.append(s)
    if dropped:
        log.warning("dropped %d empty sequence(s)", dropped)
    if not kept:
        raise EmptyDataset("no sequence survived admission")
    vocab = Vocabulary(c.name for s in kept for c in s.seq)
    labels = tuple(sorted({s.label for s in kept}))
    return Dataset(tuple(kept), vocab, labels, dropped)


# --- sandbox profile text -------------------------------------------------

_HEADER = re.compile(r"^\s*(\d+)\s+(\S.*?)\s*$")


def parse_profile(text: str) -> CallSequence:
    """Parse one sandbox profile.

    Layout: a ``<pid> <image-name>`` header, then records made of a ``#<timestamp>``
    line, one call-name line and any number of ``key=value`` lines.  A line
    without ``=`` that follows a parameter continues that parameter's value.
    The returned sequence has an empty label.
    """
    lines = text.splitlines()
    pos = 0
    while pos < len(lines) and not lines[pos].strip():
        pos += 1
    if pos == len(lines):
        raise MalformedHeader("profile is empty", 1)
    m = _HEADER.match(lines[pos])
    if not m:
        raise MalformedHeader(f"expected '<pid> <image-name>', got {lines[pos]!r}", pos + 1)
    image = m.group(2)
    hash_ = PurePath(image.replace("\\", "/")).stem or image

    records: list[tuple[str, int, str, dict[str, str]]] = []
    current: dict[str, str] | None = None
    last_key: str | None = None
    i = pos + 1
    while i < len(lines):
        raw = lines[i]
        line = raw.strip()
        if line.startswith("#"):
            stamp = line[1:].strip()
            j = i + 1
            while j < len(lines) and not lines[j].strip():
                j += 1
            if j == len(lines) or lines[j].strip().startswith("#"):
                raise DanglingRecord(f"timestamp {stamp!r} has no call name", i + 1)
            current = {}
            last_key = None
            records.append((stamp, i + 1, lines[j].strip(), current))
            i = j + 1
            continue
        if line:
            if current is None:
                raise OrphanParameter(f"parameter line before first record: {line!r}", i + 1)
            if "=" in line:
                key, value = line.split("=", 1)
                current[key] = value
                last_key = key
            elif last_key is not None:
                current[last_key] += line
            else:
                raise OrphanParameter(f"continuation with no preceding parameter: {line!r}", i + 1)
        i += 1

    try:
        stamps = [int(r[0]) for r in records]
    except ValueError:
        order = list(range(len(records)))
    else:
        order = sorted(range(len(records)), key=lambda k: stamps[k])
    seq = tuple(Call(records[k][2], records[k][3]) for k in order)
    return CallSequence(hash_, "", seq)


# --- JSONL ---------------------------------------------------------------

@dataclass(frozen=True)
class LineError:
    line: int
    message: str


def _record_to_sequence(obj: object) -> CallSequence:
    if not isinstance(obj, dict):
        raise ValueError("record is not an object")
    for key in ("hash", "label", "seq"):
        if key not in obj:
            raise ValueError(f"missing field {key!r}")
    if not isinstance(obj["hash"], str) or not obj["hash"]:
        raise ValueError("'hash' must be a non-empty string")
    if not isinstance(obj["label"], str):
        raise ValueError("'label' must be a string")
    if not isinstance(obj["seq"], list):
        raise ValueError("'seq' must be a list")
    calls = []
    for item in obj["seq"]:
        if isinstance(item, str):
            calls.append(Call(item))
        elif isinstance(item, dict) and isinstance(item.get("name"), str):
            pars = item.get("pars") or {}
            if not isinstance(pars, dict) or not all(
                isinstance(k, str) and isinstance(v, str) for k, v in pars.items()
            ):
                raise ValueError("'pars' must map strings to strings")
            calls.append(Call(item["name"], pars))
        else:
            raise ValueError(f"bad call entry {item!r}")
    return CallSequence(obj["hash"], obj["label"], tuple(calls), bool(obj.get("test_only", False)))


def parse_jsonl(
    stream: Iterable[str],
    *,
    strict: bool = False,
    errors: list[LineError] | None = None,
) -> list[CallSequence]:
    """Read one sequence per line.

    Bad lines are skipped and appended to ``errors`` (if given); with
    ``strict=True`` the first bad line raises :class:`JsonlError`.
    """
    out = []
    for lineno, line in enumerate(stream, 1):
        if not line.strip():
            continue
        try:
            out.append(_record_to_sequence(json.loads(line)))
        except (ValueError, TypeError) as exc:
            if strict:
                raise JsonlError(str(exc), lineno) from exc
            log.warning("line %d skipped: %s", lineno, exc)
            if errors is not None:
                errors.append(LineError(lineno, str(exc)))
    return out


def sequence_to_record(s: CallSequence) -> dict:
    rec = {
        "hash": s.hash,
        "label": s.label,
        "seq": [c.name if not c.pars else {"name": c.name, "pars": dict(c.pars)} for c in s.seq],
    }
    if s.test_only:
        rec["test_only"] = True
    return rec


def write_jsonl(seqs: Iterable[CallSequence], stream: IO[str]) -> int:
    n = 0
    for s in seqs:
        stream.write(json.dumps(sequence_to_record(s), ensure_ascii=False, separators=(",", ":")))
        stream.write("\n")
        n += 1
    return n


def load_jsonl(path, *, strict: bool = False) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        return build_dataset(parse_jsonl(fh, strict=strict))


# --- wide CSV --------------------------------------------------------------

def parse_wide_csv(
    stream: Iterable[str],
    *,
    hash_col: str = "hash",
    label_col: str = "label",
) -> list[CallSequence]:
    """One row per sequence; every column other than hash/label is a call slot, in header order."""
    reader = csv.reader(stream)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise EmptySchema("CSV has no header") from None
    for col in (hash_col, label_col):
        if col not in header:
            raise EmptySchema(f"column {col!r} not in header")
    h_at, l_at = header.index(hash_col), header.index(label_col)
    call_at = [i for i in range(len(header)) if i not in (h_at, l_at)]
    if not call_at:
        raise EmptySchema("no call columns")
    out = []
    for row_idx, row in enumerate(reader):
        if not row:
            continue
        if len(row) != len(header):
            raise RaggedRow(f"{len(row)} fields, header has {len(header)}", row_idx)
        names = [_token(row[i]) for i in call_at]
        out.append(CallSequence.from_names(row[h_at].strip(), row[l_at].strip(), names))
    return out


def _token(cell: str) -> str:
    cell = cell.strip()
    # integer tokens keep their canonical decimal form ("007" -> "7")
    try:
        return str(int(cell))
    except ValueError:
        return cell


def relabel(seqs: Sequence[CallSequence], labels: Mapping[str, str], keys: Sequence[str]) -> list[CallSequence]:
    """Attach labels looked up by ``keys[i]`` (falling back to the sequence hash)."""
    out = []
    for s, key in zip(seqs, keys):
        label = labels.get(key, labels.get(s.hash))
        if label is None:
            raise KeyError(f"no label for {key!r}")
        out.append(CallSequence(s.hash, label, s.seq, s.test_only))
    return out
