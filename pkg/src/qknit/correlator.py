"""Time-tag post-processing: pulse binning, pair capture, chaining, counts.

Clicks are attributed to the pulse that precedes them and kept only inside
the integration window. Two kept photons whose pulse indices differ by 1 or 2
form a correlated pair (the correlation window spans three integration
windows). Pairs sharing a photon are joined into maximal chains; a chain of
k >= 3 photons is one k-photon event.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import SchemaError, TruncatedFileError
from .states import AXES
from .tags import N_DETECTORS, SettingsLog, TagStream, iter_tag_chunks, read_header

MAX_GAP = 2  # pulse-index reach of one correlation window (3 integration windows)

TAGGED_DTYPE = np.dtype([("pulse", "<i8"), ("detector", "u1"), ("delay", "<u4"), ("time", "<u8")])


@dataclass(frozen=True)
class TaggedPhoton:
    pulse_index: int
    detector: int
    delay_in_window: int

    @property
    def channel(self) -> int:
        return self.detector // 2

    @property
    def port(self) -> str:
        return "transmit" if self.detector % 2 == 0 else "reflect"


@dataclass(frozen=True)
class CorrelatedEvent:
    photons: tuple[TaggedPhoton, ...]

    def __post_init__(self) -> None:
        if len(self.photons) < 2:
            raise ValueError("a correlated event has at least two photons")
        if any(not 1 <= g <= MAX_GAP for g in self.gaps):
            raise ValueError(f"gaps {self.gaps} outside the correlation window")

    @property
    def multiplicity(self) -> int:
        return len(self.photons)

    @property
    def gaps(self) -> tuple[int, ...]:
        p = [ph.pulse_index for ph in self.photons]
        return tuple(b - a for a, b in zip(p, p[1:]))


# ---------------------------------------------------------------------------
# binning
# ---------------------------------------------------------------------------


def bin_to_pulses(times, detectors, pulse_period_ps: int, t_int_ps: int) -> np.ndarray:
    """Attribute each click to its preceding pulse and keep those with delay <= T_int.

    Returns a TAGGED_DTYPE array ordered by pulse index.
    """
    times = np.asarray(times, dtype=np.int64)
    detectors = np.asarray(detectors)
    if len(times) > 1 and np.any(np.diff(times) < 0):
        raise ValueError("time tags are not in non-decreasing order")
    pulse, delay = np.divmod(times, int(pulse_period_ps))
    keep = delay <= int(t_int_ps)
    out = np.empty(int(keep.sum()), dtype=TAGGED_DTYPE)
    out["pulse"] = pulse[keep]
    out["detector"] = detectors[keep]
    out["delay"] = delay[keep]
    out["time"] = times[keep]
    return out


def drop_multi_clicks(tagged: np.ndarray) -> tuple[np.ndarray, int]:
    """Remove every pulse that produced more than one kept click.

    Returns the surviving photons and the number of removed pulses.
    """
    if len(tagged) < 2:
        return tagged, 0
    p = tagged["pulse"]
    same = p[1:] == p[:-1]
    dup = np.zeros(len(p), dtype=bool)
    dup[1:] |= same
    dup[:-1] |= same
    n_pulses = int(np.count_nonzero(same & ~np.r_[False, same[:-1]]))
    return tagged[~dup], n_pulses


# ---------------------------------------------------------------------------
# pairs and chains
# ---------------------------------------------------------------------------


def find_pairs(tagged: np.ndarray, max_gap: int = MAX_GAP) -> np.ndarray:
    """Index pairs (i, j), i < j, of photons whose pulse gap is in 1..max_gap.

    ``tagged`` must hold at most one photon per pulse, ordered by pulse.
    """
    p = np.asarray(tagged["pulse"] if tagged.dtype.names else tagged, dtype=np.int64)
    out = []
    for shift in range(1, max_gap + 1):
        if len(p) <= shift:
            break
        g = p[shift:] - p[:-shift]
        i = np.nonzero((g >= 1) & (g <= max_gap))[0]
        out.append(np.stack([i, i + shift], axis=1))
    if not out:
        return np.zeros((0, 2), dtype=np.int64)
    pairs = np.concatenate(out)
    return pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]


def chain_events(pairs: np.ndarray, n_photons: "int | None" = None, min_size: int = 3) -> list[np.ndarray]:
    """Maximal chains of pairs sharing photons, as sorted photon-index arrays.

    Every connected group of at least ``min_size`` photons is one event; no
    sub-chain is reported separately.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        return []
    n = int(pairs.max()) + 1 if n_photons is None else int(n_photons)
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    involved = np.zeros(n, dtype=bool)
    involved[pairs.ravel()] = True
    order = np.argsort(labels[involved], kind="stable")
    idx = np.nonzero(involved)[0][order]
    lab = labels[idx]
    cuts = np.nonzero(np.diff(lab))[0] + 1
    groups = np.split(idx, cuts)
    groups = [np.sort(g) for g in groups if len(g) >= min_size]
    groups.sort(key=lambda g: int(g[0]))
    return groups


def maximal_runs(pulses: np.ndarray, max_gap: int = MAX_GAP) -> tuple[np.ndarray, np.ndarray]:
    """(start, length) of maximal runs whose consecutive pulse gaps are <= max_gap.

    Equivalent to chain_events(find_pairs(...)) with min_size 1, in linear time.
    """
    pulses = np.asarray(pulses, dtype=np.int64)
    if len(pulses) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    brk = np.nonzero(np.diff(pulses) > max_gap)[0] + 1
    starts = np.r_[0, brk]
    lengths = np.diff(np.r_[starts, len(pulses)])
    return starts, lengths


def event_windows(
    starts: np.ndarray, lengths: np.ndarray, min_k: int = 2, max_k: int = 5, embedded: bool = False
) -> Iterator[tuple[int, np.ndarray]]:
    """Yield ``(k, first_index_array)`` of the events to tabulate.

    Without ``embedded`` only whole runs with min_k <= length <= max_k are
    events. With ``embedded`` every contiguous window of k photons inside a
    run contributes, for each k in min_k..max_k.
    """
    for k in range(min_k, max_k + 1):
        if embedded:
            ok = lengths >= k
            reps = lengths[ok] - k + 1
            if reps.sum() == 0:
                continue
            base = np.repeat(starts[ok], reps)
            offs = np.arange(reps.sum()) - np.repeat(np.cumsum(reps) - reps, reps)
            yield k, base + offs
        else:
            sel = starts[lengths == k]
            if len(sel):
                yield k, sel


def events_from_tagged(tagged: np.ndarray, min_size: int = 2) -> list[CorrelatedEvent]:
    """Materialize maximal events as CorrelatedEvent objects (small inputs)."""
    starts, lengths = maximal_runs(tagged["pulse"])
    out = []
    for s, n in zip(starts, lengths):
        if n >= min_size:
            out.append(
                CorrelatedEvent(
                    tuple(
                        TaggedPhoton(int(r["pulse"]), int(r["detector"]), int(r["delay"]))
                        for r in tagged[s:s + n]
                    )
                )
            )
    return out


# ---------------------------------------------------------------------------
# counts
# ---------------------------------------------------------------------------


def _sign(detector) -> str:
    return "+" if detector % 2 == 0 else "-"


def cell_key(gaps: Sequence[int], bases: Sequence[str], outcomes: Sequence[str]) -> str:
    return "gaps={}|bases={}|out={}".format(
        ",".join(str(g) for g in gaps), ",".join(bases), ",".join(outcomes)
    )


def parse_key(key: str) -> tuple[tuple[int, ...], tuple[str, ...], tuple[str, ...]]:
    try:
        parts = dict(p.split("=", 1) for p in key.split("|"))
        gaps = tuple(int(g) for g in parts["gaps"].split(",")) if parts["gaps"] else ()
        bases = tuple(parts["bases"].split(","))
        outs = tuple(parts["out"].split(","))
    except (KeyError, ValueError) as exc:
        raise SchemaError(f"bad counts key {key!r}") from exc
    if len(bases) != len(outs) or len(gaps) != len(bases) - 1:
        raise SchemaError(f"inconsistent counts key {key!r}")
    if any(b not in AXES for b in bases) or any(o[1:] != b or o[0] not in "+-" for o, b in zip(outs, bases)):
        raise SchemaError(f"bad bases/outcomes in {key!r}")
    return gaps, bases, outs


@dataclass
class CountsTable:
    """Counts per (gap pattern, basis setting, outcome) cell, plus diagnostics."""

    cells: dict[tuple[tuple[int, ...], tuple[str, ...], tuple[str, ...]], int] = field(default_factory=dict)
    diagnostics: dict[str, int] = field(default_factory=dict)

    def add(self, gaps, bases, outcomes, n: int = 1) -> None:
        if n < 0:
            raise ValueError("counts must be nonnegative")
        key = (tuple(int(g) for g in gaps), tuple(bases), tuple(outcomes))
        self.cells[key] = self.cells.get(key, 0) + int(n)

    def bump(self, name: str, n: int = 1) -> None:
        self.diagnostics[name] = self.diagnostics.get(name, 0) + int(n)

    @property
    def total(self) -> int:
        return sum(self.cells.values())

    def total_for(self, gaps) -> int:
        gaps = tuple(gaps)
        return sum(c for (g, _, _), c in self.cells.items() if g == gaps)

    def merge(self, other: "CountsTable") -> "CountsTable":
        out = CountsTable(dict(self.cells), dict(self.diagnostics))
        for k, v in other.cells.items():
            out.cells[k] = out.cells.get(k, 0) + v
        for k, v in other.diagnostics.items():
            out.diagnostics[k] = out.diagnostics.get(k, 0) + v
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, CountsTable):
            return NotImplemented
        strip = lambda d: {k: v for k, v in d.items() if v}
        return strip(self.cells) == strip(other.cells) and strip(self.diagnostics) == strip(other.diagnostics)

    def to_json(self) -> dict:
        cells = {cell_key(*k): v for k, v in self.cells.items()}
        return {
            "cells": dict(sorted(cells.items())),
            "diagnostics": dict(sorted(self.diagnostics.items())),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CountsTable":
        if not isinstance(obj, dict) or "cells" not in obj:
            raise SchemaError("counts table JSON needs a 'cells' object")
        out = cls()
        for key, v in obj["cells"].items():
            if not isinstance(v, int) or v < 0:
                raise SchemaError(f"bad count {v!r} for {key}")
            out.add(*parse_key(key), v)
        for k, v in obj.get("diagnostics", {}).items():
            out.bump(k, int(v))
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1)


def accumulate_counts(
    tagged: np.ndarray,
    settings: SettingsLog,
    events: "Iterable[tuple[int, np.ndarray]] | None" = None,
    counts: "CountsTable | None" = None,
    max_k: int = 5,
    embedded: bool = False,
) -> CountsTable:
    """Add every event of ``tagged`` to a counts table.

    ``events`` is an iterable of ``(k, first_indices)`` as produced by
    event_windows; by default the maximal runs of ``tagged`` are used.
    Events crossing a basis-setting change are dropped and counted under
    ``boundary``.
    """
    counts = counts if counts is not None else CountsTable()
    if events is None:
        starts, lengths = maximal_runs(tagged["pulse"])
        counts.bump("too_long", int(np.count_nonzero(lengths > max_k)))
        events = event_windows(starts, lengths, 2, max_k, embedded)
    seg = settings.segment_of(tagged["time"].astype(np.int64))
    axis = settings.axis_table()[seg, tagged["detector"] // 2]
    minus = (tagged["detector"] % 2).astype(np.int64)
    pulses = tagged["pulse"]
    for k, first in events:
        idx = first[:, None] + np.arange(k)[None, :]
        crosses = np.any(seg[idx] != seg[idx[:, :1]], axis=1)
        if crosses.any():
            counts.bump("boundary", int(crosses.sum()))
            idx = idx[~crosses]
        if len(idx) == 0:
            continue
        # mixed-radix cell code: per photon (gap-1 in 0..1, axis in 0..2, sign bit)
        gaps = np.diff(pulses[idx], axis=1) - 1
        digits = np.concatenate([gaps, axis[idx], minus[idx]], axis=1)
        radix = np.array([MAX_GAP] * (k - 1) + [3] * k + [2] * k, dtype=np.int64)
        weights = np.cumprod(np.r_[1, radix[:0:-1]])[::-1]
        codes, n = np.unique(digits @ weights, return_counts=True)
        for code, c in zip(codes, n):
            row = (int(code) // weights) % radix
            g = tuple(int(x) + 1 for x in row[: k - 1])
            bases = tuple(AXES[a] for a in row[k - 1: 2 * k - 1])
            outs = tuple(("-" if m else "+") + b for m, b in zip(row[2 * k - 1:], bases))
            counts.add(g, bases, outs, int(c))
    return counts


# ---------------------------------------------------------------------------
# streaming
# ---------------------------------------------------------------------------


@dataclass
class CorrelatorStats:
    raw_events: int = 0
    kept_photons: int = 0
    multi_click_pulses: int = 0
    pairs: int = 0
    chains: dict[int, int] = field(default_factory=dict)
    first_time_ps: int = -1
    last_time_ps: int = -1

    def to_json(self) -> dict:
        d = dict(self.__dict__)
        d["chains"] = {str(k): v for k, v in sorted(self.chains.items())}
        return d


class Correlator:
    """Single-pass correlator over time-ordered chunks of clicks.

    A photon is final once a click at a later pulse has been seen (no further
    click can share its pulse). Only a short look-back of final photons is
    held: the open chain while it is short enough to be an event, otherwise
    the last ``max_k - 1`` photons. Results do not depend on the chunking.
    """

    def __init__(
        self,
        pulse_period_ps: int,
        t_int_ps: int,
        settings: "SettingsLog | None" = None,
        max_k: int = 5,
        embedded: bool = False,
        keep_events: bool = False,
    ) -> None:
        if max_k < 2:
            raise ValueError("max_k must be >= 2")
        self.period = int(pulse_period_ps)
        self.t_int = int(t_int_ps)
        self.settings = settings or SettingsLog()
        self.max_k = max_k
        self.embedded = embedded
        self.keep_events = keep_events
        self.counts = CountsTable()
        self.stats = CorrelatorStats()
        self.events: list[np.ndarray] = []
        self._carry = np.zeros(0, dtype=TAGGED_DTYPE)
        self._confirmed_below = -(1 << 62)  # pulses below this are final and counted
        self._run_len = 0  # final photons in the open chain
        self._last_time = -1

    @property
    def buffered(self) -> int:
        return len(self._carry)

    def feed(self, times, detectors) -> None:
        times = np.asarray(times, dtype=np.int64)
        if len(times) == 0:
            return
        if times[0] < self._last_time:
            raise ValueError("time tags are not in non-decreasing order across chunks")
        tagged = bin_to_pulses(times, detectors, self.period, self.t_int)
        self._last_time = int(times[-1])
        if self.stats.first_time_ps < 0:
            self.stats.first_time_ps = int(times[0])
        self.stats.last_time_ps = int(times[-1])
        self.stats.raw_events += len(times)
        if len(tagged):
            self._process(np.concatenate([self._carry, tagged]), final=False)

    def feed_records(self, records: np.ndarray) -> None:
        self.feed(records["time"], records["detector"])

    def finish(self) -> CountsTable:
        self._process(self._carry, final=True)
        self._carry = np.zeros(0, dtype=TAGGED_DTYPE)
        return self.counts

    def _process(self, raw: np.ndarray, final: bool) -> None:
        last = int(raw["pulse"][-1]) if len(raw) else self._confirmed_below
        limit = (1 << 62) if final else last
        fresh = (raw["pulse"] >= self._confirmed_below) & (raw["pulse"] < limit)
        _, n_multi = drop_multi_clicks(raw[fresh])
        self.stats.multi_click_pulses += n_multi

        clean, _ = drop_multi_clicks(raw)
        p = clean["pulse"]
        e0 = int(np.searchsorted(p, self._confirmed_below, side="left"))
        n_conf = int(np.searchsorted(p, limit, side="left"))
        self.stats.kept_photons += n_conf - e0

        # pairs ending on a newly final photon
        new = np.arange(e0, n_conf)
        for s in range(1, MAX_GAP + 1):
            j = new[new >= s]
            self.stats.pairs += int(np.count_nonzero(p[j] - p[j - s] <= MAX_GAP))

        # chains closed by a gap > MAX_GAP among final photons
        breaks = new[(new >= 1) & (np.diff(p[: n_conf], prepend=p[0] if n_conf else 0)[new] > MAX_GAP)]
        if self._run_len == 0 and e0 < n_conf:
            breaks = breaks[breaks != e0]
            open_start = e0
        else:
            open_start = e0 - self._run_len
        closed = []
        for b in breaks:
            closed.append((open_start, int(b) - open_start))
            open_start = int(b)
        if final and n_conf > open_start:
            closed.append((open_start, n_conf - open_start))
            open_start = n_conf
        self._run_len = n_conf - open_start

        for s, n in closed:
            if n >= 3:
                self.stats.chains[n] = self.stats.chains.get(n, 0) + 1
            if n > self.max_k:
                self.counts.bump("too_long")
            if self.keep_events and 2 <= n <= self.max_k:
                self.events.append(clean[s:s + n].copy())

        if self.embedded:
            run_start = np.zeros(n_conf, dtype=np.int64)
            if n_conf:
                brk = np.zeros(n_conf, dtype=bool)
                brk[1:] = np.diff(p[:n_conf]) > MAX_GAP
                run_start = np.maximum.accumulate(np.where(brk, np.arange(n_conf), 0))
            windows = []
            for k in range(2, self.max_k + 1):
                ends = np.arange(max(e0, k - 1), n_conf)
                first = ends - k + 1
                ok = first >= run_start[ends]
                if ok.any():
                    windows.append((k, first[ok]))
        else:
            windows = []
            for s, n in closed:
                if 2 <= n <= self.max_k:
                    windows.append((n, np.array([s])))
        accumulate_counts(clean, self.settings, windows, self.counts)

        if final:
            return
        keep_from = max(0, n_conf - (self.max_k - 1))
        if self._run_len <= self.max_k:
            keep_from = min(keep_from, open_start)
        cut = int(p[keep_from]) if keep_from < n_conf else last
        self._carry = raw[raw["pulse"] >= cut]
        self._confirmed_below = last

    def summary(self) -> dict:
        dur = max(self.stats.last_time_ps - self.stats.first_time_ps, 0) * 1e-12
        out = self.stats.to_json()
        out["duration_s"] = dur
        if dur > 0:
            out["pair_rate_hz"] = self.stats.pairs / dur
            out["triple_rate_hz"] = self.stats.chains.get(3, 0) / dur
            out["quadruple_rate_hz"] = self.stats.chains.get(4, 0) / dur
        return out


def correlate_stream(
    stream: TagStream, t_int_ps: int, max_k: int = 5, embedded: bool = False, chunk: int = 1 << 20
) -> Correlator:
    c = Correlator(stream.pulse_period_ps, t_int_ps, stream.settings, max_k, embedded)
    for i in range(0, max(len(stream), 1), chunk):
        c.feed_records(stream.records[i:i + chunk])
    c.finish()
    return c


def correlate_file(path, t_int_ps: int, settings: "SettingsLog | None" = None, **kw) -> Correlator:
    with open(path, "rb") as fh:
        period = read_header(fh)
    c = Correlator(period, t_int_ps, settings, **kw)
    for chunk in iter_tag_chunks(path):
        c.feed_records(chunk)
    c.finish()
    return c


def reduction_ratio(stored_records_per_s: float, pulse_rate: float, record_bytes: int = 10) -> float:
    """Stored pair bytes per second over a full-rate tag stream (one record per pulse)."""
    return stored_records_per_s * EVENT_PHOTON.size * 2 / (pulse_rate * record_bytes)


# ---------------------------------------------------------------------------
# event files
# ---------------------------------------------------------------------------

EVENT_MAGIC = b"QKCOR1"
EVENT_VERSION = 1
EVENT_HEADER = struct.Struct("<6sHQ")
EVENT_PHOTON = struct.Struct("<qBI")


def write_events(path, events: Sequence[np.ndarray], pulse_period_ps: int) -> None:
    """Length-prefixed records: u8 k, then k x (i64 pulse, u8 detector, u32 delay_ps)."""
    with open(path, "wb") as fh:
        fh.write(EVENT_HEADER.pack(EVENT_MAGIC, EVENT_VERSION, int(pulse_period_ps)))
        for ev in events:
            fh.write(struct.pack("<B", len(ev)))
            for r in ev:
                fh.write(EVENT_PHOTON.pack(int(r["pulse"]), int(r["detector"]), int(r["delay"])))


def read_events(path) -> tuple[int, list[np.ndarray]]:
    from .errors import FormatVersionError

    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < EVENT_HEADER.size:
        raise TruncatedFileError(f"{path}: event header truncated")
    magic, version, period = EVENT_HEADER.unpack_from(data)
    if magic != EVENT_MAGIC:
        raise SchemaError(f"{path}: not an event file")
    if version != EVENT_VERSION:
        raise FormatVersionError(f"event format version {version}, this build reads {EVENT_VERSION}")
    pos = EVENT_HEADER.size
    events = []
    while pos < len(data):
        k = data[pos]
        pos += 1
        end = pos + k * EVENT_PHOTON.size
        if end > len(data):
            raise TruncatedFileError(f"{path}: event record truncated")
        ev = np.zeros(k, dtype=TAGGED_DTYPE)
        for i in range(k):
            p, d, dl = EVENT_PHOTON.unpack_from(data, pos + i * EVENT_PHOTON.size)
            ev[i] = (p, d, dl, p * period + dl)
        events.append(ev)
        pos = end
    return period, events


def write_events_csv(path, events: Sequence[np.ndarray]) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["event", "k", "pulse", "detector", "channel", "port", "delay_ps"])
        for i, ev in enumerate(events):
            for r in ev:
                d = int(r["detector"])
                w.writerow([i, len(ev), int(r["pulse"]), d, d // 2, "transmit" if d % 2 == 0 else "reflect", int(r["delay"])])


# ---------------------------------------------------------------------------
# brute-force references
# ---------------------------------------------------------------------------


def brute_force_chains(pairs: Iterable[tuple[int, int]], n_photons: int, min_size: int = 3) -> list[tuple[int, ...]]:
    """Maximal connected photon sets by scanning every index span.

    A span is reported when its photons are connected through the given pairs
    and no pair links a member to a non-member. Exhaustive over spans, so it
    relies only on chains being index-contiguous; brute_force_subsets checks
    that assumption on small inputs.
    """
    pair_set = {(min(a, b), max(a, b)) for a, b in pairs}
    out = []
    for i in range(n_photons):
        for j in range(i + min_size - 1, n_photons):
            members = set(range(i, j + 1))
            if _is_maximal_component(members, pair_set):
                out.append(tuple(range(i, j + 1)))
    return out


def brute_force_subsets(pairs: Iterable[tuple[int, int]], n_photons: int, min_size: int = 3) -> list[tuple[int, ...]]:
    """Maximal connected photon sets by enumerating every subset (n <= ~16)."""
    pair_set = {(min(a, b), max(a, b)) for a, b in pairs}
    out = []
    for mask in range(1, 1 << n_photons):
        members = {i for i in range(n_photons) if mask >> i & 1}
        if len(members) >= min_size and _is_maximal_component(members, pair_set):
            out.append(tuple(sorted(members)))
    return sorted(out)


def _is_maximal_component(members: set, pair_set: set) -> bool:
    adjacency: dict[int, list[int]] = {}
    for a, b in pair_set:
        if (a in members) != (b in members):
            return False
        if a in members:
            adjacency.setdefault(a, []).append(b)
            adjacency.setdefault(b, []).append(a)
    start = min(members)
    seen = {start}
    frontier = [start]
    while frontier:
        for v in adjacency.get(frontier.pop(), ()):
            if v not in seen:
                seen.add(v)
                frontier.append(v)
    return seen == members
