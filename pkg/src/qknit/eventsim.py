"""Monte Carlo detector click streams from the running spin-photon state.

Whether a pulse yields a click does not depend on the quantum state (the
excitation succeeds with probability D, the photon survives with the
detection efficiency), so the click pulses are drawn first as a Bernoulli
process. The spin is then propagated from click to click: the pulses in
between are applied as one averaged channel (fire-and-lose or skip, weighted
by their posterior given no click), and every clicking photon is measured in
its channel's basis by projective sampling, which updates the spin.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numba
import numpy as np

from .errors import ConfigError
from .model import ProtocolConfig, dephasing_superoperator, noisy_emission_channel, skip_channel
from .states import AXES, BasisVector, SPIN
from .tags import (
    FLAG_AFTERPULSE,
    FLAG_DARK,
    N_CHANNELS,
    N_DETECTORS,
    DetectionEvent,
    SettingsLog,
    TagStream,
    empty_records,
)

PS = 1e-12


@dataclass(frozen=True)
class DetectorBankConfig:
    efficiency: float = 0.01
    deadtime: float = 20e-9
    channel_probabilities: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    channel_basis: tuple[str, str, str] = ("Z", "X", "Y")
    timing_jitter_sigma: float = 0.0
    dark_count_rate: float = 0.0
    afterpulse_probability: float = 0.0
    afterpulse_delay: float = 50e-9
    # later basis changes as (start time in seconds, bases); the first segment uses channel_basis
    basis_changes: tuple = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "channel_probabilities", tuple(float(p) for p in self.channel_probabilities))
        object.__setattr__(self, "channel_basis", tuple(self.channel_basis))
        object.__setattr__(
            self, "basis_changes", tuple((float(t), tuple(b)) for t, b in self.basis_changes)
        )
        probs = np.array(self.channel_probabilities)
        if len(probs) != N_CHANNELS or np.any(probs < 0) or abs(probs.sum() - 1) > 1e-12:
            raise ConfigError("channel_probabilities must be 3 nonnegative numbers summing to 1")
        if not 0 <= self.efficiency <= 1:
            raise ConfigError("efficiency must lie in [0, 1]")
        for name in ("deadtime", "timing_jitter_sigma", "dark_count_rate", "afterpulse_delay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if not 0 <= self.afterpulse_probability <= 1:
            raise ConfigError("afterpulse_probability must lie in [0, 1]")
        self.settings_log()

    def settings_log(self) -> SettingsLog:
        segs = [(0, self.channel_basis)]
        segs += [(int(round(t / PS)), b) for t, b in self.basis_changes]
        return SettingsLog(tuple(segs))

    def to_json(self) -> dict:
        d = asdict(self)
        d["basis_changes"] = [[t, list(b)] for t, b in self.basis_changes]
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "DetectorBankConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown detector-bank fields {sorted(unknown)}")
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass(frozen=True)
class StreamConfig:
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    bank: DetectorBankConfig = field(default_factory=DetectorBankConfig)
    duration: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.duration > 0:
            raise ConfigError("duration must be > 0")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    @property
    def pulse_period_ps(self) -> int:
        return int(round(self.protocol.pulse_period / PS))

    @property
    def n_pulses(self) -> int:
        return int(self.duration / (self.pulse_period_ps * PS))

    def to_json(self) -> dict:
        return {
            "protocol": self.protocol.to_json(),
            "bank": self.bank.to_json(),
            "duration": self.duration,
            "seed": int(self.seed),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "StreamConfig":
        return cls(
            ProtocolConfig.from_json(obj.get("protocol", {})),
            DetectorBankConfig.from_json(obj.get("bank", {})),
            float(obj.get("duration", 0.1)),
            int(obj.get("seed", 0)),
        )


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

_BASIS_TABLE = np.array(
    [[BasisVector(a, s).vector for s in (1, -1)] for a in AXES], dtype=np.complex128
)


@numba.njit(cache=True)
def _rotation(theta):
    c = math.cos(theta / 2)
    s = math.sin(theta / 2)
    u = np.empty((2, 2), dtype=np.complex128)
    u[0, 0] = c
    u[1, 1] = c
    u[0, 1] = 1j * s
    u[1, 0] = 1j * s
    return u


@numba.njit(cache=True)
def _trajectory(pulses, delays, axes, uniforms, gap_powers, omega, ratio, period, coherence, basis):
    """Sample the polarization outcome (+1/-1) of every clicking photon."""
    n = len(pulses)
    signs = np.empty(n, dtype=np.int8)
    rho = np.zeros((2, 2), dtype=np.complex128)
    rho[0, 0] = 0.5
    rho[1, 1] = 0.5
    vec = np.empty(4, dtype=np.complex128)
    k4 = np.zeros((4, 2), dtype=np.complex128)
    prev = -1
    for j in range(n):
        gap = pulses[j] - prev - 1
        if gap > 0:
            for a in range(2):
                for b in range(2):
                    vec[2 * a + b] = rho[a, b]
            bit = 0
            while gap > 0:
                if gap & 1:
                    vec = gap_powers[bit] @ vec
                gap >>= 1
                bit += 1
            tr = (vec[0] + vec[3]).real
            for a in range(2):
                for b in range(2):
                    rho[a, b] = vec[2 * a + b] / tr
        t = delays[j]
        ue = _rotation(ratio * omega * t)
        uh = _rotation(omega * max(period - t, 0.0))
        # spin-controlled emission: ⇑ -> photon |-Z> (index 1), ⇓ -> |Z> (index 0)
        for so in range(2):
            for si in range(2):
                k4[2 + so, si] = uh[so, 0] * ue[0, si]
                k4[so, si] = uh[so, 1] * ue[1, si]
        r4 = k4 @ rho @ k4.conj().T
        vp = basis[axes[j], 0]
        plus = np.zeros((2, 2), dtype=np.complex128)
        total = np.zeros((2, 2), dtype=np.complex128)
        for p in range(2):
            for q in range(2):
                c = np.conj(vp[p]) * vp[q]
                for a in range(2):
                    for b in range(2):
                        plus[a, b] += c * r4[2 * p + a, 2 * q + b]
        for a in range(2):
            for b in range(2):
                total[a, b] = r4[a, b] + r4[2 + a, 2 + b]
        p_plus = (plus[0, 0] + plus[1, 1]).real
        if uniforms[j] < p_plus:
            signs[j] = 1
            rho = plus / p_plus
        else:
            signs[j] = -1
            rho = (total - plus) / (1.0 - p_plus)
        rho[0, 1] *= coherence
        rho[1, 0] *= coherence
        prev = pulses[j]
    return signs


@numba.njit(cache=True)
def _deadtime_mask(times, detectors, deadtime_ps, n_detectors):
    """Non-paralyzable deadtime on a time-sorted click list."""
    keep = np.zeros(len(times), dtype=np.bool_)
    last = np.full(n_detectors, -1, dtype=np.int64)
    seen = np.zeros(n_detectors, dtype=np.bool_)
    for i in range(len(times)):
        d = detectors[i]
        if not seen[d] or times[i] - last[d] >= deadtime_ps:
            keep[i] = True
            last[d] = times[i]
            seen[d] = True
    return keep


# ---------------------------------------------------------------------------
# stream simulation
# ---------------------------------------------------------------------------


def gap_superoperator(protocol: ProtocolConfig, efficiency: float) -> np.ndarray:
    """Spin superoperator of one pulse period that produced no click."""
    d = protocol.determinism
    miss = 1.0 - d * efficiency
    if miss <= 0:
        # every pulse clicks, so a click-free gap never occurs
        return np.eye(4, dtype=complex)
    fire = noisy_emission_channel(protocol, protocol.pulse_period).superoperator()
    skip = skip_channel(protocol).superoperator()
    mixed = (d * (1 - efficiency) * fire + (1 - d) * skip) / miss
    return dephasing_superoperator(protocol.pulse_period, protocol) @ mixed


def _powers(s: np.ndarray, n: int = 64) -> np.ndarray:
    out = np.empty((n, 4, 4), dtype=np.complex128)
    out[0] = s
    for i in range(1, n):
        out[i] = out[i - 1] @ out[i - 1]
    return out


def _click_pulses(rng: np.random.Generator, n_pulses: int, p: float) -> np.ndarray:
    if p <= 0 or n_pulses <= 0:
        return np.zeros(0, dtype=np.int64)
    if p >= 1:
        return np.arange(n_pulses, dtype=np.int64)
    chunks = []
    last = -1
    batch = int(n_pulses * p + 10 * math.sqrt(n_pulses * p) + 16)
    while last < n_pulses:
        gaps = rng.geometric(p, size=batch)
        k = last + np.cumsum(gaps)
        chunks.append(k)
        last = int(k[-1])
    k = np.concatenate(chunks)
    return k[k < n_pulses].astype(np.int64)


def emission_delays(rng: np.random.Generator, n: int, lifetime: float, period: float) -> np.ndarray:
    """Exponential(lifetime) emission delays truncated to one pulse period."""
    mass = -math.expm1(-period / lifetime)
    return -lifetime * np.log1p(-rng.random(n) * mass)


def simulate_stream(cfg: StreamConfig) -> TagStream:
    """Time-ordered click records for ``cfg.duration`` of pulsed excitation.

    The same seed gives a bit-identical stream.
    """
    proto, bank = cfg.protocol, cfg.bank
    period_ps = cfg.pulse_period_ps
    period = period_ps * PS
    n_pulses = cfg.n_pulses
    settings = bank.settings_log()
    rng = np.random.default_rng(int(cfg.seed))

    pulses = _click_pulses(rng, n_pulses, proto.determinism * bank.efficiency)
    m = len(pulses)
    delays = emission_delays(rng, m, proto.radiative_lifetime, period)
    channels = rng.choice(N_CHANNELS, size=m, p=np.array(bank.channel_probabilities)).astype(np.int64)
    uniforms = rng.random(m)
    true_times = pulses * period_ps + np.rint(delays / PS).astype(np.int64)
    axes = settings.axis_table()[settings.segment_of(true_times), channels] if m else np.zeros(0, np.int64)

    if m:
        gap = gap_superoperator(proto.replace(pulse_period=period), bank.efficiency)
        signs = _trajectory(
            pulses,
            delays,
            axes,
            uniforms,
            _powers(gap, max(1, n_pulses.bit_length())),
            proto.precession_per_period / period,
            proto.trion_precession_ratio,
            period,
            math.exp(-((period / proto.dephasing_time) ** 2)),
            _BASIS_TABLE,
        )
    else:
        signs = np.zeros(0, dtype=np.int8)

    times = true_times
    detectors = (2 * channels + (signs < 0)).astype(np.int64)
    flags = np.zeros(m, dtype=np.int64)

    span_ps = n_pulses * period_ps
    if bank.dark_count_rate > 0 and span_ps > 0:
        counts = rng.poisson(bank.dark_count_rate * span_ps * PS, size=N_DETECTORS)
        dt = rng.integers(0, span_ps, size=counts.sum())
        dd = np.repeat(np.arange(N_DETECTORS), counts)
        times = np.concatenate([times, dt])
        detectors = np.concatenate([detectors, dd])
        flags = np.concatenate([flags, np.full(len(dt), FLAG_DARK)])

    deadtime_ps = int(round(bank.deadtime / PS))
    times, detectors, flags = _apply_deadtime(times, detectors, flags, deadtime_ps)

    if bank.afterpulse_probability > 0 and len(times):
        hit = rng.random(len(times)) < bank.afterpulse_probability
        extra = times[hit] + int(round(bank.afterpulse_delay / PS))
        times = np.concatenate([times, extra])
        detectors = np.concatenate([detectors, detectors[hit]])
        flags = np.concatenate([flags, np.full(int(hit.sum()), FLAG_AFTERPULSE)])
        times, detectors, flags = _apply_deadtime(times, detectors, flags, deadtime_ps)

    if bank.timing_jitter_sigma > 0 and len(times):
        jitter = np.rint(rng.normal(0.0, bank.timing_jitter_sigma / PS, len(times))).astype(np.int64)
        times = np.maximum(times + jitter, 0)
        order = np.argsort(times, kind="stable")
        times, detectors, flags = times[order], detectors[order], flags[order]

    records = empty_records(len(times))
    records["time"] = times
    records["detector"] = detectors
    records["flags"] = flags
    return TagStream(records, period_ps, settings)


def _apply_deadtime(times, detectors, flags, deadtime_ps):
    order = np.argsort(times, kind="stable")
    times, detectors, flags = times[order], detectors[order], flags[order]
    keep = _deadtime_mask(times.astype(np.int64), detectors.astype(np.int64), deadtime_ps, N_DETECTORS)
    return times[keep], detectors[keep], flags[keep]


# ---------------------------------------------------------------------------
# single-photon routing
# ---------------------------------------------------------------------------


class BankState:
    """Last registered click per detector."""

    def __init__(self, n_detectors: int = N_DETECTORS) -> None:
        self.last_click = [None] * n_detectors


def route_and_click(
    polarization,
    time_ps: int,
    bank: DetectorBankConfig,
    state: BankState,
    rng: np.random.Generator,
) -> "DetectionEvent | None":
    """Route one photon through the splitters and polarization analysers.

    ``polarization`` is a 2-vector or 2x2 density matrix. Returns ``None`` when
    the selected detector is still dead from an earlier click.
    """
    rho = np.asarray(polarization, dtype=complex)
    if rho.ndim == 1:
        rho = np.outer(rho, rho.conj())
    channel = int(rng.choice(N_CHANNELS, p=np.array(bank.channel_probabilities)))
    settings = bank.settings_log()
    axis = settings.segments[int(settings.segment_of([time_ps])[0])][1][channel]
    v = BasisVector(axis, 1).vector
    p_plus = float(np.vdot(v, rho @ v).real)
    sign = 1 if rng.random() < p_plus else -1
    detector = 2 * channel + (0 if sign > 0 else 1)
    last = state.last_click[detector]
    if last is not None and time_ps - last < bank.deadtime / PS:
        return None
    state.last_click[detector] = time_ps
    if bank.timing_jitter_sigma > 0:
        time_ps = max(0, int(round(time_ps + rng.normal(0, bank.timing_jitter_sigma / PS))))
    return DetectionEvent(int(time_ps), detector)
