"""Parameterized physical model of the knitting protocol.

Each excitation pulse either fires (π-pulse, trion decay, photon emission) or
is skipped. A fired pulse is modelled as a mixture over the photon emission
time ``t``: the trion (electron) spin precesses for ``t`` at
``trion_precession_ratio`` times the hole rate, the photon is emitted through
the spin-controlled emission, and the hole precesses for the remainder of the
pulse period. A skipped pulse is one full period of hole precession. After
every period the spin coherence decays by ``exp(-(T/T2)^2)``.

With the ideal configuration the pipeline reproduces the exact table states.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from typing import NamedTuple, Sequence

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.optimize import least_squares, minimize_scalar

from .errors import ConfigError, ImpossibleOutcome
from .states import (
    EMISSION,
    SIGMA_X,
    SPIN,
    BasisVector,
    DensityMatrix,
    PureState,
    QubitLabel,
    apply_emission,
    apply_gate,
    cnot_emit,
    expectation,
    fidelity,
    maximally_mixed,
    negativity,
    photon,
    precession_gate,
    project,
    trace_out,
)
from .table import table_state

PULSE_RATE = 456e6

# Dephasing time and trion/hole precession ratio fitted once with calibrate();
# see test_model.py::test_calibration_reproduces_frozen_constants.
CALIBRATED_T2 = 5.857085e-09
CALIBRATED_RATIO = 2.872476


@dataclass(frozen=True)
class ProtocolConfig:
    """Physical parameters of the source; all times in seconds.

    ``traced_window`` is the emission-time window averaged over for photons
    that are traced out (undetected). ``None`` means the integration window,
    the same as for detected photons. Set it to ``pulse_period`` to model a
    missing photon whose emission time is unconstrained.
    """

    pulse_period: float = 1 / PULSE_RATE
    precession_per_period: float = math.pi / 2
    radiative_lifetime: float = 0.4e-9
    integration_window: float = 0.4e-9
    dephasing_time: float = math.inf
    trion_precession_ratio: float = 1.0
    determinism: float = 1.0
    quadrature_nodes: int = 24
    traced_window: "float | None" = None

    def __post_init__(self) -> None:
        times = {
            "pulse_period": self.pulse_period,
            "radiative_lifetime": self.radiative_lifetime,
            "integration_window": self.integration_window,
            "dephasing_time": self.dephasing_time,
        }
        if self.traced_window is not None:
            times["traced_window"] = self.traced_window
        for name, value in times.items():
            if not value > 0:
                raise ConfigError(f"{name} must be > 0, got {value}")
        if self.integration_window > self.pulse_period:
            raise ConfigError("integration_window cannot exceed the pulse period")
        if self.traced_window is not None and self.traced_window > self.pulse_period:
            raise ConfigError("traced_window cannot exceed the pulse period")
        if not 0 < self.precession_per_period < 2 * math.pi:
            raise ConfigError("precession_per_period must lie in (0, 2π)")
        if not 0 <= self.determinism <= 1:
            raise ConfigError("determinism must lie in [0, 1]")
        if self.trion_precession_ratio < 0:
            raise ConfigError("trion_precession_ratio must be nonnegative")
        if int(self.quadrature_nodes) != self.quadrature_nodes or self.quadrature_nodes < 8:
            raise ConfigError("quadrature_nodes must be an integer >= 8")

    @classmethod
    def ideal(cls, **overrides) -> "ProtocolConfig":
        base = dict(radiative_lifetime=1e-15, dephasing_time=math.inf)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def calibrated(cls, **overrides) -> "ProtocolConfig":
        base = dict(dephasing_time=CALIBRATED_T2, trion_precession_ratio=CALIBRATED_RATIO)
        base.update(overrides)
        return cls(**base)

    @property
    def hole_rate(self) -> float:
        return self.precession_per_period / self.pulse_period

    def replace(self, **changes) -> "ProtocolConfig":
        return replace(self, **changes)

    def to_json(self) -> dict:
        d = asdict(self)
        if math.isinf(d["dephasing_time"]):
            d["dephasing_time"] = None
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "ProtocolConfig":
        obj = dict(obj)
        if obj.get("dephasing_time", 0) is None:
            obj["dephasing_time"] = math.inf
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown protocol fields {sorted(unknown)}")
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# measurement specs
# ---------------------------------------------------------------------------

ACTIONS = ("project", "trace", "tomograph")


@dataclass(frozen=True)
class PulseDirective:
    action: str
    onto: "BasisVector | None" = None
    fire: bool = True

    def __post_init__(self) -> None:
        if self.action not in ACTIONS:
            raise ConfigError(f"unknown pulse action {self.action!r}")
        if (self.action == "project") != (self.onto is not None):
            raise ConfigError("'project' needs a basis vector, other actions take none")
        if not self.fire and self.action != "trace":
            raise ConfigError("a skipped pulse emits nothing and must use 'trace'")

    def to_json(self) -> dict:
        if not self.fire:
            return {"action": "skip"}
        d = {"action": self.action}
        if self.onto is not None:
            d["onto"] = str(self.onto)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "PulseDirective":
        action = obj.get("action")
        if action == "skip":
            return cls("trace", fire=False)
        onto = obj.get("onto")
        return cls(action, BasisVector.parse(onto) if onto else None, bool(obj.get("fire", True)))


def P(onto: str) -> PulseDirective:
    return PulseDirective("project", BasisVector.parse(onto))


TOMO = PulseDirective("tomograph")
TRACE = PulseDirective("trace")
SKIP = PulseDirective("trace", fire=False)


@dataclass(frozen=True)
class MeasurementSpec:
    pulses: tuple[PulseDirective, ...]
    first_photon: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "pulses", tuple(self.pulses))
        if not any(p.action == "tomograph" for p in self.pulses):
            raise ConfigError("a measurement spec needs at least one tomographed photon")

    @property
    def n_pulses(self) -> int:
        return len(self.pulses)

    @property
    def tomographed(self) -> tuple[QubitLabel, ...]:
        return tuple(
            photon(self.first_photon + i) for i, p in enumerate(self.pulses) if p.action == "tomograph"
        )

    def to_json(self) -> dict:
        return {"first_photon": self.first_photon, "pulses": [p.to_json() for p in self.pulses]}

    @classmethod
    def from_json(cls, obj: dict) -> "MeasurementSpec":
        try:
            pulses = [PulseDirective.from_json(p) for p in obj["pulses"]]
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad measurement spec: {exc}") from exc
        return cls(tuple(pulses), int(obj.get("first_photon", 1)))


@dataclass(frozen=True)
class NamedSpec:
    spec: MeasurementSpec
    reference_row: int
    description: str

    def reference(self) -> DensityMatrix:
        ref = table_state(self.reference_row)
        keep = self.spec.tomographed
        return trace_out(ref, [q for q in ref.register if q not in keep])


# Conditioning patterns of the measured/modelled matrix panels.
SPECS: dict[str, NamedSpec] = {
    "fig2a": NamedSpec(MeasurementSpec((TOMO, TOMO)), 2, "two photons, no projection"),
    "fig2c": NamedSpec(MeasurementSpec((P("-Z"), TOMO, TOMO)), 4, "earlier photon projected on -Z"),
    "fig2e": NamedSpec(MeasurementSpec((TOMO, TOMO, P("+Z"))), 5, "later photon projected on +Z"),
    "fig3a": NamedSpec(MeasurementSpec((P("-Z"), TOMO, P("+Z"))), 6, "single photon between -Z and +Z"),
    "fig3c": NamedSpec(
        MeasurementSpec((P("-Z"), TOMO, TOMO, P("+Z"))), 8, "photon pair between -Z and +Z"
    ),
    "fig4a": NamedSpec(MeasurementSpec((P("-Z"), SKIP, TOMO)), 9, "three pulses, middle not excited"),
    "fig4b": NamedSpec(
        MeasurementSpec((P("-Z"), TOMO, SKIP, TOMO, P("+Z"))), 12, "five pulses, middle not excited"
    ),
    "fig4c": NamedSpec(MeasurementSpec((P("-Z"), TRACE, TOMO)), 10, "three pulses, middle undetected"),
    "fig4d": NamedSpec(
        MeasurementSpec((P("-Z"), TOMO, TRACE, TOMO, P("+Z"))), 14, "five pulses, middle undetected"
    ),
}


def resolve_spec(name_or_obj) -> MeasurementSpec:
    if isinstance(name_or_obj, MeasurementSpec):
        return name_or_obj
    if isinstance(name_or_obj, NamedSpec):
        return name_or_obj.spec
    if isinstance(name_or_obj, dict):
        return MeasurementSpec.from_json(name_or_obj)
    if name_or_obj in SPECS:
        return SPECS[name_or_obj].spec
    raise ConfigError(f"unknown measurement spec {name_or_obj!r}")


# ---------------------------------------------------------------------------
# channels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuantumChannel:
    """Weighted Kraus branches acting on the spin.

    An op of shape (2, 2) maps the spin to itself; an op of shape (2, 2, 2)
    maps the spin to (new photon, spin).
    """

    branches: tuple[tuple[float, np.ndarray], ...] = field(repr=False)

    def __post_init__(self) -> None:
        w = np.array([b[0] for b in self.branches])
        if len(w) == 0 or np.any(w <= 0):
            raise ValueError("channel weights must be positive")
        if abs(w.sum() - 1) > 1e-10:
            raise ValueError(f"channel weights sum to {w.sum()}")

    @property
    def emits(self) -> bool:
        return self.branches[0][1].ndim == 3

    def apply(
        self, dm: DensityMatrix, spin: QubitLabel = SPIN, new_photon_index: "int | None" = None
    ) -> DensityMatrix:
        if self.emits:
            if new_photon_index is None:
                raise ValueError("an emitting channel needs the new photon index")
            new = photon(new_photon_index)
            if new in dm.register:
                raise ValueError(f"photon index {new_photon_index} already used")
            s = dm.axis(spin)
            register = dm.register[:s] + (new, spin) + dm.register[s + 1:]
            out = sum(w * apply_emission(dm, s, register, op).matrix for w, op in self.branches)
            return DensityMatrix(register, out)
        out = sum(w * apply_gate(dm, spin, op).matrix for w, op in self.branches)
        return DensityMatrix(dm.register, out)

    def superoperator(self) -> np.ndarray:
        """Row-major superoperator on the spin alone, tracing any emitted photon.

        ``vec(ρ') = S @ vec(ρ)`` with ``vec`` the C-order flattening of a 2x2 matrix.
        """
        s = np.zeros((4, 4), dtype=complex)
        for w, op in self.branches:
            ks = [op[p] for p in range(2)] if self.emits else [op]
            for k in ks:
                s += w * np.kron(k, k.conj())
        return s


def emission_times(config: ProtocolConfig, window: float) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature nodes and weights for the emission time on ``[0, window]``.

    Gauss-Legendre nodes are placed in the cumulative probability of the
    truncated exponential, so the weights stay uniform in probability for any
    lifetime, including the near-delta ideal limit.
    """
    x, w = leggauss(int(config.quadrature_nodes))
    u = (x + 1) / 2
    mass = -math.expm1(-window / config.radiative_lifetime)
    t = -config.radiative_lifetime * np.log1p(-u * mass)
    return np.clip(t, 0.0, window), w / 2


def emission_op(config: ProtocolConfig, t: float) -> np.ndarray:
    """Kraus map (photon, spin_out, spin_in) for emission at delay ``t`` after the pulse."""
    omega = config.hole_rate
    ue = precession_gate(config.trion_precession_ratio * omega * t)
    uh = precession_gate(omega * max(config.pulse_period - t, 0.0))
    return np.einsum("ab,pbc,cd->pad", uh, EMISSION, ue)


def noisy_emission_channel(config: ProtocolConfig, window: "float | None" = None) -> QuantumChannel:
    """One fired pulse period as a mixture over emission times in ``[0, window]``.

    ``window`` defaults to the integration window. In the short-lifetime limit
    this is the ideal emission followed by one quarter-period precession.
    """
    window = config.integration_window if window is None else window
    ts, ws = emission_times(config, window)
    return QuantumChannel(tuple((float(w), emission_op(config, float(t))) for t, w in zip(ts, ws)))


def skip_channel(config: ProtocolConfig) -> QuantumChannel:
    return QuantumChannel(((1.0, precession_gate(config.precession_per_period)),))


def dephasing_factor(dt: float, config: ProtocolConfig) -> float:
    if math.isinf(config.dephasing_time):
        return 1.0
    return math.exp(-((dt / config.dephasing_time) ** 2))


def dephase_spin(dm: DensityMatrix, dt: float, config: ProtocolConfig, spin: QubitLabel = SPIN) -> DensityMatrix:
    """Multiply the spin coherences (⇑/⇓ off-diagonals) by ``exp(-(dt/T2)^2)``."""
    f = dephasing_factor(dt, config)
    if f == 1.0:
        return dm
    n = dm.n_qubits
    s = dm.axis(spin)
    shape = [1] * (2 * n)
    shape[s] = shape[n + s] = 2
    mask = np.array([[1.0, f], [f, 1.0]]).reshape(shape)
    t = dm.matrix.reshape((2,) * (2 * n)) * mask
    return DensityMatrix(dm.register, t.reshape(dm.matrix.shape))


def dephasing_superoperator(dt: float, config: ProtocolConfig) -> np.ndarray:
    f = dephasing_factor(dt, config)
    return np.diag([1.0, f, f, 1.0]).astype(complex)


# ---------------------------------------------------------------------------
# conditional density matrices
# ---------------------------------------------------------------------------


def knitted_chain(n_photons: int, spin: "np.ndarray | None" = None) -> PureState:
    """Ideal photon chain: ``n_photons`` rounds of quarter precession then emission.

    The spin starts in ``spin`` (default ``|⇑>``) and stays last in the register.
    """
    if n_photons < 1:
        raise ValueError("need at least one photon")
    amps = np.array([1, 0], dtype=complex) if spin is None else np.asarray(spin, dtype=complex)
    state = PureState((SPIN,), amps)
    quarter = precession_gate(math.pi / 2)
    for i in range(1, n_photons + 1):
        state = cnot_emit(apply_gate(state, SPIN, quarter), SPIN, i)
    return state


@lru_cache(maxsize=64)
def _channels(config: ProtocolConfig):
    detected = noisy_emission_channel(config)
    traced_window = config.traced_window
    if traced_window is None or traced_window == config.integration_window:
        traced = detected
    else:
        traced = noisy_emission_channel(config, traced_window)
    return detected, traced, skip_channel(config)


def simulate_conditional_dm(config: ProtocolConfig, spec) -> DensityMatrix:
    """Normalized density matrix of the tomographed photons of ``spec``.

    The spin starts unpolarized. Every pulse period applies the fire or skip
    map, handles the photon per its directive, then dephases the spin. The
    spin is traced out at the end.
    """
    spec = resolve_spec(spec)
    detected, traced, skip = _channels(config)
    dm = maximally_mixed([SPIN])
    for i, pulse in enumerate(spec.pulses):
        index = spec.first_photon + i
        if not pulse.fire:
            dm = skip.apply(dm)
        else:
            channel = traced if pulse.action == "trace" else detected
            dm = channel.apply(dm, SPIN, index)
            if pulse.action == "project":
                try:
                    _, dm = project(dm, photon(index), pulse.onto)
                except ImpossibleOutcome as exc:
                    raise ImpossibleOutcome(f"conditioning chain aborted at pulse {i + 1}: {exc}") from None
            elif pulse.action == "trace":
                dm = trace_out(dm, [photon(index)])
        dm = dephase_spin(dm, config.pulse_period, config)
    return trace_out(dm, [SPIN]).normalized()


def conditional_dop(config: ProtocolConfig) -> float:
    """Rectilinear polarization of the photon between -Z and +Z detections."""
    return expectation(simulate_conditional_dm(config, "fig3a"), SIGMA_X)


def pair_dop(config: ProtocolConfig, middle_fired: bool = True) -> float:
    """Two-photon rectilinear correlation of the five-pulse pattern."""
    dm = simulate_conditional_dm(config, "fig4d" if middle_fired else "fig4b")
    return expectation(dm, np.kron(SIGMA_X, SIGMA_X))


def pair_negativity(config: ProtocolConfig, spec="fig3c") -> float:
    dm = simulate_conditional_dm(config, spec)
    return negativity(dm, [dm.register[0]])


def option_matrices(config: ProtocolConfig, experiment: str = "three") -> tuple[DensityMatrix, DensityMatrix]:
    """(not excited, excited-but-undetected) model matrices for a missing middle photon."""
    if experiment == "three":
        names = ("fig4a", "fig4c")
    elif experiment == "five":
        names = ("fig4b", "fig4d")
    else:
        raise ConfigError(f"experiment must be 'three' or 'five', got {experiment!r}")
    return tuple(simulate_conditional_dm(config, n) for n in names)


# ---------------------------------------------------------------------------
# determinism
# ---------------------------------------------------------------------------


def determinism_mix(rho_i: DensityMatrix, rho_ii: DensityMatrix, d: float) -> DensityMatrix:
    """``(1 - D)·ρ_i + D·ρ_ii``."""
    if rho_i.register != rho_ii.register:
        raise ValueError("determinism_mix needs matrices on the same register")
    if not 0 <= d <= 1:
        raise ValueError("D must lie in [0, 1]")
    return DensityMatrix(rho_i.register, (1 - d) * rho_i.matrix + d * rho_ii.matrix)


class DeterminismFit(NamedTuple):
    d_hat: float
    fidelity: float
    identifiable: bool = True

    @property
    def interval_halfwidth(self) -> float:
        return 0.0 if self.identifiable else math.inf


def fit_determinism(
    rho_meas: DensityMatrix, rho_i: DensityMatrix, rho_ii: DensityMatrix, resolution: float = 1e-4
) -> DeterminismFit:
    """D in [0, 1] maximizing ``fidelity(rho_meas, determinism_mix(rho_i, rho_ii, D))``."""
    if not (rho_meas.matrix.shape == rho_i.matrix.shape == rho_ii.matrix.shape):
        raise ValueError("fit_determinism needs matrices of equal dimension")
    a = rho_i.matrix
    b = rho_ii.matrix

    def f(d: float) -> float:
        return fidelity(rho_meas, DensityMatrix(rho_meas.register, (1 - d) * a + d * b))

    if np.abs(a - b).max() < 1e-9:
        return DeterminismFit(0.5, f(0.5), identifiable=False)
    grid = np.linspace(0, 1, 101)
    vals = np.array([f(d) for d in grid])
    k = int(np.argmax(vals))
    best_d, best_f = float(grid[k]), float(vals[k])
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
    res = minimize_scalar(lambda d: -f(d), bounds=(lo, hi), method="bounded", options={"xatol": resolution / 10})
    if res.success and -res.fun > best_f:
        best_d, best_f = float(res.x), float(-res.fun)
    return DeterminismFit(best_d, best_f)


def predicted_event_rate(k: int, pulse_rate: float = PULSE_RATE, efficiency: float = 0.01) -> float:
    """Order-of-magnitude rate of k photons detected in k adjacent pulse windows."""
    if k < 1:
        raise ValueError("multiplicity must be >= 1")
    if not 0 < efficiency <= 1:
        raise ValueError("efficiency must lie in (0, 1]")
    return pulse_rate * efficiency ** k


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------


class Calibration(NamedTuple):
    config: ProtocolConfig
    dop: float
    negativity: float
    cost: float


def calibrate(
    base: "ProtocolConfig | None" = None,
    dop_target: float = 0.79,
    negativity_target: float = 0.32,
    start: Sequence[float] = (5e-9, 2.0),
) -> Calibration:
    """Fit (dephasing time, trion precession ratio) to the modelled DOP and pair negativity.

    The radiative lifetime and windows stay at the values in ``base``. The fit
    runs in log10(T2) so the two parameters are on comparable scales.
    """
    base = base or ProtocolConfig()

    def make(p) -> ProtocolConfig:
        return base.replace(dephasing_time=float(10 ** p[0]), trion_precession_ratio=float(p[1]))

    def residual(p):
        cfg = make(p)
        return [conditional_dop(cfg) - dop_target, pair_negativity(cfg) - negativity_target]

    x0 = [math.log10(start[0]), start[1]]
    res = least_squares(residual, x0, bounds=([-10, 0], [-5, 10]), xtol=1e-12, ftol=1e-12)
    cfg = make(res.x)
    return Calibration(cfg, conditional_dop(cfg), pair_negativity(cfg), float(res.cost))


def load_protocol_config(path) -> ProtocolConfig:
    with open(path) as fh:
        obj = json.load(fh)
    return ProtocolConfig.from_json(obj.get("protocol", obj))
