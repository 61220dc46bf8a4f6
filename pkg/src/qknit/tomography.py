"""Polarization tomography of conditioned photons from a counts table.

Each tomographed photon was measured in one of the three channel bases, so a
k-photon event contributes to one basis setting of the targets. Pauli
expectations are averaged over every setting compatible with the Pauli string
(identity positions are free), and the density matrix is the linear inversion
``rho = 2^-n sum_P <P> P``. Errors come from linear Poisson propagation and a
parametric bootstrap over the count cells.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .correlator import CountsTable
from .errors import ConfigError, InsufficientDataError
from .model import (
    ProtocolConfig,
    SPECS,
    fit_determinism,
    option_matrices,
    simulate_conditional_dm,
)
from .states import (
    AXES,
    PAULI,
    BasisVector,
    DensityMatrix,
    PauliString,
    QubitLabel,
    fidelity,
    negativity,
    photon,
    psd_project,
    stabilizer_expectation,
)

ESTIMATORS = ("linear", "linear_psd")


@dataclass(frozen=True)
class TomographyRequest:
    """Which events to use and which of their photons to reconstruct.

    ``gaps`` is the pulse-gap pattern of the event; ``conditioning`` maps event
    positions to the required outcome; ``targets`` are the reconstructed
    positions. Target labels follow the pulse offsets from ``first_photon``.
    """

    gaps: tuple[int, ...]
    targets: tuple[int, ...]
    conditioning: tuple[tuple[int, BasisVector], ...] = ()
    estimator: str = "linear"
    first_photon: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "gaps", tuple(int(g) for g in self.gaps))
        object.__setattr__(self, "targets", tuple(int(t) for t in self.targets))
        cond = tuple((int(p), v if isinstance(v, BasisVector) else BasisVector.parse(v)) for p, v in self.conditioning)
        object.__setattr__(self, "conditioning", cond)
        k = len(self.gaps) + 1
        if not 1 <= len(self.targets) <= 2:
            raise ConfigError("tomography reconstructs 1 or 2 photons")
        positions = list(self.targets) + [p for p, _ in cond]
        if len(set(positions)) != len(positions):
            raise ConfigError("targets and conditioning positions must be disjoint")
        if any(not 0 <= p < k for p in positions):
            raise ConfigError(f"positions must lie in 0..{k - 1}")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"estimator must be one of {ESTIMATORS}")

    @property
    def multiplicity(self) -> int:
        return len(self.gaps) + 1

    @property
    def offsets(self) -> tuple[int, ...]:
        return (0,) + tuple(itertools.accumulate(self.gaps))

    @property
    def labels(self) -> tuple[QubitLabel, ...]:
        return tuple(photon(self.first_photon + self.offsets[t]) for t in self.targets)

    def with_estimator(self, estimator: str) -> "TomographyRequest":
        return TomographyRequest(self.gaps, self.targets, self.conditioning, estimator, self.first_photon)

    def to_json(self) -> dict:
        return {
            "gaps": list(self.gaps),
            "targets": list(self.targets),
            "conditioning": [[p, str(v)] for p, v in self.conditioning],
            "estimator": self.estimator,
            "first_photon": self.first_photon,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TomographyRequest":
        try:
            return cls(
                tuple(obj["gaps"]),
                tuple(obj["targets"]),
                tuple((p, v) for p, v in obj.get("conditioning", [])),
                obj.get("estimator", "linear"),
                int(obj.get("first_photon", 1)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad tomography request: {exc}") from exc


def _req(gaps, targets, **cond) -> TomographyRequest:
    conditioning = tuple((int(p[1:]), v) for p, v in cond.items())
    return TomographyRequest(gaps, targets, conditioning)


# Requests mirroring the model specs of the same name.
REQUESTS: dict[str, TomographyRequest] = {
    "fig2a": _req((1,), (0, 1)),
    "fig2c": _req((1, 1), (1, 2), p0="-Z"),
    "fig2e": _req((1, 1), (0, 1), p2="+Z"),
    "fig3a": _req((1, 1), (1,), p0="-Z", p2="+Z"),
    "fig3c": _req((1, 1, 1), (1, 2), p0="-Z", p3="+Z"),
    "three_pulse": _req((2,), (1,), p0="-Z"),
    "five_pulse": _req((1, 2, 1), (1, 2), p0="-Z", p3="+Z"),
}

# Model spec and option experiment paired with each request.
REQUEST_SPECS = {
    "fig2a": "fig2a",
    "fig2c": "fig2c",
    "fig2e": "fig2e",
    "fig3a": "fig3a",
    "fig3c": "fig3c",
    "three_pulse": "fig4c",
    "five_pulse": "fig4d",
}


def resolve_request(name_or_obj) -> TomographyRequest:
    if isinstance(name_or_obj, TomographyRequest):
        return name_or_obj
    if isinstance(name_or_obj, dict):
        return TomographyRequest.from_json(name_or_obj)
    if name_or_obj in REQUESTS:
        return REQUESTS[name_or_obj]
    raise ConfigError(f"unknown tomography request {name_or_obj!r}")


# ---------------------------------------------------------------------------
# setting counts
# ---------------------------------------------------------------------------

# setting (target bases) -> counts over outcomes, outcome index bit i set when target i is "-"
SettingCounts = dict[tuple[str, ...], np.ndarray]


def setting_counts(counts: CountsTable, request: TomographyRequest) -> SettingCounts:
    """Counts per target basis setting for events matching the request's conditioning."""
    n = len(request.targets)
    out: SettingCounts = {}
    for (gaps, bases, outs), c in counts.cells.items():
        if gaps != request.gaps or c == 0:
            continue
        if any(outs[p] != str(v) for p, v in request.conditioning):
            continue
        setting = tuple(bases[t] for t in request.targets)
        idx = sum(1 << (n - 1 - i) for i, t in enumerate(request.targets) if outs[t][0] == "-")
        arr = out.setdefault(setting, np.zeros(2 ** n))
        arr[idx] += c
    return out


def _outcome_signs(n: int) -> np.ndarray:
    """(2^n, n) array of ±1, row = outcome index, big-endian."""
    return np.array([[-1 if (o >> (n - 1 - i)) & 1 else 1 for i in range(n)] for o in range(2 ** n)])


def pauli_expectations(sc: SettingCounts, n: int) -> tuple[dict[str, float], dict[str, float]]:
    """Estimated <P> and its Poisson standard error for every non-identity Pauli string."""
    signs = _outcome_signs(n)
    means, errs = {}, {}
    for ops in itertools.product("IXYZ", repeat=n):
        name = "".join(ops)
        if set(name) == {"I"}:
            continue
        num = 0.0
        tot = 0.0
        for setting, arr in sc.items():
            if all(o == "I" or o == b for o, b in zip(ops, setting)):
                parity = np.prod(np.where(np.array([o != "I" for o in ops]), signs, 1), axis=1)
                num += float(parity @ arr)
                tot += float(arr.sum())
        if tot <= 0:
            raise InsufficientDataError(f"no counts for Pauli {name}")
        e = num / tot
        means[name] = e
        errs[name] = math.sqrt(max(1 - e * e, 0.0) / tot)
    return means, errs


def invert(means: Mapping[str, float], n: int) -> np.ndarray:
    rho = np.eye(2 ** n, dtype=complex)
    for name, e in means.items():
        rho = rho + e * PauliString.parse(name).matrix()
    return rho / 2 ** n


def _invert_errors(errs: Mapping[str, float], n: int) -> np.ndarray:
    var = np.zeros((2 ** n, 2 ** n))
    for name, s in errs.items():
        var += (s * np.abs(PauliString.parse(name).matrix())) ** 2
    return np.sqrt(var) / 2 ** n


@dataclass
class ReconstructionResult:
    dm: DensityMatrix
    counts_used: int
    stderr: np.ndarray
    setting_counts: SettingCounts = field(repr=False, default_factory=dict)
    request: "TomographyRequest | None" = None
    clipped_mass: float = 0.0

    def to_json(self) -> dict:
        return {
            "dm": self.dm.to_json(),
            "counts_used": int(self.counts_used),
            "stderr": self.stderr.tolist(),
            "clipped_mass": self.clipped_mass,
            "request": self.request.to_json() if self.request else None,
            "settings": {",".join(k): v.astype(int).tolist() for k, v in sorted(self.setting_counts.items())},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ReconstructionResult":
        from .errors import SchemaError

        try:
            req = TomographyRequest.from_json(obj["request"]) if obj.get("request") else None
            sc = {tuple(k.split(",")): np.array(v, dtype=float) for k, v in obj.get("settings", {}).items()}
            return cls(
                DensityMatrix.from_json(obj["dm"]),
                int(obj["counts_used"]),
                np.array(obj["stderr"], dtype=float),
                sc,
                req,
                float(obj.get("clipped_mass", 0.0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad reconstruction JSON: {exc}") from exc


def reconstruct_from_settings(
    sc: SettingCounts, labels: Sequence[QubitLabel], estimator: str = "linear"
) -> ReconstructionResult:
    n = len(labels)
    missing = [s for s in itertools.product(AXES, repeat=n) if sc.get(s, np.zeros(1)).sum() <= 0]
    if missing:
        raise InsufficientDataError(f"no counts for basis settings {missing}")
    means, errs = pauli_expectations(sc, n)
    rho = invert(means, n)
    clipped = 0.0
    if estimator == "linear_psd":
        rho, clipped = psd_project(rho)
    total = int(round(sum(float(a.sum()) for a in sc.values())))
    return ReconstructionResult(DensityMatrix(tuple(labels), rho), total, _invert_errors(errs, n), sc, None, clipped)


def reconstruct_dm(counts: CountsTable, request) -> ReconstructionResult:
    """Density matrix of the request's targets from conditioned event counts."""
    request = resolve_request(request)
    sc = setting_counts(counts, request)
    if not sc:
        raise InsufficientDataError(f"no conditioned counts for pattern gaps={request.gaps}")
    res = reconstruct_from_settings(sc, request.labels, request.estimator)
    res.request = request
    return res


def exact_setting_probabilities(dm: DensityMatrix) -> SettingCounts:
    """Outcome probabilities of every basis setting for a 1- or 2-qubit state."""
    n = dm.n_qubits
    out = {}
    for setting in itertools.product(AXES, repeat=n):
        probs = np.zeros(2 ** n)
        for o in range(2 ** n):
            v = np.array([1.0 + 0j])
            for i, axis in enumerate(setting):
                v = np.kron(v, BasisVector(axis, -1 if (o >> (n - 1 - i)) & 1 else 1).vector)
            probs[o] = float(np.vdot(v, dm.matrix @ v).real)
        out[setting] = probs
    return out


def sample_setting_counts(dm: DensityMatrix, n_total: int, rng: np.random.Generator) -> SettingCounts:
    """Multinomial counts of ``n_total`` events spread uniformly over the settings."""
    probs = exact_setting_probabilities(dm)
    settings = list(probs)
    per = rng.multinomial(n_total, np.full(len(settings), 1 / len(settings)))
    return {s: rng.multinomial(m, np.clip(probs[s], 0, None) / np.clip(probs[s], 0, None).sum()).astype(float)
            for s, m in zip(settings, per)}


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

SIGMA = {"X": PAULI["X"], "Y": PAULI["Y"], "Z": PAULI["Z"]}


def _metrics(dm: DensityMatrix, reference: "DensityMatrix | None", stabilizers: Sequence[str]) -> dict[str, float]:
    n = dm.n_qubits
    out: dict[str, float] = {}
    physical, _ = psd_project(dm.matrix)
    pdm = DensityMatrix(dm.register, physical)
    if reference is not None:
        out["fidelity"] = float(fidelity(pdm, reference))
    if n == 1:
        out["dop_single"] = float(np.real(np.trace(dm.matrix @ SIGMA["X"])))
    elif n == 2:
        out["negativity"] = float(negativity(dm, [dm.register[0]]))
        out["dop_pair"] = float(np.real(np.trace(dm.matrix @ np.kron(SIGMA["X"], SIGMA["X"]))))
    for s in stabilizers:
        out[f"<{s}>"] = float(stabilizer_expectation(dm, s))
    return out


def analyze(
    result: ReconstructionResult,
    reference: "DensityMatrix | None" = None,
    stabilizers: Sequence[str] = (),
    n_boot: int = 200,
    seed: int = 0,
) -> dict[str, dict[str, float]]:
    """Fidelity, negativity, DOPs and stabilizers, each with a bootstrap error.

    Returns ``{metric: {"value": v, "error": e}}``. Errors come from Poisson
    resampling of the setting counts; they are 0 when no counts are attached.
    """
    if reference is not None and reference.matrix.shape != result.dm.matrix.shape:
        raise ValueError("reference and reconstruction have different dimensions")
    if reference is not None and reference.register != result.dm.register:
        reference = reference.relabel(result.dm.register)
    values = _metrics(result.dm, reference, stabilizers)
    boot = {k: [] for k in values}
    if result.setting_counts and n_boot > 0:
        rng = np.random.default_rng(seed)
        estimator = result.request.estimator if result.request else "linear"
        for _ in range(n_boot):
            sc = {k: rng.poisson(np.clip(v, 0, None)).astype(float) for k, v in result.setting_counts.items()}
            try:
                r = reconstruct_from_settings(sc, result.dm.register, estimator)
            except InsufficientDataError:
                continue
            for k, v in _metrics(r.dm, reference, stabilizers).items():
                boot[k].append(v)
    return {
        k: {"value": v, "error": float(np.std(boot[k], ddof=1)) if len(boot[k]) > 1 else 0.0}
        for k, v in values.items()
    }


# ---------------------------------------------------------------------------
# determinism from data
# ---------------------------------------------------------------------------


@dataclass
class DeterminismResult:
    d_hat: float
    fidelity: float
    error: float
    counts_used: int
    wide_interval: bool = False

    def to_json(self) -> dict:
        return dict(self.__dict__)


def run_determinism_analysis(
    counts: CountsTable,
    config: ProtocolConfig,
    experiment: str = "three",
    min_counts: int = 100,
    n_boot: int = 200,
    seed: int = 0,
) -> DeterminismResult:
    """Fit D to the missing-middle-photon pattern of ``experiment`` ('three' or 'five').

    Option matrices come from the model with the middle pulse skipped or
    fired-and-undetected. Fewer than ``min_counts`` conditioned events, or
    indistinguishable options, give an infinite error and ``wide_interval``.
    """
    name = {"three": "three_pulse", "five": "five_pulse"}.get(experiment)
    if name is None:
        raise ConfigError(f"experiment must be 'three' or 'five', got {experiment!r}")
    request = REQUESTS[name].with_estimator("linear_psd")
    rho_i, rho_ii = option_matrices(config, experiment)
    res = reconstruct_dm(counts, request)
    meas = res.dm.relabel(rho_i.register)
    fit = fit_determinism(meas, rho_i, rho_ii)
    if res.counts_used < min_counts or not fit.identifiable:
        return DeterminismResult(fit.d_hat, fit.fidelity, math.inf, res.counts_used, True)
    rng = np.random.default_rng(seed)
    ds = []
    for _ in range(n_boot):
        sc = {k: rng.poisson(np.clip(v, 0, None)).astype(float) for k, v in res.setting_counts.items()}
        try:
            r = reconstruct_from_settings(sc, rho_i.register, "linear_psd")
        except InsufficientDataError:
            continue
        ds.append(fit_determinism(r.dm, rho_i, rho_ii).d_hat)
    err = float(np.std(ds, ddof=1)) if len(ds) > 1 else math.inf
    return DeterminismResult(fit.d_hat, fit.fidelity, err, res.counts_used, not math.isfinite(err))


def model_reference(name: str, config: ProtocolConfig) -> DensityMatrix:
    """Modelled matrix for a named request, on the request's labels."""
    return simulate_conditional_dm(config, REQUEST_SPECS[name]).relabel(REQUESTS[name].labels)


def ideal_reference(name: str) -> DensityMatrix:
    return SPECS[REQUEST_SPECS[name]].reference().relabel(REQUESTS[name].labels)
