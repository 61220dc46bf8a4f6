"""Dense state algebra for a labeled spin + photon qubit register.

Basis convention used throughout the package:

* spin ``|⇑>`` is computational 0 and ``|⇓>`` is 1;
* photon ``|Z>`` (right circular) is 0 and ``|-Z>`` is 1;
* ``|X> = (|Z> + |-Z>)/√2`` and ``|-X> = i(|Z> - |-Z>)/√2``;
* ``|±Y> = (|Z> ± i|-Z>)/√2``.

The flattened vector is big-endian in register order. Registers built by the
protocol keep photons in emission order followed by the spin.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import ImpossibleOutcome, SchemaError

SQRT2 = np.sqrt(2.0)
PROB_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# labels and registers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QubitLabel:
    """A spin (``kind='spin'``) or the ``index``-th emitted photon."""

    kind: str
    index: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("spin", "photon"):
            raise ValueError(f"unknown qubit kind {self.kind!r}")
        if self.index < 0:
            raise ValueError("qubit index must be nonnegative")
        if self.kind == "spin" and self.index != 0:
            raise ValueError("the spin label carries index 0")

    @property
    def is_spin(self) -> bool:
        return self.kind == "spin"

    def __str__(self) -> str:
        return "s" if self.is_spin else f"p{self.index}"

    @classmethod
    def parse(cls, text: str) -> "QubitLabel":
        text = text.strip()
        if text == "s":
            return SPIN
        if text.startswith("p") and text[1:].isdigit():
            return cls("photon", int(text[1:]))
        raise SchemaError(f"bad qubit label {text!r}")


SPIN = QubitLabel("spin")


def photon(index: int) -> QubitLabel:
    return QubitLabel("photon", index)


def _check_register(register: Sequence[QubitLabel]) -> tuple[QubitLabel, ...]:
    register = tuple(register)
    if len(set(register)) != len(register):
        raise ValueError(f"duplicate labels in register {[str(q) for q in register]}")
    if sum(q.is_spin for q in register) > 1:
        raise ValueError("at most one spin per register")
    return register


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=complex)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# bases and Pauli strings
# ---------------------------------------------------------------------------

_BASIS = {
    ("Z", 1): np.array([1, 0], dtype=complex),
    ("Z", -1): np.array([0, 1], dtype=complex),
    ("X", 1): np.array([1, 1], dtype=complex) / SQRT2,
    ("X", -1): 1j * np.array([1, -1], dtype=complex) / SQRT2,
    ("Y", 1): np.array([1, 1j], dtype=complex) / SQRT2,
    ("Y", -1): np.array([1, -1j], dtype=complex) / SQRT2,
}

AXES = ("Z", "X", "Y")


@dataclass(frozen=True)
class BasisVector:
    axis: str
    sign: int = 1

    def __post_init__(self) -> None:
        if self.axis not in AXES or self.sign not in (1, -1):
            raise ValueError(f"bad basis vector ({self.axis!r}, {self.sign!r})")

    @property
    def vector(self) -> np.ndarray:
        return _BASIS[(self.axis, self.sign)].copy()

    @property
    def complement(self) -> "BasisVector":
        return BasisVector(self.axis, -self.sign)

    def __str__(self) -> str:
        return ("+" if self.sign > 0 else "-") + self.axis

    @classmethod
    def parse(cls, text: str) -> "BasisVector":
        text = text.strip()
        sign = 1
        if text[:1] in "+-":
            sign = -1 if text[0] == "-" else 1
            text = text[1:]
        if text not in AXES:
            raise SchemaError(f"bad basis vector {text!r}")
        return cls(text, sign)


_PAULI = {
    "I": np.eye(2, dtype=complex),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
}


@dataclass(frozen=True)
class PauliString:
    """Tensor product of single-qubit Paulis with an overall ±1 sign.

    ``PauliString.parse("-ZXZ")`` gives ``-Z⊗X⊗Z``. The Z and X factors are the
    circular and rectilinear polarization observables of the basis convention.
    """

    ops: str
    sign: int = 1

    def __post_init__(self) -> None:
        if not self.ops or any(c not in _PAULI for c in self.ops):
            raise ValueError(f"bad Pauli string {self.ops!r}")
        if self.sign not in (1, -1):
            raise ValueError("Pauli sign must be ±1")

    def __len__(self) -> int:
        return len(self.ops)

    def __str__(self) -> str:
        return ("-" if self.sign < 0 else "") + self.ops

    @classmethod
    def parse(cls, text: "str | PauliString") -> "PauliString":
        if isinstance(text, PauliString):
            return text
        text = text.strip().upper()
        sign = 1
        if text[:1] in "+-":
            sign = -1 if text[0] == "-" else 1
            text = text[1:]
        return cls(text, sign)

    def matrix(self) -> np.ndarray:
        m = np.array([[complex(self.sign)]])
        for c in self.ops:
            m = np.kron(m, _PAULI[c])
        return m


# ---------------------------------------------------------------------------
# states
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PureState:
    register: tuple[QubitLabel, ...]
    amplitudes: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "register", _check_register(self.register))
        amps = _readonly(np.ravel(self.amplitudes))
        if amps.size != 2 ** len(self.register):
            raise ValueError(
                f"{amps.size} amplitudes for a {len(self.register)}-qubit register"
            )
        object.__setattr__(self, "amplitudes", amps)

    @property
    def n_qubits(self) -> int:
        return len(self.register)

    def axis(self, qubit: QubitLabel) -> int:
        try:
            return self.register.index(qubit)
        except ValueError:
            raise ValueError(f"{qubit} not in register") from None

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def normalized(self) -> "PureState":
        return PureState(self.register, self.amplitudes / self.norm())

    def to_dm(self) -> "DensityMatrix":
        return DensityMatrix(self.register, np.outer(self.amplitudes, self.amplitudes.conj()))


@dataclass(frozen=True)
class DensityMatrix:
    register: tuple[QubitLabel, ...]
    matrix: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "register", _check_register(self.register))
        m = _readonly(self.matrix)
        d = 2 ** len(self.register)
        if m.shape != (d, d):
            raise ValueError(f"matrix shape {m.shape} does not match {len(self.register)} qubits")
        object.__setattr__(self, "matrix", m)

    @property
    def n_qubits(self) -> int:
        return len(self.register)

    def axis(self, qubit: QubitLabel) -> int:
        try:
            return self.register.index(qubit)
        except ValueError:
            raise ValueError(f"{qubit} not in register") from None

    def trace(self) -> float:
        return float(np.trace(self.matrix).real)

    def normalized(self) -> "DensityMatrix":
        return DensityMatrix(self.register, self.matrix / self.trace())

    def is_physical(self, atol: float = 1e-10, eig_floor: float = -1e-8) -> bool:
        m = self.matrix
        if not np.allclose(m, m.conj().T, atol=atol):
            return False
        if abs(np.trace(m).real - 1) > atol:
            return False
        return bool(np.linalg.eigvalsh((m + m.conj().T) / 2).min() >= eig_floor)

    def relabel(self, register: Sequence[QubitLabel]) -> "DensityMatrix":
        return DensityMatrix(tuple(register), self.matrix)

    def to_json(self) -> dict:
        m = self.matrix
        return {
            "labels": [str(q) for q in self.register],
            "re": m.real.tolist(),
            "im": m.imag.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DensityMatrix":
        try:
            labels = [QubitLabel.parse(s) for s in obj["labels"]]
            m = np.asarray(obj["re"], dtype=float) + 1j * np.asarray(obj["im"], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad density-matrix JSON: {exc}") from exc
        try:
            return cls(tuple(labels), m)
        except ValueError as exc:
            raise SchemaError(str(exc)) from exc

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1)


State = Union[PureState, DensityMatrix]


def as_dm(state: State) -> DensityMatrix:
    return state.to_dm() if isinstance(state, PureState) else state


def maximally_mixed(register: Sequence[QubitLabel]) -> DensityMatrix:
    d = 2 ** len(register)
    return DensityMatrix(tuple(register), np.eye(d) / d)


def product_state(register: Sequence[QubitLabel], vectors: Iterable[np.ndarray]) -> PureState:
    amp = np.array([1.0 + 0j])
    for v in vectors:
        amp = np.kron(amp, v)
    return PureState(tuple(register), amp)


# ---------------------------------------------------------------------------
# tensor helpers
# ---------------------------------------------------------------------------


def _map_axis(t: np.ndarray, axis: int, op: np.ndarray, n_out: int) -> np.ndarray:
    """Contract ``op``'s last index with ``t[axis]``; its ``n_out`` output axes take that slot."""
    out = np.tensordot(op, t, axes=([op.ndim - 1], [axis]))
    return np.moveaxis(out, list(range(n_out)), list(range(axis, axis + n_out)))


def map_dm_qubit(dm_tensor: np.ndarray, n: int, axis: int, op: np.ndarray, n_out: int) -> np.ndarray:
    """Apply ``op ρ op†`` on one qubit of a ket+bra tensor with ``n`` ket axes."""
    t = _map_axis(dm_tensor, axis, op, n_out)
    # ket side now has n - 1 + n_out axes
    return _map_axis(t, n - 1 + n_out + axis, op.conj(), n_out)


def _dm_tensor(dm: DensityMatrix) -> np.ndarray:
    return dm.matrix.reshape((2,) * (2 * dm.n_qubits))


def _dm_from_tensor(register, t: np.ndarray) -> DensityMatrix:
    d = 2 ** len(register)
    return DensityMatrix(tuple(register), t.reshape(d, d))


# ---------------------------------------------------------------------------
# gates
# ---------------------------------------------------------------------------

SIGMA_X = _PAULI["X"]
PAULI = _PAULI


def precession_gate(theta: float) -> np.ndarray:
    """Spin rotation ``cos(θ/2)·1 + i·sin(θ/2)·σx`` in the {⇑, ⇓} basis.

    A quarter precession period (θ = π/2) is the rotated Hadamard; θ = π is the
    double precession of a skipped excitation.
    """
    if not np.isfinite(theta):
        raise ValueError("precession angle must be finite")
    return np.cos(theta / 2) * np.eye(2, dtype=complex) + 1j * np.sin(theta / 2) * SIGMA_X


# emission isometry: spin_in -> (photon, spin_out); ⇑ emits |-Z>, ⇓ emits |Z>
EMISSION = np.zeros((2, 2, 2), dtype=complex)
EMISSION[1, 0, 0] = 1.0
EMISSION[0, 1, 1] = 1.0


def apply_gate(state: State, qubit: QubitLabel, gate: np.ndarray) -> State:
    """Apply a single-qubit unitary to one labeled qubit."""
    if isinstance(state, PureState):
        n = state.n_qubits
        t = state.amplitudes.reshape((2,) * n)
        t = _map_axis(t, state.axis(qubit), gate, 1)
        return PureState(state.register, t.reshape(-1))
    t = map_dm_qubit(_dm_tensor(state), state.n_qubits, state.axis(qubit), gate, 1)
    return _dm_from_tensor(state.register, t)


def _emitted_register(register, spin: QubitLabel, new_photon_index: int):
    if spin not in register or not spin.is_spin:
        raise ValueError(f"spin label {spin} missing from register")
    new = photon(new_photon_index)
    if new in register:
        raise ValueError(f"photon index {new_photon_index} already used")
    s = register.index(spin)
    return s, register[:s] + (new, spin) + register[s + 1:]


def cnot_emit(state: State, spin: QubitLabel = SPIN, new_photon_index: int = 1) -> State:
    """Spin-controlled emission ``α|⇑> + β|⇓> -> α|⇑>|-Z> + β|⇓>|Z>``.

    The new photon is inserted directly before the spin in the register.
    """
    s, register = _emitted_register(state.register, spin, new_photon_index)
    return apply_emission(state, s, register, EMISSION)


def apply_emission(state: State, s: int, register, op: np.ndarray) -> State:
    """Apply a spin -> (photon, spin) map at axis ``s``; ``register`` is the result's."""
    if isinstance(state, PureState):
        t = state.amplitudes.reshape((2,) * state.n_qubits)
        return PureState(register, _map_axis(t, s, op, 2).reshape(-1))
    t = map_dm_qubit(_dm_tensor(state), state.n_qubits, s, op, 2)
    return _dm_from_tensor(register, t)


# ---------------------------------------------------------------------------
# measurement and reduction
# ---------------------------------------------------------------------------


def project(state: State, qubit: QubitLabel, onto: BasisVector) -> tuple[float, State]:
    """Project ``qubit`` onto ``onto`` and remove it from the register.

    Returns the outcome probability and the normalized post-measurement state.
    Raises ImpossibleOutcome below a probability of 1e-12.
    """
    bra = onto.vector.conj()
    axis = state.axis(qubit)
    register = tuple(q for q in state.register if q != qubit)
    if isinstance(state, PureState):
        t = state.amplitudes.reshape((2,) * state.n_qubits)
        out = np.tensordot(bra, t, axes=([0], [axis])).reshape(-1)
        p = float(np.vdot(out, out).real)
        if p < PROB_FLOOR:
            raise ImpossibleOutcome(f"projecting {qubit} onto {onto}: probability {p:.3g}")
        return p, PureState(register, out / np.sqrt(p))
    t = map_dm_qubit(_dm_tensor(state), state.n_qubits, axis, bra, 0)
    d = 2 ** len(register)
    m = t.reshape(d, d)
    p = float(np.trace(m).real)
    if p < PROB_FLOOR:
        raise ImpossibleOutcome(f"projecting {qubit} onto {onto}: probability {p:.3g}")
    return p, DensityMatrix(register, m / p)


def partial_trace(state: State, keep: Iterable[QubitLabel]) -> DensityMatrix:
    """Reduced density matrix on ``keep`` (kept in register order)."""
    dm = as_dm(state)
    keep = set(keep)
    if not keep:
        raise ValueError("partial trace needs at least one kept qubit")
    missing = keep - set(dm.register)
    if missing:
        raise ValueError(f"{sorted(map(str, missing))} not in register")
    n = dm.n_qubits
    if len(keep) == n:
        return dm
    letters = string.ascii_letters
    ket = list(letters[:n])
    bra = list(letters[n:2 * n])
    for i, q in enumerate(dm.register):
        if q not in keep:
            bra[i] = ket[i]
    kept = [q for q in dm.register if q in keep]
    out = "".join(ket[i] for i, q in enumerate(dm.register) if q in keep)
    out += "".join(bra[i] for i, q in enumerate(dm.register) if q in keep)
    t = np.einsum("".join(ket) + "".join(bra) + "->" + out, _dm_tensor(dm))
    return _dm_from_tensor(kept, t)


def trace_out(state: State, drop: Iterable[QubitLabel]) -> DensityMatrix:
    drop = set(drop)
    return partial_trace(state, [q for q in state.register if q not in drop])


def partial_transpose(dm: DensityMatrix, qubits: Iterable[QubitLabel]) -> np.ndarray:
    n = dm.n_qubits
    t = _dm_tensor(dm)
    for q in qubits:
        a = dm.axis(q)
        t = np.swapaxes(t, a, n + a)
    d = 2 ** n
    return t.reshape(d, d)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.conj().T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.conj().T


def fidelity(rho: State, sigma: State) -> float:
    """Uhlmann fidelity ``(Tr√(√ρ σ √ρ))²``; ``<ψ|ρ|ψ>`` when either side is pure."""
    a = rho.amplitudes if isinstance(rho, PureState) else rho.matrix
    b = sigma.amplitudes if isinstance(sigma, PureState) else sigma.matrix
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"dimension mismatch {a.shape[0]} vs {b.shape[0]}")
    if not isinstance(rho, PureState) and not isinstance(sigma, PureState):
        # a numerically rank-one matrix is handled as the pure state it is
        for m, other in ((a, b), (b, a)):
            w, v = np.linalg.eigh((m + m.conj().T) / 2)
            if w[:-1].max(initial=0.0) <= 1e-12 * max(w[-1], 0.0):
                psi = v[:, -1] * np.sqrt(max(w[-1], 0.0))
                return float(np.clip(np.vdot(psi, other @ psi).real, 0.0, 1.0))
    if isinstance(sigma, PureState):
        a, b = b, a
        rho, sigma = sigma, rho
    if isinstance(rho, PureState):
        if isinstance(sigma, PureState):
            f = abs(np.vdot(a, b)) ** 2
        else:
            f = np.vdot(a, b @ a).real
    else:
        # nuclear norm of √ρ√σ; stable for rank-deficient matrices
        f = np.linalg.svd(_psd_sqrt(a) @ _psd_sqrt(b), compute_uv=False).sum() ** 2
    return float(np.clip(f, 0.0, 1.0))


def trace_distance(rho: State, sigma: State) -> float:
    d = as_dm(rho).matrix - as_dm(sigma).matrix
    return float(0.5 * np.abs(np.linalg.eigvalsh((d + d.conj().T) / 2)).sum())


def negativity(state: State, partition: Iterable[QubitLabel]) -> float:
    """Sum of |negative eigenvalues| of the partial transpose over ``partition``."""
    dm = as_dm(state)
    part = set(partition)
    if not part or part >= set(dm.register):
        raise ValueError("negativity needs a nontrivial bipartition")
    if not part <= set(dm.register):
        raise ValueError("partition labels not in register")
    ev = np.linalg.eigvalsh(partial_transpose(dm, part))
    return float(max(0.0, -ev[ev < 0].sum()))


def dop_single(c_plus: float, c_minus: float) -> float:
    total = c_plus + c_minus
    if total <= 0:
        raise ValueError("degree of polarization needs nonzero counts")
    return (c_plus - c_minus) / total


def dop_pair(c_xx: float, c_xX: float, c_Xx: float, c_XX: float) -> float:
    """Two-photon rectilinear correlation; lower case x is ``|X>``, upper case X is ``|-X>``."""
    total = c_xx + c_xX + c_Xx + c_XX
    if total <= 0:
        raise ValueError("degree of polarization needs nonzero counts")
    return (c_xx - c_xX - c_Xx + c_XX) / total


def stabilizer_expectation(state: State, op: "PauliString | str") -> float:
    op = PauliString.parse(op)
    dm = as_dm(state)
    if len(op) != dm.n_qubits:
        raise ValueError(f"Pauli string of length {len(op)} on {dm.n_qubits} qubits")
    return float(np.trace(dm.matrix @ op.matrix()).real)


def expectation(state: State, observable: np.ndarray) -> float:
    return float(np.trace(as_dm(state).matrix @ observable).real)


def psd_project(m: np.ndarray) -> tuple[np.ndarray, float]:
    """Clip negative eigenvalues and renormalize. Returns the matrix and the clipped mass."""
    h = (m + m.conj().T) / 2
    w, v = np.linalg.eigh(h)
    clipped = float(-w[w < 0].sum())
    w = np.clip(w, 0, None)
    if w.sum() <= 0:
        raise ValueError("matrix has no positive spectrum")
    w = w / w.sum()
    return (v * w) @ v.conj().T, clipped
