"""Exact ideal states of the knitting protocol, used as test oracles.

Rows are numbered as in the published table of ideal states. Photon labels
follow the detection order (``p2`` is the second detected photon), and the
spin is always last.

Row 11 is the gate-derived state. The printed version carries
``-(|X2,-X4> + |-X2,X4>)`` on the ``|⇑>`` branch; the gate product gives
``-(|X2,X4> + |-X2,-X4>)``. The ``|⇓>`` branch, and hence row 12, agree.
``ROW_11_AS_PRINTED`` keeps the printed form for reference.
"""

from __future__ import annotations

import numpy as np

from .states import (
    SPIN,
    BasisVector,
    DensityMatrix,
    PureState,
    maximally_mixed,
    photon,
)

_S2 = np.sqrt(2.0)
UP = np.array([1, 0], dtype=complex)
DOWN = np.array([0, 1], dtype=complex)


def _v(name: str) -> np.ndarray:
    return BasisVector.parse(name).vector


def _k(*names: str) -> np.ndarray:
    out = np.array([1.0 + 0j])
    for n in names:
        out = np.kron(out, UP if n == "up" else DOWN if n == "down" else _v(n))
    return out


def _mixture(register, *kets: np.ndarray) -> DensityMatrix:
    m = sum(np.outer(k, k.conj()) for k in kets) / len(kets)
    return DensityMatrix(tuple(register), m)


def _row(n: int):
    p1, p2, p3, p4, p5 = (photon(i) for i in range(1, 6))
    if n == 1:
        return _mixture([p1], _k("Z"), _k("-Z"))
    if n == 2:
        return maximally_mixed([p1, p2])
    if n == 3:
        return PureState((p2, p3, SPIN), (_k("-X", "-Z", "up") + _k("X", "Z", "down")) / _S2)
    if n == 4:
        return _mixture([p2, p3], _k("-X", "-Z"), _k("X", "Z"))
    if n == 5:
        return _mixture([p1, p2], _k("Z", "-X"), _k("-Z", "X"))
    if n == 6:
        return PureState((p2,), _k("X"))
    if n == 7:
        a = 1j * _k("-X", "-Z") - _k("X", "Z")
        b = -_k("-X", "-Z") + 1j * _k("X", "Z")
        return PureState((p2, p3, p4, SPIN), 0.5 * (np.kron(a, _k("-Z", "up")) + np.kron(b, _k("Z", "down"))))
    if n == 8:
        return PureState((p2, p3), (-_k("-X", "-Z") + 1j * _k("X", "Z")) / _S2)
    if n == 9:
        return PureState((p3, SPIN), _k("Z", "down"))
    if n == 10:
        return maximally_mixed([p3])
    if n == 11:
        a = -(_k("X", "X") + _k("-X", "-X"))
        b = _k("X", "-X") - _k("-X", "X")
        return PureState((p2, p4, p5, SPIN), 0.5 * (np.kron(a, _k("-Z", "up")) + np.kron(b, _k("Z", "down"))))
    if n == 12:
        return PureState((p2, p4), (_k("X", "-X") - _k("-X", "X")) / _S2)
    if n == 13:
        a = -(_k("X", "Z", "X") + _k("-X", "-Z", "-X"))
        b = _k("X", "Z", "-X") - _k("-X", "-Z", "X")
        return PureState(
            (p2, p3, p4, p5, SPIN), 0.5 * (np.kron(a, _k("-Z", "up")) + np.kron(b, _k("Z", "down")))
        )
    if n == 14:
        return _mixture([p2, p4], _k("X", "-X"), _k("-X", "X"))
    raise ValueError(f"table row must be in 1..14, got {n}")


def table_state(row: int) -> "PureState | DensityMatrix":
    """Exact state of the given table row (rows 1..14)."""
    if not isinstance(row, (int, np.integer)) or isinstance(row, bool):
        raise ValueError(f"table row must be an integer, got {row!r}")
    return _row(int(row))


PURE_ROWS = (3, 6, 7, 8, 9, 11, 12, 13)
MIXED_ROWS = (1, 2, 4, 5, 10, 14)

ROW_11_AS_PRINTED = PureState(
    (photon(2), photon(4), photon(5), SPIN),
    0.5
    * (
        np.kron(-(_k("X", "-X") + _k("-X", "X")), _k("-Z", "up"))
        + np.kron(_k("X", "-X") - _k("-X", "X"), _k("Z", "down"))
    ),
)
