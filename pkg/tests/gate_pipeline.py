"""Gate-level derivation of the ideal table states.

Built directly from the single-qubit gate, the spin-controlled emission,
projection and partial trace, without the noisy channel machinery of
``qknit.model``. Every pulse after the first starts with one quarter-period
precession of the spin; a skipped pulse emits nothing.
"""

from __future__ import annotations

import math

from qknit.states import SPIN, BasisVector, apply_gate, cnot_emit, maximally_mixed, partial_trace, photon, precession_gate, project

QUARTER = precession_gate(math.pi / 2)

# row -> (pulse directives, kept photon indices, keep spin)
# directives: "T" kept, "Z"/"-Z" projected, "S" skipped, "L" emitted and lost
DERIVATIONS = {
    1: ("T", (1,), False),
    2: ("TT", (1, 2), False),
    3: (("-Z", "T", "T"), (2, 3), True),
    4: (("-Z", "T", "T"), (2, 3), False),
    5: (("T", "T", "Z"), (1, 2), False),
    6: (("-Z", "T", "Z"), (2,), False),
    7: (("-Z", "T", "T", "T"), (2, 3, 4), True),
    8: (("-Z", "T", "T", "Z"), (2, 3), False),
    9: (("-Z", "S", "T"), (3,), True),
    10: (("-Z", "L", "T"), (3,), False),
    11: (("-Z", "T", "S", "T", "T"), (2, 4, 5), True),
    12: (("-Z", "T", "S", "T", "Z"), (2, 4), False),
    13: (("-Z", "T", "T", "T", "T"), (2, 3, 4, 5), True),
    14: (("-Z", "T", "L", "T", "Z"), (2, 4), False),
}


def derive(row: int):
    pulses, keep, keep_spin = DERIVATIONS[row]
    state = maximally_mixed([SPIN])
    for i, d in enumerate(pulses, start=1):
        if i > 1:
            state = apply_gate(state, SPIN, QUARTER)
        if d == "S":
            continue
        state = cnot_emit(state, SPIN, i)
        if d in ("Z", "-Z"):
            _, state = project(state, photon(i), BasisVector.parse(d))
    labels = [photon(i) for i in keep] + ([SPIN] if keep_spin else [])
    return partial_trace(state, labels)
