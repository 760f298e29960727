"""Shared test utilities: hand-encoding formulas into classifier params."""

from __future__ import annotations

import numpy as np

from stlmimic.inference import InferenceParams, NetworkShape, SignalNorm


def encode_dnf(
    disjuncts,
    shape: NetworkShape,
    norm: SignalNorm,
    big: float = 30.0,
) -> InferenceParams:
    """Hand-set parameters realizing an OR of ANDs of temporal atoms.

    `disjuncts` is a list of conjunctions; each conjunction is a list of
    atoms (kind, t1, t2, coeffs, bound) with kind 'F' or 'G' and the
    predicate coeffs . x >= bound given in raw signal units. Gates are
    saturated at +-big; shared predicates reuse one slot.
    """
    hr = np.asarray(norm.halfrange)
    mid = np.asarray(norm.mid)
    pred_slots: dict = {}
    pred_w = np.zeros((shape.n_pred, shape.dim))
    pred_b = np.zeros(shape.n_pred)
    win_lo = np.zeros(shape.n_atoms)
    win_hi = np.full(shape.n_atoms, float(shape.horizon))
    gate = np.full((shape.n_conj, shape.n_atoms), -big)
    out_gate = np.full(shape.n_conj, -big)
    # park unused predicate slots on a harmless one-hot
    pred_w[:, 0] = 1.0

    if len(disjuncts) > shape.n_conj:
        raise ValueError("more conjunctions than slots")
    for c, conj in enumerate(disjuncts):
        out_gate[c] = big
        for kind, t1, t2, coeffs, bound in conj:
            key = (tuple(np.round(coeffs, 12)), round(float(bound), 12))
            if key not in pred_slots:
                k = len(pred_slots)
                if k >= shape.n_pred:
                    raise ValueError("more predicates than slots")
                pred_slots[key] = k
                c_raw = np.asarray(coeffs, dtype=float)
                pred_w[k] = c_raw * hr
                pred_b[k] = float(bound) - float(c_raw @ mid)
            k = pred_slots[key]
            j = 2 * k if kind == "F" else 2 * k + 1
            win_lo[j] = float(t1)
            win_hi[j] = float(t2)
            gate[c, j] = big
    return InferenceParams(pred_w, pred_b, win_lo, win_hi, gate, out_gate)


EQ12_DNF = [
    [
        ("F", 2, 14, (-1.0, 0.0, 0.0, 0.0), -1.5),  # dA < 1.5
        ("F", 12, 20, (0.0, 0.0, -1.0, 0.0), -0.69),  # dC < 0.69
    ],
    [
        ("F", 4, 12, (0.0, -1.0, 0.0, 0.0), -0.86),  # dB < 0.86
        ("F", 12, 20, (0.0, 0.0, -1.0, 0.0), -0.69),
    ],
]
