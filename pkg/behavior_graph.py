"""
Probability calculus over the user sequential behavior graph.

impression -> click -> {D-Mi, O-Mi} -> {D-Ma, O-Ma} -> purchase

Six path-conditional probabilities (one per prediction head) compose into the
entire-space targets p_ctr, p_dmi, p_dma, p_ctcvr and the post-click p_cvr.
Every function accepts python floats or numpy arrays of matching shape, so
the same code composes a single impression or a whole minibatch.

Slot meaning per variant:
    HM3   y1 imp->click, y2 click->D-Mi, y3 D-Mi->D-Ma, y4 D-Ma->pay,
          y5 O-Mi->D-Ma, y6 O-Ma->pay
    HM3R  y1 imp->click, y2 click->D-Ma, y3 D-Ma->D-Mi, y4 D-Mi->pay,
          y5 O-Ma->D-Mi, y6 O-Mi->pay
    ESM2  y1 imp->click, y3 click->D-Ma, y4 D-Ma->pay, y6 O-Ma->pay
    ESMM  y1 imp->click, y4 click->pay
    BASE  y1 from the CTR network, y4 from the CVR network
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Optional, Tuple, Union

import numpy as np

from errors import DomainError

Probability = Union[float, np.ndarray]

SLOTS = ("y1", "y2", "y3", "y4", "y5", "y6")
TARGETS = ("p_ctr", "p_dmi", "p_dma", "p_ctcvr", "p_cvr")


class GraphVariant(str, Enum):
    HM3 = "hm3"
    HM3R = "hm3r"
    ESMM = "esmm"
    ESM2 = "esm2"
    BASE = "base"

    @property
    def head_slots(self) -> Tuple[str, ...]:
        return HEAD_SLOTS[self]

    @property
    def head_count(self) -> int:
        # BASE trains one head per independent network
        if self is GraphVariant.BASE:
            return 1
        return len(HEAD_SLOTS[self])

    @property
    def tasks(self) -> Tuple[str, ...]:
        return TASKS[self]

    @property
    def targets(self) -> Tuple[str, ...]:
        return PRESENT_TARGETS[self]


HEAD_SLOTS: Dict[GraphVariant, Tuple[str, ...]] = {
    GraphVariant.HM3: SLOTS,
    GraphVariant.HM3R: SLOTS,
    GraphVariant.ESM2: ("y1", "y3", "y4", "y6"),
    GraphVariant.ESMM: ("y1", "y4"),
    GraphVariant.BASE: ("y1", "y4"),
}

# Tasks supervised by each variant's loss.
TASKS: Dict[GraphVariant, Tuple[str, ...]] = {
    GraphVariant.HM3: ("ctr", "dmi", "dma", "ctcvr"),
    GraphVariant.HM3R: ("ctr", "dmi", "dma", "ctcvr"),
    GraphVariant.ESM2: ("ctr", "dma", "ctcvr"),
    GraphVariant.ESMM: ("ctr", "ctcvr"),
    GraphVariant.BASE: ("ctr", "cvr"),
}

PRESENT_TARGETS: Dict[GraphVariant, Tuple[str, ...]] = {
    GraphVariant.HM3: TARGETS,
    GraphVariant.HM3R: TARGETS,
    GraphVariant.ESM2: ("p_ctr", "p_dma", "p_ctcvr", "p_cvr"),
    GraphVariant.ESMM: ("p_ctr", "p_ctcvr", "p_cvr"),
    GraphVariant.BASE: ("p_ctr", "p_ctcvr", "p_cvr"),
}

# Post-click tree per variant: levels of (event, slot after a taken parent,
# slot after a skipped parent), then the purchase slots after a taken/skipped
# last level. The first level always follows the click.
_TREES: Dict[GraphVariant, Tuple[Tuple[Tuple[str, str, str], ...], Tuple[str, str]]] = {
    GraphVariant.HM3: ((("dmi", "y2", "y2"), ("dma", "y3", "y5")), ("y4", "y6")),
    GraphVariant.HM3R: ((("dma", "y2", "y2"), ("dmi", "y3", "y5")), ("y4", "y6")),
    GraphVariant.ESM2: ((("dma", "y3", "y3"),), ("y4", "y6")),
    GraphVariant.ESMM: ((), ("y4", "y4")),
    GraphVariant.BASE: ((), ("y4", "y4")),
}


@dataclass(frozen=True)
class HeadProbabilities:
    """Path-conditional probabilities y1..y6; unused slots stay None."""

    y1: Optional[Probability] = None
    y2: Optional[Probability] = None
    y3: Optional[Probability] = None
    y4: Optional[Probability] = None
    y5: Optional[Probability] = None
    y6: Optional[Probability] = None

    @classmethod
    def from_vector(cls, values) -> "HeadProbabilities":
        """Build from a length-6 sequence, or an (n, 6) array for a batch."""
        arr = np.asarray(values, dtype=np.float64)
        if arr.shape[-1] != 6:
            raise DomainError(f"expected 6 head values, got shape {arr.shape}")
        if arr.ndim == 1:
            return cls(*(float(v) for v in arr))
        return cls(*(arr[..., j] for j in range(6)))

    def get(self, slot: str) -> Optional[Probability]:
        return getattr(self, slot)

    def replace(self, **slots: Probability) -> "HeadProbabilities":
        values = {s: self.get(s) for s in SLOTS}
        values.update(slots)
        return HeadProbabilities(**values)


@dataclass(frozen=True)
class CompositeTargets:
    """Entire-space targets plus post-click p_cvr. None marks a target the
    variant does not model; it is never a stand-in for zero."""

    p_ctr: Probability
    p_cvr: Probability
    p_ctcvr: Probability
    p_dmi: Optional[Probability] = None
    p_dma: Optional[Probability] = None

    def get(self, name: str) -> Optional[Probability]:
        return getattr(self, name)

    def present(self) -> Tuple[str, ...]:
        return tuple(name for name in TARGETS if self.get(name) is not None)

    def as_dict(self) -> Dict[str, Optional[Probability]]:
        return {name: self.get(name) for name in TARGETS}


def _out(value) -> Probability:
    arr = np.asarray(value)
    if arr.ndim == 0:
        return float(arr)
    return arr


def _validate(h: HeadProbabilities, slots: Tuple[str, ...], variant: str) -> Dict[str, np.ndarray]:
    values: Dict[str, np.ndarray] = {}
    for slot in slots:
        raw = h.get(slot)
        if raw is None:
            raise DomainError(f"variant={variant} requires slot {slot}")
        arr = np.asarray(raw, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise DomainError(f"slot {slot} is not finite")
        if np.any(arr < 0.0) or np.any(arr > 1.0):
            raise DomainError(f"slot {slot} outside [0, 1]")
        values[slot] = arr
    return values


# ---------------------------------------------------------------------------
# Closed-form compositions
# ---------------------------------------------------------------------------

def compose_hm3(h: HeadProbabilities) -> CompositeTargets:
    y = _validate(h, HEAD_SLOTS[GraphVariant.HM3], "hm3")
    y1, y2, y3, y4, y5, y6 = (y[s] for s in SLOTS)
    # probability of reaching D-Ma given click
    pi = y2 * y3 + (1.0 - y2) * y5
    p_cvr = y4 * pi + y6 * (1.0 - pi)
    p_ctr = y1
    return CompositeTargets(
        p_ctr=_out(p_ctr),
        p_dmi=_out(y1 * y2),
        p_dma=_out(y1 * pi),
        p_cvr=_out(p_cvr),
        p_ctcvr=_out(p_ctr * p_cvr),
    )


def compose_hm3_reversed(h: HeadProbabilities) -> CompositeTargets:
    y = _validate(h, HEAD_SLOTS[GraphVariant.HM3R], "hm3r")
    y1, y2, y3, y4, y5, y6 = (y[s] for s in SLOTS)
    # probability of reaching D-Mi given click, macro level first
    pi = y2 * y3 + (1.0 - y2) * y5
    p_cvr = y4 * pi + y6 * (1.0 - pi)
    p_ctr = y1
    return CompositeTargets(
        p_ctr=_out(p_ctr),
        p_dma=_out(y1 * y2),
        p_dmi=_out(y1 * pi),
        p_cvr=_out(p_cvr),
        p_ctcvr=_out(p_ctr * p_cvr),
    )


def compose_esmm(h: HeadProbabilities) -> CompositeTargets:
    y = _validate(h, HEAD_SLOTS[GraphVariant.ESMM], "esmm")
    p_ctr, p_cvr = y["y1"], y["y4"]
    return CompositeTargets(p_ctr=_out(p_ctr), p_cvr=_out(p_cvr), p_ctcvr=_out(p_ctr * p_cvr))


def compose_esm2(h: HeadProbabilities) -> CompositeTargets:
    y = _validate(h, HEAD_SLOTS[GraphVariant.ESM2], "esm2")
    y1, pi, y4, y6 = y["y1"], y["y3"], y["y4"], y["y6"]
    p_cvr = y4 * pi + y6 * (1.0 - pi)
    return CompositeTargets(
        p_ctr=_out(y1),
        p_dma=_out(y1 * pi),
        p_cvr=_out(p_cvr),
        p_ctcvr=_out(y1 * p_cvr),
    )


def compose_base(h: HeadProbabilities) -> CompositeTargets:
    y = _validate(h, HEAD_SLOTS[GraphVariant.BASE], "base")
    p_ctr, p_cvr = y["y1"], y["y4"]
    return CompositeTargets(p_ctr=_out(p_ctr), p_cvr=_out(p_cvr), p_ctcvr=_out(p_ctr * p_cvr))


COMPOSERS = {
    GraphVariant.HM3: compose_hm3,
    GraphVariant.HM3R: compose_hm3_reversed,
    GraphVariant.ESMM: compose_esmm,
    GraphVariant.ESM2: compose_esm2,
    GraphVariant.BASE: compose_base,
}


def compose(h: HeadProbabilities, variant: GraphVariant) -> CompositeTargets:
    return COMPOSERS[GraphVariant(variant)](h)


# ---------------------------------------------------------------------------
# Path enumeration oracle
# ---------------------------------------------------------------------------

def enumerate_paths_oracle(h: HeadProbabilities, variant: GraphVariant) -> CompositeTargets:
    """
    Sum edge-probability products over every root-to-leaf path of the
    variant's behavior tree. Independent of the closed forms above.
    """
    variant = GraphVariant(variant)
    y = _validate(h, HEAD_SLOTS[variant], variant.value)
    levels, purchase_slots = _TREES[variant]

    entire = {"click": 0.0, "dmi": 0.0, "dma": 0.0, "purchase": 0.0}
    post_click_purchase = 0.0

    for clicked in (True, False):
        click_edge = y["y1"] if clicked else 1.0 - y["y1"]
        if not clicked:
            # leaf: no post-click event is reachable
            continue
        for outcomes in itertools.product((True, False), repeat=len(levels) + 1):
            sub = 1.0
            taken_events = []
            previous = True
            for (event, slot_yes, slot_no), taken in zip(levels, outcomes):
                edge = y[slot_yes] if previous else y[slot_no]
                sub = sub * (edge if taken else 1.0 - edge)
                if taken:
                    taken_events.append(event)
                previous = taken
            pay_slot = purchase_slots[0] if previous else purchase_slots[1]
            purchased = outcomes[-1]
            sub = sub * (y[pay_slot] if purchased else 1.0 - y[pay_slot])
            if purchased:
                taken_events.append("purchase")
                post_click_purchase = post_click_purchase + sub

            path = click_edge * sub
            entire["click"] = entire["click"] + path
            for event in taken_events:
                entire[event] = entire[event] + path

    present = PRESENT_TARGETS[variant]
    return CompositeTargets(
        p_ctr=_out(entire["click"]),
        p_cvr=_out(post_click_purchase),
        p_ctcvr=_out(entire["purchase"]),
        p_dmi=_out(entire["dmi"]) if "p_dmi" in present else None,
        p_dma=_out(entire["dma"]) if "p_dma" in present else None,
    )


# ---------------------------------------------------------------------------
# Analytic gradients
# ---------------------------------------------------------------------------

def _two_level_cvr_grads(y: Dict[str, np.ndarray]) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    y2, y3, y4, y5, y6 = y["y2"], y["y3"], y["y4"], y["y5"], y["y6"]
    pi = y2 * y3 + (1.0 - y2) * y5
    spread = y4 - y6
    d_cvr = {
        "y2": spread * (y3 - y5),
        "y3": spread * y2,
        "y4": pi,
        "y5": spread * (1.0 - y2),
        "y6": 1.0 - pi,
    }
    return pi, d_cvr


def composition_gradients(
    h: HeadProbabilities, variant: GraphVariant
) -> Dict[str, Dict[str, Probability]]:
    """
    Partial derivatives of each present target w.r.t. each head slot it
    depends on: result[target][slot]. Slots a target does not depend on are
    omitted (their derivative is zero).
    """
    variant = GraphVariant(variant)
    y = _validate(h, HEAD_SLOTS[variant], variant.value)
    y1 = y["y1"]
    ones = np.ones_like(y1)

    if variant in (GraphVariant.HM3, GraphVariant.HM3R):
        y2, y3, y5 = y["y2"], y["y3"], y["y5"]
        pi, d_cvr = _two_level_cvr_grads(y)
        p_cvr = y["y4"] * pi + y["y6"] * (1.0 - pi)
        first = {"y1": y2, "y2": y1}
        second = {"y1": pi, "y2": y1 * (y3 - y5), "y3": y1 * y2, "y5": y1 * (1.0 - y2)}
        if variant is GraphVariant.HM3:
            level_grads = {"p_dmi": first, "p_dma": second}
        else:
            level_grads = {"p_dma": first, "p_dmi": second}
        grads = {"p_ctr": {"y1": ones}, **level_grads, "p_cvr": d_cvr}
    elif variant is GraphVariant.ESM2:
        pi, y4, y6 = y["y3"], y["y4"], y["y6"]
        p_cvr = y4 * pi + y6 * (1.0 - pi)
        d_cvr = {"y3": y4 - y6, "y4": pi, "y6": 1.0 - pi}
        grads = {"p_ctr": {"y1": ones}, "p_dma": {"y1": pi, "y3": y1}, "p_cvr": d_cvr}
    else:
        p_cvr = y["y4"]
        d_cvr = {"y4": np.ones_like(p_cvr)}
        grads = {"p_ctr": {"y1": ones}, "p_cvr": d_cvr}

    grads["p_ctcvr"] = {"y1": p_cvr, **{slot: y1 * d for slot, d in d_cvr.items()}}
    return {
        target: {slot: _out(value) for slot, value in grads[target].items()}
        for target in TARGETS
        if target in grads
    }


def backprop_targets(
    h: HeadProbabilities,
    variant: GraphVariant,
    target_grads: Dict[str, np.ndarray],
) -> Dict[str, np.ndarray]:
    """Chain dL/dp_target through the composition into dL/dy_slot."""
    partials = composition_gradients(h, variant)
    head_grads: Dict[str, np.ndarray] = {}
    for target, upstream in target_grads.items():
        if target not in partials:
            raise DomainError(f"target {target} is absent for variant={GraphVariant(variant).value}")
        for slot, partial in partials[target].items():
            contribution = np.asarray(upstream) * partial
            head_grads[slot] = head_grads[slot] + contribution if slot in head_grads else contribution
    return head_grads
