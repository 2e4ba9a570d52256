"""Pairwise win/loss/tie adjudication for prioritized composite outcomes.

The terminal event is compared first; the non-terminal event is consulted only
when the terminal comparison is not decisive. A comparison at a stage is
decisive only if the earlier of the two times is an observed event. Exactly
equal times are not decisive and fall through to the next stage.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .data import CompositeOutcome


class Verdict(enum.Enum):
    WIN_FIRST = "win_first"
    WIN_SECOND = "win_second"
    TIE = "tie"


class Stage(enum.Enum):
    TERMINAL = "terminal"
    NONTERMINAL = "nonterminal"
    UNDECIDED = "undecided"


@dataclass(frozen=True)
class WinVerdict:
    value: Verdict
    decided_at: Stage


TIE = WinVerdict(Verdict.TIE, Stage.UNDECIDED)


def compare(a: CompositeOutcome, b: CompositeOutcome) -> WinVerdict:
    if b.delta_terminal == 1 and b.u_terminal < a.u_terminal:
        return WinVerdict(Verdict.WIN_FIRST, Stage.TERMINAL)
    if a.delta_terminal == 1 and a.u_terminal < b.u_terminal:
        return WinVerdict(Verdict.WIN_SECOND, Stage.TERMINAL)
    if b.delta_nonterminal == 1 and b.u_nonterminal < a.u_nonterminal:
        return WinVerdict(Verdict.WIN_FIRST, Stage.NONTERMINAL)
    if a.delta_nonterminal == 1 and a.u_nonterminal < b.u_nonterminal:
        return WinVerdict(Verdict.WIN_SECOND, Stage.NONTERMINAL)
    return TIE


def phi1(a: CompositeOutcome, b: CompositeOutcome) -> int:
    """1 if the first outcome wins."""
    return int(compare(a, b).value is Verdict.WIN_FIRST)


def phi2(a: CompositeOutcome, b: CompositeOutcome) -> int:
    """1 if the second outcome wins."""
    return int(compare(a, b).value is Verdict.WIN_SECOND)
