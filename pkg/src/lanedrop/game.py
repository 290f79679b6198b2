"""Two-player go/no-go bottleneck game: payoffs, equilibria, social optimum.

The closed variant rewards both players for the outcome regardless of who
went; in the open variant the player that entered stops collecting reward,
which creates a weak incentive never to go.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product
from typing import List, Set, Tuple

Profile = Tuple[int, int]  # (row action, column action), 0 = Go, 1 = NoGo

ACTIONS = ("Go", "NoGo")


@dataclass(frozen=True)
class BimatrixGame:
    """2x2 game; payoffs[r][c] = (row payoff, column payoff)."""

    payoffs: Tuple[Tuple[Tuple[float, float], ...], ...]
    labels: Tuple[str, str] = ACTIONS

    def row(self, r: int, c: int) -> float:
        return self.payoffs[r][c][0]

    def col(self, r: int, c: int) -> float:
        return self.payoffs[r][c][1]

    def scaled(self, k: float) -> "BimatrixGame":
        return BimatrixGame(tuple(tuple((a * k, b * k) for a, b in row)
                                  for row in self.payoffs), self.labels)


def build_go_nogo_game(open_network: bool) -> BimatrixGame:
    """The one-step bottleneck game, closed or open variant."""
    if open_network:
        cells = (((1.0, 1.0), (0.0, 2.0)),
                 ((2.0, 0.0), (0.0, 0.0)))
    else:
        cells = (((1.0, 1.0), (2.0, 2.0)),
                 ((2.0, 2.0), (0.0, 0.0)))
    return BimatrixGame(cells)


def pure_nash(g: BimatrixGame, weak: bool = True) -> Set[Profile]:
    """All pure-strategy equilibria among the four profiles.

    Weak: no unilateral deviation strictly improves the deviator.  Strict
    additionally requires every deviation to be strictly worse.
    """
    out: Set[Profile] = set()
    for r, c in product((0, 1), repeat=2):
        row_dev = g.row(1 - r, c) - g.row(r, c)
        col_dev = g.col(r, 1 - c) - g.col(r, c)
        if weak:
            if row_dev <= 0 and col_dev <= 0:
                out.add((r, c))
        else:
            if row_dev < 0 and col_dev < 0:
                out.add((r, c))
    return out


def social_optimum(g: BimatrixGame) -> Set[Profile]:
    """Profiles maximizing the payoff sum (all maximizers)."""
    sums = {(r, c): g.row(r, c) + g.col(r, c) for r, c in product((0, 1), repeat=2)}
    best = max(sums.values())
    return {p for p, s in sums.items() if s == best}


def profile_names(profiles: Set[Profile], labels=ACTIONS) -> List[str]:
    return sorted(f"({labels[r]}, {labels[c]})" for r, c in profiles)


def analysis_table() -> str:
    """Human-readable summary of both game variants for the CLI."""
    lines = []
    for open_network, title in ((False, "closed network"), (True, "open network")):
        g = build_go_nogo_game(open_network)
        lines.append(f"{title} payoffs (row, col):")
        for r in (0, 1):
            cells = "   ".join(f"{g.labels[c]}: ({g.row(r, c):g}, {g.col(r, c):g})"
                               for c in (0, 1))
            lines.append(f"  {g.labels[r]:>4} | {cells}")
        lines.append(f"  weak Nash equilibria : {', '.join(profile_names(pure_nash(g, weak=True)))}")
        lines.append(f"  strict Nash equilibria: {', '.join(profile_names(pure_nash(g, weak=False))) or 'none'}")
        lines.append(f"  social optima        : {', '.join(profile_names(social_optimum(g)))}")
        lines.append("")
    return "\n".join(lines)
