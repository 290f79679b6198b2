from itertools import product

from lanedrop.game import (
    analysis_table,
    build_go_nogo_game,
    pure_nash,
    social_optimum,
)

GO, NOGO = 0, 1


def brute_force_nash(g, weak):
    """Independent oracle: check all four profiles by direct enumeration."""
    out = set()
    for r, c in product((0, 1), repeat=2):
        ok = True
        for r2 in (0, 1):
            if r2 != r:
                d = g.row(r2, c) - g.row(r, c)
                if d > 0 or (not weak and d >= 0):
                    ok = False
        for c2 in (0, 1):
            if c2 != c:
                d = g.col(r, c2) - g.col(r, c)
                if d > 0 or (not weak and d >= 0):
                    ok = False
        if ok:
            out.add((r, c))
    return out


def brute_force_social(g):
    sums = {(r, c): g.row(r, c) + g.col(r, c) for r, c in product((0, 1), repeat=2)}
    best = max(sums.values())
    return {p for p, s in sums.items() if s == best}


class TestPayoffs:
    def test_closed_matrix(self):
        g = build_go_nogo_game(open_network=False)
        assert g.payoffs[GO][GO] == (1, 1)
        assert g.payoffs[GO][NOGO] == (2, 2)
        assert g.payoffs[NOGO][GO] == (2, 2)
        assert g.payoffs[NOGO][NOGO] == (0, 0)

    def test_open_matrix(self):
        g = build_go_nogo_game(open_network=True)
        assert g.payoffs[GO][GO] == (1, 1)
        assert g.payoffs[GO][NOGO] == (0, 2)
        assert g.payoffs[NOGO][GO] == (2, 0)
        assert g.payoffs[NOGO][NOGO] == (0, 0)


class TestNash:
    def test_closed_equilibria(self):
        g = build_go_nogo_game(open_network=False)
        nash = pure_nash(g, weak=True)
        assert nash == {(GO, NOGO), (NOGO, GO)}
        assert (NOGO, NOGO) not in nash
        assert nash == brute_force_nash(g, weak=True)

    def test_open_weak_includes_nogo_nogo(self):
        g = build_go_nogo_game(open_network=True)
        nash = pure_nash(g, weak=True)
        assert (NOGO, NOGO) in nash
        assert nash == brute_force_nash(g, weak=True)

    def test_open_strict_excludes_nogo_nogo(self):
        g = build_go_nogo_game(open_network=True)
        assert (NOGO, NOGO) not in pure_nash(g, weak=False)

    def test_constant_game_all_weak(self):
        from lanedrop.game import BimatrixGame
        g = BimatrixGame((((1.0, 1.0), (1.0, 1.0)), ((1.0, 1.0), (1.0, 1.0))))
        assert pure_nash(g, weak=True) == set(product((0, 1), repeat=2))
        assert pure_nash(g, weak=False) == set()


class TestSocialOptimum:
    def test_closed_matches_nash(self):
        g = build_go_nogo_game(open_network=False)
        so = social_optimum(g)
        assert so == {(GO, NOGO), (NOGO, GO)}
        assert so == pure_nash(g, weak=True)
        assert so == brute_force_social(g)

    def test_open_excludes_nogo_nogo(self):
        # Exhaustive check: three profiles tie at sum 2; the all-stop
        # profile is strictly worse and stays out.
        g = build_go_nogo_game(open_network=True)
        so = social_optimum(g)
        assert so == brute_force_social(g)
        assert so == {(GO, GO), (GO, NOGO), (NOGO, GO)}
        assert (NOGO, NOGO) not in so

    def test_divergence_claim(self):
        # the open game's weak Nash set strictly contains a profile the
        # social optimum set excludes
        g = build_go_nogo_game(open_network=True)
        assert (NOGO, NOGO) in pure_nash(g, weak=True) - social_optimum(g)

    def test_zero_game_all_profiles(self):
        from lanedrop.game import BimatrixGame
        g = BimatrixGame((((0.0, 0.0), (0.0, 0.0)), ((0.0, 0.0), (0.0, 0.0))))
        assert social_optimum(g) == set(product((0, 1), repeat=2))


class TestScalingInvariance:
    def test_positive_scaling(self):
        for open_network in (False, True):
            g = build_go_nogo_game(open_network)
            for k in (0.5, 2.0, 17.0):
                s = g.scaled(k)
                assert pure_nash(s, weak=True) == pure_nash(g, weak=True)
                assert pure_nash(s, weak=False) == pure_nash(g, weak=False)
                assert social_optimum(s) == social_optimum(g)


def test_analysis_table_mentions_both_variants():
    text = analysis_table()
    assert "closed network" in text and "open network" in text
    assert "(NoGo, NoGo)" in text
