from __future__ import annotations

import random
from fractions import Fraction
from itertools import combinations, product
from math import comb

import pytest
from scipy.stats import binom

from teedag.core import Transaction, TransactionBlock
from teedag.crypto import session_encrypt, wrap_with_public_key
from teedag.ordering import Ordering, analytic_wave_commit_probability
from teedag.trusted import coin_draw

# -- analytic oracle ---------------------------------------------------------


def test_analytic_f1_exact():
    p_u, big_p = analytic_wave_commit_probability(1)
    assert p_u == Fraction(8, 9)
    assert big_p == Fraction(704, 729)
    assert round(float(p_u), 3) == 0.889
    assert round(float(big_p), 3) == 0.966 and float(big_p) > 0.965


def _float_oracle(f):
    n = 2 * f + 1
    total = binom.pmf(range(n + 1), n, (f + 1) / n)
    p_u = sum(total[k] * (1 - comb(n - k, f + 1) / comb(n, f + 1)) for k in range(n + 1))
    return p_u, binom.sf(f, n, p_u)


@pytest.mark.parametrize("f", [1, 2, 3, 5, 8])
def test_analytic_matches_float_oracle(f):
    p_u, big_p = analytic_wave_commit_probability(f)
    want_u, want_p = _float_oracle(f)
    assert float(p_u) == pytest.approx(want_u, abs=1e-12)
    assert float(big_p) == pytest.approx(want_p, abs=1e-12)


def test_analytic_large_f_converges():
    assert float(analytic_wave_commit_probability(20)[1]) > 0.9999
    values = [analytic_wave_commit_probability(f)[1] for f in range(1, 8)]
    assert values == sorted(values)


def test_analytic_rejects_f0():
    with pytest.raises(ValueError):
        analytic_wave_commit_probability(0)


def test_monte_carlo_random_reference_model():
    """Each vertex references a uniform (f+1)-subset of the previous round."""
    f, n, trials = 1, 3, 60_000
    rng = random.Random(11)
    reach = independent = 0
    for _ in range(trials):
        second = [set(rng.sample(range(n), f + 1)) for _ in range(n)]
        to_leader = {i for i, refs in enumerate(second) if 0 in refs}
        reach += bool(set(rng.sample(range(n), f + 1)) & to_leader)
        # P treats the third-round vertices as independent draws of p_u.
        hits = 0
        for _ in range(n):
            second = [set(rng.sample(range(n), f + 1)) for _ in range(n)]
            to_leader = {i for i, refs in enumerate(second) if 0 in refs}
            hits += bool(set(rng.sample(range(n), f + 1)) & to_leader)
        independent += hits >= f + 1
    p_u, big_p = analytic_wave_commit_probability(f)
    assert reach / trials == pytest.approx(float(p_u), abs=0.01)
    assert independent / trials == pytest.approx(float(big_p), abs=0.005)


def test_shared_second_round_lowers_wave_commit_probability():
    """Exact enumeration when all third-round vertices see one second round."""
    n, subsets = 3, list(combinations(range(3), 2))
    good = total = 0
    for second in product(subsets, repeat=n):
        to_leader = {i for i, refs in enumerate(second) if 0 in refs}
        for third in product(subsets, repeat=n):
            good += sum(bool(set(t) & to_leader) for t in third) >= 2
            total += 1
    correlated = Fraction(good, total)
    assert correlated == Fraction(220, 243)
    assert correlated < analytic_wave_commit_probability(1)[1]


# -- hand-built waves --------------------------------------------------------

def tx_block(r, s):
    return TransactionBlock((Transaction(f"tx-{r}-{s}".encode()),))


class Chain:
    """Rounds built through the forge, with every replica's round certificates."""

    def __init__(self, forge):
        self.forge = forge
        self.layers = {0: {g.source: g for g in forge.genesis}}
        self.certs = {i: {} for i in range(forge.n)}
        self.dags = [forge.store() for _ in range(forge.n)]

    def leader(self, w):
        return coin_draw(self.forge.dealer._rand_seed, w) % self.forge.n

    def add(self, r, refs, weak=None, blocks=None):
        """``refs[s]`` lists the round r-1 sources vertex (r, s) references."""
        layer = {}
        weak = weak or {}
        for s, parents in refs.items():
            block = (blocks or {}).get(s, tx_block(r, s))
            layer[s] = self.forge.vertex(
                s, [self.layers[r - 1][p] for p in parents],
                weak=[self.layers[rr][ss] for rr, ss in weak.get(s, ())], block=block)
        self.layers[r] = layer
        for dag in self.dags:
            for v in layer.values():
                dag.insert(v)
        for i, enc in enumerate(self.forge.enclaves):
            if len(layer) >= self.forge.f + 1 and enc.counter_value <= r:
                self.certs[i][r] = enc.rac_validate_vertices(list(layer.values()))
        return layer

    def full(self, r):
        prev = sorted(self.layers[r - 1])
        return self.add(r, {s: prev for s in range(self.forge.n)})

    def ordering(self, rid, **kw):
        return Ordering(rid, self.forge.f, 3, self.dags[rid], self.forge.enclaves[rid],
                        self.certs[rid], **kw)


def payloads(order):
    return [rec.tx.payload.decode() for rec in order.log]


def test_single_wave_direct_commit(forge):
    c = Chain(forge)
    for r in (1, 2, 3):
        c.full(r)
    o = c.ordering(0)
    o.wave_ready(1)
    lead = c.leader(1)
    assert o.outcomes[1].direct and o.outcomes[1].supporters == 3
    assert payloads(o) == [f"tx-1-{lead}"]
    assert [rec.sn for rec in o.log] == [0]
    assert o.leader_commits[0].direct


def test_second_wave_commits_history_in_round_source_order(forge):
    c = Chain(forge)
    for r in range(1, 7):
        c.full(r)
    o = c.ordering(1)
    o.wave_ready(1)
    o.wave_ready(2)
    first = c.leader(1)
    lead2 = c.leader(2)
    rest = [f"tx-{r}-{s}" for r in (1, 2, 3) for s in range(3) if (r, s) != (1, first)]
    assert payloads(o) == [f"tx-1-{first}", *rest, f"tx-4-{lead2}"]
    assert [rec.sn for rec in o.log] == list(range(len(o.log)))
    assert len({rec.vertex_digest for rec in o.log}) == len(o.log)
    # Ancestors precede descendants.
    pos = {rec.vertex_digest: rec.sn for rec in o.log}
    for rec in o.log:
        v = o.dag.get(rec.vertex_digest)
        assert all(pos[e] < rec.sn for e in v.edges if e in pos)


def test_under_supported_leader_committed_through_next_wave(forge):
    c = Chain(forge)
    lead = c.leader(1)
    others = [s for s in range(3) if s != lead]
    c.full(1)
    c.add(2, {0: [lead, others[0]], 1: others, 2: others})
    c.add(3, {0: [0, 1], 1: [1, 2], 2: [1, 2]})
    for r in (4, 5, 6):
        c.full(r)
    o = c.ordering(0)
    o.wave_ready(1)
    assert o.outcomes[1].present and o.outcomes[1].supporters == 1
    assert not o.outcomes[1].direct and o.log == []
    o.wave_ready(2)
    assert [(lc.wave, lc.direct) for lc in o.leader_commits] == [(1, False), (2, True)]
    assert payloads(o)[0] == f"tx-1-{lead}"


def test_absent_leader_skips(forge):
    c = Chain(forge)
    lead = c.leader(1)
    others = [s for s in range(3) if s != lead]
    c.add(1, {s: [0, 1] for s in others})
    c.add(2, {s: others for s in others})
    c.add(3, {s: others for s in others})
    o = c.ordering(others[0])
    assert o.get_wave_vertex_leader(1) is None
    o.wave_ready(1)
    assert not o.outcomes[1].present and o.log == []


def test_replicas_agree_on_leader_and_log(forge):
    c = Chain(forge)
    for r in range(1, 10):
        c.full(r)
    orders = [c.ordering(i) for i in range(3)]
    for o in orders:
        for w in (1, 2, 3):
            o.wave_ready(w)
    assert len({o.get_wave_vertex_leader(2).digest for o in orders}) == 1
    lines = [[rec.to_line() for rec in o.log] for o in orders]
    assert lines[0] == lines[1] == lines[2]
    assert orders[0].choose_leader(3) == orders[0].choose_leader(3)


def test_encrypted_block_disclosed_at_commit(forge):
    c = Chain(forge)
    pk = forge.enclaves[0].trad_get_pub_key()
    key = b"q" * 16
    wrapped = wrap_with_public_key(pk, key)
    sealed = Transaction(session_encrypt(key, b"n" * 12, b"hidden"), None, True, wrapped)
    c.full(1)
    c.add(2, {s: [0, 1, 2] for s in range(3)}, blocks={1: TransactionBlock((sealed,))})
    for r in range(3, 7):
        c.full(r)
    sessions, originals = [], []
    o = c.ordering(0, on_session=lambda sid, tx: sessions.append(sid),
                   on_commit=lambda rec, tx: originals.append(tx))
    o.wave_ready(1)
    o.wave_ready(2)
    assert "hidden" in payloads(o)
    assert len(sessions) == 1
    assert sealed in originals
