from __future__ import annotations

import hashlib
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from teedag.core import (
    CounterAttestation,
    DagStore,
    IntegrityViolation,
    Transaction,
    TransactionBlock,
    UnknownVertexError,
    Vertex,
    WaveCoord,
    decode_transaction,
    decode_vertex,
    make_genesis,
    path_exists,
    round_of_wave,
    strong_path_exists,
    verify_vertex,
    wave_of_round,
)


# -- wave arithmetic ---------------------------------------------------------

@pytest.mark.parametrize("w,k,W,expected", [
    (1, 1, 3, 1), (2, 3, 3, 6), (2, 1, 3, 4), (5, 2, 2, 10), (1, 2, 2, 2),
])
def test_round_of_wave(w, k, W, expected):
    assert round_of_wave(w, k, W) == expected


@pytest.mark.parametrize("w,k,W", [(0, 1, 3), (1, 0, 3), (1, 4, 3), (1, 3, 2)])
def test_round_of_wave_rejects_out_of_range(w, k, W):
    with pytest.raises(ValueError):
        round_of_wave(w, k, W)


def test_wave_of_round_examples():
    assert wave_of_round(4) == WaveCoord(2, 1)
    assert wave_of_round(0) is None
    assert wave_of_round(6) == WaveCoord(2, 3)


@given(r=st.integers(1, 10_000), W=st.sampled_from([2, 3]))
def test_wave_of_round_inverts_round_of_wave(r, W):
    c = wave_of_round(r, W)
    assert round_of_wave(c.wave, c.slot, W) == r


# -- codecs ------------------------------------------------------------------

txs = st.builds(
    Transaction,
    payload=st.binary(max_size=64),
    session_id=st.none() | st.integers(0, 2**63 - 1),
    encrypted=st.booleans(),
    wrapped_key=st.none() | st.binary(max_size=40),
)
digests = st.binary(min_size=32, max_size=32)


@given(txs)
def test_transaction_roundtrip(tx):
    assert decode_transaction(tx.encode()) == tx


@given(st.integers(0, 2**40), st.integers(0, 2**31), st.lists(txs, max_size=4),
       st.lists(digests, max_size=5), st.lists(digests, max_size=3), st.booleans())
def test_vertex_roundtrip(rnd, src, block, strong, weak, attested):
    att = CounterAttestation(src, rnd, b"\x01" * 32, b"\x02" * 16) if attested else None
    v = Vertex(rnd, src, TransactionBlock(tuple(block)), tuple(strong), tuple(weak), att)
    back = decode_vertex(v.wire)
    assert back == v
    assert back.digest == v.digest == hashlib.sha256(v.body).digest()


def test_edges_are_canonicalised():
    a, b = b"\x02" * 32, b"\x01" * 32
    assert Vertex(1, 0, strong_edges=(a, b, a)).digest == Vertex(1, 0, strong_edges=(b, a)).digest


@pytest.mark.parametrize("blob", [b"", b"TDV0", b"\x00\x00\x00\x05TDV1\x00", b"\x00" * 40])
def test_decode_vertex_rejects_garbage(blob):
    with pytest.raises(Exception):
        decode_vertex(blob)


def test_genesis_is_fixed():
    g = make_genesis(2)
    assert [x.source for x in g] == [0, 1, 2]
    assert all(x.round == 0 for x in g)
    assert [x.digest for x in g] == [x.digest for x in make_genesis(2)]


# -- verify_vertex -----------------------------------------------------------

def test_verify_vertex_honest(forge):
    v = forge.vertex(0, forge.genesis)
    assert verify_vertex(v, forge.verifier)
    assert all(verify_vertex(g, forge.verifier) for g in forge.genesis)


def test_verify_vertex_detects_mutated_block(forge):
    v = forge.vertex(0, forge.genesis)
    forged = replace(v, block=TransactionBlock((Transaction(b"injected"),)))
    assert not verify_vertex(forged, forge.verifier)


def test_verify_vertex_rejects_too_few_strong_edges(forge):
    # A Byzantine sender attests a vertex with only f strong edges.
    enc = forge.enclaves[2]
    cert = enc.rac_validate_vertices(forge.genesis)
    draft = Vertex(1, 2, strong_edges=(forge.genesis[0].digest,))
    _, att = enc.mic_get_counter(cert, draft.digest)
    assert not verify_vertex(draft.with_counter(att), forge.verifier)


def test_verify_vertex_rejects_wrong_source_or_round(forge):
    v = forge.vertex(1, forge.genesis)
    assert not verify_vertex(replace(v, source=0), forge.verifier)
    assert not verify_vertex(replace(v, counter=replace(v.counter, counter_value=2)), forge.verifier)
    assert not verify_vertex(replace(v, counter=None), forge.verifier)
    assert not verify_vertex(Vertex(0, 2), forge.verifier)


# -- hand-built DAG ----------------------------------------------------------

@pytest.fixture
def small_dag(forge):
    """3 replicas, 3 rounds: c0 reaches a2 only through a weak edge."""
    g = forge.genesis
    a = forge.layer(g)
    b0 = forge.vertex(0, a[:2])
    b1 = forge.vertex(1, a[:2])
    b2 = forge.vertex(2, a[:2])
    c0 = forge.vertex(0, [b0, b1], weak=[a[2]])
    dag = forge.store(*a, b0, b1, b2, c0)
    return dag, a, (b0, b1, b2), c0


def test_path_examples(small_dag):
    dag, a, b, c0 = small_dag
    assert path_exists(dag, a[0], a[0])
    assert strong_path_exists(dag, a[0], a[0])
    assert path_exists(dag, b[0], a[0])
    assert not path_exists(dag, a[0], a[1])
    assert not path_exists(dag, b[0], a[2])


def test_weak_only_reach_is_not_strong(small_dag):
    dag, a, b, c0 = small_dag
    assert path_exists(dag, c0, a[2])
    assert not strong_path_exists(dag, c0, a[2])
    assert strong_path_exists(dag, c0, a[1])


def test_genesis_is_only_reflexively_reachable(small_dag, forge):
    dag, a, _, c0 = small_dag
    g0 = forge.genesis[0]
    assert path_exists(dag, g0, g0)
    assert not path_exists(dag, a[0], g0)
    assert not path_exists(dag, c0, g0)


def test_unknown_vertex_lookup_errors(small_dag):
    dag, *_ = small_dag
    stranger = Vertex(9, 0)
    with pytest.raises(LookupError):
        dag.path_exists(stranger, stranger)
    with pytest.raises(UnknownVertexError):
        dag.get(b"\x00" * 32)


def test_store_rejects_second_vertex_per_slot(forge):
    dag = forge.store()
    v = Vertex(1, 0, strong_edges=tuple(g.digest for g in forge.genesis))
    assert dag.insert(v)
    assert not dag.insert(v)
    with pytest.raises(IntegrityViolation):
        dag.insert(Vertex(1, 0, strong_edges=(forge.genesis[0].digest,)))


def test_store_rejects_unresolved_edges(forge):
    dag = forge.store()
    with pytest.raises(UnknownVertexError):
        dag.insert(Vertex(1, 0, strong_edges=(b"\x07" * 32,)))


def test_strong_supporters_and_unreached(small_dag):
    dag, a, b, c0 = small_dag
    assert dag.strong_supporters(a[0], 2) == list(b)
    assert dag.strong_supporters(a[2], 2) == []
    left = dag.unreached(dag.reach_mask(b[0]), 1)
    assert left == [a[2]]


def test_evicted_round_leaves_digests_resolvable(small_dag):
    dag, a, *_ = small_dag
    dag.evict_round(1)
    assert dag.round(1) == []
    assert 1 not in dag.snapshot()
    assert dag.get(a[0].digest) is a[0]


# -- brute-force closure oracle ----------------------------------------------

@st.composite
def random_dags(draw):
    n = 3
    genesis = make_genesis(1)
    rounds = {0: list(genesis)}
    vertices = []
    total = 0
    for r in range(1, draw(st.integers(1, 6)) + 1):
        sources = draw(st.lists(st.integers(0, n - 1), min_size=1, max_size=n, unique=True))
        layer = []
        for s in sorted(sources):
            if total >= 30:
                break
            prev = rounds[r - 1]
            strong = draw(st.lists(st.sampled_from(prev), min_size=1, max_size=len(prev), unique=True))
            older = [x for rr in range(1, r - 1) for x in rounds[rr]]
            weak = draw(st.lists(st.sampled_from(older), max_size=3, unique=True)) if older else []
            v = Vertex(r, s, strong_edges=tuple(x.digest for x in strong),
                       weak_edges=tuple(x.digest for x in weak))
            layer.append(v)
            total += 1
        if not layer:
            break
        rounds[r] = layer
        vertices.extend(layer)
    return genesis, vertices


def _closure(by_digest, v, strong_only):
    seen = {v.digest}
    stack = [v]
    while stack:
        x = stack.pop()
        for d in (x.strong_edges if strong_only else x.edges):
            y = by_digest[d]
            if y.round >= 1 and d not in seen:
                seen.add(d)
                stack.append(y)
    return seen


@settings(max_examples=60, deadline=None)
@given(random_dags())
def test_path_closure_matches_dfs(dag_case):
    genesis, vertices = dag_case
    dag = DagStore(1, genesis)
    for v in vertices:
        dag.insert(v)
    by_digest = {x.digest: x for x in [*genesis, *vertices]}
    everything = [*genesis, *vertices]
    for v in everything:
        reach = _closure(by_digest, v, strong_only=False)
        strong = _closure(by_digest, v, strong_only=True)
        assert strong <= reach
        for u in everything:
            assert dag.path_exists(v, u) == (u.digest in reach)
            assert dag.strong_path_exists(v, u) == (u.digest in strong)
