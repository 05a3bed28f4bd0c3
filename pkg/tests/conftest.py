from __future__ import annotations

import pytest

from teedag.core import EMPTY_BLOCK, DagStore, TransactionBlock, Vertex
from teedag.trusted import Dealer


class Forge:
    """Builds properly attested vertices through real enclaves.

    Each replica's enclave counter must advance one round at a time, so a
    replica that skips a round cannot produce later vertices.
    """

    def __init__(self, f: int = 1, seed: int = 7, rounds_per_wave: int = 3):
        self.f = f
        self.n = 2 * f + 1
        self.dealer = Dealer(self.n, f, seed, rounds_per_wave)
        self.verifier = self.dealer.verifier
        self.genesis = self.dealer.genesis
        self.enclaves = [self.dealer.enclave(i) for i in range(self.n)]

    def vertex(self, rid: int, parents, weak=(), block: TransactionBlock = EMPTY_BLOCK) -> Vertex:
        enc = self.enclaves[rid]
        cert = enc.rac_validate_vertices(list(parents))
        draft = Vertex(cert.round + 1, rid, block,
                       tuple(p.digest for p in parents), tuple(w.digest for w in weak))
        _, att = enc.mic_get_counter(cert, draft.digest)
        return draft.with_counter(att)

    def layer(self, parents, sources=None) -> list[Vertex]:
        sources = range(self.n) if sources is None else sources
        return [self.vertex(s, parents) for s in sources]

    def store(self, *vertices: Vertex) -> DagStore:
        dag = DagStore(self.f, self.genesis)
        for v in vertices:
            dag.insert(v)
        return dag


@pytest.fixture
def forge() -> Forge:
    return Forge()


@pytest.fixture
def forge2() -> Forge:
    return Forge(f=2)
