"""Merkle hash forest over the committed sequence and client certificates.

The committed history of length m is covered by one complete binary hash
tree per set bit of m, trees ordered by strictly decreasing height.
Appending a leaf works like a binary counter: equal-height neighbours
merge until heights strictly decrease again.  Because trees always start
at a leaf index that is a multiple of their size, the left/right turns
on any root path are exactly the bits of the 0-based leaf index — chain
sides are position-checkable.

Servers do not keep the trees.  They keep the root list plus, per
client, the last two committed commands with their sibling chains; a
merge extends every stored chain it covers by one sibling.  Clients
accumulate the chain material received in acknowledgements and splice
chains of later own commands onto earlier ones, which is enough to reach
either a current root or a node the verifying server still knows.

Hashes are SHA-256 with domain separation: leaf = H(0x00 || enc(cmd)),
inner node = H(0x01 || left || right), enc length-prefixed so encodings
never collide across field boundaries.
"""

from __future__ import annotations

import hashlib
import json
from typing import Iterable, NamedTuple, Sequence

from .errors import ChainGapError, ConfigError
from .smrlog import Command

LEFT = "left"
RIGHT = "right"


def encode_command(cmd: Command) -> bytes:
    raw = cmd.client.encode("ascii")
    return (len(raw).to_bytes(4, "big") + raw
            + cmd.seq.to_bytes(8, "big")
            + len(cmd.payload).to_bytes(4, "big") + cmd.payload
            + (b"\x01" if cmd.nullified else b"\x00"))


def leaf_hash(cmd: Command) -> bytes:
    return hashlib.sha256(b"\x00" + encode_command(cmd)).digest()


def node_hash(left: bytes, right: bytes) -> bytes:
    return hashlib.sha256(b"\x01" + left + right).digest()


def side_at(index: int, level: int) -> str:
    """Side the sibling sits on for the path of leaf `index` at `level`."""
    return LEFT if (index >> level) & 1 else RIGHT


def combine(cur: bytes, sib: bytes, side: str) -> bytes:
    return node_hash(sib, cur) if side == LEFT else node_hash(cur, sib)


class Root(NamedTuple):
    height: int
    start: int  # first covered leaf index; always a multiple of 2**height
    hash: bytes


class Merge(NamedTuple):
    height: int       # height of the two merged trees
    start: int        # start of the left tree; merged span is 2**(height+1)
    left: bytes
    right: bytes


class StoredCmd(NamedTuple):
    seq: int
    pos: int                 # 1-based position in the committed sequence
    leaf: bytes
    chain: tuple             # ((side, hash), ...) leaf upward


class Certificate(NamedTuple):
    cmd: Command
    pos: int
    chain: tuple             # ((side, hash), ...) leaf upward


ACCEPT = "accept"
REJECT_ROOT = "root-mismatch"
REJECT_SIDE = "side-position"
REJECT_SHORT = "chain-too-short"
REJECT_CLIENT = "unknown-client"


def forest_append(roots: tuple, m: int, leaf: bytes) -> tuple[tuple, list[Merge]]:
    """Append the (m+1)-th leaf; returns (roots', merges in height order)."""
    roots = list(roots)
    roots.append(Root(0, m, leaf))
    merges: list[Merge] = []
    while len(roots) >= 2 and roots[-1].height == roots[-2].height:
        right = roots.pop()
        left = roots.pop()
        merges.append(Merge(left.height, left.start, left.hash, right.hash))
        roots.append(Root(left.height + 1, left.start, node_hash(left.hash, right.hash)))
    return tuple(roots), merges


def _block_hash(leaves: Sequence[bytes], start: int, size: int) -> bytes:
    if size == 1:
        return leaves[start]
    half = size // 2
    return node_hash(_block_hash(leaves, start, half),
                     _block_hash(leaves, start + half, half))


def roots_from_scratch(leaves: Sequence[bytes]) -> tuple:
    """Independent whole-forest builder used to cross-check the counter."""
    m = len(leaves)
    roots = []
    start = 0
    for b in reversed(range(m.bit_length())):
        if (m >> b) & 1:
            roots.append(Root(b, start, _block_hash(leaves, start, 1 << b)))
            start += 1 << b
    return tuple(roots)


def chain_from_scratch(leaves: Sequence[bytes], index: int) -> tuple:
    """Full sibling chain of a leaf up to the root of its current tree."""
    roots = roots_from_scratch(leaves)
    tree = next(t for t in roots if t.start <= index < t.start + (1 << t.height))
    chain = []
    for lvl in range(tree.height):
        sib_start = ((index >> lvl) ^ 1) << lvl
        chain.append((side_at(index, lvl), _block_hash(leaves, sib_start, 1 << lvl)))
    return tuple(chain)


class CertMeta(NamedTuple):
    """A server's certificate metadata: O(log m) roots + 2 chains/client."""
    m: int
    roots: tuple                      # of Root
    pairs: dict                       # client -> (StoredCmd | None, StoredCmd)

    def storage_counts(self) -> dict:
        chains = [len(sc.chain) for pair in self.pairs.values()
                  for sc in pair if sc is not None]
        return {"roots": len(self.roots),
                "clients": len(self.pairs),
                "chains": len(chains),
                "max_chain": max(chains, default=0)}


EMPTY_META = CertMeta(0, (), {})


def _extend(sc: StoredCmd, merges: list[Merge]) -> StoredCmd:
    idx = sc.pos - 1
    chain = sc.chain
    for mg in merges:
        if mg.start <= idx < mg.start + (1 << (mg.height + 1)) and len(chain) == mg.height:
            side = side_at(idx, mg.height)
            chain = chain + ((side, mg.left if side == LEFT else mg.right),)
    return sc if chain is sc.chain else sc._replace(chain=chain)


def on_commit_update(meta: CertMeta, cmd: Command, pos: int) -> CertMeta:
    """Fold one committed command into the forest and the stored pairs."""
    if pos != meta.m + 1:
        raise ConfigError(f"commit position {pos} out of order (m={meta.m})")
    leaf = leaf_hash(cmd)
    roots, merges = forest_append(meta.roots, meta.m, leaf)

    fresh = _extend(StoredCmd(cmd.seq, pos, leaf, ()), merges)
    pairs = dict(meta.pairs)
    if merges:
        for client, (older, newer) in meta.pairs.items():
            pairs[client] = (None if older is None else _extend(older, merges),
                             _extend(newer, merges))
    prev = pairs.get(cmd.client)
    pairs[cmd.client] = (None if prev is None else prev[1], fresh)
    return CertMeta(meta.m + 1, roots, pairs)


def _known_nodes(sc: StoredCmd) -> dict:
    """Every (level, start) -> hash derivable from one stored chain."""
    idx = sc.pos - 1
    known = {(0, idx): sc.leaf}
    cur = sc.leaf
    for lvl, (side, sib) in enumerate(sc.chain):
        known[(lvl, ((idx >> lvl) ^ 1) << lvl)] = sib
        cur = combine(cur, sib, side)
        known[(lvl + 1, (idx >> (lvl + 1)) << (lvl + 1))] = cur
    return known


def verify_certificate(meta: CertMeta, cert: Certificate) -> tuple[bool, str]:
    """(accepted, reason); reason is "accept" or a reject classification."""
    if cert.pos < 1 or cert.pos > meta.m:
        return False, REJECT_SIDE
    idx = cert.pos - 1
    cur = leaf_hash(cert.cmd)
    for lvl, (side, sib) in enumerate(cert.chain):
        if side not in (LEFT, RIGHT) or side != side_at(idx, lvl):
            return False, REJECT_SIDE
        cur = combine(cur, sib, side)
    depth = len(cert.chain)
    start = (idx >> depth) << depth

    for root in meta.roots:
        if root.height == depth and root.start == start:
            return (True, ACCEPT) if root.hash == cur else (False, REJECT_ROOT)

    pair = meta.pairs.get(cert.cmd.client)
    if pair is None:
        return False, REJECT_CLIENT
    coord_seen = False
    for sc in pair:
        if sc is None:
            continue
        known = _known_nodes(sc)
        have = known.get((depth, start))
        if have is not None:
            coord_seen = True
            if have == cur:
                return True, ACCEPT
    return False, (REJECT_ROOT if coord_seen else REJECT_SHORT)


# ---------------------------------------------------------------------------
# Client side.


class ClientStore:
    """A client's accumulated certification material.

    `own` maps seq -> submitted Command (the client can always rehash its
    own commands); `acked` maps seq -> committed position as reported in
    the acknowledgement; `mat` maps seq -> chain material for that
    command, received one command late and spliced on demand.  Duplicate
    material keeps the longer chain.
    """

    def __init__(self, client: str):
        self.client = client
        self.own: dict[int, Command] = {}
        self.acked: dict[int, int] = {}
        self.mat: dict[int, tuple] = {}

    def submitted(self, cmd: Command):
        self.own[cmd.seq] = cmd

    def on_ack(self, seq: int, pos: int, prev_material: tuple | None):
        if seq not in self.own:
            raise ChainGapError(f"ack for unknown seq {seq}")
        self.acked[seq] = pos
        if prev_material is not None:
            prev_seq, prev_pos, chain = prev_material
            old = self.mat.get(prev_seq)
            if old is None or len(chain) > len(old[1]):
                self.mat[prev_seq] = (prev_pos, tuple(chain))
            if prev_seq in self.own:
                self.acked.setdefault(prev_seq, prev_pos)

    def drop_material(self, seq: int):
        """Simulate loss of one command's material (for degradation tests)."""
        self.mat.pop(seq, None)

    def _known(self) -> dict:
        known: dict[tuple[int, int], bytes] = {}

        def put(level, startpos, h):
            old = known.get((level, startpos))
            if old is not None and old != h:
                raise ChainGapError("inconsistent chain material")
            known[(level, startpos)] = h

        for seq, pos in self.acked.items():
            if seq in self.own:
                put(0, pos - 1, leaf_hash(self.own[seq]))
        for seq, (pos, chain) in self.mat.items():
            if seq not in self.own:
                continue
            idx = pos - 1
            cur = leaf_hash(self.own[seq])
            put(0, idx, cur)
            for lvl, (side, sib) in enumerate(chain):
                put(lvl, ((idx >> lvl) ^ 1) << lvl, sib)
                cur = combine(cur, sib, side)
                put(lvl + 1, (idx >> (lvl + 1)) << (lvl + 1), cur)
        return known

    def merge_chain(self, seq: int) -> tuple[int, tuple]:
        """Longest constructible chain for own command seq: (pos, chain)."""
        if seq in self.mat:
            pos = self.mat[seq][0]
        elif seq in self.acked:
            pos = self.acked[seq]
        else:
            raise ChainGapError(f"no material or ack for seq {seq}")
        known = self._known()
        idx = pos - 1
        cur = leaf_hash(self.own[seq])
        chain = []
        lvl = 0
        while True:
            sib = known.get((lvl, ((idx >> lvl) ^ 1) << lvl))
            if sib is None:
                break
            side = side_at(idx, lvl)
            chain.append((side, sib))
            cur = combine(cur, sib, side)
            lvl += 1
        return pos, tuple(chain)

    def build_certificate(self, seq: int) -> Certificate:
        if seq not in self.own:
            raise ChainGapError(f"seq {seq} was never submitted")
        pos, chain = self.merge_chain(seq)
        return Certificate(self.own[seq], pos, chain)


# ---------------------------------------------------------------------------
# Certificate wire form (canonical bytes; used by the mutation fuzzer).


def certificate_to_bytes(cert: Certificate) -> bytes:
    raw = cert.cmd.client.encode("ascii")
    out = [len(raw).to_bytes(1, "big"), raw,
           cert.cmd.seq.to_bytes(8, "big"),
           len(cert.cmd.payload).to_bytes(4, "big"), cert.cmd.payload,
           b"\x01" if cert.cmd.nullified else b"\x00",
           cert.pos.to_bytes(8, "big"),
           len(cert.chain).to_bytes(1, "big")]
    for side, h in cert.chain:
        out.append(b"\x00" if side == LEFT else b"\x01")
        out.append(h)
    return b"".join(out)


def certificate_from_bytes(buf: bytes) -> Certificate:
    def take(k):
        nonlocal off
        if off + k > len(buf):
            raise ConfigError("truncated certificate")
        piece = buf[off:off + k]
        off += k
        return piece

    off = 0
    clen = take(1)[0]
    try:
        client = take(clen).decode("ascii")
    except UnicodeDecodeError:
        raise ConfigError("client id not ascii") from None
    seq = int.from_bytes(take(8), "big")
    plen = int.from_bytes(take(4), "big")
    payload = take(plen)
    nb = take(1)[0]
    if nb not in (0, 1):
        raise ConfigError("bad null flag")
    pos = int.from_bytes(take(8), "big")
    if pos < 1:
        raise ConfigError("bad position")
    count = take(1)[0]
    chain = []
    for _ in range(count):
        sb = take(1)[0]
        if sb not in (0, 1):
            raise ConfigError("bad side byte")
        chain.append((LEFT if sb == 0 else RIGHT, take(32)))
    if off != len(buf):
        raise ConfigError("trailing bytes in certificate")
    return Certificate(Command(client, seq, payload, nullified=bool(nb)), pos, tuple(chain))


def flip_bit(buf: bytes, bit: int) -> bytes:
    b = bytearray(buf)
    b[bit // 8] ^= 1 << (bit % 8)
    return bytes(b)


# ---------------------------------------------------------------------------
# Golden vectors.


def golden_record(commands: Sequence[Command], certificates: Iterable[tuple[Certificate, str]]) -> dict:
    leaves = [leaf_hash(c) for c in commands]
    roots = roots_from_scratch(leaves)
    return {
        "committed_sequence": [[c.client, c.seq, c.payload.hex(), c.nullified]
                               for c in commands],
        "expected_roots": [[r.height, r.hash.hex()] for r in roots],
        "certificates": [{
            "x": [ct.cmd.client, ct.cmd.seq, ct.cmd.payload.hex(), ct.cmd.nullified],
            "p": ct.pos,
            "chain": [[side, h.hex()] for side, h in ct.chain],
            "verdict": verdict,
        } for ct, verdict in certificates],
    }


def golden_dump(path, record: dict):
    with open(path, "w") as f:
        json.dump(record, f, indent=1, sort_keys=True)
        f.write("\n")


def golden_load(path) -> dict:
    with open(path) as f:
        return json.load(f)


def golden_commands(record: dict) -> list[Command]:
    return [Command(c, s, bytes.fromhex(p), nullified=nf)
            for c, s, p, nf in record["committed_sequence"]]


def golden_certificates(record: dict) -> list[tuple[Certificate, str]]:
    out = []
    for item in record["certificates"]:
        c, s, p, nf = item["x"]
        cert = Certificate(Command(c, s, bytes.fromhex(p), nullified=nf), item["p"],
                           tuple((side, bytes.fromhex(h)) for side, h in item["chain"]))
        out.append((cert, item["verdict"]))
    return out
