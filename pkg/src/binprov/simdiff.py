"""Structural similarity and diffing between binary program models.

Matching runs in four passes, each pairing only functions that are still
unmatched, and only when the pairing key is unique on both sides:

1. identical symbol names,
2. neighborhood hash (sorted callee and caller tokens plus block count,
   where a token is a library symbol or the identity of an already matched
   pair; iterated to a fixpoint so matches cascade along the call graph),
3. whole-function fingerprint signature,
4. positional pairing inside equal-signature classes, in sorted-id order.

Pass 4 is what makes a program compare equal to itself even when it contains
byte-identical duplicate functions, which passes 1-3 can never tell apart in
a stripped binary.

Similarity of a matched function pair is the fingerprint-multiset overlap of
their blocks over the larger block count; program similarity is the sum of
pair similarities over the larger function count. Both are symmetric, land
in [0, 1], and hit exactly 1.0 on self-comparison.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from .binmodel import BasicBlock, BinaryProgram, Function, KeyKind

__all__ = [
    "KIND_PRIMES",
    "spp_fingerprint",
    "function_signature",
    "match_functions",
    "pair_blocks",
    "block_overlap_fraction",
    "compare_programs",
    "diff_programs",
    "BlockPair",
    "FunctionPairDiff",
    "DiffReport",
]

# Small-prime-product encoding of block content: each key-instruction kind
# maps to a fixed prime, a block's fingerprint is the sorted tuple of its
# primes. Two blocks have the same fingerprint exactly when they hold the
# same multiset of key-instruction kinds.
KIND_PRIMES: dict[KeyKind, int] = {
    KeyKind.COMPARE: 2,
    KeyKind.CALL: 3,
    KeyKind.STRING_REF: 5,
    KeyKind.CONST_REF: 7,
}

Fingerprint = tuple[int, ...]


def spp_fingerprint(block: BasicBlock) -> Fingerprint:
    return tuple(sorted(KIND_PRIMES[ki.kind] for ki in block.keyins))


def function_signature(fn: Function) -> tuple[Fingerprint, ...]:
    """Multiset of block fingerprints, as a sorted tuple."""
    return tuple(sorted(spp_fingerprint(b) for b in fn.blocks))


def _callee_of(operand: str, fn_ids: set[str]) -> tuple[str, bool]:
    """Resolve a call operand to (target, is_internal)."""
    if operand.startswith("?"):
        return operand[1:], True
    if operand in fn_ids:
        return operand, True
    return operand, False


def _call_edges(program: BinaryProgram):
    """callees[fn_id] = internal callee ids (with repeats),
    libcalls[fn_id] = library symbols (with repeats),
    callers[fn_id] = ids of functions calling fn_id (with repeats)."""
    fn_ids = {f.id for f in program.functions}
    callees: dict[str, list[str]] = {f.id: [] for f in program.functions}
    libcalls: dict[str, list[str]] = {f.id: [] for f in program.functions}
    callers: dict[str, list[str]] = {f.id: [] for f in program.functions}
    for fn in program.functions:
        for blk in fn.blocks:
            for ki in blk.keyins:
                if ki.kind is not KeyKind.CALL or not ki.operand:
                    continue
                target, internal = _callee_of(ki.operand, fn_ids)
                if internal and target in callees:
                    callees[fn.id].append(target)
                    callers[target].append(fn.id)
                else:
                    libcalls[fn.id].append(target)
    return callees, libcalls, callers


def _unique_key_matches(
    left_keys: dict[str, object], right_keys: dict[str, object]
) -> list[tuple[str, str]]:
    """Pair left/right ids whose key value occurs exactly once on each side."""
    left_by_key: dict[object, list[str]] = {}
    right_by_key: dict[object, list[str]] = {}
    for fid, key in left_keys.items():
        left_by_key.setdefault(key, []).append(fid)
    for fid, key in right_keys.items():
        right_by_key.setdefault(key, []).append(fid)
    out = []
    for key, lids in left_by_key.items():
        rids = right_by_key.get(key)
        if rids is not None and len(lids) == 1 and len(rids) == 1:
            out.append((lids[0], rids[0]))
    return sorted(out)


def match_functions(left: BinaryProgram, right: BinaryProgram) -> list[tuple[str, str]]:
    """Match functions between two programs; returns (left_id, right_id) pairs
    sorted by left id."""
    matched_lr: dict[str, str] = {}
    matched_rl: dict[str, str] = {}

    def record(pairs) -> bool:
        added = False
        for lid, rid in pairs:
            if lid in matched_lr or rid in matched_rl:
                continue
            matched_lr[lid] = rid
            matched_rl[rid] = lid
            added = True
        return added

    # Pass 1: symbols, where both sides carry them.
    lsyms = {f.id: f.symbol for f in left.functions if f.symbol}
    rsyms = {f.id: f.symbol for f in right.functions if f.symbol}
    record(_unique_key_matches(lsyms, rsyms))

    l_callees, l_libs, l_callers = _call_edges(left)
    r_callees, r_libs, r_callers = _call_edges(right)
    lfns = {f.id: f for f in left.functions}
    rfns = {f.id: f for f in right.functions}

    def neighborhood_hash(fid: str, callees, libs, callers, pair_token) -> object:
        ctoks = list(libs[fid])
        for callee in callees[fid]:
            tok = pair_token(callee)
            if tok is not None:
                ctoks.append(tok)
        rtoks = []
        for caller in callers[fid]:
            tok = pair_token(caller)
            if tok is not None:
                rtoks.append(tok)
        nblocks = len(lfns[fid].blocks) if fid in lfns else len(rfns[fid].blocks)
        return (tuple(sorted(ctoks)), tuple(sorted(rtoks)), nblocks)

    def left_token(fid: str):
        # Matched pairs are identified by the left-side id: stable and equal
        # for both members of the pair.
        return "m:" + fid if fid in matched_lr else None

    def right_token(fid: str):
        lid = matched_rl.get(fid)
        return "m:" + lid if lid is not None else None

    def neighborhood_pass() -> bool:
        lkeys = {
            fid: neighborhood_hash(fid, l_callees, l_libs, l_callers, left_token)
            for fid in lfns
            if fid not in matched_lr
        }
        rkeys = {
            fid: neighborhood_hash(fid, r_callees, r_libs, r_callers, right_token)
            for fid in rfns
            if fid not in matched_rl
        }
        return record(_unique_key_matches(lkeys, rkeys))

    def signature_pass() -> bool:
        lkeys = {
            fid: function_signature(lfns[fid]) for fid in lfns if fid not in matched_lr
        }
        rkeys = {
            fid: function_signature(rfns[fid]) for fid in rfns if fid not in matched_rl
        }
        return record(_unique_key_matches(lkeys, rkeys))

    def positional_pass() -> bool:
        lgroups: dict[tuple, list[str]] = {}
        rgroups: dict[tuple, list[str]] = {}
        for fid in lfns:
            if fid not in matched_lr:
                lgroups.setdefault(function_signature(lfns[fid]), []).append(fid)
        for fid in rfns:
            if fid not in matched_rl:
                rgroups.setdefault(function_signature(rfns[fid]), []).append(fid)
        pairs = []
        for sig, lids in lgroups.items():
            rids = rgroups.get(sig)
            if not rids:
                continue
            for lid, rid in zip(sorted(lids), sorted(rids)):
                pairs.append((lid, rid))
        return record(pairs)

    def converge() -> None:
        while True:
            any_change = neighborhood_pass()
            if signature_pass():
                any_change = True
            if not any_change:
                break

    converge()
    if positional_pass():
        converge()
    return sorted(matched_lr.items())


@dataclass
class BlockPair:
    left: str
    right: str
    same_fingerprint: bool


@dataclass
class FunctionPairDiff:
    left: str
    right: str
    fraction: float
    block_pairs: list[BlockPair] = field(default_factory=list)
    left_only_blocks: list[str] = field(default_factory=list)
    right_only_blocks: list[str] = field(default_factory=list)


@dataclass
class DiffReport:
    left_name: str
    right_name: str
    score: float
    beta: float
    pairs: list[FunctionPairDiff] = field(default_factory=list)
    left_only: list[str] = field(default_factory=list)
    right_only: list[str] = field(default_factory=list)

    def pair_for_left(self, left_id: str) -> FunctionPairDiff | None:
        for p in self.pairs:
            if p.left == left_id:
                return p
        return None


def block_overlap_fraction(a: Function, b: Function) -> float:
    """Fingerprint-multiset overlap over the larger block count."""
    ca = Counter(spp_fingerprint(blk) for blk in a.blocks)
    cb = Counter(spp_fingerprint(blk) for blk in b.blocks)
    overlap = sum(min(ca[fp], cb[fp]) for fp in ca if fp in cb)
    denom = max(len(a.blocks), len(b.blocks))
    if denom == 0:
        return 1.0
    return overlap / denom


def pair_blocks(a: Function, b: Function) -> list[BlockPair]:
    """Align blocks of a matched function pair for diffing.

    Entries pair first; pairs propagate along positionally aligned successor
    edges when fingerprints agree; remaining blocks pair greedily inside
    fingerprint classes in sorted-id order. The alignment does not influence
    the similarity score, only the fragment-level diff.
    """
    amap = a.block_map()
    bmap = b.block_map()
    fpa = {bid: spp_fingerprint(blk) for bid, blk in amap.items()}
    fpb = {bid: spp_fingerprint(blk) for bid, blk in bmap.items()}
    paired_a: dict[str, str] = {}
    paired_b: dict[str, str] = {}
    out: list[BlockPair] = []

    def take(x: str, y: str) -> None:
        paired_a[x] = y
        paired_b[y] = x
        out.append(BlockPair(left=x, right=y, same_fingerprint=fpa[x] == fpb[y]))

    take(a.entry, b.entry)
    queue = [(a.entry, b.entry)]
    while queue:
        xa, xb = queue.pop(0)
        for sa, sb in zip(amap[xa].succs, bmap[xb].succs):
            if sa in paired_a or sb in paired_b:
                continue
            if fpa[sa] == fpb[sb]:
                take(sa, sb)
                queue.append((sa, sb))

    rest_a: dict[Fingerprint, list[str]] = {}
    rest_b: dict[Fingerprint, list[str]] = {}
    for bid in sorted(amap):
        if bid not in paired_a:
            rest_a.setdefault(fpa[bid], []).append(bid)
    for bid in sorted(bmap):
        if bid not in paired_b:
            rest_b.setdefault(fpb[bid], []).append(bid)
    for fp, aids in rest_a.items():
        bids = rest_b.get(fp)
        if not bids:
            continue
        for xa, xb in zip(aids, bids):
            take(xa, xb)
    return out


def diff_programs(left: BinaryProgram, right: BinaryProgram) -> DiffReport:
    """Full structural diff. ``left`` is conventionally the freshly generated
    binary and ``right`` the crash-report binary, so ``left_only`` holds
    generated-only functions and ``right_only`` crash-only ones."""
    matches = match_functions(left, right)
    lfns = left.function_map()
    rfns = right.function_map()

    pairs = []
    total = 0.0
    for lid, rid in matches:
        fa, fb = lfns[lid], rfns[rid]
        fraction = block_overlap_fraction(fa, fb)
        bpairs = pair_blocks(fa, fb)
        seen_a = {bp.left for bp in bpairs}
        seen_b = {bp.right for bp in bpairs}
        pairs.append(
            FunctionPairDiff(
                left=lid,
                right=rid,
                fraction=fraction,
                block_pairs=bpairs,
                left_only_blocks=sorted(b.id for b in fa.blocks if b.id not in seen_a),
                right_only_blocks=sorted(b.id for b in fb.blocks if b.id not in seen_b),
            )
        )
        total += fraction

    denom = max(len(left.functions), len(right.functions))
    if denom == 0:
        score = beta = 1.0
    else:
        score = total / denom
        beta = len(matches) / denom

    matched_l = {lid for lid, _ in matches}
    matched_r = {rid for _, rid in matches}
    return DiffReport(
        left_name=left.name,
        right_name=right.name,
        score=score,
        beta=beta,
        pairs=pairs,
        left_only=sorted(f.id for f in left.functions if f.id not in matched_l),
        right_only=sorted(f.id for f in right.functions if f.id not in matched_r),
    )


def compare_programs(left: BinaryProgram, right: BinaryProgram) -> float:
    """Similarity score alone, for callers that do not need the diff."""
    return diff_programs(left, right).score
