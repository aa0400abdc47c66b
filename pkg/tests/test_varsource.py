"""Preprocessor variability scanning and the flag/macro config map."""

from __future__ import annotations

import re

import pytest

from binprov.conditions import BoolConst, DefinedAtom, Not, neg, to_text
from binprov.corpusgen import generate_conditional_unit
from binprov.errors import MapGapError, SchemaError
from binprov.solver import Unsatisfiable, solve
from binprov.varsource import (
    CallSig,
    ConfigMap,
    SourceTree,
    StringLit,
    resolve_flags,
    scan_tree,
    scan_unit,
)

# Shaped like libxml2's HTML-gated parser helpers.
XMLLINT_SNIPPET = """\
static int
lookup_sequence(const char *cur) {
    int mode;
#ifdef LIBXML_HTML_ENABLED
    mode = html_mode("relaxed");
    note_path(cur, 2);
#else
    mode = strict_mode("strict");
#endif
    return mode;
}
"""


def test_xmllint_snippet_yields_three_fragments():
    scan = scan_unit("parser.c", XMLLINT_SNIPPET)
    assert len(scan.fragments) == 3
    root, on, off = scan.fragments
    assert root.is_root and root.condition == BoolConst(True)
    assert on.condition == DefinedAtom("LIBXML_HTML_ENABLED")
    assert off.condition == Not(DefinedAtom("LIBXML_HTML_ENABLED"))
    assert on.parent == root.id and off.parent == root.id


def test_xmllint_snippet_fragment_contents():
    scan = scan_unit("parser.c", XMLLINT_SNIPPET)
    root, on, off = scan.fragments
    assert StringLit("relaxed") in on.features
    # arity counts the arguments left after string literals are masked out
    assert CallSig("html_mode", 0) in on.features
    assert CallSig("note_path", 2) in on.features
    assert StringLit("strict") in off.features
    # directive lines stay with the parent
    lines = XMLLINT_SNIPPET.splitlines()
    for ln in root.lines:
        assert ln <= len(lines)
    assert any(lines[ln - 1].startswith("#ifdef") for ln in root.lines)


def test_scan_rejects_malformed_nesting():
    with pytest.raises(SchemaError):
        scan_unit("u.c", "#endif\n")
    with pytest.raises(SchemaError):
        scan_unit("u.c", "#ifdef A\nx;\n")
    with pytest.raises(SchemaError):
        scan_unit("u.c", "#ifdef A\n#else\n#elif defined(B)\n#endif\n")
    with pytest.raises(SchemaError):
        scan_unit("u.c", "#ifdef A\n#else\n#else\n#endif\n")


def test_scan_is_deterministic():
    text = generate_conditional_unit(5, 0)
    a = scan_unit("u.c", text)
    b = scan_unit("u.c", text)
    assert [f.condition_text() for f in a.fragments] == [
        f.condition_text() for f in b.fragments
    ]
    assert [f.lines for f in a.fragments] == [f.lines for f in b.fragments]


def _chain_groups(text: str) -> list[list[int]]:
    """Independent walker: per #if..#endif chain, the body start line of
    each arm. Used as the oracle for arm exclusivity."""
    groups: list[list[int]] = []
    stack: list[list[int]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*#\s*(\w+)", raw)
        d = m.group(1) if m else None
        if d in ("if", "ifdef", "ifndef"):
            stack.append([lineno + 1])
        elif d in ("elif", "else"):
            stack[-1].append(lineno + 1)
        elif d == "endif":
            groups.append(stack.pop())
    return groups


def test_random_conditional_files_partition_exclusivity_implication():
    checked_pairs = 0
    checked_children = 0
    for index in range(200):
        text = generate_conditional_unit(1, index)
        scan = scan_unit("u.c", text)
        n_lines = len(text.splitlines())

        # partition: every line in exactly one fragment
        all_lines = sorted(ln for f in scan.fragments for ln in f.lines)
        assert all_lines == list(range(1, n_lines + 1))

        # chain exclusivity: arms of one chain are pairwise unsatisfiable
        frag_by_start = {f.span[0]: f for f in scan.fragments if not f.is_root}
        for group in _chain_groups(text):
            arms = [frag_by_start[s] for s in group if s in frag_by_start]
            for i in range(len(arms)):
                for j in range(i + 1, len(arms)):
                    out = solve([arms[i].condition, arms[j].condition])
                    assert isinstance(out, Unsatisfiable), (
                        f"arms {arms[i].condition_text()} and "
                        f"{arms[j].condition_text()} are jointly satisfiable"
                    )
                    checked_pairs += 1

        # child implies parent: child condition forbids not-parent
        frag_map = scan.fragment_map()
        for frag in scan.fragments:
            if frag.is_root:
                continue
            parent = frag_map[frag.parent]
            if isinstance(parent.condition, BoolConst):
                continue
            out = solve([frag.condition, neg(parent.condition)])
            assert isinstance(out, Unsatisfiable), (
                f"{frag.condition_text()} does not imply {parent.condition_text()}"
            )
            checked_children += 1
    assert checked_pairs > 50
    assert checked_children > 50


def test_scan_tree_maps_unit_names():
    tree = SourceTree.from_mapping({"a.c": "x;\n", "b.c": "#ifdef F\ny;\n#endif\n"})
    scans = scan_tree(tree)
    assert set(scans) == {"a.c", "b.c"}
    assert len(scans["b.c"].conditional_fragments()) == 1


CONFIG_MAP_TEXT = """\
# build flags
with_cache : define USE_CACHE, define CACHE_STATS
with_net   : define USE_NET, unit net.c
with_dbg   : unit dbg.c
"""


def test_config_map_parse_and_lookup():
    cmap = ConfigMap.parse(CONFIG_MAP_TEXT)
    assert [f.name for f in cmap.flags] == ["with_cache", "with_net", "with_dbg"]
    assert cmap.macros_for(["with_cache"]) == {"USE_CACHE", "CACHE_STATS"}
    assert cmap.macros_for(["with_net", "with_dbg"]) == {"USE_NET"}
    assert cmap.units_for(["with_net", "with_dbg"]) == {"net.c", "dbg.c"}


def test_config_map_rejects_malformed_lines():
    with pytest.raises(SchemaError):
        ConfigMap.parse("with_cache define USE_CACHE\n")
    with pytest.raises(SchemaError):
        ConfigMap.parse("with_cache : frobnicate USE_CACHE\n")
    with pytest.raises(SchemaError):
        ConfigMap.parse(" : define X\n")


def test_config_map_unknown_flag_is_a_gap():
    cmap = ConfigMap.parse(CONFIG_MAP_TEXT)
    with pytest.raises(MapGapError):
        cmap.macros_for(["with_gui"])
    with pytest.raises(MapGapError):
        cmap.units_for(["with_gui"])


def test_resolve_flags_exact_union():
    cmap = ConfigMap.parse(CONFIG_MAP_TEXT)
    flags = resolve_flags(cmap, {"USE_CACHE", "CACHE_STATS", "USE_NET"}, {"net.c"})
    assert flags == ["with_cache", "with_net"]
    assert resolve_flags(cmap, set(), set()) == []


def test_resolve_flags_reports_unexplained_macros():
    cmap = ConfigMap.parse(CONFIG_MAP_TEXT)
    with pytest.raises(MapGapError):
        resolve_flags(cmap, {"USE_MYSTERY"}, set())
    # partial macro sets cannot turn a multi-macro flag on
    with pytest.raises(MapGapError):
        resolve_flags(cmap, {"USE_CACHE"}, set())


def test_resolve_flags_reports_unexplained_units():
    cmap = ConfigMap.parse(CONFIG_MAP_TEXT)
    with pytest.raises(MapGapError):
        resolve_flags(cmap, set(), {"mystery.c"})


def test_nested_condition_text_composes_guards():
    text = "#ifdef A\n#ifdef B\nx;\n#endif\n#endif\n"
    scan = scan_unit("u.c", text)
    inner = [f for f in scan.fragments if f.lines == [3]][0]
    assert to_text(inner.condition) == "defined(A) && defined(B)"
