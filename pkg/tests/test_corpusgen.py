"""Benchmark corpus generator: determinism, shape, round-trips."""

from __future__ import annotations

from binprov.binmodel import serialize_model
from binprov.buildoracle import SimulatedToolchain, all_option_specs
from binprov.conditions import evaluate
from binprov.corpusgen import (
    conflict_index,
    generate_case,
    generate_conditional_unit,
    generate_corpus,
    load_case_dir,
    signal_free_indices,
    write_corpus,
)
from binprov.varsource import scan_tree


def test_generation_is_deterministic():
    a = generate_case(1, 4)
    b = generate_case(1, 4)
    assert serialize_model(a.crash) == serialize_model(b.crash)
    assert {u.name: u.text for u in a.tree.units} == {
        u.name: u.text for u in b.tree.units
    }
    assert a.hidden_spec == b.hidden_spec and a.hidden_flags == b.hidden_flags
    # a different seed moves the hidden truth or the payload strings
    c = generate_case(2, 4)
    assert serialize_model(c.crash) != serialize_model(a.crash)


def test_corpus_layout(corpus21):
    assert len(corpus21) == 21
    assert [case.index for case in corpus21] == list(range(21))
    assert len({case.name for case in corpus21}) == 21
    assert signal_free_indices(21) == {7, 14}
    assert conflict_index(21) == 3
    for case in corpus21:
        assert case.signal_free == (case.index in {7, 14})
        assert case.hidden_spec in all_option_specs()
        # at least one macro-backed flag is always on, so the config stage
        # always has something to find
        defines = case.config_map.macros_for(case.hidden_flags)
        assert defines
        if case.signal_free:
            assert case.vulnerable_fragment is None
        else:
            assert case.vulnerable_fragment is not None


def test_crash_models_are_stripped_truth_builds(corpus21):
    for case in corpus21[:5]:
        backend = SimulatedToolchain(case.tree, base_name=case.name)
        truth = backend.build(case.hidden_spec, case.truth_config())
        assert case.crash.stripped
        assert not any(fn.symbol for fn in case.crash.functions)
        assert len(case.crash.functions) == len(truth.functions)


def test_signal_free_cases_have_featureless_guards(corpus21):
    for case in corpus21:
        if not case.signal_free:
            continue
        env = case.truth_config().macro_env()
        for scan in scan_tree(case.tree).values():
            for frag in scan.conditional_fragments():
                if evaluate(frag.condition, env, env):
                    assert not frag.features, (
                        f"{case.name}:{frag.id} should carry no matchable payload"
                    )


def test_seed_config_hides_the_truth(corpus21):
    for case in corpus21[:5]:
        seed = case.seed_config()
        assert seed.macros == frozenset()
        assert set(seed.units) == set(case.base_units)
        truth = case.truth_config()
        assert set(truth.units) >= set(case.base_units)


def test_conflict_case_plants_contradictory_evidence():
    case = generate_case(1, 3, with_conflict=True)
    texts = {u.name: u.text for u in case.tree.units}
    joined = "\n".join(texts.values())
    assert "conflict_clean" in joined and "conflict_decoy" in joined


def test_write_and_load_round_trip(tmp_path, corpus21):
    cases = corpus21[:3]
    write_corpus(cases, tmp_path)
    for case in cases:
        loaded = load_case_dir(tmp_path / case.name)
        assert loaded.name == case.name
        assert loaded.hidden_spec == case.hidden_spec
        assert loaded.hidden_flags == tuple(case.hidden_flags)
        assert loaded.base_units == tuple(case.base_units)
        assert loaded.signal_free == case.signal_free
        assert serialize_model(loaded.crash) == serialize_model(case.crash)
        assert {u.name: u.text for u in loaded.tree.units} == {
            u.name: u.text for u in case.tree.units
        }
        assert [f.name for f in loaded.config_map.flags] == [
            f.name for f in case.config_map.flags
        ]


def test_conditional_unit_generator_is_balanced_and_deterministic():
    for index in range(30):
        text = generate_conditional_unit(9, index)
        assert text == generate_conditional_unit(9, index)
        depth = 0
        for line in text.splitlines():
            if line.startswith(("#ifdef", "#ifndef", "#if ")):
                depth += 1
            elif line.startswith("#endif"):
                depth -= 1
            assert depth >= 0
        assert depth == 0
