import inspect

import pytest
from hypothesis import given, settings, strategies as st

from kprompt.corpus import (
    load_interactions,
    load_item_entity_map,
    load_kg,
    neighbors,
    split_leave_one_out,
)
from kprompt.errors import EmptyCorpusError, MissingNameError, MissingTemplateError, ParseError
from kprompt.corpus import InteractionLog

from conftest import make_kg


def write_tsv(path, rows):
    path.write_text("".join("\t".join(str(c) for c in row) + "\n" for row in rows))


def interactions_file(tmp_path, rows, name="inter.tsv"):
    path = tmp_path / name
    write_tsv(path, rows)
    return path


def test_sequences_sorted_by_timestamp_ties_by_input_order(tmp_path):
    path = interactions_file(
        tmp_path, [("u1", "C", 9), ("u1", "A", 3), ("u1", "B", 5), ("u1", "D", 3)]
    )
    log = load_interactions(path, min_user_count=1, min_item_count=1)
    assert [item for item, _ in log.sequences["u1"]] == ["A", "D", "B", "C"]


def test_default_thresholds_are_five():
    params = inspect.signature(load_interactions).parameters
    assert params["min_user_count"].default == 5
    assert params["min_item_count"].default == 5


def test_iterative_filtering_cascades(tmp_path):
    # Dropping i3 (1 occurrence) shrinks u1 below the user threshold, which
    # cascades through u2 and u3; the j-core is self-sustaining.
    rows = [
        ("u1", "i1", 1), ("u1", "i2", 2), ("u1", "i3", 3),
        ("u2", "i1", 1), ("u2", "i2", 2), ("u2", "i4", 3),
        ("u3", "i4", 1), ("u3", "i5", 2), ("u3", "i5", 3),
        ("u4", "j1", 1), ("u4", "j2", 2), ("u4", "j3", 3),
        ("u5", "j1", 1), ("u5", "j2", 2), ("u5", "j3", 3),
    ]
    log = load_interactions(interactions_file(tmp_path, rows), 3, 2)
    assert set(log.users) == {"u4", "u5"}
    assert log.items() == ["j1", "j2", "j3"]


def test_filtering_is_idempotent(tmp_path):
    rows = [
        ("u1", "i1", 1), ("u1", "i2", 2), ("u1", "i3", 3),
        ("u2", "i1", 1), ("u2", "i2", 2), ("u2", "i4", 3),
        ("u3", "i4", 1), ("u3", "i5", 2), ("u3", "i5", 3),
        ("u4", "j1", 1), ("u4", "j2", 2), ("u4", "j3", 3),
        ("u5", "j1", 1), ("u5", "j2", 2), ("u5", "j3", 3),
    ]
    log = load_interactions(interactions_file(tmp_path, rows), 3, 2)
    refiltered = [(u, i, t) for u in log.users for i, t in log.sequences[u]]
    log2 = load_interactions(interactions_file(tmp_path, refiltered, "again.tsv"), 3, 2)
    assert log2.sequences == log.sequences


def test_malformed_row_reports_line_number(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("u1\ti1\t1\nu1\ti2\n")
    with pytest.raises(ParseError, match="bad.tsv:2"):
        load_interactions(path, 1, 1)
    path.write_text("u1\ti1\tnotatime\n")
    with pytest.raises(ParseError, match="notatime"):
        load_interactions(path, 1, 1)


def test_empty_after_filtering(tmp_path):
    path = interactions_file(tmp_path, [("u1", "i1", 1), ("u1", "i2", 2), ("u1", "i3", 3)])
    with pytest.raises(EmptyCorpusError):
        load_interactions(path, min_user_count=5, min_item_count=5)


def kg_files(tmp_path, triples, names, templates):
    tri = tmp_path / "triples.tsv"
    write_tsv(tri, triples)
    nam = tmp_path / "names.tsv"
    write_tsv(nam, names.items())
    tem = tmp_path / "templates.json"
    import json

    tem.write_text(json.dumps(templates))
    return tri, nam, tem


BASE_NAMES = {"CastAway": "Cast Away", "Adventure": "Adventure", "TomHanks": "Tom Hanks"}
BASE_TEMPLATES = {"film.genre": "The genre of [X] is [Y].", "film.starring": "[X] starring [Y]."}


def test_load_kg_adjacency_and_dedup(tmp_path):
    triples = [
        ("CastAway", "film.genre", "Adventure"),
        ("CastAway", "film.genre", "Adventure"),  # duplicate kept once
        ("CastAway", "film.starring", "TomHanks"),
        ("Adventure", "film.genre", "Adventure"),  # self-loop dropped
    ]
    kg = load_kg(*kg_files(tmp_path, triples, BASE_NAMES, BASE_TEMPLATES))
    assert len(kg.triples) == 2
    assert kg.adjacency["CastAway"] == [
        ("film.genre", "Adventure"),
        ("film.starring", "TomHanks"),
    ]
    assert "Adventure" not in kg.adjacency


def test_load_kg_missing_template_names_relation(tmp_path):
    triples = [("CastAway", "film.budget", "Big")]
    names = dict(BASE_NAMES, Big="Big")
    with pytest.raises(MissingTemplateError, match="film.budget"):
        load_kg(*kg_files(tmp_path, triples, names, BASE_TEMPLATES))


def test_load_kg_missing_name_names_entity(tmp_path):
    triples = [("CastAway", "film.genre", "Mystery")]
    with pytest.raises(MissingNameError, match="Mystery"):
        load_kg(*kg_files(tmp_path, triples, BASE_NAMES, BASE_TEMPLATES))


def test_load_item_entity_map(tmp_path):
    path = tmp_path / "map.tsv"
    write_tsv(path, [("i1", "E1"), ("i2", "E2")])
    assert load_item_entity_map(path) == {"i1": "E1", "i2": "E2"}


def make_log(sequences):
    return InteractionLog(
        users=tuple(sorted(sequences)),
        sequences={u: [(i, t) for t, i in enumerate(seq)] for u, seq in sequences.items()},
    )


def test_split_five_items():
    splits = split_leave_one_out(make_log({"u": ["v1", "v2", "v3", "v4", "v5"]}), max_history=5)
    assert splits.train["u"] == ["v1", "v2", "v3"]
    assert splits.valid["u"] == (["v1", "v2", "v3"], "v4")
    assert splits.test["u"] == (["v2", "v3", "v4"], "v5")


def test_split_minimum_sequence():
    splits = split_leave_one_out(make_log({"u": ["v1", "v2", "v3"]}), max_history=5)
    assert splits.train["u"] == ["v1"]
    assert splits.valid["u"] == (["v1"], "v2")
    assert splits.test["u"] == (["v2"], "v3")


def test_split_truncates_history():
    seq = [f"v{i}" for i in range(1, 10)]
    splits = split_leave_one_out(make_log({"u": seq}), max_history=5)
    assert splits.test["u"] == (["v4", "v5", "v6", "v7", "v8"], "v9")
    assert splits.valid["u"] == (["v3", "v4", "v5", "v6", "v7"], "v8")


def test_split_rejects_short_sequence():
    with pytest.raises(ValueError, match="u2"):
        split_leave_one_out(make_log({"u2": ["v1", "v2"]}))


NEIGHBOR_KG = make_kg(
    [("CastAway", "film.genre", "Adventure"), ("CastAway", "film.starring", "TomHanks")],
    BASE_NAMES,
    BASE_TEMPLATES,
)


def test_neighbors_sorted_pair():
    assert neighbors(NEIGHBOR_KG, "CastAway", 2) == [
        ("film.genre", "Adventure"),
        ("film.starring", "TomHanks"),
    ]


def test_neighbors_degree_zero_and_unknown():
    assert neighbors(NEIGHBOR_KG, "CastAway", 0) == []
    assert neighbors(NEIGHBOR_KG, "NoSuchEntity", 3) == []
    with pytest.raises(ValueError):
        neighbors(NEIGHBOR_KG, "CastAway", -1)


def test_neighbors_eight_triple_fixture():
    # Expected order derived by sorting the eight (relation, tail) pairs by hand.
    triples = [
        ("E", "rel_b", "t1"), ("E", "rel_a", "t4"), ("E", "rel_a", "t2"),
        ("E", "rel_c", "t0"), ("E", "rel_b", "t3"), ("E", "rel_a", "t9"),
        ("E", "rel_c", "t5"), ("E", "rel_b", "t8"),
    ]
    names = {e: e for e in ("E", "t0", "t1", "t2", "t3", "t4", "t5", "t8", "t9")}
    templates = {r: f"[X] {r} [Y]." for r in ("rel_a", "rel_b", "rel_c")}
    kg = make_kg(triples, names, templates)
    assert neighbors(kg, "E", 4) == [
        ("rel_a", "t2"),
        ("rel_a", "t4"),
        ("rel_a", "t9"),
        ("rel_b", "t1"),
    ]


@given(
    adjacency=st.lists(
        st.tuples(st.sampled_from(["r1", "r2", "r3"]), st.text("abcd", min_size=1, max_size=3)),
        max_size=12,
    ),
    d1=st.integers(0, 12),
    d2=st.integers(0, 12),
)
def test_neighbors_prefix_property(adjacency, d1, d2):
    triples = [("E", r, t) for r, t in adjacency if t != "E"]
    names = {"E": "E"}
    names.update({t: t for _, _, t in triples})
    kg = make_kg(triples, names, {r: f"[X] {r} [Y]." for r in ("r1", "r2", "r3")})
    lo, hi = sorted((d1, d2))
    assert neighbors(kg, "E", lo) == neighbors(kg, "E", hi)[:lo]


@st.composite
def logs(draw):
    n_users = draw(st.integers(1, 5))
    sequences = {}
    for u in range(n_users):
        length = draw(st.integers(3, 9))
        sequences[f"u{u}"] = draw(
            st.lists(st.sampled_from([f"i{j}" for j in range(8)]), min_size=length, max_size=length)
        )
    return make_log(sequences)


@given(log=logs(), max_history=st.integers(1, 6))
@settings(max_examples=50)
def test_split_partitions_sequence(log, max_history):
    splits = split_leave_one_out(log, max_history=max_history)
    for u in log.users:
        seq = [i for i, _ in log.sequences[u]]
        assert splits.train[u] + [splits.valid[u][1], splits.test[u][1]] == seq
        window = min(max_history, len(seq) - 2)
        assert len(splits.valid[u][0]) == window
        assert len(splits.test[u][0]) == window
        assert splits.test[u][0] == seq[len(seq) - 1 - window : len(seq) - 1]
