import numpy as np
import pytest

from kprompt.corpus import KnowledgeGraph
from kprompt.ktree import build_tree
from kprompt.pipeline import build_vocabulary
from kprompt.prompts import (
    DEFAULT_MPP_TEMPLATES,
    MppTemplate,
    RelationTemplate,
    Vocabulary,
    item_surface,
    render_mpp,
    tokenize,
    user_surface,
)

WATCH_TEMPLATE = MppTemplate(
    1, "User {user} has previously watched {history}, and is going to watch {mask} next."
)


def make_kg(triples, names, templates, item_entities=None):
    adjacency = {}
    for head, relation, tail in triples:
        adjacency.setdefault(head, []).append((relation, tail))
    for head in adjacency:
        adjacency[head].sort()
    return KnowledgeGraph(
        triples=frozenset(triples),
        names=dict(names),
        adjacency=adjacency,
        templates={rel: RelationTemplate(rel, pat) for rel, pat in templates.items()},
        item_entities=dict(item_entities or {}),
    )


@pytest.fixture
def movie_kg():
    """Two-subtree KG: Cast Away expands two hops, B's prompts are leaves."""
    triples = [
        ("CastAway", "film.genre", "Adventure"),
        ("CastAway", "film.starring", "TomHanks"),
        ("Adventure", "genre.example", "Jumanji"),
        ("Adventure", "genre.sibling", "Action"),
        ("TomHanks", "person.born", "Concord"),
        ("B", "film.genre", "Comedy"),
        ("B", "film.starring", "MegRyan"),
    ]
    names = {
        "CastAway": "Cast Away",
        "Adventure": "Adventure",
        "TomHanks": "Tom Hanks",
        "Jumanji": "Jumanji",
        "Action": "Action",
        "Concord": "Concord",
        "B": "Sleepless",
        "Comedy": "Comedy",
        "MegRyan": "Meg Ryan",
    }
    templates = {
        "film.genre": "The genre of [X] is [Y].",
        "film.starring": "[X] starring [Y].",
        "genre.example": "An example of [X] is [Y].",
        "genre.sibling": "[X] is close to [Y].",
        "person.born": "[X] was born in [Y].",
    }
    item_entities = {"castaway": "CastAway", "sleepless": "B"}
    return make_kg(triples, names, templates, item_entities)


@pytest.fixture
def movie_vocab(movie_kg):
    texts = ["User has previously watched , and is going to watch next ."]
    texts += list(movie_kg.names.values())
    texts += [p.pattern.replace("[X]", " ").replace("[Y]", " ") for p in movie_kg.templates.values()]
    texts += [user_surface("u1"), item_surface("castaway"), item_surface("sleepless")]
    return Vocabulary.build(texts)


@pytest.fixture
def fig_tree(movie_kg, movie_vocab):
    """The two-item, two-hop tree used by the visibility fixtures.

    Node layout: 0 root, 1-2 item mentions, 3-4 Cast Away's hop-1 prompts
    (AA1 genre, AA2 starring), 5-6 B's hop-1 prompts, 7-8 AA1's hop-2
    children, 9 AA2's hop-2 child.
    """
    history = ["castaway", "sleepless"]
    mpp = render_mpp(WATCH_TEMPLATE, "u1", history)
    mpp_tokens = tokenize(mpp.text, movie_vocab)
    tree, fused = build_tree(
        mpp, mpp_tokens, movie_kg, history, hops=2, degree=2, vocab=movie_vocab
    )
    return tree, fused


_RANDOM_RELATIONS = {
    "made": "[X] made [Y].",
    "kind": "The kind of [X] is [Y].",
    "linked": "[X] is closely linked to the work [Y].",
}


def random_tree_case(seed):
    """Random KG + history -> (tree, fused, vocab), sized for oracle sweeps.

    Draws stay within history <= 5, hops <= 3, degree <= 5; adjacency is
    sparse (0-2 neighbors) so token counts stay oracle-friendly.
    """
    rng = np.random.default_rng(seed)
    n_entities = int(rng.integers(4, 12))
    entities = [f"E{i}" for i in range(n_entities)]
    relations = sorted(_RANDOM_RELATIONS)
    triples = set()
    for head in entities:
        for _ in range(int(rng.integers(0, 3))):
            tail = entities[int(rng.integers(n_entities))]
            if tail != head:
                triples.add((head, relations[int(rng.integers(len(relations)))], tail))
    names = {}
    for idx, entity in enumerate(entities):
        names[entity] = f"thing {idx}" if rng.random() < 0.4 else f"thing{idx}"

    history_len = int(rng.integers(1, 6))
    items = [f"m{i}" for i in range(history_len)]
    item_entities = {
        item: entities[int(rng.integers(n_entities))] for item in items
    }
    kg = make_kg(triples, names, _RANDOM_RELATIONS, item_entities)

    hops = int(rng.integers(0, 4))
    degree = int(rng.integers(1, 6))
    template = DEFAULT_MPP_TEMPLATES[int(rng.integers(3))]
    user = f"u{seed}"

    texts = list(names.values())
    texts += [p.replace("[X]", " ").replace("[Y]", " ") for p in _RANDOM_RELATIONS.values()]
    texts += [user_surface(user)] + [item_surface(i) for i in items]
    stripped = template.pattern
    for placeholder in ("{user}", "{history}", "{mask}"):
        stripped = stripped.replace(placeholder, " ")
    texts.append(stripped)
    vocab = Vocabulary.build(texts)

    mpp = render_mpp(template, user, items)
    tree, fused = build_tree(
        mpp, tokenize(mpp.text, vocab), kg, items, hops=hops, degree=degree, vocab=vocab
    )
    return tree, fused, vocab
