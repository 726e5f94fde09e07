"""Interaction-log and knowledge-graph ingestion.

File formats (UTF-8 TSV, no headers):
  interactions   user_id <TAB> item_id <TAB> timestamp
  triples        head_entity <TAB> relation <TAB> tail_entity
  entity names   entity_id <TAB> display_name
  item->entity   item_id <TAB> entity_id

All structures are immutable after construction and safe to share
across threads.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from .errors import EmptyCorpusError, MissingNameError, MissingTemplateError, ParseError
from .prompts import RelationTemplate, load_relation_templates

# Leave-one-out needs at least one training item besides the two held out.
MIN_SEQUENCE_LEN = 3


@dataclass(frozen=True)
class InteractionLog:
    """Per-user, time-ordered item sequences."""

    users: tuple[str, ...]
    sequences: dict[str, list[tuple[str, int]]]

    def items(self) -> list[str]:
        """Sorted item vocabulary over all sequences."""
        seen = {item for seq in self.sequences.values() for item, _ in seq}
        return sorted(seen)

    def interaction_count(self) -> int:
        return sum(len(seq) for seq in self.sequences.values())


@dataclass
class KnowledgeGraph:
    """Triple store with display names, templates, and sorted adjacency.

    Adjacency lists are sorted ascending by (relation, tail) so that
    degree-capped truncation is deterministic across runs.  Items with
    no KG link resolve to an entity with zero triples.
    """

    triples: frozenset[tuple[str, str, str]]
    names: dict[str, str]
    adjacency: dict[str, list[tuple[str, str]]]
    templates: dict[str, RelationTemplate]
    item_entities: dict[str, str] = field(default_factory=dict)

    def entity_for_item(self, item: str) -> str:
        return self.item_entities.get(item, item)

    def name_of(self, entity: str) -> str:
        return self.names.get(entity, entity)


@dataclass(frozen=True)
class SplitSet:
    """Leave-one-out split: last item is test, second-to-last is validation."""

    train: dict[str, list[str]]
    valid: dict[str, tuple[list[str], str]]
    test: dict[str, tuple[list[str], str]]


def _parse_tsv(path, n_cols: int):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != n_cols:
                raise ParseError(path, line_no, f"expected {n_cols} tab-separated fields, got {len(parts)}")
            rows.append(parts)
    return rows


def load_interactions(path, min_user_count: int = 5, min_item_count: int = 5) -> InteractionLog:
    """Load (user, item, timestamp) rows and apply iterative count filtering.

    Users and items are dropped until every surviving user has at least
    ``max(min_user_count, 3)`` interactions and every surviving item
    appears at least ``min_item_count`` times; removing one side can push
    the other below threshold, so the filter runs to a fixed point.
    Counts are global over the log, not per-user.  Sequences are sorted
    by timestamp with ties broken by input order.
    """
    raw = _parse_tsv(path, 3)
    rows = []
    for line_no, (user, item, ts) in enumerate(raw, start=1):
        try:
            ts_int = int(ts)
        except ValueError:
            raise ParseError(path, line_no, f"timestamp {ts!r} is not an integer") from None
        rows.append((user, item, ts_int))

    user_min = max(min_user_count, MIN_SEQUENCE_LEN)
    while True:
        user_counts = Counter(u for u, _, _ in rows)
        item_counts = Counter(i for _, i, _ in rows)
        kept = [
            (u, i, t)
            for u, i, t in rows
            if user_counts[u] >= user_min and item_counts[i] >= min_item_count
        ]
        if len(kept) == len(rows):
            break
        rows = kept

    if not rows:
        raise EmptyCorpusError(
            f"no interactions survive filtering (min_user_count={min_user_count}, "
            f"min_item_count={min_item_count})"
        )

    sequences: dict[str, list[tuple[str, int]]] = {}
    for user, item, ts in rows:
        sequences.setdefault(user, []).append((item, ts))
    for user in sequences:
        sequences[user].sort(key=lambda pair: pair[1])  # stable: ties keep input order
    return InteractionLog(users=tuple(sorted(sequences)), sequences=sequences)


def load_kg(triples_path, names_path, templates_path) -> KnowledgeGraph:
    """Load triples, entity names, and relation templates into one store.

    Every relation appearing in the triples must have a template and
    every entity must have a name; self-loop triples are dropped and
    duplicates are deduplicated.
    """
    templates = load_relation_templates(templates_path)
    names = {entity: name for entity, name in _parse_tsv(names_path, 2)}

    triples: set[tuple[str, str, str]] = set()
    for head, relation, tail in _parse_tsv(triples_path, 3):
        if head == tail:
            continue
        if relation not in templates:
            raise MissingTemplateError(relation)
        for entity in (head, tail):
            if entity not in names:
                raise MissingNameError(entity)
        triples.add((head, relation, tail))

    adjacency: dict[str, list[tuple[str, str]]] = {}
    for head, relation, tail in triples:
        adjacency.setdefault(head, []).append((relation, tail))
    for head in adjacency:
        adjacency[head].sort()

    return KnowledgeGraph(
        triples=frozenset(triples), names=names, adjacency=adjacency, templates=templates
    )


def load_item_entity_map(path) -> dict[str, str]:
    return {item: entity for item, entity in _parse_tsv(path, 2)}


def split_leave_one_out(log: InteractionLog, max_history: int = 5) -> SplitSet:
    """Split each sequence into train prefix, validation pair, and test pair.

    For a length-L sequence the test target is item L, the validation
    target is item L-1, and items 1..L-2 form the training prefix.
    Validation and test histories share the window length
    min(max_history, L-2), the most recent items before each target.
    """
    train: dict[str, list[str]] = {}
    valid: dict[str, tuple[list[str], str]] = {}
    test: dict[str, tuple[list[str], str]] = {}
    for user in log.users:
        seq = [item for item, _ in log.sequences[user]]
        length = len(seq)
        if length < MIN_SEQUENCE_LEN:
            raise ValueError(f"user {user!r} has sequence length {length} < {MIN_SEQUENCE_LEN}")
        window = min(max_history, length - 2)
        train[user] = seq[: length - 2]
        valid[user] = (seq[length - 2 - window : length - 2], seq[length - 2])
        test[user] = (seq[length - 1 - window : length - 1], seq[length - 1])
    return SplitSet(train=train, valid=valid, test=test)


def neighbors(kg: KnowledgeGraph, entity: str, degree: int) -> list[tuple[str, str]]:
    """First `degree` entries of the entity's sorted adjacency list.

    Unknown entities yield an empty list, which is how KG-unlinked items
    surface downstream.
    """
    if degree < 0:
        raise ValueError(f"degree must be >= 0, got {degree}")
    return kg.adjacency.get(entity, [])[:degree]
