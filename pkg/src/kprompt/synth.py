"""Synthetic corpora with planted KG-dependent sequence rules.

Two rule families separate one-hop from two-hop signal at desk scale:

  shared-attr-next   the next item shares the current item's attribute;
                     the attribute entity is one KG hop from the item.
  attr-chain-2hop    the next item's attribute belongs to the same group
                     as the current item's attribute; the group entity
                     sits two hops out, so prompts need hops >= 2 to
                     surface it.

Each item carries exactly one `has_attr` triple (plus one `in_group`
triple per attribute under the chain rule).  Sequences are fixed at
length 8 so leave-one-out leaves the default 5-item history.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import InteractionLog, KnowledgeGraph
from .prompts import (
    DEFAULT_MPP_TEMPLATES,
    RelationTemplate,
    item_surface,
    save_mpp_templates,
    save_relation_templates,
)

RULE_SHARED_ATTR = "shared-attr-next"
RULE_ATTR_CHAIN = "attr-chain-2hop"
RULES = (RULE_SHARED_ATTR, RULE_ATTR_CHAIN)

HAS_ATTR = "has_attr"
IN_GROUP = "in_group"

RELATION_TEMPLATES = {
    HAS_ATTR: RelationTemplate(HAS_ATTR, "[X] has attribute [Y]."),
    IN_GROUP: RelationTemplate(IN_GROUP, "[X] belongs to group [Y]."),
}

# Attributes per group under the chain rule; groups pool several sparse
# attributes into a dense two-hop signal.
ATTRS_PER_GROUP = 5


@dataclass(frozen=True)
class SynthConfig:
    n_users: int
    n_items: int
    n_attrs: int
    rule: str
    noise: float
    seed: int
    seq_len: int = 8

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"rule must be one of {RULES}, got {self.rule!r}")
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError(f"noise must be in [0, 1], got {self.noise}")
        if self.n_items < 2 * self.n_attrs:
            raise ValueError(
                f"n_items must be >= 2 * n_attrs, got {self.n_items} < {2 * self.n_attrs}"
            )
        if self.n_users < 1 or self.n_attrs < 1:
            raise ValueError("n_users and n_attrs must be >= 1")
        if self.seq_len < 3:
            raise ValueError(f"seq_len must be >= 3, got {self.seq_len}")

    @property
    def n_groups(self) -> int:
        return max(2, self.n_attrs // ATTRS_PER_GROUP)


def generate(cfg: SynthConfig):
    """Seed-deterministic (InteractionLog, KnowledgeGraph, relation templates)."""
    rng = np.random.default_rng(cfg.seed)
    items = [f"i{idx:04d}" for idx in range(cfg.n_items)]
    attrs = [f"attr_{idx:03d}" for idx in range(cfg.n_attrs)]
    groups = [f"group_{idx:02d}" for idx in range(cfg.n_groups)]

    # Balanced random attribute assignment: shuffle, then round-robin.
    perm = rng.permutation(cfg.n_items)
    attr_of = {items[perm[pos]]: attrs[pos % cfg.n_attrs] for pos in range(cfg.n_items)}
    group_of = {attrs[idx]: groups[idx % cfg.n_groups] for idx in range(cfg.n_attrs)}

    if cfg.rule == RULE_SHARED_ATTR:
        class_of = attr_of
    else:
        class_of = {item: group_of[attr_of[item]] for item in items}
    candidates: dict[str, list[str]] = {}
    for item in items:
        candidates.setdefault(class_of[item], []).append(item)

    sequences: dict[str, list[tuple[str, int]]] = {}
    for user_idx in range(cfg.n_users):
        user = f"u{user_idx:04d}"
        current = items[int(rng.integers(cfg.n_items))]
        seq = [(current, 0)]
        for t in range(1, cfg.seq_len):
            if rng.random() < cfg.noise:
                current = items[int(rng.integers(cfg.n_items))]
            else:
                pool = candidates[class_of[current]]
                current = pool[int(rng.integers(len(pool)))]
            seq.append((current, t))
        sequences[user] = seq
    log = InteractionLog(users=tuple(sorted(sequences)), sequences=sequences)

    triples = {(item, HAS_ATTR, attr_of[item]) for item in items}
    names = {attr: attr for attr in attrs}
    # Item entities reuse the atomic item surface form so triple prompts
    # and history mentions share one token.
    names.update({item: item_surface(item) for item in items})
    templates = {HAS_ATTR: RELATION_TEMPLATES[HAS_ATTR]}
    if cfg.rule == RULE_ATTR_CHAIN:
        triples |= {(attr, IN_GROUP, group_of[attr]) for attr in attrs}
        names.update({group: group for group in groups})
        templates[IN_GROUP] = RELATION_TEMPLATES[IN_GROUP]

    adjacency: dict[str, list[tuple[str, str]]] = {}
    for head, relation, tail in triples:
        adjacency.setdefault(head, []).append((relation, tail))
    for head in adjacency:
        adjacency[head].sort()

    kg = KnowledgeGraph(
        triples=frozenset(triples),
        names=names,
        adjacency=adjacency,
        templates=templates,
        item_entities={item: item for item in items},
    )
    return log, kg, templates


def write_dataset(log: InteractionLog, kg: KnowledgeGraph, out_dir, mpp_templates=None) -> None:
    """Write the TSV/JSON files the corpus loaders read back."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "interactions.tsv", "w", encoding="utf-8") as fh:
        for user in log.users:
            for item, ts in log.sequences[user]:
                fh.write(f"{user}\t{item}\t{ts}\n")
    with open(out / "triples.tsv", "w", encoding="utf-8") as fh:
        for head, relation, tail in sorted(kg.triples):
            fh.write(f"{head}\t{relation}\t{tail}\n")
    with open(out / "entity_names.tsv", "w", encoding="utf-8") as fh:
        for entity, name in sorted(kg.names.items()):
            fh.write(f"{entity}\t{name}\n")
    with open(out / "item_entities.tsv", "w", encoding="utf-8") as fh:
        for item, entity in sorted(kg.item_entities.items()):
            fh.write(f"{item}\t{entity}\n")
    save_relation_templates(kg.templates, out / "relation_templates.json")
    save_mpp_templates(mpp_templates or DEFAULT_MPP_TEMPLATES, out / "mpp_templates.json")
