"""Compile stage: corpus + KG + templates -> per-sample records.

Training gets one record per split point inside each user's prefix;
validation and test get one record per user.  The vocabulary covers the
whole catalog (items in the log or the item-entity map), template words,
and entity names, so any item is rankable even if unseen in training.
"""

from __future__ import annotations

from dataclasses import dataclass

from .corpus import InteractionLog, KnowledgeGraph, SplitSet
from .errors import BudgetExceededError
from .ktree import build_tree
from .maskgen import build_mask
from .prompts import (
    MppTemplate,
    Vocabulary,
    item_surface,
    render_mpp,
    tokenize,
    user_surface,
)
from .records import CompiledSample, node_table


@dataclass(frozen=True)
class CompileSettings:
    template: MppTemplate
    hops: int = 1
    degree: int = 4
    max_history: int = 5
    max_input_tokens: int = 512


def catalog_items(log: InteractionLog, kg: KnowledgeGraph) -> list[str]:
    return sorted(set(log.items()) | set(kg.item_entities))


def build_vocabulary(
    log: InteractionLog, kg: KnowledgeGraph, mpp_templates: list[MppTemplate]
) -> Vocabulary:
    texts: list[str] = []
    for template in mpp_templates:
        stripped = template.pattern
        for placeholder in ("{user}", "{history}", "{mask}"):
            stripped = stripped.replace(placeholder, " ")
        texts.append(stripped)
        texts.append(template.history_separator)
    for rel_template in kg.templates.values():
        texts.append(rel_template.pattern.replace("[X]", " ").replace("[Y]", " "))
    texts.extend(kg.names.values())
    texts.extend(user_surface(user) for user in log.users)
    texts.extend(item_surface(item) for item in catalog_items(log, kg))
    return Vocabulary.build(texts)


def compile_sample(
    user: str,
    history: list[str],
    target: str,
    split: str,
    kg: KnowledgeGraph,
    vocab: Vocabulary,
    settings: CompileSettings,
) -> CompiledSample:
    mpp = render_mpp(settings.template, user, history)
    mpp_tokens = tokenize(mpp.text, vocab)
    tree, fused = build_tree(
        mpp,
        mpp_tokens,
        kg,
        history,
        hops=settings.hops,
        degree=settings.degree,
        vocab=vocab,
        max_input_tokens=settings.max_input_tokens,
    )
    mask = build_mask(tree, len(fused))
    return CompiledSample(
        user=user,
        split=split,
        history=list(history),
        target_item=target,
        target_token_id=vocab.id_of(item_surface(target)),
        template_id=settings.template.id,
        hops=settings.hops,
        degree=settings.degree,
        token_ids=list(fused.ids),
        mask_token_index=tree.mask_token_index,
        nodes=node_table(tree),
        mask=mask,
    )


def training_windows(prefix: list[str], max_history: int):
    """(history, target) pairs over a train prefix, most recent items kept."""
    for t in range(1, len(prefix)):
        yield prefix[max(0, t - max_history) : t], prefix[t]


def compile_splits(
    splits: SplitSet, kg: KnowledgeGraph, vocab: Vocabulary, settings: CompileSettings
) -> dict[str, list[CompiledSample]]:
    compiled: dict[str, list[CompiledSample]] = {"train": [], "valid": [], "test": []}

    def compile_or_name(user, history, target, split):
        try:
            return compile_sample(user, history, target, split, kg, vocab, settings)
        except BudgetExceededError as err:
            raise BudgetExceededError(
                err.required, err.available, context=f"user {user!r}, {split} sample"
            ) from None

    for user in sorted(splits.train):
        for history, target in training_windows(splits.train[user], settings.max_history):
            compiled["train"].append(compile_or_name(user, history, target, "train"))
    for split_name, table in (("valid", splits.valid), ("test", splits.test)):
        for user in sorted(table):
            history, target = table[user]
            compiled[split_name].append(compile_or_name(user, list(history), target, split_name))
    return compiled
