"""kprompt: knowledge-prompt compilation and tree-masked toy recommender."""

__version__ = "0.1.0"
