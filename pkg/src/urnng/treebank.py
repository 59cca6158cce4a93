"""Sentences, binary trees, and the action-sequence view of trees.

Span indices are 1-based and inclusive throughout: ``(i, j)`` covers words
``i..j`` and ``(1, T)`` is the whole sentence.  An unlabeled binary tree over
``T`` words is fully determined by its span set, which always contains the
``T`` singletons and the full-sentence span, ``2T - 1`` spans in total.

The same tree can be written as a shift/reduce action sequence: SHIFT pushes
the next word, REDUCE merges the top two stack elements.  ``tree_to_actions``
and ``actions_to_tree`` are exact inverses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

SHIFT = 0
REDUCE = 1

# Surface forms treated as punctuation when scoring parses.  Matches the
# conventional evalb exclusion list used for unlabeled bracketing scores.
DEFAULT_PUNCT = frozenset({
    ",", ":", ";", ".", "!", "?", "...", "--", "-",
    "``", "''", "`", "'", '"', "-LRB-", "-RRB-", "-LCB-", "-RCB-",
})

UNK_TOKEN = "<unk>"
EOS_TOKEN = "</s>"


class DataError(ValueError):
    """Raised when an input file cannot be interpreted as corpus data."""


def count_trees(length: int) -> int:
    """Number of distinct binary trees over ``length`` words (a Catalan number)."""
    if length < 1:
        raise ValueError(f"count_trees: length must be >= 1, got {length}")
    return math.comb(2 * length - 2, length - 1) // length


@dataclass(frozen=True)
class TreeRepr:
    """An unlabeled binary tree as a validated span set."""

    length: int
    spans: frozenset[tuple[int, int]]

    def __post_init__(self):
        t = self.length
        if t < 1:
            raise ValueError(f"tree over {t} words")
        if len(self.spans) != 2 * t - 1:
            raise ValueError(
                f"binary tree over {t} words needs {2 * t - 1} spans, "
                f"got {len(self.spans)}")
        for i in range(1, t + 1):
            if (i, i) not in self.spans:
                raise ValueError(f"missing singleton span ({i}, {i})")
        if (1, t) not in self.spans:
            raise ValueError(f"missing root span (1, {t})")
        for (i, j) in self.spans:
            if i < j:
                self.split(i, j)

    def split(self, i: int, j: int) -> int:
        """Return the k with children ``(i, k)`` and ``(k+1, j)`` in the tree."""
        for k in range(i, j):
            if (i, k) in self.spans and (k + 1, j) in self.spans:
                return k
        raise ValueError(f"span ({i}, {j}) does not split into two children")

    @cached_property
    def actions(self) -> tuple[int, ...]:
        """Shift/reduce linearization; length is always ``2 * length - 1``."""
        out: list[int] = []

        def visit(i: int, j: int) -> None:
            if i == j:
                out.append(SHIFT)
                return
            k = self.split(i, j)
            visit(i, k)
            visit(k + 1, j)
            out.append(REDUCE)

        visit(1, self.length)
        return tuple(out)

    @property
    def wide_spans(self) -> tuple[tuple[int, int], ...]:
        """Spans of width >= 2, sorted; includes the root span."""
        return tuple(sorted(s for s in self.spans if s[0] < s[1]))

    def to_bracketed(self, words: list[str], label: str = "X") -> str:
        if len(words) != self.length:
            raise ValueError(
                f"tree covers {self.length} words, got {len(words)} tokens")

        def render(i: int, j: int) -> str:
            if i == j:
                return f"({label} {words[i - 1]})"
            k = self.split(i, j)
            return f"({label} {render(i, k)} {render(k + 1, j)})"

        return render(1, self.length)


def tree_to_actions(tree: TreeRepr) -> tuple[int, ...]:
    return tree.actions


def actions_to_tree(actions, length: int | None = None) -> TreeRepr:
    """Replay a shift/reduce sequence into a tree, validating as it runs."""
    stack: list[tuple[int, int]] = []
    spans: set[tuple[int, int]] = set()
    pos = 0
    for step, a in enumerate(actions):
        if a == SHIFT:
            pos += 1
            stack.append((pos, pos))
            spans.add((pos, pos))
        elif a == REDUCE:
            if len(stack) < 2:
                raise ValueError(
                    f"REDUCE at step {step} with {len(stack)} stack elements")
            left = stack[-2]
            right = stack[-1]
            stack[-2:] = [(left[0], right[1])]
            spans.add((left[0], right[1]))
        else:
            raise ValueError(f"unknown action {a!r} at step {step}")
    if length is not None and pos != length:
        raise ValueError(f"action sequence shifts {pos} words, expected {length}")
    if len(stack) != 1:
        raise ValueError(f"{len(stack)} unreduced stack elements remain")
    return TreeRepr(pos, frozenset(spans))


def left_branching(length: int) -> TreeRepr:
    spans = {(i, i) for i in range(1, length + 1)}
    spans.update((1, j) for j in range(2, length + 1))
    return TreeRepr(length, frozenset(spans))


def right_branching(length: int) -> TreeRepr:
    spans = {(i, i) for i in range(1, length + 1)}
    spans.update((i, length) for i in range(1, length))
    return TreeRepr(length, frozenset(spans))


def random_tree(length: int, rng: np.random.Generator) -> TreeRepr:
    """Draw a tree uniformly from all binary trees over ``length`` words."""
    spans: set[tuple[int, int]] = set()

    def build(i: int, j: int) -> None:
        spans.add((i, j))
        if i == j:
            return
        weights = np.array([count_trees(k - i + 1) * count_trees(j - k)
                            for k in range(i, j)], dtype=np.float64)
        k = i + rng.choice(j - i, p=weights / weights.sum())
        build(i, k)
        build(k + 1, j)

    build(1, length)
    return TreeRepr(length, frozenset(spans))


# ---------------------------------------------------------------------------
# Vocabulary and plain-text corpora


class Vocabulary:
    """Token/id mapping with reserved unknown and end-of-sentence entries."""

    def __init__(self, tokens: list[str]):
        if tokens[:2] != [UNK_TOKEN, EOS_TOKEN]:
            raise ValueError(
                f"vocabulary must start with {UNK_TOKEN!r}, {EOS_TOKEN!r}")
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("vocabulary contains duplicate tokens")

    unk_id = 0
    eos_id = 1

    @classmethod
    def build(cls, sentences, min_count: int = 2) -> "Vocabulary":
        """Count tokens; those seen fewer than ``min_count`` times map to unk."""
        counts: dict[str, int] = {}
        for sent in sentences:
            for tok in sent:
                if tok in (UNK_TOKEN, EOS_TOKEN):
                    raise DataError(f"reserved token {tok!r} appears in corpus")
                counts[tok] = counts.get(tok, 0) + 1
        kept = sorted((tok for tok, c in counts.items() if c >= min_count),
                      key=lambda tok: (-counts[tok], tok))
        return cls([UNK_TOKEN, EOS_TOKEN] + kept)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, tok: str) -> bool:
        return tok in self.index

    def encode_word(self, tok: str) -> int:
        return self.index.get(tok, self.unk_id)

    def encode(self, toks) -> tuple[int, ...]:
        return tuple(self.encode_word(t) for t in toks)

    def decode(self, ids) -> tuple[str, ...]:
        return tuple(self.tokens[i] for i in ids)


@dataclass(frozen=True)
class Sentence:
    """A tokenized sentence with vocabulary ids and a punctuation mask."""

    words: tuple[str, ...]
    ids: tuple[int, ...]
    punct: tuple[bool, ...]

    def __post_init__(self):
        if not (len(self.words) == len(self.ids) == len(self.punct)):
            raise ValueError("words, ids, and punct must have equal length")
        if not self.words:
            raise ValueError("empty sentence")

    @property
    def length(self) -> int:
        return len(self.words)


def make_sentence(words, vocab: Vocabulary,
                  punct_forms=DEFAULT_PUNCT) -> Sentence:
    words = tuple(words)
    return Sentence(words, vocab.encode(words),
                    tuple(w in punct_forms for w in words))


def _read_text(path) -> str:
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as err:
        raise DataError(f"cannot read {path}: {err}") from err


def read_tokenized(path) -> list[list[str]]:
    """Whitespace-tokenized sentences, one per non-empty line."""
    out = [line.split() for line in _read_text(path).splitlines() if line.split()]
    if not out:
        raise DataError(f"{path}: no usable sentences")
    return out


def read_corpus(path, vocab: Vocabulary,
                punct_forms=DEFAULT_PUNCT) -> list[Sentence]:
    return [make_sentence(toks, vocab, punct_forms)
            for toks in read_tokenized(path)]


# ---------------------------------------------------------------------------
# Labeled bracketed trees


@dataclass(frozen=True)
class ParseNode:
    """A node of a labeled constituency tree; preterminals carry the word."""

    label: str
    children: tuple["ParseNode", ...] = ()
    word: str | None = None

    @property
    def is_preterminal(self) -> bool:
        return self.word is not None

    def leaves(self) -> list[str]:
        if self.is_preterminal:
            return [self.word]
        out: list[str] = []
        for child in self.children:
            out.extend(child.leaves())
        return out

    def constituents(self) -> list[tuple[int, int, str]]:
        """(i, j, label) for every non-preterminal node, preorder."""
        out: list[tuple[int, int, str]] = []

        def visit(node: "ParseNode", start: int) -> int:
            if node.is_preterminal:
                return start + 1
            pos = start
            for child in node.children:
                pos = visit(child, pos)
            out.append((start + 1, pos, node.label))
            return pos

        visit(self, 0)
        return sorted(out)


def parse_sexprs(text: str, source: str = "<string>") -> list[ParseNode]:
    """Parse one or more bracketed trees from ``text``."""
    tokens: list[str] = []
    for raw in text.replace("(", " ( ").replace(")", " ) ").split():
        tokens.append(raw)
    trees: list[ParseNode] = []
    pos = 0

    def parse_node() -> ParseNode:
        nonlocal pos
        if tokens[pos] != "(":
            raise DataError(f"{source}: expected '(' at token {pos}, "
                            f"got {tokens[pos]!r}")
        pos += 1
        label = ""
        if pos < len(tokens) and tokens[pos] not in ("(", ")"):
            label = tokens[pos]
            pos += 1
        children: list[ParseNode] = []
        words: list[str] = []
        while pos < len(tokens) and tokens[pos] != ")":
            if tokens[pos] == "(":
                children.append(parse_node())
            else:
                words.append(tokens[pos])
                pos += 1
        if pos >= len(tokens):
            raise DataError(f"{source}: unbalanced parentheses (missing ')')")
        pos += 1
        if words and children:
            raise DataError(
                f"{source}: node {label!r} mixes words and subtrees")
        if words:
            if len(words) != 1:
                raise DataError(
                    f"{source}: preterminal {label!r} has {len(words)} words")
            return ParseNode(label, (), words[0])
        if not children:
            raise DataError(f"{source}: empty node {label!r}")
        if label == "" and len(children) == 1:
            return children[0]
        return ParseNode(label or "TOP", tuple(children))

    while pos < len(tokens):
        if tokens[pos] == ")":
            raise DataError(f"{source}: unbalanced parentheses (stray ')')")
        trees.append(parse_node())
    if not trees:
        raise DataError(f"{source}: no trees found")
    return trees


def read_trees(path) -> list[ParseNode]:
    return parse_sexprs(_read_text(path), source=str(path))


def read_bracketed(path, vocab: Vocabulary,
                   punct_forms=DEFAULT_PUNCT) -> list[tuple[Sentence, ParseNode]]:
    """Load labeled trees plus the sentences they yield."""
    out = []
    for tree in read_trees(path):
        leaves = tree.leaves()
        if not leaves:
            raise DataError(f"{path}: tree with no leaves")
        out.append((make_sentence(leaves, vocab, punct_forms), tree))
    return out


def binarize_right(tree: ParseNode) -> TreeRepr:
    """Collapse unary chains and right-binarize n-ary nodes into a TreeRepr."""
    length = len(tree.leaves())
    spans: set[tuple[int, int]] = {(i, i) for i in range(1, length + 1)}

    def visit(node: ParseNode, start: int) -> int:
        if node.is_preterminal:
            return start + 1
        child_starts: list[int] = []
        pos = start
        for child in node.children:
            child_starts.append(pos + 1)
            pos = visit(child, pos)
        end = pos
        if end > start + 1:
            spans.add((start + 1, end))
            # Grouping children 2..n, 3..n, ... reproduces right binarization.
            for s in child_starts[1:-1]:
                spans.add((s, end))
        return pos

    visit(tree, 0)
    return TreeRepr(length, frozenset(spans))
