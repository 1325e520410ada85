"""Prefix trie over token-id sequences."""

from __future__ import annotations

from typing import Iterable, Iterator, Sequence


class TrieNode:
    __slots__ = ("children", "terminal")

    def __init__(self) -> None:
        self.children: dict[int, TrieNode] = {}
        self.terminal = False


class PrefixTrie:
    """Acceptor for a finite set of token sequences.

    ``allowed_next(prefix)`` gives the exact set of tokens that extend
    ``prefix`` towards some inserted sequence; it is empty when ``prefix``
    is not a prefix of anything inserted.
    """

    def __init__(self, sequences: Iterable[Sequence[int]] = ()):
        self.root = TrieNode()
        self._size = 0
        for s in sequences:
            self.insert(s)

    def __len__(self) -> int:
        return self._size

    def insert(self, seq: Sequence[int]) -> None:
        node = self.root
        for t in seq:
            node = node.children.setdefault(t, TrieNode())
        if not node.terminal:
            node.terminal = True
            self._size += 1

    def node(self, prefix: Sequence[int]) -> TrieNode | None:
        node = self.root
        for t in prefix:
            node = node.children.get(t)
            if node is None:
                return None
        return node

    def accepts(self, seq: Sequence[int]) -> bool:
        node = self.node(seq)
        return node is not None and node.terminal

    def allowed_next(self, prefix: Sequence[int]) -> set[int]:
        node = self.node(prefix)
        return set(node.children) if node is not None else set()

    def __iter__(self) -> Iterator[tuple[int, ...]]:
        stack: list[tuple[TrieNode, tuple[int, ...]]] = [(self.root, ())]
        while stack:
            node, path = stack.pop()
            if node.terminal:
                yield path
            for t in sorted(node.children, reverse=True):
                stack.append((node.children[t], path + (t,)))
