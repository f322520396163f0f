"""Synthetic corpora from a weighted context-free grammar, batching, and
minimal-pair generation.

Grammar files are UTF-8 text::

    # comment
    S -> NP VP @ 1.0
    agree: number V_SG V_PL

Ids 0 and 1 are reserved for padding and the sentence separator.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

PAD_ID = 0
SEP_ID = 1
PAD, SEP = "<pad>", "<sep>"
MAX_DEPTH = 200


class GrammarError(ValueError):
    pass


@dataclass(frozen=True)
class AgreementRule:
    feature: str
    left: str
    right: str

    @property
    def tag(self) -> str:
        return f"{self.feature}:{self.left}/{self.right}"


@dataclass
class Grammar:
    start: str
    productions: dict[str, list[tuple[tuple[str, ...], float]]]
    agreements: list[AgreementRule]
    terminals: list[str]
    source: str = ""

    @property
    def vocab(self) -> list[str]:
        return [PAD, SEP] + self.terminals

    @property
    def token_to_id(self) -> dict[str, int]:
        return {tok: i for i, tok in enumerate(self.vocab)}

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.source.encode("utf-8")).hexdigest()

    def terminals_of(self, rule_side: str) -> list[str]:
        return [rhs[0] for rhs, _ in self.productions[rule_side]]


def parse_grammar(text: str) -> Grammar:
    productions: dict[str, list[tuple[tuple[str, ...], float]]] = {}
    agreements: list[AgreementRule] = []
    start = None
    canonical: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        canonical.append(line)
        if line.startswith("agree:"):
            parts = line[len("agree:"):].split()
            if len(parts) != 3:
                raise GrammarError(f"line {lineno}: expected 'agree: FEATURE NONTERM NONTERM'")
            agreements.append(AgreementRule(*parts))
            continue
        if "->" not in line or "@" not in line:
            raise GrammarError(f"line {lineno}: expected 'LHS -> RHS... @ weight', got {raw!r}")
        lhs, rest = (s.strip() for s in line.split("->", 1))
        rhs_text, weight_text = rest.rsplit("@", 1)
        rhs = tuple(rhs_text.split())
        if not lhs or len(lhs.split()) != 1:
            raise GrammarError(f"line {lineno}: bad left-hand side {lhs!r}")
        if not rhs:
            raise GrammarError(f"line {lineno}: empty right-hand side for {lhs}")
        try:
            weight = float(weight_text)
        except ValueError:
            raise GrammarError(f"line {lineno}: bad weight {weight_text.strip()!r}") from None
        if not weight > 0:
            raise GrammarError(f"line {lineno}: weight must be positive in '{lhs} -> {' '.join(rhs)}'")
        start = start or lhs
        productions.setdefault(lhs, []).append((rhs, weight))
    if start is None:
        raise GrammarError("grammar has no productions")

    terminals: list[str] = []
    for prods in productions.values():
        for rhs, _ in prods:
            for sym in rhs:
                if sym not in productions and sym not in terminals:
                    terminals.append(sym)
    if PAD in terminals or SEP in terminals:
        raise GrammarError("reserved tokens may not appear as terminals")
    grammar = Grammar(start, productions, agreements, terminals, "\n".join(canonical))
    validate_grammar(grammar)
    return grammar


def load_grammar(path: Optional[str | Path] = None) -> Grammar:
    """Parse a grammar file; ``None`` or ``"default"`` loads the bundled grammar."""
    if path is None or str(path) == "default":
        text = resources.files("revkd").joinpath("grammars/default.cfg").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return parse_grammar(text)


def validate_grammar(g: Grammar) -> None:
    for lhs, prods in g.productions.items():
        total = sum(w for _, w in prods)
        if abs(total - 1.0) > 1e-12:
            raise GrammarError(f"probabilities for {lhs} sum to {total!r}, not 1")

    productive: set[str] = set()
    changed = True
    while changed:
        changed = False
        for lhs, prods in g.productions.items():
            if lhs in productive:
                continue
            if any(all(s in productive or s not in g.productions for s in rhs) for rhs, _ in prods):
                productive.add(lhs)
                changed = True
    dead = [lhs for lhs in g.productions if lhs not in productive]
    if dead:
        raise GrammarError(f"nonterminal {dead[0]} cannot derive a terminal string")

    # Expected number of child nonterminals must shrink for derivations to terminate.
    names = list(g.productions)
    index = {n: i for i, n in enumerate(names)}
    mean = np.zeros((len(names), len(names)))
    for lhs, prods in g.productions.items():
        for rhs, w in prods:
            for sym in rhs:
                if sym in index:
                    mean[index[lhs], index[sym]] += w
    if len(names) and max(abs(np.linalg.eigvals(mean))) >= 1.0 - 1e-12:
        raise GrammarError("grammar is not consistent: derivations do not terminate with probability 1")

    for rule in g.agreements:
        for nt in (rule.left, rule.right):
            if nt not in g.productions:
                raise GrammarError(f"agreement rule names unknown nonterminal {nt}")
            if any(len(rhs) != 1 or rhs[0] in g.productions for rhs, _ in g.productions[nt]):
                raise GrammarError(f"agreement nonterminal {nt} must rewrite to single terminals")
        if len(g.productions[rule.left]) != len(g.productions[rule.right]):
            raise GrammarError(f"agreement pair {rule.left}/{rule.right} has unequal terminal counts")


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

class _Sampler:
    def __init__(self, g: Grammar):
        self.g = g
        self.choices = {
            lhs: (tuple(rhs for rhs, _ in prods), np.cumsum([w for _, w in prods]))
            for lhs, prods in g.productions.items()
        }

    def derive(self, rng: np.random.Generator) -> tuple[list[str], list[str]]:
        """Terminal string plus the nonterminal that emitted each terminal."""
        words: list[str] = []
        parents: list[str] = []
        stack: list[tuple[str, str, int]] = [(self.g.start, "", 0)]
        while stack:
            sym, parent, depth = stack.pop()
            if sym not in self.choices:
                words.append(sym)
                parents.append(parent)
                continue
            if depth > MAX_DEPTH:
                raise GrammarError(f"derivation exceeded depth {MAX_DEPTH}")
            options, cum = self.choices[sym]
            k = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
            rhs = options[min(k, len(options) - 1)]
            stack.extend((s, sym, depth + 1) for s in reversed(rhs))
        return words, parents


@dataclass
class Corpus:
    tokens: np.ndarray
    vocab: list[str]
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.tokens.size)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.vocab[i] for i in ids]


def generate_corpus(grammar: Grammar, seed: int, n_tokens: int) -> Corpus:
    """Concatenated independent derivations, each followed by the separator."""
    if n_tokens <= 0:
        raise ValueError("n_tokens must be positive")
    validate_grammar(grammar)
    rng = np.random.default_rng(seed)
    sampler = _Sampler(grammar)
    ids = grammar.token_to_id
    out: list[int] = []
    while len(out) < n_tokens:
        words, _ = sampler.derive(rng)
        out.extend(ids[w] for w in words)
        out.append(SEP_ID)
    provenance = {"grammar_sha256": grammar.digest, "seed": int(seed), "n_tokens": int(n_tokens)}
    return Corpus(np.asarray(out[:n_tokens], dtype=np.int64), grammar.vocab, provenance)


def regenerate(grammar: Grammar, provenance: dict) -> Corpus:
    if provenance.get("grammar_sha256") != grammar.digest:
        raise ValueError("grammar does not match the corpus provenance")
    return generate_corpus(grammar, provenance["seed"], provenance["n_tokens"])


def sentences(corpus: Corpus) -> list[tuple[int, ...]]:
    """Complete separator-terminated sentences (the truncated tail is dropped)."""
    out, cur = [], []
    for t in corpus.tokens.tolist():
        if t == SEP_ID:
            out.append(tuple(cur))
            cur = []
        else:
            cur.append(t)
    return out


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    targets: np.ndarray
    windows: Optional[np.ndarray] = None  # source window indices, when known

    @property
    def shape(self) -> tuple[int, int]:
        return self.inputs.shape


def corpus_windows(corpus, seq_len: int) -> np.ndarray:
    """All non-overlapping windows of ``seq_len + 1`` tokens, in corpus order."""
    tokens = corpus.tokens if isinstance(corpus, Corpus) else np.asarray(corpus, dtype=np.int64)
    width = seq_len + 1
    n_windows = tokens.size // width
    return tokens[: n_windows * width].reshape(n_windows, width)


def make_batches(corpus, batch_size: int, seq_len: int, seed: int) -> list[Batch]:
    """Shuffled non-overlapping windows of ``seq_len + 1`` tokens, grouped into batches.

    Window order depends only on the window count and ``seed``, so halving
    ``batch_size`` splits each batch into two consecutive halves.
    """
    if batch_size < 1 or seq_len < 1:
        raise ValueError("batch_size and seq_len must be positive")
    windows = corpus_windows(corpus, seq_len)
    n_windows = windows.shape[0]
    if n_windows < batch_size:
        raise ValueError(
            f"corpus of {len(corpus)} tokens is too small for one batch of {batch_size}x{seq_len}"
            f" (needs {batch_size * (seq_len + 1)})"
        )
    order = np.random.default_rng(seed).permutation(n_windows)
    batches = []
    for b in range(n_windows // batch_size):
        idx = order[b * batch_size:(b + 1) * batch_size]
        w = windows[idx]
        batches.append(Batch(np.ascontiguousarray(w[:, :-1]), np.ascontiguousarray(w[:, 1:]), idx))
    return batches


# ---------------------------------------------------------------------------
# recognition and minimal pairs
# ---------------------------------------------------------------------------

def recognizes(grammar: Grammar, words: Sequence[str]) -> bool:
    """Earley recognizer: does ``grammar`` derive exactly ``words`` from its start symbol?"""
    n = len(words)
    prods = grammar.productions
    # item: (lhs, rhs, dot, origin)
    chart: list[set] = [set() for _ in range(n + 1)]
    for rhs, _ in prods[grammar.start]:
        chart[0].add((grammar.start, rhs, 0, 0))
    for i in range(n + 1):
        agenda = list(chart[i])
        while agenda:
            lhs, rhs, dot, origin = agenda.pop()
            if dot < len(rhs):
                sym = rhs[dot]
                if sym in prods:
                    for r, _ in prods[sym]:
                        item = (sym, r, 0, i)
                        if item not in chart[i]:
                            chart[i].add(item)
                            agenda.append(item)
                    # nullable symbols do not exist (empty RHS is rejected at parse time)
                elif i < n and words[i] == sym:
                    chart[i + 1].add((lhs, rhs, dot + 1, origin))
            else:
                for l2, r2, d2, o2 in list(chart[origin]):
                    if d2 < len(r2) and r2[d2] == lhs:
                        item = (l2, r2, d2 + 1, o2)
                        if item not in chart[i]:
                            chart[i].add(item)
                            agenda.append(item)
    return any(l == grammar.start and d == len(r) and o == 0 for l, r, d, o in chart[n])


@dataclass(frozen=True)
class MinimalPair:
    good: tuple[int, ...]
    bad: tuple[int, ...]
    rule: str


def generate_minimal_pairs(grammar: Grammar, seed: int, n_pairs: int, max_attempts: int = 100) -> list[MinimalPair]:
    """Derive a sentence, then swap one agreement-bearing word for its counterpart."""
    if not grammar.agreements:
        raise ValueError("grammar declares no agreement rules")
    if n_pairs < 1:
        raise ValueError("n_pairs must be positive")
    swaps: dict[str, tuple[str, dict[str, str]]] = {}
    for rule in grammar.agreements:
        left = grammar.terminals_of(rule.left)
        right = grammar.terminals_of(rule.right)
        swaps[rule.left] = (rule.tag, dict(zip(left, right)))
        swaps[rule.right] = (rule.tag, dict(zip(right, left)))

    rng = np.random.default_rng(seed)
    sampler = _Sampler(grammar)
    ids = grammar.token_to_id
    pairs: list[MinimalPair] = []
    failures = 0
    while len(pairs) < n_pairs:
        words, parents = sampler.derive(rng)
        sites = [i for i, p in enumerate(parents) if p in swaps]
        if sites:
            pos = sites[int(rng.integers(len(sites)))]
            tag, table = swaps[parents[pos]]
            bad = list(words)
            bad[pos] = table[words[pos]]
            if not recognizes(grammar, bad):
                pairs.append(MinimalPair(tuple(ids[w] for w in words), tuple(ids[w] for w in bad), tag))
                failures = 0
                continue
        failures += 1
        if failures > max_attempts:
            raise ValueError("could not construct an ungrammatical counterpart; check the agreement rules")
    return pairs
