"""Independent reference implementations used to check the library.

Everything here is written from the definitions alone, without importing the
module under test, so agreement between the two is meaningful.
"""

import itertools
import math
import re

import numpy as np

_SPLIT = re.compile(r"[^0-9a-z]+")


def oracle_tokenize(text):
    return [t for t in _SPLIT.split(text.lower()) if t]


def oracle_bm25_rank(chunks, query, k, k1=1.5, b=0.75):
    """Score every chunk with the Okapi BM25 formula and sort.

    chunks: list of (chunk_id, text). Returns [(chunk_id, score)] for the
    top k positive-scoring chunks, score descending, chunk_id ascending on
    ties.
    """
    docs = [oracle_tokenize(text) for _, text in chunks]
    n_docs = len(docs)
    avg_len = sum(len(d) for d in docs) / n_docs if n_docs else 0.0
    terms = oracle_tokenize(query)
    scored = []
    for (chunk_id, _), tokens in zip(chunks, docs):
        score = 0.0
        for term in terms:
            tf = tokens.count(term)
            if tf == 0:
                continue
            df = sum(1 for d in docs if term in d)
            idf = math.log(1.0 + (n_docs - df + 0.5) / (df + 0.5))
            score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * len(tokens) / avg_len))
        if score > 0.0:
            scored.append((chunk_id, score))
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored[:k]


def oracle_cosine(u, v):
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    nu = math.sqrt(float(np.dot(u, u)))
    nv = math.sqrt(float(np.dot(v, v)))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.dot(u, v)) / (nu * nv)


def oracle_rerank(query, candidates, encode, k):
    """candidates: list of (chunk_id, text). Cosine desc, chunk_id asc."""
    qv = encode(query)
    scored = [(chunk_id, oracle_cosine(qv, encode(text))) for chunk_id, text in candidates]
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored[:k]


def oracle_mann_whitney(sample_a, sample_b):
    """Exact two-sided Mann-Whitney by direct pairwise counting.

    U_a counts pairs where a beats b, ties worth half. The p-value counts
    label assignments whose |U - mean| is at least the observed deviation,
    which for the no-tie case equals the classical exact test.
    """
    a = [float(x) for x in sample_a]
    b = [float(x) for x in sample_b]
    n_a, n_b = len(a), len(b)
    u_obs = sum(1.0 if x > y else 0.5 if x == y else 0.0 for x in a for y in b)
    mean_u = n_a * n_b / 2
    pooled = a + b
    total = 0
    extreme = 0
    for subset in itertools.combinations(range(n_a + n_b), n_a):
        chosen = [pooled[i] for i in subset]
        rest = [pooled[i] for i in range(n_a + n_b) if i not in set(subset)]
        u = sum(1.0 if x > y else 0.5 if x == y else 0.0 for x in chosen for y in rest)
        total += 1
        if abs(u - mean_u) >= abs(u_obs - mean_u) - 1e-12:
            extreme += 1
    return u_obs, extreme / total


def oracle_max_matching(pred_snippets, gold_snippets, matcher):
    """Maximum bipartite matching by exhaustive search over injections."""
    n_pred, n_gold = len(pred_snippets), len(gold_snippets)
    edges = {
        (i, j)
        for i in range(n_pred)
        for j in range(n_gold)
        if matcher(pred_snippets[i], gold_snippets[j])
    }
    best = 0
    indices = list(range(n_gold))
    for size in range(min(n_pred, n_gold), 0, -1):
        for pred_subset in itertools.combinations(range(n_pred), size):
            for gold_perm in itertools.permutations(indices, size):
                if all((p, g) in edges for p, g in zip(pred_subset, gold_perm)):
                    return size
    return best


def oracle_chunk_starts(n_words, window, stride):
    """Expected chunk start offsets for a document of n_words words."""
    if n_words == 0:
        return []
    starts = [0]
    while starts[-1] + window < n_words:
        starts.append(starts[-1] + stride)
    return starts
