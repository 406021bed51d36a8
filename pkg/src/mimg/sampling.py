"""Relevance matrices, document k-NN graph, path cover, and question-group
sampling for multi-hop construction.

Three relevance methods are available: BM25 (Lucene-style non-negative IDF,
k1=1.2, b=0.75), LDA topic-mixture similarity (collapsed Gibbs sampling), and
embedding cosine similarity. The document graph is exact top-k by cosine; the
path cover is a deterministic greedy walk bounded at 20 hops per path.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .gateway import Gateway
from .singlehop import SingleHopQA

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75
DEFAULT_KNN = 10
DEFAULT_MAX_PATH_LEN = 20

BM25 = "bm25"
LDA = "lda"
EMBEDDING = "embedding"

QUESTION_BASED = "question_based"
DOCUMENT_BASED = "document_based"

INTRA_DOCUMENT = "intra_document"
INTER_DOCUMENT = "inter_document"

_CJK_CHAR = r"㐀-䶿一-鿿豈-﫿"
_CJK_SPLIT = re.compile(f"([{_CJK_CHAR}])")
_WORD = re.compile(r"\w+")


def tokenize(text: str) -> list[str]:
    """Lowercased word tokens; CJK codepoints become single-character tokens."""
    spaced = _CJK_SPLIT.sub(r" \1 ", text.lower())
    return _WORD.findall(spaced)


@dataclass
class RelevanceMatrix:
    row_ids: list[str]
    col_ids: list[str]
    scores: np.ndarray
    method: str
    basis: str = QUESTION_BASED
    degenerate_ids: set[str] = field(default_factory=set)

    def __post_init__(self) -> None:
        if self.scores.shape != (len(self.row_ids), len(self.col_ids)):
            raise ValueError("scores shape does not match id lists")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")
        self._row_index = {rid: i for i, rid in enumerate(self.row_ids)}
        self._col_index = {cid: j for j, cid in enumerate(self.col_ids)}

    def score(self, row_id: str, col_id: str) -> float:
        return float(self.scores[self._row_index[row_id], self._col_index[col_id]])

    def dump_tsv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\t" + "\t".join(self.col_ids) + "\n")
            for rid, row in zip(self.row_ids, self.scores):
                fh.write(rid + "\t" + "\t".join(f"{v:.10g}" for v in row) + "\n")


def bm25_matrix(
    queries: Sequence[Sequence[str]],
    docs: Sequence[Sequence[str]],
    k1: float = DEFAULT_K1,
    b: float = DEFAULT_B,
    query_ids: Sequence[str] | None = None,
    doc_ids: Sequence[str] | None = None,
) -> RelevanceMatrix:
    """BM25 scores for tokenized queries against tokenized documents.

    score(q, d) = sum over distinct terms t of q of
        IDF(t) * tf(t,d) * (k1+1) / (tf(t,d) + k1 * (1 - b + b * |d| / avgdl))
    with IDF(t) = ln((N - df(t) + 0.5) / (df(t) + 0.5) + 1), which is >= 0.
    """
    if k1 <= 0:
        raise ValueError("k1 must be > 0")
    if not 0 <= b <= 1:
        raise ValueError("b must be in [0, 1]")
    if not docs:
        raise ValueError("document collection is empty")
    n_docs = len(docs)
    doc_lens = [len(d) for d in docs]
    avgdl = sum(doc_lens) / n_docs
    term_freqs = []
    df: dict[str, int] = {}
    for doc in docs:
        tf: dict[str, int] = {}
        for term in doc:
            tf[term] = tf.get(term, 0) + 1
        term_freqs.append(tf)
        for term in tf:
            df[term] = df.get(term, 0) + 1
    idf = {t: math.log((n_docs - c + 0.5) / (c + 0.5) + 1) for t, c in df.items()}

    scores = np.zeros((len(queries), n_docs))
    for qi, query in enumerate(queries):
        for term in set(query):
            if term not in idf:
                continue
            w = idf[term]
            for di in range(n_docs):
                tf = term_freqs[di].get(term, 0)
                if tf == 0:
                    continue
                denom = tf + k1 * (1 - b + b * doc_lens[di] / avgdl)
                scores[qi, di] += w * tf * (k1 + 1) / denom
    return RelevanceMatrix(
        row_ids=list(query_ids) if query_ids else [f"q{i}" for i in range(len(queries))],
        col_ids=list(doc_ids) if doc_ids else [f"d{i}" for i in range(n_docs)],
        scores=scores,
        method=BM25,
    )


class LdaModel:
    """Collapsed-Gibbs LDA with symmetric priors alpha = 50/K, beta = 0.01.

    The sampler runs in pure Python over per-token topic assignments; at desk
    scale (hundreds of short documents) this stays well under the 10 s budget
    while remaining byte-reproducible for a fixed seed.
    """

    def __init__(self, topics: int, iterations: int = 200, seed: int = 0):
        if topics < 2:
            raise ValueError("topic count must be >= 2")
        self.topics = topics
        self.iterations = iterations
        self.seed = seed
        self.alpha = 50.0 / topics
        self.beta = 0.01
        self.vocab: dict[str, int] = {}
        self._topic_word: list[list[int]] = []
        self._topic_totals: list[int] = []
        self.doc_topic: np.ndarray | None = None
        self.topic_word: np.ndarray | None = None

    @property
    def fitted(self) -> bool:
        return self.doc_topic is not None

    def fit(self, docs: Sequence[Sequence[str]]) -> "LdaModel":
        for i, doc in enumerate(docs):
            if not doc:
                raise ValueError(f"document {i} has no tokens")
        for doc in docs:
            for term in doc:
                if term not in self.vocab:
                    self.vocab[term] = len(self.vocab)
        if not self.vocab:
            raise ValueError("empty vocabulary")
        v_size = len(self.vocab)
        k = self.topics
        alpha, beta = self.alpha, self.beta
        docs_ix = [[self.vocab[t] for t in doc] for doc in docs]

        rng = random.Random(self.seed)
        n_dk = [[0] * k for _ in docs]
        n_kw = [[0] * v_size for _ in range(k)]
        n_k = [0] * k
        assignments = []
        for d, doc in enumerate(docs_ix):
            z_doc = []
            for w in doc:
                z = rng.randrange(k)
                z_doc.append(z)
                n_dk[d][z] += 1
                n_kw[z][w] += 1
                n_k[z] += 1
            assignments.append(z_doc)

        vbeta = v_size * beta
        weights = [0.0] * k
        for _ in range(self.iterations):
            for d, doc in enumerate(docs_ix):
                row = n_dk[d]
                z_doc = assignments[d]
                for i, w in enumerate(doc):
                    z = z_doc[i]
                    row[z] -= 1
                    n_kw[z][w] -= 1
                    n_k[z] -= 1
                    total = 0.0
                    for t in range(k):
                        wt = (row[t] + alpha) * (n_kw[t][w] + beta) / (n_k[t] + vbeta)
                        total += wt
                        weights[t] = total
                    u = rng.random() * total
                    z = 0
                    while weights[z] < u:
                        z += 1
                    z_doc[i] = z
                    row[z] += 1
                    n_kw[z][w] += 1
                    n_k[z] += 1

        self._topic_word = n_kw
        self._topic_totals = n_k
        self.doc_topic = np.array(
            [
                [(n_dk[d][t] + alpha) / (len(docs_ix[d]) + k * alpha) for t in range(k)]
                for d in range(len(docs_ix))
            ]
        )
        self.topic_word = np.array(
            [
                [(n_kw[t][w] + beta) / (n_k[t] + vbeta) for w in range(v_size)]
                for t in range(k)
            ]
        )
        return self

    def top_words(self, topic: int, count: int = 5) -> list[str]:
        if not self.fitted:
            raise ValueError("model not fitted")
        inverse = {i: t for t, i in self.vocab.items()}
        order = np.argsort(-self.topic_word[topic], kind="stable")
        return [inverse[int(i)] for i in order[:count]]

    def infer(self, tokens: Sequence[str], iterations: int = 50, seed: int | None = None) -> np.ndarray:
        """Fold-in inference: topic-word counts stay fixed while the new text's
        assignments are resampled. Unknown tokens are skipped; a text with no
        known tokens gets the uniform mixture."""
        if not self.fitted:
            raise ValueError("model not fitted")
        k = self.topics
        known = [self.vocab[t] for t in tokens if t in self.vocab]
        if not known:
            return np.full(k, 1.0 / k)
        if seed is None:
            digest = hashlib.sha256(("\x00".join(tokens) + f"|{self.seed}").encode()).digest()
            seed = int.from_bytes(digest[:8], "big")
        rng = random.Random(seed)
        alpha = self.alpha
        vbeta = len(self.vocab) * self.beta
        counts = [0] * k
        z_doc = []
        for w in known:
            z = rng.randrange(k)
            z_doc.append(z)
            counts[z] += 1
        weights = [0.0] * k
        for _ in range(iterations):
            for i, w in enumerate(known):
                z = z_doc[i]
                counts[z] -= 1
                total = 0.0
                for t in range(k):
                    wt = (counts[t] + alpha) * (self._topic_word[t][w] + self.beta) / (
                        self._topic_totals[t] + vbeta
                    )
                    total += wt
                    weights[t] = total
                u = rng.random() * total
                z = 0
                while weights[z] < u:
                    z += 1
                z_doc[i] = z
                counts[z] += 1
        return np.array([(counts[t] + alpha) / (len(known) + k * alpha) for t in range(k)])


def lda_fit(
    docs: Sequence[Sequence[str]], topics: int, iterations: int = 200, seed: int = 0
) -> LdaModel:
    return LdaModel(topics=topics, iterations=iterations, seed=seed).fit(docs)


def lda_similarity(
    model: LdaModel,
    queries: Sequence[Sequence[str]],
    candidates: Sequence[Sequence[str]],
    query_ids: Sequence[str] | None = None,
    candidate_ids: Sequence[str] | None = None,
) -> RelevanceMatrix:
    """Total-variation similarity of inferred topic mixtures, in [0, 1]."""
    if model is None or not model.fitted:
        raise ValueError("LDA model is not fitted")
    q_theta = [model.infer(q) for q in queries]
    c_theta = [model.infer(c) for c in candidates]
    scores = np.zeros((len(queries), len(candidates)))
    for i, tq in enumerate(q_theta):
        for j, tc in enumerate(c_theta):
            scores[i, j] = 1.0 - 0.5 * float(np.abs(tq - tc).sum())
    return RelevanceMatrix(
        row_ids=list(query_ids) if query_ids else [f"q{i}" for i in range(len(queries))],
        col_ids=list(candidate_ids) if candidate_ids else [f"c{i}" for i in range(len(candidates))],
        scores=scores,
        method=LDA,
    )


def cosine_matrix(rows: np.ndarray, cols: np.ndarray) -> tuple[np.ndarray, list[int], list[int]]:
    """Pairwise cosine similarities; zero vectors score 0 everywhere and are
    reported back as degenerate row/col indices."""
    row_norms = np.linalg.norm(rows, axis=1)
    col_norms = np.linalg.norm(cols, axis=1)
    degenerate_rows = [i for i, n in enumerate(row_norms) if n == 0.0]
    degenerate_cols = [j for j, n in enumerate(col_norms) if n == 0.0]
    safe_rows = np.where(row_norms == 0.0, 1.0, row_norms)
    safe_cols = np.where(col_norms == 0.0, 1.0, col_norms)
    sims = (rows @ cols.T) / np.outer(safe_rows, safe_cols)
    if degenerate_rows:
        sims[degenerate_rows, :] = 0.0
    if degenerate_cols:
        sims[:, degenerate_cols] = 0.0
    return sims, degenerate_rows, degenerate_cols


def embedding_matrix(
    queries: Sequence[str],
    candidates: Sequence[str],
    gateway: Gateway,
    query_ids: Sequence[str] | None = None,
    candidate_ids: Sequence[str] | None = None,
    request_tag: str = "embed",
) -> RelevanceMatrix:
    """Cosine-similarity relevance matrix from backend embeddings."""
    if not queries or not candidates:
        raise ValueError("queries and candidates must be non-empty")
    q_vecs = np.array([v.values for v in gateway.embed(list(queries), request_tag)])
    c_vecs = np.array([v.values for v in gateway.embed(list(candidates), request_tag)])
    sims, bad_rows, bad_cols = cosine_matrix(q_vecs, c_vecs)
    row_ids = list(query_ids) if query_ids else [f"q{i}" for i in range(len(queries))]
    col_ids = list(candidate_ids) if candidate_ids else [f"c{i}" for i in range(len(candidates))]
    degenerate = {row_ids[i] for i in bad_rows} | {col_ids[j] for j in bad_cols}
    return RelevanceMatrix(
        row_ids=row_ids,
        col_ids=col_ids,
        scores=sims,
        method=EMBEDDING,
        degenerate_ids=degenerate,
    )


@dataclass
class DocumentGraph:
    """Per-node neighbor lists of (neighbor_id, similarity), similarity
    descending then id ascending."""

    nodes: list[str]
    neighbors: dict[str, list[tuple[str, float]]]

    def to_dict(self) -> dict:
        return {
            "nodes": self.nodes,
            "edges": {n: [[nbr, sim] for nbr, sim in lst] for n, lst in self.neighbors.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DocumentGraph":
        return cls(
            nodes=list(data["nodes"]),
            neighbors={
                n: [(nbr, float(sim)) for nbr, sim in lst] for n, lst in data["edges"].items()
            },
        )


def build_doc_graph(
    doc_ids: Sequence[str], vectors: Sequence[Sequence[float]], k: int = DEFAULT_KNN
) -> DocumentGraph:
    """Exact k-NN graph under cosine similarity (ties break toward smaller id).

    Brute-force all-pairs ranking: correctness-first at desk scale, behind an
    interface that permits an approximate index later.
    """
    if len(doc_ids) < 2:
        raise ValueError("need at least 2 documents to build a graph")
    if len(doc_ids) != len(vectors):
        raise ValueError("doc_ids and vectors length mismatch")
    mat = np.array(vectors, dtype=float)
    if mat.ndim != 2:
        raise ValueError("vectors must share one dimension")
    sims, _, _ = cosine_matrix(mat, mat)
    fanout = min(k, len(doc_ids) - 1)
    neighbors: dict[str, list[tuple[str, float]]] = {}
    for i, node in enumerate(doc_ids):
        ranked = sorted(
            ((doc_ids[j], float(sims[i, j])) for j in range(len(doc_ids)) if j != i),
            key=lambda pair: (-pair[1], pair[0]),
        )
        neighbors[node] = ranked[:fanout]
    return DocumentGraph(nodes=list(doc_ids), neighbors=neighbors)


@dataclass(frozen=True)
class DocPath:
    path_id: int
    doc_ids: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.doc_ids)


def circular_paths(
    graph: DocumentGraph, max_len: int = DEFAULT_MAX_PATH_LEN, seed: int = 0
) -> list[DocPath]:
    """Cover every node with node-disjoint bounded paths.

    Greedy walk: start at the lowest-id unvisited node, repeatedly step to the
    highest-similarity unvisited neighbor, and close the path at max_len or
    when no unvisited neighbor remains; repeat until all nodes are used. The
    walk itself is deterministic; the seed is accepted for interface stability
    with the other samplers.
    """
    if not graph.nodes:
        raise ValueError("graph has no nodes")
    del seed
    visited: set[str] = set()
    paths: list[DocPath] = []
    for start in sorted(graph.nodes):
        if start in visited:
            continue
        path = [start]
        visited.add(start)
        while len(path) < max_len:
            options = [
                (nbr, sim) for nbr, sim in graph.neighbors.get(path[-1], []) if nbr not in visited
            ]
            if not options:
                break
            nxt = min(options, key=lambda pair: (-pair[1], pair[0]))[0]
            path.append(nxt)
            visited.add(nxt)
        paths.append(DocPath(path_id=len(paths), doc_ids=tuple(path)))
    return paths


@dataclass(frozen=True)
class QuestionGroup:
    group_id: str
    qa_ids: tuple[str, ...]
    mode: str
    path_id: int
    doc_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        distinct = len(set(self.doc_ids))
        if self.mode == INTRA_DOCUMENT and distinct != 1:
            raise ValueError("intra_document group must reference exactly one document")
        if self.mode == INTER_DOCUMENT and distinct < 2:
            raise ValueError("inter_document group must reference >= 2 distinct documents")

    def to_record(self) -> dict:
        return {
            "group_id": self.group_id,
            "qa_ids": list(self.qa_ids),
            "mode": self.mode,
            "path_id": self.path_id,
            "doc_ids": list(self.doc_ids),
        }

    @classmethod
    def from_record(cls, record: dict) -> "QuestionGroup":
        return cls(
            group_id=record["group_id"],
            qa_ids=tuple(record["qa_ids"]),
            mode=record["mode"],
            path_id=record["path_id"],
            doc_ids=tuple(record["doc_ids"]),
        )


def _relevance_to(matrix: RelevanceMatrix, previous: SingleHopQA, candidate: SingleHopQA) -> float:
    # question_based scores candidate questions against the previous question;
    # document_based scores them against the previous question's document.
    if matrix.basis == DOCUMENT_BASED:
        return matrix.score(candidate.id, previous.doc_id)
    return matrix.score(previous.id, candidate.id)


def _path_rng(seed: int, path: DocPath) -> random.Random:
    digest = hashlib.sha256(f"{seed}|{path.path_id}|{'+'.join(path.doc_ids)}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def sample_question_group(
    path: DocPath,
    pool: Sequence[SingleHopQA],
    mode: str,
    n_hops: int,
    relevance: RelevanceMatrix,
    seed: int,
) -> QuestionGroup | None:
    """Greedy group selection along a path.

    The seed question is drawn uniformly (seeded) from the first path
    document; each later hop takes the unselected candidate with the highest
    relevance to the previously selected question (intra: same document,
    inter: documents later on the path), ties to the smaller id. Returns None
    when the path cannot supply n_hops questions (recorded as unproductive).
    """
    if n_hops < 2:
        raise ValueError("n_hops must be >= 2")
    if mode not in (INTRA_DOCUMENT, INTER_DOCUMENT):
        raise ValueError(f"unknown mode {mode!r}")
    first_doc = path.doc_ids[0]
    seed_candidates = sorted((qa for qa in pool if qa.doc_id == first_doc), key=lambda qa: qa.id)
    if not seed_candidates:
        return None
    if mode == INTRA_DOCUMENT:
        candidate_pool = list(seed_candidates)
    else:
        later_docs = set(path.doc_ids[1:])
        candidate_pool = sorted(
            (qa for qa in pool if qa.doc_id in later_docs), key=lambda qa: qa.id
        )
    needed_after_seed = n_hops - 1
    if len(candidate_pool) - (1 if mode == INTRA_DOCUMENT else 0) < needed_after_seed:
        return None

    rng = _path_rng(seed, path)
    current = seed_candidates[rng.randrange(len(seed_candidates))]
    selected = [current]
    remaining = [qa for qa in candidate_pool if qa.id != current.id]
    for _ in range(needed_after_seed):
        scored = sorted(
            remaining, key=lambda qa: (-_relevance_to(relevance, selected[-1], qa), qa.id)
        )
        pick = scored[0]
        selected.append(pick)
        remaining = [qa for qa in remaining if qa.id != pick.id]
    if mode == INTER_DOCUMENT and len({qa.doc_id for qa in selected}) < 2:
        return None
    group_digest = hashlib.sha256("+".join(qa.id for qa in selected).encode()).hexdigest()[:10]
    return QuestionGroup(
        group_id=f"g{path.path_id:04d}-{group_digest}",
        qa_ids=tuple(qa.id for qa in selected),
        mode=mode,
        path_id=path.path_id,
        doc_ids=tuple(qa.doc_id for qa in selected),
    )


def save_graph(graph: DocumentGraph, paths: Sequence[DocPath], path: str | Path) -> None:
    payload = graph.to_dict()
    payload["paths"] = [list(p.doc_ids) for p in paths]
    Path(path).write_text(json.dumps(payload, ensure_ascii=False, indent=1), encoding="utf-8")


def load_graph(path: str | Path) -> tuple[DocumentGraph, list[DocPath]]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    graph = DocumentGraph.from_dict(data)
    paths = [DocPath(path_id=i, doc_ids=tuple(p)) for i, p in enumerate(data.get("paths", []))]
    return graph, paths
