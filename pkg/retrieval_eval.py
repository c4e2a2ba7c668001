import os
import math
import tempfile
import numpy as np
import pandas as pd
import torch
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple, Union
from scipy import stats
from tqdm import tqdm
from utils import SSPError, is_readable_file, atomic_write_text, ensure_dir
from config_utils import get_int, get_bool, get_str, ConfigError
from data_model import Conversation, Document, Vocabulary, build_model_input, build_single_input
from task_builder import NoisePoolError
from encoder import SSPModel, ConversationalEncoder, encode_batch
from constants import *

NDCG_GAINS = ("exponential", "linear")


class TrecFormatError(SSPError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    positive_threshold: int = DEFAULT_POSITIVE_THRESHOLD
    ndcg_gain: str = "exponential"
    skip_missing_queries: bool = True
    top_k: int = DEFAULT_TOP_K
    max_len: int = DEFAULT_MAX_LEN

    def __post_init__(self):
        if self.ndcg_gain not in NDCG_GAINS:
            raise ConfigError(f"ndcg_gain must be one of {NDCG_GAINS}, got {self.ndcg_gain}")
        if self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")
        if self.positive_threshold < 0:
            raise ConfigError(f"positive_threshold must be >= 0, got {self.positive_threshold}")

    @classmethod
    def from_config(cls, values: Mapping[str, str]) -> "EvalConfig":
        return cls(positive_threshold=get_int(values, "positive_threshold", DEFAULT_POSITIVE_THRESHOLD),
                   ndcg_gain=get_str(values, "ndcg_gain", "exponential"),
                   skip_missing_queries=get_bool(values, "skip_missing_queries", True),
                   top_k=get_int(values, "top_k", DEFAULT_TOP_K),
                   max_len=get_int(values, "max_len", DEFAULT_MAX_LEN))


class DenseIndex:
    """Immutable doc_id-aligned matrix of document vectors, searched by exact inner product."""

    def __init__(self, doc_ids: Sequence[str], vectors: np.ndarray):
        vectors = np.array(vectors, copy=True)
        if vectors.ndim != 2 or vectors.shape[0] != len(doc_ids):
            raise ValueError(f"vectors shape {vectors.shape} does not match {len(doc_ids)} doc ids")
        if len(set(doc_ids)) != len(doc_ids):
            raise ValueError("doc ids must be unique within an index")
        vectors.setflags(write=False)
        self._doc_ids = tuple(str(d) for d in doc_ids)
        self._vectors = vectors
        # rank of each doc_id in ascending order, used to break score ties
        self._id_rank = np.argsort(np.argsort(np.array(self._doc_ids), kind="stable"), kind="stable")

    @property
    def doc_ids(self) -> Tuple[str, ...]:
        return self._doc_ids

    @property
    def vectors(self) -> np.ndarray:
        return self._vectors

    @property
    def size(self) -> int:
        return len(self._doc_ids)

    @property
    def dim(self) -> int:
        return self._vectors.shape[1]

    def save(self, path: str) -> str:
        directory = ensure_dir(os.path.dirname(os.path.abspath(path)))
        fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as f:
                np.savez(f, doc_ids=np.array(self._doc_ids), vectors=self._vectors)
            os.replace(tmp_path, path)
        except BaseException:
            if os.path.exists(tmp_path):
                os.remove(tmp_path)
            raise
        return path

    @classmethod
    def load(cls, path: str) -> "DenseIndex":
        if not is_readable_file(path):
            raise SSPError(f"cannot read index {path}")
        with np.load(path, allow_pickle=False) as data:
            return cls([str(d) for d in data["doc_ids"]], data["vectors"])


class Qrels:
    """Graded judgments: query_id -> doc_id -> grade."""

    def __init__(self, judgments: Mapping[str, Mapping[str, int]]):
        self._judgments = {}
        for query_id, grades in judgments.items():
            for doc_id, grade in grades.items():
                if int(grade) < 0:
                    raise ValueError(f"negative grade for ({query_id}, {doc_id})")
            self._judgments[str(query_id)] = {str(d): int(g) for d, g in grades.items()}

    def __contains__(self, query_id: str) -> bool:
        return query_id in self._judgments

    def __eq__(self, other) -> bool:
        return isinstance(other, Qrels) and self._judgments == other._judgments

    @property
    def query_ids(self) -> List[str]:
        return sorted(self._judgments)

    def grade(self, query_id: str, doc_id: str) -> int:
        return self._judgments.get(query_id, {}).get(doc_id, 0)

    def grades(self, query_id: str) -> Dict[str, int]:
        return dict(self._judgments.get(query_id, {}))

    def items(self) -> Iterable[Tuple[str, str, int]]:
        for query_id in sorted(self._judgments):
            for doc_id in sorted(self._judgments[query_id]):
                yield query_id, doc_id, self._judgments[query_id][doc_id]


class RankedRun:
    """Per query, (doc_id, score) in descending score, ties by ascending doc_id."""

    def __init__(self, rankings: Mapping[str, Sequence[Tuple[str, float]]]):
        self._rankings = {}
        for query_id, ranking in rankings.items():
            ranking = tuple((str(doc_id), float(score)) for doc_id, score in ranking)
            doc_ids = [doc_id for doc_id, _ in ranking]
            if len(set(doc_ids)) != len(doc_ids):
                raise ValueError(f"duplicate doc_id in the ranking of {query_id}")
            for (d1, s1), (d2, s2) in zip(ranking, ranking[1:]):
                if s2 > s1 or (s2 == s1 and d2 < d1):
                    raise ValueError(f"ranking of {query_id} is not sorted at {d1}, {d2}")
            self._rankings[str(query_id)] = ranking

    def __len__(self) -> int:
        return len(self._rankings)

    def __eq__(self, other) -> bool:
        return isinstance(other, RankedRun) and self._rankings == other._rankings

    @property
    def query_ids(self) -> List[str]:
        return sorted(self._rankings)

    def ranking(self, query_id: str) -> Tuple[Tuple[str, float], ...]:
        return self._rankings[query_id]


def index_corpus(documents: Sequence[Document], teacher: ConversationalEncoder, vocab: Vocabulary,
                 max_len: int = DEFAULT_MAX_LEN, batch_size: int = DEFAULT_BATCH_SIZE,
                 verbose: bool = False) -> DenseIndex:
    if len(documents) == 0:
        raise ValueError("cannot index an empty corpus")
    vectors = encode_texts(teacher, [document.text for document in documents], vocab, max_len, batch_size, verbose)
    return DenseIndex([document.doc_id for document in documents], vectors)

# Exact inner-product top_k; top_k beyond the corpus size returns the full ranking
def search(index: DenseIndex, query_vector: np.ndarray, top_k: int) -> List[Tuple[str, float]]:
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    query_vector = np.asarray(query_vector, dtype=np.float64)
    if query_vector.shape != (index.dim,):
        raise ValueError(f"query dimension {query_vector.shape} does not match index dimension {index.dim}")
    scores = index.vectors.astype(np.float64) @ query_vector
    order = np.lexsort((index._id_rank, -scores))[:top_k]
    return [(index.doc_ids[i], float(scores[i])) for i in order]

def search_all(index: DenseIndex, query_ids: Sequence[str], query_vectors: np.ndarray, top_k: int) -> RankedRun:
    return RankedRun({query_id: search(index, vector, top_k) for query_id, vector in zip(query_ids, query_vectors)})


def _reciprocal_rank(ranking: Sequence[Tuple[str, float]], grades: Mapping[str, int], threshold: int) -> float:
    for rank, (doc_id, _) in enumerate(ranking, start=1):
        if grades.get(doc_id, 0) >= threshold:
            return 1.0 / rank
    return 0.0

def _gain(grade: int, kind: str) -> float:
    return float(2 ** grade - 1) if kind == "exponential" else float(grade)

def _ndcg(ranking: Sequence[Tuple[str, float]], grades: Mapping[str, int], kind: str,
          depth: int = NDCG_DEPTH) -> float:
    dcg = sum(_gain(grades.get(doc_id, 0), kind) / math.log2(rank + 1)
              for rank, (doc_id, _) in enumerate(ranking[:depth], start=1))
    ideal = sorted(grades.values(), reverse=True)[:depth]
    idcg = sum(_gain(grade, kind) / math.log2(rank + 1) for rank, grade in enumerate(ideal, start=1))
    return dcg / idcg if idcg > 0 else 0.0

# Returns a frame (query_id, rr, ndcg3) over the run's scored queries
def per_query_metrics(run: RankedRun, qrels: Qrels, positive_threshold: int = DEFAULT_POSITIVE_THRESHOLD,
                      ndcg_gain: str = "exponential", skip_missing_queries: bool = True) -> pd.DataFrame:
    if len(run) == 0:
        raise ValueError("cannot evaluate an empty run")
    rows = []
    for query_id in run.query_ids:
        if query_id not in qrels:
            if skip_missing_queries:
                continue
            rows.append({"query_id": query_id, "rr": 0.0, "ndcg3": 0.0})
            continue
        grades = qrels.grades(query_id)
        ranking = run.ranking(query_id)
        rows.append({"query_id": query_id,
                     "rr": _reciprocal_rank(ranking, grades, positive_threshold),
                     "ndcg3": _ndcg(ranking, grades, ndcg_gain)})
    return pd.DataFrame(rows, columns=["query_id", "rr", "ndcg3"])

def mrr(run: RankedRun, qrels: Qrels, positive_threshold: int = DEFAULT_POSITIVE_THRESHOLD,
        skip_missing_queries: bool = True) -> float:
    df = per_query_metrics(run, qrels, positive_threshold, skip_missing_queries=skip_missing_queries)
    return float(df["rr"].mean()) if len(df) else 0.0

def ndcg_at_3(run: RankedRun, qrels: Qrels, ndcg_gain: str = "exponential",
              skip_missing_queries: bool = True) -> float:
    df = per_query_metrics(run, qrels, ndcg_gain=ndcg_gain, skip_missing_queries=skip_missing_queries)
    return float(df["ndcg3"].mean()) if len(df) else 0.0

# Two-tailed paired t-test of metric over the query ids two per-query frames share
def paired_t_test(a: pd.DataFrame, b: pd.DataFrame, metric: str = "rr") -> Tuple[float, float]:
    merged = a[["query_id", metric]].merge(b[["query_id", metric]], on="query_id", suffixes=("_a", "_b"))
    if len(merged) < 2:
        raise ValueError("paired t-test needs at least two shared queries")
    result = stats.ttest_rel(merged[f"{metric}_a"], merged[f"{metric}_b"])
    return float(result.statistic), float(result.pvalue)

def significance_marker(p_value: float) -> str:
    if p_value <= 0.01:
        return "**"
    if p_value <= 0.05:
        return "*"
    return ""


def write_run(run: RankedRun, path: str, tag: str) -> str:
    if not tag or len(tag.split()) != 1:
        raise ValueError(f"run tag must be a single non-empty token, got {tag!r}")
    lines = []
    for query_id in run.query_ids:
        for rank, (doc_id, score) in enumerate(run.ranking(query_id), start=1):
            lines.append(f"{query_id} Q0 {doc_id} {rank} {score!r} {tag}\n")
    return atomic_write_text(path, "".join(lines))

def read_run(path: str) -> RankedRun:
    if not is_readable_file(path):
        raise TrecFormatError(f"cannot read run {path}")
    rows: Dict[str, List[Tuple[int, str, float]]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) != 6 or fields[1] != "Q0":
                raise TrecFormatError(f"{path}:{line_number}: expected 'query_id Q0 doc_id rank score tag'")
            try:
                rank, score = int(fields[3]), float(fields[4])
            except ValueError:
                raise TrecFormatError(f"{path}:{line_number}: rank must be an integer and score a number")
            rows.setdefault(fields[0], []).append((rank, fields[2], score))
    rankings = {}
    for query_id, entries in rows.items():
        entries.sort()
        if [rank for rank, _, _ in entries] != list(range(1, len(entries) + 1)):
            raise TrecFormatError(f"{path}: ranks of {query_id} are not 1..{len(entries)}")
        rankings[query_id] = [(doc_id, score) for _, doc_id, score in entries]
    try:
        return RankedRun(rankings)
    except ValueError as err:
        raise TrecFormatError(f"{path}: {err}")

def write_qrels(qrels: Qrels, path: str) -> str:
    return atomic_write_text(path, "".join(f"{q} 0 {d} {g}\n" for q, d, g in qrels.items()))

def read_qrels(path: str) -> Qrels:
    if not is_readable_file(path):
        raise TrecFormatError(f"cannot read qrels {path}")
    judgments: Dict[str, Dict[str, int]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) != 4:
                raise TrecFormatError(f"{path}:{line_number}: expected 'query_id 0 doc_id grade'")
            query_id, _, doc_id, grade = fields
            try:
                grade = int(grade)
            except ValueError:
                raise TrecFormatError(f"{path}:{line_number}: grade must be an integer, got {grade!r}")
            if grade < 0:
                raise TrecFormatError(f"{path}:{line_number}: grade must be >= 0")
            previous = judgments.setdefault(query_id, {}).get(doc_id)
            if previous is not None and previous != grade:
                raise TrecFormatError(f"{path}:{line_number}: conflicting grades for ({query_id}, {doc_id})")
            judgments[query_id][doc_id] = grade
    return Qrels(judgments)


# E_[CLS] of [CLS] + text for each text
@torch.no_grad()
def encode_texts(model: Union[SSPModel, ConversationalEncoder], texts: Sequence[str], vocab: Vocabulary,
                 max_len: int = DEFAULT_MAX_LEN, batch_size: int = DEFAULT_BATCH_SIZE,
                 verbose: bool = False) -> np.ndarray:
    model.eval()
    inputs = [build_single_input(text, vocab, max_len) for text in texts]
    return _encode_inputs(model, inputs, batch_size, verbose)

# E_[CLS] of each conversation's [CLS] q_1 [SEP] ... q_n [SEP] input
@torch.no_grad()
def encode_conversations(model: Union[SSPModel, ConversationalEncoder], conversations: Sequence[Conversation],
                         vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN,
                         batch_size: int = DEFAULT_BATCH_SIZE, verbose: bool = False) -> np.ndarray:
    model.eval()
    inputs = [build_model_input(conversation, vocab, max_len) for conversation in conversations]
    return _encode_inputs(model, inputs, batch_size, verbose)

def _encode_inputs(model, inputs, batch_size: int, verbose: bool) -> np.ndarray:
    chunks = []
    for start in tqdm(range(0, len(inputs), batch_size), desc="encode", disable=not verbose):
        hidden, _ = encode_batch(model, inputs[start:start + batch_size])
        chunks.append(hidden[:, 0].detach().cpu().numpy())
    return np.concatenate(chunks, axis=0)

def evaluate_conversations(model: Union[SSPModel, ConversationalEncoder], conversations: Sequence[Conversation],
                           index: DenseIndex, qrels: Qrels, vocab: Vocabulary,
                           config: EvalConfig = EvalConfig()) -> Tuple[RankedRun, Dict[str, float]]:
    vectors = encode_conversations(model, conversations, vocab, config.max_len)
    run = search_all(index, [c.conv_id for c in conversations], vectors, config.top_k)
    per_query = per_query_metrics(run, qrels, config.positive_threshold, config.ndcg_gain,
                                  config.skip_missing_queries)
    metrics = {"mrr": float(per_query["rr"].mean()) if len(per_query) else 0.0,
               "ndcg3": float(per_query["ndcg3"].mean()) if len(per_query) else 0.0,
               "queries": len(per_query)}
    return run, metrics


# Unique utterances of pool conversations from other sessions, in pool order
def off_topic_utterances(conversation: Conversation, noise_pool: Sequence[Conversation]) -> List[str]:
    seen = {}
    for candidate in noise_pool:
        if candidate.conv_id == conversation.conv_id:
            continue
        if conversation.source_tag and candidate.source_tag == conversation.source_tag:
            continue
        for query in candidate.queries:
            seen.setdefault(query, None)
    return list(seen)

# Prepends j off-topic utterances. The sample for a conversation is a prefix
# of one seeded permutation, so the j + 1 sample extends the j sample.
def add_off_topic_utterances(conversation: Conversation, noise_pool: Sequence[Conversation], j: int,
                             seed: int, position: int) -> Conversation:
    if j < 0:
        raise ValueError(f"j must be >= 0, got {j}")
    if j == 0:
        return conversation
    utterances = off_topic_utterances(conversation, noise_pool)
    if len(utterances) < j:
        raise NoisePoolError(f"noise pool offers {len(utterances)} off-topic utterances for "
                             f"{conversation.conv_id}, need {j}")
    order = np.random.default_rng([seed, position]).permutation(len(utterances))[:j]
    added = tuple(utterances[i] for i in order)
    return Conversation(conv_id=conversation.conv_id, queries=added + conversation.queries,
                        reformulated_last=conversation.reformulated_last, source_tag=conversation.source_tag)

# Returns a frame (j, mrr, ndcg3) for j = 0..max_added prepended off-topic utterances
def robustness_eval(model: Union[SSPModel, ConversationalEncoder], conversations: Sequence[Conversation],
                    noise_pool: Sequence[Conversation], max_added: int, index: DenseIndex, qrels: Qrels,
                    vocab: Vocabulary, config: EvalConfig = EvalConfig(), seed: int = 0,
                    verbose: bool = False) -> pd.DataFrame:
    if max_added < 0:
        raise ValueError(f"max_added must be >= 0, got {max_added}")
    rows = []
    for j in range(max_added + 1):
        perturbed = [add_off_topic_utterances(c, noise_pool, j, seed, i) for i, c in enumerate(conversations)]
        _, metrics = evaluate_conversations(model, perturbed, index, qrels, vocab, config)
        rows.append({"j": j, "mrr": metrics["mrr"], "ndcg3": metrics["ndcg3"]})
        if verbose:
            print(f"robustness j={j}: mrr {metrics['mrr']:.4f} ndcg3 {metrics['ndcg3']:.4f}")
    return pd.DataFrame(rows, columns=["j", "mrr", "ndcg3"])


################################################
# Tests
################################################

def _run(rankings: Mapping[str, Sequence[str]]) -> RankedRun:
    return RankedRun({q: [(d, float(len(docs) - i)) for i, d in enumerate(docs)] for q, docs in rankings.items()})

def test_search():
    vectors = np.array([[1.0, 0.0], [0.5, 1.0], [0.0, 1.0], [-1.0, 0.0], [0.8, 0.6]])
    index = DenseIndex(["d1", "d2", "d3", "d4", "d5"], vectors)
    assert search(index, vectors[2], 1)[0][0] == "d3", "ERROR: self similarity"
    ranking = search(index, np.array([2.0, 1.0]), 5)
    # dot products: d1 2.0, d2 2.0, d3 1.0, d4 -2.0, d5 2.2
    assert [d for d, _ in ranking] == ["d5", "d1", "d2", "d3", "d4"], f"ERROR: ranking {ranking}"
    assert abs(ranking[0][1] - 2.2) < 1e-12, "ERROR: score"
    tied = DenseIndex(["b", "c", "a"], np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]))
    assert [d for d, s in search(tied, np.array([0.0, 0.0]), 10)] == ["a", "b", "c"], "ERROR: tie-break"
    assert len(search(index, np.array([1.0, 1.0]), 100)) == 5, "ERROR: top_k beyond corpus"
    try:
        index.vectors[0, 0] = 5.0
        assert False, "ERROR: index vectors must be read-only"
    except ValueError:
        pass

def test_search_matches_full_sort():
    rng = np.random.default_rng(0)
    vectors = rng.standard_normal((10_000, 16))
    index = DenseIndex([f"d{i:05d}" for i in range(10_000)], vectors)
    for query in rng.standard_normal((5, 16)):
        scores = vectors @ query
        expected = [f"d{i:05d}" for i in np.argsort(-scores, kind="stable")[:100]]
        assert [d for d, _ in search(index, query, 100)] == expected, "ERROR: top-k differs from full sort"
        scaled = [d for d, _ in search(index, 3.5 * query, 100)]
        assert scaled == expected, "ERROR: positive scaling changed the ranking"

def test_mrr():
    qrels = Qrels({"q1": {"a": 2, "b": 0}, "q2": {"c": 2, "e": 3}})
    assert mrr(_run({"q1": ["a", "b"], "q2": ["c", "d"]}), qrels) == 1.0, "ERROR: all rank 1"
    assert mrr(_run({"q1": ["b", "x", "y", "a"]}), qrels) == 0.25, "ERROR: rank 4"
    value = mrr(_run({"q1": ["b", "a"], "q2": ["d", "f", "g", "h", "e"]}), qrels)
    assert abs(value - 0.35) < 1e-9, f"ERROR: 0.35 oracle got {value}"
    assert mrr(_run({"q1": ["b", "x"]}), qrels) == 0.0, "ERROR: none retrieved"
    assert mrr(_run({"q1": ["a"], "zz": ["a"]}), qrels) == 1.0, "ERROR: missing query must be skipped"
    assert mrr(_run({"q1": ["a"], "zz": ["a"]}), qrels, skip_missing_queries=False) == 0.5, "ERROR: counted missing"
    assert mrr(_run({"q1": ["b", "a"]}), Qrels({"q1": {"a": 1}}), positive_threshold=1) == 0.5, "ERROR: threshold"
    longer = mrr(_run({"q1": ["b", "a", "n1", "n2"]}), qrels)
    assert longer == mrr(_run({"q1": ["b", "a"]}), qrels), "ERROR: appending non-relevant docs changed mrr"
    try:
        mrr(RankedRun({}), qrels)
        assert False, "ERROR: empty run accepted"
    except ValueError:
        pass

def test_ndcg_at_3():
    qrels = Qrels({"q1": {"a": 3, "b": 0, "c": 1}, "q2": {"x": 0}})
    expected = 7.5 / (7.0 + 1.0 / math.log2(3))
    value = ndcg_at_3(_run({"q1": ["a", "b", "c"]}), qrels)
    assert abs(value - expected) < 1e-9 and abs(value - 0.98285) < 1e-5, f"ERROR: 0.98285 oracle got {value}"
    assert ndcg_at_3(_run({"q1": ["a", "c", "b"]}), qrels) == 1.0, "ERROR: ideal ranking"
    assert ndcg_at_3(_run({"q2": ["x", "y"]}), qrels) == 0.0, "ERROR: no relevant docs"
    assert ndcg_at_3(_run({"q1": ["a", "b", "c", "z1", "z2"]}), qrels) == value, "ERROR: depth beyond 3"
    linear = ndcg_at_3(_run({"q1": ["a", "b", "c"]}), qrels, ndcg_gain="linear")
    assert abs(linear - 3.5 / (3.0 + 1.0 / math.log2(3))) < 1e-9, "ERROR: linear gain"

def test_trec_files():
    run = RankedRun({"q1": [("d3", 2.5), ("d1", 1.0 / 3.0)], "q2": [("d7", -0.1)]})
    qrels = Qrels({"q1": {"d7": 2}, "q2": {"d1": 0}})
    with tempfile.TemporaryDirectory() as tmp:
        run_path = write_run(run, os.path.join(tmp, RUN_FILE), "ssp")
        with open(run_path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
        assert lines[0] == "q1 Q0 d3 1 2.5 ssp" and lines[1].split()[3] == "2", f"ERROR: run lines {lines}"
        assert read_run(run_path) == run, "ERROR: run round trip"
        qrels_path = write_qrels(qrels, os.path.join(tmp, QRELS_FILE))
        assert read_qrels(qrels_path) == qrels, "ERROR: qrels round trip"
        spaced = atomic_write_text(os.path.join(tmp, "spaced.txt"), "q1   0\td7  2\n\nq1 0 d8\n")
        try:
            read_qrels(spaced)
            assert False, "ERROR: malformed qrels accepted"
        except TrecFormatError as err:
            assert ":3:" in str(err), f"ERROR: line number missing in {err}"
        single = atomic_write_text(os.path.join(tmp, "single.txt"), "q1 0 d7 2\n")
        assert read_qrels(single).grade("q1", "d7") == 2, "ERROR: qrels line"

def _toy_setup():
    from encoder import EncoderConfig, build_teacher
    vocab = Vocabulary(SPECIAL_TOKENS + [f"w{i}" for i in range(12)])
    teacher = build_teacher(EncoderConfig(vocab_size=16, hidden_size=8, layers=1, heads=2, ff_size=16,
                                          max_positions=64, dropout=0.0), seed=0).freeze()
    documents = [Document(f"d{i}", f"w{i} w{(i + 1) % 12} w{(i + 5) % 12}") for i in range(12)]
    conversations = [Conversation(f"s{i}_2", (f"w{i} w{i + 1}", f"w{i + 2}"), source_tag=f"s{i}") for i in range(6)]
    qrels = Qrels({c.conv_id: {f"d{i}": 2, f"d{i + 1}": 1} for i, c in enumerate(conversations)})
    return vocab, teacher, documents, conversations, qrels

def test_index_corpus():
    vocab, teacher, documents, _, _ = _toy_setup()
    index = index_corpus(documents, teacher, vocab, max_len=16, batch_size=5)
    looped = np.stack([encode_texts(teacher, [d.text], vocab, max_len=16)[0] for d in documents])
    assert index.vectors.shape == (12, 8) and np.allclose(index.vectors, looped, atol=1e-6), "ERROR: batched index"
    assert np.array_equal(index_corpus(documents, teacher, vocab, max_len=16).vectors, index.vectors), \
        "ERROR: re-index changed vectors"
    assert index_corpus(documents[:1], teacher, vocab, max_len=16).vectors.shape == (1, 8), "ERROR: single doc"
    with tempfile.TemporaryDirectory() as tmp:
        loaded = DenseIndex.load(index.save(os.path.join(tmp, INDEX_FILE)))
        # a failed write leaves no temp file behind
        blocked = os.path.join(tmp, "blocked.npz")
        os.makedirs(blocked)
        try:
            index.save(blocked)
            assert False, "ERROR: index written over a directory"
        except OSError:
            pass
        assert not [name for name in os.listdir(tmp) if name.startswith(".tmp-")], "ERROR: temp file left behind"
    assert loaded.doc_ids == index.doc_ids and np.array_equal(loaded.vectors, index.vectors), "ERROR: npz round trip"
    try:
        index_corpus([], teacher, vocab)
        assert False, "ERROR: empty corpus accepted"
    except ValueError:
        pass

def test_off_topic_utterances():
    _, _, _, conversations, _ = _toy_setup()
    target = conversations[0]
    two = add_off_topic_utterances(target, conversations, 2, seed=3, position=0)
    three = add_off_topic_utterances(target, conversations, 3, seed=3, position=0)
    assert two.queries[2:] == target.queries and three.queries[:2] == two.queries[:2], "ERROR: nested sampling"
    assert add_off_topic_utterances(target, conversations, 0, seed=3, position=0) == target, "ERROR: j=0"
    assert not set(two.queries[:2]) & set(target.queries), "ERROR: sampled an on-topic utterance"
    try:
        add_off_topic_utterances(target, conversations[:2], 5, seed=3, position=0)
        assert False, "ERROR: small pool accepted"
    except NoisePoolError:
        pass

def test_robustness_eval():
    vocab, teacher, documents, conversations, qrels = _toy_setup()
    index = index_corpus(documents, teacher, vocab, max_len=16)
    config = EvalConfig(max_len=32, top_k=12)
    curve = robustness_eval(teacher, conversations, conversations, 2, index, qrels, vocab, config, seed=1)
    assert list(curve["j"]) == [0, 1, 2], "ERROR: curve rows"
    _, plain = evaluate_conversations(teacher, conversations, index, qrels, vocab, config)
    assert curve["mrr"].iloc[0] == plain["mrr"] and curve["ndcg3"].iloc[0] == plain["ndcg3"], "ERROR: j=0 row"
    manual = [add_off_topic_utterances(c, conversations, 2, 1, i) for i, c in enumerate(conversations)]
    _, at_two = evaluate_conversations(teacher, manual, index, qrels, vocab, config)
    assert curve["mrr"].iloc[2] == at_two["mrr"], "ERROR: curve differs from a manual per-j run"
    again = robustness_eval(teacher, conversations, conversations, 2, index, qrels, vocab, config, seed=1)
    assert curve.equals(again), "ERROR: curve not deterministic"

def test_paired_t_test():
    a = pd.DataFrame({"query_id": ["q1", "q2", "q3", "q4"], "rr": [1.0, 0.5, 0.5, 1.0]})
    b = pd.DataFrame({"query_id": ["q4", "q3", "q2", "q1"], "rr": [0.5, 0.25, 0.5, 0.2]})
    t, p = paired_t_test(a, b)
    expected = stats.ttest_rel([1.0, 0.5, 0.5, 1.0], [0.2, 0.5, 0.25, 0.5])
    assert abs(t - expected.statistic) < 1e-12 and abs(p - expected.pvalue) < 1e-12, "ERROR: paired by query id"
    assert significance_marker(0.005) == "**" and significance_marker(0.03) == "*" and significance_marker(0.2) == "", \
        "ERROR: markers"

def tests():
    test_search()
    test_search_matches_full_sort()
    test_mrr()
    test_ndcg_at_3()
    test_trec_files()
    test_index_corpus()
    test_off_topic_utterances()
    test_robustness_eval()
    test_paired_t_test()
    print("all tests passed in", os.path.basename(__file__))

def main():
    tests()

if __name__ == "__main__":
    main()
