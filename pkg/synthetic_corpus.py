import os
import tempfile
import numpy as np
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple
from utils import DataFormatError, iter_jsonl, write_jsonl, ensure_dir
from config_utils import get_int, get_float, ConfigError
from data_model import (Conversation, Document, Vocabulary, build_vocabulary, conversation_texts,
                        write_conversations, write_corpus)
from retrieval_eval import Qrels, write_qrels
from constants import *

# word stock for the generated language; entity tokens are <topic stem><index>
TOPIC_STEMS = ["glacier", "violin", "comet", "orchid", "falcon", "harbor", "quartz", "lantern",
               "meadow", "canyon", "saffron", "turbine", "coral", "pagoda", "tundra", "banjo",
               "cobalt", "gazelle", "mosaic", "nebula", "prairie", "sonnet", "walnut", "zephyr"]
ASPECTS = ["history", "cost", "size", "origin", "location", "members", "risks", "benefits",
           "rules", "future", "climate", "design"]
FILLER_WORDS = ["often", "known", "across", "several", "regions", "since", "early", "records",
                "show", "many", "people", "visit", "during", "summer", "experts", "agree",
                "recent", "studies", "report", "notable"]
# each template names the entity slot once; "it" replaces the slot when the entity is omitted
QUERY_TEMPLATES = ["what is the {aspect} of {entity}",
                   "tell me about the {aspect} of {entity}",
                   "how about {entity} {aspect}",
                   "what do we know about {entity} {aspect}"]
PRONOUN = "it"


@dataclass(frozen=True)
class SyntheticSpec:
    n_topics: int = 12
    entities_per_topic: int = 6
    # number of sessions; every turn of a session becomes one conversation prefix
    n_conversations: int = 200
    queries_per_conversation: float = 6.9
    docs_per_entity: int = 4
    omission_rate: float = 0.5
    shift_rate: float = 0.2
    distractors_per_query: int = 3
    topic_words: int = 8
    doc_filler: int = 6
    seed: int = 0

    def __post_init__(self):
        for name in ("n_topics", "entities_per_topic", "n_conversations", "docs_per_entity", "topic_words"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.queries_per_conversation < 1:
            raise ConfigError(f"queries_per_conversation must be >= 1, got {self.queries_per_conversation}")
        if self.docs_per_entity > len(ASPECTS):
            raise ConfigError(f"docs_per_entity must be <= {len(ASPECTS)}, got {self.docs_per_entity}")
        for name in ("omission_rate", "shift_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {getattr(self, name)}")
        if self.distractors_per_query < 0 or self.doc_filler < 0:
            raise ConfigError("distractors_per_query and doc_filler must be >= 0")

    @property
    def n_entities(self) -> int:
        return self.n_topics * self.entities_per_topic

    @classmethod
    def from_config(cls, values: Mapping[str, str], seed: int) -> "SyntheticSpec":
        defaults = cls()
        return cls(n_topics=get_int(values, "n_topics", defaults.n_topics),
                   entities_per_topic=get_int(values, "entities_per_topic", defaults.entities_per_topic),
                   n_conversations=get_int(values, "n_conversations", defaults.n_conversations),
                   queries_per_conversation=get_float(values, "queries_per_conversation",
                                                      defaults.queries_per_conversation),
                   docs_per_entity=get_int(values, "docs_per_entity", defaults.docs_per_entity),
                   omission_rate=get_float(values, "omission_rate", defaults.omission_rate),
                   shift_rate=get_float(values, "shift_rate", defaults.shift_rate),
                   distractors_per_query=get_int(values, "distractors_per_query", defaults.distractors_per_query),
                   topic_words=get_int(values, "topic_words", defaults.topic_words),
                   doc_filler=get_int(values, "doc_filler", defaults.doc_filler),
                   seed=seed)


@dataclass(frozen=True)
class TurnTruth:
    """Hidden ground truth for one conversation prefix."""
    conv_id: str
    session_id: str
    turn: int
    topic: str
    entity: str
    aspect: str
    omitted: bool
    # index of the most recent earlier query naming the entity, when omitted
    referent_index: Optional[int]
    # turn indices where the session switched entity, within this prefix
    topic_boundaries: Tuple[int, ...] = ()

    def to_dict(self) -> Dict[str, object]:
        return {"conv_id": self.conv_id, "session_id": self.session_id, "turn": self.turn,
                "topic": self.topic, "entity": self.entity, "aspect": self.aspect,
                "omitted": self.omitted, "referent_index": self.referent_index,
                "topic_boundaries": list(self.topic_boundaries)}

    @classmethod
    def from_dict(cls, record: Mapping[str, object]) -> "TurnTruth":
        return cls(conv_id=str(record["conv_id"]), session_id=str(record["session_id"]),
                   turn=int(record["turn"]), topic=str(record["topic"]), entity=str(record["entity"]),
                   aspect=str(record["aspect"]), omitted=bool(record["omitted"]),
                   referent_index=None if record["referent_index"] is None else int(record["referent_index"]),
                   topic_boundaries=tuple(int(t) for t in record["topic_boundaries"]))


@dataclass
class SyntheticData:
    conversations: List[Conversation]
    corpus: List[Document]
    qrels: Qrels
    truth: List[TurnTruth] = field(default_factory=list)


def topic_stem(topic: int) -> str:
    stem = TOPIC_STEMS[topic % len(TOPIC_STEMS)]
    return stem if topic < len(TOPIC_STEMS) else f"{stem}{topic // len(TOPIC_STEMS)}x"

def entity_name(topic: int, entity: int) -> str:
    return f"{topic_stem(topic)}{entity}"

def doc_id_for(entity: str, aspect: str) -> str:
    return f"{entity}-{aspect}"

# One document per (entity, aspect) for the first docs_per_entity aspects
def build_corpus(spec: SyntheticSpec, rng: np.random.Generator) -> List[Document]:
    documents = []
    for topic in range(spec.n_topics):
        topic_vocab = [f"{topic_stem(topic)}_{w}" for w in range(spec.topic_words)]
        for e in range(spec.entities_per_topic):
            entity = entity_name(topic, e)
            for aspect in ASPECTS[:spec.docs_per_entity]:
                words = list(rng.choice(topic_vocab, size=3)) + list(rng.choice(FILLER_WORDS, size=spec.doc_filler))
                text = " ".join([entity, aspect] + words + [aspect, "of", entity])
                documents.append(Document(doc_id_for(entity, aspect), text))
    return documents

def _render(template: str, aspect: str, entity: str) -> str:
    return template.format(aspect=aspect, entity=entity)

def _session_length(spec: SyntheticSpec, rng: np.random.Generator) -> int:
    return max(2, 1 + int(rng.poisson(spec.queries_per_conversation - 1)))

def _qrels_for(spec: SyntheticSpec, topic: int, entity: str, aspect: str,
               rng: np.random.Generator) -> Dict[str, int]:
    grades = {doc_id_for(entity, a): 1 for a in ASPECTS[:spec.docs_per_entity] if a != aspect}
    grades[doc_id_for(entity, aspect)] = 2
    others = [entity_name(topic, e) for e in range(spec.entities_per_topic) if entity_name(topic, e) != entity]
    if others and spec.distractors_per_query:
        picks = rng.choice(len(others), size=min(spec.distractors_per_query, len(others)), replace=False)
        for i in sorted(picks):
            grades[doc_id_for(others[i], str(rng.choice(ASPECTS[:spec.docs_per_entity])))] = 0
    return grades

# Returns conversations (one per session turn), corpus, graded qrels and hidden truth.
# The first turn and every turn that switches entity name the entity; any
# other turn omits it with probability omission_rate.
def generate(spec: SyntheticSpec, verbose: bool = False) -> SyntheticData:
    rng = np.random.default_rng(spec.seed)
    corpus = build_corpus(spec, rng)
    conversations, truth, judgments = [], [], {}
    for s in range(spec.n_conversations):
        session_id = f"s{s:04d}"
        length = _session_length(spec, rng)
        topic = int(rng.integers(spec.n_topics))
        entity = entity_name(topic, int(rng.integers(spec.entities_per_topic)))
        shift_turn = None
        if spec.n_entities > 1 and rng.random() < spec.shift_rate:
            shift_turn = int(rng.integers(1, length))
        queries, boundaries = [], []
        last_mention = None
        for turn in range(length):
            if turn == shift_turn:
                choices = [t for t in range(spec.n_topics) if t != topic] or [topic]
                topic = int(rng.choice(choices))
                candidates = [entity_name(topic, e) for e in range(spec.entities_per_topic)
                              if entity_name(topic, e) != entity]
                entity = str(rng.choice(candidates))
                boundaries.append(turn)
            aspect = str(rng.choice(ASPECTS[:spec.docs_per_entity]))
            template = QUERY_TEMPLATES[int(rng.integers(len(QUERY_TEMPLATES)))]
            omitted = turn > 0 and turn != shift_turn and rng.random() < spec.omission_rate
            reformulated = _render(template, aspect, entity)
            queries.append(_render(template, aspect, PRONOUN) if omitted else reformulated)
            conv_id = f"{session_id}_{turn + 1}"
            conversations.append(Conversation(conv_id, tuple(queries), reformulated_last=reformulated,
                                              source_tag=session_id))
            truth.append(TurnTruth(conv_id, session_id, turn + 1, topic_stem(topic), entity, aspect, omitted,
                                   last_mention if omitted else None, tuple(boundaries)))
            judgments[conv_id] = _qrels_for(spec, topic, entity, aspect, rng)
            if not omitted:
                last_mention = turn
    if verbose:
        print(f"generated {spec.n_conversations} sessions, {len(conversations)} conversations, "
              f"{len(corpus)} documents")
    return SyntheticData(conversations, corpus, Qrels(judgments), truth)

# Vocabulary over every query, reformulation and document
def synthetic_vocabulary(data: SyntheticData) -> Vocabulary:
    return build_vocabulary(conversation_texts(data.conversations) + [d.text for d in data.corpus])

# (de-contextualized query, grade-2 document text) pairs for teacher pre-training
def teacher_pairs(conversations: Sequence[Conversation], corpus: Sequence[Document],
                  qrels: Qrels) -> List[Tuple[str, str]]:
    texts = {document.doc_id: document.text for document in corpus}
    pairs = []
    for conversation in conversations:
        query = conversation.reformulated_last or conversation.last_query
        for doc_id, grade in sorted(qrels.grades(conversation.conv_id).items()):
            if grade >= DEFAULT_POSITIVE_THRESHOLD and doc_id in texts:
                pairs.append((query, texts[doc_id]))
    return pairs

# Splits by session so every prefix of a session lands on the same side
def split_sessions(conversations: Sequence[Conversation], fraction: float,
                   seed: int) -> Tuple[List[Conversation], List[Conversation]]:
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    sessions = sorted({c.source_tag or c.conv_id for c in conversations})
    order = np.random.default_rng(seed).permutation(len(sessions))
    first = {sessions[i] for i in order[:int(round(fraction * len(sessions)))]}
    left = [c for c in conversations if (c.source_tag or c.conv_id) in first]
    right = [c for c in conversations if (c.source_tag or c.conv_id) not in first]
    return left, right

def write_truth(path: str, truth: Sequence[TurnTruth]) -> str:
    return write_jsonl(path, [t.to_dict() for t in truth])

def read_truth(path: str) -> List[TurnTruth]:
    truth = []
    for line_number, record in iter_jsonl(path):
        try:
            truth.append(TurnTruth.from_dict(record))
        except (KeyError, TypeError, ValueError) as err:
            raise DataFormatError(f"{path}:{line_number}: {err}")
    return truth

# Writes conversations, corpus, qrels and truth files into out_dir
def write_synthetic(out_dir: str, data: SyntheticData) -> Dict[str, str]:
    ensure_dir(out_dir)
    return {"conversations": write_conversations(os.path.join(out_dir, CONVERSATIONS_FILE), data.conversations),
            "corpus": write_corpus(os.path.join(out_dir, CORPUS_FILE), data.corpus),
            "qrels": write_qrels(data.qrels, os.path.join(out_dir, QRELS_FILE)),
            "truth": write_truth(os.path.join(out_dir, TRUTH_FILE), data.truth)}


################################################
# Tests
################################################

def test_spec_validation():
    for bad in (dict(entities_per_topic=0), dict(omission_rate=1.5), dict(docs_per_entity=99), dict(n_topics=0)):
        try:
            SyntheticSpec(**bad)
            assert False, f"ERROR: accepted {bad}"
        except ConfigError:
            pass
    spec = SyntheticSpec.from_config({"n_topics": "3", "omission_rate": "0.25"}, seed=4)
    assert spec.n_topics == 3 and spec.omission_rate == 0.25 and spec.seed == 4, "ERROR: from_config"

def test_no_omission():
    from task_builder import derive_reformulation_terms
    data = generate(SyntheticSpec(n_conversations=30, omission_rate=0.0, seed=1))
    for conversation in data.conversations:
        assert conversation.reformulated_last == conversation.last_query, "ERROR: reformulation differs"
        assert derive_reformulation_terms(conversation.last_query, conversation.reformulated_last) == frozenset(), \
            "ERROR: non-empty reformulation terms"
    assert not any(t.omitted for t in data.truth), "ERROR: planted omission at rate 0"

def test_referents_match_truth():
    from task_builder import derive_reformulation_terms, locate_referred_query
    data = generate(SyntheticSpec(n_conversations=220, omission_rate=1.0, seed=2))
    planted = [(c, t) for c, t in zip(data.conversations, data.truth) if t.omitted]
    assert len(planted) >= 1000, f"ERROR: only {len(planted)} planted omissions"
    for conversation, truth in planted[:1000]:
        r = derive_reformulation_terms(conversation.last_query, conversation.reformulated_last)
        assert r == frozenset([truth.entity]), f"ERROR: reformulation terms {r}"
        label = locate_referred_query(conversation, r)
        assert label.found, f"ERROR: no referent in {conversation.conv_id}"
        assert label.target_index == truth.referent_index, f"ERROR: referent of {conversation.conv_id}"
        # exhaustive scan for the most recent earlier query naming the entity
        mentions = [j for j, q in enumerate(conversation.queries[:-1]) if truth.entity in q.split()]
        assert mentions and mentions[-1] == truth.referent_index, "ERROR: brute-force referent"

def test_qrels_cover_conversations():
    data = generate(SyntheticSpec(n_conversations=20, seed=3))
    ids = {c.conv_id for c in data.conversations}
    assert set(data.qrels.query_ids) == ids, "ERROR: qrels and conversations differ"
    doc_ids = {d.doc_id for d in data.corpus}
    for query_id, doc_id, grade in data.qrels.items():
        assert doc_id in doc_ids, f"ERROR: judged doc {doc_id} missing from corpus"
    for conversation, truth in zip(data.conversations, data.truth):
        assert data.qrels.grade(conversation.conv_id, doc_id_for(truth.entity, truth.aspect)) == 2, \
            "ERROR: relevant document grade"
        assert truth.turn == conversation.n, "ERROR: prefix length"
    vocab = synthetic_vocabulary(data)
    assert 50 <= vocab.size <= 500, f"ERROR: vocabulary size {vocab.size}"

def test_topic_shift_boundaries():
    data = generate(SyntheticSpec(n_conversations=40, shift_rate=1.0, seed=5))
    finals = {}
    for truth in data.truth:
        finals[truth.session_id] = truth
    for truth in finals.values():
        assert len(truth.topic_boundaries) == 1, "ERROR: one planted shift per session"
        boundary = truth.topic_boundaries[0]
        assert 1 <= boundary < truth.turn, "ERROR: boundary position"
    shifted = [t for t in data.truth if t.topic_boundaries and t.turn - 1 == t.topic_boundaries[-1]]
    assert shifted and not any(t.omitted for t in shifted), "ERROR: entity omitted on a shift turn"

def test_determinism():
    spec = SyntheticSpec(n_conversations=15, seed=9)
    with tempfile.TemporaryDirectory() as tmp:
        paths_a = write_synthetic(os.path.join(tmp, "a"), generate(spec))
        paths_b = write_synthetic(os.path.join(tmp, "b"), generate(spec))
        for key in paths_a:
            with open(paths_a[key], "rb") as fa, open(paths_b[key], "rb") as fb:
                assert fa.read() == fb.read(), f"ERROR: {key} bytes differ"
        loaded = read_truth(paths_a["truth"])
    assert loaded == generate(spec).truth, "ERROR: truth round trip"

def test_teacher_pairs_and_split():
    data = generate(SyntheticSpec(n_conversations=20, seed=6))
    pairs = teacher_pairs(data.conversations, data.corpus, data.qrels)
    assert len(pairs) == len(data.conversations), "ERROR: one grade-2 document per conversation"
    left, right = split_sessions(data.conversations, 0.5, seed=0)
    assert len(left) + len(right) == len(data.conversations), "ERROR: split lost conversations"
    assert not {c.source_tag for c in left} & {c.source_tag for c in right}, "ERROR: session split across sides"

def tests():
    test_spec_validation()
    test_no_omission()
    test_referents_match_truth()
    test_qrels_cover_conversations()
    test_topic_shift_boundaries()
    test_determinism()
    test_teacher_pairs_and_split()
    print("all tests passed in", os.path.basename(__file__))

def main():
    tests()

if __name__ == "__main__":
    main()
