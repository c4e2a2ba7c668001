import os
import tempfile
import numpy as np
import pandas as pd
from dataclasses import dataclass
from typing import Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple
from tqdm import tqdm
from utils import SSPError, DataFormatError, iter_jsonl, write_jsonl
from config_utils import get_int, get_float, get_list, ConfigError
from data_frame_utils import save_data_frame, load_data_frame, is_empty_data_frame
from data_model import (Conversation, Vocabulary, ModelInput, tokenize, to_word_set,
                        build_model_input, build_single_input, normalize_whitespace,
                        build_vocabulary, conversation_texts)
from constants import *


class NoisePoolError(SSPError):
    pass


@dataclass(frozen=True)
class TaskConfig:
    max_len: int = DEFAULT_MAX_LEN
    perturb_prob: float = DEFAULT_PERTURB_PROB
    min_noise_pool: int = DEFAULT_MIN_NOISE_POOL
    tasks: Tuple[str, ...] = ALL_TASKS

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if self.max_len < MIN_MAX_LEN:
            raise ConfigError(f"max_len must be >= {MIN_MAX_LEN}, got {self.max_len}")
        if not 0.0 <= self.perturb_prob <= 1.0:
            raise ConfigError(f"perturb_prob must be in [0, 1], got {self.perturb_prob}")
        if self.min_noise_pool < 1:
            raise ConfigError(f"min_noise_pool must be >= 1, got {self.min_noise_pool}")
        unknown = [task for task in self.tasks if task not in ALL_TASKS]
        if unknown:
            raise ConfigError(f"unknown tasks {unknown}, expected a subset of {list(ALL_TASKS)}")

    # the topic task is the only consumer of perturbation
    @property
    def perturbation_enabled(self) -> bool:
        return "ts" in self.tasks and self.perturb_prob > 0.0

    def without(self, task: str) -> "TaskConfig":
        return TaskConfig(self.max_len, self.perturb_prob, self.min_noise_pool,
                          tuple(t for t in self.tasks if t != task))

    @classmethod
    def from_config(cls, values: Mapping[str, str]) -> "TaskConfig":
        return cls(max_len=get_int(values, "max_len", DEFAULT_MAX_LEN),
                   perturb_prob=get_float(values, "perturb_prob", DEFAULT_PERTURB_PROB),
                   min_noise_pool=get_int(values, "min_noise_pool", DEFAULT_MIN_NOISE_POOL),
                   tasks=tuple(get_list(values, "tasks", list(ALL_TASKS))))


@dataclass(frozen=True)
class PerturbedConversation:
    conversation: Conversation
    topic_labels: Tuple[int, ...]
    k: int
    noise_source_id: str


@dataclass(frozen=True)
class CoreferenceLabel:
    label: Tuple[int, ...]
    reformulation_terms: FrozenSet[str]
    found: bool

    @property
    def target_index(self) -> Optional[int]:
        return self.label.index(1) if self.found else None


@dataclass(frozen=True)
class BowTarget:
    # sorted vocabulary ids whose entry in y^w is 1
    ids: Tuple[int, ...]
    size: int

    def vector(self) -> np.ndarray:
        vector = np.zeros(self.size, dtype=np.float32)
        vector[list(self.ids)] = 1.0
        return vector


@dataclass(frozen=True)
class LossMask:
    topic: bool
    coref: bool
    wr: bool
    kd: bool

    def to_dict(self) -> Dict[str, bool]:
        return {"topic": self.topic, "coref": self.coref, "wr": self.wr, "kd": self.kd}


@dataclass(frozen=True)
class TrainingInstance:
    conv_id: str
    model_input: ModelInput
    bow_target: BowTarget
    loss_mask: LossMask
    # aligned with the utterances present in model_input
    topic_labels: Optional[Tuple[int, ...]] = None
    # one entry per context utterance of model_input (every utterance but the last)
    coref_targets: Tuple[int, ...] = ()
    # computed on the raw conversation, before perturbation and truncation
    coref_label: Optional[CoreferenceLabel] = None
    teacher_input: Optional[ModelInput] = None
    k: int = 0
    noise_source_id: Optional[str] = None

    def to_dict(self) -> Dict[str, object]:
        coref = self.coref_label
        return {
            "conv_id": self.conv_id,
            "token_ids": list(self.model_input.token_ids),
            "sep_positions": list(self.model_input.sep_positions),
            "utterance_spans": [list(span) for span in self.model_input.utterance_spans],
            "first_utterance": self.model_input.first_utterance,
            "truncated": self.model_input.truncated,
            "k": self.k,
            "noise_source_id": self.noise_source_id,
            "topic_labels": [] if self.topic_labels is None else list(self.topic_labels),
            "coref_targets": list(self.coref_targets),
            "coref_present": coref is not None,
            "coref_label": [] if coref is None else list(coref.label),
            "coref_found": False if coref is None else coref.found,
            "reformulation_terms": [] if coref is None else sorted(coref.reformulation_terms),
            "bow_ids": list(self.bow_target.ids),
            "vocab_size": self.bow_target.size,
            "teacher_ids": [] if self.teacher_input is None else list(self.teacher_input.token_ids),
            "teacher_truncated": False if self.teacher_input is None else self.teacher_input.truncated,
            "mask_topic": self.loss_mask.topic,
            "mask_coref": self.loss_mask.coref,
            "mask_wr": self.loss_mask.wr,
            "mask_kd": self.loss_mask.kd,
        }

    @classmethod
    def from_dict(cls, record: Mapping[str, object]) -> "TrainingInstance":
        model_input = ModelInput.from_dict(record)
        teacher_ids = [int(x) for x in record["teacher_ids"]]
        teacher_input = None
        if teacher_ids:
            teacher_input = ModelInput(token_ids=tuple(teacher_ids), sep_positions=(),
                                       utterance_spans=((1, len(teacher_ids)),),
                                       truncated=bool(record.get("teacher_truncated", False)))
        coref_label = None
        if bool(record["coref_present"]):
            coref_label = CoreferenceLabel(label=tuple(int(x) for x in record["coref_label"]),
                                           reformulation_terms=frozenset(str(x) for x in record["reformulation_terms"]),
                                           found=bool(record["coref_found"]))
        mask = LossMask(topic=bool(record["mask_topic"]), coref=bool(record["mask_coref"]),
                        wr=bool(record["mask_wr"]), kd=bool(record["mask_kd"]))
        noise_source_id = record.get("noise_source_id")
        return cls(conv_id=str(record["conv_id"]),
                   model_input=model_input,
                   bow_target=BowTarget(tuple(int(x) for x in record["bow_ids"]), int(record["vocab_size"])),
                   loss_mask=mask,
                   topic_labels=tuple(int(x) for x in record["topic_labels"]) if mask.topic else None,
                   coref_targets=tuple(int(x) for x in record["coref_targets"]),
                   coref_label=coref_label,
                   teacher_input=teacher_input,
                   k=int(record["k"]),
                   noise_source_id=None if noise_source_id is None or pd.isna(noise_source_id) else str(noise_source_id))


# p_k = (1/k) / H_m for k in 1..m
def reciprocal_probabilities(m: int) -> np.ndarray:
    if m < 1:
        raise ValueError(f"noise session length m must be >= 1, got {m}")
    weights = 1.0 / np.arange(1, m + 1, dtype=np.float64)
    return weights / weights.sum()

def sample_noise_length(m: int, rng: np.random.Generator) -> int:
    probabilities = reciprocal_probabilities(m)
    return int(rng.choice(np.arange(1, m + 1), p=probabilities))

# Grafts the first k queries of noise in front of raw. k is sampled from the
# reciprocal distribution over 1..len(noise) unless forced.
def build_perturbed_conversation(raw: Conversation, noise: Conversation, rng: np.random.Generator,
                                 k: Optional[int] = None) -> PerturbedConversation:
    if noise.conv_id == raw.conv_id:
        raise ValueError(f"noise session must differ from the raw conversation ({raw.conv_id})")
    if k is None:
        k = sample_noise_length(noise.n, rng)
    if not 1 <= k <= noise.n:
        raise ValueError(f"k must be in [1, {noise.n}], got {k}")
    queries = tuple(noise.queries[:k]) + tuple(raw.queries)
    conversation = Conversation(conv_id=raw.conv_id, queries=queries,
                                reformulated_last=raw.reformulated_last, source_tag=raw.source_tag)
    return PerturbedConversation(conversation=conversation,
                                 topic_labels=tuple([1] * k + [0] * raw.n),
                                 k=k, noise_source_id=noise.conv_id)

# r = S(tokenize(q*_n)) - S(tokenize(q_n))
def derive_reformulation_terms(q_n: str, q_star_n: str) -> FrozenSet[str]:
    if not normalize_whitespace(q_n) or not normalize_whitespace(q_star_n):
        raise ValueError("both the last query and its reformulation must be non-empty")
    return to_word_set(tokenize(q_star_n)) - to_word_set(tokenize(q_n))

# Scans utterances n-1 down to 1 and marks the first whose word set intersects r
def locate_referred_query(conversation: Conversation, r: FrozenSet[str]) -> CoreferenceLabel:
    if conversation.n < 2:
        raise ValueError(f"conversation {conversation.conv_id} needs at least 2 utterances to locate a referent")
    label = [0] * (conversation.n - 1)
    if r:
        for j in range(conversation.n - 2, -1, -1):
            if to_word_set(tokenize(conversation.queries[j])) & r:
                label[j] = 1
                return CoreferenceLabel(tuple(label), frozenset(r), True)
    return CoreferenceLabel(tuple(label), frozenset(r), False)

# y^w over the raw queries; specials and [UNK] stay 0
def build_bow_target(conversation: Conversation, vocab: Vocabulary) -> BowTarget:
    ids = set()
    for query in conversation.queries:
        ids.update(vocab.encode(tokenize(query)))
    return BowTarget(tuple(sorted(i for i in ids if i >= len(SPECIAL_TOKENS))), vocab.size)

# Conversations that may serve as off-topic noise for raw
def eligible_noise(raw: Conversation, noise_pool: Sequence[Conversation]) -> List[Conversation]:
    return [candidate for candidate in noise_pool
            if candidate.conv_id != raw.conv_id
            and not (raw.source_tag and candidate.source_tag == raw.source_tag)]

def build_training_instance(raw: Conversation, noise_pool: Sequence[Conversation], vocab: Vocabulary,
                            config: TaskConfig, rng: np.random.Generator) -> TrainingInstance:
    perturbed = None
    if config.perturbation_enabled and rng.random() < config.perturb_prob:
        candidates = eligible_noise(raw, noise_pool)
        if len(candidates) < config.min_noise_pool:
            raise NoisePoolError(f"noise pool for {raw.conv_id} has {len(candidates)} eligible sessions, "
                                 f"need at least {config.min_noise_pool}")
        noise = candidates[int(rng.integers(len(candidates)))]
        perturbed = build_perturbed_conversation(raw, noise, rng)

    k = 0 if perturbed is None else perturbed.k
    source = raw if perturbed is None else perturbed.conversation
    model_input = build_model_input(source, vocab, config.max_len)
    first = model_input.first_utterance

    topic_labels = None
    if perturbed is not None:
        topic_labels = perturbed.topic_labels[first:]

    # coref label on the raw conversation, shifted by k into the input's context utterances
    coref_label = None
    coref_targets = [0] * (model_input.utterance_count - 1)
    coref_usable = False
    if raw.reformulated_last is not None:
        r = derive_reformulation_terms(raw.last_query, raw.reformulated_last)
        if raw.n >= 2:
            coref_label = locate_referred_query(raw, r)
        else:
            coref_label = CoreferenceLabel((), r, False)
        if coref_label.found:
            position = k + coref_label.target_index - first
            if position >= 0:
                coref_targets[position] = 1
                coref_usable = True

    teacher_input = None
    if raw.reformulated_last is not None:
        teacher_input = build_single_input(raw.reformulated_last, vocab, config.max_len)

    mask = LossMask(topic=perturbed is not None,
                    coref="ci" in config.tasks and coref_usable,
                    wr="wr" in config.tasks,
                    kd="kd" in config.tasks and teacher_input is not None)
    return TrainingInstance(conv_id=raw.conv_id,
                            model_input=model_input,
                            bow_target=build_bow_target(raw, vocab),
                            loss_mask=mask,
                            topic_labels=topic_labels,
                            coref_targets=tuple(coref_targets),
                            coref_label=coref_label,
                            teacher_input=teacher_input,
                            k=k,
                            noise_source_id=None if perturbed is None else perturbed.noise_source_id)

# Instance i draws from default_rng([seed, i]) so output is independent of worker order
def build_training_instances(conversations: Sequence[Conversation], noise_pool: Sequence[Conversation],
                             vocab: Vocabulary, config: TaskConfig, seed: int,
                             verbose: bool = False) -> List[TrainingInstance]:
    instances = []
    for i, raw in enumerate(tqdm(conversations, desc="build instances", disable=not verbose)):
        rng = np.random.default_rng([seed, i])
        instances.append(build_training_instance(raw, noise_pool, vocab, config, rng))
    return instances


def write_instances(path: str, instances: Sequence[TrainingInstance]) -> str:
    return write_jsonl(path, [instance.to_dict() for instance in instances])

def read_instances(path: str) -> List[TrainingInstance]:
    instances = []
    for line_number, record in iter_jsonl(path):
        try:
            instances.append(TrainingInstance.from_dict(record))
        except (KeyError, TypeError, ValueError) as err:
            raise DataFormatError(f"{path}:{line_number}: malformed training instance ({err})")
    return instances

# parquet copy of the instances for fast reloads
def write_instance_cache(path: str, instances: Sequence[TrainingInstance]) -> str:
    return save_data_frame(path, pd.DataFrame([instance.to_dict() for instance in instances]))

def read_instance_cache(path: str) -> List[TrainingInstance]:
    df = load_data_frame(path)
    if is_empty_data_frame(df):
        raise DataFormatError(f"instance cache {path} is missing or empty")
    return [TrainingInstance.from_dict(row) for row in df.to_dict(orient="records")]

# Returns a frame (k, count, empirical, theoretical) over k = 1..m. With
# noise_lengths (the length of each instance's noise session) the theoretical
# column is the mixture of their reciprocal distributions.
def noise_length_histogram(ks: Sequence[int], m: int,
                           noise_lengths: Optional[Sequence[int]] = None) -> pd.DataFrame:
    theoretical = reciprocal_probabilities(m)
    if noise_lengths:
        mixture = np.zeros(m)
        for length in noise_lengths:
            mixture[:length] += reciprocal_probabilities(length)
        theoretical = mixture / len(noise_lengths)
    counts = np.bincount(np.asarray(ks, dtype=np.int64), minlength=m + 1)[1:m + 1]
    total = max(int(counts.sum()), 1)
    return pd.DataFrame({"k": np.arange(1, m + 1), "count": counts,
                         "empirical": counts / total, "theoretical": theoretical})

def instance_stats(instances: Sequence[TrainingInstance]) -> pd.DataFrame:
    n = len(instances)
    with_coref = [i for i in instances if i.coref_label is not None]
    row = {
        "instances": n,
        "perturbed": sum(1 for i in instances if i.k > 0),
        "truncated": sum(1 for i in instances if i.model_input.truncated),
        "with_reformulation": len(with_coref),
        "coref_found": sum(1 for i in with_coref if i.coref_label.found),
        "coref_found_fraction": (sum(1 for i in with_coref if i.coref_label.found) / len(with_coref)) if with_coref else 0.0,
        "mask_topic": sum(1 for i in instances if i.loss_mask.topic),
        "mask_coref": sum(1 for i in instances if i.loss_mask.coref),
        "mask_wr": sum(1 for i in instances if i.loss_mask.wr),
        "mask_kd": sum(1 for i in instances if i.loss_mask.kd),
        "mean_k": float(np.mean([i.k for i in instances if i.k > 0])) if any(i.k > 0 for i in instances) else 0.0,
    }
    return pd.DataFrame([row])


################################################
# Tests
################################################

TOPIC_31 = Conversation("31_8", (
    "What is throat cancer?",
    "Is it treatable?",
    "Tell me about lung cancer.",
    "What are its symptoms?",
    "Can it spread to the throat?",
    "What causes throat cancer?",
    "What is the first sign of it?",
    "Is it the same as esophageal cancer?",
), reformulated_last="Is throat cancer the same as esophageal cancer?", source_tag="31")

TOPIC_58 = Conversation("58_4", (
    "What is a real-time database?",
    "How does it differ from traditional ones?",
    "What are the advantages of real-time processing?",
    "What are examples of important ones?",
), reformulated_last="What are examples of important real-time databases?", source_tag="58")

def _vocab_for(*conversations: Conversation) -> Vocabulary:
    return build_vocabulary(conversation_texts(conversations))

def test_reciprocal_probabilities():
    assert np.allclose(reciprocal_probabilities(1), [1.0]), "ERROR: m=1"
    assert np.allclose(reciprocal_probabilities(3), [6 / 11, 3 / 11, 2 / 11]), "ERROR: m=3"
    p5 = reciprocal_probabilities(5)
    assert abs(p5[0] - 60 / 137) < 1e-12 and abs(p5[4] - 12 / 137) < 1e-12, f"ERROR: m=5 {p5}"
    try:
        sample_noise_length(0, np.random.default_rng(0))
        assert False, "ERROR: m=0 accepted"
    except ValueError:
        pass

def test_sample_noise_length_distribution():
    rng = np.random.default_rng(1234)
    assert all(sample_noise_length(1, rng) == 1 for _ in range(20)), "ERROR: m=1 must give k=1"
    ks = [sample_noise_length(5, rng) for _ in range(100_000)]
    histogram = noise_length_histogram(ks, 5)
    deviation = (histogram["empirical"] - histogram["theoretical"]).abs().max()
    assert deviation <= 0.01, f"ERROR: empirical k distribution deviates by {deviation}"
    assert histogram["count"].sum() == 100_000, "ERROR: histogram count"
    mixed = noise_length_histogram([1, 1, 2], 2, noise_lengths=[1, 2, 2])
    assert np.allclose(mixed["theoretical"], [7 / 9, 2 / 9]), "ERROR: mixture of noise session lengths"

def test_build_perturbed_conversation():
    rng = np.random.default_rng(0)
    raw = Conversation("raw", ("a b", "c"))
    noise = Conversation("noise", ("x", "y", "z"))
    perturbed = build_perturbed_conversation(raw, noise, rng, k=2)
    assert perturbed.conversation.queries == ("x", "y", "a b", "c"), "ERROR: graft order"
    assert perturbed.topic_labels == (1, 1, 0, 0), f"ERROR: labels {perturbed.topic_labels}"
    single = build_perturbed_conversation(raw, Conversation("n2", ("x",)), rng, k=1)
    assert single.topic_labels == (1, 0, 0) and sum(single.topic_labels) == single.k, "ERROR: k=1 labels"
    try:
        build_perturbed_conversation(raw, raw, rng)
        assert False, "ERROR: self noise accepted"
    except ValueError:
        pass
    sampled = build_perturbed_conversation(raw, noise, rng)
    assert 1 <= sampled.k <= 3 and len(sampled.topic_labels) == sampled.k + raw.n, "ERROR: sampled k"

def test_derive_reformulation_terms():
    r = derive_reformulation_terms(TOPIC_31.last_query, TOPIC_31.reformulated_last)
    assert r == {"throat"}, f"ERROR: topic 31 terms {r}"
    assert derive_reformulation_terms("same text", "Same text!") == frozenset(), "ERROR: identical"
    r = derive_reformulation_terms(TOPIC_58.last_query, TOPIC_58.reformulated_last)
    assert r == {"real-time", "databases"}, f"ERROR: topic 58 terms {r}"
    assert not (r & to_word_set(tokenize(TOPIC_58.last_query))), "ERROR: r must be disjoint from q_n"

def test_locate_referred_query():
    label = locate_referred_query(TOPIC_31, frozenset({"throat"}))
    assert label.found and label.label == (0, 0, 0, 0, 0, 1, 0), f"ERROR: topic 31 {label.label}"
    assert locate_referred_query(TOPIC_31, frozenset()).found is False, "ERROR: empty r"
    missing = locate_referred_query(TOPIC_31, frozenset({"zzz"}))
    assert not missing.found and sum(missing.label) == 0, "ERROR: absent r"
    label = locate_referred_query(TOPIC_58, frozenset({"real-time", "databases"}))
    assert label.target_index == 2, f"ERROR: topic 58 {label.label}"

def test_locate_matches_brute_force():
    rng = np.random.default_rng(7)
    words = ["a", "b", "c", "d", "e"]
    for trial in range(200):
        n = int(rng.integers(2, 7))
        queries = tuple(" ".join(rng.choice(words, size=int(rng.integers(1, 4)))) for _ in range(n))
        r = frozenset(rng.choice(words, size=int(rng.integers(0, 3)), replace=False))
        label = locate_referred_query(Conversation(f"c{trial}", queries), r)
        matches = [j for j in range(n - 1) if set(tokenize(queries[j])) & r]
        expected = max(matches) if matches else None
        assert label.target_index == expected, f"ERROR: trial {trial} got {label.target_index} want {expected}"

def test_build_bow_target():
    vocab = Vocabulary(SPECIAL_TOKENS + ["a", "b", "c"])
    bow = build_bow_target(Conversation("c", ("a b a", "!!")), vocab)
    assert bow.ids == (4, 5) and list(bow.vector()) == [0, 0, 0, 0, 1, 1, 0], f"ERROR: bow {bow}"
    unknown = build_bow_target(Conversation("c", ("zzz a",)), vocab)
    assert unknown.ids == (4,), "ERROR: [UNK] must be excluded"
    reordered = build_bow_target(Conversation("c", ("a", "b a b")), vocab)
    assert reordered == bow, "ERROR: bow must ignore order and repetition"
    vocab58 = _vocab_for(TOPIC_58, TOPIC_31)
    bow58 = build_bow_target(TOPIC_58, vocab58)
    expected = set()
    for query in TOPIC_58.queries:
        expected |= set(tokenize(query))
    assert {vocab58.id_to_token(i) for i in bow58.ids} == expected, "ERROR: topic 58 bow"
    assert vocab58.lookup("throat") not in bow58.ids, "ERROR: unrelated token set"

def test_build_training_instance_shift():
    raw = Conversation("raw", ("alpha beta", "gamma", "it delta"), reformulated_last="beta delta", source_tag="s1")
    noise = Conversation("noise", ("xx yy",), source_tag="s2")
    vocab = _vocab_for(raw, noise)
    config = TaskConfig(max_len=64)
    instance = build_training_instance(raw, [noise], vocab, config, np.random.default_rng(3))
    assert instance.k == 1 and instance.noise_source_id == "noise", "ERROR: forced single noise utterance"
    assert instance.coref_label.label == (1, 0), f"ERROR: raw label {instance.coref_label.label}"
    assert instance.coref_targets == (0, 1, 0), f"ERROR: shifted targets {instance.coref_targets}"
    assert instance.topic_labels == (1, 0, 0, 0), f"ERROR: topic labels {instance.topic_labels}"
    assert instance.loss_mask == LossMask(True, True, True, True), f"ERROR: mask {instance.loss_mask}"
    assert instance.teacher_input.token_ids[0] == CLS_ID and not instance.teacher_input.sep_positions, \
        "ERROR: teacher input must be [CLS] + q*"

def test_build_training_instance_masks():
    raw = Conversation("raw", ("alpha", "beta"), source_tag="s1")
    noise = Conversation("noise", ("xx",), source_tag="s2")
    vocab = _vocab_for(raw, noise)
    instance = build_training_instance(raw, [noise], vocab, TaskConfig(max_len=32), np.random.default_rng(0))
    assert instance.loss_mask == LossMask(True, False, True, False), f"ERROR: mask {instance.loss_mask}"
    assert instance.teacher_input is None, "ERROR: teacher input without reformulation"
    plain = build_training_instance(raw, [noise], vocab, TaskConfig(max_len=32, perturb_prob=0.0),
                                    np.random.default_rng(0))
    assert plain.topic_labels is None and plain.loss_mask.topic is False and plain.k == 0, "ERROR: no perturbation"
    no_ts = build_training_instance(raw, [noise], vocab, TaskConfig(max_len=32).without("ts"), np.random.default_rng(0))
    assert no_ts.k == 0 and not no_ts.loss_mask.topic, "ERROR: dropping ts must disable perturbation"
    try:
        build_training_instance(raw, [Conversation("other", ("zz",), source_tag="s1")], vocab,
                                TaskConfig(max_len=32), np.random.default_rng(0))
        assert False, "ERROR: same-session noise accepted"
    except NoisePoolError:
        pass

def test_truncated_referent_is_masked():
    # 1 + 2 + 5 + 2 = 10 tokens; max_len 8 drops "alpha" and its [SEP]
    raw = Conversation("raw", ("alpha", "beta beta beta beta", "it"), reformulated_last="alpha it", source_tag="s1")
    vocab = _vocab_for(raw)
    instance = build_training_instance(raw, [], vocab, TaskConfig(max_len=8, perturb_prob=0.0),
                                       np.random.default_rng(0))
    assert instance.model_input.first_utterance == 1, "ERROR: first utterance must be dropped"
    assert instance.coref_label.found and not instance.loss_mask.coref, "ERROR: truncated referent must be masked"
    assert len(instance.coref_targets) == instance.model_input.utterance_count - 1, "ERROR: coref target length"

def test_instance_files():
    conversations = [TOPIC_31, TOPIC_58]
    vocab = _vocab_for(*conversations)
    instances = build_training_instances(conversations, conversations, vocab, TaskConfig(max_len=64), seed=5)
    again = build_training_instances(conversations, conversations, vocab, TaskConfig(max_len=64), seed=5)
    assert instances == again, "ERROR: instance construction is not deterministic"
    with tempfile.TemporaryDirectory() as tmp:
        jsonl = write_instances(os.path.join(tmp, INSTANCES_FILE), instances)
        cache = write_instance_cache(os.path.join(tmp, INSTANCES_CACHE_FILE), instances)
        assert read_instances(jsonl) == instances, "ERROR: jsonl round trip"
        assert read_instance_cache(cache) == instances, "ERROR: parquet round trip"
    stats = instance_stats(instances)
    assert int(stats["instances"].iloc[0]) == 2 and int(stats["coref_found"].iloc[0]) == 2, "ERROR: stats"

def tests():
    test_reciprocal_probabilities()
    test_sample_noise_length_distribution()
    test_build_perturbed_conversation()
    test_derive_reformulation_terms()
    test_locate_referred_query()
    test_locate_matches_brute_force()
    test_build_bow_target()
    test_build_training_instance_shift()
    test_build_training_instance_masks()
    test_truncated_referent_is_masked()
    test_instance_files()
    print("all tests passed in", os.path.basename(__file__))

def main():
    tests()

if __name__ == "__main__":
    main()
