import os
import string
import hashlib
import tempfile
from collections import Counter
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple
from utils import DataFormatError, iter_jsonl, write_jsonl, atomic_write_text, is_readable_file
from constants import *

PUNCTUATION = string.punctuation


def normalize_whitespace(text: str) -> str:
    return " ".join(text.split())

# Lowercases, splits on whitespace and strips leading/trailing punctuation from
# each token. Internal punctuation stays, so "real-time" is one token.
def tokenize(text: str) -> List[str]:
    tokens = []
    for raw in text.lower().split():
        token = raw.strip(PUNCTUATION)
        if token:
            tokens.append(token)
    return tokens

def to_word_set(tokens: Iterable[str]) -> FrozenSet[str]:
    return frozenset(tokens)


@dataclass(frozen=True)
class Conversation:
    conv_id: str
    queries: Tuple[str, ...]
    reformulated_last: Optional[str] = None
    source_tag: str = ""

    def __post_init__(self):
        object.__setattr__(self, "queries", tuple(self.queries))
        if not self.conv_id:
            raise ValueError("conversation has an empty conv_id")
        if len(self.queries) == 0:
            raise ValueError(f"conversation {self.conv_id} has no queries")
        for i, query in enumerate(self.queries):
            if not isinstance(query, str) or not normalize_whitespace(query):
                raise ValueError(f"conversation {self.conv_id} has an empty utterance at position {i}")
        if self.reformulated_last is not None and not normalize_whitespace(self.reformulated_last):
            raise ValueError(f"conversation {self.conv_id} has an empty reformulated_last")

    @property
    def n(self) -> int:
        return len(self.queries)

    @property
    def last_query(self) -> str:
        return self.queries[-1]

    def to_dict(self) -> Dict[str, object]:
        record = {"conv_id": self.conv_id, "queries": list(self.queries)}
        if self.reformulated_last is not None:
            record["reformulated_last"] = self.reformulated_last
        if self.source_tag:
            record["source_tag"] = self.source_tag
        return record

    @classmethod
    def from_dict(cls, record: Mapping[str, object]) -> "Conversation":
        queries = record.get("queries")
        if not isinstance(queries, list):
            raise ValueError("queries must be a list of strings")
        return cls(conv_id=str(record.get("conv_id", "")),
                   queries=tuple(queries),
                   reformulated_last=record.get("reformulated_last"),
                   source_tag=str(record.get("source_tag", "") or ""))


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str

    def __post_init__(self):
        if not self.doc_id:
            raise ValueError("document has an empty doc_id")
        if not isinstance(self.text, str) or not normalize_whitespace(self.text):
            raise ValueError(f"document {self.doc_id} has empty text")

    def to_dict(self) -> Dict[str, str]:
        return {"doc_id": self.doc_id, "text": self.text}


class Vocabulary:
    """Frozen bijection between tokens and dense ids, specials at ids 0..3."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[:len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise ValueError(f"vocabulary must start with {SPECIAL_TOKENS}")
        mapping = {}
        for idx, token in enumerate(tokens):
            if not token or token != token.strip() or " " in token:
                raise ValueError(f"invalid vocabulary token at id {idx}: {token!r}")
            if token in mapping:
                raise ValueError(f"duplicate vocabulary token: {token}")
            mapping[token] = idx
        self._tokens = tuple(tokens)
        self._token_to_id = MappingProxyType(mapping)

    @property
    def token_to_id(self) -> Mapping[str, int]:
        return self._token_to_id

    @property
    def tokens(self) -> Tuple[str, ...]:
        return self._tokens

    @property
    def size(self) -> int:
        return len(self._tokens)

    def __len__(self) -> int:
        return self.size

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def lookup(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def id_to_token(self, idx: int) -> str:
        return self._tokens[idx]

    def encode(self, tokens: Iterable[str]) -> List[int]:
        return [self.lookup(token) for token in tokens]

    def hash(self) -> str:
        return hashlib.sha256("\n".join(self._tokens).encode("utf-8")).hexdigest()

    # one token per line, line number = id
    def save(self, path: str) -> str:
        return atomic_write_text(path, "".join(token + "\n" for token in self._tokens))

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        if not is_readable_file(path):
            raise DataFormatError(f"cannot read vocabulary {path}")
        with open(path, "r", encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f]
        while tokens and tokens[-1] == "":
            tokens.pop()
        try:
            return cls(tokens)
        except ValueError as err:
            raise DataFormatError(f"{path}: {err}")


# Counts tokens over texts; keeps tokens seen at least min_freq times,
# ordered by descending count then ascending token.
def build_vocabulary(texts: Iterable[str], min_freq: int = DEFAULT_MIN_FREQ) -> Vocabulary:
    if min_freq < 1:
        raise ValueError(f"min_freq must be >= 1, got {min_freq}")
    counts = Counter()
    for text in texts:
        counts.update(tokenize(text))
    for special in SPECIAL_TOKENS:
        counts.pop(special, None)
    kept = [token for token, count in counts.items() if count >= min_freq]
    kept.sort(key=lambda token: (-counts[token], token))
    return Vocabulary(SPECIAL_TOKENS + kept)

# Every text a vocabulary should cover: all queries and reformulations
def conversation_texts(conversations: Iterable[Conversation]) -> List[str]:
    texts = []
    for conversation in conversations:
        texts.extend(conversation.queries)
        if conversation.reformulated_last is not None:
            texts.append(conversation.reformulated_last)
    return texts


@dataclass(frozen=True)
class ModelInput:
    token_ids: Tuple[int, ...]
    sep_positions: Tuple[int, ...]
    utterance_spans: Tuple[Tuple[int, int], ...]
    truncated: bool = False
    # index in the source conversation of the first surviving utterance
    first_utterance: int = 0
    cls_position: int = field(default=0, init=False)

    @property
    def length(self) -> int:
        return len(self.token_ids)

    @property
    def utterance_count(self) -> int:
        return len(self.utterance_spans)

    def to_dict(self) -> Dict[str, object]:
        return {"token_ids": list(self.token_ids),
                "sep_positions": list(self.sep_positions),
                "utterance_spans": [list(span) for span in self.utterance_spans],
                "truncated": self.truncated,
                "first_utterance": self.first_utterance}

    @classmethod
    def from_dict(cls, record: Mapping[str, object]) -> "ModelInput":
        return cls(token_ids=tuple(int(x) for x in record["token_ids"]),
                   sep_positions=tuple(int(x) for x in record["sep_positions"]),
                   utterance_spans=tuple((int(s), int(e)) for s, e in record["utterance_spans"]),
                   truncated=bool(record.get("truncated", False)),
                   first_utterance=int(record.get("first_utterance", 0)))


# Trims utterance token lists from the front until [CLS] + utterances + one
# [SEP] per utterance fits max_len. Tokens go from the earliest utterance
# first; an utterance (and its [SEP]) is dropped only once all of its tokens
# are gone. The final utterance is never touched.
# Returns (surviving utterances, index of the first survivor, truncated).
def truncate_front(utterance_ids: Sequence[Sequence[int]], max_len: int) -> Tuple[List[List[int]], int, bool]:
    if len(utterance_ids) == 0:
        raise ValueError("cannot truncate an empty utterance list")
    final_needed = 1 + len(utterance_ids[-1]) + 1
    if final_needed > max_len:
        raise ValueError(f"final utterance needs {final_needed} tokens but max_len is {max_len}")
    kept = [list(ids) for ids in utterance_ids]
    total = 1 + sum(len(ids) + 1 for ids in kept)
    if total <= max_len:
        return kept, 0, False

    excess = total - max_len
    first = 0
    while excess > 0:
        current = kept[first]
        if excess >= len(current):
            excess -= len(current) + 1
            first += 1
        else:
            kept[first] = current[excess:]
            excess = 0
    return kept[first:], first, True

def assemble_model_input(utterance_ids: Sequence[Sequence[int]], first_utterance: int = 0,
                         truncated: bool = False) -> ModelInput:
    token_ids = [CLS_ID]
    sep_positions = []
    spans = []
    for ids in utterance_ids:
        start = len(token_ids)
        token_ids.extend(ids)
        spans.append((start, len(token_ids)))
        sep_positions.append(len(token_ids))
        token_ids.append(SEP_ID)
    return ModelInput(token_ids=tuple(token_ids), sep_positions=tuple(sep_positions),
                      utterance_spans=tuple(spans), truncated=truncated,
                      first_utterance=first_utterance)

# [CLS] q_1 [SEP] q_2 [SEP] ... q_n [SEP], front-truncated to max_len
def build_model_input(conversation: Conversation, vocab: Vocabulary, max_len: int) -> ModelInput:
    if max_len < MIN_MAX_LEN:
        raise ValueError(f"max_len must be >= {MIN_MAX_LEN}, got {max_len}")
    utterance_ids = [vocab.encode(tokenize(query)) for query in conversation.queries]
    kept, first_utterance, truncated = truncate_front(utterance_ids, max_len)
    return assemble_model_input(kept, first_utterance, truncated)

# [CLS] + tokens of text, no [SEP]; used for reformulated queries and documents
def build_single_input(text: str, vocab: Vocabulary, max_len: int) -> ModelInput:
    if max_len < 2:
        raise ValueError(f"max_len must be >= 2, got {max_len}")
    ids = vocab.encode(tokenize(text))
    truncated = len(ids) > max_len - 1
    ids = ids[:max_len - 1]
    return ModelInput(token_ids=tuple([CLS_ID] + ids), sep_positions=(),
                      utterance_spans=((1, 1 + len(ids)),), truncated=truncated)


def read_conversations(path: str) -> List[Conversation]:
    conversations = []
    seen = set()
    for line_number, record in iter_jsonl(path):
        try:
            conversation = Conversation.from_dict(record)
        except (ValueError, TypeError) as err:
            raise DataFormatError(f"{path}:{line_number}: {err}")
        if conversation.conv_id in seen:
            raise DataFormatError(f"{path}:{line_number}: duplicate conv_id {conversation.conv_id}")
        seen.add(conversation.conv_id)
        conversations.append(conversation)
    return conversations

def write_conversations(path: str, conversations: Iterable[Conversation]) -> str:
    return write_jsonl(path, [conversation.to_dict() for conversation in conversations])

def read_corpus(path: str) -> List[Document]:
    documents = []
    seen = set()
    for line_number, record in iter_jsonl(path):
        try:
            document = Document(doc_id=str(record.get("doc_id", "")), text=record.get("text"))
        except (ValueError, TypeError) as err:
            raise DataFormatError(f"{path}:{line_number}: {err}")
        if document.doc_id in seen:
            raise DataFormatError(f"{path}:{line_number}: duplicate doc_id {document.doc_id}")
        seen.add(document.doc_id)
        documents.append(document)
    return documents

def write_corpus(path: str, documents: Iterable[Document]) -> str:
    return write_jsonl(path, [document.to_dict() for document in documents])


################################################
# Tests
################################################

def _toy_vocab(words: Sequence[str]) -> Vocabulary:
    return Vocabulary(SPECIAL_TOKENS + list(words))

def _numbered_words(count: int, prefix: str = "w") -> List[str]:
    return [f"{prefix}{i}" for i in range(count)]

def test_tokenize():
    assert tokenize("Is it treatable?") == ["is", "it", "treatable"], "ERROR: tokenize question"
    assert tokenize("") == [], "ERROR: empty text"
    assert tokenize("What is a real-time database?") == ["what", "is", "a", "real-time", "database"], \
        "ERROR: hyphenated word must stay whole"
    assert tokenize("  (Hello),   WORLD!! ") == ["hello", "world"], "ERROR: punctuation strip"
    assert tokenize("... ? !") == [], "ERROR: punctuation-only text"

def test_to_word_set():
    assert to_word_set(["cancer", "throat", "cancer"]) == {"cancer", "throat"}, "ERROR: dedup"
    assert to_word_set([]) == frozenset(), "ERROR: empty set"
    expected = {"is", "throat", "cancer", "the", "same", "as", "esophageal"}
    result = to_word_set(tokenize("Is throat cancer the same as esophageal cancer?"))
    assert result == expected, f"ERROR: got {result}"

def test_conversation_validation():
    for bad in [dict(conv_id="c", queries=()), dict(conv_id="c", queries=("ok", "   ")),
                dict(conv_id="", queries=("ok",)), dict(conv_id="c", queries=("ok",), reformulated_last=" ")]:
        try:
            Conversation(**bad)
            assert False, f"ERROR: accepted {bad}"
        except ValueError:
            pass
    conversation = Conversation("c1", ["a b", "c"], reformulated_last="c a")
    assert conversation.n == 2 and conversation.last_query == "c", "ERROR: n / last query"
    assert Conversation.from_dict(conversation.to_dict()) == conversation, "ERROR: dict round trip"

def test_vocabulary():
    vocab = build_vocabulary(["b a b", "c b a", "d"], min_freq=1)
    assert vocab.tokens[:4] == tuple(SPECIAL_TOKENS), "ERROR: specials first"
    assert vocab.tokens[4:] == ("b", "a", "c", "d"), f"ERROR: order {vocab.tokens}"
    for token in vocab.tokens:
        assert vocab.id_to_token(vocab.token_to_id[token]) == token, f"ERROR: round trip {token}"
    assert sorted(vocab.token_to_id.values()) == list(range(vocab.size)), "ERROR: ids not dense"
    assert vocab.lookup("zzz") == UNK_ID, "ERROR: unknown token must map to [UNK]"
    assert build_vocabulary(["b a b", "c b a", "d"], min_freq=2).tokens[4:] == ("b", "a"), "ERROR: min_freq"
    try:
        Vocabulary(SPECIAL_TOKENS + ["a", "a"])
        assert False, "ERROR: duplicate token accepted"
    except ValueError:
        pass

def test_vocabulary_file():
    vocab = build_vocabulary(["what is a real-time database"])
    with tempfile.TemporaryDirectory() as tmp:
        path = vocab.save(os.path.join(tmp, "vocab.txt"))
        loaded = Vocabulary.load(path)
        with open(path, "r", encoding="utf-8") as f:
            assert f.readline() == "[CLS]\n", "ERROR: first line must be [CLS]"
    assert loaded.tokens == vocab.tokens and loaded.hash() == vocab.hash(), "ERROR: vocab file round trip"

def test_build_model_input():
    vocab = _toy_vocab(["a", "b", "c"])
    model_input = build_model_input(Conversation("c1", ("a b", "c")), vocab, max_len=16)
    a, b, c = vocab.lookup("a"), vocab.lookup("b"), vocab.lookup("c")
    assert model_input.token_ids == (CLS_ID, a, b, SEP_ID, c, SEP_ID), f"ERROR: ids {model_input.token_ids}"
    assert model_input.sep_positions == (3, 5), f"ERROR: seps {model_input.sep_positions}"
    assert model_input.utterance_spans == ((1, 3), (4, 5)), f"ERROR: spans {model_input.utterance_spans}"
    assert model_input.truncated is False, "ERROR: truncated flag"
    unknown = build_model_input(Conversation("c2", ("a zzz",)), vocab, max_len=16)
    assert unknown.token_ids == (CLS_ID, a, UNK_ID, SEP_ID), "ERROR: [UNK] mapping"

def test_build_model_input_no_overflow():
    words = _numbered_words(30)
    vocab = _toy_vocab(words)
    conversation = Conversation("c", (" ".join(words[:10]), " ".join(words[10:20]), " ".join(words[20:])))
    model_input = build_model_input(conversation, vocab, max_len=10_000)
    assert model_input.truncated is False and model_input.utterance_count == 3, "ERROR: huge max_len"
    assert model_input == build_model_input(conversation, vocab, max_len=10_000), "ERROR: not deterministic"

def test_truncation_by_four():
    words = _numbered_words(15)
    vocab = _toy_vocab(words)
    # lengths 6, 5, 4 -> total 1 + 7 + 6 + 5 = 19; max_len 15 drops 4 leading tokens
    conversation = Conversation("c", (" ".join(words[:6]), " ".join(words[6:11]), " ".join(words[11:])))
    model_input = build_model_input(conversation, vocab, max_len=15)
    expected_ids = [CLS_ID] + vocab.encode(words[4:6]) + [SEP_ID] + vocab.encode(words[6:11]) + [SEP_ID] \
        + vocab.encode(words[11:]) + [SEP_ID]
    assert list(model_input.token_ids) == expected_ids, f"ERROR: ids {model_input.token_ids}"
    assert model_input.sep_positions == (3, 9, 14), f"ERROR: seps {model_input.sep_positions}"
    assert model_input.utterance_spans == ((1, 3), (4, 9), (10, 14)), f"ERROR: spans {model_input.utterance_spans}"
    assert model_input.truncated and model_input.first_utterance == 0, "ERROR: truncation flags"

def test_truncation_drops_whole_utterance():
    kept, first, truncated = truncate_front([[10, 11, 12, 13], [14, 15], [16]], max_len=9)
    # total 1 + 5 + 3 + 2 = 11, excess 2 -> first loses two tokens
    assert kept == [[12, 13], [14, 15], [16]] and first == 0 and truncated, f"ERROR: {kept}"
    kept, first, truncated = truncate_front([[10, 11, 12, 13], [14, 15], [16]], max_len=7)
    # excess 4 exactly consumes utterance 1 -> its [SEP] goes too
    assert kept == [[14, 15], [16]] and first == 1 and truncated, f"ERROR: {kept}"
    vocab = _toy_vocab(["a", "b", "c", "d", "e", "f", "g"])
    model_input = build_model_input(Conversation("c", ("a b c d", "e f", "g")), vocab, max_len=8)
    assert model_input.sep_positions == (3, 5), f"ERROR: re-indexed seps {model_input.sep_positions}"
    assert model_input.first_utterance == 1, "ERROR: first surviving utterance"
    kept, first, truncated = truncate_front([[1, 2], [3]], max_len=10)
    assert kept == [[1, 2], [3]] and first == 0 and not truncated, "ERROR: identity when it fits"

def test_truncation_length_contract():
    words = _numbered_words(296)
    vocab = _toy_vocab(words)
    # 100 + 98 + 98 tokens -> 1 + 101 + 99 + 99 = 300 total
    queries = (" ".join(words[:100]), " ".join(words[100:198]), " ".join(words[198:]))
    model_input = build_model_input(Conversation("c", queries), vocab, max_len=256)
    assert model_input.length == 256, f"ERROR: length {model_input.length}"
    start, end = model_input.utterance_spans[-1]
    assert list(model_input.token_ids[start:end]) == vocab.encode(words[198:]), "ERROR: final utterance altered"
    assert model_input.token_ids.count(SEP_ID) == len(model_input.sep_positions) == 3, "ERROR: [SEP] count"
    for position in model_input.sep_positions:
        assert model_input.token_ids[position] == SEP_ID, "ERROR: sep position does not hold [SEP]"

def test_oversized_final_query():
    vocab = _toy_vocab(_numbered_words(20))
    try:
        build_model_input(Conversation("c", ("w1", " ".join(_numbered_words(20)))), vocab, max_len=16)
        assert False, "ERROR: oversized final query accepted"
    except ValueError as err:
        assert "final utterance" in str(err), f"ERROR: message {err}"
    try:
        build_model_input(Conversation("c", ("w1",)), vocab, max_len=4)
        assert False, "ERROR: max_len below minimum accepted"
    except ValueError:
        pass

def test_build_single_input():
    vocab = _toy_vocab(["is", "throat", "cancer"])
    model_input = build_single_input("Is throat cancer?", vocab, max_len=8)
    assert model_input.token_ids == (CLS_ID, 4, 5, 6) and model_input.sep_positions == (), "ERROR: single input"
    short = build_single_input("is throat cancer", vocab, max_len=3)
    assert short.token_ids == (CLS_ID, 4, 5) and short.truncated, "ERROR: single input truncation"

def test_read_files():
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, CONVERSATIONS_FILE)
        atomic_write_text(path, '{"conv_id": "c1", "queries": ["a", "b"], "reformulated_last": "b a"}\n'
                                '{"conv_id": "c2", "queries": []}\n')
        try:
            read_conversations(path)
            assert False, "ERROR: empty queries accepted"
        except DataFormatError as err:
            assert ":2:" in str(err), f"ERROR: line number missing in {err}"
        corpus_path = write_corpus(os.path.join(tmp, CORPUS_FILE), [Document("d1", "some text")])
        assert read_corpus(corpus_path) == [Document("d1", "some text")], "ERROR: corpus round trip"

def tests():
    test_tokenize()
    test_to_word_set()
    test_conversation_validation()
    test_vocabulary()
    test_vocabulary_file()
    test_build_model_input()
    test_build_model_input_no_overflow()
    test_truncation_by_four()
    test_truncation_drops_whole_utterance()
    test_truncation_length_contract()
    test_oversized_final_query()
    test_build_single_input()
    test_read_files()
    print("all tests passed in", os.path.basename(__file__))

def main():
    tests()

if __name__ == "__main__":
    main()
