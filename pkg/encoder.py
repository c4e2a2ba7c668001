import os
import math
import hashlib
import torch
import torch.nn as nn
from dataclasses import dataclass, asdict
from typing import Dict, Mapping, Sequence, Tuple, Union
from config_utils import get_int, get_float, get_bool, get_str, ConfigError
from data_model import ModelInput, Vocabulary, build_single_input
from constants import *

WR_SOURCES = ("cls", "sep")


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    hidden_size: int = DEFAULT_HIDDEN_SIZE
    layers: int = DEFAULT_LAYERS
    heads: int = DEFAULT_HEADS
    ff_size: int = DEFAULT_FF_SIZE
    max_positions: int = DEFAULT_MAX_POSITIONS
    dropout: float = DEFAULT_DROPOUT
    use_position_embeddings: bool = True
    # input of the word-reconstruction head: E_[CLS] or the last utterance's E_[SEP]
    wr_source: str = "cls"

    def __post_init__(self):
        for name in ("vocab_size", "hidden_size", "layers", "heads", "ff_size", "max_positions"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.vocab_size <= len(SPECIAL_TOKENS):
            raise ConfigError(f"vocab_size must exceed the {len(SPECIAL_TOKENS)} special tokens")
        if self.hidden_size % self.heads != 0:
            raise ConfigError(f"heads ({self.heads}) must divide hidden_size ({self.hidden_size})")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.wr_source not in WR_SOURCES:
            raise ConfigError(f"wr_source must be one of {WR_SOURCES}, got {self.wr_source}")

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)

    @classmethod
    def from_dict(cls, record: Mapping[str, object]) -> "EncoderConfig":
        return cls(**dict(record))

    @classmethod
    def from_config(cls, values: Mapping[str, str], vocab_size: int) -> "EncoderConfig":
        return cls(vocab_size=vocab_size,
                   hidden_size=get_int(values, "hidden_size", DEFAULT_HIDDEN_SIZE),
                   layers=get_int(values, "layers", DEFAULT_LAYERS),
                   heads=get_int(values, "heads", DEFAULT_HEADS),
                   ff_size=get_int(values, "ff_size", DEFAULT_FF_SIZE),
                   max_positions=get_int(values, "max_positions", DEFAULT_MAX_POSITIONS),
                   dropout=get_float(values, "dropout", DEFAULT_DROPOUT),
                   use_position_embeddings=get_bool(values, "use_position_embeddings", True),
                   wr_source=get_str(values, "wr_source", "cls"))


@dataclass
class EncoderOutput:
    hidden_states: torch.Tensor
    cls_vector: torch.Tensor
    sep_vectors: torch.Tensor


@dataclass
class TeacherOutput:
    cls_vector: torch.Tensor


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, hidden_size: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.head_size = hidden_size // heads
        self.query = nn.Linear(hidden_size, hidden_size)
        self.key = nn.Linear(hidden_size, hidden_size)
        self.value = nn.Linear(hidden_size, hidden_size)
        self.output = nn.Linear(hidden_size, hidden_size)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        batch, length, _ = x.shape
        return x.view(batch, length, self.heads, self.head_size).transpose(1, 2)

    # pad_mask: [batch, length], True at [PAD] positions (never attended to)
    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        batch, length, hidden = x.shape
        q, k, v = self._split(self.query(x)), self._split(self.key(x)), self._split(self.value(x))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_size)
        scores = scores.masked_fill(pad_mask[:, None, None, :], torch.finfo(scores.dtype).min)
        weights = self.dropout(torch.softmax(scores, dim=-1))
        context = (weights @ v).transpose(1, 2).reshape(batch, length, hidden)
        return self.output(context)


class EncoderBlock(nn.Module):
    """Post-LN transformer block: attention and GELU feed-forward, each with residual + LayerNorm."""

    def __init__(self, hidden_size: int, heads: int, ff_size: int, dropout: float):
        super().__init__()
        self.attention = MultiHeadSelfAttention(hidden_size, heads, dropout)
        self.attention_norm = nn.LayerNorm(hidden_size)
        self.feed_forward = nn.Sequential(
            nn.Linear(hidden_size, ff_size),
            nn.GELU(),
            nn.Linear(ff_size, hidden_size),
        )
        self.feed_forward_norm = nn.LayerNorm(hidden_size)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        x = self.attention_norm(x + self.dropout(self.attention(x, pad_mask)))
        return self.feed_forward_norm(x + self.dropout(self.feed_forward(x)))


def _init_weights(module: nn.Module):
    if isinstance(module, (nn.Linear, nn.Embedding)):
        nn.init.trunc_normal_(module.weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)
        if isinstance(module, nn.Linear) and module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class ConversationalEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.frozen = False
        self.token_embeddings = nn.Embedding(config.vocab_size, config.hidden_size)
        self.position_embeddings = None
        if config.use_position_embeddings:
            self.position_embeddings = nn.Embedding(config.max_positions, config.hidden_size)
        self.embedding_norm = nn.LayerNorm(config.hidden_size)
        self.dropout = nn.Dropout(config.dropout)
        self.blocks = nn.ModuleList([
            EncoderBlock(config.hidden_size, config.heads, config.ff_size, config.dropout)
            for _ in range(config.layers)
        ])
        self.apply(_init_weights)

    def forward(self, token_ids: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        x = self.token_embeddings(token_ids)
        if self.position_embeddings is not None:
            positions = torch.arange(token_ids.shape[1], device=token_ids.device)
            x = x + self.position_embeddings(positions)[None, :, :]
        x = self.dropout(self.embedding_norm(x))
        for block in self.blocks:
            x = block(x, pad_mask)
        return x

    # Stops gradients into every parameter and disables dropout for good
    def freeze(self) -> "ConversationalEncoder":
        for parameter in self.parameters():
            parameter.requires_grad_(False)
        self.frozen = True
        return self.eval()

    def train(self, mode: bool = True) -> "ConversationalEncoder":
        return super().train(mode and not self.frozen)


class SSPHeads(nn.Module):
    def __init__(self, hidden_size: int, vocab_size: int):
        super().__init__()
        self.topic = nn.Linear(hidden_size, 1)
        self.coref = nn.Linear(hidden_size, 1)
        self.word = nn.Linear(hidden_size, vocab_size)
        self.apply(_init_weights)


class SSPModel(nn.Module):
    """Student conversational encoder with the topic, coreference and word heads."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.encoder = ConversationalEncoder(config)
        self.heads = SSPHeads(config.hidden_size, config.vocab_size)

    def forward(self, token_ids: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        return self.encoder(token_ids, pad_mask)


def build_student(config: EncoderConfig, seed: int) -> SSPModel:
    torch.manual_seed(seed)
    return SSPModel(config)

def build_teacher(config: EncoderConfig, seed: int) -> ConversationalEncoder:
    torch.manual_seed(seed)
    return ConversationalEncoder(config)

def as_encoder(model: Union[SSPModel, ConversationalEncoder]) -> ConversationalEncoder:
    return model.encoder if isinstance(model, SSPModel) else model


InputLike = Union[ModelInput, Sequence[int]]

def _token_ids(item: InputLike) -> Sequence[int]:
    return item.token_ids if isinstance(item, ModelInput) else item

def validate_input(token_ids: Sequence[int], config: EncoderConfig):
    if len(token_ids) == 0:
        raise ValueError("cannot encode an empty input")
    if len(token_ids) > config.max_positions:
        raise ValueError(f"input length {len(token_ids)} exceeds max_positions {config.max_positions}")
    bad = [t for t in token_ids if t < 0 or t >= config.vocab_size]
    if bad:
        raise ValueError(f"token ids {bad[:5]} outside [0, {config.vocab_size})")

# Returns (token ids [batch, length], pad mask [batch, length]) right-padded with [PAD]
def collate(inputs: Sequence[InputLike]) -> Tuple[torch.Tensor, torch.Tensor]:
    sequences = [list(_token_ids(item)) for item in inputs]
    length = max(len(ids) for ids in sequences)
    token_ids = torch.full((len(sequences), length), PAD_ID, dtype=torch.long)
    pad_mask = torch.ones((len(sequences), length), dtype=torch.bool)
    for row, ids in enumerate(sequences):
        token_ids[row, :len(ids)] = torch.tensor(ids, dtype=torch.long)
        pad_mask[row, :len(ids)] = False
    return token_ids, pad_mask

def encode_batch(model: Union[SSPModel, ConversationalEncoder],
                 inputs: Sequence[InputLike]) -> Tuple[torch.Tensor, torch.Tensor]:
    encoder = as_encoder(model)
    for item in inputs:
        validate_input(_token_ids(item), encoder.config)
    token_ids, pad_mask = collate(inputs)
    device = next(encoder.parameters()).device
    return encoder(token_ids.to(device), pad_mask.to(device)), pad_mask

def encode(model: Union[SSPModel, ConversationalEncoder], model_input: ModelInput) -> EncoderOutput:
    hidden, _ = encode_batch(model, [model_input])
    hidden = hidden[0, :model_input.length]
    sep_index = torch.tensor(model_input.sep_positions, dtype=torch.long, device=hidden.device)
    return EncoderOutput(hidden_states=hidden, cls_vector=hidden[0], sep_vectors=hidden[sep_index])

def predict_topic(sep_vectors: torch.Tensor, heads: SSPHeads) -> torch.Tensor:
    if sep_vectors.shape[0] == 0:
        raise ValueError("predict_topic needs at least one [SEP] vector")
    return torch.sigmoid(heads.topic(sep_vectors)).squeeze(-1)

def predict_coref(sep_vectors: torch.Tensor, heads: SSPHeads) -> torch.Tensor:
    if sep_vectors.shape[0] == 0:
        raise ValueError("predict_coref needs at least one context [SEP] vector")
    return torch.sigmoid(heads.coref(sep_vectors)).squeeze(-1)

def reconstruct_words(vector: torch.Tensor, heads: SSPHeads) -> torch.Tensor:
    return torch.sigmoid(heads.word(vector))

# E*_[CLS] for a batch of teacher inputs; never carries gradient
def encode_teacher_batch(teacher: ConversationalEncoder, inputs: Sequence[InputLike]) -> torch.Tensor:
    with torch.no_grad():
        hidden, _ = encode_batch(teacher, inputs)
    return hidden[:, 0].detach()

def encode_teacher(q_star: str, teacher: ConversationalEncoder, vocab: Vocabulary,
                   max_len: int = DEFAULT_MAX_LEN) -> TeacherOutput:
    teacher_input = build_single_input(q_star, vocab, max_len)
    return TeacherOutput(cls_vector=encode_teacher_batch(teacher, [teacher_input])[0])

# sha256 over every named parameter and buffer, in registration order
def param_checksum(module: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in list(module.named_parameters()) + list(module.named_buffers()):
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()

def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


################################################
# Tests
################################################

def _toy_config(**overrides) -> EncoderConfig:
    values = dict(vocab_size=12, hidden_size=8, layers=2, heads=2, ff_size=16, max_positions=16, dropout=0.0)
    values.update(overrides)
    return EncoderConfig(**values)

def _toy_input() -> ModelInput:
    return ModelInput(token_ids=(CLS_ID, 4, 5, SEP_ID, 6, 7, 8, SEP_ID), sep_positions=(3, 7),
                      utterance_spans=((1, 3), (4, 7)))

def test_encoder_config():
    for bad in [dict(heads=3), dict(wr_source="mean"), dict(vocab_size=4), dict(dropout=1.0)]:
        try:
            _toy_config(**bad)
            assert False, f"ERROR: accepted {bad}"
        except ConfigError:
            pass
    config = _toy_config()
    assert EncoderConfig.from_dict(config.to_dict()) == config, "ERROR: config round trip"

def test_encode_shapes():
    model = build_student(_toy_config(), seed=0).eval()
    output = encode(model, _toy_input())
    assert tuple(output.hidden_states.shape) == (8, 8), f"ERROR: shape {tuple(output.hidden_states.shape)}"
    assert torch.equal(output.cls_vector, output.hidden_states[0]), "ERROR: cls row"
    assert torch.equal(output.sep_vectors[1], output.hidden_states[7]), "ERROR: sep rows"
    assert torch.isfinite(output.hidden_states).all(), "ERROR: non-finite output"
    again = encode(model, _toy_input())
    assert torch.equal(output.hidden_states, again.hidden_states), "ERROR: inference must be deterministic"

def test_position_sensitivity():
    model = build_student(_toy_config(), seed=1).eval()
    base = _toy_input()
    swapped = ModelInput(token_ids=(CLS_ID, 5, 4, SEP_ID, 6, 7, 8, SEP_ID), sep_positions=(3, 7),
                         utterance_spans=((1, 3), (4, 7)))
    assert not torch.allclose(encode(model, base).hidden_states, encode(model, swapped).hidden_states), \
        "ERROR: swapping tokens must change the output"

def test_permutation_covariance_without_positions():
    model = build_student(_toy_config(layers=1, use_position_embeddings=False), seed=2).eval()
    base = encode(model, _toy_input()).hidden_states
    swapped_input = ModelInput(token_ids=(CLS_ID, 4, 5, SEP_ID, 7, 6, 8, SEP_ID), sep_positions=(3, 7),
                               utterance_spans=((1, 3), (4, 7)))
    swapped = encode(model, swapped_input).hidden_states
    order = [0, 1, 2, 3, 5, 4, 6, 7]
    assert torch.allclose(base[order], swapped, atol=1e-6), "ERROR: rows must swap with the tokens"

def test_padding_invariance():
    model = build_student(_toy_config(), seed=3).eval()
    short = ModelInput(token_ids=(CLS_ID, 4, SEP_ID), sep_positions=(2,), utterance_spans=((1, 2),))
    alone, _ = encode_batch(model, [short])
    batched, pad_mask = encode_batch(model, [short, _toy_input()])
    assert pad_mask[0].tolist() == [False] * 3 + [True] * 5, "ERROR: pad mask"
    assert torch.allclose(alone[0], batched[0, :3], atol=1e-6), "ERROR: padding changed the output"

def test_validate_input():
    config = _toy_config()
    for bad in [[CLS_ID, 12], [CLS_ID] * 17, []]:
        try:
            validate_input(bad, config)
            assert False, f"ERROR: accepted {bad}"
        except ValueError:
            pass

def test_heads():
    heads = SSPHeads(hidden_size=4, vocab_size=6)
    # topic 4 + 1, coref 4 + 1, word 6 x 4 + 6
    assert count_parameters(heads) == 40, f"ERROR: head parameter count {count_parameters(heads)}"
    vectors = torch.tensor([[1.0, 2.0, 3.0, 4.0], [0.0, -1.0, 0.5, 2.0]])
    with torch.no_grad():
        for head in (heads.topic, heads.coref, heads.word):
            head.weight.zero_()
            head.bias.zero_()
    assert torch.allclose(predict_topic(vectors, heads), torch.full((2,), 0.5)), "ERROR: zero topic head"
    assert torch.allclose(predict_coref(vectors[:1], heads), torch.full((1,), 0.5)), "ERROR: zero coref head"
    words = reconstruct_words(vectors[0], heads)
    assert words.shape == (6,) and torch.allclose(words, torch.full((6,), 0.5)), "ERROR: zero word head"
    with torch.no_grad():
        heads.topic.bias.fill_(10.0)
    assert (predict_topic(vectors, heads) > 0.99).all(), "ERROR: saturated topic head"
    with torch.no_grad():
        heads.coref.weight.copy_(torch.tensor([[0.1, -0.2, 0.3, 0.05]]))
        heads.coref.bias.fill_(0.1)
    expected = 1.0 / (1.0 + math.exp(-(0.1 - 0.4 + 0.9 + 0.2 + 0.1)))
    assert abs(predict_coref(vectors[:1], heads).item() - expected) < 1e-6, "ERROR: coref dot product"
    weight = torch.arange(24, dtype=torch.float32).reshape(6, 4) / 24.0 - 0.5
    bias = torch.linspace(-0.3, 0.2, 6)
    with torch.no_grad():
        heads.word.weight.copy_(weight)
        heads.word.bias.copy_(bias)
    v = vectors[1]
    for i in range(6):
        z = sum(weight[i, j].item() * v[j].item() for j in range(4)) + bias[i].item()
        assert abs(reconstruct_words(v, heads)[i].item() - 1.0 / (1.0 + math.exp(-z))) < 1e-6, \
            f"ERROR: word head entry {i}"

def test_teacher():
    vocab = Vocabulary(SPECIAL_TOKENS + [f"w{i}" for i in range(8)])
    teacher = build_teacher(_toy_config(), seed=4).freeze()
    first = encode_teacher("w1 w2 w3", teacher, vocab, max_len=16)
    second = encode_teacher("w1 w2 w3", teacher, vocab, max_len=16)
    assert first.cls_vector.shape == (8,) and torch.equal(first.cls_vector, second.cls_vector), "ERROR: frozen teacher"
    student = build_student(_toy_config(), seed=5)
    before = param_checksum(teacher)
    loss = (encode(student, _toy_input()).cls_vector - first.cls_vector).pow(2).sum()
    loss.backward()
    assert all(p.grad is None for p in teacher.parameters()), "ERROR: gradient reached the teacher"
    assert param_checksum(teacher) == before, "ERROR: teacher changed"
    teacher.train()
    assert not teacher.training, "ERROR: a frozen teacher must stay in inference mode"

def tests():
    test_encoder_config()
    test_encode_shapes()
    test_position_sensitivity()
    test_permutation_covariance_without_positions()
    test_padding_invariance()
    test_validate_input()
    test_heads()
    test_teacher()
    print("all tests passed in", os.path.basename(__file__))

def main():
    tests()

if __name__ == "__main__":
    main()
