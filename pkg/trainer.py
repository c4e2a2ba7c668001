import os
import json
import hashlib
import tempfile
import numpy as np
import pandas as pd
import torch
import torch.nn as nn
from dataclasses import dataclass, asdict, field, replace
from typing import Dict, List, Optional, Mapping, Sequence, Tuple
from tqdm import tqdm
from utils import SSPError, ensure_dir
from config_utils import get_int, get_float, get_bool, get_optional_float, config_hash, ConfigError
from data_frame_utils import save_data_frame
from data_model import Conversation, Vocabulary, build_single_input
from task_builder import TaskConfig, TrainingInstance, LossMask, build_training_instances
from encoder import (EncoderConfig, SSPModel, ConversationalEncoder, build_student, build_teacher,
                     encode_batch, encode_teacher_batch, predict_topic, predict_coref, reconstruct_words,
                     param_checksum)
from objectives import LossWeights, LossReport, NonFiniteLossError, loss_ts, loss_ci, loss_wr, loss_kd, loss_final
from constants import *

PHASES = ("teacher", "post-train", "fine-tune")


class CheckpointFormatError(SSPError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    seed: int
    learning_rate: float = DEFAULT_LEARNING_RATE
    batch_size: int = DEFAULT_BATCH_SIZE
    post_train_epochs: int = DEFAULT_POST_TRAIN_EPOCHS
    fine_tune_epochs: int = DEFAULT_FINE_TUNE_EPOCHS
    weights: LossWeights = field(default_factory=LossWeights)
    grad_clip: Optional[float] = None
    squared_norms: bool = False
    teacher_epochs: int = DEFAULT_TEACHER_EPOCHS
    teacher_learning_rate: float = DEFAULT_TEACHER_LEARNING_RATE
    # in-batch negatives of teacher pre-training; batch_size when unset
    teacher_batch_size: Optional[int] = None
    # start the student encoder from the teacher's weights (heads stay random)
    init_from_teacher: bool = True

    def __post_init__(self):
        if self.learning_rate < 0 or self.teacher_learning_rate < 0:
            raise ConfigError("learning rates must be >= 0")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.teacher_batch_size is not None and self.teacher_batch_size < 1:
            raise ConfigError(f"teacher_batch_size must be >= 1, got {self.teacher_batch_size}")
        for name in ("post_train_epochs", "fine_tune_epochs", "teacher_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be positive, got {self.grad_clip}")

    @property
    def pretrain_batch_size(self) -> int:
        return self.batch_size if self.teacher_batch_size is None else self.teacher_batch_size

    def to_dict(self) -> Dict[str, object]:
        values = asdict(self)
        values.update(values.pop("weights"))
        return values

    def replace(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    @classmethod
    def from_config(cls, values: Mapping[str, str], seed: int) -> "TrainConfig":
        return cls(seed=seed,
                   learning_rate=get_float(values, "learning_rate", DEFAULT_LEARNING_RATE),
                   batch_size=get_int(values, "batch_size", DEFAULT_BATCH_SIZE),
                   post_train_epochs=get_int(values, "post_train_epochs", DEFAULT_POST_TRAIN_EPOCHS),
                   fine_tune_epochs=get_int(values, "fine_tune_epochs", DEFAULT_FINE_TUNE_EPOCHS),
                   weights=LossWeights.from_config(values),
                   grad_clip=get_optional_float(values, "grad_clip"),
                   squared_norms=get_bool(values, "squared_norms", False),
                   teacher_epochs=get_int(values, "teacher_epochs", DEFAULT_TEACHER_EPOCHS),
                   teacher_learning_rate=get_float(values, "teacher_learning_rate", DEFAULT_TEACHER_LEARNING_RATE),
                   teacher_batch_size=get_int(values, "teacher_batch_size") if values.get("teacher_batch_size") else None,
                   init_from_teacher=get_bool(values, "init_from_teacher", True))


@dataclass
class CheckpointMeta:
    phase: str
    step: int = 0
    epoch: int = 0
    step_in_epoch: int = 0
    config_hash: str = ""
    # fingerprint of the training instances the run consumed
    data_hash: str = ""
    metrics: Dict[str, float] = field(default_factory=dict)


@dataclass
class Checkpoint:
    encoder_config: EncoderConfig
    vocab: Vocabulary
    teacher: ConversationalEncoder
    meta: CheckpointMeta
    student: Optional[SSPModel] = None
    optimizer_state: Optional[dict] = None
    rng_state: Optional[torch.Tensor] = None
    # per-step loss rows of the run so far, carried across resumes
    history: List[Dict[str, float]] = field(default_factory=list)


@dataclass
class TrainResult:
    model: nn.Module
    metrics: pd.DataFrame
    meta: CheckpointMeta
    optimizer_state: Optional[dict]
    completed: bool
    history: List[Dict[str, float]] = field(default_factory=list)


class SSPObjective(nn.Module):
    """Batch L_final for a student model; each task is averaged over the instances that enable it."""

    def __init__(self, model: SSPModel, weights: LossWeights, squared_norms: bool = False,
                 tasks: Sequence[str] = ALL_TASKS):
        super().__init__()
        self.model = model
        self.weights = weights
        self.squared_norms = squared_norms
        self.tasks = tuple(tasks)

    def forward(self, instances: Sequence[TrainingInstance], teacher_vectors: torch.Tensor) -> LossReport:
        heads = self.model.heads
        hidden, _ = encode_batch(self.model, [instance.model_input for instance in instances])
        dtype = hidden.dtype
        ts_terms, ci_terms, wr_terms, kd_terms = [], [], [], []
        for row, instance in enumerate(instances):
            mask = instance.loss_mask
            sep_vectors = hidden[row, list(instance.model_input.sep_positions)]
            if mask.topic and "ts" in self.tasks:
                labels = torch.tensor(instance.topic_labels, dtype=dtype)
                ts_terms.append(loss_ts(predict_topic(sep_vectors, heads), labels))
            if mask.coref and "ci" in self.tasks:
                targets = torch.tensor(instance.coref_targets, dtype=dtype)
                ci_terms.append(loss_ci(predict_coref(sep_vectors[:-1], heads), targets))
            if mask.wr and "wr" in self.tasks:
                source = hidden[row, 0] if self.model.config.wr_source == "cls" else sep_vectors[-1]
                target = torch.from_numpy(instance.bow_target.vector()).to(dtype)
                wr_terms.append(loss_wr(reconstruct_words(source, heads), target, self.squared_norms))
            if mask.kd and "kd" in self.tasks:
                kd_terms.append(loss_kd(hidden[row, 0], teacher_vectors[row], self.squared_norms))

        zero = hidden.new_zeros(())
        mean = lambda terms: torch.stack(terms).mean() if terms else zero
        masks = LossMask(topic=bool(ts_terms), coref=bool(ci_terms), wr=bool(wr_terms), kd=bool(kd_terms))
        return loss_final(mean(ts_terms), mean(ci_terms), mean(wr_terms), mean(kd_terms), self.weights, masks)


def compute_batch_losses(model: SSPModel, instances: Sequence[TrainingInstance], teacher_vectors: torch.Tensor,
                         weights: LossWeights, squared_norms: bool = False,
                         tasks: Sequence[str] = ALL_TASKS) -> LossReport:
    return SSPObjective(model, weights, squared_norms, tasks)(instances, teacher_vectors)

# E*_[CLS] per instance (zeros where the instance has no reformulation)
def teacher_targets(teacher: ConversationalEncoder, instances: Sequence[TrainingInstance],
                    batch_size: int = DEFAULT_BATCH_SIZE) -> torch.Tensor:
    vectors = torch.zeros(len(instances), teacher.config.hidden_size)
    rows = [i for i, instance in enumerate(instances) if instance.teacher_input is not None]
    for start in range(0, len(rows), batch_size):
        chunk = rows[start:start + batch_size]
        vectors[chunk] = encode_teacher_batch(teacher, [instances[i].teacher_input for i in chunk])
    return vectors

def set_determinism(seed: int):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)

def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[start:start + batch_size] for start in range(0, n, batch_size)]

def _make_optimizer(model: nn.Module, learning_rate: float) -> torch.optim.Optimizer:
    parameters = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.Adam(parameters, lr=learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS)

# sha256 over the serialized instances, in order
def instances_fingerprint(instances: Sequence[TrainingInstance]) -> str:
    digest = hashlib.sha256()
    for instance in instances:
        digest.update(json.dumps(instance.to_dict(), sort_keys=True).encode("utf-8"))
    return digest.hexdigest()[:16]

# Refuses to continue a run under a different phase, config or dataset
def check_resumable(resume: Checkpoint, meta: CheckpointMeta):
    if resume.meta.phase != meta.phase:
        raise CheckpointFormatError(f"cannot resume a {resume.meta.phase} checkpoint as {meta.phase}")
    if resume.meta.config_hash != meta.config_hash:
        raise CheckpointFormatError(f"cannot resume: config hash {resume.meta.config_hash} of the checkpoint "
                                    f"differs from {meta.config_hash}")
    if resume.meta.data_hash != meta.data_hash:
        raise CheckpointFormatError(f"cannot resume: the checkpoint was trained on data {resume.meta.data_hash}, "
                                    f"not {meta.data_hash}")

# Shared loop for post-training and fine-tuning. A resumed run skips the
# batches already taken in its epoch and continues with the saved optimizer,
# rng state and loss history, so it ends on the same parameters and log as an
# uninterrupted run.
def _run_training(model: SSPModel, instances: Sequence[TrainingInstance], teacher_vectors: torch.Tensor,
                  config: TrainConfig, epochs: int, phase: str, tasks: Sequence[str],
                  resume: Optional[Checkpoint] = None, stop_after_steps: Optional[int] = None,
                  verbose: bool = False) -> TrainResult:
    set_determinism(config.seed)
    objective = SSPObjective(model, config.weights, config.squared_norms, tasks)
    optimizer = _make_optimizer(model, config.learning_rate)
    run_config = dict(config.to_dict(), tasks=",".join(tasks))
    meta = CheckpointMeta(phase=phase, config_hash=config_hash(run_config),
                          data_hash=instances_fingerprint(instances))
    rows = []
    if resume is not None:
        check_resumable(resume, meta)
        if resume.optimizer_state is not None:
            optimizer.load_state_dict(resume.optimizer_state)
        if resume.rng_state is not None:
            torch.set_rng_state(resume.rng_state)
        meta.step, meta.epoch, meta.step_in_epoch = resume.meta.step, resume.meta.epoch, resume.meta.step_in_epoch
        meta.metrics = dict(resume.meta.metrics)
        rows = [dict(row) for row in resume.history]
        if verbose and meta.epoch >= epochs:
            print(f"{phase}: checkpoint already finished {meta.epoch} of {epochs} epochs, nothing to resume")

    stopped = False
    for epoch in range(meta.epoch, epochs):
        batches = epoch_batches(len(instances), config.batch_size, config.seed, epoch)
        first = meta.step_in_epoch if epoch == meta.epoch else 0
        meta.epoch = epoch
        progress = tqdm(range(first, len(batches)), desc=f"{phase} epoch {epoch + 1}/{epochs}", disable=not verbose)
        for index in progress:
            batch = batches[index]
            model.train()
            report = objective([instances[i] for i in batch], teacher_vectors[torch.as_tensor(batch)])
            report.check_finite(meta.step + 1)
            optimizer.zero_grad()
            report.l_final.backward()
            if config.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()
            meta.step += 1
            meta.step_in_epoch = index + 1
            rows.append(report.to_row(meta.step))
            if verbose:
                progress.set_postfix(l_final=f"{rows[-1]['l_final']:.4f}")
            last_step = index + 1 == len(batches) and epoch + 1 == epochs
            if stop_after_steps is not None and meta.step >= stop_after_steps and not last_step:
                stopped = True
                break
        if stopped:
            break
        if verbose and rows:
            tqdm.write(f"{phase} epoch {epoch + 1}: last l_final {rows[-1]['l_final']:.4f}")
        meta.epoch, meta.step_in_epoch = epoch + 1, 0
    model.eval()
    if rows:
        meta.metrics = {key: value for key, value in rows[-1].items() if key != "step"}
    return TrainResult(model=model, metrics=pd.DataFrame(rows, columns=METRICS_COLUMNS), meta=meta,
                       optimizer_state=optimizer.state_dict(), completed=not stopped, history=rows)

def post_train(instances: Sequence[TrainingInstance], model: SSPModel, teacher: ConversationalEncoder,
               config: TrainConfig, resume: Optional[Checkpoint] = None, stop_after_steps: Optional[int] = None,
               tasks: Sequence[str] = ALL_TASKS, verbose: bool = False) -> TrainResult:
    if len(instances) == 0:
        raise ValueError("post_train needs a non-empty dataset")
    teacher.freeze()
    before = param_checksum(teacher)
    vectors = teacher_targets(teacher, instances, config.batch_size)
    result = _run_training(model, instances, vectors, config, config.post_train_epochs, "post-train", tasks,
                           resume, stop_after_steps, verbose)
    if param_checksum(teacher) != before:
        raise SSPError("teacher parameters changed during post-training", exit_code=1)
    return result

def build_fine_tune_instances(conversations: Sequence[Conversation], vocab: Vocabulary,
                              max_len: int, seed: int) -> List[TrainingInstance]:
    missing = [c.conv_id for c in conversations if c.reformulated_last is None]
    if missing:
        raise ValueError(f"fine-tuning needs reformulated_last, missing for {missing[:5]}")
    config = TaskConfig(max_len=max_len, perturb_prob=0.0, tasks=("kd",))
    return build_training_instances(conversations, [], vocab, config, seed)

# KD-only training on target-task conversations
def fine_tune(instances: Sequence[TrainingInstance], model: SSPModel, teacher: ConversationalEncoder,
              config: TrainConfig, resume: Optional[Checkpoint] = None, stop_after_steps: Optional[int] = None,
              verbose: bool = False) -> TrainResult:
    if len(instances) == 0:
        raise ValueError("fine_tune needs a non-empty dataset")
    teacher.freeze()
    vectors = teacher_targets(teacher, instances, config.batch_size)
    return _run_training(model, instances, vectors, config, config.fine_tune_epochs, "fine-tune", ("kd",),
                         resume, stop_after_steps, verbose)

# In-batch contrastive training on (query, relevant document) texts; returns the frozen teacher
def pretrain_teacher(pairs: Sequence[Tuple[str, str]], vocab: Vocabulary, encoder_config: EncoderConfig,
                     config: TrainConfig, max_len: int = DEFAULT_MAX_LEN,
                     verbose: bool = False) -> Tuple[ConversationalEncoder, pd.DataFrame]:
    if len(pairs) == 0:
        raise ValueError("pretrain_teacher needs at least one (query, document) pair")
    teacher = build_teacher(encoder_config, config.seed)
    set_determinism(config.seed)
    queries = [build_single_input(q, vocab, max_len) for q, _ in pairs]
    documents = [build_single_input(d, vocab, max_len) for _, d in pairs]
    optimizer = _make_optimizer(teacher, config.teacher_learning_rate)
    rows = []
    step = 0
    for epoch in range(config.teacher_epochs):
        batches = epoch_batches(len(pairs), config.pretrain_batch_size, config.seed, epoch)
        for batch in tqdm(batches, desc=f"teacher epoch {epoch + 1}/{config.teacher_epochs}", disable=not verbose):
            teacher.train()
            q_vectors = encode_batch(teacher, [queries[i] for i in batch])[0][:, 0]
            d_vectors = encode_batch(teacher, [documents[i] for i in batch])[0][:, 0]
            scores = q_vectors @ d_vectors.T
            loss = nn.functional.cross_entropy(scores, torch.arange(len(batch)))
            if not torch.isfinite(loss):
                raise NonFiniteLossError("l_contrastive", step + 1)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
            rows.append({"step": step, "l_contrastive": float(loss.item())})
        if verbose and rows:
            tqdm.write(f"teacher epoch {epoch + 1}: last loss {rows[-1]['l_contrastive']:.4f}")
    return teacher.freeze(), pd.DataFrame(rows, columns=["step", "l_contrastive"])

# Student whose encoder starts from the teacher (heads random) or from scratch
def init_student(teacher: ConversationalEncoder, config: TrainConfig) -> SSPModel:
    student = build_student(teacher.config, config.seed)
    if config.init_from_teacher:
        student.encoder.load_state_dict(teacher.state_dict())
    return student

@torch.no_grad()
def evaluate_heads(model: SSPModel, instances: Sequence[TrainingInstance],
                   batch_size: int = DEFAULT_BATCH_SIZE) -> Dict[str, float]:
    model.eval()
    topic_hits, topic_total, coref_hits, coref_total, wr_losses = 0, 0, 0, 0, []
    for start in range(0, len(instances), batch_size):
        chunk = instances[start:start + batch_size]
        hidden, _ = encode_batch(model, [instance.model_input for instance in chunk])
        for row, instance in enumerate(chunk):
            sep_vectors = hidden[row, list(instance.model_input.sep_positions)]
            if instance.loss_mask.topic:
                predicted = (predict_topic(sep_vectors, model.heads) > 0.5).long()
                topic_hits += int((predicted == torch.tensor(instance.topic_labels)).sum())
                topic_total += len(instance.topic_labels)
            if instance.loss_mask.coref:
                probabilities = predict_coref(sep_vectors[:-1], model.heads)
                coref_hits += int(int(probabilities.argmax()) == instance.coref_targets.index(1))
                coref_total += 1
            if instance.loss_mask.wr:
                source = hidden[row, 0] if model.config.wr_source == "cls" else sep_vectors[-1]
                target = torch.from_numpy(instance.bow_target.vector())
                wr_losses.append(float(loss_wr(reconstruct_words(source, model.heads), target)))
    return {"topic_accuracy": topic_hits / topic_total if topic_total else float("nan"),
            "coref_accuracy": coref_hits / coref_total if coref_total else float("nan"),
            "l_wr": float(np.mean(wr_losses)) if wr_losses else float("nan"),
            "topic_utterances": topic_total, "coref_instances": coref_total}

# K folds over the sorted unique ids, shuffled by seed; union of test folds = all ids
def kfold_splits(ids: Sequence[str], k: int, seed: int) -> List[Tuple[List[str], List[str]]]:
    unique = sorted(set(ids))
    if not 2 <= k <= len(unique):
        raise ValueError(f"k must be in [2, {len(unique)}], got {k}")
    order = np.random.default_rng(seed).permutation(len(unique))
    folds = [sorted(unique[i] for i in part) for part in np.array_split(order, k)]
    splits = []
    for fold in folds:
        held_out = set(fold)
        splits.append(([x for x in unique if x not in held_out], fold))
    return splits

def save_metrics(path: str, metrics: pd.DataFrame) -> str:
    return save_data_frame(path, metrics)


def save_checkpoint(checkpoint: Checkpoint, path: str) -> str:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_FORMAT_VERSION,
        "encoder_config": checkpoint.encoder_config.to_dict(),
        "vocab_tokens": list(checkpoint.vocab.tokens),
        "vocab_hash": checkpoint.vocab.hash(),
        "teacher": checkpoint.teacher.state_dict(),
        "student": None if checkpoint.student is None else checkpoint.student.state_dict(),
        "optimizer": checkpoint.optimizer_state,
        "rng_state": torch.get_rng_state() if checkpoint.rng_state is None else checkpoint.rng_state,
        "meta": asdict(checkpoint.meta),
        "history": [dict(row) for row in checkpoint.history],
    }
    directory = ensure_dir(os.path.dirname(os.path.abspath(path)))
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as handle:
            torch.save(payload, handle)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
    return path

def load_checkpoint(path: str, vocab: Optional[Vocabulary] = None) -> Checkpoint:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as err:
        raise CheckpointFormatError(f"{path}: unreadable checkpoint ({err})")
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointFormatError(f"{path}: not an {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    try:
        stored_vocab = Vocabulary(payload["vocab_tokens"])
        if stored_vocab.hash() != payload["vocab_hash"]:
            raise CheckpointFormatError(f"{path}: vocabulary hash does not match its token list")
        if vocab is not None and vocab.hash() != stored_vocab.hash():
            raise CheckpointFormatError(f"{path}: vocabulary hash {stored_vocab.hash()[:12]} differs from "
                                        f"the given vocabulary {vocab.hash()[:12]}")
        encoder_config = EncoderConfig.from_dict(payload["encoder_config"])
        teacher = ConversationalEncoder(encoder_config)
        teacher.load_state_dict(payload["teacher"], strict=True)
        teacher.freeze()
        student = None
        if payload["student"] is not None:
            student = SSPModel(encoder_config)
            student.load_state_dict(payload["student"], strict=True)
            student.eval()
        meta = CheckpointMeta(**payload["meta"])
        if meta.phase not in PHASES:
            raise CheckpointFormatError(f"{path}: unknown phase {meta.phase}")
    except CheckpointFormatError:
        raise
    except Exception as err:
        raise CheckpointFormatError(f"{path}: malformed checkpoint ({err})")
    return Checkpoint(encoder_config=encoder_config, vocab=stored_vocab, teacher=teacher, meta=meta,
                      student=student, optimizer_state=payload["optimizer"], rng_state=payload["rng_state"],
                      history=list(payload.get("history", [])))


################################################
# Tests
################################################

def _toy_vocab() -> Vocabulary:
    return Vocabulary(SPECIAL_TOKENS + [f"w{i}" for i in range(8)])

def _toy_encoder_config(**overrides) -> EncoderConfig:
    values = dict(vocab_size=12, hidden_size=8, layers=2, heads=2, ff_size=16, max_positions=32, dropout=0.0)
    values.update(overrides)
    return EncoderConfig(**values)

def _toy_conversations() -> List[Conversation]:
    return [
        Conversation("a_2", ("w0 w1", "it w2"), reformulated_last="w1 w2", source_tag="a"),
        Conversation("b_2", ("w3 w4", "w5 it"), reformulated_last="w5 w3", source_tag="b"),
        Conversation("c_3", ("w6", "w7 w0", "it"), reformulated_last="w6 it", source_tag="c"),
        Conversation("d_2", ("w2 w2", "w4 it"), reformulated_last="w4 w2", source_tag="d"),
    ]

def _toy_instances(seed: int = 0) -> List[TrainingInstance]:
    conversations = _toy_conversations()
    return build_training_instances(conversations, conversations, _toy_vocab(), TaskConfig(max_len=32), seed)

def test_train_config():
    config = TrainConfig.from_config({}, seed=3)
    assert (config.learning_rate, config.batch_size, config.post_train_epochs) == (2e-5, 64, 2), "ERROR: defaults"
    assert config.weights == LossWeights(1e-2, 1e-3, 1e-2) and config.grad_clip is None, "ERROR: default weights"
    custom = TrainConfig.from_config({"learning_rate": "1e-3", "grad_clip": "1.0", "alpha": "0.5"}, seed=3)
    assert custom.learning_rate == 1e-3 and custom.grad_clip == 1.0 and custom.weights.alpha == 0.5, "ERROR: parse"
    assert custom.replace(batch_size=4).batch_size == 4, "ERROR: replace"
    split = TrainConfig.from_config({"batch_size": "8", "teacher_batch_size": "16"}, seed=3)
    assert split.pretrain_batch_size == 16 and custom.pretrain_batch_size == custom.batch_size, \
        "ERROR: teacher batch size"

def test_gradient_check():
    instances = _toy_instances()
    instance = instances[0]
    assert instance.loss_mask == LossMask(True, True, True, True), f"ERROR: toy mask {instance.loss_mask}"
    model = build_student(_toy_encoder_config(), seed=0).double().eval()
    objective = SSPObjective(model, LossWeights())
    names = [name for name, _ in objective.named_parameters()]
    params = tuple(p.detach().clone().requires_grad_(True) for _, p in objective.named_parameters())
    teacher_vectors = torch.randn(1, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(1))

    def l_final(*flat):
        report = torch.func.functional_call(objective, dict(zip(names, flat)), ([instance], teacher_vectors))
        return report.l_final

    assert torch.autograd.gradcheck(l_final, params, eps=1e-6, atol=1e-8, rtol=1e-4), "ERROR: gradient check"

def test_zero_learning_rate():
    instances = _toy_instances()[:1]
    teacher = build_teacher(_toy_encoder_config(), seed=1).freeze()
    config = TrainConfig(seed=0, learning_rate=0.0, batch_size=1, post_train_epochs=1)
    model = init_student(teacher, config)
    before = param_checksum(model)
    result = post_train(instances, model, teacher, config)
    assert len(result.metrics) == 1 and param_checksum(result.model) == before, "ERROR: lr=0 changed parameters"

def test_post_train_determinism():
    instances = _toy_instances()
    checksums = []
    for _ in range(2):
        teacher = build_teacher(_toy_encoder_config(dropout=0.1), seed=1).freeze()
        config = TrainConfig(seed=7, learning_rate=1e-2, batch_size=2, post_train_epochs=2)
        result = post_train(instances, init_student(teacher, config), teacher, config)
        checksums.append((param_checksum(result.model), result.metrics["l_final"].tolist()))
    assert checksums[0] == checksums[1], "ERROR: same seed must give identical runs"
    assert len(checksums[0][1]) == 4, "ERROR: 2 epochs x 2 batches"

def test_masked_coref_gradient():
    instance = _toy_instances()[0]
    masked = replace(instance, loss_mask=LossMask(True, False, True, True))
    model = build_student(_toy_encoder_config(), seed=0)
    teacher = build_teacher(_toy_encoder_config(), seed=1).freeze()
    report = compute_batch_losses(model, [masked], teacher_targets(teacher, [masked]), LossWeights())
    report.l_final.backward()
    for parameter in model.heads.coref.parameters():
        assert parameter.grad is None or not parameter.grad.any(), "ERROR: masked coref produced a gradient"
    assert report.l_ci.item() == 0.0 and model.heads.topic.weight.grad is not None, "ERROR: other tasks must train"
    assert all(p.grad is None for p in teacher.parameters()), "ERROR: gradient reached the teacher"

def test_checkpoint_round_trip():
    vocab = _toy_vocab()
    teacher = build_teacher(_toy_encoder_config(), seed=1).freeze()
    student = build_student(_toy_encoder_config(), seed=2)
    checkpoint = Checkpoint(encoder_config=teacher.config, vocab=vocab, teacher=teacher,
                            meta=CheckpointMeta(phase="post-train", step=5), student=student)
    with tempfile.TemporaryDirectory() as tmp:
        path = save_checkpoint(checkpoint, os.path.join(tmp, CHECKPOINT_FILE))
        rng_before = torch.get_rng_state()
        torch.rand(3)
        loaded = load_checkpoint(path, vocab)
        assert param_checksum(loaded.student) == param_checksum(student), "ERROR: student round trip"
        assert param_checksum(loaded.teacher) == param_checksum(teacher), "ERROR: teacher round trip"
        assert torch.equal(loaded.rng_state, rng_before) and loaded.meta.step == 5, "ERROR: rng / meta round trip"
        other = Vocabulary(SPECIAL_TOKENS + [f"v{i}" for i in range(8)])
        try:
            load_checkpoint(path, other)
            assert False, "ERROR: mismatched vocabulary accepted"
        except CheckpointFormatError as err:
            assert "vocabulary" in str(err), f"ERROR: message {err}"
        corrupt = os.path.join(tmp, "corrupt.pt")
        with open(path, "rb") as f, open(corrupt, "wb") as g:
            g.write(f.read()[:200])
        try:
            load_checkpoint(corrupt)
            assert False, "ERROR: corrupt checkpoint accepted"
        except CheckpointFormatError:
            pass

def test_resume_matches_uninterrupted():
    instances = _toy_instances()
    config = TrainConfig(seed=11, learning_rate=1e-2, batch_size=3, post_train_epochs=2)
    encoder_config = _toy_encoder_config(dropout=0.1)
    teacher = build_teacher(encoder_config, seed=1).freeze()
    reference = post_train(instances, init_student(teacher, config), teacher, config)

    partial = post_train(instances, init_student(teacher, config), teacher, config, stop_after_steps=1)
    assert not partial.completed and partial.meta.step == 1, "ERROR: stop_after_steps"
    with tempfile.TemporaryDirectory() as tmp:
        path = save_checkpoint(Checkpoint(encoder_config, _toy_vocab(), teacher, partial.meta, partial.model,
                                          partial.optimizer_state, history=partial.history),
                               os.path.join(tmp, CHECKPOINT_FILE))
        loaded = load_checkpoint(path)
    assert loaded.meta.data_hash == instances_fingerprint(instances), "ERROR: data hash round trip"
    resumed = post_train(instances, loaded.student, loaded.teacher, config, resume=loaded)
    assert resumed.completed and resumed.meta.step == reference.meta.step, "ERROR: resumed step count"
    assert param_checksum(resumed.model) == param_checksum(reference.model), "ERROR: resume diverged"
    assert resumed.metrics.equals(reference.metrics), "ERROR: resumed loss log differs from the uninterrupted one"

def test_resume_refuses_other_runs():
    instances = _toy_instances()
    config = TrainConfig(seed=11, learning_rate=1e-2, batch_size=3, post_train_epochs=1)
    teacher = build_teacher(_toy_encoder_config(), seed=1).freeze()
    done = post_train(instances, init_student(teacher, config), teacher, config)
    checkpoint = Checkpoint(teacher.config, _toy_vocab(), teacher, done.meta, done.model, done.optimizer_state,
                            history=done.history)
    attempts = {"data": (instances[:2], config, "post-train"),
                "config": (instances, config.replace(learning_rate=1e-3), "post-train"),
                "phase": (instances, config, "fine-tune")}
    for name, (data, other_config, phase) in attempts.items():
        try:
            if phase == "post-train":
                post_train(data, done.model, teacher, other_config, resume=checkpoint)
            else:
                fine_tune(build_fine_tune_instances(_toy_conversations(), _toy_vocab(), 32, 0), done.model,
                          teacher, other_config, resume=checkpoint)
            assert False, f"ERROR: resume with a different {name} accepted"
        except CheckpointFormatError:
            pass
    again = post_train(instances, done.model, teacher, config, resume=checkpoint)
    assert again.meta.step == done.meta.step and again.metrics.equals(done.metrics), "ERROR: finished run resumed"

def test_fine_tune():
    vocab = _toy_vocab()
    teacher = build_teacher(_toy_encoder_config(), seed=1).freeze()
    config = TrainConfig(seed=0, fine_tune_epochs=0)
    instances = build_fine_tune_instances(_toy_conversations(), vocab, max_len=32, seed=0)
    assert all(i.loss_mask == LossMask(False, False, False, True) for i in instances), "ERROR: KD-only masks"
    model = init_student(teacher, config)
    before = param_checksum(model)
    assert param_checksum(fine_tune(instances, model, teacher, config).model) == before, "ERROR: 0 epochs"
    trained = fine_tune(instances, model, teacher, config.replace(fine_tune_epochs=1, learning_rate=1e-2))
    assert (trained.metrics["l_ts"] == 0).all() and (trained.metrics["l_kd"] > 0).all(), "ERROR: KD-only losses"

def test_kfold_splits():
    ids = [f"c{i}" for i in range(25)]
    splits = kfold_splits(ids, 5, seed=0)
    assert all(len(test) == 5 and len(train) == 20 for train, test in splits), "ERROR: fold sizes"
    assert sorted(x for _, test in splits for x in test) == sorted(ids), "ERROR: partition law"
    assert all(not set(train) & set(test) for train, test in splits), "ERROR: train/test overlap"
    assert splits == kfold_splits(list(reversed(ids)), 5, seed=0), "ERROR: input order changed folds"

def test_pretrain_teacher():
    vocab = _toy_vocab()
    pairs = [("w0 w1", "w0 w1 w2"), ("w3 w4", "w3 w4 w5"), ("w6", "w6 w7"), ("w2 w5", "w2 w5 w1")]
    config = TrainConfig(seed=0, batch_size=4, teacher_epochs=30, teacher_learning_rate=1e-2)
    teacher, log = pretrain_teacher(pairs, vocab, _toy_encoder_config(), config, max_len=16)
    assert teacher.frozen and not any(p.requires_grad for p in teacher.parameters()), "ERROR: teacher not frozen"
    assert len(log) == 30 and log["l_contrastive"].iloc[-1] < log["l_contrastive"].iloc[0], "ERROR: no learning"

def test_evaluate_heads():
    model = build_student(_toy_encoder_config(), seed=0)
    scores = evaluate_heads(model, _toy_instances())
    assert 0.0 <= scores["topic_accuracy"] <= 1.0 and scores["coref_instances"] > 0, f"ERROR: {scores}"

def tests():
    test_train_config()
    test_gradient_check()
    test_zero_learning_rate()
    test_post_train_determinism()
    test_masked_coref_gradient()
    test_checkpoint_round_trip()
    test_resume_matches_uninterrupted()
    test_resume_refuses_other_runs()
    test_fine_tune()
    test_kfold_splits()
    test_pretrain_teacher()
    test_evaluate_heads()
    print("all tests passed in", os.path.basename(__file__))

def main():
    tests()

if __name__ == "__main__":
    main()
