import os
import copy
import math
import pandas as pd
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple
from config_utils import load_config, get_int, get_float, merge_overrides, ConfigError
from data_model import Conversation, Vocabulary
from task_builder import TaskConfig, build_training_instances
from encoder import EncoderConfig, SSPModel, ConversationalEncoder
from trainer import (TrainConfig, pretrain_teacher, init_student, post_train, fine_tune,
                     build_fine_tune_instances, evaluate_heads, kfold_splits)
from retrieval_eval import (EvalConfig, DenseIndex, index_corpus, encode_conversations, search_all,
                            per_query_metrics, paired_t_test, significance_marker, robustness_eval)
from synthetic_corpus import (SyntheticSpec, SyntheticData, generate, synthetic_vocabulary, teacher_pairs,
                              split_sessions)
from timefunc import timefunc
from constants import *

# variant name -> tasks used during post-training
VARIANTS = {
    "ssp": ("ts", "ci", "wr", "kd"),
    "warmup": ("kd",),
    "no_ts": ("ci", "wr", "kd"),
    "no_ci": ("ts", "wr", "kd"),
    "no_wr": ("ts", "ci", "kd"),
}
SWEEP_WEIGHTS = ("alpha", "beta", "gamma")


@dataclass(frozen=True)
class ExperimentSettings:
    """Config values shared by every experiment plus the experiment-only knobs."""
    values: Mapping[str, str] = field(default_factory=dict)
    folds: int = 5
    post_train_fraction: float = 0.5
    held_out_fraction: float = 0.2

    def __post_init__(self):
        if self.folds < 2:
            raise ConfigError(f"folds must be >= 2, got {self.folds}")
        for name in ("post_train_fraction", "held_out_fraction"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must be in (0, 1), got {getattr(self, name)}")

    def synthetic(self, seed: int) -> SyntheticSpec:
        return SyntheticSpec.from_config(self.values, seed)

    def train(self, seed: int) -> TrainConfig:
        return TrainConfig.from_config(self.values, seed)

    def task(self) -> TaskConfig:
        return TaskConfig.from_config(self.values)

    def evaluation(self) -> EvalConfig:
        return EvalConfig.from_config(self.values)

    def encoder(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig.from_config(self.values, vocab_size)

    def with_values(self, **overrides) -> "ExperimentSettings":
        return ExperimentSettings(merge_overrides(self.values, overrides), self.folds,
                                  self.post_train_fraction, self.held_out_fraction)

    @classmethod
    def from_config(cls, values: Mapping[str, str]) -> "ExperimentSettings":
        return cls(values=dict(values),
                   folds=get_int(values, "folds", 5),
                   post_train_fraction=get_float(values, "post_train_fraction", 0.5),
                   held_out_fraction=get_float(values, "held_out_fraction", 0.2))


@dataclass
class ExperimentSetup:
    """Everything the variants of one seed share: data, vocabulary, session split, teacher and index."""
    seed: int
    data: SyntheticData
    vocab: Vocabulary
    post_conversations: List[Conversation]
    target_conversations: List[Conversation]
    teacher: ConversationalEncoder
    index: DenseIndex


def prepare(seed: int, settings: ExperimentSettings, verbose: bool = False) -> ExperimentSetup:
    data = generate(settings.synthetic(seed), verbose=verbose)
    vocab = synthetic_vocabulary(data)
    post_conversations, target_conversations = split_sessions(data.conversations, settings.post_train_fraction, seed)
    max_len = settings.task().max_len
    pairs = teacher_pairs(post_conversations, data.corpus, data.qrels)
    teacher, _ = pretrain_teacher(pairs, vocab, settings.encoder(vocab.size), settings.train(seed), max_len, verbose)
    index = index_corpus(data.corpus, teacher, vocab, max_len, verbose=verbose)
    return ExperimentSetup(seed, data, vocab, post_conversations, target_conversations, teacher, index)

# Post-trains a fresh student on the post-training sessions with the variant's tasks
def post_train_variant(setup: ExperimentSetup, variant: str, settings: ExperimentSettings,
                       verbose: bool = False) -> SSPModel:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant}, expected one of {sorted(VARIANTS)}")
    tasks = VARIANTS[variant]
    task_config = TaskConfig(settings.task().max_len, settings.task().perturb_prob,
                             settings.task().min_noise_pool, tasks)
    config = settings.train(setup.seed)
    instances = build_training_instances(setup.post_conversations, setup.post_conversations, setup.vocab,
                                         task_config, setup.seed, verbose)
    model = init_student(setup.teacher, config)
    return post_train(instances, model, setup.teacher, config, tasks=tasks, verbose=verbose).model

def _by_session(conversations: Sequence[Conversation]) -> Dict[str, List[Conversation]]:
    sessions: Dict[str, List[Conversation]] = {}
    for conversation in conversations:
        sessions.setdefault(conversation.source_tag or conversation.conv_id, []).append(conversation)
    return sessions

# K-fold KD fine-tuning over target sessions; each fold is scored with a model
# fine-tuned on the other folds. Returns per-query metrics of all held-out folds.
def cross_validate(setup: ExperimentSetup, model: SSPModel, settings: ExperimentSettings,
                   verbose: bool = False) -> pd.DataFrame:
    sessions = _by_session(setup.target_conversations)
    config = settings.train(setup.seed)
    eval_config = settings.evaluation()
    frames = []
    for fold, (train_ids, test_ids) in enumerate(kfold_splits(list(sessions), settings.folds, setup.seed)):
        train_conversations = [c for s in train_ids for c in sessions[s]]
        test_conversations = [c for s in test_ids for c in sessions[s]]
        instances = build_fine_tune_instances(train_conversations, setup.vocab, eval_config.max_len, setup.seed)
        tuned = fine_tune(instances, copy.deepcopy(model), setup.teacher, config, verbose=verbose).model
        vectors = encode_conversations(tuned, test_conversations, setup.vocab, eval_config.max_len)
        run = search_all(setup.index, [c.conv_id for c in test_conversations], vectors, eval_config.top_k)
        frame = per_query_metrics(run, setup.data.qrels, eval_config.positive_threshold, eval_config.ndcg_gain,
                                  eval_config.skip_missing_queries)
        frame.insert(0, "fold", fold)
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)

# Returns (summary row, per-query frame) for one variant at one seed
def run_variant(name: str, seed: int, settings: ExperimentSettings, setup: Optional[ExperimentSetup] = None,
                verbose: bool = False) -> Tuple[Dict[str, object], pd.DataFrame]:
    setup = setup if setup is not None else prepare(seed, settings, verbose)
    model = post_train_variant(setup, name, settings, verbose)
    per_query = cross_validate(setup, model, settings, verbose)
    row = {"seed": seed, "variant": name, "mrr": float(per_query["rr"].mean()),
           "ndcg3": float(per_query["ndcg3"].mean()), "queries": len(per_query)}
    if verbose:
        print(f"seed {seed} {name}: mrr {row['mrr']:.4f} ndcg3 {row['ndcg3']:.4f}")
    return row, per_query

# Per-seed MRR / NDCG@3 of every variant, margins against the full model and paired t-tests
@timefunc
def compare_variants(seeds: Sequence[int], settings: ExperimentSettings,
                     variants: Sequence[str] = tuple(VARIANTS), verbose: bool = False) -> Tuple[pd.DataFrame, pd.DataFrame]:
    if "ssp" not in variants:
        raise ValueError("variant comparison needs the full ssp variant as reference")
    rows = []
    verdicts = []
    for seed in seeds:
        setup = prepare(seed, settings, verbose)
        per_query = {}
        for name in variants:
            row, per_query[name] = run_variant(name, seed, settings, setup, verbose)
            rows.append(row)
        reference = next(r for r in rows if r["seed"] == seed and r["variant"] == "ssp")
        for name in variants:
            if name == "ssp":
                continue
            other = next(r for r in rows if r["seed"] == seed and r["variant"] == name)
            try:
                _, p_value = paired_t_test(per_query["ssp"], per_query[name], "rr")
            except ValueError:
                p_value = float("nan")
            verdicts.append({"seed": seed, "variant": name, "mrr_margin": reference["mrr"] - other["mrr"],
                             "ndcg3_margin": reference["ndcg3"] - other["ndcg3"], "p_value": p_value,
                             "marker": "" if math.isnan(p_value) else significance_marker(p_value),
                             "ssp_not_worse": reference["mrr"] >= other["mrr"]})
    return pd.DataFrame(rows), pd.DataFrame(verdicts)

# Relative MRR drop from j=0 to j=max_added, for ssp and warm-up models
# fine-tuned on half of the target sessions and scored on the other half
@timefunc
def compare_robustness(seeds: Sequence[int], settings: ExperimentSettings, max_added: int = 6,
                       variants: Sequence[str] = ("ssp", "warmup"),
                       verbose: bool = False) -> Tuple[pd.DataFrame, pd.DataFrame]:
    curves = []
    drops = []
    for seed in seeds:
        setup = prepare(seed, settings, verbose)
        train_conversations, test_conversations = split_sessions(setup.target_conversations, 0.5, seed)
        eval_config = settings.evaluation()
        config = settings.train(seed)
        instances = build_fine_tune_instances(train_conversations, setup.vocab, eval_config.max_len, seed)
        for name in variants:
            model = post_train_variant(setup, name, settings, verbose)
            tuned = fine_tune(instances, model, setup.teacher, config, verbose=verbose).model
            curve = robustness_eval(tuned, test_conversations, setup.post_conversations, max_added, setup.index,
                                    setup.data.qrels, setup.vocab, eval_config, seed, verbose)
            curve.insert(0, "variant", name)
            curve.insert(0, "seed", seed)
            curves.append(curve)
            start, end = curve["mrr"].iloc[0], curve["mrr"].iloc[-1]
            drops.append({"seed": seed, "variant": name, "mrr_j0": start, "mrr_jmax": end,
                          "relative_drop": (start - end) / start if start > 0 else float("nan")})
    return pd.concat(curves, ignore_index=True), pd.DataFrame(drops)

# Held-out topic accuracy, coref top-1 accuracy and L_WR before and after
# post-training, over a session split of the whole generated corpus
@timefunc
def head_quality(seed: int, settings: ExperimentSettings, verbose: bool = False) -> Dict[str, float]:
    setup = prepare(seed, settings, verbose)
    train_conversations, held_out = split_sessions(setup.data.conversations, 1.0 - settings.held_out_fraction, seed)
    task_config = settings.task()
    config = settings.train(seed)
    train_instances = build_training_instances(train_conversations, train_conversations, setup.vocab,
                                               task_config, seed, verbose)
    held_out_instances = build_training_instances(held_out, setup.data.conversations, setup.vocab,
                                                  task_config, seed + 1, verbose)
    model = init_student(setup.teacher, config)
    before = evaluate_heads(model, held_out_instances)
    model = post_train(train_instances, model, setup.teacher, config, verbose=verbose).model
    after = evaluate_heads(model, held_out_instances)
    result = {"topic_accuracy": after["topic_accuracy"], "coref_accuracy": after["coref_accuracy"],
              "l_wr_initial": before["l_wr"], "l_wr_final": after["l_wr"],
              "l_wr_reduction": 1.0 - after["l_wr"] / before["l_wr"] if before["l_wr"] > 0 else float("nan")}
    if verbose:
        print(", ".join(f"{key} {value:.4f}" for key, value in result.items()))
    return result

# Manual sweep over one loss weight; each value runs the full ssp variant
@timefunc
def sweep_weight(name: str, values: Sequence[float], seed: int, settings: ExperimentSettings,
                 verbose: bool = False) -> pd.DataFrame:
    if name not in SWEEP_WEIGHTS:
        raise ConfigError(f"can only sweep one of {SWEEP_WEIGHTS}, got {name}")
    setup = prepare(seed, settings, verbose)
    rows = []
    for value in values:
        row, _ = run_variant("ssp", seed, settings.with_values(**{name: value}), setup, verbose)
        rows.append({"weight": name, "value": float(value), "mrr": row["mrr"], "ndcg3": row["ndcg3"]})
    return pd.DataFrame(rows, columns=["weight", "value", "mrr", "ndcg3"])


################################################
# Tests
################################################

# small enough to run every variant in seconds
TOY_VALUES = {"n_topics": "4", "entities_per_topic": "3", "n_conversations": "16", "docs_per_entity": "2",
              "queries_per_conversation": "4", "hidden_size": "16", "layers": "1", "heads": "2",
              "ff_size": "32", "dropout": "0.0", "max_len": "48", "learning_rate": "1e-3", "batch_size": "8",
              "post_train_epochs": "1", "fine_tune_epochs": "1", "teacher_epochs": "1", "top_k": "20"}

# desk-scale values for the acceptance experiments
DESK_CONFIG = os.path.join(os.path.dirname(os.path.abspath(__file__)), "configs", "desk.env")

def _desk_settings() -> ExperimentSettings:
    return ExperimentSettings.from_config(load_config(DESK_CONFIG))

def test_settings():
    settings = ExperimentSettings.from_config({"folds": "3", "alpha": "0.5", "n_topics": "2"})
    assert settings.folds == 3 and settings.train(1).weights.alpha == 0.5, "ERROR: settings from config"
    assert settings.synthetic(7).n_topics == 2 and settings.synthetic(7).seed == 7, "ERROR: synthetic settings"
    assert settings.with_values(alpha=0.25).train(1).weights.alpha == 0.25, "ERROR: override"
    try:
        ExperimentSettings(folds=1)
        assert False, "ERROR: one fold accepted"
    except ConfigError:
        pass

def test_run_variant():
    settings = ExperimentSettings(TOY_VALUES, folds=2)
    setup = prepare(0, settings)
    row, per_query = run_variant("ssp", 0, settings, setup)
    assert set(per_query["query_id"]) == {c.conv_id for c in setup.target_conversations}, \
        "ERROR: every target conversation must be scored once"
    assert 0.0 <= row["mrr"] <= 1.0 and 0.0 <= row["ndcg3"] <= 1.0, "ERROR: metric range"
    again, _ = run_variant("ssp", 0, settings, prepare(0, settings))
    assert again == row, "ERROR: variant run not deterministic"
    try:
        run_variant("bogus", 0, settings, setup)
        assert False, "ERROR: unknown variant accepted"
    except ConfigError:
        pass

def test_compare_and_sweep():
    settings = ExperimentSettings(TOY_VALUES, folds=2)
    rows, verdicts = compare_variants([0], settings, variants=("ssp", "warmup"))
    assert list(rows["variant"]) == ["ssp", "warmup"], "ERROR: variant rows"
    assert len(verdicts) == 1 and verdicts["variant"].iloc[0] == "warmup", "ERROR: verdict rows"
    sweep = sweep_weight("gamma", [0.0, 0.01], 0, settings)
    assert list(sweep["value"]) == [0.0, 0.01], "ERROR: sweep rows"
    curves, drops = compare_robustness([0], settings, max_added=1)
    assert len(curves) == 4 and len(drops) == 2, "ERROR: robustness rows"

# post-training learns the self-supervised tasks on held-out sessions
def test_head_quality_desk_scale():
    result = head_quality(0, _desk_settings())
    assert result["topic_accuracy"] >= 0.90, f"ERROR: topic accuracy {result['topic_accuracy']:.4f}"
    assert result["coref_accuracy"] >= 0.80, f"ERROR: coref accuracy {result['coref_accuracy']:.4f}"
    assert result["l_wr_reduction"] >= 0.50, f"ERROR: L_WR reduction {result['l_wr_reduction']:.4f}"

def test_ssp_not_worse_desk_scale():
    rows, verdicts = compare_variants([0, 1, 2], _desk_settings(), verbose=True)
    print(rows.to_string(index=False))
    print(verdicts.to_string(index=False))
    assert verdicts["ssp_not_worse"].all(), "ERROR: a baseline or ablation beat the full model"

def test_robustness_desk_scale():
    _, drops = compare_robustness([0, 1, 2], _desk_settings(), max_added=6)
    mean_drop = drops.groupby("variant")["relative_drop"].mean()
    print(mean_drop.to_string())
    assert mean_drop["ssp"] < mean_drop["warmup"], "ERROR: ssp dropped at least as much as warm-up"

def tests():
    test_settings()
    test_run_variant()
    test_compare_and_sweep()
    if SSP_SLOW_TESTS:
        test_head_quality_desk_scale()
        test_ssp_not_worse_desk_scale()
        test_robustness_desk_scale()
    else:
        print("skipped desk-scale tests; set SSP_SLOW_TESTS=true to run them")
    print("all tests passed in", os.path.basename(__file__))

def main():
    tests()

if __name__ == "__main__":
    main()
