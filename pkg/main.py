import io
import os
import sys
import contextlib
import json
import argparse
import tempfile
import datetime
import pandas as pd
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple
from utils import SSPError, atomic_write_text, ensure_dir, is_readable_file
from config_utils import load_config, merge_overrides, resolve_seed, require, config_hash, ConfigError
from data_frame_utils import save_data_frame, load_data_frame, is_empty_data_frame
from data_model import (Conversation, Vocabulary, build_vocabulary, conversation_texts, read_conversations,
                        read_corpus, write_conversations)
from task_builder import (TaskConfig, build_training_instances, write_instances, read_instances,
                          write_instance_cache, read_instance_cache, instance_stats, noise_length_histogram)
from encoder import EncoderConfig, param_checksum, count_parameters
from trainer import (TrainConfig, Checkpoint, CheckpointFormatError, CheckpointMeta, pretrain_teacher,
                     init_student, post_train, fine_tune, build_fine_tune_instances, kfold_splits,
                     save_checkpoint, load_checkpoint, save_metrics)
from retrieval_eval import (EvalConfig, DenseIndex, index_corpus, evaluate_conversations, per_query_metrics,
                            robustness_eval, read_qrels, write_run)
from synthetic_corpus import SyntheticSpec, generate, write_synthetic, synthetic_vocabulary, teacher_pairs
from experiments import (ExperimentSettings, compare_variants, compare_robustness, head_quality, sweep_weight,
                         VARIANTS)
from timefunc import timefunc
from constants import *

VOCAB_FILE = "vocab.txt"
TEACHER_METRICS_FILE = "teacher_metrics.csv"
PER_QUERY_FILE = "per_query.csv"
HELD_OUT_FILE = "held_out.jsonl"

# keys a training command refuses to run without
REQUIRED_TRAIN_KEYS = ("learning_rate", "batch_size")


class RunContext:
    """Collects what a command read and wrote; becomes the directory's manifest."""

    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.config_path = getattr(args, "config", None)
        self.config = load_config(self.config_path)
        self.out_dir = ensure_dir(args.out)
        self.verbose = bool(getattr(args, "verbose", False))
        self.inputs: Dict[str, str] = {}
        self.outputs: Dict[str, str] = {}
        self.seed: Optional[int] = None

    def with_overrides(self, **overrides) -> Dict[str, str]:
        self.config = merge_overrides(self.config, overrides)
        return self.config

    def resolve_seed(self, flag_seed: Optional[int]) -> int:
        self.seed = resolve_seed(self.config, flag_seed)
        return self.seed

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def input(self, key: str, path: Optional[str]) -> Optional[str]:
        if path is not None:
            self.inputs[key] = os.path.abspath(path)
        return path

    def output(self, key: str, path: str) -> str:
        self.outputs[key] = os.path.abspath(path)
        return path

    def write_manifest(self, duration: Optional[float]) -> str:
        manifest = {"command": self.command,
                    "config": None if self.config_path is None else os.path.abspath(self.config_path),
                    "config_hash": config_hash(self.config),
                    "seed": self.seed,
                    "inputs": self.inputs,
                    "outputs": self.outputs,
                    "version": f"ssp-{VERSION}",
                    "duration_seconds": None if duration is None else round(duration, 3),
                    "finished_at": datetime.datetime.now(datetime.timezone.utc).isoformat()}
        return atomic_write_text(self.path(MANIFEST_FILE), json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _require_train_keys(config: Mapping[str, str], epochs_key: str):
    for key in REQUIRED_TRAIN_KEYS + (epochs_key,):
        require(config, key)

def _read_conversations_or_fail(path: str) -> List[Conversation]:
    conversations = read_conversations(path)
    if not conversations:
        raise SSPError(f"no conversations in {path}")
    return conversations

def _load_instances(data_dir: str):
    cache = os.path.join(data_dir, INSTANCES_CACHE_FILE)
    if is_readable_file(cache):
        return read_instance_cache(cache)
    return read_instances(os.path.join(data_dir, INSTANCES_FILE))

def _vocabulary(ctx: RunContext, path: Optional[str], texts: Sequence[str]) -> Vocabulary:
    if path is not None:
        return Vocabulary.load(ctx.input("vocab", path))
    vocab = build_vocabulary(texts)
    ctx.output("vocab", vocab.save(ctx.path(VOCAB_FILE)))
    return vocab

def _session_of(conversation: Conversation) -> str:
    return conversation.source_tag or conversation.conv_id


@timefunc
def cmd_generate(ctx: RunContext, args: argparse.Namespace):
    spec = SyntheticSpec.from_config(ctx.config, ctx.resolve_seed(args.seed))
    data = generate(spec, verbose=ctx.verbose)
    for key, path in write_synthetic(ctx.out_dir, data).items():
        ctx.output(key, path)
    ctx.output("vocab", synthetic_vocabulary(data).save(ctx.path(VOCAB_FILE)))

@timefunc
def cmd_build_data(ctx: RunContext, args: argparse.Namespace):
    seed = ctx.resolve_seed(args.seed)
    conversations = _read_conversations_or_fail(ctx.input("conversations", args.conversations))
    noise_pool = conversations
    if args.noise_pool is not None:
        noise_pool = read_conversations(ctx.input("noise_pool", args.noise_pool))
    vocab = _vocabulary(ctx, args.vocab, conversation_texts(conversations))
    config = TaskConfig.from_config(ctx.config)
    instances = build_training_instances(conversations, noise_pool, vocab, config, seed, ctx.verbose)
    ctx.output("instances", write_instances(ctx.path(INSTANCES_FILE), instances))
    ctx.output("instances_cache", write_instance_cache(ctx.path(INSTANCES_CACHE_FILE), instances))
    ctx.output("stats", save_data_frame(ctx.path(STATS_FILE), instance_stats(instances)))
    lengths = {c.conv_id: c.n for c in noise_pool}
    perturbed = [i for i in instances if i.k > 0]
    noise_lengths = [lengths[i.noise_source_id] for i in perturbed]
    histogram = noise_length_histogram([i.k for i in perturbed], max(noise_lengths + [1]), noise_lengths)
    ctx.output("k_histogram", save_data_frame(ctx.path(K_HISTOGRAM_FILE), histogram))
    if ctx.verbose:
        print(instance_stats(instances).to_string(index=False))

@timefunc
def cmd_pretrain_teacher(ctx: RunContext, args: argparse.Namespace):
    seed = ctx.resolve_seed(args.seed)
    _require_train_keys(ctx.config, "teacher_epochs")
    conversations = _read_conversations_or_fail(ctx.input("conversations", args.conversations))
    corpus = read_corpus(ctx.input("corpus", args.corpus))
    qrels = read_qrels(ctx.input("qrels", args.qrels))
    vocab = _vocabulary(ctx, args.vocab, conversation_texts(conversations) + [d.text for d in corpus])
    config = TrainConfig.from_config(ctx.config, seed)
    encoder_config = EncoderConfig.from_config(ctx.config, vocab.size)
    max_len = TaskConfig.from_config(ctx.config).max_len
    pairs = teacher_pairs(conversations, corpus, qrels)
    if not pairs:
        raise SSPError("no (query, relevant document) pairs to pre-train the teacher on")
    teacher, log = pretrain_teacher(pairs, vocab, encoder_config, config, max_len, ctx.verbose)
    meta = CheckpointMeta(phase="teacher", step=len(log), epoch=config.teacher_epochs,
                          config_hash=config_hash(config.to_dict()))
    checkpoint = Checkpoint(encoder_config=encoder_config, vocab=vocab, teacher=teacher, meta=meta)
    ctx.output("checkpoint", save_checkpoint(checkpoint, ctx.path(CHECKPOINT_FILE)))
    ctx.output("teacher_metrics", save_metrics(ctx.path(TEACHER_METRICS_FILE), log))

# max_len must fit the position table of the checkpoint's encoder
def _check_max_len(max_len: int, checkpoint: Checkpoint):
    if max_len > checkpoint.encoder_config.max_positions:
        raise ConfigError(f"max_len = {max_len} exceeds max_positions = {checkpoint.encoder_config.max_positions} "
                          f"of the checkpoint encoder")

# Returns (starting model, checkpoint to resume or None). Without --resume a
# run starts fresh from the checkpoint's student, or from the teacher.
def _starting_model(checkpoint: Checkpoint, config: TrainConfig, resume: bool):
    if resume:
        if checkpoint.student is None:
            raise CheckpointFormatError(f"--resume needs a {checkpoint.meta.phase} checkpoint with a student")
        return checkpoint.student, checkpoint
    if checkpoint.student is not None:
        return checkpoint.student, None
    return init_student(checkpoint.teacher, config), None

@timefunc
def cmd_post_train(ctx: RunContext, args: argparse.Namespace):
    seed = ctx.resolve_seed(args.seed)
    config_values = ctx.with_overrides(post_train_epochs=args.epochs)
    _require_train_keys(config_values, "post_train_epochs")
    checkpoint = load_checkpoint(ctx.input("checkpoint", args.checkpoint))
    _check_max_len(TaskConfig.from_config(config_values).max_len, checkpoint)
    instances = _load_instances(ctx.input("data", args.data))
    if not instances:
        raise SSPError(f"no training instances in {args.data}")
    sizes = {instance.bow_target.size for instance in instances}
    if sizes != {checkpoint.vocab.size}:
        raise SSPError(f"instances were built with vocabulary size {sorted(sizes)}, "
                       f"the checkpoint has {checkpoint.vocab.size}")
    longest = max(instance.model_input.length for instance in instances)
    if longest > checkpoint.encoder_config.max_positions:
        raise ConfigError(f"instances in {args.data} reach {longest} tokens, beyond max_positions = "
                          f"{checkpoint.encoder_config.max_positions} of the checkpoint encoder")
    config = TrainConfig.from_config(config_values, seed)
    tasks = tuple(TaskConfig.from_config(config_values).tasks)
    model, resume = _starting_model(checkpoint, config, args.resume)
    result = post_train(instances, model, checkpoint.teacher, config, resume=resume,
                        stop_after_steps=args.stop_after_steps, tasks=tasks, verbose=ctx.verbose)
    _save_training(ctx, checkpoint, result)

@timefunc
def cmd_fine_tune(ctx: RunContext, args: argparse.Namespace):
    seed = ctx.resolve_seed(args.seed)
    config_values = ctx.with_overrides(fine_tune_epochs=args.epochs)
    _require_train_keys(config_values, "fine_tune_epochs")
    checkpoint = load_checkpoint(ctx.input("checkpoint", args.checkpoint))
    max_len = TaskConfig.from_config(config_values).max_len
    _check_max_len(max_len, checkpoint)
    conversations = _read_conversations_or_fail(ctx.input("conversations", args.conversations))
    if args.folds is not None:
        sessions = sorted({_session_of(c) for c in conversations})
        if args.fold is None or not 0 <= args.fold < args.folds:
            raise SSPError(f"--fold must be in [0, {args.folds}) when --folds is given")
        _, held_out_ids = kfold_splits(sessions, args.folds, seed)[args.fold]
        held_out = set(held_out_ids)
        ctx.output("held_out", write_conversations(ctx.path(HELD_OUT_FILE),
                                                   [c for c in conversations if _session_of(c) in held_out]))
        conversations = [c for c in conversations if _session_of(c) not in held_out]
    config = TrainConfig.from_config(config_values, seed)
    instances = build_fine_tune_instances(conversations, checkpoint.vocab, max_len, seed)
    model, resume = _starting_model(checkpoint, config, args.resume)
    result = fine_tune(instances, model, checkpoint.teacher, config, resume=resume,
                       stop_after_steps=args.stop_after_steps, verbose=ctx.verbose)
    _save_training(ctx, checkpoint, result)

def _save_training(ctx: RunContext, checkpoint: Checkpoint, result):
    out = Checkpoint(encoder_config=checkpoint.encoder_config, vocab=checkpoint.vocab, teacher=checkpoint.teacher,
                     meta=result.meta, student=result.model, optimizer_state=result.optimizer_state,
                     history=result.history)
    ctx.output("checkpoint", save_checkpoint(out, ctx.path(CHECKPOINT_FILE)))
    ctx.output("metrics", save_metrics(ctx.path(METRICS_FILE), result.metrics))
    if ctx.verbose:
        print(f"{result.meta.phase}: {result.meta.step} steps, {count_parameters(result.model)} parameters, "
              f"student {param_checksum(result.model)[:12]}" + ("" if result.completed else " (stopped early)"))

@timefunc
def cmd_index(ctx: RunContext, args: argparse.Namespace):
    checkpoint = load_checkpoint(ctx.input("checkpoint", args.checkpoint))
    corpus = read_corpus(ctx.input("corpus", args.corpus))
    eval_config = EvalConfig.from_config(ctx.config)
    _check_max_len(eval_config.max_len, checkpoint)
    index = index_corpus(corpus, checkpoint.teacher, checkpoint.vocab, eval_config.max_len, verbose=ctx.verbose)
    ctx.output("index", index.save(ctx.path(INDEX_FILE)))

def _conversational_encoder(checkpoint: Checkpoint):
    return checkpoint.student if checkpoint.student is not None else checkpoint.teacher

@timefunc
def cmd_eval(ctx: RunContext, args: argparse.Namespace):
    checkpoint = load_checkpoint(ctx.input("checkpoint", args.checkpoint))
    conversations = _read_conversations_or_fail(ctx.input("conversations", args.conversations))
    index = DenseIndex.load(ctx.input("index", args.index))
    qrels = read_qrels(ctx.input("qrels", args.qrels))
    eval_config = EvalConfig.from_config(ctx.config)
    _check_max_len(eval_config.max_len, checkpoint)
    run, metrics = evaluate_conversations(_conversational_encoder(checkpoint), conversations, index, qrels,
                                          checkpoint.vocab, eval_config)
    ctx.output("run", write_run(run, ctx.path(RUN_FILE), args.tag))
    per_query = per_query_metrics(run, qrels, eval_config.positive_threshold, eval_config.ndcg_gain,
                                  eval_config.skip_missing_queries)
    ctx.output("per_query", save_data_frame(ctx.path(PER_QUERY_FILE), per_query))
    ctx.output("metrics", save_data_frame(ctx.path(METRICS_FILE), pd.DataFrame([metrics])))
    print(f"MRR {metrics['mrr']:.4f} NDCG@3 {metrics['ndcg3']:.4f} over {metrics['queries']} queries")

@timefunc
def cmd_robustness(ctx: RunContext, args: argparse.Namespace):
    seed = ctx.resolve_seed(args.seed)
    checkpoint = load_checkpoint(ctx.input("checkpoint", args.checkpoint))
    conversations = _read_conversations_or_fail(ctx.input("conversations", args.conversations))
    noise_pool = read_conversations(ctx.input("noise_pool", args.noise_pool or args.conversations))
    index = DenseIndex.load(ctx.input("index", args.index))
    qrels = read_qrels(ctx.input("qrels", args.qrels))
    eval_config = EvalConfig.from_config(ctx.config)
    _check_max_len(eval_config.max_len, checkpoint)
    curve = robustness_eval(_conversational_encoder(checkpoint), conversations, noise_pool, args.max_added, index,
                            qrels, checkpoint.vocab, eval_config, seed, ctx.verbose)
    ctx.output("curve", save_data_frame(ctx.path(CURVE_FILE), curve))
    ctx.output("curve_plot", plot_curve(curve, ctx.path(CURVE_PLOT_FILE)))
    print(curve.to_string(index=False))

@timefunc
def cmd_experiment(ctx: RunContext, args: argparse.Namespace):
    settings = ExperimentSettings.from_config(ctx.config)
    seeds = args.seeds if args.seeds else [ctx.resolve_seed(args.seed)]
    ctx.seed = seeds[0]
    if args.kind == "variants":
        rows, verdicts = compare_variants(seeds, settings, args.variants or tuple(VARIANTS), ctx.verbose)
        ctx.output("variants", save_data_frame(ctx.path("variants.csv"), rows))
        ctx.output("verdicts", save_data_frame(ctx.path("verdicts.csv"), verdicts))
        print(verdicts.to_string(index=False))
    elif args.kind == "robustness":
        curves, drops = compare_robustness(seeds, settings, args.max_added, verbose=ctx.verbose)
        ctx.output("curve", save_data_frame(ctx.path(CURVE_FILE), curves))
        ctx.output("drops", save_data_frame(ctx.path("drops.csv"), drops))
        ctx.output("curve_plot", plot_curve(curves, ctx.path(CURVE_PLOT_FILE)))
        print(drops.to_string(index=False))
    elif args.kind == "heads":
        rows = [dict(seed=seed, **head_quality(seed, settings, ctx.verbose)) for seed in seeds]
        ctx.output("heads", save_data_frame(ctx.path("heads.csv"), pd.DataFrame(rows)))
        print(pd.DataFrame(rows).to_string(index=False))
    else:
        if not args.weight or not args.values:
            raise SSPError("a sweep needs --weight and --values")
        sweep = sweep_weight(args.weight, args.values, seeds[0], settings, ctx.verbose)
        ctx.output("sweep", save_data_frame(ctx.path("sweep.csv"), sweep))
        print(sweep.to_string(index=False))

@timefunc
def cmd_plot(ctx: RunContext, args: argparse.Namespace):
    df = load_data_frame(ctx.input("input", args.input))
    if df is None or is_empty_data_frame(df):
        raise SSPError(f"nothing to plot in {args.input}")
    target = ctx.path(args.name or os.path.splitext(os.path.basename(args.input))[0] + ".png")
    if "j" in df.columns:
        ctx.output("plot", plot_curve(df, target))
    elif "step" in df.columns:
        ctx.output("plot", plot_metrics(df, target))
    else:
        raise SSPError(f"{args.input} is neither a metrics log (step column) nor a curve (j column)")


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt

# Loss terms against optimizer step, one panel per term present in the log
def plot_metrics(df: pd.DataFrame, path: str) -> str:
    plt = _pyplot()
    terms = [c for c in df.columns if c != "step"]
    fig, axes = plt.subplots(1, len(terms), figsize=(3.2 * len(terms), 3.0), constrained_layout=True, squeeze=False)
    for ax, term in zip(axes[0], terms):
        ax.plot(df["step"], df[term])
        ax.set_title(term)
        ax.set_xlabel("step")
        ax.grid(True, alpha=0.3)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path

# MRR and NDCG@3 against the number of prepended off-topic utterances
def plot_curve(df: pd.DataFrame, path: str) -> str:
    plt = _pyplot()
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2), constrained_layout=True)
    groups = df.groupby("variant") if "variant" in df.columns else [("model", df)]
    for ax, metric, title in zip(axes, ("mrr", "ndcg3"), ("MRR", "NDCG@3")):
        for name, group in groups:
            means = group.groupby("j")[metric].mean()
            ax.plot(means.index, means.values, marker="o", label=str(name))
        ax.set_title(title)
        ax.set_xlabel("added off-topic utterances")
        ax.grid(True, alpha=0.3)
    axes[-1].legend(loc="best", fontsize=8)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


COMMANDS: Dict[str, Callable] = {
    "generate": cmd_generate,
    "build-data": cmd_build_data,
    "pretrain-teacher": cmd_pretrain_teacher,
    "post-train": cmd_post_train,
    "fine-tune": cmd_fine_tune,
    "index": cmd_index,
    "eval": cmd_eval,
    "robustness": cmd_robustness,
    "experiment": cmd_experiment,
    "plot": cmd_plot,
}

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="self-supervised post-training for conversational dense retrieval")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="flat key = value config file")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed and SSP_SEED")
        p.add_argument("--out", required=True, help="output directory; receives one manifest.json")
        p.add_argument("--verbose", action="store_true")
        return p

    add("generate", "write a synthetic corpus, qrels, hidden truth and vocabulary")

    p = add("build-data", "build training instances, their cache and a stats report")
    p.add_argument("--conversations", required=True)
    p.add_argument("--noise-pool", default=None, help="defaults to the conversations themselves")
    p.add_argument("--vocab", default=None, help="built from the conversations when omitted")

    p = add("pretrain-teacher", "train the frozen teacher on (reformulated query, relevant document) pairs")
    p.add_argument("--conversations", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--vocab", default=None)

    p = add("post-train", "self-supervised post-training of the student")
    p.add_argument("--data", required=True, help="directory written by build-data")
    p.add_argument("--checkpoint", required=True, help="teacher checkpoint, or a post-train checkpoint")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--stop-after-steps", type=int, default=None)
    p.add_argument("--resume", action="store_true",
                   help="continue the interrupted run in --checkpoint; its config and data must match")

    p = add("fine-tune", "KD fine-tuning on target conversations")
    p.add_argument("--conversations", "--data", dest="conversations", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--stop-after-steps", type=int, default=None)
    p.add_argument("--resume", action="store_true",
                   help="continue the interrupted run in --checkpoint; its config and data must match")
    p.add_argument("--folds", type=int, default=None, help="train on all folds but --fold")
    p.add_argument("--fold", type=int, default=None)

    p = add("index", "encode the corpus with the teacher")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)

    for name, help_text in (("eval", "rank the corpus for each conversation and score the run"),
                            ("robustness", "metric curve over prepended off-topic utterances")):
        p = add(name, help_text)
        p.add_argument("--conversations", required=True)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--index", required=True)
        p.add_argument("--qrels", required=True)
        if name == "eval":
            p.add_argument("--tag", default="ssp", help="run tag written in the last TREC column")
        else:
            p.add_argument("--noise-pool", default=None)
            p.add_argument("--max-added", type=int, default=6)

    p = add("experiment", "variant comparison, robustness comparison, head quality or weight sweep")
    p.add_argument("--kind", choices=["variants", "robustness", "heads", "sweep"], required=True)
    p.add_argument("--seeds", type=int, nargs="*", default=None)
    p.add_argument("--variants", nargs="*", choices=sorted(VARIANTS), default=None)
    p.add_argument("--max-added", type=int, default=6)
    p.add_argument("--weight", choices=["alpha", "beta", "gamma"], default=None)
    p.add_argument("--values", type=float, nargs="*", default=None)

    p = add("plot", "render a metrics log or a robustness curve as a PNG")
    p.add_argument("--input", required=True)
    p.add_argument("--name", default=None, help="image file name inside --out")
    return parser

# Returns the process exit code
def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    command = COMMANDS[args.command]
    try:
        ctx = RunContext(args.command, args)
        command(ctx, args)
        ctx.write_manifest(command.last_elapsed)
    except SSPError as err:
        print(f"ERROR: {err}", file=sys.stderr)
        return err.exit_code
    except ValueError as err:
        print(f"ERROR: {err}", file=sys.stderr)
        return 2
    return 0


################################################
# Tests
################################################

TOY_CONFIG = """\
# toy model used by the command tests
seed = 3
n_topics = 3
entities_per_topic = 2
n_conversations = 6
docs_per_entity = 2
queries_per_conversation = 3
hidden_size = 16
layers = 1
heads = 2
ff_size = 32
dropout = 0.0
max_len = 48
learning_rate = 1e-3
batch_size = 8
teacher_epochs = 1
post_train_epochs = 1
fine_tune_epochs = 1
top_k = 20
"""

def _toy_config(tmp: str, text: str = TOY_CONFIG) -> str:
    return atomic_write_text(os.path.join(tmp, "toy.env"), text)

def _read_bytes(path: str) -> bytes:
    with open(path, "rb") as f:
        return f.read()

def _manifest(out_dir: str) -> dict:
    with open(os.path.join(out_dir, MANIFEST_FILE), "r", encoding="utf-8") as f:
        return json.load(f)

def test_pipeline():
    with tempfile.TemporaryDirectory() as tmp:
        config = _toy_config(tmp)
        d = lambda name: os.path.join(tmp, name)
        assert main(["generate", "--config", config, "--out", d("data")]) == 0, "ERROR: generate"
        conversations, vocab = os.path.join(d("data"), CONVERSATIONS_FILE), os.path.join(d("data"), VOCAB_FILE)
        corpus, qrels = os.path.join(d("data"), CORPUS_FILE), os.path.join(d("data"), QRELS_FILE)
        assert main(["build-data", "--config", config, "--conversations", conversations, "--vocab", vocab,
                     "--out", d("instances")]) == 0, "ERROR: build-data"
        assert main(["pretrain-teacher", "--config", config, "--conversations", conversations, "--corpus", corpus,
                     "--qrels", qrels, "--vocab", vocab, "--out", d("teacher")]) == 0, "ERROR: pretrain-teacher"
        teacher_ckpt = os.path.join(d("teacher"), CHECKPOINT_FILE)
        assert main(["post-train", "--config", config, "--data", d("instances"), "--checkpoint", teacher_ckpt,
                     "--out", d("post")]) == 0, "ERROR: post-train"
        post_ckpt = os.path.join(d("post"), CHECKPOINT_FILE)
        assert main(["fine-tune", "--config", config, "--conversations", conversations, "--checkpoint", post_ckpt,
                     "--folds", "2", "--fold", "0", "--out", d("tuned")]) == 0, "ERROR: fine-tune"
        assert main(["index", "--config", config, "--corpus", corpus, "--checkpoint", teacher_ckpt,
                     "--out", d("index")]) == 0, "ERROR: index"
        index = os.path.join(d("index"), INDEX_FILE)
        held_out = os.path.join(d("tuned"), HELD_OUT_FILE)
        tuned_ckpt = os.path.join(d("tuned"), CHECKPOINT_FILE)
        assert main(["eval", "--config", config, "--conversations", held_out, "--checkpoint", tuned_ckpt,
                     "--index", index, "--qrels", qrels, "--out", d("eval")]) == 0, "ERROR: eval"
        assert main(["robustness", "--config", config, "--conversations", held_out, "--noise-pool", conversations,
                     "--checkpoint", tuned_ckpt, "--index", index, "--qrels", qrels, "--max-added", "0",
                     "--out", d("robust")]) == 0, "ERROR: robustness"
        evaluated = load_data_frame(os.path.join(d("eval"), METRICS_FILE))
        curve = load_data_frame(os.path.join(d("robust"), CURVE_FILE))
        assert len(curve) == 1 and curve["mrr"].iloc[0] == evaluated["mrr"].iloc[0], "ERROR: j=0 curve row"
        assert main(["plot", "--input", os.path.join(d("post"), METRICS_FILE), "--out", d("plots")]) == 0, \
            "ERROR: plot"
        assert os.path.isfile(os.path.join(d("plots"), "metrics.png")), "ERROR: plot file"
        for name in ("data", "instances", "teacher", "post", "tuned", "index", "eval", "robust", "plots"):
            manifest = _manifest(d(name))
            assert manifest["duration_seconds"] is not None, f"ERROR: manifest of {name}"
        assert _manifest(d("post"))["seed"] == 3, "ERROR: seed from config"
        with open(os.path.join(d("eval"), RUN_FILE), "r", encoding="utf-8") as f:
            for line in f:
                fields = line.split()
                assert len(fields) == 6 and fields[1] == "Q0" and fields[5] == "ssp", f"ERROR: run line {line}"

def test_build_data_is_deterministic():
    with tempfile.TemporaryDirectory() as tmp:
        config = _toy_config(tmp)
        assert main(["generate", "--config", config, "--out", os.path.join(tmp, "data")]) == 0, "ERROR: generate"
        conversations = os.path.join(tmp, "data", CONVERSATIONS_FILE)
        for name in ("a", "b"):
            assert main(["build-data", "--config", config, "--seed", "11", "--conversations", conversations,
                         "--out", os.path.join(tmp, name)]) == 0, "ERROR: build-data"
        for file_name in (INSTANCES_FILE, STATS_FILE, VOCAB_FILE):
            assert _read_bytes(os.path.join(tmp, "a", file_name)) == _read_bytes(os.path.join(tmp, "b", file_name)), \
                f"ERROR: {file_name} differs between identical runs"

def test_error_exit_codes():
    with tempfile.TemporaryDirectory() as tmp:
        empty = atomic_write_text(os.path.join(tmp, "empty.jsonl"), "")
        assert main(["build-data", "--seed", "1", "--conversations", empty, "--out", os.path.join(tmp, "x")]) == 2, \
            "ERROR: empty conversations must exit 2"
        bad = atomic_write_text(os.path.join(tmp, "bad.jsonl"), '{"conv_id": "a", "queries": ["q"]}\nnot json\n')
        assert main(["build-data", "--seed", "1", "--conversations", bad, "--out", os.path.join(tmp, "y")]) == 2, \
            "ERROR: malformed line must exit 2"
        config = _toy_config(tmp)
        assert main(["generate", "--config", config, "--out", os.path.join(tmp, "data")]) == 0, "ERROR: generate"
        data = os.path.join(tmp, "data")
        no_rate = _toy_config(tmp, TOY_CONFIG.replace("learning_rate = 1e-3\n", ""))
        assert main(["pretrain-teacher", "--config", no_rate, "--conversations",
                     os.path.join(data, CONVERSATIONS_FILE), "--corpus", os.path.join(data, CORPUS_FILE),
                     "--qrels", os.path.join(data, QRELS_FILE), "--out", os.path.join(tmp, "t")]) == 2, \
            "ERROR: missing learning_rate must exit 2"
        assert not os.path.isfile(os.path.join(tmp, "x", MANIFEST_FILE)), "ERROR: manifest written on failure"

def test_zero_epochs_keeps_checkpoint():
    with tempfile.TemporaryDirectory() as tmp:
        config = _toy_config(tmp)
        d = lambda name: os.path.join(tmp, name)
        main(["generate", "--config", config, "--out", d("data")])
        conversations = os.path.join(d("data"), CONVERSATIONS_FILE)
        main(["build-data", "--config", config, "--conversations", conversations,
              "--vocab", os.path.join(d("data"), VOCAB_FILE), "--out", d("instances")])
        main(["pretrain-teacher", "--config", config, "--conversations", conversations,
              "--corpus", os.path.join(d("data"), CORPUS_FILE), "--qrels", os.path.join(d("data"), QRELS_FILE),
              "--vocab", os.path.join(d("data"), VOCAB_FILE), "--out", d("teacher")])
        assert main(["post-train", "--config", config, "--data", d("instances"), "--checkpoint",
                     os.path.join(d("teacher"), CHECKPOINT_FILE), "--out", d("post")]) == 0, "ERROR: post-train"
        assert main(["post-train", "--config", config, "--data", d("instances"), "--epochs", "0", "--checkpoint",
                     os.path.join(d("post"), CHECKPOINT_FILE), "--out", d("again")]) == 0, "ERROR: zero epochs"
        before = load_checkpoint(os.path.join(d("post"), CHECKPOINT_FILE))
        after = load_checkpoint(os.path.join(d("again"), CHECKPOINT_FILE))
        assert param_checksum(before.student) == param_checksum(after.student), "ERROR: zero epochs changed weights"

# generate, build-data and pretrain-teacher into tmp; returns the data, instances and teacher directories
def _teacher_run(tmp: str, config: str) -> Tuple[str, str, str]:
    data, instances, teacher = (os.path.join(tmp, name) for name in ("data", "instances", "teacher"))
    conversations, vocab = os.path.join(data, CONVERSATIONS_FILE), os.path.join(data, VOCAB_FILE)
    assert main(["generate", "--config", config, "--out", data]) == 0, "ERROR: generate"
    assert main(["build-data", "--config", config, "--conversations", conversations, "--vocab", vocab,
                 "--out", instances]) == 0, "ERROR: build-data"
    assert main(["pretrain-teacher", "--config", config, "--conversations", conversations,
                 "--corpus", os.path.join(data, CORPUS_FILE), "--qrels", os.path.join(data, QRELS_FILE),
                 "--vocab", vocab, "--out", teacher]) == 0, "ERROR: pretrain-teacher"
    return data, instances, teacher

def test_resume_after_stop_matches_uninterrupted():
    with tempfile.TemporaryDirectory() as tmp:
        config = _toy_config(tmp)
        d = lambda name: os.path.join(tmp, name)
        _, instances, teacher = _teacher_run(tmp, config)
        teacher_ckpt = os.path.join(teacher, CHECKPOINT_FILE)
        assert main(["post-train", "--config", config, "--data", instances, "--checkpoint", teacher_ckpt,
                     "--out", d("full")]) == 0, "ERROR: uninterrupted post-train"
        assert main(["post-train", "--config", config, "--data", instances, "--checkpoint", teacher_ckpt,
                     "--stop-after-steps", "1", "--out", d("stopped")]) == 0, "ERROR: stopped post-train"
        assert main(["post-train", "--config", config, "--data", instances, "--resume", "--checkpoint",
                     os.path.join(d("stopped"), CHECKPOINT_FILE), "--out", d("resumed")]) == 0, "ERROR: resume"
        full = load_checkpoint(os.path.join(d("full"), CHECKPOINT_FILE))
        resumed = load_checkpoint(os.path.join(d("resumed"), CHECKPOINT_FILE))
        assert full.meta.step == resumed.meta.step, "ERROR: resumed run step count"
        assert param_checksum(full.student) == param_checksum(resumed.student), "ERROR: resume diverged"
        assert _read_bytes(os.path.join(d("full"), METRICS_FILE)) == \
            _read_bytes(os.path.join(d("resumed"), METRICS_FILE)), "ERROR: resumed metrics log differs"

def test_resume_needs_the_same_run():
    with tempfile.TemporaryDirectory() as tmp:
        config = _toy_config(tmp)
        d = lambda name: os.path.join(tmp, name)
        data, instances, teacher = _teacher_run(tmp, config)
        conversations = os.path.join(data, CONVERSATIONS_FILE)
        assert main(["post-train", "--config", config, "--data", instances, "--checkpoint",
                     os.path.join(teacher, CHECKPOINT_FILE), "--out", d("post")]) == 0, "ERROR: post-train"
        post_ckpt = os.path.join(d("post"), CHECKPOINT_FILE)
        assert main(["fine-tune", "--config", config, "--conversations", conversations, "--checkpoint", post_ckpt,
                     "--folds", "2", "--fold", "0", "--out", d("fold0")]) == 0, "ERROR: fine-tune fold 0"
        finished = os.path.join(d("fold0"), CHECKPOINT_FILE)
        # a finished fold 0 run cannot be resumed on fold 1 data
        assert main(["fine-tune", "--config", config, "--conversations", conversations, "--checkpoint", finished,
                     "--resume", "--folds", "2", "--fold", "1", "--out", d("fold1")]) == 2, \
            "ERROR: resume on other data must exit 2"
        # nor with another learning rate
        changed = _toy_config(tmp, TOY_CONFIG.replace("learning_rate = 1e-3", "learning_rate = 5e-4"))
        assert main(["fine-tune", "--config", changed, "--conversations", conversations, "--checkpoint", finished,
                     "--resume", "--folds", "2", "--fold", "0", "--out", d("lr")]) == 2, \
            "ERROR: resume under another config must exit 2"
        # without --resume the fold 0 student is trained again on fold 1
        assert main(["fine-tune", "--config", config, "--conversations", conversations, "--checkpoint", finished,
                     "--folds", "2", "--fold", "1", "--out", d("fresh")]) == 0, "ERROR: fresh fine-tune"
        before = load_checkpoint(finished)
        after = load_checkpoint(os.path.join(d("fresh"), CHECKPOINT_FILE))
        assert after.meta.step > 0 and param_checksum(after.student) != param_checksum(before.student), \
            "ERROR: fresh run on new data did not train"
        assert after.meta.data_hash != before.meta.data_hash, "ERROR: data hash ignores the fold"
        # a teacher checkpoint has nothing to resume
        assert main(["post-train", "--config", config, "--data", instances, "--resume", "--checkpoint",
                     os.path.join(teacher, CHECKPOINT_FILE), "--out", d("nothing")]) == 2, \
            "ERROR: resuming a teacher checkpoint must exit 2"

def test_max_len_beyond_positions():
    with tempfile.TemporaryDirectory() as tmp:
        config = _toy_config(tmp)
        data, instances, teacher = _teacher_run(tmp, config)
        too_long = _toy_config(tmp, TOY_CONFIG.replace("max_len = 48", "max_len = 1024"))
        teacher_ckpt = os.path.join(teacher, CHECKPOINT_FILE)
        runs = {"post-train": ["--data", instances],
                "fine-tune": ["--conversations", os.path.join(data, CONVERSATIONS_FILE)],
                "index": ["--corpus", os.path.join(data, CORPUS_FILE)]}
        for command, inputs in runs.items():
            errors = io.StringIO()
            with contextlib.redirect_stderr(errors):
                code = main([command, "--config", too_long, "--checkpoint", teacher_ckpt, "--out",
                             os.path.join(tmp, command)] + inputs)
            assert code == 2 and "max_len" in errors.getvalue(), f"ERROR: {command} accepted max_len 1024"

def tests():
    test_pipeline()
    test_build_data_is_deterministic()
    test_error_exit_codes()
    test_zero_epochs_keeps_checkpoint()
    test_resume_after_stop_matches_uninterrupted()
    test_resume_needs_the_same_run()
    test_max_len_beyond_positions()
    print("all tests passed in", os.path.basename(__file__))

if __name__ == "__main__":
    sys.exit(main())
