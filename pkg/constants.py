import os
from dotenv import load_dotenv
from utils import str2bool

# a local .env is optional; it only supplies SSP_SEED and SSP_SLOW_TESTS
if os.path.isfile(".env"):
    load_dotenv()

VERSION = "0.1.0"

SSP_SEED = os.getenv("SSP_SEED")
SSP_SLOW_TESTS = str2bool(os.getenv("SSP_SLOW_TESTS", "false"))

# special tokens, ids 0..3 in this order
CLS_TOKEN = "[CLS]"
SEP_TOKEN = "[SEP]"
PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"
SPECIAL_TOKENS = [CLS_TOKEN, SEP_TOKEN, PAD_TOKEN, UNK_TOKEN]
CLS_ID, SEP_ID, PAD_ID, UNK_ID = 0, 1, 2, 3

# data-model / task-builder defaults
DEFAULT_MAX_LEN = 256
MIN_MAX_LEN = 8
DEFAULT_MIN_FREQ = 1
DEFAULT_PERTURB_PROB = 1.0
DEFAULT_MIN_NOISE_POOL = 1
ALL_TASKS = ("ts", "ci", "wr", "kd")

# encoder defaults
DEFAULT_HIDDEN_SIZE = 64
DEFAULT_LAYERS = 2
DEFAULT_HEADS = 4
DEFAULT_FF_SIZE = 128
DEFAULT_MAX_POSITIONS = 512
DEFAULT_DROPOUT = 0.1
INIT_STD = 0.02

# objectives
PROB_EPS = 1e-9
DEFAULT_ALPHA = 1e-2
DEFAULT_BETA = 1e-3
DEFAULT_GAMMA = 1e-2
METRICS_COLUMNS = ["step", "l_ts", "l_ci", "l_wr", "l_kd", "l_final"]

# trainer
DEFAULT_LEARNING_RATE = 2e-5
DEFAULT_BATCH_SIZE = 64
DEFAULT_POST_TRAIN_EPOCHS = 2
DEFAULT_FINE_TUNE_EPOCHS = 2
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
DEFAULT_TEACHER_EPOCHS = 3
DEFAULT_TEACHER_LEARNING_RATE = 1e-3
CHECKPOINT_FORMAT = "ssp-checkpoint"
CHECKPOINT_FORMAT_VERSION = 1

# retrieval-eval
DEFAULT_POSITIVE_THRESHOLD = 2
DEFAULT_TOP_K = 100
NDCG_DEPTH = 3

# file names inside an artifact directory
MANIFEST_FILE = "manifest.json"
CONVERSATIONS_FILE = "conversations.jsonl"
CORPUS_FILE = "corpus.jsonl"
QRELS_FILE = "qrels.txt"
TRUTH_FILE = "truth.jsonl"
INSTANCES_FILE = "instances.jsonl"
INSTANCES_CACHE_FILE = "instances.parquet"
STATS_FILE = "stats.csv"
K_HISTOGRAM_FILE = "k_histogram.csv"
CHECKPOINT_FILE = "checkpoint.pt"
METRICS_FILE = "metrics.csv"
INDEX_FILE = "index.npz"
RUN_FILE = "run.trec"
CURVE_FILE = "curve.csv"
CURVE_PLOT_FILE = "curve.png"

# used by data_frame_utils.py
CSV_FORMAT = "csv"
PARQUET_FORMAT = "parquet"

################################################
# Tests
################################################

def test_constants():
    assert SPECIAL_TOKENS.index(CLS_TOKEN) == CLS_ID, "ERROR: [CLS] id"
    assert SPECIAL_TOKENS.index(SEP_TOKEN) == SEP_ID, "ERROR: [SEP] id"
    assert SPECIAL_TOKENS.index(PAD_TOKEN) == PAD_ID, "ERROR: [PAD] id"
    assert SPECIAL_TOKENS.index(UNK_TOKEN) == UNK_ID, "ERROR: [UNK] id"
    assert DEFAULT_HIDDEN_SIZE % DEFAULT_HEADS == 0, "ERROR: heads must divide hidden size"
    assert DEFAULT_MAX_POSITIONS >= DEFAULT_MAX_LEN, "ERROR: positions shorter than max_len"

def tests():
    test_constants()
    print("all tests passed in", os.path.basename(__file__))

def main():
    tests()

if __name__ == "__main__":
    main()
