import os
import hashlib
import tempfile
from typing import Dict, List, Mapping, Optional
from dotenv import dotenv_values
from utils import SSPError, str2bool, is_readable_file, atomic_write_text
from constants import *


class ConfigError(SSPError):
    pass


# Reads a flat `key = value` config file; comments and blank lines are skipped
def load_config(config_path: Optional[str]) -> Dict[str, str]:
    if config_path is None:
        return {}
    if not is_readable_file(config_path):
        raise ConfigError(f"config file not readable: {config_path}")
    values = dotenv_values(config_path)
    return {key.strip(): (value or "").strip() for key, value in values.items()}

# Returns config with overrides applied; overrides whose value is None are ignored
def merge_overrides(config: Mapping[str, str], overrides: Mapping[str, object]) -> Dict[str, str]:
    merged = dict(config)
    for key, value in overrides.items():
        if value is not None:
            merged[key] = str(value)
    return merged

# Resolves the run seed: explicit value, then config, then SSP_SEED, else ConfigError
def resolve_seed(config: Mapping[str, str], flag_seed: Optional[int] = None) -> int:
    if flag_seed is not None:
        return int(flag_seed)
    if config.get("seed"):
        return get_int(config, "seed")
    env_seed = os.getenv("SSP_SEED") or SSP_SEED
    if env_seed:
        return int(env_seed)
    raise ConfigError("missing config key: seed (set it in the config, pass --seed or export SSP_SEED)")

def require(config: Mapping[str, str], key: str) -> str:
    value = config.get(key)
    if value is None or value == "":
        raise ConfigError(f"missing config key: {key}")
    return value

def get_str(config: Mapping[str, str], key: str, default: Optional[str] = None) -> str:
    if default is None:
        return require(config, key)
    return config.get(key) or default

def get_int(config: Mapping[str, str], key: str, default: Optional[int] = None) -> int:
    raw = config.get(key)
    if raw is None or raw == "":
        if default is None:
            raise ConfigError(f"missing config key: {key}")
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"config key {key} expects an integer, got {raw!r}")

def get_float(config: Mapping[str, str], key: str, default: Optional[float] = None) -> float:
    raw = config.get(key)
    if raw is None or raw == "":
        if default is None:
            raise ConfigError(f"missing config key: {key}")
        return default
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key} expects a number, got {raw!r}")

def get_optional_float(config: Mapping[str, str], key: str) -> Optional[float]:
    raw = config.get(key)
    if raw is None or raw == "" or raw.lower() == "none":
        return None
    return get_float(config, key)

def get_bool(config: Mapping[str, str], key: str, default: Optional[bool] = None) -> bool:
    raw = config.get(key)
    if raw is None or raw == "":
        if default is None:
            raise ConfigError(f"missing config key: {key}")
        return default
    return str2bool(raw)

# Parses a comma separated list such as `tasks = ts,ci,wr,kd`
def get_list(config: Mapping[str, str], key: str, default: Optional[List[str]] = None) -> List[str]:
    raw = config.get(key)
    if raw is None or raw == "":
        if default is None:
            raise ConfigError(f"missing config key: {key}")
        return list(default)
    return [item.strip() for item in raw.split(",") if item.strip()]

# Stable hash of the config values (sorted key = value lines)
def config_hash(config: Mapping[str, object]) -> str:
    text = "\n".join(f"{key}={config[key]}" for key in sorted(config))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


################################################
# Tests
################################################

def test_load_and_override():
    with tempfile.TemporaryDirectory() as tmp:
        path = atomic_write_text(os.path.join(tmp, "run.env"),
                                 "# comment\nlearning_rate = 2e-5\nbatch_size=64\n\ntasks = ts, ci\n")
        config = load_config(path)
    assert config["learning_rate"] == "2e-5", f"ERROR: got {config}"
    assert get_float(config, "learning_rate") == 2e-5, "ERROR: float parse"
    assert get_int(config, "batch_size") == 64, "ERROR: int parse"
    assert get_list(config, "tasks") == ["ts", "ci"], "ERROR: list parse"
    merged = merge_overrides(config, {"batch_size": 8, "seed": None})
    assert get_int(merged, "batch_size") == 8, "ERROR: flags must win"
    assert "seed" not in merged, "ERROR: None overrides must be ignored"

def test_missing_key():
    try:
        get_int({}, "post_train_epochs")
        assert False, "ERROR: missing key accepted"
    except ConfigError as err:
        assert "post_train_epochs" in str(err), f"ERROR: key name missing from {err}"
        assert err.exit_code == 2, "ERROR: exit code"

def test_resolve_seed():
    assert resolve_seed({"seed": "7"}) == 7, "ERROR: config seed"
    assert resolve_seed({"seed": "7"}, flag_seed=3) == 3, "ERROR: flag seed must win"
    previous = os.environ.get("SSP_SEED")
    os.environ["SSP_SEED"] = "11"
    try:
        assert resolve_seed({}) == 11, "ERROR: SSP_SEED fallback"
    finally:
        if previous is None:
            del os.environ["SSP_SEED"]
        else:
            os.environ["SSP_SEED"] = previous

def test_config_hash():
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1}), "ERROR: hash order"
    assert config_hash({"a": 1}) != config_hash({"a": 2}), "ERROR: hash collision"

def tests():
    test_load_and_override()
    test_missing_key()
    test_resolve_seed()
    test_config_hash()
    print("all tests passed in", os.path.basename(__file__))

def main():
    tests()

if __name__ == "__main__":
    main()
