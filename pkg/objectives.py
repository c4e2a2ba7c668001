import os
import math
import torch
from dataclasses import dataclass
from typing import Dict, Mapping, Union
from utils import SSPError
from config_utils import get_float, ConfigError
from task_builder import LossMask
from constants import *

Scalar = Union[float, torch.Tensor]

# published weight settings: (alpha, beta, gamma) with the max_len they go with
WEIGHT_PRESETS = {
    "short_context": (1e-2, 1e-3, 1e-2, 256),
    "long_context": (1e-1, 2e-3, 2e-2, 512),
}


class NonFiniteLossError(SSPError):
    def __init__(self, term: str, step: int = -1):
        super().__init__(f"non-finite loss term {term} at step {step}", exit_code=1)
        self.term = term
        self.step = step


@dataclass(frozen=True)
class LossWeights:
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"loss weight {name} must be finite and >= 0, got {value}")

    @classmethod
    def preset(cls, name: str) -> "LossWeights":
        if name not in WEIGHT_PRESETS:
            raise ConfigError(f"unknown weights_preset {name}, expected one of {sorted(WEIGHT_PRESETS)}")
        alpha, beta, gamma, _ = WEIGHT_PRESETS[name]
        return cls(alpha, beta, gamma)

    # weights_preset first, then explicit alpha / beta / gamma keys
    @classmethod
    def from_config(cls, values: Mapping[str, str]) -> "LossWeights":
        base = cls.preset(values["weights_preset"]) if values.get("weights_preset") else cls()
        return cls(alpha=get_float(values, "alpha", base.alpha),
                   beta=get_float(values, "beta", base.beta),
                   gamma=get_float(values, "gamma", base.gamma))


@dataclass
class LossReport:
    l_ts: torch.Tensor
    l_ci: torch.Tensor
    l_wr: torch.Tensor
    l_kd: torch.Tensor
    l_final: torch.Tensor
    masks: LossMask

    def terms(self) -> Dict[str, torch.Tensor]:
        return {"l_ts": self.l_ts, "l_ci": self.l_ci, "l_wr": self.l_wr, "l_kd": self.l_kd, "l_final": self.l_final}

    def check_finite(self, step: int = -1):
        for name, value in self.terms().items():
            if not torch.isfinite(value).all():
                raise NonFiniteLossError(name, step)

    def to_row(self, step: int) -> Dict[str, float]:
        row = {"step": step}
        row.update({name: float(value.detach().item()) for name, value in self.terms().items()})
        return row


def _check_lengths(a: torch.Tensor, b: torch.Tensor, name: str):
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")

# mean over elements of -[y log p + (1 - y) log(1 - p)], with p and 1 - p clamped at PROB_EPS
def binary_cross_entropy(probabilities: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    labels = labels.to(probabilities.dtype)
    log_p = torch.log(probabilities.clamp(min=PROB_EPS))
    log_not_p = torch.log((1.0 - probabilities).clamp(min=PROB_EPS))
    return -(labels * log_p + (1.0 - labels) * log_not_p).mean()

# Euclidean norm over the last axis; value and gradient are 0 at a zero difference
def safe_norm(difference: torch.Tensor) -> torch.Tensor:
    squared = difference.pow(2).sum(-1)
    norm = torch.sqrt(squared.clamp(min=torch.finfo(difference.dtype).tiny))
    return torch.where(squared > 0, norm, torch.zeros_like(norm))

def loss_ts(probabilities: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    _check_lengths(probabilities, labels, "loss_ts")
    return binary_cross_entropy(probabilities, labels)

def loss_ci(probabilities: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    _check_lengths(probabilities, label, "loss_ci")
    if label.sum() > 1:
        raise ValueError("loss_ci expects a one-hot or all-zero label")
    return binary_cross_entropy(probabilities, label)

def loss_wr(reconstruction: torch.Tensor, target: torch.Tensor, squared: bool = False) -> torch.Tensor:
    _check_lengths(reconstruction, target, "loss_wr")
    difference = reconstruction - target.to(reconstruction.dtype)
    if squared:
        return difference.pow(2).mean()
    return safe_norm(difference)

def loss_kd(student_cls: torch.Tensor, teacher_cls: torch.Tensor, squared: bool = False) -> torch.Tensor:
    _check_lengths(student_cls, teacher_cls, "loss_kd")
    difference = student_cls - teacher_cls.detach().to(student_cls.dtype)
    if squared:
        return difference.pow(2).mean()
    return safe_norm(difference)

def _as_tensor(value: Scalar, like: torch.Tensor) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value
    return torch.tensor(value, dtype=like.dtype if like is not None else torch.float64)

# l_final = l_kd + alpha l_ts + beta l_ci + gamma l_wr; masked terms become exact zeros
def loss_final(l_ts: Scalar, l_ci: Scalar, l_wr: Scalar, l_kd: Scalar,
               weights: LossWeights, masks: LossMask) -> LossReport:
    like = next((v for v in (l_kd, l_ts, l_ci, l_wr) if isinstance(v, torch.Tensor)), None)
    values = [_as_tensor(v, like) for v in (l_ts, l_ci, l_wr, l_kd)]
    active = (masks.topic, masks.coref, masks.wr, masks.kd)
    l_ts, l_ci, l_wr, l_kd = [v if on else torch.zeros_like(v) for v, on in zip(values, active)]
    l_final = l_kd + weights.alpha * l_ts + weights.beta * l_ci + weights.gamma * l_wr
    return LossReport(l_ts=l_ts, l_ci=l_ci, l_wr=l_wr, l_kd=l_kd, l_final=l_final, masks=masks)


################################################
# Tests
################################################

ALL_ON = LossMask(True, True, True, True)

def _t(values) -> torch.Tensor:
    return torch.tensor(values, dtype=torch.float64)

def test_loss_ts():
    assert loss_ts(_t([1.0, 0.0]), _t([1, 0])).item() < 1e-6, "ERROR: perfect prediction"
    assert abs(loss_ts(_t([0.5, 0.5, 0.5]), _t([1, 0, 0])).item() - math.log(2)) < 1e-12, "ERROR: ln 2"
    expected = -(math.log(0.9) + math.log(0.8)) / 2
    assert abs(loss_ts(_t([0.9, 0.2]), _t([1, 0])).item() - expected) < 1e-9, "ERROR: 0.1643 oracle"
    assert abs(expected - 0.1643) < 1e-4, "ERROR: oracle constant"
    perfect32 = loss_ts(torch.tensor([1.0, 0.0]), torch.tensor([1.0, 0.0]))
    assert torch.isfinite(perfect32) and perfect32.item() < 1e-6, "ERROR: float32 clamping"
    try:
        loss_ts(_t([0.5]), _t([1, 0]))
        assert False, "ERROR: length mismatch accepted"
    except ValueError:
        pass

def test_loss_ci():
    assert loss_ci(_t([1.0, 0.0, 0.0]), _t([1, 0, 0])).item() < 1e-6, "ERROR: perfect coref"
    assert abs(loss_ci(_t([0.5, 0.5]), _t([0, 1])).item() - math.log(2)) < 1e-12, "ERROR: ln 2"
    expected = -(math.log(0.7) + math.log(0.9) + math.log(0.9)) / 3
    assert abs(loss_ci(_t([0.7, 0.1, 0.1]), _t([1, 0, 0])).item() - expected) < 1e-9, "ERROR: 0.1891 oracle"
    assert abs(expected - 0.1891) < 1e-4, "ERROR: oracle constant"

def test_loss_wr():
    target = _t([1, 0, 1, 0, 0, 1])
    assert loss_wr(target.clone(), target).item() == 0.0, "ERROR: identity"
    shifted = target + _t([0.3, 0.4, 0, 0, 0, 0])
    assert abs(loss_wr(shifted, target).item() - 0.5) < 1e-9, "ERROR: 3-4-5"
    half = torch.full((6,), 0.5, dtype=torch.float64)
    assert abs(loss_wr(half, target).item() - 0.5 * math.sqrt(6)) < 1e-12, "ERROR: uniform 0.5"
    assert abs(loss_wr(half, target, squared=True).item() - 0.25) < 1e-12, "ERROR: squared reading"

def test_loss_kd():
    a = _t([1.0, 2.0, 3.0])
    b = a + _t([3.0, 4.0, 0.0])
    assert abs(loss_kd(a, b).item() - 5.0) < 1e-9, "ERROR: 3-4-5"
    assert loss_kd(a, b).item() == loss_kd(b, a).item(), "ERROR: symmetry"
    student = a.clone().requires_grad_(True)
    teacher = a.clone().requires_grad_(True)
    loss = loss_kd(student, teacher)
    loss.backward()
    assert loss.item() == 0.0 and torch.equal(student.grad, torch.zeros(3, dtype=torch.float64)), \
        "ERROR: zero difference must give zero value and gradient"
    assert teacher.grad is None, "ERROR: gradient reached the teacher side"

def test_loss_final():
    kd = _t(1.0)
    report = loss_final(_t(2.0), _t(3.0), _t(4.0), kd, LossWeights(0.0, 0.0, 0.0), ALL_ON)
    assert report.l_final.item() == 1.0, "ERROR: zero weights"
    masked = loss_final(_t(2.0), _t(3.0), _t(4.0), kd, LossWeights(), LossMask(False, False, False, True))
    assert masked.l_final.item() == 1.0 and masked.l_ts.item() == 0.0, "ERROR: masks"
    combined = loss_final(_t(2.0), _t(3.0), _t(4.0), kd, LossWeights(0.01, 0.001, 0.01), ALL_ON)
    assert abs(combined.l_final.item() - 1.063) < 1e-9, f"ERROR: 1.063 oracle got {combined.l_final.item()}"
    assert loss_final(2.0, 3.0, 4.0, 1.0, LossWeights(0.01, 0.001, 0.01), ALL_ON).to_row(7)["l_final"] == \
        combined.to_row(7)["l_final"], "ERROR: float inputs"
    # affine in alpha
    values = [loss_final(_t(2.0), _t(3.0), _t(4.0), kd, LossWeights(alpha, 0.001, 0.01), ALL_ON).l_final.item()
              for alpha in (0.0, 0.5, 1.0)]
    assert abs((values[2] - values[1]) - (values[1] - values[0])) < 1e-12, "ERROR: linearity in alpha"
    row = combined.to_row(3)
    assert list(row) == METRICS_COLUMNS, f"ERROR: row columns {list(row)}"

def test_non_finite():
    report = loss_final(_t(float("nan")), _t(0.0), _t(0.0), _t(0.0), LossWeights(), ALL_ON)
    try:
        report.check_finite(step=4)
        assert False, "ERROR: NaN accepted"
    except NonFiniteLossError as err:
        assert err.term == "l_ts" and err.exit_code == 1, f"ERROR: {err}"

def test_weight_presets():
    assert LossWeights.preset("short_context") == LossWeights(1e-2, 1e-3, 1e-2), "ERROR: short preset"
    assert LossWeights.preset("long_context") == LossWeights(1e-1, 2e-3, 2e-2), "ERROR: long preset"
    weights = LossWeights.from_config({"weights_preset": "long_context", "beta": "0.5"})
    assert weights == LossWeights(1e-1, 0.5, 2e-2), f"ERROR: preset override {weights}"
    try:
        LossWeights(-1.0, 0.0, 0.0)
        assert False, "ERROR: negative weight accepted"
    except ConfigError:
        pass

def test_loss_gradients():
    torch.manual_seed(0)
    logits = torch.randn(5, dtype=torch.float64, requires_grad=True)
    labels = _t([1, 0, 0, 1, 0])
    assert torch.autograd.gradcheck(lambda z: loss_ts(torch.sigmoid(z), labels), (logits,)), "ERROR: bce gradient"
    target = _t([0, 1, 1, 0, 0])
    assert torch.autograd.gradcheck(lambda z: loss_wr(torch.sigmoid(z), target), (logits,)), "ERROR: norm gradient"

def tests():
    test_loss_ts()
    test_loss_ci()
    test_loss_wr()
    test_loss_kd()
    test_loss_final()
    test_non_finite()
    test_weight_presets()
    test_loss_gradients()
    print("all tests passed in", os.path.basename(__file__))

def main():
    tests()

if __name__ == "__main__":
    main()
