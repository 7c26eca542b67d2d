"""Matching loss, optimizer, training loop, gradient check, and checkpoints."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tape as tp
from .config import Config, substream
from .descriptors import AgnnParams, DescriptorSet, describe_pair, extract_descriptors
from .labels import MatchLabels, complete_labels
from .matching import (
    DustbinPredictorParams,
    MatchMatrix,
    assemble_cost,
    predict_dustbin_score,
    reverse_topk_match,
    similarity_matrix,
    sinkhorn,
)
from .tape import Tape, Tensor

CHECKPOINT_FORMAT = "vicount-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingDivergenceError(ArithmeticError):
    def __init__(self, message: str, dump: dict | None = None):
        super().__init__(message)
        self.dump = dump or {}


class DegenerateLossError(ArithmeticError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class PairInstance:
    set_a: DescriptorSet
    set_b: DescriptorSet
    labels: MatchLabels
    grid_shape: tuple[int, int]  # (H, W)
    meta: dict = field(default_factory=dict)

    @property
    def usable(self) -> bool:
        return len(self.set_a) > 0 and len(self.set_b) > 0 and len(self.labels) > 0


def instance_from_pair(pair, meta: dict | None = None, cfg: Config | None = None) -> PairInstance:
    """Descriptor sets and labels of a rendered simulator pair.

    With ``cfg.complete_labels`` the offset labels are completed for cells of
    shared identities that have no same-offset partner.
    """
    a, b = pair.a, pair.b
    labels = pair.labels
    if cfg is not None and cfg.complete_labels:
        labels = complete_labels(labels, a.points, b.points, a.mask, b.mask, cfg.r_lab, cfg.downsample)
    return PairInstance(
        extract_descriptors(a.features, a.mask, "t"),
        extract_descriptors(b.features, b.mask, "t+delta"),
        labels,
        a.mask.bits.shape,
        dict(meta or {}),
    )


class Matcher:
    """The trainable association model: GNN plus dustbin score predictor."""

    def __init__(self, agnn: AgnnParams, dustbin: DustbinPredictorParams, cfg: Config):
        self.agnn = agnn
        self.dustbin = dustbin
        self.cfg = cfg

    @classmethod
    def init(cls, cfg: Config, seed: int | None = None) -> Matcher:
        seed = cfg.seed if seed is None else seed
        agnn = AgnnParams.init(cfg.dim, cfg.gnn_layers, substream(seed, "init", 0))
        dustbin = DustbinPredictorParams.init(
            cfg.dim, cfg.dustbin_layers, substream(seed, "init", 1), mode=cfg.dustbin_mode
        )
        return cls(agnn, dustbin, cfg)

    def named_params(self) -> dict[str, Tensor]:
        out = {f"agnn/{k}": t for k, t in self.agnn.tensors.items()}
        out.update({f"dustbin/{k}": t for k, t in self.dustbin.tensors.items()})
        return out

    def forward(self, set_a: DescriptorSet, set_b: DescriptorSet, grid_shape, method: str = "auto"):
        """Transport plan and dustbin score tensor for one pair of descriptor sets."""
        da, db = describe_pair(set_a, set_b, self.agnn, grid_shape)
        s = predict_dustbin_score(da, db, self.dustbin)
        cost = assemble_cost(similarity_matrix(da, db), s)
        plan = sinkhorn(cost, self.cfg.lam, self.cfg.sinkhorn_iters, float(s.value.ravel()[0]), method=method)
        return plan, s

    def match(self, set_a: DescriptorSet, set_b: DescriptorSet, grid_shape):
        """Hard matches in both directions: ``(c_a, c_b, plan)``."""
        plan, _ = self.forward(set_a, set_b, grid_shape)
        c_a = reverse_topk_match(plan.plan, self.cfg.top_k, self.cfg.theta)
        c_b = reverse_topk_match(plan.plan.T, self.cfg.top_k, self.cfg.theta)
        return c_a, c_b, plan


def _label_index(labels: MatchLabels, n: int, m: int) -> tuple[np.ndarray, np.ndarray]:
    pairs = list(labels.matched) + list(labels.fringe)
    rows = [i for i, _ in pairs] + list(labels.unmatched_a) + [n] * len(labels.unmatched_b)
    cols = [j for _, j in pairs] + [m] * len(labels.unmatched_a) + list(labels.unmatched_b)
    return np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64)


def matching_loss(plan: MatchMatrix, labels: MatchLabels, normalize: bool = False) -> Tensor:
    """Negative log-likelihood of the labeled plan entries.

    Matched and fringe pairs read ``P[i, j]``, frame-t-only cells the dustbin
    column, and frame-(t+delta)-only cells the dustbin row. With ``normalize``
    the sum is divided by the number of labels.
    """
    log_p = plan.log_plan
    if log_p is None:
        with np.errstate(divide="ignore"):
            log_p = Tensor(np.log(plan.plan))
    rows, cols = _label_index(labels, plan.n, plan.m)
    if len(rows) == 0:
        return Tensor(np.array(0.0))
    picked = tp.take(log_p, (rows, cols))
    if not np.all(np.isfinite(picked.value)):
        raise DegenerateLossError("a labeled transport entry is zero")
    loss = -tp.sum(picked)
    if normalize:
        loss = loss * (1.0 / len(rows))
    return loss


class Adam:
    """Adaptive moment estimation over named parameter groups."""

    def __init__(self, groups: dict[str, tuple[dict[str, Tensor], float]], beta1=0.9, beta2=0.999, eps=1e-8):
        self.groups = groups
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(t.value) for _, (ps, _) in groups.items() for k, t in ps.items()}
        self.v = {k: np.zeros_like(m) for k, m in self.m.items()}

    def step(self) -> None:
        """Apply one update from the ``.grad`` of every parameter."""
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1**self.step_count, 1.0 - b2**self.step_count
        for params, lr in self.groups.values():
            for name, t in params.items():
                g = t.grad if t.grad is not None else np.zeros_like(t.value)
                self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
                self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
                if lr:
                    t.value = t.value - lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)

    def state_dict(self) -> dict:
        return {
            "step": self.step_count,
            "betas": [self.beta1, self.beta2],
            "eps": self.eps,
            "lr": {g: lr for g, (_, lr) in self.groups.items()},
            "m": {k: _pack(v) for k, v in self.m.items()},
            "v": {k: _pack(v) for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step"])
        for key in ("m", "v"):
            table = getattr(self, key)
            missing = set(table) - set(state[key])
            if missing:
                raise CheckpointError(f"optimizer state lacks {sorted(missing)[:3]}")
            for k in table:
                table[k] = _unpack(state[key][k], table[k].shape, k)


def make_optimizer(model: Matcher, cfg: Config) -> Adam:
    # the synthetic descriptor provider has no trainable weights, so its
    # group is empty; the GNN and the dustbin predictor share the matcher rate
    return Adam(
        {"provider": ({}, cfg.lr_provider), "matcher": (model.named_params(), cfg.lr_matcher)},
        cfg.beta1,
        cfg.beta2,
    )


@dataclass
class StepResult:
    step: int
    loss: float
    raw_loss: float
    grad_norm: float
    s_mean: float
    s_min: float
    s_max: float

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


def batch_loss(model: Matcher, batch: list[PairInstance], method: str = "auto"):
    """Mean normalized loss tensor, raw loss sum, and the dustbin scores."""
    losses, raw, scores = [], 0.0, []
    for inst in batch:
        plan, s = model.forward(inst.set_a, inst.set_b, inst.grid_shape, method=method)
        loss = matching_loss(plan, inst.labels, normalize=True)
        raw += float(loss.value) * len(inst.labels)
        losses.append(loss)
        scores.append(float(s.value.ravel()[0]))
    total = losses[0]
    for loss in losses[1:]:
        total = total + loss
    return total * (1.0 / len(losses)), raw / len(batch), scores


def train_step(batch: list[PairInstance], model: Matcher, opt: Adam) -> StepResult:
    """Forward, mean loss, backward, and one optimizer update.

    Returns the loss measured before the update.
    """
    if not batch:
        raise ValueError("empty training batch")
    params = model.named_params()
    bad = sorted(k for k, t in params.items() if not np.all(np.isfinite(t.value)))
    if bad:
        raise TrainingDivergenceError(
            f"non-finite parameters at step {opt.step_count}",
            {"step": opt.step_count, "non_finite": bad, "pairs": [inst.meta for inst in batch],
             "param_norms": {k: float(np.linalg.norm(t.value)) for k, t in params.items()}},
        )
    with Tape() as tape:
        loss, raw, scores = batch_loss(model, batch)
    value = float(loss.value)
    if not math.isfinite(value):
        raise TrainingDivergenceError(
            f"non-finite loss at step {opt.step_count}",
            {"step": opt.step_count, "loss": value, "dustbin_scores": scores,
             "pairs": [inst.meta for inst in batch],
             "param_norms": {k: float(np.linalg.norm(t.value)) for k, t in params.items()}},
        )
    tp.backward(tape, loss, wrt=list(params.values()))
    grad_norm = math.sqrt(math.fsum(float((t.grad**2).sum()) for t in params.values()))
    if not math.isfinite(grad_norm):
        raise TrainingDivergenceError(f"non-finite gradient at step {opt.step_count}",
                                      {"step": opt.step_count, "loss": value})
    step = opt.step_count
    opt.step()
    return StepResult(step, value, raw, grad_norm, float(np.mean(scores)), min(scores), max(scores))


def sample_batch(scenes, cfg: Config, seed: int, step: int, render_pair_fn=None) -> list[PairInstance]:
    """Deterministic batch for ``step``: random clip, start tick, and interval."""
    from .simulator import render_pair

    render_pair_fn = render_pair_fn or render_pair
    rng = substream(seed, "batch", step)
    batch = []
    for _ in range(100 * cfg.batch_size):
        clip = int(rng.integers(len(scenes)))
        scene = scenes[clip]
        delta = int(rng.integers(cfg.interval_min, cfg.interval_max + 1))
        if scene.n_ticks <= delta:
            continue
        t = int(rng.integers(scene.n_ticks - delta))
        inst = instance_from_pair(render_pair_fn(scene, t, delta, cfg), {"clip": clip, "t": t, "delta": delta}, cfg)
        if inst.usable:
            batch.append(inst)
            if len(batch) == cfg.batch_size:
                return batch
    raise ValueError("could not draw a training batch: scenes have no usable frame pairs")


def train(model: Matcher, scenes, cfg: Config, steps: int, opt: Adam | None = None, log=None,
          seed: int | None = None) -> tuple[Adam, list[StepResult]]:
    """Run ``steps`` updates, continuing from ``opt.step_count`` when resuming."""
    seed = cfg.seed if seed is None else seed
    opt = opt or make_optimizer(model, cfg)
    history = []
    for _ in range(steps):
        result = train_step(sample_batch(scenes, cfg, seed, opt.step_count), model, opt)
        history.append(result)
        if log is not None:
            log(result)
    return opt, history


# gradient checking


def finite_difference_errors(params: dict[str, Tensor], loss_fn, eps: float = 1e-5, floor: float = 1e-5):
    """Worst relative error per parameter tensor between ``.grad`` and central differences.

    Relative error is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    ``loss_fn()`` must evaluate the loss from the current parameter values.
    """
    worst = {}
    for name, t in params.items():
        err = 0.0
        flat = t.value.reshape(-1)
        grad = np.asarray(t.grad).reshape(-1)
        for k in range(flat.size):
            keep = flat[k]
            flat[k] = keep + eps
            up = loss_fn()
            flat[k] = keep - eps
            down = loss_fn()
            flat[k] = keep
            numeric = (up - down) / (2 * eps)
            denom = max(abs(grad[k]), abs(numeric), floor)
            err = max(err, abs(grad[k] - numeric) / denom)
        worst[name] = err
    return worst


def tiny_instance(seed: int, n: int = 3, m: int = 4, dim: int = 8, grid=(6, 6)) -> PairInstance:
    """Random small descriptor pair with a valid one-to-one label set."""
    rng = substream(seed, "tiny-instance")
    h, w = grid
    cells = rng.permutation(h * w)
    ca = np.stack([cells[:n] % w, cells[:n] // w], axis=1)
    cells = rng.permutation(h * w)
    cb = np.stack([cells[:m] % w, cells[:m] // w], axis=1)
    k = min(n, m) - 1
    pa, pb = rng.permutation(n), rng.permutation(m)
    labels = MatchLabels(
        sorted(zip(pa[:k].tolist(), pb[:k].tolist())), sorted(pa[k:].tolist()), sorted(pb[k:].tolist())
    )
    return PairInstance(
        DescriptorSet(rng.normal(0.0, 1.0 / np.sqrt(dim), size=(n, dim)), ca, "t"),
        DescriptorSet(rng.normal(0.0, 1.0 / np.sqrt(dim), size=(m, dim)), cb, "t+delta"),
        labels,
        grid,
    )


def tiny_config(**changes) -> Config:
    base = dict(dim=8, gnn_layers=2, dustbin_layers=1, lam=10.0, sinkhorn_iters=30)
    base.update(changes)
    return Config(**base)


def grad_check(model: Matcher, instance: PairInstance, eps: float = 1e-5) -> dict[str, float]:
    """Per-tensor worst relative gradient error of the full pipeline on one instance.

    The analytic gradient comes from the tape; the numeric one from central
    differences of the same log-domain forward computation.
    """
    params = model.named_params()

    def loss_fn():
        plan, _ = model.forward(instance.set_a, instance.set_b, instance.grid_shape, method="log")
        return float(matching_loss(plan, instance.labels).value)

    with Tape() as tape:
        plan, _ = model.forward(instance.set_a, instance.set_b, instance.grid_shape)
        loss = matching_loss(plan, instance.labels)
    tp.backward(tape, loss, wrt=list(params.values()))
    return finite_difference_errors(params, loss_fn, eps)


# checkpoints


def _pack(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _unpack(rec, shape, name) -> np.ndarray:
    try:
        a = np.asarray(rec["data"], dtype=np.float64).reshape(rec["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{name}: malformed array record ({exc})") from None
    if tuple(a.shape) != tuple(shape):
        raise CheckpointError(f"{name}: expected shape {tuple(shape)}, got {tuple(a.shape)}")
    return a


def checkpoint_dict(model: Matcher, opt: Adam | None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "step": opt.step_count if opt else 0,
        "meta": {"agnn": model.agnn.meta, "dustbin": model.dustbin.meta},
        "params": {k: _pack(t.value) for k, t in model.named_params().items()},
        "optimizer": opt.state_dict() if opt else None,
    }


def save_checkpoint(path, model: Matcher, opt: Adam | None = None) -> None:
    with open(path, "w") as fh:
        json.dump(checkpoint_dict(model, opt), fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> tuple[Matcher, Adam]:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a JSON checkpoint ({exc})") from None
    return checkpoint_from_dict(data)


def checkpoint_from_dict(data: dict) -> tuple[Matcher, Adam]:
    if not isinstance(data, dict) or data.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError("not a vicount checkpoint")
    if data.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {data.get('version')!r}")
    try:
        cfg = Config(**data["config"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint config invalid: {exc}") from None
    model = Matcher.init(cfg)
    params = model.named_params()
    missing = set(params) - set(data["params"])
    extra = set(data["params"]) - set(params)
    if missing or extra:
        raise CheckpointError(f"parameter names differ (missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})")
    for name, t in params.items():
        t.value = _unpack(data["params"][name], t.value.shape, name)
    opt = make_optimizer(model, cfg)
    if data.get("optimizer"):
        opt.load_state_dict(data["optimizer"])
    return model, opt
