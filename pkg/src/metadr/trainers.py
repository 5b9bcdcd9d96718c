"""Continual trainers and the sequential protocol driver.

Methods: naive fine-tuning, naive + domain randomization, L2/EWC
penalties, experience replay, the meta-learned randomization objective
(one inner gradient step on a randomized auxiliary batch, differentiated
through during the outer update), and the two non-continual oracles.

Every trainer is a pure function of (datasets, config, seed): batch
draws, transform draws, and memory draws each consume a dedicated seeded
stream, so disabling one ingredient never desynchronizes the others.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import LabeledDataset, Protocol, batches, realize_protocol
from .evaluation import AccuracyMatrix, RunReport, evaluate
from .models import Model, ModelConfig, build_model, task_loss
from .optim import AdamState, ParamSet, adam_step, sgd_step
from .transforms import (
    TransformSet,
    apply_transform_batch,
    build_set,
    randomize_batch,
    sample_transform,
)

__all__ = [
    "TrainerConfig",
    "TrainLog",
    "EpisodicMemory",
    "DivergenceError",
    "metadr_step",
    "train_on_domain",
    "run_protocol",
    "l2_penalty",
    "ewc_penalty",
    "estimate_fisher",
    "er_stack",
    "ContinualTrainer",
    "METHODS",
]

METHODS = (
    "naive",
    "naive_dr",
    "l2",
    "ewc",
    "er",
    "metadr",
    "oracle_all",
    "oracle_cumulative",
)

# stream ids for per-domain generators
_S_MAIN, _S_META, _S_XFORM, _S_MEMORY, _S_FISHER, _S_COMMIT = range(6)


class DivergenceError(RuntimeError):
    """Raised when a training loss turns NaN/Inf."""


@dataclass(frozen=True)
class TrainerConfig:
    method: str = "naive"
    eta: float = 3e-4  # learning rate on the first domain
    eta_later: float = 3e-5  # learning rate after the first domain
    alpha: float = 0.1  # inner (meta) step size
    beta: float = 1.0  # weight of the retention term
    gamma: float = 1.0  # weight of the adaptation term
    meta_domains: int = 1  # auxiliary domains per step (K)
    inner_steps: int = 1
    steps: int = 3000  # gradient steps per domain (H)
    batch_size: int = 64
    optimizer: str = "adam"  # "adam" | "sgd"
    transform_set: str = "psi3"
    apply_dr: bool = True  # randomize current batches for l2/ewc/er
    reg_lambda: float = 1.0  # l2/ewc penalty weight
    memory_size: int = 100  # per-domain episodic memory cap (M)
    use_memory: bool = False  # stack memory batches onto any method
    first_order: bool = False  # ablation: stop-gradient through inner step
    fisher_samples: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.eta <= 0 or self.eta_later <= 0 or self.alpha <= 0:
            raise ValueError("learning rates must be positive")
        if self.beta < 0 or self.gamma < 0:
            raise ValueError("beta and gamma must be nonnegative")
        if self.meta_domains < 1 or self.inner_steps < 1:
            raise ValueError("meta_domains and inner_steps must be >= 1")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("invalid steps or batch size")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class TrainLog:
    task: list = field(default_factory=list)
    recall: list = field(default_factory=list)
    adapt: list = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def steps(self):
        return len(self.task)

    def to_dict(self):
        # wall_time stays out: serialized reports must be byte-identical
        # across reruns of the same config.
        return {
            "steps": self.steps,
            "task_first": self.task[0] if self.task else None,
            "task_last": self.task[-1] if self.task else None,
        }


class EpisodicMemory:
    """Bounded per-domain stores of raw training samples."""

    def __init__(self):
        self.stores: list[tuple[np.ndarray, np.ndarray]] = []

    def commit(self, train_ds: LabeledDataset, cap: int, rng: np.random.Generator):
        """Store a uniform random subset (without replacement) of a
        finished domain's train split."""
        m = len(train_ds)
        idx = rng.choice(m, size=min(cap, m), replace=False)
        idx = np.sort(idx)
        self.stores.append((train_ds.images[idx].copy(), train_ds.labels[idx].copy()))

    def total(self) -> int:
        return sum(len(lab) for _, lab in self.stores)

    def sample(self, count: int, rng: np.random.Generator):
        """Uniform sample (with replacement) from the union of stores."""
        if not self.stores:
            return None
        images = np.concatenate([im for im, _ in self.stores])
        labels = np.concatenate([la for _, la in self.stores])
        idx = rng.integers(0, len(labels), size=count)
        return images[idx].astype(np.float32), labels[idx]


def er_stack(batch, memory: EpisodicMemory, batch_size: int, rng):
    """Concatenate the current batch with a memory batch of equal size;
    passthrough while the memory is empty."""
    mem = memory.sample(batch_size, rng) if memory is not None else None
    if mem is None:
        return batch
    x, y = batch
    mx, my = mem
    return np.concatenate([x, mx]), np.concatenate([y, my])


# ---------------------------------------------------------------------------
# penalties


def l2_penalty(params: ParamSet, anchor_arrays, lam: float) -> T.Tensor:
    """(lam/2) * sum (theta - anchor)^2, summed over all parameters."""
    total = None
    for p, a in zip(params.tensors(), anchor_arrays):
        if p.shape != a.shape:
            raise ValueError("l2_penalty: anchor shape mismatch")
        d = T.sub(p, T.Tensor(np.asarray(a, dtype=p.dtype.type)))
        term = T.tsum(T.mul(d, d))
        total = term if total is None else T.add(total, term)
    return T.scalar_mul(0.5 * lam, total)


def ewc_penalty(params: ParamSet, anchor_arrays, fisher_arrays, lam: float) -> T.Tensor:
    """(lam/2) * sum F * (theta - anchor)^2 with diagonal Fisher F."""
    total = None
    for p, a, f in zip(params.tensors(), anchor_arrays, fisher_arrays):
        d = T.sub(p, T.Tensor(np.asarray(a, dtype=p.dtype.type)))
        term = T.tsum(T.mul(T.Tensor(np.asarray(f, dtype=p.dtype.type)), T.mul(d, d)))
        total = term if total is None else T.add(total, term)
    return T.scalar_mul(0.5 * lam, total)


def estimate_fisher(forward_fn, params: ParamSet, images, n_samples, rng,
                    batch: int = 32):
    """Diagonal empirical Fisher: mean over sampled inputs of the squared
    gradient of log p(label | x), with the label drawn from the model's
    own predicted distribution."""
    acc = [np.zeros(p.shape, dtype=np.float64) for p in params.tensors()]
    m = len(images)
    done = 0
    while done < n_samples:
        b = min(batch, n_samples - done)
        idx = rng.integers(0, m, size=b)
        xb = images[idx].astype(np.float32)
        # labels sampled from the predicted distribution, one per input
        with T.no_grad():
            logits = forward_fn(params, xb).data.astype(np.float64)
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        cum = p.cumsum(axis=1)
        u = rng.random((b, 1))
        ys = (u > cum).sum(axis=1)
        # per-sample gradients: loop (squared gradients do not batch-sum)
        for j in range(b):
            loss = task_loss(forward_fn(params, xb[j : j + 1]), ys[j : j + 1])
            gs = T.grad(loss, params.tensors())
            for a, g in zip(acc, gs):
                a += g.data.astype(np.float64) ** 2
        done += b
    return [a / n_samples for a in acc]


# ---------------------------------------------------------------------------
# steps


def _optimizer_step(params, grads, opt_state, lr, optimizer):
    if optimizer == "adam":
        return adam_step(params, grads, opt_state, lr)
    return sgd_step(params, grads, lr), opt_state


def _weighted_total(terms):
    """Sum coef * loss over terms, skipping zero coefficients so disabled
    ingredients leave the gradient bit-identical."""
    total = None
    for coef, loss in terms:
        if coef == 0.0:
            continue
        t = loss if coef == 1.0 else T.scalar_mul(coef, loss)
        total = t if total is None else T.add(total, t)
    return total


def metadr_step(
    model: Model,
    params: ParamSet,
    opt_state,
    main_batch,
    meta_batch,
    tset: TransformSet,
    cfg: TrainerConfig,
    lr: float,
    rng_xform: np.random.Generator,
    extra_terms=(),
):
    """One outer update of the meta-randomization objective.

    Samples a composed transform, takes one inner gradient step on the
    transformed meta batch (recorded, so the outer gradient carries the
    second-order term), then minimizes: task loss at theta, plus beta *
    task loss at theta_hat (retention), plus gamma * transformed-batch
    loss at theta_hat (adaptation).
    """
    x, y = main_batch
    loss_task = task_loss(model.forward(x, params), y)
    terms = [(1.0, loss_task)]
    loss_recall = loss_adapt = None
    if cfg.beta != 0.0 or cfg.gamma != 0.0:
        ct = sample_transform(tset, rng_xform)
        xh, yh = meta_batch
        theta = params
        for _ in range(cfg.inner_steps):
            inner = task_loss(
                model.forward(apply_transform_batch(ct, xh), theta), yh
            )
            gs = T.grad(inner, params.tensors(), create_graph=not cfg.first_order)
            if cfg.first_order:
                gs = [g.detach() for g in gs]
            theta = theta.replace(
                [
                    T.sub(p, T.scalar_mul(cfg.alpha, g))
                    for p, g in zip(theta.tensors(), gs)
                ]
            )
        if cfg.beta != 0.0:
            loss_recall = task_loss(model.forward(x, theta), y)
            terms.append((cfg.beta, loss_recall))
        if cfg.gamma != 0.0:
            loss_adapt = task_loss(
                model.forward(apply_transform_batch(ct, x), theta), y
            )
            terms.append((cfg.gamma, loss_adapt))
    terms.extend(extra_terms)
    total = _weighted_total(terms)
    if not np.isfinite(total.data):
        raise DivergenceError("metadr: non-finite loss")
    grads = T.grad(total, params.tensors())
    new_params, new_state = _optimizer_step(params, grads, opt_state, lr, cfg.optimizer)
    return new_params, new_state, (
        float(loss_task.data),
        None if loss_recall is None else float(loss_recall.data),
        None if loss_adapt is None else float(loss_adapt.data),
    )


def _stream(seed: int, domain_idx: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(domain_idx, purpose))
    )


def train_on_domain(
    model: Model,
    train_ds: LabeledDataset,
    cfg: TrainerConfig,
    lr: float,
    domain_idx: int,
    memory: EpisodicMemory | None = None,
    penalty_fn=None,
    steps: int | None = None,
):
    """Run cfg.steps optimizer steps of the configured method on one
    domain's train split. Returns (model, TrainLog)."""
    steps = cfg.steps if steps is None else steps
    rng_main = _stream(cfg.seed, domain_idx, _S_MAIN)
    rng_meta = _stream(cfg.seed, domain_idx, _S_META)
    rng_xform = _stream(cfg.seed, domain_idx, _S_XFORM)
    rng_mem = _stream(cfg.seed, domain_idx, _S_MEMORY)
    tset = build_set(cfg.transform_set)
    params = model.params
    opt_state = AdamState.init(params)
    log = TrainLog()
    t0 = time.monotonic()

    use_dr = cfg.method == "naive_dr" or (
        cfg.method in ("l2", "ewc", "er") and cfg.apply_dr
    )
    stack_memory = memory is not None and (cfg.method == "er" or cfg.use_memory)
    meta = cfg.method == "metadr"

    meta_iter = batches(train_ds, cfg.batch_size, steps, rng_meta)
    for x, y in batches(train_ds, cfg.batch_size, steps, rng_main):
        extra = []
        if penalty_fn is not None:
            extra.append((1.0, penalty_fn(params)))
        if meta:
            mb = next(meta_iter)
            if stack_memory:
                x, y = er_stack((x, y), memory, cfg.batch_size, rng_mem)
            params, opt_state, (lt, lr_, la) = metadr_step(
                model, params, opt_state, (x, y), mb, tset, cfg, lr, rng_xform, extra
            )
            log.task.append(lt)
            log.recall.append(lr_)
            log.adapt.append(la)
        else:
            if use_dr:
                x = randomize_batch(tset, x, rng_xform)
            if stack_memory:
                # randomization applies to the current-domain batch only
                x, y = er_stack((x, y), memory, cfg.batch_size, rng_mem)
            loss = task_loss(model.forward(x, params), y)
            terms = _weighted_total([(1.0, loss)] + extra)
            if not np.isfinite(terms.data):
                raise DivergenceError(f"{cfg.method}: non-finite loss")
            grads = T.grad(terms, params.tensors())
            params, opt_state = _optimizer_step(
                params, grads, opt_state, lr, cfg.optimizer
            )
            log.task.append(float(loss.data))
    log.wall_time = time.monotonic() - t0
    return model.with_params(params), log


# ---------------------------------------------------------------------------
# protocol driver


def _union(datasets) -> LabeledDataset:
    return LabeledDataset(
        np.concatenate([d.images for d in datasets]),
        np.concatenate([d.labels for d in datasets]),
        "+".join(d.name for d in datasets),
    )


def run_protocol(
    protocol: Protocol, cfg: TrainerConfig, model_config: ModelConfig
) -> RunReport:
    """Sequential training across the protocol's domains, evaluating on
    every domain's test split after each stage."""
    stages = realize_protocol(protocol)
    names = [s["name"] for s in stages]
    model = build_model(dataclasses.replace(model_config, seed=cfg.seed))
    matrix = AccuracyMatrix(domains=names)
    logs = []
    memory = EpisodicMemory() if (cfg.method == "er" or cfg.use_memory) else None
    anchors = []  # list of (params, fisher or None) per finished domain

    oracle = cfg.method in ("oracle_all", "oracle_cumulative")
    for i, stage in enumerate(stages):
        lr = cfg.eta if i == 0 else cfg.eta_later
        if cfg.method == "oracle_all":
            train_ds = _union([s["train"] for s in stages])
            lr = cfg.eta  # single joint distribution: no domain boundary
        elif cfg.method == "oracle_cumulative":
            train_ds = _union([s["train"] for s in stages[: i + 1]])
        else:
            train_ds = stage["train"]

        penalty_fn = None
        if cfg.method in ("l2", "ewc") and anchors:
            snap = list(anchors)

            def penalty_fn(params, snap=snap):
                total = None
                for anchor, fisher in snap:
                    if fisher is None:
                        p = l2_penalty(params, anchor, cfg.reg_lambda)
                    else:
                        p = ewc_penalty(params, anchor, fisher, cfg.reg_lambda)
                    total = p if total is None else T.add(total, p)
                return total

        model, log = train_on_domain(
            model, train_ds, cfg, lr, i, memory=memory, penalty_fn=penalty_fn
        )
        logs.append(log.to_dict())

        if not oracle:
            if memory is not None:
                memory.commit(
                    stage["train"], cfg.memory_size, _stream(cfg.seed, i, _S_COMMIT)
                )
            if cfg.method == "l2":
                anchors.append((model.params.copy_arrays(), None))
            elif cfg.method == "ewc":
                fisher = estimate_fisher(
                    lambda ps, xb, m=model: m.forward(xb, ps),
                    model.params,
                    stage["train"].images,
                    cfg.fisher_samples,
                    _stream(cfg.seed, i, _S_FISHER),
                )
                anchors.append((model.params.copy_arrays(), fisher))

        matrix.add_row([evaluate(model, s["test"]) for s in stages])

    report = RunReport(
        config=cfg.to_dict(), matrix=matrix, seed=cfg.seed, train_logs=logs
    )
    report._model = model  # transient, not serialized
    return report


# ---------------------------------------------------------------------------
# estimator facade


class ContinualTrainer:
    """Estimator-style facade over run_protocol: construct with
    hyper-parameters, fit on a Protocol, predict class labels."""

    def __init__(
        self,
        method: str = "naive",
        arch: str = "smallcnn",
        input_shape: tuple = (3, 28, 28),
        classes: int = 10,
        eta: float = 3e-4,
        eta_later: float = 3e-5,
        alpha: float = 0.1,
        beta: float = 1.0,
        gamma: float = 1.0,
        steps: int = 3000,
        batch_size: int = 64,
        optimizer: str = "adam",
        transform_set: str = "psi3",
        apply_dr: bool = True,
        reg_lambda: float = 1.0,
        memory_size: int = 100,
        use_memory: bool = False,
        first_order: bool = False,
        seed: int = 0,
    ):
        self.method = method
        self.arch = arch
        self.input_shape = input_shape
        self.classes = classes
        self.eta = eta
        self.eta_later = eta_later
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.steps = steps
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.transform_set = transform_set
        self.apply_dr = apply_dr
        self.reg_lambda = reg_lambda
        self.memory_size = memory_size
        self.use_memory = use_memory
        self.first_order = first_order
        self.seed = seed

    _PARAM_NAMES = (
        "method", "arch", "input_shape", "classes", "eta", "eta_later",
        "alpha", "beta", "gamma", "steps", "batch_size", "optimizer",
        "transform_set", "apply_dr", "reg_lambda", "memory_size",
        "use_memory", "first_order", "seed",
    )

    def get_params(self, deep: bool = True) -> dict:
        return {k: getattr(self, k) for k in self._PARAM_NAMES}

    def set_params(self, **params) -> "ContinualTrainer":
        for k, v in params.items():
            if k not in self._PARAM_NAMES:
                raise ValueError(f"unknown parameter {k!r}")
            setattr(self, k, v)
        return self

    def _trainer_config(self) -> TrainerConfig:
        keys = set(TrainerConfig.__dataclass_fields__)
        kw = {k: v for k, v in self.get_params().items() if k in keys}
        return TrainerConfig(**kw)

    def fit(self, protocol: Protocol) -> "ContinualTrainer":
        cfg = self._trainer_config()
        mc = ModelConfig(
            arch=self.arch,
            input_shape=tuple(self.input_shape),
            classes=self.classes,
            seed=self.seed,
        )
        report = run_protocol(protocol, cfg, mc)
        self.report_ = report
        self.model_ = report._model
        return self

    def predict(self, images: np.ndarray) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise RuntimeError("ContinualTrainer is not fitted")
        return self.model_.predict(np.asarray(images, dtype=np.float32))

    def score(self, images: np.ndarray, labels: np.ndarray) -> float:
        return float((self.predict(images) == np.asarray(labels)).mean())
