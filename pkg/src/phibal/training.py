"""End-to-end training of a stacked sparse-expert model on synthetic batches.

Each step samples a batch, runs the residual expert stack, updates every
layer's usage EMA, adds the mechanism's auxiliary losses scaled by
alpha * E, backpropagates, and applies the optimizer. Runs are fully
deterministic under a fixed config and can be snapshotted and resumed
bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .autodiff import Node, constant, matmul
from .balancer import BalancerState, total_loss
from .corpus import CorpusSpec, sample_batch
from .metrics import gini, max_vio
from .moe import MoeLayer, RoutingBatch
from .potentials import PotentialSpec

__all__ = [
    "ModelConfig",
    "BalanceConfig",
    "OptimizerConfig",
    "TrainConfig",
    "EvalRow",
    "RunRecord",
    "NumericalError",
    "MoeStack",
    "Trainer",
    "train",
    "compute_token_budget",
    "TokenBudget",
]

SNAPSHOT_VERSION = 1


class NumericalError(RuntimeError):
    """Training hit a non-finite loss; carries the step and a state snapshot."""

    def __init__(self, step: int, snapshot: dict) -> None:
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.snapshot = snapshot


# -- configuration ---------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    experts: int = 8
    top_k: int = 2
    dim: int = 16
    ffn_dim: int = 32

    def __post_init__(self) -> None:
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if not 1 <= self.top_k <= self.experts:
            raise ValueError(f"top_k={self.top_k} must lie in [1, {self.experts}]")


@dataclass(frozen=True)
class BalanceConfig:
    mechanism: str = "phi"
    phi: str | None = "neg_shannon"
    eta: float = 0.7
    alpha: float = 0.01
    statistic: str = "probability"
    bias_step: float = 1e-3

    def potential(self) -> PotentialSpec | None:
        return PotentialSpec.parse(self.phi) if self.phi else None

    def build_state(self, n_experts: int) -> BalancerState:
        return BalancerState(
            n_experts=n_experts,
            eta=self.eta,
            alpha=self.alpha,
            mechanism=self.mechanism,
            potential=self.potential() if self.mechanism == "phi" else None,
            statistic=self.statistic,
            bias_step=self.bias_step,
        )


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adamw"
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_steps: int = 50
    cosine: bool = False

    def __post_init__(self) -> None:
        if self.kind not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr <= 0.0:
            raise ValueError("learning rate must be positive")


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    balance: BalanceConfig = field(default_factory=BalanceConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    corpus: CorpusSpec = field(default_factory=lambda: CorpusSpec(n_domains=4, dim=16))
    batch_tokens: int = 64
    steps: int = 2000
    eval_every: int = 100
    eval_tokens: int = 512
    seed: int = 0
    load_window: int = 200

    def __post_init__(self) -> None:
        if self.steps <= 0:
            raise ValueError("steps must be positive")
        if not 1 <= self.eval_every <= self.steps:
            raise ValueError("eval_every must lie in [1, steps]")
        if self.batch_tokens < 1:
            raise ValueError("batch_tokens must be positive")
        if self.eval_tokens < 1:
            raise ValueError("eval_tokens must be positive")
        if self.corpus.dim != self.model.dim:
            raise ValueError(
                f"corpus dim {self.corpus.dim} != model dim {self.model.dim}"
            )
        # The mechanism token must parse up front, not at step 1.
        self.balance.build_state(self.model.experts)


# -- optimizers --------------------------------------------------------------------


class Optimizer:
    """SGD or AdamW with linear warmup, then constant or cosine-decayed lr."""

    def __init__(self, cfg: OptimizerConfig, params: list[Node], total_steps: int) -> None:
        self.cfg = cfg
        self.params = params
        self.total_steps = total_steps
        self.t = 0
        if cfg.kind == "adamw":
            self.m = [np.zeros(p.shape) for p in params]
            self.v = [np.zeros(p.shape) for p in params]

    def learning_rate(self) -> float:
        cfg = self.cfg
        lr = cfg.lr
        if cfg.warmup_steps > 0 and self.t <= cfg.warmup_steps:
            return lr * self.t / cfg.warmup_steps
        if cfg.cosine:
            span = max(1, self.total_steps - cfg.warmup_steps)
            progress = (self.t - cfg.warmup_steps) / span
            return lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))
        return lr

    def step(self) -> None:
        self.t += 1
        lr = self.learning_rate()
        cfg = self.cfg
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros(p.shape)
            if cfg.kind == "sgd":
                p.value -= lr * g
                continue
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g
            m_hat = self.m[i] / (1.0 - cfg.beta1**self.t)
            v_hat = self.v[i] / (1.0 - cfg.beta2**self.t)
            p.value -= lr * (
                m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * p.value
            )

    def to_snapshot(self) -> dict:
        snap = {"t": self.t}
        if self.cfg.kind == "adamw":
            snap["m"] = [a.tolist() for a in self.m]
            snap["v"] = [a.tolist() for a in self.v]
        return snap

    def restore(self, snap: dict) -> None:
        self.t = snap["t"]
        if self.cfg.kind == "adamw":
            self.m = [np.asarray(a) for a in snap["m"]]
            self.v = [np.asarray(a) for a in snap["v"]]


# -- model -------------------------------------------------------------------------


class MoeStack:
    """Residual stack of sparse layers with a linear task head.

    For domain classification the head has one output per domain and the
    loss is mean cross-entropy over tokens; for the linear-teacher rule it
    is a single regression output under squared error.
    """

    def __init__(self, model: ModelConfig, n_outputs: int, rng: np.random.Generator):
        self.layers = [
            MoeLayer(model.experts, model.top_k, model.dim, model.ffn_dim, rng)
            for _ in range(model.layers)
        ]
        self.head = Node(
            rng.normal(0.0, model.dim**-0.5, size=(n_outputs, model.dim)),
            requires_grad=True,
            op="param",
        )
        self.n_outputs = n_outputs

    def parameters(self) -> list[Node]:
        params: list[Node] = []
        for layer in self.layers:
            params.extend(layer.parameters())
        params.append(self.head)
        return params

    def forward(
        self, x: np.ndarray, biases: list[np.ndarray | None]
    ) -> tuple[Node, list[RoutingBatch]]:
        h = constant(x)
        routings: list[RoutingBatch] = []
        for layer, bias in zip(self.layers, biases):
            routing = layer.route(h, bias)
            routings.append(routing)
            h = h + layer.forward(h, routing)
        return matmul(h, self.head.T), routings


def cross_entropy(logits: Node, labels: np.ndarray) -> Node:
    """Mean cross-entropy of integer labels under row-softmax of logits."""
    n, c = logits.shape
    row_max = logits.value.max(axis=1, keepdims=True)
    shifted = logits - constant(row_max)
    lse = shifted.exp().sum(axis=1, keepdims=True).log()
    log_probs = shifted - lse
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    return (log_probs * constant(onehot)).sum().scale(-1.0 / n)


def squared_error(pred: Node, targets: np.ndarray) -> Node:
    diff = pred - constant(targets.reshape(pred.shape))
    return (diff * diff).mean()


# -- run records ---------------------------------------------------------------------


class EvalRow(NamedTuple):
    step: int
    layer: int
    task_loss: float
    accuracy: float
    max_vio: float
    gini: float
    m_hash: str


@dataclass
class RunRecord:
    rows: list[EvalRow] = field(default_factory=list)

    def digest(self) -> str:
        payload = "\n".join(repr(tuple(r)) for r in self.rows)
        return hashlib.sha256(payload.encode()).hexdigest()

    def _last_step_rows(self) -> list[EvalRow]:
        last = self.rows[-1].step
        return [r for r in self.rows if r.step == last]

    def terminal_max_vio(self) -> float:
        return float(np.mean([r.max_vio for r in self._last_step_rows()]))

    def terminal_gini(self) -> float:
        return float(np.mean([r.gini for r in self._last_step_rows()]))

    def terminal_task_loss(self) -> float:
        return self._last_step_rows()[-1].task_loss

    def terminal_accuracy(self) -> float:
        return self._last_step_rows()[-1].accuracy


# -- trainer -------------------------------------------------------------------------


class Trainer:
    """Owns the model, per-layer balancers, optimizer and metric windows."""

    def __init__(self, config: TrainConfig) -> None:
        self.config = config
        rng = np.random.default_rng((config.seed, 100))
        n_outputs = (
            config.corpus.n_domains
            if config.corpus.label_rule == "domain_id"
            else 1
        )
        self.model = MoeStack(config.model, n_outputs, rng)
        self.params = self.model.parameters()
        self.balancers = [
            config.balance.build_state(config.model.experts)
            for _ in range(config.model.layers)
        ]
        self.optimizer = Optimizer(config.optimizer, self.params, config.steps)
        self.step_index = 0
        self.record = RunRecord()
        # Rolling per-layer selection counts for windowed balance metrics.
        self._window: list[list[np.ndarray]] = [[] for _ in range(config.model.layers)]
        # Held-out batch (reserved step index 0) for loss/accuracy reporting;
        # training steps start at 1 so it is never trained on.
        self._eval_batch = sample_batch(config.corpus, config.eval_tokens, 0)

    # -- one step ------------------------------------------------------------

    def step(self) -> float:
        cfg = self.config
        self.step_index += 1
        t = self.step_index
        x, labels, _ = sample_batch(cfg.corpus, cfg.batch_tokens, t)

        biases = [b.bias for b in self.balancers]
        logits, routings = self.model.forward(x, biases)
        if cfg.corpus.label_rule == "domain_id":
            task = cross_entropy(logits, labels)
        else:
            task = squared_error(logits, labels)

        aux_losses = []
        for balancer, routing in zip(self.balancers, routings):
            stat = balancer.pick_statistic(routing.p_bar.value, routing.f_per_token)
            balancer.ema_update(stat)
            aux = balancer.aux_loss(routing.p_bar, routing.f)
            if aux is not None:
                aux_losses.append(aux)
            if balancer.mechanism == "loss_free":
                balancer.loss_free_step(routing.f)
        loss = total_loss(task, aux_losses, cfg.balance.alpha, cfg.model.experts)

        if not np.isfinite(loss.value):
            raise NumericalError(t, self.snapshot())

        for p in self.params:
            p.grad = None
        loss.backward()
        self.optimizer.step()

        for layer_idx, routing in enumerate(routings):
            window = self._window[layer_idx]
            window.append(routing.counts)
            if len(window) > cfg.load_window:
                window.pop(0)

        if t % cfg.eval_every == 0:
            self._record_eval(t)
        return float(loss.value)

    def evaluate(self) -> tuple[float, float, list[RoutingBatch]]:
        """Task loss and accuracy on the held-out batch; mutates nothing."""
        x, labels, _ = self._eval_batch
        biases = [b.bias for b in self.balancers]
        logits, routings = self.model.forward(x, biases)
        if self.config.corpus.label_rule == "domain_id":
            task = cross_entropy(logits, labels)
            acc = float(np.mean(np.argmax(logits.value, axis=1) == labels))
        else:
            task = squared_error(logits, labels)
            acc = float("nan")
        return float(task.value), acc, routings

    def _record_eval(self, t: int) -> None:
        task_loss, acc, _ = self.evaluate()
        for layer_idx, balancer in enumerate(self.balancers):
            loads = np.sum(self._window[layer_idx], axis=0)
            m_hash = hashlib.sha256(balancer.m.tobytes()).hexdigest()[:16]
            self.record.rows.append(
                EvalRow(
                    step=t,
                    layer=layer_idx,
                    task_loss=task_loss,
                    accuracy=acc,
                    max_vio=max_vio(loads),
                    gini=gini(loads),
                    m_hash=m_hash,
                )
            )

    def run(self) -> RunRecord:
        while self.step_index < self.config.steps:
            self.step()
        return self.record

    # -- snapshots ---------------------------------------------------------------

    def snapshot(self) -> dict:
        return {
            "version": SNAPSHOT_VERSION,
            "step": self.step_index,
            "params": [p.value.tolist() for p in self.params],
            "optimizer": self.optimizer.to_snapshot(),
            "balancers": [b.to_snapshot() for b in self.balancers],
            "window": [
                [counts.tolist() for counts in layer_window]
                for layer_window in self._window
            ],
            "rows": [list(r) for r in self.record.rows],
        }

    @classmethod
    def restore(cls, config: TrainConfig, snap: dict) -> Trainer:
        if snap.get("version") != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {snap.get('version')!r}")
        trainer = cls(config)
        trainer.step_index = snap["step"]
        for p, stored in zip(trainer.params, snap["params"]):
            p.value = np.asarray(stored, dtype=np.float64)
        trainer.optimizer.restore(snap["optimizer"])
        trainer.balancers = [BalancerState.from_snapshot(b) for b in snap["balancers"]]
        trainer._window = [
            [np.asarray(counts, dtype=np.int64) for counts in layer_window]
            for layer_window in snap["window"]
        ]
        trainer.record = RunRecord(rows=[EvalRow(*row) for row in snap["rows"]])
        return trainer

    def save_snapshot(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.snapshot(), fh)

    @classmethod
    def load_snapshot(cls, config: TrainConfig, path) -> Trainer:
        with open(path) as fh:
            return cls.restore(config, json.load(fh))


def train(config: TrainConfig) -> RunRecord:
    """Run the configured training loop to completion."""
    return Trainer(config).run()


# -- compute budget -------------------------------------------------------------------


class TokenBudget(NamedTuple):
    compute_per_token: float
    train_tokens: float
    tokens_per_param: float


def compute_token_budget(total_compute: float) -> TokenBudget:
    """Compute-optimal model size, token count, and tokens-per-parameter.

    Power-law fits in the total training compute C:
        M = 0.1915 * C^0.5095, D = 5.2232 * C^0.4905, tpp = D / M.
    """
    if total_compute <= 0.0:
        raise ValueError("total compute must be positive")
    m_opt = 0.1915 * total_compute**0.5095
    d_opt = 5.2232 * total_compute**0.4905
    return TokenBudget(m_opt, d_opt, d_opt / m_opt)
