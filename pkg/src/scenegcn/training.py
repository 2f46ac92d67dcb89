"""Training loop, evaluation and the experiment harnesses built on them."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .autodiff import ParamStore, Tape
from .graph import DEFAULT_DEADBAND, InteractionGraph, build_graph
from .metrics import EvalReport, compute_report, mean_report
from .models import ConfigError, ModelConfig, forward, init_params, loss_on
from .rules import classify_graph
from .scene import CLASSES, Scene
from .synth import stream, subsample_labels

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 30
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    label_fraction: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ConfigError("optimizer constants out of range")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not 0 < self.label_fraction <= 1:
            raise ConfigError("label_fraction must be in (0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class Adam:
    """Adaptive-moment optimizer over a ParamStore's flat buffer."""

    def __init__(self, params: ParamStore, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.theta = params.flat()
        self.m = np.zeros_like(self.theta)
        self.v = np.zeros_like(self.theta)
        self.t = 0

    def step(self, grad: np.ndarray) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m *= b1
        self.m += (1 - b1) * grad
        self.v *= b2
        self.v += (1 - b2) * grad * grad
        m_hat = self.m / (1 - b1 ** self.t)
        v_hat = self.v / (1 - b2 ** self.t)
        self.theta -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# --------------------------------------------------------------------------
# evaluation

def _labelled(g: InteractionGraph) -> np.ndarray:
    return np.flatnonzero(g.label_mask())


def evaluate_model(
    params: ParamStore,
    cfg: ModelConfig,
    graphs: Sequence[InteractionGraph],
    drop_absent: bool = False,
) -> EvalReport:
    """Argmax prediction for every labelled vehicle in ``graphs``."""
    y_true: list[int] = []
    y_pred: list[int] = []
    for g in graphs:
        idx = _labelled(g)
        if idx.size == 0:
            continue
        pred = np.argmax(forward(g, params, cfg).data, axis=1)
        y_true.extend(g.labels()[idx].tolist())
        y_pred.extend(pred[idx].tolist())
    return compute_report(y_true, y_pred, cfg.name, drop_absent)


def _validate(params: ParamStore, cfg: ModelConfig, graphs: Sequence[InteractionGraph]) -> tuple[float, float]:
    """Validation macro-F1 and mean cross-entropy, from one forward pass per graph."""
    y_true: list[int] = []
    y_pred: list[int] = []
    losses = []
    for g in graphs:
        idx = _labelled(g)
        logits = forward(g, params, cfg).data
        y_true.extend(g.labels()[idx].tolist())
        y_pred.extend(np.argmax(logits[idx], axis=1).tolist())
        z = logits[idx] - logits[idx].max(axis=1, keepdims=True)
        nll = np.log(np.exp(z).sum(axis=1)) - z[np.arange(idx.size), g.labels()[idx]]
        losses.append(nll.mean())
    return compute_report(y_true, y_pred, cfg.name).macro_f1, float(np.mean(losses))


def evaluate_rules(graphs: Sequence[InteractionGraph], drop_absent: bool = False) -> EvalReport:
    y_true: list[int] = []
    y_pred: list[int] = []
    for g in graphs:
        idx = _labelled(g)
        if idx.size == 0:
            continue
        verdicts = classify_graph(g)
        labels = g.labels()
        for v in idx:
            y_true.append(int(labels[v]))
            y_pred.append(verdicts[int(v)].label.index)
    return compute_report(y_true, y_pred, "rules", drop_absent)


# --------------------------------------------------------------------------
# training

@dataclass
class RunResult:
    seed: int
    params: ParamStore | None
    best_epoch: int
    best_val_f1: float
    epochs_run: int
    losses: list[float]
    failed: bool = False
    diagnostics: str = ""


class TrainingDiverged(RuntimeError):
    pass


def train_run(
    cfg: ModelConfig,
    train_graphs: Sequence[InteractionGraph],
    val_graphs: Sequence[InteractionGraph],
    tcfg: TrainConfig,
    seed: int,
) -> RunResult:
    """One seed: shuffled single-graph Adam steps, early stopping on val macro-F1.

    Returns the parameters from the epoch with the best validation macro-F1,
    ties going to the lower validation loss (the last epoch when there is no
    validation data).  Training stops ``patience`` epochs after macro-F1 last
    improved.  A non-finite loss ends the run and marks it failed.
    """
    cfg = replace(cfg, seed=seed)
    graphs = [g for g in train_graphs if g.label_mask().any()]
    if not graphs:
        raise ValueError("no training graph has a labelled vehicle")
    val = [g for g in val_graphs if g.label_mask().any()]
    params = init_params(cfg)
    opt = Adam(params, tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
    rng = stream(seed, "train-order")
    best_key, best_epoch, best = (-math.inf, -math.inf), 0, params.copy()
    improved = 0
    losses: list[float] = []
    epoch = 0
    for epoch in range(1, tcfg.epochs + 1):
        total = 0.0
        for k in rng.permutation(len(graphs)):
            g = graphs[k]
            with Tape() as tape:
                loss = loss_on(g, params, cfg)
            value = loss.item()
            if not math.isfinite(value):
                msg = f"seed {seed}: non-finite loss {value} at epoch {epoch} on graph {g.scene_id}"
                log.error(msg)
                return RunResult(seed, None, best_epoch, best_key[0], epoch, losses, True, msg)
            total += value
            opt.step(params.flat_grad(tape.backward(loss)))
        losses.append(total / len(graphs))
        if not val:
            best, best_epoch = params.copy(), epoch
            continue
        f1, val_loss = _validate(params, cfg, val)
        if f1 > best_key[0]:
            improved = epoch
        if (f1, -val_loss) > best_key:
            best_key, best_epoch, best = (f1, -val_loss), epoch, params.copy()
        log.debug("seed %d epoch %d loss %.5f val macro-F1 %.2f val loss %.5f", seed, epoch, losses[-1], f1, val_loss)
        if epoch - improved >= tcfg.patience:
            break
    best_f1 = best_key[0]
    return RunResult(seed, best, best_epoch, best_f1, epoch, losses)


@dataclass
class TrainResult:
    config: ModelConfig
    runs: list[RunResult]
    reports: list[EvalReport]  # test report per successful run
    report: EvalReport | None  # mean over successful runs

    @property
    def failed_seeds(self) -> list[int]:
        return [r.seed for r in self.runs if r.failed]

    def best_params(self) -> ParamStore | None:
        ok = [r for r in self.runs if not r.failed]
        return max(ok, key=lambda r: r.best_val_f1).params if ok else None


def _run_job(args) -> RunResult:
    return train_run(*args)


def train(
    cfg: ModelConfig,
    splits: tuple[Sequence[InteractionGraph], Sequence[InteractionGraph], Sequence[InteractionGraph]],
    tcfg: TrainConfig,
    jobs: int = 1,
    drop_absent: bool = False,
) -> TrainResult:
    """Train one model per seed and evaluate each on the test split."""
    train_graphs, val_graphs, test_graphs = splits
    args = [(cfg, train_graphs, val_graphs, tcfg, s) for s in tcfg.seeds]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(args))) as pool:
            runs = list(pool.map(_run_job, args))
    else:
        runs = [_run_job(a) for a in args]
    reports = []
    for run in runs:
        if run.failed:
            continue
        rep = evaluate_model(run.params, replace(cfg, seed=run.seed), test_graphs, drop_absent)
        rep.meta = {"seed": run.seed, "best_epoch": run.best_epoch, "epochs_run": run.epochs_run,
                    "best_val_macro_f1": run.best_val_f1}
        reports.append(rep)
    report = mean_report(reports, cfg.name) if reports else None
    if report is not None:
        report.meta = {"seeds": list(tcfg.seeds), "failed_seeds": [r.seed for r in runs if r.failed],
                       "model": cfg.to_dict(), "train": tcfg.to_dict()}
    return TrainResult(cfg, runs, reports, report)


def build_graphs(scenes: Iterable[Scene], deadband: float = DEFAULT_DEADBAND) -> list[InteractionGraph]:
    return [build_graph(s, deadband) for s in scenes]


def prepare_splits(
    scene_splits: tuple[Sequence[Scene], Sequence[Scene], Sequence[Scene]],
    tcfg: TrainConfig,
    deadband: float = DEFAULT_DEADBAND,
    label_seed: int = 1,
) -> tuple[list[InteractionGraph], list[InteractionGraph], list[InteractionGraph]]:
    """Graphs for each split; only the training split is label-subsampled."""
    train_s, val_s, test_s = scene_splits
    if tcfg.label_fraction < 1.0:
        train_s = subsample_labels(train_s, tcfg.label_fraction, label_seed)
    return build_graphs(train_s, deadband), build_graphs(val_s, deadband), build_graphs(test_s, deadband)


# --------------------------------------------------------------------------
# experiment harnesses

SCARCITY_FRACTIONS = (0.05, 0.1, 0.2)


@dataclass
class ScarcityResult:
    fractions: tuple[float, ...]
    reports: dict[tuple[float, str], EvalReport] = field(default_factory=dict)

    def macro_recall(self, fraction: float, model: str) -> float:
        return self.reports[(fraction, model)].macro["recall"]

    def gap(self, fraction: float, better: str = "rel-att-gcn", baseline: str = "mrgcn") -> float:
        return self.macro_recall(fraction, better) - self.macro_recall(fraction, baseline)

    def rows(self) -> list[tuple[float, str, str, float | None]]:
        out = []
        for (fraction, model), rep in self.reports.items():
            for cls in CLASSES:
                out.append((fraction, model, cls.value, rep.recall(cls.value)))
        return out

    def to_csv(self) -> str:
        lines = ["fraction,model,class,recall"]
        for fraction, model, cls, recall in self.rows():
            lines.append(f"{fraction},{model},{cls},{'' if recall is None else f'{recall:.2f}'}")
        return "\n".join(lines) + "\n"


def scarcity_experiment(
    scene_splits: tuple[Sequence[Scene], Sequence[Scene], Sequence[Scene]],
    model_cfgs: Sequence[ModelConfig],
    tcfg: TrainConfig,
    fractions: Sequence[float] = SCARCITY_FRACTIONS,
    deadband: float = DEFAULT_DEADBAND,
    jobs: int = 1,
) -> ScarcityResult:
    """Per-class test recall for each model when trained on a fraction of the labels."""
    train_s, val_s, test_s = scene_splits
    val_g, test_g = build_graphs(val_s, deadband), build_graphs(test_s, deadband)
    result = ScarcityResult(tuple(fractions))
    for fraction in fractions:
        sub = train_s if fraction >= 1.0 else subsample_labels(train_s, fraction, seed=1)
        train_g = build_graphs(sub, deadband)
        for cfg in model_cfgs:
            res = train(cfg, (train_g, val_g, test_g), replace(tcfg, label_fraction=fraction), jobs)
            if res.report is None:
                raise RuntimeError(f"every seed diverged for {cfg.name} at fraction {fraction}")
            result.reports[(fraction, cfg.name)] = res.report
    return result


def transfer_experiment(
    cfg: ModelConfig,
    source_splits: tuple[Sequence[InteractionGraph], Sequence[InteractionGraph], Sequence[InteractionGraph]],
    targets: Mapping[str, Sequence[InteractionGraph]],
    tcfg: TrainConfig,
    jobs: int = 1,
) -> tuple[TrainResult, dict[str, EvalReport]]:
    """Train on the source once per seed, then score every target unchanged.

    Classes with no support in a target are dropped from its report.
    """
    res = train(cfg, source_splits, tcfg, jobs)
    out: dict[str, EvalReport] = {}
    for name, graphs in targets.items():
        reps = []
        for run in res.runs:
            if run.failed:
                continue
            rep = evaluate_model(run.params, replace(cfg, seed=run.seed), graphs, drop_absent=True)
            rep.meta = {"seed": run.seed}
            reps.append(rep)
        if not reps:
            raise RuntimeError("every seed diverged")
        rep = mean_report(reps, cfg.name)
        rep.meta = {"target": name, "seeds": [r.seed for r in res.runs if not r.failed]}
        out[name] = rep
    return res, out
