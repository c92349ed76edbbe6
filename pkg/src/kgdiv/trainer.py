"""BPR training with the KG regularisers, Adam, and validation early stopping."""
from __future__ import annotations

import contextlib
import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from kgdiv import compute as C
from kgdiv.cau import OverlapPairBatch, PartnerIndex, alignment_loss, sample_overlap_pairs, uniformity_loss
from kgdiv.config import TrainConfig, apply_overrides, parse_pairs
from kgdiv.data import Dataset, InteractionGraph
from kgdiv.errors import ContractError, NumericError
from kgdiv.evaluator import CoverageIndex, MetricReport, evaluate_embeddings
from kgdiv.model import TABLES, Model, ParameterStore

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "loss", "cf", "align", "uniform", "reg", "valid_recall", "valid_ndcg", "seconds")


# --- sampling -------------------------------------------------------------


def sample_negative(u: int, rng: np.random.Generator, graph: InteractionGraph) -> int:
    """Uniform item outside ``u``'s training items, by rejection."""
    own = graph.items_of(u)
    if len(own) >= graph.n_items:
        raise ContractError(f"user {u} interacted with every item")
    while True:
        j = int(rng.integers(graph.n_items))
        pos = np.searchsorted(own, j)
        if pos == len(own) or own[pos] != j:
            return j


def sample_negatives(users: np.ndarray, graph: InteractionGraph, rng: np.random.Generator) -> np.ndarray:
    """Vectorised :func:`sample_negative` for a batch of users."""
    n = graph.n_items
    if np.any(graph.user_degree[users] >= n):
        raise ContractError("a user in the batch interacted with every item")
    keys = graph.edge_users().astype(np.int64) * n + graph.user_items
    out = rng.integers(n, size=len(users))
    todo = np.arange(len(users))
    while len(todo):
        k = users[todo].astype(np.int64) * n + out[todo]
        pos = np.minimum(np.searchsorted(keys, k), len(keys) - 1)
        bad = keys[pos] == k
        todo = todo[bad]
        out[todo] = rng.integers(n, size=len(todo))
    return out


# --- losses ---------------------------------------------------------------


def bpr_loss(users, pos, neg, user_emb, item_emb, mean: bool = False) -> C.Tensor:
    """``-sum log sigmoid(e_u.e_i - e_u.e_j)`` over the batch (mean when ``mean``)."""
    users = np.asarray(users)
    if users.size == 0:
        raise ContractError("bpr_loss: empty batch")
    eu = C.gather_rows(user_emb, users)
    gap = C.sub(C.dot(eu, C.gather_rows(item_emb, pos)), C.dot(eu, C.gather_rows(item_emb, neg)))
    ls = C.log_sigmoid(gap)
    return C.scale(C.mean_all(ls) if mean else C.sum_all(ls), -1.0)


@dataclass
class TrainBatch:
    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray
    pairs: OverlapPairBatch | None = None
    uniform_items: np.ndarray | None = None

    def __len__(self):
        return len(self.users)


def make_batch(users, pos, graph: InteractionGraph, kg, config: TrainConfig, rng: np.random.Generator,
               partners: PartnerIndex | None = None) -> TrainBatch:
    users = np.asarray(users, dtype=np.int64)
    pos = np.asarray(pos, dtype=np.int64)
    neg = sample_negatives(users, graph, rng)
    pairs = None
    if config.effective_lambda_align > 0:
        count = config.align_pairs or len(users)
        pairs = sample_overlap_pairs(kg, pos, count, rng, partners)
    uniform_items = np.unique(pos) if config.effective_lambda_uniform > 0 else None
    return TrainBatch(users, pos, neg, pairs, uniform_items)


@dataclass
class LossTerms:
    total: C.Tensor
    values: dict[str, float] = field(default_factory=dict)


def _term(name, fn):
    try:
        return fn()
    except NumericError as exc:
        raise NumericError(name, str(exc)) from exc


def total_loss(batch: TrainBatch, tables, config: TrainConfig, model: Model) -> LossTerms:
    """BPR + lambda_align * align + lambda_uniform * uniform + lambda_reg * batch L2.

    ``tables`` maps ``user``/``entity``/``relation`` to tensors (watched or not).
    The L2 term covers the layer-0 rows the batch touches: its users and its
    positive and negative items.
    """
    user, entity, relation = (tables[n] for n in TABLES)
    reps = _term("forward", lambda: model.forward(user, entity, relation))
    cf = _term("cf", lambda: bpr_loss(batch.users, batch.pos, batch.neg, reps.users, reps.items, config.bpr_mean))
    total = cf
    values = {"cf": cf.item(), "align": 0.0, "uniform": 0.0, "reg": 0.0}

    lam = config.effective_lambda_align
    if lam > 0 and batch.pairs is not None:
        align = _term("align", lambda: alignment_loss(batch.pairs, reps.items, reps.entity0))
        values["align"] = align.item()
        total = C.add(total, C.scale(align, lam))

    lam = config.effective_lambda_uniform
    if lam > 0 and batch.uniform_items is not None:
        uni = _term("uniform", lambda: uniformity_loss(C.gather_rows(reps.items, batch.uniform_items),
                                                      config.normalize_uniformity))
        values["uniform"] = uni.item()
        total = C.add(total, C.scale(uni, lam))

    if config.lambda_reg > 0:
        def reg_term():
            r = C.add(C.squared_norm(C.gather_rows(user, batch.users)),
                      C.squared_norm(C.gather_rows(entity, batch.pos)))
            r = C.add(r, C.squared_norm(C.gather_rows(entity, batch.neg)))
            return C.scale(r, 1.0 / len(batch)) if config.bpr_mean else r

        reg = _term("reg", reg_term)
        values["reg"] = reg.item()
        total = C.add(total, C.scale(reg, config.lambda_reg))

    if not math.isfinite(total.item()):
        raise NumericError("total")
    values["loss"] = total.item()
    return LossTerms(total, values)


def loss_and_grads(batch: TrainBatch, params: ParameterStore, config: TrainConfig,
                   model: Model) -> tuple[dict[str, float], dict[str, np.ndarray]]:
    tape = C.Tape()
    leaves = {name: tape.leaf(arr, name) for name, arr in params.as_dict().items()}
    terms = total_loss(batch, leaves, config, model)
    tape.backward(terms.total)
    return terms.values, {name: t.grad for name, t in leaves.items()}


# --- optimiser --------------------------------------------------------------


class Adam:
    def __init__(self, params: ParameterStore, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(a) for n, a in params.as_dict().items()}
        self.v = {n: np.zeros_like(a) for n, a in params.as_dict().items()}

    def step(self, params: ParameterStore, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in params.as_dict().items():
            g = grads[name].astype(p.dtype, copy=False)
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p -= update.astype(p.dtype, copy=False)


# --- checkpoints ------------------------------------------------------------


CHECKPOINT_FORMAT = "kgdiv-checkpoint-1"


@dataclass
class Checkpoint:
    params: ParameterStore
    config: TrainConfig
    epoch: int
    best_metric: float
    n_users: int
    n_items: int

    def manifest(self) -> str:
        p = self.params
        lines = [
            f"format={CHECKPOINT_FORMAT}",
            f"n_users={self.n_users}",
            f"n_items={self.n_items}",
            f"n_entities={p.entity.shape[0]}",
            f"n_relations={p.relation.shape[0]}",
            f"dim={p.user.shape[1]}",
            f"epoch={self.epoch}",
            f"best_metric={self.best_metric!r}",
        ]
        lines += [f"config.{line}" for line in self.config.dumps().splitlines()]
        return "\n".join(lines) + "\n"

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name, arr in self.params.as_dict().items():
            np.ascontiguousarray(arr, dtype="<f4").tofile(d / f"{name}.f32")
        (d / "manifest.txt").write_text(self.manifest(), encoding="utf-8")
        return d

    @classmethod
    def load(cls, directory) -> "Checkpoint":
        d = Path(directory)
        path = d / "manifest.txt"
        if not path.exists():
            raise FileNotFoundError(f"no checkpoint manifest at {path}")
        kv = parse_pairs(path.read_text(encoding="utf-8").splitlines())
        if kv.get("format") != CHECKPOINT_FORMAT:
            raise ContractError(f"{path}: unknown checkpoint format {kv.get('format')!r}")
        cfg = apply_overrides(TrainConfig(), {k[7:]: v for k, v in kv.items() if k.startswith("config.")})
        dim = int(kv["dim"])
        shapes = {"user": int(kv["n_users"]), "entity": int(kv["n_entities"]), "relation": int(kv["n_relations"])}
        tables = {}
        for name, rows in shapes.items():
            arr = np.fromfile(d / f"{name}.f32", dtype="<f4")
            if arr.size != rows * dim:
                raise ContractError(f"{name}.f32 holds {arr.size} values, expected {rows}x{dim}")
            tables[name] = arr.reshape(rows, dim).astype(np.float32)
        return cls(ParameterStore(**tables), cfg, int(kv["epoch"]), float(kv["best_metric"]),
                   int(kv["n_users"]), int(kv["n_items"]))

    def check_shapes(self, dataset: Dataset) -> None:
        p = self.params
        want = (dataset.n_users, dataset.kg.n_entities, dataset.kg.n_relations)
        have = (p.user.shape[0], p.entity.shape[0], p.relation.shape[0])
        if want != have or self.n_items != dataset.n_items:
            raise ContractError(f"checkpoint tables {have} do not match dataset {want}")


# --- training loop ----------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict] = field(default_factory=list)
    diverged: bool = False
    valid_report: MetricReport | None = None


def _threads(deterministic: bool):
    if not deterministic:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


def validate(model: Model, params: ParameterStore, dataset: Dataset, k: int,
             index: CoverageIndex | None = None) -> MetricReport:
    users, items = model.embed(params)
    return evaluate_embeddings(users, items, dataset, ks=(k,), which="valid", coverage_index=index)


def train(config: TrainConfig, dataset: Dataset, log_path=None, on_epoch=None) -> TrainResult:
    """Shuffled mini-batch BPR with Adam; keep the best validation Recall@k checkpoint.

    Stops after ``patience`` epochs without improvement or at ``max_epochs``.
    A non-finite loss aborts training and returns the last good checkpoint.
    """
    dtype = np.float32 if config.precision == "float32" else np.float64
    rng = np.random.default_rng(config.seed)
    kg = dataset.kg
    params = ParameterStore.init(dataset.n_users, kg.n_entities, kg.n_relations, config.dim, rng, dtype)
    model = Model(dataset, config)
    partners = PartnerIndex(kg) if config.effective_lambda_align > 0 else None
    cov = CoverageIndex(kg)
    adam = Adam(params, config.lr)
    edges = dataset.split.train
    k = config.eval_k

    def snapshot(epoch, metric):
        return Checkpoint(params.copy(), config, epoch, metric, dataset.n_users, dataset.n_items)

    writer = None
    log_file = None
    if log_path is not None:
        log_file = open(log_path, "w", newline="", encoding="utf-8")
        log_file.write("".join(f"# {line}\n" for line in config.dumps().splitlines()))
        writer = csv.DictWriter(log_file, fieldnames=LOG_FIELDS, lineterminator="\n")
        writer.writeheader()

    history: list[dict] = []
    best: Checkpoint | None = None
    best_report = None
    since_best = 0
    diverged = False
    try:
        with _threads(config.deterministic):
            for epoch in range(1, config.max_epochs + 1):
                t0 = time.perf_counter()
                order = rng.permutation(len(edges))
                sums = {"loss": 0.0, "cf": 0.0, "align": 0.0, "uniform": 0.0, "reg": 0.0}
                try:
                    for s in range(0, len(order), config.batch_size):
                        chunk = edges[order[s:s + config.batch_size]]
                        batch = make_batch(chunk[:, 0], chunk[:, 1], dataset.graph, kg, config, rng, partners)
                        values, grads = loss_and_grads(batch, params, config, model)
                        adam.step(params, grads)
                        if not all(np.all(np.isfinite(p)) for p in params.as_dict().values()):
                            raise NumericError("adam", "non-finite parameter after update")
                        for key in sums:
                            sums[key] += values[key]
                except NumericError as exc:
                    log.error("training diverged in epoch %d: %s", epoch, exc)
                    diverged = True
                    break
                report = validate(model, params, dataset, k, cov)
                metric = report.means[f"recall@{k}"]
                row = {"epoch": epoch, **sums, "valid_recall": metric,
                       "valid_ndcg": report.means[f"ndcg@{k}"], "seconds": time.perf_counter() - t0}
                history.append(row)
                if writer is not None:
                    writer.writerow(row)
                    log_file.flush()
                if on_epoch is not None:
                    on_epoch(row)
                log.info("epoch %d loss %.4f valid recall@%d %.4f", epoch, sums["loss"], k, metric)
                if best is None or metric > best.best_metric:
                    best, best_report, since_best = snapshot(epoch, metric), report, 0
                else:
                    since_best += 1
                    if since_best >= config.patience:
                        break
    finally:
        if log_file is not None:
            log_file.close()

    if best is None:
        # diverged before the first full epoch, or max_epochs == 0
        if diverged:
            params = ParameterStore.init(dataset.n_users, kg.n_entities, kg.n_relations, config.dim,
                                         np.random.default_rng(config.seed), dtype)
        best_report = validate(model, params, dataset, k, cov)
        best = snapshot(0, best_report.means[f"recall@{k}"])
    return TrainResult(best, history, diverged, best_report)
