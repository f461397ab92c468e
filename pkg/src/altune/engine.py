"""Active-learning engine: iterative acquisition, fine-tuning, and metrics.

A run starts from a clustering-based (or random) initial batch, then loops:
score the unlabeled pool with the current classifier, select a batch, reveal
its labels through the oracle, fine-tune, and evaluate on the held-out test
fold. The `elapsed_ms` column in run logs is a deterministic cost model (one
modeled millisecond per sample pass through the model) so that identical
configurations reproduce byte-identical logs; real wallclock is measured
separately and surfaced through the run manifests.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .acquisition import (
    AcquisitionSpec,
    ScoredSample,
    clustering_init,
    score_committee_bald,
    score_entropy,
    score_least_confidence,
    score_margin,
    select_top_k,
)
from .dataset import (
    Dataset,
    LabelOracle,
    Sample,
    SplitSpec,
    apply_normalization,
    kfold_split,
    make_pool,
    zscore_normalize,
)
from .numerics import (
    AdamState,
    DenseNet,
    adam_step,
    cross_entropy,
    one_hot,
    softmax,
)
from .tapt import EncoderModel, TaptConfig, TrainingDiverged, tapt_train

MS_PER_PASS = 1.0  # modeled milliseconds per sample pass (deterministic timing)


class ConfigError(ValueError):
    pass


@dataclass
class ALConfig:
    init_fraction: float = 0.01
    k: int | None = None          # per-iteration batch; None = 5% of the pool
    budget: float = 0.20          # target labeled fraction of the pool
    acquisition: AcquisitionSpec = field(default_factory=AcquisitionSpec)
    init: str = "cluster"         # cluster | random
    warm_start: bool = True
    epochs: int = 20              # fine-tune epoch cap
    patience: int = 5             # early-stopping patience on validation loss
    batch_size: int = 32
    lr: float = 1e-4
    k_max: int = 8                # elbow search ceiling for cluster init
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.init_fraction <= 1.0:
            raise ConfigError("init_fraction must lie in (0, 1]")
        if not 0.0 < self.budget <= 1.0:
            raise ConfigError("budget must lie in (0, 1]")
        if self.budget < self.init_fraction:
            raise ConfigError("budget smaller than init_fraction")
        if self.k is not None and self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.init not in ("cluster", "random"):
            raise ConfigError(f"unknown init mode {self.init!r}")
        if self.epochs < 1 or self.patience < 0 or self.batch_size < 1:
            raise ConfigError("epochs >= 1, patience >= 0, batch_size >= 1 required")
        self.acquisition.validate()


@dataclass
class RunLogRow:
    iteration: int
    labeled_count: int
    labeled_fraction: float
    train_loss: float
    val_loss: float
    ua: float
    wa: float
    elapsed_ms: float


@dataclass
class RunLog:
    run_id: str
    seed: int
    fold: int
    rows: list[RunLogRow] = field(default_factory=list)

    @property
    def final(self) -> RunLogRow:
        return self.rows[-1]


@dataclass
class Metrics:
    ua: float
    wa: float
    confusion: np.ndarray  # rows = true class, cols = predicted


def metrics_from_confusion(confusion: np.ndarray) -> Metrics:
    conf = np.asarray(confusion, dtype=np.int64)
    total = conf.sum()
    wa = float(np.trace(conf) / total)
    recalls = []
    for j in range(conf.shape[0]):
        row = conf[j].sum()
        if row > 0:
            recalls.append(conf[j, j] / row)
    ua = math.fsum(recalls) / len(recalls)
    return Metrics(ua=ua, wa=wa, confusion=conf)


class ClassifierModel:
    """Context network plus a softmax head over the mean-pooled frame vectors."""

    def __init__(self, context_net: DenseNet, head: DenseNet, frames: int, code_dim: int):
        if head.in_dim != code_dim:
            raise ValueError("head input width must equal the context dimension")
        self.context_net = context_net
        self.head = head
        self.frames = frames
        self.code_dim = code_dim

    @classmethod
    def create(
        cls, encoder: EncoderModel, class_count: int, rng: np.random.Generator
    ) -> "ClassifierModel":
        head = DenseNet.create([encoder.code_dim, class_count], ["identity"], rng)
        return cls(encoder.context_net.copy(), head, encoder.frames, encoder.code_dim)

    @property
    def class_count(self) -> int:
        return self.head.out_dim

    def params(self) -> list[np.ndarray]:
        return self.context_net.params() + self.head.params()

    def set_params(self, arrays: list[np.ndarray]) -> None:
        split = 2 * len(self.context_net.layers)
        self.context_net.set_params(arrays[:split])
        self.head.set_params(arrays[split:])

    def copy_params(self) -> list[np.ndarray]:
        return [p.copy() for p in self.params()]

    def _pool_context(self, x: np.ndarray) -> np.ndarray:
        ctx = self.context_net.forward_batch(x)
        return ctx.reshape(x.shape[0], self.frames, self.code_dim).mean(axis=1)

    def predict_logits_batch(self, x: np.ndarray) -> np.ndarray:
        return self.head.forward_batch(self._pool_context(x))

    def predict_proba_batch(self, x: np.ndarray) -> np.ndarray:
        return softmax(self.predict_logits_batch(x))

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        return self.predict_proba_batch(np.asarray(features)[None, :])[0]

    def predict_proba_dropout(
        self, features: np.ndarray, rate: float, rng: np.random.Generator
    ) -> np.ndarray:
        """Stochastic committee-member pass: dropout on every hidden activation
        and on the pooled context vector."""
        ctx = self.context_net.forward_dropout(
            np.asarray(features, dtype=np.float64)[None, :], rate, rng
        )
        pooled = ctx.reshape(1, self.frames, self.code_dim).mean(axis=1)
        keep = 1.0 - rate
        mask = rng.random(pooled.shape) < keep
        pooled = pooled * mask / keep
        return softmax(self.head.forward_batch(pooled))[0]

    def loss_and_grads(self, x: np.ndarray, y_onehot: np.ndarray):
        """Mean cross-entropy over the batch and gradients for all parameters."""
        flat, ctx_cache = self.context_net.forward_cache(x)
        ctx = flat.reshape(x.shape[0], self.frames, self.code_dim)
        pooled = ctx.mean(axis=1)
        logits, head_cache = self.head.forward_cache(pooled)
        probs = softmax(logits)
        loss = cross_entropy(probs, y_onehot)
        d_logits = (probs - y_onehot) / x.shape[0]
        d_pooled, head_grads = self.head.backward(head_cache, d_logits)
        d_ctx = np.repeat(d_pooled[:, None, :], self.frames, axis=1) / self.frames
        _, ctx_grads = self.context_net.backward(
            ctx_cache, d_ctx.reshape(x.shape[0], self.frames * self.code_dim)
        )
        return loss, ctx_grads + head_grads


def evaluate(model, test: Dataset) -> Metrics:
    """Confusion-matrix metrics on a fully labeled test set.

    WA is overall accuracy; UA is the mean of per-class recalls over the
    classes that appear in the test set. Prediction ties go to the lowest
    class index.
    """
    y = test.labels()
    probs = model.predict_proba_batch(test.feature_matrix())
    pred = probs.argmax(axis=1)
    c = probs.shape[1]
    confusion = np.zeros((c, c), dtype=np.int64)
    np.add.at(confusion, (y, pred), 1)
    return metrics_from_confusion(confusion)


@dataclass
class FineTuneResult:
    train_trace: list[float]
    val_trace: list[float]
    best_epoch: int            # 0-based index into the traces
    work: int                  # sample passes consumed


def fine_tune(
    model: ClassifierModel,
    train: Dataset,
    val: Dataset,
    config: ALConfig,
    rng: np.random.Generator | None = None,
) -> FineTuneResult:
    """Adam fine-tuning with early stopping on validation loss.

    Stops once validation loss has failed to improve for more than `patience`
    consecutive epochs and restores the best-validation parameters.
    """
    if len(train) == 0:
        raise ValueError("fine_tune needs a nonempty training set")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    x_train = train.feature_matrix()
    y_train = one_hot(train.labels(), model.class_count)
    x_val = val.feature_matrix()
    y_val = one_hot(val.labels(), model.class_count)

    params = model.params()
    state = AdamState.for_params(params, lr=config.lr)
    best_val = math.inf
    best_params = model.copy_params()
    best_epoch = 0
    bad = 0
    train_trace: list[float] = []
    val_trace: list[float] = []
    work = 0
    n = x_train.shape[0]
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grads = model.loss_and_grads(x_train[idx], y_train[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, start // config.batch_size, loss)
            adam_step(params, grads, state)
            losses.append(loss)
        work += 2 * n + x_val.shape[0]
        train_trace.append(float(np.mean(losses)))
        val_loss = cross_entropy(model.predict_proba_batch(x_val), y_val)
        val_trace.append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_params = model.copy_params()
            best_epoch = epoch
            bad = 0
        else:
            bad += 1
            if bad > config.patience:
                break
    model.set_params(best_params)
    return FineTuneResult(train_trace, val_trace, best_epoch, work)


def _score_pool(model, pool: Dataset, spec: AcquisitionSpec, rng, seed):
    """Score every pool sample under the configured strategy.

    Returns (scores, work units). Random acquisition draws scores from the
    run's RNG and never evaluates the model.
    """
    n = len(pool)
    if spec.kind == "random":
        values = rng.random(n)
        return [ScoredSample(s.id, float(v)) for s, v in zip(pool, values)], 0
    if spec.kind == "bald":
        scored = [
            ScoredSample(
                s.id,
                score_committee_bald(
                    model, s, spec.committee_size, spec.dropout_rate, seed
                ),
            )
            for s in pool
        ]
        return scored, spec.committee_size * n
    probs = model.predict_proba_batch(pool.feature_matrix())
    scorer = {
        "entropy": score_entropy,
        "least_confidence": score_least_confidence,
        "margin": score_margin,
    }[spec.kind]
    return [ScoredSample(s.id, scorer(p)) for s, p in zip(pool, probs)], n


def run_al(
    pool: Dataset,
    oracle: LabelOracle,
    val: Dataset,
    test: Dataset,
    config: ALConfig,
    encoder: EncoderModel | None = None,
    encoder_config: TaptConfig | None = None,
    run_id: str | None = None,
    fold: int = 0,
) -> RunLog:
    """One full acquisition-and-fine-tuning run over an unlabeled pool.

    The pool must carry no labels; ground truth lives in the oracle and is
    revealed exactly once per selected sample. When no encoder is given a
    fresh one is initialized from the run seed (fine-tuning-only mode).
    """
    config.validate()
    if any(s.label is not None for s in pool):
        raise ValueError("pool must be unlabeled; labels belong to the oracle")
    n_total = len(pool)
    target = min(n_total, int(math.floor(config.budget * n_total + 0.5)))
    k = config.k if config.k is not None else max(1, round(0.05 * n_total))

    if encoder is None:
        encoder_config = encoder_config or TaptConfig()
        encoder = EncoderModel.create(pool.feature_dim, encoder_config, seed=config.seed)

    root = np.random.SeedSequence(config.seed)
    ss_model, ss_train, ss_score = root.spawn(3)
    model_rng = np.random.default_rng(ss_model)
    train_rng = np.random.default_rng(ss_train)
    score_rng = np.random.default_rng(ss_score)

    model = ClassifierModel.create(encoder, test.class_count, model_rng)

    if config.init == "cluster":
        q0 = clustering_init(pool, config.init_fraction, config.k_max, config.seed)
    else:
        count = min(n_total, max(1, math.ceil(config.init_fraction * n_total)))
        picks = score_rng.choice(n_total, size=count, replace=False)
        ids = pool.ids()
        q0 = sorted(ids[i] for i in picks)

    by_id = pool.by_id()
    train_samples: list[Sample] = []
    remaining = list(pool.samples)

    def label_batch(ids: list[str]) -> None:
        revealed = oracle.reveal(ids)
        id_set = set(ids)
        for sid in ids:
            s = by_id[sid]
            train_samples.append(Sample(s.id, s.features, revealed[sid]))
        remaining[:] = [s for s in remaining if s.id not in id_set]

    log = RunLog(
        run_id=run_id or f"run-s{config.seed}-f{fold}", seed=config.seed, fold=fold
    )
    work = 0
    iteration = 0

    def train_and_log() -> None:
        nonlocal work
        assert len(train_samples) + len(remaining) == n_total
        train_set = pool.replace_samples(list(train_samples))
        if not config.warm_start and iteration > 0:
            fresh = ClassifierModel.create(encoder, test.class_count, model_rng)
            model.context_net = fresh.context_net
            model.head = fresh.head
        ft = fine_tune(model, train_set, val, config, train_rng)
        work += ft.work + len(test)
        m = evaluate(model, test)
        log.rows.append(
            RunLogRow(
                iteration=iteration,
                labeled_count=len(train_samples),
                labeled_fraction=len(train_samples) / n_total,
                train_loss=ft.train_trace[ft.best_epoch],
                val_loss=ft.val_trace[ft.best_epoch],
                ua=m.ua,
                wa=m.wa,
                elapsed_ms=work * MS_PER_PASS,
            )
        )

    label_batch(q0)
    train_and_log()

    while len(train_samples) < target and remaining:
        iteration += 1
        pool_now = pool.replace_samples(list(remaining))
        scored, score_work = _score_pool(
            model, pool_now, config.acquisition, score_rng, config.seed
        )
        work += score_work
        k_i = min(k, target - len(train_samples), len(remaining))
        label_batch(select_top_k(scored, k_i))
        train_and_log()

    assert oracle.reveal_count == len(train_samples)
    return log


# ---------------------------------------------------------------------------
# Experiment pipelines: split -> normalize -> (optional TAPT) -> run_al


@dataclass
class PipelineConfig:
    al: ALConfig
    tapt: TaptConfig
    use_tapt: bool = True
    split: SplitSpec = field(default_factory=SplitSpec)
    run_id: str | None = None


@dataclass
class PipelineResult:
    runlog: RunLog
    tapt_trace: list[float]
    tapt_wall_ms: float
    al_wall_ms: float


def prepare_fold(data: Dataset, split: SplitSpec):
    """Split, z-score with pool statistics, and mask the pool's labels."""
    train, val, test = kfold_split(data, split)
    pool, oracle = make_pool(train)
    pool, stats = zscore_normalize(pool)
    return pool, oracle, apply_normalization(val, stats), apply_normalization(test, stats)


def run_pipeline(
    data: Dataset, pcfg: PipelineConfig, encoder: EncoderModel | None = None
) -> PipelineResult:
    """End-to-end run on one fold. A pre-trained encoder short-circuits TAPT."""
    pool, oracle, val, test = prepare_fold(data, pcfg.split)
    tapt_trace: list[float] = []
    tapt_wall = 0.0
    if encoder is None:
        encoder = EncoderModel.create(pool.feature_dim, pcfg.tapt, seed=pcfg.tapt.seed)
        if pcfg.use_tapt:
            t0 = time.perf_counter()
            encoder, tapt_trace = tapt_train(encoder, pool, pcfg.tapt)
            tapt_wall = (time.perf_counter() - t0) * 1000.0
    t0 = time.perf_counter()
    runlog = run_al(
        pool,
        oracle,
        val,
        test,
        pcfg.al,
        encoder=encoder,
        run_id=pcfg.run_id,
        fold=pcfg.split.fold_index,
    )
    al_wall = (time.perf_counter() - t0) * 1000.0
    return PipelineResult(runlog, tapt_trace, tapt_wall, al_wall)


def _seed_pipeline_config(
    base_al: ALConfig,
    base_tapt: TaptConfig,
    split: SplitSpec,
    seed: int,
    budget: float,
    sampling: str,
    use_tapt: bool,
    run_id: str,
) -> PipelineConfig:
    al = replace(
        base_al,
        seed=seed,
        budget=budget,
        acquisition=replace(base_al.acquisition, kind=sampling),
    )
    tapt = replace(base_tapt, seed=seed)
    return PipelineConfig(
        al=al,
        tapt=tapt,
        use_tapt=use_tapt,
        split=replace(split, seed=seed),
        run_id=run_id,
    )


def _grid_seed_task(args):
    data, base_al, base_tapt, split, seed, budgets, cells = args
    results = []
    tapt_encoder = None
    for sampling, use_tapt in cells:
        for budget in budgets:
            pretrain = "tapt_ft" if use_tapt else "ft"
            run_id = f"{sampling}-{pretrain}-b{budget:g}-s{seed}"
            pcfg = _seed_pipeline_config(
                base_al, base_tapt, split, seed, budget, sampling, use_tapt, run_id
            )
            if use_tapt and tapt_encoder is None:
                pool, _, _, _ = prepare_fold(data, pcfg.split)
                enc = EncoderModel.create(pool.feature_dim, pcfg.tapt, seed=seed)
                tapt_encoder, _ = tapt_train(enc, pool, pcfg.tapt)
            enc = tapt_encoder.copy() if use_tapt else None
            res = run_pipeline(data, pcfg, encoder=enc)
            results.append(((sampling, pretrain, budget, seed), res.runlog))
    return results


def run_cells(
    data: Dataset,
    base_al: ALConfig,
    base_tapt: TaptConfig,
    split: SplitSpec,
    seeds: list[int],
    budgets: list[float],
    cells: list[tuple[str, bool]],
    jobs: int = 1,
) -> list[tuple[tuple, RunLog]]:
    """Independent runs over (cell, budget, seed), merged in deterministic order.

    The TAPT encoder is trained once per seed and shared across cells, which
    is equivalent to retraining per cell because TAPT is deterministic per
    (pool, config, seed).
    """
    tasks = [
        (data, base_al, base_tapt, split, seed, list(budgets), list(cells))
        for seed in seeds
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_grid_seed_task, tasks))
    else:
        chunks = [_grid_seed_task(t) for t in tasks]
    runs = [item for chunk in chunks for item in chunk]
    runs.sort(key=lambda kv: (kv[0][0], kv[0][1], kv[0][2], kv[0][3]))
    return runs


@dataclass
class GridResult:
    runs: list[tuple[tuple, RunLog]]   # ((sampling, pretrain, budget, seed), log)
    summary: list[dict]                # one row per (sampling, pretrain, budget)


def ablation_grid(
    data: Dataset,
    budgets: list[float],
    seeds: list[int],
    base_al: ALConfig,
    base_tapt: TaptConfig,
    split: SplitSpec | None = None,
    samplings: tuple[str, ...] = ("random", "entropy"),
    jobs: int = 1,
) -> GridResult:
    """(sampling x pretrain x budget) grid, each cell averaged over the seeds."""
    split = split or SplitSpec()
    cells = [(s, u) for s in samplings for u in (False, True)]
    runs = run_cells(data, base_al, base_tapt, split, seeds, budgets, cells, jobs)

    summary = []
    for sampling in samplings:
        for pretrain in ("ft", "tapt_ft"):
            for budget in budgets:
                finals = [
                    log.final
                    for key, log in runs
                    if key[:3] == (sampling, pretrain, budget)
                ]
                uas = np.array([r.ua for r in finals])
                was = np.array([r.wa for r in finals])
                sd = lambda v: float(v.std(ddof=1)) if v.size > 1 else 0.0
                summary.append(
                    {
                        "sampling": sampling,
                        "pretrain": pretrain,
                        "budget": budget,
                        "mean_ua": float(uas.mean()),
                        "sd_ua": sd(uas),
                        "mean_wa": float(was.mean()),
                        "sd_wa": sd(was),
                        "n_seeds": len(finals),
                    }
                )
    return GridResult(runs=runs, summary=summary)


def kfold_experiment(
    data: Dataset, folds: int, pcfg: PipelineConfig
) -> tuple[list[Metrics], Metrics]:
    """Run the pipeline on every fold; returns per-fold metrics and their mean."""
    if folds < 2:
        raise ConfigError("folds must be >= 2")
    per_fold: list[Metrics] = []
    for fold in range(folds):
        cfg = PipelineConfig(
            al=pcfg.al,
            tapt=pcfg.tapt,
            use_tapt=pcfg.use_tapt,
            split=replace(pcfg.split, fold_count=folds, fold_index=fold),
            run_id=f"{pcfg.run_id or 'kfold'}-f{fold}",
        )
        res = run_pipeline(data, cfg)
        final = res.runlog.final
        per_fold.append(Metrics(ua=final.ua, wa=final.wa, confusion=np.zeros((0, 0))))
    mean = Metrics(
        ua=float(np.mean([m.ua for m in per_fold])),
        wa=float(np.mean([m.wa for m in per_fold])),
        confusion=np.zeros((0, 0)),
    )
    return per_fold, mean


# ---------------------------------------------------------------------------
# Run-log serialization (schema shared by every command)

RUNLOG_HEADER = (
    "run_id,seed,fold,iteration,labeled_count,labeled_fraction,"
    "train_loss,val_loss,ua,wa,elapsed_ms"
)


def format_runlog_csv(runs: list[RunLog]) -> str:
    lines = [RUNLOG_HEADER]
    for log in runs:
        for row in log.rows:
            lines.append(
                ",".join(
                    [
                        log.run_id,
                        str(log.seed),
                        str(log.fold),
                        str(row.iteration),
                        str(row.labeled_count),
                        repr(row.labeled_fraction),
                        repr(row.train_loss),
                        repr(row.val_loss),
                        repr(row.ua),
                        repr(row.wa),
                        repr(row.elapsed_ms),
                    ]
                )
            )
    return "\n".join(lines) + "\n"
