"""Experiment runner: the round loop (train, evaluate, assign domain budgets,
select instances, reveal), the baseline assignment modes, and CSV export.

Every random draw derives from (experiment seed, purpose, round, domain), so a
rerun with the same config and seeds reproduces byte-identical outputs.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .bounds import BoundParams, BoundReport, empirical_bound
from .config import ExperimentConfig, IdxDatasetSpec, config_to_text
from .data import (MultiDomainDataset, RotatingSpec, gen_rotating, init_pool,
                   load_idx, rotate_idx_domains, split_budget_evenly)
from .objective import estimate_h_distance, evaluate
from .simplex import BudgetLedger, SimilarityMatrix, assign_budget, column_importance
from .strategies import (QueryRequest, badge_embeddings, kmeanspp_select,
                         margin_scores, outlier_scores, select)
from .training import RoundResult, train_round, write_snapshots_csv

log = logging.getLogger(__name__)

_STREAM_POOL, _STREAM_TRAIN, _STREAM_QUERY = 1, 2, 3


def _rng_seed(seed: int, stream: int, *extra: int) -> np.random.SeedSequence:
    return np.random.SeedSequence((int(seed), int(stream), *map(int, extra)))


@dataclass
class RoundMetrics:
    seed: int
    round: int
    per_domain_acc: np.ndarray
    avg_acc: float
    alpha: SimilarityMatrix
    hdist: np.ndarray
    increments: np.ndarray      # reveals that produced this round's pool
    beta: np.ndarray
    bound: BoundReport

    def __post_init__(self) -> None:
        if abs(self.avg_acc - float(np.mean(self.per_domain_acc))) > 1e-12:
            raise ValueError("average accuracy must equal the per-domain mean")


@dataclass
class SeedRunResult:
    seed: int
    rounds: list[RoundMetrics] = field(default_factory=list)
    round_results: list[RoundResult] = field(default_factory=list)
    ledger: BudgetLedger | None = None
    truncated_at: int | None = None


def build_dataset(cfg: ExperimentConfig) -> MultiDomainDataset:
    if isinstance(cfg.dataset, RotatingSpec):
        return gen_rotating(cfg.dataset)
    spec: IdxDatasetSpec = cfg.dataset
    features, labels = load_idx(spec.images, spec.labels)
    return rotate_idx_domains(features, labels, spec.n_domains,
                              spec.train_per_domain, spec.test_per_domain,
                              spec.total_range_deg, spec.seed)


def _joint_select(cfg: ExperimentConfig, dataset: MultiDomainDataset, pool,
                  bundle, seed_seq) -> list[np.ndarray]:
    """Pick m samples from the pooled unlabeled set, ignoring domains."""
    n = dataset.n_domains
    per_domain_unlab = [pool.unlabeled_indices(j) for j in range(n)]
    feats = np.vstack([dataset.train_features[j][per_domain_unlab[j]] for j in range(n)])
    owners = np.concatenate([np.full(per_domain_unlab[j].size, j) for j in range(n)])
    flat_idx = np.concatenate(per_domain_unlab)
    m = cfg.m
    rng = np.random.default_rng(seed_seq)

    if cfg.strategy == "random":
        positions = rng.choice(flat_idx.size, size=m, replace=False)
    elif cfg.strategy == "margin":
        scores = margin_scores(bundle, feats)
        positions = np.lexsort((np.arange(flat_idx.size), scores))[:m]
    else:
        emb = badge_embeddings(bundle, feats,
                               temperature=cfg.train.temperature if cfg.strategy == "grads" else 1.0)
        if cfg.strategy == "grads":
            scores = np.concatenate([
                outlier_scores(bundle, dataset.train_features[j][per_domain_unlab[j]], j)
                for j in range(n)
            ])
            emb = emb * scores[:, None]
        positions = kmeanspp_select(emb, m, seed_seq)

    chosen_per_domain = [np.empty(0, dtype=np.int64) for _ in range(n)]
    for j in range(n):
        mask = owners[positions] == j
        chosen_per_domain[j] = flat_idx[positions[mask]]
    return chosen_per_domain


def run_seed(cfg: ExperimentConfig, dataset: MultiDomainDataset, seed: int) -> SeedRunResult:
    n = dataset.n_domains
    pool = init_pool(dataset, cfg.m0, _rng_seed(seed, _STREAM_POOL))
    initial = pool.counts()
    ledger = BudgetLedger(cfg.m0, cfg.m, initial)
    result = SeedRunResult(seed=seed, ledger=ledger)
    prev_cols = np.full(n, 1.0 / n)
    last_increment = initial.copy()
    bundle = None

    for r in range(cfg.rounds + 1):
        rr = train_round(dataset, pool, cfg.train, _rng_seed(seed, _STREAM_TRAIN, r),
                         bundle=bundle)
        bundle = rr.bundle
        per_acc, avg = evaluate(bundle, dataset)
        lab_feats = [pool.labeled_features(j) for j in range(n)]
        hdist = np.zeros(n)
        if bundle.discriminator is not None:
            for i in range(n):
                hdist[i] = estimate_h_distance(bundle, dataset.train_features[i],
                                               lab_feats, rr.alpha.alpha[i], i)
        report = empirical_bound(bundle, dataset, pool, rr.alpha,
                                 BoundParams(total_labeled=pool.total_labeled()))
        result.rounds.append(RoundMetrics(
            seed=seed, round=r, per_domain_acc=per_acc, avg_acc=avg,
            alpha=rr.alpha, hdist=hdist,
            increments=last_increment.copy(), beta=ledger.beta(),
            bound=report,
        ))
        result.round_results.append(rr)

        if r == cfg.rounds:
            break

        capacities = np.array([pool.unlabeled_indices(j).size for j in range(n)])
        if capacities.sum() < cfg.m:
            log.warning("seed %d: unlabeled pool exhausted before round %d", seed, r + 1)
            result.truncated_at = r + 1
            break

        cols = rr.alpha.column_importance()
        if cfg.assignment == "joint":
            chosen = _joint_select(cfg, dataset, pool, bundle,
                                   _rng_seed(seed, _STREAM_QUERY, r + 1))
            increments = np.array([c.size for c in chosen], dtype=np.int64)
        else:
            if cfg.assignment == "separate":
                increments = np.full(n, cfg.m // n, dtype=np.int64)
                if np.any(increments > capacities):
                    log.warning("seed %d: a domain ran out of unlabeled points", seed)
                    result.truncated_at = r + 1
                    break
            elif cfg.assignment == "cal_optimal":
                increments = assign_budget(cols, ledger, r + 1, capacities,
                                           mode="target_tracking")
            else:  # paper_literal
                increments = assign_budget(cols, ledger, r + 1, capacities,
                                           mode="paper_literal", prev_alpha_cols=prev_cols)
            chosen = []
            for j in range(n):
                unlab = pool.unlabeled_indices(j)
                req = QueryRequest(domain=j, k=int(increments[j]), unlabeled=unlab,
                                   features=dataset.train_features[j][unlab],
                                   bundle=bundle,
                                   seed=_rng_seed(seed, _STREAM_QUERY, r + 1, j))
                chosen.append(select(cfg.strategy, req, temperature=cfg.train.temperature))

        for j in range(n):
            pool.reveal(j, chosen[j])
        ledger.record(increments)
        prev_cols = cols
        last_increment = increments

    return result


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".9g")


def export_outputs(cfg: ExperimentConfig, results: list[SeedRunResult], out_dir) -> list[str]:
    """Write metrics.csv, bounds.csv, per-seed alpha and snapshot CSVs, and a
    config.resolved echo. All CSVs use 9 significant digits and LF endings."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    metrics_path = os.path.join(out_dir, "metrics.csv")
    with open(metrics_path, "w", newline="\n") as f:
        f.write("seed,round,domain,test_accuracy,n_labeled,increment,beta,hdist\n")
        for res in results:
            for rm in res.rounds:
                counts = res.ledger.initial_counts.copy()
                for incr in res.ledger.increments[:rm.round]:
                    counts += incr
                for j in range(rm.per_domain_acc.size):
                    f.write(",".join([
                        str(rm.seed), str(rm.round), str(j),
                        _fmt(rm.per_domain_acc[j]), str(int(counts[j])),
                        str(int(rm.increments[j])), _fmt(rm.beta[j]), _fmt(rm.hdist[j]),
                    ]) + "\n")
                f.write(",".join([
                    str(rm.seed), str(rm.round), "avg",
                    _fmt(rm.avg_acc), str(int(counts.sum())),
                    str(int(rm.increments.sum())), _fmt(rm.beta.sum()),
                    _fmt(float(rm.hdist.mean())),
                ]) + "\n")
    written.append(metrics_path)

    bounds_path = os.path.join(out_dir, "bounds.csv")
    with open(bounds_path, "w", newline="\n") as f:
        f.write("variant,seed,round,weighted_err,hoeffding,mean_hdist,vlambda_proxy,total\n")
        for res in results:
            for rm in res.rounds:
                b = rm.bound
                f.write(",".join([
                    cfg.variant, str(rm.seed), str(rm.round),
                    _fmt(b.weighted_err), _fmt(b.hoeffding), _fmt(b.mean_hdist),
                    _fmt(b.vlambda_proxy), _fmt(b.total),
                ]) + "\n")
    written.append(bounds_path)

    for res in results:
        seed_dir = os.path.join(out_dir, f"seed_{res.seed}")
        os.makedirs(seed_dir, exist_ok=True)
        for rm, rr in zip(res.rounds, res.round_results):
            alpha_path = os.path.join(seed_dir, f"alpha_round_{rm.round}.csv")
            rm.alpha.to_csv(alpha_path)
            written.append(alpha_path)
            snap_path = os.path.join(seed_dir, f"snapshots_round_{rm.round}.csv")
            write_snapshots_csv(rr.history, snap_path)
            written.append(snap_path)

    truncated = [res for res in results if res.truncated_at is not None]
    if truncated:
        trunc_path = os.path.join(out_dir, "truncation.txt")
        with open(trunc_path, "w", newline="\n") as f:
            for res in truncated:
                f.write(f"seed {res.seed}: stopped before query round {res.truncated_at} "
                        "(unlabeled pool exhausted)\n")
        written.append(trunc_path)

    resolved_path = os.path.join(out_dir, "config.resolved")
    with open(resolved_path, "w", newline="\n") as f:
        f.write(config_to_text(cfg))
    written.append(resolved_path)
    return written


def run_experiment(cfg: ExperimentConfig, out_dir: str | None = None) -> list[str]:
    """Run every seed and export all outputs. Returns the written file paths."""
    dataset = build_dataset(cfg)
    results = [run_seed(cfg, dataset, s) for s in cfg.seeds]
    return export_outputs(cfg, results, out_dir or cfg.out_dir)
