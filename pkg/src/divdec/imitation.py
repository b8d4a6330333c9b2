"""Imitation-learning loops that collect meta-classifier training samples.

Exact Imitation rolls sentences out by sampling uniformly among expert-safe
candidates and trains on the expert's labels. DAgger keeps expert labels but
rolls in over the union of expert-safe and classifier-safe candidates,
exposing the classifier to its own states. LOLS rolls in with the classifier
alone and, per step, draws the labelling signal from the expert with
probability p = (1-beta)^i, otherwise from averaged classifier rollouts.

Iteration 0 is always one pass of Exact Imitation over the full training
split; later iterations run the configured framework on a fresh seeded
subsample. After every collection round the classifier is retrained on the
aggregate of all samples collected so far.
"""

from dataclasses import dataclass

import numpy as np

from .corpus import Dataset, ReferenceIndex, encode_mr
from .errors import ConfigError, DegenerateDistributionError
from .expert import Expert, ExpertConfig, format_record_lines, label_candidates, ranked_candidates
from .generator import GeneratorModel, init_context, sclstm_step
from .metaclassifier import (
    MetaModel,
    SampleBank,
    control_feature,
    default_meta_train_config,
    features_batch,
    predict_safe_batch,
    safe_prefix,
    train_meta,
)
from .util import derive_seed, rng_for

FRAMEWORKS = ("exact", "dagger", "lols")


@dataclass
class ILConfig:
    framework: str = "exact"
    iterations: int = 3  # subsample iterations after the initializing pass
    beta: float = 0.1
    subsample: float = 0.10
    m: int = 5  # rollouts per candidate for the learned signal
    n: int = 25  # expert candidate count
    seed: int = 0
    max_length: int = 28
    ref_cap: int = 500
    eps: float = 1e-8
    meta_hidden: int = 128
    meta_epochs: int = 30
    meta_batch: int = 512
    reinit_meta: bool = False

    def __post_init__(self):
        if self.framework not in FRAMEWORKS:
            raise ConfigError(f"unknown framework {self.framework!r}")
        if not (0.0 < self.beta < 1.0):
            raise ConfigError("beta must lie in (0, 1)")
        if not (0.0 < self.subsample <= 1.0):
            raise ConfigError("subsample must lie in (0, 1]")
        if self.framework in ("dagger", "lols") and self.iterations < 1:
            raise ConfigError(f"{self.framework} needs at least one iteration")

    def expert_config(self) -> ExpertConfig:
        return ExpertConfig(n=self.n, ref_cap=self.ref_cap, eps=self.eps)


@dataclass
class IterationReport:
    iteration: int
    framework: str
    p: float  # probability the step signal came from the expert
    samples: int
    positive_fraction: float
    fallbacks: int
    mean_safe_set_size: float

    CSV_HEADER = "iteration,framework,p,samples,positive_fraction,fallbacks,mean_safe_set_size"

    def csv_row(self) -> str:
        return (
            f"{self.iteration},{self.framework},{self.p!r},{self.samples},"
            f"{self.positive_fraction:.6f},{self.fallbacks},{self.mean_safe_set_size:.6f}"
        )


def lols_signal_probability(beta: float, iteration: int) -> float:
    """Expert-signal probability schedule p = (1 - beta)^i."""
    return (1.0 - beta) ** iteration


def _instances_with_enc(dataset: Dataset, gen: GeneratorModel):
    out = []
    for sid, inst in enumerate(dataset.instances):
        enc = (
            encode_mr(inst.mr, gen.schema)
            if gen.schema is not None
            else np.zeros(0, dtype=np.float64)
        )
        out.append((sid, inst.mr, enc))
    return out


def _start_step(gen: GeneratorModel, enc):
    return sclstm_step(init_context(enc, gen), gen.vocab.bos_id, gen)


class _Collector:
    """Shared per-iteration state: sample bank, counters, optional dump."""

    def __init__(self, gen, iteration, dump_file=None):
        self.bank = SampleBank(gen)
        self.iteration = iteration
        self.fallbacks = 0
        self.safe_sizes = []
        self.dump_file = dump_file

    def record_step(self, gen, out, cands, labels, prec, sent_id, step, source):
        dfeat = control_feature(out.ctx, gen)
        self.bank.add_step(
            out.ctx, dfeat, cands, labels, sent_id, step, self.iteration, source
        )
        self.safe_sizes.append(sum(labels))
        if self.dump_file is not None:
            for rank, (tok, pr, lb) in enumerate(zip(cands, prec, labels)):
                self.dump_file.write(
                    f"{self.iteration}\t{sent_id}\t{step}\t{rank}\t"
                    f"{gen.vocab.token(tok)}\t{pr:.6f}\t{lb}\t{source}\n"
                )

    def report(self, framework, p) -> IterationReport:
        return IterationReport(
            iteration=self.iteration,
            framework=framework,
            p=p,
            samples=len(self.bank),
            positive_fraction=self.bank.positive_fraction(),
            fallbacks=self.fallbacks,
            mean_safe_set_size=(
                float(np.mean(self.safe_sizes)) if self.safe_sizes else 0.0
            ),
        )


def _expert_rollout(gen, expert, slice_instances, cfg, iteration, collector, union_meta=None):
    """Exact-imitation rollout; with union_meta set, DAgger's mixed roll-in."""
    eos = gen.vocab.eos_id
    for sent_id, mr, enc in slice_instances:
        out = _start_step(gen, enc)
        for step in range(cfg.max_length):
            try:
                record = expert.safe_set(out, mr)
            except DegenerateDistributionError as exc:
                raise DegenerateDistributionError(f"instance {sent_id}: {exc}") from exc
            collector.record_step(
                gen, out, record.candidates, record.labels, record.prec,
                sent_id, step, "expert",
            )
            support = record.safe_candidates()
            if union_meta is not None:
                feats = features_batch(out.ctx, record.candidates, gen)
                pi_safe = predict_safe_batch(feats, union_meta) > 0.5
                support = [
                    c
                    for c, le, lp in zip(record.candidates, record.labels, pi_safe)
                    if le == 1 or lp
                ]
            rng = rng_for(cfg.seed, "rollin", iteration, sent_id, step)
            tok = support[int(rng.integers(len(support)))]
            if tok == eos:
                break
            out = sclstm_step(out.ctx, tok, gen)


def exact_imitation_iteration(
    dataset_slice, gen, expert, cfg: ILConfig, iteration: int = 0, dump_file=None
):
    """Collect expert-labelled samples along expert-sampled trajectories."""
    collector = _Collector(gen, iteration, dump_file)
    _expert_rollout(gen, expert, dataset_slice, cfg, iteration, collector)
    return collector.bank, collector.report("exact", 1.0)


def dagger_iteration(
    dataset_slice, gen, expert, meta: MetaModel, cfg: ILConfig,
    iteration: int, dump_file=None,
):
    """Expert labels; roll-in samples the union of expert- and pi-safe words."""
    collector = _Collector(gen, iteration, dump_file)
    _expert_rollout(
        gen, expert, dataset_slice, cfg, iteration, collector, union_meta=meta
    )
    return collector.bank, collector.report("dagger", 1.0)


def lols_iteration(
    dataset_slice, gen, expert, meta: MetaModel, cfg: ILConfig,
    iteration: int, dump_file=None,
):
    """Roll-in with pi only; per-step signal from expert w.p. (1-beta)^i."""
    if iteration < 1:
        raise ConfigError("LOLS iterations start at 1 (0 is the exact-imitation init)")
    p = lols_signal_probability(cfg.beta, iteration)
    collector = _Collector(gen, iteration, dump_file)
    eos = gen.vocab.eos_id
    for sent_id, mr, enc in dataset_slice:
        out = _start_step(gen, enc)
        for step in range(cfg.max_length):
            use_expert = (
                rng_for(cfg.seed, "coin", iteration, sent_id, step).random() < p
            )
            if use_expert:
                try:
                    record = expert.safe_set(out, mr)
                except DegenerateDistributionError as exc:
                    raise DegenerateDistributionError(
                        f"instance {sent_id}: {exc}"
                    ) from exc
                cands, labels, prec = record.candidates, record.labels, record.prec
                source = "expert"
            else:
                cands = ranked_candidates(out.dist, cfg.n, cfg.eps)
                if not cands:
                    raise DegenerateDistributionError(f"instance {sent_id}: empty step")
                prec = []
                for rank, cand in enumerate(cands):
                    value, fb = expert.learned_signal(
                        out.ctx, mr, cand, meta, m=cfg.m,
                        seed=derive_seed(cfg.seed, "ls", iteration, sent_id, step, rank),
                    )
                    prec.append(value)
                    collector.fallbacks += fb
                labels = label_candidates(prec)
                source = "learned"
            collector.record_step(gen, out, cands, labels, prec, sent_id, step, source)
            prefix = safe_prefix(out.dist, out.ctx, meta, gen, eps=cfg.eps)
            rng = rng_for(cfg.seed, "rollin", iteration, sent_id, step)
            if prefix:
                tok = int(prefix[int(rng.integers(len(prefix)))])
            else:
                tok = int(np.argmax(out.dist))
                collector.fallbacks += 1
            if tok == eos:
                break
            out = sclstm_step(out.ctx, tok, gen)
    return collector.bank, collector.report("lols", p)


def subsample_ids(n_total: int, fraction: float, seed: int, iteration: int):
    """Fresh seeded sample of instance ids, without replacement, sorted."""
    size = max(1, int(round(fraction * n_total)))
    size = min(size, n_total)
    rng = rng_for(seed, "subsample", iteration)
    return sorted(rng.choice(n_total, size=size, replace=False).tolist())


def run_il(
    cfg: ILConfig,
    train: Dataset,
    gen: GeneratorModel,
    index: ReferenceIndex,
    sample_log_path=None,
    dump_path=None,
):
    """Full IL schedule; returns (meta model, iteration reports, sample bank).

    Iteration 0 is Exact Imitation over the whole split. Iterations 1..N run
    cfg.framework on fresh subsamples. After each round the classifier is
    trained on the aggregate bank, continuing from its current parameters
    (or from scratch when cfg.reinit_meta is set).
    """
    instances = _instances_with_enc(train, gen)
    if not instances:
        raise ConfigError("empty training split")
    expert = Expert(gen, index, cfg.expert_config(), run_seed=cfg.seed)
    meta = MetaModel.create(gen, cfg.meta_hidden, seed=cfg.seed)
    dump_file = open(dump_path, "w", encoding="utf-8") if dump_path else None
    log_file = open(sample_log_path, "a", encoding="utf-8") if sample_log_path else None
    try:
        aggregate = SampleBank(gen)
        reports = []

        def train_round(round_idx):
            nonlocal meta
            if cfg.reinit_meta:
                meta = MetaModel.create(gen, cfg.meta_hidden, seed=cfg.seed)
            tcfg = default_meta_train_config(
                seed=derive_seed(cfg.seed, "meta-train", round_idx),
                epochs=cfg.meta_epochs,
            )
            _, report = train_meta(aggregate, meta, tcfg, batch_size=cfg.meta_batch)
            return report

        bank, report = exact_imitation_iteration(
            instances, gen, expert, cfg, iteration=0, dump_file=dump_file
        )
        _append_sample_log(log_file, bank, gen)
        aggregate.extend(bank)
        reports.append(report)
        train_round(0)

        for i in range(1, cfg.iterations + 1):
            ids = subsample_ids(len(instances), cfg.subsample, cfg.seed, i)
            part = [instances[j] for j in ids]
            if cfg.framework == "exact":
                bank, report = exact_imitation_iteration(
                    part, gen, expert, cfg, iteration=i, dump_file=dump_file
                )
            elif cfg.framework == "dagger":
                bank, report = dagger_iteration(
                    part, gen, expert, meta, cfg, iteration=i, dump_file=dump_file
                )
            else:
                bank, report = lols_iteration(
                    part, gen, expert, meta, cfg, iteration=i, dump_file=dump_file
                )
            _append_sample_log(log_file, bank, gen)
            aggregate.extend(bank)
            reports.append(report)
            train_round(i)
    finally:
        if dump_file is not None:
            dump_file.close()
        if log_file is not None:
            log_file.close()
    return meta, reports, aggregate


def _append_sample_log(log_file, bank: SampleBank, gen: GeneratorModel) -> None:
    """Tab-delimited provenance log, appendable across iterations."""
    if log_file is None:
        return
    for i in range(len(bank)):
        log_file.write(
            f"{bank.iteration[i]}\t{bank.sent_id[i]}\t{bank.step[i]}\t"
            f"{bank.rank[i]}\t{bank.source[i]}\t{gen.vocab.token(bank.cand[i])}\t"
            f"{bank.label[i]}\n"
        )
