"""Experiment harness and command-line interface.

Subcommands: gen-data, train-gen, train-lm, train-mcd, decode, evaluate,
sweep, match-diversity, stats, report, pipeline. Every subcommand requires an
explicit --seed; sampling-based results are not reproducible without one.
Exit codes: 0 success, 1 usage error, 2 stage failure.
"""

import argparse
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import decoding, imitation
from .corpus import (
    DASchema,
    Dataset,
    MeaningRepresentation,
    ReferenceIndex,
    Vocab,
    default_grammar_text,
    encode_mr,
    generate_corpus,
    load_dataset,
    parse_grammar,
    save_dataset,
)
from .errors import ConfigError, RangeError
from .generator import GeneratorModel, train_generator, train_lm
from .metaclassifier import MetaModel
from .metrics import EvalReport, evaluate_outputs
from .numkit import TrainConfig
from .util import derive_seed, load_kv_config, sha256_file, sha256_text

SYSTEM_ORDER = (
    ("greedy", "Greedy"),
    ("beam", "Beam"),
    ("mmi", "MMI"),
    ("topk", "Top-k (best)"),
    ("nucleus", "Nucleus (matched)"),
    ("mcd_exact", "MCD-Exact"),
    ("mcd_dagger", "MCD-DAgger"),
    ("mcd_lols", "MCD-LOLS"),
)


class StageFailure(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


# -- shared helpers -----------------------------------------------------------------


def _load_split(data_dir, split) -> Dataset:
    return load_dataset(Path(data_dir) / f"{split}.jsonl", split=split)


def _ref_groups(dataset: Dataset) -> dict:
    groups: dict = {}
    for inst in dataset.instances:
        groups.setdefault(inst.mr.key(), []).append(list(inst.ref[:-1]))
    return groups


def decode_split(
    cfg: decoding.DecodeConfig,
    dataset: Dataset,
    gen: GeneratorModel,
    lm: GeneratorModel | None = None,
    meta: MetaModel | None = None,
) -> list:
    """Decode every instance: full pool, rerank, one chosen output each."""
    records = []
    for mr_id, inst in enumerate(dataset.instances):
        enc = encode_mr(inst.mr, gen.schema)
        pool = decoding.decode_pool(cfg, enc, gen, lm, meta, mr_id=mr_id)
        chosen = decoding.rerank(
            pool, inst.mr, gen.vocab, seed=derive_seed(cfg.seed, "rerank", mr_id)
        )
        records.append(
            {
                "mr_id": mr_id,
                "mr": inst.mr.to_obj(),
                "output": " ".join(chosen.surface(gen.vocab)),
                "output_logprob": chosen.logprob,
                "fallbacks": sum(c.fallbacks for c in pool),
                "pool": [
                    {
                        "tokens": " ".join(c.surface(gen.vocab)),
                        "logprob": c.logprob,
                        "norm_logprob": c.normalized_logprob(),
                        "slot_error": c.slot_err,
                    }
                    for c in pool
                ],
            }
        )
    return records


def write_decode_file(records, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_decode_file(path) -> list:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def evaluate_decode_records(records, refs: Dataset) -> EvalReport:
    groups = _ref_groups(refs)
    items = [
        (MeaningRepresentation.from_obj(rec["mr"]), rec["output"].split())
        for rec in records
    ]
    return evaluate_outputs(items, groups)


def eval_report_for(
    cfg: decoding.DecodeConfig,
    dataset: Dataset,
    gen: GeneratorModel,
    lm=None,
    meta=None,
) -> EvalReport:
    records = decode_split(cfg, dataset, gen, lm, meta)
    return evaluate_decode_records(records, dataset)


# -- sweeps and diversity matching ------------------------------------------------------


@dataclass
class SweepRow:
    strategy: str
    param: float
    mode: str
    seed: int
    report: EvalReport

    CSV_HEADER = "strategy,param,mode,seed,BLEU,1-SB,ERR,Dist-1,Dist-2,Dist-4,Dist-Sent"

    def csv_row(self) -> str:
        r = self.report
        return (
            f"{self.strategy},{self.param!r},{self.mode},{self.seed},"
            f"{r.bleu!r},{r.one_minus_self_bleu!r},{r.slot_error_pct!r},"
            f"{r.dist1!r},{r.dist2!r},{r.dist4!r},{r.dist_sent!r}"
        )


def run_sweep(
    dataset: Dataset,
    gen: GeneratorModel,
    seed: int,
    k_values=tuple(range(1, 11)),
    p_values=tuple(round(0.10 + 0.05 * i, 2) for i in range(18)),
    modes=("uniform", "probabilistic"),
    max_length: int = decoding.DEFAULT_MAX_LENGTH,
) -> list:
    """Decode+evaluate grid over top-k and nucleus parameters, both modes."""
    rows = []
    for mode in modes:
        for k in k_values:
            cfg = decoding.DecodeConfig(
                strategy="topk", k=int(k), mode=mode, seed=seed, max_length=max_length
            )
            rows.append(SweepRow("topk", float(k), mode, seed, eval_report_for(cfg, dataset, gen)))
        for p in p_values:
            cfg = decoding.DecodeConfig(
                strategy="nucleus", p=float(p), mode=mode, seed=seed, max_length=max_length
            )
            rows.append(SweepRow("nucleus", float(p), mode, seed, eval_report_for(cfg, dataset, gen)))
    return rows


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(SweepRow.CSV_HEADER + "\n")
        for row in rows:
            f.write(row.csv_row() + "\n")


def read_sweep_csv(path) -> list:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip()
        if header != SweepRow.CSV_HEADER:
            raise ValueError(f"unexpected sweep header {header!r}")
        for line in f:
            parts = line.strip().split(",")
            if len(parts) != 11:
                continue
            report = EvalReport(
                bleu=float(parts[4]),
                one_minus_self_bleu=float(parts[5]),
                slot_error_pct=float(parts[6]),
                dist1=float(parts[7]),
                dist2=float(parts[8]),
                dist4=float(parts[9]),
                dist_sent=float(parts[10]),
            )
            rows.append(
                SweepRow(parts[0], float(parts[1]), parts[2], int(parts[3]), report)
            )
    return rows


@dataclass
class MatchResult:
    p_star: float
    achieved: float
    iterations: int
    report: EvalReport


_TAIL_EPS = 1e-12


def _p_to_u(p: float) -> float:
    return -np.log(1.0 - p + _TAIL_EPS)


def _u_to_p(u: float) -> float:
    return min(1.0, 1.0 - float(np.exp(-u)) + _TAIL_EPS)


def match_diversity(
    target: float,
    dataset: Dataset,
    gen: GeneratorModel,
    seed: int,
    mode: str = "uniform",
    tol: float = 0.005,
    max_iter: int = 12,
    p_low: float = 0.05,
    p_high: float = 1.0,
    max_length: int = decoding.DEFAULT_MAX_LENGTH,
) -> MatchResult:
    """Bisection on nucleus p until test-split 1-Self-BLEU matches `target`.

    Bisection runs in the log-tail coordinate u = -log(1 - p): on a
    well-trained (highly peaked) generator, nearly all diversity response
    lives in the last sliver of probability mass before p = 1, and a linear
    split of [p_low, 1] cannot resolve it within the iteration budget. The
    transform is monotone, so this is still a bisection over p. Stops at
    |achieved - target| <= tol or after max_iter midpoints, returning the
    best point seen; targets outside the endpoint interval raise RangeError.
    """

    def measure(p):
        cfg = decoding.DecodeConfig(
            strategy="nucleus", p=p, mode=mode, seed=seed, max_length=max_length
        )
        return eval_report_for(cfg, dataset, gen)

    lo_rep = measure(p_low)
    hi_rep = measure(p_high)
    lo, hi = lo_rep.one_minus_self_bleu, hi_rep.one_minus_self_bleu
    if target < lo - tol or target > hi + tol:
        raise RangeError(
            f"target {target:.4f} outside achievable 1-SB interval "
            f"[{lo:.4f}, {hi:.4f}]",
            low=lo,
            high=hi,
        )
    if abs(lo - target) <= tol:
        return MatchResult(p_low, lo, 0, lo_rep)
    if abs(hi - target) <= tol:
        return MatchResult(p_high, hi, 0, hi_rep)
    a, b = _p_to_u(p_low), _p_to_u(p_high)
    best = None
    for it in range(1, max_iter + 1):
        mid = _u_to_p(0.5 * (a + b))
        rep = measure(mid)
        val = rep.one_minus_self_bleu
        if best is None or abs(val - target) < abs(best[1] - target):
            best = (mid, val, it, rep)
        if abs(val - target) <= tol:
            return MatchResult(mid, val, it, rep)
        if val < target:
            a = _p_to_u(mid)
        else:
            b = _p_to_u(mid)
    return MatchResult(best[0], best[1], best[2], best[3])


# -- report -------------------------------------------------------------------------


def build_report(eval_files: dict) -> tuple:
    """(markdown, csv) tables over the canonical system list.

    eval_files maps canonical system name -> EvalReport (or None when absent).
    Both outputs carry identical numbers.
    """
    md = ["| System | BLEU | 1-SB | Dist-1 | Dist-2 | Dist-4 | Dist-Sent | SlotError | Flag |"]
    md.append("|---|---|---|---|---|---|---|---|---|")
    csv_lines = ["system," + EvalReport.CSV_HEADER + ",flag"]
    for key, display in SYSTEM_ORDER:
        rep = eval_files.get(key)
        if rep is None:
            md.append(f"| {display} | - | - | - | - | - | - | - | absent |")
            csv_lines.append(f"{key},,,,,,,,absent")
            continue
        md.append(
                f"| {display} | {rep.bleu:.6f} | {rep.one_minus_self_bleu:.6f} "
                f"| {rep.dist1:.6f} | {rep.dist2:.6f} | {rep.dist4:.6f} "
                f"| {rep.dist_sent:.6f} | {rep.slot_error_pct:.6f} | ok |"
        )
        csv_lines.append(f"{key},{rep.csv_row()},ok")
    return "\n".join(md) + "\n", "\n".join(csv_lines) + "\n"


# -- experiment pipeline ----------------------------------------------------------------


@dataclass
class ExperimentConfig:
    out_dir: str = "run"
    grammar: str = "default"
    sizes: tuple = (3000, 300, 300)
    seed: int = 7
    hidden_size: int = 64
    embed_size: int = 32
    gen_epochs: int = 30
    gen_patience: int = 6
    gen_lr: float = 0.005
    gen_clip: float = 0.5
    lm_epochs: int = 8
    lm_patience: int = 3
    frameworks: tuple = ("exact",)
    il_iterations: int = 3
    beta: float = 0.1
    subsample: float = 0.10
    m: int = 5
    n: int = 25
    meta_epochs: int = 8  # desk-scale rounds; paper-scale reference is 30
    strategies: tuple = ("greedy", "beam", "mmi", "topk", "nucleus")
    k: int = 5
    p: float = 0.8
    mode: str = "uniform"
    max_length: int = decoding.DEFAULT_MAX_LENGTH

    @staticmethod
    def from_file(path, **overrides) -> "ExperimentConfig":
        raw = load_kv_config(path)
        cfg = ExperimentConfig()
        for key, value in raw.items():
            if not hasattr(cfg, key):
                raise ConfigError(f"unknown experiment config key {key!r}")
            current = getattr(cfg, key)
            if isinstance(current, tuple):
                parts = [v.strip() for v in value.split(",") if v.strip()]
                conv = int if key in ("sizes",) else str
                setattr(cfg, key, tuple(conv(v) for v in parts))
            elif isinstance(current, bool):
                setattr(cfg, key, value.lower() in ("1", "true", "yes"))
            elif isinstance(current, int):
                setattr(cfg, key, int(value))
            elif isinstance(current, float):
                setattr(cfg, key, float(value))
            else:
                setattr(cfg, key, value)
        for key, value in overrides.items():
            if value is not None:
                setattr(cfg, key, value)
        return cfg

    def config_hash(self) -> str:
        payload = {k: list(v) if isinstance(v, tuple) else v for k, v in vars(self).items()}
        return sha256_text(json.dumps(payload, sort_keys=True))


class Manifest:
    """Per-stage record of config hash, seeds, and output hashes."""

    def __init__(self, path):
        self.path = Path(path)
        if self.path.exists():
            with open(self.path, "r", encoding="utf-8") as f:
                self.data = json.load(f)
        else:
            self.data = {"version": 1, "stages": {}}

    def stage_done(self, name, config_hash, outputs) -> bool:
        entry = self.data["stages"].get(name)
        if not entry or entry["config_hash"] != config_hash:
            return False
        for rel, digest in entry["outputs"].items():
            path = self.path.parent / rel
            if not path.exists() or sha256_file(path) != digest:
                return False
        # declared outputs must cover what the stage promises now
        return set(entry["outputs"]) == {str(p) for p in outputs}

    def record(self, name, config_hash, outputs, seed, elapsed) -> None:
        self.data["stages"][name] = {
            "config_hash": config_hash,
            "outputs": {
                str(rel): sha256_file(self.path.parent / rel) for rel in outputs
            },
            "seed": seed,
            "elapsed_sec": round(elapsed, 3),
        }
        self.save()

    def save(self) -> None:
        with open(self.path, "w", encoding="utf-8") as f:
            json.dump(self.data, f, indent=1, sort_keys=True)
            f.write("\n")


def run_pipeline(cfg: ExperimentConfig, log=print) -> dict:
    """gen-data -> train-gen -> train-lm -> train-mcd -> decode -> evaluate -> report.

    Stages are skipped when the manifest shows them complete under the same
    config hash with intact outputs. Returns {stage: skipped|ran}.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(out / "manifest.json")
    chash = cfg.config_hash()
    status = {}

    def stage(name, outputs, fn):
        rel = [str(Path(o)) for o in outputs]
        if manifest.stage_done(name, chash, rel):
            status[name] = "skipped"
            log(f"[pipeline] {name}: skipped (up to date)")
            return
        start = time.perf_counter()
        try:
            fn()
        except Exception as exc:
            raise StageFailure(name, exc) from exc
        manifest.record(name, chash, rel, cfg.seed, time.perf_counter() - start)
        status[name] = "ran"
        log(f"[pipeline] {name}: done in {time.perf_counter() - start:.1f}s")

    data_dir = out / "data"
    ckpt_dir = out / "ckpt"
    dec_dir = out / "decode"
    eval_dir = out / "eval"
    for d in (data_dir, ckpt_dir, dec_dir, eval_dir):
        d.mkdir(exist_ok=True)

    def do_data():
        grammar_text = (
            default_grammar_text()
            if cfg.grammar == "default"
            else Path(cfg.grammar).read_text()
        )
        grammar = parse_grammar(grammar_text)
        train, val, test = generate_corpus(grammar, cfg.seed, cfg.sizes)
        for split, ds in (("train", train), ("val", val), ("test", test)):
            save_dataset(ds, data_dir / f"{split}.jsonl")
        Vocab.from_grammar(grammar).save(data_dir / "vocab.txt")
        DASchema.from_grammar(grammar).save(data_dir / "schema.json")
        (data_dir / "grammar.txt").write_text(grammar_text)

    stage(
        "gen-data",
        [f"data/{n}" for n in ("train.jsonl", "val.jsonl", "test.jsonl", "vocab.txt", "schema.json", "grammar.txt")],
        do_data,
    )

    def do_train_gen():
        vocab = Vocab.load(data_dir / "vocab.txt")
        schema = DASchema.load(data_dir / "schema.json")
        train = _load_split(data_dir, "train")
        val = _load_split(data_dir, "val")
        tc = TrainConfig(
            learning_rate=cfg.gen_lr, clip_threshold=cfg.gen_clip,
            epochs=cfg.gen_epochs, patience=cfg.gen_patience, seed=cfg.seed,
        )
        model = train_generator(train, val, tc, vocab, schema, cfg.hidden_size, cfg.embed_size)
        model.save(ckpt_dir / "generator.npz")
        _write_train_log(model.train_log, ckpt_dir / "generator_train_log.csv")

    stage("train-gen", ["ckpt/generator.npz", "ckpt/generator_train_log.csv"], do_train_gen)

    def do_train_lm():
        vocab = Vocab.load(data_dir / "vocab.txt")
        train = _load_split(data_dir, "train")
        val = _load_split(data_dir, "val")
        tc = TrainConfig(
            learning_rate=cfg.gen_lr, clip_threshold=cfg.gen_clip,
            epochs=cfg.lm_epochs, patience=cfg.lm_patience, seed=cfg.seed,
        )
        model = train_lm(train, val, tc, vocab, cfg.hidden_size, cfg.embed_size)
        model.save(ckpt_dir / "lm.npz")
        _write_train_log(model.train_log, ckpt_dir / "lm_train_log.csv")

    stage("train-lm", ["ckpt/lm.npz", "ckpt/lm_train_log.csv"], do_train_lm)

    for fw in cfg.frameworks:
        def do_train_mcd(fw=fw):
            gen = GeneratorModel.load(ckpt_dir / "generator.npz")
            train = _load_split(data_dir, "train")
            index = ReferenceIndex.build(train)
            il_cfg = imitation.ILConfig(
                framework=fw, iterations=cfg.il_iterations, beta=cfg.beta,
                subsample=cfg.subsample, m=cfg.m, n=cfg.n, seed=cfg.seed,
                max_length=cfg.max_length, meta_epochs=cfg.meta_epochs,
            )
            meta, reports, _ = imitation.run_il(il_cfg, train, gen, index)
            meta.save(ckpt_dir / f"mcd_{fw}.npz", {"framework": fw})
            with open(ckpt_dir / f"mcd_{fw}_iterations.csv", "w", encoding="utf-8") as f:
                f.write(imitation.IterationReport.CSV_HEADER + "\n")
                for rep in reports:
                    f.write(rep.csv_row() + "\n")

        stage(
            f"train-mcd-{fw}",
            [f"ckpt/mcd_{fw}.npz", f"ckpt/mcd_{fw}_iterations.csv"],
            do_train_mcd,
        )

    systems = list(cfg.strategies) + [f"mcd_{fw}" for fw in cfg.frameworks]

    for system in systems:
        def do_decode(system=system):
            gen = GeneratorModel.load(ckpt_dir / "generator.npz")
            test = _load_split(data_dir, "test")
            lm = meta = None
            if system == "mmi":
                lm = GeneratorModel.load(ckpt_dir / "lm.npz")
            dcfg = decoding.DecodeConfig(
                strategy=system if not system.startswith("mcd_") else "mcd",
                k=cfg.k, p=cfg.p, mode=cfg.mode, seed=cfg.seed,
                max_length=cfg.max_length,
            )
            if system.startswith("mcd_"):
                meta = MetaModel.load(ckpt_dir / f"{system}.npz")
            write_decode_file(
                decode_split(dcfg, test, gen, lm, meta), dec_dir / f"{system}.jsonl"
            )

        stage(f"decode-{system}", [f"decode/{system}.jsonl"], do_decode)

    for system in systems:
        def do_eval(system=system):
            test = _load_split(data_dir, "test")
            records = read_decode_file(dec_dir / f"{system}.jsonl")
            report = evaluate_decode_records(records, test)
            with open(eval_dir / f"{system}.csv", "w", encoding="utf-8") as f:
                f.write(EvalReport.CSV_HEADER + "\n" + report.csv_row() + "\n")

        stage(f"evaluate-{system}", [f"eval/{system}.csv"], do_eval)

    def do_report():
        reports = {}
        for key, _ in SYSTEM_ORDER:
            path = eval_dir / f"{key}.csv"
            reports[key] = EvalReport.from_csv(path.read_text()) if path.exists() else None
        md, csv_text = build_report(reports)
        (out / "report.md").write_text(md)
        (out / "report.csv").write_text(csv_text)

    stage("report", ["report.md", "report.csv"], do_report)
    return status


def _write_train_log(log_rows, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("epoch,train_loss,val_loss\n")
        for row in log_rows:
            f.write(f"{row['epoch']},{row['train_loss']!r},{row['val_loss']!r}\n")


# -- argument parsing -----------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(1)


def _add_seed(sp):
    sp.add_argument("--seed", type=int, required=True, help="run seed (required)")


def build_parser() -> _Parser:
    parser = _Parser(prog="divdec", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--grammar", default="default")
    p.add_argument("--out", required=True)
    p.add_argument("--sizes", default="3000,300,300")
    _add_seed(p)

    for name in ("train-gen", "train-lm"):
        p = sub.add_parser(name, help=f"{name.replace('-', ' ')} on a data dir")
        p.add_argument("--data", required=True)
        p.add_argument("--config", default=None, help="flat key=value file")
        p.add_argument("--out", required=True)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--patience", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--clip", type=float, default=None)
        p.add_argument("--hidden", type=int, default=None)
        p.add_argument("--embed", type=int, default=None)
        _add_seed(p)

    p = sub.add_parser("train-mcd", help="imitation-learning training of the meta-classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--gen", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--framework", choices=imitation.FRAMEWORKS, default="exact")
    p.add_argument("--iterations", type=int, default=3)
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--subsample", type=float, default=0.1)
    p.add_argument("--m", type=int, default=5)
    p.add_argument("--n", type=int, default=25)
    p.add_argument("--meta-epochs", type=int, default=30)
    p.add_argument("--meta-hidden", type=int, default=128)
    p.add_argument("--reports", default=None, help="iteration report CSV path")
    p.add_argument("--sample-log", default=None, help="append MetaSample provenance log")
    p.add_argument("--dump", default=None, help="expert diagnostic dump path")
    _add_seed(p)

    p = sub.add_parser("decode", help="decode a split with one strategy")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--strategy", required=True,
                   choices=["greedy", "beam", "topk", "nucleus", "mmi", "mcd"])
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--p", type=float, default=0.8)
    p.add_argument("--mode", choices=["uniform", "probabilistic"], default="uniform")
    p.add_argument("--width", type=int, default=10)
    p.add_argument("--mmi-lambda", type=float, default=0.5)
    p.add_argument("--g", type=int, default=5)
    p.add_argument("--lm", default=None)
    p.add_argument("--meta", default=None)
    p.add_argument("--pool", type=int, default=decoding.DEFAULT_POOL_SIZE)
    p.add_argument("--max-length", type=int, default=decoding.DEFAULT_MAX_LENGTH)
    p.add_argument("--edge-case", action="store_true",
                   help="always take the least probable allowed word")
    p.add_argument("--out", required=True)
    _add_seed(p)

    p = sub.add_parser("evaluate", help="score a decode file against references")
    p.add_argument("--outputs", required=True)
    p.add_argument("--refs", required=True, help="data dir or dataset .jsonl")
    p.add_argument("--split", default="test")
    p.add_argument("--report", required=True)
    _add_seed(p)

    p = sub.add_parser("sweep", help="top-k / nucleus parameter sweep")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k-range", default="1:10")
    p.add_argument("--p-range", default="0.10:0.95:0.05")
    p.add_argument("--modes", default="uniform,probabilistic")
    _add_seed(p)

    p = sub.add_parser("match-diversity", help="bisect nucleus p to a 1-SB target")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--target", type=float, required=True)
    p.add_argument("--mode", choices=["uniform", "probabilistic"], default="uniform")
    p.add_argument("--tol", type=float, default=0.005)
    p.add_argument("--out", default=None, help="optional decode output for p*")
    _add_seed(p)

    p = sub.add_parser("stats", help="decoding-distribution statistics")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    _add_seed(p)

    p = sub.add_parser("report", help="assemble the cross-system table")
    p.add_argument("--evals", required=True, help="directory of <system>.csv files")
    p.add_argument("--out-md", required=True)
    p.add_argument("--out-csv", required=True)
    _add_seed(p)

    p = sub.add_parser("pipeline", help="run all stages end to end")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--grammar", default=None)
    p.add_argument("--sizes", default=None)
    p.add_argument("--frameworks", default=None)
    _add_seed(p)

    return parser


# -- command implementations ---------------------------------------------------------


def _cmd_gen_data(args) -> int:
    grammar_text = (
        default_grammar_text() if args.grammar == "default" else Path(args.grammar).read_text()
    )
    grammar = parse_grammar(grammar_text)
    sizes = tuple(int(x) for x in args.sizes.split(","))
    if len(sizes) != 3:
        raise ConfigError("--sizes needs three comma-separated counts")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, val, test = generate_corpus(grammar, args.seed, sizes)
    for split, ds in (("train", train), ("val", val), ("test", test)):
        save_dataset(ds, out / f"{split}.jsonl")
    Vocab.from_grammar(grammar).save(out / "vocab.txt")
    DASchema.from_grammar(grammar).save(out / "schema.json")
    (out / "grammar.txt").write_text(grammar_text)
    print(f"wrote {len(train)}/{len(val)}/{len(test)} instances to {out}")
    return 0


def _train_cfg_from_args(args, default_epochs) -> TrainConfig:
    raw = load_kv_config(args.config) if args.config else {}
    def pick(flag, key, cast, fallback):
        if flag is not None:
            return flag
        if key in raw:
            return cast(raw[key])
        return fallback
    return TrainConfig(
        learning_rate=pick(args.lr, "learning_rate", float, 0.005),
        clip_threshold=pick(args.clip, "clip_threshold", float, 0.5),
        epochs=pick(args.epochs, "epochs", int, default_epochs),
        patience=pick(args.patience, "patience", int, 6),
        seed=args.seed,
    )


def _cmd_train(args, kind) -> int:
    data = Path(args.data)
    vocab = Vocab.load(data / "vocab.txt")
    train = _load_split(data, "train")
    val = _load_split(data, "val")
    raw = load_kv_config(args.config) if args.config else {}
    hidden = args.hidden or int(raw.get("hidden_size", 64))
    embed = args.embed or int(raw.get("embed_size", 32))
    if kind == "gen":
        schema = DASchema.load(data / "schema.json")
        cfg = _train_cfg_from_args(args, default_epochs=30)
        model = train_generator(train, val, cfg, vocab, schema, hidden, embed)
    else:
        cfg = _train_cfg_from_args(args, default_epochs=8)
        model = train_lm(train, val, cfg, vocab, hidden, embed)
    model.save(args.out)
    log_path = Path(args.out).with_suffix(".train_log.csv")
    _write_train_log(model.train_log, log_path)
    last = model.train_log[-1]
    print(
        f"trained {kind}: {len(model.train_log)} epochs, "
        f"best val loss {min(r['val_loss'] for r in model.train_log):.4f} "
        f"(last {last['val_loss']:.4f}); saved to {args.out}"
    )
    return 0


def _cmd_train_mcd(args) -> int:
    data = Path(args.data)
    gen = GeneratorModel.load(args.gen)
    train = _load_split(data, "train")
    index = ReferenceIndex.build(train)
    cfg = imitation.ILConfig(
        framework=args.framework, iterations=args.iterations, beta=args.beta,
        subsample=args.subsample, m=args.m, n=args.n, seed=args.seed,
        meta_epochs=args.meta_epochs, meta_hidden=args.meta_hidden,
    )
    meta, reports, bank = imitation.run_il(
        cfg, train, gen, index,
        sample_log_path=args.sample_log, dump_path=args.dump,
    )
    meta.save(args.out, {"framework": args.framework})
    if args.reports:
        with open(args.reports, "w", encoding="utf-8") as f:
            f.write(imitation.IterationReport.CSV_HEADER + "\n")
            for rep in reports:
                f.write(rep.csv_row() + "\n")
    for rep in reports:
        print(
            f"iteration {rep.iteration} ({rep.framework}): p={rep.p:.4f} "
            f"samples={rep.samples} pos={rep.positive_fraction:.3f} "
            f"safe-set={rep.mean_safe_set_size:.2f}"
        )
    print(f"collected {len(bank)} samples; saved meta-classifier to {args.out}")
    return 0


def _cmd_decode(args) -> int:
    gen = GeneratorModel.load(args.ckpt)
    dataset = _load_split(Path(args.data), args.split)
    lm = GeneratorModel.load(args.lm) if args.lm else None
    meta = MetaModel.load(args.meta) if args.meta else None
    if args.strategy == "mmi" and lm is None:
        raise ConfigError("--strategy mmi requires --lm")
    if args.strategy == "mcd" and meta is None:
        raise ConfigError("--strategy mcd requires --meta")
    cfg = decoding.DecodeConfig(
        strategy=args.strategy, k=args.k, p=args.p, mode=args.mode,
        beam_width=args.width, mmi_lambda=args.mmi_lambda, mmi_g=args.g,
        max_length=args.max_length, pool_size=args.pool, seed=args.seed,
        edge_case=args.edge_case,
    )
    records = decode_split(cfg, dataset, gen, lm, meta)
    write_decode_file(records, args.out)
    print(f"decoded {len(records)} inputs with {args.strategy} -> {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    refs_path = Path(args.refs)
    refs = (
        _load_split(refs_path, args.split)
        if refs_path.is_dir()
        else load_dataset(refs_path, split=args.split)
    )
    records = read_decode_file(args.outputs)
    report = evaluate_decode_records(records, refs)
    with open(args.report, "w", encoding="utf-8") as f:
        f.write(EvalReport.CSV_HEADER + "\n" + report.csv_row() + "\n")
    print(EvalReport.CSV_HEADER)
    print(report.csv_row())
    return 0


def _cmd_sweep(args) -> int:
    gen = GeneratorModel.load(args.ckpt)
    dataset = _load_split(Path(args.data), args.split)
    k_lo, k_hi = (int(x) for x in args.k_range.split(":"))
    p_parts = [float(x) for x in args.p_range.split(":")]
    p_lo, p_hi = p_parts[0], p_parts[1]
    p_step = p_parts[2] if len(p_parts) > 2 else 0.05
    p_values = []
    p = p_lo
    while p <= p_hi + 1e-9:
        p_values.append(round(p, 4))
        p += p_step
    rows = run_sweep(
        dataset, gen, args.seed,
        k_values=tuple(range(k_lo, k_hi + 1)),
        p_values=tuple(p_values),
        modes=tuple(m.strip() for m in args.modes.split(",") if m.strip()),
    )
    write_sweep_csv(rows, args.out)
    print(f"wrote {len(rows)} sweep rows to {args.out}")
    return 0


def _cmd_match_diversity(args) -> int:
    gen = GeneratorModel.load(args.ckpt)
    dataset = _load_split(Path(args.data), args.split)
    result = match_diversity(
        args.target, dataset, gen, args.seed, mode=args.mode, tol=args.tol
    )
    print(
        f"p* = {result.p_star:.6f} achieved 1-SB = {result.achieved:.6f} "
        f"(target {args.target:.6f}, {result.iterations} bisection steps)"
    )
    if args.out:
        cfg = decoding.DecodeConfig(
            strategy="nucleus", p=result.p_star, mode=args.mode, seed=args.seed
        )
        write_decode_file(decode_split(cfg, dataset, gen), args.out)
    return 0


def _cmd_stats(args) -> int:
    gen = GeneratorModel.load(args.ckpt)
    dataset = _load_split(Path(args.data), args.split)
    encs = [encode_mr(inst.mr, gen.schema) for inst in dataset.instances]
    stats = decoding.distribution_stats(encs, gen)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write("\n".join(stats.csv_lines()) + "\n")
    print(
        f"{stats.steps} steps; mean top-1 {stats.mean_rank_probs[0]:.4f}; "
        f"top-1>=0.99 fraction {stats.top1_ge_99_frac:.4f}"
    )
    return 0


def _cmd_report(args) -> int:
    eval_dir = Path(args.evals)
    reports = {}
    for key, _ in SYSTEM_ORDER:
        path = eval_dir / f"{key}.csv"
        reports[key] = EvalReport.from_csv(path.read_text()) if path.exists() else None
    md, csv_text = build_report(reports)
    Path(args.out_md).write_text(md)
    Path(args.out_csv).write_text(csv_text)
    print(md)
    return 0


def _cmd_pipeline(args) -> int:
    overrides = {}
    if args.out:
        overrides["out_dir"] = args.out
    if args.grammar:
        overrides["grammar"] = args.grammar
    if args.sizes:
        overrides["sizes"] = tuple(int(x) for x in args.sizes.split(","))
    if args.frameworks:
        overrides["frameworks"] = tuple(
            f.strip() for f in args.frameworks.split(",") if f.strip()
        )
    overrides["seed"] = args.seed
    if args.config:
        cfg = ExperimentConfig.from_file(args.config, **overrides)
    else:
        cfg = ExperimentConfig(**{**overrides})
    run_pipeline(cfg)
    print(f"pipeline complete; artifacts in {cfg.out_dir}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen-data":
            return _cmd_gen_data(args)
        if args.command == "train-gen":
            return _cmd_train(args, "gen")
        if args.command == "train-lm":
            return _cmd_train(args, "lm")
        if args.command == "train-mcd":
            return _cmd_train_mcd(args)
        if args.command == "decode":
            return _cmd_decode(args)
        if args.command == "evaluate":
            return _cmd_evaluate(args)
        if args.command == "sweep":
            return _cmd_sweep(args)
        if args.command == "match-diversity":
            return _cmd_match_diversity(args)
        if args.command == "stats":
            return _cmd_stats(args)
        if args.command == "report":
            return _cmd_report(args)
        if args.command == "pipeline":
            return _cmd_pipeline(args)
        raise ConfigError(f"unknown command {args.command!r}")
    except StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, RangeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: missing artifact: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # stage-level failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
