"""Command-line pipeline: ingestion -> scoring -> congruity -> clustering -> AFM.

Stage outputs are plain files so intermediates can be inspected or replaced
(e.g. dropping an expert KC model into the eval stage). Every command is
deterministic given (config, cache contents, seed); reruns produce
byte-identical outputs.

Exit codes: 0 success, 2 input/config error, 3 backend/transport error,
4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import yaml

from .afm import FitConfig, compare, cross_validate, save_reports
from .clustering import (
    agglomerate,
    cut,
    save_dendrogram,
    select_k,
    silhouette,
    to_distance,
    to_kc_model,
)
from .congruity import DEFAULT_SEP, congruity_matrix, load_congruity, save_congruity
from .corpus import load_kc_model, load_question_bank, load_step_log, save_kc_model
from .errors import InputError, KCForgeError, ScoringError
from .fileio import atomic_write_text, fmt17
from .scoring import BigramScorer, CachedScorer, HttpScorer

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_BACKEND = 3
EXIT_INTERNAL = 4

ENDPOINT_ENV = "KCFORGE_ENDPOINT"


@dataclass
class PipelineConfig:
    """Everything a run needs; file values are overridden by flags (flags win)."""

    bank: str | None = None
    steps: str | None = None
    kc_models: tuple[str, ...] = ()
    matrix: str | None = None
    cache: str | None = None
    out: str = "out"
    endpoint: str | None = None
    mock_corpus: str | None = None
    sep: str = DEFAULT_SEP
    k: int | None = None
    k_range: tuple[int, int] | None = None
    k_policy: str = "silhouette"
    folds: int = 10
    seed: int = 0
    lambda_theta: float = 0.1
    parallelism: int = 1
    retries: int = 3

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    def fit_config(self) -> FitConfig:
        return FitConfig(lambda_theta=self.lambda_theta, seed=self.seed)

    def snapshot(self) -> dict:
        data = asdict(self)
        data["kc_models"] = list(self.kc_models)
        data["k_range"] = list(self.k_range) if self.k_range else None
        return data


def _parse_k_range(text: str) -> tuple[int, int]:
    try:
        lo, hi = text.split("..")
        return int(lo), int(hi)
    except ValueError:
        raise InputError(f"k range must look like '2..8', got {text!r}") from None


def load_config_file(path: str | Path) -> PipelineConfig:
    """Read a YAML config; relative paths resolve against the file's directory."""
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except OSError as e:
        raise InputError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise InputError(f"{path}: invalid YAML: {e}") from e
    if not isinstance(doc, dict):
        raise InputError(f"{path}: config must be a mapping")
    known = {f.name for f in fields(PipelineConfig)}
    unknown = set(doc) - known
    if unknown:
        raise InputError(f"{path}: unknown config keys {sorted(unknown)}")

    base = path.parent

    def respath(value):
        return str(base / value) if value is not None else None

    cfg = PipelineConfig()
    for name in known & set(doc):
        value = doc[name]
        if name in ("bank", "steps", "matrix", "cache", "out", "endpoint",
                    "mock_corpus") and value is not None and not isinstance(value, str):
            raise InputError(f"{path}: {name} must be a string")
        if name == "kc_models":
            if not isinstance(value, list):
                raise InputError(f"{path}: kc_models must be a list of paths")
            value = tuple(respath(v) for v in value)
        elif name in ("bank", "steps", "matrix", "cache", "out", "mock_corpus"):
            value = respath(value)
        elif name == "k_range":
            if isinstance(value, str):
                value = _parse_k_range(value)
            elif isinstance(value, list) and len(value) == 2:
                value = (int(value[0]), int(value[1]))
            else:
                raise InputError(f"{path}: k_range must be 'a..b' or [a, b]")
        cfg = replace(cfg, **{name: value})
    return cfg


def merge_flags(cfg: PipelineConfig, args: argparse.Namespace) -> PipelineConfig:
    """Apply command-line flags on top of the config file; flags win.

    A scorer flag replaces the whole scorer choice (so --endpoint silences a
    configured mock corpus and vice versa); likewise --k versus --k-range.
    """
    simple = ("bank", "steps", "matrix", "cache", "out", "folds", "seed",
              "lambda_theta", "parallelism", "retries", "k_policy")
    for name in simple:
        value = getattr(args, name, None)
        if value is not None:
            cfg = replace(cfg, **{name: value})
    if getattr(args, "kc_model", None):
        cfg = replace(cfg, kc_models=tuple(args.kc_model))
    if getattr(args, "sep", None) is not None:
        cfg = replace(cfg, sep=args.sep.encode("ascii", "backslashreplace")
                      .decode("unicode_escape"))
    if getattr(args, "endpoint", None) is not None:
        cfg = replace(cfg, endpoint=args.endpoint, mock_corpus=None)
    if getattr(args, "mock_corpus", None) is not None:
        cfg = replace(cfg, mock_corpus=args.mock_corpus, endpoint=None)
    if getattr(args, "k", None) is not None:
        cfg = replace(cfg, k=args.k, k_range=None)
    if getattr(args, "k_range", None) is not None:
        cfg = replace(cfg, k_range=_parse_k_range(args.k_range), k=None)
    if cfg.endpoint is None and cfg.mock_corpus is None and os.environ.get(ENDPOINT_ENV):
        cfg = replace(cfg, endpoint=os.environ[ENDPOINT_ENV])
    return cfg


def _require(cfg: PipelineConfig, *names: str) -> None:
    for name in names:
        value = getattr(cfg, name)
        if value is None or (name == "kc_models" and not value):
            flag = "--kc-model" if name == "kc_models" else "--" + name.replace("_", "-")
            raise InputError(
                f"missing required input {name}: set it in the config or pass {flag}"
            )
        if name in ("bank", "steps", "mock_corpus") and not Path(value).exists():
            raise InputError(f"{name} file not found: {value}")
    if "kc_models" in names:
        for p in cfg.kc_models:
            if not Path(p).exists():
                raise InputError(f"KC model file not found: {p}")


def _require_scorer(cfg: PipelineConfig) -> None:
    have = [x for x in (cfg.endpoint, cfg.mock_corpus) if x is not None]
    if len(have) != 1:
        raise InputError(
            "exactly one scorer must be configured: --endpoint <url> or "
            f"--mock-corpus <path> (or the {ENDPOINT_ENV} environment variable)"
        )
    if cfg.mock_corpus is not None and not Path(cfg.mock_corpus).exists():
        raise InputError(f"mock_corpus file not found: {cfg.mock_corpus}")


def _require_k_policy(cfg: PipelineConfig, allow_afm: bool) -> None:
    if (cfg.k is None) == (cfg.k_range is None):
        raise InputError("exactly one k policy is required: --k <int> or "
                         "--k-range <a..b> [--k-policy silhouette|afm]")
    if cfg.k_policy not in ("silhouette", "afm"):
        raise InputError(f"unknown k policy {cfg.k_policy!r}")
    if cfg.k_range is not None and cfg.k_policy == "afm" and not allow_afm:
        raise InputError("the afm k policy needs student data; use it with "
                         "'pipeline' or 'sweep-k'")


def build_scorer(cfg: PipelineConfig) -> CachedScorer:
    if cfg.mock_corpus is not None:
        try:
            text = Path(cfg.mock_corpus).read_text(encoding="utf-8")
        except OSError as e:
            raise InputError(f"cannot read mock corpus {cfg.mock_corpus}: {e}") from e
        inner = BigramScorer(text)
    else:
        assert cfg.endpoint is not None
        inner = HttpScorer(cfg.endpoint, retries=cfg.retries)
    cache_path = Path(cfg.cache) if cfg.cache else cfg.out_dir / "scores.cache"
    return CachedScorer(inner, cache_path)


def _fresh(output: Path, inputs: list[Path]) -> bool:
    if not output.exists():
        return False
    out_mtime = output.stat().st_mtime
    return all(p.exists() and p.stat().st_mtime <= out_mtime for p in inputs)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_congruity(cfg: PipelineConfig) -> int:
    _require(cfg, "bank")
    _require_scorer(cfg)
    bank = load_question_bank(cfg.bank)
    scorer = build_scorer(cfg)
    matrix = congruity_matrix(bank, scorer, sep=cfg.sep, parallelism=cfg.parallelism)
    out_path = cfg.out_dir / "congruity.csv"
    save_congruity(matrix, out_path)
    calls = scorer.hits + scorer.misses
    rate = scorer.hits / calls if calls else 0.0
    print(f"congruity: n={len(bank)} scoring_calls={calls} "
          f"backend_calls={scorer.misses} cache_hit_rate={rate:.3f} -> {out_path}")
    return EXIT_OK


def _resolve_k(cfg: PipelineConfig, dist, dend, log=None, bank=None) -> int:
    """Pick k per the configured policy; afm policy sweeps pooled CV RMSE."""
    n = len(dist)
    if cfg.k is not None:
        if not 1 <= cfg.k <= n:
            raise InputError(f"fixed k={cfg.k} out of range [1, {n}]")
        return cfg.k
    assert cfg.k_range is not None
    if cfg.k_policy == "silhouette":
        return select_k(dist, *cfg.k_range)
    assert log is not None and bank is not None
    best_k, best_rmse = None, None
    for k, report in _sweep(cfg, dist, dend, log, bank):
        if best_rmse is None or report.cv_rmse < best_rmse:
            best_k, best_rmse = k, report.cv_rmse
    assert best_k is not None
    return best_k


def _sweep(cfg: PipelineConfig, dist, dend, log, bank):
    lo, hi = cfg.k_range
    n = len(dist)
    if not 1 <= lo <= hi <= n:
        raise InputError(f"k range [{lo}, {hi}] out of range for {n} questions")
    for k in range(lo, hi + 1):
        model = to_kc_model(cut(dend, k), bank, dist, name=f"clustered_k{k}")
        yield k, cross_validate(log, model, bank, cfg.folds, cfg.fit_config())


def cmd_cluster(cfg: PipelineConfig) -> int:
    _require(cfg, "bank")
    _require_k_policy(cfg, allow_afm=False)
    matrix_path = Path(cfg.matrix) if cfg.matrix else cfg.out_dir / "congruity.csv"
    if not matrix_path.exists():
        raise InputError(f"congruity matrix not found: {matrix_path}")
    bank = load_question_bank(cfg.bank)
    matrix = load_congruity(matrix_path)
    if matrix.ids != bank.ids:
        raise InputError("congruity matrix ids do not match the bank")
    dist = to_distance(matrix)
    dend = agglomerate(dist)
    k = _resolve_k(cfg, dist, dend)
    part = cut(dend, k)
    model = to_kc_model(part, bank, dist, name=f"clustered_k{k}")
    model_path = cfg.out_dir / "kc_model.csv"
    save_kc_model(model, model_path)
    save_dendrogram(dend, cfg.out_dir / "dendrogram.txt")
    sil = silhouette(dist, part) if 2 <= k <= len(dist) - 1 else float("nan")
    print(f"cluster: k={k} silhouette={sil:.6f} -> {model_path}")
    return EXIT_OK


def cmd_eval(cfg: PipelineConfig) -> int:
    _require(cfg, "bank", "steps", "kc_models")
    bank = load_question_bank(cfg.bank)
    log = load_step_log(cfg.steps)
    models = [load_kc_model(p, bank) for p in cfg.kc_models]
    reports = compare(models, log, bank, cfg.folds, cfg.fit_config())
    report_path = cfg.out_dir / "report.csv"
    save_reports(reports, report_path)
    for r in reports:
        print(f"eval: {r.model_name} n_kcs={r.n_kcs} cv_rmse={r.cv_rmse:.6f} "
              f"train_rmse={r.train_rmse:.6f}")
    print(f"eval: report -> {report_path}")
    return EXIT_OK


def cmd_sweep_k(cfg: PipelineConfig) -> int:
    _require(cfg, "bank", "steps")
    if cfg.k_range is None:
        raise InputError("sweep-k needs --k-range <a..b>")
    matrix_path = Path(cfg.matrix) if cfg.matrix else cfg.out_dir / "congruity.csv"
    if not matrix_path.exists():
        raise InputError(f"congruity matrix not found: {matrix_path}")
    bank = load_question_bank(cfg.bank)
    log = load_step_log(cfg.steps)
    matrix = load_congruity(matrix_path)
    if matrix.ids != bank.ids:
        raise InputError("congruity matrix ids do not match the bank")
    dist = to_distance(matrix)
    dend = agglomerate(dist)
    rows = ["k,n_kcs,cv_rmse,train_rmse"]
    best_k, best_rmse = None, None
    for k, report in _sweep(cfg, dist, dend, log, bank):
        rows.append(f"{k},{report.n_kcs},{fmt17(report.cv_rmse)},{fmt17(report.train_rmse)}")
        print(f"sweep-k: k={k} cv_rmse={report.cv_rmse:.6f}")
        if best_rmse is None or report.cv_rmse < best_rmse:
            best_k, best_rmse = k, report.cv_rmse
    sweep_path = cfg.out_dir / "sweep.csv"
    atomic_write_text(sweep_path, "\n".join(rows) + "\n")
    print(f"sweep-k: best k={best_k} -> {sweep_path}")
    return EXIT_OK


def cmd_pipeline(cfg: PipelineConfig, force: bool) -> int:
    _require(cfg, "bank", "steps")
    _require_scorer(cfg)
    _require_k_policy(cfg, allow_afm=True)
    out = cfg.out_dir
    bank_path = Path(cfg.bank)
    steps_path = Path(cfg.steps)

    congruity_path = out / "congruity.csv"
    stage_inputs = [bank_path]
    if cfg.mock_corpus:
        stage_inputs.append(Path(cfg.mock_corpus))
    if force or not _fresh(congruity_path, stage_inputs):
        cmd_congruity(cfg)
    else:
        print(f"congruity: up to date -> {congruity_path}")

    bank = load_question_bank(cfg.bank)
    matrix = load_congruity(congruity_path)
    if matrix.ids != bank.ids:
        raise InputError("congruity matrix ids do not match the bank; rerun with --force")

    model_path = out / "kc_model.csv"
    if force or not _fresh(model_path, [congruity_path, bank_path]):
        log = load_step_log(cfg.steps)
        dist = to_distance(matrix)
        dend = agglomerate(dist)
        k = _resolve_k(cfg, dist, dend, log=log, bank=bank)
        part = cut(dend, k)
        model = to_kc_model(part, bank, dist, name=f"clustered_k{k}")
        save_kc_model(model, model_path)
        save_dendrogram(dend, out / "dendrogram.txt")
        sil = silhouette(dist, part) if 2 <= k <= len(dist) - 1 else float("nan")
        print(f"cluster: k={k} silhouette={sil:.6f} -> {model_path}")
    else:
        print(f"cluster: up to date -> {model_path}")

    report_path = out / "report.csv"
    eval_inputs = [model_path, steps_path] + [Path(p) for p in cfg.kc_models]
    if force or not _fresh(report_path, eval_inputs):
        log = load_step_log(cfg.steps)
        models = [load_kc_model(model_path, bank, name="clustered")]
        models += [load_kc_model(p, bank) for p in cfg.kc_models]
        reports = compare(models, log, bank, cfg.folds, cfg.fit_config())
        save_reports(reports, report_path)
        for r in reports:
            print(f"eval: {r.model_name} n_kcs={r.n_kcs} cv_rmse={r.cv_rmse:.6f} "
                  f"train_rmse={r.train_rmse:.6f}")
        print(f"eval: report -> {report_path}")
    else:
        print(f"eval: up to date -> {report_path}")

    manifest = {
        "command": "pipeline",
        "config": cfg.snapshot(),
        "model_id": matrix.scorer_model_id,
        "seed": cfg.seed,
    }
    manifest_path = out / "manifest.json"
    atomic_write_text(manifest_path, json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    print(f"pipeline: manifest -> {manifest_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kcforge",
        description="Knowledge-component discovery and evaluation pipeline.",
    )
    from . import __version__

    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, scorer=False, kpolicy=False):
        p.add_argument("--config", help="YAML config file; flags override it")
        p.add_argument("--out", help="output directory (default: out)")
        p.add_argument("--seed", type=int, help="seed for fold dealing (default: 0)")
        p.add_argument("--force", action="store_true",
                       help="recompute pipeline stages even when outputs look up to date")
        p.add_argument("--bank", help="question bank YAML file")
        if scorer:
            p.add_argument("--endpoint", help="logprob endpoint URL "
                           f"(default: ${ENDPOINT_ENV})")
            p.add_argument("--mock-corpus", dest="mock_corpus",
                           help="train the offline bigram mock on this text file")
            p.add_argument("--sep", help=r"context separator, escaped (default: \n\n)")
            p.add_argument("--cache", help="score cache file (default: <out>/scores.cache)")
            p.add_argument("--parallelism", type=int, help="concurrent scoring calls")
            p.add_argument("--retries", type=int,
                           help="attempts per request on transport errors (default: 3)")
        if kpolicy:
            p.add_argument("--k", type=int, help="fixed number of KCs")
            p.add_argument("--k-range", dest="k_range", help="candidate range, e.g. 2..8")
            p.add_argument("--k-policy", dest="k_policy",
                           choices=("silhouette", "afm"),
                           help="how to pick k within --k-range (default: silhouette)")

    p = sub.add_parser("congruity", help="score a bank into a congruity matrix")
    common(p, scorer=True)

    p = sub.add_parser("cluster", help="cluster a congruity matrix into a KC model")
    common(p, kpolicy=True)
    p.add_argument("--matrix", help="congruity CSV (default: <out>/congruity.csv)")

    p = sub.add_parser("eval", help="cross-validate KC models against a step log")
    common(p)
    p.add_argument("--steps", help="student step log CSV")
    p.add_argument("--kc-model", action="append", dest="kc_model",
                   help="KC model CSV (repeatable)")
    p.add_argument("--folds", type=int, help="CV folds (default: 10)")
    p.add_argument("--lambda-theta", dest="lambda_theta", type=float,
                   help="L2 penalty on student proficiency (default: 0.1)")

    p = sub.add_parser("pipeline", help="congruity -> cluster -> eval in one run")
    common(p, scorer=True, kpolicy=True)
    p.add_argument("--steps", help="student step log CSV")
    p.add_argument("--kc-model", action="append", dest="kc_model",
                   help="baseline KC model CSV to evaluate alongside (repeatable)")
    p.add_argument("--folds", type=int, help="CV folds (default: 10)")
    p.add_argument("--lambda-theta", dest="lambda_theta", type=float,
                   help="L2 penalty on student proficiency (default: 0.1)")

    p = sub.add_parser("sweep-k", help="table of pooled CV RMSE per candidate k")
    common(p)
    p.add_argument("--matrix", help="congruity CSV (default: <out>/congruity.csv)")
    p.add_argument("--steps", help="student step log CSV")
    p.add_argument("--k-range", dest="k_range", help="candidate range, e.g. 2..8")
    p.add_argument("--folds", type=int, help="CV folds (default: 10)")
    p.add_argument("--lambda-theta", dest="lambda_theta", type=float,
                   help="L2 penalty on student proficiency (default: 0.1)")

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config_file(args.config) if args.config else PipelineConfig()
        cfg = merge_flags(cfg, args)
        if args.command == "congruity":
            return cmd_congruity(cfg)
        if args.command == "cluster":
            return cmd_cluster(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "pipeline":
            return cmd_pipeline(cfg, force=args.force)
        if args.command == "sweep-k":
            return cmd_sweep_k(cfg)
        raise KCForgeError(f"unknown command {args.command!r}")
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except ScoringError as e:
        print(f"backend error: {e}", file=sys.stderr)
        return EXIT_BACKEND
    except KCForgeError as e:
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as e:  # noqa: BLE001 - map unexpected bugs to exit 4
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
