"""Seeded simulation study, risk aggregation and external-file fitting.

All randomness lives here. Every replication draws its truth and its data
from streams derived from ``(seed, n, p, r)`` via :class:`numpy.random.SeedSequence`,
so results do not depend on execution order or worker count.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .enforce import MODIFIERS, apply_modifier
from .errors import ContractError, DomainError, EstimationError, InputParseError, NumericError
from .likelihood import Dataset, EstimatePair
from .linalg import is_positive_definite, spectral_decompose
from .solvers import METHODS, SolverConfig, SolverReport, solve

STUDY_GRID = ((50, 5), (50, 25), (100, 10), (300, 30))
ALL_MODIFIERS = ("none",) + tuple(MODIFIERS)
LOSSES = ("frobenius", "stein")
# raw outputs of these methods are dropped from risk averages unless PD
PD_FILTERED = ("SC", "AS")
RESIDUAL_TOL = 1e-8


# --- truths and data ---------------------------------------------------------


def raw_truth(p: int, seed) -> EstimatePair:
    """Unconstrained pair ``(mu, L L^T)`` before enforcement.

    ``mu`` has iid standard normal entries; ``L`` is lower triangular with
    ``N(5, 1)`` diagonal and standard normal entries below it.
    """
    if p < 2:
        raise DomainError("truth generation needs p >= 2")
    rng = np.random.default_rng(seed)
    mu = rng.standard_normal(p)
    L = np.diag(rng.normal(5.0, 1.0, size=p))
    rows, cols = np.tril_indices(p, k=-1)
    L[rows, cols] = rng.standard_normal(rows.size)
    return EstimatePair(mu, L @ L.T)


def generate_truth(p: int, seed) -> EstimatePair:
    """A constrained ground truth: :func:`raw_truth` passed through M1."""
    return apply_modifier("M1", raw_truth(p, seed)).estimate


def sample_dataset(truth: EstimatePair, n: int, seed) -> Dataset:
    """``n`` draws ``mu + Sigma^{1/2} z`` using the symmetric square root."""
    if not is_positive_definite(truth.cov):
        raise ContractError("truth covariance must be positive definite")
    dec = spectral_decompose(truth.cov)
    P = dec.eigenvectors
    root = (P * np.sqrt(dec.eigenvalues)) @ P.T
    z = np.random.default_rng(seed).standard_normal((n, truth.p))
    return Dataset(truth.mean + z @ root)


@dataclass(frozen=True)
class Losses:
    mu: float
    sigma_frob: float
    sigma_stein: float  # nan when the estimate is not PD


def risk_metrics(est: EstimatePair, truth: EstimatePair) -> Losses:
    """Scaled squared errors ``|.|_F^2 / p`` and Stein's loss.

    Stein's loss is ``tr(E) - log|E| - p`` with ``E = Sigma_hat Sigma^{-1}``.
    """
    if est.p != truth.p:
        raise ContractError("estimate and truth dimensions differ")
    p = truth.p
    mu = float(np.sum((est.mean - truth.mean) ** 2) / p)
    frob = float(np.sum((est.cov - truth.cov) ** 2) / p)
    stein = math.nan
    if is_positive_definite(est.cov):
        E = np.linalg.solve(truth.cov, est.cov).T
        sign, logdet = np.linalg.slogdet(E)
        if sign > 0:
            stein = float(np.trace(E) - logdet - p)
    return Losses(mu, frob, stein)


# --- experiment ---------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    grid: tuple[tuple[int, int], ...] = STUDY_GRID
    reps: int = 100
    methods: tuple[str, ...] = ("SMLE", "SC", "AS")
    modifiers: tuple[str, ...] = ("none", "M3-kmeans")
    losses: tuple[str, ...] = LOSSES
    seed: int = 0
    solver: SolverConfig = SolverConfig(keep_trace=False)
    workers: int = 1
    fixed_truth: bool = False

    def __post_init__(self):
        grid = tuple((int(n), int(p)) for n, p in self.grid)
        object.__setattr__(self, "grid", grid)
        for name in ("methods", "modifiers", "losses"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not grid:
            raise ContractError("grid is empty")
        for n, p in grid:
            if n <= p or p < 2:
                raise ContractError(f"grid entry {n}x{p} needs n > p >= 2")
        if self.reps < 1:
            raise ContractError("reps must be >= 1")
        if self.workers < 1:
            raise ContractError("workers must be >= 1")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ContractError(f"unknown methods {bad}; choose from {sorted(METHODS)}")
        bad = [m for m in self.modifiers if m not in ALL_MODIFIERS]
        if bad or not self.modifiers:
            raise ContractError(f"unknown modifiers {bad}; choose from {list(ALL_MODIFIERS)}")
        bad = [x for x in self.losses if x not in LOSSES]
        if bad:
            raise ContractError(f"unknown losses {bad}; choose from {list(LOSSES)}")

    def as_dict(self) -> dict:
        out = asdict(self)
        out["grid"] = [list(g) for g in self.grid]
        return out


def replication_seeds(seed: int, n: int, p: int, r: int, fixed_truth: bool = False):
    """``(truth_seed, data_seed)`` for one replication."""
    truth_ss, data_ss = np.random.SeedSequence([seed, n, p, r]).spawn(2)
    if fixed_truth:
        truth_ss = np.random.SeedSequence([seed, n, p])
    return truth_ss, data_ss


def run_replication(config: ExperimentConfig, n: int, p: int, r: int) -> list[dict]:
    """One replication: every method and modifier on one dataset.

    Returns one record per method. A method that raises without a usable
    estimate gets ``status="failed"``; an iteration that broke down but
    attached its best iterate gets ``status="fallback"`` and is kept.
    """
    truth_seed, data_seed = replication_seeds(config.seed, n, p, r, config.fixed_truth)
    truth = generate_truth(p, truth_seed)
    data = sample_dataset(truth, n, data_seed)
    records = []
    for method in config.methods:
        rec: dict = {"n": n, "p": p, "rep": r, "method": method}
        try:
            report = solve(method, data, config.solver)
            rec["status"] = "ok"
        except NumericError as exc:
            report = exc.report
            rec["status"] = "failed" if report is None else "fallback"
            rec["error"] = f"{type(exc).__name__}: {exc}"
        except EstimationError as exc:
            report = None
            rec["status"] = "failed"
            rec["error"] = f"{type(exc).__name__}: {exc}"
        if report is None:
            records.append(rec)
            continue
        rec.update(_report_summary(report))
        rec["outputs"] = {}
        for mod in config.modifiers:
            rec["outputs"][mod] = _modified_losses(mod, report, truth)
        records.append(rec)
    return records


def _report_summary(report: SolverReport) -> dict:
    return {
        "converged": report.converged,
        "iterations": report.iterations_used,
        "pd": report.pd_flag,
        "h_norm": report.residuals.h_norm,
        "det_gap": report.residuals.det_gap,
    }


def _modified_losses(mod: str, report: SolverReport, truth: EstimatePair) -> dict:
    if mod == "none":
        est = report.estimate
        res = report.residuals
    else:
        try:
            out = apply_modifier(mod, report.estimate)
        except EstimationError as exc:
            return {"ok": False, "error": f"{type(exc).__name__}: {exc}"}
        est, res = out.estimate, out.residuals
        if not res.satisfied(RESIDUAL_TOL):
            return {"ok": False, "error": f"residual check failed: {res.as_dict()}"}
    loss = risk_metrics(est, truth)
    return {
        "ok": True,
        "pd": is_positive_definite(est.cov),
        "mu_loss": loss.mu,
        "sigma_frob": loss.sigma_frob,
        "sigma_stein": loss.sigma_stein,
        "h_norm": res.h_norm,
        "det_gap": res.det_gap,
    }


RISK_COLUMNS = (
    "method", "n", "p", "modifier", "mu_risk", "sigma_frob_risk",
    "sigma_stein_risk", "pd_count", "used_reps",
)


@dataclass
class RiskRow:
    method: str
    n: int
    p: int
    modifier: str
    mu_risk: float
    sigma_frob_risk: float
    sigma_stein_risk: float
    pd_count: int
    used_reps: int
    excluded: int
    failed: int
    converged: int
    reps: int


@dataclass
class RiskTable:
    """Aggregated risks, one row per ``(method, n, p, modifier)``.

    Rows are paired: for a given method every modifier row averages over the
    same replications, namely those with a usable raw estimate that passed
    the PD filter (applied to SC and AS only).
    """

    config: ExperimentConfig
    rows: list[RiskRow] = field(default_factory=list)
    runs: list[dict] = field(default_factory=list)

    def row(self, method: str, n: int, p: int, modifier: str = "none") -> RiskRow:
        for r in self.rows:
            if (r.method, r.n, r.p, r.modifier) == (method, n, p, modifier):
                return r
        raise KeyError((method, n, p, modifier))

    @property
    def failures(self) -> int:
        return sum(1 for rec in self.runs if rec["status"] == "failed")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RISK_COLUMNS)
        for r in self.rows:
            w.writerow([
                r.method, r.n, r.p, r.modifier, _fmt(r.mu_risk), _fmt(r.sigma_frob_risk),
                _fmt(r.sigma_stein_risk), r.pd_count, r.used_reps,
            ])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {"config": self.config.as_dict(), "rows": [asdict(r) for r in self.rows]}
        return json.dumps(_nan_to_none(doc), indent=2)

    def runs_jsonl(self) -> str:
        return "".join(json.dumps(_nan_to_none(rec)) + "\n" for rec in self.runs)

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "risks.csv": self.to_csv(),
            "risks.json": self.to_json(),
            "runs.jsonl": self.runs_jsonl(),
        }
        for name, text in paths.items():
            (out / name).write_text(text)
        return {name: str(out / name) for name in paths}


def _fmt(x: float) -> str:
    return "nan" if x is None or not math.isfinite(x) else f"{x:.6g}"


def _nan_to_none(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_nan_to_none(v) for v in obj]
    return obj


def _mean(values) -> float:
    vals = [v for v in values if v is not None and math.isfinite(v)]
    return math.fsum(vals) / len(vals) if vals else math.nan


def aggregate(config: ExperimentConfig, runs: list[dict]) -> RiskTable:
    table = RiskTable(config, runs=runs)
    for n, p in config.grid:
        for method in config.methods:
            recs = sorted(
                (rec for rec in runs if rec["n"] == n and rec["p"] == p and rec["method"] == method),
                key=lambda rec: rec["rep"],
            )
            failed = sum(rec["status"] == "failed" for rec in recs)
            usable = [rec for rec in recs if rec["status"] != "failed"]
            converged = sum(bool(rec.get("converged")) for rec in usable)
            if method in PD_FILTERED:
                kept = [rec for rec in usable if rec["pd"]]
            else:
                kept = usable
            for mod in config.modifiers:
                outs = [rec["outputs"][mod] for rec in kept]
                good = [o for o in outs if o["ok"]]
                if mod == "none":
                    pd_count = sum(bool(rec["pd"]) for rec in usable)
                else:
                    pd_count = sum(bool(o["pd"]) for o in good)
                table.rows.append(RiskRow(
                    method=method, n=n, p=p, modifier=mod,
                    mu_risk=_mean(o["mu_loss"] for o in good),
                    sigma_frob_risk=_mean(o["sigma_frob"] for o in good) if "frobenius" in config.losses else math.nan,
                    sigma_stein_risk=_mean(o["sigma_stein"] for o in good) if "stein" in config.losses else math.nan,
                    pd_count=pd_count,
                    used_reps=len(good),
                    excluded=len(recs) - len(good),
                    failed=failed,
                    converged=converged,
                    reps=config.reps,
                ))
    return table


def _work(args):
    config, n, p, r = args
    return run_replication(config, n, p, r)


def run_experiment(config: ExperimentConfig) -> RiskTable:
    """Run every ``(n, p, replication)`` and aggregate.

    With ``workers > 1`` replications run in a process pool; results are
    collected in submission order, so the table is identical for any worker
    count.
    """
    items = [(config, n, p, r) for n, p in config.grid for r in range(config.reps)]
    if config.workers == 1:
        batches = [_work(it) for it in items]
    else:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            batches = list(pool.map(_work, items, chunksize=max(1, len(items) // (4 * config.workers))))
    runs = [rec for batch in batches for rec in batch]
    return aggregate(config, runs)


# --- fitting an external file ------------------------------------------------------


def read_matrix(path) -> np.ndarray:
    """Parse a numeric CSV into an ``n x p`` array.

    A first row with any non-numeric field is taken as a header. Blank lines
    are skipped. Errors name the 1-based line and column.
    """
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputParseError(f"cannot read {path}: {exc}") from exc
    rows: list[list[float]] = []
    width = None
    for lineno, fields in enumerate(csv.reader(io.StringIO(text)), start=1):
        fields = [f.strip() for f in fields]
        if not fields or all(f == "" for f in fields):
            continue
        try:
            values = [float(f) for f in fields]
        except ValueError:
            if not rows and lineno == _first_content_line(text):
                continue  # header
            col = next(i for i, f in enumerate(fields, start=1) if not _is_float(f))
            raise InputParseError(f"non-numeric value {fields[col - 1]!r}", lineno, col) from None
        bad = [i for i, v in enumerate(values, start=1) if not math.isfinite(v)]
        if bad:
            raise InputParseError("non-finite value", lineno, bad[0])
        if width is None:
            width = len(values)
        elif len(values) != width:
            raise InputParseError(f"expected {width} fields, found {len(values)}", lineno)
        rows.append(values)
    if not rows:
        raise InputParseError(f"{path} contains no data rows")
    return np.array(rows)


def _is_float(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def _first_content_line(text: str) -> int:
    for i, line in enumerate(text.splitlines(), start=1):
        if line.strip():
            return i
    return 0


def fit_file(
    path,
    method: str = "AS",
    modifier: str = "none",
    config: SolverConfig = SolverConfig(),
) -> dict:
    """Fit one data file and return a JSON-ready report.

    The ``"solver"`` entry is the raw solver report; ``"modified"`` is present
    when a modifier other than ``"none"`` is requested and succeeds. ``status``
    is ``"ok"``, ``"fallback"`` (the solver broke down and its best iterate is
    reported) or ``"modifier_failed"``.
    """
    if modifier not in ALL_MODIFIERS:
        raise ContractError(f"unknown modifier {modifier!r}; choose from {list(ALL_MODIFIERS)}")
    X = read_matrix(path)
    n, p = X.shape
    if n <= p:
        raise DomainError(f"need more rows than columns, got {n}x{p}")
    doc: dict = {"input": str(path), "n": n, "p": p, "method": method.upper(), "modifier": modifier}
    try:
        report = solve(method, X, config)
        doc["status"] = "ok"
    except NumericError as exc:
        if exc.report is None:
            raise
        report = exc.report
        doc["status"] = "fallback"
        doc["error"] = f"{type(exc).__name__}: {exc}"
    doc["solver"] = report.as_dict()
    if modifier != "none":
        try:
            doc["modified"] = apply_modifier(modifier, report.estimate).as_dict()
        except EstimationError as exc:
            doc["status"] = "modifier_failed"
            doc["modifier_error"] = f"{type(exc).__name__}: {exc}"
    return doc


def write_json(doc: dict, path) -> None:
    Path(path).write_text(json.dumps(_nan_to_none(doc), indent=2))


# --- invariant self-check ------------------------------------------------------


@dataclass(frozen=True)
class CheckResult:
    name: str
    trials: int
    failures: int
    worst: float

    @property
    def passed(self) -> bool:
        return self.failures == 0


def _random_pair(rng: np.random.Generator, p: int) -> EstimatePair:
    A = rng.standard_normal((p, p))
    return EstimatePair(rng.standard_normal(p), A @ A.T + 0.1 * np.eye(p))


def run_checks(trials: int = 200, seed: int = 0, max_p: int = 12) -> list[CheckResult]:
    """Run the library invariants on random instances.

    Covers modifier exactness, the closed-form rank-two spectrum, the
    single-negative-eigenvalue repair and the score against finite
    differences of the log-likelihood.
    """
    from .likelihood import log_likelihood, score
    from .linalg import rank_two_eigenvalues, repair_positive_definite

    rng = np.random.default_rng(seed)
    results = []

    fails, worst = 0, 0.0
    for _ in range(trials):
        pre = _random_pair(rng, int(rng.integers(2, max_p + 1)))
        for name in MODIFIERS:
            out = apply_modifier(name, pre)
            r = out.residuals
            w = max(r.h_norm / max(1.0, r.mean_norm), r.det_gap)
            worst = max(worst, w)
            fails += (w > RESIDUAL_TOL) or not out.pd_flag
    results.append(CheckResult("modifier constraints", trials * len(MODIFIERS), fails, worst))

    fails, worst = 0, 0.0
    for _ in range(trials):
        p = int(rng.integers(2, max_p + 1))
        a, b = rng.standard_normal(p), rng.standard_normal(p)
        got = np.sort(rank_two_eigenvalues(a, b))
        ev = np.linalg.eigvalsh(np.outer(a, b) + np.outer(b, a))
        ref = np.array([ev[0], ev[-1]])
        w = float(np.max(np.abs(got - ref)) / max(1.0, np.abs(ref).max()))
        worst = max(worst, w)
        fails += w > 1e-10
    results.append(CheckResult("rank-two eigenvalues", trials, fails, worst))

    fails, worst = 0, 0.0
    for _ in range(trials):
        pre = _random_pair(rng, int(rng.integers(2, max_p + 1)))
        a, b = rng.standard_normal(pre.p), rng.standard_normal(pre.p)
        M = pre.cov + np.outer(a, b) + np.outer(b, a)
        n_neg = int(np.sum(np.linalg.eigvalsh(M) <= 0))
        ok = n_neg <= 1 and is_positive_definite(repair_positive_definite(M))
        worst = max(worst, float(n_neg))
        fails += not ok
    results.append(CheckResult("rank-two repair", trials, fails, worst))

    fails, worst = 0, 0.0
    n_fd = max(1, trials // 10)
    for _ in range(n_fd):
        p = int(rng.integers(2, 5))
        X = rng.standard_normal((int(rng.integers(p + 2, 20)), p))
        est = _random_pair(rng, p)
        g_mu, _ = score(est, X)
        h = 1e-6
        fd = np.array([
            (log_likelihood(EstimatePair(est.mean + h * e, est.cov), X)
             - log_likelihood(EstimatePair(est.mean - h * e, est.cov), X)) / (2 * h)
            for e in np.eye(p)
        ])
        w = float(np.max(np.abs(fd - g_mu)) / max(1.0, np.abs(g_mu).max()))
        worst = max(worst, w)
        fails += w > 1e-5
    results.append(CheckResult("mean score vs finite differences", n_fd, fails, worst))
    return results
