"""Group-based OOD detection with score KDEs and a KL statistic.

The in-distribution scores define a reference density.  Test samples are
partitioned into disjoint groups; each group gets its own KDE and the KL
divergence from the reference is estimated by Monte Carlo at the group's
own points.  Large KL means the group looks out-of-distribution.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import metrics
from .seeding import make_rng

DENSITY_FLOOR = 1e-12
LOG_FLOOR = math.log(DENSITY_FLOOR)
_LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


@dataclass(frozen=True)
class KdeModel:
    points: np.ndarray  # sorted ascending
    bandwidth: float

    def __post_init__(self):
        if self.points.size == 0:
            raise ValueError("KDE needs at least one point")
        if not self.bandwidth > 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")


def silverman_bandwidth(x: np.ndarray) -> float:
    n = x.size
    sigma = float(np.std(x, ddof=1))
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sigma, (q75 - q25) / 1.34)
    return max(0.9 * spread * n ** -0.2, 1e-3 * float(x.max() - x.min()), 1e-6)


def fit_kde(scores) -> KdeModel:
    """Gaussian KDE with a Silverman bandwidth and a degeneracy floor."""
    x = np.sort(np.asarray(scores, dtype=np.float64).ravel())
    if x.size < 2:
        raise ValueError(f"need at least 2 scores to fit a KDE, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise ValueError("scores must be finite")
    return KdeModel(x, silverman_bandwidth(x))


def kde_log_pdf(model: KdeModel, x) -> np.ndarray | float:
    """Natural-log density, floored at log(1e-12).  Scalar in, scalar out."""
    xs = np.asarray(x, dtype=np.float64)
    u = (xs.reshape(-1, 1) - model.points[None, :]) / model.bandwidth
    lp = logsumexp(-0.5 * u * u, axis=1) - math.log(model.points.size * model.bandwidth) - _LOG_SQRT_2PI
    lp = np.maximum(lp, LOG_FLOOR)
    return float(lp[0]) if xs.ndim == 0 else lp.reshape(xs.shape)


def kde_curve(model: KdeModel, n: int = 200, pad: float = 5.0) -> tuple[np.ndarray, np.ndarray]:
    """Grid over [min - pad*h, max + pad*h] and the density on it, for plotting."""
    h = model.bandwidth
    grid = np.linspace(model.points[0] - pad * h, model.points[-1] + pad * h, n)
    return grid, np.exp(kde_log_pdf(model, grid))


def kl_group(test_scores, id_model: KdeModel) -> float:
    """Monte-Carlo KL(test || id) evaluated at the group's own points."""
    test_model = fit_kde(test_scores)
    pts = test_model.points
    return float(np.mean(kde_log_pdf(test_model, pts) - kde_log_pdf(id_model, pts)))


def make_groups(n: int, gs: int, seed: int, trials: int, *stream) -> list[list[np.ndarray]]:
    """Per trial, a seeded shuffle of ``range(n)`` cut into floor(n/gs) disjoint groups."""
    if gs < 2:
        raise ValueError(f"group size must be >= 2, got {gs}")
    if n < gs:
        raise ValueError(f"cannot form groups of {gs} from {n} samples")
    n_groups = n // gs
    out = []
    for t in range(trials):
        order = make_rng(seed, "groups", *stream, t).permutation(n)
        out.append(list(order[:n_groups * gs].reshape(n_groups, gs)))
    return out


@dataclass
class DetectionConfig:
    group_size: int = 10
    threshold: float | None = None
    trials: int = 5
    testset_draws: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError(f"group_size must be >= 2, got {self.group_size}")
        if self.trials < 1:
            raise ValueError(f"trials must be >= 1, got {self.trials}")
        if self.testset_draws < 1:
            raise ValueError(f"testset_draws must be >= 1, got {self.testset_draws}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


@dataclass
class GroupRecord:
    trial: int
    group: int
    origin: str  # "id" or "ood"
    kl: float
    decision: bool | None


@dataclass
class RunMetrics:
    trial: int
    auroc: float
    aupr: float
    fpr95: float


@dataclass
class DetectionReport:
    config: DetectionConfig
    id_bandwidth: float
    groups: list[GroupRecord] = field(default_factory=list)
    runs: list[RunMetrics] = field(default_factory=list)

    def summary(self) -> dict:
        out = {}
        for key in ("auroc", "aupr", "fpr95"):
            vals = np.array([getattr(r, key) for r in self.runs])
            out[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
        return out

    @property
    def auroc(self) -> float:
        return self.summary()["auroc"]["mean"]

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "id_bandwidth": self.id_bandwidth,
            "summary": self.summary(),
            "runs": [asdict(r) for r in self.runs],
            "groups": [asdict(g) for g in self.groups],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("trial,group,origin,kl,decision\n")
        for g in self.groups:
            dec = "" if g.decision is None else ("ood" if g.decision else "id")
            buf.write(f"{g.trial},{g.group},{g.origin},{g.kl!r},{dec}\n")
        return buf.getvalue()


def run_detection(id_scores, test_id, test_ood, cfg: DetectionConfig = DetectionConfig()) -> DetectionReport:
    """Evaluate group detection: OOD groups are positives, held-out ID groups negatives.

    Each of ``testset_draws * trials`` runs regroups both pools with its own
    seeded shuffle; metrics are reported per run and as mean and std.
    """
    id_scores = np.asarray(id_scores, dtype=np.float64)
    test_id = np.asarray(test_id, dtype=np.float64)
    test_ood = np.asarray(test_ood, dtype=np.float64)
    if id_scores.size == 0 or test_id.size == 0 or test_ood.size == 0:
        raise ValueError("ID scores and both test pools must be non-empty")
    model = fit_kde(id_scores)
    report = DetectionReport(cfg, model.bandwidth)
    gs = cfg.group_size
    for d in range(cfg.testset_draws):
        id_groups = make_groups(test_id.size, gs, cfg.seed, cfg.trials, "draw", d, "id")
        ood_groups = make_groups(test_ood.size, gs, cfg.seed, cfg.trials, "draw", d, "ood")
        for t in range(cfg.trials):
            run = d * cfg.trials + t
            kls = {}
            for origin, pool, groups in (("id", test_id, id_groups[t]), ("ood", test_ood, ood_groups[t])):
                kls[origin] = np.array([kl_group(pool[idx], model) for idx in groups])
                for gi, k in enumerate(kls[origin]):
                    dec = None if cfg.threshold is None else bool(k > cfg.threshold)
                    report.groups.append(GroupRecord(run, gi, origin, float(k), dec))
            report.runs.append(RunMetrics(
                run,
                metrics.auroc(kls["ood"], kls["id"]),
                metrics.aupr(kls["ood"], kls["id"]),
                metrics.fpr_at_tpr(kls["ood"], kls["id"], 0.95),
            ))
    return report


def format_report(report: DetectionReport) -> str:
    s = report.summary()
    cfg = report.config
    lines = [
        f"group size {cfg.group_size}, {cfg.testset_draws} test-set draws x {cfg.trials} trials, seed {cfg.seed}",
        f"ID KDE bandwidth {report.id_bandwidth:.6g}",
    ]
    for key, label in (("auroc", "AUROC"), ("aupr", "AUPR"), ("fpr95", "FPR@95TPR")):
        lines.append(f"{label:10s} {100 * s[key]['mean']:6.2f} +- {100 * s[key]['std']:.2f}")
    if cfg.threshold is not None:
        flagged = {o: [g.decision for g in report.groups if g.origin == o] for o in ("id", "ood")}
        lines.append(
            f"threshold {cfg.threshold:g}: {sum(flagged['ood'])}/{len(flagged['ood'])} OOD groups flagged, "
            f"{sum(flagged['id'])}/{len(flagged['id'])} ID groups flagged"
        )
    return "\n".join(lines) + "\n"
