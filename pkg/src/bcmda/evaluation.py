"""Per-domain evaluation of a trained student."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .metrics import class_metrics
from .synthdata import Dataset, load_dataset
from .trainer import TrainConfig, infer, load_checkpoint

log = logging.getLogger(__name__)

METRICS = ("dice", "jaccard", "hd95", "asd")
REPORT_FIELDS = ["domain", "class", "dice", "jaccard", "hd95", "asd", "n"]


@dataclass
class MetricReport:
    """Rows keyed by (domain, class); the ``mean`` domain averages the domains."""

    per_domain: dict[int, dict[int, dict[str, float]]]
    counts: dict[int, int]
    fingerprint: str = ""
    missing: list[int] = field(default_factory=list)

    def domain_summary(self, domain: int) -> dict[str, float]:
        """Foreground classes averaged for one domain."""
        rows = self.per_domain[domain].values()
        return {m: float(np.mean([r[m] for r in rows])) for m in METRICS}

    def average(self) -> dict[str, float]:
        doms = sorted(self.per_domain)
        return {m: float(np.mean([self.domain_summary(d)[m] for d in doms])) for m in METRICS}

    def rows(self) -> list[dict]:
        out = []
        classes = sorted({c for d in self.per_domain.values() for c in d})
        for d in sorted(self.per_domain):
            for c in classes:
                out.append({"domain": d, "class": c, **self.per_domain[d][c], "n": self.counts[d]})
            out.append({"domain": d, "class": "mean", **self.domain_summary(d), "n": self.counts[d]})
        out.append({"domain": "mean", "class": "mean", **self.average(), "n": sum(self.counts.values())})
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
            w.writeheader()
            for r in self.rows():
                w.writerow(r)

    def table(self) -> str:
        lines = [f"{'domain':>8} {'class':>6} {'dice':>7} {'jaccard':>8} {'hd95':>7} {'asd':>7} {'n':>5}"]
        for r in self.rows():
            lines.append(
                f"{r['domain']!s:>8} {r['class']!s:>6} {r['dice']:7.4f} {r['jaccard']:8.4f} "
                f"{r['hd95']:7.2f} {r['asd']:7.2f} {r['n']:5d}"
            )
        if self.missing:
            lines.append(f"missing domains (no test samples): {self.missing}")
        if self.fingerprint:
            lines.append(f"config {self.fingerprint}")
        return "\n".join(lines)


def config_fingerprint(cfg: TrainConfig) -> str:
    return hashlib.sha256(json.dumps(asdict(cfg), sort_keys=True).encode()).hexdigest()[:12]


def evaluate_params(
    student,
    cfg: TrainConfig,
    ds: Dataset,
    domains=None,
    split: str = "test",
    batch: int = 16,
    pooled_hd95: bool = False,
) -> MetricReport:
    """Per-domain foreground metrics of the student's linear-head predictions.

    Domains without samples in ``split`` are reported as missing and left out
    of the average.
    """
    domains = ds.domains if domains is None else domains
    per_domain, counts, missing = {}, {}, []
    for d in domains:
        sub = ds.select(domain=d, split=split)
        if len(sub) == 0:
            log.warning("domain %s has no %s samples; excluded from the average", d, split)
            missing.append(d)
            continue
        acc: dict[int, dict[str, list[float]]] = {}
        for start in range(0, len(sub), batch):
            samples = [sub[i] for i in range(start, min(start + batch, len(sub)))]
            preds = infer(student, np.stack([s.image for s in samples]), cfg)
            for s, pred in zip(samples, preds):
                for c, vals in class_metrics(pred, s.mask, cfg.num_classes, pooled_hd95).items():
                    slot = acc.setdefault(c, {m: [] for m in METRICS})
                    for m in METRICS:
                        slot[m].append(vals[m])
        per_domain[d] = {c: {m: float(np.mean(v[m])) for m in METRICS} for c, v in acc.items()}
        counts[d] = len(sub)
    return MetricReport(per_domain, counts, config_fingerprint(cfg), missing)


def evaluate(checkpoint, manifest, domains=None, split: str = "test", pooled_hd95: bool = False) -> MetricReport:
    state, cfg = load_checkpoint(checkpoint)
    return evaluate_params(state.student, cfg, load_dataset(manifest), domains, split, pooled_hd95=pooled_hd95)
