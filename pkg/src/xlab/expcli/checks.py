"""Directional trend checks over experiment records.

Each check returns a ``CheckResult`` rather than asserting, so the CLI can
print every line and set its exit code, and tests can assert on ``passed``.
"""

from __future__ import annotations

from dataclasses import dataclass

from scipy.stats import spearmanr

from .runner import mean_metric

STRONG, MID, SHALLOW = "strong", "mid", "shallow"
PROBE, FINETUNE = "linear_probe", "full_finetune"


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def _seeds(records, **match):
    return sorted({r.seed for r in records if r.ok and all(getattr(r, k) == v for k, v in match.items())})


def victim_trend(records, budget=500, strategy="random", margin=0.05, min_seeds=5) -> CheckResult:
    """Strong linear-probed victim is stolen with higher agreement than a shallow fine-tuned one."""
    th = dict(thief_spec=STRONG, thief_mode=PROBE, strategy=strategy, budget=budget)
    seeds = _seeds(records, **th)
    strong = mean_metric(records, victim_spec=STRONG, victim_mode=PROBE, **th)
    shallow_ft = mean_metric(records, victim_spec=SHALLOW, victim_mode=FINETUNE, **th)
    chain = [mean_metric(records, victim_spec=s, victim_mode=PROBE, **th) for s in (SHALLOW, MID, STRONG)]
    gap = strong - shallow_ft
    ordered = chain[0] <= chain[1] <= chain[2]
    ok = gap >= margin and ordered and len(seeds) >= min_seeds
    detail = (
        f"strong/probe {strong:.4f} - shallow/finetune {shallow_ft:.4f} = {gap:+.4f} (need >= {margin}); "
        f"probe chain shallow {chain[0]:.4f} <= mid {chain[1]:.4f} <= strong {chain[2]:.4f}: {ordered}; seeds={len(seeds)}"
    )
    return CheckResult("victim-side trend", ok, detail)


def thief_trend(records, budget=500, strategy="random", margin=0.05, min_seeds=5) -> CheckResult:
    """Against the strong victim, a strong thief beats every shallow thief variant present."""
    vic = dict(victim_spec=STRONG, victim_mode=PROBE, strategy=strategy, budget=budget)
    strong = mean_metric(records, thief_spec=STRONG, thief_mode=PROBE, **vic)
    shallow_modes = sorted({r.thief_mode for r in records if r.thief_spec == SHALLOW})
    parts, ok = [], bool(shallow_modes)
    for mode in shallow_modes:
        value = mean_metric(records, thief_spec=SHALLOW, thief_mode=mode, **vic)
        ok = ok and strong - value >= margin
        parts.append(f"shallow/{mode} {value:.4f} (gap {strong - value:+.4f})")
    seeds = _seeds(records, thief_spec=STRONG, thief_mode=PROBE, **vic)
    ok = ok and len(seeds) >= min_seeds
    return CheckResult("thief-side trend", ok, f"strong/probe {strong:.4f} vs " + ", ".join(parts) + f"; need >= {margin}; seeds={len(seeds)}")


def separability_correlation(records, budget=500, strategy="random", min_seeds=5) -> tuple[CheckResult, float]:
    """Spearman correlation between victim-backbone silhouette and agreement, probe victims, strong thief."""
    xs, ys = [], []
    for r in records:
        if (r.ok and r.victim_mode == PROBE and r.victim_spec in (SHALLOW, MID, STRONG)
                and r.thief_spec == STRONG and r.thief_mode == PROBE and r.budget == budget and r.strategy == strategy):
            xs.append(r.backbone_silhouette)
            ys.append(r.thief_agreement)
    rho = float(spearmanr(xs, ys).statistic) if len(xs) > 2 else float("nan")
    ok = len(xs) >= 3 * min_seeds and rho > 0
    return CheckResult("separability correlation", ok, f"spearman rho = {rho:.4f} over {len(xs)} cells (need > 0)"), rho


def budget_monotonicity(records, budgets=(100, 250, 500, 1000), strategy="random", max_inversion=0.01) -> CheckResult:
    """Mean agreement non-decreasing in budget, allowing one dip of at most ``max_inversion``."""
    cell = dict(victim_spec=STRONG, victim_mode=PROBE, thief_spec=STRONG, thief_mode=PROBE, strategy=strategy)
    means = [mean_metric(records, budget=b, **cell) for b in budgets]
    drops = [means[i] - means[i + 1] for i in range(len(means) - 1) if means[i + 1] < means[i]]
    ok = len(drops) <= 1 and all(d <= max_inversion for d in drops)
    shown = ", ".join(f"{b}: {m:.4f}" for b, m in zip(budgets, means))
    return CheckResult("budget monotonicity", ok, f"{shown}; inversions {[round(d, 4) for d in drops]}")


def budget_gap_growth(records, budgets=(100, 250, 500, 1000), strategy="random") -> CheckResult:
    """Strong-vs-shallow victim agreement gap at the largest budget vs the smallest."""
    th = dict(thief_spec=STRONG, thief_mode=PROBE, strategy=strategy)

    def gap(b):
        return (mean_metric(records, victim_spec=STRONG, victim_mode=PROBE, budget=b, **th)
                - mean_metric(records, victim_spec=SHALLOW, victim_mode=PROBE, budget=b, **th))

    lo, hi = gap(budgets[0]), gap(budgets[-1])
    return CheckResult("budget gap growth", hi >= lo, f"gap at {budgets[0]} = {lo:+.4f}, at {budgets[-1]} = {hi:+.4f}")


def default_checks(records, sweep_records=None) -> list[CheckResult]:
    out = [victim_trend(records), thief_trend(records), separability_correlation(records)[0]]
    if sweep_records is not None:
        out.append(budget_monotonicity(sweep_records))
    return out

