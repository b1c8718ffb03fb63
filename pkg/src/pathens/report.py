"""Human-readable result tables and the canonical machine report."""

from __future__ import annotations

import json

from .ensemble import TIERS, TierReport

_TIER_TITLES = {
    "original_good": "original good",
    "bad_1": "bad 1",
    "bad_2": "bad 2",
}


def format_percent(value: float | None) -> str:
    """Accuracies rendered to two decimals, '-' when a tier is empty."""
    if value is None:
        return "-"
    return f"{value * 100:.2f}%"


def format_tier_tables(tr: TierReport) -> str:
    """The two result tables: accuracy by tier, then counts by tier."""
    headers = [_TIER_TITLES[t] for t in TIERS]
    acc_cells = [format_percent(tr.accuracies[t]) for t in TIERS]
    acc_cells.append(format_percent(tr.overall_accuracy))
    count_cells = [str(tr.counts[t]) for t in TIERS]
    count_cells.append(str(tr.overall_count))

    def table(title, cells, last_header):
        cols = headers + [last_header]
        widths = [max(len(c), len(v)) for c, v in zip(cols, cells)]
        head = "  ".join(c.ljust(w) for c, w in zip(cols, widths))
        body = "  ".join(v.ljust(w) for v, w in zip(cells, widths))
        return f"{title}\n  {head}\n  {body}"

    return (
        table("Test accuracy by tier", acc_cells, "overall")
        + "\n\n"
        + table("Test counts by tier", count_cells, "total")
    )


def render_report(doc: dict) -> str:
    """Full human-readable rendering of a machine report."""
    lines = []
    ds = doc.get("dataset", {})
    if ds:
        lines.append(
            f"Data: {ds.get('n_train', '?')} train / {ds.get('n_test', '?')} test, "
            f"dim {ds.get('dim', '?')}, {ds.get('n_classes', '?')} classes"
        )
        lines.append("")
    if "tier_report" in doc:
        lines.append(format_tier_tables(TierReport.from_doc(doc["tier_report"])))
        lines.append("")
    members = doc.get("members", [])
    if members:
        lines.append("Members (original model on the shared test set):")
        for mb in members:
            flag = "" if mb["met_target"] else "  [filter target missed]"
            lines.append(
                f"  fold {mb['fold']}: test {format_percent(mb['test_accuracy'])}, "
                f"val-retained {mb['retained_count']} at "
                f"{format_percent(mb['retained_accuracy'])}, "
                f"bad train points {mb['n_bad_train']}{flag}"
            )
        lines.append(
            f"Ensemble {format_percent(doc['ensemble_test_accuracy'])} vs best member "
            f"{format_percent(doc['best_member_test_accuracy'])}"
        )
        lines.append("")
    bc = doc.get("bound_check")
    if bc:
        verdict = "holds" if bc["passed"] else "VIOLATED"
        lines.append(
            f"Voted-error bound {verdict}: {bc['observed_incorrect']} incorrect voted "
            f"points vs v/(f1*f2) = {bc['v']}/({bc['f1']:.4f}*{bc['f2']:.4f}) "
            f"= {bc['bound']:.2f}"
        )
    th = doc.get("theorem")
    if th:
        lo, hi = th["interval"]
        lines.append(
            f"Subspace error interval (z={th['z']}): [{lo:.4f}, {hi:.4f}] around "
            f"eps'={th['eps_prime']:.4f}; discovery probability >= {th['confidence_lb']:.4f}"
        )
    routing = doc.get("routing")
    if routing:
        lines.append("")
        lines.append("External routing:")
        lines.append(format_tier_tables(TierReport.from_doc(routing["tier_report"])))
    feats = doc.get("features")
    if feats is not None:
        lines.append("")
        lines.append(f"Feature images emitted: {len(feats)} splits")
    return "\n".join(lines).rstrip() + "\n"


def canonical_json(doc: dict) -> str:
    """Stable rendering used for on-disk reports: sorted keys, 2-space indent."""
    return json.dumps(doc, sort_keys=True, indent=2, allow_nan=False) + "\n"
