"""Human-readable renderings of reports and training summaries."""

from typing import Any

from pydantic import BaseModel

from cov3d.ensemble import EvalReport

__all__ = ["as_readable", "format_report_table"]


def _format_yaml_like(data: Any, indent_level: int = 0, base_indent: int = 2) -> str:
    prefix = " " * (indent_level * base_indent)
    if isinstance(data, dict):
        if not data:
            return f"{prefix}{{}}"
        lines = []
        for key, value in data.items():
            if isinstance(value, (dict, list, tuple)) and value:
                lines.append(f"{prefix}{key}:")
                lines.append(_format_yaml_like(value, indent_level + 1, base_indent))
            else:
                lines.append(f"{prefix}{key}: {_scalar(value)}")
        return "\n".join(lines)
    if isinstance(data, (list, tuple)):
        if not data:
            return f"{prefix}[]"
        lines = []
        for item in data:
            if isinstance(item, (dict, list, tuple)) and item:
                nested = _format_yaml_like(item, indent_level + 1, base_indent).lstrip()
                lines.append(f"{prefix}- {nested}")
            else:
                lines.append(f"{prefix}- {_scalar(item)}")
        return "\n".join(lines)
    return f"{prefix}{_scalar(data)}"


def _scalar(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.4g}"
    if isinstance(value, str) and any(c in value for c in ":{}[]"):
        return f'"{value}"'
    if value == {} or value == []:
        return "{}" if isinstance(value, dict) else "[]"
    return str(value)


def as_readable(data: Any, *, indent: int = 2) -> str:
    """
    Render dicts, lists and pydantic models in a YAML-like layout.

    Args:
        data: The data to format.
        indent: Spaces per nesting level.
    """
    if isinstance(data, BaseModel):
        data = data.model_dump(mode="json")
    return _format_yaml_like(data, 0, indent)


def _score(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.2f}"


def format_report_table(report: EvalReport) -> str:
    """
    Fixed-width table: one row per member model, then the ensemble row, with
    per-class F1, macro F1 and the bootstrap interval.
    """
    headers = ["model", *report.class_names, "macro_f1", "ci"]
    rows = [
        [
            member.member_id,
            *([""] * len(report.class_names)),
            _score(member.macro_f1),
            f"{member.ci_mean:.2f} ± {member.ci_halfwidth:.2f}",
        ]
        for member in report.members
    ]
    rows.append(
        [
            "ensemble",
            *(_score(v) for v in report.per_class_f1),
            _score(report.macro_f1),
            f"{report.ci_mean:.2f} ± {report.ci_halfwidth:.2f}",
        ]
    )
    widths = [max(len(str(r[i])) for r in [headers, *rows]) for i in range(len(headers))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(str(c).ljust(w) for c, w in zip(r, widths)) for r in rows)
    if report.member_spread is not None:
        lines.append(
            f"members: mean {report.member_mean:.2f}, std {report.member_spread:.2f} "
            f"over {len(report.members)} models"
        )
    lines.append(f"n={report.n_samples}, {report.n_bootstrap} bootstrap resamples")
    return "\n".join(lines)
