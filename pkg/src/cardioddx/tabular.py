"""Structured lab-table processing."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import CardioDdxError
from .gateway import ChatMessage, ChatRequest, TOOL_TEMPERATURE


def format_lab_table(rows) -> str:
    """Canonical text form of a lab table: one `name: value unit (flag)` line per row."""
    lines = []
    for row in rows:
        line = f"{row.name}: {row.value}"
        if row.unit:
            line += f" {row.unit}"
        if row.flag:
            line += f" ({row.flag})"
        lines.append(line)
    return "\n".join(lines)


@dataclass
class TabularReport:
    listing: str
    summary: str
    summarized: bool

    def to_json_dict(self):
        return {"listing": self.listing, "summary": self.summary, "summarized": self.summarized}


def process_tabular(gateway, templates, rows, log_=None) -> TabularReport:
    """Summarize a lab table with one LLM call at temperature 0.

    An empty table short-circuits without any LLM call. If the call fails,
    the raw listing stands in for the summary and a warning is recorded; the
    pipeline keeps going either way.
    """
    listing = format_lab_table(rows)
    if not rows:
        return TabularReport(listing="", summary="", summarized=False)
    prompt = templates.render("tabular_summarize", {"lab_listing": listing})
    try:
        reply = gateway.complete(
            ChatRequest(
                messages=(ChatMessage("user", prompt),),
                temperature=TOOL_TEMPERATURE,
                tag="tabular_summarize",
            ),
            log=log_,
        )
        return TabularReport(listing=listing, summary=reply.text.strip(), summarized=True)
    except CardioDdxError as exc:
        if log_ is not None:
            log_.warn(f"tabular summarizer failed ({exc}); using raw listing")
        return TabularReport(listing=listing, summary=listing, summarized=False)
