"""Evidence-backed reference verification for ranked explanations.

Each explanation is rewritten into a retrieval claim at temperature 0,
matched against the corpus (lexical then dense), and every retrieved passage
is judged independently. NOT_FOUND is a first-class outcome meaning "judged
and unsupported", never a swallowed error.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import CardioDdxError, ParseError
from .gateway import ChatMessage, ChatRequest, TOOL_TEMPERATURE, extract_json_block
from .model import NOT_FOUND, ReferenceEntry, ReferenceList, Unverified
from .retrieval import retrieve_evidence


@dataclass(frozen=True)
class Claim:
    """Retrieval-ready restatement of one explanation."""

    diagnosis: str
    explanation: str
    text: str
    fallback_used: bool


@dataclass(frozen=True)
class Judgment:
    chunk_id: str
    supports: bool
    quote: str
    parse_failed: bool = False


def rewrite_claim(gateway, templates, diagnosis: str, explanation: str, log_=None) -> Claim:
    """One temperature-0 exchange turning an explanation into a search claim.

    Any failure (transport, protocol, unparseable reply, empty claim) falls
    back to the concatenation of diagnosis and explanation, with a warning.
    """
    prompt = templates.render("rewrite", {"diagnosis": diagnosis, "explanation": explanation})
    try:
        reply = gateway.complete(
            ChatRequest(messages=(ChatMessage("user", prompt),), temperature=TOOL_TEMPERATURE, tag="rewrite"),
            log=log_,
        )
        text = str(extract_json_block(reply.text).get("claim", "")).strip()
        if text:
            return Claim(diagnosis, explanation, text, fallback_used=False)
        raise ParseError("rewrite reply held no claim text")
    except CardioDdxError as exc:
        if log_ is not None:
            log_.warn(f"claim rewrite fell back to concatenation ({exc})")
        return Claim(diagnosis, explanation, f"{diagnosis}: {explanation}", fallback_used=True)


def judge_passage(gateway, templates, claim: Claim, passage, log_=None) -> Judgment:
    """Ask the judge whether one passage supports the claim.

    The judge sees the diagnosis and the explanation alongside the passage
    and must answer with a verdict plus a verbatim quote. A quote that is not
    a substring of the passage demotes the verdict to non-supporting, as does
    an unparseable reply; both leave a warning.
    """
    prompt = templates.render(
        "judge",
        {
            "diagnosis": claim.diagnosis,
            "explanation": claim.explanation,
            "claim": claim.text,
            "passage": passage.text,
        },
    )
    reply = gateway.complete(
        ChatRequest(messages=(ChatMessage("user", prompt),), temperature=TOOL_TEMPERATURE, tag="judge"),
        log=log_,
    )
    try:
        payload = extract_json_block(reply.text)
    except ParseError:
        if log_ is not None:
            log_.warn(f"judge reply unparseable for chunk {passage.chunk_id}; treated as non-supporting")
        return Judgment(passage.chunk_id, supports=False, quote="", parse_failed=True)
    supports = bool(payload.get("supports", False))
    quote = str(payload.get("quote", ""))
    if supports and (not quote or quote not in passage.text):
        if log_ is not None:
            log_.warn(
                f"judge quote for chunk {passage.chunk_id} is not a verbatim substring; demoted to non-supporting"
            )
        return Judgment(passage.chunk_id, supports=False, quote=quote)
    return Judgment(passage.chunk_id, supports=supports, quote=quote)


def verify_explanation(
    gateway,
    templates,
    corpus_index,
    embedder,
    diagnosis: str,
    explanation: str,
    bm25_k: int = 20,
    rerank_k: int = 5,
    log_=None,
):
    """Verify one explanation against the corpus.

    Returns a ReferenceList of supporting passages in rerank order, or
    NOT_FOUND when nothing was retrieved (zero judge calls in that case) or
    every retrieved passage was judged non-supporting. All retrieved passages
    are judged; there is no early exit on the first supporter.
    """
    claim = rewrite_claim(gateway, templates, diagnosis, explanation, log_=log_)
    passages = retrieve_evidence(corpus_index, claim.text, embedder, bm25_k=bm25_k, rerank_k=rerank_k, log=log_)
    if not passages:
        return NOT_FOUND
    entries = []
    for passage in passages:
        judgment = judge_passage(gateway, templates, claim, passage, log_=log_)
        if judgment.supports:
            entries.append(
                ReferenceEntry(
                    source_title=passage.source_title,
                    extracted_text=judgment.quote,
                    chunk_id=passage.chunk_id,
                    rerank_score=passage.rerank_score,
                )
            )
    if not entries:
        return NOT_FOUND
    return ReferenceList(tuple(entries))


def verify_result(
    gateway,
    templates,
    corpus_index,
    embedder,
    ranked_candidates,
    existing=None,
    bm25_k: int = 20,
    rerank_k: int = 5,
    log_=None,
) -> dict:
    """Fill the (diagnosis, explanation) -> references map for a ranked list.

    Keys already present in `existing` are kept as-is (never silently
    overwritten; a warning notes the skip). A failure verifying one
    explanation leaves an Unverified marker for that key and the rest
    proceed.
    """
    refs = dict(existing) if existing else {}
    for candidate in ranked_candidates:
        for explanation in candidate.explanations:
            key = (candidate.diagnosis, explanation)
            if key in refs:
                if log_ is not None:
                    log_.warn(f"references for {candidate.diagnosis!r} explanation already present; kept")
                continue
            try:
                refs[key] = verify_explanation(
                    gateway,
                    templates,
                    corpus_index,
                    embedder,
                    candidate.diagnosis,
                    explanation,
                    bm25_k=bm25_k,
                    rerank_k=rerank_k,
                    log_=log_,
                )
            except CardioDdxError as exc:
                if log_ is not None:
                    log_.warn(f"verification errored for {candidate.diagnosis!r}: {exc}")
                refs[key] = Unverified(f"verification error: {exc}")
    return refs
