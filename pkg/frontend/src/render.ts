/**
 * Pure HTML rendering for the console's three panes.
 *
 * Every function maps service JSON to a markup string; nothing here computes
 * a diagnostic fact. Deleted candidates are struck through wherever the trace
 * records a deletion, and reference panels always say something — found
 * entries, a "Not found" badge, or an "Unverified" badge — never blank.
 */

import { inspectedTurn, latestResult, refKey, type ViewState } from './state.js';
import {
  asDiagnosisResult,
  type DiagnosisResult,
  type PatientCase,
  type ReferenceVerdict,
  type Revision,
  type StageRecord,
} from './types.js';

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, '&amp;')
    .replace(/</g, '&lt;')
    .replace(/>/g, '&gt;')
    .replace(/"/g, '&quot;')
    .replace(/'/g, '&#39;');
}

export function renderErrorPanel(message: string): string {
  return `<section class="panel error-panel"><h3>Something went wrong</h3><p>${escapeHtml(message)}</p></section>`;
}

// ---------------------------------------------------------------- case pane

export function renderCasePane(patientCase: PatientCase | null, ingest: StageRecord | null): string {
  if (!patientCase) {
    return [
      '<section class="panel case-pane"><h2>Case</h2>',
      '<form class="case-form" data-action="load-case">',
      '<textarea name="case-json" placeholder="Paste a case JSON document…"></textarea>',
      '<button type="submit">Load case</button>',
      '</form>',
      '</section>',
    ].join('');
  }
  const demographics = patientCase.demographics
    ? `<dl class="demographics">${Object.entries(patientCase.demographics)
        .map(([k, v]) => `<dt>${escapeHtml(k)}</dt><dd>${escapeHtml(String(v))}</dd>`)
        .join('')}</dl>`
    : '';
  const toolReports = ingest
    ? ingest.tool_calls
        .map(
          (call) =>
            `<details class="tool-report"><summary>${escapeHtml(call.tool)}</summary><pre>${escapeHtml(
              JSON.stringify(call.response, null, 2),
            )}</pre></details>`,
        )
        .join('')
    : '';
  return [
    '<section class="panel case-pane">',
    `<h2>Case ${escapeHtml(patientCase.case_id)}</h2>`,
    demographics,
    `<pre class="note-text">${escapeHtml(patientCase.note_text)}</pre>`,
    toolReports ? `<h3>Tool reports</h3>${toolReports}` : '',
    '</section>',
  ].join('');
}

// --------------------------------------------------------------- trace pane

function renderRevision(revision: Revision): string {
  const kindClass = `revision kind-${revision.kind.toLowerCase()}`;
  const name =
    revision.kind === 'DELETE'
      ? `<s>${escapeHtml(revision.diagnosis)}</s>`
      : escapeHtml(revision.diagnosis);
  const additions = revision.added_explanations.length
    ? `<ul class="added">${revision.added_explanations.map((e) => `<li>${escapeHtml(e)}</li>`).join('')}</ul>`
    : '';
  return [
    `<li class="${kindClass}">`,
    `<span class="kind">${revision.kind}</span> <span class="diagnosis">${name}</span>`,
    `<p class="rationale">${escapeHtml(revision.rationale)}</p>`,
    additions,
    '</li>',
  ].join('');
}

/** Stage summaries list candidates either as plain names or as objects. */
function candidateName(item: unknown): string {
  const diagnosis = fieldOf(item, 'diagnosis');
  return diagnosis ?? String(item);
}

function fieldOf(item: unknown, field: string): string | null {
  if (item && typeof item === 'object') {
    const value = (item as Record<string, unknown>)[field];
    if (typeof value === 'string') return value;
  }
  return null;
}

function summaryDetails(record: StageRecord): string {
  const parts: string[] = [];
  const summary = record.summary;

  const reports = summary['reports'];
  if (reports && typeof reports === 'object' && !Array.isArray(reports)) {
    parts.push(
      `<dl class="reports">${Object.entries(reports as Record<string, unknown>)
        .map(([k, v]) => `<dt>${escapeHtml(k)}</dt><dd>${escapeHtml(JSON.stringify(v))}</dd>`)
        .join('')}</dl>`,
    );
  }
  const revisions = summary['revisions'];
  if (Array.isArray(revisions)) {
    parts.push(`<ul class="revisions">${(revisions as Revision[]).map(renderRevision).join('')}</ul>`);
  }
  const merged = summary['merged'];
  if (Array.isArray(merged)) {
    const items = merged
      .map((item) => {
        const origin = fieldOf(item, 'origin');
        const flagged = fieldOf(item, 'status') === 'delete_proposed';
        return [
          `<li${flagged ? ' class="merge-flagged"' : ''}>`,
          escapeHtml(candidateName(item)),
          origin ? ` <span class="origin">${escapeHtml(origin)}</span>` : '',
          flagged ? ' <span class="flag">deletion proposed</span>' : '',
          '</li>',
        ].join('');
      })
      .join('');
    parts.push(`<ul class="merged">${items}</ul>`);
  }
  const proposed = summary['delete_proposed'];
  if (Array.isArray(proposed) && proposed.length > 0) {
    parts.push(
      `<p class="delete-proposed">Deletion proposed: ${proposed.map((d) => escapeHtml(candidateName(d))).join(', ')}</p>`,
    );
  }
  const candidates = summary['candidates'];
  if (Array.isArray(candidates)) {
    parts.push(
      `<ol class="candidates">${candidates.map((c) => `<li>${escapeHtml(candidateName(c))}</li>`).join('')}</ol>`,
    );
  }
  const deleted = summary['deleted'];
  if (Array.isArray(deleted)) {
    const items = (deleted as Array<{ diagnosis: string; rationale: string }>)
      .map(
        (d) =>
          `<li class="sv-deleted"><s>${escapeHtml(d.diagnosis)}</s><p class="rationale">${escapeHtml(d.rationale)}</p></li>`,
      )
      .join('');
    if (items) parts.push(`<ul class="deletions">${items}</ul>`);
  }
  const ranking = summary['ranking'];
  if (Array.isArray(ranking)) {
    parts.push(
      `<ol class="stage-ranking">${(ranking as string[]).map((d) => `<li>${escapeHtml(d)}</li>`).join('')}</ol>`,
    );
  }
  const withRefs = summary['with_references'];
  if (typeof withRefs === 'number' && typeof summary['explanations'] === 'number') {
    parts.push(
      `<p class="ref-tally">${withRefs} of ${summary['explanations'] as number} explanations carry references.</p>`,
    );
  }
  return parts.join('');
}

export function renderStagePanel(record: StageRecord): string {
  const warnings = record.warnings.length
    ? `<ul class="warnings">${record.warnings.map((w) => `<li>${escapeHtml(w)}</li>`).join('')}</ul>`
    : '';
  return [
    `<article class="panel stage-panel stage-${escapeHtml(record.stage)}">`,
    `<h3>${escapeHtml(record.stage)}</h3>`,
    `<p class="calls">${record.llm_calls.length} model call(s), ${record.tool_calls.length} tool call(s)</p>`,
    summaryDetails(record),
    warnings,
    '</article>',
  ].join('');
}

/** One panel per stage record, in trace order; malformed input never blanks the view. */
export function renderTrace(resultDoc: unknown): string {
  const parsed = asDiagnosisResult(resultDoc);
  if (!parsed.ok) {
    return renderErrorPanel(`result does not match the service schema: ${parsed.reason}`);
  }
  return `<div class="trace">${parsed.result.trace.map(renderStagePanel).join('')}</div>`;
}

/** Live progress view: panels for completed stages while the stream runs. */
export function renderStageProgress(records: StageRecord[], phase: string, streamError: string | null): string {
  const panels = records.map(renderStagePanel).join('');
  const status =
    phase === 'streaming'
      ? '<p class="stream-status">Running…</p>'
      : streamError
        ? renderErrorPanel(streamError)
        : '';
  return `<div class="trace">${panels}${status}</div>`;
}

// ------------------------------------------------------------- ranking pane

/** Compact always-visible verdict marker next to each explanation. */
export function verdictBadge(verdict: ReferenceVerdict | undefined): string {
  if (!verdict || verdict.status === 'not_found') {
    // An absent entry means no references were attached: say so, never blank.
    return '<span class="badge not-found">Not found</span>';
  }
  if (verdict.status === 'unverified') {
    return '<span class="badge unverified">Unverified</span>';
  }
  const n = verdict.entries.length;
  return `<span class="badge found">${n} reference${n === 1 ? '' : 's'}</span>`;
}

/** Expanded reference panel: full entries, or an explicit explanation of none. */
export function renderVerdict(verdict: ReferenceVerdict | undefined): string {
  if (!verdict) {
    return '<span class="badge not-found">Not found</span>';
  }
  switch (verdict.status) {
    case 'found':
      return [
        '<ul class="references">',
        ...verdict.entries.map(
          (entry) =>
            `<li><span class="source">${escapeHtml(entry.source_title)}</span><blockquote>${escapeHtml(entry.extracted_text)}</blockquote></li>`,
        ),
        '</ul>',
      ].join('');
    case 'not_found':
      return '<span class="badge not-found">Not found</span>';
    case 'unverified':
      return `<span class="badge unverified">Unverified${verdict.reason ? ` — ${escapeHtml(verdict.reason)}` : ''}</span>`;
  }
}

export function renderRankingPane(result: DiagnosisResult | null, state: ViewState): string {
  if (!result) {
    return '<section class="panel ranking-pane"><h2>Differential</h2><p class="placeholder">No result yet.</p></section>';
  }
  const items = result.ranked_list
    .map((candidate) => {
      const selected = state.selectedDiagnosis === candidate.diagnosis;
      const explanations = candidate.explanations
        .map((explanation) => {
          const key = refKey(candidate.diagnosis, explanation);
          const expanded = state.expandedRefs.has(key);
          const verdict = result.per_explanation_refs[candidate.diagnosis]?.[explanation];
          const refs = expanded ? `<div class="ref-panel">${renderVerdict(verdict)}</div>` : '';
          return [
            `<li class="explanation${expanded ? ' expanded' : ''}" data-diagnosis="${escapeHtml(candidate.diagnosis)}" data-explanation="${escapeHtml(explanation)}">`,
            `<span class="text">${escapeHtml(explanation)}</span> ${verdictBadge(verdict)}`,
            refs,
            '</li>',
          ].join('');
        })
        .join('');
      return [
        `<li class="candidate${selected ? ' selected' : ''}" data-diagnosis="${escapeHtml(candidate.diagnosis)}">`,
        `<span class="rank">${candidate.rank}</span> <span class="diagnosis">${escapeHtml(candidate.diagnosis)}</span>`,
        `<ul class="explanations">${explanations}</ul>`,
        '</li>',
      ].join('');
    })
    .join('');
  return `<section class="panel ranking-pane"><h2>Differential</h2><ol class="ranked-list">${items}</ol></section>`;
}

// ------------------------------------------------------------ session strip

export function renderTurnStrip(state: ViewState): string {
  if (state.history.length === 0) return '';
  const latestIndex = state.history.length - 1;
  const viewing = state.viewedTurn === null ? latestIndex : state.viewedTurn;
  const chips = state.history
    .map((turn, i) => {
      const label = turn.instruction === null ? 'initial' : `turn ${i}`;
      const cls = i === viewing ? 'turn-chip active' : 'turn-chip';
      const title = turn.instruction === null ? 'Initial diagnosis' : turn.instruction;
      return `<button class="${cls}" data-turn="${i}" title="${escapeHtml(title)}">${escapeHtml(label)}</button>`;
    })
    .join('');
  return `<nav class="turn-strip">${chips}</nav>`;
}

export function renderInstructionForm(state: ViewState): string {
  const busy = state.phase === 'streaming';
  const noSession = state.sessionId === null;
  const disabled = busy || noSession || state.inputLocked ? ' disabled' : '';
  const retry = state.inputLocked ? ' <button type="button" class="retry" data-action="retry">Retry</button>' : '';
  const notice = state.inlineNotice
    ? `<p class="inline-notice">${escapeHtml(state.inlineNotice)}${retry}</p>`
    : '';
  return [
    '<form class="instruction-form" data-action="instruct">',
    `<textarea name="instruction" placeholder="Steer the differential…"${disabled}>${escapeHtml(state.instructionDraft)}</textarea>`,
    `<button type="submit"${disabled}>${busy ? 'Streaming…' : 'Send instruction'}</button>`,
    notice,
    '</form>',
  ].join('');
}

// ----------------------------------------------------------------- full app

export function renderApp(state: ViewState): string {
  const inspected = inspectedTurn(state);
  const tracePane =
    state.phase === 'streaming' || state.phase === 'error'
      ? renderStageProgress(state.stageProgress, state.phase, state.streamError)
      : inspected
        ? renderTrace(inspected.result)
        : '<div class="trace"><p class="placeholder">Run a diagnosis to see the staged trace.</p></div>';
  const ingest = inspected ? (inspected.result.trace.find((r) => r.stage === 'ingest') ?? null) : null;
  // The ranking pane always reflects the latest turn, whatever is inspected.
  const ranking = renderRankingPane(latestResult(state), state);
  return [
    '<div class="layout">',
    renderCasePane(state.activeCase, ingest),
    `<section class="panel trace-pane"><h2>Staged trace</h2>${renderTurnStrip(state)}${tracePane}</section>`,
    `<div class="right-column">${ranking}${renderInstructionForm(state)}</div>`,
    '</div>',
  ].join('');
}
