import { describe, expect, it } from 'vitest';

import { escapeHtml, renderApp, renderRankingPane, renderTrace, renderVerdict, verdictBadge } from '../src/render.js';
import { initialState, toggleReference } from '../src/state.js';
import type { Revision } from '../src/types.js';
import { demoResult, playRun, refinedResult } from './helpers.js';

const STAGES = ['ingest', 'predict', 'examine', 'review', 'merge', 'self_verify', 'output', 'ref_verify'];

describe('renderTrace on the demo fixture', () => {
  const html = renderTrace(demoResult);

  it('renders one panel per stage record, in order', () => {
    const panels = [...html.matchAll(/class="panel stage-panel stage-([a-z_]+)"/g)].map((m) => m[1]);
    expect(panels).toEqual(STAGES);
  });

  it('shows exactly one struck-through DELETE revision with its rationale', () => {
    const review = demoResult.trace.find((r) => r.stage === 'review');
    const deletion = (review?.summary['revisions'] as Revision[]).find((r) => r.kind === 'DELETE');
    expect(deletion).toBeDefined();

    const struck = [...html.matchAll(/<li class="revision kind-delete">([\s\S]*?)<\/li>/g)];
    expect(struck).toHaveLength(1);
    const body = struck[0]?.[1] ?? '';
    expect(body).toContain(`<s>${escapeHtml(deletion?.diagnosis ?? '')}</s>`);
    expect(body).toContain('class="rationale"');
    expect(body).toContain(escapeHtml(deletion?.rationale ?? ''));
  });

  it('strikes through every self-verification deletion separately', () => {
    const selfVerify = demoResult.trace.find((r) => r.stage === 'self_verify');
    const deleted = selfVerify?.summary['deleted'] as Array<{ diagnosis: string }>;
    const struck = [...html.matchAll(/<li class="sv-deleted"><s>([^<]+)<\/s>/g)].map((m) => m[1]);
    expect(struck).toEqual(deleted.map((d) => d.diagnosis));
  });

  it('keeps ADD and REVISE revisions un-struck', () => {
    for (const match of html.matchAll(/<li class="revision kind-(add|revise)">([\s\S]*?)<\/li>/g)) {
      expect(match[2]).not.toContain('<s>');
    }
  });
});

describe('reference panels', () => {
  it('shows a Not found badge for every explanation without references, with no expansion needed', () => {
    let expectedNotFound = 0;
    let expectedFound = 0;
    for (const verdictsByExplanation of Object.values(demoResult.per_explanation_refs)) {
      for (const verdict of Object.values(verdictsByExplanation)) {
        if (verdict.status === 'not_found') expectedNotFound += 1;
        if (verdict.status === 'found') expectedFound += 1;
      }
    }
    expect(expectedNotFound).toBeGreaterThan(0); // the fixture must exercise the badge

    const pane = renderRankingPane(demoResult, initialState());
    expect([...pane.matchAll(/class="badge not-found">Not found</g)]).toHaveLength(expectedNotFound);
    expect([...pane.matchAll(/class="badge found"/g)]).toHaveLength(expectedFound);
    expect(pane).not.toContain('<blockquote>'); // quotes appear only on expansion
  });

  it('expanding an explanation reveals its verbatim references', () => {
    let target: { diagnosis: string; explanation: string; entries: number } | null = null;
    for (const [diagnosis, byExplanation] of Object.entries(demoResult.per_explanation_refs)) {
      for (const [explanation, verdict] of Object.entries(byExplanation)) {
        if (verdict.status === 'found') {
          target = { diagnosis, explanation, entries: verdict.entries.length };
          break;
        }
      }
      if (target) break;
    }
    expect(target).not.toBeNull();
    if (!target) return;

    const state = toggleReference(initialState(), target.diagnosis, target.explanation);
    const pane = renderRankingPane(demoResult, state);
    expect([...pane.matchAll(/<blockquote>/g)]).toHaveLength(target.entries);
  });

  it('an absent verdict still says Not found, never blank', () => {
    expect(renderVerdict(undefined)).toContain('Not found');
    expect(verdictBadge(undefined)).toContain('Not found');
  });

  it('an unverified verdict shows its reason', () => {
    const html = renderVerdict({ status: 'unverified', reason: 'corpora disabled' });
    expect(html).toContain('Unverified');
    expect(html).toContain('corpora disabled');
  });

  it('found entries quote the source verbatim with its title', () => {
    const html = renderVerdict({
      status: 'found',
      entries: [{ chunk_id: 'doc:0', extracted_text: 'verbatim passage', rerank_score: 0.9, source_title: 'Texbook A' }],
    });
    expect(html).toContain('verbatim passage');
    expect(html).toContain('Texbook A');
  });
});

describe('error handling', () => {
  it('malformed result JSON yields an error panel, never a blank view', () => {
    const html = renderTrace({ nope: true });
    expect(html).toContain('error-panel');
    expect(html).toContain('does not match the service schema');
  });

  it('a non-object renders the error panel too', () => {
    expect(renderTrace('just a string')).toContain('error-panel');
  });

  it('escapes markup smuggled inside service strings', () => {
    const html = renderVerdict({ status: 'unverified', reason: '<script>alert(1)</script>' });
    expect(html).not.toContain('<script>');
    expect(html).toContain('&lt;script&gt;');
  });
});

describe('renderApp', () => {
  it('starts with a case form and placeholders', () => {
    const html = renderApp(initialState());
    expect(html).toContain('case-form');
    expect(html).toContain('Run a diagnosis to see the staged trace');
  });

  it('the ranking pane follows the latest turn even while inspecting an earlier one', () => {
    let state = playRun(initialState(), demoResult, null);
    state = playRun(state, refinedResult, 'reorder');
    state = { ...state, viewedTurn: 0 };

    const html = renderApp(state);
    const pane = html.slice(html.indexOf('class="panel ranking-pane"'));
    const order = [...pane.matchAll(/<span class="diagnosis">([^<]+)<\/span>/g)].map((m) => m[1]);
    expect(order).toEqual(refinedResult.ranked_list.map((c) => c.diagnosis));
    // while the trace pane shows the inspected (initial, eight-stage) turn
    expect([...html.matchAll(/stage-panel stage-/g)]).toHaveLength(demoResult.trace.length);
  });

  it('disables the instruction form while a turn streams', () => {
    let state = playRun(initialState(), demoResult, null);
    state = { ...state, sessionId: 'session-1', phase: 'streaming' };
    const html = renderApp(state);
    expect(html).toMatch(/<textarea name="instruction"[^>]* disabled>/);
    expect(html).toContain('Streaming…');
  });
});
