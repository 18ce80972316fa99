/**
 * Console view state and its pure transitions.
 *
 * The state holds nothing the service did not send: stage progress mirrors
 * stream events, the ranking pane always shows the latest turn's result, and
 * turn history is append-only — inspecting an earlier turn only moves a
 * cursor, never rewrites a stored result.
 */

import type { DiagnosisResult, PatientCase, StageRecord, StreamEvent } from './types.js';

export interface Turn {
  /** null for the initial diagnosis run; the clinician's text afterwards. */
  instruction: string | null;
  result: DiagnosisResult;
}

export type RunPhase = 'idle' | 'streaming' | 'done' | 'error';

export interface ViewState {
  activeCase: PatientCase | null;
  caseId: string | null;
  sessionId: string | null;
  /** Stage records observed so far for the in-flight run, in arrival order. */
  stageProgress: StageRecord[];
  phase: RunPhase;
  streamError: string | null;
  /** Completed turns; index 0 is the initial diagnosis. Append-only. */
  history: Turn[];
  /** History index being inspected; null means the latest turn. */
  viewedTurn: number | null;
  selectedDiagnosis: string | null;
  /** expansion keys: `${diagnosis}\u0000${explanation}` */
  expandedRefs: Set<string>;
  instructionDraft: string;
  inlineNotice: string | null;
  /** Set when the server reported a conflict (409): form disabled, retry shown. */
  inputLocked: boolean;
}

export function initialState(): ViewState {
  return {
    activeCase: null,
    caseId: null,
    sessionId: null,
    stageProgress: [],
    phase: 'idle',
    streamError: null,
    history: [],
    viewedTurn: null,
    selectedDiagnosis: null,
    expandedRefs: new Set(),
    instructionDraft: '',
    inlineNotice: null,
    inputLocked: false,
  };
}

export function refKey(diagnosis: string, explanation: string): string {
  return `${diagnosis}\u0000${explanation}`;
}

/** The result whose ranking the right-hand pane must show: always the latest. */
export function latestResult(state: ViewState): DiagnosisResult | null {
  const last = state.history[state.history.length - 1];
  return last ? last.result : null;
}

/** The turn currently open for inspection (defaults to the latest). */
export function inspectedTurn(state: ViewState): Turn | null {
  if (state.history.length === 0) return null;
  const index = state.viewedTurn === null ? state.history.length - 1 : state.viewedTurn;
  const turn = state.history[index];
  return turn ?? null;
}

export function beginRun(state: ViewState): ViewState {
  return {
    ...state,
    stageProgress: [],
    phase: 'streaming',
    streamError: null,
    inlineNotice: null,
    inputLocked: false,
  };
}

/** Apply one stream event; a result event closes the run and appends a turn. */
export function applyStreamEvent(state: ViewState, event: StreamEvent, instruction: string | null): ViewState {
  switch (event.event) {
    case 'stage':
      return { ...state, stageProgress: [...state.stageProgress, event.record] };
    case 'result': {
      const turn: Turn = { instruction, result: event.result };
      return {
        ...state,
        phase: 'done',
        history: [...state.history, turn],
        viewedTurn: null,
      };
    }
    case 'error':
      return {
        ...state,
        phase: 'error',
        streamError: `${event.stage}: ${event.message}`,
        stageProgress: event.trace.length > 0 ? event.trace : state.stageProgress,
      };
  }
}

export function selectDiagnosis(state: ViewState, diagnosis: string | null): ViewState {
  return { ...state, selectedDiagnosis: diagnosis };
}

export function toggleReference(state: ViewState, diagnosis: string, explanation: string): ViewState {
  const key = refKey(diagnosis, explanation);
  const expanded = new Set(state.expandedRefs);
  if (expanded.has(key)) {
    expanded.delete(key);
  } else {
    expanded.add(key);
  }
  return { ...state, expandedRefs: expanded };
}

export function viewTurn(state: ViewState, index: number | null): ViewState {
  if (index !== null && (index < 0 || index >= state.history.length)) return state;
  return { ...state, viewedTurn: index };
}

export function setDraft(state: ViewState, text: string): ViewState {
  return { ...state, instructionDraft: text };
}

export function setNotice(state: ViewState, notice: string | null): ViewState {
  return { ...state, inlineNotice: notice };
}

/** Positions (0-based) where two rankings disagree, for turn comparison. */
export function rankingDiff(before: DiagnosisResult, after: DiagnosisResult): number[] {
  const a = before.ranked_list.map((c) => c.diagnosis);
  const b = after.ranked_list.map((c) => c.diagnosis);
  const length = Math.max(a.length, b.length);
  const diff: number[] = [];
  for (let i = 0; i < length; i++) {
    if (a[i] !== b[i]) diff.push(i);
  }
  return diff;
}
