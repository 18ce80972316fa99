/**
 * Wire types for the diagnosis service.
 *
 * These mirror the JSON documents the HTTP endpoints produce; the console
 * performs no diagnostic logic of its own, so every field rendered anywhere
 * in the UI comes from one of these shapes.
 */

export interface PatientCase {
  case_id: string;
  note_text: string;
  lab_table?: unknown[];
  ecg_waveforms?: unknown[];
  images?: unknown[];
  demographics?: Record<string, unknown>;
}

export interface RankedCandidate {
  diagnosis: string;
  explanations: string[];
  origin: string;
  rank: number;
  status: string;
}

export interface ReferenceEntry {
  chunk_id: string;
  extracted_text: string;
  rerank_score: number;
  source_title: string;
}

/** Per-explanation verdict: found references, an explicit miss, or unverified. */
export type ReferenceVerdict =
  | { status: 'found'; entries: ReferenceEntry[] }
  | { status: 'not_found' }
  | { status: 'unverified'; reason: string };

/** diagnosis -> explanation text -> verdict */
export type PerExplanationRefs = Record<string, Record<string, ReferenceVerdict>>;

export interface LlmCall {
  tag: string;
  temperature: number;
  request_digest: string;
  request_messages: Array<{ role: string; content: string }>;
  response_digest: string;
  response_text: string;
}

export interface ToolCall {
  tool: string;
  request: unknown;
  request_digest: string;
  response: unknown;
  response_digest: string;
}

export interface Revision {
  kind: 'ADD' | 'REVISE' | 'DELETE';
  diagnosis: string;
  rationale: string;
  source_agent: string;
  added_explanations: string[];
}

export interface StageRecord {
  stage: string;
  started: number;
  ended: number;
  inputs_digest: string;
  outputs_digest: string;
  summary: Record<string, unknown>;
  warnings: string[];
  llm_calls: LlmCall[];
  tool_calls: ToolCall[];
}

export interface DiagnosisResult {
  case_id: string;
  schema_version: number;
  ranked_list: RankedCandidate[];
  per_explanation_refs: PerExplanationRefs;
  trace: StageRecord[];
}

/** One line of the diagnose / instruct ndjson streams. */
export type StreamEvent =
  | { event: 'stage'; record: StageRecord }
  | { event: 'result'; result: DiagnosisResult }
  | { event: 'error'; stage: string; message: string; trace: StageRecord[] };

export interface SessionTurn {
  instruction: string;
  result: DiagnosisResult;
  result_digest: string;
}

export interface SessionDoc {
  session_id: string;
  case_id: string;
  status: 'open' | 'closed';
  turns: SessionTurn[];
}

export function isStreamEvent(value: unknown): value is StreamEvent {
  if (typeof value !== 'object' || value === null) return false;
  const event = (value as { event?: unknown }).event;
  return event === 'stage' || event === 'result' || event === 'error';
}

/** Narrow an arbitrary parsed document to a DiagnosisResult, or explain why not. */
export function asDiagnosisResult(value: unknown): { ok: true; result: DiagnosisResult } | { ok: false; reason: string } {
  if (typeof value !== 'object' || value === null) {
    return { ok: false, reason: 'not a JSON object' };
  }
  const doc = value as Partial<DiagnosisResult>;
  if (typeof doc.case_id !== 'string') return { ok: false, reason: 'missing case_id' };
  if (!Array.isArray(doc.ranked_list)) return { ok: false, reason: 'missing ranked_list' };
  if (!Array.isArray(doc.trace)) return { ok: false, reason: 'missing trace' };
  if (typeof doc.per_explanation_refs !== 'object' || doc.per_explanation_refs === null) {
    return { ok: false, reason: 'missing per_explanation_refs' };
  }
  for (const candidate of doc.ranked_list) {
    const c = candidate as Partial<RankedCandidate>;
    if (typeof c.diagnosis !== 'string' || !Array.isArray(c.explanations)) {
      return { ok: false, reason: 'malformed ranked_list entry' };
    }
  }
  return { ok: true, result: doc as DiagnosisResult };
}
