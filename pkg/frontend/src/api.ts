/**
 * HTTP client for the diagnosis service.
 *
 * Every call goes through the published JSON endpoints; nothing reaches into
 * the backend's internals. `fetch` is injectable so tests can script the
 * exchange without a network.
 */

import { readNdjson } from './ndjson.js';
import { isStreamEvent, type DiagnosisResult, type SessionDoc, type StreamEvent } from './types.js';

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

/** Non-2xx responses surface as this, keeping the status for UI decisions. */
export class ServiceError extends Error {
  constructor(
    public readonly status: number,
    message: string,
  ) {
    super(message);
    this.name = 'ServiceError';
  }
}

async function errorFrom(response: Response): Promise<ServiceError> {
  let message = `HTTP ${response.status}`;
  try {
    const body = (await response.json()) as { error?: unknown };
    if (typeof body.error === 'string') message = body.error;
  } catch {
    // Non-JSON error body; the status code is all we have.
  }
  return new ServiceError(response.status, message);
}

export class ServiceClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async postJson(path: string, payload: unknown): Promise<Response> {
    return this.fetchImpl(`${this.baseUrl}${path}`, {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify(payload),
    });
  }

  /** Submit a case document; resolves to the server-assigned case id. */
  async submitCase(caseDoc: unknown): Promise<string> {
    const response = await this.postJson('/cases', caseDoc);
    if (response.status !== 201) throw await errorFrom(response);
    const body = (await response.json()) as { case_id: string };
    return body.case_id;
  }

  /** Stream the staged diagnosis run for a stored case. */
  async *diagnose(caseId: string, configOverrides: Record<string, unknown> = {}): AsyncGenerator<StreamEvent> {
    const response = await this.postJson(`/cases/${caseId}/diagnose`, configOverrides);
    if (!response.ok) throw await errorFrom(response);
    yield* this.streamEvents(response);
  }

  async getResult(caseId: string): Promise<DiagnosisResult> {
    const response = await this.fetchImpl(`${this.baseUrl}/cases/${caseId}/result`);
    if (!response.ok) throw await errorFrom(response);
    return (await response.json()) as DiagnosisResult;
  }

  async openSession(caseId: string): Promise<SessionDoc> {
    const response = await this.postJson('/sessions', { case_id: caseId });
    if (response.status !== 201) throw await errorFrom(response);
    return (await response.json()) as SessionDoc;
  }

  async getSession(sessionId: string): Promise<SessionDoc> {
    const response = await this.fetchImpl(`${this.baseUrl}/sessions/${sessionId}`);
    if (!response.ok) throw await errorFrom(response);
    return (await response.json()) as SessionDoc;
  }

  /** Stream one refinement turn; the service appends it to the session. */
  async *instruct(sessionId: string, instruction: string): AsyncGenerator<StreamEvent> {
    const response = await this.postJson(`/sessions/${sessionId}/instruct`, { instruction });
    if (!response.ok) throw await errorFrom(response);
    yield* this.streamEvents(response);
  }

  async closeSession(sessionId: string): Promise<SessionDoc> {
    const response = await this.postJson(`/sessions/${sessionId}/close`, {});
    if (!response.ok) throw await errorFrom(response);
    return (await response.json()) as SessionDoc;
  }

  private async *streamEvents(response: Response): AsyncGenerator<StreamEvent> {
    if (!response.body) {
      throw new ServiceError(response.status, 'response has no body to stream');
    }
    for await (const obj of readNdjson(response.body)) {
      if (!isStreamEvent(obj)) {
        throw new ServiceError(response.status, `unexpected stream line: ${JSON.stringify(obj)}`);
      }
      yield obj;
    }
  }
}
