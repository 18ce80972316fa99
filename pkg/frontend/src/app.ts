/**
 * Console controller and browser bootstrap.
 *
 * The controller owns the view state and talks to the service client; it
 * renders by handing HTML to a callback, so tests can drive it without a
 * DOM. `bootstrap` is the only code that touches the document: it wires
 * delegated events on the root element to controller methods.
 */

import { ServiceClient, ServiceError } from './api.js';
import { renderApp } from './render.js';
import {
  applyStreamEvent,
  beginRun,
  initialState,
  selectDiagnosis,
  setDraft,
  setNotice,
  toggleReference,
  viewTurn,
  type ViewState,
} from './state.js';
import type { PatientCase } from './types.js';

function messageOf(error: unknown): string {
  if (error instanceof ServiceError) return error.message;
  if (error instanceof Error) return error.message;
  return String(error);
}

export class ConsoleController {
  state: ViewState = initialState();
  private lastInstruction: string | null = null;

  constructor(
    private readonly client: ServiceClient,
    private readonly onRender: (html: string, state: ViewState) => void,
  ) {}

  render(): void {
    this.onRender(renderApp(this.state), this.state);
  }

  private commit(next: ViewState): void {
    this.state = next;
    this.render();
  }

  /** Parse pasted case JSON and hand it to `loadCase`; bad JSON stays local. */
  async loadCaseText(text: string): Promise<void> {
    let parsed: unknown;
    try {
      parsed = JSON.parse(text);
    } catch {
      this.commit(setNotice(this.state, 'Case input is not valid JSON.'));
      return;
    }
    if (typeof parsed !== 'object' || parsed === null || Array.isArray(parsed)) {
      this.commit(setNotice(this.state, 'Case input must be a JSON object.'));
      return;
    }
    await this.loadCase(parsed as Record<string, unknown>);
  }

  /** Submit the case, stream its diagnosis, then open a refinement session. */
  async loadCase(caseDoc: Record<string, unknown>): Promise<void> {
    try {
      const caseId = await this.client.submitCase(caseDoc);
      const activeCase = { ...caseDoc, case_id: caseId } as unknown as PatientCase;
      this.commit({ ...beginRun(this.state), activeCase, caseId, history: [], viewedTurn: null });
      for await (const event of this.client.diagnose(caseId)) {
        this.commit(applyStreamEvent(this.state, event, null));
      }
      if (this.state.phase === 'done') {
        const session = await this.client.openSession(caseId);
        this.commit({ ...this.state, sessionId: session.session_id });
      }
    } catch (error) {
      this.commit({ ...setNotice(this.state, messageOf(error)), phase: 'error' });
    }
  }

  /** Send one instruction; empty text is rejected locally with no network call. */
  async sendInstruction(text: string): Promise<void> {
    const instruction = text.trim();
    if (instruction.length === 0) {
      this.commit(setNotice(this.state, 'Instruction must be non-empty.'));
      return;
    }
    if (this.state.sessionId === null) {
      this.commit(setNotice(this.state, 'No open session; load a case first.'));
      return;
    }
    if (this.state.phase === 'streaming') return; // one turn at a time
    this.lastInstruction = instruction;
    this.commit(beginRun(this.state));
    try {
      for await (const event of this.client.instruct(this.state.sessionId, instruction)) {
        this.commit(applyStreamEvent(this.state, event, instruction));
      }
      if (this.state.phase === 'done') {
        this.commit(setDraft(this.state, ''));
      }
    } catch (error) {
      const conflict = error instanceof ServiceError && error.status === 409;
      this.commit({
        ...setNotice(this.state, messageOf(error)),
        phase: this.state.history.length > 0 ? 'done' : 'idle',
        inputLocked: conflict,
      });
    }
  }

  /** Re-send the last instruction after a conflict notice. */
  async retry(): Promise<void> {
    if (this.lastInstruction === null) return;
    this.commit({ ...this.state, inputLocked: false, inlineNotice: null });
    await this.sendInstruction(this.lastInstruction);
  }

  select(diagnosis: string | null): void {
    const toggled = this.state.selectedDiagnosis === diagnosis ? null : diagnosis;
    this.commit(selectDiagnosis(this.state, toggled));
  }

  toggleRef(diagnosis: string, explanation: string): void {
    this.commit(toggleReference(this.state, diagnosis, explanation));
  }

  inspectTurn(index: number): void {
    this.commit(viewTurn(this.state, index));
  }

  /** Track textarea edits without re-rendering (re-render would drop focus). */
  rememberDraft(text: string): void {
    this.state = setDraft(this.state, text);
  }
}

export function bootstrap(root: HTMLElement, baseUrl: string = ''): ConsoleController {
  const controller = new ConsoleController(new ServiceClient(baseUrl), (html) => {
    root.innerHTML = html;
  });

  root.addEventListener('click', (event) => {
    const target = event.target as HTMLElement | null;
    if (!target) return;
    const chip = target.closest<HTMLElement>('.turn-chip');
    if (chip && chip.dataset['turn'] !== undefined) {
      controller.inspectTurn(Number(chip.dataset['turn']));
      return;
    }
    if (target.closest('[data-action="retry"]')) {
      void controller.retry();
      return;
    }
    const explanation = target.closest<HTMLElement>('.explanation');
    if (explanation) {
      const diagnosis = explanation.dataset['diagnosis'];
      const text = explanation.dataset['explanation'];
      if (diagnosis !== undefined && text !== undefined) controller.toggleRef(diagnosis, text);
      return;
    }
    const candidate = target.closest<HTMLElement>('.candidate');
    if (candidate) {
      controller.select(candidate.dataset['diagnosis'] ?? null);
    }
  });

  root.addEventListener('submit', (event) => {
    const form = event.target as HTMLFormElement | null;
    if (!form) return;
    event.preventDefault();
    if (form.dataset['action'] === 'instruct') {
      const field = form.querySelector<HTMLTextAreaElement>('textarea[name="instruction"]');
      void controller.sendInstruction(field ? field.value : '');
    } else if (form.dataset['action'] === 'load-case') {
      const field = form.querySelector<HTMLTextAreaElement>('textarea[name="case-json"]');
      void controller.loadCaseText(field ? field.value : '');
    }
  });

  root.addEventListener('input', (event) => {
    const field = event.target as HTMLTextAreaElement | null;
    if (field && field.name === 'instruction') {
      controller.rememberDraft(field.value);
    }
  });

  controller.render();
  return controller;
}

// Browser entry point; inert under node so tests can import the controller.
if (typeof document !== 'undefined') {
  const root = document.getElementById('app');
  if (root) bootstrap(root);
}
