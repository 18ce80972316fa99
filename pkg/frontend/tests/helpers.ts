import { readFileSync } from 'node:fs';

import { applyStreamEvent, beginRun, type ViewState } from '../src/state.js';
import type { DiagnosisResult } from '../src/types.js';

function loadFixture(name: string): DiagnosisResult {
  return JSON.parse(readFileSync(new URL(`./fixtures/${name}`, import.meta.url), 'utf-8')) as DiagnosisResult;
}

/** Initial diagnosis of the demo case: the full eight-stage trace. */
export const demoResult: DiagnosisResult = loadFixture('result.json');

/** One refinement turn on the demo case: ranking swapped at positions 2 and 3. */
export const refinedResult: DiagnosisResult = loadFixture('refined.json');

/** Feed a whole run's events (stages, then the result) through the state. */
export function playRun(state: ViewState, result: DiagnosisResult, instruction: string | null): ViewState {
  let next = beginRun(state);
  for (const record of result.trace) {
    next = applyStreamEvent(next, { event: 'stage', record }, instruction);
  }
  return applyStreamEvent(next, { event: 'result', result }, instruction);
}
