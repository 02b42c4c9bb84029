/** Session state for the confirmation loop.
 *
 * The state machine enforces three invariants: candidates are only ever the
 * verbatim payload of one query response (never reordered or edited), at
 * most one mutation is in flight, and actions are unavailable while one is
 * pending.
 */

import type { Candidate, QueryResponse } from "./api.js";

export type Phase = "idle" | "querying" | "reviewing" | "mutating";

export interface SessionState {
  phase: Phase;
  queryToken: string | null;
  candidates: Candidate[];
  selected: string | null; // individual_id of the highlighted candidate
  dbVersion: number | null;
  error: string | null;
}

export function initialState(): SessionState {
  return {
    phase: "idle",
    queryToken: null,
    candidates: [],
    selected: null,
    dbVersion: null,
    error: null,
  };
}

export function startQuery(state: SessionState): SessionState {
  if (state.phase === "mutating") {
    throw new Error("cannot start a query while a mutation is in flight");
  }
  return { ...initialState(), phase: "querying", dbVersion: state.dbVersion };
}

export function queryArrived(state: SessionState, response: QueryResponse): SessionState {
  if (state.phase !== "querying") {
    throw new Error(`query response in phase ${state.phase}`);
  }
  assertRankedByDistance(response.candidates);
  return {
    phase: "reviewing",
    queryToken: response.query_token,
    candidates: response.candidates,
    selected: null,
    dbVersion: response.db_version,
    error: null,
  };
}

export function selectCandidate(state: SessionState, individualId: string): SessionState {
  if (state.phase !== "reviewing") {
    throw new Error("no active query to select within");
  }
  if (!state.candidates.some((c) => c.individual_id === individualId)) {
    throw new Error(`unknown candidate ${individualId}`);
  }
  return { ...state, selected: individualId };
}

export function startMutation(state: SessionState): SessionState {
  if (state.phase === "mutating") {
    throw new Error("a mutation is already in flight");
  }
  if (state.phase !== "reviewing" || state.queryToken === null) {
    throw new Error("nothing to confirm: no active query");
  }
  return { ...state, phase: "mutating" };
}

export function mutationSucceeded(state: SessionState, dbVersion: number): SessionState {
  if (state.phase !== "mutating") {
    throw new Error("no mutation in flight");
  }
  return { ...initialState(), dbVersion };
}

export function mutationFailed(state: SessionState, error: string): SessionState {
  if (state.phase !== "mutating") {
    throw new Error("no mutation in flight");
  }
  // Expired tokens force a fresh query; other errors return to review.
  if (error.includes("expired")) {
    return { ...initialState(), dbVersion: state.dbVersion, error };
  }
  return { ...state, phase: "reviewing", error };
}

export function failQuery(state: SessionState, error: string): SessionState {
  return { ...initialState(), dbVersion: state.dbVersion, error };
}

export function actionsEnabled(state: SessionState): boolean {
  return state.phase === "reviewing" && state.queryToken !== null;
}

export function validateNewIndividualId(
  id: string,
  existing: readonly string[],
): string | null {
  const trimmed = id.trim();
  if (trimmed.length === 0) {
    return "enter an identifier";
  }
  if (!/^[A-Za-z0-9_-]+$/.test(trimmed)) {
    return "use letters, digits, '-' or '_' only";
  }
  if (existing.includes(trimmed)) {
    return `"${trimmed}" already exists`;
  }
  return null;
}

function assertRankedByDistance(candidates: readonly Candidate[]): void {
  for (let i = 1; i < candidates.length; i++) {
    const prev = candidates[i - 1];
    const here = candidates[i];
    if (prev !== undefined && here !== undefined && prev.distance > here.distance) {
      throw new Error("candidate list is not sorted by ascending distance");
    }
  }
}
