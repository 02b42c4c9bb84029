/** Wire the review loop: submit a query, inspect candidates, confirm/create. */

import { ApiError, ReviewApi } from "./api.js";
import {
  actionsEnabled,
  failQuery,
  initialState,
  mutationFailed,
  mutationSucceeded,
  queryArrived,
  selectCandidate,
  startMutation,
  startQuery,
  validateNewIndividualId,
  type SessionState,
} from "./state.js";
import { renderBanner, renderGallery, renderIndividualCount } from "./ui.js";

const api = new ReviewApi();
let state: SessionState = initialState();
let knownIndividuals: string[] = [];

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

const fileInput = el<HTMLInputElement>("query-file");
const kInput = el<HTMLInputElement>("query-k");
const submitBtn = el<HTMLButtonElement>("query-submit");
const queryPreview = el<HTMLImageElement>("query-preview");
const gallery = el<HTMLElement>("gallery");
const banner = el<HTMLElement>("banner");
const confirmBtn = el<HTMLButtonElement>("confirm-btn");
const newIdInput = el<HTMLInputElement>("new-id");
const createBtn = el<HTMLButtonElement>("create-btn");
const newIdError = el<HTMLElement>("new-id-error");
const individualCount = el<HTMLElement>("individual-count");
const dbVersionEl = el<HTMLElement>("db-version");

function setState(next: SessionState): void {
  state = next;
  render();
}

function render(): void {
  const enabled = actionsEnabled(state);
  renderGallery(document, gallery, state.candidates, state.selected, enabled, {
    onSelect: (id) => setState(selectCandidate(state, id)),
  });
  renderBanner(banner, state.error);
  confirmBtn.disabled = !(enabled && state.selected !== null);
  createBtn.disabled = !enabled;
  newIdInput.disabled = !enabled;
  submitBtn.disabled = state.phase === "querying" || state.phase === "mutating";
  dbVersionEl.textContent = state.dbVersion === null ? "-" : String(state.dbVersion);
}

async function refreshIndividuals(): Promise<void> {
  const entries = await api.individuals();
  knownIndividuals = entries.map((e) => e.individual_id);
  renderIndividualCount(individualCount, entries.length);
}

async function submitQuery(): Promise<void> {
  const file = fileInput.files?.[0];
  if (!file) {
    setState(failQuery(state, "choose an image first"));
    return;
  }
  queryPreview.src = URL.createObjectURL(file);
  queryPreview.hidden = false;
  setState(startQuery(state));
  try {
    const k = Math.max(1, Number(kInput.value) || 10);
    const response = await api.query(file, k);
    setState(queryArrived(state, response));
  } catch (err) {
    setState(failQuery(state, describe(err)));
  }
}

async function confirmSelected(): Promise<void> {
  if (state.selected === null || state.queryToken === null) return;
  const token = state.queryToken;
  const target = state.selected;
  setState(startMutation(state));
  try {
    const result = await api.confirm(token, target);
    setState(mutationSucceeded(state, result.db_version));
    await refreshIndividuals();
  } catch (err) {
    setState(mutationFailed(state, describe(err)));
  }
}

async function createIndividual(): Promise<void> {
  if (state.queryToken === null) return;
  const problem = validateNewIndividualId(newIdInput.value, knownIndividuals);
  newIdError.textContent = problem ?? "";
  if (problem !== null) return;
  const token = state.queryToken;
  const newId = newIdInput.value.trim();
  setState(startMutation(state));
  try {
    const result = await api.createIndividual(token, newId);
    setState(mutationSucceeded(state, result.db_version));
    newIdInput.value = "";
    await refreshIndividuals();
  } catch (err) {
    setState(mutationFailed(state, describe(err)));
  }
}

function describe(err: unknown): string {
  if (err instanceof ApiError) return err.detail;
  return err instanceof Error ? err.message : String(err);
}

submitBtn.addEventListener("click", () => void submitQuery());
confirmBtn.addEventListener("click", () => void confirmSelected());
createBtn.addEventListener("click", () => void createIndividual());

void (async () => {
  try {
    const health = await api.health();
    dbVersionEl.textContent = String(health.db_version);
    await refreshIndividuals();
  } catch (err) {
    renderBanner(banner, `service unreachable: ${describe(err)}`);
  }
  render();
})();
