/** DOM rendering for the review loop: thin layer over state.ts. */

import type { Candidate } from "./api.js";
import { formatCount, formatDistance, formatRank } from "./format.js";

export interface CandidateCardHandlers {
  onSelect(individualId: string): void;
}

export function renderCandidateCard(
  doc: Document,
  candidate: Candidate,
  rank: number,
  selected: boolean,
  enabled: boolean,
  handlers: CandidateCardHandlers,
): HTMLElement {
  const card = doc.createElement("button");
  card.type = "button";
  card.className = selected ? "card selected" : "card";
  card.disabled = !enabled;
  card.setAttribute(
    "aria-label",
    `rank ${rank}, individual ${candidate.individual_id}, distance ${formatDistance(candidate.distance)}`,
  );

  const img = doc.createElement("img");
  img.loading = "lazy"; // thumbnails fetch lazily
  img.src = candidate.thumbnail;
  img.alt = `best match image of ${candidate.individual_id}`;
  card.appendChild(img);

  const meta = doc.createElement("div");
  meta.className = "meta";
  const title = doc.createElement("span");
  title.className = "rank";
  title.textContent = `${formatRank(rank)} ${candidate.individual_id}`;
  const dist = doc.createElement("span");
  dist.className = "distance";
  dist.textContent = formatDistance(candidate.distance);
  meta.append(title, dist);
  card.appendChild(meta);

  card.addEventListener("click", () => handlers.onSelect(candidate.individual_id));
  return card;
}

export function renderGallery(
  doc: Document,
  container: HTMLElement,
  candidates: readonly Candidate[],
  selected: string | null,
  enabled: boolean,
  handlers: CandidateCardHandlers,
): void {
  container.replaceChildren();
  candidates.forEach((candidate, index) => {
    container.appendChild(
      renderCandidateCard(doc, candidate, index + 1, candidate.individual_id === selected, enabled, handlers),
    );
  });
  if (candidates.length === 0) {
    const empty = doc.createElement("p");
    empty.className = "empty";
    empty.textContent = "No candidates yet; submit a query image.";
    container.appendChild(empty);
  }
}

export function renderBanner(container: HTMLElement, message: string | null): void {
  container.hidden = message === null;
  container.textContent = message ?? "";
}

export function renderIndividualCount(el: HTMLElement, count: number): void {
  el.textContent = formatCount(count, "individual");
}
