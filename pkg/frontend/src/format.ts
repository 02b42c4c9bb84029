/** Presentation helpers. */

/** Distances render with exactly four decimals. */
export function formatDistance(distance: number): string {
  return distance.toFixed(4);
}

export function formatRank(rank: number): string {
  return `#${rank}`;
}

export function formatCount(n: number, noun: string): string {
  return `${n} ${noun}${n === 1 ? "" : "s"}`;
}
