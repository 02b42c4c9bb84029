/** Typed client for the review service HTTP API. */

export interface Candidate {
  individual_id: string;
  image_id: string;
  distance: number;
  thumbnail: string;
}

export interface QueryResponse {
  query_token: string;
  db_version: number;
  candidates: Candidate[];
}

export interface Health {
  version: string;
  db_version: number;
  record_count: number;
}

export interface IndividualEntry {
  individual_id: string;
  image_count: number;
}

export interface ConfirmResponse {
  new_record: { individual_id: string; image_id: string };
  db_version: number;
}

export interface CreateResponse extends ConfirmResponse {
  individual_id: string;
}

export class ApiError extends Error {
  constructor(
    public status: number,
    public detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

async function parseOrThrow<T>(resp: Response): Promise<T> {
  if (!resp.ok) {
    let detail = resp.statusText;
    try {
      const body = (await resp.json()) as { detail?: string };
      if (body.detail) detail = body.detail;
    } catch {
      // non-JSON error body; keep the status text
    }
    throw new ApiError(resp.status, detail);
  }
  return (await resp.json()) as T;
}

export class ReviewApi {
  constructor(
    private readonly base: string = "",
    private readonly fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  async health(): Promise<Health> {
    return parseOrThrow(await this.fetchImpl(`${this.base}/api/health`));
  }

  async individuals(): Promise<IndividualEntry[]> {
    return parseOrThrow(await this.fetchImpl(`${this.base}/api/individuals`));
  }

  async query(image: File | Blob, k: number): Promise<QueryResponse> {
    const form = new FormData();
    form.append("image", image);
    form.append("k", String(k));
    const resp = await this.fetchImpl(`${this.base}/api/query`, {
      method: "POST",
      body: form,
    });
    return parseOrThrow(await Promise.resolve(resp));
  }

  async confirm(queryToken: string, individualId: string): Promise<ConfirmResponse> {
    const resp = await this.fetchImpl(`${this.base}/api/confirm`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ query_token: queryToken, individual_id: individualId }),
    });
    return parseOrThrow(await Promise.resolve(resp));
  }

  async createIndividual(queryToken: string, newId: string): Promise<CreateResponse> {
    const resp = await this.fetchImpl(`${this.base}/api/individuals`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ query_token: queryToken, new_individual_id: newId }),
    });
    return parseOrThrow(await Promise.resolve(resp));
  }
}
