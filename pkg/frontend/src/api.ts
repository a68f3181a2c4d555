/**
 * Typed client for the annotation hub's HTTP JSON API.
 * All hub errors carry {code, message}; they surface here as HubError.
 */

export interface Task {
  id: string;
  round: number;
  pair_id: string;
  class_label: string;
  status: "pending" | "labeled" | "auto-labeled" | "skipped";
  label: number | null;
  annotator: string | null;
  reason: string | null;
  scored: number | null;
  source_url: string;
  mask_url: string;
  edited_url: string;
}

export interface NextTaskResponse {
  task: Task | null;
  pending: number;
}

export interface StudyInfo {
  id: string;
  seed: number;
  methods: string[];
  n_items: number;
}

export interface StudyItem {
  item_index: number;
  source_ref: string;
  mask_ref: string;
  /** blob refs in display order; method identities stay hidden server-side */
  panes: string[];
}

export interface StudyResults {
  study_id: string;
  methods: string[];
  n_items: number;
  n_annotators: number;
  success_rates: Record<string, number | null>;
}

export class HubError extends Error {
  constructor(
    public readonly code: string,
    message: string,
    public readonly status: number,
  ) {
    super(message);
  }
}

async function request<T>(base: string, path: string, init?: RequestInit): Promise<T> {
  let res: Response;
  try {
    res = await fetch(`${base}${path}`, {
      headers: { "content-type": "application/json" },
      ...init,
    });
  } catch (err) {
    throw new HubError("network", String(err), 0);
  }
  if (!res.ok) {
    let code = "http_error";
    let message = `${res.status} ${res.statusText}`;
    try {
      const body = (await res.json()) as { code?: string; message?: string };
      code = body.code ?? code;
      message = body.message ?? message;
    } catch {
      /* non-JSON error body */
    }
    throw new HubError(code, message, res.status);
  }
  return (await res.json()) as T;
}

export class HubClient {
  constructor(public readonly baseUrl: string) {}

  blobUrl(ref: string): string {
    return `${this.baseUrl}/blobs/${ref}`;
  }

  nextTask(annotator: string, round?: number): Promise<NextTaskResponse> {
    const params = new URLSearchParams({ annotator });
    if (round !== undefined) params.set("round", String(round));
    return request(this.baseUrl, `/tasks/next?${params}`);
  }

  getTask(taskId: string): Promise<{ task: Task }> {
    return request(this.baseUrl, `/tasks/${taskId}`);
  }

  submitLabel(taskId: string, label: 0 | 1, annotator: string, reason?: string): Promise<{ task: Task }> {
    return request(this.baseUrl, `/tasks/${taskId}/label`, {
      method: "POST",
      body: JSON.stringify({ label, annotator, reason: reason ?? null }),
    });
  }

  skipTask(taskId: string, annotator: string): Promise<{ task: Task }> {
    return request(this.baseUrl, `/tasks/${taskId}/skip`, {
      method: "POST",
      body: JSON.stringify({ annotator }),
    });
  }

  studyInfo(studyId: string): Promise<StudyInfo> {
    return request(this.baseUrl, `/studies/${studyId}`);
  }

  studyItems(studyId: string): Promise<{ items: StudyItem[] }> {
    return request(this.baseUrl, `/studies/${studyId}/items`);
  }

  submitSelection(
    studyId: string,
    itemIndex: number,
    annotator: string,
    selectedPositions: number[],
  ): Promise<{ ok: boolean }> {
    return request(this.baseUrl, `/studies/${studyId}/items/${itemIndex}/selections`, {
      method: "POST",
      body: JSON.stringify({ annotator, selected_positions: selectedPositions }),
    });
  }

  studyResults(studyId: string): Promise<StudyResults> {
    return request(this.baseUrl, `/studies/${studyId}/results`);
  }
}
