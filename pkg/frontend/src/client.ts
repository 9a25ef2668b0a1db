export interface JobProgress {
  done: number;
  total: number;
}

export interface JobRecord {
  job_id: string;
  kind: string;
  state: "queued" | "running" | "done" | "failed";
  progress: JobProgress;
  inputs: Record<string, unknown>;
  outputs: Record<string, string>;
  error: string | null;
}

export interface TraceRow {
  step: number;
  t: number;
  iteration: number;
  loss_before: number;
  loss_after: number;
  grad_norm: number;
  step_scale: number;
  beta: number;
}

export interface GenerateRequest {
  sketch: Uint8Array;
  classLabel: string;
  seed: number;
  beta?: number;
  guidedSteps?: number;
}

export interface EditRequest extends GenerateRequest {
  exemplar: Uint8Array;
  subStart?: number;
  subEnd?: number;
  substitute?: boolean;
}

export class ServiceError extends Error {
  readonly status: number;
  readonly detail: string;

  constructor(status: number, detail: string) {
    super(`service responded ${status}: ${detail}`);
    this.status = status;
    this.detail = detail;
  }
}

function pngBlob(bytes: Uint8Array): Blob {
  return new Blob([new Uint8Array(bytes)], { type: "image/png" });
}

const sleep = (ms: number) => new Promise<void>((resolve) => setTimeout(resolve, ms));

export class JobsClient {
  private readonly baseUrl: string;
  private readonly fetchFn: typeof fetch;

  constructor(baseUrl: string, fetchFn: typeof fetch = fetch) {
    this.baseUrl = baseUrl.replace(/\/$/, "");
    this.fetchFn = fetchFn;
  }

  private async request(path: string, init?: RequestInit): Promise<Response> {
    const resp = await this.fetchFn(`${this.baseUrl}${path}`, init);
    if (!resp.ok) {
      let detail = resp.statusText;
      try {
        const body = (await resp.json()) as { detail?: string };
        if (body.detail) detail = body.detail;
      } catch {
        // non-JSON error body; keep the status text
      }
      throw new ServiceError(resp.status, detail);
    }
    return resp;
  }

  async health(): Promise<{ status: string; backbone: string }> {
    const resp = await this.request("/healthz");
    return resp.json();
  }

  async submitGenerate(req: GenerateRequest): Promise<string> {
    const form = new FormData();
    form.append("sketch", pngBlob(req.sketch), "sketch.png");
    this.appendCommon(form, req);
    const resp = await this.request("/jobs/generate", { method: "POST", body: form });
    const body = (await resp.json()) as { job_id: string };
    return body.job_id;
  }

  async submitEdit(req: EditRequest): Promise<string> {
    const form = new FormData();
    form.append("sketch", pngBlob(req.sketch), "sketch.png");
    form.append("exemplar", pngBlob(req.exemplar), "exemplar.png");
    this.appendCommon(form, req);
    if (req.subStart !== undefined) form.append("sub_start", String(req.subStart));
    if (req.subEnd !== undefined) form.append("sub_end", String(req.subEnd));
    if (req.substitute !== undefined) form.append("substitute", String(req.substitute));
    const resp = await this.request("/jobs/edit", { method: "POST", body: form });
    const body = (await resp.json()) as { job_id: string };
    return body.job_id;
  }

  private appendCommon(form: FormData, req: GenerateRequest): void {
    form.append("class", req.classLabel);
    form.append("seed", String(req.seed));
    if (req.beta !== undefined) form.append("beta", String(req.beta));
    if (req.guidedSteps !== undefined) form.append("guided_steps", String(req.guidedSteps));
  }

  async getJob(jobId: string): Promise<JobRecord> {
    const resp = await this.request(`/jobs/${jobId}`);
    return resp.json();
  }

  async getResult(jobId: string): Promise<Uint8Array> {
    const resp = await this.request(`/jobs/${jobId}/result`);
    return new Uint8Array(await resp.arrayBuffer());
  }

  async getTrace(jobId: string): Promise<TraceRow[]> {
    const resp = await this.request(`/jobs/${jobId}/trace`);
    const text = await resp.text();
    return text
      .split("\n")
      .filter((line) => line.trim().length > 0)
      .map((line) => JSON.parse(line) as TraceRow);
  }

  async getInput(jobId: string): Promise<Uint8Array> {
    const resp = await this.request(`/jobs/${jobId}/input`);
    return new Uint8Array(await resp.arrayBuffer());
  }

  // Poll the job record until it settles; 1 s cadence per the job API design.
  async waitForCompletion(
    jobId: string,
    onUpdate?: (record: JobRecord) => void,
    intervalMs = 1000,
  ): Promise<JobRecord> {
    for (;;) {
      const record = await this.getJob(jobId);
      if (onUpdate) onUpdate(record);
      if (record.state === "done" || record.state === "failed") return record;
      await sleep(intervalMs);
    }
  }
}
