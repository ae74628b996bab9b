/** Thin typed client for the studio service HTTP API. */

export interface MarkerJson {
  id: number;
  label: string;
  voxels: number[][];
}

export interface MarkerSetJson {
  image_id: string;
  modality: string;
  markers: MarkerJson[];
}

export interface RunStatus {
  run_id: string;
  status: "pending" | "running" | "done" | "failed";
  error: string;
  modality: string;
  params: { n1: number; n2: number; seed: number; kernel: number };
  candidates: Record<string, number>;
}

export interface Pick {
  run: string;
  image: string;
  index: number;
}

export class StudioApi {
  constructor(readonly base: string = "") {}

  private async json<T>(path: string, init?: RequestInit): Promise<T> {
    const resp = await fetch(this.base + path, init);
    if (!resp.ok) {
      const body = await resp.text();
      throw new Error(`${init?.method ?? "GET"} ${path} -> ${resp.status}: ${body}`);
    }
    return (await resp.json()) as T;
  }

  createSession(): Promise<{ session_id: string; images: string[] }> {
    return this.json("/api/sessions", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: "{}",
    });
  }

  sliceUrl(imageId: string, modality: string, axis: string, index: number): string {
    const q = new URLSearchParams({ modality, axis, index: String(index) });
    return `${this.base}/api/images/${imageId}/slice?${q}`;
  }

  putMarkers(sessionId: string, body: MarkerSetJson): Promise<{ voxels: number }> {
    return this.json(`/api/sessions/${sessionId}/markers`, {
      method: "PUT",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  launchRun(
    sessionId: string,
    n1: number,
    n2: number,
    seed: number,
    modality: string,
  ): Promise<{ run_id: string }> {
    return this.json(`/api/sessions/${sessionId}/runs`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ n1, n2, seed, modality }),
    });
  }

  runStatus(runId: string): Promise<RunStatus> {
    return this.json(`/api/runs/${runId}`);
  }

  /** Poll until the run reaches a terminal state. */
  async waitRun(runId: string, intervalMs = 500, timeoutMs = 120000): Promise<RunStatus> {
    const deadline = Date.now() + timeoutMs;
    for (;;) {
      const status = await this.runStatus(runId);
      if (status.status === "done" || status.status === "failed") return status;
      if (Date.now() > deadline) throw new Error(`run ${runId} timed out`);
      await new Promise((resolve) => setTimeout(resolve, intervalMs));
    }
  }

  activationUrl(runId: string, k: number, image: string, axis: string, index: number): string {
    const q = new URLSearchParams({ image, axis, index: String(index) });
    return `${this.base}/api/runs/${runId}/candidates/${k}/activation?${q}`;
  }

  postBank(sessionId: string, picks: Pick[], modality: string, targetSize: number) {
    return this.json<{ picks: number }>(`/api/sessions/${sessionId}/bank`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ picks, modality, target_size: targetSize }),
    });
  }

  async exportBank(sessionId: string, modality: string): Promise<ArrayBuffer> {
    const resp = await fetch(
      `${this.base}/api/sessions/${sessionId}/export?modality=${modality}`,
    );
    if (!resp.ok) throw new Error(`export -> ${resp.status}`);
    return resp.arrayBuffer();
  }
}
