// Typed client for the scenesmith HTTP service. The studio performs no
// geometry math of its own: every 3D quantity it shows is a server response.

export interface OrbitParams {
  azimuth: number;
  elevation: number;
  radius?: number;
}

export interface PosePrior {
  center: [number, number, number];
  dims: [number, number, number];
  yaw: number;
}

export interface Pose {
  translation: [number, number, number];
  yaw: number;
}

export interface ViewTrack {
  camera: unknown;
  points2d: [number, number][];
  visible: boolean[];
}

export interface JobEvent {
  iteration?: number;
  L_collision?: number;
  L_gravity?: number;
  total?: number;
  pose?: Pose;
  state?: "done" | "failed" | "cancelled";
}

export interface SessionInfo {
  id: string;
  points: number;
  surfels: number;
  floor: unknown | null;
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

export interface ApiClient {
  createSession(req: { cloud: string; surfels?: string }): Promise<SessionInfo>;
  render(sessionId: string, params: OrbitParams): Promise<Blob>;
  addObject(sessionId: string, req: { cloud: string; prior: PosePrior }):
    Promise<{ object_id: string; pose: Pose }>;
  optimize(objectId: string, req: { iterations?: number; lr?: number }):
    Promise<{ job_id: string }>;
  /** Subscribe to a job's SSE stream; returns an unsubscribe function. */
  jobEvents(jobId: string, onEvent: (e: JobEvent) => void): () => void;
  cancelJob(jobId: string): Promise<void>;
  addTrajectory(sessionId: string, points: [number, number, number][]):
    Promise<{ trajectory_id: string; tracks: ViewTrack[] }>;
  floorPick(sessionId: string, req: { u: number; v: number } & OrbitParams):
    Promise<{ point: [number, number, number] }>;
  makeBundles(req: { session_id: string; trajectory_id: string;
                     features: string; mask: string; k: number }): Promise<Blob>;
}

async function jsonOrThrow(resp: Response): Promise<any> {
  if (!resp.ok) {
    let detail = resp.statusText;
    try {
      detail = (await resp.json()).detail ?? detail;
    } catch { /* not json */ }
    throw new ApiError(resp.status, detail);
  }
  return resp.json();
}

export class HttpApiClient implements ApiClient {
  constructor(private base: string = "") {}

  async createSession(req: { cloud: string; surfels?: string }) {
    return jsonOrThrow(await fetch(`${this.base}/sessions`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(req),
    }));
  }

  async render(sessionId: string, params: OrbitParams): Promise<Blob> {
    const q = new URLSearchParams({
      azimuth: String(params.azimuth),
      elevation: String(params.elevation),
    });
    if (params.radius !== undefined) q.set("radius", String(params.radius));
    const resp = await fetch(
      `${this.base}/sessions/${sessionId}/render?${q.toString()}`);
    if (!resp.ok) throw new ApiError(resp.status, resp.statusText);
    return resp.blob();
  }

  async addObject(sessionId: string, req: { cloud: string; prior: PosePrior }) {
    return jsonOrThrow(await fetch(`${this.base}/sessions/${sessionId}/objects`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(req),
    }));
  }

  async optimize(objectId: string, req: { iterations?: number; lr?: number }) {
    return jsonOrThrow(await fetch(`${this.base}/objects/${objectId}/optimize`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(req),
    }));
  }

  jobEvents(jobId: string, onEvent: (e: JobEvent) => void): () => void {
    const source = new EventSource(`${this.base}/jobs/${jobId}/events`);
    source.onmessage = (msg) => {
      const event: JobEvent = JSON.parse(msg.data);
      onEvent(event);
      if (event.state) source.close();
    };
    source.onerror = () => source.close();
    return () => source.close();
  }

  async cancelJob(jobId: string): Promise<void> {
    await jsonOrThrow(await fetch(`${this.base}/jobs/${jobId}/cancel`,
                                  { method: "POST" }));
  }

  async addTrajectory(sessionId: string, points: [number, number, number][]) {
    return jsonOrThrow(await fetch(
      `${this.base}/sessions/${sessionId}/trajectory`, {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify({ points }),
      }));
  }

  async floorPick(sessionId: string, req: { u: number; v: number } & OrbitParams) {
    return jsonOrThrow(await fetch(
      `${this.base}/sessions/${sessionId}/floor/pick`, {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify(req),
      }));
  }

  async makeBundles(req: { session_id: string; trajectory_id: string;
                           features: string; mask: string; k: number }):
      Promise<Blob> {
    const resp = await fetch(`${this.base}/bundles`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(req),
    });
    if (!resp.ok) throw new ApiError(resp.status, resp.statusText);
    return resp.blob();
  }
}
