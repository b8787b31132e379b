// Object placement panel: edit a bounding-box prior, run the physics pose
// job, watch its loss trace live, accept the result.
//
// Prior edits and the optimize button are disabled while the job runs,
// mirroring the server's one-mutating-job-per-session contract.

import { ApiClient, ApiError, JobEvent, Pose, PosePrior } from "./api.js";
import { Viewport } from "./viewport.js";

export interface PlacementElements {
  optimizeButton: HTMLButtonElement;
  acceptButton: HTMLButtonElement;
  status: HTMLElement;
  /** editable prior inputs, disabled while a job runs */
  priorInputs: HTMLInputElement[];
}

export interface TracePoint {
  iteration: number;
  L_collision: number;
  L_gravity: number;
  total: number;
}

export class PlacementPanel {
  prior: PosePrior = { center: [0, 0, 0], dims: [1, 1, 1], yaw: 0 };
  objectId: string | null = null;
  jobId: string | null = null;
  running = false;
  trace: TracePoint[] = [];
  livePose: Pose | null = null;
  acceptedPose: Pose | null = null;
  private unsubscribe: (() => void) | null = null;

  constructor(
    private api: ApiClient,
    private sessionId: string,
    private viewport: Viewport,
    private el: PlacementElements,
    private objectCloud: string,
  ) {
    el.optimizeButton.addEventListener("click", () => { void this.optimize(); });
    el.acceptButton.addEventListener("click", () => this.accept());
  }

  setPrior(prior: PosePrior): void {
    if (this.running) return;  // locked while the job runs
    this.prior = prior;
  }

  async place(): Promise<Pose> {
    const resp = await this.api.addObject(this.sessionId, {
      cloud: this.objectCloud,
      prior: this.prior,
    });
    this.objectId = resp.object_id;
    this.livePose = resp.pose;
    this.viewport.requestRender();
    return resp.pose;
  }

  async optimize(iterations = 500): Promise<void> {
    if (!this.objectId) await this.place();
    try {
      const { job_id } = await this.api.optimize(this.objectId!, { iterations });
      this.jobId = job_id;
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        this.el.status.textContent = `busy: ${err.message}`;
        this.setLocked(true);
        return;
      }
      throw err;
    }
    this.trace = [];
    this.setLocked(true);
    this.unsubscribe = this.api.jobEvents(this.jobId, (e) => this.onEvent(e));
  }

  private onEvent(e: JobEvent): void {
    if (e.state !== undefined) {
      this.running = false;
      this.setLocked(false);
      if (e.pose) this.livePose = e.pose;
      this.el.status.textContent = e.state;
      this.unsubscribe?.();
      this.unsubscribe = null;
      this.viewport.requestRender();  // committed pose is visible now
      return;
    }
    this.trace.push({
      iteration: e.iteration!,
      L_collision: e.L_collision!,
      L_gravity: e.L_gravity!,
      total: e.total!,
    });
    if (e.pose) this.livePose = e.pose;
    this.el.status.textContent = `iteration ${e.iteration}`;
    this.viewport.requestRender();
  }

  private setLocked(locked: boolean): void {
    this.running = locked;
    this.el.optimizeButton.disabled = locked;
    this.el.acceptButton.disabled = locked;
    for (const input of this.el.priorInputs) input.disabled = locked;
  }

  /** Accepting without an optimization commits the seated initial pose. */
  accept(): Pose | null {
    if (this.running || !this.livePose) return null;
    this.acceptedPose = this.livePose;
    this.el.status.textContent = "accepted";
    return this.acceptedPose;
  }
}
