// Server-rendered viewport with orbit controls.
//
// Contracts: at most one render request in flight (gesture bursts coalesce
// into a trailing request), and a frame is swapped in only when its camera
// stamp still matches the current orbit state, so a slow earlier response
// can never overwrite a newer one. Render failures surface in a banner and
// keep the previous frame.

import { ApiClient, OrbitParams } from "./api.js";

export interface ViewportElements {
  image: HTMLImageElement;
  banner: HTMLElement;
}

function stampOf(p: OrbitParams): string {
  return `${p.azimuth}|${p.elevation}|${p.radius ?? ""}`;
}

export class Viewport {
  azimuth = 0;
  elevation = 0;
  radius: number | undefined;
  /** stamp of the currently displayed frame ("" until the first frame) */
  displayedStamp = "";
  private inFlight = false;
  private dirty = false;
  private objectUrl: string | null = null;

  constructor(
    private api: ApiClient,
    private sessionId: string,
    private el: ViewportElements,
  ) {}

  params(): OrbitParams {
    return { azimuth: this.azimuth, elevation: this.elevation,
             radius: this.radius };
  }

  orbit(dAzimuth: number, dElevation: number): void {
    this.azimuth = (this.azimuth + dAzimuth) % 360;
    if (this.azimuth < 0) this.azimuth += 360;
    this.elevation = Math.max(-89, Math.min(89, this.elevation + dElevation));
    this.requestRender();
  }

  requestRender(): void {
    if (this.inFlight) {
      this.dirty = true;  // coalesce the burst; trailing camera wins
      return;
    }
    this.inFlight = true;
    const params = this.params();
    const stamp = stampOf(params);
    this.api.render(this.sessionId, params).then(
      (blob) => this.onFrame(stamp, blob),
      (err) => this.onError(err),
    );
  }

  private onFrame(stamp: string, blob: Blob): void {
    this.inFlight = false;
    if (stamp === stampOf(this.params())) {
      if (this.objectUrl) URL.revokeObjectURL(this.objectUrl);
      this.objectUrl = URL.createObjectURL(blob);
      this.el.image.src = this.objectUrl;
      this.displayedStamp = stamp;
      this.el.banner.hidden = true;
    }
    // a stale response is discarded; the queued camera renders next
    this.maybeRerender();
  }

  private onError(err: unknown): void {
    this.inFlight = false;
    this.el.banner.hidden = false;
    this.el.banner.textContent = `render failed: ${String(err)}`;
    this.maybeRerender();
  }

  private maybeRerender(): void {
    if (this.dirty) {
      this.dirty = false;
      this.requestRender();
    }
  }
}
