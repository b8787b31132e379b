// Trajectory drawing tool: viewport clicks pick 3D floor points on the
// server, the collected polyline posts as a trajectory, and the returned
// 8 view tracks render as an overlay grid of thumbnails with polylines.

import { ApiClient, ApiError, ViewTrack } from "./api.js";
import { Viewport } from "./viewport.js";

export interface TrajectoryElements {
  grid: HTMLElement;
  pointCount: HTMLElement;
  hint: HTMLElement;
  exportButton: HTMLButtonElement;
}

export class TrajectoryTool {
  points: [number, number, number][] = [];
  trajectoryId: string | null = null;
  tracks: ViewTrack[] = [];

  constructor(
    private api: ApiClient,
    private sessionId: string,
    private viewport: Viewport,
    private el: TrajectoryElements,
  ) {
    this.el.exportButton.disabled = true;
  }

  /** A click in the viewport at pixel (u, v): ask the server for the floor
   * point under it; clicks that miss the floor are ignored with a hint. */
  async click(u: number, v: number): Promise<void> {
    try {
      const resp = await this.api.floorPick(this.sessionId, {
        u, v, ...this.viewport.params(),
      });
      this.points.push(resp.point);
      this.el.pointCount.textContent = String(this.points.length);
      this.el.hint.textContent = "";
    } catch (err) {
      if (err instanceof ApiError && err.status === 422) {
        this.el.hint.textContent = "click missed the floor plane";
        return;
      }
      throw err;
    }
  }

  async submit(): Promise<void> {
    const resp = await this.api.addTrajectory(this.sessionId, this.points);
    this.trajectoryId = resp.trajectory_id;
    this.tracks = resp.tracks;
    // the stored server copy is the source of truth for the display
    this.points = resp.tracks.length
      ? this.points.slice(0, resp.tracks[0].points2d.length)
      : this.points;
    this.el.pointCount.textContent = String(this.points.length);
    this.renderGrid();
    this.el.exportButton.disabled = false;
  }

  clear(): void {
    this.points = [];
    this.trajectoryId = null;
    this.tracks = [];
    this.el.pointCount.textContent = "0";
    this.el.grid.replaceChildren();
    this.el.exportButton.disabled = true;
  }

  /** Download the 8-view conditioning-bundle archive for external feature
   * and mask rasters already on the server's disk. */
  async exportBundles(features: string, mask: string, k = 4): Promise<Blob> {
    if (!this.trajectoryId) throw new Error("no trajectory submitted");
    return this.api.makeBundles({
      session_id: this.sessionId,
      trajectory_id: this.trajectoryId,
      features, mask, k,
    });
  }

  private renderGrid(): void {
    this.el.grid.replaceChildren();
    for (const track of this.tracks) {
      this.el.grid.appendChild(trackThumbnail(track));
    }
  }
}

/** One preview thumbnail: an SVG polyline over the track's 2D points,
 * dashed across invisible segments. */
export function trackThumbnail(track: ViewTrack,
                               size = 128): SVGSVGElement {
  const ns = "http://www.w3.org/2000/svg";
  const svg = document.createElementNS(ns, "svg");
  svg.setAttribute("class", "track-thumb");
  svg.setAttribute("viewBox", `0 0 ${size} ${size}`);
  const cam = track.camera as { pinhole?: { width?: number; height?: number } };
  const w = cam?.pinhole?.width ?? size;
  const h = cam?.pinhole?.height ?? size;
  for (let i = 1; i < track.points2d.length; i++) {
    const [u0, v0] = track.points2d[i - 1];
    const [u1, v1] = track.points2d[i];
    const line = document.createElementNS(ns, "line");
    line.setAttribute("x1", String((u0 / w) * size));
    line.setAttribute("y1", String((v0 / h) * size));
    line.setAttribute("x2", String((u1 / w) * size));
    line.setAttribute("y2", String((v1 / h) * size));
    const visible = track.visible[i - 1] && track.visible[i];
    line.setAttribute("class", visible ? "seg-visible" : "seg-hidden");
    if (!visible) line.setAttribute("stroke-dasharray", "3 3");
    svg.appendChild(line);
  }
  for (let i = 0; i < track.points2d.length; i++) {
    const [u, v] = track.points2d[i];
    const dot = document.createElementNS(ns, "circle");
    dot.setAttribute("cx", String((u / w) * size));
    dot.setAttribute("cy", String((v / h) * size));
    dot.setAttribute("r", "2");
    dot.setAttribute("class",
                     track.visible[i] ? "pt-visible" : "pt-hidden");
    svg.appendChild(dot);
  }
  return svg;
}
