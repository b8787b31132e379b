// Studio entry point: wires the panels to the live service.

import { HttpApiClient } from "./api.js";
import { PlacementPanel } from "./placement.js";
import { TrajectoryTool } from "./trajectory.js";
import { Viewport } from "./viewport.js";

function byId<T extends HTMLElement>(id: string): T {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
}

export async function start(): Promise<void> {
  const api = new HttpApiClient("");
  const scenePath = byId<HTMLInputElement>("scene-path");
  const objectPath = byId<HTMLInputElement>("object-path");

  byId<HTMLButtonElement>("load-scene").addEventListener("click", async () => {
    const session = await api.createSession({ cloud: scenePath.value });
    byId("session-label").textContent =
      `${session.id} (${session.points} points, ${session.surfels} surfels)`;

    const viewport = new Viewport(api, session.id, {
      image: byId<HTMLImageElement>("viewport-image"),
      banner: byId("viewport-banner"),
    });
    viewport.requestRender();

    const viewportImage = byId<HTMLImageElement>("viewport-image");
    let dragging = false;
    let last: [number, number] = [0, 0];
    viewportImage.addEventListener("pointerdown", (e) => {
      dragging = true;
      last = [e.clientX, e.clientY];
    });
    window.addEventListener("pointerup", () => { dragging = false; });
    window.addEventListener("pointermove", (e) => {
      if (!dragging) return;
      viewport.orbit((e.clientX - last[0]) * 0.5, (e.clientY - last[1]) * 0.5);
      last = [e.clientX, e.clientY];
    });

    const placement = new PlacementPanel(api, session.id, viewport, {
      optimizeButton: byId<HTMLButtonElement>("optimize"),
      acceptButton: byId<HTMLButtonElement>("accept"),
      status: byId("job-status"),
      priorInputs: Array.from(
        document.querySelectorAll<HTMLInputElement>(".prior-input")),
    }, objectPath.value);
    byId<HTMLButtonElement>("place").addEventListener("click", async () => {
      placement.setPrior(readPrior());
      await placement.place();
    });

    const trajectory = new TrajectoryTool(api, session.id, viewport, {
      grid: byId("track-grid"),
      pointCount: byId("point-count"),
      hint: byId("pick-hint"),
      exportButton: byId<HTMLButtonElement>("export-bundles"),
    });
    viewportImage.addEventListener("dblclick", (e) => {
      const rect = viewportImage.getBoundingClientRect();
      const u = ((e.clientX - rect.left) / rect.width) * 256;
      const v = ((e.clientY - rect.top) / rect.height) * 256;
      void trajectory.click(u, v);
    });
    byId<HTMLButtonElement>("submit-trajectory").addEventListener(
      "click", () => { void trajectory.submit(); });
    byId<HTMLButtonElement>("clear-trajectory").addEventListener(
      "click", () => trajectory.clear());
    byId<HTMLButtonElement>("export-bundles").addEventListener(
      "click", async () => {
        const blob = await trajectory.exportBundles(
          byId<HTMLInputElement>("features-path").value,
          byId<HTMLInputElement>("mask-path").value);
        const a = document.createElement("a");
        a.href = URL.createObjectURL(blob);
        a.download = "bundles.zip";
        a.click();
        URL.revokeObjectURL(a.href);
      });
  });

  function readPrior() {
    const num = (id: string) => Number(byId<HTMLInputElement>(id).value);
    return {
      center: [num("prior-cx"), num("prior-cy"), num("prior-cz")] as
        [number, number, number],
      dims: [num("prior-dx"), num("prior-dy"), num("prior-dz")] as
        [number, number, number],
      yaw: num("prior-yaw"),
    };
  }
}

if (typeof document !== "undefined" && document.getElementById("studio")) {
  void start();
}
