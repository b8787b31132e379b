import { beforeEach, describe, expect, it, vi } from "vitest";

import { Viewport } from "../src/viewport.js";
import { MockApi } from "./mock.js";

let urlCounter = 0;
beforeEach(() => {
  urlCounter = 0;
  (URL as any).createObjectURL = vi.fn(() => `blob:mock-${urlCounter++}`);
  (URL as any).revokeObjectURL = vi.fn();
});

function makeViewport(api: MockApi) {
  const image = document.createElement("img");
  const banner = document.createElement("div");
  return { vp: new Viewport(api, "sess-1", { image, banner }), image, banner };
}

async function flush() {
  await Promise.resolve();
  await Promise.resolve();
}

describe("orbit_and_render", () => {
  it("plus-90-degree orbit requests the second ring azimuth", async () => {
    const api = new MockApi();
    const { vp } = makeViewport(api);
    vp.orbit(90, 0);
    await flush();
    const calls = api.callsOf("render");
    expect(calls.length).toBe(1);
    // matches ring_cameras entry 2 of the default ring: azimuth 90, elevation 0
    expect(calls[0].args[1]).toMatchObject({ azimuth: 90, elevation: 0 });
  });

  it("keeps at most one render in flight during a gesture burst", async () => {
    const api = new MockApi();
    api.manualRender = true;
    const { vp } = makeViewport(api);
    for (let i = 0; i < 6; i++) vp.orbit(10, 0);
    expect(api.callsOf("render").length).toBe(1);
    api.renderDeferreds[0].resolve(new Blob(["a"]));
    await flush();
    // exactly one trailing request for the final camera
    const calls = api.callsOf("render");
    expect(calls.length).toBe(2);
    expect(calls[1].args[1]).toMatchObject({ azimuth: 60 });
  });

  it("discards stale responses by camera stamp", async () => {
    const api = new MockApi();
    api.manualRender = true;
    const { vp, image } = makeViewport(api);
    vp.requestRender();          // frame A at azimuth 0
    vp.orbit(45, 0);             // camera moved; A is now stale
    expect(api.callsOf("render").length).toBe(1);
    api.renderDeferreds[0].resolve(new Blob(["stale"]));
    await flush();
    // stale frame discarded: nothing displayed yet
    expect(vp.displayedStamp).toBe("");
    expect(image.src).toBe("");
    // the queued request for azimuth 45 lands and displays
    expect(api.callsOf("render").length).toBe(2);
    api.renderDeferreds[1].resolve(new Blob(["fresh"]));
    await flush();
    expect(vp.displayedStamp).toBe("45|0|");
    expect(image.src).toContain("blob:mock-");
  });

  it("render failure shows the banner and keeps the previous frame", async () => {
    const api = new MockApi();
    api.manualRender = true;
    const { vp, image, banner } = makeViewport(api);
    vp.requestRender();
    api.renderDeferreds[0].resolve(new Blob(["good"]));
    await flush();
    const shown = image.src;
    expect(banner.hidden).toBe(true);
    vp.orbit(10, 0);
    api.renderDeferreds[1].reject(new Error("boom"));
    await flush();
    expect(banner.hidden).toBe(false);
    expect(banner.textContent).toContain("render failed");
    expect(image.src).toBe(shown);
  });
});
