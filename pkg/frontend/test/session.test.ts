// @vitest-environment happy-dom
import { beforeEach, describe, expect, it } from "vitest";

import { RatingApi } from "../src/api.js";
import { RaterSession, SessionState } from "../src/session.js";
import { keyToAnswer, render } from "../src/view.js";
import { FakeService, morsTrials } from "./fakeservice.js";

function wire(service: FakeService, worker = "w1") {
  const api = new RatingApi("", service.fetch);
  const session = new RaterSession(api, "s0001", worker, { retryDelayMs: 5 });
  const root = document.createElement("main");
  document.body.appendChild(root);
  session.onChange((state: SessionState) =>
    render(root, state, api, (v) => void session.answer(v)),
  );
  return { api, session, root };
}

async function settle(session: RaterSession, kind: string) {
  for (let i = 0; i < 200; i++) {
    if (session.current().kind === kind) return;
    await new Promise((r) => setTimeout(r, 5));
  }
  throw new Error(`session never reached ${kind}: ${session.current().kind}`);
}

beforeEach(() => {
  document.body.innerHTML = "";
});

describe("MORS flow", () => {
  it("renders one image, the sentence, and yes/no controls", async () => {
    const service = new FakeService(morsTrials(3));
    const { session, root } = wire(service);
    await session.start();
    await settle(session, "trial");

    expect(root.querySelectorAll("img").length).toBe(1);
    expect(root.querySelector(".prompt")?.textContent).toContain(
      "red circle above blue square",
    );
    const labels = [...root.querySelectorAll("button.answer")].map(
      (b) => (b as HTMLButtonElement).dataset.value,
    );
    expect(labels).toEqual(["yes", "no"]);
  });

  it("completes a 10-trial study producing exactly 10 rating rows", async () => {
    const service = new FakeService(morsTrials(10));
    const { session } = wire(service);
    await session.start();
    for (let i = 0; i < 10; i++) {
      await settle(session, "trial");
      await session.answer(i % 2 === 0 ? "yes" : "no");
    }
    await settle(session, "done");
    expect(service.ratings.length).toBe(10);
    expect(new Set(service.ratings.map((r) => r.trial)).size).toBe(10);
  });

  it("shows the completion screen with no further controls", async () => {
    const service = new FakeService(morsTrials(1));
    const { session, root } = wire(service);
    await session.start();
    await settle(session, "trial");
    await session.answer("yes");
    await settle(session, "done");
    expect(root.textContent).toContain("Study complete");
    expect(root.querySelectorAll("button").length).toBe(0);
    // answering with nothing displayed is a no-op
    await session.answer("yes");
    expect(service.ratings.length).toBe(1);
  });
});

describe("forced choice rendering", () => {
  it("shows two images side by side in server order", async () => {
    const service = new FakeService([
      {
        id: "t0",
        design: "avb",
        media: ["/media/a.ppm", "/media/b.ppm"],
        prompt: "",
      },
    ]);
    const { session, root } = wire(service);
    await session.start();
    await settle(session, "trial");
    const imgs = [...root.querySelectorAll("img")].map((i) => i.getAttribute("src"));
    expect(imgs).toEqual(["/media/a.ppm", "/media/b.ppm"]);
    expect(root.querySelector(".prompt")?.textContent).toContain("more realistic");
    const labels = [...root.querySelectorAll("button.answer")].map(
      (b) => (b as HTMLButtonElement).dataset.value,
    );
    expect(labels).toEqual(["A", "B"]);
  });

  it("maps keyboard shortcuts per design", () => {
    expect(keyToAnswer("mors", "y")).toBe("yes");
    expect(keyToAnswer("mors", "N")).toBe("no");
    expect(keyToAnswer("avb", "1")).toBe("A");
    expect(keyToAnswer("abx", "2")).toBe("B");
    expect(keyToAnswer("mors", "x")).toBeNull();
  });
});

describe("submission discipline", () => {
  it("double-click produces exactly one row", async () => {
    const service = new FakeService(morsTrials(2));
    const { session, root } = wire(service);
    await session.start();
    await settle(session, "trial");

    const yes = root.querySelector("button.answer") as HTMLButtonElement;
    yes.click();
    yes.click(); // second click: button disabled + session single-flight
    await settle(session, "trial"); // advanced to trial 2
    const rows = service.ratings.filter((r) => r.trial === "t0000");
    expect(rows.length).toBe(1);
  });

  it("queues a retry on network failure and records exactly one row", async () => {
    const service = new FakeService(morsTrials(1));
    service.failNextSubmits = 2;
    const { session } = wire(service);
    await session.start();
    await settle(session, "trial");
    await session.answer("yes");
    await settle(session, "done");
    expect(service.ratings.length).toBe(1);
  });

  it("silently advances when the server reports a duplicate", async () => {
    const service = new FakeService(morsTrials(2));
    const { session } = wire(service);
    await session.start();
    await settle(session, "trial");
    // another tab already answered this trial
    service.ratings.push({ worker: "w1", trial: "t0000", answer: "yes" });
    await session.answer("no");
    await settle(session, "trial");
    expect(service.ratings.filter((r) => r.trial === "t0000").length).toBe(1);
    expect((session.current() as { trial: { trial_id: string } }).trial.trial_id).toBe(
      "t0001",
    );
  });

  it("shows a retry prompt when the next-task fetch fails", async () => {
    const service = new FakeService(morsTrials(1));
    const api = new RatingApi("", async (url, init) => {
      if (url.includes("/next")) throw new TypeError("offline");
      return service.fetch(url, init);
    });
    const session = new RaterSession(api, "s0001", "w1", { retryDelayMs: 5 });
    await session.start();
    expect(session.current().kind).toBe("error");
  });
});

describe("blinding", () => {
  it("no request ever carries model identity or control flags", async () => {
    const service = new FakeService(morsTrials(10));
    const { session } = wire(service);
    await session.start();
    for (let i = 0; i < 10; i++) {
      await settle(session, "trial");
      await session.answer("yes");
    }
    await settle(session, "done");
    for (const req of service.requests) {
      const text = `${req.url} ${req.body}`.toLowerCase();
      expect(text).not.toContain("model");
      expect(text).not.toContain("side_a");
      expect(text).not.toContain("control");
      expect(text).not.toContain("ours");
      expect(text).not.toContain("baseline");
    }
  });
});
