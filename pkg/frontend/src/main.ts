/** Entry point: wire the session to the DOM.
 *
 * The study id comes from ?study=...; the worker token is self-issued and
 * kept in localStorage so a refresh resumes the same session.
 */

import { RatingApi } from "./api.js";
import { RaterSession } from "./session.js";
import { keyToAnswer, render } from "./view.js";

function workerToken(): string {
  const key = "sgctx-worker";
  let token = localStorage.getItem(key);
  if (!token) {
    token = crypto.randomUUID();
    localStorage.setItem(key, token);
  }
  return token;
}

export function boot(root: HTMLElement, base = ""): RaterSession {
  const params = new URLSearchParams(location.search);
  const studyId = params.get("study");
  if (!studyId) {
    root.textContent = "missing ?study=<id> in the URL";
    throw new Error("missing study id");
  }
  const api = new RatingApi(base);
  const session = new RaterSession(api, studyId, workerToken());
  session.onChange((state) => render(root, state, api, (v) => void session.answer(v)));

  document.addEventListener("keydown", (ev) => {
    const state = session.current();
    if (state.kind !== "trial") {
      return;
    }
    const answer = keyToAnswer(state.trial.design, ev.key);
    if (answer) {
      void session.answer(answer);
    }
  });

  void session.start();
  return session;
}

if (typeof document !== "undefined" && document.getElementById("app")) {
  boot(document.getElementById("app") as HTMLElement);
}
