/** DOM rendering for the three trial designs.
 *
 * Images are rendered in the order the service sent them; the UI never
 * re-randomizes sides and never knows which model produced an image.
 */

import { RatingApi, TrialPayload } from "./api.js";
import { SessionState } from "./session.js";

export interface AnswerOption {
  value: string;
  label: string;
  keys: string[];
}

export function answerOptions(design: TrialPayload["design"]): AnswerOption[] {
  if (design === "mors") {
    return [
      { value: "yes", label: "Yes (y)", keys: ["y"] },
      { value: "no", label: "No (n)", keys: ["n"] },
    ];
  }
  return [
    { value: "A", label: "Image A (1)", keys: ["1"] },
    { value: "B", label: "Image B (2)", keys: ["2"] },
  ];
}

export function promptText(trial: TrialPayload): string {
  if (trial.design === "mors") {
    return `Is this relationship true in the image: "${trial.prompt}"?`;
  }
  if (trial.design === "avb") {
    return "Which image looks more realistic?";
  }
  return `Which image better matches: "${trial.prompt}"?`;
}

export function render(
  root: HTMLElement,
  state: SessionState,
  api: RatingApi,
  onAnswer: (value: string) => void,
): void {
  root.textContent = "";

  if (state.kind === "loading") {
    root.appendChild(el("p", "status", "loading…"));
    return;
  }

  if (state.kind === "error") {
    root.appendChild(el("p", "status error", state.message));
    const retry = el("button", "retry", "Retry") as HTMLButtonElement;
    retry.addEventListener("click", () => state.retry());
    root.appendChild(retry);
    return;
  }

  if (state.kind === "done") {
    root.appendChild(el("h2", "done", "Study complete"));
    root.appendChild(
      el("p", "status", `You rated ${state.rated} trials. Thank you!`),
    );
    return;
  }

  const trial = state.trial;
  const labels = ["A", "B"];
  const strip = el("div", "media");
  trial.media.forEach((ref, i) => {
    const fig = el("figure", "item");
    const img = document.createElement("img");
    img.src = api.mediaUrl(ref);
    img.alt = trial.media.length > 1 ? `image ${labels[i]}` : "image";
    fig.appendChild(img);
    if (trial.media.length > 1) {
      fig.appendChild(el("figcaption", "tag", labels[i]));
    }
    strip.appendChild(fig);
  });
  root.appendChild(strip);
  root.appendChild(el("p", "prompt", promptText(trial)));

  const buttons = el("div", "answers");
  for (const option of answerOptions(trial.design)) {
    const b = el("button", "answer", option.label) as HTMLButtonElement;
    b.dataset.value = option.value;
    b.addEventListener("click", () => {
      // disable immediately: the session is single-flight, and greying the
      // controls makes that visible
      buttons
        .querySelectorAll("button")
        .forEach((x) => ((x as HTMLButtonElement).disabled = true));
      onAnswer(option.value);
    });
    buttons.appendChild(b);
  }
  root.appendChild(buttons);

  root.appendChild(
    el(
      "p",
      "progress",
      `trial ${state.trial.progress.rated + 1} of ${state.trial.progress.total}`,
    ),
  );
}

export function keyToAnswer(
  design: TrialPayload["design"],
  key: string,
): string | null {
  for (const option of answerOptions(design)) {
    if (option.keys.includes(key.toLowerCase())) {
      return option.value;
    }
  }
  return null;
}

function el(tag: string, cls: string, text?: string): HTMLElement {
  const node = document.createElement(tag);
  node.className = cls;
  if (text !== undefined) {
    node.textContent = text;
  }
  return node;
}
