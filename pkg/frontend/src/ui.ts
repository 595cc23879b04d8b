/**
 * DOM layer: renders the current session state into the page shell.
 *
 * Deliberately dumb - every panel is a server-rendered image and every
 * button carries a server-provided level, so no numerical work (and no
 * chance of level fabrication) happens in the browser.
 */

import { RatingSession } from "./session.js";
import { LEVELS } from "./keyboard.js";

const PANEL_ORDER: [string, string][] = [
  ["reference", "Reference"],
  ["synthesized", "Synthesized"],
  ["error_map", "Error map"],
  ["kspace_reference", "k-space (reference)"],
  ["kspace_synthesized", "k-space (synthesized)"],
];

export function render(root: HTMLElement, session: RatingSession, onRate: (level: number) => void): void {
  root.replaceChildren();
  const header = document.createElement("div");
  header.className = "status";
  header.textContent =
    `Rater: ${session.raterId} | submitted: ${session.submittedCount}` +
    (session.current?.remaining !== undefined ? ` | remaining: ${session.current.remaining}` : "");
  root.appendChild(header);

  if (session.phase === "error") {
    const banner = document.createElement("div");
    banner.className = "banner";
    banner.textContent = `Submission failed (${session.lastError ?? "network error"}). Nothing was lost.`;
    const retry = document.createElement("button");
    retry.textContent = "Retry";
    retry.className = "retry";
    retry.onclick = () => {
      void session.retry().then(() => render(root, session, onRate));
    };
    banner.appendChild(retry);
    root.appendChild(banner);
    return;
  }

  if (session.phase === "complete") {
    const doneBox = document.createElement("div");
    doneBox.className = "complete";
    doneBox.textContent = `All pairs rated. Session total: ${session.submittedCount}.`;
    root.appendChild(doneBox);
    return;
  }

  if (session.phase === "loading" || session.current === null) {
    const loading = document.createElement("div");
    loading.textContent = "Loading next pair...";
    root.appendChild(loading);
    return;
  }

  const panels = document.createElement("div");
  panels.className = "panels";
  for (const [key, label] of PANEL_ORDER) {
    const url = session.current.panels?.[key];
    if (!url) continue;
    const figure = document.createElement("figure");
    const img = document.createElement("img");
    img.src = url;
    img.alt = label;
    const caption = document.createElement("figcaption");
    caption.textContent = label;
    figure.append(img, caption);
    panels.appendChild(figure);
  }
  root.appendChild(panels);

  const scale = document.createElement("div");
  scale.className = "scale";
  const levels = session.current.levels ?? [...LEVELS];
  for (const level of levels) {
    const button = document.createElement("button");
    button.className = "level";
    button.textContent = level.toFixed(1);
    button.disabled = session.phase === "submitting";
    // the POSTed value is exactly this server-provided level
    button.onclick = () => onRate(level);
    scale.appendChild(button);
  }
  root.appendChild(scale);

  const hint = document.createElement("div");
  hint.className = "hint";
  hint.textContent = "Keys 0-9 rate 0.0-0.9. Higher = better synthesis quality.";
  root.appendChild(hint);
}
