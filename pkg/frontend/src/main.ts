import { RatingApi } from "./api.js";
import { levelForKey } from "./keyboard.js";
import { RatingSession } from "./session.js";
import { render } from "./ui.js";

function startSession(root: HTMLElement, raterId: string): void {
  const session = new RatingSession(new RatingApi(""), raterId);

  const onRate = (level: number): void => {
    if (session.phase !== "rating") return;
    void session.rate(level).then(() => render(root, session, onRate));
    render(root, session, onRate); // show the submitting state immediately
  };

  document.addEventListener("keydown", (event) => {
    const level = levelForKey(event.key);
    if (level !== null) onRate(level);
  });

  void session.start().then(() => render(root, session, onRate));
  render(root, session, onRate);
}

function main(): void {
  const root = document.getElementById("app");
  if (!root) throw new Error("missing #app element");
  const form = document.createElement("form");
  const input = document.createElement("input");
  input.placeholder = "rater id";
  input.required = true;
  const go = document.createElement("button");
  go.textContent = "Start rating";
  form.append(input, go);
  form.onsubmit = (event) => {
    event.preventDefault();
    startSession(root, input.value.trim());
  };
  root.replaceChildren(form);
}

main();
