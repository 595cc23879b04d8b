/**
 * End-to-end round trip against the real Python rating service.
 *
 * Spawns `kcross gen-data` + `kcross serve` (the primary component must be
 * pip-installed), drives scripted rating sessions through the same
 * RatingSession/RatingApi code the browser runs, and checks persistence
 * and aggregation on the service side.
 */

import { spawn, spawnSync, type ChildProcess } from "node:child_process";
import { mkdtempSync, readFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { RatingApi } from "../src/api.js";
import { RatingSession } from "../src/session.js";

const PORT = 18744;
const BASE = `http://127.0.0.1:${PORT}`;
const N_IMAGES = 5;

let server: ChildProcess;
let workDir: string;
let ratingsPath: string;

beforeAll(async () => {
  workDir = mkdtempSync(join(tmpdir(), "kcross-ui-"));
  const gen = spawnSync(
    "python3",
    ["-m", "kcross.cli", "gen-data", "--n", String(N_IMAGES), "--seed", "11", "--size", "32", "--out", join(workDir, "suite")],
    { encoding: "utf-8" },
  );
  expect(gen.status, gen.stderr).toBe(0);
  ratingsPath = join(workDir, "ratings.jsonl");
  server = spawn("python3", [
    "-m",
    "kcross.cli",
    "serve",
    "--manifest",
    join(workDir, "suite", "manifest.jsonl"),
    "--ratings",
    ratingsPath,
    "--port",
    String(PORT),
  ]);
  await new Promise<void>((resolve, reject) => {
    const timer = setTimeout(() => reject(new Error("service did not start")), 15000);
    server.stdout!.once("data", () => {
      clearTimeout(timer);
      resolve();
    });
    server.stderr!.on("data", (chunk) => process.stderr.write(chunk));
    server.once("exit", (code) => reject(new Error(`service exited early (${code})`)));
  });
}, 30000);

afterAll(() => {
  server?.kill();
});

async function rateAll(raterId: string, levels: number[]): Promise<RatingSession> {
  const session = new RatingSession(new RatingApi(BASE), raterId);
  await session.start();
  let i = 0;
  while (session.phase === "rating") {
    await session.rate(levels[i % levels.length]);
    i += 1;
  }
  return session;
}

describe("annotation round trip", () => {
  it("a scripted session rating 5 pairs persists exactly 5 records with the pressed levels", async () => {
    const pressed = [0.9, 0.7, 0.5, 0.3, 0.1];
    const session = await rateAll("doc1", pressed);
    expect(session.submittedCount).toBe(N_IMAGES);
    expect(session.phase).toBe("complete");

    const records = readFileSync(ratingsPath, "utf-8")
      .trim()
      .split("\n")
      .map((line) => JSON.parse(line));
    expect(records).toHaveLength(N_IMAGES);
    expect(records.map((r) => r.level)).toEqual(pressed);
    expect(new Set(records.map((r) => r.rater_id))).toEqual(new Set(["doc1"]));
    expect(new Set(records.map((r) => r.image_id)).size).toBe(N_IMAGES);
  });

  it("aggregate reflects the ratings once every image has three", async () => {
    // two more raters -> every image reaches 3 ratings
    await rateAll("doc2", [0.5, 0.5, 0.5, 0.5, 0.5]);
    await rateAll("doc3", [0.1, 0.3, 0.5, 0.7, 0.9]);

    const api = new RatingApi(BASE);
    // image 0 rated 0.9 / 0.5 / 0.1 -> trim extremes -> 0.5
    const firstImage = JSON.parse(
      readFileSync(ratingsPath, "utf-8").trim().split("\n")[0],
    ).image_id as string;
    const agg = await api.aggregate(firstImage);
    expect(agg.count).toBe(3);
    expect(agg.level).toBe(0.5);
  });

  it("refresh mid-session resumes at the first unrated pair", async () => {
    const first = new RatingSession(new RatingApi(BASE), "doc4");
    await first.start();
    const firstId = first.current?.image_id;
    await first.rate(0.8);
    await first.rate(0.6);
    // abandon the session object; a "refreshed" one is server-driven
    const resumed = new RatingSession(new RatingApi(BASE), "doc4");
    await resumed.start();
    expect(resumed.current?.image_id).not.toBe(firstId);
    expect(resumed.current?.remaining).toBe(N_IMAGES - 2);
  });

  it("the service rejects off-grid levels and the session rolls back", async () => {
    const session = new RatingSession(new RatingApi(BASE), "doc5");
    await session.start();
    const id = session.current?.image_id;
    await session.rate(0.55); // impossible via the UI, the service still guards
    expect(session.phase).toBe("error");
    expect(session.current?.image_id).toBe(id);
    expect(session.submittedCount).toBe(0);
  });
});
