/** Vitest global setup: build a tiny benchmark + checkpoint once, then start
 * the Python session service on an ephemeral port for the e2e tests. */

import { spawn, spawnSync, ChildProcess } from "node:child_process";
import * as fs from "node:fs";
import * as path from "node:path";
import { fileURLToPath } from "node:url";

const HERE = path.dirname(fileURLToPath(import.meta.url));
const FIXTURE = path.join(HERE, ".fixture");
const REPO = path.join(HERE, "..", "..");
const PY_ENV = {
  ...process.env,
  PYTHONPATH: path.join(REPO, "src"),
  PYTHONUNBUFFERED: "1",
};

let server: ChildProcess | null = null;

function buildFixture() {
  if (fs.existsSync(path.join(FIXTURE, "net.ckpt"))) return;
  fs.mkdirSync(FIXTURE, { recursive: true });
  const gen = spawnSync("python3", [
    "-m", "ipcs.cli", "gen-data", "--out", path.join(FIXTURE, "data"),
    "--train", "2", "--test", "2", "--seed", "11", "--density", "110",
  ], { env: PY_ENV, stdio: "inherit" });
  if (gen.status !== 0) throw new Error("gen-data failed");
  const train = spawnSync("python3", [
    "-m", "ipcs.cli", "train-baseline", "--data", path.join(FIXTURE, "data"),
    "--out", path.join(FIXTURE, "net.ckpt"), "--epochs", "8",
  ], { env: PY_ENV, stdio: "inherit" });
  if (train.status !== 0) throw new Error("train-baseline failed");
}

export default async function setup() {
  buildFixture();
  server = spawn("python3", [
    "-m", "ipcs.cli", "serve",
    "--checkpoint", path.join(FIXTURE, "net.ckpt"),
    "--data", path.join(FIXTURE, "data"),
    "--port", "0",
  ], { env: PY_ENV });

  const base: string = await new Promise((resolve, reject) => {
    const timer = setTimeout(() => reject(new Error("service never came up")), 60000);
    server!.stdout!.on("data", (chunk: Buffer) => {
      const m = chunk.toString().match(/serving on (http:\/\/[\d.]+:\d+)/);
      if (m) {
        clearTimeout(timer);
        resolve(m[1]);
      }
    });
    server!.stderr!.on("data", (chunk: Buffer) => {
      process.stderr.write(chunk);
    });
    server!.on("exit", (code) => reject(new Error(`service exited: ${code}`)));
  });
  process.env.IPCS_API_BASE = base;

  return async () => {
    server?.kill();
  };
}
