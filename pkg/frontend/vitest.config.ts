import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    globalSetup: ["./tests/server-fixture.ts"],
    testTimeout: 120000,
    hookTimeout: 180000,
    pool: "forks",
    fileParallelism: false,
  },
});
