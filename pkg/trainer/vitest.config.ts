import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["test/**/*.test.ts"],
    // the overfit harness trains a real model on the CPU backend
    testTimeout: 120_000,
    hookTimeout: 120_000,
    pool: "forks",
    // one file at a time: tests share the on-disk encoder artifacts and
    // the CPU backend gains nothing from oversubscription
    fileParallelism: false,
    // verbose keeps the acceptance checklist's [PASS]/[FAIL] lines visible
    reporters: ["verbose"],
  },
});
