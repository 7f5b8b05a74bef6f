import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    environment: "node",
    // the end-to-end test synthesizes and fuses a scene through the
    // backend CLI before driving the UI, which takes a while
    testTimeout: 240_000,
    hookTimeout: 240_000,
    pool: "forks",
  },
});
