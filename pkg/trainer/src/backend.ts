import * as tf from "@tensorflow/tfjs";
import "@tensorflow/tfjs-backend-wasm";

let chosen: string | null = null;

/**
 * Select the fastest usable tensor backend, once per process.
 *
 * The wasm backend runs SIMD kernels and is several times quicker than the
 * plain JS backend on this workload; the plain backend stays as a fallback
 * for environments where the wasm module fails to load.
 */
export async function initBackend(): Promise<string> {
  if (chosen !== null) {
    return chosen;
  }
  let ok = false;
  try {
    ok = await tf.setBackend("wasm");
  } catch {
    ok = false;
  }
  if (!ok) {
    await tf.setBackend("cpu");
  }
  await tf.ready();
  chosen = tf.getBackend();
  return chosen;
}
