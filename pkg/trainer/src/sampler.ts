/** Epoch sampling that honors the manifest's diversity repetitions: a
 * tile with repetitions=3 appears exactly 3 times per epoch, in a
 * seeded shuffle that differs epoch to epoch but replays under the same
 * seed. Short trailing batches are padded to full size with weight-0
 * samples so batch shapes stay fixed and padding cannot move the loss.
 */

import { Rng } from "./rng.js";

export interface Repeatable {
  tile_id: number;
  repetitions: number;
}

export function epochTileIds(
  records: readonly Repeatable[], seed: string, epoch: number,
): number[] {
  const ids: number[] = [];
  for (const r of records) {
    for (let i = 0; i < r.repetitions; i++) ids.push(r.tile_id);
  }
  return new Rng(`${seed}/epoch${epoch}`).shuffle(ids);
}

export interface Batch {
  tileIds: number[];
  /** 1 for real samples, 0 for padding */
  weights: number[];
}

export function makeBatches(ids: readonly number[], batchSize: number): Batch[] {
  if (batchSize < 1) throw new Error(`batch size must be >= 1, got ${batchSize}`);
  const batches: Batch[] = [];
  for (let start = 0; start < ids.length; start += batchSize) {
    const tileIds = ids.slice(start, start + batchSize);
    const weights = tileIds.map(() => 1);
    let pad = 0;
    while (tileIds.length < batchSize) {
      tileIds.push(ids[pad % ids.length]);
      weights.push(0);
      pad++;
    }
    batches.push({ tileIds, weights });
  }
  return batches;
}
