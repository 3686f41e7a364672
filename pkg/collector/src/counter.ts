/**
 * RAPL energy counters are cumulative microjoule values that wrap at
 * max_energy_range_uj. Consumption between two reads is the wrap-corrected
 * difference.
 */

import { readFileSync } from 'node:fs';

/** Wrap-corrected counter delta; result is always in [0, range). */
export function wrapDelta(prev: number, curr: number, range: number): number {
  if (range <= 0) {
    throw new RangeError(`counter range must be positive, got ${range}`);
  }
  return (((curr - prev) % range) + range) % range;
}

export class CounterReadError extends Error {}

/** Reads one sysfs energy_uj file per call. */
export class CounterReader {
  constructor(readonly energyPath: string) {}

  read(): number {
    let text: string;
    try {
      text = readFileSync(this.energyPath, 'ascii');
    } catch (err) {
      throw new CounterReadError(`cannot read ${this.energyPath}: ${err}`);
    }
    const value = Number.parseInt(text.trim(), 10);
    if (!Number.isFinite(value) || value < 0) {
      throw new CounterReadError(`bad counter value ${text.trim()} in ${this.energyPath}`);
    }
    return value;
  }
}
