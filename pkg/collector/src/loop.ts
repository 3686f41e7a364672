/**
 * The sampling loop proper: absolute-deadline scheduling against the
 * monotonic clock (deadline i = start + i/rate, so jitter never
 * accumulates), one wrap-corrected delta per domain per tick.
 *
 * Runs synchronously on a dedicated thread; emitted chunks go to a
 * caller-supplied sink so the loop itself never touches the filesystem
 * beyond the counter reads.
 */

import { CounterReadError, CounterReader, wrapDelta } from './counter.js';
import type { DomainSource } from './domains.js';

const SLEEP_SLACK_NS = 300_000n; // spin for the last 0.3 ms of each wait

export interface LoopConfig {
  domains: DomainSource[];
  rateHz: number;
  durationMs: number;
  chunkSize?: number;
}

export interface SampleChunk {
  /** monotonic timestamps, ns */
  timestamps: BigInt64Array;
  /** per-domain energy deltas (uJ per interval), same order as config */
  deltas: Float64Array[];
}

export interface LoopStats {
  samples: number;
  achievedRateHz: number;
  timestampsStrictlyIncreasing: boolean;
  /** domains whose counter never moved (unprivileged reads return 0 only) */
  zeroReadDomains: string[];
}

const sleepBuffer = new Int32Array(new SharedArrayBuffer(4));

function sleepUntil(deadline: bigint): void {
  for (;;) {
    const now = process.hrtime.bigint();
    if (now >= deadline) return;
    const remaining = deadline - now;
    if (remaining > SLEEP_SLACK_NS) {
      const ms = Number((remaining - SLEEP_SLACK_NS) / 1_000_000n);
      if (ms >= 1) Atomics.wait(sleepBuffer, 0, 0, ms);
      else break;
    } else {
      break;
    }
  }
  while (process.hrtime.bigint() < deadline) {
    /* spin for sub-ms precision */
  }
}

export function runSamplingLoop(
  cfg: LoopConfig,
  emit: (chunk: SampleChunk) => void,
): LoopStats {
  const { domains, rateHz, durationMs } = cfg;
  if (rateHz <= 0) throw new RangeError('rate must be positive');
  const chunkSize = cfg.chunkSize ?? 256;
  const intervalNs = BigInt(Math.round(1e9 / rateHz));
  const total = Math.max(1, Math.round((durationMs / 1000) * rateHz));

  const readers = domains.map((d) => new CounterReader(d.energyPath));
  const prev = readers.map((r) => r.read());
  const moved = domains.map(() => false);

  let timestamps = new BigInt64Array(chunkSize);
  let deltas = domains.map(() => new Float64Array(chunkSize));
  let fill = 0;
  let firstTs = 0n;
  let lastTs = -1n;
  let increasing = true;
  let produced = 0;

  const flush = () => {
    if (fill === 0) return;
    emit({
      timestamps: timestamps.slice(0, fill),
      deltas: deltas.map((row) => row.slice(0, fill)),
    });
    timestamps = new BigInt64Array(chunkSize);
    deltas = domains.map(() => new Float64Array(chunkSize));
    fill = 0;
  };

  const start = process.hrtime.bigint() + intervalNs;
  try {
    for (let i = 0; i < total; i++) {
      sleepUntil(start + BigInt(i) * intervalNs);
      const now = process.hrtime.bigint();
      for (let d = 0; d < readers.length; d++) {
        const value = readers[d].read(); // CounterReadError propagates: abort
        const delta = wrapDelta(prev[d], value, domains[d].maxRange);
        if (delta !== 0) moved[d] = true;
        prev[d] = value;
        deltas[d][fill] = delta;
      }
      timestamps[fill] = now;
      if (now <= lastTs) increasing = false;
      lastTs = now;
      if (produced === 0) firstTs = now;
      fill += 1;
      produced += 1;
      if (fill === chunkSize) flush();
    }
  } finally {
    flush(); // on abort the partial chunk still reaches the writer
  }

  const elapsedS = produced > 1 ? Number(lastTs - firstTs) / 1e9 : 0;
  return {
    samples: produced,
    achievedRateHz: elapsedS > 0 ? (produced - 1) / elapsedS : rateHz,
    timestampsStrictlyIncreasing: increasing,
    zeroReadDomains: domains.filter((_, d) => !moved[d]).map((d) => d.name),
  };
}

export { CounterReadError };
