/**
 * Worker-thread entry: runs the sampling loop and streams chunks to the
 * writer (main thread) over the message port.
 *
 * The queue between the two is bounded by an ack protocol: the worker
 * aborts rather than buffer unboundedly when the writer cannot keep up, so
 * the read loop never blocks on file writes.
 */

import { parentPort, workerData } from 'node:worker_threads';

import { CounterReadError, runSamplingLoop, type LoopConfig } from './loop.js';

export const MAX_UNACKED_CHUNKS = 64;

export type WorkerMessage =
  | { type: 'chunk'; seq: number; timestamps: BigInt64Array; deltas: Float64Array[] }
  | { type: 'done'; stats: ReturnType<typeof runSamplingLoop> }
  | { type: 'error'; message: string; partial: boolean };

if (parentPort) {
  const port = parentPort;
  const cfg = workerData as LoopConfig;
  let seq = 0;
  let acked = -1;
  port.on('message', (msg: { type: string; seq: number }) => {
    if (msg.type === 'ack') acked = Math.max(acked, msg.seq);
  });
  try {
    const stats = runSamplingLoop(cfg, (chunk) => {
      if (seq - acked > MAX_UNACKED_CHUNKS) {
        throw new Error(`writer fell behind (${seq - acked} chunks unacknowledged)`);
      }
      port.postMessage({ type: 'chunk', seq, ...chunk });
      seq += 1;
    });
    port.postMessage({ type: 'done', stats });
  } catch (err) {
    port.postMessage({
      type: 'error',
      message: err instanceof Error ? err.message : String(err),
      partial: seq > 0,
    });
  }
}
