/**
 * Orchestration: spawn the sampling worker, accumulate its chunks, and
 * finalize a canonical trace file. On mid-run counter failure the partial
 * data is flagged invalid by landing in `<out>.partial` with a nonzero
 * outcome, never in the requested output path.
 */

import { hostname } from 'node:os';
import { rmSync } from 'node:fs';
import { Worker } from 'node:worker_threads';

import type { DomainSource } from './domains.js';
import type { LoopStats, SampleChunk } from './loop.js';
import { writeTraceFile } from './traceformat.js';

export interface SampleRunConfig {
  domains: DomainSource[];
  rateHz: number;
  durationMs: number;
  out: string;
}

export interface SampleRunResult {
  ok: boolean;
  outFile: string;
  stats?: LoopStats;
  warnings: string[];
  error?: string;
}

function chunksToChannels(chunks: SampleChunk[], nDomains: number): Float32Array[] {
  const total = chunks.reduce((n, c) => n + c.timestamps.length, 0);
  const rows = Array.from({ length: nDomains }, () => new Float32Array(total));
  let offset = 0;
  for (const chunk of chunks) {
    for (let d = 0; d < nDomains; d++) rows[d].set(chunk.deltas[d], offset);
    offset += chunk.timestamps.length;
  }
  return rows;
}

export function runSampler(
  cfg: SampleRunConfig,
  workerUrl: URL = new URL('./worker.js', import.meta.url),
): Promise<SampleRunResult> {
  const wallClockStart = new Date().toISOString();
  const chunks: SampleChunk[] = [];
  const warnings: string[] = [];

  return new Promise((resolve) => {
    const worker = new Worker(workerUrl, {
      workerData: {
        domains: cfg.domains,
        rateHz: cfg.rateHz,
        durationMs: cfg.durationMs,
      },
    });

    const finalize = (result: Omit<SampleRunResult, 'outFile' | 'warnings'>, out: string) => {
      void worker.terminate();
      if (chunks.length || result.ok) {
        writeTraceFile(out, {
          channels: cfg.domains.map((d) => d.name),
          sampleRateHz: cfg.rateHz,
          samples: chunksToChannels(chunks, cfg.domains.length),
          meta: {
            collector: {
              host: hostname(),
              wall_clock_start: wallClockStart,
              requested_rate_hz: cfg.rateHz,
              achieved_rate_hz: result.stats?.achievedRateHz ?? null,
              complete: result.ok,
              zero_read_domains: result.stats?.zeroReadDomains ?? [],
            },
          },
        });
      }
      resolve({ ...result, outFile: out, warnings });
    };

    worker.on('message', (msg) => {
      if (msg.type === 'chunk') {
        chunks.push({ timestamps: msg.timestamps, deltas: msg.deltas });
        worker.postMessage({ type: 'ack', seq: msg.seq });
      } else if (msg.type === 'done') {
        const stats: LoopStats = msg.stats;
        if (!stats.timestampsStrictlyIncreasing) {
          warnings.push('monotonic clock reported non-increasing timestamps');
        }
        for (const name of stats.zeroReadDomains) {
          warnings.push(
            `domain '${name}' read 0 for the whole run (unprivileged powercap reads return 0)`,
          );
        }
        finalize({ ok: true, stats }, cfg.out);
      } else if (msg.type === 'error') {
        finalize({ ok: false, error: msg.message }, `${cfg.out}.partial`);
      }
    });
    worker.on('error', (err) => {
      rmSync(`${cfg.out}.partial`, { force: true });
      finalize({ ok: false, error: String(err) }, `${cfg.out}.partial`);
    });
  });
}
