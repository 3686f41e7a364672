import { execFileSync } from 'node:child_process';
import { mkdtempSync, rmSync } from 'node:fs';
import { tmpdir } from 'node:os';
import { join } from 'node:path';
import { afterEach, describe, expect, it } from 'vitest';

import { readTraceFile, writeTraceFile } from '../dist/traceformat.js';

const dirs: string[] = [];
afterEach(() => {
  for (const d of dirs.splice(0)) rmSync(d, { recursive: true, force: true });
});

function tempDir(): string {
  const dir = mkdtempSync(join(tmpdir(), 'trace-'));
  dirs.push(dir);
  return dir;
}

function sampleTrace() {
  return {
    channels: ['pp0', 'dram'],
    sampleRateHz: 1000,
    samples: [
      Float32Array.from([1.5, 2.25, 3.125, 4.0]),
      Float32Array.from([10.5, 20.25, 30.125, 40.0]),
    ],
    meta: { collector: { host: 'test', complete: true } },
  };
}

describe('trace container', () => {
  it('round-trips bit-exactly', () => {
    const path = join(tempDir(), 't.sct');
    const trace = sampleTrace();
    writeTraceFile(path, trace);
    const got = readTraceFile(path);
    expect(got.channels).toEqual(trace.channels);
    expect(got.sampleRateHz).toBe(1000);
    expect(Array.from(got.samples[0])).toEqual(Array.from(trace.samples[0]));
    expect(Array.from(got.samples[1])).toEqual(Array.from(trace.samples[1]));
    expect((got.meta as any).collector.host).toBe('test');
  });

  it('rejects ragged channels', () => {
    expect(() =>
      writeTraceFile(join(tempDir(), 'x.sct'), {
        channels: ['a', 'b'],
        sampleRateHz: 1,
        samples: [new Float32Array(3), new Float32Array(4)],
      }),
    ).toThrow(/differ/);
  });

  it('round-trips through the analysis toolkit reader', () => {
    // cross-component contract: the python package must parse our files
    const probe = (() => {
      try {
        execFileSync('python3', ['-c', 'import tracearch.traceio'], { stdio: 'pipe' });
        return true;
      } catch {
        return false;
      }
    })();
    if (!probe) {
      console.warn('python toolkit not installed; skipping cross-component check');
      return;
    }
    const path = join(tempDir(), 'cross.sct');
    writeTraceFile(path, sampleTrace());
    const script = [
      'import json, sys',
      'from tracearch.traceio import read_trace',
      'trace, ann = read_trace(sys.argv[1])',
      'print(json.dumps({',
      '  "channels": trace.channels,',
      '  "rate": trace.sample_rate_hz,',
      '  "row0": [float(v) for v in trace.samples[0]],',
      '  "row1": [float(v) for v in trace.samples[1]],',
      '  "ann": ann is None,',
      '}))',
    ].join('\n');
    const out = JSON.parse(execFileSync('python3', ['-c', script, path]).toString());
    expect(out.channels).toEqual(['pp0', 'dram']);
    expect(out.rate).toBe(1000);
    expect(out.row0).toEqual([1.5, 2.25, 3.125, 4.0]);
    expect(out.row1).toEqual([10.5, 20.25, 30.125, 40.0]);
    expect(out.ann).toBe(true);
  });
});
