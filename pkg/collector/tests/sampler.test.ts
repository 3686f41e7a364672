import { execFile } from 'node:child_process';
import { existsSync, mkdtempSync, renameSync, rmSync, writeFileSync, unlinkSync } from 'node:fs';
import { tmpdir } from 'node:os';
import { join } from 'node:path';
import { promisify } from 'node:util';
import { afterEach, describe, expect, it } from 'vitest';

import { listDomains, selectDomains } from '../dist/domains.js';
import { runSampler } from '../dist/sampler.js';
import { readTraceFile } from '../dist/traceformat.js';
import { buildMockSysfs, energyPath } from './fixtures.js';

const execFileP = promisify(execFile);
const MAIN = new URL('../dist/main.js', import.meta.url).pathname;

const dirs: string[] = [];
afterEach(() => {
  for (const d of dirs.splice(0)) rmSync(d, { recursive: true, force: true });
});

function tempRoot(): string {
  const dir = mkdtempSync(join(tmpdir(), 'sampler-'));
  dirs.push(dir);
  return dir;
}

/** Periodically advance the mock counters like real hardware would.
 * Kernel sysfs reads are atomic; emulate that with write-then-rename. */
function startTicker(root: string, files: string[], stepUj: number): () => void {
  let value = 1_000_000;
  const timer = setInterval(() => {
    value += stepUj;
    for (const f of files) {
      writeFileSync(`${f}.tmp`, `${value}\n`);
      renameSync(`${f}.tmp`, f);
    }
  }, 5);
  return () => clearInterval(timer);
}

describe('runSampler', () => {
  it('collects at the requested rate and writes a valid trace', async () => {
    const root = buildMockSysfs(tempRoot());
    const stop = startTicker(root, [
      energyPath(root, 'intel-rapl:0:0'),
      energyPath(root, 'intel-rapl:0:1'),
    ], 700);
    const out = join(root, 'trace.bin');
    const result = await runSampler({
      domains: selectDomains(['pp0', 'dram'], listDomains(root)),
      rateHz: 250,
      durationMs: 400,
      out,
    });
    stop();
    expect(result.ok).toBe(true);
    expect(result.stats!.timestampsStrictlyIncreasing).toBe(true);
    // absolute-deadline scheduling keeps the mean rate within 10%
    expect(Math.abs(result.stats!.achievedRateHz - 250) / 250).toBeLessThan(0.1);
    const trace = readTraceFile(out);
    expect(trace.channels).toEqual(['pp0', 'dram']);
    expect(trace.header.length).toBe(result.stats!.samples);
    expect((trace.meta as any).collector.complete).toBe(true);
    for (const row of trace.samples) {
      for (const v of row) expect(v).toBeGreaterThanOrEqual(0);
    }
  }, 15_000);

  it('warns when a counter never moves', async () => {
    const root = buildMockSysfs(tempRoot());
    const out = join(root, 'static.bin');
    const result = await runSampler({
      domains: selectDomains(['pp0'], listDomains(root)),
      rateHz: 200,
      durationMs: 150,
      out,
    });
    expect(result.ok).toBe(true);
    expect(result.warnings.some((w) => w.includes("'pp0'") && w.includes('0'))).toBe(true);
  }, 15_000);

  it('aborts into a flagged partial file when a counter disappears', async () => {
    const root = buildMockSysfs(tempRoot());
    const victim = energyPath(root, 'intel-rapl:0:0');
    const out = join(root, 'abort.bin');
    setTimeout(() => unlinkSync(victim), 120);
    const result = await runSampler({
      domains: selectDomains(['pp0'], listDomains(root)),
      rateHz: 200,
      durationMs: 2000,
      out,
    });
    expect(result.ok).toBe(false);
    expect(result.error).toMatch(/cannot read/);
    expect(result.outFile).toBe(`${out}.partial`);
    expect(existsSync(out)).toBe(false);
    expect(existsSync(`${out}.partial`)).toBe(true);
  }, 15_000);
});

describe('cli', () => {
  it('--list prints discovered domains', async () => {
    const root = buildMockSysfs(tempRoot());
    const { stdout } = await execFileP('node', [MAIN, '--list', '--sysfs-root', root]);
    expect(stdout).toMatch(/pp0/);
    expect(stdout).toMatch(/dram/);
  });

  it('--list exits nonzero without powercap', async () => {
    await expect(
      execFileP('node', [MAIN, '--list', '--sysfs-root', tempRoot()]),
    ).rejects.toMatchObject({ code: 1 });
  });

  it('samples end to end with exit code 0', async () => {
    const root = buildMockSysfs(tempRoot());
    const stop = startTicker(root, [
      energyPath(root, 'intel-rapl:0:0'),
      energyPath(root, 'intel-rapl:0:1'),
    ], 500);
    const out = join(root, 'cli.bin');
    try {
      await execFileP('node', [
        MAIN,
        '--domains', 'pp0,dram',
        '--rate', '200',
        '--out', out,
        '--duration', '300ms',
        '--sysfs-root', root,
      ]);
    } finally {
      stop();
    }
    const trace = readTraceFile(out);
    expect(trace.channels).toEqual(['pp0', 'dram']);
    expect(trace.header.length).toBeGreaterThan(30);
  }, 15_000);

  it('rejects unknown domains with exit 1', async () => {
    const root = buildMockSysfs(tempRoot());
    await expect(
      execFileP('node', [
        MAIN, '--domains', 'pp9', '--rate', '100', '--out', join(root, 'x.bin'),
        '--duration', '50ms', '--sysfs-root', root,
      ]),
    ).rejects.toMatchObject({ code: 1 });
  });
});
