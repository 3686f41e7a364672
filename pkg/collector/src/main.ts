#!/usr/bin/env node
/**
 * CLI: sample RAPL energy counters into a canonical trace file.
 *
 *   rapl-collector --domains pp0,dram --rate 1000 --out trace.bin \
 *                  --duration 30s [--sysfs-root /sys]
 *   rapl-collector --list [--sysfs-root /sys]
 *
 * Exit code 0 only on a complete, valid trace.
 */

import process from 'node:process';

import { listDomains, selectDomains } from './domains.js';
import { runSampler } from './sampler.js';

interface CliArgs {
  domains: string[];
  rate: number;
  out?: string;
  durationMs?: number;
  sysfsRoot: string;
  list: boolean;
}

export function parseDuration(text: string): number {
  const m = text.match(/^(\d+(?:\.\d+)?)(ms|s|m)?$/);
  if (!m) throw new Error(`cannot parse duration '${text}' (try 30s, 500ms, 2m)`);
  const value = Number.parseFloat(m[1]);
  const unit = m[2] ?? 's';
  return value * (unit === 'ms' ? 1 : unit === 's' ? 1000 : 60_000);
}

export function parseArgs(argv: string[]): CliArgs {
  const args: CliArgs = {
    domains: ['pp0', 'dram'],
    rate: 1000,
    sysfsRoot: '/sys',
    list: false,
  };
  for (let i = 0; i < argv.length; i++) {
    const flag = argv[i];
    const next = () => {
      i += 1;
      if (i >= argv.length) throw new Error(`missing value for ${flag}`);
      return argv[i];
    };
    switch (flag) {
      case '--domains':
        args.domains = next().split(',').filter(Boolean);
        break;
      case '--rate':
        args.rate = Number.parseFloat(next());
        break;
      case '--out':
        args.out = next();
        break;
      case '--duration':
        args.durationMs = parseDuration(next());
        break;
      case '--sysfs-root':
        args.sysfsRoot = next();
        break;
      case '--list':
        args.list = true;
        break;
      default:
        throw new Error(`unknown flag ${flag}`);
    }
  }
  if (!args.list) {
    if (!args.out) throw new Error('--out is required');
    if (!args.durationMs) throw new Error('--duration is required');
    if (!(args.rate > 0)) throw new Error('--rate must be positive');
    if (args.domains.length === 0) throw new Error('--domains must name at least one domain');
  }
  return args;
}

async function main(): Promise<number> {
  let args: CliArgs;
  try {
    args = parseArgs(process.argv.slice(2));
  } catch (err) {
    console.error(`usage error: ${err instanceof Error ? err.message : err}`);
    return 1;
  }

  const available = listDomains(args.sysfsRoot);
  if (args.list) {
    if (available.length === 0) {
      console.error(`no powercap hierarchy under ${args.sysfsRoot}`);
      return 1;
    }
    for (const d of available) {
      console.log(`${d.name}\t${d.energyPath}\trange=${d.maxRange}`);
    }
    return 0;
  }

  let domains;
  try {
    domains = selectDomains(args.domains, available);
  } catch (err) {
    console.error(`${err instanceof Error ? err.message : err}`);
    return 1;
  }

  const result = await runSampler({
    domains,
    rateHz: args.rate,
    durationMs: args.durationMs!,
    out: args.out!,
  });
  for (const warning of result.warnings) console.error(`warning: ${warning}`);
  if (!result.ok) {
    console.error(`aborted: ${result.error}; partial data in ${result.outFile}`);
    return 2;
  }
  const stats = result.stats!;
  console.error(
    `wrote ${result.outFile}: ${stats.samples} samples, ` +
      `achieved ${stats.achievedRateHz.toFixed(1)} Hz`,
  );
  const drift = Math.abs(stats.achievedRateHz - args.rate) / args.rate;
  if (drift > 0.1) {
    console.error(
      `error: achieved rate off by ${(drift * 100).toFixed(1)}% (> 10%); trace unreliable`,
    );
    return 2;
  }
  return 0;
}

main().then((code) => {
  process.exitCode = code;
});
