/**
 * Discovery of RAPL domains exposed through the Linux powercap hierarchy
 * (<sysfs root>/class/powercap/intel-rapl:<socket>[:<sub>]/).
 */

import { existsSync, readdirSync, readFileSync, accessSync, constants } from 'node:fs';
import { join } from 'node:path';

export interface DomainSource {
  /** normalized channel name: pkg, pp0, pp1, dram, platform (suffix -<n> on socket > 0) */
  name: string;
  energyPath: string;
  /** counter wrap modulus (max_energy_range_uj) */
  maxRange: number;
}

const NAME_MAP: Record<string, string> = {
  core: 'pp0',
  uncore: 'pp1',
  dram: 'dram',
  psys: 'platform',
};

function normalizeName(raw: string, socket: number): string | undefined {
  let base: string | undefined;
  if (/^package-\d+$/.test(raw)) {
    base = 'pkg';
  } else {
    base = NAME_MAP[raw];
  }
  if (base === undefined) return undefined;
  return socket > 0 ? `${base}-${socket}` : base;
}

function socketOf(dirName: string): number {
  const m = dirName.match(/^intel-rapl:(\d+)/);
  return m ? Number.parseInt(m[1], 10) : 0;
}

/** Enumerate readable RAPL domains; empty when the hierarchy is absent. */
export function listDomains(sysfsRoot: string): DomainSource[] {
  const base = join(sysfsRoot, 'class', 'powercap');
  if (!existsSync(base)) return [];
  const sources: DomainSource[] = [];
  for (const entry of readdirSync(base).sort()) {
    if (!entry.startsWith('intel-rapl:')) continue;
    const dir = join(base, entry);
    const namePath = join(dir, 'name');
    const energyPath = join(dir, 'energy_uj');
    const rangePath = join(dir, 'max_energy_range_uj');
    let raw: string;
    let maxRange: number;
    try {
      accessSync(energyPath, constants.R_OK);
      raw = readFileSync(namePath, 'ascii').trim();
      maxRange = Number.parseInt(readFileSync(rangePath, 'ascii').trim(), 10);
    } catch {
      continue;
    }
    if (!Number.isFinite(maxRange) || maxRange <= 0) continue;
    const name = normalizeName(raw.toLowerCase(), socketOf(entry));
    if (name === undefined) continue;
    sources.push({ name, energyPath, maxRange });
  }
  return sources;
}

/** Resolve requested channel names against the discovered set. */
export function selectDomains(requested: string[], available: DomainSource[]): DomainSource[] {
  const byName = new Map(available.map((d) => [d.name, d]));
  return requested.map((name) => {
    const found = byName.get(name);
    if (!found) {
      const have = available.map((d) => d.name).join(', ') || '(none)';
      throw new Error(`domain '${name}' not available; found: ${have}`);
    }
    return found;
  });
}
