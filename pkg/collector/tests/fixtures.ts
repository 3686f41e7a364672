import { mkdirSync, writeFileSync } from 'node:fs';
import { join } from 'node:path';

export interface FixtureDomain {
  dir: string; // e.g. "intel-rapl:0:0"
  name: string; // raw powercap name, e.g. "core"
  energy: number;
  range: number;
}

export const STANDARD_TREE: FixtureDomain[] = [
  { dir: 'intel-rapl:0', name: 'package-0', energy: 1_000_000, range: 262_143_328_850 },
  { dir: 'intel-rapl:0:0', name: 'core', energy: 500_000, range: 262_143_328_850 },
  { dir: 'intel-rapl:0:1', name: 'dram', energy: 250_000, range: 65_712_999_613 },
];

/** Build a mock powercap hierarchy under `root` and return the sysfs root. */
export function buildMockSysfs(root: string, domains: FixtureDomain[] = STANDARD_TREE): string {
  for (const d of domains) {
    const dir = join(root, 'class', 'powercap', d.dir);
    mkdirSync(dir, { recursive: true });
    writeFileSync(join(dir, 'name'), `${d.name}\n`);
    writeFileSync(join(dir, 'energy_uj'), `${d.energy}\n`);
    writeFileSync(join(dir, 'max_energy_range_uj'), `${d.range}\n`);
  }
  return root;
}

export function energyPath(root: string, dir: string): string {
  return join(root, 'class', 'powercap', dir, 'energy_uj');
}
