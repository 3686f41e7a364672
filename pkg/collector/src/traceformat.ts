/**
 * Canonical trace container, byte-identical to the analysis toolkit's
 * format: magic "SCT1", uint32-LE header length, UTF-8 JSON header, then
 * float32-LE samples channel-major.
 */

import { writeFileSync, readFileSync } from 'node:fs';

export const TRACE_MAGIC = 'SCT1';
export const TRACE_FORMAT_VERSION = 1;

export interface TraceHeader {
  version: number;
  sample_rate_hz: number;
  channels: string[];
  length: number;
  dtype: '<f4';
  layout: 'channel-major';
  meta: Record<string, unknown>;
}

export interface TraceData {
  channels: string[];
  sampleRateHz: number;
  /** one Float32Array per channel, equal lengths */
  samples: Float32Array[];
  meta?: Record<string, unknown>;
}

export function encodeTrace(trace: TraceData): Buffer {
  const { channels, samples } = trace;
  if (channels.length !== samples.length) {
    throw new Error(`${channels.length} channel names for ${samples.length} rows`);
  }
  const length = samples.length ? samples[0].length : 0;
  for (const row of samples) {
    if (row.length !== length) throw new Error('channel rows differ in length');
  }
  const header: TraceHeader = {
    version: TRACE_FORMAT_VERSION,
    sample_rate_hz: trace.sampleRateHz,
    channels,
    length,
    dtype: '<f4',
    layout: 'channel-major',
    meta: trace.meta ?? {},
  };
  const headerBlob = Buffer.from(JSON.stringify(header), 'utf-8');
  const head = Buffer.alloc(8);
  head.write(TRACE_MAGIC, 0, 'ascii');
  head.writeUInt32LE(headerBlob.length, 4);
  const payload = Buffer.alloc(4 * channels.length * length);
  samples.forEach((row, c) => {
    for (let i = 0; i < length; i++) {
      payload.writeFloatLE(row[i], 4 * (c * length + i));
    }
  });
  return Buffer.concat([head, headerBlob, payload]);
}

export function writeTraceFile(path: string, trace: TraceData): void {
  writeFileSync(path, encodeTrace(trace));
}

/** Parser counterpart, used by the test suite to verify round trips. */
export function readTraceFile(path: string): TraceData & { header: TraceHeader } {
  const buf = readFileSync(path);
  if (buf.subarray(0, 4).toString('ascii') !== TRACE_MAGIC) {
    throw new Error(`${path}: bad magic`);
  }
  const headerLen = buf.readUInt32LE(4);
  const header = JSON.parse(buf.subarray(8, 8 + headerLen).toString('utf-8')) as TraceHeader;
  if (header.version !== TRACE_FORMAT_VERSION) {
    throw new Error(`${path}: unsupported version ${header.version}`);
  }
  const payload = buf.subarray(8 + headerLen);
  const expected = 4 * header.channels.length * header.length;
  if (payload.length !== expected) {
    throw new Error(`${path}: payload is ${payload.length} bytes, expected ${expected}`);
  }
  const samples = header.channels.map((_, c) => {
    const row = new Float32Array(header.length);
    for (let i = 0; i < header.length; i++) {
      row[i] = payload.readFloatLE(4 * (c * header.length + i));
    }
    return row;
  });
  return {
    channels: header.channels,
    sampleRateHz: header.sample_rate_hz,
    samples,
    meta: header.meta,
    header,
  };
}
