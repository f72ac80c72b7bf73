/**
 * Loader for the flat `ALCH` matrix-file format: 4-byte magic, u16
 * version, u64 rows, u64 cols, then a row-major float64 payload, all
 * little-endian.
 */

import * as fs from "fs";

import { DenseMatrix } from "./client";

export const HEADER_LEN = 22;

export class BinMatrixError extends Error {}

export function readMatrix(path: string): DenseMatrix {
  const raw = fs.readFileSync(path);
  if (raw.length < HEADER_LEN) throw new BinMatrixError("file shorter than header");
  if (raw.toString("latin1", 0, 4) !== "ALCH") {
    throw new BinMatrixError("bad magic");
  }
  const version = raw.readUInt16LE(4);
  if (version !== 1) throw new BinMatrixError(`unsupported version ${version}`);
  const rows = Number(raw.readBigUInt64LE(6));
  const cols = Number(raw.readBigUInt64LE(14));
  const expected = HEADER_LEN + 8 * rows * cols;
  if (raw.length !== expected) {
    throw new BinMatrixError(`file size ${raw.length} != ${expected}`);
  }
  const data = new Float64Array(rows * cols);
  raw.copy(Buffer.from(data.buffer), 0, HEADER_LEN);
  return { rows, cols, data };
}

export function writeMatrix(path: string, matrix: DenseMatrix): void {
  const header = Buffer.allocUnsafe(HEADER_LEN);
  header.write("ALCH", 0, "latin1");
  header.writeUInt16LE(1, 4);
  header.writeBigUInt64LE(BigInt(matrix.rows), 6);
  header.writeBigUInt64LE(BigInt(matrix.cols), 14);
  const payload = Buffer.from(matrix.data.buffer, matrix.data.byteOffset, matrix.data.byteLength);
  fs.writeFileSync(path, Buffer.concat([header, payload]));
}
