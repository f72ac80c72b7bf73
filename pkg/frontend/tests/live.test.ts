/**
 * Live interop tests against the reference server started by setup.ts:
 * bit-exact round-trip, the known-answer SVD example, and a CG solve that
 * must match the reference client's result on the same inputs.
 */

import * as fs from "fs";
import * as path from "path";

import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { readMatrix } from "../src/binfile";
import { DenseMatrix, ServerError, Session, denseFromRows } from "../src/client";

const CONTEXT = path.resolve(__dirname, ".live-context.json");

let address: string;
let fixtures: string;

beforeAll(() => {
  const ctx = JSON.parse(fs.readFileSync(CONTEXT, "utf-8"));
  address = ctx.address;
  fixtures = ctx.fixtures;
});

/** Deterministic test matrix, no RNG libraries needed. */
function patternMatrix(rows: number, cols: number): DenseMatrix {
  const data = new Float64Array(rows * cols);
  let state = 0x2545f491;
  for (let i = 0; i < data.length; i++) {
    // xorshift32 mapped into [-1, 1), plus some special values
    state ^= state << 13;
    state ^= state >>> 17;
    state ^= state << 5;
    state >>>= 0;
    data[i] = state / 2 ** 31 - 1.0;
  }
  data[0] = -0.0;
  if (data.length > 1) data[1] = 5e-324;
  if (data.length > 2) data[2] = 1.7976931348623157e308;
  return { rows, cols, data };
}

function frobenius(a: Float64Array): number {
  let sum = 0;
  for (const x of a) sum += x * x;
  return Math.sqrt(sum);
}

describe("live server interop", () => {
  let session: Session;

  beforeAll(async () => {
    session = await Session.connect(address, 2);
  });

  afterAll(async () => {
    await session.close();
  });

  it("round-trips a matrix bit-exactly", async () => {
    const matrix = patternMatrix(257, 19);
    const handle = await session.sendMatrix(matrix);
    const back = await session.fetchMatrix(handle);
    expect(back.rows).toBe(257);
    expect(back.cols).toBe(19);
    expect(Buffer.from(back.data.buffer).equals(Buffer.from(matrix.data.buffer))).toBe(true);
    await session.release(handle);
  });

  it("computes the known SVD of an embedded diagonal", async () => {
    const rows: number[][] = [];
    for (let i = 0; i < 10; i++) rows.push([0, 0, 0]);
    rows[0][0] = 3.0;
    rows[1][1] = 2.0;
    rows[2][2] = 1.0;
    const handle = await session.sendMatrix(denseFromRows(rows));
    const result = await session.builtin.svd(handle, 2);
    expect(result.S.length).toBe(2);
    expect(Math.abs(result.S[0] - 3.0)).toBeLessThan(1e-8);
    expect(Math.abs(result.S[1] - 2.0)).toBeLessThan(1e-8);
    const u = await session.fetchMatrix(result.U);
    expect(u.rows).toBe(10);
    expect(u.cols).toBe(2);
  });

  it("matches the reference client's CG solution within 1e-8", async () => {
    const X = readMatrix(path.join(fixtures, "X.alch"));
    const Y = readMatrix(path.join(fixtures, "Y.alch"));
    const refW = readMatrix(path.join(fixtures, "W_ref.alch"));
    const meta = JSON.parse(fs.readFileSync(path.join(fixtures, "meta.json"), "utf-8"));

    const hx = await session.sendMatrix(X);
    const hy = await session.sendMatrix(Y);
    const { w, report } = await session.builtin.cg(
      hx,
      hy,
      meta.lambda,
      meta.tol,
      meta.max_iter,
    );
    expect(report.converged.every(Boolean)).toBe(true);
    const mine = await session.fetchMatrix(w);
    expect(mine.rows).toBe(refW.rows);
    expect(mine.cols).toBe(refW.cols);

    const diff = new Float64Array(mine.data.length);
    for (let i = 0; i < diff.length; i++) diff[i] = mine.data[i] - refW.data[i];
    const relErr = frobenius(diff) / frobenius(refW.data);
    expect(relErr).toBeLessThan(1e-8);
  });

  it("surfaces server errors with their codes", async () => {
    const handle = await session.sendMatrix(patternMatrix(4, 2));
    await expect(
      session.run((await session.registerLibrary("builtin")) as number, "nope", [handle]),
    ).rejects.toMatchObject({ code: 5 });
    await session.release(handle);
    await expect(session.fetchMatrix(handle)).rejects.toBeInstanceOf(Error);
  });

  it("rejects oversized worker requests with code 2", async () => {
    await expect(Session.connect(address, 64)).rejects.toMatchObject({
      code: 2,
    });
  });

  it("runs two independent sessions concurrently", async () => {
    const matrix = patternMatrix(64, 8);
    const [a, b] = await Promise.all([Session.connect(address, 2), Session.connect(address, 2)]);
    try {
      const [ha, hb] = await Promise.all([a.sendMatrix(matrix), b.sendMatrix(matrix)]);
      expect(ha.matrixId).not.toBe(hb.matrixId);
      const [backA, backB] = await Promise.all([a.fetchMatrix(ha), b.fetchMatrix(hb)]);
      expect(Buffer.from(backA.data.buffer).equals(Buffer.from(backB.data.buffer))).toBe(true);
      // sessions cannot see each other's matrices
      await expect(b.run(await b.registerLibrary("builtin"), "tsqr", [ha])).rejects.toThrow();
    } finally {
      await Promise.all([a.close(), b.close()]);
    }
  });
});
