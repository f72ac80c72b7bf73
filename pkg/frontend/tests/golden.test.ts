import * as fs from "fs";
import * as path from "path";

import { describe, expect, it } from "vitest";

import { decodeFrame, encodeFrame } from "../src/wire";
import { messageFromJson } from "./golden";

const GOLDEN = path.resolve(__dirname, "..", "..", "golden", "frames.json");

interface GoldenCase {
  name: string;
  session_id: number;
  hex: string;
  message: any;
}

const cases: GoldenCase[] = JSON.parse(fs.readFileSync(GOLDEN, "utf-8"));

describe("golden frame conformance", () => {
  for (const goldenCase of cases) {
    it(`encodes ${goldenCase.name} byte-exactly`, () => {
      const msg = messageFromJson(goldenCase.message);
      const raw = encodeFrame(msg, goldenCase.session_id);
      expect(raw.toString("hex")).toBe(goldenCase.hex);
    });

    it(`decodes ${goldenCase.name} byte-exactly`, () => {
      const raw = Buffer.from(goldenCase.hex, "hex");
      const decoded = decodeFrame(raw);
      expect(decoded).not.toBeNull();
      expect(decoded!.consumed).toBe(raw.length);
      expect(decoded!.sessionId).toBe(goldenCase.session_id);
      // decode -> re-encode must reproduce the exact bytes
      const reencoded = encodeFrame(decoded!.msg, decoded!.sessionId);
      expect(reencoded.toString("hex")).toBe(goldenCase.hex);
      expect(decoded!.msg.type).toBe(goldenCase.message.type);
    });
  }

  it("streams split frames across arbitrary chunk boundaries", async () => {
    const { FrameReader } = await import("../src/wire");
    const blob = Buffer.concat(
      cases.map((c) => Buffer.from(c.hex, "hex")),
    );
    for (const step of [1, 3, 7, 13, 64]) {
      const reader = new FrameReader();
      const got: string[] = [];
      for (let i = 0; i < blob.length; i += step) {
        for (const { msg } of reader.feed(blob.subarray(i, i + step))) {
          got.push(msg.type);
        }
      }
      expect(got).toEqual(cases.map((c) => c.message.type));
      expect(reader.atBoundary).toBe(true);
    }
  });
});
