/**
 * Binary codec for the matserve offload protocol (see docs/PROTOCOL.md in
 * the repository root; golden/frames.json holds the canonical test frames).
 *
 * Framing: 13-byte header (msg_type u8, session_id u32, payload_len u64),
 * then the payload. All integers little-endian; floats are IEEE 754
 * binary64. Row payloads are moved with byte copies, never through JS
 * number conversion, so NaN payloads and signed zeros survive bit-exactly.
 */

export const PROTOCOL_VERSION = 1;
export const HEADER_LEN = 13;

export const MsgType = {
  Handshake: 0x01,
  HandshakeAck: 0x02,
  RegisterLibrary: 0x03,
  LibraryAck: 0x04,
  CreateMatrix: 0x05,
  MatrixInfo: 0x06,
  SendRows: 0x07,
  RowsAck: 0x08,
  SendComplete: 0x09,
  MatrixReady: 0x0a,
  RunTask: 0x0b,
  TaskResult: 0x0c,
  FetchRows: 0x0d,
  RowsData: 0x0e,
  ReleaseMatrix: 0x0f,
  CloseSession: 0x10,
  Error: 0x7f,
} as const;

export const ErrorCode = {
  VersionMismatch: 1,
  InsufficientWorkers: 2,
  ResourceExhausted: 3,
  MatrixIncomplete: 4,
  UnknownRoutine: 5,
  SchemaViolation: 6,
  NumericalFailure: 7,
  UnknownMatrix: 8,
  ProtocolViolation: 9,
  UnknownLibrary: 10,
  Io: 11,
} as const;

export class DecodeError extends Error {}
export class EncodeError extends Error {}

/** Typed ParamMap value; the tag picks the wire encoding. */
export type ParamValue =
  | { t: "f64"; v: number }
  | { t: "i64"; v: number }
  | { t: "str"; v: string }
  | { t: "bool"; v: boolean }
  | { t: "handle"; v: number };

export type ParamMap = Map<string, ParamValue>;

export interface MatrixInfo {
  type: "matrix_info";
  matrixId: number;
  rows: number;
  cols: number;
  /** [workerId, rowStart, rowEndExcl] sorted, contiguous, covering [0, rows) */
  ranges: Array<[number, number, number]>;
}

export interface RowBlock {
  matrixId: number;
  indices: number[];
  /** row-major n x cols block; length = indices.length * cols */
  values: Float64Array;
  cols: number;
}

export type Message =
  | { type: "handshake"; protocolVersion: number; requestedWorkers: number }
  | { type: "handshake_ack"; sessionId: number; workers: Array<[number, string]> }
  | { type: "register_library"; name: string; path: string }
  | { type: "library_ack"; libId: number }
  | { type: "create_matrix"; rows: number; cols: number }
  | MatrixInfo
  | ({ type: "send_rows" } & RowBlock)
  | { type: "rows_ack"; matrixId: number; rowsReceived: number }
  | { type: "send_complete"; matrixId: number }
  | { type: "matrix_ready"; matrixId: number }
  | { type: "run_task"; libId: number; routine: string; inputs: number[]; params: ParamMap }
  | { type: "task_result"; status: number; outputs: MatrixInfo[]; scalars: ParamMap }
  | { type: "fetch_rows"; matrixId: number; rowStart: number; rowCount: number }
  | ({ type: "rows_data" } & RowBlock)
  | { type: "release_matrix"; matrixId: number }
  | { type: "close_session" }
  | { type: "error"; code: number; message: string };

const U16_MAX = 0xffff;
const U32_MAX = 0xffffffff;

function checkRange(value: number, max: number, what: string): number {
  if (!Number.isInteger(value) || value < 0 || value > max) {
    throw new EncodeError(`${what} ${value} out of range [0, ${max}]`);
  }
  return value;
}

/** Growable little-endian writer. */
class Writer {
  private chunks: Buffer[] = [];

  u8(v: number) {
    const b = Buffer.allocUnsafe(1);
    b.writeUInt8(checkRange(v, 0xff, "u8"));
    this.chunks.push(b);
  }

  u16(v: number) {
    const b = Buffer.allocUnsafe(2);
    b.writeUInt16LE(checkRange(v, U16_MAX, "u16"));
    this.chunks.push(b);
  }

  u32(v: number) {
    const b = Buffer.allocUnsafe(4);
    b.writeUInt32LE(checkRange(v, U32_MAX, "u32"));
    this.chunks.push(b);
  }

  u64(v: number) {
    if (!Number.isSafeInteger(v) || v < 0) {
      throw new EncodeError(`u64 field ${v} outside the safe integer range`);
    }
    const b = Buffer.allocUnsafe(8);
    b.writeBigUInt64LE(BigInt(v));
    this.chunks.push(b);
  }

  i64(v: number) {
    if (!Number.isSafeInteger(v)) {
      throw new EncodeError(`i64 field ${v} outside the safe integer range`);
    }
    const b = Buffer.allocUnsafe(8);
    b.writeBigInt64LE(BigInt(v));
    this.chunks.push(b);
  }

  f64(v: number) {
    const b = Buffer.allocUnsafe(8);
    b.writeDoubleLE(v);
    this.chunks.push(b);
  }

  str16(s: string, what = "string") {
    const raw = Buffer.from(s, "utf-8");
    if (raw.length > U16_MAX) throw new EncodeError(`${what} longer than 65535 bytes`);
    this.u16(raw.length);
    this.chunks.push(raw);
  }

  raw(b: Buffer) {
    this.chunks.push(b);
  }

  done(): Buffer {
    return Buffer.concat(this.chunks);
  }
}

class Reader {
  private pos = 0;

  constructor(private buf: Buffer) {}

  private need(n: number) {
    if (this.pos + n > this.buf.length) {
      throw new DecodeError("payload truncated inside message body");
    }
  }

  u8(): number {
    this.need(1);
    return this.buf.readUInt8(this.pos++);
  }

  u16(): number {
    this.need(2);
    const v = this.buf.readUInt16LE(this.pos);
    this.pos += 2;
    return v;
  }

  u32(): number {
    this.need(4);
    const v = this.buf.readUInt32LE(this.pos);
    this.pos += 4;
    return v;
  }

  u64(): number {
    this.need(8);
    const v = this.buf.readBigUInt64LE(this.pos);
    this.pos += 8;
    if (v > BigInt(Number.MAX_SAFE_INTEGER)) {
      throw new DecodeError(`u64 value ${v} exceeds the safe integer range`);
    }
    return Number(v);
  }

  i64(): number {
    this.need(8);
    const v = this.buf.readBigInt64LE(this.pos);
    this.pos += 8;
    if (v > BigInt(Number.MAX_SAFE_INTEGER) || v < -BigInt(Number.MAX_SAFE_INTEGER)) {
      throw new DecodeError(`i64 value ${v} exceeds the safe integer range`);
    }
    return Number(v);
  }

  f64(): number {
    this.need(8);
    const v = this.buf.readDoubleLE(this.pos);
    this.pos += 8;
    return v;
  }

  str16(): string {
    const n = this.u16();
    this.need(n);
    const s = this.buf.toString("utf-8", this.pos, this.pos + n);
    this.pos += n;
    return s;
  }

  bytes(n: number): Buffer {
    this.need(n);
    const b = this.buf.subarray(this.pos, this.pos + n);
    this.pos += n;
    return b;
  }

  remaining(): number {
    return this.buf.length - this.pos;
  }

  finish() {
    if (this.pos !== this.buf.length) {
      throw new DecodeError(`${this.buf.length - this.pos} trailing bytes after message body`);
    }
  }
}

function writeParamMap(w: Writer, params: ParamMap) {
  w.u16(params.size);
  for (const [key, value] of params) {
    w.str16(key, "param key");
    switch (value.t) {
      case "f64":
        w.u8(0);
        w.f64(value.v);
        break;
      case "i64":
        w.u8(1);
        w.i64(value.v);
        break;
      case "str":
        w.u8(2);
        w.str16(value.v, "param string");
        break;
      case "bool":
        w.u8(3);
        w.u8(value.v ? 1 : 0);
        break;
      case "handle":
        w.u8(4);
        w.u64(value.v);
        break;
    }
  }
}

function readParamMap(r: Reader): ParamMap {
  const count = r.u16();
  const params: ParamMap = new Map();
  for (let i = 0; i < count; i++) {
    const key = r.str16();
    if (params.has(key)) throw new DecodeError(`duplicate param key ${key}`);
    const tag = r.u8();
    switch (tag) {
      case 0:
        params.set(key, { t: "f64", v: r.f64() });
        break;
      case 1:
        params.set(key, { t: "i64", v: r.i64() });
        break;
      case 2:
        params.set(key, { t: "str", v: r.str16() });
        break;
      case 3: {
        const raw = r.u8();
        if (raw !== 0 && raw !== 1) throw new DecodeError(`bool param has value ${raw}`);
        params.set(key, { t: "bool", v: raw === 1 });
        break;
      }
      case 4:
        params.set(key, { t: "handle", v: r.u64() });
        break;
      default:
        throw new DecodeError(`unknown param tag ${tag}`);
    }
  }
  return params;
}

function writeMatrixInfoBody(w: Writer, mi: MatrixInfo) {
  w.u64(mi.matrixId);
  w.u64(mi.rows);
  w.u64(mi.cols);
  w.u16(mi.ranges.length);
  for (const [workerId, start, end] of mi.ranges) {
    w.u16(workerId);
    w.u64(start);
    w.u64(end);
  }
}

function readMatrixInfoBody(r: Reader): MatrixInfo {
  const matrixId = r.u64();
  const rows = r.u64();
  const cols = r.u64();
  const count = r.u16();
  const ranges: Array<[number, number, number]> = [];
  let prevEnd = 0;
  for (let i = 0; i < count; i++) {
    const workerId = r.u16();
    const start = r.u64();
    const end = r.u64();
    if (start !== prevEnd || end < start) {
      throw new DecodeError("matrix info ranges must be sorted, disjoint, and contiguous");
    }
    prevEnd = end;
    ranges.push([workerId, start, end]);
  }
  if (prevEnd !== rows) {
    throw new DecodeError("matrix info ranges must cover [0, rows) exactly");
  }
  return { type: "matrix_info", matrixId, rows, cols, ranges };
}

function writeRowBlock(w: Writer, block: RowBlock) {
  const n = block.indices.length;
  if (block.values.length !== n * block.cols) {
    throw new EncodeError("row block values length must be rows * cols");
  }
  w.u64(block.matrixId);
  w.u32(n);
  if (n === 0) return;
  const perRow = 8 + 8 * block.cols;
  const out = Buffer.allocUnsafe(n * perRow);
  const valueBytes = Buffer.from(block.values.buffer, block.values.byteOffset, block.values.byteLength);
  for (let i = 0; i < n; i++) {
    out.writeBigUInt64LE(BigInt(block.indices[i]), i * perRow);
    valueBytes.copy(out, i * perRow + 8, i * 8 * block.cols, (i + 1) * 8 * block.cols);
  }
  w.raw(out);
}

function readRowBlock(r: Reader): RowBlock {
  const matrixId = r.u64();
  const n = r.u32();
  const rem = r.remaining();
  if (n === 0) {
    if (rem !== 0) throw new DecodeError("row payload present but row_count is 0");
    return { matrixId, indices: [], values: new Float64Array(0), cols: 0 };
  }
  if (rem % n !== 0) throw new DecodeError("row payload length not divisible by row_count");
  const perRow = rem / n;
  if (perRow < 8 || (perRow - 8) % 8 !== 0) {
    throw new DecodeError("row payload length inconsistent with an f64 row layout");
  }
  const cols = (perRow - 8) / 8;
  const raw = r.bytes(rem);
  const indices: number[] = new Array(n);
  const values = new Float64Array(n * cols);
  const valueBytes = Buffer.from(values.buffer);
  for (let i = 0; i < n; i++) {
    const idx = raw.readBigUInt64LE(i * perRow);
    if (idx > BigInt(Number.MAX_SAFE_INTEGER)) {
      throw new DecodeError(`row index ${idx} exceeds the safe integer range`);
    }
    indices[i] = Number(idx);
    // byte copy keeps NaN payloads and signed zeros intact
    raw.copy(valueBytes, i * 8 * cols, i * perRow + 8, (i + 1) * perRow);
  }
  return { matrixId, indices, values, cols };
}

export function encodeMessage(msg: Message): [number, Buffer] {
  const w = new Writer();
  switch (msg.type) {
    case "handshake":
      w.u16(msg.protocolVersion);
      w.u16(msg.requestedWorkers);
      return [MsgType.Handshake, w.done()];
    case "handshake_ack":
      w.u32(msg.sessionId);
      w.u16(msg.workers.length);
      for (const [workerId, addr] of msg.workers) {
        w.u16(workerId);
        w.str16(addr, "worker address");
      }
      return [MsgType.HandshakeAck, w.done()];
    case "register_library":
      w.str16(msg.name, "library name");
      w.str16(msg.path, "library path");
      return [MsgType.RegisterLibrary, w.done()];
    case "library_ack":
      w.u16(msg.libId);
      return [MsgType.LibraryAck, w.done()];
    case "create_matrix":
      w.u64(msg.rows);
      w.u64(msg.cols);
      return [MsgType.CreateMatrix, w.done()];
    case "matrix_info":
      writeMatrixInfoBody(w, msg);
      return [MsgType.MatrixInfo, w.done()];
    case "send_rows":
      writeRowBlock(w, msg);
      return [MsgType.SendRows, w.done()];
    case "rows_ack":
      w.u64(msg.matrixId);
      w.u32(msg.rowsReceived);
      return [MsgType.RowsAck, w.done()];
    case "send_complete":
      w.u64(msg.matrixId);
      return [MsgType.SendComplete, w.done()];
    case "matrix_ready":
      w.u64(msg.matrixId);
      return [MsgType.MatrixReady, w.done()];
    case "run_task":
      w.u16(msg.libId);
      w.str16(msg.routine, "routine name");
      w.u8(msg.inputs.length);
      for (const id of msg.inputs) w.u64(id);
      writeParamMap(w, msg.params);
      return [MsgType.RunTask, w.done()];
    case "task_result":
      w.u8(msg.status);
      w.u8(msg.outputs.length);
      for (const mi of msg.outputs) writeMatrixInfoBody(w, mi);
      writeParamMap(w, msg.scalars);
      return [MsgType.TaskResult, w.done()];
    case "fetch_rows":
      w.u64(msg.matrixId);
      w.u64(msg.rowStart);
      w.u32(msg.rowCount);
      return [MsgType.FetchRows, w.done()];
    case "rows_data":
      writeRowBlock(w, msg);
      return [MsgType.RowsData, w.done()];
    case "release_matrix":
      w.u64(msg.matrixId);
      return [MsgType.ReleaseMatrix, w.done()];
    case "close_session":
      return [MsgType.CloseSession, Buffer.alloc(0)];
    case "error":
      w.u16(msg.code);
      w.str16(msg.message, "error message");
      return [MsgType.Error, w.done()];
  }
}

export function encodeFrame(msg: Message, sessionId: number): Buffer {
  const [msgType, payload] = encodeMessage(msg);
  const header = Buffer.allocUnsafe(HEADER_LEN);
  header.writeUInt8(msgType, 0);
  header.writeUInt32LE(checkRange(sessionId, U32_MAX, "session_id"), 1);
  header.writeBigUInt64LE(BigInt(payload.length), 5);
  return Buffer.concat([header, payload]);
}

function decodeBody(msgType: number, payload: Buffer): Message {
  const r = new Reader(payload);
  let msg: Message;
  switch (msgType) {
    case MsgType.Handshake:
      msg = { type: "handshake", protocolVersion: r.u16(), requestedWorkers: r.u16() };
      break;
    case MsgType.HandshakeAck: {
      const sessionId = r.u32();
      const count = r.u16();
      const workers: Array<[number, string]> = [];
      for (let i = 0; i < count; i++) workers.push([r.u16(), r.str16()]);
      msg = { type: "handshake_ack", sessionId, workers };
      break;
    }
    case MsgType.RegisterLibrary:
      msg = { type: "register_library", name: r.str16(), path: r.str16() };
      break;
    case MsgType.LibraryAck:
      msg = { type: "library_ack", libId: r.u16() };
      break;
    case MsgType.CreateMatrix:
      msg = { type: "create_matrix", rows: r.u64(), cols: r.u64() };
      break;
    case MsgType.MatrixInfo:
      msg = readMatrixInfoBody(r);
      break;
    case MsgType.SendRows:
      msg = { type: "send_rows", ...readRowBlock(r) };
      break;
    case MsgType.RowsAck:
      msg = { type: "rows_ack", matrixId: r.u64(), rowsReceived: r.u32() };
      break;
    case MsgType.SendComplete:
      msg = { type: "send_complete", matrixId: r.u64() };
      break;
    case MsgType.MatrixReady:
      msg = { type: "matrix_ready", matrixId: r.u64() };
      break;
    case MsgType.RunTask: {
      const libId = r.u16();
      const routine = r.str16();
      const nInputs = r.u8();
      const inputs: number[] = [];
      for (let i = 0; i < nInputs; i++) inputs.push(r.u64());
      msg = { type: "run_task", libId, routine, inputs, params: readParamMap(r) };
      break;
    }
    case MsgType.TaskResult: {
      const status = r.u8();
      const nOutputs = r.u8();
      const outputs: MatrixInfo[] = [];
      for (let i = 0; i < nOutputs; i++) outputs.push(readMatrixInfoBody(r));
      msg = { type: "task_result", status, outputs, scalars: readParamMap(r) };
      break;
    }
    case MsgType.FetchRows:
      msg = { type: "fetch_rows", matrixId: r.u64(), rowStart: r.u64(), rowCount: r.u32() };
      break;
    case MsgType.RowsData:
      msg = { type: "rows_data", ...readRowBlock(r) };
      break;
    case MsgType.ReleaseMatrix:
      msg = { type: "release_matrix", matrixId: r.u64() };
      break;
    case MsgType.CloseSession:
      msg = { type: "close_session" };
      break;
    case MsgType.Error:
      msg = { type: "error", code: r.u16(), message: r.str16() };
      break;
    default:
      throw new DecodeError(`unknown msg_type 0x${msgType.toString(16)}`);
  }
  r.finish();
  return msg;
}

export interface DecodedFrame {
  msg: Message;
  sessionId: number;
  consumed: number;
}

/** Decode one frame at `offset`; null means "need more bytes". */
export function decodeFrame(buf: Buffer, offset = 0): DecodedFrame | null {
  if (buf.length - offset < HEADER_LEN) return null;
  const msgType = buf.readUInt8(offset);
  const sessionId = buf.readUInt32LE(offset + 1);
  const payloadLen = buf.readBigUInt64LE(offset + 5);
  if (payloadLen > BigInt(Number.MAX_SAFE_INTEGER)) {
    throw new DecodeError("payload_len exceeds the safe integer range");
  }
  const total = HEADER_LEN + Number(payloadLen);
  if (buf.length - offset < total) return null;
  const payload = buf.subarray(offset + HEADER_LEN, offset + total);
  return { msg: decodeBody(msgType, payload), sessionId, consumed: total };
}

/** Reassembles frames from an arbitrarily segmented byte stream. */
export class FrameReader {
  private buf: Buffer = Buffer.alloc(0);

  feed(data: Buffer): Array<{ msg: Message; sessionId: number }> {
    this.buf = this.buf.length ? Buffer.concat([this.buf, data]) : Buffer.from(data);
    const out: Array<{ msg: Message; sessionId: number }> = [];
    let pos = 0;
    for (;;) {
      const decoded = decodeFrame(this.buf, pos);
      if (decoded === null) break;
      out.push({ msg: decoded.msg, sessionId: decoded.sessionId });
      pos += decoded.consumed;
    }
    if (pos > 0) this.buf = Buffer.from(this.buf.subarray(pos));
    return out;
  }

  get atBoundary(): boolean {
    return this.buf.length === 0;
  }
}
