/**
 * Client session for the matserve offload protocol: connect, stream a
 * matrix up, run routines against handles, stream results back.
 *
 * Single event loop, one session per object. The driver channel is
 * strictly request-reply; row traffic goes over one socket per worker,
 * with requests to different workers in flight concurrently.
 */

import * as net from "net";

import {
  ErrorCode,
  FrameReader,
  MatrixInfo,
  Message,
  ParamMap,
  ParamValue,
  PROTOCOL_VERSION,
  encodeFrame,
} from "./wire";

export class ClientError extends Error {}

export class ServerError extends ClientError {
  constructor(
    public code: number,
    public serverMessage: string,
  ) {
    super(`server error ${code}: ${serverMessage}`);
  }
}

export class InvalidHandleError extends ClientError {}

/** Dense row-major float64 matrix. */
export interface DenseMatrix {
  rows: number;
  cols: number;
  data: Float64Array;
}

export function denseFromRows(rows: number[][]): DenseMatrix {
  const r = rows.length;
  const c = r > 0 ? rows[0].length : 0;
  const data = new Float64Array(r * c);
  rows.forEach((row, i) => data.set(row, i * c));
  return { rows: r, cols: c, data };
}

export interface MatrixHandle {
  matrixId: number;
  rows: number;
  cols: number;
  ranges: Array<[number, number, number]>;
  valid: boolean;
}

/** One request-reply socket with its own reassembly buffer. */
class Channel {
  private reader = new FrameReader();
  private waiter: { resolve: (m: Message) => void; reject: (e: Error) => void } | null = null;
  private queue: Array<() => void> = [];
  private busy = false;
  private closed: Error | null = null;

  constructor(private socket: net.Socket) {
    socket.on("data", (data) => this.onData(data));
    socket.on("error", (err) => this.fail(new ClientError(`socket error: ${err.message}`)));
    socket.on("close", () => this.fail(new ClientError("connection closed")));
  }

  private onData(data: Buffer) {
    let frames;
    try {
      frames = this.reader.feed(data);
    } catch (err) {
      this.fail(err as Error);
      return;
    }
    for (const { msg } of frames) {
      const waiter = this.waiter;
      if (!waiter) {
        this.fail(new ClientError("unsolicited frame on request-reply channel"));
        return;
      }
      this.waiter = null;
      if (msg.type === "error") {
        waiter.reject(new ServerError(msg.code, msg.message));
      } else {
        waiter.resolve(msg);
      }
    }
  }

  private fail(err: Error) {
    if (this.closed) return;
    this.closed = err;
    if (this.waiter) {
      const w = this.waiter;
      this.waiter = null;
      w.reject(err);
    }
    this.queue.splice(0).forEach((run) => run());
  }

  /** Serialize requests: at most one in flight per channel. */
  async request(msg: Message, sessionId: number): Promise<Message> {
    while (this.busy) {
      await new Promise<void>((resolve) => this.queue.push(resolve));
    }
    this.busy = true;
    try {
      if (this.closed) throw this.closed;
      return await new Promise<Message>((resolve, reject) => {
        this.waiter = { resolve, reject };
        this.socket.write(encodeFrame(msg, sessionId));
      });
    } finally {
      this.busy = false;
      const next = this.queue.shift();
      if (next) next();
    }
  }

  destroy() {
    this.closed = this.closed ?? new ClientError("session closed");
    this.socket.destroy();
  }
}

function connectSocket(host: string, port: number, timeoutMs: number): Promise<net.Socket> {
  return new Promise((resolve, reject) => {
    const socket = net.connect({ host, port, noDelay: true });
    const timer = setTimeout(() => {
      socket.destroy();
      reject(new ClientError(`connect to ${host}:${port} timed out`));
    }, timeoutMs);
    socket.once("connect", () => {
      clearTimeout(timer);
      resolve(socket);
    });
    socket.once("error", (err) => {
      clearTimeout(timer);
      reject(new ClientError(`connect to ${host}:${port} failed: ${err.message}`));
    });
  });
}

function splitAddress(address: string): [string, number] {
  const at = address.lastIndexOf(":");
  if (at < 0) throw new ClientError(`address ${address} is not host:port`);
  return [address.slice(0, at), Number(address.slice(at + 1))];
}

export interface SessionOptions {
  batchRows?: number;
  connectTimeoutMs?: number;
}

export class Session {
  private driver!: Channel;
  private workers = new Map<number, Channel>();
  private handles = new Map<number, MatrixHandle>();
  sessionId = 0;
  private closed = false;
  readonly batchRows: number;

  private constructor(batchRows: number) {
    this.batchRows = batchRows;
  }

  static async connect(
    address: string,
    workers: number,
    options: SessionOptions = {},
  ): Promise<Session> {
    const session = new Session(options.batchRows ?? 128);
    const timeout = options.connectTimeoutMs ?? 10_000;
    const [host, port] = splitAddress(address);
    session.driver = new Channel(await connectSocket(host, port, timeout));
    let ack: Message;
    try {
      ack = await session.driver.request(
        { type: "handshake", protocolVersion: PROTOCOL_VERSION, requestedWorkers: workers },
        0,
      );
      if (ack.type !== "handshake_ack") {
        throw new ClientError(`unexpected handshake reply ${ack.type}`);
      }
    } catch (err) {
      session.driver.destroy();
      throw err;
    }
    session.sessionId = ack.sessionId;
    try {
      for (const [workerId, addr] of ack.workers) {
        const [whost, wport] = splitAddress(addr);
        session.workers.set(workerId, new Channel(await connectSocket(whost, wport, timeout)));
      }
    } catch (err) {
      await session.close();
      throw err;
    }
    return session;
  }

  private checkOpen() {
    if (this.closed) throw new ClientError("session is closed");
  }

  private checkHandle(handle: MatrixHandle) {
    this.checkOpen();
    if (!handle.valid || !this.handles.has(handle.matrixId)) {
      throw new InvalidHandleError(`matrix ${handle.matrixId} handle is no longer valid`);
    }
  }

  private adopt(info: MatrixInfo): MatrixHandle {
    const handle: MatrixHandle = {
      matrixId: info.matrixId,
      rows: info.rows,
      cols: info.cols,
      ranges: info.ranges,
      valid: true,
    };
    this.handles.set(info.matrixId, handle);
    return handle;
  }

  /** Upload a dense matrix; resolves once the server reports it ready. */
  async sendMatrix(matrix: DenseMatrix): Promise<MatrixHandle> {
    this.checkOpen();
    if (matrix.rows < 1 || matrix.cols < 1) {
      throw new ClientError(`cannot send an empty ${matrix.rows} x ${matrix.cols} matrix`);
    }
    if (matrix.data.length !== matrix.rows * matrix.cols) {
      throw new ClientError("matrix data length must be rows * cols");
    }
    const info = await this.driver.request(
      { type: "create_matrix", rows: matrix.rows, cols: matrix.cols },
      this.sessionId,
    );
    if (info.type !== "matrix_info") {
      throw new ClientError(`unexpected CREATE_MATRIX reply ${info.type}`);
    }

    const uploads = info.ranges
      .filter(([, start, end]) => end > start)
      .map(async ([workerId, start, end]) => {
        const channel = this.workers.get(workerId);
        if (!channel) throw new ClientError(`no socket for worker ${workerId}`);
        for (let lo = start; lo < end; lo += this.batchRows) {
          const hi = Math.min(lo + this.batchRows, end);
          const indices: number[] = [];
          for (let i = lo; i < hi; i++) indices.push(i);
          const values = matrix.data.subarray(lo * matrix.cols, hi * matrix.cols);
          const ack = await channel.request(
            {
              type: "send_rows",
              matrixId: info.matrixId,
              indices,
              values: new Float64Array(values),
              cols: matrix.cols,
            },
            this.sessionId,
          );
          if (ack.type !== "rows_ack") {
            throw new ClientError(`unexpected SEND_ROWS reply ${ack.type}`);
          }
        }
      });
    try {
      await Promise.all(uploads);
    } catch (err) {
      await this.driver
        .request({ type: "release_matrix", matrixId: info.matrixId }, this.sessionId)
        .catch(() => undefined);
      throw err;
    }

    const ready = await this.driver.request(
      { type: "send_complete", matrixId: info.matrixId },
      this.sessionId,
    );
    if (ready.type !== "matrix_ready") {
      throw new ClientError(`unexpected SEND_COMPLETE reply ${ready.type}`);
    }
    return this.adopt(info);
  }

  /** Download a ready matrix, bit-exact, reassembled by row index. */
  async fetchMatrix(handle: MatrixHandle): Promise<DenseMatrix> {
    this.checkHandle(handle);
    const data = new Float64Array(handle.rows * handle.cols);
    const seen = new Uint8Array(handle.rows);
    const pulls = handle.ranges
      .filter(([, start, end]) => end > start)
      .map(async ([workerId, start, end]) => {
        const channel = this.workers.get(workerId);
        if (!channel) throw new ClientError(`no socket for worker ${workerId}`);
        for (let lo = start; lo < end; lo += this.batchRows) {
          const count = Math.min(this.batchRows, end - lo);
          const reply = await channel.request(
            { type: "fetch_rows", matrixId: handle.matrixId, rowStart: lo, rowCount: count },
            this.sessionId,
          );
          if (reply.type !== "rows_data") {
            throw new ClientError(`unexpected FETCH_ROWS reply ${reply.type}`);
          }
          reply.indices.forEach((rowIndex, i) => {
            seen[rowIndex] = 1;
            data.set(
              reply.values.subarray(i * reply.cols, (i + 1) * reply.cols),
              rowIndex * handle.cols,
            );
          });
        }
      });
    await Promise.all(pulls);
    if (seen.includes(0)) throw new ClientError("fetch left rows missing");
    return { rows: handle.rows, cols: handle.cols, data };
  }

  async registerLibrary(name: string, path = ""): Promise<number> {
    this.checkOpen();
    const ack = await this.driver.request(
      { type: "register_library", name, path },
      this.sessionId,
    );
    if (ack.type !== "library_ack") {
      throw new ClientError(`unexpected REGISTER_LIBRARY reply ${ack.type}`);
    }
    return ack.libId;
  }

  /** Run a routine on handle inputs; returns output handles plus scalars. */
  async run(
    libId: number,
    routine: string,
    inputs: MatrixHandle[],
    params: ParamMap = new Map(),
  ): Promise<{ handles: MatrixHandle[]; scalars: ParamMap }> {
    inputs.forEach((h) => this.checkHandle(h));
    const reply = await this.driver.request(
      { type: "run_task", libId, routine, inputs: inputs.map((h) => h.matrixId), params },
      this.sessionId,
    );
    if (reply.type !== "task_result") {
      throw new ClientError(`unexpected RUN_TASK reply ${reply.type}`);
    }
    return { handles: reply.outputs.map((info) => this.adopt(info)), scalars: reply.scalars };
  }

  async release(handle: MatrixHandle): Promise<void> {
    this.checkHandle(handle);
    await this.driver.request(
      { type: "release_matrix", matrixId: handle.matrixId },
      this.sessionId,
    );
    handle.valid = false;
    this.handles.delete(handle.matrixId);
  }

  /** Idempotent: closes the session and invalidates every handle. */
  async close(): Promise<void> {
    if (this.closed) return;
    this.closed = true;
    for (const handle of this.handles.values()) handle.valid = false;
    this.handles.clear();
    if (this.sessionId !== 0) {
      await this.driver
        .request({ type: "close_session" }, this.sessionId)
        .catch(() => undefined);
    }
    this.driver.destroy();
    for (const channel of this.workers.values()) channel.destroy();
  }

  get builtin(): BuiltinLibrary {
    return new BuiltinLibrary(this);
  }
}

function scalarNumber(scalars: ParamMap, key: string): number {
  const value = scalars.get(key);
  if (!value || (value.t !== "f64" && value.t !== "i64")) {
    throw new ClientError(`missing numeric scalar ${key}`);
  }
  return value.v;
}

export interface CgReport {
  iterations: number[];
  residuals: number[];
  converged: boolean[];
  iterationsTotal: number;
  iterSecondsMean: number;
  iterSecondsStd: number;
}

export interface SvdResult {
  U: MatrixHandle;
  S: number[];
  V: MatrixHandle;
  unreliable: boolean[];
  basis: number;
}

/** Typed stubs encoding the built-in routines' parameter schemas. */
export class BuiltinLibrary {
  private libIdPromise: Promise<number> | null = null;

  constructor(private session: Session) {}

  private libId(): Promise<number> {
    this.libIdPromise = this.libIdPromise ?? this.session.registerLibrary("builtin");
    return this.libIdPromise;
  }

  async qr(a: MatrixHandle): Promise<[MatrixHandle, MatrixHandle]> {
    const { handles } = await this.session.run(await this.libId(), "tsqr", [a]);
    return [handles[0], handles[1]];
  }

  async cg(
    x: MatrixHandle,
    y: MatrixHandle,
    lambda = 1e-5,
    tol = 1e-12,
    maxIter = 1000,
  ): Promise<{ w: MatrixHandle; report: CgReport }> {
    const params: ParamMap = new Map<string, ParamValue>([
      ["lambda", { t: "f64", v: lambda }],
      ["tol", { t: "f64", v: tol }],
      ["max_iter", { t: "i64", v: maxIter }],
    ]);
    const { handles, scalars } = await this.session.run(
      await this.libId(),
      "cg_solve",
      [x, y],
      params,
    );
    const columns = scalarNumber(scalars, "columns");
    const report: CgReport = {
      iterations: [],
      residuals: [],
      converged: [],
      iterationsTotal: scalarNumber(scalars, "iterations_total"),
      iterSecondsMean: scalarNumber(scalars, "iter_seconds_mean"),
      iterSecondsStd: scalarNumber(scalars, "iter_seconds_std"),
    };
    for (let j = 0; j < columns; j++) {
      report.iterations.push(scalarNumber(scalars, `iterations.${j}`));
      report.residuals.push(scalarNumber(scalars, `residual.${j}`));
      const flag = scalars.get(`converged.${j}`);
      report.converged.push(flag?.t === "bool" ? flag.v : false);
    }
    return { w: handles[0], report };
  }

  async svd(
    a: MatrixHandle,
    k: number,
    options: { tol?: number; maxSubspace?: number; seed?: number } = {},
  ): Promise<SvdResult> {
    const params: ParamMap = new Map<string, ParamValue>([
      ["k", { t: "i64", v: k }],
      ["tol", { t: "f64", v: options.tol ?? 1e-10 }],
      ["max_subspace", { t: "i64", v: options.maxSubspace ?? 0 }],
      ["seed", { t: "i64", v: options.seed ?? 0 }],
    ]);
    const { handles, scalars } = await this.session.run(
      await this.libId(),
      "truncated_svd",
      [a],
      params,
    );
    const kk = scalarNumber(scalars, "k");
    const S: number[] = [];
    const unreliable: boolean[] = [];
    for (let j = 0; j < kk; j++) {
      S.push(scalarNumber(scalars, `sigma.${j}`));
      const flag = scalars.get(`unreliable.${j}`);
      unreliable.push(flag?.t === "bool" ? flag.v : false);
    }
    return {
      U: handles[0],
      S,
      V: handles[1],
      unreliable,
      basis: scalarNumber(scalars, "basis"),
    };
  }

  async randomFeatures(
    x: MatrixHandle,
    numFeatures: number,
    sigma = 10.0,
    seed = 0,
  ): Promise<MatrixHandle> {
    const params: ParamMap = new Map<string, ParamValue>([
      ["num_features", { t: "i64", v: numFeatures }],
      ["sigma", { t: "f64", v: sigma }],
      ["seed", { t: "i64", v: seed }],
    ]);
    const { handles } = await this.session.run(
      await this.libId(),
      "random_features",
      [x],
      params,
    );
    return handles[0];
  }

  async loadFile(path: string): Promise<MatrixHandle> {
    const params: ParamMap = new Map<string, ParamValue>([
      ["path", { t: "str", v: path }],
    ]);
    const { handles } = await this.session.run(await this.libId(), "load_file", [], params);
    return handles[0];
  }
}

export { ErrorCode };
