/** Adapter from golden/frames.json message objects to wire messages. */

import { Message, MatrixInfo, ParamMap, ParamValue } from "../src/wire";

type JsonParams = Array<[string, string, unknown]>;

function paramsFromJson(triples: JsonParams): ParamMap {
  const params: ParamMap = new Map();
  for (const [key, tag, value] of triples) {
    switch (tag) {
      case "f64":
        params.set(key, { t: "f64", v: value as number });
        break;
      case "i64":
        params.set(key, { t: "i64", v: value as number });
        break;
      case "str":
        params.set(key, { t: "str", v: value as string });
        break;
      case "bool":
        params.set(key, { t: "bool", v: value as boolean });
        break;
      case "handle":
        params.set(key, { t: "handle", v: value as number });
        break;
      default:
        throw new Error(`unknown param tag ${tag}`);
    }
  }
  return params;
}

function matrixInfoFromJson(obj: any): MatrixInfo {
  return {
    type: "matrix_info",
    matrixId: obj.matrix_id,
    rows: obj.rows,
    cols: obj.cols,
    ranges: obj.ranges.map((r: number[]) => [r[0], r[1], r[2]]),
  };
}

function rowsFromJson(obj: any): { indices: number[]; values: Float64Array; cols: number } {
  const indices: number[] = obj.indices;
  const cols = indices.length > 0 ? obj.values[0].length : 0;
  const values = new Float64Array(indices.length * cols);
  obj.values.forEach((row: number[], i: number) => values.set(row, i * cols));
  return { indices, values, cols };
}

export function messageFromJson(obj: any): Message {
  switch (obj.type) {
    case "handshake":
      return {
        type: "handshake",
        protocolVersion: obj.protocol_version,
        requestedWorkers: obj.requested_workers,
      };
    case "handshake_ack":
      return {
        type: "handshake_ack",
        sessionId: obj.session_id,
        workers: obj.workers.map((w: [number, string]) => [w[0], w[1]]),
      };
    case "register_library":
      return { type: "register_library", name: obj.name, path: obj.path };
    case "library_ack":
      return { type: "library_ack", libId: obj.lib_id };
    case "create_matrix":
      return { type: "create_matrix", rows: obj.rows, cols: obj.cols };
    case "matrix_info":
      return matrixInfoFromJson(obj);
    case "send_rows":
      return { type: "send_rows", matrixId: obj.matrix_id, ...rowsFromJson(obj) };
    case "rows_ack":
      return { type: "rows_ack", matrixId: obj.matrix_id, rowsReceived: obj.rows_received };
    case "send_complete":
      return { type: "send_complete", matrixId: obj.matrix_id };
    case "matrix_ready":
      return { type: "matrix_ready", matrixId: obj.matrix_id };
    case "run_task":
      return {
        type: "run_task",
        libId: obj.lib_id,
        routine: obj.routine,
        inputs: obj.inputs,
        params: paramsFromJson(obj.params),
      };
    case "task_result":
      return {
        type: "task_result",
        status: obj.status,
        outputs: obj.outputs.map(matrixInfoFromJson),
        scalars: paramsFromJson(obj.scalars),
      };
    case "fetch_rows":
      return {
        type: "fetch_rows",
        matrixId: obj.matrix_id,
        rowStart: obj.row_start,
        rowCount: obj.row_count,
      };
    case "rows_data":
      return { type: "rows_data", matrixId: obj.matrix_id, ...rowsFromJson(obj) };
    case "release_matrix":
      return { type: "release_matrix", matrixId: obj.matrix_id };
    case "close_session":
      return { type: "close_session" };
    case "error":
      return { type: "error", code: obj.code, message: obj.message };
    default:
      throw new Error(`unknown golden message type ${obj.type}`);
  }
}
