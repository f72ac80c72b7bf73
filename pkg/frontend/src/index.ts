export {
  BuiltinLibrary,
  CgReport,
  ClientError,
  DenseMatrix,
  InvalidHandleError,
  MatrixHandle,
  ServerError,
  Session,
  SvdResult,
  denseFromRows,
} from "./client";
export { BinMatrixError, readMatrix, writeMatrix } from "./binfile";
export {
  DecodeError,
  EncodeError,
  ErrorCode,
  FrameReader,
  Message,
  MsgType,
  ParamMap,
  ParamValue,
  PROTOCOL_VERSION,
  decodeFrame,
  encodeFrame,
  encodeMessage,
} from "./wire";
