"""Binary tensor files: ``FPCD`` magic, u32 version, u8 dtype, u8 ndim,
ndim x u64 dims, little-endian float64 payload."""

import struct

import numpy as np

MAGIC = b"FPCD"
VERSION = 1
DTYPE_F64 = 0


class TensorFormatError(ValueError):
    pass


def encode(array):
    arr = np.asarray(array, dtype="<f8")
    if arr.ndim > 255:
        raise TensorFormatError("too many dimensions")
    header = MAGIC + struct.pack("<IBB", VERSION, DTYPE_F64, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes()


def decode(buf, source="<bytes>"):
    if len(buf) < 10 or buf[:4] != MAGIC:
        raise TensorFormatError(f"{source}: missing FPCD magic")
    version, dtype, ndim = struct.unpack_from("<IBB", buf, 4)
    if version != VERSION:
        raise TensorFormatError(f"{source}: unsupported version {version}")
    if dtype != DTYPE_F64:
        raise TensorFormatError(f"{source}: unsupported dtype code {dtype}")
    dims = struct.unpack_from(f"<{ndim}Q", buf, 10)
    offset = 10 + 8 * ndim
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    if len(buf) - offset != 8 * count:
        raise TensorFormatError(f"{source}: payload has {len(buf) - offset} bytes, expected {8 * count}")
    return np.frombuffer(buf, dtype="<f8", offset=offset).astype(np.float64).reshape(dims)


def save_tensor(path, array):
    try:
        with open(path, "wb") as fh:
            fh.write(encode(array))
    except OSError as exc:
        raise OSError(f"cannot write tensor file {path}: {exc}") from exc


def load_tensor(path):
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read tensor file {path}: {exc}") from exc
    return decode(buf, source=str(path))
