"""Data-at-rest layer: chunked authenticated encryption with sealed keys.

Objects are encrypted with a random per-file key (AES-256-GCM), wrapped
under the store master key. Each 64 KiB chunk carries its index as
associated data and a nonce of file-random prefix plus chunk counter, so
bit flips, chunk swaps and truncation all fail authentication or length
checks. Object names are stored encrypted; on disk they appear only as a
keyed-hash alias.

The master key itself lives sealed to a measurement string: an emulation of
attestation-gated key release. A loopback daemon can serve the store over a
length-prefixed protocol, standing in for the sidecar hop.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import os
import re
import socket
import struct
import threading
from dataclasses import dataclass
from pathlib import Path

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from cryptography.hazmat.primitives.kdf.scrypt import Scrypt


class StoreError(RuntimeError):
    """Store failure that is not an authentication problem."""


class StoreAuthError(StoreError):
    """Ciphertext, header, or sealed key failed authentication."""


class MeasurementMismatch(StoreError):
    """Presented measurement does not match the sealed key's digest."""


MAGIC = b"EDST"
VERSION = 1
SEALED_MAGIC = b"EDSK"
DEFAULT_CHUNK_SIZE = 65536
MIN_CHUNK_SIZE = 4096
MAX_CHUNK_SIZE = 1 << 20
MAX_OBJECT_SIZE = 1 << 30
_TAG_LEN = 16
_NAME_RE = re.compile(r"^[A-Za-z0-9._-]{1,128}$")


class StoreMode(enum.Enum):
    PASSTHROUGH = "passthrough"
    SIDECAR_PLAIN = "sidecar"
    SIDECAR_ENCRYPTED = "sidecar-enc"


@dataclass(frozen=True)
class SealedKey:
    """Master key wrapped under a measurement-derived key."""

    measurement_digest: bytes
    salt: bytes
    nonce: bytes
    wrapped: bytes

    def to_bytes(self) -> bytes:
        return SEALED_MAGIC + struct.pack(">H", VERSION) + self.measurement_digest + \
            self.salt + self.nonce + self.wrapped

    @classmethod
    def from_bytes(cls, data: bytes) -> "SealedKey":
        if len(data) < 4 + 2 + 32 + 16 + 12 + _TAG_LEN or data[:4] != SEALED_MAGIC:
            raise StoreAuthError("not a sealed key blob")
        (version,) = struct.unpack(">H", data[4:6])
        if version != VERSION:
            raise StoreAuthError(f"unsupported sealed key version {version}")
        return cls(data[6:38], data[38:54], data[54:66], data[66:])


def _measurement_kek(measurement: str, salt: bytes) -> bytes:
    kdf = Scrypt(salt=salt, length=32, n=2**14, r=8, p=1)
    return kdf.derive(measurement.encode("utf-8"))


def seal_key(
    master_key: bytes,
    measurement: str,
    salt: bytes | None = None,
    nonce: bytes | None = None,
) -> SealedKey:
    """Bind a 32-byte master key to a measurement string.

    Salt and nonce default to fresh randomness; passing them makes the
    sealing deterministic for tests.
    """
    if len(master_key) != 32:
        raise ValueError("master key must be 32 bytes")
    if not measurement:
        raise ValueError("measurement must be non-empty")
    salt = os.urandom(16) if salt is None else salt
    nonce = os.urandom(12) if nonce is None else nonce
    if len(salt) != 16 or len(nonce) != 12:
        raise ValueError("salt must be 16 bytes and nonce 12 bytes")
    digest = hashlib.sha256(measurement.encode("utf-8")).digest()
    kek = _measurement_kek(measurement, salt)
    wrapped = AESGCM(kek).encrypt(nonce, master_key, b"opcvault sealed master")
    return SealedKey(digest, salt, nonce, wrapped)


def unseal_key(sealed: SealedKey, measurement: str) -> bytes:
    """Recover the master key; fails closed on any mismatch or tamper."""
    digest = hashlib.sha256(measurement.encode("utf-8")).digest()
    if not hmac.compare_digest(digest, sealed.measurement_digest):
        raise MeasurementMismatch("measurement does not match sealed key")
    kek = _measurement_kek(measurement, sealed.salt)
    try:
        return AESGCM(kek).decrypt(sealed.nonce, sealed.wrapped, b"opcvault sealed master")
    except InvalidTag as e:
        raise StoreAuthError("sealed key failed authentication") from e


@dataclass(frozen=True)
class StoreHeader:
    """Encrypted-object metadata, validated before any decryption."""

    version: int
    kdf_salt: bytes
    chunk_size: int
    plaintext_len: int
    nonce_prefix: bytes
    name_ct: bytes
    wrapped_key: bytes

    def to_bytes(self) -> bytes:
        return b"".join(
            [
                MAGIC,
                struct.pack(">H", self.version),
                self.kdf_salt,
                struct.pack(">IQ", self.chunk_size, self.plaintext_len),
                self.nonce_prefix,
                struct.pack(">H", len(self.name_ct)),
                self.name_ct,
                struct.pack(">H", len(self.wrapped_key)),
                self.wrapped_key,
            ]
        )

    @classmethod
    def parse(cls, data: bytes) -> tuple["StoreHeader", int]:
        if len(data) < 4 or data[:4] != MAGIC:
            raise StoreAuthError("bad store magic")
        (version,) = struct.unpack(">H", data[4:6])
        if version != VERSION:
            raise StoreAuthError(f"unsupported store version {version}")
        off = 6
        kdf_salt = data[off : off + 16]
        off += 16
        chunk_size, plaintext_len = struct.unpack(">IQ", data[off : off + 12])
        off += 12
        if not MIN_CHUNK_SIZE <= chunk_size <= MAX_CHUNK_SIZE:
            raise StoreAuthError(f"chunk_size {chunk_size} out of range")
        nonce_prefix = data[off : off + 4]
        off += 4
        (n_len,) = struct.unpack(">H", data[off : off + 2])
        off += 2
        name_ct = data[off : off + n_len]
        off += n_len
        (w_len,) = struct.unpack(">H", data[off : off + 2])
        off += 2
        wrapped_key = data[off : off + w_len]
        off += w_len
        if len(name_ct) != n_len or len(wrapped_key) != w_len:
            raise StoreAuthError("truncated store header")
        return cls(version, kdf_salt, chunk_size, plaintext_len, nonce_prefix,
                   name_ct, wrapped_key), off


def _chunk_nonce(prefix: bytes, index: int) -> bytes:
    return prefix + struct.pack(">Q", index)


def _wrap_key_for(master_key: bytes, salt: bytes) -> bytes:
    hkdf = HKDF(algorithm=hashes.SHA256(), length=32, salt=salt, info=b"opcvault file wrap")
    return hkdf.derive(master_key)


def _name_mac_key(master_key: bytes) -> bytes:
    hkdf = HKDF(algorithm=hashes.SHA256(), length=32, salt=b"\x00" * 16,
                info=b"opcvault name mac")
    return hkdf.derive(master_key)


def encrypt_object(name: str, data: bytes, master_key: bytes,
                   chunk_size: int = DEFAULT_CHUNK_SIZE) -> bytes:
    """Serialize one object: header then authenticated chunks."""
    if len(data) > MAX_OBJECT_SIZE:
        raise StoreError("object exceeds 1 GiB limit")
    salt = os.urandom(16)
    file_key = os.urandom(32)
    prefix = os.urandom(4)
    wrap = AESGCM(_wrap_key_for(master_key, salt))
    key_nonce = os.urandom(12)
    wrapped_key = key_nonce + wrap.encrypt(key_nonce, file_key, b"opcvault file key")
    name_nonce = os.urandom(12)
    name_ct = name_nonce + wrap.encrypt(name_nonce, name.encode("utf-8"), b"opcvault name")

    header = StoreHeader(VERSION, salt, chunk_size, len(data), prefix, name_ct, wrapped_key)
    out = [header.to_bytes()]
    aead = AESGCM(file_key)
    for index, start in enumerate(range(0, len(data), chunk_size)):
        chunk = data[start : start + chunk_size]
        out.append(aead.encrypt(_chunk_nonce(prefix, index), chunk, struct.pack(">Q", index)))
    return b"".join(out)


def _open_file_key(header: StoreHeader, master_key: bytes) -> tuple[bytes, bytes]:
    wrap = AESGCM(_wrap_key_for(master_key, header.kdf_salt))
    try:
        file_key = wrap.decrypt(header.wrapped_key[:12], header.wrapped_key[12:],
                                b"opcvault file key")
        name = wrap.decrypt(header.name_ct[:12], header.name_ct[12:], b"opcvault name")
    except InvalidTag as e:
        raise StoreAuthError("object header failed authentication") from e
    return file_key, name


def decrypt_object(blob: bytes, master_key: bytes) -> tuple[str, bytes]:
    """Authenticate and decrypt one object; returns (name, plaintext)."""
    header, off = StoreHeader.parse(blob)
    file_key, name = _open_file_key(header, master_key)
    aead = AESGCM(file_key)
    total = header.plaintext_len
    n_chunks = -(-total // header.chunk_size) if total else 0
    parts = []
    pos = off
    for index in range(n_chunks):
        plain_len = min(header.chunk_size, total - index * header.chunk_size)
        ct_len = plain_len + _TAG_LEN
        ct = blob[pos : pos + ct_len]
        if len(ct) != ct_len:
            raise StoreError(
                f"object truncated: chunk {index} incomplete "
                f"({len(ct)} of {ct_len} bytes)"
            )
        pos += ct_len
        try:
            parts.append(aead.decrypt(_chunk_nonce(header.nonce_prefix, index), ct,
                                      struct.pack(">Q", index)))
        except InvalidTag as e:
            raise StoreAuthError(f"chunk {index} failed authentication") from e
    if pos != len(blob):
        raise StoreError("object has trailing bytes past the final chunk")
    return name.decode("utf-8"), b"".join(parts)


def _check_name(name: str) -> None:
    if not _NAME_RE.match(name):
        raise StoreError(f"invalid object name {name!r}")


class LocalStore:
    """Direct file-backed store, plaintext or encrypted with a master key."""

    def __init__(self, root: str | Path, master_key: bytes | None = None):
        self.root = Path(root)
        self.objects = self.root / "objects"
        self.objects.mkdir(parents=True, exist_ok=True)
        self.master_key = master_key

    @property
    def encrypted(self) -> bool:
        return self.master_key is not None

    def _path(self, name: str) -> Path:
        if not self.encrypted:
            return self.objects / name
        alias = hmac.new(_name_mac_key(self.master_key), name.encode("utf-8"),
                         hashlib.sha256).hexdigest()[:40]
        return self.objects / alias

    def put(self, name: str, data: bytes) -> str:
        _check_name(name)
        if len(data) > MAX_OBJECT_SIZE:
            raise StoreError("object exceeds 1 GiB limit")
        path = self._path(name)
        payload = encrypt_object(name, data, self.master_key) if self.encrypted else data
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(payload)
        os.replace(tmp, path)
        return path.name

    def get(self, name: str) -> bytes:
        _check_name(name)
        path = self._path(name)
        if not path.exists():
            raise StoreError(f"unknown object {name!r}")
        blob = path.read_bytes()
        if not self.encrypted:
            return blob
        stored_name, data = decrypt_object(blob, self.master_key)
        if stored_name != name:
            raise StoreAuthError("object name does not match its alias")
        return data

    def list(self) -> list[str]:
        if not self.encrypted:
            return sorted(p.name for p in self.objects.iterdir() if p.is_file())
        names = []
        for p in sorted(self.objects.iterdir()):
            if not p.is_file():
                continue
            header, _ = StoreHeader.parse(p.read_bytes())
            _, name = _open_file_key(header, self.master_key)
            names.append(name.decode("utf-8"))
        return sorted(names)


SEALED_KEY_FILE = "sealed.key"


def write_sealed_key(root: str | Path, sealed: SealedKey) -> Path:
    keys = Path(root) / "keys"
    keys.mkdir(parents=True, exist_ok=True)
    path = keys / SEALED_KEY_FILE
    path.write_bytes(sealed.to_bytes())
    return path


def read_sealed_key(root: str | Path) -> SealedKey:
    path = Path(root) / "keys" / SEALED_KEY_FILE
    if not path.exists():
        raise StoreError(f"no sealed key at {path}")
    return SealedKey.from_bytes(path.read_bytes())


# Store wire protocol: 4-byte BE length, then 1-byte op, u16 name length,
# name bytes, payload. Responses: length, status (0x20 OK / 0x21 ERR), body.
OP_PUT = 0x10
OP_GET = 0x11
OP_LIST = 0x12
RESP_OK = 0x20
RESP_ERR = 0x21
_MAX_REQUEST = MAX_OBJECT_SIZE + 1024


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    parts = []
    remaining = n
    while remaining:
        chunk = sock.recv(min(remaining, 1 << 16))
        if not chunk:
            raise StoreError("store connection closed mid-message")
        parts.append(chunk)
        remaining -= len(chunk)
    return b"".join(parts)


class StoreDaemon:
    """Loopback daemon serving a store root; emulates the sidecar hop.

    In encrypted mode the daemon holds the unsealed master key; clients only
    ever see plaintext object bytes over the local protocol. If unsealing
    failed at startup the daemon still runs but refuses every operation, so
    a readiness probe (any LIST) fails.
    """

    def __init__(self, root: str | Path, mode: StoreMode,
                 measurement: str | None = None, addr: tuple[str, int] = ("127.0.0.1", 0)):
        if mode is StoreMode.PASSTHROUGH:
            raise StoreError("passthrough mode bypasses the daemon")
        self.mode = mode
        self.root = Path(root)
        self._seal_error: str | None = None
        master = None
        if mode is StoreMode.SIDECAR_ENCRYPTED:
            if measurement is None:
                raise StoreError("encrypted mode needs a measurement to unseal the key")
            try:
                master = unseal_key(read_sealed_key(self.root), measurement)
            except StoreError as e:
                self._seal_error = str(e)
        self._store = None if self._seal_error else LocalStore(self.root, master)
        self._sock = socket.create_server(addr)
        self._sock.settimeout(0.2)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._serve, daemon=True)
        self._thread.start()

    @property
    def address(self) -> tuple[str, int]:
        return self._sock.getsockname()[:2]

    def _serve(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            threading.Thread(target=self._session, args=(conn,), daemon=True).start()

    def _session(self, conn: socket.socket) -> None:
        conn.settimeout(30.0)
        try:
            while True:
                try:
                    head = _recv_exact(conn, 4)
                except StoreError:
                    return
                (length,) = struct.unpack(">I", head)
                if length > _MAX_REQUEST:
                    self._reply(conn, RESP_ERR, b"request too large")
                    return
                body = _recv_exact(conn, length)
                self._handle(conn, body)
        except (OSError, StoreError):
            pass
        finally:
            conn.close()

    def _handle(self, conn: socket.socket, body: bytes) -> None:
        if len(body) < 3:
            self._reply(conn, RESP_ERR, b"short request")
            return
        op = body[0]
        (name_len,) = struct.unpack(">H", body[1:3])
        name = body[3 : 3 + name_len].decode("utf-8", errors="replace")
        payload = body[3 + name_len :]
        if self._seal_error is not None:
            self._reply(conn, RESP_ERR, f"store sealed: {self._seal_error}".encode())
            return
        try:
            if op == OP_PUT:
                self._store.put(name, payload)
                self._reply(conn, RESP_OK, b"")
            elif op == OP_GET:
                self._reply(conn, RESP_OK, self._store.get(name))
            elif op == OP_LIST:
                self._reply(conn, RESP_OK, "\n".join(self._store.list()).encode())
            else:
                self._reply(conn, RESP_ERR, f"unknown op {op:#x}".encode())
        except StoreError as e:
            self._reply(conn, RESP_ERR, str(e).encode())

    @staticmethod
    def _reply(conn: socket.socket, status: int, body: bytes) -> None:
        conn.sendall(struct.pack(">I", len(body) + 1) + bytes([status]) + body)

    def close(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass
        self._thread.join(timeout=2.0)


class RemoteStore:
    """Client handle speaking the store wire protocol.

    Each operation uses a fresh connection so a handle can sit idle across a
    long compute phase without tripping the daemon's session timeout.
    """

    def __init__(self, addr: tuple[str, int], timeout: float = 30.0):
        self.addr = addr
        self.timeout = timeout

    def _request(self, op: int, name: str, payload: bytes = b"") -> bytes:
        name_b = name.encode("utf-8")
        body = bytes([op]) + struct.pack(">H", len(name_b)) + name_b + payload
        try:
            sock = socket.create_connection(self.addr, timeout=self.timeout)
        except OSError as e:
            raise StoreError(f"store connection to {self.addr} failed: {e}") from e
        try:
            sock.sendall(struct.pack(">I", len(body)) + body)
            (length,) = struct.unpack(">I", _recv_exact(sock, 4))
            resp = _recv_exact(sock, length)
        except OSError as e:
            raise StoreError(f"store request failed: {e}") from e
        finally:
            sock.close()
        if not resp:
            raise StoreError("empty store response")
        if resp[0] == RESP_OK:
            return resp[1:]
        raise StoreError(resp[1:].decode("utf-8", errors="replace"))

    def put(self, name: str, data: bytes) -> str:
        _check_name(name)
        if len(data) > MAX_OBJECT_SIZE:
            raise StoreError("object exceeds 1 GiB limit")
        self._request(OP_PUT, name, data)
        return name

    def get(self, name: str) -> bytes:
        _check_name(name)
        return self._request(OP_GET, name)

    def list(self) -> list[str]:
        body = self._request(OP_LIST, "")
        return body.decode("utf-8").split("\n") if body else []


def store_serve(addr: tuple[str, int], root: str | Path, mode: StoreMode,
                measurement: str | None = None) -> StoreDaemon:
    return StoreDaemon(root, mode, measurement, addr)


def store_client(addr: tuple[str, int]) -> RemoteStore:
    return RemoteStore(addr)
