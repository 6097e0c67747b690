"""Channel layer under the cluster protocol: plaintext or mutually
authenticated TLS scoped to one workload.

In mutual mode both peers present certificates issued under the workload's
self-signed trust anchor; the handshake fails before any application frame
when either side lacks one, and the verified peer's workload id and role are
surfaced on the channel. Credentials are plain files, emulating
sidecar-mounted identities.
"""

from __future__ import annotations

import datetime
import enum
import io
import socket
import ssl
import threading
from dataclasses import dataclass
from pathlib import Path

from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.x509.oid import NameOID


class TransportError(ConnectionError):
    """Channel setup or I/O failure."""


class AuthenticationError(TransportError):
    """Peer could not prove membership in the workload."""


class SecurityMode(enum.Enum):
    PLAIN = "plain"
    MUTUAL = "mutual"


@dataclass(frozen=True)
class WorkloadCredential:
    """One member identity plus the workload trust anchor, as file paths."""

    anchor_path: Path
    cert_path: Path
    key_path: Path
    workload_id: str
    role: str


ANCHOR_FILE = "anchor.pem"
ANCHOR_KEY_FILE = "anchor.key"


def _member_files(index: int) -> tuple[str, str]:
    return f"member-{index}.crt", f"member-{index}.key"


def gen_workload_credentials(
    workload_id: str,
    n_members: int,
    out_dir: str | Path,
    valid_days: int = 7,
) -> Path:
    """Issue a trust anchor plus member identities into a new directory.

    Member 0 is the primary, the rest are workers. Refuses to overwrite an
    existing bundle.
    """
    if not workload_id:
        raise ValueError("workload_id must be non-empty")
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        raise FileExistsError(f"credential directory {out} already exists")
    out.mkdir(parents=True, exist_ok=True)

    now = datetime.datetime.now(datetime.timezone.utc)
    not_after = now + datetime.timedelta(days=valid_days)

    anchor_key = ec.generate_private_key(ec.SECP256R1())
    anchor_name = x509.Name(
        [
            x509.NameAttribute(NameOID.ORGANIZATION_NAME, workload_id),
            x509.NameAttribute(NameOID.COMMON_NAME, f"{workload_id} anchor"),
        ]
    )
    anchor_cert = (
        x509.CertificateBuilder()
        .subject_name(anchor_name)
        .issuer_name(anchor_name)
        .public_key(anchor_key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(now - datetime.timedelta(minutes=5))
        .not_valid_after(not_after)
        .add_extension(x509.BasicConstraints(ca=True, path_length=0), critical=True)
        .sign(anchor_key, hashes.SHA256())
    )
    (out / ANCHOR_FILE).write_bytes(anchor_cert.public_bytes(serialization.Encoding.PEM))
    (out / ANCHOR_KEY_FILE).write_bytes(
        anchor_key.private_bytes(
            serialization.Encoding.PEM,
            serialization.PrivateFormat.PKCS8,
            serialization.NoEncryption(),
        )
    )

    for k in range(n_members):
        role = "primary" if k == 0 else "worker"
        key = ec.generate_private_key(ec.SECP256R1())
        subject = x509.Name(
            [
                x509.NameAttribute(NameOID.ORGANIZATION_NAME, workload_id),
                x509.NameAttribute(NameOID.ORGANIZATIONAL_UNIT_NAME, role),
                x509.NameAttribute(NameOID.COMMON_NAME, f"{workload_id} member {k}"),
            ]
        )
        cert = (
            x509.CertificateBuilder()
            .subject_name(subject)
            .issuer_name(anchor_name)
            .public_key(key.public_key())
            .serial_number(x509.random_serial_number())
            .not_valid_before(now - datetime.timedelta(minutes=5))
            .not_valid_after(not_after)
            .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
            .sign(anchor_key, hashes.SHA256())
        )
        crt_name, key_name = _member_files(k)
        (out / crt_name).write_bytes(cert.public_bytes(serialization.Encoding.PEM))
        (out / key_name).write_bytes(
            key.private_bytes(
                serialization.Encoding.PEM,
                serialization.PrivateFormat.PKCS8,
                serialization.NoEncryption(),
            )
        )
    return out


def load_credential(creds_dir: str | Path, member: int) -> WorkloadCredential:
    """Load one member identity from a credential bundle directory."""
    creds = Path(creds_dir)
    crt_name, key_name = _member_files(member)
    cert_path = creds / crt_name
    if not cert_path.exists():
        raise FileNotFoundError(f"no member {member} identity in {creds}")
    cert = x509.load_pem_x509_certificate(cert_path.read_bytes())
    workload = cert.subject.get_attributes_for_oid(NameOID.ORGANIZATION_NAME)[0].value
    ous = cert.subject.get_attributes_for_oid(NameOID.ORGANIZATIONAL_UNIT_NAME)
    role = ous[0].value if ous else "member"
    return WorkloadCredential(creds / ANCHOR_FILE, cert_path, creds / key_name, workload, role)


def _peer_identity(sslobj: ssl.SSLSocket) -> tuple[str, str]:
    der = sslobj.getpeercert(binary_form=True)
    if der is None:
        raise AuthenticationError("peer presented no certificate")
    cert = x509.load_der_x509_certificate(der)
    orgs = cert.subject.get_attributes_for_oid(NameOID.ORGANIZATION_NAME)
    ous = cert.subject.get_attributes_for_oid(NameOID.ORGANIZATIONAL_UNIT_NAME)
    if not orgs:
        raise AuthenticationError("peer certificate names no workload")
    return orgs[0].value, (ous[0].value if ous else "member")


class Channel:
    """Ordered reliable byte stream with optional verified peer identity."""

    def __init__(self, sock: socket.socket, peer_workload_id: str | None = None,
                 peer_role: str | None = None):
        self._sock = sock
        self.peer_workload_id = peer_workload_id
        self.peer_role = peer_role

    def send(self, data: bytes) -> None:
        try:
            self._sock.sendall(data)
        except (OSError, ssl.SSLError) as e:
            raise TransportError(f"send failed: {e}") from e

    def recv_exact(self, n: int) -> bytes:
        buf = io.BytesIO()
        remaining = n
        while remaining:
            try:
                chunk = self._sock.recv(min(remaining, 1 << 16))
            except (OSError, ssl.SSLError) as e:
                raise TransportError(f"recv failed: {e}") from e
            if not chunk:
                raise TransportError("connection closed mid-message")
            buf.write(chunk)
            remaining -= len(chunk)
        return buf.getvalue()

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


def _server_context(credential: WorkloadCredential) -> ssl.SSLContext:
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
    ctx.minimum_version = ssl.TLSVersion.TLSv1_3
    ctx.load_cert_chain(str(credential.cert_path), str(credential.key_path))
    ctx.load_verify_locations(str(credential.anchor_path))
    ctx.verify_mode = ssl.CERT_REQUIRED
    return ctx


def _client_context(credential: WorkloadCredential) -> ssl.SSLContext:
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
    ctx.minimum_version = ssl.TLSVersion.TLSv1_3
    ctx.check_hostname = False  # identity is the workload, not a hostname
    ctx.verify_mode = ssl.CERT_REQUIRED
    ctx.load_cert_chain(str(credential.cert_path), str(credential.key_path))
    ctx.load_verify_locations(str(credential.anchor_path))
    return ctx


class Listener:
    """Accepts channels in the configured security mode."""

    def __init__(self, addr: tuple[str, int], mode: SecurityMode,
                 credential: WorkloadCredential | None = None):
        if mode is SecurityMode.MUTUAL and credential is None:
            raise TransportError("mutual mode requires credentials")
        self.mode = mode
        self.credential = credential
        self._ctx = _server_context(credential) if mode is SecurityMode.MUTUAL else None
        self._sock = socket.create_server(addr)
        self._sock.settimeout(0.2)

    @property
    def address(self) -> tuple[str, int]:
        return self._sock.getsockname()[:2]

    def accept(self, timeout: float | None = None) -> Channel | None:
        """One accept attempt; None on timeout.

        Raises AuthenticationError when a peer fails the mutual handshake,
        which happens before any application frame is exchanged.
        """
        if timeout is not None:
            self._sock.settimeout(timeout)
        try:
            raw, _ = self._sock.accept()
        except socket.timeout:
            return None
        raw.settimeout(30.0)
        if self.mode is SecurityMode.PLAIN:
            return Channel(raw)
        try:
            tls = self._ctx.wrap_socket(raw, server_side=True)
            workload, role = _peer_identity(tls)
        except (ssl.SSLError, OSError) as e:
            raw.close()
            raise AuthenticationError(f"mutual handshake failed: {e}") from e
        if workload != self.credential.workload_id:
            tls.close()
            raise AuthenticationError(
                f"peer belongs to workload {workload!r}, expected "
                f"{self.credential.workload_id!r}"
            )
        return Channel(tls, workload, role)

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


def listen(addr: tuple[str, int], mode: SecurityMode,
           credential: WorkloadCredential | None = None) -> Listener:
    return Listener(addr, mode, credential)


def connect(addr: tuple[str, int], mode: SecurityMode,
            credential: WorkloadCredential | None = None,
            timeout: float = 10.0) -> Channel:
    """Open a channel; in mutual mode both sides authenticate before use."""
    if mode is SecurityMode.MUTUAL and credential is None:
        raise TransportError("mutual mode requires credentials")
    try:
        raw = socket.create_connection(addr, timeout=timeout)
    except OSError as e:
        raise TransportError(f"connect to {addr} failed: {e}") from e
    raw.settimeout(30.0)
    if mode is SecurityMode.PLAIN:
        return Channel(raw)
    try:
        tls = _client_context(credential).wrap_socket(raw)
        workload, role = _peer_identity(tls)
    except (ssl.SSLError, OSError) as e:
        raw.close()
        raise AuthenticationError(f"mutual handshake failed: {e}") from e
    if workload != credential.workload_id:
        tls.close()
        raise AuthenticationError(
            f"peer belongs to workload {workload!r}, expected {credential.workload_id!r}"
        )
    return Channel(tls, workload, role)


class TapProxy:
    """Test instrument: relays TCP and copies raw wire bytes to a sink.

    Sits between workers and the primary so tests can assert what an
    on-path observer sees. Never alters the stream.
    """

    def __init__(self, target: tuple[str, int]):
        self.target = target
        self.sink = io.BytesIO()
        self._lock = threading.Lock()
        self._sock = socket.create_server(("127.0.0.1", 0))
        self._sock.settimeout(0.2)
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()

    @property
    def address(self) -> tuple[str, int]:
        return self._sock.getsockname()[:2]

    def wire_bytes(self) -> bytes:
        with self._lock:
            return self.sink.getvalue()

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                client, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            try:
                upstream = socket.create_connection(self.target, timeout=10.0)
            except OSError:
                client.close()
                continue
            for src, dst in ((client, upstream), (upstream, client)):
                t = threading.Thread(target=self._pump, args=(src, dst), daemon=True)
                t.start()
                self._threads.append(t)

    def _pump(self, src: socket.socket, dst: socket.socket) -> None:
        try:
            while True:
                data = src.recv(1 << 16)
                if not data:
                    break
                with self._lock:
                    self.sink.write(data)
                dst.sendall(data)
        except OSError:
            pass
        finally:
            for s in (src, dst):
                try:
                    s.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass

    def close(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass


def parse_address(text: str) -> tuple[str, int]:
    """Parse 'host:port' into a socket address."""
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {text!r}")
    return host, int(port)
