"""Stereo render streaming over WebSocket.

Wire protocol, version NGFR/1:

* Server -> client, binary: a 24-byte little-endian header followed by the
  frame payload. Layout '<4sIBHHBBxQ':

      offset  size  field
      0       4     magic b"NGFR"
      4       4     frame id (u32; both eyes of a tick share one id)
      8       1     eye: 0 left, 1 right
      9       2     width (u16)
      11      2     height (u16)
      13      1     upscale factor the frame was rendered with
      14      1     encoding: 0 raw rgb8, 1 png
      15      1     reserved pad (zero)
      16      8     timestamp (u64, microseconds since the epoch)

  Raw payloads are exactly width*height*3 bytes, row-major rgb8. Payloads
  above 64 MiB are refused on both ends.

* Client -> server, text: one JSON object per message. "pose", "ipd",
  "settings", "aabb" and "manip" update the session with latest-wins
  semantics: whatever arrived last before a tick wins; updates apply at
  frame boundaries, never mid-frame. The server answers malformed control
  with {"type": "error", ...} and pushes {"type": "stats", ...} about once
  a second. On connect the server sends {"type": "hello", ...} describing
  the session.

RenderSession is synchronous and owns all state; serve() adds the asyncio
shell around it. Tests drive render_tick() directly, no sockets involved.
"""

from __future__ import annotations

import asyncio
import io
import json
import logging
import struct
import threading
import time
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image as PilImage

from .geometry import Aabb, Pose, Similarity, as_vec3, quat_identity, quat_normalize, vec3
from .images import Image
from .renderer import RenderSettings, StereoRig, render_stereo

log = logging.getLogger(__name__)

MAGIC = b"NGFR"
HEADER = struct.Struct("<4sIBHHBBxQ")
assert HEADER.size == 24

EYE_LEFT = 0
EYE_RIGHT = 1
ENCODING_RAW = 0
ENCODING_PNG = 1
MAX_PAYLOAD = 64 * 1024 * 1024
STATS_INTERVAL_S = 1.0


class ProtocolError(ValueError):
    """Malformed frame or control message."""


# --- binary frames ---


def encode_frame(
    image: Image,
    frame_id: int,
    eye: int,
    upscale: int = 1,
    encoding: int = ENCODING_RAW,
    timestamp_us: int | None = None,
) -> bytes:
    if eye not in (EYE_LEFT, EYE_RIGHT):
        raise ProtocolError(f"eye must be 0 or 1, got {eye}")
    if encoding not in (ENCODING_RAW, ENCODING_PNG):
        raise ProtocolError(f"unknown encoding {encoding}")
    w, h = image.width, image.height
    if w * h * 3 > MAX_PAYLOAD:
        raise ProtocolError(f"{w}x{h} frame exceeds the {MAX_PAYLOAD} byte payload cap")
    if timestamp_us is None:
        timestamp_us = time.time_ns() // 1000
    rgb8 = image.to_uint8()
    if encoding == ENCODING_RAW:
        payload = rgb8.tobytes()
    else:
        buf = io.BytesIO()
        PilImage.fromarray(rgb8, mode="RGB").save(buf, format="PNG")
        payload = buf.getvalue()
    header = HEADER.pack(
        MAGIC, frame_id & 0xFFFFFFFF, eye, w, h, upscale, encoding, timestamp_us
    )
    return header + payload


@dataclass(frozen=True)
class DecodedFrame:
    frame_id: int
    eye: int
    width: int
    height: int
    upscale: int
    encoding: int
    timestamp_us: int
    rgb8: np.ndarray  # (height, width, 3) uint8


def decode_frame(blob: bytes) -> DecodedFrame:
    if len(blob) < HEADER.size:
        raise ProtocolError(f"{len(blob)} bytes is shorter than the 24-byte header")
    magic, frame_id, eye, w, h, upscale, encoding, ts = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if eye not in (EYE_LEFT, EYE_RIGHT):
        raise ProtocolError(f"bad eye {eye}")
    if encoding not in (ENCODING_RAW, ENCODING_PNG):
        raise ProtocolError(f"unknown encoding {encoding}")
    if w * h * 3 > MAX_PAYLOAD:
        raise ProtocolError(f"{w}x{h} frame exceeds the {MAX_PAYLOAD} byte payload cap")
    payload = blob[HEADER.size :]
    if encoding == ENCODING_RAW:
        if len(payload) != w * h * 3:
            raise ProtocolError(
                f"raw payload is {len(payload)} bytes, header implies {w * h * 3}"
            )
        rgb8 = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()
    else:
        try:
            with PilImage.open(io.BytesIO(payload)) as im:
                rgb8 = np.asarray(im.convert("RGB"))
        except Exception as e:
            raise ProtocolError(f"png payload failed to decode: {e}") from e
        if rgb8.shape != (h, w, 3):
            raise ProtocolError(
                f"png payload is {rgb8.shape[1]}x{rgb8.shape[0]}, header says {w}x{h}"
            )
    return DecodedFrame(frame_id, eye, w, h, upscale, encoding, ts, rgb8)


# --- control messages ---


@dataclass(frozen=True)
class PoseMsg:
    position: np.ndarray
    rotation: np.ndarray


@dataclass(frozen=True)
class IpdMsg:
    value: float


@dataclass(frozen=True)
class SettingsMsg:
    width: int | None = None
    height: int | None = None
    samples_per_ray: int | None = None
    upscale: int | None = None


@dataclass(frozen=True)
class AabbMsg:
    aabb: Aabb


@dataclass(frozen=True)
class ManipMsg:
    transform: Similarity


def _require(doc: dict, key: str, kind: str):
    if key not in doc:
        raise ProtocolError(f"{kind} message is missing {key!r}")
    return doc[key]


def parse_control(text: str):
    """One JSON control message -> typed message. Raises ProtocolError."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ProtocolError(f"control message is not valid JSON: {e}") from e
    if not isinstance(doc, dict) or "type" not in doc:
        raise ProtocolError("control message must be an object with a 'type'")
    kind = doc["type"]
    try:
        if kind == "pose":
            pos = as_vec3(_require(doc, "position", kind))
            rot = quat_normalize(np.asarray(_require(doc, "rotation", kind), np.float32))
            return PoseMsg(position=pos, rotation=rot)
        if kind == "ipd":
            v = float(_require(doc, "value", kind))
            if not (0.0 <= v <= 0.1):
                raise ProtocolError(f"ipd {v} outside [0, 0.1]")
            return IpdMsg(value=v)
        if kind == "settings":
            fields = {}
            for key in ("width", "height", "samples_per_ray", "upscale"):
                if key in doc:
                    fields[key] = int(doc[key])
            if not fields:
                raise ProtocolError("settings message updates nothing")
            return SettingsMsg(**fields)
        if kind == "aabb":
            return AabbMsg(
                aabb=Aabb(
                    as_vec3(_require(doc, "min", kind)),
                    as_vec3(_require(doc, "max", kind)),
                )
            )
        if kind == "manip":
            return ManipMsg(
                transform=Similarity(
                    scale=float(doc.get("scale", 1.0)),
                    rotation=quat_normalize(
                        np.asarray(doc.get("rotation", (0, 0, 0, 1)), np.float32)
                    ),
                    translation=as_vec3(doc.get("translation", (0, 0, 0))),
                )
            )
    except ProtocolError:
        raise
    except (TypeError, ValueError) as e:
        raise ProtocolError(f"bad {kind} message: {e}") from e
    raise ProtocolError(f"unknown control message type {kind!r}")


def error_reply(message: str) -> str:
    return json.dumps({"type": "error", "message": message})


# --- session ---


@dataclass
class TickResult:
    frame_id: int
    frames: tuple  # encoded bytes, (left, right)
    render_ms: float


class RenderSession:
    """All mutable streaming state, synchronous and lock-guarded.

    Control updates land in a latest-wins slot per message type and are
    applied at the start of the next render_tick, so a frame never mixes
    two poses. Frame ids increase even when a tick fails mid-render.
    """

    def __init__(
        self,
        field,
        aabb: Aabb,
        settings: RenderSettings | None = None,
        head_pose: Pose | None = None,
        ipd: float = 0.063,
        fov_y: float = np.deg2rad(60.0),
        encoding: int = ENCODING_RAW,
    ):
        self.field = field
        if settings is None:
            settings = RenderSettings(width=320, height=240, samples_per_ray=32)
        self.settings = replace(settings, aabb=aabb)
        if head_pose is None:
            # Identity orientation looks down -Z, straight at the box center.
            head_pose = Pose(
                aabb.center + vec3(0.0, 0.0, 1.2 * aabb.scale), quat_identity()
            )
        self.head_pose = head_pose
        self.ipd = ipd
        self.fov_y = fov_y
        self.encoding = encoding
        self._pending: dict = {}
        self._lock = threading.Lock()
        self._next_frame_id = 0
        self._last_render_ms: float | None = None

    def submit(self, msg) -> None:
        """Queue a control message; the newest of each type wins."""
        with self._lock:
            if isinstance(msg, PoseMsg):
                self._pending["pose"] = msg
            elif isinstance(msg, IpdMsg):
                self._pending["ipd"] = msg
            elif isinstance(msg, SettingsMsg):
                merged = self._pending.get("settings")
                if merged is not None:
                    fields = {
                        k: getattr(msg, k) if getattr(msg, k) is not None else getattr(merged, k)
                        for k in ("width", "height", "samples_per_ray", "upscale")
                    }
                    msg = SettingsMsg(**fields)
                self._pending["settings"] = msg
            elif isinstance(msg, AabbMsg):
                self._pending["aabb"] = msg
            elif isinstance(msg, ManipMsg):
                self._pending["manip"] = msg
            else:
                raise TypeError(f"not a control message: {msg!r}")

    def handle_control(self, text: str) -> str | None:
        """Parse and queue one client message; an error reply or None."""
        try:
            self.submit(parse_control(text))
        except ProtocolError as e:
            return error_reply(str(e))
        return None

    def _apply_pending(self) -> None:
        with self._lock:
            pending, self._pending = self._pending, {}
        msg = pending.get("pose")
        if msg is not None:
            self.head_pose = Pose(msg.position, msg.rotation)
        msg = pending.get("ipd")
        if msg is not None:
            self.ipd = msg.value
        msg = pending.get("settings")
        if msg is not None:
            fields = {
                k: getattr(msg, k)
                for k in ("width", "height", "samples_per_ray", "upscale")
                if getattr(msg, k) is not None
            }
            self.settings = replace(self.settings, **fields)
        msg = pending.get("aabb")
        if msg is not None:
            self.settings = replace(self.settings, aabb=msg.aabb)
        msg = pending.get("manip")
        if msg is not None:
            self.settings = replace(self.settings, scene_transform=msg.transform)

    def render_tick(self) -> TickResult:
        """Apply pending control, render both eyes, encode them."""
        frame_id = self._next_frame_id
        self._next_frame_id += 1
        self._apply_pending()
        t0 = time.perf_counter()
        rig = StereoRig(head_pose=self.head_pose, ipd=self.ipd, fov_y=self.fov_y)
        left, right = render_stereo(self.field, rig, self.settings)
        render_ms = (time.perf_counter() - t0) * 1000.0
        ts = time.time_ns() // 1000
        frames = tuple(
            encode_frame(
                img, frame_id, eye, self.settings.upscale, self.encoding, ts
            )
            for eye, img in ((EYE_LEFT, left), (EYE_RIGHT, right))
        )
        self._last_render_ms = render_ms
        return TickResult(frame_id=frame_id, frames=frames, render_ms=render_ms)

    def hello_message(self) -> str:
        return json.dumps(
            {
                "type": "hello",
                "protocol": MAGIC.decode(),
                "version": 1,
                "width": self.settings.width,
                "height": self.settings.height,
                "upscale": self.settings.upscale,
                "samples_per_ray": self.settings.samples_per_ray,
                "encoding": self.encoding,
                "ipd": self.ipd,
                "fov_y": float(self.fov_y),
                "aabb": {
                    "min": self.settings.aabb.min.astype(float).tolist(),
                    "max": self.settings.aabb.max.astype(float).tolist(),
                },
            }
        )

    def stats_message(self, clients: int) -> str:
        ms = self._last_render_ms
        return json.dumps(
            {
                "type": "stats",
                "frame_id": self._next_frame_id - 1,
                "frame_ms": None if ms is None else round(ms, 3),
                "fps": None if ms in (None, 0.0) else round(1000.0 / ms, 3),
                "clients": clients,
            }
        )


# --- asyncio shell ---


async def serve_async(
    session: RenderSession,
    host: str = "127.0.0.1",
    port: int = 8765,
    tick_rate: float = 30.0,
    ready: "asyncio.Event | None" = None,
    stop: "asyncio.Event | None" = None,
) -> None:
    """Run the streaming server until stop is set (forever by default)."""
    import websockets

    clients: set = set()
    loop = asyncio.get_running_loop()

    async def handler(ws):
        clients.add(ws)
        try:
            await ws.send(session.hello_message())
            async for message in ws:
                if isinstance(message, bytes):
                    await ws.send(error_reply("binary frames are not accepted"))
                    continue
                reply = session.handle_control(message)
                if reply is not None:
                    await ws.send(reply)
        except websockets.ConnectionClosed:
            pass
        finally:
            clients.discard(ws)

    async def broadcast(payload) -> None:
        if not clients:
            return
        results = await asyncio.gather(
            *(ws.send(payload) for ws in tuple(clients)), return_exceptions=True
        )
        for r in results:
            if isinstance(r, Exception) and not isinstance(
                r, websockets.ConnectionClosed
            ):
                log.warning("send failed: %s", r)

    async def render_loop() -> None:
        period = 1.0 / tick_rate
        last_stats = time.perf_counter()
        while stop is None or not stop.is_set():
            t0 = time.perf_counter()
            if clients:
                try:
                    tick = await loop.run_in_executor(None, session.render_tick)
                except Exception:
                    log.exception("render tick failed")
                else:
                    for frame in tick.frames:
                        await broadcast(frame)
                if time.perf_counter() - last_stats >= STATS_INTERVAL_S:
                    await broadcast(session.stats_message(len(clients)))
                    last_stats = time.perf_counter()
            await asyncio.sleep(max(0.0, period - (time.perf_counter() - t0)))

    async with websockets.serve(handler, host, port):
        log.info("streaming on ws://%s:%d", host, port)
        if ready is not None:
            ready.set()
        render_task = asyncio.create_task(render_loop())
        try:
            if stop is None:
                await asyncio.Future()
            else:
                await stop.wait()
        finally:
            render_task.cancel()
            try:
                await render_task
            except asyncio.CancelledError:
                pass


def serve(session: RenderSession, host="127.0.0.1", port=8765, tick_rate=30.0) -> None:
    asyncio.run(serve_async(session, host=host, port=port, tick_rate=tick_rate))
