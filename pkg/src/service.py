"""Service mode: the RAN controller as a CMI endpoint over TCP.

Connection handlers only decode frames and enqueue work. A single consumer
task owns the controller, so every message, timer and app intent is
processed in one serialized order.
"""

import asyncio
import logging
from collections import Counter
from functools import partial
from typing import Callable

from .apps import build_app
from .cmi import CmiMessage, DecodeError, StreamDecoder, encode_frame, error_message
from .config import CMI_HOST, CMI_PORT
from .controller import ControllerError, RanController

logger = logging.getLogger(__name__)

BUSY = "BUSY"


class ControllerService:
    """Accepts one WAE connection at a time and drives a fresh controller per connection."""

    def __init__(self, apps: dict[str, dict] | None = None):
        self.apps = dict(apps or {})
        self.queue: asyncio.Queue[Callable[[], None]] = asyncio.Queue()
        self.counters: Counter[str] = Counter()
        self.controller: RanController | None = None
        self._writer: asyncio.StreamWriter | None = None
        self._loop = asyncio.get_running_loop()
        self._epoch = self._loop.time()

    def _clock_us(self) -> int:
        return int((self._loop.time() - self._epoch) * 1_000_000)

    def _schedule(self, delay_us: int, fn: Callable[[], None]) -> None:
        self._loop.call_later(delay_us / 1_000_000, self.queue.put_nowait, fn)

    def _send(self, msg: CmiMessage) -> None:
        if self._writer is None or self._writer.is_closing():
            self.counters["send_without_peer"] += 1
            return
        self._writer.write(encode_frame(msg))

    def _new_controller(self) -> RanController:
        controller = RanController(send=self._send, clock=self._clock_us, schedule=self._schedule)
        for name, params in self.apps.items():
            controller.register_app(build_app(name, params))
        return controller

    async def handle_connection(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        peer = writer.get_extra_info("peername")
        if self._writer is not None:
            logger.warning("refusing second WAE connection from %s", peer)
            writer.write(encode_frame(error_message(0, BUSY, "controller already serves a WAE")))
            await writer.drain()
            writer.close()
            return

        logger.info("WAE connected from %s", peer)
        self._writer = writer
        self.controller = self._new_controller()
        self.queue.put_nowait(self.controller.start)
        decoder = StreamDecoder()
        try:
            while data := await reader.read(65536):
                for item in decoder.feed(data):
                    if isinstance(item, DecodeError):
                        self.counters["decode_errors"] += 1
                        logger.warning("CMI decode error from %s: %s", peer, item)
                    else:
                        self.queue.put_nowait(partial(self.controller.receive, item))
        finally:
            logger.info("WAE %s disconnected", peer)
            self._writer = None
            writer.close()

    async def consume(self) -> None:
        while True:
            job = await self.queue.get()
            try:
                job()
            except ControllerError as exc:
                self.counters["controller_errors"] += 1
                logger.warning("controller error: %s", exc)
            except Exception:
                self.counters["job_failures"] += 1
                logger.exception("controller job failed")
            finally:
                self.queue.task_done()

    async def start(self, host: str = CMI_HOST, port: int = CMI_PORT) -> asyncio.base_events.Server:
        server = await asyncio.start_server(self.handle_connection, host, port)
        self._consumer = asyncio.create_task(self.consume())
        return server


async def _serve(host: str, port: int, apps: dict[str, dict] | None) -> None:
    service = ControllerService(apps)
    server = await service.start(host, port)
    async with server:
        await server.serve_forever()


def serve(host: str = CMI_HOST, port: int = CMI_PORT, apps: dict[str, dict] | None = None) -> None:
    """Run the controller endpoint until interrupted."""
    asyncio.run(_serve(host, port, apps))
