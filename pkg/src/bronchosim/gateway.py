"""WebSocket service exposing a teleoperation session to browser clients.

One pilot, any number of observers. The control loop is an asyncio task
ticking at the control rate; network I/O never blocks it: every client has
a one-slot outbox and slow consumers simply drop frames. Inputs land in a
latest-wins mailbox consumed once per tick; inputs older than a few ticks
are discarded so a vanished pilot coasts to zero intent.

All frames are JSON text. Every message carries schema_version.
"""

from __future__ import annotations

import asyncio
import json
import logging
import time

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from .config import StackConfig
from .model import LatentDynamicsModel
from .session import Hat, OperatorInput, TeleopSession

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = 1


def input_from_message(msg: dict) -> OperatorInput:
    """Validate and clamp a client input message."""
    axes = msg.get("axes", [0.0, 0.0, 0.0])
    if not isinstance(axes, (list, tuple)) or len(axes) != 3:
        raise ValueError("axes must be a list of 3 numbers")
    buttons = msg.get("buttons", {})
    try:
        hat = Hat(msg.get("hat", "none"))
    except ValueError as e:
        raise ValueError(f"unknown hat value {msg.get('hat')!r}") from e
    return OperatorInput(
        axes=tuple(float(a) for a in axes),
        throttle=float(msg.get("throttle", 0.0)),
        hat=hat,
        retract_tube=bool(buttons.get("retract_tube", False)),
        next_waypoint=bool(buttons.get("next_waypoint", False)),
        toggle_guidance=bool(buttons.get("toggle_guidance", False)),
        estop=bool(buttons.get("estop", False)),
    ).clamped()


def state_message(session: TeleopSession, record: dict, cfg: StackConfig) -> dict:
    n_pts = cfg.gateway.stream_backbone_points
    return {
        "type": "state",
        "schema_version": PROTOCOL_VERSION,
        "tick": record["tick"],
        "phase": record["phase"],
        "tip": record["plant"]["tip"],
        "tube_insertion": record["plant"]["tube_insertion"],
        "insertion": record["plant"]["insertion"],
        "backbone": record["backbone16"][: n_pts * 3],
        "guidance": record["guidance"],
        "gt_carina": record["gt_carina"],
        "solver_ms": (record["solver"] or {}).get("ms") if record["solver"] else None,
        "guidance_enabled": session.guidance_enabled,
        "depth": session.last_depth_b64,
        "depth_dims": [cfg.perception.camera.height, cfg.perception.camera.width],
        "depth_max_range": cfg.perception.camera.max_range,
    }


class GatewayService:
    """Session owner plus client registry; created once per process."""

    def __init__(self, cfg: StackConfig, model: LatentDynamicsModel):
        self.cfg = cfg
        self.model = model
        self.session: TeleopSession | None = None
        self.running = False
        self.scenario = "standard"
        self.seed = 0
        self.pilot: WebSocket | None = None
        self.outboxes: dict[WebSocket, asyncio.Queue] = {}
        self.mailbox: tuple[OperatorInput, int] | None = None  # (input, tick received)
        self.tick_task: asyncio.Task | None = None

    # -- client management -------------------------------------------------------

    def register(self, ws: WebSocket) -> str:
        role = "pilot" if self.pilot is None else "observer"
        if role == "pilot":
            self.pilot = ws
        self.outboxes[ws] = asyncio.Queue(maxsize=1)
        return role

    def unregister(self, ws: WebSocket) -> None:
        self.outboxes.pop(ws, None)
        if self.pilot is ws:
            self.pilot = None
            self.mailbox = None

    def broadcast(self, message: dict) -> None:
        text = json.dumps(message)
        for q in self.outboxes.values():
            if q.full():
                try:
                    q.get_nowait()  # drop the stale frame, keep latest
                except asyncio.QueueEmpty:
                    pass
            q.put_nowait(text)

    # -- commands ------------------------------------------------------------------

    def ensure_session(self) -> TeleopSession:
        if self.session is None:
            self.session = TeleopSession(
                self.cfg, self.model, scenario=self.scenario, mode="piloted", seed=self.seed
            )
        return self.session

    def handle_command(self, verb: str, args: dict) -> dict:
        if verb == "start":
            self.ensure_session()
            self.running = True
        elif verb == "stop":
            self.running = False
        elif verb == "reset":
            self.session = None
            self.mailbox = None
            self.ensure_session()
        elif verb == "set_scenario":
            scenario = args.get("scenario", "standard")
            if scenario not in ("standard", "constrained"):
                raise ValueError(f"unknown scenario {scenario!r}")
            self.scenario = scenario
            self.seed = int(args.get("seed", 0))
        elif verb in ("estop", "railroad", "toggle_guidance"):
            if self.session is not None:
                if verb == "toggle_guidance":
                    self.session.guidance_enabled = not self.session.guidance_enabled
                else:
                    self.session.command(verb)
        else:
            raise ValueError(f"unknown command verb {verb!r}")
        return {"type": "ack", "schema_version": PROTOCOL_VERSION, "verb": verb}

    # -- control loop -----------------------------------------------------------------

    def current_input(self, tick: int) -> OperatorInput:
        if self.mailbox is None:
            return OperatorInput()
        inp, received = self.mailbox
        if tick - received > self.cfg.gateway.input_stale_ticks:
            return OperatorInput()
        return inp

    async def tick_loop(self) -> None:
        dt = self.cfg.session.dt
        while True:
            start = time.perf_counter()
            if self.running and self.session is not None:
                session = self.session
                record = session.run_tick(self.current_input(session.tick))
                self.broadcast(state_message(session, record, self.cfg))
            if self.cfg.gateway.realtime:
                elapsed = time.perf_counter() - start
                await asyncio.sleep(max(0.0, dt - elapsed))
            else:
                await asyncio.sleep(0)


def create_app(cfg: StackConfig | None = None, model: LatentDynamicsModel | None = None) -> FastAPI:
    cfg = cfg or StackConfig()
    if model is None:
        model = LatentDynamicsModel.initialize(cfg.model, seed=0)
    app = FastAPI(title="bronchosim gateway")
    service = GatewayService(cfg, model)
    app.state.service = service

    @app.on_event("startup")
    async def _start_loop():
        service.tick_task = asyncio.create_task(service.tick_loop())

    @app.on_event("shutdown")
    async def _stop_loop():
        if service.tick_task is not None:
            service.tick_task.cancel()

    @app.websocket("/session")
    async def session_socket(ws: WebSocket):
        await ws.accept()
        role = service.register(ws)
        await ws.send_text(
            json.dumps(
                {
                    "type": "hello",
                    "schema_version": PROTOCOL_VERSION,
                    "role": role,
                    "note": None if role == "pilot" else "pilot slot taken, downgraded to observer",
                }
            )
        )

        async def sender():
            q = service.outboxes[ws]
            while True:
                await ws.send_text(await q.get())

        send_task = asyncio.create_task(sender())
        try:
            while True:
                raw = await ws.receive_text()
                try:
                    msg = json.loads(raw)
                except json.JSONDecodeError:
                    await ws.send_text(json.dumps({"type": "error", "message": "malformed JSON"}))
                    continue
                try:
                    kind = msg.get("type")
                    if kind == "input":
                        if ws is not service.pilot:
                            await ws.send_text(
                                json.dumps({"type": "error", "message": "observers cannot send input"})
                            )
                            continue
                        inp = input_from_message(msg)
                        tick = service.session.tick if service.session else 0
                        service.mailbox = (inp, tick)
                        if inp.estop and service.session is not None:
                            service.session.command("estop")
                    elif kind == "command":
                        reply = service.handle_command(msg.get("verb", ""), msg.get("args") or {})
                        await ws.send_text(json.dumps(reply))
                    else:
                        await ws.send_text(
                            json.dumps({"type": "error", "message": f"unknown message type {kind!r}"})
                        )
                except (ValueError, KeyError) as e:
                    await ws.send_text(json.dumps({"type": "error", "message": str(e)}))
        except WebSocketDisconnect:
            pass
        finally:
            send_task.cancel()
            service.unregister(ws)

    return app


def serve(cfg: StackConfig | None = None, model: LatentDynamicsModel | None = None) -> None:
    """Blocking entry point used by the CLI."""
    import uvicorn

    cfg = cfg or StackConfig()
    app = create_app(cfg, model)
    uvicorn.run(app, host=cfg.gateway.host, port=cfg.gateway.port, log_level="warning")
