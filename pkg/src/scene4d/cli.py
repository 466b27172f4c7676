"""Command-line interface for the engine."""

from __future__ import annotations

import os
import sys
from pathlib import Path

import click
import torch

from .errors import EngineError
from .parser import Speed
from .report import write_report
from .service import (
    EngineConfig,
    Session,
    make_server,
    run_command,
    run_script,
    write_renders,
)

# deterministic reductions run to run
torch.set_num_threads(1)


def _config_from_options(frames, seed, **overrides) -> EngineConfig:
    base = EngineConfig(frames=frames, seed=seed,
                        llm_url=os.environ.get("ENGINE_LLM_URL") or None)
    fields = {k: v for k, v in overrides.items() if v is not None}
    return EngineConfig(**{**base.to_dict(), **fields})


def _fail(exc: EngineError):
    click.echo(f"error [{exc.module}/{exc.code}]: {exc}", err=True)
    sys.exit(1)


@click.group()
def main():
    """Language-guided 4D Gaussian scene engine."""


@main.command()
@click.argument("prompt")
@click.option("--frames", default=8, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", default="run", show_default=True,
              type=click.Path())
@click.option("--lambda", "lam", type=float, default=None,
              help="Velocity scaling hyperparameter.")
@click.option("--speed", type=click.Choice([s.value for s in Speed]),
              default=None, help="Override the parsed speed word.")
@click.option("--eta", type=float, default=None,
              help="Guidance step size.")
@click.option("--inner-iters", type=int, default=None)
@click.option("--guidance-frac", type=float, default=None)
@click.option("--distill-steps", type=int, default=None)
@click.option("--render/--no-render", "render_out", default=True,
              show_default=True)
def gen(prompt, frames, seed, out_dir, lam, speed, eta, inner_iters,
        guidance_frac, distill_steps, render_out):
    """Generate a scene from PROMPT into a session directory."""
    config = _config_from_options(
        frames, seed, lam=lam, eta=eta, inner_iters=inner_iters,
        guidance_frac=guidance_frac, distill_steps=distill_steps,
        speed_override=speed,
    )
    session = Session(Path(out_dir), config)
    try:
        result = run_command(session, prompt)
        manifest = result.manifest
    except EngineError as exc:
        _fail(exc)
    click.echo(f"session {session.id} at {session.root}")
    click.echo(f"scene gaussians: {len(session.scene)}")
    if "guidance" in manifest:
        g = manifest["guidance"]
        click.echo(
            f"guidance in-box mass {g['final_mass']:.3f} "
            f"(baseline {g['baseline_final_mass']:.3f})"
        )
        click.echo(f"distill final loss {manifest['distill']['final_loss']:.3e}")
    if render_out:
        files = write_renders(session, Path(out_dir) / "renders" / "v001")
        click.echo(f"wrote {len(files)} render files")


@main.command()
@click.argument("session_dir", type=click.Path(exists=True))
@click.argument("command")
@click.option("--render/--no-render", "render_out", default=True,
              show_default=True)
def edit(session_dir, command, render_out):
    """Apply an edit COMMAND to the session at SESSION_DIR."""
    try:
        session = Session.load(session_dir)
        result = run_command(session, command)
    except EngineError as exc:
        _fail(exc)
    click.echo(f"version {result.version_index}: {result.scene_hash[:12]}")
    if "selected_count" in result.manifest:
        click.echo(
            f"selected {result.manifest['selected_count']} gaussians at "
            f"threshold {result.manifest['chosen_threshold']:.3f}"
        )
    if render_out:
        out = Path(session_dir) / "renders" / f"v{result.version_index:03d}"
        files = write_renders(session, out)
        click.echo(f"wrote {len(files)} render files")


@main.command()
@click.argument("session_dir", type=click.Path(exists=True))
@click.option("--camera", type=click.Choice(["fixed", "orbit"]),
              default="fixed", show_default=True)
@click.option("--frame", default=0, show_default=True)
@click.option("--az", default=35.0, show_default=True)
@click.option("--el", default=15.0, show_default=True)
@click.option("--radius", default=9.0, show_default=True)
def render(session_dir, camera, frame, az, el, radius):
    """Render one frame of the session's current scene."""
    try:
        session = Session.load(session_dir)
        files = write_renders(
            session, Path(session_dir) / "renders" / "adhoc",
            frames=[frame], cam=camera, az=az, el=el, radius=radius,
        )
    except EngineError as exc:
        _fail(exc)
    for f in files:
        click.echo(f)


@main.command()
@click.argument("script_file", type=click.Path(exists=True))
@click.option("--out", "out_dir", default="run", show_default=True,
              type=click.Path())
@click.option("--frames", default=8, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--distill-steps", type=int, default=None)
@click.option("--render-final/--no-render-final", default=True,
              show_default=True)
def script(script_file, out_dir, frames, seed, distill_steps, render_final):
    """Run a newline-delimited command script in a fresh session."""
    config = _config_from_options(frames, seed, distill_steps=distill_steps)
    try:
        session = run_script(script_file, out_dir, config,
                             render_final=render_final)
    except EngineError as exc:
        _fail(exc)
    click.echo(f"session {session.id}: {len(session.history)} commands")
    from .scene import scene_hash
    click.echo(f"final scene hash {scene_hash(session.scene)}")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=None, type=int,
              help="Defaults to ENGINE_PORT or 8787.")
@click.option("--data-dir", default=None, type=click.Path(),
              help="Defaults to ENGINE_DATA_DIR or ./engine-data.")
@click.option("--frames", default=8, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--distill-steps", type=int, default=None)
def serve(host, port, data_dir, frames, seed, distill_steps):
    """Serve the HTTP API."""
    port = port or int(os.environ.get("ENGINE_PORT", "8787"))
    data_dir = data_dir or os.environ.get("ENGINE_DATA_DIR", "engine-data")
    config = _config_from_options(frames, seed, distill_steps=distill_steps)
    server = make_server(host, port, data_dir, config)
    click.echo(f"engine listening on http://{host}:{port} (data: {data_dir})")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()


@main.command()
@click.argument("session_dir", type=click.Path(exists=True))
def report(session_dir):
    """Render figures from the session's CSV logs into <dir>/report/."""
    written = write_report(session_dir)
    if not written:
        click.echo("no logs found to plot", err=True)
        sys.exit(1)
    for path in written:
        click.echo(str(path))


if __name__ == "__main__":
    main()
