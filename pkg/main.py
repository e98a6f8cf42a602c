import os
import sys
import threading
from typing import Optional

import click

from censorlang import analyze, load_program
from common_functions import log_dir
from config import CensorConfig, default_config_path, load_config
from engine import (
  Engine,
  NetfilterQueueTap,
  build_models,
  build_program,
  replay_wire_sim,
  run_pcap,
)
from error_handler import CensorLabError, ErrorHandler
from harness import run_manifest
from ipc import serve

error_handler = ErrorHandler()


def create_engine(config: CensorConfig, config_path: Optional[str]) -> Engine:
  models = build_models(config)
  program = build_program(config, models)
  return Engine(config, program = program, model_store = models, config_path = config_path)

def apply_overrides(config: CensorConfig, mode: Optional[str], log: Optional[str], ipc_port: Optional[int],
                    time_emulation: bool) -> CensorConfig:
  "Command-line flags win over the config file and the environment"

  updates = {}
  if mode:
    updates["mode"] = mode
  if log:
    updates["event_log"] = log
  if time_emulation:
    updates["time_emulation"] = True
  config.engine = config.engine.model_copy(update = updates)
  if ipc_port is not None:
    config.ipc = config.ipc.model_copy(update = {"port": ipc_port})
  return config

def close_on_shutdown(engine: Engine, tap: NetfilterQueueTap):
  engine.stopped.wait()
  tap.close()

def print_stats(engine: Engine):
  for name, value in engine.stats().items():
    click.echo(f"{name}={value}")


@click.group()
def cli():
  "censorlab: a programmable censorship emulator."

  ErrorHandler.attach_log_file(os.path.join(log_dir(), "critical_error.log"))


@cli.command()
@click.option("--mode", type = click.Choice(["pcap", "wire-sim", "tap"]), default = None,
              help = "Operating mode; defaults to the config file's.")
@click.option("--config", "config_path", type = click.Path(dir_okay = False), default = None,
              help = "censor.toml path (or CENSORLAB_CONFIG).")
@click.option("--pcap", "pcap_path", type = click.Path(exists = True, dir_okay = False), default = None,
              help = "Capture to replay in pcap and wire-sim modes.")
@click.option("--time-emulation", is_flag = True, help = "Pace replay to the recorded timestamps.")
@click.option("--log", "log_path", type = click.Path(dir_okay = False), default = None, help = "Event log file.")
@click.option("--ipc-port", type = int, default = None, help = "IPC port (or CENSORLAB_IPC_PORT).")
@click.option("--stay", is_flag = True, help = "Keep serving IPC after the capture ends, until shutdown.")
@click.option("--quiet", is_flag = True, help = "No progress bar or summary.")
def run(mode, config_path, pcap_path, time_emulation, log_path, ipc_port, stay, quiet):
  "Run the censor."

  config_path = config_path or default_config_path()
  error_handler.set_current_file(config_path)
  try:
    config = apply_overrides(load_config(config_path), mode, log_path, ipc_port, time_emulation)
    engine = create_engine(config, config_path)
  except CensorLabError as e:
    error_handler.kill_app(e)

  mode = config.engine.mode
  if mode in ("pcap", "wire-sim") and not pcap_path:
    error_handler.kill_app(f"--pcap is required in {mode} mode")

  server = None
  if config.ipc.enabled:
    try:
      server = serve(engine, config.ipc.bind, config.ipc.port)
    except CensorLabError as e:
      error_handler.kill_app(e)

  try:
    if mode == "pcap":
      error_handler.set_current_file(pcap_path)
      run_pcap(engine, pcap_path, config.engine.time_emulation, progress = not quiet)
    elif mode == "wire-sim":
      error_handler.set_current_file(pcap_path)
      session = replay_wire_sim(
        engine, pcap_path, config.resolve(config.wire.output_a), config.resolve(config.wire.output_b),
        progress = not quiet,
      )
      if not quiet:
        for name, value in sorted(session.counters.items()):
          click.echo(f"wire.{name}={value}")
    else:
      tap = NetfilterQueueTap(config.tap.queue_num, config.tap.inject)
      control = threading.Thread(target = engine.control_loop, name = "control", daemon = True)
      control.start()
      threading.Thread(target = close_on_shutdown, args = (engine, tap), name = "tap-stop", daemon = True).start()
      tap.run(engine)
    if stay and server is not None and engine.running:
      engine.control_loop()
  except CensorLabError as e:
    error_handler.kill_app(e)
  except KeyboardInterrupt:
    engine.shutdown()
  finally:
    if server is not None:
      server.close()

  if not quiet:
    print_stats(engine)


@cli.command("analyze")
@click.argument("program_path", type = click.Path(exists = True, dir_okay = False))
@click.option("--config", "config_path", type = click.Path(exists = True, dir_okay = False), default = None,
              help = "censor.toml supplying the cost table and models.")
def analyze_command(program_path, config_path):
  "Print the static resource report of a CensorLang program."

  error_handler.set_current_file(program_path)
  try:
    config = load_config(config_path) if config_path else CensorConfig()
    shapes = build_models(config).shapes() if config_path else None
    program = load_program(program_path, shapes)
  except CensorLabError as e:
    click.echo(f"{type(e).__name__}: {e}", err = True)
    sys.exit(1)
  for line in analyze(program, config.cost_table, shapes).to_lines():
    click.echo(line)


@cli.command()
@click.argument("manifest", type = click.Path(exists = True, dir_okay = False))
@click.option("--config", "config_path", type = click.Path(exists = True, dir_okay = False), default = None,
              help = "censor.toml for engine settings and lists.")
@click.option("--quiet", is_flag = True, help = "No progress bar.")
def experiment(manifest, config_path, quiet):
  "Replay a scenario's allowed and forbidden traffic and report accuracy."

  error_handler.set_current_file(manifest)
  try:
    config = load_config(config_path) if config_path else None
    report = run_manifest(manifest, config, progress = not quiet)
  except CensorLabError as e:
    error_handler.kill_app(e)
  for line in report.to_lines():
    click.echo(line)


if __name__ == "__main__":
  cli()
