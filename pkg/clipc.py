"""
clipc: command-line client for a running censorlab daemon.

The arguments are sent as one line, exactly as typed:

  clipc blocklist add ip 10.0.0.5
  clipc allowlist action udp-service drop
  clipc model add wf ./models/wf.affine
  clipc program load censorlang censor.cl
  clipc debug dump 192.168.1.2 8.8.8.8 23212 53 udp

Exit status is 0 for OK, 1 for an ERR response and 3 when no daemon is
listening.
"""

import sys

import click

from config import DEFAULT_IPC_PORT
from ipc import IpcClient

EXIT_OK = 0
EXIT_ERR = 1
EXIT_UNREACHABLE = 3


def run_client(tokens, host: str = "127.0.0.1", port: int = DEFAULT_IPC_PORT, timeout: float = 10.0) -> int:
  "Sends one command and prints the response; returns the exit status"

  if not tokens:
    click.echo("ERR parse empty command", err = True)
    return EXIT_ERR
  client = IpcClient(host, port, timeout)
  try:
    response = client.request(*tokens)
  except ConnectionRefusedError:
    click.echo(f"censorlab is not running on {host}:{port}", err = True)
    return EXIT_UNREACHABLE
  except OSError as e:
    click.echo(f"cannot reach censorlab on {host}:{port}: {e}", err = True)
    return EXIT_UNREACHABLE
  if not response.ok:
    click.echo(f"ERR {response.code} {response.message}", err = True)
    return EXIT_ERR
  for line in response.lines:
    click.echo(line)
  if not response.lines:
    click.echo("OK")
  return EXIT_OK


@click.command(context_settings = {"ignore_unknown_options": True, "allow_interspersed_args": False})
@click.option("--host", default = "127.0.0.1", show_default = True, help = "Daemon address.")
@click.option("--port", type = int, default = DEFAULT_IPC_PORT, envvar = "CENSORLAB_IPC_PORT",
              show_default = True, help = "Daemon IPC port.")
@click.option("--timeout", type = float, default = 10.0, show_default = True, help = "Seconds to wait for a reply.")
@click.argument("command", nargs = -1, type = click.UNPROCESSED)
def cli(host: str, port: int, timeout: float, command):
  "Send COMMAND to the censorlab daemon."

  sys.exit(run_client(command, host, port, timeout))


if __name__ == "__main__":
  cli()
