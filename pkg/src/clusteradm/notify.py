"""Administrator notification sinks.

Messages are ordinary :class:`email.message.EmailMessage` objects.  The file
sink appends to an mbox (readable with :mod:`mailbox`); the command sink pipes
the message to a mail submission program such as ``sendmail -t``.
"""

from __future__ import annotations

import logging
import mailbox
import shlex
import subprocess
import sys
from dataclasses import dataclass
from email.message import EmailMessage
from email.utils import formatdate

log = logging.getLogger(__name__)


def make_message(subject: str, body: str, to: str = "root", sender: str = "clusteradm") -> EmailMessage:
    msg = EmailMessage()
    msg["From"] = sender
    msg["To"] = to
    msg["Subject"] = subject
    msg["Date"] = formatdate(localtime=False)
    msg.set_content(body)
    return msg


class Notifier:
    def send(self, msg: EmailMessage) -> None:
        raise NotImplementedError


class FileSink(Notifier):
    def __init__(self, path):
        self.path = path

    def send(self, msg):
        box = mailbox.mbox(self.path)
        try:
            box.lock()
            box.add(msg)
            box.flush()
        finally:
            box.unlock()
            box.close()


class CommandSink(Notifier):
    def __init__(self, command, timeout=30):
        self.argv = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout

    def send(self, msg):
        proc = subprocess.run(self.argv, input=msg.as_bytes(), capture_output=True, timeout=self.timeout)
        if proc.returncode != 0:
            raise OSError(f"{self.argv[0]} exited {proc.returncode}: {proc.stderr.decode(errors='replace').strip()}")


class ConsoleSink(Notifier):
    def __init__(self, stream=None):
        self.stream = stream

    def send(self, msg):
        stream = self.stream or sys.stderr
        stream.write(msg.as_string() + "\n")


@dataclass
class Delivery:
    sent: bool
    error: str = ""


def deliver(notifier: Notifier | None, subject: str, body: str) -> Delivery:
    """Send one message; failures are logged and reported, never raised."""
    if notifier is None:
        return Delivery(False, "no notifier configured")
    try:
        notifier.send(make_message(subject, body))
    except Exception as e:  # noqa: BLE001 - notification must not take the caller down
        log.error("notification %r failed: %s", subject, e)
        return Delivery(False, str(e))
    return Delivery(True)


def make_notifier(kind: str, target: str | None = None) -> Notifier | None:
    if kind == "none":
        return None
    if kind == "file":
        if not target:
            raise ValueError("file notifier needs a path")
        return FileSink(target)
    if kind == "command":
        return CommandSink(target or "sendmail -t")
    if kind == "console":
        return ConsoleSink()
    raise ValueError(f"unknown notifier kind {kind!r}")
