"""Full utility -> regulator verification loop, both modes, over a socket.

Spins up the regulator service on loopback, streams an attacked utility and
a clean one against it in critical-region mode, then replays the audit log
offline and checks it reproduces every verdict byte for byte.

Run:  python demos/05_compliance_protocol.py
"""

import tempfile
from pathlib import Path

import numpy as np

from dpalarm import AttackSpec
from dpalarm.config import default_scenario, reference_params
from dpalarm.netsvc import (
    RegulatorConfig,
    RegulatorServer,
    replay_audit,
    run_utility_client,
)

scenario = default_scenario()
attack = AttackSpec(kind="bias", targets=frozenset({0}), magnitude=0.5, t_start=401, t_end=10**9)
params = reference_params()

with tempfile.TemporaryDirectory() as td:
    audit = Path(td) / "audit.log"
    server = RegulatorServer(("127.0.0.1", 0), RegulatorConfig(audit))
    server.start_background()
    print(f"regulator listening on {server.address[0]}:{server.address[1]}")

    clean = run_utility_client(
        server.address, params, scenario, "cr", seed=5, n_epochs=80, uid="clean"
    )
    hit = run_utility_client(
        server.address, params, scenario.with_attack(attack), "cr", seed=5,
        n_epochs=80, uid="attacked", utility_index=1,
    )
    server.stop()

    for summary in (clean, hit):
        local = sum(e[1] for e in summary.epochs)
        dp = sum(e[2] for e in summary.epochs)
        matched = sum(e[3] for e in summary.epochs)
        print(f"{summary.uid:>9}: completed={summary.completed} "
              f"local_alarms={local:3d} dp_alarms={dp:3d} matched={matched}/80")

    pairs = replay_audit(audit)
    print(f"\naudit replay: {len(pairs)} verdicts, "
          f"byte-exact={all(a == b for a, b in pairs)}")
    lines = audit.read_text().splitlines()
    print("first audit line:", lines[0][:110], "...")
