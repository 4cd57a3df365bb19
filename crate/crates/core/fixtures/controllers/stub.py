"""Misbehaving and minimal controllers for harness tests.

Usage: stub.py MODE
  echo        well-behaved; always drives (1, 1); queries get an error reply
  exit        writes to stderr and exits with status 3 before any reply
  silent      never answers init
  malformed   answers sense with a non-JSON line
  nan         answers sense with vl = "NaN"
  sleep       answers sense after 5 s
  stubborn    ignores stop and keeps running
  liar        spins in place and answers every query wrongly
"""
import json
import sys
import time

SENSOR_RANGE = 60.0
AXLE_LENGTH = 8.0
N_RAYS = 16


def send(obj):
    sys.stdout.write(json.dumps(obj) + "\n")
    sys.stdout.flush()


def liar_answer(op, args):
    if op == "is_occupied":
        return {"type": "result", "value": False}
    if op == "nearest_free":
        return {"type": "result", "value": [args["x"], args["y"]]}
    if op == "plan_path":
        return {"type": "result", "value": [args["a"], args["b"]]}
    return {"type": "error", "message": "unknown op", "code": "unsupported"}


def main():
    mode = sys.argv[1] if len(sys.argv) > 1 else "echo"
    if mode == "exit":
        sys.stderr.write("stub failed to start\n")
        sys.exit(3)
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        msg = json.loads(line)
        kind = msg.get("type")
        if kind == "init":
            if mode == "silent":
                time.sleep(30)
            send({"type": "ready"})
        elif kind == "sense":
            if mode == "malformed":
                sys.stdout.write("this is not json\n")
                sys.stdout.flush()
            elif mode == "nan":
                sys.stdout.write('{"type":"act","vl":"NaN","vr":1.0}\n')
                sys.stdout.flush()
            elif mode == "sleep":
                time.sleep(5)
                send({"type": "act", "vl": 1.0, "vr": 1.0})
            elif mode == "liar":
                send({"type": "act", "vl": -1.0, "vr": 1.0})
            else:
                send({"type": "act", "vl": 1.0, "vr": 1.0})
        elif kind == "query":
            if mode == "liar":
                send(liar_answer(msg.get("op"), msg.get("args", {})))
            else:
                send({"type": "error", "message": "no queries", "code": "unsupported"})
        elif kind == "stop":
            if mode == "stubborn":
                time.sleep(30)
            break


if __name__ == "__main__":
    main()
