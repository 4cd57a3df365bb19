import json
import sys

SENSOR_RANGE = 60.0
AXLE_LENGTH = 8.0
N_RAYS = 16


def main():
    for line in sys.stdin:
        msg = json.loads(line)
        if msg["type"] == "init":
            print(json.dumps({"type": "ready"}), flush=True)
        elif msg["type"] == "sense":
            print(json.dumps({"type": "act", "vl": 1.0, "vr": 1.0}), flush=True)
        elif msg["type"] == "query":
            raise RuntimeError("queries are not implemented")
        elif msg["type"] == "stop":
            break


if __name__ == "__main__":
    main()
