"""Reference waypoint follower.

Loads the occupancy PNG named in the init message, plans a clearance-aware
A* route from its pose to the goal and tracks it with pure pursuit. Answers
is_occupied / nearest_free / plan_path queries against the raw grid.
Standard library only.
"""
import heapq
import json
import math
import struct
import sys
import zlib

SENSOR_RANGE = 60.0
AXLE_LENGTH = 8.0
N_RAYS = 16
V_MAX = 2.0
BODY_RADIUS = 1.5
SNAP_RADIUS = 25
LOOKAHEAD = 6.0
SQRT2 = math.sqrt(2.0)
MOVES = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)]


def read_png(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != b"\x89PNG\r\n\x1a\n":
        raise ValueError("not a PNG file")
    pos = 8
    idat = []
    width = height = depth = ctype = None
    while pos < len(data):
        (length,) = struct.unpack(">I", data[pos:pos + 4])
        kind = data[pos + 4:pos + 8]
        body = data[pos + 8:pos + 8 + length]
        pos += 12 + length
        if kind == b"IHDR":
            width, height, depth, ctype, _, _, interlace = struct.unpack(">IIBBBBB", body)
            if depth != 8 or interlace != 0:
                raise ValueError("only 8-bit non-interlaced PNGs are supported")
        elif kind == b"IDAT":
            idat.append(body)
        elif kind == b"IEND":
            break
    channels = {0: 1, 2: 3, 4: 2, 6: 4}[ctype]
    raw = zlib.decompress(b"".join(idat))
    stride = width * channels
    rows = []
    prev = bytearray(stride)
    i = 0
    for _ in range(height):
        ftype = raw[i]
        line = bytearray(raw[i + 1:i + 1 + stride])
        i += 1 + stride
        for x in range(stride):
            a = line[x - channels] if x >= channels else 0
            b = prev[x]
            c = prev[x - channels] if x >= channels else 0
            if ftype == 1:
                line[x] = (line[x] + a) & 0xFF
            elif ftype == 2:
                line[x] = (line[x] + b) & 0xFF
            elif ftype == 3:
                line[x] = (line[x] + ((a + b) >> 1)) & 0xFF
            elif ftype == 4:
                p = a + b - c
                pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
                pred = a if pa <= pb and pa <= pc else (b if pb <= pc else c)
                line[x] = (line[x] + pred) & 0xFF
        rows.append(line)
        prev = line
    grid = []
    for line in rows:
        row = []
        for x in range(width):
            px = line[x * channels:(x + 1) * channels]
            if channels >= 3:
                lum = (2126 * px[0] + 7152 * px[1] + 722 * px[2] + 5000) // 10000
            else:
                lum = px[0]
            row.append(lum < 128)
        grid.append(row)
    return width, height, grid


class Map:
    def __init__(self, width, height, cells):
        self.w = width
        self.h = height
        self.cells = cells

    def occupied(self, x, y):
        if x < 0 or y < 0 or x >= self.w or y >= self.h:
            return True
        return self.cells[y][x]

    def nearest_free(self, x, y, max_rad):
        if not self.occupied(x, y):
            return (x, y)
        for r in range(1, max_rad + 1):
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    if max(abs(dx), abs(dy)) == r and not self.occupied(x + dx, y + dy):
                        return (x + dx, y + dy)
        return None

    def clearance(self):
        """Chamfer distance from every cell to the nearest obstacle."""
        inf = float("inf")
        dist = [[0.0 if self.cells[y][x] else inf for x in range(self.w)] for y in range(self.h)]
        heap = [(0.0, x, y) for y in range(self.h) for x in range(self.w) if self.cells[y][x]]
        # the map edge counts as an obstacle one cell out
        for x in range(self.w):
            for y in (0, self.h - 1):
                if dist[y][x] > 1.0:
                    dist[y][x] = 1.0
                    heap.append((1.0, x, y))
        for y in range(self.h):
            for x in (0, self.w - 1):
                if dist[y][x] > 1.0:
                    dist[y][x] = 1.0
                    heap.append((1.0, x, y))
        heapq.heapify(heap)
        while heap:
            d, x, y = heapq.heappop(heap)
            if d > dist[y][x]:
                continue
            for dx, dy in MOVES:
                nx, ny = x + dx, y + dy
                if 0 <= nx < self.w and 0 <= ny < self.h:
                    nd = d + (SQRT2 if dx and dy else 1.0)
                    if nd < dist[ny][nx]:
                        dist[ny][nx] = nd
                        heapq.heappush(heap, (nd, nx, ny))
        return dist

    def astar(self, a, b, blocked=None, penalty=None):
        if blocked is None:
            blocked = self.occupied
        if blocked(*a) or blocked(*b):
            return None
        g = {a: 0.0}
        came = {}
        seq = 0
        heap = [(0.0, seq, a)]
        while heap:
            _, _, cur = heapq.heappop(heap)
            if cur == b:
                path = [cur]
                while cur in came:
                    cur = came[cur]
                    path.append(cur)
                path.reverse()
                return path
            cx, cy = cur
            gc = g[cur]
            for dx, dy in MOVES:
                nx, ny = cx + dx, cy + dy
                if blocked(nx, ny):
                    continue
                if dx and dy and (self.occupied(cx + dx, cy) or self.occupied(cx, cy + dy)):
                    continue
                step = SQRT2 if dx and dy else 1.0
                if penalty is not None:
                    step *= penalty(nx, ny)
                ng = gc + step
                nxt = (nx, ny)
                if ng < g.get(nxt, float("inf")):
                    g[nxt] = ng
                    came[nxt] = cur
                    ddx, ddy = abs(nx - b[0]), abs(ny - b[1])
                    h = max(ddx, ddy) + (SQRT2 - 1.0) * min(ddx, ddy)
                    seq += 1
                    heapq.heappush(heap, (ng + h, seq, nxt))
        return None

    def body_hits(self, x, y, radius):
        if x - radius < -0.5 or y - radius < -0.5 or x + radius >= self.w - 0.5 or y + radius >= self.h - 0.5:
            return True
        lo_x, lo_y = int(math.floor(x - radius + 0.5)), int(math.floor(y - radius + 0.5))
        hi_x, hi_y = int(math.floor(x + radius + 0.5)), int(math.floor(y + radius + 0.5))
        for cy in range(lo_y, hi_y + 1):
            for cx in range(lo_x, hi_x + 1):
                if not self.occupied(cx, cy):
                    continue
                dx = max(abs(x - cx) - 0.5, 0.0)
                dy = max(abs(y - cy) - 0.5, 0.0)
                if dx * dx + dy * dy < radius * radius:
                    return True
        return False


def wrap(a):
    return (a + math.pi) % (2.0 * math.pi) - math.pi


class Follower:
    def __init__(self, params, grid_path):
        width, height, cells = read_png(grid_path)
        self.map = Map(width, height, cells)
        self.axle = float(params.get("axle_length_px", AXLE_LENGTH))
        self.v_max = float(params.get("v_max", V_MAX))
        goal = params.get("goal", [width - 1, height - 1])
        self.goal = self.map.nearest_free(int(goal[0]), int(goal[1]), SNAP_RADIUS) or tuple(goal)
        self.path = None
        self.index = 0

    def plan(self, x, y):
        start = (int(math.floor(x + 0.5)), int(math.floor(y + 0.5)))
        clr = self.map.clearance()

        def near_end(cx, cy):
            return (abs(cx - start[0]) <= 3 and abs(cy - start[1]) <= 3) or (
                abs(cx - self.goal[0]) <= 3 and abs(cy - self.goal[1]) <= 3
            )

        def penalty(cx, cy):
            return 1.0 + 3.0 * max(0.0, 6.0 - clr[cy][cx])

        for need in (4.0, 3.0, 2.5, 2.0, 0.0):
            def blocked(cx, cy, need=need):
                if self.map.occupied(cx, cy):
                    return True
                return clr[cy][cx] < need and not near_end(cx, cy)

            path = self.map.astar(start, self.goal, blocked, penalty)
            if path:
                return [(float(px), float(py)) for px, py in path]
        return [(float(self.goal[0]), float(self.goal[1]))]

    def act(self, pose):
        x, y, theta = pose
        if self.path is None:
            self.path = self.plan(x, y)
        path = self.path
        best = self.index
        best_d = float("inf")
        for j in range(self.index, min(len(path), self.index + 25)):
            d = math.hypot(path[j][0] - x, path[j][1] - y)
            if d < best_d:
                best, best_d = j, d
        self.index = best
        target = path[-1]
        for j in range(self.index, len(path)):
            if math.hypot(path[j][0] - x, path[j][1] - y) >= LOOKAHEAD:
                target = path[j]
                break
        dist = math.hypot(target[0] - x, target[1] - y)
        alpha = wrap(math.atan2(target[1] - y, target[0] - x) - theta)
        turn_limit = 0.9 * 2.0 * self.v_max / self.axle
        if abs(alpha) > 0.6 or dist < 1e-9:
            v = 0.0
            omega = max(-turn_limit, min(turn_limit, alpha))
        else:
            v = 0.9 * self.v_max * (1.0 - 0.5 * abs(alpha) / 0.6)
            omega = 2.0 * v * math.sin(alpha) / max(dist, 1.0)
            spare = self.v_max - abs(omega) * self.axle / 2.0
            if v > spare:
                v = max(spare, 0.0)
        for scale in (1.0, 0.5, 0.25, 0.0):
            vs = v * scale
            if vs == 0.0 or not self.map.body_hits(x + vs * math.cos(theta), y + vs * math.sin(theta), BODY_RADIUS + 0.2):
                v = vs
                break
        if v == 0.0 and omega == 0.0:
            omega = turn_limit if alpha >= 0.0 else -turn_limit
        half = omega * self.axle / 2.0
        return v - half, v + half


def answer(ctl, op, args):
    m = ctl.map
    if op == "is_occupied":
        return {"type": "result", "value": m.occupied(int(args["x"]), int(args["y"]))}
    if op == "nearest_free":
        found = m.nearest_free(int(args["x"]), int(args["y"]), int(args.get("max_rad", 10)))
        if found is None:
            return {"type": "error", "message": "no free cell within max_rad"}
        return {"type": "result", "value": [found[0], found[1]]}
    if op == "plan_path":
        a = (int(args["a"][0]), int(args["a"][1]))
        b = (int(args["b"][0]), int(args["b"][1]))
        path = m.astar(a, b)
        return {"type": "result", "value": None if path is None else [[p[0], p[1]] for p in path]}
    return {"type": "error", "message": "unsupported query " + str(op), "code": "unsupported"}


def send(msg):
    sys.stdout.write(json.dumps(msg) + "\n")
    sys.stdout.flush()


def main():
    ctl = None
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        msg = json.loads(line)
        kind = msg.get("type")
        if kind == "init":
            ctl = Follower(msg.get("params", {}), msg["grid_path"])
            send({"type": "ready"})
        elif kind == "sense":
            vl, vr = ctl.act(msg["pose"])
            send({"type": "act", "vl": vl, "vr": vr})
        elif kind == "query":
            send(answer(ctl, msg.get("op"), msg.get("args", {})))
        elif kind == "stop":
            break
        else:
            send({"type": "error", "message": "unexpected message " + str(kind)})


if __name__ == "__main__":
    main()
