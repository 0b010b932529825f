"""World snapshots, obstacle LiDAR, scenario sampling and safety predicates."""
from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .dynamics import EnvKind, as_env
from .rng import RngState

R_SENSE = 0.5
R_AGENT = 0.05


class ScenarioError(Exception):
    """Rejection sampling could not place the requested agents/goals."""


@dataclass(frozen=True)
class Obstacles:
    """2D: axis-aligned rectangles (center, side lengths).  3D: spheres (center, radius)."""

    centers: np.ndarray
    sizes: np.ndarray  # (K, 2) side lengths in 2D, (K,) radii in 3D

    @classmethod
    def empty(cls, dim: int) -> "Obstacles":
        return cls(np.zeros((0, dim)), np.zeros((0, 2)) if dim == 2 else np.zeros(0))

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def __len__(self) -> int:
        return self.centers.shape[0]

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        """Distance from each point to each obstacle (0 inside), shape (P, K)."""
        p = np.asarray(points, dtype=float)[:, None, :]
        if len(self) == 0:
            return np.full((p.shape[0], 0), np.inf)
        if self.dim == 2:
            half = self.sizes[None] / 2
            d = np.maximum(np.abs(p - self.centers[None]) - half, 0.0)
            return np.linalg.norm(d, axis=-1)
        return np.maximum(np.linalg.norm(p - self.centers[None], axis=-1) - self.sizes[None], 0.0)


@dataclass(frozen=True)
class World:
    env: EnvKind
    states: np.ndarray  # (N, n)
    goals: np.ndarray  # (N, pos_dim)
    obstacles: Obstacles
    area: float = 4.0
    R: float = R_SENSE
    r: float = R_AGENT
    n_rays: int = 32
    t: int = 0

    def __post_init__(self):
        object.__setattr__(self, "env", as_env(self.env))
        if not (self.R > 2 * self.r > 0):
            raise ValueError("need R > 2r > 0")
        if not np.all(np.isfinite(self.states)):
            raise ValueError("non-finite agent state")

    @property
    def n_agents(self) -> int:
        return self.states.shape[0]

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, : self.env.pos_dim]

    def with_states(self, states: np.ndarray, advance: int = 1) -> "World":
        return replace(self, states=np.asarray(states, dtype=float), t=self.t + advance)


def default_n_rays(env) -> int:
    return 32 if as_env(env).pos_dim == 2 else 130


def check_world_constants(R: float, r: float, n_rays: int | None = None) -> None:
    if not (r > 0 and R > 2 * r):
        raise ValueError(f"need 0 < 2r < R, got R={R}, r={r}")
    if n_rays is not None and n_rays < 1:
        raise ValueError("n_rays must be at least 1")


# ---------------------------------------------------------------------------
# LiDAR


@lru_cache(maxsize=16)
def ray_directions(dim: int, n_rays: int) -> np.ndarray:
    if n_rays <= 0:
        raise ValueError("n_rays must be positive")
    if dim == 2:
        a = 2 * np.pi * np.arange(n_rays) / n_rays
        return np.stack([np.cos(a), np.sin(a)], axis=1)
    # Fibonacci sphere lattice
    k = np.arange(n_rays) + 0.5
    z = 1 - 2 * k / n_rays
    rho = np.sqrt(1 - z * z)
    phi = np.pi * (3 - np.sqrt(5)) * k
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)


def _ray_cast(origins: np.ndarray, dirs: np.ndarray, obs: Obstacles) -> tuple[np.ndarray, np.ndarray]:
    """Nearest hit distance (inf where nothing is hit) and outward surface normal at the hit.

    Shapes (P, Q) and (P, Q, dim).  A ray starting inside an obstacle hits at distance 0
    with a zero normal.
    """
    P, Q = origins.shape[0], dirs.shape[0]
    dim = dirs.shape[1]
    if len(obs) == 0:
        return np.full((P, Q), np.inf), np.zeros((P, Q, dim))
    o = origins[:, None, None, :]
    d = dirs[None, :, None, :]
    c = obs.centers[None, None]
    if obs.dim == 2:
        half = obs.sizes[None, None] / 2
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (c - half - o) * inv
            t2 = (c + half - o) * inv
        # a zero direction component: slab is either always or never containing the ray
        inside_slab = (np.abs(o - c) <= half)
        lo_t = np.where(d == 0, np.where(inside_slab, -np.inf, np.inf), np.minimum(t1, t2))
        hi_t = np.where(d == 0, np.where(inside_slab, np.inf, -np.inf), np.maximum(t1, t2))
        tmin = lo_t.max(axis=-1)
        tmax = hi_t.min(axis=-1)
        hit = tmax >= np.maximum(tmin, 0.0)
        t = np.where(hit, np.maximum(tmin, 0.0), np.inf)
        axis = lo_t.argmax(axis=-1)
        normal = -np.sign(np.take_along_axis(np.broadcast_to(d, lo_t.shape), axis[..., None], -1)[..., 0])[..., None] * np.eye(dim)[axis]
    else:
        rad = obs.sizes[None, None]
        oc = c - o
        b = (oc * d).sum(-1)
        cc = (oc * oc).sum(-1) - rad**2
        disc = b * b - cc
        sq = np.sqrt(np.maximum(disc, 0.0))
        near, far = b - sq, b + sq
        t = np.where(disc < 0, np.inf, np.where(near >= 0, near, np.where(far >= 0, 0.0, np.inf)))
        pt = o + np.where(np.isfinite(t), t, 0.0)[..., None] * d
        normal = (pt - c) / rad[..., None]
    k = t.argmin(axis=-1)
    tk = np.take_along_axis(t, k[..., None], -1)[..., 0]
    nk = np.take_along_axis(normal, k[..., None, None], -2)[..., 0, :]
    nk = np.where((tk > 0)[..., None], nk, 0.0)
    return tk, nk


def _ray_distances(origins: np.ndarray, dirs: np.ndarray, obs: Obstacles) -> np.ndarray:
    return _ray_cast(origins, dirs, obs)[0]


@dataclass(frozen=True)
class LidarScan:
    owner: np.ndarray  # (H,) agent index
    points: np.ndarray  # (H, pos_dim) hit positions
    distance: np.ndarray  # (H,)
    ray: np.ndarray  # (H,) ray index
    direction: np.ndarray | None = None  # (H, pos_dim) unit ray direction
    normal: np.ndarray | None = None  # (H, pos_dim) outward surface normal, zero when cast from inside

    def point_jacobian(self) -> np.ndarray:
        """d(hit point)/d(owner position) with the obstacle fixed, shape (H, dim, dim).

        Moving the origin by dp slides the hit along the surface plane:
        I - d n^T / (n . d).  Rays cast from inside an obstacle hit at the origin (identity).
        """
        H, dim = self.points.shape
        J = np.broadcast_to(np.eye(dim), (H, dim, dim)).copy()
        if self.normal is None or H == 0:
            return J
        nd = (self.normal * self.direction).sum(-1)
        ok = np.abs(nd) > 1e-9
        J[ok] -= self.direction[ok][:, :, None] * self.normal[ok][:, None, :] / nd[ok][:, None, None]
        return J

    def padded_states(self, n: int) -> np.ndarray:
        out = np.zeros((len(self.owner), n))
        out[:, : self.points.shape[1]] = self.points
        return out


def cast_lidar(positions: np.ndarray, obstacles: Obstacles, n_rays: int, R: float) -> LidarScan:
    """Evenly spaced rays from each position; hits strictly inside range R become nodes."""
    pos = np.atleast_2d(np.asarray(positions, dtype=float))
    dirs = ray_directions(pos.shape[1], n_rays)
    t, normal = _ray_cast(pos, dirs, obstacles)
    owner, ray = np.nonzero(t < R)
    dist = t[owner, ray]
    pts = pos[owner] + dist[:, None] * dirs[ray]
    return LidarScan(owner, pts, dist, ray, dirs[ray], normal[owner, ray])


def lidar_for(world: World) -> LidarScan:
    return cast_lidar(world.positions, world.obstacles, world.n_rays, world.R)


# ---------------------------------------------------------------------------
# safety


def pairwise_distances(pos: np.ndarray) -> np.ndarray:
    diff = pos[:, None, :] - pos[None, :, :]
    return np.sqrt((diff * diff).sum(-1))


def safety_status(world: World, scan: LidarScan | None = None) -> np.ndarray:
    """Per-agent membership of the local safe set: other agents farther than 2r, hits farther than r."""
    pos = world.positions
    N = pos.shape[0]
    D = pairwise_distances(pos)
    np.fill_diagonal(D, np.inf)
    ok = D.min(axis=1) > 2 * world.r if N > 1 else np.ones(N, dtype=bool)
    scan = lidar_for(world) if scan is None else scan
    if len(scan.owner):
        near = np.zeros(N, dtype=bool)
        np.logical_or.at(near, scan.owner, scan.distance <= world.r)
        ok &= ~near
    return ok


def collision_pairs(world: World) -> list[tuple[int, int]]:
    D = pairwise_distances(world.positions)
    i, j = np.nonzero(np.triu(D <= 2 * world.r, k=1))
    return list(zip(i.tolist(), j.tolist()))


# ---------------------------------------------------------------------------
# neighborhoods (analysis only: the GNN never truncates)


@dataclass(frozen=True)
class NeighborSet:
    agent: int
    sensed: tuple[int, ...]  # every sender node strictly within R (node indices)
    closest: tuple[int, ...]  # the M closest including the agent itself


def node_positions(world: World, scan: LidarScan | None = None) -> np.ndarray:
    """Positions of physical nodes: agents 0..N-1, then hit points."""
    scan = lidar_for(world) if scan is None else scan
    return np.concatenate([world.positions, scan.points], axis=0)


def m_closest(world: World, i: int, M: int, scan: LidarScan | None = None) -> NeighborSet:
    if M < 1:
        raise ValueError("M must be at least 1")
    scan = lidar_for(world) if scan is None else scan
    N = world.n_agents
    pos = node_positions(world, scan)
    d = np.linalg.norm(pos - pos[i], axis=1)
    candidates = [j for j in range(N) if j != i and d[j] < world.R]
    candidates += [N + h for h in range(len(scan.owner)) if scan.owner[h] == i]
    candidates.sort(key=lambda j: (d[j], j))
    return NeighborSet(i, tuple(sorted(candidates)), tuple([i] + candidates[: M - 1]))


@lru_cache(maxsize=None)
def packing_number(R: float, r: float, dim: int) -> int:
    """Greedy count of points, pairwise at least 2r apart, within radius R (center included)."""
    h = r / 4 if dim == 2 else r / 2
    ticks = np.arange(-R, R + h / 2, h)
    grid = np.stack(np.meshgrid(*([ticks] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
    rad = np.linalg.norm(grid, axis=1)
    grid = grid[rad < R]
    order = np.lexsort((grid[:, 0], np.linalg.norm(grid, axis=1)))
    chosen: list[np.ndarray] = []
    for p in grid[order]:
        if all(np.linalg.norm(p - q) >= 2 * r for q in chosen):
            chosen.append(p)
    return len(chosen)


# ---------------------------------------------------------------------------
# scenarios


def sample_obstacles(env, n_obstacles: int, area: float, gen: np.random.Generator) -> Obstacles:
    dim = as_env(env).pos_dim
    centers = gen.uniform(0.0, area, size=(n_obstacles, dim))
    if dim == 2:
        sizes = gen.uniform(0.1, 0.5, size=(n_obstacles, 2))
    else:
        sizes = gen.uniform(0.15, 0.3, size=n_obstacles)
    return Obstacles(centers, sizes)


def sample_scenario(
    env,
    n_agents: int,
    area: float,
    n_obstacles: int,
    rng: RngState,
    R: float = R_SENSE,
    r: float = R_AGENT,
    n_rays: int | None = None,
    max_rejections: int = 10_000,
) -> World:
    env = as_env(env)
    gen = rng.generator()
    obs = sample_obstacles(env, n_obstacles, area, gen)
    dim = env.pos_dim
    rejections = 0

    def place(count: int) -> np.ndarray:
        nonlocal rejections
        pts = np.zeros((0, dim))
        while pts.shape[0] < count:
            p = gen.uniform(0.0, area, size=dim)
            far_agents = pts.shape[0] == 0 or np.min(np.linalg.norm(pts - p, axis=1)) > 4 * r
            far_obs = len(obs) == 0 or np.min(obs.surface_distance(p[None])) > 2 * r
            if far_agents and far_obs:
                pts = np.vstack([pts, p])
                continue
            rejections += 1
            if rejections > max_rejections:
                density = n_agents / area**dim
                raise ScenarioError(
                    f"rejection budget {max_rejections} exceeded (N={n_agents}, l={area}, "
                    f"density {density:.3g} agents/m^{dim}, {n_obstacles} obstacles)"
                )
        return pts

    starts = place(n_agents)
    goals = place(n_agents)
    states = np.zeros((n_agents, env.state_dim))
    states[:, :dim] = starts
    n_rays = default_n_rays(env) if n_rays is None else n_rays
    return World(env, states, goals, obs, area, R, r, n_rays, 0)
