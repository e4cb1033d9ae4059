//! Anytime sampling-based planners (RRT*, PRM*) with an iterate/inspect
//! interface. Computation is metered in iterations, never wall-clock.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{config_in_collision, Config, LocalPlanner, Path, RobotShape, Workspace};
use crate::seed::{self, Rng};

/// PRM* recomputes its start→goal shortest path every this many iterations.
pub const PRM_DIJKSTRA_PERIOD: u64 = 50;

const NO_PARENT: u32 = u32::MAX;
const START: u32 = 0;
const PRM_GOAL: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerKind {
    RrtStar,
    PrmStar,
}

impl fmt::Display for PlannerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlannerKind::RrtStar => "rrt_star",
            PlannerKind::PrmStar => "prm_star",
        })
    }
}

impl FromStr for PlannerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rrt_star" => Ok(PlannerKind::RrtStar),
            "prm_star" => Ok(PlannerKind::PrmStar),
            other => Err(Error::Parse(format!("unknown planner '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerParams {
    /// Steering limit, meters (weighted metric).
    pub range: f64,
    /// Dimensionless rewiring constant; the radius is
    /// `γ·(1 + 1/3)^{1/3}·(μ(X)/ζ)^{1/3}·(ln n / n)^{1/3}` with `ζ` the volume
    /// of the unit ball of the weighted metric.
    pub rewire_gamma: f64,
    pub goal_bias: f64,
    /// Weighted SE(2) distance at which a vertex counts as reaching the goal.
    pub goal_tolerance: f64,
    /// Upper bound on the neighbor set, nearest first.
    pub max_neighbors: usize,
    pub rot_weight: f64,
    /// Pose spacing of edge checks, meters.
    pub collision_step: f64,
}

impl Default for PlannerParams {
    fn default() -> Self {
        Self {
            range: 100.0,
            rewire_gamma: 2.0,
            goal_bias: 0.05,
            goal_tolerance: 5.0,
            max_neighbors: 256,
            rot_weight: crate::geom::DEFAULT_ROT_WEIGHT,
            collision_step: crate::geom::DEFAULT_STEP,
        }
    }
}

impl PlannerParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.range > 0.0) {
            return Err(Error::InvalidInput("range must be positive".into()));
        }
        if !(0.0..=0.2).contains(&self.goal_bias) {
            return Err(Error::InvalidInput("goal_bias must lie in [0, 0.2]".into()));
        }
        if !(self.goal_tolerance > 0.0) {
            return Err(Error::InvalidInput("goal_tolerance must be positive".into()));
        }
        if !(self.rot_weight >= 0.0 && self.collision_step > 0.0 && self.rewire_gamma > 0.0) {
            return Err(Error::InvalidInput("rot_weight, collision_step and rewire_gamma must be positive".into()));
        }
        if self.max_neighbors == 0 {
            return Err(Error::InvalidInput("max_neighbors must be >= 1".into()));
        }
        Ok(())
    }

    pub fn local_planner(&self) -> LocalPlanner {
        LocalPlanner::new(self.collision_step, self.rot_weight)
    }
}

/// Uniform bucket grid over positions. The weighted SE(2) distance is never
/// below the positional distance, so positional pruning is exact.
#[derive(Debug, Clone)]
struct SpatialGrid {
    cell: f64,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<u32>>,
}

impl SpatialGrid {
    fn new(width: f64, height: f64, cell: f64) -> Self {
        let nx = ((width / cell).ceil() as usize).max(1);
        let ny = ((height / cell).ceil() as usize).max(1);
        Self {
            cell,
            nx,
            ny,
            buckets: vec![Vec::new(); nx * ny],
        }
    }

    fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let cx = ((x / self.cell).floor().max(0.0) as usize).min(self.nx - 1);
        let cy = ((y / self.cell).floor().max(0.0) as usize).min(self.ny - 1);
        (cx, cy)
    }

    fn insert(&mut self, id: u32, c: &Config) {
        let (cx, cy) = self.cell_of(c.x, c.y);
        self.buckets[cy * self.nx + cx].push(id);
    }

    fn within(&self, verts: &[Config], q: &Config, radius: f64, rot_weight: f64, out: &mut Vec<(u32, f64)>) {
        out.clear();
        let (x0, y0) = self.cell_of(q.x - radius, q.y - radius);
        let (x1, y1) = self.cell_of(q.x + radius, q.y + radius);
        for cy in y0..=y1 {
            for cx in x0..=x1 {
                for &id in &self.buckets[cy * self.nx + cx] {
                    let d = verts[id as usize].distance(q, rot_weight);
                    if d <= radius {
                        out.push((id, d));
                    }
                }
            }
        }
    }

    fn nearest(&self, verts: &[Config], q: &Config, rot_weight: f64) -> Option<(u32, f64)> {
        let (qx, qy) = self.cell_of(q.x, q.y);
        let mut best: Option<(u32, f64)> = None;
        let max_ring = self.nx.max(self.ny);
        for ring in 0..=max_ring {
            let x0 = qx.saturating_sub(ring);
            let y0 = qy.saturating_sub(ring);
            let x1 = (qx + ring).min(self.nx - 1);
            let y1 = (qy + ring).min(self.ny - 1);
            for cy in y0..=y1 {
                for cx in x0..=x1 {
                    let on_ring = cx.abs_diff(qx) == ring || cy.abs_diff(qy) == ring;
                    if !on_ring {
                        continue;
                    }
                    for &id in &self.buckets[cy * self.nx + cx] {
                        let d = verts[id as usize].distance(q, rot_weight);
                        if best.is_none_or(|(bid, bd)| d < bd || (d == bd && id < bid)) {
                            best = Some((id, d));
                        }
                    }
                }
            }
            if let Some((_, bd)) = best {
                if bd <= ring as f64 * self.cell {
                    break;
                }
            }
        }
        best
    }
}

/// Planner state. Owned by one worker at a time; all randomness comes from
/// the embedded seeded generator.
#[derive(Debug, Clone)]
pub struct PlannerState {
    kind: PlannerKind,
    params: PlannerParams,
    ws: Workspace,
    inflated: RobotShape,
    local: LocalPlanner,
    rng: Rng,
    iterations: u64,
    radius_scale: f64,
    verts: Vec<Config>,
    grid: SpatialGrid,
    // rrt_star
    parent: Vec<u32>,
    cost: Vec<f64>,
    edge_len: Vec<f64>,
    children: Vec<Vec<u32>>,
    goal_vertices: Vec<u32>,
    // prm_star
    adjacency: Vec<Vec<(u32, f64)>>,
    prm_best: Option<(f64, Vec<u32>)>,
    scratch: Vec<(u32, f64)>,
}

/// Creates a planner holding only the start (RRT*) or start and goal (PRM*).
pub fn plan_init(
    ws: &Workspace,
    shape: &RobotShape,
    params: &PlannerParams,
    kind: PlannerKind,
    seed: u64,
) -> Result<PlannerState> {
    params.validate()?;
    ws.validate(shape)?;
    let local = params.local_planner();
    let inflated = shape.inflated(local.sweep_margin(shape));
    let measure = ws.width * ws.height * 2.0 * PI * params.rot_weight.max(1e-9);
    // {(p, θ): |p| + w·|θ| ≤ 1} is a double cone of volume 2π/(3w); with θ
    // measured in w-scaled units it is 2π/3
    let unit_ball = 2.0 / 3.0 * PI;
    let radius_scale = params.rewire_gamma * (4.0f64 / 3.0).cbrt() * (measure / unit_ball).cbrt();
    let mut st = PlannerState {
        kind,
        params: *params,
        ws: ws.clone(),
        inflated,
        local,
        rng: seed::rng(seed),
        iterations: 0,
        radius_scale,
        verts: Vec::new(),
        grid: SpatialGrid::new(ws.width, ws.height, 10.0),
        parent: Vec::new(),
        cost: Vec::new(),
        edge_len: Vec::new(),
        children: Vec::new(),
        goal_vertices: Vec::new(),
        adjacency: Vec::new(),
        prm_best: None,
        scratch: Vec::new(),
    };
    match kind {
        PlannerKind::RrtStar => {
            st.push_tree_vertex(ws.start, NO_PARENT, 0.0, 0.0);
            if ws.start.distance(&ws.goal, params.rot_weight) <= params.goal_tolerance {
                st.goal_vertices.push(START);
            }
        }
        PlannerKind::PrmStar => {
            st.push_roadmap_vertex(ws.start);
            st.push_roadmap_vertex(ws.goal);
        }
    }
    Ok(st)
}

impl PlannerState {
    pub fn kind(&self) -> PlannerKind {
        self.kind
    }

    pub fn params(&self) -> &PlannerParams {
        &self.params
    }

    pub fn workspace(&self) -> &Workspace {
        &self.ws
    }

    pub fn iterations(&self) -> u64 {
        self.iterations
    }

    pub fn vertex_count(&self) -> usize {
        self.verts.len()
    }

    /// Connection radius for a structure holding `n` vertices.
    pub fn connection_radius(&self, n: usize) -> f64 {
        if n < 2 {
            return self.params.range;
        }
        let n = n as f64;
        (self.radius_scale * (n.ln() / n).cbrt()).min(self.params.range)
    }

    /// Runs `n` iterations.
    pub fn step(&mut self, n: u64) {
        for _ in 0..n {
            self.iterations += 1;
            match self.kind {
                PlannerKind::RrtStar => self.rrt_iteration(),
                PlannerKind::PrmStar => {
                    self.prm_iteration();
                    if self.iterations % PRM_DIJKSTRA_PERIOD == 0 {
                        self.prm_update_best();
                    }
                }
            }
        }
    }

    /// Cost of the best known start→goal path.
    pub fn best_cost(&self) -> Option<f64> {
        match self.kind {
            PlannerKind::RrtStar => self.best_goal_vertex().map(|v| self.cost[v as usize]),
            PlannerKind::PrmStar => self.prm_best.as_ref().map(|(c, _)| *c),
        }
    }

    /// The best known path and its stored cost.
    pub fn best_path(&self) -> Option<(Path, f64)> {
        match self.kind {
            PlannerKind::RrtStar => {
                let g = self.best_goal_vertex()?;
                let mut ids = vec![g];
                let mut v = g;
                while self.parent[v as usize] != NO_PARENT {
                    v = self.parent[v as usize];
                    ids.push(v);
                }
                ids.reverse();
                let wps = ids.iter().map(|&i| self.verts[i as usize]).collect();
                Some((Path::from_validated(wps), self.cost[g as usize]))
            }
            PlannerKind::PrmStar => {
                let (c, ids) = self.prm_best.as_ref()?;
                let wps = ids.iter().map(|&i| self.verts[i as usize]).collect();
                Some((Path::from_validated(wps), *c))
            }
        }
    }

    /// Runs until a first solution exists. Returns the iterations spent.
    pub fn run_until_first_solution(&mut self, max_iterations: u64) -> Result<u64> {
        if max_iterations == 0 {
            return Err(Error::InvalidInput("max_iterations must be >= 1".into()));
        }
        let mut used = 0;
        while self.best_cost().is_none() {
            if used == max_iterations {
                return Err(Error::NoSolutionFound(max_iterations));
            }
            self.step(1);
            used += 1;
        }
        Ok(used)
    }

    /// Tree vertices with their parent index (`None` for the root) and stored cost.
    pub fn tree(&self) -> impl Iterator<Item = (Config, Option<usize>, f64)> + '_ {
        (0..self.parent.len()).map(move |i| {
            let p = self.parent[i];
            (self.verts[i], (p != NO_PARENT).then_some(p as usize), self.cost[i])
        })
    }

    /// Roadmap edges as vertex pairs `(a, b)` with `a < b`.
    pub fn roadmap_edges(&self) -> impl Iterator<Item = (Config, Config)> + '_ {
        self.adjacency.iter().enumerate().flat_map(move |(a, nbrs)| {
            nbrs.iter()
                .filter(move |(b, _)| (a as u32) < *b)
                .map(move |(b, _)| (self.verts[a], self.verts[*b as usize]))
        })
    }

    fn best_goal_vertex(&self) -> Option<u32> {
        self.goal_vertices
            .iter()
            .copied()
            .min_by(|a, b| self.cost[*a as usize].total_cmp(&self.cost[*b as usize]).then(a.cmp(b)))
    }

    fn sample(&mut self, goal_bias: f64) -> Config {
        if goal_bias > 0.0 && self.rng.random::<f64>() < goal_bias {
            return self.ws.goal;
        }
        let x = self.rng.random::<f64>() * self.ws.width;
        let y = self.rng.random::<f64>() * self.ws.height;
        let t = self.rng.random::<f64>() * 2.0 * PI - PI;
        Config::new(x, y, t)
    }

    fn push_tree_vertex(&mut self, c: Config, parent: u32, cost: f64, edge: f64) -> u32 {
        let id = self.verts.len() as u32;
        self.verts.push(c);
        self.grid.insert(id, &c);
        self.parent.push(parent);
        self.cost.push(cost);
        self.edge_len.push(edge);
        self.children.push(Vec::new());
        if parent != NO_PARENT {
            self.children[parent as usize].push(id);
        }
        id
    }

    fn push_roadmap_vertex(&mut self, c: Config) -> u32 {
        let id = self.verts.len() as u32;
        self.verts.push(c);
        self.grid.insert(id, &c);
        self.adjacency.push(Vec::new());
        id
    }

    fn edge_free(&self, a: &Config, b: &Config) -> bool {
        self.local.segment_swept_free(&self.ws, &self.inflated, a, b)
    }

    fn neighbors(&mut self, q: &Config, radius: f64) -> Vec<(u32, f64)> {
        let mut out = std::mem::take(&mut self.scratch);
        self.grid.within(&self.verts, q, radius, self.params.rot_weight, &mut out);
        if out.len() > self.params.max_neighbors {
            out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            out.truncate(self.params.max_neighbors);
        }
        let result = out.clone();
        self.scratch = out;
        result
    }

    fn rrt_iteration(&mut self) {
        let w = self.params.rot_weight;
        let target = self.sample(self.params.goal_bias);
        let Some((near, d)) = self.grid.nearest(&self.verts, &target, w) else {
            return;
        };
        let near_cfg = self.verts[near as usize];
        let new = if d <= self.params.range {
            target
        } else {
            near_cfg.interpolate(&target, self.params.range / d)
        };
        if config_in_collision(&self.ws, &self.inflated, &new) {
            return;
        }
        let radius = self.connection_radius(self.verts.len());
        let nbrs = self.neighbors(&new, radius);
        let mut candidates: Vec<(u32, f64)> = nbrs.clone();
        if !candidates.iter().any(|(id, _)| *id == near) {
            candidates.push((near, near_cfg.distance(&new, w)));
        }
        candidates.sort_by(|a, b| {
            (self.cost[a.0 as usize] + a.1)
                .total_cmp(&(self.cost[b.0 as usize] + b.1))
                .then(a.0.cmp(&b.0))
        });
        let Some(&(parent, edge)) = candidates
            .iter()
            .find(|(id, _)| self.edge_free(&self.verts[*id as usize], &new))
        else {
            return;
        };
        let new_cost = self.cost[parent as usize] + edge;
        let id = self.push_tree_vertex(new, parent, new_cost, edge);

        for (nb, d) in nbrs {
            if nb == parent {
                continue;
            }
            let via = new_cost + d;
            if via < self.cost[nb as usize] && self.edge_free(&new, &self.verts[nb as usize]) {
                self.reparent(nb, id, d);
            }
        }
        if new.distance(&self.ws.goal, w) <= self.params.goal_tolerance {
            self.goal_vertices.push(id);
        }
    }

    fn reparent(&mut self, v: u32, new_parent: u32, edge: f64) {
        let old = self.parent[v as usize];
        if old != NO_PARENT {
            let ch = &mut self.children[old as usize];
            if let Some(pos) = ch.iter().position(|&c| c == v) {
                ch.swap_remove(pos);
            }
        }
        self.parent[v as usize] = new_parent;
        self.children[new_parent as usize].push(v);
        self.edge_len[v as usize] = edge;
        // recompute subtree costs from the parent chain so stored costs equal
        // the in-order sum of edge lengths
        let mut stack = vec![v];
        while let Some(u) = stack.pop() {
            let p = self.parent[u as usize];
            self.cost[u as usize] = self.cost[p as usize] + self.edge_len[u as usize];
            stack.extend_from_slice(&self.children[u as usize]);
        }
    }

    fn prm_iteration(&mut self) {
        let q = self.sample(0.0);
        if config_in_collision(&self.ws, &self.inflated, &q) {
            return;
        }
        let radius = self.connection_radius(self.verts.len());
        let nbrs = self.neighbors(&q, radius);
        let id = self.push_roadmap_vertex(q);
        for (nb, d) in nbrs {
            if self.edge_free(&self.verts[nb as usize], &q) {
                self.adjacency[id as usize].push((nb, d));
                self.adjacency[nb as usize].push((id, d));
            }
        }
    }

    fn prm_update_best(&mut self) {
        let n = self.verts.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut prev = vec![NO_PARENT; n];
        let mut heap = BinaryHeap::new();
        dist[START as usize] = 0.0;
        heap.push(Reverse((OrdF64(0.0), START)));
        while let Some(Reverse((OrdF64(d), u))) = heap.pop() {
            if d > dist[u as usize] {
                continue;
            }
            if u == PRM_GOAL {
                break;
            }
            for &(v, w) in &self.adjacency[u as usize] {
                let nd = d + w;
                if nd < dist[v as usize] {
                    dist[v as usize] = nd;
                    prev[v as usize] = u;
                    heap.push(Reverse((OrdF64(nd), v)));
                }
            }
        }
        let goal_cost = dist[PRM_GOAL as usize];
        if !goal_cost.is_finite() {
            return;
        }
        if self.prm_best.as_ref().is_some_and(|(c, _)| *c <= goal_cost) {
            return;
        }
        let mut ids = vec![PRM_GOAL];
        let mut v = PRM_GOAL;
        while prev[v as usize] != NO_PARENT {
            v = prev[v as usize];
            ids.push(v);
        }
        ids.reverse();
        // recompute in path order so the stored cost matches path_length exactly
        let cost = ids
            .windows(2)
            .fold(0.0, |acc, w| acc + self.verts[w[0] as usize].distance(&self.verts[w[1] as usize], self.params.rot_weight));
        if self.prm_best.as_ref().is_none_or(|(c, _)| cost < *c) {
            self.prm_best = Some((cost, ids));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Functional form of [`PlannerState::step`].
pub fn plan_step(mut state: PlannerState, n: u64) -> Result<PlannerState> {
    if n == 0 {
        return Err(Error::InvalidInput("plan_step needs n >= 1".into()));
    }
    state.step(n);
    Ok(state)
}

pub fn best_path(state: &PlannerState) -> Option<(Path, f64)> {
    state.best_path()
}

pub fn run_until_first_solution(mut state: PlannerState, max_iterations: u64) -> Result<(PlannerState, u64)> {
    let used = state.run_until_first_solution(max_iterations)?;
    Ok((state, used))
}
