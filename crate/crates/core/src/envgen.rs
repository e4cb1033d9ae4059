//! Seeded workspace distributions and occupancy-grid rasterization.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{config_in_collision, Config, Obstacle, RobotShape, Workspace};
use crate::seed;

pub const MAX_ATTEMPTS: usize = 100;
pub const DEFAULT_GRID_RESOLUTION: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionKind {
    TwoPassage,
    RandomWalls,
    RandomBlocks,
}

impl fmt::Display for DistributionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistributionKind::TwoPassage => "two_passage",
            DistributionKind::RandomWalls => "random_walls",
            DistributionKind::RandomBlocks => "random_blocks",
        })
    }
}

impl FromStr for DistributionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_passage" => Ok(Self::TwoPassage),
            "random_walls" => Ok(Self::RandomWalls),
            "random_blocks" => Ok(Self::RandomBlocks),
            other => Err(Error::Parse(format!("unknown distribution '{other}'"))),
        }
    }
}

/// A workspace distribution. Start and goal are constants of the
/// distribution; only the obstacle layout is sampled.
///
/// Parameters by kind (all meters unless noted):
/// * every kind: `start_x`, `start_y`, `start_theta`, `goal_x`, `goal_y`,
///   `goal_theta` (radians), `clearance` (free margin required around start/goal)
/// * `two_passage`: `wall_x`, `wall_thickness`, `passage_min`, `passage_max`,
///   `gap_y_min`, `gap_y_max` (narrow-gap center), `wide_width` (opening at the top)
/// * `random_walls`: `count_min`, `count_max`, `wall_thickness`, `passage_min`, `passage_max`
/// * `random_blocks`: `count_min`, `count_max`, `size_min`, `size_max`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSpec {
    pub kind: DistributionKind,
    pub width: f64,
    pub height: f64,
    pub params: BTreeMap<String, f64>,
}

#[derive(Serialize, Deserialize)]
struct DistributionDoc {
    distribution: DistributionSpec,
}

fn params(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

impl DistributionSpec {
    /// Vertical wall with a narrow gap of varying height and width, plus a
    /// wide opening at the top.
    pub fn two_passage() -> Self {
        Self {
            kind: DistributionKind::TwoPassage,
            width: 500.0,
            height: 500.0,
            params: params(&[
                ("start_x", 100.0),
                ("start_y", 250.0),
                ("start_theta", 0.0),
                ("goal_x", 400.0),
                ("goal_y", 250.0),
                ("goal_theta", 0.0),
                ("clearance", 2.0),
                ("wall_x", 250.0),
                ("wall_thickness", 60.0),
                ("passage_min", 46.0),
                ("passage_max", 54.0),
                ("gap_y_min", 110.0),
                ("gap_y_max", 330.0),
                ("wide_width", 80.0),
            ]),
        }
    }

    /// The fixed two-passage layout. The narrow gap sits low in the wall so
    /// that the routes through it and through the top opening have similar
    /// lengths and converged runs end up in either.
    pub fn motivating_example() -> Self {
        let mut s = Self::two_passage();
        s.params.insert("gap_y_min".into(), 60.0);
        s.params.insert("gap_y_max".into(), 60.0);
        s.params.insert("passage_min".into(), 46.0);
        s.params.insert("passage_max".into(), 46.0);
        s
    }

    pub fn random_blocks() -> Self {
        Self {
            kind: DistributionKind::RandomBlocks,
            width: 500.0,
            height: 500.0,
            params: params(&[
                ("start_x", 60.0),
                ("start_y", 60.0),
                ("start_theta", 0.0),
                ("goal_x", 440.0),
                ("goal_y", 440.0),
                ("goal_theta", 0.0),
                ("clearance", 2.0),
                ("count_min", 5.0),
                ("count_max", 10.0),
                ("size_min", 30.0),
                ("size_max", 90.0),
            ]),
        }
    }

    pub fn random_walls() -> Self {
        Self {
            kind: DistributionKind::RandomWalls,
            width: 500.0,
            height: 500.0,
            params: params(&[
                ("start_x", 40.0),
                ("start_y", 250.0),
                ("start_theta", 0.0),
                ("goal_x", 460.0),
                ("goal_y", 250.0),
                ("goal_theta", 0.0),
                ("clearance", 2.0),
                ("count_min", 1.0),
                ("count_max", 3.0),
                ("wall_thickness", 15.0),
                ("passage_min", 55.0),
                ("passage_max", 100.0),
            ]),
        }
    }

    pub fn by_kind(kind: DistributionKind) -> Self {
        match kind {
            DistributionKind::TwoPassage => Self::two_passage(),
            DistributionKind::RandomWalls => Self::random_walls(),
            DistributionKind::RandomBlocks => Self::random_blocks(),
        }
    }

    pub fn param(&self, name: &str) -> Result<f64> {
        self.params
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("distribution {} lacks parameter '{name}'", self.kind)))
    }

    pub fn start(&self) -> Result<Config> {
        Ok(Config::new(self.param("start_x")?, self.param("start_y")?, self.param("start_theta")?))
    }

    pub fn goal(&self) -> Result<Config> {
        Ok(Config::new(self.param("goal_x")?, self.param("goal_y")?, self.param("goal_theta")?))
    }

    fn range(&self, lo: &str, hi: &str) -> Result<(f64, f64)> {
        let (a, b) = (self.param(lo)?, self.param(hi)?);
        if !(a <= b) {
            return Err(Error::InvalidInput(format!("empty range {lo}={a} > {hi}={b}")));
        }
        Ok((a, b))
    }

    pub fn validate(&self, shape: &RobotShape) -> Result<()> {
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(Error::InvalidInput("world dimensions must be positive".into()));
        }
        self.start()?;
        self.goal()?;
        self.param("clearance")?;
        let diameter = 2.0 * shape.bounding_radius();
        match self.kind {
            DistributionKind::TwoPassage | DistributionKind::RandomWalls => {
                let (pmin, _) = self.range("passage_min", "passage_max")?;
                if pmin < 0.9 * diameter {
                    return Err(Error::InvalidInput(format!(
                        "passage_min {pmin} below 0.9 x robot diameter {diameter:.2}"
                    )));
                }
                self.param("wall_thickness")?;
                if self.kind == DistributionKind::TwoPassage {
                    self.range("gap_y_min", "gap_y_max")?;
                    self.param("wall_x")?;
                    self.param("wide_width")?;
                } else {
                    self.range("count_min", "count_max")?;
                }
            }
            DistributionKind::RandomBlocks => {
                let (cmin, _) = self.range("count_min", "count_max")?;
                if cmin < 0.0 {
                    return Err(Error::InvalidInput("negative obstacle count".into()));
                }
                self.range("size_min", "size_max")?;
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&DistributionDoc { distribution: self.clone() }).expect("serializable")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: DistributionDoc = serde_json::from_str(s)?;
        Ok(doc.distribution)
    }
}

fn uniform(rng: &mut seed::Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        lo + (hi - lo) * rng.random::<f64>()
    } else {
        lo
    }
}

fn uniform_count(rng: &mut seed::Rng, lo: f64, hi: f64) -> usize {
    let (lo, hi) = (lo.round() as usize, hi.round() as usize);
    rng.random_range(lo..=hi)
}

/// Samples one workspace. Deterministic in `(spec, shape, seed)`.
pub fn sample_workspace(spec: &DistributionSpec, shape: &RobotShape, seed: u64) -> Result<Workspace> {
    spec.validate(shape)?;
    let mut rng = seed::rng(seed);
    let start = spec.start()?;
    let goal = spec.goal()?;
    let guard = shape.inflated(spec.param("clearance")?);
    for _ in 0..MAX_ATTEMPTS {
        let obstacles = match spec.kind {
            DistributionKind::TwoPassage => two_passage_obstacles(spec, &mut rng)?,
            DistributionKind::RandomWalls => wall_obstacles(spec, &mut rng)?,
            DistributionKind::RandomBlocks => block_obstacles(spec, &mut rng)?,
        };
        let Some(obstacles) = obstacles else { continue };
        let ws = Workspace::new(spec.width, spec.height, obstacles, start, goal)?;
        if config_in_collision(&ws, &guard, &start) || config_in_collision(&ws, &guard, &goal) {
            continue;
        }
        return Ok(ws);
    }
    Err(Error::GenerationFailed { attempts: MAX_ATTEMPTS })
}

fn two_passage_obstacles(spec: &DistributionSpec, rng: &mut seed::Rng) -> Result<Option<Vec<Obstacle>>> {
    let (pmin, pmax) = spec.range("passage_min", "passage_max")?;
    let (gmin, gmax) = spec.range("gap_y_min", "gap_y_max")?;
    let gap = uniform(rng, pmin, pmax);
    let center = uniform(rng, gmin, gmax);
    let half_t = spec.param("wall_thickness")? / 2.0;
    let x = spec.param("wall_x")?;
    let top = spec.height - spec.param("wide_width")?;
    let (lo, hi) = (center - gap / 2.0, center + gap / 2.0);
    if lo <= 0.0 || hi >= top {
        return Ok(None);
    }
    Ok(Some(vec![
        Obstacle::new(x - half_t, 0.0, x + half_t, lo)?,
        Obstacle::new(x - half_t, hi, x + half_t, top)?,
    ]))
}

fn wall_obstacles(spec: &DistributionSpec, rng: &mut seed::Rng) -> Result<Option<Vec<Obstacle>>> {
    let (cmin, cmax) = spec.range("count_min", "count_max")?;
    let (pmin, pmax) = spec.range("passage_min", "passage_max")?;
    let half_t = spec.param("wall_thickness")? / 2.0;
    let count = uniform_count(rng, cmin, cmax);
    let (sx, gx) = (spec.param("start_x")?, spec.param("goal_x")?);
    let (x0, x1) = (sx.min(gx), sx.max(gx));
    let mut out = Vec::new();
    for k in 0..count {
        // walls evenly spaced between start and goal, jittered
        let slot = (x1 - x0) / (count as f64 + 1.0);
        let x = x0 + slot * (k as f64 + 1.0) + uniform(rng, -0.2, 0.2) * slot;
        let gap = uniform(rng, pmin, pmax);
        let center = uniform(rng, gap / 2.0 + 10.0, spec.height - gap / 2.0 - 10.0);
        out.push(Obstacle::new(x - half_t, 0.0, x + half_t, center - gap / 2.0)?);
        out.push(Obstacle::new(x - half_t, center + gap / 2.0, x + half_t, spec.height)?);
    }
    Ok(Some(out))
}

fn block_obstacles(spec: &DistributionSpec, rng: &mut seed::Rng) -> Result<Option<Vec<Obstacle>>> {
    let (cmin, cmax) = spec.range("count_min", "count_max")?;
    let (smin, smax) = spec.range("size_min", "size_max")?;
    let count = uniform_count(rng, cmin, cmax);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let w = uniform(rng, smin, smax).min(spec.width);
        let h = uniform(rng, smin, smax).min(spec.height);
        let x = uniform(rng, 0.0, spec.width - w);
        let y = uniform(rng, 0.0, spec.height - h);
        out.push(Obstacle::new(x, y, x + w, y + h)?);
    }
    Ok(Some(out))
}

/// Euclidean start→goal distance, ignoring obstacles and rotation.
pub fn straight_line_length(ws: &Workspace) -> f64 {
    ws.start.position_distance(&ws.goal)
}

/// Square binary occupancy grid, row-major with row 0 at the top (largest y).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccupancyGrid {
    pub resolution: usize,
    pub cells: Vec<u8>,
    /// `(row, col)` of the start cell.
    pub start_cell: (usize, usize),
    pub goal_cell: (usize, usize),
}

#[derive(Serialize, Deserialize)]
struct GridMeta {
    resolution: usize,
    start_cell: [usize; 2],
    goal_cell: [usize; 2],
}

fn cell_of(ws: &Workspace, c: &Config, res: usize) -> (usize, usize) {
    let col = ((c.x / ws.width * res as f64).floor().max(0.0) as usize).min(res - 1);
    let row_from_bottom = ((c.y / ws.height * res as f64).floor().max(0.0) as usize).min(res - 1);
    (res - 1 - row_from_bottom, col)
}

/// Marks a cell occupied iff its center lies inside an obstacle; start and
/// goal cells are forced free.
pub fn rasterize(ws: &Workspace, resolution: usize) -> Result<OccupancyGrid> {
    if resolution < 8 {
        return Err(Error::InvalidInput(format!("resolution {resolution} < 8")));
    }
    let start_cell = cell_of(ws, &ws.start, resolution);
    let goal_cell = cell_of(ws, &ws.goal, resolution);
    if start_cell == goal_cell {
        return Err(Error::ResolutionTooCoarse(resolution));
    }
    let (cw, ch) = (ws.width / resolution as f64, ws.height / resolution as f64);
    let mut cells = vec![0u8; resolution * resolution];
    for row in 0..resolution {
        let y = ws.height - (row as f64 + 0.5) * ch;
        for col in 0..resolution {
            let x = (col as f64 + 0.5) * cw;
            if ws.obstacles.iter().any(|o| o.contains_point(x, y)) {
                cells[row * resolution + col] = 1;
            }
        }
    }
    cells[start_cell.0 * resolution + start_cell.1] = 0;
    cells[goal_cell.0 * resolution + goal_cell.1] = 0;
    Ok(OccupancyGrid { resolution, cells, start_cell, goal_cell })
}

impl OccupancyGrid {
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.cells[row * self.resolution + col]
    }

    pub fn occupied_fraction(&self) -> f64 {
        self.cells.iter().map(|&c| c as f64).sum::<f64>() / self.cells.len() as f64
    }

    /// Plain PGM (P2), maxval 1, obstacle = 1.
    pub fn to_pgm(&self) -> String {
        let n = self.resolution;
        let mut s = format!("P2\n{n} {n}\n1\n");
        for row in self.cells.chunks(n) {
            let line: Vec<&str> = row.iter().map(|&c| if c == 1 { "1" } else { "0" }).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn meta_json(&self) -> String {
        serde_json::to_string(&GridMeta {
            resolution: self.resolution,
            start_cell: [self.start_cell.0, self.start_cell.1],
            goal_cell: [self.goal_cell.0, self.goal_cell.1],
        })
        .expect("serializable")
    }

    pub fn from_pgm(pgm: &str, meta_json: &str) -> Result<Self> {
        let meta: GridMeta = serde_json::from_str(meta_json)?;
        let mut tokens = pgm
            .lines()
            .filter(|l| !l.trim_start().starts_with('#'))
            .flat_map(|l| l.split_whitespace());
        if tokens.next() != Some("P2") {
            return Err(Error::Parse("expected plain PGM (P2)".into()));
        }
        let mut num = |what: &str| -> Result<usize> {
            tokens
                .next()
                .ok_or_else(|| Error::Parse(format!("PGM truncated at {what}")))?
                .parse::<usize>()
                .map_err(|e| Error::Parse(format!("PGM {what}: {e}")))
        };
        let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
        if w != h || w != meta.resolution || maxval != 1 {
            return Err(Error::Parse(format!("unexpected PGM header {w}x{h} maxval {maxval}")));
        }
        let mut cells = Vec::with_capacity(w * h);
        for _ in 0..w * h {
            let v = num("pixel")?;
            if v > 1 {
                return Err(Error::Parse(format!("pixel value {v} > 1")));
            }
            cells.push(v as u8);
        }
        Ok(Self {
            resolution: w,
            cells,
            start_cell: (meta.start_cell[0], meta.start_cell[1]),
            goal_cell: (meta.goal_cell[0], meta.goal_cell[1]),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> RobotShape {
        RobotShape::l_shape()
    }

    #[test]
    fn sampling_is_deterministic() {
        for spec in [DistributionSpec::two_passage(), DistributionSpec::random_blocks(), DistributionSpec::random_walls()] {
            let a = sample_workspace(&spec, &shape(), 42).unwrap();
            let b = sample_workspace(&spec, &shape(), 42).unwrap();
            assert_eq!(a, b);
            assert!(!config_in_collision(&a, &shape(), &a.start));
            assert!(!config_in_collision(&a, &shape(), &a.goal));
        }
    }

    #[test]
    fn two_passage_has_one_wall_pair() {
        let spec = DistributionSpec::two_passage();
        for seed in 0..50 {
            let ws = sample_workspace(&spec, &shape(), seed).unwrap();
            assert_eq!(ws.obstacles.len(), 2);
            let gap = ws.obstacles[1].y_min - ws.obstacles[0].y_max;
            assert!((46.0..=54.0).contains(&gap), "gap {gap}");
        }
    }

    #[test]
    fn block_counts_stay_in_range() {
        let spec = DistributionSpec::random_blocks();
        for seed in 0..1000 {
            let ws = sample_workspace(&spec, &shape(), seed).unwrap();
            assert!((5..=10).contains(&ws.obstacles.len()));
        }
    }

    #[test]
    fn impossible_spec_fails_generation() {
        let mut spec = DistributionSpec::random_blocks();
        // giant blocks always cover the start
        spec.params.insert("size_min".into(), 500.0);
        spec.params.insert("size_max".into(), 500.0);
        let err = sample_workspace(&spec, &shape(), 1).unwrap_err();
        assert!(matches!(err, Error::GenerationFailed { attempts: 100 }));
    }

    #[test]
    fn narrow_passage_below_robot_size_is_rejected() {
        let mut spec = DistributionSpec::two_passage();
        spec.params.insert("passage_min".into(), 20.0);
        assert!(spec.validate(&shape()).is_err());
    }

    #[test]
    fn rasterize_examples() {
        let ws = Workspace::new(100.0, 100.0, vec![], Config::new(10.0, 10.0, 0.0), Config::new(90.0, 90.0, 0.0)).unwrap();
        let g = rasterize(&ws, 16).unwrap();
        assert!(g.cells.iter().all(|&c| c == 0));
        assert_eq!(g.cells.len(), 256);

        let mut full = ws.clone();
        full.obstacles.push(Obstacle::new(0.0, 0.0, 100.0, 100.0).unwrap());
        let g = rasterize(&full, 16).unwrap();
        let free: Vec<usize> = (0..256).filter(|&i| g.cells[i] == 0).collect();
        assert_eq!(free.len(), 2);
        assert_eq!(g.get(g.start_cell.0, g.start_cell.1), 0);

        let mut half = ws.clone();
        half.start = Config::new(90.0, 10.0, 0.0);
        half.obstacles.push(Obstacle::new(0.0, 0.0, 50.0, 100.0).unwrap());
        for res in [8, 9, 31, 64] {
            let g = rasterize(&half, res).unwrap();
            let occupied = g.cells.iter().filter(|&&c| c == 1).count() as f64;
            let expected = 0.5 * (res * res) as f64;
            assert!((occupied - expected).abs() <= res as f64, "res {res}: {occupied}");
        }

        assert!(matches!(rasterize(&ws, 4), Err(Error::InvalidInput(_))));
        let mut close = ws.clone();
        close.goal = Config::new(12.0, 12.0, 0.0);
        assert!(matches!(rasterize(&close, 8), Err(Error::ResolutionTooCoarse(8))));
    }

    #[test]
    fn straight_line_examples() {
        let mut ws = Workspace::new(500.0, 500.0, vec![], Config::new(0.0, 0.0, 0.0), Config::new(300.0, 400.0, 0.0)).unwrap();
        assert_eq!(straight_line_length(&ws), 500.0);
        ws.goal = ws.start;
        assert_eq!(straight_line_length(&ws), 0.0);
    }

    #[test]
    fn pgm_round_trip() {
        let ws = sample_workspace(&DistributionSpec::two_passage(), &shape(), 3).unwrap();
        let g = rasterize(&ws, 32).unwrap();
        let back = OccupancyGrid::from_pgm(&g.to_pgm(), &g.meta_json()).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = DistributionSpec::random_walls();
        let json = spec.to_json();
        assert!(json.contains("\"distribution\""));
        assert_eq!(DistributionSpec::from_json(&json).unwrap(), spec);
    }
}
