//! Maze navigation: walls, start and goal on a square grid; the agent
//! advances one cell per frame along a shortest path, then waits at the goal.

use std::collections::VecDeque;

use cost_tensor::{Rng, Tensor};
use serde::{Deserialize, Serialize};

use super::{Cell, Channel, HIGH, LOW};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MazeSpec {
    pub size: usize,
    /// Row-major `size × size` wall flags.
    pub walls: Vec<Vec<bool>>,
    pub start: Cell,
    pub goal: Cell,
    pub oracle_path: Vec<Cell>,
}

impl MazeSpec {
    pub fn is_wall(&self, c: Cell) -> bool {
        self.walls[c.0][c.1]
    }

    /// Edges on the oracle path.
    pub fn moves(&self) -> usize {
        self.oracle_path.len() - 1
    }
}

/// Generator settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MazeParams {
    pub size: usize,
    pub frames: usize,
    pub wall_density: f64,
    /// Reject mazes whose shortest path has fewer moves.
    pub min_moves: usize,
}

impl Default for MazeParams {
    fn default() -> Self {
        Self { size: 5, frames: 8, wall_density: 0.2, min_moves: 1 }
    }
}

const TRIES_PER_DENSITY: usize = 1000;

/// Shortest 4-connected path from `start` to `goal` avoiding walls;
/// neighbours are expanded in N, E, S, W order so ties resolve the same way
/// every time.
pub fn bfs_oracle(walls: &[Vec<bool>], start: Cell, goal: Cell) -> Option<Vec<Cell>> {
    let g = walls.len();
    let inside = |c: Cell| c.0 < g && c.1 < g;
    if !inside(start) || !inside(goal) || walls[start.0][start.1] || walls[goal.0][goal.1] {
        return None;
    }
    let mut prev: Vec<Option<Cell>> = vec![None; g * g];
    let mut seen = vec![false; g * g];
    seen[start.0 * g + start.1] = true;
    let mut queue = VecDeque::from([start]);
    while let Some(c) = queue.pop_front() {
        if c == goal {
            let mut path = vec![goal];
            let mut cur = goal;
            while let Some(p) = prev[cur.0 * g + cur.1] {
                path.push(p);
                cur = p;
            }
            path.reverse();
            return Some(path);
        }
        let (r, col) = (c.0 as isize, c.1 as isize);
        for (dr, dc) in [(-1, 0), (0, 1), (1, 0), (0, -1)] {
            let (nr, nc) = (r + dr, col + dc);
            if nr < 0 || nc < 0 {
                continue;
            }
            let n = (nr as usize, nc as usize);
            if !inside(n) || walls[n.0][n.1] || seen[n.0 * g + n.1] {
                continue;
            }
            seen[n.0 * g + n.1] = true;
            prev[n.0 * g + n.1] = Some(c);
            queue.push_back(n);
        }
    }
    None
}

/// Independent check that `path` walks from `start` to `goal` through open,
/// 4-adjacent cells.
pub fn path_is_valid(walls: &[Vec<bool>], path: &[Cell], start: Cell, goal: Cell) -> bool {
    let g = walls.len();
    path.first() == Some(&start)
        && path.last() == Some(&goal)
        && path.iter().all(|&(r, c)| r < g && c < g && !walls[r][c])
        && path
            .windows(2)
            .all(|w| w[0].0.abs_diff(w[1].0) + w[0].1.abs_diff(w[1].1) == 1)
}

/// Draws a solvable maze whose shortest path fits in `frames − 1` moves.
/// After every 1000 rejected draws the wall density is halved; once it has
/// reached zero, another 1000 failures is an error.
pub fn gen_maze_spec(rng: &mut Rng, p: &MazeParams) -> Result<MazeSpec> {
    if p.size < 3 || p.frames < 2 {
        return Err(Error::Task(format!("maze needs size ≥ 3 and frames ≥ 2, got {} and {}", p.size, p.frames)));
    }
    if !(0.0..=0.3).contains(&p.wall_density) {
        return Err(Error::Task(format!("wall density {} outside [0, 0.3]", p.wall_density)));
    }
    let max_moves = p.frames - 1;
    if p.min_moves > max_moves || p.min_moves > 2 * (p.size - 1) {
        return Err(Error::Task(format!(
            "min_moves {} unreachable with {} frames on a {}-grid",
            p.min_moves, p.frames, p.size
        )));
    }
    let g = p.size;
    let mut density = p.wall_density;
    loop {
        for _ in 0..TRIES_PER_DENSITY {
            let start = (rng.below(g), rng.below(g));
            let goal = (rng.below(g), rng.below(g));
            if start == goal {
                continue;
            }
            let walls: Vec<Vec<bool>> = (0..g)
                .map(|r| {
                    (0..g)
                        .map(|c| {
                            let hit = rng.bernoulli(density);
                            hit && (r, c) != start && (r, c) != goal
                        })
                        .collect()
                })
                .collect();
            if let Some(path) = bfs_oracle(&walls, start, goal) {
                let moves = path.len() - 1;
                if moves <= max_moves && moves >= p.min_moves {
                    return Ok(MazeSpec { size: g, walls, start, goal, oracle_path: path });
                }
            }
        }
        if density == 0.0 {
            return Err(Error::Task("maze generator exhausted its retry budget".into()));
        }
        density = if density < 1e-3 { 0.0 } else { density / 2.0 };
    }
}

/// Ground-truth video `(F, G, G, 4)` in model space.
pub fn render_maze(spec: &MazeSpec, frames: usize) -> Result<Tensor<f32>> {
    if spec.moves() + 1 > frames {
        return Err(Error::Task(format!(
            "path of {} moves does not fit in {frames} frames",
            spec.moves()
        )));
    }
    let agent = (0..frames).map(|f| spec.oracle_path[f.min(spec.moves())]).collect::<Vec<_>>();
    render_frames(spec, &agent)
}

/// Renders the maze with the agent at the given cell in each frame.
pub fn render_frames(spec: &MazeSpec, agent: &[Cell]) -> Result<Tensor<f32>> {
    let g = spec.size;
    let c = Channel::COUNT;
    let mut data = vec![LOW; agent.len() * g * g * c];
    for (f, &a) in agent.iter().enumerate() {
        for r in 0..g {
            for col in 0..g {
                let base = ((f * g + r) * g + col) * c;
                if spec.walls[r][col] {
                    data[base + Channel::Wall as usize] = HIGH;
                }
                if (r, col) == a {
                    data[base + Channel::Agent as usize] = HIGH;
                }
                if (r, col) == spec.goal {
                    data[base + Channel::Goal as usize] = HIGH;
                }
            }
        }
    }
    Ok(Tensor::new([agent.len(), g, g, c], data)?)
}

/// Per-frame argmax of the agent channel; ties go to the lowest flat index.
pub fn decode_positions(video: &Tensor<f32>) -> Result<Vec<Cell>> {
    let s = video.shape();
    if s.len() != 4 || s[1] != s[2] || s[3] != Channel::COUNT {
        return Err(Error::Shape(format!("maze video must be (F, G, G, {}), got {s:?}", Channel::COUNT)));
    }
    let (g, c) = (s[1], s[3]);
    Ok(video
        .data()
        .chunks(g * g * c)
        .map(|frame| {
            let mut best = 0;
            let mut best_v = f32::NEG_INFINITY;
            for i in 0..g * g {
                let v = frame[i * c + Channel::Agent as usize];
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            (best / g, best % g)
        })
        .collect())
}
