use crate::error::{Error, Result};
use crate::mesh::{MeshGraph, NodeType};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Circular hole punched into a channel mesh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obstacle {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

/// Structured grid triangulation of `[0, lx] x [0, ly]` with `nx x ny` nodes.
/// Node `i + nx * j` sits at column `i`, row `j`. Interior nodes are moved by
/// up to `jitter` cell widths.
pub(crate) struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub positions: Vec<[f64; 2]>,
    pub cells: Vec<usize>,
}

impl Grid {
    pub fn new(nx: usize, ny: usize, lx: f64, ly: f64, jitter: f64, rng: &mut ChaCha8Rng) -> Self {
        let hx = lx / (nx - 1) as f64;
        let hy = ly / (ny - 1) as f64;
        let mut positions = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let mut p = [lx * i as f64 / (nx - 1) as f64, ly * j as f64 / (ny - 1) as f64];
                if jitter > 0.0 && i > 0 && j > 0 && i + 1 < nx && j + 1 < ny {
                    p[0] += rng.random_range(-jitter..jitter) * hx;
                    p[1] += rng.random_range(-jitter..jitter) * hy;
                }
                positions.push(p);
            }
        }
        let mut cells = Vec::with_capacity(6 * (nx - 1) * (ny - 1));
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let a = i + nx * j;
                let (b, c, d) = (a + 1, a + 1 + nx, a + nx);
                cells.extend_from_slice(&[a, b, c, a, c, d]);
            }
        }
        Self {
            nx,
            ny,
            positions,
            cells,
        }
    }

    /// Inflow on the left edge, outflow on the right, walls top and bottom.
    fn boundary_type(&self, k: usize) -> NodeType {
        let (i, j) = (k % self.nx, k / self.nx);
        if i == 0 {
            NodeType::Inflow
        } else if i + 1 == self.nx {
            NodeType::Outflow
        } else if j == 0 || j + 1 == self.ny {
            NodeType::Wall
        } else {
            NodeType::Fluid
        }
    }
}

fn to_graph(positions: &[[f64; 2]], types: Vec<NodeType>, cells: Vec<usize>) -> Result<MeshGraph> {
    let flat = positions.iter().flat_map(|p| [p[0] as f32, p[1] as f32]).collect();
    MeshGraph::from_cells(2, flat, types, cells)
}

/// `n x n` jittered grid on the unit square: `2 (n - 1)^2` triangles.
pub fn square_grid(n: usize, jitter: f64, seed: u64) -> Result<MeshGraph> {
    Ok(square_grid_f64(n, jitter, seed)?.0)
}

pub(crate) fn square_grid_f64(
    n: usize,
    jitter: f64,
    seed: u64,
) -> Result<(MeshGraph, Vec<[f64; 2]>)> {
    if n < 3 {
        return Err(Error::InvalidArgument(format!("grid resolution {n} < 3")));
    }
    if !(0.0..0.5).contains(&jitter) {
        return Err(Error::InvalidArgument(format!("jitter {jitter} not in [0, 0.5)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = Grid::new(n, n, 1.0, 1.0, jitter, &mut rng);
    let types = (0..n * n).map(|k| grid.boundary_type(k)).collect();
    let g = to_graph(&grid.positions, types, grid.cells.clone())?;
    Ok((g, grid.positions))
}

/// Channel `[0, lx] x [0, ly]` with circular holes. Nodes inside a hole are
/// removed with every triangle touching them; surviving nodes that lost a
/// grid neighbor become walls.
pub(crate) fn channel_f64(
    nx: usize,
    ny: usize,
    lx: f64,
    ly: f64,
    obstacles: &[Obstacle],
    jitter: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(MeshGraph, Vec<[f64; 2]>)> {
    if nx < 3 || ny < 3 {
        return Err(Error::InvalidArgument("channel resolution < 3".into()));
    }
    let grid = Grid::new(nx, ny, lx, ly, jitter, rng);
    let inside = |p: &[f64; 2]| {
        obstacles
            .iter()
            .any(|o| (p[0] - o.cx).powi(2) + (p[1] - o.cy).powi(2) < o.r * o.r)
    };
    let removed: Vec<bool> = grid.positions.iter().map(inside).collect();
    let mut cells = Vec::new();
    let mut used = vec![false; grid.positions.len()];
    for tri in grid.cells.chunks_exact(3) {
        if tri.iter().all(|&k| !removed[k]) {
            cells.extend_from_slice(tri);
            for &k in tri {
                used[k] = true;
            }
        }
    }
    let mut new_id = vec![usize::MAX; used.len()];
    let mut positions = Vec::new();
    let mut types = Vec::new();
    for k in 0..used.len() {
        if !used[k] {
            continue;
        }
        new_id[k] = positions.len();
        positions.push(grid.positions[k]);
        let (i, j) = (k % nx, k / nx);
        let near_hole = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1), (1, 1), (-1, -1)]
            .iter()
            .any(|&(di, dj)| {
                let (a, b) = (i as i64 + di, j as i64 + dj);
                a >= 0
                    && b >= 0
                    && (a as usize) < nx
                    && (b as usize) < ny
                    && !used[a as usize + nx * b as usize]
            });
        types.push(if near_hole && grid.boundary_type(k) == NodeType::Fluid {
            NodeType::Wall
        } else {
            grid.boundary_type(k)
        });
    }
    if positions.len() < 3 {
        return Err(Error::InvalidMesh("degenerate geometry: obstacle covers the channel".into()));
    }
    let cells = cells.into_iter().map(|k| new_id[k]).collect();
    let g = to_graph(&positions, types, cells)?;
    Ok((g, positions))
}

/// Periodic `n x n` grid on the unit torus: positions and triangles, with
/// wrap-around connectivity. Geometry must use minimum-image displacements.
#[cfg(test)]
pub(crate) fn torus_grid(n: usize) -> (Vec<[f64; 2]>, Vec<usize>) {
    let positions = (0..n * n)
        .map(|k| [(k % n) as f64 / n as f64, (k / n) as f64 / n as f64])
        .collect();
    let mut cells = Vec::with_capacity(6 * n * n);
    for j in 0..n {
        for i in 0..n {
            let id = |a: usize, b: usize| (a % n) + n * (b % n);
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            cells.extend_from_slice(&[a, b, c, a, c, d]);
        }
    }
    (positions, cells)
}
