//! Exact 2-Wasserstein distance between empirical distributions.

use rand::Rng;
use rayon::prelude::*;

use crate::corridor::Observation;
use crate::error::{Error, Result};

/// A finite set of equally weighted points of one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    dim: usize,
    points: Vec<Vec<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        let dim = points.first().ok_or(Error::Empty("point cloud"))?.len();
        if dim == 0 {
            return Err(Error::Empty("point dimension"));
        }
        for p in &points {
            if p.len() != dim {
                return Err(Error::DimensionMismatch {
                    left: dim,
                    right: p.len(),
                });
            }
            if p.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config("point cloud contains a non-finite coordinate".into()));
            }
        }
        Ok(PointCloud { dim, points })
    }

    /// Observations are normalized, so every coordinate must lie in `[0, 1]`.
    pub fn from_observations(obs: &[Observation]) -> Result<Self> {
        if obs.iter().any(|o| o.0.iter().any(|x| !(0.0..=1.0).contains(x))) {
            return Err(Error::Config("observation coordinate outside [0, 1]".into()));
        }
        Self::new(obs.iter().map(|o| o.0.to_vec()).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    /// Uniform sample of `n` distinct points; the whole cloud if `n >= len`.
    pub fn subsample<R: Rng>(&self, n: usize, rng: &mut R) -> Self {
        if n >= self.len() {
            return self.clone();
        }
        let mut idx = rand::seq::index::sample(rng, self.len(), n).into_vec();
        idx.sort_unstable();
        PointCloud {
            dim: self.dim,
            points: idx.into_iter().map(|i| self.points[i].clone()).collect(),
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn cost_matrix(a: &PointCloud, b: &PointCloud) -> Vec<Vec<f64>> {
    a.points
        .iter()
        .map(|p| b.points.iter().map(|q| sq_dist(p, q)).collect())
        .collect()
}

/// Minimum-cost perfect matching on a square cost matrix. Returns the
/// column assigned to each row and the total cost.
pub fn hungarian(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = cost.len();
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    // Potentials u (rows) and v (columns); column 0 is a virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        assign[row_of[j] - 1] = j - 1;
    }
    let total = assign.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    (assign, total)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Minimum transport cost between uniform masses on rows and columns of
/// `cost`, in units where each row carries `cols/g` and each column `rows/g`.
/// Successive shortest paths with potentials; exact for integer capacities.
fn transport(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    let m = cost[0].len();
    let g = gcd(n, m);
    let (row_cap, col_cap) = ((m / g) as u64, (n / g) as u64);
    // Node layout: source, n rows, m columns, sink.
    let (src, sink) = (0, n + m + 1);
    let nodes = n + m + 2;
    let mut supply = vec![row_cap; n];
    let mut demand = vec![col_cap; m];
    let mut flow = vec![vec![0u64; m]; n];
    let mut pot = vec![0.0f64; nodes];
    let mut remaining = (n as u64) * row_cap;
    let mut total = 0.0;
    while remaining > 0 {
        let mut dist = vec![f64::INFINITY; nodes];
        let mut prev = vec![usize::MAX; nodes];
        let mut done = vec![false; nodes];
        dist[src] = 0.0;
        while let Some(x) = (0..nodes)
            .filter(|&k| !done[k] && dist[k].is_finite())
            .min_by(|&p, &q| dist[p].total_cmp(&dist[q]))
        {
            done[x] = true;
            let mut relax = |y: usize, c: f64, dist: &mut Vec<f64>| {
                // Reduced costs are non-negative up to rounding.
                let d = dist[x] + (c + pot[x] - pot[y]).max(0.0);
                if d < dist[y] {
                    dist[y] = d;
                    prev[y] = x;
                }
            };
            if x == src {
                for i in 0..n {
                    if supply[i] > 0 {
                        relax(1 + i, 0.0, &mut dist);
                    }
                }
            } else if x <= n {
                let i = x - 1;
                for j in 0..m {
                    relax(1 + n + j, cost[i][j], &mut dist);
                }
                if supply[i] < row_cap {
                    relax(src, 0.0, &mut dist);
                }
            } else if x < sink {
                let j = x - 1 - n;
                for i in 0..n {
                    if flow[i][j] > 0 {
                        relax(1 + i, -cost[i][j], &mut dist);
                    }
                }
                if demand[j] > 0 {
                    relax(sink, 0.0, &mut dist);
                }
            } else if demand.iter().any(|&d| d < col_cap) {
                for j in 0..m {
                    if demand[j] < col_cap {
                        relax(1 + n + j, 0.0, &mut dist);
                    }
                }
            }
        }
        for k in 0..nodes {
            if dist[k].is_finite() {
                pot[k] += dist[k];
            }
        }
        let mut path = vec![sink];
        while *path.last().unwrap() != src {
            path.push(prev[*path.last().unwrap()]);
        }
        path.reverse();
        let mut push = remaining;
        for w in path.windows(2) {
            let cap = match (w[0], w[1]) {
                (s, r) if s == src => supply[r - 1],
                (c, t) if t == sink => demand[c - 1 - n],
                (r, c) if r <= n && c > n => u64::MAX,
                (c, r) => flow[r - 1][c - 1 - n],
            };
            push = push.min(cap);
        }
        for w in path.windows(2) {
            match (w[0], w[1]) {
                (s, r) if s == src => supply[r - 1] -= push,
                (c, t) if t == sink => demand[c - 1 - n] -= push,
                (r, c) if r <= n && c > n => {
                    flow[r - 1][c - 1 - n] += push;
                    total += push as f64 * cost[r - 1][c - 1 - n];
                }
                (c, r) => {
                    flow[r - 1][c - 1 - n] -= push;
                    total -= push as f64 * cost[r - 1][c - 1 - n];
                }
            }
        }
        remaining -= push;
    }
    total / ((n * m / g) as f64)
}

/// Exact W2 under squared Euclidean ground cost. Equal sizes use a perfect
/// matching; unequal sizes solve the uniform-mass transport problem, which
/// equals matching both clouds replicated to their least common multiple.
pub fn wasserstein2(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::DimensionMismatch {
            left: a.dim,
            right: b.dim,
        });
    }
    let cost = cost_matrix(a, b);
    let mean = if a.len() == b.len() {
        hungarian(&cost).1 / a.len() as f64
    } else {
        transport(&cost)
    };
    Ok(mean.max(0.0).sqrt())
}

/// Symmetric matrix of pairwise W2 distances with a zero diagonal.
pub fn mismatch_matrix(sets: &[PointCloud]) -> Result<Vec<Vec<f64>>> {
    if sets.len() < 2 {
        return Err(Error::Empty("mismatch matrix needs at least two datasets"));
    }
    let pairs: Vec<(usize, usize)> = (0..sets.len())
        .flat_map(|i| (i + 1..sets.len()).map(move |j| (i, j)))
        .collect();
    let values = pairs
        .par_iter()
        .map(|&(i, j)| wasserstein2(&sets[i], &sets[j]))
        .collect::<Result<Vec<f64>>>()?;
    let mut out = vec![vec![0.0; sets.len()]; sets.len()];
    for (&(i, j), d) in pairs.iter().zip(values) {
        out[i][j] = d;
        out[j][i] = d;
    }
    Ok(out)
}

/// Writes a labelled square matrix as CSV.
pub fn write_matrix_csv<W: std::io::Write>(labels: &[String], matrix: &[Vec<f64>], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(std::iter::once("dataset".to_string()).chain(labels.iter().cloned()))?;
    for (label, row) in labels.iter().zip(matrix) {
        w.write_record(std::iter::once(label.clone()).chain(row.iter().map(|d| format!("{d:.6}"))))?;
    }
    w.flush()?;
    Ok(())
}
