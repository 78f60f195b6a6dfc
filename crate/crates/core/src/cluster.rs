//! K-means over pixels in the weighted `(λ·row, λ·col, α·intensity)` space.
//!
//! The distance between pixels `p = (i, j, a)` and `q = (k, l, b)` is
//!
//! ```text
//! sqrt((λ(i − k))² + (λ(j − l))² + (α(a − b))²)
//! ```
//!
//! which is plain Euclidean distance once every pixel is mapped to
//! `(λi, λj, αa)`. Clustering therefore runs Lloyd iterations on the scaled
//! points. The intensity channel is the attention value by default.

use std::fmt::Write as _;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::image::{write_pgm, HEIGHT, PIXELS, WIDTH};
use crate::data::mask::{Fill, MaskSpec, Region};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

pub type Point = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelPoint {
    pub i: usize,
    pub j: usize,
    pub a: f64,
}

/// What feeds the intensity channel of the clustering features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntensitySource {
    Attention,
    Pixel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub k: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
    pub restarts: usize,
    pub intensity: IntensitySource,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            k: 3,
            lambda: 1.5,
            alpha: 1.2,
            max_iter: 100,
            tol: 1e-6,
            seed: 0,
            restarts: 8,
            intensity: IntensitySource::Attention,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(key, msg))
            }
        };
        check(self.k >= 1, "cluster.k", "must be at least 1")?;
        check(self.lambda > 0.0, "cluster.lambda", "must be positive")?;
        check(self.alpha >= 0.0, "cluster.alpha", "must be non-negative")?;
        check(self.max_iter >= 1, "cluster.max_iter", "must be at least 1")?;
        check(self.tol > 0.0, "cluster.tol", "must be positive")?;
        check(self.restarts >= 1, "cluster.restarts", "must be at least 1")
    }

    pub fn scale(&self, p: &PixelPoint) -> Point {
        [self.lambda * p.i as f64, self.lambda * p.j as f64, self.alpha * p.a]
    }
}

pub fn pixel_distance(p: &PixelPoint, q: &PixelPoint, lambda: f64, alpha: f64) -> f64 {
    let di = lambda * (p.i as f64 - q.i as f64);
    let dj = lambda * (p.j as f64 - q.j as f64);
    let da = alpha * (p.a - q.a);
    (di * di + dj * dj + da * da).sqrt()
}

fn sq_dist(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest(point: &Point, centroids: &[Point]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Result of one Lloyd run (or the best of several).
#[derive(Clone, Debug, PartialEq)]
pub struct Fit {
    pub centroids: Vec<Point>,
    pub labels: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after each assignment step.
    pub history: Vec<f64>,
}

pub fn inertia(points: &[Point], centroids: &[Point], labels: &[usize]) -> f64 {
    points.iter().zip(labels).map(|(p, &l)| sq_dist(p, &centroids[l])).sum()
}

fn distinct_points(points: &[Point]) -> usize {
    let mut keys: Vec<[u64; 3]> = points.iter().map(|p| p.map(f64::to_bits)).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

/// k-means++ seeding: first centroid uniform, then proportional to squared distance.
pub fn plus_plus_init<R: Rng>(points: &[Point], k: usize, rng: &mut R) -> Vec<Point> {
    let mut centroids = vec![points[rng.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            // Every point coincides with a centroid already.
            Err(_) => break,
        };
        let c = points[next];
        centroids.push(c);
        d2.iter_mut()
            .zip(points)
            .for_each(|(d, p)| *d = d.min(sq_dist(p, &c)));
    }
    centroids
}

/// Lloyd iterations from the given centroids. An emptied cluster is moved to
/// the point currently farthest from its centroid (lowest index on ties).
pub fn lloyd(points: &[Point], mut centroids: Vec<Point>, max_iter: usize, tol: f64) -> Fit {
    let k = centroids.len();
    let mut labels = vec![0; points.len()];
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let mut dists = vec![0.0; points.len()];
        for (idx, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            labels[idx] = c;
            dists[idx] = d;
        }
        history.push(dists.iter().sum());
        if iterations >= max_iter {
            break;
        }
        iterations += 1;

        let mut sums = vec![[0.0; 3]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for d in 0..3 {
                sums[l][d] += p[d];
            }
        }
        let mut next = centroids.clone();
        for c in 0..k {
            if counts[c] > 0 {
                next[c] = sums[c].map(|s| s / counts[c] as f64);
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let (far, _) = dists
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
                next[c] = points[far];
                dists[far] = 0.0;
            }
        }
        let shift = centroids
            .iter()
            .zip(&next)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < tol {
            // Final assignment against the settled centroids.
            for (idx, p) in points.iter().enumerate() {
                labels[idx] = nearest(p, &centroids).0;
            }
            history.push(inertia(points, &centroids, &labels));
            break;
        }
    }
    let inertia = inertia(points, &centroids, &labels);
    Fit {
        centroids,
        labels,
        inertia,
        iterations,
        history,
    }
}

/// Single-point transfers that strictly lower inertia, applied until none is left.
/// Moving `x` from cluster `a` to `b` changes inertia by
/// `n_b/(n_b+1)·|x−c_b|² − n_a/(n_a−1)·|x−c_a|²`. The result is still a Lloyd
/// fixed point, and many of Lloyd's shallow local minima are escaped.
pub fn transfer_refine(points: &[Point], fit: Fit, max_sweeps: usize) -> Fit {
    let k = fit.centroids.len();
    let mut labels = fit.labels;
    let mut counts = vec![0usize; k];
    let mut sums = vec![[0.0; 3]; k];
    for (p, &l) in points.iter().zip(&labels) {
        counts[l] += 1;
        (0..3).for_each(|d| sums[l][d] += p[d]);
    }
    let mean = |s: &[f64; 3], n: usize| s.map(|v| v / n as f64);
    let mut moved_any = false;
    for _ in 0..max_sweeps {
        let mut moved = false;
        for (idx, p) in points.iter().enumerate() {
            let a = labels[idx];
            if counts[a] < 2 {
                continue;
            }
            let na = counts[a] as f64;
            let leave = na / (na - 1.0) * sq_dist(p, &mean(&sums[a], counts[a]));
            let mut best = (a, 0.0);
            for b in (0..k).filter(|&b| b != a) {
                let nb = counts[b] as f64;
                let join = if counts[b] == 0 {
                    0.0
                } else {
                    nb / (nb + 1.0) * sq_dist(p, &mean(&sums[b], counts[b]))
                };
                let delta = join - leave;
                if delta < best.1 - 1e-12 * leave.max(1.0) {
                    best = (b, delta);
                }
            }
            if best.0 != a {
                let b = best.0;
                counts[a] -= 1;
                counts[b] += 1;
                (0..3).for_each(|d| {
                    sums[a][d] -= p[d];
                    sums[b][d] += p[d];
                });
                labels[idx] = b;
                moved = true;
            }
        }
        if !moved {
            break;
        }
        moved_any = true;
    }
    if !moved_any {
        return Fit { labels, ..fit };
    }
    // Recompute from scratch so drift in the running sums never leaks out.
    let mut sums = vec![[0.0; 3]; k];
    for (p, &l) in points.iter().zip(&labels) {
        (0..3).for_each(|d| sums[l][d] += p[d]);
    }
    let centroids: Vec<Point> = (0..k)
        .map(|c| if counts[c] == 0 { fit.centroids[c] } else { mean(&sums[c], counts[c]) })
        .collect();
    let inertia = inertia(points, &centroids, &labels);
    let mut history = fit.history;
    history.push(inertia);
    Fit {
        centroids,
        labels,
        inertia,
        iterations: fit.iterations,
        history,
    }
}

/// Best of `restarts` k-means++ seeded Lloyd runs, each finished with
/// [`transfer_refine`], reduced by (inertia, restart index).
pub fn kmeans_points(points: &[Point], k: usize, max_iter: usize, tol: f64, restarts: usize, seed: u64) -> Result<Fit> {
    if k == 0 || restarts == 0 {
        return Err(Error::Contract("k and restarts must be at least 1".into()));
    }
    let distinct = distinct_points(points);
    if k > distinct {
        return Err(Error::Degenerate(format!(
            "k = {k} exceeds the {distinct} distinct scaled points"
        )));
    }
    let mut best: Option<Fit> = None;
    for r in 0..restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[r as u64]));
        let init = plus_plus_init(points, k, &mut rng);
        let fit = transfer_refine(points, lloyd(points, init, max_iter, tol), max_iter);
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// A fitted (or not yet fitted) clustering of the 48×48 grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    pub config: ClusterConfig,
    pub centroids: Vec<Point>,
    /// Row-major labels in `[0, k)`; empty while unfitted.
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub epoch_stamp: usize,
}

fn grid_points(grid: &[f64], config: &ClusterConfig) -> Result<Vec<Point>> {
    if grid.len() != PIXELS {
        return Err(Error::Shape(format!("intensity grid needs {PIXELS} values, got {}", grid.len())));
    }
    if let Some(v) = grid.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Numeric(format!("intensity {v} outside [0, 1]")));
    }
    Ok(grid
        .iter()
        .enumerate()
        .map(|(p, &a)| {
            config.scale(&PixelPoint {
                i: p / WIDTH,
                j: p % WIDTH,
                a,
            })
        })
        .collect())
}

pub fn kmeans_fit(grid: &[f64], config: &ClusterConfig) -> Result<ClusterModel> {
    config.validate()?;
    let points = grid_points(grid, config)?;
    let fit = kmeans_points(&points, config.k, config.max_iter, config.tol, config.restarts, config.seed)?;
    Ok(ClusterModel {
        config: config.clone(),
        centroids: fit.centroids,
        assignments: fit.labels,
        inertia: fit.inertia,
        epoch_stamp: 0,
    })
}

/// Element-wise mean of a batch of maps.
pub fn mean_map(maps: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(first) = maps.first() else {
        return Err(Error::Contract("need at least one attention map".into()));
    };
    let mut mean = vec![0.0; first.len()];
    for m in maps {
        if m.len() != mean.len() {
            return Err(Error::Shape("attention maps differ in size".into()));
        }
        mean.iter_mut().zip(m).for_each(|(a, v)| *a += v);
    }
    let n = maps.len() as f64;
    mean.iter_mut().for_each(|v| *v /= n);
    Ok(mean)
}

impl ClusterModel {
    pub fn unfitted(config: ClusterConfig) -> Self {
        ClusterModel {
            config,
            centroids: Vec::new(),
            assignments: Vec::new(),
            inertia: f64::INFINITY,
            epoch_stamp: 0,
        }
    }

    pub fn is_fitted(&self) -> bool {
        self.assignments.len() == PIXELS && !self.centroids.is_empty()
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Refreshes the clustering from a batch of attention maps.
    ///
    /// The per-pixel mean map is clustered warm-started from the current
    /// centroids; if that regresses inertia by more than 10% against the
    /// previous epoch, fresh restarts are run and the better fit kept.
    pub fn epoch_update(&self, maps: &[Vec<f64>], config: &ClusterConfig) -> Result<ClusterModel> {
        let mean = mean_map(maps)?;
        self.epoch_update_mean(&mean, config)
    }

    pub fn epoch_update_mean(&self, mean: &[f64], config: &ClusterConfig) -> Result<ClusterModel> {
        config.validate()?;
        let points = grid_points(mean, config)?;
        let warm = self.is_fitted() && self.centroids.len() == config.k && self.config == *config;
        let fit = if warm {
            let fit = transfer_refine(
                &points,
                lloyd(&points, self.centroids.clone(), config.max_iter, config.tol),
                config.max_iter,
            );
            if fit.inertia > self.inertia * 1.1 {
                let fresh = kmeans_points(&points, config.k, config.max_iter, config.tol, config.restarts, config.seed)?;
                if fresh.inertia < fit.inertia {
                    fresh
                } else {
                    fit
                }
            } else {
                fit
            }
        } else {
            kmeans_points(&points, config.k, config.max_iter, config.tol, config.restarts, config.seed)?
        };
        Ok(ClusterModel {
            config: config.clone(),
            centroids: fit.centroids,
            assignments: fit.labels,
            inertia: fit.inertia,
            epoch_stamp: if self.is_fitted() { self.epoch_stamp + 1 } else { 1 },
        })
    }

    /// One pixel mask per cluster; together they partition the grid.
    pub fn to_masks(&self, fill: Fill) -> Result<Vec<MaskSpec>> {
        if !self.is_fitted() {
            return Err(Error::Contract("cluster model has not been fitted".into()));
        }
        Ok((0..self.k())
            .map(|c| MaskSpec::new(Region::Pixels(self.assignments.iter().map(|&a| a == c).collect()), fill))
            .collect())
    }

    pub fn membership(&self) -> Result<Vec<Vec<bool>>> {
        if !self.is_fitted() {
            return Err(Error::Contract("cluster model has not been fitted".into()));
        }
        Ok((0..self.k())
            .map(|c| self.assignments.iter().map(|&a| a == c).collect())
            .collect())
    }

    /// Gray level `label · ⌊255 / k⌋` per pixel (0, 85, 170 for k = 3).
    pub fn label_image(&self) -> Result<Vec<u8>> {
        if !self.is_fitted() {
            return Err(Error::Contract("cluster model has not been fitted".into()));
        }
        let step = 255 / self.k().max(1);
        Ok(self.assignments.iter().map(|&a| (a * step) as u8).collect())
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        write_pgm(path, WIDTH, HEIGHT, &self.label_image()?)
    }

    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut s = String::from("# perturb cluster model v1\n");
        let _ = writeln!(s, "k = {}", c.k);
        let _ = writeln!(s, "lambda = {}", c.lambda);
        let _ = writeln!(s, "alpha = {}", c.alpha);
        let _ = writeln!(s, "max_iter = {}", c.max_iter);
        let _ = writeln!(s, "tol = {}", c.tol);
        let _ = writeln!(s, "seed = {}", c.seed);
        let _ = writeln!(s, "restarts = {}", c.restarts);
        let _ = writeln!(
            s,
            "intensity = {}",
            match c.intensity {
                IntensitySource::Attention => "attention",
                IntensitySource::Pixel => "pixel",
            }
        );
        let _ = writeln!(s, "epoch = {}", self.epoch_stamp);
        let _ = writeln!(s, "inertia = {}", self.inertia);
        for ct in &self.centroids {
            let _ = writeln!(s, "centroid = {} {} {}", ct[0], ct[1], ct[2]);
        }
        for row in self.assignments.chunks(WIDTH) {
            let digits: Vec<String> = row.iter().map(usize::to_string).collect();
            let _ = writeln!(s, "row = {}", digits.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<ClusterModel> {
        let mut config = ClusterConfig::default();
        let mut model = ClusterModel::unfitted(config.clone());
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::config(line, "expected `key = value`"))?;
            let num = |v: &str| v.parse::<f64>().map_err(|_| Error::config(key, format!("bad number `{v}`")));
            let int = |v: &str| v.parse::<usize>().map_err(|_| Error::config(key, format!("bad integer `{v}`")));
            match key {
                "k" => config.k = int(value)?,
                "lambda" => config.lambda = num(value)?,
                "alpha" => config.alpha = num(value)?,
                "max_iter" => config.max_iter = int(value)?,
                "tol" => config.tol = num(value)?,
                "seed" => config.seed = value.parse().map_err(|_| Error::config(key, "bad seed"))?,
                "restarts" => config.restarts = int(value)?,
                "intensity" => {
                    config.intensity = match value {
                        "attention" => IntensitySource::Attention,
                        "pixel" => IntensitySource::Pixel,
                        _ => return Err(Error::config(key, format!("unknown source `{value}`"))),
                    }
                }
                "epoch" => model.epoch_stamp = int(value)?,
                "inertia" => model.inertia = num(value)?,
                "centroid" => {
                    let v = value.split_whitespace().map(num).collect::<Result<Vec<_>>>()?;
                    let [a, b, c] = v[..] else {
                        return Err(Error::config(key, "centroid needs 3 coordinates"));
                    };
                    model.centroids.push([a, b, c]);
                }
                "row" => {
                    for v in value.split_whitespace() {
                        model.assignments.push(int(v)?);
                    }
                }
                _ => return Err(Error::config(key, "unknown key")),
            }
        }
        config.validate()?;
        if !model.assignments.is_empty() && model.assignments.len() != PIXELS {
            return Err(Error::config("row", format!("expected {PIXELS} assignments")));
        }
        if model.assignments.iter().any(|&a| a >= model.centroids.len()) {
            return Err(Error::config("row", "assignment refers to a missing centroid"));
        }
        model.config = config;
        Ok(model)
    }
}
