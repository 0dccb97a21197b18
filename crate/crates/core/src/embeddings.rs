//! Spectral clustering and Laplacian-eigenmap coordinates for image embeddings.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use ndarray::{Array2, ArrayView2};

use crate::cohort::{region_name, CountyRecord, REGION_NAMES};
use crate::error::{Error, Result};
use crate::geo::TileKey;
use crate::linalg::{jacobi_eigen, SymEigen};
use crate::rng::CounterRng;
use crate::stats;

pub const DEFAULT_NEIGHBORS: usize = 15;
pub const DEFAULT_CLUSTERS: usize = 10;
pub const EIGEN_TOL: f64 = 1e-10;
const KMEANS_RESTARTS: usize = 10;
const KMEANS_MAX_ITER: usize = 300;
const EMPTY_CLUSTER_RETRIES: u64 = 5;

/// Symmetric m-nearest-neighbour Gaussian affinity graph.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityGraph {
    pub weights: Array2<f64>,
    pub sigma: f64,
}

impl AffinityGraph {
    pub fn n(&self) -> usize {
        self.weights.nrows()
    }

    pub fn degrees(&self) -> Vec<f64> {
        self.weights.rows().into_iter().map(|r| r.sum()).collect()
    }
}

fn squared_distances(e: ArrayView2<f64>) -> Array2<f64> {
    let n = e.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = e.row(i).iter().zip(e.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            d[[i, j]] = s;
            d[[j, i]] = s;
        }
    }
    d
}

/// `w(i,j) = exp(−‖eᵢ−eⱼ‖²/(2σ²))` when `j` is among `i`'s `m` nearest or vice versa.
/// With `sigma = None` the bandwidth is the median nonzero neighbour distance.
pub fn build_affinity(e: ArrayView2<f64>, m: usize, sigma: Option<f64>) -> Result<AffinityGraph> {
    let n = e.nrows();
    if e.ncols() == 0 {
        return Err(Error::domain("embeddings need at least one dimension"));
    }
    if m == 0 || n < m + 1 {
        return Err(Error::domain(format!("{n} points cannot supply {m} neighbours each")));
    }
    if let Some(s) = sigma {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::Bandwidth(format!("bandwidth must be positive, got {s}")));
        }
    }
    let d2 = squared_distances(e);
    let mut neighbour = vec![false; n * n];
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        order.sort_by(|&a, &b| d2[[i, a]].total_cmp(&d2[[i, b]]).then(a.cmp(&b)));
        for &j in &order[..m] {
            neighbour[i * n + j] = true;
            neighbour[j * n + i] = true;
        }
    }
    let sigma = match sigma {
        Some(s) => s,
        None => {
            let dists: Vec<f64> = (0..n)
                .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                .filter(|&(i, j)| neighbour[i * n + j] && d2[[i, j]] > 0.0)
                .map(|(i, j)| d2[[i, j]].sqrt())
                .collect();
            stats::median(&dists)
                .ok_or_else(|| Error::Bandwidth("all neighbour distances are zero; supply sigma explicitly".into()))?
        }
    };
    let mut weights = Array2::zeros((n, n));
    let denom = 2.0 * sigma * sigma;
    for i in 0..n {
        for j in 0..n {
            if neighbour[i * n + j] {
                weights[[i, j]] = (-d2[[i, j]] / denom).exp();
            }
        }
    }
    Ok(AffinityGraph { weights, sigma })
}

/// `L = I − D^{−1/2} W D^{−1/2}`.
pub fn normalized_laplacian(g: &AffinityGraph) -> Result<Array2<f64>> {
    let deg = g.degrees();
    if let Some(i) = deg.iter().position(|&d| !(d > 0.0)) {
        return Err(Error::Bandwidth(format!("node {i} has zero degree; bandwidth too small")));
    }
    let inv: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
    let n = g.n();
    let mut l = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let v = -g.weights[[i, j]] * inv[i] * inv[j];
            l[[i, j]] = if i == j { 1.0 + v } else { v };
        }
    }
    Ok(l)
}

pub fn laplacian_eigen(g: &AffinityGraph) -> Result<SymEigen> {
    Ok(jacobi_eigen(normalized_laplacian(g)?.view(), EIGEN_TOL))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub k: usize,
}

impl ClusterAssignment {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub labels: Vec<usize>,
    pub centroids: Array2<f64>,
    pub inertia: f64,
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_once(x: ArrayView2<f64>, k: usize, rng: &mut CounterRng) -> KMeans {
    let (n, d) = x.dim();
    let rows: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.to_vec()).collect();
    // k-means++ seeding
    let mut centres: Vec<Vec<f64>> = vec![rows[rng.below(n as u64) as usize].clone()];
    let mut dist: Vec<f64> = rows.iter().map(|r| sq(r, &centres[0])).collect();
    while centres.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.uniform() * total;
            let mut idx = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.below(n as u64) as usize
        };
        centres.push(rows[pick].clone());
        let c = centres.last().unwrap();
        for (di, r) in dist.iter_mut().zip(&rows) {
            *di = di.min(sq(r, c));
        }
    }

    let mut labels = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (i, r) in rows.iter().enumerate() {
            let mut best = 0;
            let mut bd = f64::INFINITY;
            for (c, ctr) in centres.iter().enumerate() {
                let dd = sq(r, ctr);
                if dd < bd {
                    bd = dd;
                    best = c;
                }
            }
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (r, &l) in rows.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(r) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centres[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let inertia = rows.iter().zip(&labels).map(|(r, &l)| sq(r, &centres[l])).sum();
    let mut centroids = Array2::zeros((k, d));
    for (c, ctr) in centres.iter().enumerate() {
        for (j, v) in ctr.iter().enumerate() {
            centroids[[c, j]] = *v;
        }
    }
    KMeans { labels, centroids, inertia }
}

/// Seeded k-means++ with restarts, keeping the lowest inertia.
pub fn kmeans(x: ArrayView2<f64>, k: usize, seed: u64) -> Result<KMeans> {
    let n = x.nrows();
    if k == 0 || k > n {
        return Err(Error::domain(format!("cannot form {k} clusters from {n} points")));
    }
    let mut best: Option<KMeans> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = CounterRng::derive(seed, restart as u64);
        let run = kmeans_once(x, k, &mut rng);
        if best.as_ref().map_or(true, |b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}

/// Row-normalised `k` smallest Laplacian eigenvectors clustered by k-means.
pub fn spectral_cluster(g: &AffinityGraph, k: usize, seed: u64) -> Result<ClusterAssignment> {
    let n = g.n();
    if k == 0 || k > n {
        return Err(Error::domain(format!("cannot form {k} clusters from {n} points")));
    }
    let eig = laplacian_eigen(g)?;
    let mut u = eig.vectors.slice(ndarray::s![.., ..k]).to_owned();
    for mut row in u.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
    for attempt in 0..EMPTY_CLUSTER_RETRIES {
        let km = kmeans(u.view(), k, seed.wrapping_add(attempt))?;
        let a = ClusterAssignment { labels: km.labels, k };
        if a.sizes().iter().all(|&s| s > 0) {
            return Ok(a);
        }
    }
    Err(Error::domain(format!("k-means left an empty cluster after {EMPTY_CLUSTER_RETRIES} seeds")))
}

/// Laplacian eigenmap: eigenvectors 2 and 3, centred, unit variance, with the
/// largest-magnitude entry of each axis made positive.
pub fn spectral_embed_2d(g: &AffinityGraph) -> Result<Array2<f64>> {
    let n = g.n();
    if n < 3 {
        return Err(Error::domain("a 2-D embedding needs at least 3 points"));
    }
    let eig = laplacian_eigen(g)?;
    let mut out = Array2::zeros((n, 2));
    for axis in 0..2 {
        let col = eig.vectors.column(axis + 1);
        let mean = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        if !(var > 0.0) {
            return Err(Error::domain("degenerate spectral axis with zero variance"));
        }
        let sd = var.sqrt();
        let mut pivot = 0;
        for i in 1..n {
            if (col[i] - mean).abs() > (col[pivot] - mean).abs() {
                pivot = i;
            }
        }
        let sign = if col[pivot] - mean < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            out[[i, axis]] = sign * (col[i] - mean) / sd;
        }
    }
    Ok(out)
}

/// Chance-corrected agreement of two labelings.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::domain("labelings must be non-empty and of equal length"));
    }
    let n = a.len() as f64;
    let mut table: HashMap<(usize, usize), f64> = HashMap::new();
    let mut ra: HashMap<usize, f64> = HashMap::new();
    let mut rb: HashMap<usize, f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1.0;
        *ra.entry(x).or_default() += 1.0;
        *rb.entry(y).or_default() += 1.0;
    }
    let c2 = |v: f64| v * (v - 1.0) / 2.0;
    let index: f64 = table.values().map(|&v| c2(v)).sum();
    let sa: f64 = ra.values().map(|&v| c2(v)).sum();
    let sb: f64 = rb.values().map(|&v| c2(v)).sum();
    let expected = sa * sb / c2(n);
    let max = 0.5 * (sa + sb);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterStats {
    pub cluster: usize,
    pub images: usize,
    pub mortality: f64,
    pub income: Option<f64>,
    pub any_college: Option<f64>,
    pub mean_age: f64,
    pub prop_hispanic: f64,
    pub population: f64,
    /// Image counts per census region code 1..=8.
    pub regions: [usize; 8],
}

/// Per-cluster image-weighted means of county values.
pub fn summarize_clusters(
    assignment: &ClusterAssignment,
    keys: &[TileKey],
    counties: &[CountyRecord],
) -> Result<Vec<ClusterStats>> {
    if keys.len() != assignment.labels.len() {
        return Err(Error::domain(format!(
            "{} labels for {} images",
            assignment.labels.len(),
            keys.len()
        )));
    }
    let by_fips: HashMap<&str, &CountyRecord> = counties.iter().map(|c| (c.fips.as_str(), c)).collect();
    #[derive(Default)]
    struct Acc {
        n: usize,
        rate: f64,
        income: (f64, usize),
        college: (f64, usize),
        age: f64,
        hisp: f64,
        pop: f64,
        regions: [usize; 8],
    }
    let mut acc: Vec<Acc> = (0..assignment.k).map(|_| Acc::default()).collect();
    for (key, &l) in keys.iter().zip(&assignment.labels) {
        let c = by_fips
            .get(key.fips.as_str())
            .ok_or_else(|| Error::domain(format!("image {key} refers to unknown county {}", key.fips)))?;
        let a = &mut acc[l];
        a.n += 1;
        a.rate += c.crude_rate();
        if let Some(v) = c.income {
            a.income.0 += v;
            a.income.1 += 1;
        }
        if let Some(v) = c.any_college {
            a.college.0 += v;
            a.college.1 += 1;
        }
        a.age += c.mean_age;
        a.hisp += c.prop_hispanic;
        a.pop += c.population as f64;
        if (1..=8).contains(&c.region) {
            a.regions[c.region as usize - 1] += 1;
        }
    }
    Ok(acc
        .into_iter()
        .enumerate()
        .map(|(cluster, a)| {
            let n = a.n.max(1) as f64;
            let opt = |(s, k): (f64, usize)| (k > 0).then(|| s / k as f64);
            ClusterStats {
                cluster,
                images: a.n,
                mortality: a.rate / n,
                income: opt(a.income),
                any_college: opt(a.college),
                mean_age: a.age / n,
                prop_hispanic: a.hisp / n,
                population: a.pop / n,
                regions: a.regions,
            }
        })
        .collect())
}

fn round_thousands(v: f64) -> f64 {
    (v / 1000.0).round() * 1000.0
}

pub fn write_assignment<W: Write>(w: W, keys: &[TileKey], a: &ClusterAssignment) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["fips", "school", "row", "col", "cluster"])?;
    for (k, l) in keys.iter().zip(&a.labels) {
        out.write_record([k.fips.clone(), k.school.to_string(), k.row.to_string(), k.col.to_string(), l.to_string()])?;
    }
    out.flush().map_err(|e| Error::io("<cluster assignment>", e))
}

pub fn write_coordinates<W: Write>(w: W, keys: &[TileKey], xy: &Array2<f64>) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["fips", "school", "row", "col", "x", "y"])?;
    for (k, row) in keys.iter().zip(xy.rows()) {
        out.write_record([
            k.fips.clone(),
            k.school.to_string(),
            k.row.to_string(),
            k.col.to_string(),
            format!("{:.10}", row[0]),
            format!("{:.10}", row[1]),
        ])?;
    }
    out.flush().map_err(|e| Error::io("<coordinates>", e))
}

/// Summary table; income and population rounded to thousands.
pub fn write_summary<W: Write>(w: W, stats: &[ClusterStats]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec![
        "cluster".to_string(),
        "images".into(),
        "mortality".into(),
        "income".into(),
        "any_college".into(),
        "mean_age".into(),
        "prop_hispanic".into(),
        "population".into(),
    ];
    header.extend(REGION_NAMES.iter().map(|r| format!("n_{}", r.to_lowercase().replace(' ', "_"))));
    out.write_record(&header)?;
    let opt = |v: Option<f64>, f: fn(f64) -> String| v.map(f).unwrap_or_default();
    for s in stats {
        let mut rec = vec![
            s.cluster.to_string(),
            s.images.to_string(),
            format!("{:.4}", s.mortality),
            opt(s.income.map(round_thousands), |v| format!("{v:.0}")),
            opt(s.any_college, |v| format!("{v:.4}")),
            format!("{:.2}", s.mean_age),
            format!("{:.4}", s.prop_hispanic),
            format!("{:.0}", round_thousands(s.population)),
        ];
        rec.extend(s.regions.iter().map(|c| c.to_string()));
        out.write_record(&rec)?;
    }
    out.flush().map_err(|e| Error::io("<cluster summary>", e))
}

/// Dominant region name of a cluster, for report text.
pub fn dominant_region(s: &ClusterStats) -> &'static str {
    let (idx, _) = s.regions.iter().enumerate().max_by_key(|(i, c)| (**c, std::cmp::Reverse(*i))).unwrap();
    region_name(idx as u8 + 1)
}

/// Group rows of an embedding by county, for callers that subsample.
pub fn rows_by_county(keys: &[TileKey]) -> BTreeMap<String, Vec<usize>> {
    let mut m: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        m.entry(k.fips.clone()).or_default().push(i);
    }
    m
}
