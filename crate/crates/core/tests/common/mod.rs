//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use geomort::geo::{GeoPoint, EARTH_RADIUS_M};
use geomort::image::net::{ConvRegressor, INPUT_CENTRE};
use ndarray::{Array1, Array2};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{FromPrimitive, One, Signed, ToPrimitive, Zero};

/// Great-circle distance on the Web Mercator sphere.
pub fn haversine(a: GeoPoint, b: GeoPoint) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dp = p2 - p1;
    let dl = (b.lon - a.lon).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().asin()
}

/// Neumaier compensated sum.
pub fn neumaier(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

fn naive_conv_same(input: &[Vec<Vec<f64>>], w: &Array2<f64>, b: &Array1<f64>) -> Vec<Vec<Vec<f64>>> {
    let cin = input.len();
    let h = input[0].len();
    let wd = input[0][0].len();
    (0..w.nrows())
        .map(|co| {
            (0..h)
                .map(|y| {
                    (0..wd)
                        .map(|x| {
                            let mut terms = vec![b[co]];
                            for ci in 0..cin {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let yy = y as isize + ky as isize - 1;
                                        let xx = x as isize + kx as isize - 1;
                                        if yy < 0 || xx < 0 || yy >= h as isize || xx >= wd as isize {
                                            continue;
                                        }
                                        terms.push(w[[co, ci * 9 + ky * 3 + kx]] * input[ci][yy as usize][xx as usize]);
                                    }
                                }
                            }
                            neumaier(terms).max(0.0)
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn naive_pool(x: &[Vec<Vec<f64>>]) -> Vec<Vec<Vec<f64>>> {
    x.iter()
        .map(|plane| {
            (0..plane.len() / 2)
                .map(|y| {
                    (0..plane[0].len() / 2)
                        .map(|xx| {
                            let v = [
                                plane[2 * y][2 * xx],
                                plane[2 * y][2 * xx + 1],
                                plane[2 * y + 1][2 * xx],
                                plane[2 * y + 1][2 * xx + 1],
                            ];
                            v.into_iter().fold(f64::NEG_INFINITY, f64::max)
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Nested-loop forward pass returning `(rate, embedding)`.
pub fn naive_forward(m: &ConvRegressor<f64>, input: &[f64]) -> (f64, Vec<f64>) {
    let s = m.arch.input;
    let img: Vec<Vec<Vec<f64>>> = (0..3)
        .map(|c| (0..s).map(|y| (0..s).map(|x| input[(c * s + y) * s + x] - INPUT_CENTRE).collect()).collect())
        .collect();
    let p = &m.params;
    let a1 = naive_pool(&naive_conv_same(&img, &p.conv1_w, &p.conv1_b));
    let a2 = naive_pool(&naive_conv_same(&a1, &p.conv2_w, &p.conv2_b));
    let a3 = naive_conv_same(&a2, &p.conv3_w, &p.conv3_b);
    let gap: Vec<f64> = a3
        .iter()
        .map(|plane| neumaier(plane.iter().flatten().copied()) / (plane.len() * plane[0].len()) as f64)
        .collect();
    let hidden: Vec<f64> = (0..p.fc1_w.nrows())
        .map(|i| neumaier(std::iter::once(p.fc1_b[i]).chain(gap.iter().enumerate().map(|(j, g)| p.fc1_w[[i, j]] * g))).max(0.0))
        .collect();
    let logit = neumaier(std::iter::once(p.fc2_b[0]).chain(hidden.iter().enumerate().map(|(j, h)| p.fc2_w[[0, j]] * h)));
    (logit.exp(), hidden)
}

/// Exact Shapley values of a set function over `m` players given as a closure on bitmasks.
pub fn brute_shapley(m: usize, v: impl Fn(u32) -> f64) -> Vec<f64> {
    let fact = |n: usize| (1..=n).fold(1.0f64, |a, k| a * k as f64);
    let total = fact(m);
    (0..m)
        .map(|i| {
            let mut phi = 0.0;
            for s in 0u32..(1 << m) {
                if s >> i & 1 == 1 {
                    continue;
                }
                let k = s.count_ones() as usize;
                let w = fact(k) * fact(m - k - 1) / total;
                phi += w * (v(s | 1 << i) - v(s));
            }
            phi
        })
        .collect()
}

fn rat(x: f64) -> BigRational {
    BigRational::from_f64(x).expect("finite")
}

/// Weighted normal equations `(XᵀWX)β = XᵀWy` solved exactly over the rationals.
pub fn exact_wls(x: &Array2<f64>, w: &Array1<f64>, y: &Array1<f64>) -> Vec<f64> {
    let (n, p) = x.dim();
    let xr: Vec<Vec<BigRational>> = (0..n).map(|i| (0..p).map(|j| rat(x[[i, j]])).collect()).collect();
    let wr: Vec<BigRational> = w.iter().map(|v| rat(*v)).collect();
    let yr: Vec<BigRational> = y.iter().map(|v| rat(*v)).collect();
    let mut a: Vec<Vec<BigRational>> = vec![vec![BigRational::zero(); p + 1]; p];
    for i in 0..n {
        for r in 0..p {
            let wx = &wr[i] * &xr[i][r];
            for c in 0..p {
                a[r][c] += &wx * &xr[i][c];
            }
            a[r][p] += &wx * &yr[i];
        }
    }
    for col in 0..p {
        let piv = (col..p).find(|&r| !a[r][col].is_zero()).expect("nonsingular");
        a.swap(col, piv);
        let inv = BigRational::one() / a[col][col].clone();
        for c in col..=p {
            a[col][c] = &a[col][c] * &inv;
        }
        for r in 0..p {
            if r != col && !a[r][col].is_zero() {
                let f = a[r][col].clone();
                for c in col..=p {
                    let t = &f * &a[col][c];
                    a[r][c] -= t;
                }
            }
        }
    }
    a.iter().map(|row| to_f64(&row[p])).collect()
}

fn to_f64(r: &BigRational) -> f64 {
    // scale to keep the integer division inside f64 range
    let neg = r.is_negative();
    let r = r.abs();
    let (num, den) = (r.numer().clone(), r.denom().clone());
    let shift = num.bits() as i64 - den.bits() as i64 - 60;
    let q = if shift > 0 { &num / (&den << shift as usize) } else { (&num << (-shift) as usize) / &den };
    let v = q.to_f64().unwrap() * 2f64.powi(shift as i32);
    if neg {
        -v
    } else {
        v
    }
}

pub fn big(v: i64) -> BigInt {
    BigInt::from(v)
}

/// A valid county with neutral covariates.
pub fn county(fips: &str, population: u64, deaths: u64) -> geomort::cohort::CountyRecord {
    geomort::cohort::CountyRecord {
        fips: fips.to_string(),
        name: format!("County {fips}"),
        population,
        deaths,
        region: 1,
        prop_white: 0.6,
        prop_black: 0.2,
        prop_asian: 0.05,
        prop_hispanic: 0.15,
        prop_male: 0.49,
        mean_age: 38.0,
        any_college: Some(0.5),
        income: Some(55_000.0),
    }
}

pub fn rng(seed: u64) -> rand::rngs::StdRng {
    rand::SeedableRng::seed_from_u64(seed)
}

/// Run the CLI in-process with `geomort` prepended.
pub fn cli(args: &[&str]) -> i32 {
    let argv = std::iter::once("geomort".to_string()).chain(args.iter().map(|s| s.to_string()));
    geomort::pipeline::run_command(argv)
}

/// Small synthetic configuration that exercises every command in seconds.
pub const SMALL_CONFIG: &str = "\
synth_counties = 24
synth_schools = 1
synth_tile_size = 32
input_size = 32
epochs = 1
k = 3
neighbors = 5
cluster_max_images = 200
shap_grid = 3
explain_tiles = 1
";

pub const CHAIN: [&str; 8] = ["synth", "split", "train", "eval", "embed", "cluster", "explain", "report"];

/// `path → sha256` from every `outputs_*.csv` under `dir`.
pub fn output_hashes(dir: &std::path::Path) -> std::collections::BTreeMap<String, String> {
    let mut out = std::collections::BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        let name = p.file_name().unwrap().to_string_lossy().to_string();
        if !(name.starts_with("outputs_") && name.ends_with(".csv")) {
            continue;
        }
        let mut rdr = csv::Reader::from_path(&p).unwrap();
        for rec in rdr.records() {
            let rec = rec.unwrap();
            out.insert(rec[0].to_string(), rec[1].to_string());
        }
    }
    out
}

pub fn random_system(seed: u64) -> geomort::covariates::DesignMatrix {
    use rand::RngExt;
    let mut r = rng(seed);
    let p = r.random_range(1..=10usize);
    let n = r.random_range(p + 2..=200usize);
    let mut x = Array2::<f64>::zeros((n, p));
    for i in 0..n {
        x[[i, 0]] = 1.0;
        for j in 1..p {
            x[[i, j]] = r.random_range(-3.0..3.0) * (j as f64);
        }
    }
    let beta: Vec<f64> = (0..p).map(|_| r.random_range(-2.0..2.0)).collect();
    let w: Array1<f64> = (0..n).map(|_| r.random_range(0.1..10.0)).collect();
    let y: Array1<f64> = (0..n)
        .map(|i| (0..p).map(|j| x[[i, j]] * beta[j]).sum::<f64>() + r.random_range(-1.0..1.0))
        .collect();
    geomort::covariates::DesignMatrix::new((0..p).map(|j| format!("x{j}")).collect(), x, w, y).unwrap()
}

pub const MICRO: geomort::image::Arch = geomort::image::Arch { input: 8, c1: 2, c2: 3, c3: 2, embed: 4 };

pub fn random_input(seed: u64, len: usize) -> Vec<f64> {
    use rand::RngExt;
    let mut r = rng(seed);
    (0..len).map(|_| r.random::<f64>()).collect()
}

/// Micro network with He weights plus small uniform jitter on every parameter.
pub fn randomized(seed: u64) -> ConvRegressor<f64> {
    use rand::RngExt;
    let mut m = ConvRegressor::<f64>::init(MICRO, seed, 8.0).unwrap();
    let mut r = rng(seed ^ 0xA5A5);
    for t in m.params.tensors_mut() {
        for v in t.iter_mut() {
            *v += r.random_range(-0.1..0.1);
        }
    }
    m
}

fn batch_loss(m: &ConvRegressor<f64>, batch: &[(Vec<f64>, f64)]) -> f64 {
    let b: Vec<(&[f64], f64)> = batch.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
    geomort::image::backward(m, &b).unwrap().0
}

/// Largest relative gap between backprop and central differences (h = 1e-4)
/// over every parameter; gradients below 1e-6 in magnitude are compared absolutely.
pub fn worst_gradient_error(seed: u64) -> f64 {
    let h = 1e-4;
    let m = randomized(seed);
    let batch: Vec<(Vec<f64>, f64)> =
        (0..2).map(|i| (random_input(seed * 10 + i, m.input_len()), 4.0 + i as f64)).collect();
    let b: Vec<(&[f64], f64)> = batch.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
    let (_, grads) = geomort::image::backward(&m, &b).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let mut worst = 0.0f64;
    for (ti, g) in analytic.iter().enumerate() {
        for (j, &gj) in g.iter().enumerate() {
            let mut plus = m.clone();
            plus.params.tensors_mut()[ti][j] += h;
            let mut minus = m.clone();
            minus.params.tensors_mut()[ti][j] -= h;
            let fd = (batch_loss(&plus, &batch) - batch_loss(&minus, &batch)) / (2.0 * h);
            worst = worst.max((gj - fd).abs() / gj.abs().max(fd.abs()).max(1e-6));
        }
    }
    worst
}
