//! Procedural "satellite" corpus with a known built-environment → mortality law.
//!
//! Each county has latent intensities for sidewalks (thin bright lines), fields
//! (green blobs) and bare roads (thick dark lines). Its rate per 1,000 is
//! `exp(b0 + b1·sidewalk + b2·field + b3·road + ε)` and deaths are Poisson.
//! Tiles are rasterised with integer Bresenham lines and axis-aligned shapes on
//! an 8-bit canvas, so the corpus depends only on the parameters.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Poisson};

use crate::cohort::CountyRecord;
use crate::error::{Error, Result};
use crate::geo::{TileKey, GRID_SIDE};
use crate::image::tile::ImageTile;
use crate::rng::CounterRng;
use crate::stats;

pub const SCHOOLS_PER_COUNTY: u8 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub counties: usize,
    pub schools: u8,
    pub b0: f64,
    /// Sidewalk effect, expected negative.
    pub b1: f64,
    /// Field effect, expected negative.
    pub b2: f64,
    /// Bare-road effect, expected positive.
    pub b3: f64,
    /// Standard deviation of county-level log-rate noise.
    pub noise_sd: f64,
    pub tile_size: usize,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            counties: 60,
            schools: SCHOOLS_PER_COUNTY,
            b0: 9f64.ln(),
            b1: -0.6,
            b2: -0.4,
            b3: 0.5,
            noise_sd: 0.05,
            tile_size: 64,
            seed: 2024,
        }
    }
}

impl SynthParams {
    /// Same corpus shape with every feature effect and the noise removed.
    pub fn null() -> Self {
        Self { b1: 0.0, b2: 0.0, b3: 0.0, noise_sd: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.counties < 13 {
            return Err(Error::domain(format!("need at least 13 counties, got {}", self.counties)));
        }
        if self.schools == 0 || self.schools > 4 {
            return Err(Error::domain("schools per county must be 1..=4"));
        }
        if self.tile_size < 16 {
            return Err(Error::domain("tile size must be at least 16 pixels"));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::domain("noise sd must be finite and ≥ 0"));
        }
        for (name, v) in [("b0", self.b0), ("b1", self.b1), ("b2", self.b2), ("b3", self.b3)] {
            if !v.is_finite() {
                return Err(Error::domain(format!("{name} must be finite")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Latent {
    pub sidewalk: f64,
    pub field: f64,
    pub road: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCounty {
    pub record: CountyRecord,
    pub latent: Latent,
    /// Rate per 1,000 from the law, before Poisson sampling.
    pub law_rate: f64,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub params: SynthParams,
    pub counties: Vec<SynthCounty>,
    pub tiles: Vec<ImageTile>,
}

impl SynthCorpus {
    pub fn records(&self) -> Vec<CountyRecord> {
        self.counties.iter().map(|c| c.record.clone()).collect()
    }

    /// Crude rate per 1,000 keyed by FIPS.
    pub fn crude_rates(&self) -> BTreeMap<String, f64> {
        self.counties.iter().map(|c| (c.record.fips.clone(), c.record.crude_rate())).collect()
    }
}

pub fn synth_fips(i: usize) -> String {
    format!("{:05}", 1001 + 2 * i)
}

fn county_header(p: &SynthParams, i: usize) -> Result<SynthCounty> {
    let mut rng = CounterRng::derive(p.seed, i as u64);
    let latent = Latent { sidewalk: rng.uniform(), field: rng.uniform(), road: rng.uniform() };
    let eps = if p.noise_sd > 0.0 { p.noise_sd * rng.normal() } else { 0.0 };
    let law_rate = (p.b0 + p.b1 * latent.sidewalk + p.b2 * latent.field + p.b3 * latent.road + eps).exp();
    if !(law_rate > 0.0 && law_rate.is_finite()) || law_rate >= 1000.0 {
        return Err(Error::domain(format!("rate law gives {law_rate} per 1,000 for county {i}")));
    }
    // log-uniform population between 1e5 and 3e6
    let population = (1e5 * 30f64.powf(rng.uniform())).round() as u64;
    let mean = population as f64 * law_rate / 1000.0;
    let deaths = Poisson::new(mean)
        .map_err(|e| Error::domain(format!("poisson mean {mean}: {e}")))?
        .sample(&mut rng) as u64;

    let white = rng.uniform_range(0.5, 0.92);
    let black = rng.uniform_range(0.0, 0.9 - white + 0.05).min(1.0 - white);
    let asian = rng.uniform_range(0.0, (1.0 - white - black).max(0.0));
    let record = CountyRecord {
        fips: synth_fips(i),
        name: format!("Synthetic County {i}"),
        population,
        deaths,
        region: (i % 8) as u8 + 1,
        prop_white: white,
        prop_black: black,
        prop_asian: asian,
        prop_hispanic: rng.uniform_range(0.02, 0.4),
        prop_male: rng.uniform_range(0.47, 0.52),
        mean_age: rng.uniform_range(34.0, 46.0),
        any_college: Some(rng.uniform_range(0.35, 0.75)),
        income: Some(rng.uniform_range(35_000.0, 95_000.0).round()),
    };
    Ok(SynthCounty { record, latent, law_rate })
}

/// Pure function of `params`: identical parameters give identical corpora.
pub fn generate_corpus(params: &SynthParams) -> Result<SynthCorpus> {
    params.validate()?;
    let mut counties = Vec::with_capacity(params.counties);
    let mut tiles = Vec::with_capacity(params.counties * params.schools as usize * GRID_SIDE * GRID_SIDE);
    for i in 0..params.counties {
        let c = county_header(params, i)?;
        for school in 0..params.schools {
            for row in 0..GRID_SIDE as u8 {
                for col in 0..GRID_SIDE as u8 {
                    let key = TileKey { fips: c.record.fips.clone(), school, row, col };
                    let stream = ((i as u64) << 24) | ((school as u64) << 16) | ((row as u64) << 8) | col as u64;
                    let mut rng = CounterRng::derive(params.seed ^ 0x7117_E5, stream);
                    tiles.push(render_tile(&c.latent, params.tile_size, &mut rng, key)?);
                }
            }
        }
        counties.push(c);
    }
    Ok(SynthCorpus { params: params.clone(), counties, tiles })
}

struct Canvas {
    n: i64,
    rgb: Vec<u8>,
}

impl Canvas {
    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && x < self.n && y < self.n {
            let i = 3 * (y * self.n + x) as usize;
            self.rgb[i..i + 3].copy_from_slice(&c);
        }
    }

    fn line(&mut self, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), width: i64, c: [u8; 3]) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            for oy in 0..width {
                for ox in 0..width {
                    self.put(x0 + ox, y0 + oy, c);
                }
            }
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    fn rect(&mut self, x: i64, y: i64, w: i64, h: i64, c: [u8; 3]) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.put(xx, yy, c);
            }
        }
    }
}

/// Count with per-tile jitter: `intensity·max` rounded stochastically, ±1.
fn jittered_count(intensity: f64, max: f64, rng: &mut CounterRng) -> i64 {
    let expected = intensity * max;
    let base = expected.floor() as i64 + rng.bernoulli(expected.fract()) as i64;
    (base + rng.int_range(-1, 1)).max(0)
}

fn render_tile(latent: &Latent, n: usize, rng: &mut CounterRng, key: TileKey) -> Result<ImageTile> {
    let ni = n as i64;
    let mut cv = Canvas { n: ni, rgb: vec![0; 3 * n * n] };
    let tone = rng.int_range(-12, 12);
    let ground = [(120 + tone) as u8, (104 + tone) as u8, (82 + tone) as u8];
    for y in 0..ni {
        for x in 0..ni {
            let g = rng.int_range(-10, 10);
            cv.put(x, y, [(ground[0] as i64 + g) as u8, (ground[1] as i64 + g) as u8, (ground[2] as i64 + g) as u8]);
        }
    }
    let scale = ni / 16;
    for _ in 0..jittered_count(latent.field, 6.0, rng) {
        let w = rng.int_range(3 * scale, 6 * scale);
        let h = rng.int_range(3 * scale, 6 * scale);
        let x = rng.int_range(0, ni - w);
        let y = rng.int_range(0, ni - h);
        let shade = rng.int_range(-15, 15);
        cv.rect(x, y, w, h, [(40 + shade) as u8, (150 + shade) as u8, (50 + shade) as u8]);
    }
    let endpoint = |rng: &mut CounterRng| (rng.int_range(0, ni - 1), rng.int_range(0, ni - 1));
    for _ in 0..jittered_count(latent.road, 5.0, rng) {
        let (a, b) = (endpoint(rng), endpoint(rng));
        let shade = rng.int_range(-8, 8);
        cv.line(a, b, 3, [(55 + shade) as u8, (55 + shade) as u8, (60 + shade) as u8]);
    }
    for _ in 0..jittered_count(latent.sidewalk, 14.0, rng) {
        let (a, b) = (endpoint(rng), endpoint(rng));
        let shade = rng.int_range(-10, 10);
        cv.line(a, b, 1, [(235 + shade) as u8, (235 + shade) as u8, (228 + shade) as u8]);
    }
    ImageTile::from_rgb8(n, n, &cv.rgb, key)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusReport {
    pub counties: usize,
    pub tiles: usize,
    pub rate_min: f64,
    pub rate_max: f64,
    pub rate_mean: f64,
    pub rate_var: f64,
    /// Spearman correlation of each latent with the law rate: sidewalk, field, road.
    pub latent_spearman: [f64; 3],
    /// Share of counties whose crude rate lies within 3 Poisson standard errors of the law rate.
    pub within_3se: f64,
}

pub fn corpus_report(c: &SynthCorpus) -> Result<CorpusReport> {
    if c.counties.is_empty() {
        return Err(Error::domain("empty corpus"));
    }
    let rates: Vec<f64> = c.counties.iter().map(|k| k.law_rate).collect();
    let mean = stats::mean(&rates);
    let var = rates.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / rates.len() as f64;
    let corr = |f: fn(&Latent) -> f64| {
        let xs: Vec<f64> = c.counties.iter().map(|k| f(&k.latent)).collect();
        stats::spearman(&xs, &rates).unwrap_or(0.0)
    };
    let within = c
        .counties
        .iter()
        .filter(|k| {
            let pop = k.record.population as f64;
            let se = (pop * k.law_rate / 1000.0).sqrt() / pop * 1000.0;
            (k.record.crude_rate() - k.law_rate).abs() <= 3.0 * se
        })
        .count();
    Ok(CorpusReport {
        counties: c.counties.len(),
        tiles: c.tiles.len(),
        rate_min: rates.iter().copied().fold(f64::INFINITY, f64::min),
        rate_max: rates.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        rate_mean: mean,
        rate_var: var,
        latent_spearman: [corr(|l| l.sidewalk), corr(|l| l.field), corr(|l| l.road)],
        within_3se: within as f64 / c.counties.len() as f64,
    })
}
