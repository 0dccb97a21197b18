//! Flat `key = value` run configuration with `#` comments.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geo::{DEFAULT_SIZE_PX, DEFAULT_ZOOM};
use crate::image::net::Arch;
use crate::image::train::TrainConfig;
use crate::synth::SynthParams;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub counties_csv: Option<PathBuf>,
    pub schools_csv: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,

    pub top_n: usize,
    pub bins: usize,
    pub per_bin: usize,

    pub zoom: u32,
    pub size: u32,
    pub max_attempts: u32,

    pub arch: Arch,
    pub train: TrainConfig,

    pub k: usize,
    pub neighbors: usize,
    /// `None` selects the median-distance bandwidth.
    pub sigma: Option<f64>,
    pub cluster_max_images: usize,
    pub ttest_weights: TTestWeights,

    pub shap_grid: usize,
    pub shap_samples: usize,
    pub explain_tiles: usize,
    pub filter_index: usize,

    pub synth: SynthParams,
}

/// Per-image weights used by the cluster t-tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TTestWeights {
    /// The image's county population.
    Population,
    /// Every image counts once.
    Images,
}

impl FromStr for TTestWeights {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "population" => Ok(Self::Population),
            "images" => Ok(Self::Images),
            other => Err(format!("expected population or images, found {other:?}")),
        }
    }
}

impl Display for TTestWeights {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Population => "population",
            Self::Images => "images",
        })
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let seed = 17;
        Self {
            counties_csv: None,
            schools_csv: None,
            cache_dir: None,
            out_dir: PathBuf::from("out"),
            seed,
            top_n: 1000,
            bins: 13,
            per_bin: 40,
            zoom: DEFAULT_ZOOM,
            size: DEFAULT_SIZE_PX,
            max_attempts: 3,
            arch: Arch::default(),
            train: TrainConfig { seed, ..TrainConfig::default() },
            k: 10,
            neighbors: 15,
            sigma: None,
            cluster_max_images: 400,
            ttest_weights: TTestWeights::Population,
            shap_grid: 8,
            shap_samples: 2048,
            explain_tiles: 4,
            filter_index: 0,
            synth: SynthParams::default(),
        }
    }
}

fn set<T: FromStr>(slot: &mut T, key: &str, raw: &str, errs: &mut Vec<String>)
where
    T::Err: Display,
{
    match raw.parse::<T>() {
        Ok(v) => *slot = v,
        Err(e) => errs.push(format!("{key}: cannot parse {raw:?} ({e})")),
    }
}

fn non_empty(raw: &str) -> Option<PathBuf> {
    (!raw.is_empty()).then(|| PathBuf::from(raw))
}

fn set_bool(slot: &mut bool, key: &str, raw: &str, errs: &mut Vec<String>) {
    match raw.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => *slot = true,
        "false" | "no" | "off" | "0" => *slot = false,
        _ => errs.push(format!("{key}: expected true or false, found {raw:?}")),
    }
}

/// Parse `key = value` lines. Blank lines and `#` comments are ignored.
pub fn parse_pairs(text: &str) -> std::result::Result<BTreeMap<String, String>, Vec<String>> {
    let mut map = BTreeMap::new();
    let mut errs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => {
                if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                    errs.push(format!("line {}: key {:?} given twice", i + 1, k.trim()));
                }
            }
            _ => errs.push(format!("line {}: expected `key = value`, found {line:?}", i + 1)),
        }
    }
    if errs.is_empty() {
        Ok(map)
    } else {
        Err(errs)
    }
}

impl RunConfig {
    /// Defaults overridden by `pairs`; every problem is collected.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> std::result::Result<Self, Vec<String>> {
        let mut c = RunConfig::default();
        let mut errs = Vec::new();
        let mut train_seed: Option<u64> = None;
        for (k, v) in pairs {
            let e = &mut errs;
            match k.as_str() {
                "counties_csv" => c.counties_csv = non_empty(v),
                "schools_csv" => c.schools_csv = non_empty(v),
                "cache_dir" => c.cache_dir = non_empty(v),
                "out_dir" => c.out_dir = PathBuf::from(v),
                "seed" => set(&mut c.seed, k, v, e),
                "top_n" => set(&mut c.top_n, k, v, e),
                "bins" => set(&mut c.bins, k, v, e),
                "per_bin" => set(&mut c.per_bin, k, v, e),
                "zoom" => set(&mut c.zoom, k, v, e),
                "size" => set(&mut c.size, k, v, e),
                "max_attempts" => set(&mut c.max_attempts, k, v, e),
                "input_size" => set(&mut c.arch.input, k, v, e),
                "channels1" => set(&mut c.arch.c1, k, v, e),
                "channels2" => set(&mut c.arch.c2, k, v, e),
                "channels3" => set(&mut c.arch.c3, k, v, e),
                "embed_dim" => set(&mut c.arch.embed, k, v, e),
                "learning_rate" => set(&mut c.train.learning_rate, k, v, e),
                "momentum" => set(&mut c.train.momentum, k, v, e),
                "epochs" => set(&mut c.train.epochs, k, v, e),
                "batch_size" => set(&mut c.train.batch_size, k, v, e),
                "augment" => set_bool(&mut c.train.augment, k, v, e),
                "train_seed" => {
                    let mut s = 0u64;
                    let before = e.len();
                    set(&mut s, k, v, e);
                    if e.len() == before {
                        train_seed = Some(s);
                    }
                }
                "k" => set(&mut c.k, k, v, e),
                "neighbors" => set(&mut c.neighbors, k, v, e),
                "sigma" => {
                    if v.eq_ignore_ascii_case("auto") {
                        c.sigma = None;
                    } else {
                        let mut s = 0.0;
                        let before = e.len();
                        set(&mut s, k, v, e);
                        if e.len() == before {
                            c.sigma = Some(s);
                        }
                    }
                }
                "cluster_max_images" => set(&mut c.cluster_max_images, k, v, e),
                "ttest_weights" => set(&mut c.ttest_weights, k, v, e),
                "shap_grid" => set(&mut c.shap_grid, k, v, e),
                "shap_samples" => set(&mut c.shap_samples, k, v, e),
                "explain_tiles" => set(&mut c.explain_tiles, k, v, e),
                "filter_index" => set(&mut c.filter_index, k, v, e),
                "synth_counties" => set(&mut c.synth.counties, k, v, e),
                "synth_schools" => set(&mut c.synth.schools, k, v, e),
                "synth_b0" => set(&mut c.synth.b0, k, v, e),
                "synth_b1" => set(&mut c.synth.b1, k, v, e),
                "synth_b2" => set(&mut c.synth.b2, k, v, e),
                "synth_b3" => set(&mut c.synth.b3, k, v, e),
                "synth_noise_sd" => set(&mut c.synth.noise_sd, k, v, e),
                "synth_tile_size" => set(&mut c.synth.tile_size, k, v, e),
                "synth_seed" => set(&mut c.synth.seed, k, v, e),
                _ => e.push(format!("unknown key {k:?}")),
            }
        }
        c.train.seed = train_seed.unwrap_or(c.seed);
        c.check(&mut errs);
        if errs.is_empty() {
            Ok(c)
        } else {
            Err(errs)
        }
    }

    fn check(&self, errs: &mut Vec<String>) {
        if let Err(Error::Config(list)) = self.train.validate() {
            errs.extend(list);
        }
        if !(self.train.learning_rate > 0.0) && self.train.learning_rate.is_finite() {
            errs.push("learning_rate > 0".into());
        }
        if self.arch.validate().is_err() {
            errs.push("input_size ≥ 4 and every channel count ≥ 1".into());
        }
        if self.k < 1 {
            errs.push("k ≥ 1".into());
        }
        if self.neighbors < 1 {
            errs.push("neighbors ≥ 1".into());
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                errs.push("sigma must be positive or `auto`".into());
            }
        }
        if self.cluster_max_images < 2 {
            errs.push("cluster_max_images ≥ 2".into());
        }
        if self.shap_grid < 1 {
            errs.push("shap_grid ≥ 1".into());
        }
        let m = self.shap_grid * self.shap_grid;
        if m > crate::interpret::EXACT_MAX_FEATURES && self.shap_samples < 2 * m + 2 {
            errs.push(format!("shap_samples ≥ {} for a {}×{} grid", 2 * m + 2, self.shap_grid, self.shap_grid));
        }
        if self.filter_index >= self.arch.c1 {
            errs.push(format!("filter_index < channels1 ({})", self.arch.c1));
        }
        if self.zoom > 21 {
            errs.push("zoom ≤ 21".into());
        }
        if self.size == 0 || self.size > 640 {
            errs.push("size in 1..=640".into());
        }
        if self.max_attempts == 0 {
            errs.push("max_attempts ≥ 1".into());
        }
        if self.bins == 0 || self.per_bin == 0 || self.top_n == 0 {
            errs.push("top_n, bins and per_bin ≥ 1".into());
        }
        if let Err(e) = self.synth.validate() {
            errs.push(format!("synthetic corpus: {e}"));
        }
        for (name, p) in [("counties_csv", &self.counties_csv), ("schools_csv", &self.schools_csv)] {
            if let Some(p) = p {
                if !p.is_file() {
                    errs.push(format!("{name}: {} is not a readable file", p.display()));
                }
            }
        }
    }

    /// Every key with its resolved value, sorted by key.
    pub fn resolved_pairs(&self) -> Vec<(String, String)> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut v: Vec<(String, String)> = [
            ("counties_csv", path(&self.counties_csv)),
            ("schools_csv", path(&self.schools_csv)),
            ("cache_dir", path(&self.cache_dir)),
            ("out_dir", self.out_dir.display().to_string()),
            ("seed", self.seed.to_string()),
            ("top_n", self.top_n.to_string()),
            ("bins", self.bins.to_string()),
            ("per_bin", self.per_bin.to_string()),
            ("zoom", self.zoom.to_string()),
            ("size", self.size.to_string()),
            ("max_attempts", self.max_attempts.to_string()),
            ("input_size", self.arch.input.to_string()),
            ("channels1", self.arch.c1.to_string()),
            ("channels2", self.arch.c2.to_string()),
            ("channels3", self.arch.c3.to_string()),
            ("embed_dim", self.arch.embed.to_string()),
            ("learning_rate", self.train.learning_rate.to_string()),
            ("momentum", self.train.momentum.to_string()),
            ("epochs", self.train.epochs.to_string()),
            ("batch_size", self.train.batch_size.to_string()),
            ("augment", self.train.augment.to_string()),
            ("train_seed", self.train.seed.to_string()),
            ("k", self.k.to_string()),
            ("neighbors", self.neighbors.to_string()),
            ("sigma", self.sigma.map(|s| s.to_string()).unwrap_or_else(|| "auto".into())),
            ("cluster_max_images", self.cluster_max_images.to_string()),
            ("ttest_weights", self.ttest_weights.to_string()),
            ("shap_grid", self.shap_grid.to_string()),
            ("shap_samples", self.shap_samples.to_string()),
            ("explain_tiles", self.explain_tiles.to_string()),
            ("filter_index", self.filter_index.to_string()),
            ("synth_counties", self.synth.counties.to_string()),
            ("synth_schools", self.synth.schools.to_string()),
            ("synth_b0", self.synth.b0.to_string()),
            ("synth_b1", self.synth.b1.to_string()),
            ("synth_b2", self.synth.b2.to_string()),
            ("synth_b3", self.synth.b3.to_string()),
            ("synth_noise_sd", self.synth.noise_sd.to_string()),
            ("synth_tile_size", self.synth.tile_size.to_string()),
            ("synth_seed", self.synth.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        v.sort();
        v
    }

    pub fn resolved_text(&self) -> String {
        self.resolved_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Parse and validate configuration text plus `key=value` overrides (later wins).
pub fn validate_config_text(text: &str, overrides: &[(String, String)]) -> std::result::Result<RunConfig, Vec<String>> {
    let mut pairs = parse_pairs(text)?;
    for (k, v) in overrides {
        pairs.insert(k.clone(), v.clone());
    }
    RunConfig::from_pairs(&pairs)
}

/// Read and validate a configuration file; an absent path means all defaults.
pub fn validate_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(vec![format!("{}: {e}", p.display())]))?,
        None => String::new(),
    };
    validate_config_text(&text, overrides).map_err(Error::Config)
}
