//! Training loop, county aggregation, evaluation and embedding extraction.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use crate::cohort::{SplitAssignment, SplitLabel};
use crate::error::{Error, Result};
use crate::geo::TileKey;
use crate::image::augment::{augment, AugmentParams};
use crate::image::net::{backward, poisson_nll, ConvRegressor, Params, Scalar};
use crate::image::tile::ImageTile;
use crate::rng::CounterRng;
use crate::stats;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, momentum: 0.9, epochs: 5, batch_size: 1, seed: 17, augment: true }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            errs.push("learning_rate must be finite and ≥ 0".to_string());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            errs.push("momentum must lie in [0, 1)".to_string());
        }
        if self.epochs == 0 {
            errs.push("epochs ≥ 1".to_string());
        }
        if self.batch_size == 0 {
            errs.push("batch_size ≥ 1".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// One image with its county's target rate, already resized to the model input.
#[derive(Debug, Clone)]
pub struct Example {
    pub tile: ImageTile,
    pub target: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ConvRegressor<f32>,
    pub log: Vec<EpochLog>,
    /// Epoch (1-based) whose parameters were returned.
    pub best_epoch: Option<usize>,
    /// Set when training stopped on a non-finite loss.
    pub aborted: Option<String>,
}

/// Build training and validation examples from tiles, county rates and splits.
pub fn examples_for(
    tiles: &[ImageTile],
    rates: &BTreeMap<String, f64>,
    splits: &SplitAssignment,
    label: SplitLabel,
    input: usize,
) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for t in tiles {
        if splits.get(&t.key.fips) != Some(label) {
            continue;
        }
        let target = *rates
            .get(&t.key.fips)
            .ok_or_else(|| Error::domain(format!("county {} has no rate", t.key.fips)))?;
        out.push(Example { tile: t.resized(input), target });
    }
    Ok(out)
}

fn to_input<T: Scalar>(tile: &ImageTile) -> Vec<T> {
    tile.pixels.iter().map(|&v| T::from_f64(v as f64)).collect()
}

/// Mean Poisson loss over examples without augmentation.
pub fn mean_loss(model: &ConvRegressor<f32>, data: &[Example]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::domain("cannot evaluate loss on an empty set"));
    }
    let mut total = 0.0;
    for ex in data {
        let f = model.forward(&ex.tile.pixels)?;
        total += poisson_nll(f.rate as f64, ex.target)?;
    }
    Ok(total / data.len() as f64)
}

/// SGD with momentum (`v ← μv + g; θ ← θ − ηv`), keeping the best validation epoch.
pub fn train(model: ConvRegressor<f32>, train: &[Example], val: &[Example], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::domain("training set is empty"));
    }
    if val.is_empty() {
        return Err(Error::domain("validation set is empty"));
    }
    let input = model.arch.input;
    if let Some(bad) = train.iter().chain(val).find(|e| e.tile.height != input || e.tile.width != input) {
        return Err(Error::domain(format!("tile {} is not {input}×{input}", bad.tile.key)));
    }

    let mut model = model;
    let mut velocity = Params::<f32>::zeros(&model.arch);
    let lr = cfg.learning_rate as f32;
    let mu = cfg.momentum as f32;
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, Params<f32>)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        let mut rng = CounterRng::derive(cfg.seed, epoch as u64);
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let inputs: Vec<Vec<f32>> = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        // one stream per (epoch, image) keeps runs reproducible under reordering
                        let mut r = CounterRng::derive(cfg.seed ^ 0xA06, ((epoch as u64) << 32) | i as u64);
                        let p = AugmentParams::sample(&mut r);
                        augment(&train[i].tile, &p, input).map(|t| t.pixels)
                    } else {
                        Ok(train[i].tile.pixels.clone())
                    }
                })
                .collect::<Result<_>>()?;
            let batch: Vec<(&[f32], f64)> =
                inputs.iter().zip(chunk).map(|(x, &i)| (x.as_slice(), train[i].target)).collect();
            let (loss, grads) = match backward(&model, &batch) {
                Ok(v) if v.0.is_finite() && v.1.all_finite() => v,
                Ok(_) | Err(Error::NonFinite { .. }) => {
                    return Ok(abort(model, log, best, format!("non-finite loss in epoch {epoch}, batch {b}")));
                }
                Err(e) => return Err(e),
            };
            total += loss * chunk.len() as f64;
            for ((p, v), g) in model
                .params
                .tensors_mut()
                .into_iter()
                .zip(velocity.tensors_mut())
                .zip(grads.tensors())
            {
                for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                    *vi = mu * *vi + gi;
                    *pi -= lr * *vi;
                }
            }
        }
        let train_loss = total / train.len() as f64;
        let val_loss = match mean_loss(&model, val) {
            Ok(v) if v.is_finite() => v,
            Ok(_) | Err(Error::NonFinite { .. }) => {
                return Ok(abort(model, log, best, format!("non-finite validation loss in epoch {epoch}")));
            }
            Err(e) => return Err(e),
        };
        log.push(EpochLog { epoch, train_loss, val_loss });
        if best.as_ref().map_or(true, |b| val_loss < b.0) {
            best = Some((val_loss, epoch, model.params.clone()));
        }
    }
    let (_, epoch, params) = best.expect("at least one epoch ran");
    model.params = params;
    Ok(TrainOutcome { model, log, best_epoch: Some(epoch), aborted: None })
}

fn abort(
    mut model: ConvRegressor<f32>,
    log: Vec<EpochLog>,
    best: Option<(f64, usize, Params<f32>)>,
    reason: String,
) -> TrainOutcome {
    let best_epoch = best.map(|(_, e, p)| {
        model.params = p;
        e
    });
    TrainOutcome { model, log, best_epoch, aborted: Some(reason) }
}

/// Arithmetic mean of per-image rates.
pub fn mean_rate(rates: &[f64]) -> Result<f64> {
    if rates.is_empty() {
        return Err(Error::domain("county has no tiles"));
    }
    let anchor = rates[0];
    Ok(anchor + rates.iter().map(|r| r - anchor).sum::<f64>() / rates.len() as f64)
}

/// Per-image rates for tiles of one county, resized to the model input.
pub fn predict_tiles<T: Scalar>(model: &ConvRegressor<T>, tiles: &[ImageTile]) -> Result<Vec<f64>> {
    tiles
        .iter()
        .map(|t| {
            let x = to_input::<T>(&t.resized(model.arch.input));
            Ok(model.forward(&x)?.rate.as_f64())
        })
        .collect()
}

pub fn predict_county<T: Scalar>(model: &ConvRegressor<T>, tiles: &[ImageTile]) -> Result<f64> {
    if tiles.is_empty() {
        return Err(Error::domain("county has no tiles"));
    }
    mean_rate(&predict_tiles(model, tiles)?)
}

/// Product-moment correlation of predicted against true county rates.
pub fn pearson_r(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::domain(format!("length mismatch: {} vs {}", pred.len(), truth.len())));
    }
    stats::pearson(pred, truth)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub fips: String,
    pub image_rates: Vec<f64>,
    pub county_rate: f64,
    pub true_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub records: Vec<PredictionRecord>,
    pub pearson: f64,
}

/// Predict every county in `fips_set` and correlate with `truth`.
pub fn evaluate(
    model: &ConvRegressor<f32>,
    tiles: &[ImageTile],
    truth: &BTreeMap<String, f64>,
    fips_set: &[String],
) -> Result<EvalReport> {
    let mut by_county: BTreeMap<&str, Vec<&ImageTile>> = BTreeMap::new();
    for t in tiles {
        by_county.entry(t.key.fips.as_str()).or_default().push(t);
    }
    let mut records = Vec::with_capacity(fips_set.len());
    for f in fips_set {
        let group = by_county
            .get(f.as_str())
            .ok_or_else(|| Error::domain(format!("county {f} has no tiles")))?;
        let owned: Vec<ImageTile> = group.iter().map(|t| (*t).clone()).collect();
        let image_rates = predict_tiles(model, &owned)?;
        let true_rate = *truth.get(f).ok_or_else(|| Error::domain(format!("county {f} has no true rate")))?;
        records.push(PredictionRecord { fips: f.clone(), county_rate: mean_rate(&image_rates)?, image_rates, true_rate });
    }
    let pred: Vec<f64> = records.iter().map(|r| r.county_rate).collect();
    let tru: Vec<f64> = records.iter().map(|r| r.true_rate).collect();
    let pearson = pearson_r(&pred, &tru)?;
    Ok(EvalReport { records, pearson })
}

/// Embedding matrix with one row per tile.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub keys: Vec<TileKey>,
    pub values: ndarray::Array2<f64>,
}

pub fn extract_embeddings<T: Scalar>(model: &ConvRegressor<T>, tiles: &[ImageTile]) -> Result<Embeddings> {
    let d = model.arch.embed;
    let mut values = ndarray::Array2::zeros((tiles.len(), d));
    for (i, t) in tiles.iter().enumerate() {
        let f = model.forward(&to_input::<T>(&t.resized(model.arch.input)))?;
        for (j, v) in f.embedding.iter().enumerate() {
            values[[i, j]] = v.as_f64();
        }
    }
    Ok(Embeddings { keys: tiles.iter().map(|t| t.key.clone()).collect(), values })
}

pub fn write_training_log<W: Write>(log: &[EpochLog], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "train_loss", "val_loss"])?;
    for e in log {
        w.write_record([e.epoch.to_string(), format!("{:.10}", e.train_loss), format!("{:.10}", e.val_loss)])?;
    }
    w.flush().map_err(|e| Error::io("<training log>", e))
}

pub fn write_predictions<W: Write>(report: &EvalReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["fips", "predicted_rate", "true_rate", "n_images"])?;
    for r in &report.records {
        w.write_record([
            r.fips.clone(),
            format!("{:.10}", r.county_rate),
            format!("{:.10}", r.true_rate),
            r.image_rates.len().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<predictions>", e))
}

pub fn write_embeddings<W: Write>(emb: &Embeddings, out: W) -> Result<()> {
    let mut out = std::io::BufWriter::new(out);
    let path = "<embeddings>";
    let mut header = String::from("fips,school,row,col");
    for j in 0..emb.values.ncols() {
        header.push_str(&format!(",e{j}"));
    }
    writeln!(out, "{header}").map_err(|e| Error::io(path, e))?;
    for (k, row) in emb.keys.iter().zip(emb.values.rows()) {
        let mut line = format!("{},{},{},{}", k.fips, k.school, k.row, k.col);
        for v in row {
            line.push_str(&format!(",{v:e}"));
        }
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Read an embedding CSV (`fips,school,row,col,e0,…`). When `known` is given,
/// every key must belong to it.
pub fn import_embeddings(path: &Path, known: Option<&HashSet<TileKey>>) -> Result<Embeddings> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let mut keys = Vec::new();
    let mut flat = Vec::new();
    let mut dim: Option<usize> = None;
    let mut seen: HashMap<TileKey, usize> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let ing = |message: String| Error::Ingestion { row, message };
        if rec.len() < 5 {
            return Err(ing(format!("expected key columns and at least one value, found {} fields", rec.len())));
        }
        let small = |s: &str, what: &str| s.trim().parse::<u8>().map_err(|_| ing(format!("bad {what} {s:?}")));
        let key = TileKey {
            fips: rec[0].trim().to_string(),
            school: small(&rec[1], "school")?,
            row: small(&rec[2], "row")?,
            col: small(&rec[3], "col")?,
        };
        let d = rec.len() - 4;
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(ing(format!("dimension {d} differs from {expected}")));
            }
            _ => {}
        }
        if let Some(k) = known {
            if !k.contains(&key) {
                return Err(ing(format!("unknown tile {key}")));
            }
        }
        if let Some(first) = seen.insert(key.clone(), row) {
            return Err(ing(format!("duplicate tile {key} (first seen in row {first})")));
        }
        for s in rec.iter().skip(4) {
            let v: f64 = s.trim().parse().map_err(|_| ing(format!("bad value {s:?}")))?;
            if !v.is_finite() {
                return Err(ing(format!("non-finite value {s:?}")));
            }
            flat.push(v);
        }
        keys.push(key);
    }
    let Some(d) = dim else {
        return Err(Error::Ingestion { row: 0, message: "embedding file has no rows".into() });
    };
    let values = ndarray::Array2::from_shape_vec((keys.len(), d), flat).expect("row lengths checked");
    Ok(Embeddings { keys, values })
}
