//! One function per subcommand. Each reads from and writes into the output
//! directory and returns the files it produced.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use sha2::{Digest, Sha256};

use crate::cohort::{
    impute_missing, read_counties, read_splits, select_counties_with, split, write_counties, write_splits, CountyRecord,
    SplitAssignment, SplitLabel,
};
use crate::covariates::{
    fit_wls, standardize_then_fit, univariable_fits, weighted_pairwise_ttests, write_coef_table, write_fit_stats,
    write_ttest_matrix, write_univariable, DesignMatrix, RegressionFit,
};
use crate::embeddings::{
    build_affinity, spectral_cluster, spectral_embed_2d, summarize_clusters, write_assignment, write_coordinates,
    write_summary, ClusterAssignment,
};
use crate::error::{Error, Result, RowError};
use crate::fetch::{HttpTransport, TileFetcher, MAPS_KEY_ENV};
use crate::geo::{plan_grid_with, read_manifest, write_manifest, GeoPoint, TileKey, TileSpec};
use crate::image::checkpoint;
use crate::image::net::ConvRegressor;
use crate::image::tile::ImageTile;
use crate::image::train::{
    evaluate, examples_for, extract_embeddings, import_embeddings, pearson_r, train, write_embeddings,
    write_training_log, Embeddings,
};
use crate::interpret::{
    activation_png, attribution_svg, filter_activations, kernel_shap, linear_shap, model_predictor, shap_importance,
    AttributionMap,
};
use crate::pipeline::config::{RunConfig, TTestWeights};
use crate::pipeline::svg::Scatter;
use crate::rng::CounterRng;
use crate::synth::{corpus_report, generate_corpus};

pub const COUNTIES: &str = "counties.csv";
pub const SPLITS: &str = "splits.csv";
pub const MANIFEST: &str = "manifest.csv";
pub const TILES_DIR: &str = "tiles";
pub const MODEL: &str = "model.ckpt";
pub const PREDICTIONS: &str = "predictions.csv";
pub const EMBEDDINGS: &str = "embeddings.csv";
pub const CLUSTERS: &str = "clusters.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Ingest,
    PlanGrid,
    Fetch,
    Synth,
    Split,
    Train,
    Eval,
    Embed,
    Cluster,
    Explain,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::PlanGrid => "plan-grid",
            Command::Fetch => "fetch",
            Command::Synth => "synth",
            Command::Split => "split",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Embed => "embed",
            Command::Cluster => "cluster",
            Command::Explain => "explain",
            Command::Report => "report",
        }
    }
}

/// Extra per-command inputs that are not part of the run configuration.
#[derive(Debug, Clone, Default)]
pub struct CommandArgs {
    pub import_embeddings: Option<PathBuf>,
}

/// Files written by one command, relative to the output directory.
#[derive(Debug, Default)]
pub struct Outputs {
    root: PathBuf,
    files: Vec<PathBuf>,
    pub summary: Vec<String>,
}

impl Outputs {
    fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf(), files: Vec::new(), summary: Vec::new() }
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.files
    }

    pub fn write(&mut self, rel: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
        let rel = rel.as_ref();
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.files.push(rel.to_path_buf());
        Ok(())
    }

    fn write_with(&mut self, rel: impl AsRef<Path>, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(rel, &buf)
    }

    fn note(&mut self, line: impl Into<String>) {
        self.summary.push(line.into());
    }
}

/// Hex SHA-256 of a file.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// `path,sha256,bytes` for every output, sorted by path.
pub fn write_output_manifest(root: &Path, command: Command, files: &[PathBuf]) -> Result<PathBuf> {
    let mut rows: Vec<(String, String, u64)> = Vec::with_capacity(files.len());
    for f in files {
        let p = root.join(f);
        let len = fs::metadata(&p).map_err(|e| Error::io(&p, e))?.len();
        rows.push((f.to_string_lossy().replace('\\', "/"), sha256_file(&p)?, len));
    }
    rows.sort();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["path", "sha256", "bytes"])?;
    for (p, h, n) in rows {
        w.write_record([p, h, n.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io("<manifest>", e.into_error()))?;
    let rel = PathBuf::from(format!("outputs_{}.csv", command.name()));
    let path = root.join(&rel);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(rel)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn need(root: &Path, rel: &str, producer: &str) -> Result<PathBuf> {
    let p = root.join(rel);
    if p.is_file() {
        Ok(p)
    } else {
        Err(Error::Config(vec![format!("{} not found; run `{producer}` first", p.display())]))
    }
}

pub fn load_counties(root: &Path) -> Result<Vec<CountyRecord>> {
    let p = need(root, COUNTIES, "ingest` or `synth")?;
    Ok(read_counties(read_file(&p)?.as_slice())?.records)
}

pub fn load_splits(root: &Path) -> Result<SplitAssignment> {
    let p = need(root, SPLITS, "split")?;
    read_splits(read_file(&p)?.as_slice())
}

pub fn load_model(root: &Path) -> Result<ConvRegressor<f32>> {
    checkpoint::load(&need(root, MODEL, "train")?)
}

fn parse_tile_key(fips: &str, school: &str, file: &str) -> Option<TileKey> {
    let stem = file.strip_suffix(".png")?;
    let (r, c) = stem.split_once('_')?;
    Some(TileKey { fips: fips.to_string(), school: school.parse().ok()?, row: r.parse().ok()?, col: c.parse().ok()? })
}

fn sorted_entries(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut v = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let e = e.map_err(|e| Error::io(dir, e))?;
        v.push((e.file_name().to_string_lossy().into_owned(), e.path()));
    }
    v.sort();
    Ok(v)
}

/// Every `tiles/{fips}/{school}/{row}_{col}.png`, sorted by key.
pub fn load_tiles(root: &Path) -> Result<Vec<ImageTile>> {
    let dir = root.join(TILES_DIR);
    if !dir.is_dir() {
        return Err(Error::Config(vec![format!("{} not found; run `fetch` or `synth` first", dir.display())]));
    }
    let mut tiles = Vec::new();
    for (fips, fdir) in sorted_entries(&dir)? {
        if !fdir.is_dir() {
            continue;
        }
        for (school, sdir) in sorted_entries(&fdir)? {
            if !sdir.is_dir() {
                continue;
            }
            for (file, path) in sorted_entries(&sdir)? {
                let Some(key) = parse_tile_key(&fips, &school, &file) else { continue };
                tiles.push(ImageTile::decode_png(&read_file(&path)?, key)?);
            }
        }
    }
    tiles.sort_by(|a, b| a.key.cmp(&b.key));
    if tiles.is_empty() {
        return Err(Error::domain(format!("no tiles under {}", dir.display())));
    }
    Ok(tiles)
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

pub fn run(cmd: Command, cfg: &RunConfig, args: &CommandArgs) -> Result<Outputs> {
    let root = cfg.out_dir.as_path();
    let mut out = Outputs::new(root);
    match cmd {
        Command::Ingest => ingest(cfg, &mut out)?,
        Command::PlanGrid => plan_grid(cfg, &mut out)?,
        Command::Fetch => fetch(cfg, &mut out)?,
        Command::Synth => synth(cfg, &mut out)?,
        Command::Split => split_cmd(cfg, &mut out)?,
        Command::Train => train_cmd(cfg, &mut out)?,
        Command::Eval => eval_cmd(cfg, &mut out)?,
        Command::Embed => embed_cmd(cfg, args, &mut out)?,
        Command::Cluster => cluster_cmd(cfg, &mut out)?,
        Command::Explain => explain_cmd(cfg, &mut out)?,
        Command::Report => report_cmd(cfg, &mut out)?,
    }
    Ok(out)
}

fn ingest(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let src = cfg
        .counties_csv
        .as_ref()
        .ok_or_else(|| Error::Config(vec!["counties_csv is required for ingest".into()]))?;
    let ingested = read_counties(read_file(src)?.as_slice())?;
    let (records, report) = impute_missing(ingested.records)?;
    out.write_with(COUNTIES, |w| write_counties(w, &records))?;
    let text = format!(
        "counties = {}\nexcluded = {}\nimputed_any_college = {}\nimputed_income = {}\n",
        records.len(),
        ingested.excluded,
        report.any_college,
        report.income
    );
    out.write("ingest_report.txt", text.as_bytes())?;
    out.note(format!("{} counties ingested, {} excluded", records.len(), ingested.excluded));
    Ok(())
}

fn plan_grid(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let src = cfg
        .schools_csv
        .as_ref()
        .ok_or_else(|| Error::Config(vec!["schools_csv is required for plan-grid".into()]))?;
    let mut rdr = csv::Reader::from_reader(std::io::Cursor::new(read_file(src)?));
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header != ["county_fips", "school_index", "lat", "lon"] {
        return Err(Error::Validation(vec![RowError {
            row: 0,
            message: format!("header must be `county_fips,school_index,lat,lon`, found `{}`", header.join(",")),
        }]));
    }
    let mut specs: Vec<TileSpec> = Vec::new();
    let mut errors = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let parsed = (|| -> std::result::Result<Vec<TileSpec>, String> {
            let fips = rec.get(0).unwrap_or("").trim();
            if fips.is_empty() {
                return Err("empty county_fips".into());
            }
            let school: u8 = rec.get(1).unwrap_or("").trim().parse().map_err(|_| "bad school_index".to_string())?;
            let lat: f64 = rec.get(2).unwrap_or("").trim().parse().map_err(|_| "bad lat".to_string())?;
            let lon: f64 = rec.get(3).unwrap_or("").trim().parse().map_err(|_| "bad lon".to_string())?;
            let p = GeoPoint::new(lat, lon).map_err(|e| e.to_string())?;
            Ok(plan_grid_with(p, fips, school, cfg.zoom, cfg.size).map_err(|e| e.to_string())?.tiles)
        })();
        match parsed {
            Ok(t) => specs.extend(t),
            Err(message) => errors.push(RowError { row, message }),
        }
    }
    if !errors.is_empty() {
        return Err(Error::Validation(errors));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = specs.iter().find(|s| !seen.insert(s.key.clone())) {
        return Err(Error::Validation(vec![RowError {
            row: 0,
            message: format!("school {} of county {} appears twice", dup.key.school, dup.key.fips),
        }]));
    }
    out.write_with(MANIFEST, |w| write_manifest(w, &specs))?;
    out.note(format!("{} tiles planned", specs.len()));
    Ok(())
}

fn fetch(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let root = cfg.out_dir.as_path();
    let specs = read_manifest(read_file(&need(root, MANIFEST, "plan-grid")?)?.as_slice())?;
    let key = std::env::var(MAPS_KEY_ENV)
        .ok()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| Error::Config(vec![format!("{MAPS_KEY_ENV} is not set")]))?;
    let cache = cfg.cache_dir.clone().unwrap_or_else(|| root.join("cache"));
    let transport = Arc::new(HttpTransport::new(Duration::from_secs(30))?);
    let fetcher = TileFetcher::new(transport, cache).with_max_attempts(cfg.max_attempts);
    for s in &specs {
        let tile = fetcher.fetch_tile(s, &key)?;
        out.write(Path::new(TILES_DIR).join(s.key.rel_path()), &tile.encode_png()?)?;
    }
    out.note(format!("{} tiles fetched", specs.len()));
    Ok(())
}

fn synth(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let corpus = generate_corpus(&cfg.synth)?;
    let records = corpus.records();
    out.write_with(COUNTIES, |w| write_counties(w, &records))?;
    out.write_with("truth.csv", |w| {
        let mut t = csv::Writer::from_writer(w);
        t.write_record(["fips", "law_rate", "crude_rate", "sidewalk", "field", "road"])?;
        for c in &corpus.counties {
            t.write_record([
                c.record.fips.clone(),
                format!("{:.10}", c.law_rate),
                format!("{:.10}", c.record.crude_rate()),
                format!("{:.10}", c.latent.sidewalk),
                format!("{:.10}", c.latent.field),
                format!("{:.10}", c.latent.road),
            ])?;
        }
        t.flush().map_err(|e| Error::io("<truth>", e))
    })?;
    for t in &corpus.tiles {
        out.write(Path::new(TILES_DIR).join(t.key.rel_path()), &t.encode_png()?)?;
    }
    let r = corpus_report(&corpus)?;
    let text = format!(
        "counties = {}\ntiles = {}\nrate_min = {:.6}\nrate_max = {:.6}\nrate_mean = {:.6}\nrate_var = {:.6e}\n\
         spearman_sidewalk = {:.6}\nspearman_field = {:.6}\nspearman_road = {:.6}\nwithin_3se = {:.4}\n",
        r.counties,
        r.tiles,
        r.rate_min,
        r.rate_max,
        r.rate_mean,
        r.rate_var,
        r.latent_spearman[0],
        r.latent_spearman[1],
        r.latent_spearman[2],
        r.within_3se
    );
    out.write("synth_report.txt", text.as_bytes())?;
    out.note(format!("{} counties, {} tiles", r.counties, r.tiles));
    Ok(())
}

fn split_cmd(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let records = load_counties(&cfg.out_dir)?;
    let plan = select_counties_with(&records, cfg.top_n, cfg.bins, cfg.per_bin)?;
    let s = split(&plan, cfg.seed)?;
    out.write_with(SPLITS, |w| write_splits(w, &s))?;
    out.write_with("bins.csv", |w| {
        let mut t = csv::Writer::from_writer(w);
        t.write_record(["fips", "bin"])?;
        for (b, members) in plan.bins.iter().enumerate() {
            for f in members {
                t.write_record([f.clone(), b.to_string()])?;
            }
        }
        t.flush().map_err(|e| Error::io("<bins>", e))
    })?;
    out.note(format!(
        "{} train / {} validation / {} test",
        s.count(SplitLabel::Train),
        s.count(SplitLabel::Validation),
        s.count(SplitLabel::Test)
    ));
    Ok(())
}

fn crude_rates(records: &[CountyRecord]) -> BTreeMap<String, f64> {
    records.iter().map(|r| (r.fips.clone(), r.crude_rate())).collect()
}

fn train_cmd(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let root = cfg.out_dir.as_path();
    let records = load_counties(root)?;
    let splits = load_splits(root)?;
    let tiles = load_tiles(root)?;
    let rates = crude_rates(&records);
    let input = cfg.arch.input;
    let tr = examples_for(&tiles, &rates, &splits, SplitLabel::Train, input)?;
    let va = examples_for(&tiles, &rates, &splits, SplitLabel::Validation, input)?;
    drop(tiles);
    if tr.is_empty() {
        return Err(Error::domain("no training tiles"));
    }
    let mean = tr.iter().map(|e| e.target).sum::<f64>() / tr.len() as f64;
    let model = ConvRegressor::<f32>::init(cfg.arch, cfg.seed, mean)?;
    let outcome = train(model, &tr, &va, &cfg.train)?;
    out.write(MODEL, &checkpoint::to_bytes(&outcome.model))?;
    out.write_with("training_log.csv", |w| write_training_log(&outcome.log, w))?;
    let mut text = format!(
        "train_images = {}\nvalidation_images = {}\nbest_epoch = {}\n",
        tr.len(),
        va.len(),
        outcome.best_epoch.map(|e| e.to_string()).unwrap_or_else(|| "none".into())
    );
    if let Some(reason) = &outcome.aborted {
        text.push_str(&format!("aborted = {reason}\n"));
        out.note(format!("training aborted: {reason}"));
    }
    out.write("train_report.txt", text.as_bytes())?;
    out.note(format!("best epoch {:?}", outcome.best_epoch));
    Ok(())
}

fn eval_cmd(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let root = cfg.out_dir.as_path();
    let records = load_counties(root)?;
    let splits = load_splits(root)?;
    let tiles = load_tiles(root)?;
    let model = load_model(root)?;
    let truth = crude_rates(&records);
    let all: Vec<String> = splits.labels.keys().cloned().collect();
    let report = evaluate(&model, &tiles, &truth, &all)?;
    let test: Vec<_> = report.records.iter().filter(|r| splits.get(&r.fips) == Some(SplitLabel::Test)).collect();
    let pred: Vec<f64> = test.iter().map(|r| r.county_rate).collect();
    let tru: Vec<f64> = test.iter().map(|r| r.true_rate).collect();
    let r = pearson_r(&pred, &tru)?;

    out.write_with(PREDICTIONS, |w| {
        let mut t = csv::Writer::from_writer(w);
        t.write_record(["fips", "split", "predicted_rate", "true_rate", "n_images"])?;
        for rec in &report.records {
            t.write_record([
                rec.fips.clone(),
                splits.get(&rec.fips).map(|l| l.to_string()).unwrap_or_default(),
                format!("{:.10}", rec.county_rate),
                format!("{:.10}", rec.true_rate),
                rec.image_rates.len().to_string(),
            ])?;
        }
        t.flush().map_err(|e| Error::io("<predictions>", e))
    })?;
    for (name, f) in [("predicted_rate_map.csv", 0), ("true_rate_map.csv", 1)] {
        out.write_with(name, |w| {
            let mut t = csv::Writer::from_writer(w);
            t.write_record(["fips", "value"])?;
            for rec in &report.records {
                let v = if f == 0 { rec.county_rate } else { rec.true_rate };
                t.write_record([rec.fips.clone(), format!("{v:.6}")])?;
            }
            t.flush().map_err(|e| Error::io("<map values>", e))
        })?;
    }
    let points: Vec<(f64, f64)> = test.iter().map(|r| (r.true_rate, r.county_rate)).collect();
    let title = format!("Held-out counties (r = {r:.3})");
    let svg = Scatter {
        title: &title,
        x_label: "Observed deaths per 1,000",
        y_label: "Predicted deaths per 1,000",
        points: &points,
        groups: None,
        identity_line: true,
    }
    .render();
    out.write("scatter.svg", svg.as_bytes())?;
    let text = format!("test_counties = {}\npearson_r = {r:.6}\n", test.len());
    out.write("eval_report.txt", text.as_bytes())?;
    out.note(format!("held-out Pearson r = {r:.4} over {} counties", test.len()));
    Ok(())
}

fn embed_cmd(cfg: &RunConfig, args: &CommandArgs, out: &mut Outputs) -> Result<()> {
    let root = cfg.out_dir.as_path();
    let emb = match &args.import_embeddings {
        Some(path) => {
            let known: Option<HashSet<TileKey>> = if root.join(TILES_DIR).is_dir() {
                Some(load_tiles(root)?.into_iter().map(|t| t.key).collect())
            } else {
                None
            };
            import_embeddings(path, known.as_ref())?
        }
        None => {
            let tiles = load_tiles(root)?;
            extract_embeddings(&load_model(root)?, &tiles)?
        }
    };
    out.write_with(EMBEDDINGS, |w| write_embeddings(&emb, w))?;
    out.note(format!("{} embeddings of dimension {}", emb.values.nrows(), emb.values.ncols()));
    Ok(())
}

fn load_embeddings(root: &Path) -> Result<Embeddings> {
    import_embeddings(&need(root, EMBEDDINGS, "embed")?, None)
}

/// Deterministic subsample of at most `max` row indices, returned in ascending order.
pub fn subsample(n: usize, max: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if n > max {
        CounterRng::derive(seed, 0xC1A5).shuffle(&mut idx);
        idx.truncate(max);
        idx.sort_unstable();
    }
    idx
}

fn cluster_cmd(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let root = cfg.out_dir.as_path();
    let emb = load_embeddings(root)?;
    let records = load_counties(root)?;
    let idx = subsample(emb.keys.len(), cfg.cluster_max_images, cfg.seed);
    let keys: Vec<TileKey> = idx.iter().map(|&i| emb.keys[i].clone()).collect();
    let values = emb.values.select(ndarray::Axis(0), &idx);
    let m = cfg.neighbors.min(keys.len().saturating_sub(1)).max(1);
    let graph = build_affinity(values.view(), m, cfg.sigma)?;
    let assignment = spectral_cluster(&graph, cfg.k, cfg.seed)?;
    let coords = spectral_embed_2d(&graph)?;
    let summary = summarize_clusters(&assignment, &keys, &records)?;
    out.write_with(CLUSTERS, |w| write_assignment(w, &keys, &assignment))?;
    out.write_with("cluster_coords.csv", |w| write_coordinates(w, &keys, &coords))?;
    out.write_with("cluster_summary.csv", |w| write_summary(w, &summary))?;
    let points: Vec<(f64, f64)> = coords.rows().into_iter().map(|r| (r[0], r[1])).collect();
    let svg = Scatter {
        title: "Spectral embedding of image features",
        x_label: "Eigenmap axis 1",
        y_label: "Eigenmap axis 2",
        points: &points,
        groups: Some(&assignment.labels),
        identity_line: false,
    }
    .render();
    out.write("cluster_embedding.svg", svg.as_bytes())?;
    out.note(format!("{} images in {} clusters (σ = {:.4})", keys.len(), cfg.k, graph.sigma));
    Ok(())
}

fn selected_records(root: &Path) -> Result<(Vec<CountyRecord>, SplitAssignment)> {
    let records = load_counties(root)?;
    let splits = load_splits(root)?;
    let chosen = records.into_iter().filter(|r| splits.get(&r.fips).is_some()).collect();
    Ok((chosen, splits))
}

fn covariate_design(records: &[CountyRecord]) -> Result<(DesignMatrix, Vec<String>)> {
    let mut d = DesignMatrix::from_counties(records)?;
    let dropped = d.drop_constant_columns();
    Ok((d, dropped))
}

fn explain_cmd(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let root = cfg.out_dir.as_path();
    let (records, splits) = selected_records(root)?;
    let (d, _) = covariate_design(&records)?;
    let fit = fit_wls(&d)?;

    // covariate attributions for held-out counties
    let mut vectors = Vec::new();
    for (i, fips) in d.row_ids.iter().enumerate() {
        if splits.get(fips) != Some(SplitLabel::Test) {
            continue;
        }
        let row: Vec<f64> = d.x.row(i).to_vec();
        vectors.push((fips.clone(), linear_shap(&fit, &d.names, &row, &d)?));
    }
    if !vectors.is_empty() {
        let names = vectors[0].1.names.clone();
        out.write_with("shap_covariates.csv", |w| {
            let mut t = csv::Writer::from_writer(w);
            let mut header = vec!["fips".to_string(), "base_value".into(), "prediction".into()];
            header.extend(names.iter().cloned());
            t.write_record(&header)?;
            for (fips, v) in &vectors {
                let mut rec = vec![fips.clone(), fmt(v.base_value), fmt(v.prediction)];
                rec.extend(v.phi.iter().map(|p| fmt(*p)));
                t.write_record(&rec)?;
            }
            t.flush().map_err(|e| Error::io("<shap>", e))
        })?;
        let shap: Vec<_> = vectors.iter().map(|(_, v)| v.clone()).collect();
        let ranking = shap_importance(&shap)?;
        out.write_with("shap_importance.csv", |w| {
            let mut t = csv::Writer::from_writer(w);
            t.write_record(["covariate", "mean_abs_shap"])?;
            for (n, v) in &ranking.entries {
                t.write_record([n.clone(), fmt(*v)])?;
            }
            t.flush().map_err(|e| Error::io("<importance>", e))
        })?;
    }

    // image attributions and filter responses
    let tiles = load_tiles(root)?;
    let model = load_model(root)?;
    let train_tiles: Vec<&ImageTile> =
        tiles.iter().filter(|t| splits.get(&t.key.fips) == Some(SplitLabel::Train)).collect();
    let baseline = mean_pixel(if train_tiles.is_empty() { tiles.iter().collect() } else { train_tiles });
    let test_fips = splits.members(SplitLabel::Test);
    let mut chosen: Vec<&ImageTile> = Vec::new();
    for f in &test_fips {
        if chosen.len() >= cfg.explain_tiles {
            break;
        }
        if let Some(t) = tiles.iter().find(|t| &t.key.fips == f) {
            chosen.push(t);
        }
    }
    let predict = model_predictor(&model);
    for (n, t) in chosen.iter().enumerate() {
        let stem = format!("{}_{}_{}_{}", t.key.fips, t.key.school, t.key.row, t.key.col);
        let map = kernel_shap(&predict, t, baseline, cfg.shap_grid, cfg.shap_samples, cfg.seed.wrapping_add(n as u64))?;
        out.write_with(format!("shap/{stem}.csv"), |w| write_attribution(w, &map))?;
        out.write(format!("shap/{stem}.svg"), attribution_svg(t, &map)?.as_bytes())?;
        let act = filter_activations(&model, t, cfg.filter_index)?;
        out.write(format!("filters/{stem}_filter{}.png", cfg.filter_index), &activation_png(&act)?)?;
    }
    out.note(format!("{} covariate SHAP vectors, {} image maps", vectors.len(), chosen.len()));
    Ok(())
}

fn mean_pixel(tiles: Vec<&ImageTile>) -> [f32; 3] {
    let mut acc = [0.0f64; 3];
    for t in &tiles {
        for (a, m) in acc.iter_mut().zip(t.channel_means()) {
            *a += m;
        }
    }
    let n = tiles.len().max(1) as f64;
    acc.map(|a| (a / n) as f32)
}

fn write_attribution(w: &mut Vec<u8>, map: &AttributionMap) -> Result<()> {
    let mut t = csv::Writer::from_writer(w);
    t.write_record(["row", "col", "phi"])?;
    for r in 0..map.grid {
        for c in 0..map.grid {
            t.write_record([r.to_string(), c.to_string(), format!("{:.8e}", map.at(r, c))])?;
        }
    }
    t.write_record(["base_value", "", &format!("{:.8e}", map.base_value)])?;
    t.write_record(["prediction", "", &format!("{:.8e}", map.prediction)])?;
    t.write_record(["efficiency_residual", "", &format!("{:.8e}", map.efficiency_residual)])?;
    t.flush().map_err(|e| Error::io("<attribution>", e))
}

fn read_predictions(root: &Path) -> Result<BTreeMap<String, f64>> {
    let p = need(root, PREDICTIONS, "eval")?;
    let mut rdr = csv::Reader::from_reader(std::io::Cursor::new(read_file(&p)?));
    let mut m = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let v: f64 = rec
            .get(2)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Ingestion { row: i + 1, message: "bad predicted_rate".into() })?;
        m.insert(rec.get(0).unwrap_or("").to_string(), v);
    }
    Ok(m)
}

fn read_clusters(root: &Path) -> Result<(Vec<TileKey>, ClusterAssignment)> {
    let p = need(root, CLUSTERS, "cluster")?;
    let mut rdr = csv::Reader::from_reader(std::io::Cursor::new(read_file(&p)?));
    let mut keys = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = || Error::Ingestion { row: i + 1, message: "malformed cluster row".into() };
        keys.push(TileKey {
            fips: rec.get(0).ok_or_else(bad)?.to_string(),
            school: rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(bad)?,
            row: rec.get(2).and_then(|s| s.parse().ok()).ok_or_else(bad)?,
            col: rec.get(3).and_then(|s| s.parse().ok()).ok_or_else(bad)?,
        });
        labels.push(rec.get(4).and_then(|s| s.parse::<usize>().ok()).ok_or_else(bad)?);
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    Ok((keys, ClusterAssignment { labels, k }))
}

fn report_cmd(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let root = cfg.out_dir.as_path();
    let (records, _) = selected_records(root)?;
    let (d, dropped) = covariate_design(&records)?;
    let fit: RegressionFit = fit_wls(&d)?;
    let std_fit = standardize_then_fit(&d, false)?;
    out.write_with("wls_coefficients.csv", |w| write_coef_table(w, &fit))?;
    out.write_with("wls_fit.csv", |w| write_fit_stats(w, &fit.stats))?;
    out.write_with("wls_standardized.csv", |w| write_coef_table(w, &std_fit))?;
    let mut md = String::from("# Run report\n\n");
    md.push_str(&format!(
        "Covariate model: {} counties, R² = {:.4}, adjusted R² = {:.4}, AIC = {:.2}.\n",
        fit.stats.n, fit.stats.r2, fit.stats.adj_r2, fit.stats.aic
    ));
    if !dropped.is_empty() {
        md.push_str(&format!("Constant columns dropped: {}.\n", dropped.join(", ")));
    }

    if root.join(PREDICTIONS).is_file() {
        let preds = read_predictions(root)?;
        let rows: Vec<usize> = (0..d.nrows()).filter(|&i| preds.contains_key(&d.row_ids[i])).collect();
        let sub_x = d.x.select(ndarray::Axis(0), &rows);
        let sub_w: ndarray::Array1<f64> = rows.iter().map(|&i| d.weights[i]).collect();
        let pred: Vec<f64> = rows.iter().map(|&i| preds[&d.row_ids[i]]).collect();
        let sub = DesignMatrix::new(d.names.clone(), sub_x, sub_w, pred.iter().copied().collect())?;
        let uni = univariable_fits(&pred, &sub)?;
        out.write_with("univariable.csv", |w| write_univariable(w, &uni))?;
        if let Some(top) = uni.first() {
            md.push_str(&format!(
                "Strongest single covariate for predicted mortality: {} (adjusted R² = {:.4}).\n",
                top.covariate, top.adj_r2
            ));
        }
    }

    if root.join(CLUSTERS).is_file() {
        let (keys, assignment) = read_clusters(root)?;
        let by_fips: BTreeMap<&str, &CountyRecord> = records.iter().map(|r| (r.fips.as_str(), r)).collect();
        let mut weights = Vec::with_capacity(keys.len());
        let mut cols: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        let mut labels = Vec::with_capacity(keys.len());
        for (k, l) in keys.iter().zip(&assignment.labels) {
            let Some(c) = by_fips.get(k.fips.as_str()) else { continue };
            labels.push(*l);
            weights.push(match cfg.ttest_weights {
                TTestWeights::Population => c.population as f64,
                TTestWeights::Images => 1.0,
            });
            cols.entry("mortality").or_default().push(c.crude_rate());
            cols.entry("income").or_default().push(c.income.unwrap_or(f64::NAN));
            cols.entry("any_college").or_default().push(c.any_college.unwrap_or(f64::NAN));
            cols.entry("mean_age").or_default().push(c.mean_age);
            cols.entry("prop_hispanic").or_default().push(c.prop_hispanic);
        }
        if assignment.k >= 2 {
            for (name, values) in &cols {
                if values.iter().any(|v| !v.is_finite()) {
                    md.push_str(&format!("t-tests for {name} skipped: missing values.\n"));
                    continue;
                }
                let m = weighted_pairwise_ttests(name, values, &labels, &weights, assignment.k)?;
                out.write_with(format!("ttests/{name}.csv"), |w| write_ttest_matrix(w, &m))?;
                for d in &m.diagnostics {
                    md.push_str(&format!("{d}\n"));
                }
            }
        }
        md.push_str(&format!("Clusters: {} over {} images.\n", assignment.k, keys.len()));
    }
    for (file, label) in [("eval_report.txt", "Evaluation"), ("train_report.txt", "Training")] {
        if let Ok(text) = fs::read_to_string(root.join(file)) {
            md.push_str(&format!("\n## {label}\n\n```\n{text}```\n"));
        }
    }
    out.write("report.md", md.as_bytes())?;
    out.note("report written");
    Ok(())
}
