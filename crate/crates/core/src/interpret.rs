//! Shapley attributions for the covariate and image models, importance
//! rankings and first-layer filter responses.

use base64::Engine;
use ndarray::{Array1, Array2};

use crate::covariates::{DesignMatrix, RegressionFit, CONSTANT};
use crate::error::{Error, Result};
use crate::image::net::{ConvRegressor, Scalar};
use crate::image::tile::{encode_png_gray8, ImageTile, CHANNELS};
use crate::linalg::qr_lstsq;
use crate::rng::CounterRng;

/// Largest feature count solved by full coalition enumeration.
pub const EXACT_MAX_FEATURES: usize = 12;
pub const DEFAULT_GRID: usize = 8;
pub const DEFAULT_SAMPLES: usize = 2048;

#[derive(Debug, Clone, PartialEq)]
pub struct ShapVector {
    pub names: Vec<String>,
    pub phi: Vec<f64>,
    pub base_value: f64,
    pub prediction: f64,
}

/// `φⱼ = βⱼ(xⱼ − μⱼ)` with `μ` the weighted background mean; base value `f(μ)`.
///
/// `x` is given with its column names; every fitted non-constant term must be present.
pub fn linear_shap(fit: &RegressionFit, names: &[String], x: &[f64], background: &DesignMatrix) -> Result<ShapVector> {
    if fit.standardized {
        return Err(Error::domain("linear SHAP expects a fit on the original covariate scale"));
    }
    if names.len() != x.len() {
        return Err(Error::domain("covariate names and values differ in length"));
    }
    let wsum: f64 = background.weights.sum();
    let mut out = ShapVector { names: Vec::new(), phi: Vec::new(), base_value: 0.0, prediction: 0.0 };
    for c in &fit.coefficients {
        if c.name == CONSTANT {
            out.base_value += c.estimate;
            out.prediction += c.estimate;
            continue;
        }
        let xi = names
            .iter()
            .position(|n| *n == c.name)
            .map(|i| x[i])
            .ok_or_else(|| Error::domain(format!("point is missing covariate {:?}", c.name)))?;
        let bj = background
            .column_index(&c.name)
            .ok_or_else(|| Error::domain(format!("background is missing covariate {:?}", c.name)))?;
        let mu = background.x.column(bj).iter().zip(background.weights.iter()).map(|(v, w)| v * w).sum::<f64>() / wsum;
        out.names.push(c.name.clone());
        out.phi.push(c.estimate * (xi - mu));
        out.base_value += c.estimate * mu;
        out.prediction += c.estimate * xi;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceRanking {
    pub entries: Vec<(String, f64)>,
}

/// Mean `|φ|` per feature, descending, ties by name.
pub fn shap_importance(vectors: &[ShapVector]) -> Result<ImportanceRanking> {
    let first = vectors.first().ok_or_else(|| Error::domain("no SHAP vectors supplied"))?;
    let mut sums = vec![0.0; first.names.len()];
    for v in vectors {
        if v.names != first.names || v.phi.len() != first.names.len() {
            return Err(Error::domain("SHAP vectors have inconsistent feature names"));
        }
        for (s, p) in sums.iter_mut().zip(&v.phi) {
            *s += p.abs();
        }
    }
    let n = vectors.len() as f64;
    let mut entries: Vec<(String, f64)> = first.names.iter().cloned().zip(sums.into_iter().map(|s| s / n)).collect();
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(ImportanceRanking { entries })
}

/// Superpixel attributions over an `S × S` grid; negative values reduce the predicted rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    pub grid: usize,
    /// Row-major, `grid × grid`.
    pub phi: Vec<f64>,
    /// Model output with every superpixel masked to the baseline.
    pub base_value: f64,
    pub prediction: f64,
    /// `prediction − base_value − Σφ`.
    pub efficiency_residual: f64,
    pub baseline: [f32; 3],
    pub exact: bool,
    pub coalitions: usize,
}

impl AttributionMap {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.phi[row * self.grid + col]
    }
}

/// Pixel-row bounds of superpixel band `i` of `s` over `len` pixels.
fn band(i: usize, s: usize, len: usize) -> (usize, usize) {
    (i * len / s, (i + 1) * len / s)
}

/// Copy of `tile` where superpixels absent from `present` take the baseline colour.
pub fn mask_tile(tile: &ImageTile, grid: usize, present: &[bool], baseline: [f32; 3]) -> ImageTile {
    let mut out = tile.clone();
    for gy in 0..grid {
        let (y0, y1) = band(gy, grid, tile.height);
        for gx in 0..grid {
            if present[gy * grid + gx] {
                continue;
            }
            let (x0, x1) = band(gx, grid, tile.width);
            for (c, &b) in baseline.iter().enumerate().take(CHANNELS) {
                for y in y0..y1 {
                    for x in x0..x1 {
                        out.set(c, y, x, b);
                    }
                }
            }
        }
    }
    out
}

/// Mean of each superpixel (averaged over channels); handy for building test models.
pub fn superpixel_means(tile: &ImageTile, grid: usize) -> Vec<f64> {
    let mut out = vec![0.0; grid * grid];
    for gy in 0..grid {
        let (y0, y1) = band(gy, grid, tile.height);
        for gx in 0..grid {
            let (x0, x1) = band(gx, grid, tile.width);
            let mut s = 0.0;
            for c in 0..CHANNELS {
                for y in y0..y1 {
                    for x in x0..x1 {
                        s += tile.at(c, y, x) as f64;
                    }
                }
            }
            out[gy * grid + gx] = s / (CHANNELS * (y1 - y0) * (x1 - x0)) as f64;
        }
    }
    out
}

fn binom(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Kernel SHAP over superpixels with the empty and full coalitions as equality
/// constraints. Exact enumeration for at most 12 superpixels, otherwise
/// `n_samples` coalitions drawn from the Shapley kernel in complementary pairs.
pub fn kernel_shap<F>(
    predict: F,
    tile: &ImageTile,
    baseline: [f32; 3],
    grid: usize,
    n_samples: usize,
    seed: u64,
) -> Result<AttributionMap>
where
    F: Fn(&ImageTile) -> Result<f64>,
{
    if grid == 0 || grid > tile.height || grid > tile.width {
        return Err(Error::domain(format!("grid {grid} does not fit a {}×{} tile", tile.height, tile.width)));
    }
    let m = grid * grid;
    let exact = m <= EXACT_MAX_FEATURES;
    if !exact && n_samples < 2 * m + 2 {
        return Err(Error::domain(format!("sampling mode needs at least {} samples, got {n_samples}", 2 * m + 2)));
    }
    let eval = |present: &[bool], id: usize| -> Result<f64> {
        let v = predict(&mask_tile(tile, grid, present, baseline))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFiniteCoalition { coalition: id })
        }
    };
    let base_value = eval(&vec![false; m], 0)?;
    let prediction = eval(&vec![true; m], usize::MAX)?;
    let delta = prediction - base_value;

    if m == 1 {
        return Ok(AttributionMap {
            grid,
            phi: vec![delta],
            base_value,
            prediction,
            efficiency_residual: 0.0,
            baseline,
            exact: true,
            coalitions: 2,
        });
    }

    // (coalition, kernel weight)
    let mut coalitions: Vec<(Vec<bool>, f64)> = Vec::new();
    if exact {
        for mask in 1..(1usize << m) - 1 {
            let z: Vec<bool> = (0..m).map(|j| mask >> j & 1 == 1).collect();
            let size = mask.count_ones() as usize;
            let w = (m - 1) as f64 / (binom(m, size) * (size * (m - size)) as f64);
            coalitions.push((z, w));
        }
    } else {
        let mut rng = CounterRng::derive(seed, 0x5AA9);
        // P(|z| = s) ∝ (m − 1) / (s (m − s))
        let size_w: Vec<f64> = (1..m).map(|s| 1.0 / (s * (m - s)) as f64).collect();
        let total: f64 = size_w.iter().sum();
        let mut idx: Vec<usize> = (0..m).collect();
        for _ in 0..n_samples / 2 {
            let mut u = rng.uniform() * total;
            let mut size = m - 1;
            for (i, w) in size_w.iter().enumerate() {
                if u < *w {
                    size = i + 1;
                    break;
                }
                u -= w;
            }
            rng.shuffle(&mut idx);
            let mut z = vec![false; m];
            for &j in &idx[..size] {
                z[j] = true;
            }
            let comp: Vec<bool> = z.iter().map(|b| !b).collect();
            coalitions.push((z, 1.0));
            coalitions.push((comp, 1.0));
        }
    }

    // substitute φ_{m−1} = Δ − Σ_{j<m−1} φ_j
    let rows = coalitions.len();
    let mut a = Array2::<f64>::zeros((rows, m - 1));
    let mut b = Array1::<f64>::zeros(rows);
    for (r, (z, w)) in coalitions.iter().enumerate() {
        let fz = eval(z, r + 1)?;
        let sw = w.sqrt();
        let zl = if z[m - 1] { 1.0 } else { 0.0 };
        for j in 0..m - 1 {
            a[[r, j]] = sw * ((if z[j] { 1.0 } else { 0.0 }) - zl);
        }
        b[r] = sw * (fz - base_value - zl * delta);
    }
    let sol = qr_lstsq(a.view(), b.view());
    let mut phi: Vec<f64> = sol.coef.to_vec();
    let last = delta - phi.iter().sum::<f64>();
    phi.push(last);
    let efficiency_residual = prediction - base_value - phi.iter().sum::<f64>();
    Ok(AttributionMap { grid, phi, base_value, prediction, efficiency_residual, baseline, exact, coalitions: rows + 2 })
}

/// Model prediction closure for [`kernel_shap`].
pub fn model_predictor<T: Scalar>(model: &ConvRegressor<T>) -> impl Fn(&ImageTile) -> Result<f64> + '_ {
    move |t: &ImageTile| {
        let r = t.resized(model.arch.input);
        let x: Vec<T> = r.pixels.iter().map(|&v| T::from_f64(v as f64)).collect();
        Ok(model.forward(&x)?.rate.as_f64())
    }
}

/// Valid-mode cross-correlation of the tile with first-layer kernel `filter`,
/// summed over channels, before bias and activation.
pub fn filter_activations<T: Scalar>(model: &ConvRegressor<T>, tile: &ImageTile, filter: usize) -> Result<Array2<f64>> {
    let k = model.first_layer_kernel(filter)?;
    cross_correlate_valid(tile, &k)
}

pub fn cross_correlate_valid(tile: &ImageTile, kernel: &[[[f64; 3]; 3]]) -> Result<Array2<f64>> {
    if tile.height < 3 || tile.width < 3 {
        return Err(Error::domain("tile smaller than the 3×3 kernel"));
    }
    let (oh, ow) = (tile.height - 2, tile.width - 2);
    let mut out = Array2::zeros((oh, ow));
    for (c, kc) in kernel.iter().enumerate().take(CHANNELS) {
        for y in 0..oh {
            for x in 0..ow {
                let mut s = 0.0;
                for (ky, row) in kc.iter().enumerate() {
                    for (kx, w) in row.iter().enumerate() {
                        s += w * tile.at(c, y + ky, x + kx) as f64;
                    }
                }
                out[[y, x]] += s;
            }
        }
    }
    Ok(out)
}

/// Min–max scaled 8-bit grayscale PNG of a matrix (constant maps render mid-gray).
pub fn activation_png(map: &Array2<f64>) -> Result<Vec<u8>> {
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let gray: Vec<u8> = map
        .iter()
        .map(|&v| if hi > lo { ((v - lo) / (hi - lo) * 255.0).round() as u8 } else { 128 })
        .collect();
    encode_png_gray8(map.ncols(), map.nrows(), &gray)
}

/// SVG with the tile as background and a translucent superpixel overlay:
/// blue where φ < 0, red where φ > 0, opacity by |φ| relative to the largest.
pub fn attribution_svg(tile: &ImageTile, map: &AttributionMap) -> Result<String> {
    let png = tile.encode_png()?;
    let b64 = base64::engine::general_purpose::STANDARD.encode(png);
    let (w, h) = (tile.width, tile.height);
    let scale = (400 / w.max(h)).max(1);
    let (sw, sh) = (w * scale, h * scale);
    let maxabs = map.phi.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{sw}\" height=\"{sh}\" viewBox=\"0 0 {sw} {sh}\">\n\
         <image width=\"{sw}\" height=\"{sh}\" style=\"image-rendering:pixelated\" href=\"data:image/png;base64,{b64}\"/>\n"
    );
    for gy in 0..map.grid {
        let (y0, y1) = band(gy, map.grid, h);
        for gx in 0..map.grid {
            let (x0, x1) = band(gx, map.grid, w);
            let v = map.at(gy, gx);
            let alpha = if maxabs > 0.0 { 0.6 * v.abs() / maxabs } else { 0.0 };
            let colour = if v < 0.0 { "#2166ac" } else { "#b2182b" };
            s.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{colour}\" fill-opacity=\"{alpha:.4}\"/>\n",
                x0 * scale,
                y0 * scale,
                (x1 - x0) * scale,
                (y1 - y0) * scale
            ));
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}
