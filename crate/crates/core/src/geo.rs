//! Web Mercator geometry, the school-centred sampling grid and the Static Maps
//! request contract.

use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sphere radius used by Web Mercator.
pub const EARTH_RADIUS_M: f64 = 6_378_137.0;
/// `atan(sinh(π))`, the latitude at which the Mercator square closes.
pub const MAX_MERCATOR_LAT: f64 = 85.051_128_779_806_59;
pub const TILE_PX: f64 = 256.0;
pub const MILE_M: f64 = 1_609.344;
pub const GRID_SIDE: usize = 7;
pub const DEFAULT_ZOOM: u32 = 17;
pub const DEFAULT_SIZE_PX: u32 = 400;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !lat.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(Error::domain(format!("latitude {lat} outside [-90, 90]")));
        }
        if !lon.is_finite() || !(-180.0..180.0).contains(&lon) {
            return Err(Error::domain(format!("longitude {lon} outside [-180, 180)")));
        }
        Ok(Self { lat, lon })
    }

    fn check_mercator(&self) -> Result<()> {
        if self.lat.abs() >= MAX_MERCATOR_LAT {
            return Err(Error::domain(format!(
                "latitude {} outside Web Mercator bounds (±{MAX_MERCATOR_LAT})",
                self.lat
            )));
        }
        Ok(())
    }
}

/// Edge length of the world square in pixels at `zoom`.
pub fn world_size_px(zoom: u32) -> f64 {
    TILE_PX * 2f64.powi(zoom as i32)
}

/// Project to global pixel coordinates at `zoom` (origin top-left, y down).
pub fn latlon_to_world_pixel(p: GeoPoint, zoom: u32) -> Result<(f64, f64)> {
    p.check_mercator()?;
    let size = world_size_px(zoom);
    let x = size * (p.lon + 180.0) / 360.0;
    let phi = p.lat.to_radians();
    let merc = (std::f64::consts::FRAC_PI_4 + phi / 2.0).tan().ln();
    let y = size * (0.5 - merc / (2.0 * std::f64::consts::PI));
    Ok((x, y))
}

pub fn world_pixel_to_latlon(x: f64, y: f64, zoom: u32) -> GeoPoint {
    let size = world_size_px(zoom);
    let lon = x / size * 360.0 - 180.0;
    let n = std::f64::consts::PI * (1.0 - 2.0 * y / size);
    let lat = n.sinh().atan().to_degrees();
    GeoPoint { lat, lon }
}

/// Meters on the ground per pixel at latitude `lat` and `zoom`.
pub fn ground_resolution(lat: f64, zoom: u32) -> Result<f64> {
    GeoPoint { lat, lon: 0.0 }.check_mercator()?;
    let equator = 2.0 * std::f64::consts::PI * EARTH_RADIUS_M * lat.to_radians().cos();
    Ok(equator / world_size_px(zoom))
}

/// Identity of one sampled image: county, school and grid cell.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileKey {
    pub fips: String,
    pub school: u8,
    pub row: u8,
    pub col: u8,
}

impl fmt::Display for TileKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}_{}", self.fips, self.school, self.row, self.col)
    }
}

impl TileKey {
    /// Relative path `{fips}/{school}/{row}_{col}.png`.
    pub fn rel_path(&self) -> std::path::PathBuf {
        std::path::PathBuf::from(&self.fips)
            .join(self.school.to_string())
            .join(format!("{}_{}.png", self.row, self.col))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileSpec {
    pub center: GeoPoint,
    pub zoom: u32,
    pub width_px: u32,
    pub height_px: u32,
    pub key: TileKey,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPlan {
    /// Row-major, row 0 is the northern edge.
    pub tiles: Vec<TileSpec>,
    pub spacing_m: f64,
}

pub fn grid_spacing_m() -> f64 {
    MILE_M / GRID_SIDE as f64
}

/// Lay a 7×7 lattice of tile centres over the square mile around `school`.
///
/// The lattice is centred on the school (cell `(3, 3)`), axis-aligned in
/// projected pixels, with ground spacing of one seventh of a mile measured at
/// the school's latitude.
pub fn plan_grid(school: GeoPoint, county_fips: &str, school_index: u8) -> Result<GridPlan> {
    plan_grid_with(school, county_fips, school_index, DEFAULT_ZOOM, DEFAULT_SIZE_PX)
}

pub fn plan_grid_with(
    school: GeoPoint,
    county_fips: &str,
    school_index: u8,
    zoom: u32,
    size_px: u32,
) -> Result<GridPlan> {
    if size_px == 0 {
        return Err(Error::domain("tile size must be positive"));
    }
    let spacing_m = grid_spacing_m();
    let (x0, y0) = latlon_to_world_pixel(school, zoom)?;
    let step_px = spacing_m / ground_resolution(school.lat, zoom)?;
    let size = world_size_px(zoom);
    let half = (GRID_SIDE / 2) as f64;
    let mut tiles = Vec::with_capacity(GRID_SIDE * GRID_SIDE);
    for row in 0..GRID_SIDE {
        for col in 0..GRID_SIDE {
            let x = x0 + (col as f64 - half) * step_px;
            let y = y0 + (row as f64 - half) * step_px;
            if !(0.0..size).contains(&y) {
                return Err(Error::domain(format!(
                    "grid cell ({row},{col}) of school {school_index} in {county_fips} crosses the Mercator bounds"
                )));
            }
            let mut center = world_pixel_to_latlon(x.rem_euclid(size), y, zoom);
            if center.lon >= 180.0 {
                center.lon -= 360.0;
            }
            if center.lat.abs() >= MAX_MERCATOR_LAT {
                return Err(Error::domain(format!(
                    "grid cell ({row},{col}) lies outside Mercator latitude bounds"
                )));
            }
            tiles.push(TileSpec {
                center,
                zoom,
                width_px: size_px,
                height_px: size_px,
                key: TileKey {
                    fips: county_fips.to_string(),
                    school: school_index,
                    row: row as u8,
                    col: col as u8,
                },
            });
        }
    }
    Ok(GridPlan { tiles, spacing_m })
}

/// Ground span covered along one axis: lattice extent plus one tile footprint.
pub fn covered_span_m(lat: f64, zoom: u32, size_px: u32) -> Result<f64> {
    let footprint = size_px as f64 * ground_resolution(lat, zoom)?;
    Ok((GRID_SIDE - 1) as f64 * grid_spacing_m() + footprint)
}

pub const STATIC_MAPS_BASE: &str = "https://maps.googleapis.com/maps/api/staticmap";

/// Static Maps request for one tile.
pub fn static_map_url(spec: &TileSpec, api_key: &str) -> Result<String> {
    if api_key.is_empty() {
        return Err(Error::Config(vec!["maps API key is empty".into()]));
    }
    Ok(format!(
        "{}&key={api_key}",
        static_map_url_without_key(spec)
    ))
}

/// The request URL up to (not including) the key parameter.
pub fn static_map_url_without_key(spec: &TileSpec) -> String {
    format!(
        "{STATIC_MAPS_BASE}?center={:.6},{:.6}&zoom={}&size={}x{}&maptype=satellite",
        spec.center.lat, spec.center.lon, spec.zoom, spec.width_px, spec.height_px
    )
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    county_fips: String,
    school_index: u8,
    grid_row: u8,
    grid_col: u8,
    lat: f64,
    lon: f64,
    zoom: u32,
    width: u32,
    height: u32,
}

pub fn write_manifest<W: Write>(w: W, tiles: &[TileSpec]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for t in tiles {
        wtr.serialize(ManifestRow {
            county_fips: t.key.fips.clone(),
            school_index: t.key.school,
            grid_row: t.key.row,
            grid_col: t.key.col,
            lat: t.center.lat,
            lon: t.center.lon,
            zoom: t.zoom,
            width: t.width_px,
            height: t.height_px,
        })?;
    }
    wtr.flush().map_err(|e| Error::io("<manifest>", e))?;
    Ok(())
}

pub fn read_manifest<R: Read>(r: R) -> Result<Vec<TileSpec>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<ManifestRow>().enumerate() {
        let row = rec.map_err(|e| Error::Ingestion {
            row: i + 1,
            message: e.to_string(),
        })?;
        let center = GeoPoint::new(row.lat, row.lon).map_err(|e| Error::Ingestion {
            row: i + 1,
            message: e.to_string(),
        })?;
        out.push(TileSpec {
            center,
            zoom: row.zoom,
            width_px: row.width,
            height_px: row.height,
            key: TileKey {
                fips: row.county_fips,
                school: row.school_index,
                row: row.grid_row,
                col: row.grid_col,
            },
        });
    }
    Ok(out)
}
