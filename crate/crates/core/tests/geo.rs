mod common;

use common::haversine;
use geomort::geo::*;
use proptest::prelude::*;

#[test]
fn grid_neighbours_are_a_seventh_of_a_mile_apart() {
    for &(lat, lon) in &[(0.0, 0.0), (33.749, -84.388), (-59.5, 120.0), (59.5, -150.0), (47.6, -122.3)] {
        let plan = plan_grid(GeoPoint::new(lat, lon).unwrap(), "01001", 0).unwrap();
        assert_eq!(plan.tiles.len(), 49);
        for r in 0..GRID_SIDE {
            for c in 0..GRID_SIDE {
                let t = &plan.tiles[r * GRID_SIDE + c];
                assert_eq!((t.key.row as usize, t.key.col as usize), (r, c));
                if c + 1 < GRID_SIDE {
                    let d = haversine(t.center, plan.tiles[r * GRID_SIDE + c + 1].center);
                    assert!((d - 229.906).abs() < 0.5, "east step {d} at lat {lat}");
                }
                if r + 1 < GRID_SIDE {
                    let d = haversine(t.center, plan.tiles[(r + 1) * GRID_SIDE + c].center);
                    assert!((d - 229.906).abs() < 0.5, "south step {d} at lat {lat}");
                }
            }
        }
        let mid = &plan.tiles[3 * GRID_SIDE + 3].center;
        assert!((mid.lat - lat).abs() < 1e-9 && (mid.lon - lon).abs() < 1e-9);
    }
}

#[test]
fn row_zero_is_north() {
    let plan = plan_grid(GeoPoint::new(40.0, -75.0).unwrap(), "x", 1).unwrap();
    assert!(plan.tiles[0].center.lat > plan.tiles[48].center.lat);
    assert!(plan.tiles[0].center.lon < plan.tiles[48].center.lon);
}

#[test]
fn equator_ground_resolution() {
    let r = ground_resolution(0.0, 0).unwrap();
    assert!((r - 2.0 * std::f64::consts::PI * EARTH_RADIUS_M / 256.0).abs() < 1e-9);
    let z17 = ground_resolution(0.0, 17).unwrap();
    assert!((z17 - 1.194_328_566_955_879).abs() < 1e-9);
}

#[test]
fn origin_maps_to_world_centre() {
    let (x, y) = latlon_to_world_pixel(GeoPoint::new(0.0, 0.0).unwrap(), 1).unwrap();
    assert_eq!((x, y), (256.0, 256.0));
}

#[test]
fn polar_latitudes_are_rejected() {
    assert!(latlon_to_world_pixel(GeoPoint::new(89.0, 0.0).unwrap(), 17).is_err());
    assert!(GeoPoint::new(91.0, 0.0).is_err());
    assert!(GeoPoint::new(0.0, 180.0).is_err());
    assert!(plan_grid(GeoPoint::new(85.05, 0.0).unwrap(), "x", 0).is_err());
}

#[test]
fn static_map_url_is_exact() {
    let spec = TileSpec {
        center: GeoPoint::new(33.7490, -84.3880).unwrap(),
        zoom: 17,
        width_px: 400,
        height_px: 400,
        key: TileKey::default(),
    };
    assert_eq!(
        static_map_url(&spec, "KEY").unwrap(),
        "https://maps.googleapis.com/maps/api/staticmap?center=33.749000,-84.388000&zoom=17&size=400x400&maptype=satellite&key=KEY"
    );
    assert!(static_map_url(&spec, "").is_err());
}

#[test]
fn covered_span_includes_one_footprint() {
    let span = covered_span_m(0.0, 17, 400).unwrap();
    assert!((span - (6.0 * 1609.344 / 7.0 + 400.0 * 1.194_328_566_955_879)).abs() < 1e-6);
}

#[test]
fn four_schools_make_196_manifest_rows() {
    let mut specs = Vec::new();
    for (i, (lat, lon)) in [(33.7, -84.4), (33.8, -84.3), (33.6, -84.5), (33.9, -84.2)].into_iter().enumerate() {
        specs.extend(plan_grid(GeoPoint::new(lat, lon).unwrap(), "13121", i as u8).unwrap().tiles);
    }
    let mut buf = Vec::new();
    write_manifest(&mut buf, &specs).unwrap();
    let back = read_manifest(buf.as_slice()).unwrap();
    assert_eq!(back.len(), 196);
    assert_eq!(back, specs);
    let keys: std::collections::HashSet<_> = back.iter().map(|t| t.key.clone()).collect();
    assert_eq!(keys.len(), 196);
}

proptest! {
    #[test]
    fn mercator_round_trip(lat in -85.0f64..85.0, lon in -180.0f64..180.0, zoom in 0u32..=21) {
        let p = GeoPoint::new(lat, lon).unwrap();
        let (x, y) = latlon_to_world_pixel(p, zoom).unwrap();
        let q = world_pixel_to_latlon(x, y, zoom);
        prop_assert!((q.lat - lat).abs() < 1e-9);
        prop_assert!((q.lon - lon).abs() < 1e-9);
    }

    #[test]
    fn spacing_holds_below_sixty_degrees(lat in -60.0f64..60.0, lon in -179.0f64..179.0) {
        let plan = plan_grid(GeoPoint::new(lat, lon).unwrap(), "x", 0).unwrap();
        let d = haversine(plan.tiles[24].center, plan.tiles[25].center);
        prop_assert!((d - 229.906).abs() < 0.5);
    }
}
