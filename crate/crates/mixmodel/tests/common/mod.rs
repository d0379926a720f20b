//! Fixture loading shared by the integration suites.

#![allow(dead_code)]

use mixmodel::io::{CurveDocument, ModelDocument};
use mixmodel::local_vol::LocalVolModel;
use mixmodel::market_model::YieldCurve;

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures");

fn read(name: &str) -> String {
    let path = format!("{FIXTURES}/{name}");
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("read {path}: {e}"))
}

pub fn load_curve() -> YieldCurve {
    CurveDocument::from_json(&read("discount_curve.json"))
        .and_then(|d| d.to_curve())
        .expect("curve fixture is valid")
}

pub fn load_model() -> LocalVolModel {
    ModelDocument::from_json(&read("calibrated_model.json"))
        .and_then(|d| d.to_model(load_curve()))
        .expect("model fixture is valid")
}

/// One reference row: observation time, published expected spot, and the
/// annualized percent vols across the moneyness grid.
pub struct ReferenceRow {
    pub t: f64,
    pub expected_spot: f64,
    pub vols_pct: Vec<f64>,
}

pub struct ReferenceGrid {
    pub moneyness: Vec<f64>,
    pub rows: Vec<ReferenceRow>,
}

pub fn load_reference_smiles() -> ReferenceGrid {
    let text = read("reference_smiles.csv");
    let mut lines = text.lines().filter(|l| !l.trim_start().starts_with('#'));
    let header = lines.next().expect("header row");
    let moneyness: Vec<f64> =
        header.split(',').skip(2).map(|c| c.parse().expect("moneyness column")).collect();
    let rows = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let cells: Vec<f64> = l.split(',').map(|c| c.parse().expect("numeric cell")).collect();
            assert_eq!(cells.len(), moneyness.len() + 2, "row width");
            ReferenceRow { t: cells[0], expected_spot: cells[1], vols_pct: cells[2..].to_vec() }
        })
        .collect();
    ReferenceGrid { moneyness, rows }
}

/// (maturity, strike, implied vol) quote triples.
pub fn load_quotes() -> Vec<(f64, f64, f64)> {
    let text = read("market_quotes.csv");
    text.lines()
        .filter(|l| !l.trim_start().starts_with('#') && !l.trim().is_empty())
        .skip(1)
        .map(|l| {
            let c: Vec<f64> = l.split(',').map(|v| v.parse().expect("numeric cell")).collect();
            assert_eq!(c.len(), 3, "quote width");
            (c[0], c[1], c[2])
        })
        .collect()
}
