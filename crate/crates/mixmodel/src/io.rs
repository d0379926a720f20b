//! Versioned JSON documents for models and discount curves: the on-disk
//! interface of the CLI and the fixture format of the test suite.
//!
//! The schema is lossless for the model class of this crate. A
//! piecewise-constant curve is stored as its interior segment ends plus one
//! value per segment; the last value extends flat, so a constant curve is
//! just `{"levels": [x]}`. Discount-factor pillars are `[t, df_domestic,
//! df_foreign]` triples: the first factor column is the domestic
//! (numeraire-currency) leg.

use crate::error::{ModelError, Result};
use crate::local_vol::LocalVolModel;
use crate::market_model::{
    ComponentSet, DriftCurve, GaussianComponent, MixtureSpec, VolCurve, YieldCurve,
};
use serde::{Deserialize, Serialize};

/// Schema version stamped into every document and checked on load.
pub const ARTIFACT_VERSION: u32 = 1;

fn check_version(kind: &str, version: u32) -> Result<()> {
    if version != ARTIFACT_VERSION {
        return Err(ModelError::InvalidInput(format!(
            "{kind} document version {version} not supported (expected {ARTIFACT_VERSION})"
        )));
    }
    Ok(())
}

fn parse<T: for<'de> Deserialize<'de>>(kind: &str, json: &str) -> Result<T> {
    serde_json::from_str(json)
        .map_err(|e| ModelError::InvalidInput(format!("{kind} document: {e}")))
}

fn render<T: Serialize>(doc: &T) -> String {
    let mut s = serde_json::to_string_pretty(doc).expect("documents serialize infallibly");
    s.push('\n');
    s
}

/// Discount-factor curve document: pillars of (t, df_domestic, df_foreign).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveDocument {
    pub version: u32,
    pub pillars: Vec<(f64, f64, f64)>,
}

impl CurveDocument {
    pub fn new(pillars: Vec<(f64, f64, f64)>) -> Self {
        Self { version: ARTIFACT_VERSION, pillars }
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let doc: Self = parse("curve", json)?;
        check_version("curve", doc.version)?;
        Ok(doc)
    }

    pub fn to_json(&self) -> String {
        render(self)
    }

    pub fn to_curve(&self) -> Result<YieldCurve> {
        YieldCurve::new(self.pillars.clone())
    }
}

/// One piecewise-constant shape: `ends` are the interior breakpoints (one
/// fewer than `values`); the final value extends flat to infinity.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeDocument {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ends: Vec<f64>,
    pub values: Vec<f64>,
}

impl ShapeDocument {
    pub fn constant(value: f64) -> Self {
        Self { ends: vec![], values: vec![value] }
    }

    fn segments(&self, what: &str) -> Result<Vec<(f64, f64)>> {
        if self.values.is_empty() || self.ends.len() + 1 != self.values.len() {
            return Err(ModelError::InvalidInput(format!(
                "{what} shape needs len(ends) + 1 == len(values) >= 1, got {} ends, {} values",
                self.ends.len(),
                self.values.len()
            )));
        }
        let mut seg: Vec<(f64, f64)> =
            self.ends.iter().copied().zip(self.values.iter().copied()).collect();
        seg.push((f64::INFINITY, *self.values.last().expect("non-empty")));
        Ok(seg)
    }

    fn to_vol(&self) -> Result<VolCurve> {
        VolCurve::piecewise(self.segments("vol")?)
    }

    fn to_drift(&self) -> Result<DriftCurve> {
        DriftCurve::piecewise(self.segments("drift")?)
    }

    fn from_segments(segments: &[(f64, f64)]) -> Self {
        let ends = segments[..segments.len() - 1].iter().map(|&(e, _)| e).collect();
        let values = segments.iter().map(|&(_, v)| v).collect();
        Self { ends, values }
    }
}

/// Mixture mode tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeTag {
    Lognormal,
    Normal,
}

/// One normal-mode component: instrumental drift and vol curves.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentDocument {
    pub drift: ShapeDocument,
    pub vol: ShapeDocument,
}

/// Mixture model document. Lognormal mode uses `s0` and `vols`; normal mode
/// uses `components` (the state starts at 0 by construction).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub version: u32,
    pub mode: ModeTag,
    pub weights: Vec<f64>,
    pub epsilon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s0: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub vols: Vec<ShapeDocument>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub components: Vec<ComponentDocument>,
    /// Free-form provenance block (tool, config hash, seed); carried
    /// verbatim on round trips and ignored when rebuilding the spec.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

impl ModelDocument {
    pub fn from_json(json: &str) -> Result<Self> {
        let doc: Self = parse("model", json)?;
        check_version("model", doc.version)?;
        Ok(doc)
    }

    pub fn to_json(&self) -> String {
        render(self)
    }

    pub fn from_spec(spec: &MixtureSpec) -> Self {
        match spec.components() {
            ComponentSet::Lognormal(vols) => Self {
                version: ARTIFACT_VERSION,
                mode: ModeTag::Lognormal,
                weights: spec.weights().to_vec(),
                epsilon: spec.epsilon(),
                s0: Some(spec.s0()),
                vols: vols.iter().map(|v| ShapeDocument::from_segments(v.segments())).collect(),
                components: vec![],
                meta: None,
            },
            ComponentSet::Normal(comps) => Self {
                version: ARTIFACT_VERSION,
                mode: ModeTag::Normal,
                weights: spec.weights().to_vec(),
                epsilon: spec.epsilon(),
                s0: None,
                vols: vec![],
                components: comps
                    .iter()
                    .map(|c| ComponentDocument {
                        drift: ShapeDocument::from_segments(c.drift.segments()),
                        vol: ShapeDocument::from_segments(c.vol.segments()),
                    })
                    .collect(),
                meta: None,
            },
        }
    }

    pub fn to_spec(&self) -> Result<MixtureSpec> {
        match self.mode {
            ModeTag::Lognormal => {
                if !self.components.is_empty() {
                    return Err(ModelError::InvalidInput(
                        "lognormal mode takes `vols`, not `components`".into(),
                    ));
                }
                let s0 = self.s0.ok_or_else(|| {
                    ModelError::InvalidInput("lognormal mode needs `s0`".into())
                })?;
                let vols =
                    self.vols.iter().map(|v| v.to_vol()).collect::<Result<Vec<_>>>()?;
                MixtureSpec::lognormal(self.weights.clone(), vols, s0, self.epsilon)
            }
            ModeTag::Normal => {
                if !self.vols.is_empty() || self.s0.is_some() {
                    return Err(ModelError::InvalidInput(
                        "normal mode takes `components` only (state starts at 0)".into(),
                    ));
                }
                let comps = self
                    .components
                    .iter()
                    .map(|c| {
                        Ok(GaussianComponent::new(c.drift.to_drift()?, c.vol.to_vol()?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                MixtureSpec::normal(self.weights.clone(), comps, self.epsilon)
            }
        }
    }

    /// Build the full model against a curve, in the mode the document names.
    pub fn to_model(&self, curve: YieldCurve) -> Result<LocalVolModel> {
        let spec = self.to_spec()?;
        match self.mode {
            ModeTag::Lognormal => LocalVolModel::lognormal(spec, curve),
            ModeTag::Normal => LocalVolModel::normal(spec, curve),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_model::Support;

    #[test]
    fn curve_document_round_trips() {
        let doc = CurveDocument::new(vec![(1.0, 0.97, 0.98), (2.0, 0.94, 0.96)]);
        let json = doc.to_json();
        let back = CurveDocument::from_json(&json).unwrap();
        assert_eq!(back.pillars, doc.pillars);
        let curve = back.to_curve().unwrap();
        assert_eq!(curve.last_maturity(), 2.0);
        // Identical inputs give byte-identical output.
        assert_eq!(json, back.to_json());
    }

    #[test]
    fn lognormal_document_round_trips_behavior() {
        let spec = MixtureSpec::lognormal(
            vec![0.6, 0.4],
            vec![
                VolCurve::constant(0.1).unwrap(),
                VolCurve::piecewise(vec![(1.0, 0.2), (3.0, 0.3)]).unwrap(),
            ],
            1.07,
            1e-4,
        )
        .unwrap();
        let doc = ModelDocument::from_spec(&spec);
        let back = ModelDocument::from_json(&doc.to_json()).unwrap().to_spec().unwrap();
        assert_eq!(back.m(), 2);
        assert_eq!(back.support(), Support::PositiveHalfLine);
        assert_eq!(back.weights(), spec.weights());
        assert_eq!(back.s0(), spec.s0());
        assert_eq!(back.epsilon(), spec.epsilon());
        for t in [0.5, 1.5, 2.5, 3.5, 10.0] {
            assert_eq!(back.vol_levels(t), spec.vol_levels(t));
        }
    }

    #[test]
    fn normal_document_round_trips_behavior() {
        let comps = vec![
            GaussianComponent::new(
                DriftCurve::constant(0.05),
                VolCurve::constant(0.15).unwrap(),
            ),
            GaussianComponent::new(
                DriftCurve::piecewise(vec![(2.0, -0.04), (f64::INFINITY, 0.01)]).unwrap(),
                VolCurve::constant(0.4).unwrap(),
            ),
        ];
        let spec = MixtureSpec::normal(vec![0.7, 0.3], comps, 1e-3).unwrap();
        let doc = ModelDocument::from_spec(&spec);
        let back = ModelDocument::from_json(&doc.to_json()).unwrap().to_spec().unwrap();
        assert_eq!(back.support(), Support::WholeLine);
        let (orig, copy) = match (spec.components(), back.components()) {
            (ComponentSet::Normal(a), ComponentSet::Normal(b)) => (a, b),
            _ => panic!("normal mode expected"),
        };
        for (a, b) in orig.iter().zip(copy) {
            for t in [0.5, 1.9, 2.1, 5.0] {
                assert_eq!(a.mean(t).unwrap(), b.mean(t).unwrap());
                assert_eq!(a.variance(t).unwrap(), b.variance(t).unwrap());
            }
        }
    }

    #[test]
    fn malformed_documents_are_rejected() {
        assert!(CurveDocument::from_json("{").is_err());
        assert!(CurveDocument::from_json("{\"version\": 99, \"pillars\": []}").is_err());
        // Unknown fields are schema errors, not silently dropped.
        assert!(ModelDocument::from_json(
            "{\"version\": 1, \"mode\": \"lognormal\", \"weights\": [1.0], \
             \"epsilon\": 0.0001, \"s0\": 1.0, \"vols\": [{\"values\": [0.1]}], \
             \"volatility\": 3}"
        )
        .is_err());
        // Mode/field mismatches.
        let missing_s0 = "{\"version\": 1, \"mode\": \"lognormal\", \"weights\": [1.0], \
                          \"epsilon\": 0.0001, \"vols\": [{\"values\": [0.1]}]}";
        assert!(ModelDocument::from_json(missing_s0).unwrap().to_spec().is_err());
        let bad_shape = "{\"version\": 1, \"mode\": \"lognormal\", \"weights\": [1.0], \
                         \"epsilon\": 0.0001, \"s0\": 1.0, \
                         \"vols\": [{\"ends\": [1.0, 2.0], \"values\": [0.1]}]}";
        assert!(ModelDocument::from_json(bad_shape).unwrap().to_spec().is_err());
    }
}
