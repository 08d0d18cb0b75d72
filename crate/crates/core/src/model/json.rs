//! JSON documents for parameters and latent paths. Matrices are nested
//! row-major arrays and field names follow the usual model symbols.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{Dynamics, Emission, LatentPath, ModelParams, VariantTag};
use crate::error::{Error, Result};
use crate::linalg::{mat_from_rows, mat_to_rows};

type Rows = Vec<Vec<f64>>;

#[allow(non_snake_case)]
#[derive(Serialize, Deserialize)]
struct ParamsDoc {
    variant: VariantTag,
    K: usize,
    M: usize,
    N: usize,
    emission: String,
    A: Vec<Rows>,
    b: Vec<Vec<f64>>,
    Q: Vec<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    C: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    d: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    S: Option<Rows>,
    #[serde(default)]
    permutation: Option<Vec<usize>>,
    /// Variant-specific transition fields ("R", "r", "pi", ...).
    #[serde(flatten)]
    transitions: Map<String, Value>,
}

fn sized(rows: &Rows, shape: (usize, usize), key: &str) -> Result<DMatrix<f64>> {
    let m = mat_from_rows(rows)?;
    if m.shape() != shape {
        return Err(Error::Data(format!(
            "field \"{key}\" has shape {:?}, expected {shape:?}",
            m.shape()
        )));
    }
    Ok(m)
}

fn sized_vec(v: &[f64], n: usize, key: &str) -> Result<DVector<f64>> {
    if v.len() != n {
        return Err(Error::Data(format!(
            "field \"{key}\" has {} entries, expected {n}",
            v.len()
        )));
    }
    Ok(DVector::from_column_slice(v))
}

impl ModelParams {
    pub fn to_json(&self) -> Value {
        let (c, d, s, emission) = match &self.emission {
            Emission::Gaussian { c, d, s } => (
                Some(mat_to_rows(c)),
                Some(d.as_slice().to_vec()),
                Some(mat_to_rows(s)),
                "gaussian",
            ),
            Emission::Bernoulli { c, d } => (Some(mat_to_rows(c)), Some(d.as_slice().to_vec()), None, "bernoulli"),
            Emission::Identity => (None, None, None, "identity"),
        };
        let mut transitions = Map::new();
        self.strategy()
            .write_json(&self.transitions, self.k, self.m, &mut transitions);
        let doc = ParamsDoc {
            variant: self.variant,
            K: self.k,
            M: self.m,
            N: self.n,
            emission: emission.into(),
            A: self.dynamics.iter().map(|d| mat_to_rows(&d.a)).collect(),
            b: self.dynamics.iter().map(|d| d.b.as_slice().to_vec()).collect(),
            Q: self.dynamics.iter().map(|d| mat_to_rows(&d.q)).collect(),
            C: c,
            d,
            S: s,
            permutation: Some(self.permutation.clone()),
            transitions,
        };
        serde_json::to_value(doc).expect("parameter document serializes")
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let doc: ParamsDoc =
            serde_json::from_value(v.clone()).map_err(|e| Error::Data(format!("parameter document: {e}")))?;
        let (k, m, n) = (doc.K, doc.M, doc.N);
        if doc.A.len() != k || doc.b.len() != k || doc.Q.len() != k {
            return Err(Error::Data(format!("need {k} entries in \"A\", \"b\" and \"Q\"")));
        }
        let mut dynamics = Vec::with_capacity(k);
        for i in 0..k {
            dynamics.push(Dynamics {
                a: sized(&doc.A[i], (m, m), "A")?,
                b: sized_vec(&doc.b[i], m, "b")?,
                q: sized(&doc.Q[i], (m, m), "Q")?,
            });
        }
        let need =
            |o: &Option<Rows>, key: &str| o.clone().ok_or_else(|| Error::Data(format!("missing field \"{key}\"")));
        let emission = match doc.emission.as_str() {
            "gaussian" => Emission::Gaussian {
                c: sized(&need(&doc.C, "C")?, (n, m), "C")?,
                d: sized_vec(doc.d.as_deref().unwrap_or(&[]), n, "d")?,
                s: sized(&need(&doc.S, "S")?, (n, n), "S")?,
            },
            "bernoulli" => Emission::Bernoulli {
                c: sized(&need(&doc.C, "C")?, (n, m), "C")?,
                d: sized_vec(doc.d.as_deref().unwrap_or(&[]), n, "d")?,
            },
            "identity" => Emission::Identity,
            other => return Err(Error::Data(format!("unknown emission \"{other}\""))),
        };
        let transitions = doc.variant.strategy().read_json(&doc.transitions, k, m)?;
        let params = ModelParams {
            variant: doc.variant,
            k,
            m,
            n,
            dynamics,
            emission,
            transitions,
            permutation: doc.permutation.unwrap_or_else(|| (0..k).collect()),
        };
        params.validate().map_err(|e| Error::Data(e.to_string()))?;
        Ok(params)
    }
}

impl LatentPath {
    pub fn to_json(&self) -> Value {
        serde_json::json!({
            "z": self.z,
            "x": self.x.iter().map(|v| v.as_slice().to_vec()).collect::<Vec<_>>(),
        })
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        #[derive(Deserialize)]
        struct Doc {
            z: Vec<usize>,
            x: Vec<Vec<f64>>,
        }
        let doc: Doc =
            serde_json::from_value(v.clone()).map_err(|e| Error::Data(format!("latent path document: {e}")))?;
        if doc.z.len() != doc.x.len() {
            return Err(Error::Data("\"z\" and \"x\" lengths differ".into()));
        }
        Ok(LatentPath {
            z: doc.z,
            x: doc.x.into_iter().map(DVector::from_vec).collect(),
        })
    }
}

pub fn write_json_file(path: &Path, v: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::Json {
        context: path.display().to_string(),
        source: e,
    })?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_json_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
