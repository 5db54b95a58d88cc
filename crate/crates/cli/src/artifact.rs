//! Plain-text artifacts written by the pipeline stages.
//!
//! Every artifact carries the hash of the problem file, the hashes of the
//! artifacts it was computed from, and a hash of its own content.

use std::path::Path;

use roa_core::extract::{Controller, ControllerMeta, Provenance};
use roa_core::inner::InnerCertificate;
use roa_core::outer::{OuterCertificate, SolveReport};
use roa_core::polyalg::Polynomial;
use roa_core::sosmom::MomentVector;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const OUTER_FILE: &str = "outer.json";
pub const CONTROLLER_FILE: &str = "controller.json";
pub const INNER_FILE: &str = "inner.json";
pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const FAILED_FILE: &str = "FAILED";

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("missing artifact {0}")]
    Missing(String),
    #[error("cannot read {path}: {message}")]
    Read { path: String, message: String },
    #[error("{path} is not a valid {kind} artifact: {message}")]
    Malformed { path: String, kind: &'static str, message: String },
    #[error("{0}")]
    Chain(String),
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub trait Hashed: Serialize + DeserializeOwned + Clone {
    const KIND: &'static str;
    fn hash_field(&mut self) -> &mut String;

    /// Hash of the artifact with its own hash field blanked.
    fn content_hash(&self) -> String {
        let mut c = self.clone();
        c.hash_field().clear();
        sha256_hex(serde_json::to_string(&c).expect("artifacts serialize").as_bytes())
    }

    fn seal(mut self) -> Self {
        let h = self.content_hash();
        *self.hash_field() = h;
        self
    }

    fn is_sealed(&self) -> bool {
        let mut c = self.clone();
        *c.hash_field() == self.content_hash()
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("artifacts serialize");
    s.push('\n');
    std::fs::write(path, s)
}

pub fn read_artifact<T: Hashed>(path: &Path) -> Result<T, ArtifactError> {
    if !path.exists() {
        return Err(ArtifactError::Missing(path.display().to_string()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| ArtifactError::Read {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let a: T = serde_json::from_str(&text).map_err(|e| ArtifactError::Malformed {
        path: path.display().to_string(),
        kind: T::KIND,
        message: e.to_string(),
    })?;
    if !a.is_sealed() {
        return Err(ArtifactError::Chain(format!("{} content does not match its hash", path.display())));
    }
    Ok(a)
}

fn parse_poly(n: usize, s: &str, what: &str) -> Result<Polynomial, ArtifactError> {
    Polynomial::parse(n, s).map_err(|e| ArtifactError::Malformed {
        path: what.to_string(),
        kind: "polynomial",
        message: e.to_string(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredMoments {
    pub degree: usize,
    pub values: Vec<f64>,
}

impl StoredMoments {
    pub fn from_moments(y: &MomentVector) -> Self {
        StoredMoments {
            degree: y.degree(),
            values: y.values().to_vec(),
        }
    }

    pub fn to_moments(&self, n: usize) -> MomentVector {
        MomentVector::new(n, self.degree, self.values.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuterArtifact {
    pub problem: String,
    pub problem_hash: String,
    pub nvars: usize,
    pub k: usize,
    pub beta: f64,
    pub u_max: f64,
    pub v: String,
    pub p: Vec<String>,
    /// `mass(mu_T1) - mass(mu_T2)`.
    pub objective: f64,
    /// `integral of v over X`.
    pub dual_objective: f64,
    pub mu: StoredMoments,
    pub sigma: Vec<StoredMoments>,
    pub report: SolveReport,
    pub hash: String,
}

impl Hashed for OuterArtifact {
    const KIND: &'static str = "outer";
    fn hash_field(&mut self) -> &mut String {
        &mut self.hash
    }
}

impl OuterArtifact {
    pub fn certificate(&self) -> Result<OuterCertificate, ArtifactError> {
        Ok(OuterCertificate {
            v: parse_poly(self.nvars, &self.v, "outer v")?,
            p: self.p.iter().map(|s| parse_poly(self.nvars, s, "outer p")).collect::<Result<_, _>>()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerArtifact {
    pub problem_hash: String,
    pub outer_hash: String,
    pub nvars: usize,
    pub provenance: String,
    pub degree: usize,
    pub k: usize,
    /// Description of the reference measure of the projection.
    pub nu: String,
    pub u_max: f64,
    /// Components in the internal `[0, u_max]` input convention.
    pub components: Vec<String>,
    /// Components in the user's input box.
    pub user_components: Vec<String>,
    /// Moment-matching residuals of the raw and of this controller.
    pub raw_residual: Vec<f64>,
    pub residual: Vec<f64>,
    pub hash: String,
}

impl Hashed for ControllerArtifact {
    const KIND: &'static str = "controller";
    fn hash_field(&mut self) -> &mut String {
        &mut self.hash
    }
}

impl ControllerArtifact {
    pub fn controller(&self) -> Result<Controller, ArtifactError> {
        let provenance = match self.provenance.as_str() {
            "Raw" => Provenance::Raw,
            "Projected" => Provenance::Projected,
            other => {
                return Err(ArtifactError::Malformed {
                    path: CONTROLLER_FILE.into(),
                    kind: "controller",
                    message: format!("unknown provenance {other}"),
                })
            }
        };
        Ok(Controller {
            components: self
                .components
                .iter()
                .map(|s| parse_poly(self.nvars, s, "controller component"))
                .collect::<Result<_, _>>()?,
            degree: self.degree,
            provenance,
            meta: ControllerMeta {
                k: self.k,
                nu: self.nu.clone(),
                u_max: self.u_max,
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerArtifact {
    pub problem_hash: String,
    pub outer_hash: String,
    pub controller_hash: String,
    pub nvars: usize,
    pub k: usize,
    pub beta_vec: Vec<f64>,
    /// Closed-loop vector field.
    pub fbar: Vec<String>,
    pub w: String,
    pub v: Vec<String>,
    /// `mass(mu_0)`.
    pub objective: f64,
    pub dual_objective: f64,
    pub report: SolveReport,
    pub hash: String,
}

impl Hashed for InnerArtifact {
    const KIND: &'static str = "inner";
    fn hash_field(&mut self) -> &mut String {
        &mut self.hash
    }
}

impl InnerArtifact {
    pub fn certificate(&self) -> Result<InnerCertificate, ArtifactError> {
        Ok(InnerCertificate {
            w: parse_poly(self.nvars, &self.w, "inner w")?,
            v: self.v.iter().map(|s| parse_poly(self.nvars, s, "inner v")).collect::<Result<_, _>>()?,
        })
    }

    pub fn closed_loop(&self) -> Result<Vec<Polynomial>, ArtifactError> {
        self.fbar.iter().map(|s| parse_poly(self.nvars, s, "closed loop")).collect()
    }
}

/// Checks that the three artifacts belong to one problem and to each other.
pub fn check_chain(problem_hash: &str, outer: &OuterArtifact, ctrl: &ControllerArtifact, inner: &InnerArtifact) -> Result<(), ArtifactError> {
    for (what, h) in [("outer", &outer.problem_hash), ("controller", &ctrl.problem_hash), ("inner", &inner.problem_hash)] {
        if h != problem_hash {
            return Err(ArtifactError::Chain(format!("{what} artifact was computed for a different problem file")));
        }
    }
    if ctrl.outer_hash != outer.hash {
        return Err(ArtifactError::Chain("controller was not extracted from this outer certificate".into()));
    }
    if inner.controller_hash != ctrl.hash || inner.outer_hash != outer.hash {
        return Err(ArtifactError::Chain("inner certificate was not computed from this controller".into()));
    }
    Ok(())
}
