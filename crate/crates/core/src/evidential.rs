//! Evidence → Dirichlet → (expected probability, uncertainty), and the
//! two-head selection rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dirichlet concentration `α_m = e_m + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletParams {
    alpha: Vec<f64>,
}

impl DirichletParams {
    /// Builds from concentrations directly; every entry must be `≥ 1` and finite.
    pub fn from_alpha(alpha: Vec<f64>) -> Result<Self> {
        for (index, &a) in alpha.iter().enumerate() {
            if !(a >= 1.0) || !a.is_finite() {
                return Err(Error::NegativeEvidence { index, value: a - 1.0 });
            }
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn classes(&self) -> usize {
        self.alpha.len()
    }

    pub fn strength(&self) -> f64 {
        self.alpha.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Left,
    Right,
}

impl Head {
    pub fn as_str(&self) -> &'static str {
        match self {
            Head::Left => "left",
            Head::Right => "right",
        }
    }
}

impl std::fmt::Display for Head {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadBelief {
    pub prob: Vec<f64>,
    pub uncertainty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub head: Head,
    pub class_index: usize,
    /// Expected probabilities of the selected head.
    pub prob: Vec<f64>,
    pub u_left: f64,
    pub u_right: f64,
    pub left: HeadBelief,
    pub right: HeadBelief,
}

impl Prediction {
    pub fn selected_uncertainty(&self) -> f64 {
        match self.head {
            Head::Left => self.u_left,
            Head::Right => self.u_right,
        }
    }
}

pub fn dirichlet_from_evidence(e: &[f64]) -> Result<DirichletParams> {
    for (index, &value) in e.iter().enumerate() {
        if !(value >= 0.0) || !value.is_finite() {
            return Err(Error::NegativeEvidence { index, value });
        }
    }
    Ok(DirichletParams {
        alpha: e.iter().map(|v| v + 1.0).collect(),
    })
}

/// `p_m = α_m / Σα`, `u = M / Σα`.
pub fn prob_and_uncertainty(alpha: &DirichletParams) -> (Vec<f64>, f64) {
    let s = alpha.strength();
    let p = alpha.alpha.iter().map(|a| a / s).collect();
    (p, alpha.classes() as f64 / s)
}

/// Head with the smaller uncertainty; left wins exact ties.
pub fn select_head(u_left: f64, u_right: f64) -> Head {
    if u_right < u_left {
        Head::Right
    } else {
        Head::Left
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn head_belief(evidence: &[f64]) -> Result<HeadBelief> {
    let alpha = dirichlet_from_evidence(evidence)?;
    let (prob, uncertainty) = prob_and_uncertainty(&alpha);
    Ok(HeadBelief { prob, uncertainty })
}

/// Two-head decision from raw evidence vectors.
pub fn predict_from_evidence(e_left: &[f64], e_right: &[f64]) -> Result<Prediction> {
    let left = head_belief(e_left)?;
    let right = head_belief(e_right)?;
    let head = select_head(left.uncertainty, right.uncertainty);
    let chosen = match head {
        Head::Left => &left,
        Head::Right => &right,
    };
    Ok(Prediction {
        head,
        class_index: argmax(&chosen.prob),
        prob: chosen.prob.clone(),
        u_left: left.uncertainty,
        u_right: right.uncertainty,
        left,
        right,
    })
}

pub fn predict(out: &crate::model::ModelOutput) -> Result<Prediction> {
    predict_from_evidence(&out.e_left, &out.e_right)
}
