use super::RoutingError;
use crate::autodiff::VoteDims;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Votes `u[i][j]` (flattened row-major over `i, j, h`) plus the optional
/// input activations and attention side input.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTensor {
    inputs: usize,
    outputs: usize,
    dim: usize,
    u: Vec<f64>,
    a_in: Option<Vec<f64>>,
    h: Option<Vec<f64>>,
}

impl PredictionTensor {
    pub fn new(inputs: usize, outputs: usize, dim: usize, u: Vec<f64>) -> Result<Self, RoutingError> {
        let p = Self {
            inputs,
            outputs,
            dim,
            u,
            a_in: None,
            h: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_activations(mut self, a_in: Vec<f64>) -> Result<Self, RoutingError> {
        self.a_in = Some(a_in);
        self.validate()?;
        Ok(self)
    }

    /// Initial output poses for attention routing, `J × d` row-major.
    pub fn with_side_input(mut self, h: Vec<f64>) -> Result<Self, RoutingError> {
        self.h = Some(h);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), RoutingError> {
        let bad = |m: String| Err(RoutingError::InvalidPrediction(m));
        if self.inputs == 0 || self.outputs == 0 || self.dim == 0 {
            return bad(format!(
                "dimensions must be positive, got I={} J={} d={}",
                self.inputs, self.outputs, self.dim
            ));
        }
        let want = self.inputs * self.outputs * self.dim;
        if self.u.len() != want {
            return bad(format!("expected {want} vote components, found {}", self.u.len()));
        }
        if self.u.iter().any(|v| !v.is_finite()) {
            return bad("votes must be finite".into());
        }
        if let Some(a) = &self.a_in {
            if a.len() != self.inputs {
                return bad(format!("a_in has {} entries, expected {}", a.len(), self.inputs));
            }
            if a.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return bad("activations must lie in [0, 1]".into());
            }
        }
        if let Some(h) = &self.h {
            if h.len() != self.outputs * self.dim {
                return bad(format!(
                    "h has {} components, expected J×d = {}",
                    h.len(),
                    self.outputs * self.dim
                ));
            }
            if h.iter().any(|v| !v.is_finite()) {
                return bad("side input must be finite".into());
            }
        }
        Ok(())
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dims(&self) -> VoteDims {
        VoteDims {
            inputs: self.inputs,
            outputs: self.outputs,
            dim: self.dim,
        }
    }

    pub fn votes(&self) -> &[f64] {
        &self.u
    }

    pub fn votes_mut(&mut self) -> &mut [f64] {
        &mut self.u
    }

    pub fn vote(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.outputs + j) * self.dim;
        &self.u[start..start + self.dim]
    }

    pub fn a_in(&self) -> Option<&[f64]> {
        self.a_in.as_deref()
    }

    pub fn h(&self) -> Option<&[f64]> {
        self.h.as_deref()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("prediction tensors serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, RoutingError> {
        serde_json::from_str(text).map_err(|e| RoutingError::InvalidPrediction(e.to_string()))
    }
}

/// Standard-normal votes scaled by `scale`, activations in `[0, 1)` and a
/// standard-normal side input, all from one seeded stream.
pub fn gaussian_prediction(inputs: usize, outputs: usize, dim: usize, scale: f64, seed: u64) -> PredictionTensor {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |n: usize, s: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..n)
            .map(|_| s * Distribution::<f64>::sample(&StandardNormal, &mut *rng))
            .collect::<Vec<f64>>()
    };
    let u = normal(inputs * outputs * dim, scale, &mut rng);
    let h = normal(outputs * dim, 1.0, &mut rng);
    let a: Vec<f64> = (0..inputs).map(|_| rng.random::<f64>()).collect();
    PredictionTensor {
        inputs,
        outputs,
        dim,
        u,
        a_in: Some(a),
        h: Some(h),
    }
}

#[derive(Serialize, Deserialize)]
struct Wire {
    #[serde(rename = "I")]
    inputs: usize,
    #[serde(rename = "J")]
    outputs: usize,
    d: usize,
    u: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    a_in: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    h: Option<Vec<Vec<f64>>>,
}

impl Serialize for PredictionTensor {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let u = (0..self.inputs)
            .map(|i| (0..self.outputs).map(|j| self.vote(i, j).to_vec()).collect())
            .collect();
        Wire {
            inputs: self.inputs,
            outputs: self.outputs,
            d: self.dim,
            u,
            a_in: self.a_in.clone(),
            h: self
                .h
                .as_ref()
                .map(|h| h.chunks(self.dim).map(<[f64]>::to_vec).collect()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PredictionTensor {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let w = Wire::deserialize(d)?;
        if w.u.len() != w.inputs || w.u.iter().any(|row| row.len() != w.outputs) {
            return Err(D::Error::custom("u must be shaped I × J × d"));
        }
        let mut u = Vec::with_capacity(w.inputs * w.outputs * w.d);
        for vote in w.u.iter().flatten() {
            if vote.len() != w.d {
                return Err(D::Error::custom("every vote must have d components"));
            }
            u.extend_from_slice(vote);
        }
        let h = match w.h {
            Some(rows) => {
                if rows.iter().any(|r| r.len() != w.d) {
                    return Err(D::Error::custom("h rows must have d components"));
                }
                Some(rows.concat())
            }
            None => None,
        };
        let p = PredictionTensor {
            inputs: w.inputs,
            outputs: w.outputs,
            dim: w.d,
            u,
            a_in: w.a_in,
            h,
        };
        p.validate().map_err(D::Error::custom)?;
        Ok(p)
    }
}
