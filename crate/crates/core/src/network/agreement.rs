use super::model::{forward, ToyModel};
use super::train::sample_routing;
use super::{NetworkError, Sample};
use crate::numerics::{argmax, norm};
use crate::routing::{PredictionTensor, RoutingConfig};
use serde::{Deserialize, Serialize};

/// How the pre-routing class score is read off the votes `u_ij`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialScore {
    /// `‖Σ_i u_ij‖`
    #[default]
    NormOfSum,
    /// `Σ_i ‖u_ij‖`
    SumOfNorms,
}

impl InitialScore {
    fn scores(self, pred: &PredictionTensor) -> Vec<f64> {
        let (i_n, j_n, d) = (pred.inputs(), pred.outputs(), pred.dim());
        (0..j_n)
            .map(|j| match self {
                InitialScore::NormOfSum => {
                    let mut s = vec![0.0; d];
                    for i in 0..i_n {
                        s.iter_mut().zip(pred.vote(i, j)).for_each(|(a, b)| *a += b);
                    }
                    norm(&s)
                }
                InitialScore::SumOfNorms => (0..i_n).map(|i| norm(pred.vote(i, j))).sum(),
            })
            .collect()
    }
}

/// Fractions of samples on which the pre-routing classifier (A) and the
/// link-strength classifier (B) are right or wrong.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementBreakdown {
    pub both_correct: f64,
    pub only_a: f64,
    pub only_b: f64,
    pub both_wrong: f64,
    pub samples: usize,
}

impl AgreementBreakdown {
    pub fn total(&self) -> f64 {
        self.both_correct + self.only_a + self.only_b + self.both_wrong
    }

    pub fn accuracy_a(&self) -> f64 {
        self.both_correct + self.only_a
    }

    pub fn accuracy_b(&self) -> f64 {
        self.both_correct + self.only_b
    }
}

pub fn classifier_agreement(
    model: &ToyModel,
    data: &[Sample],
    cfg: &RoutingConfig,
) -> Result<AgreementBreakdown, NetworkError> {
    classifier_agreement_with(model, data, cfg, InitialScore::default())
}

/// A scores class `j` from the votes alone; B picks `argmax_j Σ_i c_ij` with
/// the links of the final routing pass. Ties go to the lowest class.
pub fn classifier_agreement_with(
    model: &ToyModel,
    data: &[Sample],
    cfg: &RoutingConfig,
    score: InitialScore,
) -> Result<AgreementBreakdown, NetworkError> {
    if data.is_empty() {
        return Err(NetworkError::EmptyDataset);
    }
    let mut counts = [0usize; 4];
    for (k, s) in data.iter().enumerate() {
        let rc = sample_routing(cfg, &[k as u64]);
        let pred = model.predict_votes(&s.x)?;
        let (res, _) = forward(model, &s.x, &rc)?;
        let a = argmax(&score.scores(&pred)) == s.label;
        let c = &res.final_snapshot().c;
        let mass: Vec<f64> = (0..c.cols())
            .map(|j| (0..c.rows()).map(|i| c.get(i, j)).sum())
            .collect();
        let b = argmax(&mass) == s.label;
        counts[match (a, b) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        }] += 1;
    }
    let n = data.len();
    let frac = |c: usize| c as f64 / n as f64;
    Ok(AgreementBreakdown {
        both_correct: frac(counts[0]),
        only_a: frac(counts[1]),
        only_b: frac(counts[2]),
        both_wrong: frac(counts[3]),
        samples: n,
    })
}
