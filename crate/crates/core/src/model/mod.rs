//! Posterior-marginal predictors and the decoding transforms applied to their output.

mod decoding;
mod mlp;

pub use decoding::{apply_nucleus, apply_temperature, decode_controls};
pub use mlp::{train_predictor, MlpPredictor, TrainConfig, TrainReport, TrainSource};

use crate::discrete::{JointDist, Shape, StateVector, DEFAULT_ENUMERATION_CAP};
use crate::error::Result;
use crate::oracle::{joint_posterior, token_marginals, MarginalTable};

/// Maps a noisy state at OU level `u` to token posterior marginals.
pub trait MarginalPredictor: Sync {
    fn shape(&self) -> Shape;

    fn predict(&self, x: &StateVector, u: f64) -> Result<MarginalTable>;
}

/// Exact marginals by enumeration of the data law.
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    nu: JointDist,
}

impl OraclePredictor {
    pub fn new(nu: JointDist) -> Result<Self> {
        nu.shape().check_cap(DEFAULT_ENUMERATION_CAP)?;
        Ok(Self { nu })
    }

    pub fn nu(&self) -> &JointDist {
        &self.nu
    }
}

impl MarginalPredictor for OraclePredictor {
    fn shape(&self) -> Shape {
        self.nu.shape()
    }

    fn predict(&self, x: &StateVector, u: f64) -> Result<MarginalTable> {
        Ok(token_marginals(&joint_posterior(&self.nu, u, x)?))
    }
}

impl<P: MarginalPredictor + ?Sized> MarginalPredictor for &P {
    fn shape(&self) -> Shape {
        (**self).shape()
    }

    fn predict(&self, x: &StateVector, u: f64) -> Result<MarginalTable> {
        (**self).predict(x, u)
    }
}

impl<P: MarginalPredictor + ?Sized + Send> MarginalPredictor for Box<P> {
    fn shape(&self) -> Shape {
        (**self).shape()
    }

    fn predict(&self, x: &StateVector, u: f64) -> Result<MarginalTable> {
        (**self).predict(x, u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discrete::{encode, make_joint, JointKind, TokenSequence};
    use crate::schedule::ou_coeffs;
    use rand::SeedableRng;

    #[test]
    fn oracle_recovers_prior_marginals() {
        let nu = make_joint(&JointKind::Dirichlet { seed: 4, alpha: 1.0 }, Shape::new(3, 2).unwrap()).unwrap();
        let pred = OraclePredictor::new(nu.clone()).unwrap();
        let x = StateVector::standard_normal(nu.shape(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
        let m = pred.predict(&x, 50.0).unwrap();
        for (a, b) in m.probs().iter().zip(nu.position_marginals()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn oracle_concentrates_and_matches_definition() {
        let s = Shape::new(3, 2).unwrap();
        let nu = make_joint(&JointKind::Copy, s).unwrap();
        let pred = OraclePredictor::new(nu.clone()).unwrap();
        let w = TokenSequence::new(vec![2, 2], 3).unwrap();
        let c = ou_coeffs(0.05).unwrap().c;
        let x = StateVector::from_values(s, encode(&w).values().iter().map(|v| c * v).collect()).unwrap();
        let m = pred.predict(&x, 0.05).unwrap();
        let tv: f64 = m.probs().iter().zip(encode(&w).values()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
        assert!(tv < 1e-2 * s.len as f64);
        for pos in 0..2 {
            let row_tv: f64 = m.row(pos).iter().zip(encode(&w).block(pos)).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
            assert!(row_tv < 1e-2);
        }
        assert_eq!(m, token_marginals(&joint_posterior(&nu, 0.05, &x).unwrap()));
    }
}
