//! Diagonal empirical Fisher, per-cluster consolidation, and the EWC
//! quadratic penalty.

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterBank, Sample};
use crate::error::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 5000.0;
pub const DEFAULT_FISHER_SAMPLES: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherDiagonal {
    pub values: Vec<f64>,
    pub sample_count: usize,
}

/// Mean elementwise-squared log-likelihood gradient over the first
/// `max_samples` samples, using ground-truth labels.
pub fn estimate_fisher(
    bank: &AdapterBank,
    cluster_id: usize,
    data: &[Sample],
    max_samples: usize,
) -> Result<FisherDiagonal> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if max_samples == 0 {
        return Err(Error::Precondition("fisher_samples must be at least 1".into()));
    }
    let used = &data[..max_samples.min(data.len())];
    let grads = bank.loglik_gradients(cluster_id, used)?;
    let mut values = vec![0.0; bank.adapter(cluster_id)?.param_count()];
    for g in &grads {
        for (v, x) in values.iter_mut().zip(g) {
            *v += x * x;
        }
    }
    let n = used.len() as f64;
    values.iter_mut().for_each(|v| *v /= n);
    Ok(FisherDiagonal {
        values,
        sample_count: used.len(),
    })
}

/// Per-cluster EWC state: running-mean Fisher and the anchor parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsolidationState {
    pub fisher: Option<FisherDiagonal>,
    pub anchor: Option<Vec<f64>>,
    pub tasks_consolidated: usize,
    pub lambda: f64,
}

impl ConsolidationState {
    pub fn new(lambda: f64) -> Self {
        ConsolidationState {
            fisher: None,
            anchor: None,
            tasks_consolidated: 0,
            lambda,
        }
    }

    /// `F̄ ← ((n−1)/n)·F̄ + (1/n)·F_new` (plain copy on the first task) and
    /// overwrite the anchor with `theta_now`.
    pub fn consolidate(&mut self, f_new: FisherDiagonal, n_k: usize, theta_now: &[f64]) -> Result<()> {
        if f_new.values.len() != theta_now.len() {
            return Err(Error::LengthMismatch {
                expected: f_new.values.len(),
                found: theta_now.len(),
            });
        }
        if n_k == 0 {
            return Err(Error::Precondition(
                "cluster task count must include the finished task".into(),
            ));
        }
        self.fisher = Some(match self.fisher.take() {
            None => f_new,
            Some(old) => {
                if old.values.len() != f_new.values.len() {
                    return Err(Error::LengthMismatch {
                        expected: old.values.len(),
                        found: f_new.values.len(),
                    });
                }
                let n = n_k as f64;
                let keep = (n - 1.0) / n;
                FisherDiagonal {
                    values: old
                        .values
                        .iter()
                        .zip(&f_new.values)
                        .map(|(o, x)| keep * o + x / n)
                        .collect(),
                    sample_count: f_new.sample_count,
                }
            }
        });
        self.anchor = Some(theta_now.to_vec());
        self.tasks_consolidated += 1;
        Ok(())
    }

    fn parts(&self, theta: &[f64]) -> Result<(&[f64], &[f64])> {
        let (Some(f), Some(anchor)) = (&self.fisher, &self.anchor) else {
            return Err(Error::Precondition("no consolidated Fisher or anchor yet".into()));
        };
        if theta.len() != anchor.len() || f.values.len() != anchor.len() {
            return Err(Error::LengthMismatch {
                expected: anchor.len(),
                found: theta.len(),
            });
        }
        Ok((&f.values, anchor))
    }

    /// `Σ_i F̄_i (θ_i − θ*_i)²`, without λ.
    pub fn penalty(&self, theta: &[f64]) -> Result<f64> {
        let (f, anchor) = self.parts(theta)?;
        Ok(f.iter()
            .zip(theta.iter().zip(anchor))
            .map(|(fi, (t, a))| fi * (t - a).powi(2))
            .sum())
    }

    pub fn penalty_gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let (f, anchor) = self.parts(theta)?;
        Ok(f.iter()
            .zip(theta.iter().zip(anchor))
            .map(|(fi, (t, a))| 2.0 * fi * (t - a))
            .collect())
    }

    /// Exact minimizer of `‖θ − θ̃‖²/(2η) + λΩ(θ)`, i.e. an implicit step on
    /// the penalty after an explicit step `θ̃` on the data loss.
    pub fn proximal_step(&self, theta_tilde: &mut [f64], step: f64, lambda: f64) -> Result<()> {
        let (f, anchor) = self.parts(theta_tilde)?;
        for ((t, fi), a) in theta_tilde.iter_mut().zip(f).zip(anchor) {
            let k = 2.0 * step * lambda * fi;
            *t = (*t + k * a) / (1.0 + k);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn state(f: &[f64], anchor: &[f64]) -> ConsolidationState {
        let mut s = ConsolidationState::new(DEFAULT_LAMBDA);
        s.consolidate(
            FisherDiagonal {
                values: f.to_vec(),
                sample_count: 1,
            },
            1,
            anchor,
        )
        .unwrap();
        s
    }

    #[test]
    fn consolidation_examples() {
        let mut s = ConsolidationState::new(1.0);
        let f1 = FisherDiagonal {
            values: vec![2.0, 4.0],
            sample_count: 3,
        };
        s.consolidate(f1.clone(), 1, &[0.0, 0.0]).unwrap();
        assert_eq!(s.fisher.as_ref().unwrap(), &f1);
        s.consolidate(
            FisherDiagonal {
                values: vec![0.0, 0.0],
                sample_count: 3,
            },
            2,
            &[1.0, 1.0],
        )
        .unwrap();
        assert_eq!(s.fisher.as_ref().unwrap().values, vec![1.0, 2.0]);
        assert_eq!(s.anchor.as_deref(), Some(&[1.0, 1.0][..]));
        assert_eq!(s.tasks_consolidated, 2);
        assert!(s
            .consolidate(
                FisherDiagonal {
                    values: vec![0.0],
                    sample_count: 1
                },
                3,
                &[1.0, 1.0]
            )
            .is_err());
    }

    #[test]
    fn penalty_examples() {
        let s = state(&[2.0, 1.0], &[1.0, 0.5]);
        assert_eq!(s.penalty(&[1.0, 0.5]).unwrap(), 0.0);
        assert!((s.penalty(&[1.1, 0.0]).unwrap() - 0.27).abs() < 1e-12);
        let g = s.penalty_gradient(&[1.1, 1.0]).unwrap();
        assert!((g[0] - 0.4).abs() < 1e-12 && (g[1] - 1.0).abs() < 1e-12);
        assert_eq!(s.penalty_gradient(&[1.0, 0.5]).unwrap(), vec![0.0, 0.0]);
        let zero = state(&[0.0, 0.0], &[1.0, 0.5]);
        assert_eq!(zero.penalty(&[7.0, -3.0]).unwrap(), 0.0);
        assert!(s.penalty(&[1.0]).is_err());
        assert!(ConsolidationState::new(1.0).penalty(&[1.0]).is_err());
    }

    #[test]
    fn proximal_step_limits() {
        let s = state(&[1.0, 0.0], &[1.0, 1.0]);
        let mut t = vec![5.0, 5.0];
        s.proximal_step(&mut t, 0.1, 1e12).unwrap();
        assert!((t[0] - 1.0).abs() < 1e-9);
        assert_eq!(t[1], 5.0);
    }

    proptest! {
        #[test]
        fn recurrence_is_running_mean(
            fs in proptest::collection::vec(proptest::collection::vec(0.0f64..10.0, 4), 1..12),
        ) {
            let mut s = ConsolidationState::new(1.0);
            for (i, f) in fs.iter().enumerate() {
                s.consolidate(FisherDiagonal { values: f.clone(), sample_count: 1 }, i + 1, &[0.0; 4]).unwrap();
            }
            let got = &s.fisher.unwrap().values;
            for d in 0..4 {
                let mean = fs.iter().map(|f| f[d]).sum::<f64>() / fs.len() as f64;
                prop_assert!((got[d] - mean).abs() < 1e-12 * mean.max(1.0));
            }
        }

        #[test]
        fn penalty_nonnegative_and_gradient_matches_fd(
            f in proptest::collection::vec(0.0f64..5.0, 5),
            theta in proptest::collection::vec(-2.0f64..2.0, 5),
            anchor in proptest::collection::vec(-2.0f64..2.0, 5),
        ) {
            let s = state(&f, &anchor);
            prop_assert!(s.penalty(&theta).unwrap() >= 0.0);
            let g = s.penalty_gradient(&theta).unwrap();
            let h = 1e-6;
            for i in 0..5 {
                let mut up = theta.clone();
                let mut dn = theta.clone();
                up[i] += h;
                dn[i] -= h;
                let fd = (s.penalty(&up).unwrap() - s.penalty(&dn).unwrap()) / (2.0 * h);
                prop_assert!((fd - g[i]).abs() < 1e-6);
            }
        }
    }
}
