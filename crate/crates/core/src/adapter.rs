//! Frozen base model plus one low-rank adapter per discovered cluster.
//!
//! The toy backbone scores each pixel as `v · (W_k f_p) + b` with
//! `W_k = W0 + (α/r)·B_k·A_k`. Only `A_k` and `B_k` are trainable.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::loss::{cross_entropy_logit_grad, cross_entropy_loss, sigmoid, soft_dice_loss, soft_dice_prob_grad};
use crate::rng::{self, tag};

/// One image: `P × d_in` per-pixel features and a binary mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Matrix,
    pub mask: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseModel {
    pub w0: Matrix,
    pub readout: Vec<f64>,
    pub bias: f64,
}

impl BaseModel {
    /// `W0 ~ N(0, 1/d_in)`, readout `~ N(0, 1/d_out)`, zero bias.
    pub fn random(d_out: usize, d_in: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, &[tag::BASE_MODEL]);
        let s_in = (d_in as f64).sqrt().recip();
        let s_out = (d_out as f64).sqrt().recip();
        let data = (0..d_out * d_in)
            .map(|_| s_in * rng.sample::<f64, _>(StandardNormal))
            .collect();
        BaseModel {
            w0: Matrix::from_vec(d_out, d_in, data).expect("shape"),
            readout: (0..d_out)
                .map(|_| s_out * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            bias: 0.0,
        }
    }

    pub fn d_out(&self) -> usize {
        self.w0.rows
    }

    pub fn d_in(&self) -> usize {
        self.w0.cols
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankAdapter {
    pub rank: usize,
    /// `α_LoRA`; the update is scaled by `α_LoRA / rank`.
    pub alpha: f64,
    pub a: Matrix,
    pub b: Matrix,
}

impl LowRankAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn param_count(&self) -> usize {
        self.a.data.len() + self.b.data.len()
    }

    /// `A` then `B`, each row-major.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(&self.a.data);
        out.extend_from_slice(&self.b.data);
        out
    }

    pub fn set_params(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.param_count() {
            return Err(Error::LengthMismatch {
                expected: self.param_count(),
                found: theta.len(),
            });
        }
        let split = self.a.data.len();
        self.a.data.copy_from_slice(&theta[..split]);
        self.b.data.copy_from_slice(&theta[split..]);
        Ok(())
    }
}

/// Loss mixture used by [`AdapterBank::gradients`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub cross_entropy: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cross_entropy: 1.0,
            dice: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Mean per-image loss.
    pub loss: f64,
    pub grad_a: Matrix,
    pub grad_b: Matrix,
}

impl Gradients {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = self.grad_a.data.clone();
        out.extend_from_slice(&self.grad_b.data);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterBank {
    pub base: BaseModel,
    pub rank: usize,
    pub alpha: f64,
    pub seed: u64,
    pub adapters: BTreeMap<usize, LowRankAdapter>,
}

impl AdapterBank {
    pub fn new(base: BaseModel, rank: usize, alpha: f64, seed: u64) -> Result<Self> {
        if rank == 0 || rank > base.d_out().min(base.d_in()) {
            return Err(Error::Config(format!(
                "adapter rank {rank} must lie in 1..={}",
                base.d_out().min(base.d_in())
            )));
        }
        Ok(AdapterBank {
            base,
            rank,
            alpha,
            seed,
            adapters: BTreeMap::new(),
        })
    }

    /// Fresh adapter with `B = 0` and `A ~ U(−1/√d_in, 1/√d_in)`, drawn from
    /// a stream keyed by `(seed, cluster_id)`.
    pub fn allocate(&mut self, cluster_id: usize) -> Result<()> {
        if self.adapters.contains_key(&cluster_id) {
            return Err(Error::DuplicateAdapter(cluster_id));
        }
        let (d_out, d_in) = (self.base.d_out(), self.base.d_in());
        let bound = (d_in as f64).sqrt().recip();
        let mut rng = rng::stream(self.seed, &[tag::ADAPTER, cluster_id as u64]);
        let a = (0..self.rank * d_in).map(|_| rng.random_range(-bound..bound)).collect();
        self.adapters.insert(
            cluster_id,
            LowRankAdapter {
                rank: self.rank,
                alpha: self.alpha,
                a: Matrix::from_vec(self.rank, d_in, a)?,
                b: Matrix::zeros(d_out, self.rank),
            },
        );
        Ok(())
    }

    pub fn adapter(&self, cluster_id: usize) -> Result<&LowRankAdapter> {
        self.adapters.get(&cluster_id).ok_or(Error::MissingAdapter(cluster_id))
    }

    pub fn adapter_mut(&mut self, cluster_id: usize) -> Result<&mut LowRankAdapter> {
        self.adapters
            .get_mut(&cluster_id)
            .ok_or(Error::MissingAdapter(cluster_id))
    }

    /// `W0 + (α/r)·B·A`.
    pub fn effective_weight(&self, cluster_id: usize) -> Result<Matrix> {
        let ad = self.adapter(cluster_id)?;
        let ba = ad.b.matmul(&ad.a)?;
        let s = ad.scale();
        let mut w = self.base.w0.clone();
        for (x, d) in w.data.iter_mut().zip(&ba.data) {
            *x += s * d;
        }
        Ok(w)
    }

    /// Collapses the linear head into one `d_in` vector: `W_kᵀ v`.
    fn pixel_weights(&self, cluster_id: usize) -> Result<Vec<f64>> {
        let w = self.effective_weight(cluster_id)?;
        Ok(w.transpose_mul_vec(&self.base.readout))
    }

    fn check_features(&self, features: &Matrix) -> Result<()> {
        if features.cols != self.base.d_in() {
            return Err(Error::DimensionMismatch {
                expected: self.base.d_in(),
                found: features.cols,
            });
        }
        Ok(())
    }

    pub fn forward(&self, cluster_id: usize, features: &Matrix) -> Result<Vec<f64>> {
        self.check_features(features)?;
        let w = self.pixel_weights(cluster_id)?;
        Ok(logits_with(&w, self.base.bias, features))
    }

    /// Logits of the frozen base model alone.
    pub fn base_forward(&self, features: &Matrix) -> Result<Vec<f64>> {
        self.check_features(features)?;
        let w = self.base.w0.transpose_mul_vec(&self.base.readout);
        Ok(logits_with(&w, self.base.bias, features))
    }

    /// Mean per-image `weights.cross_entropy·CE + weights.dice·Dice` over
    /// `samples` and its exact gradient with respect to `A` and `B`.
    pub fn gradients(&self, cluster_id: usize, samples: &[Sample], weights: LossWeights) -> Result<Gradients> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let w = self.pixel_weights(cluster_id)?;
        let d_in = self.base.d_in();
        let n = samples.len() as f64;
        let mut g = vec![0.0; d_in];
        let mut loss = 0.0;
        for sample in samples {
            self.check_features(&sample.features)?;
            let logits = logits_with(&w, self.base.bias, &sample.features);
            let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
            let mut delta = vec![0.0; probs.len()];
            if weights.cross_entropy != 0.0 {
                loss += weights.cross_entropy * cross_entropy_loss(&probs, &sample.mask);
                for (d, c) in delta.iter_mut().zip(cross_entropy_logit_grad(&probs, &sample.mask)) {
                    *d += weights.cross_entropy * c;
                }
            }
            if weights.dice != 0.0 {
                loss += weights.dice * soft_dice_loss(&probs, &sample.mask);
                let gp = soft_dice_prob_grad(&probs, &sample.mask);
                for ((d, gp), p) in delta.iter_mut().zip(gp).zip(&probs) {
                    *d += weights.dice * gp * p * (1.0 - p);
                }
            }
            accumulate_feature_grad(&mut g, &delta, &sample.features, 1.0 / n);
        }
        let (grad_a, grad_b) = self.chain_to_factors(cluster_id, &g)?;
        Ok(Gradients {
            loss: loss / n,
            grad_a,
            grad_b,
        })
    }

    /// Per-sample gradient of the pixel-averaged log-likelihood
    /// `(1/P)·Σ_p log p(y_p | f_p)`, flattened as `A` then `B`.
    pub fn loglik_gradients(&self, cluster_id: usize, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
        let w = self.pixel_weights(cluster_id)?;
        samples
            .iter()
            .map(|sample| {
                self.check_features(&sample.features)?;
                let logits = logits_with(&w, self.base.bias, &sample.features);
                let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
                let delta: Vec<f64> = cross_entropy_logit_grad(&probs, &sample.mask)
                    .into_iter()
                    .map(|d| -d)
                    .collect();
                let mut g = vec![0.0; self.base.d_in()];
                accumulate_feature_grad(&mut g, &delta, &sample.features, 1.0);
                let (ga, gb) = self.chain_to_factors(cluster_id, &g)?;
                let mut flat = ga.data;
                flat.extend_from_slice(&gb.data);
                Ok(flat)
            })
            .collect()
    }

    /// With `∂L/∂W = v gᵀ`: `∂L/∂A = s·(Bᵀv) gᵀ` and `∂L/∂B = s·v (A g)ᵀ`.
    fn chain_to_factors(&self, cluster_id: usize, g: &[f64]) -> Result<(Matrix, Matrix)> {
        let ad = self.adapter(cluster_id)?;
        let s = ad.scale();
        let v = &self.base.readout;
        let btv = ad.b.transpose_mul_vec(v);
        let ag = ad.a.mul_vec(g);
        let mut grad_a = Matrix::zeros(ad.a.rows, ad.a.cols);
        for i in 0..ad.a.rows {
            for j in 0..ad.a.cols {
                grad_a[(i, j)] = s * btv[i] * g[j];
            }
        }
        let mut grad_b = Matrix::zeros(ad.b.rows, ad.b.cols);
        for i in 0..ad.b.rows {
            for j in 0..ad.b.cols {
                grad_b[(i, j)] = s * v[i] * ag[j];
            }
        }
        Ok((grad_a, grad_b))
    }
}

fn logits_with(w: &[f64], bias: f64, features: &Matrix) -> Vec<f64> {
    (0..features.rows).map(|p| dot(w, features.row(p)) + bias).collect()
}

fn accumulate_feature_grad(g: &mut [f64], delta: &[f64], features: &Matrix, scale: f64) {
    for (p, &d) in delta.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        for (gj, f) in g.iter_mut().zip(features.row(p)) {
            *gj += scale * d * f;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_sample(rng: &mut ChaCha8Rng, pixels: usize, d_in: usize) -> Sample {
        let data = (0..pixels * d_in).map(|_| rng.sample(StandardNormal)).collect();
        Sample {
            features: Matrix::from_vec(pixels, d_in, data).unwrap(),
            mask: (0..pixels).map(|_| rng.random_range(0..2u8)).collect(),
        }
    }

    fn trained_bank(seed: u64) -> AdapterBank {
        let mut bank = AdapterBank::new(BaseModel::random(8, 16, seed), 4, 16.0, seed).unwrap();
        bank.allocate(0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ad = bank.adapter_mut(0).unwrap();
        for x in ad.b.data.iter_mut() {
            *x = 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
        bank
    }

    #[test]
    fn fresh_adapter_is_identity() {
        let mut bank = AdapterBank::new(BaseModel::random(8, 16, 1), 4, 16.0, 1).unwrap();
        bank.allocate(0).unwrap();
        assert_eq!(bank.effective_weight(0).unwrap(), bank.base.w0);
        assert!(matches!(bank.allocate(0), Err(Error::DuplicateAdapter(0))));
        assert!(matches!(bank.effective_weight(3), Err(Error::MissingAdapter(3))));

        let mut again = AdapterBank::new(BaseModel::random(8, 16, 1), 4, 16.0, 1).unwrap();
        again.allocate(0).unwrap();
        assert_eq!(bank.adapter(0).unwrap().a, again.adapter(0).unwrap().a);
    }

    #[test]
    fn effective_weight_hand_case() {
        let base = BaseModel {
            w0: Matrix::identity(2),
            readout: vec![1.0, 1.0],
            bias: 0.0,
        };
        let mut bank = AdapterBank::new(base, 1, 2.0, 0).unwrap();
        bank.allocate(0).unwrap();
        let ad = bank.adapter_mut(0).unwrap();
        ad.a = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        ad.b = Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let w = bank.effective_weight(0).unwrap();
        assert_eq!(w.data, vec![3.0, 0.0, 0.0, 1.0]);

        let delta1: Vec<f64> = w.data.iter().zip(&bank.base.w0.data).map(|(a, b)| a - b).collect();
        bank.adapter_mut(0).unwrap().alpha = 4.0;
        let w2 = bank.effective_weight(0).unwrap();
        let delta2: Vec<f64> = w2.data.iter().zip(&bank.base.w0.data).map(|(a, b)| a - b).collect();
        for (a, b) in delta1.iter().zip(&delta2) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn forward_matches_dense_recomputation() {
        let bank = trained_bank(5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sample = random_sample(&mut rng, 16, 16);
        let logits = bank.forward(0, &sample.features).unwrap();
        let w = bank.effective_weight(0).unwrap();
        for p in 0..16 {
            let mut z = bank.base.bias;
            for i in 0..w.rows {
                let mut h = 0.0;
                for j in 0..w.cols {
                    h += w[(i, j)] * sample.features[(p, j)];
                }
                z += bank.base.readout[i] * h;
            }
            assert!((z - logits[p]).abs() < 1e-10);
        }
        let zeros = Matrix::zeros(4, 16);
        assert!(bank.forward(0, &zeros).unwrap().iter().all(|&z| z == bank.base.bias));
        assert!(bank.forward(0, &Matrix::zeros(4, 3)).is_err());

        let mut fresh = trained_bank(5);
        fresh.adapter_mut(0).unwrap().b = Matrix::zeros(8, 4);
        assert_eq!(
            fresh.forward(0, &sample.features).unwrap(),
            fresh.base_forward(&sample.features).unwrap()
        );
    }

    #[test]
    fn zero_b_blocks_gradient_to_a() {
        let mut bank = AdapterBank::new(BaseModel::random(8, 16, 2), 4, 16.0, 2).unwrap();
        bank.allocate(0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples: Vec<Sample> = (0..3).map(|_| random_sample(&mut rng, 16, 16)).collect();
        let g = bank
            .gradients(
                0,
                &samples,
                LossWeights {
                    cross_entropy: 1.0,
                    dice: 0.0,
                },
            )
            .unwrap();
        assert!(g.grad_a.data.iter().all(|&x| x == 0.0));
        assert!(g.grad_b.data.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn saturated_fit_has_tiny_gradient() {
        let mut bank = trained_bank(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut sample = random_sample(&mut rng, 16, 16);
        // Blow up the readout so every logit saturates, then label with the
        // model's own sign.
        bank.base.readout.iter_mut().for_each(|v| *v *= 1e6);
        let logits = bank.forward(0, &sample.features).unwrap();
        sample.mask = crate::loss::threshold(&logits);
        let g = bank
            .gradients(
                0,
                &[sample],
                LossWeights {
                    cross_entropy: 1.0,
                    dice: 0.0,
                },
            )
            .unwrap();
        assert!(g.flat().iter().all(|x| x.abs() < 1e-6));
    }

    #[test]
    fn loglik_gradient_is_negated_cross_entropy_gradient() {
        let bank = trained_bank(6);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = random_sample(&mut rng, 16, 16);
        let ce = bank
            .gradients(
                0,
                std::slice::from_ref(&s),
                LossWeights {
                    cross_entropy: 1.0,
                    dice: 0.0,
                },
            )
            .unwrap()
            .flat();
        let ll = &bank.loglik_gradients(0, &[s]).unwrap()[0];
        for (a, b) in ce.iter().zip(ll) {
            assert!((a + b).abs() < 1e-14);
        }
    }
}
