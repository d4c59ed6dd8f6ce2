//! Group-level contrastive objective and the fine-tuning cross-entropy.
//!
//! The contrastive loss is the normalized temperature-scaled cross-entropy
//! over `2P` group representations: for every anchor the candidate set is
//! every other group in the minibatch (its positive partner plus `2(P-1)`
//! negatives from both sides), and the total is the mean over all `2P`
//! anchors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { temperature: 0.1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

fn norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// Cosine similarity `u·v / (|u||v|)`; zero-norm inputs are an error.
pub fn cosine_sim<T: Scalar>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "cosine_sim on vectors of length {} and {}",
            u.len(),
            v.len()
        )));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == T::zero() || nv == T::zero() {
        return Err(Error::InvalidArgument(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    let dot: T = u.iter().zip(v).map(|(&a, &b)| a * b).sum();
    Ok((dot / (nu * nv)).max(-T::one()).min(T::one()))
}

/// Forward state of the contrastive loss, kept for the backward pass.
pub struct ContrastiveKernel<T> {
    pub total: T,
    /// Per-anchor terms: rows `0..P` are `ℓ^A_i`, rows `P..2P` are `ℓ^B_i`.
    pub terms: Vec<T>,
    rows: usize,
    width: usize,
    tau: T,
    z: Vec<T>,
    norms: Vec<T>,
    /// Row-wise softmax over candidates; the diagonal is zero.
    probs: Vec<T>,
}

impl<T: Scalar> ContrastiveKernel<T> {
    pub fn forward(reps: &[T], rows: usize, width: usize, tau: f64) -> Result<Self> {
        LossConfig { temperature: tau }.validate()?;
        if rows % 2 != 0 || rows < 4 {
            return Err(Error::InvalidArgument(format!(
                "contrastive loss needs 2P rows with P >= 2, got {rows}"
            )));
        }
        assert_eq!(reps.len(), rows * width);
        let p = rows / 2;
        let mut z = vec![T::zero(); rows * width];
        let mut norms = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &reps[r * width..(r + 1) * width];
            let n = norm(row);
            if n == T::zero() || !n.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "group representation {r} has zero or non-finite norm"
                )));
            }
            norms[r] = n;
            for (zz, &x) in z[r * width..(r + 1) * width].iter_mut().zip(row) {
                *zz = x / n;
            }
        }
        let tau_t = T::of(tau);
        let mut probs = vec![T::zero(); rows * rows];
        let mut terms = vec![T::zero(); rows];
        for a in 0..rows {
            let za = &z[a * width..(a + 1) * width];
            let pos = (a + p) % rows;
            let logits: Vec<T> = (0..rows)
                .map(|j| {
                    let zj = &z[j * width..(j + 1) * width];
                    za.iter().zip(zj).map(|(&x, &y)| x * y).sum::<T>() / tau_t
                })
                .collect();
            let mx = (0..rows)
                .filter(|&j| j != a)
                .map(|j| logits[j])
                .fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for j in (0..rows).filter(|&j| j != a) {
                let e = (logits[j] - mx).exp();
                probs[a * rows + j] = e;
                denom += e;
            }
            for j in (0..rows).filter(|&j| j != a) {
                probs[a * rows + j] = probs[a * rows + j] / denom;
            }
            terms[a] = -(logits[pos] - mx - denom.ln());
        }
        let total = terms.iter().copied().sum::<T>() / T::of(rows as f64);
        if !total.is_finite() {
            return Err(Error::NonFinite {
                location: "contrastive loss".into(),
                value: total.as_f64(),
            });
        }
        Ok(Self {
            total,
            terms,
            rows,
            width,
            tau: tau_t,
            z,
            norms,
            probs,
        })
    }

    /// Gradient with respect to the raw (unnormalised) representations.
    pub fn backward(&self, _reps: &[T], upstream: T) -> Vec<T> {
        let (rows, width) = (self.rows, self.width);
        let p = rows / 2;
        let scale = upstream / T::of(rows as f64);
        // dL/ds_aj, with s_aj = z_a·z_j / τ
        let mut gs = vec![T::zero(); rows * rows];
        for a in 0..rows {
            let pos = (a + p) % rows;
            for j in 0..rows {
                if j == a {
                    continue;
                }
                let target = if j == pos { T::one() } else { T::zero() };
                gs[a * rows + j] = (self.probs[a * rows + j] - target) * scale;
            }
        }
        let mut dz = vec![T::zero(); rows * width];
        for a in 0..rows {
            for j in 0..rows {
                let c = (gs[a * rows + j] + gs[j * rows + a]) / self.tau;
                if c == T::zero() {
                    continue;
                }
                let zj = &self.z[j * width..(j + 1) * width];
                for (d, &zz) in dz[a * width..(a + 1) * width].iter_mut().zip(zj) {
                    *d += c * zz;
                }
            }
        }
        let mut dr = vec![T::zero(); rows * width];
        for a in 0..rows {
            let za = &self.z[a * width..(a + 1) * width];
            let dza = &dz[a * width..(a + 1) * width];
            let proj: T = za.iter().zip(dza).map(|(&x, &y)| x * y).sum();
            for e in 0..width {
                dr[a * width + e] = (dza[e] - za[e] * proj) / self.norms[a];
            }
        }
        dr
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveLoss<T> {
    pub total: T,
    pub terms_a: Vec<T>,
    pub terms_b: Vec<T>,
}

/// Contrastive loss for `P` positive pairs `(reps_a[i], reps_b[i])`.
pub fn contrastive_loss<T: Scalar>(
    reps_a: &Tensor<T>,
    reps_b: &Tensor<T>,
    tau: f64,
) -> Result<ContrastiveLoss<T>> {
    if reps_a.shape() != reps_b.shape() || reps_a.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "reps_a {:?} and reps_b {:?} must both be [P, H]",
            reps_a.shape(),
            reps_b.shape()
        )));
    }
    let (p, h) = (reps_a.shape()[0], reps_a.shape()[1]);
    if p < 2 {
        return Err(Error::InvalidArgument(format!(
            "contrastive loss needs P >= 2 for negatives, got {p}"
        )));
    }
    let mut stacked = reps_a.data().to_vec();
    stacked.extend_from_slice(reps_b.data());
    let k = ContrastiveKernel::forward(&stacked, 2 * p, h, tau)?;
    Ok(ContrastiveLoss {
        total: k.total,
        terms_a: k.terms[..p].to_vec(),
        terms_b: k.terms[p..].to_vec(),
    })
}

/// Mean cross-entropy and the row-wise softmax of `logits: [n, k]`.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &[T],
    n: usize,
    k: usize,
    labels: &[usize],
) -> Result<(T, Vec<T>)> {
    if n == 0 {
        return Err(Error::InvalidArgument("cross-entropy of an empty batch".into()));
    }
    let mut probs = vec![T::zero(); n * k];
    let mut total = T::zero();
    for r in 0..n {
        let label = labels[r];
        if label >= k {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {k} classes (row {r})"
            )));
        }
        let row = &logits[r * k..(r + 1) * k];
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
        for c in 0..k {
            probs[r * k + c] = (row[c] - mx).exp() / z;
        }
        total += -(row[label] - mx - z.ln());
    }
    Ok((total / T::of(n as f64), probs))
}

/// Mean negative log-softmax probability of the true class.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let (n, k) = match logits.shape() {
        [n, k] => (*n, *k),
        s => return Err(Error::Shape(format!("logits must be [N, K], got {s:?}"))),
    };
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    softmax_cross_entropy(logits.data(), n, k, labels).map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Explicit loops over every similarity; no shared code with the kernel.
    fn brute_force(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> f64 {
        let p = a.len();
        let all: Vec<&Vec<f64>> = a.iter().chain(b.iter()).collect();
        let cos = |u: &Vec<f64>, v: &Vec<f64>| {
            let mut dot = 0.0;
            let mut nu = 0.0;
            let mut nv = 0.0;
            for i in 0..u.len() {
                dot += u[i] * v[i];
                nu += u[i] * u[i];
                nv += v[i] * v[i];
            }
            dot / (nu.sqrt() * nv.sqrt())
        };
        let mut total = 0.0;
        for anchor in 0..2 * p {
            let positive = if anchor < p { anchor + p } else { anchor - p };
            let mut denom = 0.0;
            for other in 0..2 * p {
                if other != anchor {
                    denom += (cos(all[anchor], all[other]) / tau).exp();
                }
            }
            let num = (cos(all[anchor], all[positive]) / tau).exp();
            total += -(num / denom).ln();
        }
        total / (2 * p) as f64
    }

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        let h = rows[0].len();
        Tensor::new(vec![rows.len(), h], rows.concat()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_sim(&[0.3, -2.0], &[0.3, -2.0]).unwrap() - 1.0f64).abs() < 1e-12);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 5.0]).unwrap(), 0.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
        assert!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn orthonormal_two_pair_example() {
        let reps = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let l = contrastive_loss(&t(&reps), &t(&reps), 0.1).unwrap();
        let expected_term = -((10.0f64).exp() / ((10.0f64).exp() + 2.0)).ln();
        assert!((expected_term - 9.08e-5).abs() < 1e-7);
        for term in l.terms_a.iter().chain(&l.terms_b) {
            assert!((term - expected_term).abs() < 1e-12);
        }
        assert!((l.total - expected_term).abs() < 1e-12);
        assert!((l.total - brute_force(&reps, &reps, 0.1)).abs() < 1e-12);
    }

    #[test]
    fn identical_representations_give_log_2p_minus_1() {
        for p in 2..=8 {
            let reps = vec![vec![0.4, -1.2, 3.0]; p];
            let l = contrastive_loss(&t(&reps), &t(&reps), 0.1).unwrap();
            assert!((l.total - ((2 * p - 1) as f64).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let one = t(&[vec![1.0, 0.0]]);
        assert!(contrastive_loss(&one, &one, 0.1).is_err());
        let zero = t(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        assert!(contrastive_loss(&zero, &zero, 0.1).is_err());
        let ok = t(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(contrastive_loss(&ok, &ok, 0.0).is_err());
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let p = rng.random_range(2..=8);
            let h = rng.random_range(4..=16);
            let tau = rng.random_range(0.05..1.0);
            let mk = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
                (0..p)
                    .map(|_| (0..h).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect()
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let l = contrastive_loss(&t(&a), &t(&b), tau).unwrap();
            assert!((l.total - brute_force(&a, &b, tau)).abs() < 1e-9);
        }
    }

    #[test]
    fn approaches_minimum_as_pairs_align() {
        // positives at similarity s, negatives at -1 when reps are antipodal
        let mut last = f64::INFINITY;
        for step in 0..=10 {
            let s = step as f64 / 10.0;
            let angle = (s).acos();
            let a = vec![vec![1.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0]];
            let b = vec![
                vec![angle.cos(), angle.sin(), 0.0],
                vec![-angle.cos(), -angle.sin(), 0.0],
            ];
            let l = contrastive_loss(&t(&a), &t(&b), 0.1).unwrap().total;
            assert!(l < last, "loss must decrease as positives align");
            last = l;
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::new(vec![3, 4], vec![0.7; 12]).unwrap();
        let l = cross_entropy(&uniform, &[0, 1, 3]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let confident = Tensor::new(vec![1, 2], vec![60.0, -60.0]).unwrap();
        assert!(cross_entropy(&confident, &[0]).unwrap() < 1e-20);
        assert!(cross_entropy(&confident, &[2]).is_err());
    }

    #[test]
    fn cross_entropy_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, k) = (7, 4);
        let logits: Vec<f64> = (0..n * k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let mut want = 0.0;
        for r in 0..n {
            let z: f64 = (0..k).map(|c| logits[r * k + c].exp()).sum();
            want -= (logits[r * k + labels[r]].exp() / z).ln();
        }
        want /= n as f64;
        let got = cross_entropy(&Tensor::new(vec![n, k], logits).unwrap(), &labels).unwrap();
        assert!((got - want).abs() < 1e-10);
    }

    proptest! {
        #[test]
        fn invariant_to_positive_scaling(
            seed in 0u64..1000,
            scales in proptest::collection::vec(0.01f64..100.0, 6),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f64>> = (0..6)
                .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let scaled: Vec<Vec<f64>> = rows
                .iter()
                .zip(&scales)
                .map(|(r, s)| r.iter().map(|v| v * s).collect())
                .collect();
            let l1 = contrastive_loss(&t(&rows[..3]), &t(&rows[3..]), 0.2).unwrap().total;
            let l2 = contrastive_loss(&t(&scaled[..3]), &t(&scaled[3..]), 0.2).unwrap().total;
            prop_assert!((l1 - l2).abs() < 1e-10);
        }

        #[test]
        fn invariant_to_consistent_pair_permutation(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = 4;
            let a: Vec<Vec<f64>> = (0..p).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let b: Vec<Vec<f64>> = (0..p).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let perm = [2usize, 0, 3, 1];
            let pa: Vec<Vec<f64>> = perm.iter().map(|&i| a[i].clone()).collect();
            let pb: Vec<Vec<f64>> = perm.iter().map(|&i| b[i].clone()).collect();
            let l1 = contrastive_loss(&t(&a), &t(&b), 0.1).unwrap().total;
            let l2 = contrastive_loss(&t(&pa), &t(&pb), 0.1).unwrap().total;
            prop_assert!((l1 - l2).abs() < 1e-10);
        }
    }
}
