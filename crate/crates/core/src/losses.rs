//! Pairwise binomial deviance, activation decay and the orthogonality term
//! that keeps activation decay from collapsing the learners to zero.
//!
//! All functions take the per-learner embeddings as graph variables, each of
//! shape `[N, dim]`, in scale-major, branch-minor order.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Scaling of the similarity margin.
    pub alpha: f64,
    /// Similarity at which a pair is neutral.
    pub beta: f64,
    /// Penalty weight on positive pairs.
    pub gamma_pos: f64,
    /// Penalty weight on negative pairs.
    pub gamma_neg: f64,
    /// Weight of the adversarial diversity term.
    pub lambda0: f64,
    /// Weight of activation decay.
    pub lambda1: f64,
    /// Weight of the orthogonality term.
    pub lambda2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 2.0, beta: 0.5, gamma_pos: 1.0, gamma_neg: 35.0, lambda0: 1.0, lambda1: 0.014, lambda2: 0.25 }
    }
}

/// Labels of a minibatch, with pair counts over all unordered pairs `p < q`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairBatch {
    labels: Vec<usize>,
    positives: usize,
    negatives: usize,
}

impl PairBatch {
    pub fn new(labels: &[usize]) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::InvalidBatch(format!("{} samples, need at least 2", labels.len())));
        }
        let mut positives = 0;
        let mut negatives = 0;
        for p in 0..labels.len() {
            for q in (p + 1)..labels.len() {
                if labels[p] == labels[q] {
                    positives += 1;
                } else {
                    negatives += 1;
                }
            }
        }
        if positives == 0 || negatives == 0 {
            return Err(Error::InvalidBatch(format!(
                "{positives} positive and {negatives} negative pairs; need at least one of each"
            )));
        }
        Ok(PairBatch { labels: labels.to_vec(), positives, negatives })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn positives(&self) -> usize {
        self.positives
    }

    pub fn negatives(&self) -> usize {
        self.negatives
    }

    /// Constant `[N, N]` tensors `(slope, offset, weight)` such that the
    /// per-pair loss is `weight · softplus(slope · D + offset)`; zero below
    /// and on the diagonal.
    fn pair_coefficients(&self, cfg: &LossConfig) -> (Tensor, Tensor, Tensor) {
        let n = self.labels.len();
        let mut slope = Tensor::zeros(&[n, n]);
        let mut offset = Tensor::zeros(&[n, n]);
        let mut weight = Tensor::zeros(&[n, n]);
        for p in 0..n {
            for q in (p + 1)..n {
                let similar = self.labels[p] == self.labels[q];
                let (sign, gamma, count) = if similar {
                    (1.0, cfg.gamma_pos, self.positives)
                } else {
                    (-1.0, cfg.gamma_neg, self.negatives)
                };
                // −(2s − 1) · α · (D − β) · γ
                let c = -sign * cfg.alpha * gamma;
                slope.data_mut()[p * n + q] = c;
                offset.data_mut()[p * n + q] = -c * cfg.beta;
                weight.data_mut()[p * n + q] = 1.0 / count as f64;
            }
        }
        (slope, offset, weight)
    }
}

/// Mean over learners of the count-weighted binomial deviance over all
/// within-batch pairs, using cosine similarity of the raw embeddings.
pub fn binomial_deviance(g: &mut Graph, bank: &[Var], pairs: &PairBatch, cfg: &LossConfig) -> Result<Var> {
    if bank.is_empty() {
        return Err(Error::EmptyInput("binomial_deviance"));
    }
    let (slope, offset, weight) = pairs.pair_coefficients(cfg);
    let (slope, offset, weight) = (g.leaf(slope), g.leaf(offset), g.leaf(weight));
    let mut per_learner = Vec::with_capacity(bank.len());
    for &e in bank {
        if g.shape(e).first() != Some(&pairs.len()) || g.shape(e).len() != 2 {
            return Err(Error::dim(
                "binomial_deviance",
                format!("embeddings {:?} for a batch of {}", g.shape(e), pairs.len()),
            ));
        }
        let unit = g.normalize_rows(e)?;
        let unit_t = g.transpose(unit)?;
        let sim = g.matmul(unit, unit_t)?;
        let z = g.mul(sim, slope)?;
        let z = g.add(z, offset)?;
        let sp = g.softplus(z);
        let weighted = g.mul(sp, weight)?;
        per_learner.push(g.sum(weighted));
    }
    let total = sum_all(g, &per_learner)?;
    Ok(g.scale(total, 1.0 / bank.len() as f64))
}

/// `λ1 / (2·L·N) · Σ ‖e‖²` over all `L` learners and `N` samples.
pub fn activation_decay(g: &mut Graph, bank: &[Var], cfg: &LossConfig) -> Result<Var> {
    if bank.is_empty() {
        return Err(Error::EmptyInput("activation_decay"));
    }
    let batch = g.shape(bank[0])[0];
    let mut squares = Vec::with_capacity(bank.len());
    for &e in bank {
        squares.push(g.sum_squares(e)?);
    }
    let total = sum_all(g, &squares)?;
    Ok(g.scale(total, cfg.lambda1 / (2.0 * bank.len() as f64 * batch as f64)))
}

/// `λ2 · Σ ‖ω ωᵀ − I‖²_F` over the learner weight matrices.
pub fn ntri_regularizer(g: &mut Graph, learner_weights: &[Var], cfg: &LossConfig) -> Result<Var> {
    if learner_weights.is_empty() {
        return Err(Error::EmptyInput("ntri_regularizer"));
    }
    let mut terms = Vec::with_capacity(learner_weights.len());
    for &w in learner_weights {
        if g.shape(w).len() != 2 {
            return Err(Error::dim("ntri_regularizer", format!("learner weights {:?}", g.shape(w))));
        }
        let rows = g.shape(w)[0];
        let wt = g.transpose(w)?;
        let gram = g.matmul(w, wt)?;
        let eye = g.leaf(Tensor::identity(rows));
        let dev = g.sub(gram, eye)?;
        terms.push(g.sum_squares(dev)?);
    }
    let total = sum_all(g, &terms)?;
    Ok(g.scale(total, cfg.lambda2))
}

/// Sum of already-weighted loss terms.
pub fn total_loss(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    sum_all(g, terms)
}

fn sum_all(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let (&first, rest) = terms.split_first().ok_or(Error::EmptyInput("loss sum"))?;
    let mut acc = first;
    for &t in rest {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GRAD_TOL};

    fn eval(f: impl FnOnce(&mut Graph) -> Result<Var>) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g).unwrap();
        g.value(v).item()
    }

    /// Unit vectors in the plane at the given cosine to (1, 0).
    fn at_cosine(c: f64) -> [f64; 2] {
        [c, (1.0 - c * c).max(0.0).sqrt()]
    }

    fn deviance(rows: &[[f64; 2]], labels: &[usize]) -> f64 {
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        let e = Tensor::new(&[rows.len(), 2], data).unwrap();
        let pairs = PairBatch::new(labels).unwrap();
        eval(|g| {
            let v = g.leaf(e);
            binomial_deviance(g, &[v], &pairs, &LossConfig::default())
        })
    }

    #[test]
    fn pair_batch_validation() {
        assert!(matches!(PairBatch::new(&[1]), Err(Error::InvalidBatch(_))));
        assert!(matches!(PairBatch::new(&[3, 3, 3]), Err(Error::InvalidBatch(_))));
        assert!(matches!(PairBatch::new(&[1, 2, 3]), Err(Error::InvalidBatch(_))));
        let b = PairBatch::new(&[0, 0, 1, 1]).unwrap();
        assert_eq!((b.positives(), b.negatives()), (2, 4));
    }

    #[test]
    fn both_pairs_at_beta_give_two_ln2() {
        // Three samples at mutual cosine 0.5: one positive pair, two negatives.
        let a = [1.0, 0.0, 0.0];
        let b = [0.5, 0.75f64.sqrt(), 0.0];
        let c3 = (0.5 - 0.5 * 0.5) / 0.75f64.sqrt();
        let c = [0.5, c3, (1.0 - 0.25 - c3 * c3).sqrt()];
        let e = Tensor::new(&[3, 3], [a, b, c].concat()).unwrap();
        let pairs = PairBatch::new(&[0, 0, 1]).unwrap();
        assert_eq!((pairs.positives(), pairs.negatives()), (1, 2));
        let loss = eval(|g| {
            let v = g.leaf(e);
            binomial_deviance(g, &[v], &pairs, &LossConfig::default())
        });
        // Positive term ln2/1 plus two negative terms ln2/2 each.
        assert!((loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn scalar_pair_values() {
        // One positive pair at D = 1 and one negative pair at D = β: the
        // negative term vanishes to ln 2.
        let pos = (1.0f64 + (-1.0f64).exp()).ln();
        let loss = deviance(&[[1.0, 0.0], [1.0, 0.0], at_cosine(0.5)], &[0, 0, 1]);
        // negative pairs: (0,2) and (1,2), both at cosine 0.5 → ln 2 each, weight 1/2.
        assert!((loss - (pos + std::f64::consts::LN_2)).abs() < 1e-12);
        assert!((pos - 0.31326).abs() < 1e-5);

        // Negative pair at D = 1: exponent 35.
        let loss = deviance(&[[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]], &[0, 0, 1]);
        let neg = (1.0f64 + 35.0f64.exp()).ln();
        assert!((loss - (pos + neg)).abs() < 1e-9);
        assert!((neg - 35.0).abs() < 1e-12);
    }

    #[test]
    fn deviance_rejects_zero_embeddings() {
        let pairs = PairBatch::new(&[0, 0, 1]).unwrap();
        let mut g = Graph::new();
        let v = g.leaf(Tensor::zeros(&[3, 4]));
        assert!(matches!(
            binomial_deviance(&mut g, &[v], &pairs, &LossConfig::default()),
            Err(Error::DegenerateVector { .. })
        ));
    }

    #[test]
    fn activation_decay_examples() {
        let cfg = LossConfig::default();
        let v = eval(|g| {
            let e = g.leaf(Tensor::new(&[1, 2], vec![3.0, 4.0])?);
            activation_decay(g, &[e], &cfg)
        });
        assert!((v - 0.175).abs() < 1e-15);
        let zero = eval(|g| {
            let e = g.leaf(Tensor::zeros(&[2, 3]));
            activation_decay(g, &[e], &cfg)
        });
        assert_eq!(zero, 0.0);
        let x = Tensor::new(&[2, 2], vec![0.3, -1.0, 2.0, 0.5]).unwrap();
        let x2 = Tensor::new(&[2, 2], x.data().iter().map(|v| 2.0 * v).collect()).unwrap();
        let a = eval(|g| { let e = g.leaf(x); activation_decay(g, &[e], &cfg) });
        let b = eval(|g| { let e = g.leaf(x2); activation_decay(g, &[e], &cfg) });
        assert!((b - 4.0 * a).abs() < 1e-15);
    }

    #[test]
    fn ntri_examples() {
        let cfg = LossConfig::default();
        let ortho = eval(|g| {
            let w = g.leaf(Tensor::new(&[2, 3], vec![0.6, 0.8, 0.0, 0.0, 0.0, 1.0])?);
            ntri_regularizer(g, &[w], &cfg)
        });
        assert!(ortho.abs() < 1e-12);
        let trivial = eval(|g| {
            let w = g.leaf(Tensor::zeros(&[3, 5]));
            ntri_regularizer(g, &[w], &cfg)
        });
        assert_eq!(trivial, 0.25 * 3.0);
        let single = eval(|g| {
            let w = g.leaf(Tensor::new(&[1, 2], vec![2.0, 0.0])?);
            ntri_regularizer(g, &[w], &cfg)
        });
        assert_eq!(single, 2.25);
    }

    #[test]
    fn total_loss_adds_components() {
        let v = eval(|g| {
            let parts: Vec<Var> = [1.0, 0.2, 0.1, 0.05].iter().map(|&x| g.leaf(Tensor::scalar(x))).collect();
            total_loss(g, &parts)
        });
        assert!((v - 1.35).abs() < 1e-15);
        let zero = eval(|g| {
            let parts: Vec<Var> = (0..4).map(|_| g.leaf(Tensor::scalar(0.0))).collect();
            total_loss(g, &parts)
        });
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn losses_gradcheck() {
        let e1 = Tensor::new(&[4, 3], vec![0.3, -0.2, 0.9, 1.1, 0.4, -0.5, -0.7, 0.2, 0.1, 0.5, 0.5, -0.3]).unwrap();
        let e2 = Tensor::new(&[4, 3], vec![-0.1, 0.8, 0.3, 0.6, -0.9, 0.2, 0.4, 0.4, 0.4, -1.2, 0.1, 0.7]).unwrap();
        let w = Tensor::new(&[2, 3], vec![0.5, -0.3, 0.8, 0.1, 0.9, -0.4]).unwrap();
        let pairs = PairBatch::new(&[0, 0, 1, 1]).unwrap();
        let cfg = LossConfig::default();
        let r = check_gradients(&[e1.clone(), e2.clone()], |g, v| binomial_deviance(g, v, &pairs, &cfg)).unwrap();
        assert!(r.max_rel_err < GRAD_TOL, "deviance {r:?}");
        let r = check_gradients(&[e1, e2], |g, v| activation_decay(g, v, &cfg)).unwrap();
        assert!(r.max_rel_err < GRAD_TOL, "act {r:?}");
        let r = check_gradients(&[w], |g, v| ntri_regularizer(g, v, &cfg)).unwrap();
        assert!(r.max_rel_err < GRAD_TOL, "ntri {r:?}");
    }
}
