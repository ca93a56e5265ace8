//! Zero-shot retrieval evaluation.
//!
//! Every image of the unseen classes is a query against all the others. A
//! query counts as a hit at `K` when one of its `K` most cosine-similar
//! neighbours shares its class; ties go to the lower gallery index.

use crate::data::{Dataset, ZeroShotSplit};
use crate::error::{Error, Result};
use crate::model::{holistic_embed, LearnerBank, Model};
use crate::tensor::Tensor;

/// Rows must have unit norm within this tolerance.
pub const UNIT_TOL: f64 = 1e-9;
/// Images embedded per forward pass.
pub const EMBED_CHUNK: usize = 64;

/// Unit-norm embeddings with class labels. The gallery doubles as the query
/// set, each query excluding itself.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    rows: usize,
    dim: usize,
    embeddings: Vec<f64>,
    labels: Vec<usize>,
}

impl RetrievalIndex {
    /// `embeddings` is `[n, D]` with unit-norm rows.
    pub fn new(embeddings: &Tensor, labels: &[usize]) -> Result<Self> {
        let &[rows, dim] = embeddings.shape() else {
            return Err(Error::dim("RetrievalIndex", format!("embeddings {:?}", embeddings.shape())));
        };
        if rows != labels.len() {
            return Err(Error::dim("RetrievalIndex", format!("{rows} embeddings for {} labels", labels.len())));
        }
        for (r, row) in embeddings.data().chunks(dim.max(1)).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_TOL {
                return Err(Error::Parameter(format!("row {r} has norm {norm}, expected 1")));
            }
        }
        Ok(RetrievalIndex { rows, dim, embeddings: embeddings.data().to_vec(), labels: labels.to_vec() })
    }

    /// Normalizes each row first.
    pub fn from_raw(embeddings: &Tensor, labels: &[usize]) -> Result<Self> {
        let unit = holistic_embed(std::slice::from_ref(embeddings))?;
        RetrievalIndex::new(&unit, labels)
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.embeddings[r * self.dim..(r + 1) * self.dim]
    }

    /// Position of the best-ranked same-class neighbour of `q` in its
    /// ranking (0 = nearest), or `None` if the class has no other member.
    fn first_hit_rank(&self, q: usize) -> Option<usize> {
        let query = self.row(q);
        let sims: Vec<f64> = (0..self.rows)
            .map(|r| self.row(r).iter().zip(query).map(|(a, b)| a * b).sum())
            .collect();
        let ahead = |a: usize, b: usize| sims[a] > sims[b] || (sims[a] == sims[b] && a < b);
        let best = (0..self.rows)
            .filter(|&r| r != q && self.labels[r] == self.labels[q])
            .reduce(|best, r| if ahead(r, best) { r } else { best })?;
        Some((0..self.rows).filter(|&r| r != q && ahead(r, best)).count())
    }

    /// Recall at each `K`, computed from one ranking per query.
    pub fn recall_table(&self, ks: &[usize]) -> Result<Vec<f64>> {
        if let Some(&k) = ks.iter().find(|&&k| k == 0 || k >= self.rows) {
            return Err(Error::Parameter(format!("K = {k} needs 0 < K < gallery size {}", self.rows)));
        }
        let ranks: Vec<Option<usize>> = (0..self.rows).map(|q| self.first_hit_rank(q)).collect();
        Ok(ks
            .iter()
            .map(|&k| ranks.iter().filter(|r| r.is_some_and(|r| r < k)).count() as f64 / self.rows as f64)
            .collect())
    }
}

/// Fraction of queries with a same-class item among their `K` nearest
/// neighbours.
pub fn recall_at_k(index: &RetrievalIndex, k: usize) -> Result<f64> {
    Ok(index.recall_table(&[k])?[0])
}

/// Learner outputs for every image of `data`, in order.
pub fn embed_dataset(model: &Model, data: &Dataset, walk_steps: usize) -> Result<LearnerBank> {
    let mut bank = LearnerBank { scales: 0, branches: 0, embeddings: Vec::new() };
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EMBED_CHUNK) {
        bank.extend(model.embed(&data.batch(chunk)?, walk_steps)?)?;
    }
    Ok(bank)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecallTable {
    pub ks: Vec<usize>,
    /// Recall of the holistic embedding at each `K`.
    pub holistic: Vec<f64>,
    /// Recall of each scale's concatenated branches alone, `[scale][K]`.
    pub per_root: Vec<Vec<f64>>,
}

impl RecallTable {
    pub fn csv_header(&self) -> String {
        let mut h = String::from("K,recall");
        for i in 0..self.per_root.len() {
            h.push_str(&format!(",root{i}"));
        }
        h
    }

    /// One row per `K`.
    pub fn csv_rows(&self) -> Vec<String> {
        self.ks
            .iter()
            .enumerate()
            .map(|(n, k)| {
                let mut row = format!("{k},{}", self.holistic[n]);
                for root in &self.per_root {
                    row.push_str(&format!(",{}", root[n]));
                }
                row
            })
            .collect()
    }
}

/// Classes of `data` that the split lists as seen, plus any class both
/// halves claim.
fn contamination(data: &Dataset, split: &ZeroShotSplit) -> Vec<usize> {
    let mut bad = split.overlap();
    bad.extend(data.classes().into_iter().filter(|c| split.seen.contains(c)));
    bad.sort_unstable();
    bad.dedup();
    bad
}

/// Recall of the holistic embedding and of each scale on the unseen images.
///
/// Refuses to run if any class is both seen and unseen, or if `unseen`
/// holds images of a seen class.
pub fn evaluate_zero_shot(
    model: &Model,
    unseen: &Dataset,
    split: &ZeroShotSplit,
    ks: &[usize],
    walk_steps: usize,
) -> Result<RecallTable> {
    let bad = contamination(unseen, split);
    if !bad.is_empty() {
        return Err(Error::SplitContamination(bad));
    }
    let bank = embed_dataset(model, unseen, walk_steps)?;
    recall_from_bank(&bank, &unseen.labels, ks)
}

/// [`RecallTable`] for precomputed learner outputs.
pub fn recall_from_bank(bank: &LearnerBank, labels: &[usize], ks: &[usize]) -> Result<RecallTable> {
    let holistic = RetrievalIndex::from_raw(&holistic_embed(&bank.embeddings)?, labels)?.recall_table(ks)?;
    let per_root = (0..bank.scales)
        .map(|i| {
            let parts = &bank.embeddings[i * bank.branches..(i + 1) * bank.branches];
            RetrievalIndex::from_raw(&holistic_embed(parts)?, labels)?.recall_table(ks)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RecallTable { ks: ks.to_vec(), holistic, per_root })
}

/// Mean cosine similarity between the outputs of different branches of the
/// same scale on the same image, over all images, scales and branch pairs.
pub fn branch_similarity(bank: &LearnerBank) -> Result<f64> {
    if bank.branches < 2 {
        return Err(Error::InsufficientBranches(bank.branches));
    }
    let units = bank
        .embeddings
        .iter()
        .map(|e| holistic_embed(std::slice::from_ref(e)))
        .collect::<Result<Vec<_>>>()?;
    let (mut total, mut count) = (0.0, 0usize);
    for i in 0..bank.scales {
        for a in 0..bank.branches {
            for b in a + 1..bank.branches {
                let (ea, eb) = (&units[i * bank.branches + a], &units[i * bank.branches + b]);
                let w = ea.shape()[1];
                for (ra, rb) in ea.data().chunks(w).zip(eb.data().chunks(w)) {
                    total += ra.iter().zip(rb).map(|(x, y)| x * y).sum::<f64>();
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index(rows: &[&[f64]], labels: &[usize]) -> RetrievalIndex {
        RetrievalIndex::from_raw(&Tensor::matrix(rows).unwrap(), labels).unwrap()
    }

    #[test]
    fn singletons_never_hit() {
        let idx = index(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]], &[0, 1, 2]);
        assert_eq!(idx.recall_table(&[1, 2]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identical_pair_hits() {
        let idx = index(&[&[1.0, 2.0], &[1.0, 2.0], &[-1.0, 0.5]], &[0, 0, 1]);
        assert_eq!(recall_at_k(&idx, 1).unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn ties_go_to_the_lower_index() {
        // For query 0, items 1 and 2 are equally close; item 1 wins the tie.
        let idx = index(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]], &[0, 1, 0]);
        assert_eq!(idx.first_hit_rank(0), Some(1));
        let idx = index(&[&[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0]], &[0, 0, 1]);
        assert_eq!(idx.first_hit_rank(0), Some(0));
    }

    #[test]
    fn k_must_be_below_gallery_size() {
        let idx = index(&[&[1.0], &[1.0]], &[0, 0]);
        assert!(recall_at_k(&idx, 2).is_err());
        assert!(recall_at_k(&idx, 0).is_err());
    }

    #[test]
    fn rejects_unnormalized_rows() {
        let t = Tensor::matrix(&[&[2.0, 0.0], &[0.0, 1.0]]).unwrap();
        assert!(RetrievalIndex::new(&t, &[0, 1]).is_err());
    }

    #[test]
    fn branch_similarity_of_copies_is_one() {
        let e = Tensor::matrix(&[&[1.0, 2.0], &[3.0, -1.0]]).unwrap();
        let bank = LearnerBank { scales: 1, branches: 2, embeddings: vec![e.clone(), e] };
        assert!((branch_similarity(&bank).unwrap() - 1.0).abs() < 1e-12);
    }
}
