//! Object attention by random-walk propagation over feature-map locations.
//!
//! Every spatial location of a `C×H×W` response map is a node of a complete
//! directed graph. The edge weight from `a` to `b` is the Euclidean distance
//! between their feature vectors, and each node's outbound weights are
//! normalized into transition probabilities. Starting from uniform mass, the
//! walk is iterated `T` times; mass flows along edges, so it accumulates on
//! locations that are dissimilar to everything else.
//!
//! The update is `M ← Dᵀ·M`, the stationary-distribution iteration of the
//! Markov chain with transition matrix `D`. Applying `D` itself to a column
//! vector would average mass over each node's successors, and a
//! row-stochastic matrix maps the uniform vector to itself, so no location
//! could ever stand out.
//!
//! Nothing here holds trainable state: the proposals are pure functions of
//! the response maps.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default number of propagation steps.
pub const DEFAULT_STEPS: usize = 10;
/// Rows whose distance sum falls below this become uniform.
pub const DEGENERATE_ROW_SUM: f64 = 1e-12;
/// Smallest crop side, in pixels.
pub const MIN_CROP_SIDE: usize = 8;
/// Fraction of the way from the mean to the peak at which a proposal is cut.
pub const THRESHOLD_FRACTION: f64 = 0.5;

/// Row-stochastic transition matrix over the `h·w` locations of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMatrix {
    pub h: usize,
    pub w: usize,
    /// Row-major `(h·w) × (h·w)`; entry `[a, b]` is the weight of the edge `a → b`.
    pub data: Vec<f64>,
    pub layer: String,
}

impl WeightMatrix {
    pub fn nodes(&self) -> usize {
        self.h * self.w
    }

    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.data[from * self.nodes() + to]
    }

    pub fn row(&self, from: usize) -> &[f64] {
        let n = self.nodes();
        &self.data[from * n..(from + 1) * n]
    }
}

/// Nonnegative `h×w` mass map summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionProposal {
    pub h: usize,
    pub w: usize,
    pub mass: Vec<f64>,
    pub source: String,
}

impl AttentionProposal {
    pub fn uniform(h: usize, w: usize, source: impl Into<String>) -> Self {
        let n = h * w;
        AttentionProposal { h, w, mass: vec![1.0 / n as f64; n], source: source.into() }
    }

    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// Index of the largest entry (first one on ties).
    pub fn argmax(&self) -> usize {
        self.mass
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.h, self.w], self.mass.clone()).expect("h*w entries")
    }
}

/// Square crop region in input-image pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub center_row: usize,
    pub center_col: usize,
    pub side: usize,
}

impl CropBox {
    pub fn full(image_h: usize, image_w: usize) -> Self {
        let side = image_h.min(image_w);
        CropBox::clamped(image_h / 2, image_w / 2, side, image_h, image_w)
    }

    /// Builds a box of the given side around a center, shifted to lie inside
    /// the image. `side` is capped at the shorter image edge.
    pub fn clamped(center_row: usize, center_col: usize, side: usize, image_h: usize, image_w: usize) -> Self {
        let side = side.min(image_h).min(image_w).max(1);
        let top = center_row.saturating_sub(side / 2).min(image_h - side);
        let left = center_col.saturating_sub(side / 2).min(image_w - side);
        CropBox { center_row: top + side / 2, center_col: left + side / 2, side }
    }

    pub fn top(&self) -> usize {
        self.center_row - self.side / 2
    }

    pub fn left(&self) -> usize {
        self.center_col - self.side / 2
    }

    pub fn fits(&self, image_h: usize, image_w: usize) -> bool {
        self.center_row >= self.side / 2
            && self.center_col >= self.side / 2
            && self.top() + self.side <= image_h
            && self.left() + self.side <= image_w
    }
}

/// Distance graph over the locations of a `[C, H, W]` response map.
pub fn build_weight_matrix(u: &Tensor, layer: impl Into<String>) -> Result<WeightMatrix> {
    let &[c, h, w] = u.shape() else {
        return Err(Error::dim("build_weight_matrix", format!("expected [C, H, W], got {:?}", u.shape())));
    };
    let n = h * w;
    if n < 2 {
        return Err(Error::dim("build_weight_matrix", format!("need at least two locations, got {h}×{w}")));
    }
    // Channel-last copy so each location's feature vector is contiguous.
    let src = u.data();
    let mut feats = vec![0.0; n * c];
    for ch in 0..c {
        for loc in 0..n {
            feats[loc * c + ch] = src[ch * n + loc];
        }
    }
    let mut data = vec![0.0; n * n];
    for a in 0..n {
        for b in (a + 1)..n {
            let fa = &feats[a * c..(a + 1) * c];
            let fb = &feats[b * c..(b + 1) * c];
            let d = fa.iter().zip(fb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            data[a * n + b] = d;
            data[b * n + a] = d;
        }
    }
    for row in data.chunks_mut(n) {
        let sum: f64 = row.iter().sum();
        if sum < DEGENERATE_ROW_SUM {
            row.fill(1.0 / n as f64);
        } else {
            row.iter_mut().for_each(|v| *v /= sum);
        }
    }
    Ok(WeightMatrix { h, w, data, layer: layer.into() })
}

/// One step of mass flow along the edges: `next[b] = Σ_a D[a, b] · mass[a]`.
pub fn random_walk_step(d: &WeightMatrix, mass: &[f64]) -> Vec<f64> {
    let n = d.nodes();
    let mut next = vec![0.0; n];
    for (a, &m) in mass.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        for (nb, &p) in next.iter_mut().zip(d.row(a)) {
            *nb += p * m;
        }
    }
    next
}

/// Propagates uniform initial mass `steps` times.
pub fn propagate(d: &WeightMatrix, steps: usize) -> AttentionProposal {
    let mut p = AttentionProposal::uniform(d.h, d.w, d.layer.clone());
    for _ in 0..steps {
        p.mass = random_walk_step(d, &p.mass);
    }
    p
}

/// Bilinear resampling of an `h×w` map onto an `out_h×out_w` grid.
///
/// Source cell `r` lands on output pixel `r · out_h / h`. That is where a
/// stack of 3×3, pad-1 convolutions with stride 2 centers its receptive
/// field, so response maps line up with the image they came from.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let y = oy as f64 * sy;
        for ox in 0..out_w {
            let x = ox as f64 * sx;
            out.push(sample_bilinear(src, h, w, y, x));
        }
    }
    out
}

/// Value at fractional coordinates, clamped to the map edges.
pub fn sample_bilinear(src: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
    let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Resizes every proposal to `out_h×out_w` as a mass map summing to one,
/// averages them and renormalizes.
///
/// Each input carries equal weight whatever its resolution.
pub fn fuse_proposals(proposals: &[AttentionProposal], out_h: usize, out_w: usize) -> Result<AttentionProposal> {
    if proposals.is_empty() {
        return Err(Error::EmptyInput("fuse_proposals"));
    }
    let mut acc = vec![0.0; out_h * out_w];
    for p in proposals {
        let resized = if (p.h, p.w) == (out_h, out_w) {
            p.mass.clone()
        } else {
            resize_bilinear(&p.mass, p.h, p.w, out_h, out_w)
        };
        let sum: f64 = resized.iter().sum();
        if sum > 0.0 {
            acc.iter_mut().zip(&resized).for_each(|(a, r)| *a += r / sum);
        }
    }
    let total: f64 = acc.iter().sum();
    if total <= 0.0 {
        return Ok(AttentionProposal::uniform(out_h, out_w, "fused"));
    }
    acc.iter_mut().for_each(|v| *v /= total);
    Ok(AttentionProposal { h: out_h, w: out_w, mass: acc, source: "fused".into() })
}

/// `mean + 0.5 · (max − mean)` of a mass map.
pub fn attention_threshold(mass: &[f64]) -> f64 {
    let mean = mass.iter().sum::<f64>() / mass.len() as f64;
    let max = mass.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    mean + THRESHOLD_FRACTION * (max - mean)
}

/// Square box around the region where the proposal exceeds
/// `mean + 0.5 · (max − mean)`.
///
/// The proposal may be coarser than the image; its cells are scaled to
/// pixels. Constant proposals yield the full image.
pub fn crop_box(m: &AttentionProposal, image_h: usize, image_w: usize) -> CropBox {
    let max = m.mass.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = m.mass.iter().copied().fold(f64::INFINITY, f64::min);
    if max - min <= f64::EPSILON * max.abs() {
        return CropBox::full(image_h, image_w);
    }
    let tau = attention_threshold(&m.mass);

    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..m.h {
        for c in 0..m.w {
            if m.mass[r * m.w + c] >= tau {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    if r0 == usize::MAX {
        return CropBox::full(image_h, image_w);
    }

    let sy = image_h as f64 / m.h as f64;
    let sx = image_w as f64 / m.w as f64;
    let (y0, y1) = ((r0 as f64 * sy).floor() as usize, (((r1 + 1) as f64 * sy).ceil() as usize).min(image_h));
    let (x0, x1) = ((c0 as f64 * sx).floor() as usize, (((c1 + 1) as f64 * sx).ceil() as usize).min(image_w));
    let side = (y1 - y0).max(x1 - x0).max(MIN_CROP_SIDE);
    CropBox::clamped((y0 + y1) / 2, (x0 + x1) / 2, side, image_h, image_w)
}

/// Bilinearly resamples the boxed region of a `[C, H, W]` image back to `H×W`.
pub fn crop_and_zoom(image: &Tensor, b: &CropBox) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::dim("crop_and_zoom", format!("expected [C, H, W], got {:?}", image.shape())));
    };
    if !b.fits(h, w) {
        return Err(Error::Parameter(format!("{b:?} does not fit a {h}×{w} image")));
    }
    let scale_y = b.side as f64 / h as f64;
    let scale_x = b.side as f64 / w as f64;
    let (top, left) = (b.top() as f64, b.left() as f64);
    let mut out = Vec::with_capacity(c * h * w);
    for plane in image.data().chunks(h * w) {
        for oy in 0..h {
            let y = top + (oy as f64 + 0.5) * scale_y - 0.5;
            for ox in 0..w {
                let x = left + (ox as f64 + 0.5) * scale_x - 0.5;
                out.push(sample_bilinear(plane, h, w, y, x));
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Full object-attention pass for one image: a proposal per response map,
/// fused at image resolution.
pub fn object_attention<S: AsRef<str>>(
    maps: &[(S, Tensor)],
    image_h: usize,
    image_w: usize,
    steps: usize,
) -> Result<AttentionProposal> {
    let proposals = maps
        .iter()
        .map(|(layer, u)| build_weight_matrix(u, layer.as_ref()).map(|d| propagate(&d, steps)))
        .collect::<Result<Vec<_>>>()?;
    fuse_proposals(&proposals, image_h, image_w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(c: usize, h: usize, w: usize, loc_feats: &[&[f64]]) -> Tensor {
        // loc_feats[loc][ch] → [C, H, W]
        let n = h * w;
        let mut data = vec![0.0; c * n];
        for (loc, f) in loc_feats.iter().enumerate() {
            for ch in 0..c {
                data[ch * n + loc] = f[ch];
            }
        }
        Tensor::new(&[c, h, w], data).unwrap()
    }

    #[test]
    fn identical_pair_falls_back_to_uniform() {
        let d = build_weight_matrix(&map(2, 1, 2, &[&[1.0, 2.0], &[1.0, 2.0]]), "l").unwrap();
        assert_eq!(d.data, vec![0.5; 4]);
    }

    #[test]
    fn distinct_pair_has_single_neighbor_rows() {
        let d = build_weight_matrix(&map(1, 1, 2, &[&[0.0], &[3.0]]), "l").unwrap();
        assert_eq!(d.data, vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn two_by_two_hand_computed_row() {
        let d = build_weight_matrix(&map(1, 2, 2, &[&[0.0], &[1.0], &[2.0], &[4.0]]), "l").unwrap();
        let expected = [0.0, 1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0];
        for (got, want) in d.row(0).iter().zip(expected) {
            assert!((got - want).abs() < 1e-15);
        }
        for a in 0..4 {
            assert!((d.row(a).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn weight_matrix_needs_two_locations() {
        assert!(build_weight_matrix(&Tensor::zeros(&[3, 1, 1]), "l").is_err());
        assert!(build_weight_matrix(&Tensor::zeros(&[3, 4]), "l").is_err());
    }

    #[test]
    fn uniform_and_symmetric_fixed_points() {
        let uniform = WeightMatrix { h: 2, w: 2, data: vec![0.25; 16], layer: "u".into() };
        for t in [1, 3, 10] {
            assert!(propagate(&uniform, t).mass.iter().all(|&m| (m - 0.25).abs() < 1e-15));
        }
        let swap = WeightMatrix { h: 1, w: 2, data: vec![0.0, 1.0, 1.0, 0.0], layer: "s".into() };
        for t in [1, 2, 7] {
            assert_eq!(propagate(&swap, t).mass, vec![0.5, 0.5]);
        }
    }

    #[test]
    fn exactly_identical_background_makes_a_two_cycle() {
        // Eight identical vectors and one outlier: every background row points
        // only at the outlier and the outlier row is uniform over the
        // background, so the chain has period two.
        let bg: &[f64] = &[1.0, 1.0];
        let out: &[f64] = &[5.0, -3.0];
        let d = build_weight_matrix(&map(2, 3, 3, &[bg, bg, bg, bg, out, bg, bg, bg, bg]), "l").unwrap();
        let odd = propagate(&d, 1);
        assert!((odd.mass[4] - 8.0 / 9.0).abs() < 1e-12);
        assert_eq!(odd.argmax(), 4);
        let even = propagate(&d, 10);
        assert!(even.mass.iter().all(|&m| (m - 1.0 / 9.0).abs() < 1e-12));
    }

    #[test]
    fn fuse_examples() {
        let uni = AttentionProposal::uniform(2, 2, "a");
        let one_hot = AttentionProposal { h: 2, w: 2, mass: vec![0.0, 0.0, 0.0, 1.0], source: "b".into() };
        let fused = fuse_proposals(&[uni.clone(), one_hot], 2, 2).unwrap();
        for (got, want) in fused.mass.iter().zip([0.125, 0.125, 0.125, 0.625]) {
            assert!((got - want).abs() < 1e-15);
        }
        let same = fuse_proposals(&[uni.clone(), uni.clone()], 2, 2).unwrap();
        assert_eq!(same.mass, uni.mass);
        assert!(matches!(fuse_proposals(&[], 2, 2), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn fuse_resizes_to_target() {
        let p = AttentionProposal { h: 2, w: 2, mass: vec![0.1, 0.2, 0.3, 0.4], source: "x".into() };
        let f = fuse_proposals(&[p], 8, 8).unwrap();
        assert_eq!((f.h, f.w), (8, 8));
        assert!((f.total() - 1.0).abs() < 1e-12);
        assert!(f.mass.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn resize_anchors_cells_at_their_stride() {
        let mut src = vec![0.0; 16];
        src[2 * 4 + 1] = 1.0;
        let up = resize_bilinear(&src, 4, 4, 32, 32);
        let peak = (0..up.len()).max_by(|&a, &b| up[a].total_cmp(&up[b])).unwrap();
        assert_eq!((peak / 32, peak % 32), (16, 8));
        assert_eq!(up[16 * 32 + 12], 0.5);
    }

    #[test]
    fn crop_box_examples() {
        let uni = AttentionProposal::uniform(32, 32, "u");
        assert_eq!(crop_box(&uni, 32, 32), CropBox::full(32, 32));
        assert_eq!(CropBox::full(32, 32).top(), 0);

        let mut spike = vec![0.0; 32 * 32];
        spike[13 * 32 + 20] = 1.0;
        let p = AttentionProposal { h: 32, w: 32, mass: spike, source: "s".into() };
        let b = crop_box(&p, 32, 32);
        assert_eq!(b, CropBox { center_row: 13, center_col: 20, side: MIN_CROP_SIDE });

        // 2×2 hot block of 0.2 on a 0.0125 background: τ = 0.13125.
        let mut mass = vec![0.0125; 16];
        for idx in [5, 6, 9, 10] {
            mass[idx] = 0.2;
        }
        let p = AttentionProposal { h: 4, w: 4, mass, source: "b".into() };
        // The listed entries sum to 0.95, so the mean is 0.059375 rather than 1/16.
        assert!((attention_threshold(&p.mass) - 0.1296875).abs() < 1e-15);
        let b = crop_box(&p, 32, 32);
        assert_eq!(b, CropBox { center_row: 16, center_col: 16, side: 16 });
        assert_eq!((b.top(), b.left()), (8, 8));
    }

    #[test]
    fn crop_box_clamps_near_border() {
        let mut spike = vec![0.0; 16 * 16];
        spike[0] = 1.0;
        let p = AttentionProposal { h: 16, w: 16, mass: spike, source: "s".into() };
        let b = crop_box(&p, 16, 16);
        assert!(b.fits(16, 16));
        assert_eq!((b.top(), b.left(), b.side), (0, 0, MIN_CROP_SIDE));
    }

    #[test]
    fn crop_and_zoom_identity_and_constant() {
        let img = Tensor::new(&[2, 8, 8], (0..128).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
        let same = crop_and_zoom(&img, &CropBox::full(8, 8)).unwrap();
        for (a, b) in same.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let flat = Tensor::filled(&[1, 8, 8], 0.3);
        let zoomed = crop_and_zoom(&flat, &CropBox { center_row: 4, center_col: 4, side: 4 }).unwrap();
        assert!(zoomed.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        let outside = CropBox { center_row: 7, center_col: 4, side: 4 };
        assert!(crop_and_zoom(&flat, &outside).is_err());
    }

    fn random_map(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[c, h, w], (0..c * h * w).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    proptest! {
        #[test]
        fn mass_is_conserved_every_step(seed in 0u64..1000, h in 2usize..5, w in 2usize..5) {
            let d = build_weight_matrix(&random_map(3, h, w, seed), "l").unwrap();
            let mut m = AttentionProposal::uniform(h, w, "l").mass;
            for _ in 0..10 {
                m = random_walk_step(&d, &m);
                prop_assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(m.iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn propagation_is_permutation_equivariant(seed in 0u64..1000, rot in 1usize..9) {
            let u = random_map(4, 3, 3, seed);
            let n = 9;
            // Relabel location i as (i + rot) mod n.
            let mut permuted = vec![0.0; u.numel()];
            for ch in 0..4 {
                for i in 0..n {
                    permuted[ch * n + (i + rot) % n] = u.data()[ch * n + i];
                }
            }
            let pu = Tensor::new(&[4, 3, 3], permuted).unwrap();
            let m = propagate(&build_weight_matrix(&u, "a").unwrap(), 10).mass;
            let pm = propagate(&build_weight_matrix(&pu, "b").unwrap(), 10).mass;
            for i in 0..n {
                prop_assert!((m[i] - pm[(i + rot) % n]).abs() < 1e-12);
            }
        }

        #[test]
        fn crop_box_always_fits(seed in 0u64..1000, h in 2usize..9, size in 8usize..40) {
            let m = random_map(1, h, h, seed);
            let total: f64 = m.data().iter().sum();
            let p = AttentionProposal { h, w: h, mass: m.data().iter().map(|v| v / total).collect(), source: "r".into() };
            let b = crop_box(&p, size, size);
            prop_assert!(b.fits(size, size));
            prop_assert!(b.side >= MIN_CROP_SIDE.min(size));
        }
    }
}
