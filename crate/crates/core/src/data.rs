//! Synthetic attribute-glyph images and the seen/unseen class split.
//!
//! A class is a tuple of `A` attribute values, one per slot. Every
//! `(slot, value)` pair has its own 6×6 binary glyph. The glyphs of an image
//! sit in a compact grid, one cell per slot, and the whole grid (the
//! "object") is placed at a random offset on a noisy background.
//!
//! The split is built so that a proper subset `S` of the slots already tells
//! every seen class apart, while all unseen classes agree on `S` and differ
//! only elsewhere. A model that only looks at `S` can fit the training data
//! perfectly and still be blind on the unseen classes.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::path::Path;

use crate::error::{Error, Result};
use crate::pnm;
use crate::tensor::Tensor;

/// Side of a glyph, in pixels.
pub const GLYPH: usize = 6;
/// Side of every generated image.
pub const IMAGE_SIZE: usize = 32;
/// Side of the grid cell holding one glyph.
pub const CELL: usize = 8;

/// Stream offset separating glyph-pattern draws from per-image draws.
const PATTERN_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct GlyphSpec {
    /// Attribute slots, `A`.
    pub slots: usize,
    /// Values per slot, `V`.
    pub values: usize,
    /// Amplitude of the additive uniform background noise.
    pub noise: f64,
    /// Maximum displacement of the glyph grid from the image center, in
    /// pixels, along each axis.
    pub jitter: usize,
    /// Seed of the glyph patterns themselves.
    pub pattern_seed: u64,
}

impl Default for GlyphSpec {
    fn default() -> Self {
        GlyphSpec { slots: 4, values: 3, noise: 0.15, jitter: 2, pattern_seed: 7 }
    }
}

impl GlyphSpec {
    pub fn classes(&self) -> usize {
        self.values.pow(self.slots as u32)
    }

    /// Attribute values of a class; slot 0 is the least significant digit.
    pub fn attributes(&self, class: usize) -> Vec<usize> {
        let mut c = class;
        (0..self.slots)
            .map(|_| {
                let v = c % self.values;
                c /= self.values;
                v
            })
            .collect()
    }

    pub fn class_of(&self, attributes: &[usize]) -> usize {
        attributes.iter().rev().fold(0, |acc, &v| acc * self.values + v)
    }

    fn grid(&self) -> usize {
        (1..).find(|g| g * g >= self.slots).unwrap_or(1)
    }

    /// Side of the glyph grid.
    pub fn object_size(&self) -> usize {
        self.grid() * CELL
    }

    /// Top-left corner of a slot's glyph relative to the grid.
    pub fn anchor(&self, slot: usize) -> (usize, usize) {
        let grid = self.grid();
        let pad = (CELL - GLYPH) / 2;
        ((slot / grid) * CELL + pad, (slot % grid) * CELL + pad)
    }

    pub fn validate(&self) -> Result<()> {
        if self.slots == 0 || self.values < 2 {
            return Err(Error::Parameter(format!(
                "need at least one slot and two values, got A={} V={}",
                self.slots, self.values
            )));
        }
        if self.slots > 16 || self.values > 64 {
            return Err(Error::Parameter(format!(
                "at most 16 slots of 64 values fit a {IMAGE_SIZE}×{IMAGE_SIZE} image, got A={} V={}",
                self.slots, self.values
            )));
        }
        let room = (IMAGE_SIZE - self.object_size()) / 2;
        if self.jitter > room {
            return Err(Error::Parameter(format!(
                "jitter {} pushes the {}-pixel glyph grid out of the image (at most {room})",
                self.jitter,
                self.object_size()
            )));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Parameter(format!("noise amplitude {} outside [0, 1]", self.noise)));
        }
        Ok(())
    }

    /// The `A·V` glyphs, indexed `[slot * V + value]`, each `GLYPH²` cells of
    /// 0 or 1. All are distinct and none is blank.
    pub fn patterns(&self) -> Vec<Vec<bool>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.pattern_seed);
        rng.set_stream(PATTERN_STREAM);
        let mut out: Vec<Vec<bool>> = Vec::with_capacity(self.slots * self.values);
        while out.len() < self.slots * self.values {
            let p: Vec<bool> = (0..GLYPH * GLYPH).map(|_| rng.gen_bool(0.5)).collect();
            if p.iter().any(|&b| b) && !out.contains(&p) {
                out.push(p);
            }
        }
        out
    }
}

/// Images with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[1, H, W]` each, values in `[0, 1]`.
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Sorted, deduplicated class ids.
    pub fn classes(&self) -> Vec<usize> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Images whose class is in `classes`, in their original order.
    pub fn subset(&self, classes: &[usize]) -> Dataset {
        let keep: Vec<usize> = (0..self.len()).filter(|&k| classes.contains(&self.labels[k])).collect();
        Dataset {
            images: keep.iter().map(|&k| self.images[k].clone()).collect(),
            labels: keep.iter().map(|&k| self.labels[k]).collect(),
        }
    }

    /// Stacks the chosen images into `[N, C, H, W]`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let parts: Vec<Tensor> = indices.iter().map(|&k| self.images[k].clone()).collect();
        Tensor::stack(&parts)
    }
}

/// Renders one image of `class`. `rng` drives jitter and noise.
pub fn render(spec: &GlyphSpec, patterns: &[Vec<bool>], class: usize, rng: &mut impl Rng) -> Tensor {
    let mut img = vec![0.0; IMAGE_SIZE * IMAGE_SIZE];
    if spec.noise > 0.0 {
        img.iter_mut().for_each(|v| *v = rng.gen_range(0.0..spec.noise));
    }
    let span = 2 * spec.jitter + 1;
    let centered = (IMAGE_SIZE - spec.object_size()) / 2;
    let (top, left) = (
        centered + rng.gen_range(0..span) - spec.jitter,
        centered + rng.gen_range(0..span) - spec.jitter,
    );
    for (slot, value) in spec.attributes(class).into_iter().enumerate() {
        let (r0, c0) = spec.anchor(slot);
        let (r0, c0) = (top + r0, left + c0);
        let pattern = &patterns[slot * spec.values + value];
        for y in 0..GLYPH {
            for x in 0..GLYPH {
                if pattern[y * GLYPH + x] {
                    let px = &mut img[(r0 + y) * IMAGE_SIZE + c0 + x];
                    *px = (*px + 1.0 - spec.noise).min(1.0);
                }
            }
        }
    }
    Tensor::new(&[1, IMAGE_SIZE, IMAGE_SIZE], img).expect("IMAGE_SIZE² pixels")
}

/// `per_class` images of each listed class.
///
/// Image `k` of class `c` uses its own random stream derived from `seed`,
/// `c` and `k`, so a class renders the same whatever else is generated.
pub fn generate_classes(spec: &GlyphSpec, classes: &[usize], per_class: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if per_class < 4 {
        return Err(Error::Parameter(format!("need at least 4 images per class, got {per_class}")));
    }
    if let Some(&c) = classes.iter().find(|&&c| c >= spec.classes()) {
        return Err(Error::Parameter(format!("class {c} does not exist; the spec has {}", spec.classes())));
    }
    let patterns = spec.patterns();
    let mut images = Vec::with_capacity(classes.len() * per_class);
    let mut labels = Vec::with_capacity(classes.len() * per_class);
    for &class in classes {
        for k in 0..per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((class * per_class + k) as u64);
            images.push(render(spec, &patterns, class, &mut rng));
            labels.push(class);
        }
    }
    Ok(Dataset { images, labels })
}

/// `per_class` images of every class.
pub fn generate_dataset(spec: &GlyphSpec, per_class: usize, seed: u64) -> Result<Dataset> {
    let classes: Vec<usize> = (0..spec.classes()).collect();
    generate_classes(spec, &classes, per_class, seed)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ZeroShotSplit {
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
}

impl ZeroShotSplit {
    /// The default design: `S` is the first `floor(A/2)` slots, the head.
    /// There is one seen class per assignment `h` of the head; its tail slot
    /// `k` takes the value `Σ_i (k+1)^i · h_i mod V`. For `A = 4` and prime
    /// `V` the tail is then a bijection of the head, so during training the
    /// tail is an equally sufficient but redundant cue. The unseen classes
    /// are all classes with the head at zero except the seen one.
    pub fn standard(spec: &GlyphSpec) -> Result<Self> {
        spec.validate()?;
        if spec.slots < 2 {
            return Err(Error::SplitDesign("a zero-shot split needs at least two slots".into()));
        }
        let s = spec.slots / 2;
        let v = spec.values;
        let mut seen = Vec::new();
        for head in 0..v.pow(s as u32) {
            let mut attrs = GlyphSpec { slots: s, ..spec.clone() }.attributes(head);
            for k in 0..spec.slots - s {
                let mut coef = 1;
                let mut t = 0;
                for &h in &attrs[..s] {
                    t = (t + coef * h) % v;
                    coef = coef * (k + 1) % v;
                }
                attrs.push(t);
            }
            seen.push(spec.class_of(&attrs));
        }
        let rest = spec.slots - s;
        let unseen = (0..v.pow(rest as u32))
            .map(|t| {
                let mut attrs = vec![0; s];
                attrs.extend(GlyphSpec { slots: rest, ..spec.clone() }.attributes(t));
                spec.class_of(&attrs)
            })
            .filter(|c| !seen.contains(c))
            .collect();
        seen.sort_unstable();
        Ok(ZeroShotSplit { seen, unseen })
    }

    /// Class ids present in both halves.
    pub fn overlap(&self) -> Vec<usize> {
        let mut shared: Vec<usize> = self.seen.iter().copied().filter(|c| self.unseen.contains(c)).collect();
        shared.sort_unstable();
        shared.dedup();
        shared
    }
}

/// The slot subsets under which a split has the zero-shot property.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitReport {
    /// Every proper slot subset (as a bit mask) that separates all seen
    /// classes while all unseen classes coincide on it.
    pub sufficient_subsets: Vec<u32>,
}

fn project(attrs: &[usize], mask: u32) -> Vec<usize> {
    attrs.iter().enumerate().filter(|(s, _)| mask >> s & 1 == 1).map(|(_, &v)| v).collect()
}

/// Checks the split exhaustively over all slot subsets.
///
/// A subset `S` qualifies when it is proper, tells every pair of seen
/// classes apart, and every pair of unseen classes agrees on it (so they are
/// told apart only by slots outside `S`).
pub fn verify_split(split: &ZeroShotSplit, spec: &GlyphSpec) -> Result<SplitReport> {
    spec.validate()?;
    let shared = split.overlap();
    if !shared.is_empty() {
        return Err(Error::SplitContamination(shared));
    }
    if split.seen.len() < 2 || split.unseen.len() < 2 {
        return Err(Error::SplitDesign("each half needs at least two classes".into()));
    }
    if let Some(&c) = split.seen.iter().chain(&split.unseen).find(|&&c| c >= spec.classes()) {
        return Err(Error::SplitDesign(format!("class {c} does not exist")));
    }
    let seen: Vec<Vec<usize>> = split.seen.iter().map(|&c| spec.attributes(c)).collect();
    let unseen: Vec<Vec<usize>> = split.unseen.iter().map(|&c| spec.attributes(c)).collect();
    let full = (1u32 << spec.slots) - 1;
    let sufficient_subsets: Vec<u32> = (0..full)
        .filter(|&mask| {
            let seen_keys: Vec<Vec<usize>> = seen.iter().map(|a| project(a, mask)).collect();
            let separates = (0..seen_keys.len()).all(|p| (p + 1..seen_keys.len()).all(|q| seen_keys[p] != seen_keys[q]));
            let first = project(&unseen[0], mask);
            separates && unseen.iter().all(|a| project(a, mask) == first)
        })
        .collect();
    if sufficient_subsets.is_empty() {
        return Err(Error::SplitDesign(
            "no proper slot subset separates the seen classes while leaving the unseen classes indistinguishable".into(),
        ));
    }
    Ok(SplitReport { sufficient_subsets })
}

/// A balanced batch: `m` distinct classes, `k` distinct images of each.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[m·k, C, H, W]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Dataset positions of the images.
    pub indices: Vec<usize>,
}

/// Draws `m` classes uniformly without replacement, then `k` images of each
/// without replacement.
pub fn sample_batch(data: &Dataset, m: usize, k: usize, rng: &mut impl Rng) -> Result<Batch> {
    if m < 2 || k < 2 {
        return Err(Error::Parameter(format!("a batch needs m ≥ 2 classes and k ≥ 2 images each, got m={m} k={k}")));
    }
    let classes = data.classes();
    if classes.len() < m {
        return Err(Error::Dataset(format!("{} classes available, batch needs {m}", classes.len())));
    }
    let mut indices = Vec::with_capacity(m * k);
    let mut labels = Vec::with_capacity(m * k);
    for pick in index::sample(rng, classes.len(), m) {
        let class = classes[pick];
        let members: Vec<usize> = (0..data.len()).filter(|&n| data.labels[n] == class).collect();
        if members.len() < k {
            return Err(Error::Dataset(format!("class {class} has {} images, batch needs {k}", members.len())));
        }
        for p in index::sample(rng, members.len(), k) {
            indices.push(members[p]);
            labels.push(class);
        }
    }
    Ok(Batch { images: data.batch(&indices)?, labels, indices })
}

/// Name of the `filename,class_id` table in a dataset directory.
pub const LABELS_FILE: &str = "labels.csv";
/// Name of the `class_id,seen|unseen` table in a dataset directory.
pub const SPLIT_FILE: &str = "split.csv";

/// Writes every image of `data` as an 8-bit PGM plus the label and split
/// tables.
pub fn save_dir(dir: &Path, data: &Dataset, split: &ZeroShotSplit) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut labels = String::from("filename,class_id\n");
    for (n, (image, class)) in data.images.iter().zip(&data.labels).enumerate() {
        let name = format!("img_{n:05}.pgm");
        pnm::write_gray(image, dir.join(&name))?;
        labels.push_str(&format!("{name},{class}\n"));
    }
    let mut table = String::from("class_id,split\n");
    let mut rows: Vec<(usize, &str)> = split.seen.iter().map(|&c| (c, "seen")).collect();
    rows.extend(split.unseen.iter().map(|&c| (c, "unseen")));
    rows.sort_unstable();
    for (c, side) in rows {
        table.push_str(&format!("{c},{side}\n"));
    }
    for (name, text) in [(LABELS_FILE, labels), (SPLIT_FILE, table)] {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn csv_rows(path: &Path, header: &str) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == header => {}
        _ => return Err(Error::Dataset(format!("{}: expected header `{header}`", path.display()))),
    }
    lines
        .map(|(n, l)| {
            l.split_once(',')
                .map(|(a, b)| (a.trim().to_string(), b.trim().to_string()))
                .ok_or_else(|| Error::Dataset(format!("{}:{}: expected two fields", path.display(), n + 1)))
        })
        .collect()
}

/// Reads a directory written by [`save_dir`].
pub fn load_dir(dir: &Path) -> Result<(Dataset, ZeroShotSplit)> {
    let mut data = Dataset { images: Vec::new(), labels: Vec::new() };
    for (name, class) in csv_rows(&dir.join(LABELS_FILE), "filename,class_id")? {
        let class = class.parse().map_err(|_| Error::Dataset(format!("{LABELS_FILE}: bad class id `{class}`")))?;
        data.images.push(pnm::read_image(dir.join(&name))?);
        data.labels.push(class);
    }
    let mut split = ZeroShotSplit { seen: Vec::new(), unseen: Vec::new() };
    for (class, side) in csv_rows(&dir.join(SPLIT_FILE), "class_id,split")? {
        let class = class.parse().map_err(|_| Error::Dataset(format!("{SPLIT_FILE}: bad class id `{class}`")))?;
        match side.as_str() {
            "seen" => split.seen.push(class),
            "unseen" => split.unseen.push(class),
            _ => return Err(Error::Dataset(format!("{SPLIT_FILE}: expected seen or unseen, got `{side}`"))),
        }
    }
    Ok((data, split))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_round_trip() {
        let spec = GlyphSpec::default();
        let split = ZeroShotSplit::standard(&spec).unwrap();
        let data = generate_classes(&spec, &[0, 5], 4, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dir(dir.path(), &data, &split).unwrap();
        let (back, back_split) = load_dir(dir.path()).unwrap();
        assert_eq!(back.labels, data.labels);
        assert_eq!(back_split, split);
        for (a, b) in back.images.iter().zip(&data.images) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-12));
        }
    }

    #[test]
    fn attributes_round_trip() {
        let spec = GlyphSpec::default();
        for c in 0..spec.classes() {
            assert_eq!(spec.class_of(&spec.attributes(c)), c);
        }
        assert_eq!(spec.attributes(1), vec![1, 0, 0, 0]);
    }

    #[test]
    fn patterns_are_distinct() {
        let p = GlyphSpec::default().patterns();
        assert_eq!(p.len(), 12);
        for a in 0..p.len() {
            for b in a + 1..p.len() {
                assert_ne!(p[a], p[b]);
            }
        }
    }

    #[test]
    fn noiseless_classes_are_constant() {
        let spec = GlyphSpec { noise: 0.0, jitter: 0, ..GlyphSpec::default() };
        let d = generate_classes(&spec, &[0, 5], 4, 1).unwrap();
        assert_eq!(d.images[0], d.images[3]);
        assert_ne!(d.images[0], d.images[4]);
    }

    #[test]
    fn generation_is_reproducible_and_subset_stable() {
        let spec = GlyphSpec::default();
        let a = generate_classes(&spec, &[3, 8], 5, 42).unwrap();
        let b = generate_classes(&spec, &[8], 5, 42).unwrap();
        assert_eq!(a.images[5..], b.images[..]);
        assert_eq!(a, generate_classes(&spec, &[3, 8], 5, 42).unwrap());
        assert!(a.images.iter().all(|t| t.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn minimal_instance_has_two_classes() {
        let spec = GlyphSpec { slots: 1, values: 2, ..GlyphSpec::default() };
        let d = generate_dataset(&spec, 4, 0).unwrap();
        assert_eq!(d.classes(), vec![0, 1]);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate_dataset(&GlyphSpec::default(), 3, 0).is_err());
        assert!(GlyphSpec { values: 1, ..GlyphSpec::default() }.validate().is_err());
        assert!(GlyphSpec { jitter: 9, ..GlyphSpec::default() }.validate().is_err());
        assert!(GlyphSpec { slots: 9, jitter: 5, ..GlyphSpec::default() }.validate().is_err());
    }

    #[test]
    fn standard_split_verifies() {
        let spec = GlyphSpec::default();
        let split = ZeroShotSplit::standard(&spec).unwrap();
        assert_eq!(split.seen.len(), 9);
        assert_eq!(split.unseen.len(), 8);
        let report = verify_split(&split, &spec).unwrap();
        assert!(report.sufficient_subsets.contains(&0b0011));
    }

    #[test]
    fn split_examples() {
        let spec = GlyphSpec { slots: 2, values: 2, ..GlyphSpec::default() };
        let c = |a: usize, b: usize| spec.class_of(&[a, b]);
        // Slot 0 separates the seen pair but also the unseen pair.
        let split = ZeroShotSplit { seen: vec![c(0, 0), c(1, 0)], unseen: vec![c(0, 1), c(1, 1)] };
        assert!(matches!(verify_split(&split, &spec), Err(Error::SplitDesign(_))));
        // Each single slot separates both pairs, so no subset qualifies.
        let split = ZeroShotSplit { seen: vec![c(0, 0), c(1, 1)], unseen: vec![c(0, 1), c(1, 0)] };
        assert!(matches!(verify_split(&split, &spec), Err(Error::SplitDesign(_))));
        // The unseen pair agrees on slot 0, the seen pair differs there.
        let split = ZeroShotSplit { seen: vec![c(0, 0), c(1, 0)], unseen: vec![c(0, 1), c(0, 0)] };
        assert!(matches!(verify_split(&split, &spec), Err(Error::SplitContamination(ref v)) if v == &[c(0, 0)]));
    }

    #[test]
    fn balanced_batch_counts() {
        let spec = GlyphSpec { slots: 1, values: 2, ..GlyphSpec::default() };
        let d = generate_dataset(&spec, 4, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_batch(&d, 2, 2, &mut rng).unwrap();
        let pairs: Vec<(usize, usize)> = (0..4).flat_map(|p| (p + 1..4).map(move |q| (p, q))).collect();
        let pos = pairs.iter().filter(|(p, q)| b.labels[*p] == b.labels[*q]).count();
        assert_eq!((pos, pairs.len() - pos), (2, 4));
        assert_eq!(b.images.shape(), &[4, 1, 32, 32]);
        let again = sample_batch(&d, 2, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(b, again);
        assert!(sample_batch(&d, 3, 2, &mut rng).is_err());
        assert!(sample_batch(&d, 2, 5, &mut rng).is_err());
    }
}
