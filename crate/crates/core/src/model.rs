//! The decoupled network: per-scale FNet, parallel channel-attention
//! branches, a GNet shared by the branches, and one linear learner per
//! branch. Scales after the first see a crop of the previous scale's input,
//! chosen by object attention on that scale's GNet maps.
//!
//! Parameters live in a flat, named list. A forward pass records them on a
//! [`Graph`] through [`Model::bind`], so the same code serves training,
//! inference and gradient checks.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::cam::{self, CamParams, HIDDEN};
use crate::error::{Error, Result};
use crate::oam::{self, AttentionProposal, CropBox};
use crate::tensor::Tensor;

/// One 3×3 convolution followed by ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvStage {
    pub out_channels: usize,
    pub stride: usize,
}

impl ConvStage {
    pub const fn new(out_channels: usize, stride: usize) -> Self {
        ConvStage { out_channels, stride }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub input_channels: usize,
    /// Images are `input_size × input_size`.
    pub input_size: usize,
    pub fnet: Vec<ConvStage>,
    /// The last two GNet maps feed object attention.
    pub gnet: Vec<ConvStage>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_channels: 1,
            input_size: 32,
            fnet: vec![ConvStage::new(8, 1), ConvStage::new(16, 2), ConvStage::new(32, 2)],
            gnet: vec![ConvStage::new(32, 1), ConvStage::new(48, 2)],
        }
    }
}

impl BackboneConfig {
    /// Channels of the map the channel-attention modules gate.
    pub fn fnet_channels(&self) -> usize {
        self.fnet.last().map_or(self.input_channels, |s| s.out_channels)
    }

    /// Width of the pooled GNet output.
    pub fn feature_dim(&self) -> usize {
        self.gnet.last().map_or(self.fnet_channels(), |s| s.out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.gnet.len() < 2 {
            return Err(Error::Parameter(format!(
                "backbone needs input channels and at least two GNet stages, got {} and {}",
                self.input_channels,
                self.gnet.len()
            )));
        }
        let mut size = self.input_size;
        for s in self.fnet.iter().chain(&self.gnet) {
            if s.out_channels == 0 || !(s.stride == 1 || s.stride == 2) {
                return Err(Error::Parameter(format!("invalid conv stage {s:?}")));
            }
            if size < 3 {
                return Err(Error::Parameter(format!(
                    "input size {} shrinks below 3×3 before a conv stage",
                    self.input_size
                )));
            }
            size = size.div_ceil(s.stride);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Number of scales, `I`.
    pub scales: usize,
    /// Channel-attention branches per scale, `J`.
    pub branches: usize,
    /// Total embedding width `d`; each learner gets `floor(d / (I·J))`.
    pub dim: usize,
    /// Reuse one FNet and one GNet at every scale.
    pub share_fnet_across_scales: bool,
    /// Without channel attention and with `J = 1` the model is a plain
    /// unified metric learner.
    pub use_cam: bool,
    pub backbone: BackboneConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            scales: 1,
            branches: 1,
            dim: 512,
            share_fnet_across_scales: true,
            use_cam: true,
            backbone: BackboneConfig::default(),
        }
    }
}

/// Smallest allowed learner width.
pub const MIN_LEARNER_DIM: usize = 4;

impl ModelConfig {
    pub fn learner_dim(&self) -> usize {
        self.dim / (self.scales * self.branches).max(1)
    }

    pub fn learners(&self) -> usize {
        self.scales * self.branches
    }

    pub fn holistic_dim(&self) -> usize {
        self.learners() * self.learner_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 || self.branches == 0 {
            return Err(Error::Parameter(format!(
                "need at least one scale and one branch, got I={} J={}",
                self.scales, self.branches
            )));
        }
        if self.learner_dim() < MIN_LEARNER_DIM {
            return Err(Error::Parameter(format!(
                "learner width floor({}/{}) is below {MIN_LEARNER_DIM}",
                self.dim,
                self.learners()
            )));
        }
        if !self.use_cam && self.branches != 1 {
            return Err(Error::Parameter("branches without channel attention would be identical".into()));
        }
        self.backbone.validate()
    }
}

/// Optimizer group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Backbone,
    Learner,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

/// Model parameters recorded on a graph, in [`Model::params`] order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

/// Everything one scale produced for a batch.
#[derive(Clone, Debug)]
pub struct ScaleOutput {
    /// `[N, C, H, W]` images this scale consumed.
    pub input: Tensor,
    /// Crop of the previous scale's input that produced each image.
    pub crops: Vec<CropBox>,
    /// `[N, learner_dim]` per branch.
    pub embeddings: Vec<Var>,
    /// `[N, feature_dim]` pooled GNet output per branch, before the learner.
    pub pooled: Vec<Var>,
    /// `[N, C]` per branch; absent without channel attention.
    pub gates: Vec<Var>,
    /// Last two GNet maps of each branch.
    pub maps: Vec<[Var; 2]>,
    /// Fused object-attention proposal per image, at input resolution.
    pub proposals: Vec<AttentionProposal>,
}

/// Per-branch results of [`Model::forward_scale`].
#[derive(Clone, Debug, Default)]
pub struct BranchOutputs {
    pub embeddings: Vec<Var>,
    pub pooled: Vec<Var>,
    pub gates: Vec<Var>,
    pub maps: Vec<[Var; 2]>,
}

#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub scales: Vec<ScaleOutput>,
}

impl ForwardPass {
    /// Every learner output, scale-major then branch.
    pub fn bank(&self) -> Vec<Var> {
        self.scales.iter().flat_map(|s| s.embeddings.iter().copied()).collect()
    }

    pub fn learner_bank(&self, g: &Graph) -> LearnerBank {
        LearnerBank {
            scales: self.scales.len(),
            branches: self.scales.first().map_or(0, |s| s.embeddings.len()),
            embeddings: self.bank().into_iter().map(|v| g.value(v).clone()).collect(),
        }
    }
}

/// Learner outputs as plain tensors, scale-major then branch.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnerBank {
    pub scales: usize,
    pub branches: usize,
    /// `[N, learner_dim]` each.
    pub embeddings: Vec<Tensor>,
}

impl LearnerBank {
    pub fn get(&self, scale: usize, branch: usize) -> &Tensor {
        &self.embeddings[scale * self.branches + branch]
    }

    pub fn batch(&self) -> usize {
        self.embeddings.first().map_or(0, |e| e.shape()[0])
    }

    /// Appends the rows of `other`, which must have the same layout.
    pub fn extend(&mut self, other: LearnerBank) -> Result<()> {
        if self.embeddings.is_empty() {
            *self = other;
            return Ok(());
        }
        if (self.scales, self.branches) != (other.scales, other.branches) {
            return Err(Error::dim("LearnerBank::extend", "banks differ in layout"));
        }
        for (mine, theirs) in self.embeddings.iter_mut().zip(other.embeddings) {
            let width = mine.shape()[1];
            if theirs.shape()[1] != width {
                return Err(Error::dim("LearnerBank::extend", "learner widths differ"));
            }
            let rows = mine.shape()[0] + theirs.shape()[0];
            let mut data = std::mem::replace(mine, Tensor::scalar(0.0)).into_data();
            data.extend_from_slice(theirs.data());
            *mine = Tensor::new(&[rows, width], data)?;
        }
        Ok(())
    }
}

/// L2-normalizes every learner output per sample and concatenates them,
/// scale-major then branch: `[N, I·J·learner_dim]`.
pub fn holistic_embed(embeddings: &[Tensor]) -> Result<Tensor> {
    let parts = normalized(embeddings)?;
    Tensor::concat(&parts.iter().collect::<Vec<_>>())
}

fn normalized(embeddings: &[Tensor]) -> Result<Vec<Tensor>> {
    if embeddings.is_empty() {
        return Err(Error::EmptyInput("holistic_embed"));
    }
    embeddings
        .iter()
        .map(|e| {
            let &[n, w] = e.shape() else {
                return Err(Error::dim("holistic_embed", format!("learner output {:?}", e.shape())));
            };
            let mut out = Vec::with_capacity(n * w);
            for row in e.data().chunks(w) {
                out.extend(Tensor::vector(row).l2_normalize()?.into_data());
            }
            Tensor::new(&[n, w], out)
        })
        .collect()
}

fn backbone_key(config: &ModelConfig, scale: usize) -> usize {
    if config.share_fnet_across_scales {
        0
    } else {
        scale
    }
}

fn conv_name(net: &str, key: usize, stage: usize) -> String {
    format!("{net}{key}.conv{stage}")
}

fn cam_name(scale: usize, branch: usize, which: &str) -> String {
    format!("cam{scale}.{branch}.{which}")
}

fn learner_name(scale: usize, branch: usize) -> String {
    format!("learner{scale}.{branch}")
}

fn adversary_name(scale: usize, which: &str) -> String {
    format!("adversary{scale}.{which}")
}

fn conv_kernels(c_out: usize, c_in: usize, rng: &mut impl Rng) -> Tensor {
    let fan_in = (c_in * 9) as f64;
    cam::random_matrix(c_out, c_in * 9, (2.0 / fan_in).sqrt(), rng)
        .reshape(&[c_out, c_in, 3, 3])
        .expect("c_out*c_in*9 entries")
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    ///
    /// Convolutions use He initialization. All learners of a scale start
    /// from the same matrix, so the channel-attention modules are the only
    /// thing that tells the branches apart at the first step.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut push = |name: String, kind: ParamKind, value: Tensor| params.push(Param { name, kind, value });
        let bb = &config.backbone;
        let keys = if config.share_fnet_across_scales { 1 } else { config.scales };

        for key in 0..keys {
            let mut c_in = bb.input_channels;
            for (k, s) in bb.fnet.iter().enumerate() {
                push(conv_name("fnet", key, k), ParamKind::Backbone, conv_kernels(s.out_channels, c_in, &mut rng));
                c_in = s.out_channels;
            }
            for (k, s) in bb.gnet.iter().enumerate() {
                push(conv_name("gnet", key, k), ParamKind::Backbone, conv_kernels(s.out_channels, c_in, &mut rng));
                c_in = s.out_channels;
            }
        }
        let (width, feat) = (config.learner_dim(), bb.feature_dim());
        for i in 0..config.scales {
            if config.use_cam {
                for j in 0..config.branches {
                    let p = CamParams::random(bb.fnet_channels(), HIDDEN, &mut rng);
                    push(cam_name(i, j, "w1"), ParamKind::Backbone, p.w1);
                    push(cam_name(i, j, "w2"), ParamKind::Backbone, p.w2);
                }
            }
            let omega = cam::random_matrix(width, feat, (1.0 / feat as f64).sqrt(), &mut rng);
            for j in 0..config.branches {
                push(learner_name(i, j), ParamKind::Learner, omega.clone());
            }
            if config.branches >= 2 {
                let adv = cam::AdversaryNet::random(width, HIDDEN, &mut rng);
                push(adversary_name(i, "l1"), ParamKind::Backbone, adv.l1);
                push(adversary_name(i, "l2"), ParamKind::Backbone, adv.l2);
            }
        }
        Model::from_params(config, params)
    }

    /// Assembles a model from named parameters, checking that the names and
    /// shapes are exactly the ones `config` calls for.
    pub fn from_params(config: ModelConfig, params: Vec<Param>) -> Result<Self> {
        config.validate()?;
        let index: HashMap<String, usize> =
            params.iter().enumerate().map(|(k, p)| (p.name.clone(), k)).collect();
        if index.len() != params.len() {
            return Err(Error::Parameter("duplicate parameter names".into()));
        }
        let model = Model { config, params, index };
        let expected = model.expected_shapes();
        if expected.len() != model.params.len() {
            return Err(Error::Parameter(format!(
                "config calls for {} parameters, got {}",
                expected.len(),
                model.params.len()
            )));
        }
        for (name, shape) in expected {
            let p = model.param(&name)?;
            if p.value.shape() != shape.as_slice() {
                return Err(Error::dim("Model::from_params", format!("{name} is {:?}, expected {shape:?}", p.value.shape())));
            }
        }
        Ok(model)
    }

    fn expected_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = &self.config;
        let bb = &c.backbone;
        let keys = if c.share_fnet_across_scales { 1 } else { c.scales };
        let mut out = Vec::new();
        for key in 0..keys {
            let mut c_in = bb.input_channels;
            for (net, stages) in [("fnet", &bb.fnet), ("gnet", &bb.gnet)] {
                for (k, s) in stages.iter().enumerate() {
                    out.push((conv_name(net, key, k), vec![s.out_channels, c_in, 3, 3]));
                    c_in = s.out_channels;
                }
            }
        }
        let (width, feat, fc) = (c.learner_dim(), bb.feature_dim(), bb.fnet_channels());
        for i in 0..c.scales {
            for j in 0..c.branches {
                if c.use_cam {
                    out.push((cam_name(i, j, "w1"), vec![HIDDEN, fc]));
                    out.push((cam_name(i, j, "w2"), vec![fc, HIDDEN]));
                }
                out.push((learner_name(i, j), vec![width, feat]));
            }
            if c.branches >= 2 {
                out.push((adversary_name(i, "l1"), vec![HIDDEN, width]));
                out.push((adversary_name(i, "l2"), vec![HIDDEN, HIDDEN]));
            }
        }
        out
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Result<&Param> {
        self.index
            .get(name)
            .map(|&k| &self.params[k])
            .ok_or_else(|| Error::Parameter(format!("no parameter named `{name}`")))
    }

    /// Records every parameter on `g` as a leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound { vars: self.params.iter().map(|p| g.leaf(p.value.clone())).collect() }
    }

    fn var(&self, bound: &Bound, name: &str) -> Var {
        bound.vars[self.index[name]]
    }

    /// Learner matrices `ω`, scale-major then branch.
    pub fn learner_vars(&self, bound: &Bound) -> Vec<Var> {
        let c = &self.config;
        (0..c.scales)
            .flat_map(|i| (0..c.branches).map(move |j| (i, j)))
            .map(|(i, j)| self.var(bound, &learner_name(i, j)))
            .collect()
    }

    /// Adversary weights `(l1, l2)` of a scale, if it has two or more branches.
    pub fn adversary_vars(&self, bound: &Bound, scale: usize) -> Option<(Var, Var)> {
        (self.config.branches >= 2)
            .then(|| (self.var(bound, &adversary_name(scale, "l1")), self.var(bound, &adversary_name(scale, "l2"))))
    }

    /// Learner outputs of a scale recomputed with frozen copies of the
    /// learner matrices: same values, but the learners receive no gradient
    /// through them.
    pub fn frozen_learner_outputs(&self, g: &mut Graph, scale: usize, out: &ScaleOutput) -> Result<Vec<Var>> {
        out.pooled
            .iter()
            .enumerate()
            .map(|(j, &pooled)| {
                let omega = g.leaf(self.param(&learner_name(scale, j))?.value.clone());
                let omega_t = g.transpose(omega)?;
                g.matmul(pooled, omega_t)
            })
            .collect()
    }

    /// One scale on the images `x` (`[N, C, H, W]`, already on the graph).
    ///
    /// FNet runs once; every branch gates its output, runs the shared GNet
    /// and pools it; the branch learner maps the pooled vector to its
    /// embedding.
    pub fn forward_scale(&self, g: &mut Graph, bound: &Bound, scale: usize, x: Var) -> Result<BranchOutputs> {
        let c = &self.config;
        let bb = &c.backbone;
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1..] != [bb.input_channels, bb.input_size, bb.input_size] {
            return Err(Error::dim(
                "forward_scale",
                format!("images {shape:?}, model expects [N, {}, {s}, {s}]", bb.input_channels, s = bb.input_size),
            ));
        }
        if scale >= c.scales {
            return Err(Error::Parameter(format!("scale {scale} of {}", c.scales)));
        }
        let key = backbone_key(c, scale);
        let mut f = x;
        for (k, s) in bb.fnet.iter().enumerate() {
            let z = g.conv2d(f, self.var(bound, &conv_name("fnet", key, k)), s.stride)?;
            f = g.relu(z);
        }
        let mut out = BranchOutputs::default();
        for j in 0..c.branches {
            let mut h = if c.use_cam {
                let gated = cam::cam_forward(
                    g,
                    f,
                    self.var(bound, &cam_name(scale, j, "w1")),
                    self.var(bound, &cam_name(scale, j, "w2")),
                )?;
                out.gates.push(gated.gate);
                gated.output
            } else {
                f
            };
            let mut trail = Vec::with_capacity(bb.gnet.len());
            for (k, s) in bb.gnet.iter().enumerate() {
                let z = g.conv2d(h, self.var(bound, &conv_name("gnet", key, k)), s.stride)?;
                h = g.relu(z);
                trail.push(h);
            }
            out.maps.push([trail[trail.len() - 2], trail[trail.len() - 1]]);
            let pooled = g.spatial_avg_pool(h)?;
            let omega_t = g.transpose(self.var(bound, &learner_name(scale, j)))?;
            out.embeddings.push(g.matmul(pooled, omega_t)?);
            out.pooled.push(pooled);
        }
        Ok(out)
    }

    /// All scales. Scale 1 sees `images`; each later scale sees, per image,
    /// the crop of the previous scale's input picked by object attention.
    /// Crops are computed from values only, so no gradient flows through the
    /// box.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, images: &Tensor, walk_steps: usize) -> Result<ForwardPass> {
        let bb = &self.config.backbone;
        let n = images.shape().first().copied().unwrap_or(0);
        if n == 0 {
            return Err(Error::EmptyInput("Model::forward"));
        }
        let size = bb.input_size;
        let mut input = images.clone();
        let mut crops = vec![CropBox::full(size, size); n];
        let mut scales = Vec::with_capacity(self.config.scales);
        for i in 0..self.config.scales {
            let x = g.leaf(input.clone());
            let BranchOutputs { embeddings, pooled, gates, maps } = self.forward_scale(g, bound, i, x)?;
            let proposals = (0..n)
                .map(|s| {
                    let per_image: Vec<(String, Tensor)> = maps
                        .iter()
                        .enumerate()
                        .flat_map(|(j, pair)| pair.iter().enumerate().map(move |(l, &v)| (j, l, v)))
                        .map(|(j, l, v)| Ok((format!("branch{j}.map{l}"), g.value(v).select(s)?)))
                        .collect::<Result<_>>()?;
                    oam::object_attention(&per_image, size, size, walk_steps)
                })
                .collect::<Result<Vec<_>>>()?;
            let next = if i + 1 < self.config.scales {
                let boxes: Vec<CropBox> = proposals.iter().map(|p| oam::crop_box(p, size, size)).collect();
                let zoomed = (0..n)
                    .map(|s| oam::crop_and_zoom(&input.select(s)?, &boxes[s]))
                    .collect::<Result<Vec<_>>>()?;
                Some((Tensor::stack(&zoomed)?, boxes))
            } else {
                None
            };
            scales.push(ScaleOutput { input, crops, embeddings, pooled, gates, maps, proposals });
            match next {
                Some((t, b)) => {
                    input = t;
                    crops = b;
                }
                None => break,
            }
        }
        Ok(ForwardPass { scales })
    }

    /// Learner outputs for `images` without recording gradients for later use.
    pub fn embed(&self, images: &Tensor, walk_steps: usize) -> Result<LearnerBank> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let pass = self.forward(&mut g, &bound, images, walk_steps)?;
        Ok(pass.learner_bank(&g))
    }
}
