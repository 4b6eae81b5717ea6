//! Exit branches, placement enumeration and partition plans.
//!
//! An exit after convolutional block `k` taps the feature map at the start of
//! block `k + 1`. Each branch owns three small sub-models:
//!
//! - head: GlobalAvgPool, Dense(channels -> classes), Softmax
//! - encoder: Dense(feature_size -> bottleneck)
//! - decoder: Dense(bottleneck -> feature_size), reshaped back to the feature map
//!
//! On the gated path the decoder output replaces the raw feature map, so the
//! later backbone blocks always see the reconstruction. A [`PartitionPlan`]
//! assigns the backbone segments between exits to Edge/Fog/Cloud stages.

use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{
    backprop, cross_entropy, decode_layers, encode_layers, encoded_size, run_layers, run_layers_trace,
    softmax_ce_delta, GradStore, LayerParams, LayerSpec, ModelSpec, ParamStore, Scalar, Shape, Tensor,
};

/// Default encoder output width, in floats.
pub const DEFAULT_BOTTLENECK: usize = 16;
/// Edge RAM budget used by [`check_memory_budget`] when none is given.
pub const DEFAULT_EDGE_BUDGET_BYTES: usize = 256 * 1024;

/// One or two exit boundaries, strictly increasing, each in `1..=L-1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExitPlacement {
    boundaries: Vec<usize>,
}

impl ExitPlacement {
    pub fn new(boundaries: Vec<usize>, num_conv_layers: usize) -> Result<Self> {
        if boundaries.is_empty() || boundaries.len() > 2 {
            return invalid(format!(
                "a placement has one or two exits, got {}",
                boundaries.len()
            ));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return invalid(format!("exit boundaries {boundaries:?} must be strictly increasing"));
        }
        if let Some(&b) = boundaries.iter().find(|&&b| b == 0 || b >= num_conv_layers) {
            return invalid(format!(
                "exit boundary {b} outside 1..={} for L = {num_conv_layers}",
                num_conv_layers.saturating_sub(1)
            ));
        }
        Ok(Self { boundaries })
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn num_exits(&self) -> usize {
        self.boundaries.len()
    }

    /// Comma-separated boundaries, e.g. `"2,4"`.
    pub fn label(&self) -> String {
        self.boundaries
            .iter()
            .map(|b| b.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Parse `"2"` or `"2,4"`.
    pub fn parse(s: &str, num_conv_layers: usize) -> Result<Self> {
        let b = s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidInput(format!("bad exit boundary {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(b, num_conv_layers)
    }
}

/// Every placement with `num_exits` exits for a network of `l` conv layers,
/// in lexicographic order.
pub fn enumerate_placements(l: usize, num_exits: usize) -> Result<Vec<ExitPlacement>> {
    match num_exits {
        1 if l >= 2 => Ok((1..l).map(|b| ExitPlacement { boundaries: vec![b] }).collect()),
        2 if l >= 3 => Ok((1..l)
            .flat_map(|a| (a + 1..l).map(move |b| ExitPlacement { boundaries: vec![a, b] }))
            .collect()),
        1 | 2 => invalid(format!("L = {l} is too small for {num_exits} exits")),
        n => invalid(format!("only one or two exits are supported, got {n}")),
    }
}

/// Shape-level description of one exit branch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExitBranch {
    /// Conv block after which the exit sits (1-based).
    pub boundary: usize,
    /// Backbone layer index where the tapped feature map enters.
    pub cut: usize,
    pub feature_shape: Shape,
    pub bottleneck: usize,
    pub head: ModelSpec,
    pub encoder: ModelSpec,
    pub decoder: ModelSpec,
}

impl ExitBranch {
    fn new(boundary: usize, cut: usize, feature_shape: Shape, bottleneck: usize, num_classes: usize) -> Result<Self> {
        let features = feature_shape.elements();
        if bottleneck == 0 || bottleneck > features {
            return invalid(format!(
                "bottleneck {bottleneck} must be in 1..={features} at boundary {boundary}"
            ));
        }
        Ok(Self {
            boundary,
            cut,
            feature_shape,
            bottleneck,
            head: ModelSpec::new(
                vec![
                    LayerSpec::GlobalAvgPool,
                    LayerSpec::dense(feature_shape.channels, num_classes),
                    LayerSpec::Softmax,
                ],
                feature_shape,
            )?,
            encoder: ModelSpec::new(vec![LayerSpec::dense(features, bottleneck)], feature_shape)?,
            decoder: ModelSpec::new(vec![LayerSpec::dense(bottleneck, features)], Shape::new(1, bottleneck))?,
        })
    }

    /// Bytes sent across the link for one forwarded beat.
    pub fn payload_bytes(&self) -> usize {
        4 * self.bottleneck
    }

    /// Bytes of the uncompressed `f32` feature map at this boundary.
    pub fn raw_feature_bytes(&self) -> usize {
        4 * self.feature_shape.elements()
    }

    pub fn compression_ratio(&self) -> f64 {
        self.raw_feature_bytes() as f64 / self.payload_bytes() as f64
    }

    pub fn head_flops(&self) -> u64 {
        self.head.total_flops()
    }

    pub fn encoder_flops(&self) -> u64 {
        self.encoder.total_flops()
    }

    pub fn decoder_flops(&self) -> u64 {
        self.decoder.total_flops()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams<T> {
    pub head: ParamStore<T>,
    pub encoder: ParamStore<T>,
    pub decoder: ParamStore<T>,
}

/// A backbone with exit branches attached.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitModel<T = f32> {
    backbone: ModelSpec,
    pub backbone_params: ParamStore<T>,
    placement: ExitPlacement,
    branches: Vec<ExitBranch>,
    pub branch_params: Vec<BranchParams<T>>,
}

/// Attach exit branches at `placement`. New parameters are seeded from `seed`;
/// the backbone parameters are copied unchanged.
pub fn attach_exits<T: Scalar>(
    backbone: &ModelSpec,
    params: &ParamStore<T>,
    placement: &ExitPlacement,
    bottleneck: usize,
    seed: u64,
) -> Result<ExitModel<T>> {
    params.check_matches(backbone.layers())?;
    if !matches!(backbone.layers().last(), Some(LayerSpec::Softmax)) {
        return invalid("backbone must end in Softmax");
    }
    let l = backbone.num_conv_layers();
    let placement = ExitPlacement::new(placement.boundaries.clone(), l)?;
    let mut branches = Vec::new();
    let mut branch_params = Vec::new();
    for &b in placement.boundaries() {
        let cut = backbone
            .block_boundary(b)
            .ok_or_else(|| Error::InvalidInput(format!("no conv block after boundary {b}")))?;
        let branch = ExitBranch::new(b, cut, backbone.shape_before(cut), bottleneck, backbone.num_classes())?;
        let s = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(b as u64 * 3);
        branch_params.push(BranchParams {
            head: ParamStore::init(&branch.head, s),
            encoder: ParamStore::init(&branch.encoder, s + 1),
            decoder: ParamStore::init(&branch.decoder, s + 2),
        });
        branches.push(branch);
    }
    Ok(ExitModel {
        backbone: backbone.clone(),
        backbone_params: params.clone(),
        placement,
        branches,
        branch_params,
    })
}

/// Per-head class probabilities along the gated path: one entry per exit,
/// then the final head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs<T> {
    pub heads: Vec<Vec<T>>,
}

/// Activations kept by [`ExitModel::trace`] for backpropagation.
#[derive(Debug, Clone)]
pub struct ExitTrace<T> {
    segments: Vec<Vec<Tensor<T>>>,
    heads: Vec<Vec<Tensor<T>>>,
    encoders: Vec<Vec<Tensor<T>>>,
    decoders: Vec<Vec<Tensor<T>>>,
}

impl<T: Scalar> ExitTrace<T> {
    /// Probabilities of every head, exits first.
    pub fn head_probs(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = self.heads.iter().map(|h| h.last().expect("non-empty").data()).collect();
        out.push(self.segments.last().and_then(|s| s.last()).expect("non-empty").data());
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchGrads {
    pub head: GradStore,
    pub encoder: GradStore,
    pub decoder: GradStore,
}

/// Gradients for every parameter of an [`ExitModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExitGrads {
    pub backbone: GradStore,
    pub branches: Vec<BranchGrads>,
}

impl ExitGrads {
    pub fn scale(&mut self, s: f64) {
        self.backbone.scale(s);
        for b in &mut self.branches {
            b.head.scale(s);
            b.encoder.scale(s);
            b.decoder.scale(s);
        }
    }

    /// Euclidean norm over every parameter gradient.
    pub fn norm(&self) -> f64 {
        let branches: f64 = self
            .branches
            .iter()
            .map(|b| b.head.sq_norm() + b.encoder.sq_norm() + b.decoder.sq_norm())
            .sum();
        (self.backbone.sq_norm() + branches).sqrt()
    }

    pub fn add(&mut self, other: &ExitGrads) {
        self.backbone.add(&other.backbone);
        for (a, b) in self.branches.iter_mut().zip(&other.branches) {
            a.head.add(&b.head);
            a.encoder.add(&b.encoder);
            a.decoder.add(&b.decoder);
        }
    }
}

impl<T: Scalar> ExitModel<T> {
    pub fn backbone(&self) -> &ModelSpec {
        &self.backbone
    }

    pub fn placement(&self) -> &ExitPlacement {
        &self.placement
    }

    pub fn branches(&self) -> &[ExitBranch] {
        &self.branches
    }

    pub fn bottleneck(&self) -> usize {
        self.branches[0].bottleneck
    }

    /// Exit heads plus the final head.
    pub fn num_heads(&self) -> usize {
        self.branches.len() + 1
    }

    pub fn num_classes(&self) -> usize {
        self.backbone.num_classes()
    }

    /// Backbone layer ranges between consecutive exits.
    pub fn segments(&self) -> Vec<Range<usize>> {
        let mut cuts = vec![0];
        cuts.extend(self.branches.iter().map(|b| b.cut));
        cuts.push(self.backbone.len());
        cuts.windows(2).map(|w| w[0]..w[1]).collect()
    }

    /// Drop the exit branches, returning the untouched backbone.
    pub fn strip(&self) -> (ModelSpec, ParamStore<T>) {
        (self.backbone.clone(), self.backbone_params.clone())
    }

    /// FLOPs of the exit-free backbone.
    pub fn baseline_flops(&self) -> u64 {
        self.backbone.total_flops()
    }

    pub fn cast<U: Scalar>(&self) -> ExitModel<U> {
        ExitModel {
            backbone: self.backbone.clone(),
            backbone_params: self.backbone_params.cast(),
            placement: self.placement.clone(),
            branches: self.branches.clone(),
            branch_params: self
                .branch_params
                .iter()
                .map(|p| BranchParams {
                    head: p.head.cast(),
                    encoder: p.encoder.cast(),
                    decoder: p.decoder.cast(),
                })
                .collect(),
        }
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        if input.shape() != self.backbone.input_shape() {
            return Err(Error::Shape(format!(
                "model expects input {}, got {}",
                self.backbone.input_shape(),
                input.shape()
            )));
        }
        Ok(())
    }

    /// Run the full gated path (through every encoder/decoder) and collect
    /// every head's probabilities.
    pub fn forward_heads(&self, input: &Tensor<T>) -> Result<HeadOutputs<T>> {
        self.check_input(input)?;
        let layers = self.backbone.layers();
        let params = &self.backbone_params.layers;
        let mut x = input.clone();
        let mut heads = Vec::with_capacity(self.num_heads());
        for (i, seg) in self.segments().into_iter().enumerate() {
            let feature = run_layers(&layers[seg.clone()], &params[seg], &x)?;
            match self.branches.get(i) {
                Some(branch) => {
                    let bp = &self.branch_params[i];
                    heads.push(run_layers(branch.head.layers(), &bp.head.layers, &feature)?.into_data());
                    let code = run_layers(branch.encoder.layers(), &bp.encoder.layers, &feature)?;
                    x = run_layers(branch.decoder.layers(), &bp.decoder.layers, &code)?.reshape(branch.feature_shape)?;
                }
                None => heads.push(feature.into_data()),
            }
        }
        Ok(HeadOutputs { heads })
    }

    /// Forward pass keeping the activations needed by [`Self::joint_backward`].
    pub fn trace(&self, input: &Tensor<T>) -> Result<ExitTrace<T>> {
        self.check_input(input)?;
        let layers = self.backbone.layers();
        let params = &self.backbone_params.layers;
        let mut trace = ExitTrace {
            segments: Vec::new(),
            heads: Vec::new(),
            encoders: Vec::new(),
            decoders: Vec::new(),
        };
        let mut x = input.clone();
        for (i, seg) in self.segments().into_iter().enumerate() {
            let acts = run_layers_trace(&layers[seg.clone()], &params[seg], x)?;
            let feature = acts.last().expect("non-empty").clone();
            trace.segments.push(acts);
            if let Some(branch) = self.branches.get(i) {
                let bp = &self.branch_params[i];
                trace.heads.push(run_layers_trace(branch.head.layers(), &bp.head.layers, feature.clone())?);
                let enc = run_layers_trace(branch.encoder.layers(), &bp.encoder.layers, feature)?;
                let dec = run_layers_trace(
                    branch.decoder.layers(),
                    &bp.decoder.layers,
                    enc.last().expect("non-empty").clone(),
                )?;
                x = dec.last().expect("non-empty").clone().reshape(branch.feature_shape)?;
                trace.encoders.push(enc);
                trace.decoders.push(dec);
            } else {
                x = Tensor::zeros(Shape::new(1, 1));
            }
        }
        Ok(trace)
    }

    /// Weighted joint loss `sum_h w_h * CE_h`; `weights` has one entry per head.
    pub fn joint_loss(&self, trace: &ExitTrace<T>, target: usize, weights: &[f64]) -> f64 {
        trace
            .head_probs()
            .iter()
            .zip(weights)
            .map(|(p, w)| w * cross_entropy(p, target))
            .sum()
    }

    pub fn zero_grads(&self) -> ExitGrads {
        ExitGrads {
            backbone: GradStore::zeros_for(self.backbone.layers()),
            branches: self
                .branches
                .iter()
                .map(|b| BranchGrads {
                    head: GradStore::zeros_for(b.head.layers()),
                    encoder: GradStore::zeros_for(b.encoder.layers()),
                    decoder: GradStore::zeros_for(b.decoder.layers()),
                })
                .collect(),
        }
    }

    /// Gradients of the joint loss, accumulated into `grads`. Returns the loss.
    pub fn joint_backward(
        &self,
        trace: &ExitTrace<T>,
        target: usize,
        weights: &[f64],
        grads: &mut ExitGrads,
    ) -> Result<f64> {
        if weights.len() != self.num_heads() {
            return invalid(format!(
                "expected {} loss weights, got {}",
                self.num_heads(),
                weights.len()
            ));
        }
        if target >= self.num_classes() {
            return invalid(format!("target class {target} outside 0..{}", self.num_classes()));
        }
        let loss = self.joint_loss(trace, target, weights);
        let layers = self.backbone.layers();
        let params = &self.backbone_params.layers;
        let segs = self.segments();
        let last = segs.len() - 1;

        // Final segment ends in Softmax; start from the softmax input.
        let acts = &trace.segments[last];
        let probs = acts.last().expect("non-empty").data();
        let seg = segs[last].start..segs[last].end - 1;
        let mut g = backprop(
            &layers[seg.clone()],
            &params[seg.clone()],
            &acts[..acts.len() - 1],
            softmax_ce_delta(probs, target, weights[last]),
            &mut grads.backbone.layers[seg],
        );

        for i in (0..self.branches.len()).rev() {
            let branch = &self.branches[i];
            let bp = &self.branch_params[i];
            let bg = &mut grads.branches[i];
            let g_code = backprop(branch.decoder.layers(), &bp.decoder.layers, &trace.decoders[i], g, &mut bg.decoder.layers);
            let mut g_feat = backprop(branch.encoder.layers(), &bp.encoder.layers, &trace.encoders[i], g_code, &mut bg.encoder.layers);
            let h = &trace.heads[i];
            let nh = branch.head.len();
            let g_head = backprop(
                &branch.head.layers()[..nh - 1],
                &bp.head.layers[..nh - 1],
                &h[..nh],
                softmax_ce_delta(h[nh].data(), target, weights[i]),
                &mut bg.head.layers[..nh - 1],
            );
            g_feat.iter_mut().zip(&g_head).for_each(|(a, b)| *a += b);
            let seg = segs[i].clone();
            g = backprop(&layers[seg.clone()], &params[seg.clone()], &trace.segments[i], g_feat, &mut grads.backbone.layers[seg]);
        }
        Ok(loss)
    }

    /// `p -= scale * g` for every parameter.
    pub fn apply_update(&mut self, grads: &ExitGrads, scale: f64) {
        self.backbone_params.apply_update(&grads.backbone, scale);
        for (p, g) in self.branch_params.iter_mut().zip(&grads.branches) {
            p.head.apply_update(&g.head, scale);
            p.encoder.apply_update(&g.encoder, scale);
            p.decoder.apply_update(&g.decoder, scale);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.backbone_params.all_finite()
            && self
                .branch_params
                .iter()
                .all(|p| p.head.all_finite() && p.encoder.all_finite() && p.decoder.all_finite())
    }
}

impl ExitModel<f32> {
    /// Flat `.dcn` encoding: backbone layers, then head, encoder and decoder
    /// of each exit in boundary order. The placement and bottleneck needed to
    /// split it again live in the accompanying JSON manifest.
    pub fn encode_bundle(&self) -> Vec<u8> {
        let mut layers = self.backbone.layers().to_vec();
        let mut params = self.backbone_params.layers.clone();
        for (b, p) in self.branches.iter().zip(&self.branch_params) {
            for (spec, store) in [(&b.head, &p.head), (&b.encoder, &p.encoder), (&b.decoder, &p.decoder)] {
                layers.extend_from_slice(spec.layers());
                params.extend(store.layers.iter().cloned());
            }
        }
        encode_layers(self.backbone.input_shape(), &layers, &params)
    }

    pub fn decode_bundle(bytes: &[u8], placement: &[usize], bottleneck: usize) -> Result<Self> {
        let raw = decode_layers(bytes)?;
        let per_branch = 5;
        let n_backbone = raw
            .layers
            .len()
            .checked_sub(per_branch * placement.len())
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Format {
                offset: 12,
                reason: "layer count too small for the exit placement".into(),
            })?;
        let backbone = ModelSpec::new(raw.layers[..n_backbone].to_vec(), raw.input_shape)?;
        let backbone_params = raw.params.slice(0..n_backbone);
        let placement = ExitPlacement::new(placement.to_vec(), backbone.num_conv_layers())?;
        let mut model = attach_exits(&backbone, &backbone_params, &placement, bottleneck, 0)?;
        let mut at = n_backbone;
        for (b, p) in model.branches.iter().zip(model.branch_params.iter_mut()) {
            let expected: Vec<LayerSpec> = [&b.head, &b.encoder, &b.decoder]
                .iter()
                .flat_map(|m| m.layers().to_vec())
                .collect();
            if raw.layers[at..at + per_branch] != expected[..] {
                return Err(Error::Format {
                    offset: 16,
                    reason: format!("exit branch at boundary {} does not match the manifest", b.boundary),
                });
            }
            p.head = raw.params.slice(at..at + 3);
            p.encoder = raw.params.slice(at + 3..at + 4);
            p.decoder = raw.params.slice(at + 4..at + 5);
            at += per_branch;
        }
        Ok(model)
    }
}

/// Node class hosting a stage, ordered Edge < Fog < Cloud.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeRole {
    Edge,
    Fog,
    Cloud,
}

impl NodeRole {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "edge" => Ok(NodeRole::Edge),
            "fog" => Ok(NodeRole::Fog),
            "cloud" => Ok(NodeRole::Cloud),
            other => invalid(format!("unknown node role {other:?}")),
        }
    }

    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',').map(Self::parse).collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            NodeRole::Edge => "edge",
            NodeRole::Fog => "fog",
            NodeRole::Cloud => "cloud",
        }
    }
}

/// Which sub-models a stage file holds, in file order:
/// `[decoder] body [head encoder]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageLayout {
    pub decoder: bool,
    pub body_layers: usize,
    pub exit: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub role: NodeRole,
    /// Backbone layer range executed by this stage.
    pub layers: Range<usize>,
    /// 1-based conv blocks hosted by this stage.
    pub conv_blocks: Vec<usize>,
    /// Branch whose decoder opens this stage.
    pub incoming: Option<usize>,
    /// Branch whose head and encoder close this stage.
    pub exit: Option<usize>,
    /// Serialized `.dcn` size of everything the stage holds.
    pub bytes: usize,
    /// FLOPs of running every layer the stage holds once.
    pub flops: u64,
    pub layout: StageLayout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub placement: ExitPlacement,
    pub bottleneck: usize,
    pub stages: Vec<Stage>,
}

impl PartitionPlan {
    pub fn num_exits(&self) -> usize {
        self.placement.num_exits()
    }
}

/// Cut an exit model into one stage per exit plus a final stage.
pub fn partition<T: Scalar>(model: &ExitModel<T>, roles: &[NodeRole]) -> Result<PartitionPlan> {
    let segs = model.segments();
    if roles.len() != segs.len() {
        return invalid(format!(
            "{} exits need {} roles, got {}",
            model.branches.len(),
            segs.len(),
            roles.len()
        ));
    }
    if roles.windows(2).any(|w| w[0] > w[1]) {
        return invalid("roles must be ordered edge, fog, cloud");
    }
    let conv_positions: Vec<usize> = model
        .backbone
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, LayerSpec::Conv1d { .. }))
        .map(|(i, _)| i)
        .collect();
    let mut stages = Vec::with_capacity(segs.len());
    for (i, seg) in segs.into_iter().enumerate() {
        let incoming = i.checked_sub(1);
        let exit = (i < model.branches.len()).then_some(i);
        let mut layers: Vec<LayerSpec> = Vec::new();
        let mut flops = 0;
        if let Some(j) = incoming {
            let b = &model.branches[j];
            layers.extend_from_slice(b.decoder.layers());
            flops += b.decoder_flops();
        }
        layers.extend_from_slice(&model.backbone.layers()[seg.clone()]);
        flops += model.backbone.flops_in(seg.clone());
        if let Some(j) = exit {
            let b = &model.branches[j];
            layers.extend_from_slice(b.head.layers());
            layers.extend_from_slice(b.encoder.layers());
            flops += b.head_flops() + b.encoder_flops();
        }
        let conv_blocks = conv_positions
            .iter()
            .enumerate()
            .filter(|(_, &p)| seg.contains(&p))
            .map(|(k, _)| k + 1)
            .collect();
        stages.push(Stage {
            role: roles[i],
            layers: seg.clone(),
            conv_blocks,
            incoming,
            exit,
            bytes: encoded_size(&layers),
            flops,
            layout: StageLayout {
                decoder: incoming.is_some(),
                body_layers: seg.len(),
                exit: exit.is_some(),
            },
        });
    }
    Ok(PartitionPlan {
        placement: model.placement.clone(),
        bottleneck: model.bottleneck(),
        stages,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageBudget {
    pub stage: usize,
    pub role: NodeRole,
    pub bytes: usize,
    pub exceeds: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MemoryReport {
    pub budget_bytes: usize,
    pub stages: Vec<StageBudget>,
    /// No Edge stage exceeds the budget.
    pub pass: bool,
}

pub fn check_memory_budget(plan: &PartitionPlan, edge_budget_bytes: usize) -> MemoryReport {
    let stages: Vec<StageBudget> = plan
        .stages
        .iter()
        .enumerate()
        .map(|(i, s)| StageBudget {
            stage: i,
            role: s.role,
            bytes: s.bytes,
            exceeds: s.bytes > edge_budget_bytes,
        })
        .collect();
    let pass = !stages.iter().any(|s| s.role == NodeRole::Edge && s.exceeds);
    MemoryReport {
        budget_bytes: edge_budget_bytes,
        stages,
        pass,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageExit<T> {
    pub boundary: usize,
    pub head: ModelSpec,
    pub head_params: ParamStore<T>,
    pub encoder: ModelSpec,
    pub encoder_params: ParamStore<T>,
}

/// Executable copy of one stage; owns its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StageModel<T = f32> {
    pub role: NodeRole,
    pub decoder: Option<(ModelSpec, ParamStore<T>)>,
    pub body: ModelSpec,
    pub body_params: ParamStore<T>,
    pub exit: Option<StageExit<T>>,
}

impl<T: Scalar> StageModel<T> {
    /// Input shape of the stage on the gated path.
    pub fn input_shape(&self) -> Shape {
        match &self.decoder {
            Some((d, _)) => d.input_shape(),
            None => self.body.input_shape(),
        }
    }

    pub fn layout(&self) -> StageLayout {
        StageLayout {
            decoder: self.decoder.is_some(),
            body_layers: self.body.len(),
            exit: self.exit.is_some(),
        }
    }

    pub fn run_decoder(&self, code: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.decoder {
            Some((d, p)) => run_layers(d.layers(), &p.layers, code)?.reshape(self.body.input_shape()),
            None => Err(Error::InvalidInput("stage has no decoder".into())),
        }
    }

    pub fn run_body(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        if input.shape() != self.body.input_shape() {
            return Err(Error::Shape(format!(
                "stage body expects {}, got {}",
                self.body.input_shape(),
                input.shape()
            )));
        }
        run_layers(self.body.layers(), &self.body_params.layers, input)
    }

    pub fn run_head(&self, feature: &Tensor<T>) -> Result<Option<Tensor<T>>> {
        self.exit
            .as_ref()
            .map(|e| run_layers(e.head.layers(), &e.head_params.layers, feature))
            .transpose()
    }

    pub fn run_encoder(&self, feature: &Tensor<T>) -> Result<Option<Tensor<T>>> {
        self.exit
            .as_ref()
            .map(|e| run_layers(e.encoder.layers(), &e.encoder_params.layers, feature))
            .transpose()
    }

    pub fn decoder_flops(&self) -> u64 {
        self.decoder.as_ref().map_or(0, |(d, _)| d.total_flops())
    }

    pub fn body_flops(&self) -> u64 {
        self.body.total_flops()
    }

    pub fn head_flops(&self) -> u64 {
        self.exit.as_ref().map_or(0, |e| e.head.total_flops())
    }

    pub fn encoder_flops(&self) -> u64 {
        self.exit.as_ref().map_or(0, |e| e.encoder.total_flops())
    }

    /// Bytes forwarded to the next stage on the gated path.
    pub fn payload_bytes(&self) -> usize {
        self.exit
            .as_ref()
            .map_or(0, |e| 4 * e.encoder.output_shape().elements())
    }

    pub fn cast<U: Scalar>(&self) -> StageModel<U> {
        StageModel {
            role: self.role,
            decoder: self.decoder.as_ref().map(|(d, p)| (d.clone(), p.cast())),
            body: self.body.clone(),
            body_params: self.body_params.cast(),
            exit: self.exit.as_ref().map(|e| StageExit {
                boundary: e.boundary,
                head: e.head.clone(),
                head_params: e.head_params.cast(),
                encoder: e.encoder.clone(),
                encoder_params: e.encoder_params.cast(),
            }),
        }
    }
}

/// Copy each stage's sub-models and parameters out of `model`.
pub fn build_stages<T: Scalar>(model: &ExitModel<T>, plan: &PartitionPlan) -> Result<Vec<StageModel<T>>> {
    if plan.placement != model.placement {
        return invalid("plan placement does not match the model");
    }
    plan.stages
        .iter()
        .map(|s| {
            Ok(StageModel {
                role: s.role,
                decoder: s.incoming.map(|j| {
                    (model.branches[j].decoder.clone(), model.branch_params[j].decoder.clone())
                }),
                body: model.backbone.slice(s.layers.clone())?,
                body_params: model.backbone_params.slice(s.layers.clone()),
                exit: s.exit.map(|j| StageExit {
                    boundary: model.branches[j].boundary,
                    head: model.branches[j].head.clone(),
                    head_params: model.branch_params[j].head.clone(),
                    encoder: model.branches[j].encoder.clone(),
                    encoder_params: model.branch_params[j].encoder.clone(),
                }),
            })
        })
        .collect()
}

impl StageModel<f32> {
    /// The stage as a single `.dcn` file, layout `[decoder] body [head encoder]`.
    pub fn encode(&self) -> Vec<u8> {
        let mut layers = Vec::new();
        let mut params: Vec<LayerParams<f32>> = Vec::new();
        let mut push = |spec: &ModelSpec, store: &ParamStore<f32>| {
            layers.extend_from_slice(spec.layers());
            params.extend(store.layers.iter().cloned());
        };
        if let Some((d, p)) = &self.decoder {
            push(d, p);
        }
        push(&self.body, &self.body_params);
        if let Some(e) = &self.exit {
            push(&e.head, &e.head_params);
            push(&e.encoder, &e.encoder_params);
        }
        encode_layers(self.input_shape(), &layers, &params)
    }

    pub fn decode(bytes: &[u8], role: NodeRole, layout: StageLayout, boundary: Option<usize>) -> Result<Self> {
        let raw = decode_layers(bytes)?;
        let expected = layout.decoder as usize + layout.body_layers + if layout.exit { 4 } else { 0 };
        if raw.layers.len() != expected {
            return Err(Error::Format {
                offset: 12,
                reason: format!("stage layout needs {expected} layers, file has {}", raw.layers.len()),
            });
        }
        let mut at = 0;
        let mut input = raw.input_shape;
        let mut take = |n: usize, input: Shape| -> Result<(ModelSpec, ParamStore<f32>)> {
            let spec = ModelSpec::new(raw.layers[at..at + n].to_vec(), input)?;
            let p = raw.params.slice(at..at + n);
            at += n;
            Ok((spec, p))
        };
        let decoder = if layout.decoder {
            let (d, p) = take(1, input)?;
            let features = d.output_shape().elements();
            // The body's first layer fixes the feature map shape.
            input = match raw.layers.get(1) {
                Some(LayerSpec::Conv1d { in_channels, .. }) if features % in_channels == 0 => {
                    Shape::new(*in_channels, features / in_channels)
                }
                _ => {
                    return Err(Error::Format {
                        offset: 16,
                        reason: "stage body must start with a Conv1d after the decoder".into(),
                    })
                }
            };
            Some((d, p))
        } else {
            None
        };
        let (body, body_params) = take(layout.body_layers, input)?;
        let exit = if layout.exit {
            let feature = body.output_shape();
            let (head, head_params) = take(3, feature)?;
            let (encoder, encoder_params) = take(1, feature)?;
            Some(StageExit {
                boundary: boundary.unwrap_or(0),
                head,
                head_params,
                encoder,
                encoder_params,
            })
        } else {
            None
        };
        Ok(Self {
            role,
            decoder,
            body,
            body_params,
            exit,
        })
    }
}

/// One stage entry of a `.plan.json` manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageManifest {
    pub role: NodeRole,
    /// Backbone layer indices `[start, end)`.
    pub layers: [usize; 2],
    pub conv_blocks: Vec<usize>,
    pub model_file: String,
    pub bytes: usize,
    pub flops: u64,
    pub exit_boundary: Option<usize>,
    /// Encoder payload sent to the next stage.
    pub transmit_bytes: Option<usize>,
    /// Size of the raw feature map the encoder replaces.
    pub raw_feature_bytes: Option<usize>,
    pub layout: StageLayout,
}

/// Human-readable companion of the per-stage `.dcn` files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanManifest {
    pub provenance: serde_json::Value,
    pub placement: Vec<usize>,
    pub bottleneck: usize,
    pub baseline_flops: u64,
    /// Monolithic backbone used by equivalence checks.
    pub reference_model: String,
    pub stages: Vec<StageManifest>,
}

/// Write one `.dcn` per stage, the monolithic backbone and `<name>.plan.json`
/// into `dir`. Returns the manifest path.
pub fn write_partition(
    dir: &Path,
    name: &str,
    model: &ExitModel<f32>,
    plan: &PartitionPlan,
    provenance: serde_json::Value,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let stages = build_stages(model, plan)?;
    let reference = format!("{name}.backbone.dcn");
    let (spec, params) = model.strip();
    std::fs::write(dir.join(&reference), crate::nn::serialize(&spec, &params))?;
    let mut entries = Vec::new();
    for (i, (s, exec)) in plan.stages.iter().zip(&stages).enumerate() {
        let file = format!("{name}.stage{i}.{}.dcn", s.role.name());
        let bytes = exec.encode();
        debug_assert_eq!(bytes.len(), s.bytes);
        std::fs::write(dir.join(&file), &bytes)?;
        let branch = s.exit.map(|j| &model.branches[j]);
        entries.push(StageManifest {
            role: s.role,
            layers: [s.layers.start, s.layers.end],
            conv_blocks: s.conv_blocks.clone(),
            model_file: file,
            bytes: s.bytes,
            flops: s.flops,
            exit_boundary: branch.map(|b| b.boundary),
            transmit_bytes: branch.map(ExitBranch::payload_bytes),
            raw_feature_bytes: branch.map(ExitBranch::raw_feature_bytes),
            layout: s.layout,
        });
    }
    let manifest = PlanManifest {
        provenance,
        placement: plan.placement.boundaries().to_vec(),
        bottleneck: plan.bottleneck,
        baseline_flops: model.baseline_flops(),
        reference_model: reference,
        stages: entries,
    };
    let path = dir.join(format!("{name}.plan.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(path)
}

/// Load a manifest and its stage executors.
pub fn load_partition(plan_path: &Path) -> Result<(PlanManifest, Vec<StageModel<f32>>)> {
    let manifest: PlanManifest = serde_json::from_slice(&std::fs::read(plan_path)?)?;
    let dir = plan_path.parent().unwrap_or(Path::new("."));
    let stages = manifest
        .stages
        .iter()
        .map(|s| {
            let bytes = std::fs::read(dir.join(&s.model_file))?;
            StageModel::decode(&bytes, s.role, s.layout, s.exit_boundary)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, stages))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{default_backbone, forward, serialize};

    fn default_exit_model(boundaries: Vec<usize>) -> ExitModel<f32> {
        let bb = default_backbone();
        let p = ParamStore::init(&bb, 1);
        let placement = ExitPlacement::new(boundaries, 6).unwrap();
        attach_exits(&bb, &p, &placement, DEFAULT_BOTTLENECK, 2).unwrap()
    }

    #[test]
    fn placement_counts_for_six_layers() {
        assert_eq!(enumerate_placements(6, 1).unwrap().len(), 5);
        assert_eq!(enumerate_placements(6, 2).unwrap().len(), 10);
        let three = enumerate_placements(3, 2).unwrap();
        assert_eq!(three, vec![ExitPlacement::new(vec![1, 2], 3).unwrap()]);
    }

    #[test]
    fn placement_counts_match_closed_forms() {
        for l in 3..=12 {
            let single = enumerate_placements(l, 1).unwrap();
            let dual = enumerate_placements(l, 2).unwrap();
            assert_eq!(single.len(), l - 1);
            assert_eq!(dual.len(), (l - 2) * (l - 1) / 2);
            let mut d = dual.clone();
            d.dedup();
            assert_eq!(d.len(), dual.len());
            assert!(dual.iter().all(|p| ExitPlacement::new(p.boundaries().to_vec(), l).is_ok()));
        }
        assert!(enumerate_placements(1, 1).is_err());
        assert!(enumerate_placements(2, 2).is_err());
        assert!(enumerate_placements(6, 3).is_err());
    }

    #[test]
    fn placement_validation() {
        assert!(ExitPlacement::new(vec![], 6).is_err());
        assert!(ExitPlacement::new(vec![0], 6).is_err());
        assert!(ExitPlacement::new(vec![6], 6).is_err());
        assert!(ExitPlacement::new(vec![3, 3], 6).is_err());
        assert!(ExitPlacement::new(vec![4, 2], 6).is_err());
        assert_eq!(ExitPlacement::parse("2, 4", 6).unwrap().label(), "2,4");
    }

    #[test]
    fn attach_then_strip_preserves_backbone_bytes() {
        let bb = default_backbone();
        let p = ParamStore::<f32>::init(&bb, 1);
        let before = serialize(&bb, &p);
        let m = attach_exits(&bb, &p, &ExitPlacement::new(vec![2, 4], 6).unwrap(), 16, 7).unwrap();
        let (s, sp) = m.strip();
        assert_eq!(serialize(&s, &sp), before);
    }

    #[test]
    fn exit_feature_size_matches_shape_propagation() {
        let m = default_exit_model(vec![2]);
        let bb = default_backbone();
        let p = ParamStore::<f32>::init(&bb, 1);
        // Output of conv block 2 is the output of its MaxPool, layer index 5.
        let x = Tensor::from_samples(&[0.1; 260]);
        let act = forward(&bb, &p, &x, Some(5)).unwrap();
        let b = &m.branches()[0];
        assert_eq!(b.feature_shape, act.shape());
        assert_eq!(b.feature_shape, Shape::new(16, 65));
        assert_eq!(b.encoder.layers()[0], LayerSpec::dense(1040, 16));
    }

    #[test]
    fn bottleneck_payload_arithmetic() {
        let b = &default_exit_model(vec![2]).branches()[0].clone();
        assert_eq!(b.payload_bytes(), 64);
        assert_eq!(b.raw_feature_bytes(), 16 * 65 * 4);
        assert_eq!(b.compression_ratio(), 4160.0 / 64.0);
    }

    #[test]
    fn oversized_bottleneck_is_rejected() {
        let bb = default_backbone();
        let p = ParamStore::<f32>::init(&bb, 1);
        // Boundary 5 carries 32 channels x 8 samples.
        let r = attach_exits(&bb, &p, &ExitPlacement::new(vec![5], 6).unwrap(), 257, 0);
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn single_exit_partition_layout() {
        let m = default_exit_model(vec![2]);
        let plan = partition(&m, &[NodeRole::Edge, NodeRole::Cloud]).unwrap();
        assert_eq!(plan.stages.len(), 2);
        assert_eq!(plan.stages[0].conv_blocks, vec![1, 2]);
        assert_eq!(plan.stages[1].conv_blocks, vec![3, 4, 5, 6]);
        assert_eq!(plan.stages[0].exit, Some(0));
        assert_eq!(plan.stages[1].incoming, Some(0));
        assert_eq!(plan.stages[0].layers.end, plan.stages[1].layers.start);
        assert_eq!(plan.stages[1].layers.end, m.backbone().len());
    }

    #[test]
    fn dual_exit_partition_layout() {
        let m = default_exit_model(vec![2, 4]);
        let plan = partition(&m, &[NodeRole::Edge, NodeRole::Fog, NodeRole::Cloud]).unwrap();
        let blocks: Vec<_> = plan.stages.iter().map(|s| s.conv_blocks.clone()).collect();
        assert_eq!(blocks, vec![vec![1, 2], vec![3, 4], vec![5, 6]]);
        assert!(matches!(
            partition(&m, &[NodeRole::Edge, NodeRole::Cloud]),
            Err(Error::InvalidInput(_))
        ));
        assert!(partition(&m, &[NodeRole::Cloud, NodeRole::Fog, NodeRole::Edge]).is_err());
    }

    #[test]
    fn edge_stage_fits_budget_and_byte_count_is_exact() {
        let m = default_exit_model(vec![2]);
        let plan = partition(&m, &[NodeRole::Edge, NodeRole::Cloud]).unwrap();
        let report = check_memory_budget(&plan, DEFAULT_EDGE_BUDGET_BYTES);
        assert!(report.pass);
        // Independent count: 16-byte header, per-layer kind byte and u32
        // parameters, then 4 bytes per weight and bias.
        let header = 16;
        let conv = 1 + 5 * 4;
        let pool = 1 + 2 * 4;
        let relu = 1;
        let dense = 1 + 2 * 4;
        let layer_headers = 2 * (conv + relu + pool) + (1 + dense + 1) + dense;
        let params = (8 * 5 + 8) + (16 * 8 * 5 + 16) + (16 * 5 + 5) + (1040 * 16 + 16);
        assert_eq!(plan.stages[0].bytes, header + layer_headers + 4 * params);
        let stages = build_stages(&m, &plan).unwrap();
        assert_eq!(stages[0].encode().len(), plan.stages[0].bytes);
        let zero = check_memory_budget(&plan, 0);
        assert!(zero.stages.iter().all(|s| s.exceeds));
        assert!(!zero.pass);
    }

    #[test]
    fn bundle_roundtrip() {
        let m = default_exit_model(vec![1, 3]);
        let bytes = m.encode_bundle();
        let back = ExitModel::decode_bundle(&bytes, &[1, 3], 16).unwrap();
        assert_eq!(back, m);
        assert!(ExitModel::decode_bundle(&bytes, &[1, 4], 16).is_err());
    }

    #[test]
    fn stage_file_roundtrip() {
        let m = default_exit_model(vec![2, 4]);
        let plan = partition(&m, &[NodeRole::Edge, NodeRole::Fog, NodeRole::Cloud]).unwrap();
        for (s, exec) in plan.stages.iter().zip(build_stages(&m, &plan).unwrap()) {
            let bytes = exec.encode();
            let back = StageModel::decode(&bytes, s.role, s.layout, exec.exit.as_ref().map(|e| e.boundary)).unwrap();
            assert_eq!(back, exec);
            assert_eq!(back.encode(), bytes);
        }
    }

    fn micro_exit_model(seed: u64) -> ExitModel<f64> {
        let bb = crate::nn::backbone(&[2, 3, 3], 3, 4, 16, 5).unwrap();
        let p = ParamStore::<f64>::init(&bb, seed);
        attach_exits(&bb, &p, &ExitPlacement::new(vec![1, 2], 3).unwrap(), 3, seed + 1).unwrap()
    }

    #[test]
    fn joint_gradient_is_weighted_sum_of_head_gradients() {
        let m = micro_exit_model(4);
        let x = Tensor::<f64>::new(Shape::new(1, 16), (0..16).map(|i| ((i * 7) % 5) as f64 / 3.0 - 0.6).collect()).unwrap();
        let trace = m.trace(&x).unwrap();
        let w = [0.5, 2.0, 1.5];
        let mut joint = m.zero_grads();
        m.joint_backward(&trace, 2, &w, &mut joint).unwrap();
        let mut sum = m.zero_grads();
        for h in 0..3 {
            let mut one = [0.0; 3];
            one[h] = w[h];
            m.joint_backward(&trace, 2, &one, &mut sum).unwrap();
        }
        let flat = |g: &ExitGrads| -> Vec<f64> {
            let mut v: Vec<f64> = g.backbone.layers.iter().flat_map(|l| l.weight.iter().chain(&l.bias).copied()).collect();
            for b in &g.branches {
                for s in [&b.head, &b.encoder, &b.decoder] {
                    v.extend(s.layers.iter().flat_map(|l| l.weight.iter().chain(&l.bias).copied()));
                }
            }
            v
        };
        for (a, b) in flat(&joint).iter().zip(flat(&sum)) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn joint_gradient_matches_finite_differences() {
        let m = micro_exit_model(9);
        let x = Tensor::<f64>::new(Shape::new(1, 16), (0..16).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let w = [1.0, 1.0, 1.0];
        let target = 3;
        let mut g = m.zero_grads();
        m.joint_backward(&m.trace(&x).unwrap(), target, &w, &mut g).unwrap();
        let loss = |mm: &ExitModel<f64>| mm.joint_loss(&mm.trace(&x).unwrap(), target, &w);
        let eps = 1e-4;
        // Spot-check the encoder of the first exit and the first conv layer.
        for i in 0..m.branch_params[0].encoder.layers[0].weight.len().min(20) {
            let mut a = m.clone();
            a.branch_params[0].encoder.layers[0].weight[i] += eps;
            let mut b = m.clone();
            b.branch_params[0].encoder.layers[0].weight[i] -= eps;
            let fd = (loss(&a) - loss(&b)) / (2.0 * eps);
            let an = g.branches[0].encoder.layers[0].weight[i];
            assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6) < 1e-4, "enc {i}: {fd} vs {an}");
        }
        for i in 0..m.backbone_params.layers[0].weight.len() {
            let mut a = m.clone();
            a.backbone_params.layers[0].weight[i] += eps;
            let mut b = m.clone();
            b.backbone_params.layers[0].weight[i] -= eps;
            let fd = (loss(&a) - loss(&b)) / (2.0 * eps);
            let an = g.backbone.layers[0].weight[i];
            assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6) < 1e-4, "conv {i}: {fd} vs {an}");
        }
    }
}
