//! Two-stage training, evaluation and ablation drivers.
//!
//! Stage 1 trains the global classifier. Stage 2 freezes it, derives CAM
//! boxes and affinities from it, and trains the local branch plus the
//! guidance head on the fused logits.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{
    forward_global, forward_local_stem, forward_local_tail, BackboneConfig, BackboneParams,
    BackboneVariant, ConvLayer, ConvStack, HeadNodes, StackNodes,
};
use crate::cam::{activation_boxes, class_activation_maps, ActivationBox};
use crate::checkpoint::Checkpoint;
use crate::error::{LgError, Result};
use crate::geometry::BBox;
use crate::guidance::{
    affinity_map, guided_fusion_graph, normalize_affinity, AffinityMatrix, AffinityMode,
    FusionNodes, GuidanceHead, GuidanceNodes,
};
use crate::loss_metrics::{positive_weights, LabelMatrix, MetricsReport};
use crate::proposals::{self, ProposalConfig, ProposalSet, PROPOSAL_EXT};
use crate::synthdata::{Sample, Split};
use crate::tensor_autodiff::{Graph, NodeId, Tensor};

const INIT_STREAM: u64 = 1 << 48;
const SHUFFLE_STREAM: u64 = 2 << 48;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub momentum: f64,
    /// Positive-weight temperature of the loss.
    pub sigma: f64,
    pub top_k_proposals: usize,
    pub nms_threshold: f64,
    pub cam_threshold: f64,
    pub affinity_mode: AffinityMode,
    /// Replace the affinity matrix with the uniform `1/d` matrix.
    pub uniform_affinity: bool,
    pub roi_out: [usize; 2],
    pub backbone: BackboneVariant,
    /// Decision threshold on `sigmoid(logit)` for evaluation.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.02,
            weight_decay: 0.005,
            lr_decay_factor: 0.1,
            lr_decay_every: 20,
            epochs: 50,
            batch_size: 16,
            seed: 0,
            momentum: 0.0,
            sigma: 1.0,
            top_k_proposals: 100,
            nms_threshold: 0.7,
            cam_threshold: 0.2,
            affinity_mode: AffinityMode::Iou,
            uniform_affinity: false,
            roi_out: [3, 3],
            backbone: BackboneVariant::Standard,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LgError::Config(m));
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 {}", self.lr0));
        }
        if !(self.weight_decay >= 0.0) || !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return bad("weight_decay must be >= 0 and momentum in [0, 1)".into());
        }
        if !(self.lr_decay_factor > 0.0) || self.lr_decay_every == 0 {
            return bad("lr decay factor and period must be positive".into());
        }
        if self.batch_size == 0 || self.top_k_proposals == 0 {
            return bad("batch_size and top_k_proposals must be >= 1".into());
        }
        if !(self.sigma > 0.0) {
            return bad(format!("sigma {}", self.sigma));
        }
        if !(self.cam_threshold > 0.0 && self.cam_threshold < 1.0) {
            return bad(format!("cam_threshold {} outside (0, 1)", self.cam_threshold));
        }
        if !(self.nms_threshold > 0.0 && self.nms_threshold < 1.0) {
            return bad(format!("nms_threshold {} outside (0, 1)", self.nms_threshold));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} outside (0, 1)", self.threshold));
        }
        if self.roi_out.contains(&0) {
            return bad("roi_out must be positive".into());
        }
        Ok(())
    }

    pub fn proposal_config(&self) -> ProposalConfig {
        ProposalConfig {
            nms_threshold: self.nms_threshold,
            top_k: self.top_k_proposals,
            ..ProposalConfig::default()
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LgError::io(path, e))?;
        let c: TrainConfig =
            serde_json::from_str(&text).map_err(|e| LgError::corrupt(path, e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

/// `lr0 * factor^floor(epoch / every)`, by repeated multiplication so the
/// decayed values are the nearest doubles to 0.002, 0.0002, ...
pub fn learning_rate(config: &TrainConfig, epoch: usize) -> f64 {
    let mut lr = config.lr0;
    for _ in 0..epoch / config.lr_decay_every {
        lr *= config.lr_decay_factor;
    }
    lr
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_ma: f64,
}

pub const LOG_HEADER: &str = "epoch,lr,train_loss,val_mA";

pub fn log_csv(records: &[EpochRecord]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in records {
        s.push_str(&format!("{},{},{:.6},{:.6}\n", r.epoch, r.lr, r.train_loss, r.val_ma));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    /// Parameters of the epoch with the best validation mA.
    pub model: M,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: MetricsReport,
}

/// Stage-1 classifier: all stages, GAP and the linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Model {
    pub config: TrainConfig,
    pub backbone: BackboneConfig,
    pub params: BackboneParams,
}

/// Stage-2 model. `global` is the frozen stage-1 classifier (its head doubles
/// as the CAM weights); the local branch reuses the conv stages only.
#[derive(Debug, Clone, PartialEq)]
pub struct LgModel {
    pub config: TrainConfig,
    pub backbone: BackboneConfig,
    pub global: BackboneParams,
    pub local: ConvStack,
    pub head: GuidanceHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Stage1,
    Stage2,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelHeader {
    kind: ModelKind,
    backbone: BackboneConfig,
    train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Stage1(Stage1Model),
    Stage2(LgModel),
}

impl Model {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let (kind, backbone, train) = match self {
            Model::Stage1(m) => (ModelKind::Stage1, &m.backbone, &m.config),
            Model::Stage2(m) => (ModelKind::Stage2, &m.backbone, &m.config),
        };
        let header = ModelHeader {
            kind,
            backbone: backbone.clone(),
            train: train.clone(),
        };
        let mut ck = Checkpoint::new(serde_json::to_string(&header)?);
        match self {
            Model::Stage1(m) => ck.push_backbone("global", &m.params),
            Model::Stage2(m) => {
                ck.push_backbone("global", &m.global);
                ck.push_stack("local", &m.local);
                ck.push("head.proj_w", m.head.proj_w.clone());
                ck.push("head.proj_b", m.head.proj_b.clone());
            }
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let header: ModelHeader = serde_json::from_str(&ck.header_json)
            .map_err(|e| LgError::Checkpoint(format!("bad header: {e}")))?;
        header.backbone.validate()?;
        header.train.validate()?;
        let global = ck.read_backbone("global", &header.backbone)?;
        Ok(match header.kind {
            ModelKind::Stage1 => Model::Stage1(Stage1Model {
                config: header.train,
                backbone: header.backbone,
                params: global,
            }),
            ModelKind::Stage2 => {
                let (a, k) = (header.backbone.num_attributes, header.backbone.final_channels);
                Model::Stage2(LgModel {
                    local: ck.read_stack("local", &header.backbone)?,
                    head: GuidanceHead {
                        proj_w: ck.expect("head.proj_w", &[a, k])?,
                        proj_b: ck.expect("head.proj_b", &[a])?,
                    },
                    config: header.train,
                    backbone: header.backbone,
                    global,
                })
            }
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Model::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn num_attributes(&self) -> usize {
        match self {
            Model::Stage1(m) => m.backbone.num_attributes,
            Model::Stage2(m) => m.backbone.num_attributes,
        }
    }
}

/// SHA-256 over the shapes and little-endian payloads of a parameter set.
pub fn params_digest(params: &BackboneParams) -> [u8; 32] {
    let mut h = Sha256::new();
    let mut feed = |t: &Tensor| {
        for &e in t.shape() {
            h.update((e as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    };
    for l in &params.stack.layers {
        feed(&l.kernels);
        feed(&l.bias);
    }
    feed(&params.fc_w);
    feed(&params.fc_b);
    h.finalize().into()
}

fn stack_tensors(stack: &ConvStack) -> Vec<Tensor> {
    stack
        .layers
        .iter()
        .flat_map(|l| [l.kernels.clone(), l.bias.clone()])
        .collect()
}

fn stack_from_tensors(t: &[Tensor]) -> ConvStack {
    ConvStack {
        layers: t
            .chunks_exact(2)
            .map(|c| ConvLayer {
                kernels: c[0].clone(),
                bias: c[1].clone(),
            })
            .collect(),
    }
}

fn stack_nodes(ids: &[NodeId]) -> StackNodes {
    StackNodes {
        layers: ids.chunks_exact(2).map(|c| (c[0], c[1])).collect(),
    }
}

/// Trainable tensors of stage 1: conv pairs, then `fc_w`, `fc_b`.
pub fn stage1_param_list(params: &BackboneParams) -> Vec<Tensor> {
    let mut v = stack_tensors(&params.stack);
    v.push(params.fc_w.clone());
    v.push(params.fc_b.clone());
    v
}

fn stage1_params_from(list: &[Tensor]) -> BackboneParams {
    let n = list.len();
    BackboneParams {
        stack: stack_from_tensors(&list[..n - 2]),
        fc_w: list[n - 2].clone(),
        fc_b: list[n - 1].clone(),
    }
}

/// Trainable tensors of stage 2: local conv pairs, then `proj_w`, `proj_b`.
pub fn stage2_param_list(local: &ConvStack, head: &GuidanceHead) -> Vec<Tensor> {
    let mut v = stack_tensors(local);
    v.push(head.proj_w.clone());
    v.push(head.proj_b.clone());
    v
}

fn stage2_params_from(list: &[Tensor]) -> (ConvStack, GuidanceHead) {
    let n = list.len();
    (
        stack_from_tensors(&list[..n - 2]),
        GuidanceHead {
            proj_w: list[n - 2].clone(),
            proj_b: list[n - 1].clone(),
        },
    )
}

fn labels_f64(labels: &[u8]) -> Vec<f64> {
    labels.iter().map(|&l| l as f64).collect()
}

/// Weighted CE of the stage-1 logits for one image; `params` as in [`stage1_param_list`].
pub fn stage1_sample_loss(
    g: &mut Graph,
    backbone: &BackboneConfig,
    params: &[NodeId],
    image: &Tensor,
    labels: &[u8],
    pos_weights: &[f64],
) -> Result<NodeId> {
    let n = params.len();
    let stack = stack_nodes(&params[..n - 2]);
    let head = HeadNodes {
        weight: params[n - 2],
        bias: params[n - 1],
    };
    let x = g.constant(image.clone())?;
    let (_, logits) = forward_global(g, backbone, &stack, &head, x)?;
    g.weighted_sigmoid_ce(logits, &labels_f64(labels), pos_weights)
}

/// Everything stage 2 derives from the frozen global branch for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenSample {
    pub global_logits: Vec<f64>,
    pub cam_boxes: Vec<ActivationBox>,
    pub raw_affinity: AffinityMatrix,
    /// Row-normalized (or uniform) affinity used in the fusion.
    pub affinity: AffinityMatrix,
}

impl FrozenSample {
    pub fn compute(
        global: &BackboneParams,
        backbone: &BackboneConfig,
        image: &Tensor,
        proposals: &[BBox],
        config: &TrainConfig,
    ) -> Result<Self> {
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let out = global.infer(backbone, image)?;
        let cams = class_activation_maps(&out.featmap, &global.fc_w)?;
        let cam_boxes = activation_boxes(&cams, config.cam_threshold, w, h)?;
        let boxes: Vec<BBox> = cam_boxes.iter().map(|b| b.bbox).collect();
        let raw_affinity = affinity_map(&boxes, proposals, config.affinity_mode)?;
        let affinity = if config.uniform_affinity {
            AffinityMatrix::uniform(boxes.len(), proposals.len(), config.affinity_mode)
        } else {
            normalize_affinity(&raw_affinity)?
        };
        Ok(FrozenSample {
            global_logits: out.logits,
            cam_boxes,
            raw_affinity,
            affinity,
        })
    }
}

/// Local branch and guided fusion for one image; `params` as in [`stage2_param_list`].
pub fn stage2_sample_forward(
    g: &mut Graph,
    backbone: &BackboneConfig,
    params: &[NodeId],
    image: &Tensor,
    proposals: &[BBox],
    frozen: &FrozenSample,
    roi_out: [usize; 2],
) -> Result<FusionNodes> {
    let n = params.len();
    let stack = stack_nodes(&params[..n - 2]);
    let head = GuidanceNodes {
        proj_w: params[n - 2],
        proj_b: params[n - 1],
    };
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let x = g.constant(image.clone())?;
    let stem = forward_local_stem(g, backbone, &stack, x)?;
    let feats = proposals
        .iter()
        .map(|b| {
            let pooled = g.roi_max_pool(stem, b, roi_out[0], roi_out[1], w, h)?;
            forward_local_tail(g, backbone, &stack, pooled)
        })
        .collect::<Result<Vec<_>>>()?;
    let x_mat = g.stack(&feats)?;
    guided_fusion_graph(g, &frozen.affinity, x_mat, head, &frozen.global_logits)
}

#[allow(clippy::too_many_arguments)]
pub fn stage2_sample_loss(
    g: &mut Graph,
    backbone: &BackboneConfig,
    params: &[NodeId],
    image: &Tensor,
    proposals: &[BBox],
    frozen: &FrozenSample,
    roi_out: [usize; 2],
    labels: &[u8],
    pos_weights: &[f64],
) -> Result<NodeId> {
    let out = stage2_sample_forward(g, backbone, params, image, proposals, frozen, roi_out)?;
    g.weighted_sigmoid_ce(out.fused, &labels_f64(labels), pos_weights)
}

/// Plain SGD with optional momentum; L2 decay applies to rank >= 2 tensors only.
struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    fn new(params: &[Tensor], momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>], lr: f64) {
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let decay = if p.rank() >= 2 { self.weight_decay } else { 0.0 };
            for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi + decay * *w;
                *w -= lr * *vi;
            }
        }
    }
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SHUFFLE_STREAM + epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Per-sample loss and gradients for one sample index under the given parameters.
type SampleGrad<'a> = dyn FnMut(&[Tensor], usize) -> Result<(f64, Vec<Vec<f64>>)> + 'a;
type Evaluator<'a> = dyn FnMut(&[Tensor]) -> Result<MetricsReport> + 'a;

struct EpochLoop {
    params: Vec<Tensor>,
    log: Vec<EpochRecord>,
    best: Option<(usize, MetricsReport, Vec<Tensor>)>,
}

fn run_epochs(
    config: &TrainConfig,
    n_train: usize,
    params: Vec<Tensor>,
    sample_grad: &mut SampleGrad<'_>,
    evaluate: &mut Evaluator<'_>,
    after_epoch: &mut dyn FnMut(usize) -> Result<()>,
) -> Result<EpochLoop> {
    let mut state = EpochLoop {
        params,
        log: Vec::new(),
        best: None,
    };
    let mut opt = Sgd::new(&state.params, config.momentum, config.weight_decay);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let lr = learning_rate(config, epoch);
        let order = epoch_order(config.seed, epoch, n_train);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut acc: Vec<Vec<f64>> = state.params.iter().map(|p| vec![0.0; p.len()]).collect();
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let (loss, grads) = sample_grad(&state.params, i).map_err(|e| match e {
                    LgError::NonFinite { op } => LgError::Diverged {
                        epoch,
                        step,
                        detail: format!("non-finite value in {op} (sample {i})"),
                    },
                    other => other,
                })?;
                if !loss.is_finite() {
                    return Err(LgError::Diverged {
                        epoch,
                        step,
                        detail: format!("loss {loss} on sample {i}"),
                    });
                }
                loss_sum += loss;
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.iter_mut().zip(g) {
                        *x += inv * y;
                    }
                }
            }
            opt.step(&mut state.params, &acc, lr);
            if state.params.iter().any(|p| !p.is_finite()) {
                return Err(LgError::Diverged {
                    epoch,
                    step,
                    detail: "parameters became non-finite".into(),
                });
            }
            step += 1;
        }
        after_epoch(epoch)?;
        let report = evaluate(&state.params)?;
        let train_loss = loss_sum / n_train as f64;
        log::info!("epoch {epoch}: lr {lr} loss {train_loss:.6} val mA {:.4}", report.ma);
        state.log.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_ma: report.ma,
        });
        if state.best.as_ref().is_none_or(|(_, b, _)| report.ma > b.ma) {
            state.best = Some((epoch, report, state.params.clone()));
        }
    }
    Ok(state)
}

fn check_split(split: &Split, a: usize, what: &str) -> Result<()> {
    if split.is_empty() {
        return Err(LgError::InvalidArgument(format!("{what} split is empty")));
    }
    if let Some(s) = split.samples.iter().find(|s| s.labels.len() != a) {
        return Err(LgError::InvalidArgument(format!(
            "{what} sample {} has {} labels, model has {a} attributes",
            s.id,
            s.labels.len()
        )));
    }
    Ok(())
}

fn num_attributes_of(split: &Split) -> Result<usize> {
    split
        .samples
        .first()
        .map(|s| s.labels.len())
        .ok_or_else(|| LgError::InvalidArgument("training split is empty".into()))
}

/// Positive weights from the training-label positive ratios.
pub fn split_positive_weights(split: &Split, sigma: f64) -> Result<Vec<f64>> {
    let labels = LabelMatrix::new(split.labels())?;
    positive_weights(&labels.positive_ratio(), sigma)
}

pub fn train_stage1(train: &Split, val: &Split, config: &TrainConfig) -> Result<TrainOutcome<Stage1Model>> {
    config.validate()?;
    let a = num_attributes_of(train)?;
    check_split(train, a, "train")?;
    check_split(val, a, "val")?;
    let backbone = config.backbone.config(a);
    backbone.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(INIT_STREAM);
    let init = BackboneParams::init(&backbone, &mut rng);
    let pos_w = split_positive_weights(train, config.sigma)?;

    let mut sample_grad = |params: &[Tensor], i: usize| -> Result<(f64, Vec<Vec<f64>>)> {
        let s = &train.samples[i];
        let mut g = Graph::new();
        let ids = params
            .iter()
            .map(|p| g.param(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = stage1_sample_loss(&mut g, &backbone, &ids, &s.image, &s.labels, &pos_w)?;
        let mut grads = g.backward(loss);
        let value = g.value(loss).data()[0];
        Ok((value, ids.iter().map(|&id| grads.take(id).unwrap_or_default()).collect()))
    };
    let mut evaluate = |params: &[Tensor]| {
        let model = Stage1Model {
            config: config.clone(),
            backbone: backbone.clone(),
            params: stage1_params_from(params),
        };
        evaluate_stage1(&model, val)
    };
    let state = run_epochs(
        config,
        train.len(),
        stage1_param_list(&init),
        &mut sample_grad,
        &mut evaluate,
        &mut |_| Ok(()),
    )?;
    finish(config, &backbone, state, |p| stage1_params_from(p), |config, backbone, params| Stage1Model {
        config,
        backbone,
        params,
    })
}

fn finish<P, M>(
    config: &TrainConfig,
    backbone: &BackboneConfig,
    state: EpochLoop,
    unpack: impl Fn(&[Tensor]) -> P,
    build: impl Fn(TrainConfig, BackboneConfig, P) -> M,
) -> Result<TrainOutcome<M>> {
    let (best_epoch, best_val, params) = match state.best {
        Some(b) => b,
        None => return Err(LgError::Config("epochs must be >= 1 to select a model".into())),
    };
    Ok(TrainOutcome {
        model: build(config.clone(), backbone.clone(), unpack(&params)),
        log: state.log,
        best_epoch,
        best_val,
    })
}

pub fn stage1_scores(model: &Stage1Model, split: &Split) -> Result<Vec<Vec<f64>>> {
    split
        .samples
        .iter()
        .map(|s| Ok(model.params.infer(&model.backbone, &s.image)?.logits))
        .collect()
}

/// Uses the global logits only.
pub fn evaluate_stage1(model: &Stage1Model, split: &Split) -> Result<MetricsReport> {
    MetricsReport::compute(&stage1_scores(model, split)?, &split.labels(), model.config.threshold)
}

impl Stage1Model {
    /// Activation box of every attribute for one image.
    pub fn activation_boxes(&self, image: &Tensor) -> Result<Vec<ActivationBox>> {
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let out = self.params.infer(&self.backbone, image)?;
        let cams = class_activation_maps(&out.featmap, &self.params.fc_w)?;
        activation_boxes(&cams, self.config.cam_threshold, w, h)
    }
}

/// Per-image proposal boxes, truncated to `top_k`.
fn proposal_boxes(sets: &[ProposalSet], split: &Split, top_k: usize) -> Result<Vec<Vec<BBox>>> {
    if sets.len() != split.len() {
        return Err(LgError::InvalidArgument(format!(
            "{} proposal sets for {} images",
            sets.len(),
            split.len()
        )));
    }
    sets.iter()
        .zip(&split.samples)
        .map(|(p, s)| {
            if p.is_empty() {
                return Err(LgError::InvalidArgument(format!("no proposals for {}", s.id)));
            }
            Ok(p.boxes.iter().take(top_k).copied().collect())
        })
        .collect()
}

pub fn generate_split_proposals(split: &Split, config: &ProposalConfig) -> Result<Vec<ProposalSet>> {
    split.samples.iter().map(|s| proposals::propose(&s.image, config)).collect()
}

pub fn proposal_path(dir: &Path, sample_id: &str) -> std::path::PathBuf {
    dir.join(format!("{sample_id}.{PROPOSAL_EXT}"))
}

/// Reads `dir/{id}.proposals` for every sample; a missing file is an error.
pub fn load_split_proposals(dir: &Path, split: &Split) -> Result<Vec<ProposalSet>> {
    split
        .samples
        .iter()
        .map(|s| proposals::read_proposals(&proposal_path(dir, &s.id)))
        .collect()
}

fn frozen_split(
    global: &BackboneParams,
    backbone: &BackboneConfig,
    split: &Split,
    boxes: &[Vec<BBox>],
    config: &TrainConfig,
) -> Result<Vec<FrozenSample>> {
    split
        .samples
        .iter()
        .zip(boxes)
        .map(|(s, b)| FrozenSample::compute(global, backbone, &s.image, b, config))
        .collect()
}

/// Trains the local branch and guidance head on top of a frozen stage-1 model.
/// Stage-2 settings (affinity, proposals, ROI size) come from `config`; the
/// backbone must match the stage-1 model's.
pub fn train_stage2(
    train: &Split,
    val: &Split,
    train_proposals: &[ProposalSet],
    val_proposals: &[ProposalSet],
    stage1: &Stage1Model,
    config: &TrainConfig,
) -> Result<TrainOutcome<LgModel>> {
    config.validate()?;
    let backbone = stage1.backbone.clone();
    if config.backbone.config(backbone.num_attributes) != backbone {
        return Err(LgError::Config(
            "stage-2 backbone differs from the stage-1 model".into(),
        ));
    }
    let a = backbone.num_attributes;
    check_split(train, a, "train")?;
    check_split(val, a, "val")?;
    let global = stage1.params.clone();
    let frozen_digest = params_digest(&global);

    let train_boxes = proposal_boxes(train_proposals, train, config.top_k_proposals)?;
    let val_boxes = proposal_boxes(val_proposals, val, config.top_k_proposals)?;
    // the global branch is frozen, so its per-image outputs are fixed for the whole run
    let train_frozen = frozen_split(&global, &backbone, train, &train_boxes, config)?;
    let val_frozen = frozen_split(&global, &backbone, val, &val_boxes, config)?;
    let pos_w = split_positive_weights(train, config.sigma)?;

    let init = stage2_param_list(&stage1.params.stack, &GuidanceHead::zeros(a, backbone.final_channels));
    let mut sample_grad = |params: &[Tensor], i: usize| -> Result<(f64, Vec<Vec<f64>>)> {
        let s = &train.samples[i];
        let mut g = Graph::new();
        let ids = params
            .iter()
            .map(|p| g.param(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = stage2_sample_loss(
            &mut g,
            &backbone,
            &ids,
            &s.image,
            &train_boxes[i],
            &train_frozen[i],
            config.roi_out,
            &s.labels,
            &pos_w,
        )?;
        let mut grads = g.backward(loss);
        let value = g.value(loss).data()[0];
        Ok((value, ids.iter().map(|&id| grads.take(id).unwrap_or_default()).collect()))
    };
    let mut evaluate = |params: &[Tensor]| {
        let scores = val
            .samples
            .iter()
            .zip(&val_boxes)
            .zip(&val_frozen)
            .map(|((s, b), f)| Ok(stage2_logits(&backbone, params, &s.image, b, f, config.roi_out)?.0))
            .collect::<Result<Vec<_>>>()?;
        MetricsReport::compute(&scores, &val.labels(), config.threshold)
    };
    let mut check_frozen = |epoch: usize| {
        if params_digest(&global) != frozen_digest {
            return Err(LgError::FrozenDrift { epoch });
        }
        Ok(())
    };
    let state = run_epochs(config, train.len(), init, &mut sample_grad, &mut evaluate, &mut check_frozen)?;
    let global = stage1.params.clone();
    finish(config, &backbone, state, stage2_params_from, move |config, backbone, (local, head)| LgModel {
        config,
        backbone,
        global: global.clone(),
        local,
        head,
    })
}

/// `(fused, local)` logits of one image without gradient bookkeeping.
fn stage2_logits(
    backbone: &BackboneConfig,
    params: &[Tensor],
    image: &Tensor,
    proposals: &[BBox],
    frozen: &FrozenSample,
    roi_out: [usize; 2],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let ids = params
        .iter()
        .map(|p| g.constant(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = stage2_sample_forward(&mut g, backbone, &ids, image, proposals, frozen, roi_out)?;
    Ok((g.value(out.fused).data().to_vec(), g.value(out.local).data().to_vec()))
}

/// Full per-image output of a stage-2 model.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Output {
    pub frozen: FrozenSample,
    pub fused: Vec<f64>,
    pub local: Vec<f64>,
}

impl LgModel {
    pub fn predict(&self, image: &Tensor, proposals: &ProposalSet) -> Result<Stage2Output> {
        if proposals.is_empty() {
            return Err(LgError::InvalidArgument("no proposals".into()));
        }
        let boxes: Vec<BBox> = proposals.boxes.iter().take(self.config.top_k_proposals).copied().collect();
        let frozen = FrozenSample::compute(&self.global, &self.backbone, image, &boxes, &self.config)?;
        let params = stage2_param_list(&self.local, &self.head);
        let (fused, local) = stage2_logits(&self.backbone, &params, image, &boxes, &frozen, self.config.roi_out)?;
        Ok(Stage2Output { frozen, fused, local })
    }

    pub fn stage1(&self) -> Stage1Model {
        Stage1Model {
            config: self.config.clone(),
            backbone: self.backbone.clone(),
            params: self.global.clone(),
        }
    }
}

pub fn evaluate_stage2(model: &LgModel, split: &Split, proposals: &[ProposalSet]) -> Result<MetricsReport> {
    if proposals.len() != split.len() {
        return Err(LgError::InvalidArgument(format!(
            "{} proposal sets for {} images",
            proposals.len(),
            split.len()
        )));
    }
    let scores = split
        .samples
        .iter()
        .zip(proposals)
        .map(|(s, p)| Ok(model.predict(&s.image, p)?.fused))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::compute(&scores, &split.labels(), model.config.threshold)
}

/// Threshold-0.5 report of either model kind. Stage-1 models ignore `proposals`.
pub fn evaluate(model: &Model, split: &Split, proposals: Option<&[ProposalSet]>) -> Result<MetricsReport> {
    match model {
        Model::Stage1(m) => evaluate_stage1(m, split),
        Model::Stage2(m) => {
            let p = proposals.ok_or_else(|| {
                LgError::InvalidArgument("stage-2 evaluation needs proposals".into())
            })?;
            evaluate_stage2(m, split, p)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationName {
    /// Standard stride-2 last stage vs stride 1 (doubled final map).
    Resolution,
    /// Stride-1 last stage without vs with dilation 2.
    Dilation,
    /// IoU vs raw overlap-area affinity.
    AffinityMode,
    /// Uniform `1/d` affinity vs IoU guidance.
    NoGuidance,
}

impl AblationName {
    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| LgError::InvalidArgument(format!("unknown ablation {s:?}")))
    }

    /// `(label, config)` of both arms, derived from `base`.
    pub fn arms(self, base: &TrainConfig) -> [(String, TrainConfig); 2] {
        let with = |f: &dyn Fn(&mut TrainConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            AblationName::Resolution => [
                ("standard".into(), with(&|c| c.backbone = BackboneVariant::Standard)),
                ("high_res".into(), with(&|c| c.backbone = BackboneVariant::HighResUndilated)),
            ],
            AblationName::Dilation => [
                ("undilated".into(), with(&|c| c.backbone = BackboneVariant::HighResUndilated)),
                ("dilated".into(), with(&|c| c.backbone = BackboneVariant::HighRes)),
            ],
            AblationName::AffinityMode => [
                ("iou".into(), with(&|c| c.affinity_mode = AffinityMode::Iou)),
                ("overlap_area".into(), with(&|c| c.affinity_mode = AffinityMode::OverlapArea)),
            ],
            AblationName::NoGuidance => [
                ("uniform".into(), with(&|c| c.uniform_affinity = true)),
                ("guided".into(), with(&|c| c.uniform_affinity = false)),
            ],
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ArmReport {
    pub label: String,
    pub config: TrainConfig,
    pub stage1_val: MetricsReport,
    pub val: MetricsReport,
    pub test: MetricsReport,
    pub stage2_log: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub name: AblationName,
    pub arms: Vec<ArmReport>,
}

impl AblationReport {
    /// Header plus one TSV row per arm and split.
    pub fn to_tsv(&self) -> String {
        let mut s = format!("arm\tsplit\t{}\n", MetricsReport::TSV_HEADER);
        for arm in &self.arms {
            for (split, r) in [("val", &arm.val), ("test", &arm.test)] {
                s.push_str(&format!("{}\t{split}\t{}\n", arm.label, r.tsv_row()));
            }
        }
        s
    }
}

/// Dataset splits and their proposals, shared by every arm.
pub struct AblationData<'a> {
    pub train: &'a Split,
    pub val: &'a Split,
    pub test: &'a Split,
    pub train_proposals: &'a [ProposalSet],
    pub val_proposals: &'a [ProposalSet],
    pub test_proposals: &'a [ProposalSet],
}

/// Trains both arms with the same seed and data. Arms whose stage-1
/// configuration is identical share one stage-1 model; `stage1_epochs`
/// overrides the epoch count of stage 1 when given.
pub fn run_ablation(
    name: AblationName,
    base: &TrainConfig,
    stage1_epochs: Option<usize>,
    data: &AblationData<'_>,
) -> Result<AblationReport> {
    let mut cache: Vec<(TrainConfig, Stage1Model, MetricsReport)> = Vec::new();
    let mut arms = Vec::new();
    for (label, config) in name.arms(base) {
        let mut s1_config = config.clone();
        if let Some(e) = stage1_epochs {
            s1_config.epochs = e;
        }
        // stage 1 does not read the stage-2 fields
        s1_config.affinity_mode = AffinityMode::Iou;
        s1_config.uniform_affinity = false;
        let pos = cache.iter().position(|(c, _, _)| *c == s1_config);
        let idx = match pos {
            Some(i) => i,
            None => {
                let out = train_stage1(data.train, data.val, &s1_config)?;
                cache.push((s1_config, out.model, out.best_val));
                cache.len() - 1
            }
        };
        let (_, stage1, stage1_val) = &cache[idx];
        let mut stage1 = stage1.clone();
        stage1.config = config.clone();
        let out = train_stage2(
            data.train,
            data.val,
            data.train_proposals,
            data.val_proposals,
            &stage1,
            &config,
        )?;
        let test = evaluate_stage2(&out.model, data.test, data.test_proposals)?;
        arms.push(ArmReport {
            label,
            config,
            stage1_val: stage1_val.clone(),
            val: out.best_val,
            test,
            stage2_log: out.log,
        });
    }
    Ok(AblationReport { name, arms })
}

/// Sample lookup by id.
pub fn find_sample<'a>(split: &'a Split, id: &str) -> Option<&'a Sample> {
    split.samples.iter().find(|s| s.id == id)
}
