//! The hierarchical co-encoding model. A frame-level encoder turns each
//! shot (with a prepended learnable shot token) into one embedding; a
//! shot-level encoder then jointly encodes several videos' shot sequences,
//! each prefixed by a shared learnable video token. A mask keeps every
//! video token on its own video while shots attend across videos, so the
//! video tokens stay video-specific and the shot representations carry
//! cross-video context. Scores come from an affine head over each shot
//! representation concatenated with its video representation.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError, TensorId};
use crate::kts::ShotBoundaries;
use crate::transformer::{
    self, glorot, sinusoidal_positional_encoding, AttentionMask, EncoderStackIds, EncoderStackParams, MaskError,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("encode_shot: a shot must contain at least one frame")]
    EmptyShot,
    #[error("joint_encode: video {0} has no shots")]
    EmptyVideo(usize),
    #[error("{got} shot scores for {expected} shots")]
    BoundaryMismatch { expected: usize, got: usize },
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file: {0}")]
    Format(String),
}

/// Structural hyperparameters. The defaults are the full-scale model; tests
/// shrink every dimension.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Frame feature dimension.
    pub d_f: usize,
    /// Shot embedding dimension.
    pub d_s: usize,
    /// Video/shot representation dimension after the output projection.
    pub d_v: usize,
    pub f_layers: usize,
    pub f_heads: usize,
    pub f_ff: usize,
    pub s_layers: usize,
    pub s_heads: usize,
    pub s_ff: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_f: 1024,
            d_s: 512,
            d_v: 512,
            f_layers: 2,
            f_heads: 2,
            f_ff: 4096,
            s_layers: 3,
            s_heads: 2,
            s_ff: 2048,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |msg: String| Err(ModelError::Config(msg));
        if self.d_f == 0 || self.d_s == 0 || self.d_v == 0 {
            return err("dimensions must be positive".into());
        }
        if !self.d_f.is_multiple_of(2) || !self.d_s.is_multiple_of(2) {
            return err(format!("d_f ({}) and d_s ({}) must be even for positional encodings", self.d_f, self.d_s));
        }
        if self.f_heads == 0 || !self.d_f.is_multiple_of(self.f_heads) {
            return err(format!("f_heads ({}) must divide d_f ({})", self.f_heads, self.d_f));
        }
        if self.s_heads == 0 || !self.d_s.is_multiple_of(self.s_heads) {
            return err(format!("s_heads ({}) must divide d_s ({})", self.s_heads, self.d_s));
        }
        Ok(())
    }
}

/// All learnable weights.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// Learnable embedding prepended to each shot's frames (1 x d_f).
    pub shot_token: Tensor,
    /// Learnable embedding prepended to each video's shots (1 x d_s).
    pub video_token: Tensor,
    pub f_stack: EncoderStackParams,
    pub s_stack: EncoderStackParams,
    /// d_f -> d_s projection applied to the shot-token output.
    pub proj_fs: Tensor,
    /// d_s -> d_v projection applied to the shot-level encoder output.
    pub proj_sv: Tensor,
    /// Score head: (2 d_v) x 1 weight and 1 x 1 bias.
    pub score_w: Tensor,
    pub score_b: Tensor,
}

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(ModelParams {
            shot_token: glorot(1, config.d_f, &mut rng),
            video_token: glorot(1, config.d_s, &mut rng),
            f_stack: EncoderStackParams::init(config.d_f, config.f_heads, config.f_ff, config.f_layers, &mut rng)?,
            s_stack: EncoderStackParams::init(config.d_s, config.s_heads, config.s_ff, config.s_layers, &mut rng)?,
            proj_fs: glorot(config.d_f, config.d_s, &mut rng),
            proj_sv: glorot(config.d_s, config.d_v, &mut rng),
            score_w: glorot(2 * config.d_v, 1, &mut rng),
            score_b: Tensor::zeros(1, 1),
            config,
        })
    }

    /// Parameters in a fixed canonical order. `register` and
    /// [`ModelIds::flat`] follow the same order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("shot_token".into(), &self.shot_token),
            ("video_token".into(), &self.video_token),
        ];
        for (prefix, stack) in [("f", &self.f_stack), ("s", &self.s_stack)] {
            for (li, layer) in stack.layers.iter().enumerate() {
                for (name, head, t) in layer.tensors() {
                    out.push((layer_param_name(prefix, li, name, head), t));
                }
            }
        }
        out.push(("proj_fs".into(), &self.proj_fs));
        out.push(("proj_sv".into(), &self.proj_sv));
        out.push(("score_w".into(), &self.score_w));
        out.push(("score_b".into(), &self.score_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("shot_token".into(), &mut self.shot_token),
            ("video_token".into(), &mut self.video_token),
        ];
        for (prefix, stack) in [("f", &mut self.f_stack), ("s", &mut self.s_stack)] {
            for (li, layer) in stack.layers.iter_mut().enumerate() {
                for (name, head, t) in layer.tensors_mut() {
                    out.push((layer_param_name(prefix, li, name, head), t));
                }
            }
        }
        out.push(("proj_fs".into(), &mut self.proj_fs));
        out.push(("proj_sv".into(), &mut self.proj_sv));
        out.push(("score_w".into(), &mut self.score_w));
        out.push(("score_b".into(), &mut self.score_b));
        out
    }

    pub fn register(&self, tape: &mut Tape) -> ModelIds {
        ModelIds {
            shot_token: tape.param(&self.shot_token),
            video_token: tape.param(&self.video_token),
            f_stack: self.f_stack.register(tape),
            s_stack: self.s_stack.register(tape),
            proj_fs: tape.param(&self.proj_fs),
            proj_sv: tape.param(&self.proj_sv),
            score_w: tape.param(&self.score_w),
            score_b: tape.param(&self.score_b),
            d_s: self.config.d_s,
            d_f: self.config.d_f,
        }
    }

    /// Write as a JSON header line (names and shapes, in order) followed by
    /// the raw little-endian f32 values in that order.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let named = self.named();
        let header = SavedHeader {
            config: self.config.clone(),
            tensors: named
                .iter()
                .map(|(name, t)| SavedTensor { name: name.clone(), rows: t.rows(), cols: t.cols() })
                .collect(),
        };
        let mut bytes = serde_json::to_vec(&header).map_err(|e| ModelError::Format(e.to_string()))?;
        bytes.push(b'\n');
        for (_, t) in &named {
            for v in t.data() {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let mut file = fs::File::create(path)?;
        file.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| ModelError::Format("missing header line".into()))?;
        let header: SavedHeader =
            serde_json::from_slice(&bytes[..newline]).map_err(|e| ModelError::Format(e.to_string()))?;
        let mut params = ModelParams::init(header.config, 0)?;
        let mut offset = newline + 1;
        for ((name, tensor), saved) in params.named_mut().into_iter().zip(&header.tensors) {
            if name != saved.name || tensor.rows() != saved.rows || tensor.cols() != saved.cols {
                return Err(ModelError::Format(format!(
                    "expected {name} ({}x{}), file has {} ({}x{})",
                    tensor.rows(),
                    tensor.cols(),
                    saved.name,
                    saved.rows,
                    saved.cols
                )));
            }
            let n = saved.rows * saved.cols;
            let end = offset + 4 * n;
            if end > bytes.len() {
                return Err(ModelError::Format(format!(
                    "truncated: expected {} bytes, found {}",
                    end,
                    bytes.len()
                )));
            }
            let data = tensor.data_mut();
            for (k, chunk) in bytes[offset..end].chunks_exact(4).enumerate() {
                let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
                if !v.is_finite() {
                    return Err(ModelError::Format(format!("non-finite value in {name}")));
                }
                data[k] = v;
            }
            offset = end;
        }
        if offset != bytes.len() {
            return Err(ModelError::Format(format!(
                "trailing bytes: expected {} bytes, found {}",
                offset,
                bytes.len()
            )));
        }
        Ok(params)
    }
}

fn layer_param_name(prefix: &str, layer: usize, name: &str, head: usize) -> String {
    match name {
        "w_q" | "w_k" | "w_v" => format!("{prefix}.{layer}.{name}.{head}"),
        _ => format!("{prefix}.{layer}.{name}"),
    }
}

#[derive(Serialize, Deserialize)]
struct SavedHeader {
    config: ModelConfig,
    tensors: Vec<SavedTensor>,
}

#[derive(Serialize, Deserialize)]
struct SavedTensor {
    name: String,
    rows: usize,
    cols: usize,
}

/// Tape handles for registered parameters.
pub struct ModelIds {
    pub shot_token: TensorId,
    pub video_token: TensorId,
    pub f_stack: EncoderStackIds,
    pub s_stack: EncoderStackIds,
    pub proj_fs: TensorId,
    pub proj_sv: TensorId,
    pub score_w: TensorId,
    pub score_b: TensorId,
    d_s: usize,
    d_f: usize,
}

impl ModelIds {
    /// Same order as [`ModelParams::named`].
    pub fn flat(&self) -> Vec<TensorId> {
        let mut out = vec![self.shot_token, self.video_token];
        out.extend(self.f_stack.flat());
        out.extend(self.s_stack.flat());
        out.extend([self.proj_fs, self.proj_sv, self.score_w, self.score_b]);
        out
    }
}

/// Token layout of a joint batch: per video, one video token followed by
/// that video's shot tokens, videos concatenated in order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointLayout {
    shots: Vec<usize>,
}

impl JointLayout {
    pub fn new(shots_per_video: Vec<usize>) -> Result<Self, ModelError> {
        if shots_per_video.is_empty() {
            return Err(ModelError::EmptyVideo(0));
        }
        if let Some(n) = shots_per_video.iter().position(|&p| p == 0) {
            return Err(ModelError::EmptyVideo(n));
        }
        Ok(JointLayout { shots: shots_per_video })
    }

    pub fn num_videos(&self) -> usize {
        self.shots.len()
    }

    pub fn shots(&self, video: usize) -> usize {
        self.shots[video]
    }

    pub fn total_tokens(&self) -> usize {
        self.shots.len() + self.shots.iter().sum::<usize>()
    }

    pub fn video_token_pos(&self, video: usize) -> usize {
        video + self.shots[..video].iter().sum::<usize>()
    }

    pub fn shot_pos(&self, video: usize, shot: usize) -> usize {
        self.video_token_pos(video) + 1 + shot
    }

    fn is_video_token(&self, pos: usize) -> Option<usize> {
        (0..self.num_videos()).find(|&n| self.video_token_pos(n) == pos)
    }

    fn video_of(&self, pos: usize) -> usize {
        let mut video = 0;
        for n in 0..self.num_videos() {
            if pos >= self.video_token_pos(n) {
                video = n;
            }
        }
        video
    }
}

/// The joint-attention mask: a video token may attend only to itself and
/// its own shots; a shot may attend to every shot of every video and to
/// its own video token.
pub fn build_joint_mask(layout: &JointLayout) -> AttentionMask {
    let total = layout.total_tokens();
    let mut allowed = vec![false; total * total];
    for i in 0..total {
        let vi = layout.video_of(i);
        for j in 0..total {
            let vj = layout.video_of(j);
            let ok = match (layout.is_video_token(i), layout.is_video_token(j)) {
                (Some(_), Some(_)) => i == j,
                (Some(_), None) => vi == vj,
                (None, Some(_)) => vi == vj,
                (None, None) => true,
            };
            allowed[i * total + j] = ok;
        }
    }
    AttentionMask::new(total, allowed).expect("joint mask satisfies the mask invariants")
}

/// One shot to one d_s embedding: prepend the shot token, add positional
/// encodings over the 1+L positions, run the frame-level stack with a full
/// mask, take position 0, and project d_f -> d_s.
pub fn encode_shot(tape: &mut Tape, ids: &ModelIds, frames: &Tensor) -> Result<TensorId, ModelError> {
    if frames.rows() == 0 {
        return Err(ModelError::EmptyShot);
    }
    if frames.cols() != ids.d_f {
        return Err(TensorError::ShapeMismatch {
            op: "encode_shot",
            detail: format!("frames are {}-dimensional, model expects {}", frames.cols(), ids.d_f),
        }
        .into());
    }
    let frames_id = tape.leaf(frames);
    let tokens = tape.concat_rows(&[ids.shot_token, frames_id])?;
    let pe = tape.leaf(&sinusoidal_positional_encoding(frames.rows() + 1, ids.d_f)?);
    let x = tape.add(tokens, pe)?;
    let mask = AttentionMask::full(frames.rows() + 1);
    let (encoded, _) = transformer::encoder_stack(tape, x, &mask, &ids.f_stack)?;
    let first = tape.slice_rows(encoded, 0, 1)?;
    Ok(tape.matmul(first, ids.proj_fs)?)
}

/// Encode a whole video's shots into a P x d_s matrix of shot embeddings.
pub fn encode_video_shots(
    tape: &mut Tape,
    ids: &ModelIds,
    features: &Tensor,
    boundaries: &ShotBoundaries,
) -> Result<TensorId, ModelError> {
    if boundaries.num_frames() != features.rows() {
        return Err(ModelError::BoundaryMismatch { expected: features.rows(), got: boundaries.num_frames() });
    }
    let mut shots = Vec::with_capacity(boundaries.num_shots());
    for i in 0..boundaries.num_shots() {
        let (start, end) = boundaries.shot_range(i);
        let frames = features.slice_rows(start, end - start)?;
        shots.push(encode_shot(tape, ids, &frames)?);
    }
    Ok(tape.concat_rows(&shots)?)
}

/// Output of the shot-level joint encoding.
pub struct JointEncoding {
    pub layout: JointLayout,
    /// Per video: 1 x d_v video representation.
    pub video_reps: Vec<TensorId>,
    /// Per video: P_n x d_v shot representations.
    pub shot_reps: Vec<TensorId>,
    /// Attention matrices per layer and head, for mask inspection.
    pub attention: Vec<Vec<TensorId>>,
}

/// Jointly encode N videos' shot-embedding matrices (each P_n x d_s).
/// Positional indices restart at every video token. The output projection
/// d_s -> d_v is applied to all positions before splitting.
pub fn joint_encode(tape: &mut Tape, ids: &ModelIds, shot_embeddings: &[TensorId]) -> Result<JointEncoding, ModelError> {
    if shot_embeddings.is_empty() {
        return Err(ModelError::EmptyVideo(0));
    }
    let mut shots = Vec::with_capacity(shot_embeddings.len());
    for (n, &emb) in shot_embeddings.iter().enumerate() {
        let (p, d) = tape.shape(emb);
        if p == 0 {
            return Err(ModelError::EmptyVideo(n));
        }
        if d != ids.d_s {
            return Err(TensorError::ShapeMismatch {
                op: "joint_encode",
                detail: format!("video {n} embeddings are {d}-dimensional, expected {}", ids.d_s),
            }
            .into());
        }
        shots.push(p);
    }
    let layout = JointLayout::new(shots)?;
    let mut blocks = Vec::with_capacity(layout.num_videos());
    for &emb in shot_embeddings {
        let (p, _) = tape.shape(emb);
        let block = tape.concat_rows(&[ids.video_token, emb])?;
        let pe = tape.leaf(&sinusoidal_positional_encoding(p + 1, ids.d_s)?);
        blocks.push(tape.add(block, pe)?);
    }
    let x = tape.concat_rows(&blocks)?;
    let mask = build_joint_mask(&layout);
    let (encoded, attention) = transformer::encoder_stack(tape, x, &mask, &ids.s_stack)?;
    let projected = tape.matmul(encoded, ids.proj_sv)?;
    let mut video_reps = Vec::with_capacity(layout.num_videos());
    let mut shot_reps = Vec::with_capacity(layout.num_videos());
    for n in 0..layout.num_videos() {
        video_reps.push(tape.slice_rows(projected, layout.video_token_pos(n), 1)?);
        shot_reps.push(tape.slice_rows(projected, layout.shot_pos(n, 0), layout.shots(n))?);
    }
    Ok(JointEncoding { layout, video_reps, shot_reps, attention })
}

/// Affine score per shot: concat(shot rep, video rep) . w + b, unsquashed.
/// Returns one P_n x 1 column per video.
pub fn predict_scores(tape: &mut Tape, ids: &ModelIds, enc: &JointEncoding) -> Result<Vec<TensorId>, ModelError> {
    let mut out = Vec::with_capacity(enc.video_reps.len());
    for (&shots, &video) in enc.shot_reps.iter().zip(&enc.video_reps) {
        let (p, _) = tape.shape(shots);
        let repeated = tape.gather_rows(video, vec![0; p])?;
        let cat = tape.concat_cols(&[shots, repeated])?;
        let scores = tape.matmul(cat, ids.score_w)?;
        out.push(tape.add_row(scores, ids.score_b)?);
    }
    Ok(out)
}

/// Broadcast shot scores to frames: every frame gets its shot's score.
pub fn expand_scores(tape: &mut Tape, shot_scores: TensorId, boundaries: &ShotBoundaries) -> Result<TensorId, ModelError> {
    let (p, _) = tape.shape(shot_scores);
    if p != boundaries.num_shots() {
        return Err(ModelError::BoundaryMismatch { expected: boundaries.num_shots(), got: p });
    }
    Ok(tape.gather_rows(shot_scores, boundaries.frame_shots())?)
}

/// Representation of the score-weighted summary: scale each pre-joint shot
/// embedding by its score, then encode that single video alone (all-true
/// mask) and return the video-token representation. Gradients flow through
/// both the scores and the embeddings.
pub fn encode_summary(
    tape: &mut Tape,
    ids: &ModelIds,
    shot_embeddings: TensorId,
    shot_scores: TensorId,
) -> Result<TensorId, ModelError> {
    let weighted = tape.scale_rows(shot_embeddings, shot_scores)?;
    let enc = joint_encode(tape, ids, &[weighted])?;
    Ok(enc.video_reps[0])
}

/// Mean over the reconstructed videos of |r_sum - r|^2 / d_v.
pub fn reconstruction_loss(tape: &mut Tape, summary_reps: &[TensorId], video_reps: &[TensorId]) -> Result<TensorId, ModelError> {
    if summary_reps.len() != video_reps.len() || summary_reps.is_empty() {
        return Err(TensorError::ShapeMismatch {
            op: "reconstruction_loss",
            detail: format!("{} summary reps vs {} video reps", summary_reps.len(), video_reps.len()),
        }
        .into());
    }
    let mut terms = Vec::with_capacity(summary_reps.len());
    for (&sum_rep, &vid_rep) in summary_reps.iter().zip(video_reps) {
        terms.push(tape.mse(sum_rep, vid_rep)?);
    }
    mean_of(tape, &terms).map_err(Into::into)
}

/// Mean squared error between predicted frame scores and ground truth.
pub fn supervised_loss(tape: &mut Tape, frame_scores: TensorId, gt: &Tensor) -> Result<TensorId, ModelError> {
    let target = tape.leaf(gt);
    Ok(tape.mse(frame_scores, target)?)
}

/// (mean(frame scores) - epsilon)^2; keeps the score mass near the target
/// selection rate instead of drifting uniformly high.
pub fn regularization_loss(tape: &mut Tape, frame_scores: TensorId, epsilon: f64) -> Result<TensorId, ModelError> {
    let m = tape.mean(frame_scores)?;
    let centered = tape.add_scalar(m, -epsilon)?;
    Ok(tape.mul(centered, centered)?)
}

/// supervised: sup + alpha*rec + beta*reg; unsupervised: alpha*rec + beta*reg.
pub fn total_loss(
    tape: &mut Tape,
    sup: Option<TensorId>,
    rec: TensorId,
    reg: TensorId,
    alpha: f64,
    beta: f64,
) -> Result<TensorId, ModelError> {
    if alpha < 0.0 || beta < 0.0 {
        return Err(ModelError::Config(format!("loss weights must be nonnegative, got alpha={alpha}, beta={beta}")));
    }
    let rec_term = tape.scale(rec, alpha)?;
    let reg_term = tape.scale(reg, beta)?;
    let mut total = tape.add(rec_term, reg_term)?;
    if let Some(sup) = sup {
        total = tape.add(sup, total)?;
    }
    Ok(total)
}

fn mean_of(tape: &mut Tape, terms: &[TensorId]) -> Result<TensorId, TensorError> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    tape.scale(acc, 1.0 / terms.len() as f64)
}

/// Forward pass over a single segmented video (inference path).
pub struct SingleForward {
    pub shot_scores: TensorId,
    pub frame_scores: TensorId,
    pub video_rep: TensorId,
    pub shot_reps: TensorId,
    pub shot_embeddings: TensorId,
    pub attention: Vec<Vec<TensorId>>,
}

pub fn forward_single(
    tape: &mut Tape,
    ids: &ModelIds,
    features: &Tensor,
    boundaries: &ShotBoundaries,
) -> Result<SingleForward, ModelError> {
    let shot_embeddings = encode_video_shots(tape, ids, features, boundaries)?;
    let enc = joint_encode(tape, ids, &[shot_embeddings])?;
    let scores = predict_scores(tape, ids, &enc)?;
    let frame_scores = expand_scores(tape, scores[0], boundaries)?;
    Ok(SingleForward {
        shot_scores: scores[0],
        frame_scores,
        video_rep: enc.video_reps[0],
        shot_reps: enc.shot_reps[0],
        shot_embeddings,
        attention: enc.attention,
    })
}

/// One video of a training batch.
pub struct BatchVideo<'a> {
    pub features: &'a Tensor,
    pub boundaries: &'a ShotBoundaries,
    /// Normalized ground-truth frame scores; required in supervised mode.
    pub gt_scores: Option<&'a Tensor>,
}

/// Everything the optimizer needs from one joint batch.
pub struct BatchLoss {
    pub total: TensorId,
    pub sup: Option<TensorId>,
    pub rec: TensorId,
    pub reg: TensorId,
    pub frame_scores: Vec<TensorId>,
    pub encoding: JointEncoding,
}

/// Assemble the full training loss for one batch: encode every shot of
/// every video, jointly encode, score, and reconstruct the first video
/// from its score-weighted shot embeddings. Supervision and regularization
/// average over the videos in the batch.
pub fn batch_loss(
    tape: &mut Tape,
    ids: &ModelIds,
    batch: &[BatchVideo<'_>],
    alpha: f64,
    beta: f64,
    epsilon: f64,
    supervised: bool,
) -> Result<BatchLoss, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyVideo(0));
    }
    let mut embeddings = Vec::with_capacity(batch.len());
    for video in batch {
        embeddings.push(encode_video_shots(tape, ids, video.features, video.boundaries)?);
    }
    let enc = joint_encode(tape, ids, &embeddings)?;
    let shot_scores = predict_scores(tape, ids, &enc)?;
    let mut frame_scores = Vec::with_capacity(batch.len());
    for (video, &scores) in batch.iter().zip(&shot_scores) {
        frame_scores.push(expand_scores(tape, scores, video.boundaries)?);
    }

    let sup = if supervised {
        let mut terms = Vec::with_capacity(batch.len());
        for (video, &fs) in batch.iter().zip(&frame_scores) {
            let gt = video.gt_scores.ok_or_else(|| {
                ModelError::Config("supervised loss requires ground-truth scores for every video".into())
            })?;
            terms.push(supervised_loss(tape, fs, gt)?);
        }
        Some(mean_of(tape, &terms)?)
    } else {
        None
    };

    // reconstruction on the first video of the batch only
    let summary_rep = encode_summary(tape, ids, embeddings[0], shot_scores[0])?;
    let rec = reconstruction_loss(tape, &[summary_rep], &[enc.video_reps[0]])?;

    let mut reg_terms = Vec::with_capacity(batch.len());
    for &fs in &frame_scores {
        reg_terms.push(regularization_loss(tape, fs, epsilon)?);
    }
    let reg = mean_of(tape, &reg_terms)?;

    let total = total_loss(tape, sup, rec, reg, alpha, beta)?;
    Ok(BatchLoss { total, sup, rec, reg, frame_scores, encoding: enc })
}
