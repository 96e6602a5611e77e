//! The bidding sequence model.
//!
//! A causal transformer reads windows of interleaved (RTG, state, action)
//! tokens with learned per-step embeddings. Three heads read the state-token
//! outputs — the exploration coefficient, the action, and the value estimate
//! — and a fourth reads the next-step RTG off the action-token outputs, so
//! the RTG head conditions on the action taken.
//!
//! Training runs the window twice: a teacher pass with the label actions,
//! and an exploration pass where the final step's action is replaced by its
//! scaled version `a * coeff` while the history stays ground truth. The
//! second pass routes gradient into the coefficient head, which is how the
//! value loss steers exploration. The coefficient is squashed to (0.5, 1.5)
//! and its head starts zero-initialized, so training opens at the identity
//! exploration with the mixing weight pinned to 0.5 exactly.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::optim::AdamWState;
use crate::autodiff::params::{Parameters, ARCHIVE_VERSION};
use crate::autodiff::{DiffError, Graph, NodeId};
use crate::dataset::{NormalizationStats, TrajectoryWindow};
use crate::env::STATE_DIM;
use crate::score::ScoreVariant;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("window has {got} steps but the model context allows at most {max}")]
    ContextOverflow { got: usize, max: usize },
    #[error("inference context is inconsistent: {0}")]
    BadContext(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {got} (expected {expected})")]
    VersionMismatch { got: u32, expected: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    /// Context length M; windows span M+1 steps.
    pub context: usize,
    /// Sharpness of the explored-vs-label RTG comparison.
    pub alpha_r: f64,
    /// Expectile level for the value head.
    pub tau: f64,
    /// Weights for the RTG, action, expectile, and value losses.
    pub loss_weights: [f64; 4],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            width: 32,
            context: 19,
            alpha_r: 1.0,
            tau: 0.99,
            loss_weights: [1.0, 1.0, 1.0, 1.0],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers == 0 || self.heads == 0 || self.width == 0 {
            return Err(ModelError::InvalidConfig(
                "layers, heads and width must be positive".into(),
            ));
        }
        if self.width % self.heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(ModelError::InvalidConfig(format!("tau {} outside (0,1)", self.tau)));
        }
        if self.loss_weights.iter().any(|&w| w < 0.0) {
            return Err(ModelError::InvalidConfig("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// `sigmoid(x) + 0.5`: squashes the exploration coefficient into (0.5, 1.5)
/// with value exactly 1 at zero. The sigmoid is clamped away from its
/// saturation points so the interval stays open even where `exp` underflows.
pub fn scale_sigma(x: f64) -> f64 {
    sigmoid(x).clamp(1e-15, 1.0 - 1e-15) + 0.5
}

/// Which loss set a training step optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossVariant {
    /// RTG + weighted action + expectile + value guidance.
    Full,
    /// Value function removed: expectile/value losses replaced by the
    /// unbounded RTG-push loss on explored actions.
    NoValueGuide,
    /// No exploration at all: RTG loss plus plain behavior cloning.
    BehaviorClone,
}

/// Values copied out of the gradient graph during the live pass, and fed
/// back verbatim to keep finite-difference checks meaningful.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrozenValues {
    pub explored_actions: Vec<f64>,
    pub w: Vec<f64>,
    pub value_estimates: Vec<f64>,
    pub rtg_preds: Vec<f64>,
    /// Parameter values backing the exploration pass's frozen evaluation
    /// network. Live passes detach from the current parameters; a
    /// finite-difference harness pins them here so the stop-gradient stays
    /// put under perturbation.
    pub explore_params: Option<Vec<Vec<f64>>>,
    /// Trunk features feeding the coefficient and value heads, captured for
    /// the same reason: those heads read detached features so their losses
    /// tune the readouts alone, not the trunk beneath them.
    pub beta_features: Option<Vec<f64>>,
}

/// Per-position head outputs of the teacher pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardOutputs {
    pub beta_hat: Vec<f64>,
    pub a_hat: Vec<f64>,
    pub v_hat: Vec<f64>,
    pub r_hat_next: Vec<f64>,
}

/// Scalar loss values plus the masked sums backing the training metrics.
#[derive(Clone, Debug, Default)]
pub struct WindowLosses {
    pub l_r: f64,
    pub l_a: f64,
    pub l_e: Option<f64>,
    pub l_v: Option<f64>,
    pub l_w: Option<f64>,
    pub l_o: f64,
    pub w_sum: f64,
    pub beta_sum: f64,
    pub real_positions: usize,
    pub explored_positions: usize,
}

/// A window's computation graph, ready for backward.
pub struct WindowForward {
    pub graph: Graph,
    pub leaves: Vec<NodeId>,
    pub total_loss: NodeId,
    pub loss_r: NodeId,
    pub loss_a: NodeId,
    pub loss_e: Option<NodeId>,
    pub loss_v: Option<NodeId>,
    pub loss_w: Option<NodeId>,
    pub losses: WindowLosses,
    pub outputs: ForwardOutputs,
    pub frozen: FrozenValues,
}

impl WindowForward {
    /// Backpropagates the combined loss and returns per-parameter gradients.
    pub fn gradients(mut self) -> Result<(WindowLosses, Vec<Vec<f64>>), ModelError> {
        self.graph.backward(self.total_loss)?;
        let grads = self
            .leaves
            .iter()
            .map(|&leaf| self.graph.grad(leaf).to_vec())
            .collect();
        Ok((self.losses, grads))
    }
}

/// Context assembled during autoregressive inference: complete past steps
/// plus the current (RTG, state) pair awaiting an action. All values raw.
#[derive(Clone, Debug, Default)]
pub struct InferenceContext {
    pub rtgs: Vec<f64>,
    pub states: Vec<[f64; STATE_DIM]>,
    pub actions: Vec<f64>,
    pub timesteps: Vec<usize>,
}

impl InferenceContext {
    pub fn steps(&self) -> usize {
        self.rtgs.len()
    }

    fn check(&self) -> Result<(), ModelError> {
        let k = self.rtgs.len();
        if k == 0 {
            return Err(ModelError::BadContext("empty context".into()));
        }
        if self.states.len() != k || self.timesteps.len() != k {
            return Err(ModelError::BadContext(format!(
                "{} rtgs, {} states, {} timesteps",
                k,
                self.states.len(),
                self.timesteps.len()
            )));
        }
        if self.actions.len() + 1 != k {
            return Err(ModelError::BadContext(format!(
                "{} actions for {k} steps (expected {})",
                self.actions.len(),
                k - 1
            )));
        }
        Ok(())
    }

    /// Drops the oldest steps so at most `keep` remain.
    pub fn truncate_front(&mut self, keep: usize) {
        if self.rtgs.len() > keep {
            let excess = self.rtgs.len() - keep;
            self.rtgs.drain(..excess);
            self.states.drain(..excess);
            self.timesteps.drain(..excess);
            self.actions.drain(..excess.min(self.actions.len()));
        }
    }
}

struct ParamLayout {
    embed_rtg_w: usize,
    embed_rtg_b: usize,
    embed_state_w: usize,
    embed_state_b: usize,
    embed_action_w: usize,
    embed_action_b: usize,
    embed_time: usize,
    blocks: Vec<BlockLayout>,
    final_ln_g: usize,
    final_ln_b: usize,
    head_beta_w: usize,
    head_beta_b: usize,
    head_action_w: usize,
    head_action_b: usize,
    head_value_w: usize,
    head_value_b: usize,
    head_rtg_w: usize,
    head_rtg_b: usize,
}

struct BlockLayout {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    mlp_w1: usize,
    mlp_b1: usize,
    mlp_w2: usize,
    mlp_b2: usize,
}

/// Model parameters plus the architecture they instantiate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GaveModel {
    pub config: ModelConfig,
    /// Number of distinct step indices the timestep embedding covers.
    pub t_max: usize,
    pub params: Parameters,
}

impl GaveModel {
    pub fn new(config: &ModelConfig, t_max: usize, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if t_max == 0 {
            return Err(ModelError::InvalidConfig("t_max must be positive".into()));
        }
        let d = config.width;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid init distribution");
        let mut params = Parameters::new();
        let init = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
            (0..n).map(|_| normal.sample(rng)).collect()
        };

        params.register("embed.rtg.w", 1, d, init(&mut rng, d));
        params.register("embed.rtg.b", 1, d, vec![0.0; d]);
        params.register("embed.state.w", STATE_DIM, d, init(&mut rng, STATE_DIM * d));
        params.register("embed.state.b", 1, d, vec![0.0; d]);
        params.register("embed.action.w", 1, d, init(&mut rng, d));
        params.register("embed.action.b", 1, d, vec![0.0; d]);
        params.register("embed.time", t_max, d, init(&mut rng, t_max * d));

        for layer in 0..config.layers {
            let p = |name: &str| format!("layer{layer}.{name}");
            params.register(&p("ln1.g"), 1, d, vec![1.0; d]);
            params.register(&p("ln1.b"), 1, d, vec![0.0; d]);
            params.register(&p("attn.wq"), d, d, init(&mut rng, d * d));
            params.register(&p("attn.bq"), 1, d, vec![0.0; d]);
            params.register(&p("attn.wk"), d, d, init(&mut rng, d * d));
            params.register(&p("attn.bk"), 1, d, vec![0.0; d]);
            params.register(&p("attn.wv"), d, d, init(&mut rng, d * d));
            params.register(&p("attn.bv"), 1, d, vec![0.0; d]);
            params.register(&p("attn.wo"), d, d, init(&mut rng, d * d));
            params.register(&p("attn.bo"), 1, d, vec![0.0; d]);
            params.register(&p("ln2.g"), 1, d, vec![1.0; d]);
            params.register(&p("ln2.b"), 1, d, vec![0.0; d]);
            params.register(&p("mlp.w1"), d, 4 * d, init(&mut rng, 4 * d * d));
            params.register(&p("mlp.b1"), 1, 4 * d, vec![0.0; 4 * d]);
            params.register(&p("mlp.w2"), 4 * d, d, init(&mut rng, 4 * d * d));
            params.register(&p("mlp.b2"), 1, d, vec![0.0; d]);
        }

        params.register("final.ln.g", 1, d, vec![1.0; d]);
        params.register("final.ln.b", 1, d, vec![0.0; d]);
        // Coefficient head starts at zero so exploration opens at identity.
        params.register("head.beta.w", d, 1, vec![0.0; d]);
        params.register("head.beta.b", 1, 1, vec![0.0]);
        params.register("head.action.w", d, 1, init(&mut rng, d));
        params.register("head.action.b", 1, 1, vec![0.0]);
        params.register("head.value.w", d, 1, init(&mut rng, d));
        params.register("head.value.b", 1, 1, vec![0.0]);
        params.register("head.rtg.w", d, 1, init(&mut rng, d));
        params.register("head.rtg.b", 1, 1, vec![0.0]);

        Ok(Self {
            config: *config,
            t_max,
            params,
        })
    }

    fn layout(&self) -> ParamLayout {
        let mut idx = 0;
        let mut next = || {
            let i = idx;
            idx += 1;
            i
        };
        ParamLayout {
            embed_rtg_w: next(),
            embed_rtg_b: next(),
            embed_state_w: next(),
            embed_state_b: next(),
            embed_action_w: next(),
            embed_action_b: next(),
            embed_time: next(),
            blocks: (0..self.config.layers)
                .map(|_| BlockLayout {
                    ln1_g: next(),
                    ln1_b: next(),
                    wq: next(),
                    bq: next(),
                    wk: next(),
                    bk: next(),
                    wv: next(),
                    bv: next(),
                    wo: next(),
                    bo: next(),
                    ln2_g: next(),
                    ln2_b: next(),
                    mlp_w1: next(),
                    mlp_b1: next(),
                    mlp_w2: next(),
                    mlp_b2: next(),
                })
                .collect(),
            final_ln_g: next(),
            final_ln_b: next(),
            head_beta_w: next(),
            head_beta_b: next(),
            head_action_w: next(),
            head_action_b: next(),
            head_value_w: next(),
            head_value_b: next(),
            head_rtg_w: next(),
            head_rtg_b: next(),
        }
    }

    fn leaves(&self, graph: &mut Graph) -> Vec<NodeId> {
        self.params
            .tensors
            .iter()
            .map(|t| graph.leaf(t.data.clone(), t.rows, t.cols))
            .collect()
    }

    /// Sequence trunk: token embedding interleave, causal blocks, final norm.
    ///
    /// `steps` is the number of time steps present; when `last_action` is
    /// false the final step contributes only its RTG and state tokens.
    /// `action_node` overrides the action column (the exploration pass).
    #[allow(clippy::too_many_arguments)]
    fn trunk(
        &self,
        graph: &mut Graph,
        leaves: &[NodeId],
        layout: &ParamLayout,
        rtgs: NodeId,
        states: NodeId,
        actions: Option<NodeId>,
        timesteps: &[usize],
        padded: &[bool],
    ) -> Result<NodeId, ModelError> {
        let steps = timesteps.len();
        let action_steps = actions.map(|a| graph.shape(a).0).unwrap_or(0);
        let d = self.config.width;

        let time_all = graph.gather_rows(leaves[layout.embed_time], timesteps)?;

        let rtg_proj = graph.matmul(rtgs, leaves[layout.embed_rtg_w])?;
        let rtg_proj = graph.add_row(rtg_proj, leaves[layout.embed_rtg_b])?;
        let rtg_tokens = graph.add(rtg_proj, time_all)?;

        let state_proj = graph.matmul(states, leaves[layout.embed_state_w])?;
        let state_proj = graph.add_row(state_proj, leaves[layout.embed_state_b])?;
        let state_tokens = graph.add(state_proj, time_all)?;

        // Interleave (r, s, a) per step; the action token is absent on the
        // final step during inference.
        let (stacked, token_count) = if let Some(action_node) = actions {
            let time_actions =
                graph.gather_rows(leaves[layout.embed_time], &timesteps[..action_steps])?;
            let action_proj = graph.matmul(action_node, leaves[layout.embed_action_w])?;
            let action_proj = graph.add_row(action_proj, leaves[layout.embed_action_b])?;
            let action_tokens = graph.add(action_proj, time_actions)?;
            let stacked = graph.concat_rows(&[rtg_tokens, state_tokens, action_tokens])?;
            (stacked, 2 * steps + action_steps)
        } else {
            let stacked = graph.concat_rows(&[rtg_tokens, state_tokens])?;
            (stacked, 2 * steps)
        };
        let mut perm = Vec::with_capacity(token_count);
        for k in 0..steps {
            perm.push(k);
            perm.push(steps + k);
            if k < action_steps {
                perm.push(2 * steps + k);
            }
        }
        let mut tokens = graph.gather_rows(stacked, &perm)?;

        // Causal mask that also hides padded steps' tokens from real ones.
        let token_padded: Vec<bool> = perm
            .iter()
            .map(|&flat| {
                let step = if flat < steps {
                    flat
                } else if flat < 2 * steps {
                    flat - steps
                } else {
                    flat - 2 * steps
                };
                padded[step]
            })
            .collect();
        let l = token_count;
        let mut attend = vec![false; l * l];
        for q in 0..l {
            for k in 0..=q {
                attend[q * l + k] = !token_padded[k] || k == q;
            }
        }

        let head_dim = d / self.config.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        for block in &layout.blocks {
            let normed = graph.layer_norm(tokens, leaves[block.ln1_g], leaves[block.ln1_b])?;
            let q = graph.matmul(normed, leaves[block.wq])?;
            let q = graph.add_row(q, leaves[block.bq])?;
            let k = graph.matmul(normed, leaves[block.wk])?;
            let k = graph.add_row(k, leaves[block.bk])?;
            let v = graph.matmul(normed, leaves[block.wv])?;
            let v = graph.add_row(v, leaves[block.bv])?;

            let mut contexts = Vec::with_capacity(self.config.heads);
            for h in 0..self.config.heads {
                let qh = graph.slice_cols(q, h * head_dim, head_dim)?;
                let kh = graph.slice_cols(k, h * head_dim, head_dim)?;
                let vh = graph.slice_cols(v, h * head_dim, head_dim)?;
                let kt = graph.transpose(kh);
                let scores = graph.matmul(qh, kt)?;
                let scores = graph.scale(scores, scale);
                let attn = graph.masked_softmax(scores, &attend)?;
                contexts.push(graph.matmul(attn, vh)?);
            }
            let merged = graph.concat_cols(&contexts)?;
            let projected = graph.matmul(merged, leaves[block.wo])?;
            let projected = graph.add_row(projected, leaves[block.bo])?;
            tokens = graph.add(tokens, projected)?;

            let normed = graph.layer_norm(tokens, leaves[block.ln2_g], leaves[block.ln2_b])?;
            let hidden = graph.matmul(normed, leaves[block.mlp_w1])?;
            let hidden = graph.add_row(hidden, leaves[block.mlp_b1])?;
            let hidden = graph.gelu(hidden);
            let out = graph.matmul(hidden, leaves[block.mlp_w2])?;
            let out = graph.add_row(out, leaves[block.mlp_b2])?;
            tokens = graph.add(tokens, out)?;
        }
        Ok(graph.layer_norm(tokens, leaves[layout.final_ln_g], leaves[layout.final_ln_b])?)
    }

    fn head(
        &self,
        graph: &mut Graph,
        hidden: NodeId,
        rows: &[usize],
        w: NodeId,
        b: NodeId,
    ) -> Result<NodeId, ModelError> {
        let gathered = graph.gather_rows(hidden, rows)?;
        let out = graph.matmul(gathered, w)?;
        Ok(graph.add_row(out, b)?)
    }

    /// Builds the full training computation for one normalized window.
    ///
    /// `freeze` replaces the frozen quantities (explored-action targets, the
    /// mixing weights, the value and RTG prediction targets) with fixed
    /// values instead of detaching the live ones; the finite-difference
    /// oracle relies on this to perturb parameters while the stop-gradient
    /// constants stay put.
    pub fn forward_window(
        &self,
        window: &TrajectoryWindow,
        variant: LossVariant,
        freeze: Option<&FrozenValues>,
    ) -> Result<WindowForward, ModelError> {
        let steps = window.len();
        if steps > self.config.context + 1 {
            return Err(ModelError::ContextOverflow {
                got: steps,
                max: self.config.context + 1,
            });
        }
        let timesteps: Vec<usize> = window
            .timesteps
            .iter()
            .map(|&t| (t.max(0) as usize).min(self.t_max - 1))
            .collect();
        let padded: Vec<bool> = window.mask.iter().map(|&m| !m).collect();

        let mut graph = Graph::new();
        let leaves = self.leaves(&mut graph);
        let layout = self.layout();

        let rtgs = graph.leaf(window.rtgs.clone(), steps, 1);
        let state_flat: Vec<f64> = window.states.iter().flat_map(|s| s.iter().copied()).collect();
        let states = graph.leaf(state_flat, steps, STATE_DIM);
        let actions = graph.leaf(window.actions.clone(), steps, 1);

        let hidden = self.trunk(
            &mut graph,
            &leaves,
            &layout,
            rtgs,
            states,
            Some(actions),
            &timesteps,
            &padded,
        )?;

        let state_rows: Vec<usize> = (0..steps).map(|k| 3 * k + 1).collect();
        let action_rows: Vec<usize> = (0..steps).map(|k| 3 * k + 2).collect();

        // The coefficient and value heads read detached trunk features:
        // their losses adjust the readouts, never the features beneath
        // them. The trunk belongs to the sequence losses.
        let aux_input = match freeze.and_then(|f| f.beta_features.as_ref()) {
            Some(values) => graph.leaf(values.clone(), steps, self.config.width),
            None => {
                let gathered = graph.gather_rows(hidden, &state_rows)?;
                graph.detach(gathered)
            }
        };
        let beta_pre = graph.matmul(aux_input, leaves[layout.head_beta_w])?;
        let beta_pre = graph.add_row(beta_pre, leaves[layout.head_beta_b])?;
        let beta_sig = graph.sigmoid(beta_pre);
        let beta_hat = graph.affine(beta_sig, 1.0, 0.5);
        let a_hat = self.head(
            &mut graph,
            hidden,
            &state_rows,
            leaves[layout.head_action_w],
            leaves[layout.head_action_b],
        )?;
        let v_pre = graph.matmul(aux_input, leaves[layout.head_value_w])?;
        let v_hat = graph.add_row(v_pre, leaves[layout.head_value_b])?;
        let r_hat = self.head(
            &mut graph,
            hidden,
            &action_rows,
            leaves[layout.head_rtg_w],
            leaves[layout.head_rtg_b],
        )?;

        let labels_next_rtg = graph.leaf(window.label_next_rtgs.clone(), steps, 1);
        let mask = window.mask.clone();
        let real = mask.iter().filter(|&&m| m).count();

        // RTG regression on the teacher pass.
        let r_diff = graph.sub(r_hat, labels_next_rtg)?;
        let r_sq = graph.mul(r_diff, r_diff)?;
        let loss_r = graph.masked_mean(r_sq, &mask)?;

        let outputs = ForwardOutputs {
            beta_hat: graph.value(beta_hat).to_vec(),
            a_hat: graph.value(a_hat).to_vec(),
            v_hat: graph.value(v_hat).to_vec(),
            r_hat_next: graph.value(r_hat).to_vec(),
        };

        let weights = self.config.loss_weights;
        let mut frozen = FrozenValues::default();
        let mut losses = WindowLosses {
            real_positions: real,
            ..WindowLosses::default()
        };

        let (loss_a, loss_e, loss_v, loss_w, total_loss);
        match variant {
            LossVariant::BehaviorClone => {
                // Plain behavior cloning over the action head.
                let a_diff = graph.sub(a_hat, actions)?;
                let a_sq = graph.mul(a_diff, a_diff)?;
                loss_a = graph.masked_mean(a_sq, &mask)?;
                loss_e = None;
                loss_v = None;
                loss_w = None;
                let lr_term = graph.scale(loss_r, weights[0]);
                let la_term = graph.scale(loss_a, weights[1]);
                total_loss = graph.add(lr_term, la_term)?;
                losses.beta_sum = masked_sum(graph.value(beta_hat), &mask);
            }
            LossVariant::Full | LossVariant::NoValueGuide => {
                // Exploration pass. The scaled action replaces the label only
                // at the window's final step; everything earlier stays ground
                // truth, so the explored sequence differs from a dataset
                // sequence by one bounded perturbation and the RTG head's
                // response to it reads as a local action sensitivity.
                // Gradient reaches the coefficient head through this path.
                let last = mask.iter().rposition(|&m| m).expect("window has a real step");
                let mut select_last = vec![0.0; steps];
                select_last[last] = 1.0;
                let keep_others: Vec<f64> = select_last.iter().map(|&s| 1.0 - s).collect();
                let mut explore_mask = vec![false; steps];
                explore_mask[last] = true;

                let scaled_all = graph.mul(beta_hat, actions)?;
                let sel = graph.leaf(select_last, steps, 1);
                let inv = graph.leaf(keep_others, steps, 1);
                let scaled_last = graph.mul(scaled_all, sel)?;
                let labels_rest = graph.mul(actions, inv)?;
                let explored = graph.add(scaled_last, labels_rest)?;

                // The evaluation network for the explored sequence runs on
                // detached parameter copies: exploration losses may steer the
                // coefficient head through the explored action, but must not
                // reshape the RTG landscape that judges it.
                let eval_leaves: Vec<NodeId> = match freeze.and_then(|f| f.explore_params.as_ref())
                {
                    Some(values) => values
                        .iter()
                        .zip(&self.params.tensors)
                        .map(|(v, t)| graph.leaf(v.clone(), t.rows, t.cols))
                        .collect(),
                    None => leaves.iter().map(|&l| graph.detach(l)).collect(),
                };
                let hidden_explore = self.trunk(
                    &mut graph,
                    &eval_leaves,
                    &layout,
                    rtgs,
                    states,
                    Some(explored),
                    &timesteps,
                    &padded,
                )?;
                let r_tilde = self.head(
                    &mut graph,
                    hidden_explore,
                    &action_rows,
                    eval_leaves[layout.head_rtg_w],
                    eval_leaves[layout.head_rtg_b],
                )?;

                // Mixing weight, computed entirely outside the graph; only
                // the explored step carries one, earlier steps fall back to
                // the pure label target.
                let w_values: Vec<f64> = match freeze {
                    Some(f) => f.w.clone(),
                    None => {
                        let rt = graph.value(r_tilde);
                        let rh = graph.value(r_hat);
                        (0..steps)
                            .map(|k| {
                                if explore_mask[k] {
                                    sigmoid(self.config.alpha_r * (rt[k] - rh[k]))
                                } else {
                                    0.0
                                }
                            })
                            .collect()
                    }
                };
                let explored_frozen: Vec<f64> = match freeze {
                    Some(f) => f.explored_actions.clone(),
                    None => graph.value(explored).to_vec(),
                };
                frozen.w = w_values.clone();
                frozen.explored_actions = explored_frozen.clone();
                frozen.value_estimates = match freeze {
                    Some(f) => f.value_estimates.clone(),
                    None => graph.value(v_hat).to_vec(),
                };
                frozen.rtg_preds = match freeze {
                    Some(f) => f.rtg_preds.clone(),
                    None => graph.value(r_hat).to_vec(),
                };
                frozen.beta_features = match freeze {
                    Some(f) => f.beta_features.clone(),
                    None => Some(graph.value(aux_input).to_vec()),
                };

                // Action loss mixes the label and the frozen explored action
                // with the frozen weight.
                let w_leaf = graph.leaf(w_values.clone(), steps, 1);
                let w_complement = graph.affine(w_leaf, -1.0, 1.0);
                let explored_leaf = graph.leaf(explored_frozen, steps, 1);
                let d_label = graph.sub(a_hat, actions)?;
                let d_label_sq = graph.mul(d_label, d_label)?;
                let label_term = graph.mul(w_complement, d_label_sq)?;
                let d_expl = graph.sub(a_hat, explored_leaf)?;
                let d_expl_sq = graph.mul(d_expl, d_expl)?;
                let expl_term = graph.mul(w_leaf, d_expl_sq)?;
                let mixed = graph.add(label_term, expl_term)?;
                loss_a = graph.masked_mean(mixed, &mask)?;

                let lr_term = graph.scale(loss_r, weights[0]);
                let la_term = graph.scale(loss_a, weights[1]);
                let base = graph.add(lr_term, la_term)?;

                if variant == LossVariant::Full {
                    // Upper-expectile value regression on the label RTGs.
                    let le = graph.expectile_loss(v_hat, labels_next_rtg, self.config.tau, &mask)?;
                    // Pull the explored RTG toward the frozen value estimate.
                    let v_frozen = graph.leaf(frozen.value_estimates.clone(), steps, 1);
                    let v_diff = graph.sub(r_tilde, v_frozen)?;
                    let v_sq = graph.mul(v_diff, v_diff)?;
                    let lv = graph.masked_mean(v_sq, &explore_mask)?;
                    let le_term = graph.scale(le, weights[2]);
                    let lv_term = graph.scale(lv, weights[3]);
                    let partial = graph.add(base, le_term)?;
                    total_loss = graph.add(partial, lv_term)?;
                    loss_e = Some(le);
                    loss_v = Some(lv);
                    loss_w = None;
                } else {
                    // Push the explored RTG above the frozen teacher RTG.
                    let r_frozen = graph.leaf(frozen.rtg_preds.clone(), steps, 1);
                    let gap = graph.sub(r_tilde, r_frozen)?;
                    let scaled = graph.scale(gap, self.config.alpha_r);
                    let sig = graph.sigmoid(scaled);
                    let push = graph.affine(sig, -1.0, 1.0);
                    let lw = graph.masked_mean(push, &explore_mask)?;
                    let lw_term = graph.scale(lw, weights[2]);
                    total_loss = graph.add(base, lw_term)?;
                    loss_e = None;
                    loss_v = None;
                    loss_w = Some(lw);
                }
                losses.w_sum = masked_sum(&w_values, &explore_mask);
                losses.explored_positions = 1;
                losses.beta_sum = graph.value(beta_hat)[last];
            }
        }

        losses.l_r = graph.scalar_value(loss_r);
        losses.l_a = graph.scalar_value(loss_a);
        losses.l_e = loss_e.map(|n| graph.scalar_value(n));
        losses.l_v = loss_v.map(|n| graph.scalar_value(n));
        losses.l_w = loss_w.map(|n| graph.scalar_value(n));
        losses.l_o = graph.scalar_value(total_loss);

        Ok(WindowForward {
            graph,
            leaves,
            total_loss,
            loss_r,
            loss_a,
            loss_e,
            loss_v,
            loss_w,
            losses,
            outputs,
            frozen,
        })
    }

    /// Teacher-pass head outputs only (no losses); used by shape and
    /// causality checks.
    pub fn forward_teacher(&self, window: &TrajectoryWindow) -> Result<ForwardOutputs, ModelError> {
        let fwd = self.forward_window(window, LossVariant::BehaviorClone, None)?;
        Ok(fwd.outputs)
    }

    /// Next action for an inference context, in normalized units.
    pub fn predict_action_normalized(&self, ctx: &InferenceContext) -> Result<f64, ModelError> {
        ctx.check()?;
        let steps = ctx.steps();
        if steps > self.config.context + 1 {
            return Err(ModelError::ContextOverflow {
                got: steps,
                max: self.config.context + 1,
            });
        }
        let timesteps: Vec<usize> = ctx.timesteps.iter().map(|&t| t.min(self.t_max - 1)).collect();
        let padded = vec![false; steps];

        let mut graph = Graph::new();
        let leaves = self.leaves(&mut graph);
        let layout = self.layout();

        let rtgs = graph.leaf(ctx.rtgs.clone(), steps, 1);
        let state_flat: Vec<f64> = ctx.states.iter().flat_map(|s| s.iter().copied()).collect();
        let states = graph.leaf(state_flat, steps, STATE_DIM);
        let actions = if ctx.actions.is_empty() {
            None
        } else {
            Some(graph.leaf(ctx.actions.clone(), steps - 1, 1))
        };

        let hidden = self.trunk(
            &mut graph,
            &leaves,
            &layout,
            rtgs,
            states,
            actions,
            &timesteps,
            &padded,
        )?;
        // The current step's state token is the last row.
        let last_state_row = 3 * (steps - 1) + 1;
        let a_hat = self.head(
            &mut graph,
            hidden,
            &[last_state_row],
            leaves[layout.head_action_w],
            leaves[layout.head_action_b],
        )?;
        Ok(graph.scalar_value(a_hat))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn masked_sum(values: &[f64], mask: &[bool]) -> f64 {
    values
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .sum()
}

/// Mixing weight between explored and label actions, from detached RTG
/// estimates. Strictly inside (0, 1); exactly 0.5 when the estimates agree.
pub fn weight_w(r_tilde: &[f64], r_hat: &[f64], alpha_r: f64) -> Vec<f64> {
    r_tilde
        .iter()
        .zip(r_hat)
        .map(|(&rt, &rh)| sigmoid(alpha_r * (rt - rh)))
        .collect()
}

/// A trained model with everything evaluation needs: normalization, the
/// score variant it was conditioned on, and the dataset's total-score
/// quantiles for RTG anchoring.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub model: GaveModel,
    pub score_variant: ScoreVariant,
    pub cpa_limit: f64,
    pub normalization: NormalizationStats,
    pub total_score_quantiles: BTreeMap<String, Vec<(f64, f64)>>,
    pub optimizer: Option<AdamWState>,
}

impl ModelCheckpoint {
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let checkpoint: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if checkpoint.format_version != ARCHIVE_VERSION {
            return Err(ModelError::VersionMismatch {
                got: checkpoint.format_version,
                expected: ARCHIVE_VERSION,
            });
        }
        checkpoint.model.config.validate()?;
        Ok(checkpoint)
    }

    /// Predicts the raw bid coefficient for a raw-valued context: normalizes,
    /// runs the model, denormalizes, clamps at zero.
    pub fn predict_action(&self, raw: &InferenceContext) -> Result<f64, ModelError> {
        let norm = &self.normalization;
        let ctx = InferenceContext {
            rtgs: raw.rtgs.iter().map(|&r| norm.normalize_rtg(r)).collect(),
            states: raw.states.iter().map(|s| norm.normalize_state(s)).collect(),
            actions: raw.actions.iter().map(|&a| norm.normalize_action(a)).collect(),
            timesteps: raw.timesteps.clone(),
        };
        let normalized = self.model.predict_action_normalized(&ctx)?;
        Ok(norm.denormalize_action(normalized).max(0.0))
    }
}
