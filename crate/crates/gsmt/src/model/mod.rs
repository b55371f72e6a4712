//! The trajectory predictor: a stacked graph-attention encoder over the
//! fused window graph feeding a sequence-to-sequence recurrent network.
//!
//! Per input frame, the attention stack refines projected node features
//! against the window's single fused adjacency. The encoder cell (shared
//! across buses) folds the per-frame embeddings into final states that seed
//! an autoregressive decoder, whose linear head emits one (lat, lon) pair
//! per bus per future step, all in normalized units. A GRU cell variant
//! exists for the baseline comparison.

mod gat;
mod rnn;
mod train;

pub use gat::{
    gat_aggregate, gat_forward, gat_scores, gat_update, gat_weights, neighbor_mask,
    BoundGatLayer, BoundGatStack,
};
pub use rnn::{gru_cell, lstm_cell, BoundRnnCell, CellState};
pub use train::{
    train, validation_mae, EpochStats, PreparedWindow, TrainConfig, TrainOutcome, TrainProgress,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphs::AdjacencyMatrix;
use crate::ingest::WindowSample;
use crate::numerics::{NumericsError, Tape, TapeId, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("training failed at epoch {epoch}: {detail}")]
    Training { epoch: usize, detail: String },
    #[error("model: {0}")]
    Contract(String),
}

fn contract(detail: impl Into<String>) -> ModelError {
    ModelError::Contract(detail.into())
}

/// Recurrent cell flavor: LSTM for the main model, GRU for the baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Lstm,
    Gru,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_width: usize,
    pub gat_layers: usize,
    /// Hidden width of the attention-score MLP.
    pub attn_hidden: usize,
    pub l_in: usize,
    pub l_out: usize,
    pub leaky_relu_slope: f64,
    pub teacher_forcing_ratio: f64,
    pub cell: CellKind,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_width: 32,
            gat_layers: 3,
            attn_hidden: 32,
            l_in: 10,
            l_out: 3,
            leaky_relu_slope: 0.2,
            teacher_forcing_ratio: 0.5,
            cell: CellKind::Lstm,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("hidden_width", self.hidden_width),
            ("gat_layers", self.gat_layers),
            ("attn_hidden", self.attn_hidden),
            ("l_in", self.l_in),
            ("l_out", self.l_out),
        ] {
            if v == 0 {
                return Err(format!("model.{name} must be >= 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.teacher_forcing_ratio) {
            return Err(format!(
                "model.teacher_forcing_ratio must be in [0, 1], got {}",
                self.teacher_forcing_ratio
            ));
        }
        if !(self.leaky_relu_slope > 0.0) {
            return Err("model.leaky_relu_slope must be > 0".into());
        }
        Ok(())
    }
}

// ── Parameters ──────────────────────────────────────────────────────────

/// One attention layer: the score MLP over `[u_i | u_j | gamma_ij]` and the
/// residual two-layer update network.
#[derive(Debug, Clone, PartialEq)]
pub struct GatLayerParams {
    pub attn_w: Tensor,
    pub attn_b: Tensor,
    pub attn_out_w: Tensor,
    pub attn_out_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Input projection plus the ordered attention layers.
#[derive(Debug, Clone, PartialEq)]
pub struct GatStackParams {
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub layers: Vec<GatLayerParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmCellParams {
    pub w_xi: Tensor,
    pub w_hi: Tensor,
    pub b_i: Tensor,
    pub w_xf: Tensor,
    pub w_hf: Tensor,
    pub b_f: Tensor,
    pub w_xg: Tensor,
    pub w_hg: Tensor,
    pub b_g: Tensor,
    pub w_xo: Tensor,
    pub w_ho: Tensor,
    pub b_o: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruCellParams {
    pub w_xz: Tensor,
    pub w_hz: Tensor,
    pub b_z: Tensor,
    pub w_xr: Tensor,
    pub w_hr: Tensor,
    pub b_r: Tensor,
    pub w_xn: Tensor,
    pub w_hn: Tensor,
    pub b_n: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RnnCellParams {
    Lstm(LstmCellParams),
    Gru(GruCellParams),
}

/// Every trainable tensor of the predictor, in a fixed visit order that the
/// optimizer, checkpoints, and gradient checks all share.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq2SeqParams {
    pub gat: GatStackParams,
    pub encoder: RnnCellParams,
    pub decoder: RnnCellParams,
    pub w_y: Tensor,
    pub b_y: Tensor,
}

pub const INPUT_FEATURES: usize = 3;
pub const OUTPUT_FEATURES: usize = 2;

impl GatLayerParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.attn_w"), &self.attn_w);
        f(format!("{prefix}.attn_b"), &self.attn_b);
        f(format!("{prefix}.attn_out_w"), &self.attn_out_w);
        f(format!("{prefix}.attn_out_b"), &self.attn_out_b);
        f(format!("{prefix}.w1"), &self.w1);
        f(format!("{prefix}.b1"), &self.b1);
        f(format!("{prefix}.w2"), &self.w2);
        f(format!("{prefix}.b2"), &self.b2);
    }
}

impl RnnCellParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        match self {
            RnnCellParams::Lstm(p) => {
                let named: [(&str, &Tensor); 12] = [
                    ("w_xi", &p.w_xi),
                    ("w_hi", &p.w_hi),
                    ("b_i", &p.b_i),
                    ("w_xf", &p.w_xf),
                    ("w_hf", &p.w_hf),
                    ("b_f", &p.b_f),
                    ("w_xg", &p.w_xg),
                    ("w_hg", &p.w_hg),
                    ("b_g", &p.b_g),
                    ("w_xo", &p.w_xo),
                    ("w_ho", &p.w_ho),
                    ("b_o", &p.b_o),
                ];
                for (name, t) in named {
                    f(format!("{prefix}.{name}"), t);
                }
            }
            RnnCellParams::Gru(p) => {
                let named: [(&str, &Tensor); 9] = [
                    ("w_xz", &p.w_xz),
                    ("w_hz", &p.w_hz),
                    ("b_z", &p.b_z),
                    ("w_xr", &p.w_xr),
                    ("w_hr", &p.w_hr),
                    ("b_r", &p.b_r),
                    ("w_xn", &p.w_xn),
                    ("w_hn", &p.w_hn),
                    ("b_n", &p.b_n),
                ];
                for (name, t) in named {
                    f(format!("{prefix}.{name}"), t);
                }
            }
        }
    }
}

impl Seq2SeqParams {
    /// Visits every parameter as (name, tensor) in the canonical order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        f("gat.proj_w".into(), &self.gat.proj_w);
        f("gat.proj_b".into(), &self.gat.proj_b);
        for (i, layer) in self.gat.layers.iter().enumerate() {
            layer.visit(&format!("gat.layer{i}"), f);
        }
        self.encoder.visit("encoder", f);
        self.decoder.visit("decoder", f);
        f("head.w_y".into(), &self.w_y);
        f("head.b_y".into(), &self.b_y);
    }

    pub fn flatten(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t)));
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        self.visit(&mut |_, t| out.push(t));
        out
    }

    /// Mutable borrows of every parameter, in visit order, for the
    /// optimizer.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.push(&mut self.gat.proj_w);
        out.push(&mut self.gat.proj_b);
        for layer in &mut self.gat.layers {
            out.extend([
                &mut layer.attn_w,
                &mut layer.attn_b,
                &mut layer.attn_out_w,
                &mut layer.attn_out_b,
                &mut layer.w1,
                &mut layer.b1,
                &mut layer.w2,
                &mut layer.b2,
            ]);
        }
        for cell in [&mut self.encoder, &mut self.decoder] {
            match cell {
                RnnCellParams::Lstm(p) => out.extend([
                    &mut p.w_xi,
                    &mut p.w_hi,
                    &mut p.b_i,
                    &mut p.w_xf,
                    &mut p.w_hf,
                    &mut p.b_f,
                    &mut p.w_xg,
                    &mut p.w_hg,
                    &mut p.b_g,
                    &mut p.w_xo,
                    &mut p.w_ho,
                    &mut p.b_o,
                ]),
                RnnCellParams::Gru(p) => out.extend([
                    &mut p.w_xz,
                    &mut p.w_hz,
                    &mut p.b_z,
                    &mut p.w_xr,
                    &mut p.w_hr,
                    &mut p.b_r,
                    &mut p.w_xn,
                    &mut p.w_hn,
                    &mut p.b_n,
                ]),
            }
        }
        out.push(&mut self.w_y);
        out.push(&mut self.b_y);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }
}

// ── Initialization ──────────────────────────────────────────────────────

fn glorot(rng: &mut ChaCha20Rng, fan_in: usize, fan_out: usize, shape: Vec<usize>) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(shape, data).expect("glorot init shape")
}

fn init_lstm(rng: &mut ChaCha20Rng, input: usize, hidden: usize) -> LstmCellParams {
    let w = |rng: &mut ChaCha20Rng, rows: usize| glorot(rng, rows, hidden, vec![rows, hidden]);
    LstmCellParams {
        w_xi: w(rng, input),
        w_hi: w(rng, hidden),
        b_i: Tensor::zeros(vec![hidden]),
        w_xf: w(rng, input),
        w_hf: w(rng, hidden),
        // Forget gate starts open so early training keeps long-range state.
        b_f: Tensor::filled(vec![hidden], 1.0).expect("finite fill"),
        w_xg: w(rng, input),
        w_hg: w(rng, hidden),
        b_g: Tensor::zeros(vec![hidden]),
        w_xo: w(rng, input),
        w_ho: w(rng, hidden),
        b_o: Tensor::zeros(vec![hidden]),
    }
}

fn init_gru(rng: &mut ChaCha20Rng, input: usize, hidden: usize) -> GruCellParams {
    let w = |rng: &mut ChaCha20Rng, rows: usize| glorot(rng, rows, hidden, vec![rows, hidden]);
    GruCellParams {
        w_xz: w(rng, input),
        w_hz: w(rng, hidden),
        b_z: Tensor::zeros(vec![hidden]),
        w_xr: w(rng, input),
        w_hr: w(rng, hidden),
        b_r: Tensor::zeros(vec![hidden]),
        w_xn: w(rng, input),
        w_hn: w(rng, hidden),
        b_n: Tensor::zeros(vec![hidden]),
    }
}

impl Seq2SeqParams {
    /// Seeded Glorot-uniform initialization; biases zero except the LSTM
    /// forget gate (1).
    pub fn init(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate().map_err(contract)?;
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let d = config.hidden_width;
        let h = config.attn_hidden;

        let proj_w = glorot(&mut rng, INPUT_FEATURES, d, vec![INPUT_FEATURES, d]);
        let proj_b = Tensor::zeros(vec![d]);
        let layers = (0..config.gat_layers)
            .map(|_| {
                let pair_width = 2 * d + 1;
                GatLayerParams {
                    attn_w: glorot(&mut rng, pair_width, h, vec![pair_width, h]),
                    attn_b: Tensor::zeros(vec![h]),
                    attn_out_w: glorot(&mut rng, h, 1, vec![h, 1]),
                    attn_out_b: Tensor::zeros(vec![1]),
                    w1: glorot(&mut rng, d, d, vec![d, d]),
                    b1: Tensor::zeros(vec![d]),
                    w2: glorot(&mut rng, d, d, vec![d, d]),
                    b2: Tensor::zeros(vec![d]),
                }
            })
            .collect();

        let (encoder, decoder) = match config.cell {
            CellKind::Lstm => (
                RnnCellParams::Lstm(init_lstm(&mut rng, d, d)),
                RnnCellParams::Lstm(init_lstm(&mut rng, INPUT_FEATURES, d)),
            ),
            CellKind::Gru => (
                RnnCellParams::Gru(init_gru(&mut rng, d, d)),
                RnnCellParams::Gru(init_gru(&mut rng, INPUT_FEATURES, d)),
            ),
        };

        Ok(Seq2SeqParams {
            gat: GatStackParams {
                proj_w,
                proj_b,
                layers,
            },
            encoder,
            decoder,
            w_y: glorot(&mut rng, d, OUTPUT_FEATURES, vec![d, OUTPUT_FEATURES]),
            b_y: Tensor::zeros(vec![OUTPUT_FEATURES]),
        })
    }
}

// ── Tape binding ────────────────────────────────────────────────────────

/// Tape handles for one forward pass's view of the parameters.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub gat: BoundGatStack,
    pub encoder: BoundRnnCell,
    pub decoder: BoundRnnCell,
    pub w_y: TapeId,
    pub b_y: TapeId,
}

impl Seq2SeqParams {
    /// Mounts every parameter on the tape (with gradients when `trainable`)
    /// and returns the structured handles plus the flat id list in visit
    /// order — the latter feeds the optimizer.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> (BoundParams, Vec<TapeId>) {
        let mut ids = Vec::new();
        self.visit(&mut |_, t| {
            let id = if trainable {
                let mut p = t.clone();
                p.set_requires_grad(true);
                tape.leaf(&p)
            } else {
                tape.constant(t)
            };
            ids.push(id);
        });
        let bound = Self::bind_ids(&self.shape_template(), &ids);
        (bound, ids)
    }

    /// Reconstructs structured handles from a flat id list in visit order,
    /// for callers (like the gradient checker) that mount leaves themselves.
    pub fn bound_from_ids(&self, ids: &[TapeId]) -> BoundParams {
        Self::bind_ids(&self.shape_template(), ids)
    }

    fn shape_template(&self) -> (usize, bool) {
        let lstm = matches!(self.encoder, RnnCellParams::Lstm(_));
        (self.gat.layers.len(), lstm)
    }

    fn bind_ids((layers, lstm): &(usize, bool), ids: &[TapeId]) -> BoundParams {
        fn take(ids: &[TapeId], pos: &mut usize) -> TapeId {
            let id = ids[*pos];
            *pos += 1;
            id
        }
        fn cell(ids: &[TapeId], pos: &mut usize, lstm: bool) -> BoundRnnCell {
            if lstm {
                BoundRnnCell::Lstm {
                    w_xi: take(ids, pos),
                    w_hi: take(ids, pos),
                    b_i: take(ids, pos),
                    w_xf: take(ids, pos),
                    w_hf: take(ids, pos),
                    b_f: take(ids, pos),
                    w_xg: take(ids, pos),
                    w_hg: take(ids, pos),
                    b_g: take(ids, pos),
                    w_xo: take(ids, pos),
                    w_ho: take(ids, pos),
                    b_o: take(ids, pos),
                }
            } else {
                BoundRnnCell::Gru {
                    w_xz: take(ids, pos),
                    w_hz: take(ids, pos),
                    b_z: take(ids, pos),
                    w_xr: take(ids, pos),
                    w_hr: take(ids, pos),
                    b_r: take(ids, pos),
                    w_xn: take(ids, pos),
                    w_hn: take(ids, pos),
                    b_n: take(ids, pos),
                }
            }
        }

        let mut pos = 0;
        let gat = BoundGatStack {
            proj_w: take(ids, &mut pos),
            proj_b: take(ids, &mut pos),
            layers: (0..*layers)
                .map(|_| BoundGatLayer {
                    attn_w: take(ids, &mut pos),
                    attn_b: take(ids, &mut pos),
                    attn_out_w: take(ids, &mut pos),
                    attn_out_b: take(ids, &mut pos),
                    w1: take(ids, &mut pos),
                    b1: take(ids, &mut pos),
                    w2: take(ids, &mut pos),
                    b2: take(ids, &mut pos),
                })
                .collect(),
        };
        let encoder = cell(ids, &mut pos, *lstm);
        let decoder = cell(ids, &mut pos, *lstm);
        BoundParams {
            gat,
            encoder,
            decoder,
            w_y: take(ids, &mut pos),
            b_y: take(ids, &mut pos),
        }
    }
}

// ── Forward pass ────────────────────────────────────────────────────────

/// How the decoder picks its next input.
pub enum DecodeMode<'a> {
    /// Feed back the previous prediction. Pure function of the inputs.
    Inference,
    /// Per step, use the ground-truth frame with probability `ratio`.
    TeacherForcing {
        targets: &'a [Tensor],
        ratio: f64,
        rng: &'a mut ChaCha20Rng,
    },
}

/// Extracts frame `t` of the window input as an N x 3 tensor.
pub fn input_frame(sample: &WindowSample, t: usize) -> Tensor {
    let n = sample.n_buses;
    let mut data = Vec::with_capacity(n * INPUT_FEATURES);
    for b in 0..n {
        for f in 0..INPUT_FEATURES {
            data.push(sample.input_at(t, b, f));
        }
    }
    Tensor::new(vec![n, INPUT_FEATURES], data).expect("window frame")
}

/// Extracts target frame `t` as an N x 2 tensor.
pub fn target_frame(sample: &WindowSample, t: usize) -> Tensor {
    let n = sample.n_buses;
    let mut data = Vec::with_capacity(n * OUTPUT_FEATURES);
    for b in 0..n {
        for f in 0..OUTPUT_FEATURES {
            data.push(sample.target_at(t, b, f));
        }
    }
    Tensor::new(vec![n, OUTPUT_FEATURES], data).expect("window target")
}

/// Runs the whole model on one window against an already-bound parameter
/// set, returning the per-step prediction ids (each N x 2, normalized).
pub fn forward_bound(
    tape: &mut Tape,
    bound: &BoundParams,
    config: &ModelConfig,
    sample: &WindowSample,
    gamma: &AdjacencyMatrix,
    mode: &mut DecodeMode<'_>,
) -> Result<Vec<TapeId>, ModelError> {
    if sample.l_in != config.l_in || sample.l_out != config.l_out {
        return Err(contract(format!(
            "window is {}x{}, model expects {}x{}",
            sample.l_in, sample.l_out, config.l_in, config.l_out
        )));
    }
    if gamma.n != sample.n_buses {
        return Err(contract(format!(
            "fused graph has {} nodes, window has {} buses",
            gamma.n, sample.n_buses
        )));
    }

    let gamma_tensor = Tensor::new(vec![gamma.n, gamma.n], gamma.weights.clone())
        .map_err(ModelError::Numerics)?;
    let gamma_id = tape.constant(&gamma_tensor);

    // One fused graph reused across every input frame of the window.
    let mut embeddings = Vec::with_capacity(config.l_in);
    for t in 0..config.l_in {
        let x = input_frame(sample, t);
        let x_id = tape.constant(&x);
        embeddings.push(gat_forward(tape, x_id, gamma_id, &bound.gat, config)?);
    }

    let n = sample.n_buses;
    let d = config.hidden_width;
    let zero_state = Tensor::zeros(vec![n, d]);
    let mut state = match bound.encoder {
        BoundRnnCell::Lstm { .. } => CellState::Lstm {
            h: tape.constant(&zero_state),
            c: tape.constant(&zero_state),
        },
        BoundRnnCell::Gru { .. } => CellState::Gru {
            h: tape.constant(&zero_state),
        },
    };
    for &emb in &embeddings {
        state = rnn::step(tape, &bound.encoder, emb, state)?;
    }

    // Decoder: first input is the last observed frame (lat, lon, speed);
    // afterwards the speed column holds its last observed value while the
    // coordinates come from the previous output (or the ground truth under
    // teacher forcing).
    let last_frame = input_frame(sample, config.l_in - 1);
    let mut speed_col = Vec::with_capacity(n);
    for b in 0..n {
        speed_col.push(last_frame.at(b, 2));
    }
    let speed_id = tape.constant(&Tensor::new(vec![n, 1], speed_col).map_err(ModelError::Numerics)?);
    let mut input_id = tape.constant(&last_frame);

    let mut outputs = Vec::with_capacity(config.l_out);
    for step in 0..config.l_out {
        state = rnn::step(tape, &bound.decoder, input_id, state)?;
        let h = state.hidden();
        let y = tape.matmul(h, bound.w_y)?;
        let y = tape.add(y, bound.b_y)?;
        outputs.push(y);

        if step + 1 < config.l_out {
            let coords = match mode {
                DecodeMode::Inference => y,
                DecodeMode::TeacherForcing {
                    targets,
                    ratio,
                    rng,
                } => {
                    if rng.gen::<f64>() < *ratio {
                        tape.constant(&targets[step])
                    } else {
                        y
                    }
                }
            };
            input_id = tape.concat(&[coords, speed_id], 1)?;
        }
    }
    Ok(outputs)
}

/// Mean absolute error between predictions and targets over every step,
/// bus, and coordinate of the window — the training loss.
pub fn mae_loss(
    tape: &mut Tape,
    predictions: &[TapeId],
    sample: &WindowSample,
) -> Result<TapeId, ModelError> {
    let per_step_elems = (sample.n_buses * OUTPUT_FEATURES) as f64;
    let mut total: Option<TapeId> = None;
    for (t, &pred) in predictions.iter().enumerate() {
        let target = tape.constant(&target_frame(sample, t));
        let diff = tape.sub(pred, target)?;
        let diff = tape.abs(diff)?;
        let step_sum = tape.sum(diff)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, step_sum)?,
            None => step_sum,
        });
    }
    let total = total.ok_or_else(|| contract("no prediction steps"))?;
    let scaled = tape.scale(total, 1.0 / (predictions.len() as f64 * per_step_elems))?;
    Ok(scaled)
}

// ── The model artifact ──────────────────────────────────────────────────

/// Config plus parameters: everything needed to run or resume the predictor.
#[derive(Debug, Clone)]
pub struct Seq2SeqModel {
    pub config: ModelConfig,
    pub params: Seq2SeqParams,
}

impl Seq2SeqModel {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        let params = Seq2SeqParams::init(&config)?;
        Ok(Seq2SeqModel { config, params })
    }

    /// Inference on one window: normalized (lat, lon) per bus per future
    /// step. Pure function of (params, sample, graph).
    pub fn predict_window(
        &self,
        sample: &WindowSample,
        gamma: &AdjacencyMatrix,
    ) -> Result<Vec<Tensor>, ModelError> {
        let mut tape = Tape::new();
        let (bound, _) = self.params.bind(&mut tape, false);
        let outputs = forward_bound(
            &mut tape,
            &bound,
            &self.config,
            sample,
            gamma,
            &mut DecodeMode::Inference,
        )?;
        Ok(outputs.into_iter().map(|id| tape.value(id).clone()).collect())
    }

    /// Builds the full forward + MAE loss from externally mounted parameter
    /// ids (gradient-check entry point; inference decoding, so the graph is
    /// a pure function of the ids).
    pub fn loss_from_ids(
        &self,
        tape: &mut Tape,
        ids: &[TapeId],
        sample: &WindowSample,
        gamma: &AdjacencyMatrix,
    ) -> Result<TapeId, ModelError> {
        let bound = self.params.bound_from_ids(ids);
        let outputs = forward_bound(
            tape,
            &bound,
            &self.config,
            sample,
            gamma,
            &mut DecodeMode::Inference,
        )?;
        mae_loss(tape, &outputs, sample)
    }
}


#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;
    use crate::numerics::gradient_check;

    #[test]
    fn forward_output_shape_contract() {
        let config = toy_config(6, 4, 3, CellKind::Lstm);
        let model = Seq2SeqModel::new(config).unwrap();
        let sample = toy_sample(5, 4, 3, 0.4);
        let gamma = toy_gamma(5, 0.9);
        let preds = model.predict_window(&sample, &gamma).unwrap();
        assert_eq!(preds.len(), 3);
        for p in &preds {
            assert_eq!(p.shape(), &[5, 2]);
        }
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let config = toy_config(8, 3, 2, CellKind::Lstm);
        let model = Seq2SeqModel::new(config).unwrap();
        let sample = toy_sample(3, 3, 2, 0.7);
        let gamma = toy_gamma(3, 0.2);
        let a = model.predict_window(&sample, &gamma).unwrap();
        let b = model.predict_window(&sample, &gamma).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn same_seed_same_init() {
        let config = toy_config(8, 3, 2, CellKind::Lstm);
        let a = Seq2SeqModel::new(config).unwrap();
        let b = Seq2SeqModel::new(config).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn zero_head_gives_zero_outputs() {
        let config = toy_config(6, 3, 2, CellKind::Lstm);
        let mut model = Seq2SeqModel::new(config).unwrap();
        model.params.w_y = Tensor::zeros(vec![6, OUTPUT_FEATURES]);
        model.params.b_y = Tensor::zeros(vec![OUTPUT_FEATURES]);
        let sample = toy_sample(4, 3, 2, 0.3);
        let gamma = toy_gamma(4, 0.5);
        let preds = model.predict_window(&sample, &gamma).unwrap();
        for p in &preds {
            assert!(p.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zeroed_gat_layers_reduce_to_projection_residual_chain() {
        // With every update and attention MLP zeroed, each layer is the
        // identity on its input, so the stack equals the projection alone.
        let config = toy_config(5, 2, 1, CellKind::Lstm);
        let mut model = Seq2SeqModel::new(config).unwrap();
        for layer in &mut model.params.gat.layers {
            layer.w1 = Tensor::zeros(vec![5, 5]);
            layer.b1 = Tensor::zeros(vec![5]);
            layer.w2 = Tensor::zeros(vec![5, 5]);
            layer.b2 = Tensor::zeros(vec![5]);
        }
        let sample = toy_sample(3, 2, 1, 0.8);
        let gamma = toy_gamma(3, 0.4);

        let mut tape = Tape::new();
        let (bound, _) = model.params.bind(&mut tape, false);
        let x = input_frame(&sample, 0);
        let x_id = tape.constant(&x);
        let g_t = Tensor::new(vec![3, 3], gamma.weights.clone()).unwrap();
        let g_id = tape.constant(&g_t);
        let out = gat_forward(&mut tape, x_id, g_id, &bound.gat, &model.config).unwrap();

        let proj = tape.matmul(x_id, bound.gat.proj_w).unwrap();
        let proj = tape.add(proj, bound.gat.proj_b).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(proj).data());
    }

    #[test]
    fn single_layer_stack_equals_manual_composition() {
        let mut config = toy_config(4, 2, 1, CellKind::Lstm);
        config.gat_layers = 1;
        let model = Seq2SeqModel::new(config).unwrap();
        let sample = toy_sample(3, 2, 1, 0.6);
        let gamma = toy_gamma(3, 0.1);

        let mut tape = Tape::new();
        let (bound, _) = model.params.bind(&mut tape, false);
        let x = input_frame(&sample, 0);
        let x_id = tape.constant(&x);
        let g_t = Tensor::new(vec![3, 3], gamma.weights.clone()).unwrap();
        let g_id = tape.constant(&g_t);
        let whole = gat_forward(&mut tape, x_id, g_id, &bound.gat, &model.config).unwrap();

        // Manual: projection, then one scores->weights->aggregate->update.
        let mask = neighbor_mask(tape.value(g_id).data());
        let u = tape.matmul(x_id, bound.gat.proj_w).unwrap();
        let u = tape.add(u, bound.gat.proj_b).unwrap();
        let layer = &bound.gat.layers[0];
        let e = gat_scores(&mut tape, u, g_id, layer, model.config.leaky_relu_slope).unwrap();
        let alpha = gat_weights(&mut tape, e, &mask).unwrap();
        let v = gat_aggregate(&mut tape, alpha, u).unwrap();
        let manual = gat_update(&mut tape, u, v, layer).unwrap();

        assert_eq!(tape.value(whole).data(), tape.value(manual).data());
    }

    #[test]
    fn three_layer_stack_matches_stepwise_oracle() {
        let config = toy_config(4, 2, 1, CellKind::Lstm);
        let model = Seq2SeqModel::new(config).unwrap();
        let sample = toy_sample(4, 2, 1, 0.45);
        let gamma = toy_gamma(4, 0.75);

        let mut tape = Tape::new();
        let (bound, _) = model.params.bind(&mut tape, false);
        let x = input_frame(&sample, 0);
        let x_id = tape.constant(&x);
        let g_t = Tensor::new(vec![4, 4], gamma.weights.clone()).unwrap();
        let g_id = tape.constant(&g_t);
        let whole = gat_forward(&mut tape, x_id, g_id, &bound.gat, &model.config).unwrap();

        let mask = neighbor_mask(tape.value(g_id).data());
        let mut u = tape.matmul(x_id, bound.gat.proj_w).unwrap();
        u = tape.add(u, bound.gat.proj_b).unwrap();
        for layer in &bound.gat.layers {
            let e = gat_scores(&mut tape, u, g_id, layer, model.config.leaky_relu_slope).unwrap();
            let alpha = gat_weights(&mut tape, e, &mask).unwrap();
            let v = gat_aggregate(&mut tape, alpha, u).unwrap();
            u = gat_update(&mut tape, u, v, layer).unwrap();
        }
        assert_eq!(tape.value(whole).data(), tape.value(u).data());
    }

    #[test]
    fn node_permutation_equivariance_is_bit_exact() {
        let config = toy_config(6, 3, 2, CellKind::Lstm);
        let model = Seq2SeqModel::new(config).unwrap();
        let n = 5;
        let sample = toy_sample(n, 3, 2, 0.15);
        let gamma = toy_gamma(n, 0.65);
        let perm: Vec<usize> = vec![3, 0, 4, 1, 2];

        // Permute buses in the window and rows/columns of the graph.
        let mut p_input = vec![0.0; sample.input.len()];
        for t in 0..sample.l_in {
            for b in 0..n {
                for f in 0..3 {
                    p_input[(t * n + b) * 3 + f] = sample.input_at(t, perm[b], f);
                }
            }
        }
        let mut p_target = vec![0.0; sample.target.len()];
        for t in 0..sample.l_out {
            for b in 0..n {
                for f in 0..2 {
                    p_target[(t * n + b) * 2 + f] = sample.target_at(t, perm[b], f);
                }
            }
        }
        let p_sample = WindowSample {
            input: p_input,
            target: p_target,
            ..sample.clone()
        };
        let mut p_weights = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                p_weights[i * n + j] = gamma.weights[perm[i] * n + perm[j]];
            }
        }
        let p_gamma = crate::graphs::AdjacencyMatrix {
            n,
            weights: p_weights,
        };

        let base = model.predict_window(&sample, &gamma).unwrap();
        let permuted = model.predict_window(&p_sample, &p_gamma).unwrap();
        for t in 0..2 {
            for b in 0..n {
                for f in 0..2 {
                    let expect = base[t].at(perm[b], f);
                    let got = permuted[t].at(b, f);
                    assert_eq!(got.to_bits(), expect.to_bits(), "t={t} b={b} f={f}");
                }
            }
        }
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        // Small end-to-end instance; the acceptance suite runs the larger
        // hidden-8 configuration.
        let config = toy_config(4, 3, 2, CellKind::Lstm);
        let model = Seq2SeqModel::new(config).unwrap();
        let sample = toy_sample(2, 3, 2, 0.35);
        let gamma = toy_gamma(2, 0.85);

        let points: Vec<Tensor> = model.params.tensors().into_iter().cloned().collect();
        let err: f64 = gradient_check::<ModelError, _>(
            |tape, ids| model.loss_from_ids(tape, ids, &sample, &gamma),
            &points,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn gru_variant_runs_and_differs_from_lstm() {
        let sample = toy_sample(3, 3, 2, 0.25);
        let gamma = toy_gamma(3, 0.55);
        let lstm = Seq2SeqModel::new(toy_config(6, 3, 2, CellKind::Lstm)).unwrap();
        let gru = Seq2SeqModel::new(toy_config(6, 3, 2, CellKind::Gru)).unwrap();
        let a = lstm.predict_window(&sample, &gamma).unwrap();
        let b = gru.predict_window(&sample, &gamma).unwrap();
        assert_eq!(b[0].shape(), &[3, 2]);
        assert_ne!(a[0].data(), b[0].data());
    }

    #[test]
    fn window_shape_mismatch_rejected() {
        let config = toy_config(4, 3, 2, CellKind::Lstm);
        let model = Seq2SeqModel::new(config).unwrap();
        let sample = toy_sample(3, 4, 2, 0.25); // l_in 4 != 3
        let gamma = toy_gamma(3, 0.5);
        assert!(matches!(
            model.predict_window(&sample, &gamma),
            Err(ModelError::Contract(_))
        ));
    }
}
