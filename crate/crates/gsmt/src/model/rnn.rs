//! Recurrent cells, applied per node with shared weights (the batch axis is
//! the fleet).

use super::ModelError;
use crate::numerics::{Tape, TapeId};

#[derive(Debug, Clone, Copy)]
pub enum BoundRnnCell {
    Lstm {
        w_xi: TapeId,
        w_hi: TapeId,
        b_i: TapeId,
        w_xf: TapeId,
        w_hf: TapeId,
        b_f: TapeId,
        w_xg: TapeId,
        w_hg: TapeId,
        b_g: TapeId,
        w_xo: TapeId,
        w_ho: TapeId,
        b_o: TapeId,
    },
    Gru {
        w_xz: TapeId,
        w_hz: TapeId,
        b_z: TapeId,
        w_xr: TapeId,
        w_hr: TapeId,
        b_r: TapeId,
        w_xn: TapeId,
        w_hn: TapeId,
        b_n: TapeId,
    },
}

/// Recurrent state: hidden (and, for LSTM, cell) activations, N x hidden.
#[derive(Debug, Clone, Copy)]
pub enum CellState {
    Lstm { h: TapeId, c: TapeId },
    Gru { h: TapeId },
}

impl CellState {
    pub fn hidden(&self) -> TapeId {
        match self {
            CellState::Lstm { h, .. } | CellState::Gru { h } => *h,
        }
    }
}

fn gate(
    tape: &mut Tape,
    x: TapeId,
    h: TapeId,
    w_x: TapeId,
    w_h: TapeId,
    b: TapeId,
) -> Result<TapeId, ModelError> {
    let xa = tape.matmul(x, w_x)?;
    let ha = tape.matmul(h, w_h)?;
    let s = tape.add(xa, ha)?;
    Ok(tape.add(s, b)?)
}

/// Standard LSTM step: sigmoid input/forget/output gates, tanh candidate,
/// elementwise cell update.
#[allow(clippy::too_many_arguments)]
pub fn lstm_cell(
    tape: &mut Tape,
    x: TapeId,
    h: TapeId,
    c: TapeId,
    cell: &BoundRnnCell,
) -> Result<(TapeId, TapeId), ModelError> {
    let BoundRnnCell::Lstm {
        w_xi,
        w_hi,
        b_i,
        w_xf,
        w_hf,
        b_f,
        w_xg,
        w_hg,
        b_g,
        w_xo,
        w_ho,
        b_o,
    } = *cell
    else {
        return Err(ModelError::Contract("lstm_cell called with GRU parameters".into()));
    };
    let i_pre = gate(tape, x, h, w_xi, w_hi, b_i)?;
    let i = tape.sigmoid(i_pre)?;
    let f_pre = gate(tape, x, h, w_xf, w_hf, b_f)?;
    let f = tape.sigmoid(f_pre)?;
    let g_pre = gate(tape, x, h, w_xg, w_hg, b_g)?;
    let g = tape.tanh(g_pre)?;
    let o_pre = gate(tape, x, h, w_xo, w_ho, b_o)?;
    let o = tape.sigmoid(o_pre)?;

    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_next = tape.add(keep, write)?;
    let c_act = tape.tanh(c_next)?;
    let h_next = tape.mul(o, c_act)?;
    Ok((h_next, c_next))
}

/// GRU step where the update gate gates the *new* content:
/// `h' = (1 - z) ⊙ h + z ⊙ n`, so forcing z to 0 leaves the state as-is.
pub fn gru_cell(
    tape: &mut Tape,
    x: TapeId,
    h: TapeId,
    cell: &BoundRnnCell,
) -> Result<TapeId, ModelError> {
    let BoundRnnCell::Gru {
        w_xz,
        w_hz,
        b_z,
        w_xr,
        w_hr,
        b_r,
        w_xn,
        w_hn,
        b_n,
    } = *cell
    else {
        return Err(ModelError::Contract("gru_cell called with LSTM parameters".into()));
    };
    let z_pre = gate(tape, x, h, w_xz, w_hz, b_z)?;
    let z = tape.sigmoid(z_pre)?;
    let r_pre = gate(tape, x, h, w_xr, w_hr, b_r)?;
    let r = tape.sigmoid(r_pre)?;

    let gated_h = tape.mul(r, h)?;
    let n_x = tape.matmul(x, w_xn)?;
    let n_h = tape.matmul(gated_h, w_hn)?;
    let n_pre = tape.add(n_x, n_h)?;
    let n_pre = tape.add(n_pre, b_n)?;
    let n = tape.tanh(n_pre)?;

    let carried = tape.mul(z, h)?;
    let injected = tape.mul(z, n)?;
    let kept = tape.sub(h, carried)?;
    Ok(tape.add(kept, injected)?)
}

/// One step of whichever cell the parameters describe.
pub fn step(
    tape: &mut Tape,
    cell: &BoundRnnCell,
    x: TapeId,
    state: CellState,
) -> Result<CellState, ModelError> {
    match (cell, state) {
        (BoundRnnCell::Lstm { .. }, CellState::Lstm { h, c }) => {
            let (h, c) = lstm_cell(tape, x, h, c, cell)?;
            Ok(CellState::Lstm { h, c })
        }
        (BoundRnnCell::Gru { .. }, CellState::Gru { h }) => {
            let h = gru_cell(tape, x, h, cell)?;
            Ok(CellState::Gru { h })
        }
        _ => Err(ModelError::Contract("cell kind does not match state kind".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gradient_check, Tensor};

    fn zeros_cell(tape: &mut Tape, input: usize, hidden: usize, lstm: bool) -> BoundRnnCell {
        let wx = Tensor::zeros(vec![input, hidden]);
        let wh = Tensor::zeros(vec![hidden, hidden]);
        let b = Tensor::zeros(vec![hidden]);
        if lstm {
            BoundRnnCell::Lstm {
                w_xi: tape.constant(&wx),
                w_hi: tape.constant(&wh),
                b_i: tape.constant(&b),
                w_xf: tape.constant(&wx),
                w_hf: tape.constant(&wh),
                b_f: tape.constant(&b),
                w_xg: tape.constant(&wx),
                w_hg: tape.constant(&wh),
                b_g: tape.constant(&b),
                w_xo: tape.constant(&wx),
                w_ho: tape.constant(&wh),
                b_o: tape.constant(&b),
            }
        } else {
            BoundRnnCell::Gru {
                w_xz: tape.constant(&wx),
                w_hz: tape.constant(&wh),
                b_z: tape.constant(&b),
                w_xr: tape.constant(&wx),
                w_hr: tape.constant(&wh),
                b_r: tape.constant(&b),
                w_xn: tape.constant(&wx),
                w_hn: tape.constant(&wh),
                b_n: tape.constant(&b),
            }
        }
    }

    #[test]
    fn lstm_zero_weights_and_inputs_give_zero_state() {
        let (n, input, hidden) = (2, 3, 4);
        let mut tape = Tape::new();
        let cell = zeros_cell(&mut tape, input, hidden, true);
        let x = tape.constant(&Tensor::zeros(vec![n, input]));
        let h = tape.constant(&Tensor::zeros(vec![n, hidden]));
        let c = tape.constant(&Tensor::zeros(vec![n, hidden]));
        let (h2, c2) = lstm_cell(&mut tape, x, h, c, &cell).unwrap();
        assert!(tape.value(h2).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(c2).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_update_gate_forced_closed_keeps_state() {
        // Large negative update bias drives z ~ 0, so h' ~ h.
        let (n, input, hidden) = (2, 3, 4);
        let mut tape = Tape::new();
        let wx = Tensor::zeros(vec![input, hidden]);
        let wh = Tensor::zeros(vec![hidden, hidden]);
        let b = Tensor::zeros(vec![hidden]);
        let cell = BoundRnnCell::Gru {
            w_xz: tape.constant(&wx),
            w_hz: tape.constant(&wh),
            b_z: tape.constant(&Tensor::filled(vec![hidden], -40.0).unwrap()),
            w_xr: tape.constant(&wx),
            w_hr: tape.constant(&wh),
            b_r: tape.constant(&b),
            w_xn: tape.constant(&wx),
            w_hn: tape.constant(&wh),
            b_n: tape.constant(&b),
        };
        let x = tape.constant(&Tensor::new(vec![n, input], vec![0.5; 6]).unwrap());
        let h0 = Tensor::new(vec![n, hidden], (0..8).map(|i| i as f64 * 0.1).collect()).unwrap();
        let h_id = tape.constant(&h0);
        let h2 = gru_cell(&mut tape, x, h_id, &cell).unwrap();
        for (a, b) in tape.value(h2).data().iter().zip(h0.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_step_unrolled_lstm_matches_finite_differences() {
        // All 12 gate parameter tensors of a tiny cell, through a 2-step
        // unroll and a mean loss.
        let (input, hidden) = (2, 3);
        let mk = |scale: f64, phase: f64, shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            Tensor::new(
                shape,
                (0..n).map(|i| ((i as f64 + phase) * 0.61).sin() * scale).collect(),
            )
            .unwrap()
        };
        let params: Vec<Tensor> = (0..12)
            .map(|k| {
                let shape = match k % 3 {
                    0 => vec![input, hidden],
                    1 => vec![hidden, hidden],
                    _ => vec![hidden],
                };
                mk(0.6, k as f64, shape)
            })
            .collect();

        let err: f64 = gradient_check::<ModelError, _>(
            |tape, ids| {
                let cell = BoundRnnCell::Lstm {
                    w_xi: ids[0],
                    w_hi: ids[1],
                    b_i: ids[2],
                    w_xf: ids[3],
                    w_hf: ids[4],
                    b_f: ids[5],
                    w_xg: ids[6],
                    w_hg: ids[7],
                    b_g: ids[8],
                    w_xo: ids[9],
                    w_ho: ids[10],
                    b_o: ids[11],
                };
                let x1 = tape.constant(&mk(0.8, 31.0, vec![2, input]));
                let x2 = tape.constant(&mk(0.8, 47.0, vec![2, input]));
                let h = tape.constant(&Tensor::zeros(vec![2, hidden]));
                let c = tape.constant(&Tensor::zeros(vec![2, hidden]));
                let (h, c) = lstm_cell(tape, x1, h, c, &cell)?;
                let (h, _c) = lstm_cell(tape, x2, h, c, &cell)?;
                Ok(tape.mean(h)?)
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn two_step_unrolled_gru_matches_finite_differences() {
        let (input, hidden) = (2, 3);
        let mk = |scale: f64, phase: f64, shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            Tensor::new(
                shape,
                (0..n).map(|i| ((i as f64 + phase) * 0.53).cos() * scale).collect(),
            )
            .unwrap()
        };
        let params: Vec<Tensor> = (0..9)
            .map(|k| {
                let shape = match k % 3 {
                    0 => vec![input, hidden],
                    1 => vec![hidden, hidden],
                    _ => vec![hidden],
                };
                mk(0.6, k as f64, shape)
            })
            .collect();

        let err: f64 = gradient_check::<ModelError, _>(
            |tape, ids| {
                let cell = BoundRnnCell::Gru {
                    w_xz: ids[0],
                    w_hz: ids[1],
                    b_z: ids[2],
                    w_xr: ids[3],
                    w_hr: ids[4],
                    b_r: ids[5],
                    w_xn: ids[6],
                    w_hn: ids[7],
                    b_n: ids[8],
                };
                let x1 = tape.constant(&mk(0.8, 13.0, vec![2, input]));
                let x2 = tape.constant(&mk(0.8, 29.0, vec![2, input]));
                let h = tape.constant(&Tensor::zeros(vec![2, hidden]));
                let h = gru_cell(tape, x1, h, &cell)?;
                let h = gru_cell(tape, x2, h, &cell)?;
                Ok(tape.mean(h)?)
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn mismatched_cell_and_state_rejected() {
        let mut tape = Tape::new();
        let cell = zeros_cell(&mut tape, 2, 3, true);
        let h = tape.constant(&Tensor::zeros(vec![1, 3]));
        let x = tape.constant(&Tensor::zeros(vec![1, 2]));
        assert!(step(&mut tape, &cell, x, CellState::Gru { h }).is_err());
    }
}
