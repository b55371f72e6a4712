//! Graph-attention operations over the fused window graph.
//!
//! Scores come from a single-hidden-layer MLP on `[u_i | u_j | gamma_ij]`
//! per ordered node pair; softmax over each node's unmasked neighbors turns
//! them into weights; aggregation is the attention-weighted neighbor sum;
//! and the update is a two-layer relu network with a residual connection,
//! so zeroed update parameters make a layer the identity map.

use super::{ModelConfig, ModelError};
use crate::numerics::{Tape, TapeId};

#[derive(Debug, Clone, Copy)]
pub struct BoundGatLayer {
    pub attn_w: TapeId,
    pub attn_b: TapeId,
    pub attn_out_w: TapeId,
    pub attn_out_b: TapeId,
    pub w1: TapeId,
    pub b1: TapeId,
    pub w2: TapeId,
    pub b2: TapeId,
}

#[derive(Debug, Clone)]
pub struct BoundGatStack {
    pub proj_w: TapeId,
    pub proj_b: TapeId,
    pub layers: Vec<BoundGatLayer>,
}

/// Pairwise correlation scores `e_ij` for every ordered node pair, as an
/// N x N tensor. Pairs with `gamma_ij == 0` still get a value here; the
/// softmax mask in [`gat_weights`] is what excludes them.
pub fn gat_scores(
    tape: &mut Tape,
    features: TapeId,
    gamma: TapeId,
    layer: &BoundGatLayer,
    leaky_slope: f64,
) -> Result<TapeId, ModelError> {
    let n = tape.value(features).shape()[0];
    let pairs = tape.pair_concat(features, gamma)?;
    let hidden = tape.matmul(pairs, layer.attn_w)?;
    let hidden = tape.add(hidden, layer.attn_b)?;
    let hidden = tape.leaky_relu(hidden, leaky_slope)?;
    let scores = tape.matmul(hidden, layer.attn_out_w)?;
    let scores = tape.add(scores, layer.attn_out_b)?;
    Ok(tape.reshape(scores, vec![n, n])?)
}

/// Neighbor mask for a fused adjacency: true where `gamma_ij > 0`.
pub fn neighbor_mask(gamma: &[f64]) -> Vec<bool> {
    gamma.iter().map(|&w| w > 0.0).collect()
}

/// Softmax of the scores over each node's unmasked neighbors. Masked
/// entries are exactly zero and every row sums to one.
pub fn gat_weights(tape: &mut Tape, scores: TapeId, mask: &[bool]) -> Result<TapeId, ModelError> {
    Ok(tape.row_softmax_masked(scores, Some(mask))?)
}

/// Attention-weighted neighbor aggregation `v_i = sum_j alpha_ij u_j`.
pub fn gat_aggregate(
    tape: &mut Tape,
    alpha: TapeId,
    features: TapeId,
) -> Result<TapeId, ModelError> {
    Ok(tape.attend(alpha, features)?)
}

/// Residual update `u_i' = u_i + relu(W2 relu(W1 v_i + b1) + b2)`.
pub fn gat_update(
    tape: &mut Tape,
    features: TapeId,
    messages: TapeId,
    layer: &BoundGatLayer,
) -> Result<TapeId, ModelError> {
    let z = tape.matmul(messages, layer.w1)?;
    let z = tape.add(z, layer.b1)?;
    let z = tape.relu(z)?;
    let z = tape.matmul(z, layer.w2)?;
    let z = tape.add(z, layer.b2)?;
    let z = tape.relu(z)?;
    Ok(tape.add(features, z)?)
}

/// Input projection followed by the full stack of attention layers against
/// one fused graph.
pub fn gat_forward(
    tape: &mut Tape,
    raw_features: TapeId,
    gamma: TapeId,
    stack: &BoundGatStack,
    config: &ModelConfig,
) -> Result<TapeId, ModelError> {
    let mask = neighbor_mask(tape.value(gamma).data());
    let mut u = tape.matmul(raw_features, stack.proj_w)?;
    u = tape.add(u, stack.proj_b)?;
    for layer in &stack.layers {
        let scores = gat_scores(tape, u, gamma, layer, config.leaky_relu_slope)?;
        let alpha = gat_weights(tape, scores, &mask)?;
        let messages = gat_aggregate(tape, alpha, u)?;
        u = gat_update(tape, u, messages, layer)?;
    }
    Ok(u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Tape, Tensor};

    fn leaky(x: f64, slope: f64) -> f64 {
        if x > 0.0 {
            x
        } else {
            slope * x
        }
    }

    /// Mounts a hand-built layer; attention MLP (2d+1 -> h -> 1), update
    /// net (d -> d -> d).
    fn mount_layer(
        tape: &mut Tape,
        attn_w: &Tensor,
        attn_b: &Tensor,
        attn_out_w: &Tensor,
        attn_out_b: &Tensor,
        w1: &Tensor,
        b1: &Tensor,
        w2: &Tensor,
        b2: &Tensor,
    ) -> BoundGatLayer {
        BoundGatLayer {
            attn_w: tape.constant(attn_w),
            attn_b: tape.constant(attn_b),
            attn_out_w: tape.constant(attn_out_w),
            attn_out_b: tape.constant(attn_out_b),
            w1: tape.constant(w1),
            b1: tape.constant(b1),
            w2: tape.constant(w2),
            b2: tape.constant(b2),
        }
    }

    fn pseudo(shape: Vec<usize>, scale: f64, phase: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|i| ((i as f64 * 0.7310 + phase).sin()) * scale)
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn identical_nodes_symmetric_gamma_give_symmetric_scores() {
        let d = 3;
        let mut tape = Tape::new();
        // Two identical nodes.
        let u = Tensor::new(vec![2, d], vec![0.3, -0.1, 0.7, 0.3, -0.1, 0.7]).unwrap();
        let gamma = Tensor::new(vec![2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let (u_id, g_id) = (tape.constant(&u), tape.constant(&gamma));
        let layer = mount_layer(
            &mut tape,
            &pseudo(vec![2 * d + 1, 4], 0.5, 0.1),
            &pseudo(vec![4], 0.2, 0.9),
            &pseudo(vec![4, 1], 0.8, 0.4),
            &Tensor::scalar(0.05).unwrap(),
            &pseudo(vec![d, d], 0.3, 0.2),
            &Tensor::zeros(vec![d]),
            &pseudo(vec![d, d], 0.3, 0.8),
            &Tensor::zeros(vec![d]),
        );
        let e = gat_scores(&mut tape, u_id, g_id, &layer, 0.2).unwrap();
        let v = tape.value(e);
        assert_eq!(v.at(0, 1).to_bits(), v.at(1, 0).to_bits());
    }

    #[test]
    fn zeroed_output_weights_give_constant_bias_scores() {
        let d = 2;
        let mut tape = Tape::new();
        let u = pseudo(vec![3, d], 0.9, 0.3);
        let gamma = pseudo(vec![3, 3], 0.1, 0.6);
        let (u_id, g_id) = (tape.constant(&u), tape.constant(&gamma));
        let layer = mount_layer(
            &mut tape,
            &pseudo(vec![2 * d + 1, 4], 0.5, 0.1),
            &pseudo(vec![4], 0.2, 0.9),
            &Tensor::zeros(vec![4, 1]),
            &Tensor::scalar(-1.25).unwrap(),
            &pseudo(vec![d, d], 0.3, 0.2),
            &Tensor::zeros(vec![d]),
            &pseudo(vec![d, d], 0.3, 0.8),
            &Tensor::zeros(vec![d]),
        );
        let e = gat_scores(&mut tape, u_id, g_id, &layer, 0.2).unwrap();
        assert!(tape.value(e).data().iter().all(|&x| x == -1.25));
    }

    #[test]
    fn scores_match_per_pair_mlp_oracle() {
        let (n, d, h) = (4, 3, 5);
        let slope = 0.2;
        let u = pseudo(vec![n, d], 0.8, 0.25);
        let gamma = pseudo(vec![n, n], 0.4, 0.75);
        let attn_w = pseudo(vec![2 * d + 1, h], 0.5, 0.15);
        let attn_b = pseudo(vec![h], 0.3, 0.45);
        let attn_out_w = pseudo(vec![h, 1], 0.7, 0.65);
        let attn_out_b = Tensor::scalar(0.11).unwrap();

        let mut tape = Tape::new();
        let (u_id, g_id) = (tape.constant(&u), tape.constant(&gamma));
        let layer = mount_layer(
            &mut tape,
            &attn_w,
            &attn_b,
            &attn_out_w,
            &attn_out_b,
            &pseudo(vec![d, d], 0.3, 0.2),
            &Tensor::zeros(vec![d]),
            &pseudo(vec![d, d], 0.3, 0.8),
            &Tensor::zeros(vec![d]),
        );
        let e = gat_scores(&mut tape, u_id, g_id, &layer, slope).unwrap();

        for i in 0..n {
            for j in 0..n {
                // Oracle: evaluate the MLP for this single pair.
                let mut pair = Vec::with_capacity(2 * d + 1);
                pair.extend((0..d).map(|f| u.at(i, f)));
                pair.extend((0..d).map(|f| u.at(j, f)));
                pair.push(gamma.at(i, j));
                let mut score = attn_out_b.data()[0];
                for k in 0..h {
                    let mut acc = attn_b.data()[k];
                    for (w, x) in pair.iter().enumerate() {
                        acc += x * attn_w.at(w, k);
                    }
                    score += leaky(acc, slope) * attn_out_w.at(k, 0);
                }
                let got = tape.value(e).at(i, j);
                assert!((got - score).abs() < 1e-12, "({i},{j}): {got} vs {score}");
            }
        }
    }

    #[test]
    fn weights_uniform_over_constant_scores() {
        let mut tape = Tape::new();
        let scores = tape.constant(&Tensor::new(vec![2, 4], vec![0.7; 8]).unwrap());
        let mask = vec![true, true, true, false, true, true, true, true];
        let alpha = gat_weights(&mut tape, scores, &mask).unwrap();
        let v = tape.value(alpha);
        assert!((v.at(0, 0) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(v.at(0, 3), 0.0);
        assert!((v.at(1, 0) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn weights_follow_dominant_score() {
        let mut tape = Tape::new();
        let scores = tape.constant(&Tensor::new(vec![1, 3], vec![100.0, 0.0, 0.0]).unwrap());
        let alpha = gat_weights(&mut tape, scores, &[true, true, true]).unwrap();
        assert!(tape.value(alpha).at(0, 0) > 0.999999);
    }

    #[test]
    fn weight_rows_sum_to_one() {
        let mut tape = Tape::new();
        let scores = tape.constant(&pseudo(vec![5, 5], 2.0, 0.9));
        let mask: Vec<bool> = (0..25).map(|i| i % 7 != 0).collect();
        let alpha = gat_weights(&mut tape, scores, &mask).unwrap();
        let v = tape.value(alpha);
        for r in 0..5 {
            let sum: f64 = (0..5).map(|c| v.at(r, c)).sum();
            assert!((sum - 1.0).abs() < 1e-9);
            for c in 0..5 {
                if !mask[r * 5 + c] {
                    assert_eq!(v.at(r, c), 0.0);
                }
            }
        }
    }

    #[test]
    fn aggregate_matches_double_loop_oracle() {
        let (n, d) = (4, 3);
        let alpha = pseudo(vec![n, n], 0.5, 0.35).data().to_vec();
        let alpha = Tensor::new(vec![n, n], alpha.iter().map(|x| x.abs()).collect()).unwrap();
        let u = pseudo(vec![n, d], 0.8, 0.55);
        let mut tape = Tape::new();
        let (a_id, u_id) = (tape.constant(&alpha), tape.constant(&u));
        let v = gat_aggregate(&mut tape, a_id, u_id).unwrap();
        for i in 0..n {
            for f in 0..d {
                let expect: f64 = (0..n).map(|j| alpha.at(i, j) * u.at(j, f)).sum();
                assert!((tape.value(v).at(i, f) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn update_with_zero_params_is_identity() {
        let d = 3;
        let mut tape = Tape::new();
        let u = pseudo(vec![4, d], 0.9, 0.15);
        let msg = pseudo(vec![4, d], 0.7, 0.85);
        let (u_id, v_id) = (tape.constant(&u), tape.constant(&msg));
        let layer = mount_layer(
            &mut tape,
            &pseudo(vec![2 * d + 1, 2], 0.5, 0.1),
            &Tensor::zeros(vec![2]),
            &pseudo(vec![2, 1], 0.5, 0.2),
            &Tensor::zeros(vec![1]),
            &Tensor::zeros(vec![d, d]),
            &Tensor::zeros(vec![d]),
            &Tensor::zeros(vec![d, d]),
            &Tensor::zeros(vec![d]),
        );
        let out = gat_update(&mut tape, u_id, v_id, &layer).unwrap();
        assert_eq!(tape.value(out).data(), u.data());
    }

    #[test]
    fn update_matches_formula_oracle() {
        let d = 3;
        let u = pseudo(vec![2, d], 0.6, 0.42);
        let msg = pseudo(vec![2, d], 0.9, 0.11);
        let w1 = pseudo(vec![d, d], 0.5, 0.33);
        let b1 = pseudo(vec![d], 0.2, 0.77);
        let w2 = pseudo(vec![d, d], 0.4, 0.21);
        let b2 = pseudo(vec![d], 0.1, 0.67);
        let mut tape = Tape::new();
        let (u_id, v_id) = (tape.constant(&u), tape.constant(&msg));
        let layer = mount_layer(
            &mut tape,
            &pseudo(vec![2 * d + 1, 2], 0.5, 0.1),
            &Tensor::zeros(vec![2]),
            &pseudo(vec![2, 1], 0.5, 0.2),
            &Tensor::zeros(vec![1]),
            &w1,
            &b1,
            &w2,
            &b2,
        );
        let out = gat_update(&mut tape, u_id, v_id, &layer).unwrap();
        for i in 0..2 {
            for f in 0..d {
                // relu(W2 relu(W1 v + b1) + b2) + u, evaluated directly.
                let hidden: Vec<f64> = (0..d)
                    .map(|k| {
                        let z: f64 =
                            (0..d).map(|m| msg.at(i, m) * w1.at(m, k)).sum::<f64>() + b1.data()[k];
                        z.max(0.0)
                    })
                    .collect();
                let z2: f64 =
                    (0..d).map(|k| hidden[k] * w2.at(k, f)).sum::<f64>() + b2.data()[f];
                let expect = u.at(i, f) + z2.max(0.0);
                assert!((tape.value(out).at(i, f) - expect).abs() < 1e-12);
            }
        }
    }
}
