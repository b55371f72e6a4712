use super::{NumericsError, Tape, TapeId, Tensor};

/// Compares tape gradients against central finite differences.
///
/// `f` must evaluate a scalar loss from the mounted points; it is re-run from
/// a fresh tape for every perturbed coordinate, so it has to be a pure
/// function of the inputs. Returns the maximum over all coordinates of
/// `|g_ad - g_fd| / max(1, |g_fd|)`.
pub fn gradient_check<E, F>(mut f: F, points: &[Tensor], step: f64) -> Result<f64, E>
where
    E: From<NumericsError>,
    F: FnMut(&mut Tape, &[TapeId]) -> Result<TapeId, E>,
{
    if !(step > 0.0) {
        return Err(NumericsError::Optimizer(format!("finite-difference step must be > 0, got {step}")).into());
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<TapeId> = points
        .iter()
        .map(|p| {
            let mut t = p.clone();
            t.set_requires_grad(true);
            tape.leaf(&t)
        })
        .collect();
    let loss = f(&mut tape, &ids)?;
    if !tape.value(loss).is_scalar() {
        return Err(NumericsError::NonScalarLoss(tape.value(loss).shape().to_vec()).into());
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(points)
        .map(|(&id, p)| {
            grads
                .get(id)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();

    // Finite-difference pass, one coordinate at a time.
    let mut eval = |perturbed: &[Tensor]| -> Result<f64, E> {
        let mut tape = Tape::new();
        let ids: Vec<TapeId> = perturbed.iter().map(|p| tape.constant(p)).collect();
        let loss = f(&mut tape, &ids)?;
        let v = tape.value(loss).data()[0];
        if !v.is_finite() {
            return Err(NumericsError::NonFinite { op: "gradient_check" }.into());
        }
        Ok(v)
    };

    let mut work: Vec<Tensor> = points.to_vec();
    let mut max_rel = 0.0f64;
    for (pi, point) in points.iter().enumerate() {
        for ci in 0..point.numel() {
            let orig = point.data()[ci];
            work[pi].data_mut()[ci] = orig + step;
            let up = eval(&work)?;
            work[pi].data_mut()[ci] = orig - step;
            let down = eval(&work)?;
            work[pi].data_mut()[ci] = orig;

            let fd = (up - down) / (2.0 * step);
            let ad = analytic[pi][ci];
            let rel = (ad - fd).abs() / fd.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
